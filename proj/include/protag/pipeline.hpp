#pragma once

#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "protag/common.hpp"
#include "protag/denoiser.hpp"
#include "protag/experts.hpp"
#include "protag/io.hpp"
#include "protag/metrics.hpp"
#include "protag/sampling.hpp"
#include "protag/schedules.hpp"

namespace protag {

// Three-step inference orchestration: parse the source with the experts,
// prepare the visual/textual clues per application mode, then DDIM-invert the
// source and run the mask-guided sampler. A reconstruct mode (not an editing
// application) exposes inversion fidelity as its own diagnostic.

enum class EditMode { protagonist, background, text2video, reconstruct };

inline const char* to_string(EditMode m) {
    switch (m) {
        case EditMode::protagonist: return "protagonist";
        case EditMode::background: return "background";
        case EditMode::text2video: return "text2video";
        case EditMode::reconstruct: return "reconstruct";
    }
    return "";
}

inline EditMode edit_mode_from_string(const std::string& s) {
    if (s == "protagonist") return EditMode::protagonist;
    if (s == "background") return EditMode::background;
    if (s == "text2video") return EditMode::text2video;
    if (s == "reconstruct") return EditMode::reconstruct;
    throw ValidationError("unknown mode '" + s + "' (protagonist|background|text2video|reconstruct)");
}

struct EditRequest {
    EditMode mode = EditMode::reconstruct;
    std::filesystem::path source;
    std::vector<std::filesystem::path> reference_images;
    std::string prompt;
    // overrides; negative/unset values fall back to defaults
    std::optional<int> tau_f, tau_l, n_steps;
    std::optional<double> guidance;
    std::uint64_t seed = 0;
    bool area_average_masks = true;
    // ablation switches
    bool zero_control = false;     // drop the structure signal everywhere
    bool raw_text_prior = false;   // bypass the prior converter (seeded projection)
    bool feature_fusion = true;
    bool latent_fusion = true;

    void validate() const {
        if (mode == EditMode::protagonist || mode == EditMode::text2video)
            require(!reference_images.empty(), std::string(to_string(mode)) +
                                                   " mode requires at least one reference image");
        if (mode == EditMode::background || mode == EditMode::text2video)
            require(!prompt.empty(), std::string(to_string(mode)) + " mode requires a prompt");
    }
};

struct ParsedSource {
    VideoTensor video;
    std::optional<SceneDescriptor> descriptor;
    std::string caption;
    std::vector<std::string> protagonist_phrases;
    std::vector<MaskVolume> masks; // one per protagonist
    ControlVolume control;
    std::vector<Embedding> per_frame_embeddings; // whole-frame, one per frame
    std::vector<std::string> warnings;
};

inline std::string video_content_hash(const VideoTensor& v) {
    std::uint64_t h = fnv1a64(&v.frames, sizeof v.frames);
    h = fnv1a64(&v.channels, sizeof v.channels, h);
    h = fnv1a64(&v.height, sizeof v.height, h);
    h = fnv1a64(&v.width, sizeof v.width, h);
    h = fnv1a64(v.data.data(), v.data.size() * sizeof(float), h);
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

/// Expert chain over the source directory: caption, protagonist phrases,
/// first-frame segmentation, tracking, control extraction, per-frame
/// embeddings. An empty segmentation is an error; a lost track only warns.
inline ParsedSource parse_source(const std::filesystem::path& dir, const ExpertRegistry& experts) {
    experts.validate();
    ParsedSource out;
    out.video = load_video(dir);
    out.descriptor = try_load_scene_descriptor(dir);
    const SceneDescriptor* sidecar = out.descriptor ? &*out.descriptor : nullptr;

    out.caption = experts.captioner->caption(out.video, sidecar);
    out.protagonist_phrases = experts.protagonist_vqa->answer(out.video, sidecar);
    require(!out.protagonist_phrases.empty(), "parse_source: no protagonist phrases");

    const Image frame0 = frame_of(out.video, 0);
    for (const auto& phrase : out.protagonist_phrases) {
        auto seg = experts.segmenter->segment(frame0, phrase);
        if (seg.empty)
            throw ValidationError("parse_source: empty segmentation for phrase '" + phrase + "'");
        auto track = experts.tracker->track(out.video, seg.mask);
        if (track.lost)
            out.warnings.push_back("tracker lost protagonist '" + phrase + "'; mask carried forward");
        out.masks.push_back(std::move(track.masks));
    }
    out.control = experts.control_extractor->extract(out.video);
    for (int f = 0; f < out.video.frames; ++f)
        out.per_frame_embeddings.push_back(
            experts.vision_embedder->embed(frame_of(out.video, f), nullptr));
    return out;
}

struct Clues {
    std::vector<FrameEmbeddings> protagonist_embeddings; // I_R, one per edited protagonist
    FrameEmbeddings background_embedding;                // I_P
    std::vector<MaskVolume> masks;
    std::vector<std::string> reference_phrases; // vocabulary phrase per reference, when close
    std::vector<std::string> warnings;
};

/// Mode table:
///  - protagonist: I_R from masked references, I_P = per-frame source embeddings
///  - background: I_R = per-frame source embeddings, I_P = prior(prompt)
///  - text2video: I_R from masked references, I_P = prior(prompt)
///  - reconstruct: everything is the source (all-ones mask, unguided)
inline Clues prepare_clues(const EditRequest& request, const ParsedSource& parsed,
                           const ExpertRegistry& experts) {
    request.validate();
    Clues out;
    const FrameEmbeddings source_rows{std::vector<Embedding>(parsed.per_frame_embeddings)};

    auto embed_references = [&]() {
        for (const auto& path : request.reference_images) {
            const Image im = load_image(path);
            auto sal = salient_mask(im);
            Embedding e = sal.empty ? experts.vision_embedder->embed(im, nullptr)
                                    : experts.vision_embedder->embed(im, &sal.mask);
            if (sal.empty)
                out.warnings.push_back("reference " + path.string() +
                                       " has no salient region; whole-image embedding used");
            auto phrase = classify_protagonist_embedding(e);
            out.reference_phrases.push_back(phrase.value_or(""));
            out.protagonist_embeddings.emplace_back(std::move(e));
        }
    };

    switch (request.mode) {
        case EditMode::protagonist: {
            embed_references();
            require(out.protagonist_embeddings.size() <= parsed.masks.size(),
                    "protagonist mode: more references than protagonists in the source");
            out.masks.assign(parsed.masks.begin(),
                             parsed.masks.begin() +
                                 static_cast<std::ptrdiff_t>(out.protagonist_embeddings.size()));
            out.background_embedding = source_rows;
            break;
        }
        case EditMode::background: {
            // every protagonist keeps its source appearance
            for (std::size_t k = 0; k < parsed.masks.size(); ++k)
                out.protagonist_embeddings.push_back(source_rows);
            out.masks = parsed.masks;
            out.background_embedding =
                FrameEmbeddings(request.raw_text_prior
                                    ? raw_text_projection(experts.text_embedder->embed(request.prompt),
                                                          request.seed)
                                    : experts.prior_converter->convert(request.prompt));
            break;
        }
        case EditMode::text2video: {
            embed_references();
            require(out.protagonist_embeddings.size() <= parsed.masks.size(),
                    "text2video mode: more references than protagonists in the source");
            out.masks.assign(parsed.masks.begin(),
                             parsed.masks.begin() +
                                 static_cast<std::ptrdiff_t>(out.protagonist_embeddings.size()));
            out.background_embedding =
                FrameEmbeddings(request.raw_text_prior
                                    ? raw_text_projection(experts.text_embedder->embed(request.prompt),
                                                          request.seed)
                                    : experts.prior_converter->convert(request.prompt));
            break;
        }
        case EditMode::reconstruct: {
            out.protagonist_embeddings.push_back(source_rows);
            out.masks.push_back(
                MaskVolume(parsed.video.frames, parsed.video.height, parsed.video.width, 1.0f));
            out.background_embedding = source_rows;
            break;
        }
    }
    return out;
}

namespace pipeline_detail {

// Token-level caption rewrite: replace the k-th protagonist's color+shape
// words with the reference phrase, and the style word with the prompt's.
inline std::string edited_prompt(const EditRequest& request, const ParsedSource& parsed,
                                 const Clues& clues) {
    std::string caption = parsed.caption;
    auto replace_word = [&](const std::string& from, const std::string& to) {
        if (from == to) return;
        std::size_t pos = caption.find(from);
        if (pos != std::string::npos) caption.replace(pos, from.size(), to);
    };

    if (request.mode == EditMode::protagonist || request.mode == EditMode::text2video) {
        for (std::size_t k = 0; k < clues.reference_phrases.size() &&
                                k < parsed.protagonist_phrases.size();
             ++k) {
            // the source caption is kept verbatim when the reference has no
            // vocabulary phrase
            if (!clues.reference_phrases[k].empty())
                replace_word(parsed.protagonist_phrases[k], clues.reference_phrases[k]);
        }
    }
    if (request.mode == EditMode::background || request.mode == EditMode::text2video) {
        const ParsedAttrs attrs = parse_attrs(request.prompt);
        if (attrs.style) {
            for (int s = 0; s < kNumStyles; ++s)
                replace_word(style_adjective(static_cast<StyleName>(s)), style_adjective(*attrs.style));
        }
    }
    return caption;
}

} // namespace pipeline_detail

struct EditResult {
    VideoTensor video;
    nlohmann::json report;
};

/// Third inference step: invert the source under its own conditioning, then
/// run the mask-guided sampler with the prepared clues. The checkpoint must
/// have been fine-tuned on this source (hash recorded at train time).
inline EditResult edit(const EditRequest& request, const Denoiser& model,
                       const nlohmann::json& checkpoint_header, const NoiseSchedule& sched,
                       const ExpertRegistry& experts, SampleTrace* trace_out = nullptr) {
    request.validate();
    ParsedSource parsed = parse_source(request.source, experts);
    if (request.zero_control)
        parsed.control = ControlVolume(parsed.video.frames, parsed.video.height, parsed.video.width, 0.0f);

    const std::string source_hash = video_content_hash(parsed.video);
    const std::string trained_hash = checkpoint_header.value("source_hash", "");
    if (trained_hash != source_hash)
        throw ValidationError("model was not fine-tuned on this source (checkpoint hash " +
                              trained_hash + ", source hash " + source_hash + ")");

    Clues clues = prepare_clues(request, parsed, experts);

    DenoiseFn fn = [&model](const VideoTensor& z, int t, const ConditioningBundle& cond) {
        return model.denoise(z, t, cond);
    };
    const int levels = model.config().levels;
    const int n_steps = request.n_steps.value_or(50);

    // inversion under source conditioning, unguided
    ConditioningBundle source_cond;
    source_cond.text = experts.text_embedder->embed(parsed.caption);
    source_cond.image_field =
        spatialize_embedding(FrameEmbeddings(std::vector<Embedding>(parsed.per_frame_embeddings)),
                             parsed.video.frames, parsed.video.height, parsed.video.width, levels);
    source_cond.control = parsed.control;
    VideoTensor z_T = ddim_invert(parsed.video, source_cond, fn, sched, n_steps);

    FusionConfig fusion;
    fusion.masks = clues.masks;
    fusion.protagonist_embeddings = clues.protagonist_embeddings;
    fusion.background_embedding = clues.background_embedding;
    fusion.tau_f = request.tau_f.value_or(default_tau(sched));
    fusion.tau_l = request.tau_l.value_or(default_tau(sched));
    fusion.guidance = request.mode == EditMode::reconstruct ? 1.0 : request.guidance.value_or(7.5);
    fusion.n_steps = n_steps;
    fusion.field_levels = levels;
    fusion.area_average_masks = request.area_average_masks;
    fusion.feature_fusion = request.feature_fusion;
    fusion.latent_fusion = request.latent_fusion;

    const std::string prompt_text = pipeline_detail::edited_prompt(request, parsed, clues);
    SampleTrace trace;
    VideoTensor out = mask_guided_sample(z_T, fn, sched, experts.text_embedder->embed(prompt_text),
                                         parsed.control, fusion, &trace);
    if (trace_out) *trace_out = trace;

    // report: settings, warnings, metric block per mode
    EditResult result;
    result.video = out;
    nlohmann::json rep;
    rep["mode"] = to_string(request.mode);
    rep["tau_f"] = fusion.tau_f;
    rep["tau_l"] = fusion.tau_l;
    rep["guidance"] = fusion.guidance;
    rep["n_steps"] = fusion.n_steps;
    rep["seed"] = request.seed;
    rep["prompt"] = request.prompt;
    rep["edited_prompt"] = prompt_text;
    rep["source_hash"] = source_hash;
    rep["caption"] = parsed.caption;
    nlohmann::json warn = nlohmann::json::array();
    for (const auto& w : parsed.warnings) warn.push_back(w);
    for (const auto& w : clues.warnings) warn.push_back(w);
    rep["warnings"] = warn;

    nlohmann::json metrics;
    {
        // clamp to valid range for metric purposes (saving clamps anyway)
        VideoTensor clamped = out;
        for (auto& v : clamped.data) v = std::clamp(v, -1.0f, 1.0f);

        if (request.mode == EditMode::reconstruct) {
            double se = 0;
            for (std::size_t i = 0; i < clamped.size(); ++i) {
                const double d = static_cast<double>(clamped.data[i]) - parsed.video.data[i];
                se += d * d;
            }
            metrics["rms_error"] = std::sqrt(se / static_cast<double>(clamped.size()));
            metrics["background_preservation"] =
                background_preservation(clamped, parsed.video, parsed.masks);
        } else {
            metrics["background_preservation"] =
                background_preservation(clamped, parsed.video, clues.masks);
            if (!request.prompt.empty())
                metrics["prompt_fidelity"] = prompt_fidelity(clamped, request.prompt, experts);
            if (request.mode != EditMode::background) {
                nlohmann::json sf = nlohmann::json::array();
                for (std::size_t k = 0; k < clues.protagonist_embeddings.size(); ++k)
                    if (clues.protagonist_embeddings[k].broadcast())
                        sf.push_back(subject_fidelity(clamped,
                                                      clues.protagonist_embeddings[k].row(0),
                                                      clues.masks[k], experts));
                metrics["subject_fidelity"] = sf;
            } else {
                // in-mask fidelity w.r.t. the source protagonist appearance
                nlohmann::json sf = nlohmann::json::array();
                for (std::size_t k = 0; k < parsed.masks.size(); ++k) {
                    const Mask2D m0 = parsed.masks[k].frame(0);
                    if (m0.empty_mask()) continue;
                    const Embedding source_prot =
                        experts.vision_embedder->embed(frame_of(parsed.video, 0), &m0);
                    sf.push_back(subject_fidelity(clamped, source_prot, parsed.masks[k], experts));
                }
                metrics["subject_fidelity_vs_source"] = sf;
            }
        }
    }
    rep["metrics"] = metrics;
    rep["trace_steps"] = static_cast<int>(trace.steps.size());
    result.report = rep;
    return result;
}

} // namespace protag
