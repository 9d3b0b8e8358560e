#pragma once

#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "protag/io.hpp"
#include "protag/pipeline.hpp"
#include "protag/training.hpp"

namespace protag {

// Command implementations behind the CLI, shaped so tests can drive the same
// code paths in-process.

namespace fs = std::filesystem;
using nlohmann::json;

// ---- synth ------------------------------------------------------------------------

/// Writes one directory per scene (frames, masks, scene.json) plus
/// manifest.json. With no config the default six-scene corpus is generated.
inline json run_synth(const std::optional<fs::path>& config_path, const fs::path& out_dir) {
    std::vector<SceneDescriptor> scenes;
    if (config_path) {
        json cfg = read_json_file(*config_path);
        require(cfg.contains("scenes"), "synth config: missing 'scenes' (path: scenes)");
        require(cfg.at("scenes").is_array() && !cfg.at("scenes").empty(),
                "synth config: 'scenes' must be a non-empty array (path: scenes)");
        int idx = 0;
        for (const auto& sj : cfg.at("scenes")) {
            try {
                scenes.push_back(scene_json::descriptor_from_json(sj));
            } catch (const json::exception& e) {
                throw ValidationError("synth config: bad scene at scenes[" + std::to_string(idx) +
                                      "]: " + e.what());
            }
            ++idx;
        }
    } else {
        scenes = default_corpus();
    }

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string());

    json manifest;
    manifest["scenes"] = json::array();
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        const std::string name = "scene" + std::to_string(i);
        const fs::path dir = out_dir / name;
        Scene scene = generate_scene(scenes[i]);
        save_video(scene.video, dir);
        for (std::size_t k = 0; k < scene.masks.size(); ++k)
            save_masks(scene.masks[k], dir, static_cast<int>(k));
        save_scene_descriptor(scene.descriptor, dir);
        manifest["scenes"].push_back(name);
    }
    write_json_file(out_dir / "manifest.json", manifest);
    return manifest;
}

// ---- train ------------------------------------------------------------------------

struct TrainCommand {
    fs::path scene_dir;
    fs::path out_checkpoint;
    TrainConfig cfg;
    std::optional<fs::path> base_in;   // reuse a pretrained base checkpoint
    std::optional<fs::path> base_out;  // persist the pretrained base for reuse
    std::optional<DenoiserConfig> model_cfg;
};

inline json run_train(const TrainCommand& cmd, const ExpertRegistry& experts,
                      const NoiseSchedule& sched) {
    VideoTensor video = load_video(cmd.scene_dir);
    auto descriptor = try_load_scene_descriptor(cmd.scene_dir);
    const std::string caption =
        experts.captioner->caption(video, descriptor ? &*descriptor : nullptr);

    std::optional<Denoiser> base;
    std::vector<double> pretrain_losses;
    if (cmd.base_in) {
        base = Denoiser::load(*cmd.base_in);
    } else if ((cmd.base_out || cmd.cfg.steps > 0) && cmd.cfg.pretrain_steps > 0) {
        DenoiserConfig dcfg;
        if (cmd.model_cfg) dcfg = *cmd.model_cfg;
        dcfg.frames = video.frames;
        dcfg.height = video.height;
        dcfg.width = video.width;
        base = pretrain_base(dcfg, cmd.cfg, sched, experts, &pretrain_losses);
        if (cmd.base_out) {
            json bh;
            bh["kind"] = "pretrained_base";
            bh["seed"] = cmd.cfg.seed;
            base->save(*cmd.base_out, bh);
        }
    }

    TrainResult result =
        train_on_video(video, caption, sched, cmd.cfg, experts, base ? &*base : nullptr,
                       cmd.model_cfg ? &*cmd.model_cfg : nullptr);
    if (result.pretrain_losses.empty()) result.pretrain_losses = std::move(pretrain_losses);

    json header;
    header["source_hash"] = video_content_hash(video);
    header["caption"] = caption;
    header["seed"] = cmd.cfg.seed;
    header["steps"] = cmd.cfg.steps;
    header["learning_rate"] = cmd.cfg.learning_rate;
    header["cond_dropout_p"] = cmd.cfg.cond_dropout_p;
    header["pretrain_steps"] = cmd.cfg.pretrain_steps;
    header["final_loss"] = result.losses.empty() ? 0.0 : result.losses.back();
    result.model.save(cmd.out_checkpoint, header);

    write_loss_csv(fs::path(cmd.out_checkpoint.string() + ".loss.csv"), result.losses);
    if (!result.pretrain_losses.empty())
        write_loss_csv(fs::path(cmd.out_checkpoint.string() + ".pretrain_loss.csv"),
                       result.pretrain_losses);

    json summary;
    summary["checkpoint"] = cmd.out_checkpoint.string();
    summary["steps"] = cmd.cfg.steps;
    summary["final_loss"] = header["final_loss"];
    summary["zero_model_baseline"] = zero_model_baseline_loss(video, sched);
    summary["dropped_steps"] = result.dropped_steps;
    return summary;
}

// ---- edit --------------------------------------------------------------------------

struct EditCommand {
    fs::path checkpoint;
    EditRequest request;
    fs::path out_dir;
    std::optional<fs::path> trace_path;
};

inline json run_edit(const EditCommand& cmd, const ExpertRegistry& experts,
                     const NoiseSchedule& sched) {
    json header;
    Denoiser model = Denoiser::load(cmd.checkpoint, &header);
    SampleTrace trace;
    EditResult result = edit(cmd.request, model, header, sched, experts,
                             cmd.trace_path ? &trace : nullptr);
    save_video(result.video, cmd.out_dir);
    write_json_file(cmd.out_dir / "edit_report.json", result.report);
    if (cmd.trace_path) write_json_file(*cmd.trace_path, trace.to_json());
    return result.report;
}

// ---- eval --------------------------------------------------------------------------

struct EvalCommand {
    fs::path source_dir;
    fs::path edited_dir;
    std::string prompt;            // empty: prompt fidelity omitted
    std::optional<fs::path> reference; // absent: subject fidelity omitted
    bool whole_frame = false;
};

inline json run_eval(const EvalCommand& cmd, const ExpertRegistry& experts) {
    ParsedSource parsed = parse_source(cmd.source_dir, experts);
    VideoTensor edited = load_video(cmd.edited_dir);
    require_same_shape(edited, parsed.video, "eval");

    json out;
    out["background_preservation"] = background_preservation(edited, parsed.video, parsed.masks);
    if (!cmd.prompt.empty())
        out["prompt_fidelity"] = prompt_fidelity(edited, cmd.prompt, experts);
    else
        out["prompt_fidelity"] = nullptr;
    if (cmd.reference) {
        const Image ref = load_image(*cmd.reference);
        auto sal = salient_mask(ref);
        const Embedding e = sal.empty ? experts.vision_embedder->embed(ref, nullptr)
                                      : experts.vision_embedder->embed(ref, &sal.mask);
        out["subject_fidelity"] =
            subject_fidelity(edited, e, parsed.masks.front(), experts, cmd.whole_frame);
    } else {
        out["subject_fidelity"] = nullptr;
    }
    return out;
}

// ---- ablate ------------------------------------------------------------------------

struct AblateCommand {
    fs::path checkpoint;
    fs::path scene_dir;
    fs::path out_dir;
    std::uint64_t seed = 0;
    int n_seeds = 3;
    int jobs = 1;
    std::optional<fs::path> reference; // default: derived from the source protagonist
    std::string prompt;                // default: derived from the source background
};

namespace runner_detail {

/// References and prompt that differ from the source by construction: one
/// reference per protagonist, with colors distinct from every source
/// protagonist and from each other, plus the next background style.
inline std::pair<std::vector<fs::path>, std::string> default_ablation_target(
    const ParsedSource& parsed, const fs::path& out_dir) {
    std::vector<int> taken;
    for (const auto& phrase : parsed.protagonist_phrases) {
        const ParsedAttrs attrs = parse_attrs(phrase);
        if (attrs.color) taken.push_back(static_cast<int>(*attrs.color));
    }
    std::error_code ec;
    fs::create_directories(out_dir, ec);

    std::vector<fs::path> refs;
    for (std::size_t k = 0; k < parsed.protagonist_phrases.size(); ++k) {
        const ParsedAttrs attrs = parse_attrs(parsed.protagonist_phrases[k]);
        const int color_idx = attrs.color ? static_cast<int>(*attrs.color) : 0;
        const int shape_idx = attrs.shape ? static_cast<int>(*attrs.shape) : 0;
        int ref_color = (color_idx + 2) % kNumColors;
        while (std::find(taken.begin(), taken.end(), ref_color) != taken.end())
            ref_color = (ref_color + 1) % kNumColors;
        taken.push_back(ref_color);
        const auto ref_shape = static_cast<ShapeName>((shape_idx + 1) % kNumShapes);
        const auto render = canonical_render(ref_shape, static_cast<ColorName>(ref_color),
                                             parsed.video.height);
        const fs::path ref_path = out_dir / ("reference" + std::to_string(k) + ".png");
        save_image(render.image, ref_path);
        refs.push_back(ref_path);
    }

    const ParsedAttrs cap_attrs = parse_attrs(parsed.caption);
    const int style_idx = cap_attrs.style ? static_cast<int>(*cap_attrs.style) : 0;
    const auto prompt_style = static_cast<StyleName>((style_idx + 1) % kNumStyles);
    const std::string prompt = std::string("on a ") + style_adjective(prompt_style) + " background";
    return {refs, prompt};
}

} // namespace runner_detail

/// Five-way ablation of one text2video edit: full, control zeroed, prior
/// bypassed, feature fusion off, latent fusion off. Only the no-prior variant
/// depends on the seed (its projection is seeded); seed-independent variants
/// run once and are reused across seeds.
inline json run_ablate(const AblateCommand& cmd, const ExpertRegistry& experts,
                       const NoiseSchedule& sched) {
    json header;
    Denoiser model = Denoiser::load(cmd.checkpoint, &header);
    ParsedSource parsed = parse_source(cmd.scene_dir, experts);

    std::vector<fs::path> ref_paths;
    std::string prompt = cmd.prompt;
    if (cmd.reference) {
        ref_paths = {*cmd.reference};
        require(!prompt.empty(), "ablate: --prompt required when --ref is given");
    } else {
        auto [rp, pr] = runner_detail::default_ablation_target(parsed, cmd.out_dir);
        ref_paths = rp;
        if (prompt.empty()) prompt = pr;
    }

    EditRequest base;
    base.mode = EditMode::text2video;
    base.source = cmd.scene_dir;
    base.reference_images = ref_paths;
    base.prompt = prompt;

    struct Variant {
        std::string name;
        bool seed_dependent;
        EditRequest request;
    };
    std::vector<Variant> variants;
    {
        Variant full{"full", false, base};
        Variant no_control{"no_control", false, base};
        no_control.request.zero_control = true;
        Variant no_prior{"no_prior", true, base};
        no_prior.request.raw_text_prior = true;
        Variant no_ff{"no_feature_fusion", false, base};
        no_ff.request.feature_fusion = false;
        Variant no_lf{"no_latent_fusion", false, base};
        no_lf.request.latent_fusion = false;
        variants = {full, no_control, no_prior, no_ff, no_lf};
    }

    std::vector<Embedding> ref_embs;
    for (const auto& rp : ref_paths) {
        const Image ref_image = load_image(rp);
        auto ref_sal = salient_mask(ref_image);
        ref_embs.push_back(ref_sal.empty
                               ? experts.vision_embedder->embed(ref_image, nullptr)
                               : experts.vision_embedder->embed(ref_image, &ref_sal.mask));
    }

    // subject fidelity: each edited region scored against its own reference
    auto measure = [&](const EditRequest& request) {
        EditResult res = edit(request, model, header, sched, experts);
        VideoTensor clamped = res.video;
        for (auto& v : clamped.data) v = std::clamp(v, -1.0f, 1.0f);
        json m;
        m["prompt_fidelity"] = prompt_fidelity(clamped, prompt, experts);
        double sf = 0;
        for (std::size_t k = 0; k < ref_embs.size(); ++k)
            sf += subject_fidelity(clamped, ref_embs[k], parsed.masks[k], experts);
        m["subject_fidelity"] = sf / static_cast<double>(ref_embs.size());
        m["background_preservation"] = background_preservation(clamped, parsed.video, parsed.masks);
        return m;
    };

    // jobs: the edits are independent and the model is read-only
    json per_seed = json::array();
    json rows;
    std::vector<json> variant_static(variants.size());
    for (int s = 0; s < cmd.n_seeds; ++s) {
        const std::uint64_t seed = cmd.seed + static_cast<std::uint64_t>(s);
        std::vector<json> results(variants.size());
        std::vector<std::size_t> todo;
        for (std::size_t vi = 0; vi < variants.size(); ++vi) {
            if (!variants[vi].seed_dependent && !variant_static[vi].is_null()) {
                results[vi] = variant_static[vi];
            } else {
                todo.push_back(vi);
            }
        }
        const int jobs = std::max(1, cmd.jobs);
        if (jobs == 1 || todo.size() <= 1) {
            for (std::size_t vi : todo) {
                EditRequest r = variants[vi].request;
                r.seed = seed;
                results[vi] = measure(r);
            }
        } else {
            std::vector<std::thread> pool;
            std::size_t next = 0;
            std::mutex mu;
            for (int j = 0; j < jobs; ++j)
                pool.emplace_back([&] {
                    for (;;) {
                        std::size_t idx;
                        {
                            std::lock_guard<std::mutex> lock(mu);
                            if (next >= todo.size()) return;
                            idx = todo[next++];
                        }
                        EditRequest r = variants[idx].request;
                        r.seed = seed;
                        json m = measure(r);
                        std::lock_guard<std::mutex> lock(mu);
                        results[idx] = std::move(m);
                    }
                });
            for (auto& th : pool) th.join();
        }
        json seed_row;
        seed_row["seed"] = seed;
        for (std::size_t vi = 0; vi < variants.size(); ++vi) {
            seed_row[variants[vi].name] = results[vi];
            if (!variants[vi].seed_dependent && variant_static[vi].is_null())
                variant_static[vi] = results[vi];
        }
        per_seed.push_back(seed_row);
    }

    for (std::size_t vi = 0; vi < variants.size(); ++vi) {
        double pf = 0, sf = 0, bp = 0;
        for (const auto& row : per_seed) {
            pf += row.at(variants[vi].name).at("prompt_fidelity").get<double>();
            sf += row.at(variants[vi].name).at("subject_fidelity").get<double>();
            bp += row.at(variants[vi].name).at("background_preservation").get<double>();
        }
        rows[variants[vi].name] = {{"prompt_fidelity", pf / cmd.n_seeds},
                                   {"subject_fidelity", sf / cmd.n_seeds},
                                   {"background_preservation", bp / cmd.n_seeds}};
    }

    json report;
    report["prompt"] = prompt;
    report["references"] = json::array();
    for (const auto& rp : ref_paths) report["references"].push_back(rp.string());
    report["seeds"] = json::array();
    for (int s = 0; s < cmd.n_seeds; ++s) report["seeds"].push_back(cmd.seed + static_cast<std::uint64_t>(s));
    report["rows"] = rows;
    report["per_seed"] = per_seed;

    std::error_code ec;
    fs::create_directories(cmd.out_dir, ec);
    write_json_file(cmd.out_dir / "ablation_report.json", report);
    return report;
}

} // namespace protag
