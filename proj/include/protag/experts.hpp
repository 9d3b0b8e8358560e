#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "protag/common.hpp"
#include "protag/rng.hpp"
#include "protag/scene.hpp"
#include "protag/synthdata.hpp"
#include "protag/tensor.hpp"
#include "protag/vocab.hpp"

namespace protag {

// The expert ensemble behind fixed interfaces. Every pretrained model of the
// full-scale system (captioner/VQA, grounded segmentation, mask tracking,
// vision/text embedders, prior converter, control extractor) maps to one
// interface here; the bundled implementations are deterministic oracles over
// the synthetic corpus.

inline constexpr int kEmbedDim = 32;       // shared embedding width C_e
inline constexpr int kHistBins = 27;       // 3x3x3 RGB cube
inline constexpr float kMomentWeight = 0.2f;

// ---- embedders --------------------------------------------------------------

/// 27-bin RGB histogram over (masked) pixels plus 5 mask shape moments
/// (area fraction, centroid x/y, normalized second moments), unit-normalized.
inline Embedding embed_image(const Image& im, const Mask2D* mask = nullptr) {
    require(im.channels == 3, "embed_image: expected RGB image");
    if (mask)
        require(mask->height == im.height && mask->width == im.width, "embed_image: mask shape mismatch");

    std::array<double, kHistBins> hist{};
    double wsum = 0.0, cx = 0.0, cy = 0.0;
    for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x) {
            const double w = mask ? mask->at(y, x) : 1.0;
            if (w <= 0.0) continue;
            int bin = 0;
            for (int c = 0; c < 3; ++c) {
                const float v01 = std::clamp((im.at(c, y, x) + 1.0f) * 0.5f, 0.0f, 1.0f);
                const int b = std::min(2, static_cast<int>(v01 * 3.0f));
                bin = bin * 3 + b;
            }
            hist[static_cast<std::size_t>(bin)] += w;
            const double x01 = im.width > 1 ? static_cast<double>(x) / (im.width - 1) : 0.5;
            const double y01 = im.height > 1 ? static_cast<double>(y) / (im.height - 1) : 0.5;
            cx += w * x01;
            cy += w * y01;
            wsum += w;
        }
    if (mask) require(wsum > 0.0, "embed_image: zero-area mask");
    cx /= wsum;
    cy /= wsum;

    double mu2x = 0.0, mu2y = 0.0;
    for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x) {
            const double w = mask ? mask->at(y, x) : 1.0;
            if (w <= 0.0) continue;
            const double x01 = im.width > 1 ? static_cast<double>(x) / (im.width - 1) : 0.5;
            const double y01 = im.height > 1 ? static_cast<double>(y) / (im.height - 1) : 0.5;
            mu2x += w * (x01 - cx) * (x01 - cx);
            mu2y += w * (y01 - cy) * (y01 - cy);
        }
    mu2x /= wsum;
    mu2y /= wsum;

    std::vector<float> v(kEmbedDim, 0.0f);
    for (int i = 0; i < kHistBins; ++i) v[static_cast<std::size_t>(i)] = static_cast<float>(hist[static_cast<std::size_t>(i)] / wsum);
    const double area = wsum / (static_cast<double>(im.height) * im.width);
    v[27] = kMomentWeight * static_cast<float>(area);
    v[28] = kMomentWeight * static_cast<float>(cx);
    v[29] = kMomentWeight * static_cast<float>(cy);
    v[30] = kMomentWeight * static_cast<float>(std::sqrt(mu2x));
    v[31] = kMomentWeight * static_cast<float>(std::sqrt(mu2y));
    return Embedding(std::move(v), EmbeddingSpace::visual);
}

// textual space layout: [0..5] colors, [6..8] shapes, [9..11] styles,
// [12..16] directions, rest zero-padded
inline Embedding embed_text(const std::string& prompt) {
    std::vector<float> v(kEmbedDim, 0.0f);
    bool any = false;
    for (const auto& tok : tokenize_lower(prompt)) {
        if (auto c = parse_color(tok)) {
            v[static_cast<std::size_t>(*c)] += 1.0f;
            any = true;
        } else if (auto s = parse_shape(tok)) {
            v[6 + static_cast<std::size_t>(*s)] += 1.0f;
            any = true;
        } else if (auto st = parse_style(tok)) {
            v[9 + static_cast<std::size_t>(*st)] += 1.0f;
            any = true;
        } else {
            for (int d = 0; d < 5; ++d)
                if (tok == kDirectionWords[static_cast<std::size_t>(d)]) {
                    v[static_cast<std::size_t>(12 + d)] += 1.0f;
                    any = true;
                }
        }
    }
    if (!any) {
        // neutral embedding for empty / out-of-vocabulary prompts, flagged
        for (int i = 0; i < 17; ++i) v[static_cast<std::size_t>(i)] = 1.0f;
        Embedding e(std::move(v), EmbeddingSpace::textual);
        e.flagged = true;
        return e;
    }
    return Embedding(std::move(v), EmbeddingSpace::textual);
}

// ---- segmentation & tracking -------------------------------------------------

struct SegmentResult {
    Mask2D mask;
    bool empty = false; // no pixel matched the phrase color
};

struct TrackResult {
    MaskVolume masks;
    bool lost = false; // some frame had no candidate; previous mask carried
};

namespace expert_detail {

struct Component {
    std::vector<int> pixels; // y*W + x
    double color_dist = 0.0;
    double cx = 0.0, cy = 0.0;
    int min_x = 0, max_x = 0, min_y = 0, max_y = 0;

    double area() const { return static_cast<double>(pixels.size()); }
    double compactness() const {
        const double bbox = static_cast<double>(max_x - min_x + 1) * (max_y - min_y + 1);
        return area() / bbox;
    }
};

inline double color_distance01(const Image& im, int y, int x, const Rgb& target) {
    double d = 0.0;
    const float t[3] = {target.r, target.g, target.b};
    for (int c = 0; c < 3; ++c) {
        const double v01 = (im.at(c, y, x) + 1.0) * 0.5;
        d = std::max(d, std::abs(v01 - t[c]));
    }
    return d;
}

// 4-connected components over match[y*W+x]
inline std::vector<Component> find_components(const std::vector<char>& match, int H, int W) {
    std::vector<Component> comps;
    std::vector<char> seen(match.size(), 0);
    for (int sy = 0; sy < H; ++sy)
        for (int sx = 0; sx < W; ++sx) {
            const int si = sy * W + sx;
            if (!match[static_cast<std::size_t>(si)] || seen[static_cast<std::size_t>(si)]) continue;
            Component comp;
            comp.min_x = comp.max_x = sx;
            comp.min_y = comp.max_y = sy;
            std::deque<int> q{si};
            seen[static_cast<std::size_t>(si)] = 1;
            while (!q.empty()) {
                const int i = q.front();
                q.pop_front();
                const int y = i / W, x = i % W;
                comp.pixels.push_back(i);
                comp.cx += x;
                comp.cy += y;
                comp.min_x = std::min(comp.min_x, x);
                comp.max_x = std::max(comp.max_x, x);
                comp.min_y = std::min(comp.min_y, y);
                comp.max_y = std::max(comp.max_y, y);
                const int ny[4] = {y - 1, y + 1, y, y};
                const int nx[4] = {x, x, x - 1, x + 1};
                for (int n = 0; n < 4; ++n) {
                    if (ny[n] < 0 || ny[n] >= H || nx[n] < 0 || nx[n] >= W) continue;
                    const int ni = ny[n] * W + nx[n];
                    if (match[static_cast<std::size_t>(ni)] && !seen[static_cast<std::size_t>(ni)]) {
                        seen[static_cast<std::size_t>(ni)] = 1;
                        q.push_back(ni);
                    }
                }
            }
            comp.cx /= comp.area();
            comp.cy /= comp.area();
            comps.push_back(std::move(comp));
        }
    return comps;
}

inline Mask2D component_mask(const Component& comp, int H, int W) {
    Mask2D m(H, W, 0.0f);
    for (int i : comp.pixels) m.data[static_cast<std::size_t>(i)] = 1.0f;
    return m;
}

inline constexpr double kColorTol = 0.2;

} // namespace expert_detail

/// Binary mask of the connected component whose mean color is nearest the
/// named color; compactness breaks ties (filters stripe-like false matches).
inline SegmentResult segment_first_frame(const Image& frame, const std::string& phrase) {
    const ParsedAttrs attrs = parse_attrs(phrase);
    require(attrs.color.has_value(), "segment_first_frame: phrase '" + phrase +
                                         "' names no vocabulary color; " + vocabulary_listing());
    const Rgb target = color_rgb(*attrs.color);
    const int H = frame.height, W = frame.width;

    std::vector<char> match(static_cast<std::size_t>(H) * W, 0);
    bool any = false;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (expert_detail::color_distance01(frame, y, x, target) < expert_detail::kColorTol) {
                match[static_cast<std::size_t>(y) * W + x] = 1;
                any = true;
            }
    if (!any) return {Mask2D(H, W, 0.0f), true};

    auto comps = expert_detail::find_components(match, H, W);
    for (auto& c : comps) {
        double d = 0.0;
        for (int i : c.pixels)
            d += expert_detail::color_distance01(frame, i / W, i % W, target);
        c.color_dist = d / c.area();
    }
    const auto best = std::min_element(comps.begin(), comps.end(), [](const auto& a, const auto& b) {
        if (std::abs(a.color_dist - b.color_dist) > 0.02) return a.color_dist < b.color_dist;
        if (std::abs(a.compactness() - b.compactness()) > 1e-9) return a.compactness() > b.compactness();
        return a.area() > b.area();
    });
    return {expert_detail::component_mask(*best, H, W), false};
}

/// Propagates the first-frame mask: per frame, the component matching the
/// first frame's mean color with area within ±30%, nearest the previous
/// centroid. No candidate: previous mask carried forward, lost flag set.
inline TrackResult track_masks(const VideoTensor& video, const Mask2D& first_mask) {
    require(!first_mask.empty_mask(), "track_masks: first mask is empty");
    require(first_mask.height == video.height && first_mask.width == video.width,
            "track_masks: mask/video shape mismatch");
    const int H = video.height, W = video.width;

    // reference color from frame 0 under the mask
    const Image f0 = frame_of(video, 0);
    double rr = 0, gg = 0, bb = 0, n = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (first_mask.at(y, x) > 0.5f) {
                rr += (f0.at(0, y, x) + 1.0) * 0.5;
                gg += (f0.at(1, y, x) + 1.0) * 0.5;
                bb += (f0.at(2, y, x) + 1.0) * 0.5;
                n += 1;
            }
    const Rgb ref{static_cast<float>(rr / n), static_cast<float>(gg / n), static_cast<float>(bb / n)};
    const double area0 = first_mask.area();

    TrackResult out;
    out.masks = MaskVolume(video.frames, H, W);
    Mask2D prev = first_mask;
    double pcx = 0, pcy = 0;
    {
        double s = 0;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                if (first_mask.at(y, x) > 0.5f) { pcx += x; pcy += y; s += 1; }
        pcx /= s;
        pcy /= s;
    }

    for (int f = 0; f < video.frames; ++f) {
        const Image fr = frame_of(video, f);
        std::vector<char> match(static_cast<std::size_t>(H) * W, 0);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                if (expert_detail::color_distance01(fr, y, x, ref) < expert_detail::kColorTol)
                    match[static_cast<std::size_t>(y) * W + x] = 1;
        auto comps = expert_detail::find_components(match, H, W);

        const expert_detail::Component* best = nullptr;
        double best_d = 0.0;
        for (const auto& c : comps) {
            if (c.area() < 0.7 * area0 || c.area() > 1.3 * area0) continue;
            const double d = (c.cx - pcx) * (c.cx - pcx) + (c.cy - pcy) * (c.cy - pcy);
            if (!best || d < best_d) { best = &c; best_d = d; }
        }
        if (best) {
            prev = expert_detail::component_mask(*best, H, W);
            pcx = best->cx;
            pcy = best->cy;
        } else {
            out.lost = true;
        }
        out.masks.set_frame(f, prev);
    }
    return out;
}

// ---- control extraction -------------------------------------------------------

/// Per-frame Sobel gradient magnitude of luminance, scaled into [0,1].
/// Replicated borders, so constant frames give exactly zero.
inline ControlVolume extract_control(const VideoTensor& video) {
    ControlVolume ctl(video.frames, video.height, video.width, 0.0f);
    const int H = video.height, W = video.width;
    std::vector<float> lum(static_cast<std::size_t>(H) * W);
    for (int f = 0; f < video.frames; ++f) {
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                lum[static_cast<std::size_t>(y) * W + x] =
                    (video.at(f, 0, y, x) + video.at(f, 1, y, x) + video.at(f, 2, y, x)) / 3.0f;
        auto L = [&](int y, int x) {
            y = std::clamp(y, 0, H - 1);
            x = std::clamp(x, 0, W - 1);
            return lum[static_cast<std::size_t>(y) * W + x];
        };
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const float gx = (L(y - 1, x + 1) + 2 * L(y, x + 1) + L(y + 1, x + 1)) -
                                 (L(y - 1, x - 1) + 2 * L(y, x - 1) + L(y + 1, x - 1));
                const float gy = (L(y + 1, x - 1) + 2 * L(y + 1, x) + L(y + 1, x + 1)) -
                                 (L(y - 1, x - 1) + 2 * L(y - 1, x) + L(y - 1, x + 1));
                ctl.at(f, y, x) = std::min(1.0f, std::sqrt(gx * gx + gy * gy) / 8.0f);
            }
    }
    return ctl;
}

// ---- prior converter -----------------------------------------------------------

inline constexpr ColorName kDefaultProtagonistColor = ColorName::red;
inline constexpr ColorName kDefaultBackgroundColor = ColorName::yellow;

/// Text -> visual embedding via canonical render. Protagonist prompts map to
/// the masked embedding of the canonical shape render; background prompts to
/// the full-frame embedding of the canonical background render.
inline Embedding prior_convert(const std::string& prompt) {
    const ParsedAttrs attrs = parse_attrs(prompt);
    require(attrs.any, "prior_convert: no vocabulary token in '" + prompt + "'; " + vocabulary_listing());
    if (attrs.shape) {
        const ColorName color = attrs.color.value_or(kDefaultProtagonistColor);
        const auto render = canonical_render(*attrs.shape, color);
        return embed_image(render.image, &render.mask);
    }
    require(attrs.style.has_value(),
            "prior_convert: prompt '" + prompt + "' names neither a protagonist nor a background style");
    const ColorName color = attrs.style_color.value_or(attrs.color.value_or(kDefaultBackgroundColor));
    const Image bg = canonical_background_render(*attrs.style, color);
    return embed_image(bg, nullptr);
}

// ---- reference helpers ----------------------------------------------------------

/// Grounded-SAM analog for reference images: largest connected component of
/// pixels that differ from the dominant (background) color.
inline SegmentResult salient_mask(const Image& im) {
    const int H = im.height, W = im.width;
    // dominant color from the four corners
    double cr = 0, cg = 0, cb = 0;
    const int ys[4] = {0, 0, H - 1, H - 1}, xs[4] = {0, W - 1, 0, W - 1};
    for (int i = 0; i < 4; ++i) {
        cr += (im.at(0, ys[i], xs[i]) + 1.0) * 0.5;
        cg += (im.at(1, ys[i], xs[i]) + 1.0) * 0.5;
        cb += (im.at(2, ys[i], xs[i]) + 1.0) * 0.5;
    }
    const Rgb bg{static_cast<float>(cr / 4), static_cast<float>(cg / 4), static_cast<float>(cb / 4)};
    std::vector<char> match(static_cast<std::size_t>(H) * W, 0);
    bool any = false;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (expert_detail::color_distance01(im, y, x, bg) > 0.15) {
                match[static_cast<std::size_t>(y) * W + x] = 1;
                any = true;
            }
    if (!any) return {Mask2D(H, W, 0.0f), true};
    auto comps = expert_detail::find_components(match, H, W);
    const auto best = std::max_element(comps.begin(), comps.end(),
                                       [](const auto& a, const auto& b) { return a.area() < b.area(); });
    return {expert_detail::component_mask(*best, H, W), false};
}

/// Fixed seeded linear map textual -> visual, bypassing the prior converter.
/// Used by the no-prior ablation: the projection is untrained on purpose.
inline Embedding raw_text_projection(const Embedding& text, std::uint64_t seed) {
    require(text.space == EmbeddingSpace::textual, "raw_text_projection: textual embedding expected");
    Rng rng = Rng(seed).fork("raw-text-prior");
    const int d = text.dim();
    std::vector<float> out(static_cast<std::size_t>(d), 0.0f);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (int o = 0; o < d; ++o) {
        double acc = 0.0;
        for (int i = 0; i < d; ++i) acc += rng.normal() * scale * text.data[static_cast<std::size_t>(i)];
        out[static_cast<std::size_t>(o)] = static_cast<float>(acc);
    }
    return Embedding(std::move(out), EmbeddingSpace::visual);
}

/// Nearest vocabulary protagonist for an embedding, if close enough.
inline std::optional<std::string> classify_protagonist_embedding(const Embedding& e, double min_cos = 0.85) {
    require(e.space == EmbeddingSpace::visual, "classify_protagonist_embedding: visual embedding expected");
    std::optional<std::string> best;
    double best_cos = min_cos;
    for (int ci = 0; ci < kNumColors; ++ci)
        for (int si = 0; si < kNumShapes; ++si) {
            const auto render = canonical_render(static_cast<ShapeName>(si), static_cast<ColorName>(ci));
            const double c = cosine(e, embed_image(render.image, &render.mask));
            if (c > best_cos) {
                best_cos = c;
                best = std::string(kColorWords[static_cast<std::size_t>(ci)]) + " " +
                       kShapeWords[static_cast<std::size_t>(si)];
            }
        }
    return best;
}

// ---- captioner / VQA -------------------------------------------------------------

inline std::string oracle_caption(const SceneDescriptor& desc) {
    std::string noun;
    for (std::size_t k = 0; k < desc.protagonists.size(); ++k) {
        if (k > 0) noun += " and ";
        noun += "a " + desc.protagonists[k].phrase();
    }
    return noun + " moving " + desc.protagonists[0].trajectory.direction_word() + " on a " +
           style_adjective(desc.background.style) + " background";
}

inline std::vector<std::string> oracle_protagonist_answers(const SceneDescriptor& desc) {
    std::vector<std::string> out;
    for (const auto& p : desc.protagonists) out.push_back(p.phrase());
    return out;
}

// ---- interfaces & registry ---------------------------------------------------------

class ICaptioner {
public:
    virtual ~ICaptioner() = default;
    virtual std::string caption(const VideoTensor& video, const SceneDescriptor* sidecar) const = 0;
};

class IProtagonistVqa {
public:
    virtual ~IProtagonistVqa() = default;
    virtual std::vector<std::string> answer(const VideoTensor& video, const SceneDescriptor* sidecar) const = 0;
};

class ISegmenter {
public:
    virtual ~ISegmenter() = default;
    virtual SegmentResult segment(const Image& frame, const std::string& phrase) const = 0;
};

class ITracker {
public:
    virtual ~ITracker() = default;
    virtual TrackResult track(const VideoTensor& video, const Mask2D& first_mask) const = 0;
};

class IVisionEmbedder {
public:
    virtual ~IVisionEmbedder() = default;
    virtual Embedding embed(const Image& image, const Mask2D* mask) const = 0;
};

class ITextEmbedder {
public:
    virtual ~ITextEmbedder() = default;
    virtual Embedding embed(const std::string& prompt) const = 0;
};

class IPriorConverter {
public:
    virtual ~IPriorConverter() = default;
    virtual Embedding convert(const std::string& prompt) const = 0;
};

class IControlExtractor {
public:
    virtual ~IControlExtractor() = default;
    virtual ControlVolume extract(const VideoTensor& video) const = 0;
};

class OracleCaptioner final : public ICaptioner {
public:
    std::string caption(const VideoTensor&, const SceneDescriptor* sidecar) const override {
        require(sidecar != nullptr, "oracle captioner needs descriptor (scene.json sidecar)");
        return oracle_caption(*sidecar);
    }
};

class OracleVqa final : public IProtagonistVqa {
public:
    std::vector<std::string> answer(const VideoTensor&, const SceneDescriptor* sidecar) const override {
        require(sidecar != nullptr, "oracle VQA needs descriptor (scene.json sidecar)");
        return oracle_protagonist_answers(*sidecar);
    }
};

class OracleSegmenter final : public ISegmenter {
public:
    SegmentResult segment(const Image& frame, const std::string& phrase) const override {
        return segment_first_frame(frame, phrase);
    }
};

class OracleTracker final : public ITracker {
public:
    TrackResult track(const VideoTensor& video, const Mask2D& first_mask) const override {
        return track_masks(video, first_mask);
    }
};

class OracleVisionEmbedder final : public IVisionEmbedder {
public:
    Embedding embed(const Image& image, const Mask2D* mask) const override { return embed_image(image, mask); }
};

class OracleTextEmbedder final : public ITextEmbedder {
public:
    Embedding embed(const std::string& prompt) const override { return embed_text(prompt); }
};

class OraclePriorConverter final : public IPriorConverter {
public:
    Embedding convert(const std::string& prompt) const override { return prior_convert(prompt); }
};

class OracleControlExtractor final : public IControlExtractor {
public:
    ControlVolume extract(const VideoTensor& video) const override { return extract_control(video); }
};

/// One implementation per slot; immutable after assembly.
struct ExpertRegistry {
    std::shared_ptr<const ICaptioner> captioner;
    std::shared_ptr<const IProtagonistVqa> protagonist_vqa;
    std::shared_ptr<const ISegmenter> segmenter;
    std::shared_ptr<const ITracker> tracker;
    std::shared_ptr<const IVisionEmbedder> vision_embedder;
    std::shared_ptr<const ITextEmbedder> text_embedder;
    std::shared_ptr<const IPriorConverter> prior_converter;
    std::shared_ptr<const IControlExtractor> control_extractor;

    void validate() const {
        require(captioner && protagonist_vqa && segmenter && tracker && vision_embedder &&
                    text_embedder && prior_converter && control_extractor,
                "ExpertRegistry: all slots must be filled before pipeline use");
    }
};

inline ExpertRegistry make_oracle_registry() {
    ExpertRegistry r;
    r.captioner = std::make_shared<OracleCaptioner>();
    r.protagonist_vqa = std::make_shared<OracleVqa>();
    r.segmenter = std::make_shared<OracleSegmenter>();
    r.tracker = std::make_shared<OracleTracker>();
    r.vision_embedder = std::make_shared<OracleVisionEmbedder>();
    r.text_embedder = std::make_shared<OracleTextEmbedder>();
    r.prior_converter = std::make_shared<OraclePriorConverter>();
    r.control_extractor = std::make_shared<OracleControlExtractor>();
    return r;
}

/// Assemble from a config naming an implementation per slot, e.g.
/// {"captioner": "oracle", ...}. Unknown names are an error; real-model
/// adapters can be registered here later.
inline ExpertRegistry registry_from_config(const nlohmann::json& cfg) {
    ExpertRegistry r = make_oracle_registry();
    static const std::array<const char*, 8> slots = {
        "captioner", "protagonist_vqa", "segmenter", "tracker",
        "vision_embedder", "text_embedder", "prior_converter", "control_extractor"};
    for (const auto& [key, val] : cfg.items()) {
        bool known_slot = false;
        for (auto s : slots) known_slot = known_slot || key == s;
        require(known_slot, "expert config: unknown slot '" + key + "'");
        const std::string name = val.get<std::string>();
        require(name == "oracle", "expert config: unknown implementation '" + name + "' for slot '" +
                                      key + "' (available: oracle)");
    }
    return r;
}

} // namespace protag
