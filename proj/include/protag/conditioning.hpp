#pragma once

#include <optional>
#include <vector>

#include "protag/experts.hpp"
#include "protag/tensor.hpp"

namespace protag {

// Per-pixel conditioning maps, one grid per resolution level (level 0 = full
// resolution, level l halves the previous one). This is the well-typed
// realization of "adding the image embedding to the latent": the denoiser's
// residual blocks read the grid at their own level through a learned 1x1
// projection.

struct ConditioningField {
    // grids[l]: F x C_e x (H>>l) x (W>>l)
    std::vector<VideoTensor> grids;

    int levels() const { return static_cast<int>(grids.size()) - 1; }
    bool empty() const { return grids.empty(); }

    bool same_shape(const ConditioningField& o) const {
        if (grids.size() != o.grids.size()) return false;
        for (std::size_t i = 0; i < grids.size(); ++i)
            if (!grids[i].same_shape(o.grids[i])) return false;
        return true;
    }
    bool bit_equal(const ConditioningField& o) const {
        if (!same_shape(o)) return false;
        for (std::size_t i = 0; i < grids.size(); ++i)
            if (grids[i].data != o.grids[i].data) return false;
        return true;
    }

    static ConditioningField zeros(int frames, int cond_dim, int height, int width, int levels) {
        ConditioningField f;
        for (int l = 0; l <= levels; ++l)
            f.grids.emplace_back(frames, cond_dim, height >> l, width >> l, 0.0f);
        return f;
    }
};

/// Broadcast per-frame embeddings to every level's spatial grid.
inline ConditioningField spatialize_embedding(const FrameEmbeddings& per_frame, int frames, int height,
                                              int width, int levels) {
    per_frame.check_frames(frames, "spatialize_embedding");
    const int ce = per_frame.dim();
    ConditioningField field = ConditioningField::zeros(frames, ce, height, width, levels);
    for (int l = 0; l <= levels; ++l) {
        VideoTensor& g = field.grids[static_cast<std::size_t>(l)];
        for (int f = 0; f < frames; ++f) {
            const Embedding& e = per_frame.row(f);
            for (int c = 0; c < ce; ++c) {
                const float v = e.data[static_cast<std::size_t>(c)];
                float* row = g.data.data() + g.index(f, c, 0, 0);
                const std::size_t n = static_cast<std::size_t>(g.height) * g.width;
                for (std::size_t i = 0; i < n; ++i) row[i] = v;
            }
        }
    }
    return field;
}

/// 2x area-average downsample, applied l times to reach level l.
inline Mask2D downsample_mask_area(const Mask2D& m, int times) {
    Mask2D cur = m;
    for (int i = 0; i < times; ++i) {
        require(cur.height % 2 == 0 && cur.width % 2 == 0, "downsample_mask_area: odd dimensions");
        Mask2D next(cur.height / 2, cur.width / 2);
        for (int y = 0; y < next.height; ++y)
            for (int x = 0; x < next.width; ++x)
                next.at(y, x) = 0.25f * (cur.at(2 * y, 2 * x) + cur.at(2 * y, 2 * x + 1) +
                                         cur.at(2 * y + 1, 2 * x) + cur.at(2 * y + 1, 2 * x + 1));
        cur = std::move(next);
    }
    return cur;
}

inline MaskVolume downsample_mask_area(const MaskVolume& m, int times) {
    if (times == 0) return m;
    MaskVolume out(m.frames, m.height >> times, m.width >> times);
    for (int f = 0; f < m.frames; ++f) out.set_frame(f, downsample_mask_area(m.frame(f), times));
    return out;
}

/// Nearest-neighbor alternative to area averaging (config option).
inline MaskVolume downsample_mask_nearest(const MaskVolume& m, int times) {
    if (times == 0) return m;
    const int s = 1 << times;
    MaskVolume out(m.frames, m.height >> times, m.width >> times);
    for (int f = 0; f < m.frames; ++f)
        for (int y = 0; y < out.height; ++y)
            for (int x = 0; x < out.width; ++x)
                out.at(f, y, x) = m.at(f, y * s, x * s);
    return out;
}

/// Mask-weighted field: sum_k M_k (x) inner_k + (1 - sum_k M_k) (x) outer,
/// with masks area-averaged (or nearest-sampled) down to each level.
inline ConditioningField blend_field(const std::vector<MaskVolume>& masks,
                                     const std::vector<FrameEmbeddings>& inner,
                                     const FrameEmbeddings& outer, int levels,
                                     bool area_average = true) {
    require(!masks.empty() && masks.size() == inner.size(),
            "blend_field: one mask per inner embedding required");
    const int F = masks.front().frames, H = masks.front().height, W = masks.front().width;
    const int ce = outer.dim();
    for (const auto& e : inner) require(e.dim() == ce, "blend_field: embedding dimension mismatch");
    ConditioningField field = ConditioningField::zeros(F, ce, H, W, levels);
    for (int l = 0; l <= levels; ++l) {
        std::vector<MaskVolume> ml;
        for (const auto& m : masks)
            ml.push_back(area_average ? downsample_mask_area(m, l) : downsample_mask_nearest(m, l));
        VideoTensor& g = field.grids[static_cast<std::size_t>(l)];
        for (int f = 0; f < F; ++f)
            for (int y = 0; y < g.height; ++y)
                for (int x = 0; x < g.width; ++x) {
                    float covered = 0.0f;
                    for (const auto& m : ml) covered += m.at(f, y, x);
                    for (int c = 0; c < ce; ++c) {
                        float v = (1.0f - covered) * outer.row(f).data[static_cast<std::size_t>(c)];
                        for (std::size_t k = 0; k < ml.size(); ++k)
                            v += ml[k].at(f, y, x) * inner[k].row(f).data[static_cast<std::size_t>(c)];
                        g.at(f, c, y, x) = v;
                    }
                }
    }
    return field;
}

/// Reference-only field: normalized mask-weighted mix of the inner embeddings
/// (sum_k M~_k (x) inner_k with M~ = M / sum M where defined, uniform mix
/// elsewhere). Reduces to a constant inner field for a single protagonist.
inline ConditioningField reference_field(const std::vector<MaskVolume>& masks,
                                         const std::vector<FrameEmbeddings>& inner, int levels,
                                         bool area_average = true) {
    require(!masks.empty() && masks.size() == inner.size(),
            "reference_field: one mask per inner embedding required");
    const int F = masks.front().frames, H = masks.front().height, W = masks.front().width;
    const int ce = inner.front().dim();
    const float kinv = 1.0f / static_cast<float>(masks.size());
    ConditioningField field = ConditioningField::zeros(F, ce, H, W, levels);
    for (int l = 0; l <= levels; ++l) {
        std::vector<MaskVolume> ml;
        for (const auto& m : masks)
            ml.push_back(area_average ? downsample_mask_area(m, l) : downsample_mask_nearest(m, l));
        VideoTensor& g = field.grids[static_cast<std::size_t>(l)];
        for (int f = 0; f < F; ++f)
            for (int y = 0; y < g.height; ++y)
                for (int x = 0; x < g.width; ++x) {
                    float denom = 0.0f;
                    for (const auto& m : ml) denom += m.at(f, y, x);
                    for (int c = 0; c < ce; ++c) {
                        float v = 0.0f;
                        for (std::size_t k = 0; k < ml.size(); ++k) {
                            const float w = denom > 0.0f ? ml[k].at(f, y, x) / denom : kinv;
                            v += w * inner[k].row(f).data[static_cast<std::size_t>(c)];
                        }
                        g.at(f, c, y, x) = v;
                    }
                }
    }
    return field;
}

/// Everything the denoiser is conditioned on besides (z_t, t).
struct ConditioningBundle {
    Embedding text;                 // textual space; null embedding = unconditional
    ConditioningField image_field;  // may be all-zeros for unconditional
    std::optional<ControlVolume> control;

    void check(int frames, const char* op) const {
        if (!image_field.empty())
            require(image_field.grids.front().frames == frames,
                    std::string(op) + ": conditioning field frame count mismatch");
        if (control)
            require(control->frames == frames, std::string(op) + ": control frame count mismatch");
    }
};

} // namespace protag
