#pragma once

#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "protag/common.hpp"
#include "protag/conditioning.hpp"
#include "protag/schedules.hpp"
#include "protag/tensor.hpp"

namespace protag {

// Inference machinery: DDIM inversion of the source, classifier-free
// guidance, and the mask-guided sampler that fuses the reference-image
// embedding with the prior-converted background embedding at the feature
// level (threshold tau_F) and the latent level (threshold tau_L).

/// Any v-predictor: the trained denoiser, or a closed-form oracle in tests.
using DenoiseFn = std::function<VideoTensor(const VideoTensor& z, int t, const ConditioningBundle&)>;

struct FusionConfig {
    int tau_f = 0;            // feature fusion active for t >= tau_f
    int tau_l = 0;            // latent fusion active for t >= tau_l
    double guidance = 7.5;    // classifier-free guidance scale w
    int n_steps = 50;
    std::vector<MaskVolume> masks;                        // per protagonist, full resolution
    std::vector<FrameEmbeddings> protagonist_embeddings;  // I_R, one per protagonist
    FrameEmbeddings background_embedding;                 // I_P
    bool area_average_masks = true;                       // nearest-neighbor otherwise
    bool feature_fusion = true; // off: pure I_R field at all t
    bool latent_fusion = true;  // off: single fused-branch trajectory at all t
    int field_levels = 2;       // resolution levels of the consuming denoiser

    void validate(int T_train) const {
        require(!masks.empty() && masks.size() == protagonist_embeddings.size(),
                "FusionConfig: one mask per protagonist embedding required");
        require(tau_f >= 0 && tau_f <= T_train + 1 && tau_l >= 0 && tau_l <= T_train + 1,
                "FusionConfig: tau out of [0, T+1]");
        require(guidance >= 0.0, "FusionConfig: guidance must be >= 0");
        require(n_steps >= 1, "FusionConfig: n_steps must be >= 1");
        const auto& m0 = masks.front();
        for (const auto& m : masks)
            require(m.frames == m0.frames && m.height == m0.height && m.width == m0.width,
                    "FusionConfig: mask shapes differ");
        for (std::size_t i = 0; i < m0.data.size(); ++i) {
            float s = 0;
            for (const auto& m : masks) s += m.data[i];
            require(s <= 1.0f + 1e-4f, "FusionConfig: per-pixel mask sum must be <= 1");
        }
    }
};

/// Default fusion start: the last 20% of training-scale timesteps run
/// reference-only.
inline int default_tau(const NoiseSchedule& sched) {
    return static_cast<int>(std::lround(0.2 * sched.T_train));
}

// ---- classifier-free guidance -----------------------------------------------------

/// v = v_uncond + w * (v_cond - v_uncond). The unconditional branch keeps the
/// control signal (source structure is preserved in all outputs) and nulls
/// text and image conditioning. w=1 and w=0 skip the unneeded forward pass.
inline VideoTensor guided_v(const DenoiseFn& model, const VideoTensor& z_t, int t,
                            const ConditioningBundle& cond, double w) {
    require(w >= 0.0, "guided_v: w must be >= 0");
    if (w == 1.0) return model(z_t, t, cond);
    ConditioningBundle uncond;
    uncond.control = cond.control;
    VideoTensor v_u = model(z_t, t, uncond);
    if (w == 0.0) return v_u;
    VideoTensor v_c = model(z_t, t, cond);
    const float wf = static_cast<float>(w);
    VideoTensor out = v_u;
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = v_u.data[i] + wf * (v_c.data[i] - v_u.data[i]);
    return out;
}

// ---- fusion field construction ------------------------------------------------------

/// Feature fusion: below tau_F the field is the pure reference field (masks
/// renormalized across protagonists); at or above it, the mask-weighted
/// blend of protagonist embeddings with the background embedding.
inline ConditioningField build_fusion_field(const std::vector<FrameEmbeddings>& protagonist_embeddings,
                                            const FrameEmbeddings& background_embedding,
                                            const std::vector<MaskVolume>& masks, int t, int tau_f,
                                            int levels, bool area_average = true) {
    require(!masks.empty() && masks.size() == protagonist_embeddings.size(),
            "build_fusion_field: one mask per protagonist embedding required");
    if (t < tau_f)
        return reference_field(masks, protagonist_embeddings, levels, area_average);
    return blend_field(masks, protagonist_embeddings, background_embedding, levels, area_average);
}

/// Latent fusion: z = (M * d_ref + d_fused) / (1 + M), with M the summed
/// protagonist mask, broadcast over channels.
inline VideoTensor fuse_latents(const VideoTensor& d_ref, const VideoTensor& d_fused,
                                const std::vector<MaskVolume>& masks) {
    require_same_shape(d_ref, d_fused, "fuse_latents");
    require(!masks.empty(), "fuse_latents: masks required");
    const auto& m0 = masks.front();
    require(m0.frames == d_ref.frames && m0.height == d_ref.height && m0.width == d_ref.width,
            "fuse_latents: masks must be at latent resolution");
    VideoTensor out = d_ref;
    for (int f = 0; f < out.frames; ++f)
        for (int y = 0; y < out.height; ++y)
            for (int x = 0; x < out.width; ++x) {
                float m = 0;
                for (const auto& mk : masks) m += mk.at(f, y, x);
                const float inv = 1.0f / (1.0f + m);
                for (int c = 0; c < out.channels; ++c)
                    out.at(f, c, y, x) = (m * d_ref.at(f, c, y, x) + d_fused.at(f, c, y, x)) * inv;
            }
    return out;
}

// ---- DDIM inversion -------------------------------------------------------------------

/// Ascending ladder application of the inverse step with model-predicted v at
/// each rung; the first hop queries the model at t = 0.
inline VideoTensor ddim_invert(const VideoTensor& video, const ConditioningBundle& cond,
                               const DenoiseFn& model, const NoiseSchedule& sched, int n_steps) {
    require(n_steps >= 0 && n_steps <= sched.T_train, "ddim_invert: bad n_steps");
    if (n_steps == 0) return video;
    TimestepLadder ladder = make_ladder(sched, n_steps);
    std::vector<int> ascending(ladder.steps.rbegin(), ladder.steps.rend());

    const double input_norm = video.norm();
    VideoTensor z = video;
    int t_cur = 0;
    for (int t_next : ascending) {
        VideoTensor v = model(z, t_cur, cond);
        z = ddim_inverse_step(z, v, t_cur, t_next, sched);
        t_cur = t_next;
        if (z.norm() > 1e3 * std::max(1.0, input_norm))
            throw NumericError("ddim_invert: latent norm blew up at t=" + std::to_string(t_next));
    }
    return z;
}

// ---- mask-guided sampling ----------------------------------------------------------------

struct StepTrace {
    int t = 0;
    int t_prev = 0;
    bool feature_fused = false;   // branch B used the masked blend field
    bool latent_fused = false;    // Eq. 7 combination applied
    bool fields_identical = false;
    int forward_passes = 0;
    double z_norm = 0.0;
};

struct SampleTrace {
    std::vector<StepTrace> steps;

    nlohmann::json to_json() const {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& s : steps)
            arr.push_back({{"t", s.t},
                           {"t_prev", s.t_prev},
                           {"feature_fused", s.feature_fused},
                           {"latent_fused", s.latent_fused},
                           {"fields_identical", s.fields_identical},
                           {"forward_passes", s.forward_passes},
                           {"z_norm", s.z_norm}});
        return arr;
    }
};

/// One latent trajectory, up to two conditional forwards per step (reference
/// branch and fused branch) plus a shared unconditional forward for guidance.
/// Below tau_L the reference branch alone advances the latent; otherwise the
/// two one-step results are combined with fuse_latents. Identical branch
/// fields skip the duplicate forward pass.
inline VideoTensor mask_guided_sample(const VideoTensor& z_T, const DenoiseFn& model,
                                      const NoiseSchedule& sched, const Embedding& text,
                                      const std::optional<ControlVolume>& control,
                                      const FusionConfig& fusion, SampleTrace* trace = nullptr) {
    fusion.validate(sched.T_train);
    TimestepLadder ladder = make_ladder(sched, fusion.n_steps);
    const int levels_needed = fusion.field_levels;

    VideoTensor z = z_T;
    for (int i = 0; i < ladder.size(); ++i) {
        const int t = ladder.steps[static_cast<std::size_t>(i)];
        const int t_prev = i + 1 < ladder.size() ? ladder.steps[static_cast<std::size_t>(i) + 1] : 0;

        // branch A: reference-only conditioning field (Eq. 6 realized as the
        // pure-I_R field); branch B: the Eq. 5 field
        ConditioningField field_ref = reference_field(fusion.masks, fusion.protagonist_embeddings,
                                                      levels_needed, fusion.area_average_masks);
        const bool feature_active = fusion.feature_fusion && t >= fusion.tau_f;
        ConditioningField field_fused =
            feature_active ? blend_field(fusion.masks, fusion.protagonist_embeddings,
                                         fusion.background_embedding, levels_needed,
                                         fusion.area_average_masks)
                           : field_ref;
        const bool fields_identical = !feature_active || field_fused.bit_equal(field_ref);

        const bool latent_active = fusion.latent_fusion && t >= fusion.tau_l;
        const bool need_ref_branch = fusion.latent_fusion;           // off: fused trajectory only
        const bool need_fused_branch = !fusion.latent_fusion || latent_active;

        int passes = 0;
        // shared unconditional forward
        std::optional<VideoTensor> v_u;
        if (fusion.guidance != 1.0) {
            ConditioningBundle uncond;
            uncond.control = control;
            v_u = model(z, t, uncond);
            ++passes;
        }
        auto guided = [&](const ConditioningField& field) {
            ConditioningBundle cond;
            cond.text = text;
            cond.image_field = field;
            cond.control = control;
            if (fusion.guidance == 0.0) return *v_u;
            VideoTensor v_c = model(z, t, cond);
            ++passes;
            if (fusion.guidance == 1.0) return v_c;
            const float wf = static_cast<float>(fusion.guidance);
            VideoTensor out = v_c;
            for (std::size_t j = 0; j < out.size(); ++j)
                out.data[j] = v_u->data[j] + wf * (v_c.data[j] - v_u->data[j]);
            return out;
        };

        std::optional<VideoTensor> d_ref, d_fused;
        if (need_ref_branch) {
            VideoTensor v_ref = guided(field_ref);
            d_ref = ddim_step(z, v_ref, t, t_prev, sched);
        }
        if (need_fused_branch) {
            if (fields_identical && d_ref) {
                d_fused = *d_ref; // duplicate forward pass skipped
            } else {
                VideoTensor v_fused = guided(field_fused);
                d_fused = ddim_step(z, v_fused, t, t_prev, sched);
            }
        }

        bool latent_fused_applied = false;
        if (!fusion.latent_fusion) {
            z = std::move(*d_fused);
        } else if (!latent_active) {
            z = std::move(*d_ref);
        } else {
            z = fuse_latents(*d_ref, *d_fused, fusion.masks);
            latent_fused_applied = true;
        }

        if (trace) {
            StepTrace st;
            st.t = t;
            st.t_prev = t_prev;
            st.feature_fused = feature_active; // Eq. 5 branch selection at this t
            st.latent_fused = latent_fused_applied;
            st.fields_identical = fields_identical;
            st.forward_passes = passes;
            st.z_norm = z.norm();
            trace->steps.push_back(st);
        }
    }
    return z;
}

} // namespace protag
