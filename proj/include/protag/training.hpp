#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "protag/common.hpp"
#include "protag/conditioning.hpp"
#include "protag/denoiser.hpp"
#include "protag/experts.hpp"
#include "protag/rng.hpp"
#include "protag/schedules.hpp"
#include "protag/synthdata.hpp"
#include "protag/tensor.hpp"

namespace protag {

// Single-video fine-tuning with the v-prediction objective, random reference
// frame conditioning and joint text+image conditioning dropout, preceded by a
// grounding-pretraining stage on procedurally generated color scenes. The
// pretraining stands in for the pretrained text-to-image base of the
// full-scale system: it is what ties embedding directions to appearance, which
// a single video cannot teach.

struct TrainConfig {
    int steps = 2000;            // fine-tuning steps on the video
    double learning_rate = 3e-4; // full-scale systems use ~3e-5 on a pretrained base
    double cond_dropout_p = 0.1;
    std::uint64_t seed = 0;
    int pretrain_steps = 4800;
    int pretrain_frames = 2;
    double pretrain_lr = 3e-4;
    bool pretrain_t_bias = false;   // uniform t matches the fine-tune objective
    bool pretrain_mixed_res = true; // most clips at half resolution for throughput
    // every k-th fine-tune step rehearses a procedural grounding batch so the
    // embedding->appearance mapping survives long single-video runs (0 = off)
    int rehearsal_every = 4;
    // divergence guard: abort when loss > 10x initial for 100 consecutive steps
    double divergence_factor = 10.0;
    int divergence_patience = 100;

    void validate() const {
        require(steps >= 0, "TrainConfig: steps must be >= 0");
        require(cond_dropout_p >= 0.0 && cond_dropout_p < 1.0, "TrainConfig: need 0 <= cond_dropout_p < 1");
        require(learning_rate > 0.0, "TrainConfig: learning_rate must be positive");
        require(pretrain_steps >= 0 && pretrain_frames >= 1 && pretrain_lr > 0.0, "TrainConfig: bad pretrain settings");
    }
};

// ---- optimizer --------------------------------------------------------------------

class Adam {
public:
    Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0f), v_(n, 0.0f) {}

    void step(std::vector<float>& params, const std::vector<float>& grads) {
        require(params.size() == m_.size() && grads.size() == m_.size(), "Adam: size mismatch");
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = grads[i];
            m_[i] = static_cast<float>(beta1_ * m_[i] + (1.0 - beta1_) * g);
            v_[i] = static_cast<float>(beta2_ * v_[i] + (1.0 - beta2_) * g * g);
            const double mhat = m_[i] / bc1;
            const double vhat = v_[i] / bc2;
            params[i] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + eps_));
        }
    }

    void set_lr(double lr) { lr_ = lr; }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<float> m_, v_;
};

// ---- loss step ----------------------------------------------------------------------

struct LossStepInfo {
    double loss = 0.0;
    int t = 0;
    int ref_frame = 0;
    bool dropped = false;
};

namespace train_detail {

/// One Eq.-1 style draw on an arbitrary (video, field-per-ref, text) tuple.
/// Draw order: t, eps, ref frame, dropout coin — pinned for reproducibility.
/// With `grads` non-null the backward pass runs here too (the tape borrows
/// the conditioning bundle, which lives in this scope). `forced_t` lets the
/// pretraining stage use its own timestep distribution.
inline LossStepInfo loss_step_impl(const Denoiser& model, const VideoTensor& video,
                                   const std::vector<ConditioningField>& field_per_ref,
                                   const Embedding& text, const ControlVolume& control,
                                   const NoiseSchedule& sched, Rng& rng, const TrainConfig& cfg,
                                   DenoiserTape* tape, float* grads,
                                   std::optional<int> forced_t = std::nullopt) {
    LossStepInfo info;
    info.t = forced_t ? *forced_t
                      : 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T_train)));
    VideoTensor eps(video.frames, video.channels, video.height, video.width);
    rng.fill_normal(eps.data);
    info.ref_frame = static_cast<int>(rng.below(static_cast<std::uint64_t>(field_per_ref.size())));
    info.dropped = rng.u01() < cfg.cond_dropout_p;

    const VideoTensor z_t = add_noise(video, eps, info.t, sched);
    const VideoTensor target = v_target(video, eps, info.t, sched);

    ConditioningBundle cond;
    cond.control = control;
    if (info.dropped) {
        cond.text = Embedding::null_of(model.config().cond_dim, EmbeddingSpace::textual);
        // empty image_field -> all-zero grids inside the model
    } else {
        cond.text = text;
        cond.image_field = field_per_ref[static_cast<std::size_t>(info.ref_frame)];
    }

    VideoTensor pred = (tape && grads) ? model.forward_train(z_t, info.t, cond, *tape)
                                       : model.denoise(z_t, info.t, cond);
    double se = 0.0;
    const double n = static_cast<double>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double r = static_cast<double>(pred.data[i]) - target.data[i];
        se += r * r;
    }
    info.loss = se / n;
    if (tape && grads) {
        VideoTensor dv = pred;
        for (std::size_t i = 0; i < pred.size(); ++i)
            dv.data[i] = static_cast<float>(2.0 * (pred.data[i] - target.data[i]) / n);
        model.backward(*tape, dv, grads);
    }
    return info;
}

} // namespace train_detail

/// Spec-facing loss step: conditioning derived from the video itself
/// (whole-frame embedding of a random reference frame, caption text).
inline LossStepInfo loss_step(const Denoiser& model, const VideoTensor& video,
                              const std::string& caption, const NoiseSchedule& sched, Rng& rng,
                              const TrainConfig& cfg, const ExpertRegistry& experts) {
    experts.validate();
    const int levels = model.config().levels;
    std::vector<ConditioningField> fields;
    for (int f = 0; f < video.frames; ++f) {
        const Embedding e = experts.vision_embedder->embed(frame_of(video, f), nullptr);
        fields.push_back(spatialize_embedding(FrameEmbeddings(e), video.frames, video.height,
                                              video.width, levels));
    }
    const Embedding text = experts.text_embedder->embed(caption);
    const ControlVolume control = experts.control_extractor->extract(video);
    return train_detail::loss_step_impl(model, video, fields, text, control, sched, rng, cfg, nullptr,
                                        nullptr);
}

/// Analytic zero-model loss: E||v||^2 = mean_t [ ab_t + (1 - ab_t) * ms(z0) ].
inline double zero_model_baseline_loss(const VideoTensor& video, const NoiseSchedule& sched) {
    const double ms = video.mean_square();
    double acc = 0.0;
    for (int t = 1; t <= sched.T_train; ++t) acc += sched.ab(t) + (1.0 - sched.ab(t)) * ms;
    return acc / sched.T_train;
}

// ---- grounding pretraining -----------------------------------------------------------

namespace train_detail {

inline ColorName random_color(Rng& rng) { return static_cast<ColorName>(rng.below(kNumColors)); }
inline ShapeName random_shape(Rng& rng) { return static_cast<ShapeName>(rng.below(kNumShapes)); }
inline StyleName random_style(Rng& rng) { return static_cast<StyleName>(rng.below(kNumStyles)); }

struct PretrainSample {
    VideoTensor video;
    std::vector<ConditioningField> fields; // one candidate per reference draw
    Embedding text;
    ControlVolume control;
};

/// Procedural (video, field, caption) tuples spanning the embedding space:
///  - region samples: field = per-region masked embeddings (the regime the
///    fusion sampler feeds at edit time),
///  - scene samples: a vocabulary scene with its exact masks,
///  - whole-frame samples: field = one frame's whole embedding everywhere
///    (the regime of per-video fine-tuning and reconstruction).
/// Resolution varies per sample; the network is resolution-agnostic.
inline PretrainSample make_pretrain_sample(Rng& rng, int frames, int resolution, int levels,
                                           const ExpertRegistry& experts) {
    PretrainSample s;
    const double kind = rng.u01();
    const int R = resolution;

    if (kind < 0.4) {
        // two-region video: a random rectangle or disk of color A over color B
        auto rand_rgb = [&](bool pure_vocab) -> Rgb {
            if (pure_vocab) return color_rgb(random_color(rng));
            return Rgb{static_cast<float>(rng.u01()), static_cast<float>(rng.u01()),
                       static_cast<float>(rng.u01())};
        };
        const Rgb ca = rand_rgb(rng.u01() < 0.7);
        const Rgb cb = rand_rgb(rng.u01() < 0.7);
        const bool disk = rng.u01() < 0.5;
        // region must leave some of the outer color visible in every frame
        const int r = 3 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, R / 4 - 2))));
        int cx = r + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, R - 2 * r))));
        int cy = r + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, R - 2 * r))));
        const int vx = static_cast<int>(rng.below(3)) - 1, vy = static_cast<int>(rng.below(3)) - 1;

        s.video = VideoTensor(frames, 3, R, R);
        MaskVolume mask(frames, R, R, 0.0f);
        for (int f = 0; f < frames; ++f) {
            const int ox = std::clamp(cx + vx * f, r, R - 1 - r);
            const int oy = std::clamp(cy + vy * f, r, R - 1 - r);
            for (int y = 0; y < R; ++y)
                for (int x = 0; x < R; ++x) {
                    const bool in = disk ? (x - ox) * (x - ox) + (y - oy) * (y - oy) <= r * r
                                         : std::abs(x - ox) <= r && std::abs(y - oy) <= r;
                    const Rgb& c = in ? ca : cb;
                    s.video.at(f, 0, y, x) = 2.0f * c.r - 1.0f;
                    s.video.at(f, 1, y, x) = 2.0f * c.g - 1.0f;
                    s.video.at(f, 2, y, x) = 2.0f * c.b - 1.0f;
                    if (in) mask.at(f, y, x) = 1.0f;
                }
        }
        std::vector<Embedding> inner_rows, outer_rows;
        for (int f = 0; f < frames; ++f) {
            const Image fr = frame_of(s.video, f);
            Mask2D mf = mask.frame(f);
            Mask2D mo(R, R);
            for (std::size_t i = 0; i < mo.data.size(); ++i) mo.data[i] = 1.0f - mf.data[i];
            inner_rows.push_back(experts.vision_embedder->embed(fr, &mf));
            outer_rows.push_back(experts.vision_embedder->embed(fr, &mo));
        }
        s.fields.push_back(blend_field({mask}, {FrameEmbeddings(inner_rows)},
                                       FrameEmbeddings(outer_rows), levels));
        s.text = Embedding::null_of(kEmbedDim, EmbeddingSpace::textual);
        s.control = experts.control_extractor->extract(s.video);
        return s;
    }

    // vocabulary scene
    SceneDescriptor d;
    d.frames = frames;
    d.resolution = R;
    ProtagonistSpec p;
    p.shape = random_shape(rng);
    p.color = random_color(rng);
    p.size = 0.3 + 0.2 * rng.u01();
    p.trajectory.kind = Trajectory::Kind::linear;
    const double margin = p.size / 2.0 + 0.06;
    p.trajectory.start_x = margin + rng.u01() * (1.0 - 2.0 * margin);
    p.trajectory.start_y = margin + rng.u01() * (1.0 - 2.0 * margin);
    const double vmax = frames > 1 ? (1.0 - 2.0 * margin) / (frames - 1) : 0.0;
    p.trajectory.vel_x = (rng.u01() * 2.0 - 1.0) * vmax * 0.5;
    p.trajectory.vel_y = (rng.u01() * 2.0 - 1.0) * vmax * 0.5;
    // clamp start so the path stays inside
    if (frames > 1) {
        const double ex = p.trajectory.start_x + p.trajectory.vel_x * (frames - 1);
        if (ex < margin) p.trajectory.start_x += margin - ex;
        if (ex > 1.0 - margin) p.trajectory.start_x -= ex - (1.0 - margin);
        const double ey = p.trajectory.start_y + p.trajectory.vel_y * (frames - 1);
        if (ey < margin) p.trajectory.start_y += margin - ey;
        if (ey > 1.0 - margin) p.trajectory.start_y -= ey - (1.0 - margin);
    }
    d.protagonists = {p};
    d.background.style = random_style(rng);
    d.background.color = random_color(rng);
    Scene scene = generate_scene(d);
    s.video = std::move(scene.video);
    s.control = experts.control_extractor->extract(s.video);
    s.text = experts.text_embedder->embed(oracle_caption(d));

    if (kind < 0.7) {
        // masked-region conditioning (fusion-sampler regime)
        std::vector<Embedding> inner_rows, outer_rows;
        for (int f = 0; f < frames; ++f) {
            const Image fr = frame_of(s.video, f);
            Mask2D mf = scene.masks[0].frame(f);
            Mask2D mo(R, R);
            for (std::size_t i = 0; i < mo.data.size(); ++i) mo.data[i] = 1.0f - mf.data[i];
            inner_rows.push_back(experts.vision_embedder->embed(fr, &mf));
            outer_rows.push_back(experts.vision_embedder->embed(fr, &mo));
        }
        s.fields.push_back(blend_field({scene.masks[0]}, {FrameEmbeddings(inner_rows)},
                                       FrameEmbeddings(outer_rows), levels));
    } else {
        // whole-frame conditioning (fine-tuning regime): every frame is a
        // reference candidate
        for (int f = 0; f < frames; ++f) {
            const Embedding e = experts.vision_embedder->embed(frame_of(s.video, f), nullptr);
            s.fields.push_back(
                spatialize_embedding(FrameEmbeddings(e), frames, R, R, levels));
        }
    }
    return s;
}

} // namespace train_detail

/// Grounding pretraining: builds the denoiser and teaches the conditioning
/// pathways (field -> local appearance, control -> structure) on procedural
/// scenes. Deterministic in (config, seed).
inline Denoiser pretrain_base(const DenoiserConfig& dcfg, const TrainConfig& cfg,
                              const NoiseSchedule& sched, const ExpertRegistry& experts,
                              std::vector<double>* losses = nullptr) {
    cfg.validate();
    Rng rng = Rng(cfg.seed).fork("pretrain");
    Denoiser model(dcfg, rng);
    if (cfg.pretrain_steps == 0) return model;

    Adam opt(model.param_count(), cfg.pretrain_lr);
    std::vector<float> grads(model.param_count(), 0.0f);
    DenoiserTape tape;
    const int min_res = 2 << dcfg.levels;
    const int small_res = std::max(min_res, dcfg.height / 2);
    for (int step = 0; step < cfg.pretrain_steps; ++step) {
        // most samples run at half resolution; appearance statistics are
        // resolution-independent and the full-size pass stays exercised
        const int res = cfg.pretrain_mixed_res && rng.u01() < 0.7 ? small_res : dcfg.height;
        // optionally oversample the high-t range, where the target is signal-
        // rather than noise-dominated
        const int T = sched.T_train;
        std::optional<int> forced_t;
        if (cfg.pretrain_t_bias && rng.u01() < 0.5)
            forced_t = T / 2 + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(T - T / 2)));
        auto sample = train_detail::make_pretrain_sample(rng, cfg.pretrain_frames, res, dcfg.levels,
                                                         experts);
        std::fill(grads.begin(), grads.end(), 0.0f);
        const auto info = train_detail::loss_step_impl(model, sample.video, sample.fields, sample.text,
                                                       sample.control, sched, rng, cfg, &tape,
                                                       grads.data(), forced_t);
        opt.step(model.params().values(), grads);
        if (losses) losses->push_back(info.loss);
    }
    return model;
}

// ---- per-video fine-tuning -------------------------------------------------------------

struct TrainResult {
    Denoiser model;
    std::vector<double> losses;          // fine-tune curve (one entry per step)
    std::vector<double> pretrain_losses; // grounding stage curve
    int dropped_steps = 0;
};

/// The Eq.-1 fine-tuning loop on a single video. When `base` is null a fresh
/// model is built and grounding-pretrained first (steps == 0 skips both and
/// returns the zero-init model unchanged).
inline TrainResult train_on_video(const VideoTensor& video, const std::string& caption,
                                  const NoiseSchedule& sched, const TrainConfig& cfg,
                                  const ExpertRegistry& experts, const Denoiser* base = nullptr,
                                  const DenoiserConfig* model_cfg = nullptr) {
    cfg.validate();
    experts.validate();
    require(video.height == video.width, "train_on_video: square frames expected");

    DenoiserConfig dcfg;
    if (model_cfg) dcfg = *model_cfg;
    dcfg.frames = video.frames;
    dcfg.height = video.height;
    dcfg.width = video.width;
    dcfg.validate();

    TrainResult result;
    if (cfg.steps == 0 && base == nullptr) {
        Rng rng = Rng(cfg.seed).fork("build");
        result.model = Denoiser(dcfg, rng);
        return result; // zero-init model unchanged
    }

    if (base != nullptr) {
        require(base->config().height == dcfg.height && base->config().width == dcfg.width &&
                    base->config().levels == dcfg.levels,
                "train_on_video: base model resolution mismatch");
        result.model = *base;
    } else {
        result.model = pretrain_base(dcfg, cfg, sched, experts, &result.pretrain_losses);
    }
    Denoiser& model = result.model;

    // conditioning, precomputed once (experts are pure)
    const int levels = model.config().levels;
    std::vector<ConditioningField> fields;
    for (int f = 0; f < video.frames; ++f) {
        const Embedding e = experts.vision_embedder->embed(frame_of(video, f), nullptr);
        fields.push_back(
            spatialize_embedding(FrameEmbeddings(e), video.frames, video.height, video.width, levels));
    }
    const Embedding text = experts.text_embedder->embed(caption);
    const ControlVolume control = experts.control_extractor->extract(video);

    Rng rng = Rng(cfg.seed).fork("train");
    Adam opt(model.param_count(), cfg.learning_rate);
    std::vector<float> grads(model.param_count(), 0.0f);
    DenoiserTape tape;
    const int min_res = 2 << model.config().levels;
    const int rehearsal_res = std::max(min_res, video.height / 2);
    double initial_loss = 0.0;
    int high_streak = 0;
    for (int step = 0; step < cfg.steps; ++step) {
        const bool rehearse =
            cfg.rehearsal_every > 0 && step % cfg.rehearsal_every == cfg.rehearsal_every - 1;
        if (rehearse) {
            // grounding rehearsal batch; its loss is not part of the
            // source-video curve
            const int res = cfg.pretrain_mixed_res && rng.u01() < 0.7 ? rehearsal_res : video.height;
            auto sample = train_detail::make_pretrain_sample(rng, cfg.pretrain_frames, res,
                                                             model.config().levels, experts);
            std::fill(grads.begin(), grads.end(), 0.0f);
            train_detail::loss_step_impl(model, sample.video, sample.fields, sample.text,
                                         sample.control, sched, rng, cfg, &tape, grads.data());
            opt.step(model.params().values(), grads);
        }
        std::fill(grads.begin(), grads.end(), 0.0f);
        const auto info = train_detail::loss_step_impl(model, video, fields, text, control, sched, rng,
                                                       cfg, &tape, grads.data());
        opt.step(model.params().values(), grads);
        result.losses.push_back(info.loss);
        if (info.dropped) ++result.dropped_steps;

        if (step == 0) initial_loss = info.loss;
        if (!std::isfinite(info.loss) || (step > 0 && info.loss > cfg.divergence_factor * initial_loss)) {
            if (!std::isfinite(info.loss) || ++high_streak >= cfg.divergence_patience)
                throw NumericError("training diverged at step " + std::to_string(step) + ": loss " +
                                   std::to_string(info.loss) + " vs initial " +
                                   std::to_string(initial_loss));
        } else {
            high_streak = 0;
        }
    }
    return result;
}

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& losses) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << "step,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) f << i + 1 << "," << losses[i] << "\n";
}

} // namespace protag
