#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "protag/common.hpp"
#include "protag/tensor.hpp"

namespace protag {

/// Cumulative signal levels alpha_bar[0..T], alpha_bar[0] = 1 exactly,
/// strictly decreasing. Index t is the training timestep.
struct NoiseSchedule {
    int T_train = 0;
    std::vector<double> alpha_bar; // length T_train + 1

    double ab(int t) const {
        require(t >= 0 && t <= T_train, "NoiseSchedule: t out of range [0," + std::to_string(T_train) + "]");
        return alpha_bar[static_cast<std::size_t>(t)];
    }
    float sqrt_ab(int t) const { return static_cast<float>(std::sqrt(ab(t))); }
    float sqrt_1mab(int t) const { return static_cast<float>(std::sqrt(1.0 - ab(t))); }

    void validate() const {
        require(T_train >= 1, "NoiseSchedule: T_train must be >= 1");
        require(alpha_bar.size() == static_cast<std::size_t>(T_train) + 1, "NoiseSchedule: bad length");
        require(alpha_bar[0] == 1.0, "NoiseSchedule: alpha_bar[0] must be exactly 1");
        for (int t = 1; t <= T_train; ++t) {
            require(alpha_bar[t] > 0.0 && alpha_bar[t] <= 1.0, "NoiseSchedule: alpha_bar out of (0,1]");
            require(alpha_bar[t] < alpha_bar[t - 1], "NoiseSchedule: alpha_bar must be strictly decreasing");
        }
    }

    static NoiseSchedule from_alpha_bar(std::vector<double> ab) {
        NoiseSchedule s;
        s.T_train = static_cast<int>(ab.size()) - 1;
        s.alpha_bar = std::move(ab);
        s.validate();
        return s;
    }
};

/// alpha_bar[t] = prod_{s=1..t} (1 - beta_s), beta linear in s.
inline NoiseSchedule make_linear_schedule(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02) {
    require(T >= 1, "make_linear_schedule: T must be >= 1");
    require(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0,
            "make_linear_schedule: need 0 < beta_start < beta_end < 1");
    NoiseSchedule s;
    s.T_train = T;
    s.alpha_bar.resize(static_cast<std::size_t>(T) + 1);
    s.alpha_bar[0] = 1.0;
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double beta = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
        prod *= 1.0 - beta;
        s.alpha_bar[static_cast<std::size_t>(t)] = prod;
    }
    s.validate();
    return s;
}

/// Strictly decreasing sampling-order timesteps in [1, T_train].
struct TimestepLadder {
    std::vector<int> steps;

    int size() const { return static_cast<int>(steps.size()); }

    void validate(int T_train) const {
        require(!steps.empty(), "TimestepLadder: empty");
        for (std::size_t i = 0; i < steps.size(); ++i) {
            require(steps[i] >= 1 && steps[i] <= T_train, "TimestepLadder: step out of [1,T]");
            if (i > 0) require(steps[i] < steps[i - 1], "TimestepLadder: must be strictly decreasing");
        }
    }
};

/// t_i = round(T*i/n) for i = n..1.
inline TimestepLadder make_ladder(const NoiseSchedule& sched, int n_steps = 50) {
    require(n_steps >= 1 && n_steps <= sched.T_train, "make_ladder: need 1 <= n_steps <= T_train");
    TimestepLadder ladder;
    ladder.steps.reserve(static_cast<std::size_t>(n_steps));
    for (int i = n_steps; i >= 1; --i) {
        const double tf = static_cast<double>(sched.T_train) * i / n_steps;
        ladder.steps.push_back(static_cast<int>(std::lround(tf)));
    }
    ladder.validate(sched.T_train);
    return ladder;
}

// ---- closed-form noising / v-parameterization algebra -----------------------

/// z_t = sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps
inline VideoTensor add_noise(const VideoTensor& z0, const VideoTensor& eps, int t, const NoiseSchedule& sched) {
    require_same_shape(z0, eps, "add_noise");
    const float a = sched.sqrt_ab(t), b = sched.sqrt_1mab(t);
    VideoTensor out = z0;
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = a * z0.data[i] + b * eps.data[i];
    return out;
}

/// v = sqrt(ab_t) * eps - sqrt(1 - ab_t) * z0
inline VideoTensor v_target(const VideoTensor& z0, const VideoTensor& eps, int t, const NoiseSchedule& sched) {
    require_same_shape(z0, eps, "v_target");
    const float a = sched.sqrt_ab(t), b = sched.sqrt_1mab(t);
    VideoTensor out = z0;
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = a * eps.data[i] - b * z0.data[i];
    return out;
}

/// x0_hat = sqrt(ab_t) * z_t - sqrt(1-ab_t) * v
/// eps_hat = sqrt(ab_t) * v + sqrt(1-ab_t) * z_t
/// Exact inverse of (add_noise, v_target).
inline std::pair<VideoTensor, VideoTensor> recover_x0_eps(const VideoTensor& z_t, const VideoTensor& v,
                                                          int t, const NoiseSchedule& sched) {
    require_same_shape(z_t, v, "recover_x0_eps");
    const float a = sched.sqrt_ab(t), b = sched.sqrt_1mab(t);
    VideoTensor x0 = z_t, eps = z_t;
    for (std::size_t i = 0; i < z_t.size(); ++i) {
        x0.data[i] = a * z_t.data[i] - b * v.data[i];
        eps.data[i] = a * v.data[i] + b * z_t.data[i];
    }
    return {std::move(x0), std::move(eps)};
}

/// One deterministic DDIM step t -> t_prev (t_prev < t).
inline VideoTensor ddim_step(const VideoTensor& z_t, const VideoTensor& v, int t, int t_prev,
                             const NoiseSchedule& sched) {
    require(t_prev < t, "ddim_step: t_prev must be < t");
    require(t_prev >= 0, "ddim_step: t_prev must be >= 0");
    auto [x0, eps] = recover_x0_eps(z_t, v, t, sched);
    const float a = sched.sqrt_ab(t_prev), b = sched.sqrt_1mab(t_prev);
    VideoTensor out = z_t;
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = a * x0.data[i] + b * eps.data[i];
    return out;
}

/// One DDIM inversion step t -> t_next (t_next > t).
inline VideoTensor ddim_inverse_step(const VideoTensor& z_t, const VideoTensor& v, int t, int t_next,
                                     const NoiseSchedule& sched) {
    require(t_next > t, "ddim_inverse_step: t_next must be > t");
    auto [x0, eps] = recover_x0_eps(z_t, v, t, sched);
    const float a = sched.sqrt_ab(t_next), b = sched.sqrt_1mab(t_next);
    VideoTensor out = z_t;
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = a * x0.data[i] + b * eps.data[i];
    return out;
}

} // namespace protag
