#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "protag/common.hpp"

// Low-level kernels for the denoiser: conv, norm, activations, attention
// pieces, each with an explicit backward. Feature maps are flat float arrays
// laid out (F, C, H, W) row-major. Everything is single-threaded and
// deterministic; reductions that feed statistics accumulate in double.

namespace protag::nn {

#if defined(__GNUC__)
#define PROTAG_RESTRICT __restrict__
#else
#define PROTAG_RESTRICT
#endif

inline std::size_t plane(int H, int W) { return static_cast<std::size_t>(H) * W; }

// Lane-accumulated dot product / sum: 32 independent partial sums give the
// vectorizer several parallel FMA chains (hiding FMA latency) without
// reassociating a single serial chain, so strict IEEE semantics hold.
inline constexpr int kLanes = 32;

inline float dot_lanes(const float* PROTAG_RESTRICT a, const float* PROTAG_RESTRICT b, std::size_t n) {
    float acc[kLanes] = {};
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes)
        for (int j = 0; j < kLanes; ++j) acc[j] += a[i + j] * b[i + j];
    float tail = 0;
    for (; i < n; ++i) tail += a[i] * b[i];
    float total = tail;
    for (int j = 0; j < kLanes; ++j) total += acc[j];
    return total;
}

inline float sum_lanes(const float* PROTAG_RESTRICT a, std::size_t n) {
    float acc[kLanes] = {};
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes)
        for (int j = 0; j < kLanes; ++j) acc[j] += a[i + j];
    float tail = 0;
    for (; i < n; ++i) tail += a[i];
    float total = tail;
    for (int j = 0; j < kLanes; ++j) total += acc[j];
    return total;
}

// ---- conv 3x3, pad 1, stride 1 or 2 -----------------------------------------

// Stride-1 taps run as full-plane passes over rows concatenated in memory;
// the handful of pairs that wrongly wrap across row boundaries are fixed up
// afterwards. Keeps loops long enough to vectorize at every resolution.
inline void conv3x3_fwd(const float* PROTAG_RESTRICT in, int F, int Ci, int H, int W,
                        const float* PROTAG_RESTRICT w, const float* PROTAG_RESTRICT b, int Co,
                        int stride, float* PROTAG_RESTRICT out) {
    const int Ho = H / stride, Wo = W / stride;
    const std::size_t isz = plane(H, W), osz = plane(Ho, Wo);
    for (int f = 0; f < F; ++f) {
        for (int co = 0; co < Co; ++co) {
            float* op = out + (static_cast<std::size_t>(f) * Co + co) * osz;
            const float bias = b ? b[co] : 0.0f;
            for (std::size_t i = 0; i < osz; ++i) op[i] = bias;
            for (int ci = 0; ci < Ci; ++ci) {
                const float* ip = in + (static_cast<std::size_t>(f) * Ci + ci) * isz;
                const float* wp = w + (static_cast<std::size_t>(co) * Ci + ci) * 9;
                if (stride == 1) {
                    for (int ky = 0; ky < 3; ++ky) {
                        const int yo_lo = ky == 0 ? 1 : 0;
                        const int yo_hi = ky == 2 ? H - 1 : H;
                        const int rows = yo_hi - yo_lo;
                        if (rows <= 0) continue;
                        float* ob = op + static_cast<std::size_t>(yo_lo) * W;
                        const float* ib = ip + static_cast<std::size_t>(yo_lo + ky - 1) * W;
                        const float w0 = wp[ky * 3], w1 = wp[ky * 3 + 1], w2 = wp[ky * 3 + 2];
                        const std::size_t len = static_cast<std::size_t>(rows) * W;
                        for (std::size_t j = 0; j < len; ++j) ob[j] += w1 * ib[j];
                        for (std::size_t j = 1; j < len; ++j) ob[j] += w0 * ib[j - 1];
                        for (int r = 1; r < rows; ++r)
                            ob[static_cast<std::size_t>(r) * W] -= w0 * ib[static_cast<std::size_t>(r) * W - 1];
                        for (std::size_t j = 0; j + 1 < len; ++j) ob[j] += w2 * ib[j + 1];
                        for (int r = 0; r + 1 < rows; ++r)
                            ob[static_cast<std::size_t>(r) * W + W - 1] -=
                                w2 * ib[static_cast<std::size_t>(r + 1) * W];
                    }
                } else {
                    for (int yo = 0; yo < Ho; ++yo) {
                        float* orow = op + static_cast<std::size_t>(yo) * Wo;
                        for (int ky = 0; ky < 3; ++ky) {
                            const int yi = yo * stride + ky - 1;
                            if (yi < 0 || yi >= H) continue;
                            const float* irow = ip + static_cast<std::size_t>(yi) * W;
                            const float w0 = wp[ky * 3], w1 = wp[ky * 3 + 1], w2 = wp[ky * 3 + 2];
                            for (int xo = 0; xo < Wo; ++xo) {
                                const int xi = xo * stride;
                                float acc = w1 * irow[xi];
                                if (xi - 1 >= 0) acc += w0 * irow[xi - 1];
                                if (xi + 1 < W) acc += w2 * irow[xi + 1];
                                orow[xo] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
}

inline void conv3x3_bwd(const float* PROTAG_RESTRICT in, int F, int Ci, int H, int W,
                        const float* PROTAG_RESTRICT w, int Co, int stride,
                        const float* PROTAG_RESTRICT dout, float* PROTAG_RESTRICT din,
                        float* PROTAG_RESTRICT dw, float* PROTAG_RESTRICT db) {
    const int Ho = H / stride, Wo = W / stride;
    const std::size_t isz = plane(H, W), osz = plane(Ho, Wo);
    for (int f = 0; f < F; ++f) {
        for (int co = 0; co < Co; ++co) {
            const float* dop = dout + (static_cast<std::size_t>(f) * Co + co) * osz;
            if (db) db[co] += sum_lanes(dop, osz);
            for (int ci = 0; ci < Ci; ++ci) {
                const float* ip = in + (static_cast<std::size_t>(f) * Ci + ci) * isz;
                float* dip = din ? din + (static_cast<std::size_t>(f) * Ci + ci) * isz : nullptr;
                const float* wp = w + (static_cast<std::size_t>(co) * Ci + ci) * 9;
                float* dwp = dw ? dw + (static_cast<std::size_t>(co) * Ci + ci) * 9 : nullptr;
                if (stride == 1) {
                    for (int ky = 0; ky < 3; ++ky) {
                        const int yo_lo = ky == 0 ? 1 : 0;
                        const int yo_hi = ky == 2 ? H - 1 : H;
                        const int rows = yo_hi - yo_lo;
                        if (rows <= 0) continue;
                        const float* dob = dop + static_cast<std::size_t>(yo_lo) * W;
                        const float* ib = ip + static_cast<std::size_t>(yo_lo + ky - 1) * W;
                        const std::size_t len = static_cast<std::size_t>(rows) * W;
                        if (dwp) {
                            float s1 = dot_lanes(dob, ib, len);
                            float s0 = dot_lanes(dob + 1, ib, len - 1);
                            float s2 = dot_lanes(dob, ib + 1, len - 1);
                            for (int r = 1; r < rows; ++r) {
                                const std::size_t j = static_cast<std::size_t>(r) * W;
                                s0 -= dob[j] * ib[j - 1];
                                s2 -= dob[j - 1] * ib[j];
                            }
                            dwp[ky * 3] += s0;
                            dwp[ky * 3 + 1] += s1;
                            dwp[ky * 3 + 2] += s2;
                        }
                        if (dip) {
                            float* db_ = dip + static_cast<std::size_t>(yo_lo + ky - 1) * W;
                            const float w0 = wp[ky * 3], w1 = wp[ky * 3 + 1], w2 = wp[ky * 3 + 2];
                            for (std::size_t j = 0; j < len; ++j) db_[j] += w1 * dob[j];
                            for (std::size_t j = 0; j + 1 < len; ++j) db_[j] += w0 * dob[j + 1];
                            for (std::size_t j = 1; j < len; ++j) db_[j] += w2 * dob[j - 1];
                            for (int r = 1; r < rows; ++r) {
                                const std::size_t j = static_cast<std::size_t>(r) * W;
                                db_[j - 1] -= w0 * dob[j];
                                db_[j] -= w2 * dob[j - 1];
                            }
                        }
                    }
                } else {
                    for (int yo = 0; yo < Ho; ++yo) {
                        const float* dorow = dop + static_cast<std::size_t>(yo) * Wo;
                        for (int ky = 0; ky < 3; ++ky) {
                            const int yi = yo * stride + ky - 1;
                            if (yi < 0 || yi >= H) continue;
                            const float* irow = ip + static_cast<std::size_t>(yi) * W;
                            float* dirow = dip ? dip + static_cast<std::size_t>(yi) * W : nullptr;
                            for (int xo = 0; xo < Wo; ++xo) {
                                const float d = dorow[xo];
                                const int xi = xo * stride;
                                if (dwp) {
                                    dwp[ky * 3 + 1] += d * irow[xi];
                                    if (xi - 1 >= 0) dwp[ky * 3] += d * irow[xi - 1];
                                    if (xi + 1 < W) dwp[ky * 3 + 2] += d * irow[xi + 1];
                                }
                                if (dirow) {
                                    dirow[xi] += wp[ky * 3 + 1] * d;
                                    if (xi - 1 >= 0) dirow[xi - 1] += wp[ky * 3] * d;
                                    if (xi + 1 < W) dirow[xi + 1] += wp[ky * 3 + 2] * d;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---- conv 1x1 ----------------------------------------------------------------

inline void conv1x1_fwd(const float* PROTAG_RESTRICT in, int F, int Ci, int H, int W,
                        const float* PROTAG_RESTRICT w, const float* PROTAG_RESTRICT b, int Co,
                        float* PROTAG_RESTRICT out) {
    const std::size_t n = plane(H, W);
    for (int f = 0; f < F; ++f)
        for (int co = 0; co < Co; ++co) {
            float* op = out + (static_cast<std::size_t>(f) * Co + co) * n;
            const float bias = b ? b[co] : 0.0f;
            for (std::size_t i = 0; i < n; ++i) op[i] = bias;
            for (int ci = 0; ci < Ci; ++ci) {
                const float wv = w[static_cast<std::size_t>(co) * Ci + ci];
                const float* ip = in + (static_cast<std::size_t>(f) * Ci + ci) * n;
                for (std::size_t i = 0; i < n; ++i) op[i] += wv * ip[i];
            }
        }
}

inline void conv1x1_bwd(const float* PROTAG_RESTRICT in, int F, int Ci, int H, int W,
                        const float* PROTAG_RESTRICT w, int Co, const float* PROTAG_RESTRICT dout,
                        float* PROTAG_RESTRICT din, float* PROTAG_RESTRICT dw,
                        float* PROTAG_RESTRICT db) {
    const std::size_t n = plane(H, W);
    for (int f = 0; f < F; ++f)
        for (int co = 0; co < Co; ++co) {
            const float* dop = dout + (static_cast<std::size_t>(f) * Co + co) * n;
            if (db) db[co] += sum_lanes(dop, n);
            for (int ci = 0; ci < Ci; ++ci) {
                const float* ip = in + (static_cast<std::size_t>(f) * Ci + ci) * n;
                if (dw) dw[static_cast<std::size_t>(co) * Ci + ci] += dot_lanes(dop, ip, n);
                if (din) {
                    const float wv = w[static_cast<std::size_t>(co) * Ci + ci];
                    float* dip = din + (static_cast<std::size_t>(f) * Ci + ci) * n;
                    for (std::size_t i = 0; i < n; ++i) dip[i] += wv * dop[i];
                }
            }
        }
}

// ---- nearest-neighbor 2x upsample ---------------------------------------------

inline void upsample2_fwd(const float* in, int F, int C, int H, int W, float* out) {
    const int Ho = H * 2, Wo = W * 2;
    for (int fc = 0; fc < F * C; ++fc) {
        const float* ip = in + static_cast<std::size_t>(fc) * plane(H, W);
        float* op = out + static_cast<std::size_t>(fc) * plane(Ho, Wo);
        for (int y = 0; y < Ho; ++y) {
            const float* irow = ip + static_cast<std::size_t>(y / 2) * W;
            float* orow = op + static_cast<std::size_t>(y) * Wo;
            for (int x = 0; x < Wo; ++x) orow[x] = irow[x / 2];
        }
    }
}

inline void upsample2_bwd(const float* dout, int F, int C, int H, int W, float* din) {
    const int Ho = H * 2, Wo = W * 2;
    for (int fc = 0; fc < F * C; ++fc) {
        const float* dop = dout + static_cast<std::size_t>(fc) * plane(Ho, Wo);
        float* dip = din + static_cast<std::size_t>(fc) * plane(H, W);
        for (int y = 0; y < Ho; ++y) {
            const float* dorow = dop + static_cast<std::size_t>(y) * Wo;
            float* dirow = dip + static_cast<std::size_t>(y / 2) * W;
            for (int x = 0; x < Wo; ++x) dirow[x / 2] += dorow[x];
        }
    }
}

// ---- group norm -----------------------------------------------------------------

struct GroupNormCache {
    std::vector<float> x;
    std::vector<double> mean, inv_std; // per (frame, group)
};

inline void groupnorm_fwd(const float* in, int F, int C, int H, int W, int groups,
                          const float* gamma, const float* beta, float* out, GroupNormCache* cache,
                          double eps = 1e-5) {
    const int cg = C / groups;
    const std::size_t n = plane(H, W);
    const std::size_t gn = static_cast<std::size_t>(cg) * n;
    if (cache) {
        cache->x.assign(in, in + static_cast<std::size_t>(F) * C * n);
        cache->mean.assign(static_cast<std::size_t>(F) * groups, 0.0);
        cache->inv_std.assign(static_cast<std::size_t>(F) * groups, 0.0);
    }
    for (int f = 0; f < F; ++f)
        for (int g = 0; g < groups; ++g) {
            const float* ip = in + (static_cast<std::size_t>(f) * C + static_cast<std::size_t>(g) * cg) * n;
            double s = 0, s2 = 0;
            for (std::size_t i = 0; i < gn; ++i) {
                s += ip[i];
                s2 += static_cast<double>(ip[i]) * ip[i];
            }
            const double mean = s / static_cast<double>(gn);
            const double var = s2 / static_cast<double>(gn) - mean * mean;
            const double inv_std = 1.0 / std::sqrt(var + eps);
            if (cache) {
                cache->mean[static_cast<std::size_t>(f) * groups + g] = mean;
                cache->inv_std[static_cast<std::size_t>(f) * groups + g] = inv_std;
            }
            for (int c = 0; c < cg; ++c) {
                const int ch = g * cg + c;
                const float* xp = ip + static_cast<std::size_t>(c) * n;
                float* op = out + (static_cast<std::size_t>(f) * C + ch) * n;
                const float a = static_cast<float>(gamma[ch] * inv_std);
                const float b = static_cast<float>(beta[ch] - gamma[ch] * mean * inv_std);
                for (std::size_t i = 0; i < n; ++i) op[i] = a * xp[i] + b;
            }
        }
}

inline void groupnorm_bwd(const GroupNormCache& cache, int F, int C, int H, int W, int groups,
                          const float* gamma, const float* dout, float* din, float* dgamma,
                          float* dbeta) {
    const int cg = C / groups;
    const std::size_t n = plane(H, W);
    const double gn = static_cast<double>(cg) * n;
    for (int f = 0; f < F; ++f)
        for (int g = 0; g < groups; ++g) {
            const double mean = cache.mean[static_cast<std::size_t>(f) * groups + g];
            const double inv_std = cache.inv_std[static_cast<std::size_t>(f) * groups + g];
            // m1 = mean(dxhat), m2 = mean(dxhat * xhat), via
            // sum(d * xhat) = inv_std * (sum(d * x) - mean * sum(d))
            double m1 = 0, m2 = 0;
            for (int c = 0; c < cg; ++c) {
                const int ch = g * cg + c;
                const float* xp = cache.x.data() + (static_cast<std::size_t>(f) * C + ch) * n;
                const float* dop = dout + (static_cast<std::size_t>(f) * C + ch) * n;
                const double sb = sum_lanes(dop, n);
                const double sg = inv_std * (dot_lanes(dop, xp, n) - mean * sb);
                m1 += gamma[ch] * sb;
                m2 += gamma[ch] * sg;
                if (dgamma) dgamma[ch] += static_cast<float>(sg);
                if (dbeta) dbeta[ch] += static_cast<float>(sb);
            }
            m1 /= gn;
            m2 /= gn;
            for (int c = 0; c < cg; ++c) {
                const int ch = g * cg + c;
                const float* xp = cache.x.data() + (static_cast<std::size_t>(f) * C + ch) * n;
                const float* dop = dout + (static_cast<std::size_t>(f) * C + ch) * n;
                float* dip = din + (static_cast<std::size_t>(f) * C + ch) * n;
                // dx = inv_std*(gam*d - m1 - xhat*m2) = A*d + B*x + Cc
                const float A = static_cast<float>(inv_std * gamma[ch]);
                const float B = static_cast<float>(-inv_std * inv_std * m2);
                const float Cc = static_cast<float>(inv_std * (-m1 + inv_std * m2 * mean));
                for (std::size_t i = 0; i < n; ++i) dip[i] += A * dop[i] + B * xp[i] + Cc;
            }
        }
}

// ---- silu ---------------------------------------------------------------------

struct SiluCache {
    std::vector<float> x;
    std::vector<float> s; // sigmoid(x), avoids a second exp in the backward
};

inline void silu_fwd(const float* in, std::size_t n, float* out, SiluCache* cache) {
    if (cache) {
        cache->x.assign(in, in + n);
        cache->s.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const float s = 1.0f / (1.0f + std::exp(-in[i]));
            cache->s[i] = s;
            out[i] = in[i] * s;
        }
        return;
    }
    for (std::size_t i = 0; i < n; ++i) {
        const float s = 1.0f / (1.0f + std::exp(-in[i]));
        out[i] = in[i] * s;
    }
}

inline void silu_bwd(const SiluCache& cache, const float* dout, float* din) {
    const std::size_t n = cache.x.size();
    for (std::size_t i = 0; i < n; ++i) {
        const float x = cache.x[i];
        const float s = cache.s[i];
        din[i] += dout[i] * s * (1.0f + x * (1.0f - s));
    }
}

// ---- small dense layers ----------------------------------------------------------

inline void linear_fwd(const float* in, int ci, const float* w, const float* b, int co, float* out) {
    for (int o = 0; o < co; ++o) {
        double s = b ? b[o] : 0.0f;
        const float* wr = w + static_cast<std::size_t>(o) * ci;
        for (int i = 0; i < ci; ++i) s += static_cast<double>(wr[i]) * in[i];
        out[o] = static_cast<float>(s);
    }
}

inline void linear_bwd(const float* in, int ci, const float* w, int co, const float* dout,
                       float* din, float* dw, float* db) {
    for (int o = 0; o < co; ++o) {
        const float d = dout[o];
        const float* wr = w + static_cast<std::size_t>(o) * ci;
        float* dwr = dw ? dw + static_cast<std::size_t>(o) * ci : nullptr;
        if (db) db[o] += d;
        for (int i = 0; i < ci; ++i) {
            if (dwr) dwr[i] += d * in[i];
            if (din) din[i] += wr[i] * d;
        }
    }
}

// per-channel bias over (F, C, H, W)
inline void add_channel_bias_fwd(float* x, int F, int C, int H, int W, const float* bias) {
    const std::size_t n = plane(H, W);
    for (int f = 0; f < F; ++f)
        for (int c = 0; c < C; ++c) {
            float* p = x + (static_cast<std::size_t>(f) * C + c) * n;
            const float b = bias[c];
            for (std::size_t i = 0; i < n; ++i) p[i] += b;
        }
}

inline void add_channel_bias_bwd(const float* dout, int F, int C, int H, int W, float* dbias) {
    const std::size_t n = plane(H, W);
    for (int f = 0; f < F; ++f)
        for (int c = 0; c < C; ++c)
            dbias[c] += sum_lanes(dout + (static_cast<std::size_t>(f) * C + c) * n, n);
}

// FiLM: y = x * (1 + scale_c) + shift_c
struct FilmCache {
    std::vector<float> x;
    std::vector<float> scale; // per channel
};

inline void film_fwd(const float* in, int F, int C, int H, int W, const float* scale,
                     const float* shift, float* out, FilmCache* cache) {
    const std::size_t n = plane(H, W);
    if (cache) {
        cache->x.assign(in, in + static_cast<std::size_t>(F) * C * n);
        cache->scale.assign(scale, scale + C);
    }
    for (int f = 0; f < F; ++f)
        for (int c = 0; c < C; ++c) {
            const float* ip = in + (static_cast<std::size_t>(f) * C + c) * n;
            float* op = out + (static_cast<std::size_t>(f) * C + c) * n;
            const float a = 1.0f + scale[c], b = shift[c];
            for (std::size_t i = 0; i < n; ++i) op[i] = a * ip[i] + b;
        }
}

inline void film_bwd(const FilmCache& cache, int F, int C, int H, int W, const float* dout,
                     float* din, float* dscale, float* dshift) {
    const std::size_t n = plane(H, W);
    for (int f = 0; f < F; ++f)
        for (int c = 0; c < C; ++c) {
            const float* xp = cache.x.data() + (static_cast<std::size_t>(f) * C + c) * n;
            const float* dop = dout + (static_cast<std::size_t>(f) * C + c) * n;
            float* dip = din + (static_cast<std::size_t>(f) * C + c) * n;
            const float a = 1.0f + cache.scale[c];
            for (std::size_t i = 0; i < n; ++i) dip[i] += a * dop[i];
            dscale[c] += dot_lanes(dop, xp, n);
            dshift[c] += sum_lanes(dop, n);
        }
}

inline void softmax_inplace(float* s, int n) {
    float mx = s[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, s[i]);
    double sum = 0;
    for (int i = 0; i < n; ++i) {
        s[i] = std::exp(s[i] - mx);
        sum += s[i];
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (int i = 0; i < n; ++i) s[i] *= inv;
}

// d(softmax)/ds given probabilities p and upstream dp, written into ds
inline void softmax_bwd(const float* p, const float* dp, int n, float* ds) {
    double dot = 0;
    for (int i = 0; i < n; ++i) dot += static_cast<double>(p[i]) * dp[i];
    for (int i = 0; i < n; ++i) ds[i] = p[i] * (dp[i] - static_cast<float>(dot));
}

#undef PROTAG_RESTRICT

} // namespace protag::nn
