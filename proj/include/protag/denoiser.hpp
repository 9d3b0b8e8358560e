#pragma once

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "protag/common.hpp"
#include "protag/conditioning.hpp"
#include "protag/nn.hpp"
#include "protag/rng.hpp"
#include "protag/tensor.hpp"

namespace protag {

// Visual-textual video denoiser: a small U-shaped network predicting v from
// (z_t, t, text embedding, per-pixel image conditioning field, control).
// Residual blocks carry the timestep embedding and a learned 1x1 projection
// of the conditioning field; the text embedding enters as key/value of a
// cross-attention at every level; temporal attention follows every spatial
// block; the lowest level adds spatial self-attention. The final projection
// is zero-initialized so a fresh model is the zero map.

struct DenoiserConfig {
    int base_channels = 32;
    int levels = 2; // number of 2x downsamples
    int frames = 8;
    int cond_dim = kEmbedDim;
    int height = 32;
    int width = 32;
    bool attention_at_lowest = true;
    bool temporal_attention = true;
    bool temporal_pos_enc = true;
    bool zero_init_output = true;
    int time_dim = 64;
    int time_hidden = 128;
    int groups = 8;

    int mid_channels() const { return base_channels * 2; }
    int channels_at(int level) const { return level >= levels ? mid_channels() : base_channels; }

    void validate() const {
        require(base_channels >= 4 && base_channels % 4 == 0,
                "DenoiserConfig: base_channels must be a positive multiple of 4");
        require(levels >= 1 && levels <= 4, "DenoiserConfig: levels must be in [1,4]");
        require(height % (1 << levels) == 0 && width % (1 << levels) == 0,
                "DenoiserConfig: H and W must be divisible by 2^levels");
        require(frames >= 1, "DenoiserConfig: frames must be >= 1");
        require(cond_dim >= 1, "DenoiserConfig: cond_dim must be >= 1");
        require(time_dim % 2 == 0, "DenoiserConfig: time_dim must be even");
        require(groups >= 1 && base_channels % groups == 0 && mid_channels() % groups == 0,
                "DenoiserConfig: groups must divide channel counts");
    }

    nlohmann::json to_json() const {
        return {{"base_channels", base_channels},
                {"levels", levels},
                {"frames", frames},
                {"cond_dim", cond_dim},
                {"height", height},
                {"width", width},
                {"attention_at_lowest", attention_at_lowest},
                {"temporal_attention", temporal_attention},
                {"temporal_pos_enc", temporal_pos_enc},
                {"zero_init_output", zero_init_output},
                {"time_dim", time_dim},
                {"time_hidden", time_hidden},
                {"groups", groups}};
    }
    static DenoiserConfig from_json(const nlohmann::json& j) {
        DenoiserConfig c;
        c.base_channels = j.at("base_channels").get<int>();
        c.levels = j.at("levels").get<int>();
        c.frames = j.at("frames").get<int>();
        c.cond_dim = j.at("cond_dim").get<int>();
        c.height = j.at("height").get<int>();
        c.width = j.at("width").get<int>();
        c.attention_at_lowest = j.at("attention_at_lowest").get<bool>();
        c.temporal_attention = j.at("temporal_attention").get<bool>();
        c.temporal_pos_enc = j.at("temporal_pos_enc").get<bool>();
        c.zero_init_output = j.at("zero_init_output").get<bool>();
        c.time_dim = j.at("time_dim").get<int>();
        c.time_hidden = j.at("time_hidden").get<int>();
        c.groups = j.at("groups").get<int>();
        c.validate();
        return c;
    }
};

// ---- parameter store -----------------------------------------------------------

struct ParamInfo {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;
    std::vector<int> shape;
};

class ParamStore {
public:
    std::size_t add(std::string name, std::vector<int> shape) {
        std::size_t sz = 1;
        for (int d : shape) sz *= static_cast<std::size_t>(d);
        ParamInfo info{std::move(name), values_.size(), sz, std::move(shape)};
        values_.resize(values_.size() + sz, 0.0f);
        const std::size_t off = info.offset;
        infos_.push_back(std::move(info));
        return off;
    }

    float* at(std::size_t offset) { return values_.data() + offset; }
    const float* at(std::size_t offset) const { return values_.data() + offset; }
    std::size_t size() const { return values_.size(); }
    std::vector<float>& values() { return values_; }
    const std::vector<float>& values() const { return values_; }
    const std::vector<ParamInfo>& infos() const { return infos_; }

    const ParamInfo& info(const std::string& name) const {
        for (const auto& i : infos_)
            if (i.name == name) return i;
        throw ValidationError("ParamStore: no parameter named '" + name + "'");
    }

private:
    std::vector<ParamInfo> infos_;
    std::vector<float> values_;
};

// ---- layer parameter handles -----------------------------------------------------

namespace det {

struct LinearP {
    std::size_t w = 0, b = 0;
    int ci = 0, co = 0;
};
struct ConvP { // 3x3
    std::size_t w = 0, b = 0;
    int ci = 0, co = 0, stride = 1;
};
struct Conv1x1P {
    std::size_t w = 0, b = 0;
    int ci = 0, co = 0;
};
struct GnP {
    std::size_t gamma = 0, beta = 0;
    int C = 0, groups = 8;
};
struct AttnP { // self attention (temporal or spatial)
    GnP gn;
    LinearP wq, wk, wv, wo;
};
struct CrossP {
    GnP gn;
    LinearP txt; // cond_dim -> C token projection
    std::size_t null_token = 0;
    LinearP wq, wk, wv, wo;
};
struct ResP {
    GnP gn1;
    ConvP conv1;
    LinearP time_proj; // time_hidden -> 3*cout (add | scale | shift)
    Conv1x1P img_proj; // cond_dim -> cout
    GnP gn2;
    ConvP conv2;
    Conv1x1P skip; // only when cin != cout
    int cin = 0, cout = 0;
    bool has_skip = false;
};
struct BlockP {
    ResP res;
    CrossP cross;
    AttnP temporal;
};

struct ResCache {
    nn::GroupNormCache gn1; // holds block input x
    nn::SiluCache silu1;
    std::vector<float> conv1_in;
    nn::GroupNormCache gn2; // holds h
    nn::FilmCache film;
    nn::SiluCache silu2;
    std::vector<float> conv2_in;
    std::vector<float> tvec; // time_proj output
};

struct CrossCache {
    nn::GroupNormCache gn; // holds attn input x
    std::vector<float> xn;
    std::vector<float> q;
    std::vector<float> p;   // (F,2,H,W)
    std::vector<float> mix; // (F,C,H,W)
    std::vector<float> tok; // 2*C
    std::vector<float> k, v;
};

struct AttnCache {
    nn::GroupNormCache gn;      // holds attn input x
    std::vector<float> xn;      // post-norm (+PE), input to the QKV projections
    std::vector<float> q, k, v; // (F,C,H,W) maps
    std::vector<float> probs;   // (G, N, N)
    std::vector<float> mix;     // (F,C,H,W) map
};

struct BlockCache {
    ResCache res;
    CrossCache cross;
    AttnCache temporal;
};

} // namespace det

/// Training tape: every intermediate needed for the backward pass. Reused
/// across steps; buffers keep their capacity.
struct DenoiserTape {
    std::vector<float> input; // (F, 4, H, W)
    std::vector<float> t_sin;
    std::vector<float> t_mid_pre; // tmlp1 output (pre-silu)
    nn::SiluCache t_silu;
    std::vector<float> t_mid; // silu(tmlp1)
    std::vector<float> t_feat;
    std::vector<det::BlockCache> enc;
    std::vector<std::vector<float>> skips; // encoder block outputs (= down conv inputs)
    det::BlockCache mid;
    det::AttnCache mid_spatial;
    std::vector<std::vector<float>> up_in;     // post-upsample, input to up conv
    std::vector<std::vector<float>> concat_in; // concatenated decoder inputs
    std::vector<det::BlockCache> dec;
    nn::GroupNormCache out_gn; // holds out head input
    nn::SiluCache out_silu;
    std::vector<float> out_conv_in;
    Embedding text_used;                      // text the forward saw (null-substituted)
    ConditioningField zero_storage;           // owns the zero field when cond was empty
    const ConditioningField* field = nullptr; // borrowed for backward
    int frames = 0, height = 0, width = 0;
};

class Denoiser {
public:
    Denoiser() = default;

    Denoiser(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        register_params();
        init_params(rng);
    }

    const DenoiserConfig& config() const { return cfg_; }
    std::size_t param_count() const { return store_.size(); }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    /// v prediction; t >= 0 (t = 0 is the DDIM-inversion start rung).
    VideoTensor denoise(const VideoTensor& z, int t, const ConditioningBundle& cond) const {
        DenoiserTape scratch;
        return forward(z, t, cond, scratch, false);
    }

    VideoTensor forward_train(const VideoTensor& z, int t, const ConditioningBundle& cond,
                              DenoiserTape& tape) const {
        return forward(z, t, cond, tape, true);
    }

    /// Accumulates parameter gradients into `grads` (size param_count()).
    void backward(const DenoiserTape& tape, const VideoTensor& dout, float* grads) const;

    void save(const std::filesystem::path& path, const nlohmann::json& extra_header) const;
    static Denoiser load(const std::filesystem::path& path, nlohmann::json* header_out = nullptr);

private:
    VideoTensor forward(const VideoTensor& z, int t, const ConditioningBundle& cond,
                        DenoiserTape& tape, bool keep) const;

    void register_params();
    void init_params(Rng& rng);

    det::LinearP add_linear(const std::string& name, int ci, int co) {
        det::LinearP p;
        p.ci = ci;
        p.co = co;
        p.w = store_.add(name + ".w", {co, ci});
        p.b = store_.add(name + ".b", {co});
        return p;
    }
    det::ConvP add_conv(const std::string& name, int ci, int co, int stride = 1) {
        det::ConvP p;
        p.ci = ci;
        p.co = co;
        p.stride = stride;
        p.w = store_.add(name + ".w", {co, ci, 3, 3});
        p.b = store_.add(name + ".b", {co});
        return p;
    }
    det::Conv1x1P add_conv1x1(const std::string& name, int ci, int co) {
        det::Conv1x1P p;
        p.ci = ci;
        p.co = co;
        p.w = store_.add(name + ".w", {co, ci});
        p.b = store_.add(name + ".b", {co});
        return p;
    }
    det::GnP add_gn(const std::string& name, int C) {
        det::GnP p;
        p.C = C;
        p.groups = C % cfg_.groups == 0 ? cfg_.groups : 1;
        p.gamma = store_.add(name + ".gamma", {C});
        p.beta = store_.add(name + ".beta", {C});
        return p;
    }
    det::AttnP add_attn(const std::string& name, int C) {
        det::AttnP p;
        p.gn = add_gn(name + ".gn", C);
        p.wq = add_linear(name + ".wq", C, C);
        p.wk = add_linear(name + ".wk", C, C);
        p.wv = add_linear(name + ".wv", C, C);
        p.wo = add_linear(name + ".wo", C, C);
        return p;
    }
    det::CrossP add_cross(const std::string& name, int C) {
        det::CrossP p;
        p.gn = add_gn(name + ".gn", C);
        p.txt = add_linear(name + ".txt", cfg_.cond_dim, C);
        p.null_token = store_.add(name + ".null_token", {C});
        p.wq = add_linear(name + ".wq", C, C);
        p.wk = add_linear(name + ".wk", C, C);
        p.wv = add_linear(name + ".wv", C, C);
        p.wo = add_linear(name + ".wo", C, C);
        return p;
    }
    det::ResP add_res(const std::string& name, int cin, int cout) {
        det::ResP p;
        p.cin = cin;
        p.cout = cout;
        p.gn1 = add_gn(name + ".gn1", cin);
        p.conv1 = add_conv(name + ".conv1", cin, cout);
        p.time_proj = add_linear(name + ".time_proj", cfg_.time_hidden, 3 * cout);
        p.img_proj = add_conv1x1(name + ".img_proj", cfg_.cond_dim, cout);
        p.gn2 = add_gn(name + ".gn2", cout);
        p.conv2 = add_conv(name + ".conv2", cout, cout);
        p.has_skip = cin != cout;
        if (p.has_skip) p.skip = add_conv1x1(name + ".skip", cin, cout);
        return p;
    }
    det::BlockP add_block(const std::string& name, int cin, int cout) {
        det::BlockP b;
        b.res = add_res(name + ".res", cin, cout);
        b.cross = add_cross(name + ".cross", cout);
        b.temporal = add_attn(name + ".temporal", cout);
        return b;
    }

    void res_fwd(const det::ResP& p, const float* x, int F, int H, int W, const float* field,
                 const float* t_feat, float* out, det::ResCache* cache) const;
    void res_bwd(const det::ResP& p, const det::ResCache& cache, int F, int H, int W,
                 const float* field, const float* t_feat, const float* dout, float* dx,
                 float* dt_feat, float* grads) const;

    void cross_fwd(const det::CrossP& p, const float* x, int F, int C, int H, int W,
                   const Embedding& text, float* out, det::CrossCache* cache) const;
    void cross_bwd(const det::CrossP& p, const det::CrossCache& cache, int F, int C, int H, int W,
                   const Embedding& text, const float* dout, float* dx, float* grads) const;

    void attn_fwd(const det::AttnP& p, const float* x, int F, int C, int H, int W, bool temporal,
                  float* out, det::AttnCache* cache) const;
    void attn_bwd(const det::AttnP& p, const det::AttnCache& cache, int F, int C, int H, int W,
                  bool temporal, const float* dout, float* dx, float* grads) const;

    void block_fwd(const det::BlockP& p, float* x /*in place*/, int F, int H, int W,
                   const float* field, const float* t_feat, const Embedding& text,
                   det::BlockCache* cache) const;
    void block_bwd(const det::BlockP& p, const det::BlockCache& cache, int F, int H, int W,
                   const float* field, const float* t_feat, const Embedding& text, const float* dout,
                   float* dx, float* dt_feat, float* grads) const;

    std::vector<float> temporal_pe(int F, int C) const;

    DenoiserConfig cfg_;
    ParamStore store_;

    det::ConvP stem_;
    std::vector<det::BlockP> enc_;
    std::vector<det::ConvP> down_;
    det::BlockP mid_;
    det::AttnP mid_spatial_;
    std::vector<det::ConvP> up_;
    std::vector<det::BlockP> dec_;
    det::LinearP tmlp1_, tmlp2_;
    det::GnP out_gn_;
    det::ConvP out_conv_;
};

// ---- registration / init ------------------------------------------------------------

inline void Denoiser::register_params() {
    stem_ = add_conv("stem", 4, cfg_.base_channels);
    tmlp1_ = add_linear("tmlp1", cfg_.time_dim, cfg_.time_hidden);
    tmlp2_ = add_linear("tmlp2", cfg_.time_hidden, cfg_.time_hidden);
    for (int l = 0; l < cfg_.levels; ++l) {
        enc_.push_back(add_block("enc" + std::to_string(l), cfg_.channels_at(l), cfg_.channels_at(l)));
        down_.push_back(add_conv("down" + std::to_string(l), cfg_.channels_at(l), cfg_.channels_at(l + 1), 2));
    }
    mid_ = add_block("mid", cfg_.mid_channels(), cfg_.mid_channels());
    if (cfg_.attention_at_lowest) mid_spatial_ = add_attn("mid.spatial", cfg_.mid_channels());
    up_.resize(static_cast<std::size_t>(cfg_.levels));
    dec_.resize(static_cast<std::size_t>(cfg_.levels));
    for (int l = cfg_.levels - 1; l >= 0; --l) {
        up_[static_cast<std::size_t>(l)] =
            add_conv("up" + std::to_string(l), cfg_.channels_at(l + 1), cfg_.channels_at(l));
        dec_[static_cast<std::size_t>(l)] =
            add_block("dec" + std::to_string(l), 2 * cfg_.channels_at(l), cfg_.channels_at(l));
    }
    out_gn_ = add_gn("out.gn", cfg_.base_channels);
    out_conv_ = add_conv("out.conv", cfg_.base_channels, 3);
}

inline void Denoiser::init_params(Rng& rng) {
    auto fill_normal = [&](std::size_t off, std::size_t n, double std) {
        float* p = store_.at(off);
        for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<float>(rng.normal() * std);
    };
    for (const auto& info : store_.infos()) {
        const auto& n = info.name;
        const bool is_weight = n.size() > 2 && n.compare(n.size() - 2, 2, ".w") == 0;
        if (n.find(".gamma") != std::string::npos) {
            float* p = store_.at(info.offset);
            for (std::size_t i = 0; i < info.size; ++i) p[i] = 1.0f;
        } else if (n.find(".null_token") != std::string::npos) {
            fill_normal(info.offset, info.size, 0.2);
        } else if (is_weight) {
            std::size_t fan_in = 1;
            for (std::size_t d = 1; d < info.shape.size(); ++d)
                fan_in *= static_cast<std::size_t>(info.shape[d]);
            double std = std::sqrt(2.0 / static_cast<double>(fan_in));
            if (n.find(".wo") != std::string::npos) std *= 0.2;       // residual attn output
            if (n.find("time_proj") != std::string::npos) std = 0.02; // near-neutral FiLM at start
            if (n.find("img_proj") != std::string::npos) std = std::sqrt(1.0 / cfg_.cond_dim);
            fill_normal(info.offset, info.size, std);
        }
        // biases and betas stay zero
    }
    if (cfg_.zero_init_output) {
        const auto& wi = store_.info("out.conv.w");
        std::memset(store_.at(wi.offset), 0, wi.size * sizeof(float));
        const auto& bi = store_.info("out.conv.b");
        std::memset(store_.at(bi.offset), 0, bi.size * sizeof(float));
    }
}

// ---- residual block ------------------------------------------------------------------

inline void Denoiser::res_fwd(const det::ResP& p, const float* x, int F, int H, int W,
                              const float* field, const float* t_feat, float* out,
                              det::ResCache* cache) const {
    const std::size_t nin = static_cast<std::size_t>(F) * p.cin * H * W;
    const std::size_t nout = static_cast<std::size_t>(F) * p.cout * H * W;
    thread_local std::vector<float> a, b, h, u, u2, u3, inj, tvec, sk;
    a.resize(nin);
    b.resize(nin);
    h.resize(nout);
    u.resize(nout);
    u2.resize(nout);
    u3.resize(nout);
    inj.resize(nout);
    tvec.resize(static_cast<std::size_t>(3) * p.cout);

    nn::linear_fwd(t_feat, p.time_proj.ci, store_.at(p.time_proj.w), store_.at(p.time_proj.b),
                   p.time_proj.co, tvec.data());

    nn::groupnorm_fwd(x, F, p.cin, H, W, p.gn1.groups, store_.at(p.gn1.gamma), store_.at(p.gn1.beta),
                      a.data(), cache ? &cache->gn1 : nullptr);
    nn::silu_fwd(a.data(), nin, b.data(), cache ? &cache->silu1 : nullptr);
    if (cache) cache->conv1_in.assign(b.begin(), b.end());
    nn::conv3x3_fwd(b.data(), F, p.cin, H, W, store_.at(p.conv1.w), store_.at(p.conv1.b), p.cout, 1,
                    h.data());
    nn::add_channel_bias_fwd(h.data(), F, p.cout, H, W, tvec.data()); // timestep embedding added

    nn::groupnorm_fwd(h.data(), F, p.cout, H, W, p.gn2.groups, store_.at(p.gn2.gamma),
                      store_.at(p.gn2.beta), u.data(), cache ? &cache->gn2 : nullptr);
    nn::film_fwd(u.data(), F, p.cout, H, W, tvec.data() + p.cout, tvec.data() + 2 * p.cout, u2.data(),
                 cache ? &cache->film : nullptr);
    // conditioning field added post-norm so spatially uniform fields survive
    nn::conv1x1_fwd(field, F, p.img_proj.ci, H, W, store_.at(p.img_proj.w), store_.at(p.img_proj.b),
                    p.cout, inj.data());
    for (std::size_t i = 0; i < nout; ++i) u2[i] += inj[i];
    nn::silu_fwd(u2.data(), nout, u3.data(), cache ? &cache->silu2 : nullptr);
    if (cache) {
        cache->conv2_in.assign(u3.begin(), u3.end());
        cache->tvec.assign(tvec.begin(), tvec.end());
    }
    nn::conv3x3_fwd(u3.data(), F, p.cout, H, W, store_.at(p.conv2.w), store_.at(p.conv2.b), p.cout, 1,
                    out);
    if (p.has_skip) {
        sk.resize(nout);
        nn::conv1x1_fwd(x, F, p.cin, H, W, store_.at(p.skip.w), store_.at(p.skip.b), p.cout, sk.data());
        for (std::size_t i = 0; i < nout; ++i) out[i] += sk[i];
    } else {
        for (std::size_t i = 0; i < nout; ++i) out[i] += x[i];
    }
}

inline void Denoiser::res_bwd(const det::ResP& p, const det::ResCache& cache, int F, int H, int W,
                              const float* field, const float* t_feat, const float* dout, float* dx,
                              float* dt_feat, float* grads) const {
    const std::size_t nin = static_cast<std::size_t>(F) * p.cin * H * W;
    const std::size_t nout = static_cast<std::size_t>(F) * p.cout * H * W;
    thread_local std::vector<float> du3, du2, du, dh, da, db_, dtvec;
    du3.assign(nout, 0.0f);
    du2.assign(nout, 0.0f);
    du.assign(nout, 0.0f);
    dh.assign(nout, 0.0f);
    da.assign(nin, 0.0f);
    db_.assign(nin, 0.0f);
    dtvec.assign(static_cast<std::size_t>(3) * p.cout, 0.0f);

    // skip path: out = conv2(...) + skip(x)
    if (p.has_skip) {
        nn::conv1x1_bwd(cache.gn1.x.data(), F, p.cin, H, W, store_.at(p.skip.w), p.cout, dout, dx,
                        grads + p.skip.w, grads + p.skip.b);
    } else {
        for (std::size_t i = 0; i < nin; ++i) dx[i] += dout[i];
    }

    nn::conv3x3_bwd(cache.conv2_in.data(), F, p.cout, H, W, store_.at(p.conv2.w), p.cout, 1, dout,
                    du3.data(), grads + p.conv2.w, grads + p.conv2.b);
    nn::silu_bwd(cache.silu2, du3.data(), du2.data());
    // u2 = film(gn2(h)) + img_proj(field)
    nn::conv1x1_bwd(field, F, p.img_proj.ci, H, W, store_.at(p.img_proj.w), p.cout, du2.data(),
                    nullptr, grads + p.img_proj.w, grads + p.img_proj.b);
    nn::film_bwd(cache.film, F, p.cout, H, W, du2.data(), du.data(), dtvec.data() + p.cout,
                 dtvec.data() + 2 * p.cout);
    nn::groupnorm_bwd(cache.gn2, F, p.cout, H, W, p.gn2.groups, store_.at(p.gn2.gamma), du.data(),
                      dh.data(), grads + p.gn2.gamma, grads + p.gn2.beta);

    // h = conv1(silu(gn1(x))) + time_bias
    nn::add_channel_bias_bwd(dh.data(), F, p.cout, H, W, dtvec.data());
    nn::conv3x3_bwd(cache.conv1_in.data(), F, p.cin, H, W, store_.at(p.conv1.w), p.cout, 1, dh.data(),
                    db_.data(), grads + p.conv1.w, grads + p.conv1.b);
    nn::silu_bwd(cache.silu1, db_.data(), da.data());
    nn::groupnorm_bwd(cache.gn1, F, p.cin, H, W, p.gn1.groups, store_.at(p.gn1.gamma), da.data(), dx,
                      grads + p.gn1.gamma, grads + p.gn1.beta);

    nn::linear_bwd(t_feat, p.time_proj.ci, store_.at(p.time_proj.w), p.time_proj.co, dtvec.data(),
                   dt_feat, grads + p.time_proj.w, grads + p.time_proj.b);
}

// ---- cross attention (text as key/value over two tokens) ------------------------------

inline void Denoiser::cross_fwd(const det::CrossP& p, const float* x, int F, int C, int H, int W,
                                const Embedding& text, float* out, det::CrossCache* cache) const {
    const std::size_t n = nn::plane(H, W);
    const std::size_t total = static_cast<std::size_t>(F) * C * n;
    thread_local std::vector<float> xn, q, s0, s1, probs, mix, o;
    xn.resize(total);
    q.resize(total);
    s0.resize(static_cast<std::size_t>(F) * n);
    s1.resize(static_cast<std::size_t>(F) * n);
    probs.resize(static_cast<std::size_t>(F) * 2 * n);
    mix.resize(total);
    o.resize(total);

    nn::groupnorm_fwd(x, F, C, H, W, p.gn.groups, store_.at(p.gn.gamma), store_.at(p.gn.beta),
                      xn.data(), cache ? &cache->gn : nullptr);

    // tokens: projected text and a learned register token
    std::vector<float> tok(static_cast<std::size_t>(2) * C), k(static_cast<std::size_t>(2) * C),
        v(static_cast<std::size_t>(2) * C);
    require(text.dim() == cfg_.cond_dim, "cross attention: text embedding dimension mismatch");
    nn::linear_fwd(text.data.data(), p.txt.ci, store_.at(p.txt.w), store_.at(p.txt.b), p.txt.co,
                   tok.data());
    std::memcpy(tok.data() + C, store_.at(p.null_token), static_cast<std::size_t>(C) * sizeof(float));
    for (int i = 0; i < 2; ++i) {
        nn::linear_fwd(tok.data() + static_cast<std::size_t>(i) * C, C, store_.at(p.wk.w),
                       store_.at(p.wk.b), C, k.data() + static_cast<std::size_t>(i) * C);
        nn::linear_fwd(tok.data() + static_cast<std::size_t>(i) * C, C, store_.at(p.wv.w),
                       store_.at(p.wv.b), C, v.data() + static_cast<std::size_t>(i) * C);
    }

    nn::conv1x1_fwd(xn.data(), F, C, H, W, store_.at(p.wq.w), store_.at(p.wq.b), C, q.data());

    const float scale = 1.0f / std::sqrt(static_cast<float>(C));
    for (int f = 0; f < F; ++f) {
        float* s0p = s0.data() + static_cast<std::size_t>(f) * n;
        float* s1p = s1.data() + static_cast<std::size_t>(f) * n;
        std::fill(s0p, s0p + n, 0.0f);
        std::fill(s1p, s1p + n, 0.0f);
        for (int c = 0; c < C; ++c) {
            const float* qp = q.data() + (static_cast<std::size_t>(f) * C + c) * n;
            const float k0 = k[static_cast<std::size_t>(c)] * scale;
            const float k1 = k[static_cast<std::size_t>(C + c)] * scale;
            for (std::size_t i = 0; i < n; ++i) {
                s0p[i] += k0 * qp[i];
                s1p[i] += k1 * qp[i];
            }
        }
        float* p0 = probs.data() + (static_cast<std::size_t>(f) * 2) * n;
        float* p1 = probs.data() + (static_cast<std::size_t>(f) * 2 + 1) * n;
        for (std::size_t i = 0; i < n; ++i) {
            const float m = std::max(s0p[i], s1p[i]);
            const float e0 = std::exp(s0p[i] - m), e1 = std::exp(s1p[i] - m);
            const float inv = 1.0f / (e0 + e1);
            p0[i] = e0 * inv;
            p1[i] = e1 * inv;
        }
        for (int c = 0; c < C; ++c) {
            float* mp = mix.data() + (static_cast<std::size_t>(f) * C + c) * n;
            const float v0 = v[static_cast<std::size_t>(c)], v1 = v[static_cast<std::size_t>(C + c)];
            for (std::size_t i = 0; i < n; ++i) mp[i] = p0[i] * v0 + p1[i] * v1;
        }
    }
    nn::conv1x1_fwd(mix.data(), F, C, H, W, store_.at(p.wo.w), store_.at(p.wo.b), C, o.data());
    for (std::size_t i = 0; i < total; ++i) out[i] = x[i] + o[i];

    if (cache) {
        cache->xn.assign(xn.begin(), xn.begin() + static_cast<std::ptrdiff_t>(total));
        cache->q.assign(q.begin(), q.begin() + static_cast<std::ptrdiff_t>(total));
        cache->p.assign(probs.begin(), probs.begin() + static_cast<std::ptrdiff_t>(2 * F * n));
        cache->mix.assign(mix.begin(), mix.begin() + static_cast<std::ptrdiff_t>(total));
        cache->tok = tok;
        cache->k = k;
        cache->v = v;
    }
}

inline void Denoiser::cross_bwd(const det::CrossP& p, const det::CrossCache& cache, int F, int C,
                                int H, int W, const Embedding& text, const float* dout, float* dx,
                                float* grads) const {
    const std::size_t n = nn::plane(H, W);
    const std::size_t total = static_cast<std::size_t>(F) * C * n;
    thread_local std::vector<float> dmix, dp0, dp1, ds0, ds1, dq, dxn;
    dmix.assign(total, 0.0f);
    dq.assign(total, 0.0f);
    dxn.assign(total, 0.0f);
    dp0.assign(static_cast<std::size_t>(F) * n, 0.0f);
    dp1.assign(static_cast<std::size_t>(F) * n, 0.0f);
    ds0.assign(static_cast<std::size_t>(F) * n, 0.0f);
    ds1.assign(static_cast<std::size_t>(F) * n, 0.0f);
    std::vector<float> dk(static_cast<std::size_t>(2) * C, 0.0f), dv(static_cast<std::size_t>(2) * C, 0.0f),
        dtok(static_cast<std::size_t>(2) * C, 0.0f);

    // residual: out = x + Wo(mix)
    for (std::size_t i = 0; i < total; ++i) dx[i] += dout[i];
    nn::conv1x1_bwd(cache.mix.data(), F, C, H, W, store_.at(p.wo.w), C, dout, dmix.data(),
                    grads + p.wo.w, grads + p.wo.b);

    const float scale = 1.0f / std::sqrt(static_cast<float>(C));
    for (int f = 0; f < F; ++f) {
        const float* p0 = cache.p.data() + (static_cast<std::size_t>(f) * 2) * n;
        const float* p1 = cache.p.data() + (static_cast<std::size_t>(f) * 2 + 1) * n;
        float* dp0p = dp0.data() + static_cast<std::size_t>(f) * n;
        float* dp1p = dp1.data() + static_cast<std::size_t>(f) * n;
        std::fill(dp0p, dp0p + n, 0.0f);
        std::fill(dp1p, dp1p + n, 0.0f);
        for (int c = 0; c < C; ++c) {
            const float* dmp = dmix.data() + (static_cast<std::size_t>(f) * C + c) * n;
            const float v0 = cache.v[static_cast<std::size_t>(c)];
            const float v1 = cache.v[static_cast<std::size_t>(C + c)];
            double sv0 = 0, sv1 = 0;
            for (std::size_t i = 0; i < n; ++i) {
                dp0p[i] += dmp[i] * v0;
                dp1p[i] += dmp[i] * v1;
                sv0 += static_cast<double>(dmp[i]) * p0[i];
                sv1 += static_cast<double>(dmp[i]) * p1[i];
            }
            dv[static_cast<std::size_t>(c)] += static_cast<float>(sv0);
            dv[static_cast<std::size_t>(C + c)] += static_cast<float>(sv1);
        }
        float* ds0p = ds0.data() + static_cast<std::size_t>(f) * n;
        float* ds1p = ds1.data() + static_cast<std::size_t>(f) * n;
        for (std::size_t i = 0; i < n; ++i) {
            const float dot = p0[i] * dp0p[i] + p1[i] * dp1p[i];
            ds0p[i] = p0[i] * (dp0p[i] - dot);
            ds1p[i] = p1[i] * (dp1p[i] - dot);
        }
        for (int c = 0; c < C; ++c) {
            float* dqp = dq.data() + (static_cast<std::size_t>(f) * C + c) * n;
            const float* qp = cache.q.data() + (static_cast<std::size_t>(f) * C + c) * n;
            const float k0 = cache.k[static_cast<std::size_t>(c)] * scale;
            const float k1 = cache.k[static_cast<std::size_t>(C + c)] * scale;
            double sk0 = 0, sk1 = 0;
            for (std::size_t i = 0; i < n; ++i) {
                dqp[i] += ds0p[i] * k0 + ds1p[i] * k1;
                sk0 += static_cast<double>(ds0p[i]) * qp[i];
                sk1 += static_cast<double>(ds1p[i]) * qp[i];
            }
            dk[static_cast<std::size_t>(c)] += static_cast<float>(sk0 * scale);
            dk[static_cast<std::size_t>(C + c)] += static_cast<float>(sk1 * scale);
        }
    }
    nn::conv1x1_bwd(cache.xn.data(), F, C, H, W, store_.at(p.wq.w), C, dq.data(), dxn.data(),
                    grads + p.wq.w, grads + p.wq.b);
    nn::groupnorm_bwd(cache.gn, F, C, H, W, p.gn.groups, store_.at(p.gn.gamma), dxn.data(), dx,
                      grads + p.gn.gamma, grads + p.gn.beta);

    // token projections
    for (int i = 0; i < 2; ++i) {
        nn::linear_bwd(cache.tok.data() + static_cast<std::size_t>(i) * C, C, store_.at(p.wk.w), C,
                       dk.data() + static_cast<std::size_t>(i) * C,
                       dtok.data() + static_cast<std::size_t>(i) * C, grads + p.wk.w, grads + p.wk.b);
        nn::linear_bwd(cache.tok.data() + static_cast<std::size_t>(i) * C, C, store_.at(p.wv.w), C,
                       dv.data() + static_cast<std::size_t>(i) * C,
                       dtok.data() + static_cast<std::size_t>(i) * C, grads + p.wv.w, grads + p.wv.b);
    }
    nn::linear_bwd(text.data.data(), p.txt.ci, store_.at(p.txt.w), p.txt.co, dtok.data(), nullptr,
                   grads + p.txt.w, grads + p.txt.b);
    float* dnull = grads + p.null_token;
    for (int c = 0; c < C; ++c) dnull[c] += dtok[static_cast<std::size_t>(C + c)];
}

// ---- self attention (temporal across frames, spatial at the lowest level) -------------

inline std::vector<float> Denoiser::temporal_pe(int F, int C) const {
    std::vector<float> pe(static_cast<std::size_t>(F) * C, 0.0f);
    const int half = C / 2;
    for (int f = 0; f < F; ++f)
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
            pe[static_cast<std::size_t>(f) * C + i] = static_cast<float>(std::sin(f * freq));
            pe[static_cast<std::size_t>(f) * C + half + i] = static_cast<float>(std::cos(f * freq));
        }
    return pe;
}

// tokens layout: temporal -> groups are pixels (G = H*W), N = F tokens;
// spatial -> groups are frames (G = F), N = H*W tokens. Q/K/V/O projections
// run as 1x1 convs over the whole map; only the N x N score/mix math walks
// per-group gathers.
inline void Denoiser::attn_fwd(const det::AttnP& p, const float* x, int F, int C, int H, int W,
                               bool temporal, float* out, det::AttnCache* cache) const {
    const std::size_t n = nn::plane(H, W);
    const std::size_t total = static_cast<std::size_t>(F) * C * n;
    const int G = temporal ? static_cast<int>(n) : F;
    const int N = temporal ? F : static_cast<int>(n);

    thread_local std::vector<float> xn, q, k, v, probs, mix, o, qg, kg, vg, mg;
    xn.resize(total);
    q.resize(total);
    k.resize(total);
    v.resize(total);
    probs.resize(static_cast<std::size_t>(G) * N * N);
    mix.resize(total);
    o.resize(total);
    qg.resize(static_cast<std::size_t>(N) * C);
    kg.resize(static_cast<std::size_t>(N) * C);
    vg.resize(static_cast<std::size_t>(N) * C);
    mg.resize(static_cast<std::size_t>(N) * C);

    nn::groupnorm_fwd(x, F, C, H, W, p.gn.groups, store_.at(p.gn.gamma), store_.at(p.gn.beta),
                      xn.data(), cache ? &cache->gn : nullptr);
    if (temporal && cfg_.temporal_pos_enc) {
        const auto pe = temporal_pe(F, C);
        for (int f = 0; f < F; ++f)
            for (int c = 0; c < C; ++c) {
                float* plane = xn.data() + (static_cast<std::size_t>(f) * C + c) * n;
                const float add = pe[static_cast<std::size_t>(f) * C + c];
                for (std::size_t i = 0; i < n; ++i) plane[i] += add;
            }
    }

    nn::conv1x1_fwd(xn.data(), F, C, H, W, store_.at(p.wq.w), store_.at(p.wq.b), C, q.data());
    nn::conv1x1_fwd(xn.data(), F, C, H, W, store_.at(p.wk.w), store_.at(p.wk.b), C, k.data());
    nn::conv1x1_fwd(xn.data(), F, C, H, W, store_.at(p.wv.w), store_.at(p.wv.b), C, v.data());

    const float scale = 1.0f / std::sqrt(static_cast<float>(C));
    for (int g = 0; g < G; ++g) {
        // gather this group's tokens
        for (int i = 0; i < N; ++i) {
            const int f = temporal ? i : g;
            const std::size_t pix = temporal ? static_cast<std::size_t>(g) : static_cast<std::size_t>(i);
            for (int c = 0; c < C; ++c) {
                const std::size_t src = (static_cast<std::size_t>(f) * C + c) * n + pix;
                qg[static_cast<std::size_t>(i) * C + c] = q[src];
                kg[static_cast<std::size_t>(i) * C + c] = k[src];
                vg[static_cast<std::size_t>(i) * C + c] = v[src];
            }
        }
        float* pg = probs.data() + static_cast<std::size_t>(g) * N * N;
        for (int i = 0; i < N; ++i) {
            float* row = pg + static_cast<std::size_t>(i) * N;
            const float* qi = qg.data() + static_cast<std::size_t>(i) * C;
            for (int j = 0; j < N; ++j) {
                const float* kj = kg.data() + static_cast<std::size_t>(j) * C;
                float s = 0;
                for (int c = 0; c < C; ++c) s += qi[c] * kj[c];
                row[j] = s * scale;
            }
            nn::softmax_inplace(row, N);
            float* mi = mg.data() + static_cast<std::size_t>(i) * C;
            std::fill(mi, mi + C, 0.0f);
            for (int j = 0; j < N; ++j) {
                const float pij = row[j];
                const float* vj = vg.data() + static_cast<std::size_t>(j) * C;
                for (int c = 0; c < C; ++c) mi[c] += pij * vj[c];
            }
        }
        // scatter mix
        for (int i = 0; i < N; ++i) {
            const int f = temporal ? i : g;
            const std::size_t pix = temporal ? static_cast<std::size_t>(g) : static_cast<std::size_t>(i);
            for (int c = 0; c < C; ++c)
                mix[(static_cast<std::size_t>(f) * C + c) * n + pix] = mg[static_cast<std::size_t>(i) * C + c];
        }
    }

    nn::conv1x1_fwd(mix.data(), F, C, H, W, store_.at(p.wo.w), store_.at(p.wo.b), C, o.data());
    for (std::size_t i = 0; i < total; ++i) out[i] = x[i] + o[i];

    if (cache) {
        cache->xn.assign(xn.begin(), xn.begin() + static_cast<std::ptrdiff_t>(total));
        cache->q.assign(q.begin(), q.begin() + static_cast<std::ptrdiff_t>(total));
        cache->k.assign(k.begin(), k.begin() + static_cast<std::ptrdiff_t>(total));
        cache->v.assign(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(total));
        cache->probs.assign(probs.begin(), probs.begin() + static_cast<std::ptrdiff_t>(
                                               static_cast<std::size_t>(G) * N * N));
        cache->mix.assign(mix.begin(), mix.begin() + static_cast<std::ptrdiff_t>(total));
    }
}

inline void Denoiser::attn_bwd(const det::AttnP& p, const det::AttnCache& cache, int F, int C, int H,
                               int W, bool temporal, const float* dout, float* dx, float* grads) const {
    const std::size_t n = nn::plane(H, W);
    const std::size_t total = static_cast<std::size_t>(F) * C * n;
    const int G = temporal ? static_cast<int>(n) : F;
    const int N = temporal ? F : static_cast<int>(n);

    thread_local std::vector<float> dxn, dmix, dq, dk, dv, qg, kg, vg, dmg, dqg, dkg, dvg, dP, dS;
    dxn.assign(total, 0.0f);
    dmix.assign(total, 0.0f);
    dq.assign(total, 0.0f);
    dk.assign(total, 0.0f);
    dv.assign(total, 0.0f);
    qg.resize(static_cast<std::size_t>(N) * C);
    kg.resize(static_cast<std::size_t>(N) * C);
    vg.resize(static_cast<std::size_t>(N) * C);
    dmg.resize(static_cast<std::size_t>(N) * C);
    dqg.resize(static_cast<std::size_t>(N) * C);
    dkg.resize(static_cast<std::size_t>(N) * C);
    dvg.resize(static_cast<std::size_t>(N) * C);
    dP.resize(static_cast<std::size_t>(N) * N);
    dS.resize(static_cast<std::size_t>(N) * N);

    for (std::size_t i = 0; i < total; ++i) dx[i] += dout[i]; // residual

    nn::conv1x1_bwd(cache.mix.data(), F, C, H, W, store_.at(p.wo.w), C, dout, dmix.data(),
                    grads + p.wo.w, grads + p.wo.b);

    const float scale = 1.0f / std::sqrt(static_cast<float>(C));
    for (int g = 0; g < G; ++g) {
        const float* pg = cache.probs.data() + static_cast<std::size_t>(g) * N * N;
        for (int i = 0; i < N; ++i) {
            const int f = temporal ? i : g;
            const std::size_t pix = temporal ? static_cast<std::size_t>(g) : static_cast<std::size_t>(i);
            for (int c = 0; c < C; ++c) {
                const std::size_t src = (static_cast<std::size_t>(f) * C + c) * n + pix;
                qg[static_cast<std::size_t>(i) * C + c] = cache.q[src];
                kg[static_cast<std::size_t>(i) * C + c] = cache.k[src];
                vg[static_cast<std::size_t>(i) * C + c] = cache.v[src];
                dmg[static_cast<std::size_t>(i) * C + c] = dmix[src];
            }
        }
        std::fill(dqg.begin(), dqg.end(), 0.0f);
        std::fill(dkg.begin(), dkg.end(), 0.0f);
        std::fill(dvg.begin(), dvg.end(), 0.0f);

        for (int i = 0; i < N; ++i) {
            const float* dmi = dmg.data() + static_cast<std::size_t>(i) * C;
            const float* pri = pg + static_cast<std::size_t>(i) * N;
            float* dpi = dP.data() + static_cast<std::size_t>(i) * N;
            for (int j = 0; j < N; ++j) {
                const float* vj = vg.data() + static_cast<std::size_t>(j) * C;
                float s = 0;
                for (int c = 0; c < C; ++c) s += dmi[c] * vj[c];
                dpi[j] = s;
                float* dvj = dvg.data() + static_cast<std::size_t>(j) * C;
                const float pij = pri[j];
                for (int c = 0; c < C; ++c) dvj[c] += pij * dmi[c];
            }
            nn::softmax_bwd(pri, dpi, N, dS.data() + static_cast<std::size_t>(i) * N);
        }
        for (int i = 0; i < N; ++i) {
            const float* dsi = dS.data() + static_cast<std::size_t>(i) * N;
            float* dqi = dqg.data() + static_cast<std::size_t>(i) * C;
            const float* qi = qg.data() + static_cast<std::size_t>(i) * C;
            for (int j = 0; j < N; ++j) {
                const float dsij = dsi[j] * scale;
                const float* kj = kg.data() + static_cast<std::size_t>(j) * C;
                float* dkj = dkg.data() + static_cast<std::size_t>(j) * C;
                for (int c = 0; c < C; ++c) {
                    dqi[c] += dsij * kj[c];
                    dkj[c] += dsij * qi[c];
                }
            }
        }
        for (int i = 0; i < N; ++i) {
            const int f = temporal ? i : g;
            const std::size_t pix = temporal ? static_cast<std::size_t>(g) : static_cast<std::size_t>(i);
            for (int c = 0; c < C; ++c) {
                const std::size_t dst = (static_cast<std::size_t>(f) * C + c) * n + pix;
                dq[dst] = dqg[static_cast<std::size_t>(i) * C + c];
                dk[dst] = dkg[static_cast<std::size_t>(i) * C + c];
                dv[dst] = dvg[static_cast<std::size_t>(i) * C + c];
            }
        }
    }

    nn::conv1x1_bwd(cache.xn.data(), F, C, H, W, store_.at(p.wq.w), C, dq.data(), dxn.data(),
                    grads + p.wq.w, grads + p.wq.b);
    nn::conv1x1_bwd(cache.xn.data(), F, C, H, W, store_.at(p.wk.w), C, dk.data(), dxn.data(),
                    grads + p.wk.w, grads + p.wk.b);
    nn::conv1x1_bwd(cache.xn.data(), F, C, H, W, store_.at(p.wv.w), C, dv.data(), dxn.data(),
                    grads + p.wv.w, grads + p.wv.b);
    // positional encoding is additive and constant: dxn passes through
    nn::groupnorm_bwd(cache.gn, F, C, H, W, p.gn.groups, store_.at(p.gn.gamma), dxn.data(), dx,
                      grads + p.gn.gamma, grads + p.gn.beta);
}

// ---- level block: res -> cross -> temporal ----------------------------------------------

inline void Denoiser::block_fwd(const det::BlockP& p, float* x, int F, int H, int W,
                                const float* field, const float* t_feat, const Embedding& text,
                                det::BlockCache* cache) const {
    const int C = p.res.cout;
    const std::size_t nout = static_cast<std::size_t>(F) * C * H * W;
    thread_local std::vector<float> buf;
    buf.resize(nout);
    res_fwd(p.res, x, F, H, W, field, t_feat, buf.data(), cache ? &cache->res : nullptr);
    cross_fwd(p.cross, buf.data(), F, C, H, W, text, buf.data(), cache ? &cache->cross : nullptr);
    if (cfg_.temporal_attention)
        attn_fwd(p.temporal, buf.data(), F, C, H, W, true, buf.data(), cache ? &cache->temporal : nullptr);
    std::memcpy(x, buf.data(), nout * sizeof(float)); // caller provides space for cout == cin or handles resize
}

inline void Denoiser::block_bwd(const det::BlockP& p, const det::BlockCache& cache, int F, int H,
                                int W, const float* field, const float* t_feat, const Embedding& text,
                                const float* dout, float* dx, float* dt_feat, float* grads) const {
    const int C = p.res.cout;
    const std::size_t nout = static_cast<std::size_t>(F) * C * H * W;
    thread_local std::vector<float> d1, d2;
    d1.assign(nout, 0.0f);
    d2.assign(nout, 0.0f);
    const float* cur = dout;
    if (cfg_.temporal_attention) {
        attn_bwd(p.temporal, cache.temporal, F, C, H, W, true, cur, d1.data(), grads);
        cur = d1.data();
    }
    cross_bwd(p.cross, cache.cross, F, C, H, W, text, cur, d2.data(), grads);
    res_bwd(p.res, cache.res, F, H, W, field, t_feat, d2.data(), dx, dt_feat, grads);
}

// ---- top level -----------------------------------------------------------------------------

inline VideoTensor Denoiser::forward(const VideoTensor& z, int t, const ConditioningBundle& cond,
                                     DenoiserTape& tape, bool keep) const {
    // parameters are frame-count and resolution agnostic; the config records
    // the training-time defaults
    require(z.channels == 3 && z.height % (1 << cfg_.levels) == 0 &&
                z.width % (1 << cfg_.levels) == 0 && z.height >= (2 << cfg_.levels) &&
                z.width >= (2 << cfg_.levels),
            "denoise: input shape " + z.shape_str() + " not supported (divisibility by 2^levels)");
    require(t >= 0, "denoise: t must be >= 0");
    cond.check(z.frames, "denoise");

    const int F = z.frames, H = z.height, W = z.width, L = cfg_.levels;
    const std::size_t npix = nn::plane(H, W);

    // conditioning field: all-zero grids when absent (unconditional branch)
    const ConditioningField* field = &cond.image_field;
    thread_local ConditioningField zero_field;
    if (cond.image_field.empty()) {
        if (keep) {
            tape.zero_storage = ConditioningField::zeros(F, cfg_.cond_dim, H, W, L);
            field = &tape.zero_storage;
        } else {
            if (zero_field.empty() || zero_field.grids.front().frames != F ||
                zero_field.grids.front().height != H ||
                static_cast<int>(zero_field.grids.size()) != L + 1 ||
                zero_field.grids.front().channels != cfg_.cond_dim)
                zero_field = ConditioningField::zeros(F, cfg_.cond_dim, H, W, L);
            field = &zero_field;
        }
    }
    require(static_cast<int>(field->grids.size()) == L + 1, "denoise: conditioning field level count mismatch");
    for (int l = 0; l <= L; ++l) {
        const auto& g = field->grids[static_cast<std::size_t>(l)];
        require(g.channels == cfg_.cond_dim && g.height == (H >> l) && g.width == (W >> l) && g.frames == F,
                "denoise: conditioning grid shape mismatch at level " + std::to_string(l));
    }
    const Embedding text = cond.text.data.empty()
                               ? Embedding::null_of(cfg_.cond_dim, EmbeddingSpace::textual)
                               : cond.text;
    require(text.space == EmbeddingSpace::textual, "denoise: cross-attention text must be textual-space");
    tape.field = field;
    tape.frames = F;
    tape.height = H;
    tape.width = W;
    if (keep) tape.text_used = text;

    // input = concat(latent, control)
    tape.input.assign(static_cast<std::size_t>(F) * 4 * npix, 0.0f);
    for (int f = 0; f < F; ++f) {
        std::memcpy(tape.input.data() + static_cast<std::size_t>(f) * 4 * npix,
                    z.data.data() + static_cast<std::size_t>(f) * 3 * npix, 3 * npix * sizeof(float));
        if (cond.control) {
            require(cond.control->height == H && cond.control->width == W,
                    "denoise: control shape mismatch");
            std::memcpy(tape.input.data() + (static_cast<std::size_t>(f) * 4 + 3) * npix,
                        cond.control->data.data() + static_cast<std::size_t>(f) * npix,
                        npix * sizeof(float));
        }
    }

    // timestep features
    tape.t_sin.assign(static_cast<std::size_t>(cfg_.time_dim), 0.0f);
    const int half = cfg_.time_dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
        tape.t_sin[static_cast<std::size_t>(i)] = static_cast<float>(std::sin(t * freq));
        tape.t_sin[static_cast<std::size_t>(half + i)] = static_cast<float>(std::cos(t * freq));
    }
    tape.t_mid_pre.assign(static_cast<std::size_t>(cfg_.time_hidden), 0.0f);
    tape.t_mid.assign(static_cast<std::size_t>(cfg_.time_hidden), 0.0f);
    tape.t_feat.assign(static_cast<std::size_t>(cfg_.time_hidden), 0.0f);
    nn::linear_fwd(tape.t_sin.data(), tmlp1_.ci, store_.at(tmlp1_.w), store_.at(tmlp1_.b), tmlp1_.co,
                   tape.t_mid_pre.data());
    nn::silu_fwd(tape.t_mid_pre.data(), tape.t_mid_pre.size(), tape.t_mid.data(),
                 keep ? &tape.t_silu : nullptr);
    nn::linear_fwd(tape.t_mid.data(), tmlp2_.ci, store_.at(tmlp2_.w), store_.at(tmlp2_.b), tmlp2_.co,
                   tape.t_feat.data());

    if (keep) {
        tape.enc.resize(static_cast<std::size_t>(L));
        tape.dec.resize(static_cast<std::size_t>(L));
        tape.skips.resize(static_cast<std::size_t>(L));
        tape.up_in.resize(static_cast<std::size_t>(L));
        tape.concat_in.resize(static_cast<std::size_t>(L));
    }

    // stem
    std::vector<float> h(static_cast<std::size_t>(F) * cfg_.base_channels * npix);
    nn::conv3x3_fwd(tape.input.data(), F, 4, H, W, store_.at(stem_.w), store_.at(stem_.b),
                    cfg_.base_channels, 1, h.data());

    // encoder
    std::vector<std::vector<float>> skips(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l) {
        const int Hl = H >> l, Wl = W >> l;
        block_fwd(enc_[static_cast<std::size_t>(l)], h.data(), F, Hl, Wl,
                  field->grids[static_cast<std::size_t>(l)].data.data(), tape.t_feat.data(), text,
                  keep ? &tape.enc[static_cast<std::size_t>(l)] : nullptr);
        skips[static_cast<std::size_t>(l)] = h;
        if (keep) tape.skips[static_cast<std::size_t>(l)] = h;
        const auto& dn = down_[static_cast<std::size_t>(l)];
        std::vector<float> hd(static_cast<std::size_t>(F) * dn.co * (Hl / 2) * (Wl / 2));
        nn::conv3x3_fwd(h.data(), F, dn.ci, Hl, Wl, store_.at(dn.w), store_.at(dn.b), dn.co, 2,
                        hd.data());
        h = std::move(hd);
    }

    // mid
    const int Hm = H >> L, Wm = W >> L;
    {
        const float* fgrid = field->grids[static_cast<std::size_t>(L)].data.data();
        const int C = cfg_.mid_channels();
        std::vector<float> buf(static_cast<std::size_t>(F) * C * Hm * Wm);
        res_fwd(mid_.res, h.data(), F, Hm, Wm, fgrid, tape.t_feat.data(), buf.data(),
                keep ? &tape.mid.res : nullptr);
        if (cfg_.attention_at_lowest)
            attn_fwd(mid_spatial_, buf.data(), F, C, Hm, Wm, false, buf.data(),
                     keep ? &tape.mid_spatial : nullptr);
        cross_fwd(mid_.cross, buf.data(), F, C, Hm, Wm, text, buf.data(), keep ? &tape.mid.cross : nullptr);
        if (cfg_.temporal_attention)
            attn_fwd(mid_.temporal, buf.data(), F, C, Hm, Wm, true, buf.data(),
                     keep ? &tape.mid.temporal : nullptr);
        h = std::move(buf);
    }

    // decoder
    for (int l = L - 1; l >= 0; --l) {
        const int Hl = H >> l, Wl = W >> l;
        const auto& up = up_[static_cast<std::size_t>(l)];
        std::vector<float> hu(static_cast<std::size_t>(F) * up.ci * Hl * Wl);
        nn::upsample2_fwd(h.data(), F, up.ci, Hl / 2, Wl / 2, hu.data());
        if (keep) tape.up_in[static_cast<std::size_t>(l)] = hu;
        std::vector<float> hc(static_cast<std::size_t>(F) * up.co * Hl * Wl);
        nn::conv3x3_fwd(hu.data(), F, up.ci, Hl, Wl, store_.at(up.w), store_.at(up.b), up.co, 1,
                        hc.data());
        // concat with the encoder skip
        const int cl = cfg_.channels_at(l);
        std::vector<float> cat(static_cast<std::size_t>(F) * 2 * cl * Hl * Wl);
        const std::size_t pl = nn::plane(Hl, Wl);
        for (int f = 0; f < F; ++f) {
            std::memcpy(cat.data() + static_cast<std::size_t>(f) * 2 * cl * pl,
                        hc.data() + static_cast<std::size_t>(f) * cl * pl, static_cast<std::size_t>(cl) * pl * sizeof(float));
            std::memcpy(cat.data() + (static_cast<std::size_t>(f) * 2 + 1) * cl * pl,
                        skips[static_cast<std::size_t>(l)].data() + static_cast<std::size_t>(f) * cl * pl,
                        static_cast<std::size_t>(cl) * pl * sizeof(float));
        }
        if (keep) tape.concat_in[static_cast<std::size_t>(l)] = cat;
        std::vector<float> hb(static_cast<std::size_t>(F) * cl * Hl * Wl);
        res_fwd(dec_[static_cast<std::size_t>(l)].res, cat.data(), F, Hl, Wl,
                field->grids[static_cast<std::size_t>(l)].data.data(), tape.t_feat.data(), hb.data(),
                keep ? &tape.dec[static_cast<std::size_t>(l)].res : nullptr);
        cross_fwd(dec_[static_cast<std::size_t>(l)].cross, hb.data(), F, cl, Hl, Wl, text, hb.data(),
                  keep ? &tape.dec[static_cast<std::size_t>(l)].cross : nullptr);
        if (cfg_.temporal_attention)
            attn_fwd(dec_[static_cast<std::size_t>(l)].temporal, hb.data(), F, cl, Hl, Wl, true,
                     hb.data(), keep ? &tape.dec[static_cast<std::size_t>(l)].temporal : nullptr);
        h = std::move(hb);
    }

    // output head
    std::vector<float> gn_out(h.size()), act(h.size());
    nn::groupnorm_fwd(h.data(), F, cfg_.base_channels, H, W, out_gn_.groups, store_.at(out_gn_.gamma),
                      store_.at(out_gn_.beta), gn_out.data(), keep ? &tape.out_gn : nullptr);
    nn::silu_fwd(gn_out.data(), gn_out.size(), act.data(), keep ? &tape.out_silu : nullptr);
    if (keep) tape.out_conv_in = act;
    VideoTensor v(F, 3, H, W);
    nn::conv3x3_fwd(act.data(), F, cfg_.base_channels, H, W, store_.at(out_conv_.w),
                    store_.at(out_conv_.b), 3, 1, v.data.data());
    return v;
}

inline void Denoiser::backward(const DenoiserTape& tape, const VideoTensor& dout, float* grads) const {
    const int F = tape.frames, H = tape.height, W = tape.width, L = cfg_.levels;
    const ConditioningField* field = tape.field;
    require(field != nullptr && !tape.out_conv_in.empty(), "backward: tape was not produced by forward_train");

    std::vector<float> dt_feat(static_cast<std::size_t>(cfg_.time_hidden), 0.0f);

    // output head
    std::vector<float> dact(tape.out_conv_in.size(), 0.0f);
    std::vector<float> dgn(tape.out_conv_in.size(), 0.0f);
    std::vector<float> dh(tape.out_conv_in.size(), 0.0f);
    nn::conv3x3_bwd(tape.out_conv_in.data(), F, cfg_.base_channels, H, W, store_.at(out_conv_.w), 3, 1,
                    dout.data.data(), dact.data(), grads + out_conv_.w, grads + out_conv_.b);
    nn::silu_bwd(tape.out_silu, dact.data(), dgn.data());
    nn::groupnorm_bwd(tape.out_gn, F, cfg_.base_channels, H, W, out_gn_.groups, store_.at(out_gn_.gamma),
                      dgn.data(), dh.data(), grads + out_gn_.gamma, grads + out_gn_.beta);

    // decoder in reverse
    std::vector<float> dcur = std::move(dh);
    std::vector<std::vector<float>> dskips(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l) {
        const int Hl = H >> l, Wl = W >> l;
        const int cl = cfg_.channels_at(l);
        const std::size_t pl = nn::plane(Hl, Wl);
        std::vector<float> dcat(static_cast<std::size_t>(F) * 2 * cl * pl, 0.0f);
        block_bwd(dec_[static_cast<std::size_t>(l)], tape.dec[static_cast<std::size_t>(l)], F, Hl, Wl,
                  field->grids[static_cast<std::size_t>(l)].data.data(), tape.t_feat.data(),
                  tape.text_used, dcur.data(), dcat.data(), dt_feat.data(), grads);
        // split concat gradient
        std::vector<float> dhc(static_cast<std::size_t>(F) * cl * pl);
        dskips[static_cast<std::size_t>(l)].assign(static_cast<std::size_t>(F) * cl * pl, 0.0f);
        for (int f = 0; f < F; ++f) {
            std::memcpy(dhc.data() + static_cast<std::size_t>(f) * cl * pl,
                        dcat.data() + static_cast<std::size_t>(f) * 2 * cl * pl,
                        static_cast<std::size_t>(cl) * pl * sizeof(float));
            std::memcpy(dskips[static_cast<std::size_t>(l)].data() + static_cast<std::size_t>(f) * cl * pl,
                        dcat.data() + (static_cast<std::size_t>(f) * 2 + 1) * cl * pl,
                        static_cast<std::size_t>(cl) * pl * sizeof(float));
        }
        const auto& up = up_[static_cast<std::size_t>(l)];
        std::vector<float> dhu(static_cast<std::size_t>(F) * up.ci * pl, 0.0f);
        nn::conv3x3_bwd(tape.up_in[static_cast<std::size_t>(l)].data(), F, up.ci, Hl, Wl,
                        store_.at(up.w), up.co, 1, dhc.data(), dhu.data(), grads + up.w, grads + up.b);
        std::vector<float> dpre(static_cast<std::size_t>(F) * up.ci * (pl / 4), 0.0f);
        nn::upsample2_bwd(dhu.data(), F, up.ci, Hl / 2, Wl / 2, dpre.data());
        dcur = std::move(dpre);
    }

    // mid in reverse
    {
        const int Hm = H >> L, Wm = W >> L;
        const int C = cfg_.mid_channels();
        const std::size_t nmid = static_cast<std::size_t>(F) * C * Hm * Wm;
        std::vector<float> d1(nmid, 0.0f), d2(nmid, 0.0f), d3(nmid, 0.0f);
        const float* cur = dcur.data();
        if (cfg_.temporal_attention) {
            attn_bwd(mid_.temporal, tape.mid.temporal, F, C, Hm, Wm, true, cur, d1.data(), grads);
            cur = d1.data();
        }
        cross_bwd(mid_.cross, tape.mid.cross, F, C, Hm, Wm, tape.text_used, cur, d2.data(), grads);
        cur = d2.data();
        if (cfg_.attention_at_lowest) {
            attn_bwd(mid_spatial_, tape.mid_spatial, F, C, Hm, Wm, false, cur, d3.data(), grads);
            cur = d3.data();
        }
        std::vector<float> dmid_in(static_cast<std::size_t>(F) * C * Hm * Wm, 0.0f);
        res_bwd(mid_.res, tape.mid.res, F, Hm, Wm, field->grids[static_cast<std::size_t>(L)].data.data(),
                tape.t_feat.data(), cur, dmid_in.data(), dt_feat.data(), grads);
        dcur = std::move(dmid_in);
    }

    // encoder in reverse
    for (int l = L - 1; l >= 0; --l) {
        const int Hl = H >> l, Wl = W >> l;
        const auto& dn = down_[static_cast<std::size_t>(l)];
        std::vector<float> ddown_in(static_cast<std::size_t>(F) * dn.ci * Hl * Wl, 0.0f);
        nn::conv3x3_bwd(tape.skips[static_cast<std::size_t>(l)].data(), F, dn.ci, Hl, Wl,
                        store_.at(dn.w), dn.co, 2, dcur.data(), ddown_in.data(), grads + dn.w,
                        grads + dn.b);
        for (std::size_t i = 0; i < ddown_in.size(); ++i)
            ddown_in[i] += dskips[static_cast<std::size_t>(l)][i];
        std::vector<float> dprev(static_cast<std::size_t>(F) * cfg_.channels_at(l) * Hl * Wl, 0.0f);
        block_bwd(enc_[static_cast<std::size_t>(l)], tape.enc[static_cast<std::size_t>(l)], F, Hl, Wl,
                  field->grids[static_cast<std::size_t>(l)].data.data(), tape.t_feat.data(),
                  tape.text_used, ddown_in.data(), dprev.data(), dt_feat.data(), grads);
        dcur = std::move(dprev);
    }

    // stem (no need for d input)
    nn::conv3x3_bwd(tape.input.data(), F, 4, H, W, store_.at(stem_.w), cfg_.base_channels, 1,
                    dcur.data(), nullptr, grads + stem_.w, grads + stem_.b);

    // time MLP
    std::vector<float> dt_mid(static_cast<std::size_t>(cfg_.time_hidden), 0.0f);
    std::vector<float> dt_mid_pre(static_cast<std::size_t>(cfg_.time_hidden), 0.0f);
    nn::linear_bwd(tape.t_mid.data(), tmlp2_.ci, store_.at(tmlp2_.w), tmlp2_.co, dt_feat.data(),
                   dt_mid.data(), grads + tmlp2_.w, grads + tmlp2_.b);
    nn::silu_bwd(tape.t_silu, dt_mid.data(), dt_mid_pre.data());
    nn::linear_bwd(tape.t_sin.data(), tmlp1_.ci, store_.at(tmlp1_.w), tmlp1_.co, dt_mid_pre.data(),
                   nullptr, grads + tmlp1_.w, grads + tmlp1_.b);
}

// ---- checkpoint I/O --------------------------------------------------------------------
// Binary layout: magic "PTCK", u32 version, u64 header length, JSON header
// (model config under "config" plus caller extras), u32 tensor count, then per
// tensor: u32 name length, name bytes, u32 ndim, i32 dims, f32 data (LE).

namespace det {

template <typename T>
void write_pod(std::ofstream& f, const T& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <typename T>
T read_pod(std::ifstream& f) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!f) throw IoError("checkpoint: truncated file");
    return v;
}

} // namespace det

inline void Denoiser::save(const std::filesystem::path& path, const nlohmann::json& extra_header) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    nlohmann::json header = extra_header;
    header["config"] = cfg_.to_json();
    const std::string hs = header.dump();
    f.write("PTCK", 4);
    det::write_pod(f, static_cast<std::uint32_t>(1));
    det::write_pod(f, static_cast<std::uint64_t>(hs.size()));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    det::write_pod(f, static_cast<std::uint32_t>(store_.infos().size()));
    for (const auto& info : store_.infos()) {
        det::write_pod(f, static_cast<std::uint32_t>(info.name.size()));
        f.write(info.name.data(), static_cast<std::streamsize>(info.name.size()));
        det::write_pod(f, static_cast<std::uint32_t>(info.shape.size()));
        for (int d : info.shape) det::write_pod(f, static_cast<std::int32_t>(d));
        f.write(reinterpret_cast<const char*>(store_.at(info.offset)),
                static_cast<std::streamsize>(info.size * sizeof(float)));
    }
    if (!f) throw IoError("write failed: " + path.string());
}

inline Denoiser Denoiser::load(const std::filesystem::path& path, nlohmann::json* header_out) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path.string());
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "PTCK", 4) != 0)
        throw IoError("not a model checkpoint: " + path.string());
    const auto version = det::read_pod<std::uint32_t>(f);
    require(version == 1, "checkpoint: unsupported version " + std::to_string(version));
    const auto hlen = det::read_pod<std::uint64_t>(f);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw IoError("checkpoint: truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint: bad header JSON: ") + e.what());
    }
    if (header_out) *header_out = header;

    Denoiser model;
    model.cfg_ = DenoiserConfig::from_json(header.at("config"));
    model.register_params();

    const auto count = det::read_pod<std::uint32_t>(f);
    require(count == model.store_.infos().size(), "checkpoint: tensor count mismatch");
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto nlen = det::read_pod<std::uint32_t>(f);
        std::string name(nlen, '\0');
        f.read(name.data(), nlen);
        const auto ndim = det::read_pod<std::uint32_t>(f);
        std::vector<int> shape(ndim);
        for (auto& d : shape) d = det::read_pod<std::int32_t>(f);
        const auto& info = model.store_.info(name);
        require(info.shape == shape, "checkpoint: shape mismatch for tensor '" + name + "'");
        f.read(reinterpret_cast<char*>(model.store_.at(info.offset)),
               static_cast<std::streamsize>(info.size * sizeof(float)));
        if (!f) throw IoError("checkpoint: truncated tensor data");
    }
    return model;
}

} // namespace protag
