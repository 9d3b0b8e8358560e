#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <fstream>

#include "protag/denoiser.hpp"
#include "protag/schedules.hpp"

using namespace protag;

namespace {

DenoiserConfig tiny_config() {
    DenoiserConfig c;
    c.base_channels = 8;
    c.levels = 2;
    c.frames = 2;
    c.cond_dim = 8;
    c.height = 8;
    c.width = 8;
    c.time_dim = 16;
    c.time_hidden = 32;
    c.groups = 4;
    return c;
}

VideoTensor random_video(Rng& rng, int f, int h, int w) {
    VideoTensor v(f, 3, h, w);
    for (auto& x : v.data) x = static_cast<float>(rng.normal() * 0.5);
    return v;
}

ConditioningBundle random_cond(Rng& rng, const DenoiserConfig& cfg, int frames) {
    ConditioningBundle cond;
    std::vector<float> tv(static_cast<std::size_t>(cfg.cond_dim));
    for (auto& x : tv) x = static_cast<float>(rng.normal());
    cond.text = Embedding(std::move(tv), EmbeddingSpace::textual);
    cond.image_field = ConditioningField::zeros(frames, cfg.cond_dim, cfg.height, cfg.width, cfg.levels);
    for (auto& g : cond.image_field.grids)
        for (auto& x : g.data) x = static_cast<float>(rng.normal() * 0.3);
    ControlVolume ctl(frames, cfg.height, cfg.width);
    for (auto& x : ctl.data) x = static_cast<float>(rng.u01());
    cond.control = std::move(ctl);
    return cond;
}

void randomize_params(Denoiser& model, Rng& rng, double scale = 0.05) {
    for (auto& v : model.params().values()) v = static_cast<float>(rng.normal() * scale);
    // keep norm gains near 1 so activations stay sane
    for (const auto& info : model.params().infos())
        if (info.name.find(".gamma") != std::string::npos)
            for (std::size_t i = 0; i < info.size; ++i)
                model.params().values()[info.offset + i] = 1.0f + static_cast<float>(rng.normal() * 0.05);
}

} // namespace

TEST_CASE("conv3x3 kernels match a naive reference") {
    Rng rng(99);
    for (int trial = 0; trial < 4; ++trial) {
        const int F = 2, Ci = 3, Co = 4;
        const int H = trial < 2 ? 8 : 12, W = trial % 2 == 0 ? 8 : 16;
        std::vector<float> in(static_cast<std::size_t>(F) * Ci * H * W);
        std::vector<float> w(static_cast<std::size_t>(Co) * Ci * 9), b(Co);
        for (auto& x : in) x = static_cast<float>(rng.normal());
        for (auto& x : w) x = static_cast<float>(rng.normal() * 0.3);
        for (auto& x : b) x = static_cast<float>(rng.normal() * 0.1);

        std::vector<float> out(static_cast<std::size_t>(F) * Co * H * W);
        nn::conv3x3_fwd(in.data(), F, Ci, H, W, w.data(), b.data(), Co, 1, out.data());

        auto at_in = [&](int f, int c, int y, int x) -> float {
            if (y < 0 || y >= H || x < 0 || x >= W) return 0.0f;
            return in[((static_cast<std::size_t>(f) * Ci + c) * H + y) * W + x];
        };
        double max_err = 0;
        for (int f = 0; f < F; ++f)
            for (int co = 0; co < Co; ++co)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) {
                        double acc = b[static_cast<std::size_t>(co)];
                        for (int ci = 0; ci < Ci; ++ci)
                            for (int ky = 0; ky < 3; ++ky)
                                for (int kx = 0; kx < 3; ++kx)
                                    acc += w[(static_cast<std::size_t>(co) * Ci + ci) * 9 + ky * 3 + kx] *
                                           at_in(f, ci, y + ky - 1, x + kx - 1);
                        const double got = out[((static_cast<std::size_t>(f) * Co + co) * H + y) * W + x];
                        max_err = std::max(max_err, std::abs(acc - got));
                    }
        CHECK(max_err < 1e-4);
    }
}

TEST_CASE("fresh model with zero-init output is the zero map") {
    auto cfg = tiny_config();
    Rng rng(1);
    Denoiser model(cfg, rng);
    Rng drng(2);
    auto z = random_video(drng, cfg.frames, cfg.height, cfg.width);
    auto cond = random_cond(drng, cfg, cfg.frames);
    auto v = model.denoise(z, 500, cond);
    for (float x : v.data) REQUIRE(x == 0.0f);
}

TEST_CASE("parameter count is a deterministic function of the config") {
    auto cfg = tiny_config();
    Rng r1(1), r2(99);
    Denoiser a(cfg, r1), b(cfg, r2);
    CHECK(a.param_count() == b.param_count());
    CHECK(a.param_count() > 0);

    auto bigger = cfg;
    bigger.base_channels = 16;
    Rng r3(1);
    Denoiser c(bigger, r3);
    CHECK(c.param_count() > a.param_count());
}

TEST_CASE("output shape matches input shape; frame count is flexible") {
    auto cfg = tiny_config();
    Rng rng(3);
    Denoiser model(cfg, rng);
    Rng drng(4);
    for (int f : {1, 2, 5}) {
        auto z = random_video(drng, f, cfg.height, cfg.width);
        ConditioningBundle cond; // null text, zero field, no control
        auto v = model.denoise(z, 10, cond);
        CHECK(v.frames == f);
        CHECK(v.channels == 3);
        CHECK(v.height == cfg.height);
        CHECK(v.width == cfg.width);
    }
    VideoTensor bad(2, 3, 10, 10); // not divisible by 2^levels
    ConditioningBundle cond;
    CHECK_THROWS_AS(model.denoise(bad, 10, cond), ValidationError);
    Rng drng2(4);
    CHECK_THROWS_AS(model.denoise(random_video(drng2, 2, cfg.height, cfg.width), -1, cond),
                    ValidationError);
}

TEST_CASE("determinism: same parameters and inputs give identical outputs") {
    auto cfg = tiny_config();
    Rng rng(5);
    Denoiser model(cfg, rng);
    Rng prng(6);
    randomize_params(model, prng);
    Rng drng(7);
    auto z = random_video(drng, cfg.frames, cfg.height, cfg.width);
    auto cond = random_cond(drng, cfg, cfg.frames);
    auto v1 = model.denoise(z, 123, cond);
    auto v2 = model.denoise(z, 123, cond);
    CHECK(v1.data == v2.data);
}

TEST_CASE("zeroed image projections make the output field-independent") {
    auto cfg = tiny_config();
    Rng rng(8);
    Denoiser model(cfg, rng);
    Rng prng(9);
    randomize_params(model, prng);
    for (const auto& info : model.params().infos())
        if (info.name.find("img_proj") != std::string::npos)
            for (std::size_t i = 0; i < info.size; ++i) model.params().values()[info.offset + i] = 0.0f;

    Rng drng(10);
    auto z = random_video(drng, cfg.frames, cfg.height, cfg.width);
    auto cond1 = random_cond(drng, cfg, cfg.frames);
    auto cond2 = cond1;
    for (auto& g : cond2.image_field.grids)
        for (auto& x : g.data) x += 1.5f;
    auto v1 = model.denoise(z, 77, cond1);
    auto v2 = model.denoise(z, 77, cond2);
    CHECK(v1.data == v2.data);
}

TEST_CASE("temporal attention without positional encoding is permutation-equivariant") {
    auto cfg = tiny_config();
    cfg.frames = 4;
    cfg.temporal_pos_enc = false;
    Rng rng(11);
    Denoiser model(cfg, rng);
    Rng prng(12);
    randomize_params(model, prng);

    Rng drng(13);
    const int F = 4;
    auto z = random_video(drng, F, cfg.height, cfg.width);
    auto cond = random_cond(drng, cfg, F);

    const int perm[4] = {2, 0, 3, 1};
    auto permute_video = [&](const VideoTensor& v) {
        VideoTensor out = v;
        const std::size_t n = static_cast<std::size_t>(v.channels) * v.height * v.width;
        for (int f = 0; f < F; ++f)
            std::copy_n(v.data.begin() + static_cast<std::ptrdiff_t>(perm[f] * n), n,
                        out.data.begin() + static_cast<std::ptrdiff_t>(f * n));
        return out;
    };
    ConditioningBundle pcond = cond;
    for (std::size_t l = 0; l < cond.image_field.grids.size(); ++l) {
        const auto& g = cond.image_field.grids[l];
        auto& pg = pcond.image_field.grids[l];
        const std::size_t n = static_cast<std::size_t>(g.channels) * g.height * g.width;
        for (int f = 0; f < F; ++f)
            std::copy_n(g.data.begin() + static_cast<std::ptrdiff_t>(perm[f] * n), n,
                        pg.data.begin() + static_cast<std::ptrdiff_t>(f * n));
    }
    ControlVolume pctl(F, cfg.height, cfg.width);
    const std::size_t cn = static_cast<std::size_t>(cfg.height) * cfg.width;
    for (int f = 0; f < F; ++f)
        std::copy_n(cond.control->data.begin() + static_cast<std::ptrdiff_t>(perm[f] * cn), cn,
                    pctl.data.begin() + static_cast<std::ptrdiff_t>(f * cn));
    pcond.control = std::move(pctl);

    auto v = model.denoise(z, 42, cond);
    auto vp = model.denoise(permute_video(z), 42, pcond);
    auto v_perm = permute_video(v);
    double max_rel = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double denom = std::max(1e-3, std::abs(static_cast<double>(v_perm.data[i])));
        max_rel = std::max(max_rel, std::abs(static_cast<double>(vp.data[i]) - v_perm.data[i]) / denom);
    }
    CHECK(max_rel < 1e-3);
}

TEST_CASE("analytic gradients match central finite differences (1e-3 relative)") {
    auto cfg = tiny_config();
    Rng rng(14);
    Denoiser model(cfg, rng);
    Rng prng(15);
    randomize_params(model, prng, 0.08);

    Rng drng(16);
    auto z = random_video(drng, cfg.frames, cfg.height, cfg.width);
    auto cond = random_cond(drng, cfg, cfg.frames);
    auto target = random_video(drng, cfg.frames, cfg.height, cfg.width);
    const int t = 321;

    auto loss_of = [&]() {
        auto pred = model.denoise(z, t, cond);
        double se = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double r = static_cast<double>(pred.data[i]) - target.data[i];
            se += r * r;
        }
        return se / static_cast<double>(pred.size());
    };

    DenoiserTape tape;
    auto pred = model.forward_train(z, t, cond, tape);
    VideoTensor dv = pred;
    const double n = static_cast<double>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i)
        dv.data[i] = static_cast<float>(2.0 * (pred.data[i] - target.data[i]) / n);
    std::vector<float> grads(model.param_count(), 0.0f);
    model.backward(tape, dv, grads.data());

    // one representative coordinate per tensor: its largest-gradient entry;
    // check the strongest 16 tensors across layer families
    struct Pick {
        std::string name;
        std::size_t idx;
        double g;
    };
    std::vector<Pick> picks;
    for (const auto& info : model.params().infos()) {
        std::size_t best = info.offset;
        for (std::size_t i = info.offset; i < info.offset + info.size; ++i)
            if (std::abs(grads[i]) > std::abs(grads[best])) best = i;
        picks.push_back({info.name, best, grads[best]});
    }
    std::sort(picks.begin(), picks.end(),
              [](const Pick& a, const Pick& b) { return std::abs(a.g) > std::abs(b.g); });
    picks.resize(16);

    int checked = 0;
    for (const auto& pick : picks) {
        const float saved = model.params().values()[pick.idx];
        const double h = 3e-3 * std::max(0.3, std::abs(static_cast<double>(saved)));
        model.params().values()[pick.idx] = static_cast<float>(saved + h);
        const double lp = loss_of();
        model.params().values()[pick.idx] = static_cast<float>(saved - h);
        const double lm = loss_of();
        const double h_eff = (static_cast<double>(static_cast<float>(saved + h)) -
                              static_cast<double>(static_cast<float>(saved - h))) /
                             2.0;
        model.params().values()[pick.idx] = saved;
        const double fd = (lp - lm) / (2.0 * h_eff);
        const double an = pick.g;
        const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
        INFO(pick.name << " idx=" << pick.idx << " fd=" << fd << " an=" << an << " rel=" << rel);
        CHECK(rel < 1e-3);
        ++checked;
    }
    CHECK(checked >= 10);
}

TEST_CASE("checkpoint round trip preserves parameters and behavior") {
    auto cfg = tiny_config();
    Rng rng(17);
    Denoiser model(cfg, rng);
    Rng prng(18);
    randomize_params(model, prng);

    auto path = std::filesystem::temp_directory_path() / "protag_test_ckpt.bin";
    nlohmann::json extra = {{"source_hash", "abc123"}, {"train_steps", 7}};
    model.save(path, extra);

    nlohmann::json header;
    Denoiser back = Denoiser::load(path, &header);
    CHECK(header.at("source_hash").get<std::string>() == "abc123");
    CHECK(back.param_count() == model.param_count());
    CHECK(back.params().values() == model.params().values());

    Rng drng(19);
    auto z = random_video(drng, cfg.frames, cfg.height, cfg.width);
    auto cond = random_cond(drng, cfg, cfg.frames);
    CHECK(back.denoise(z, 55, cond).data == model.denoise(z, 55, cond).data);

    // byte-identical on re-save
    auto path2 = std::filesystem::temp_directory_path() / "protag_test_ckpt2.bin";
    back.save(path2, extra);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
}

TEST_CASE("forward/backward timing probe (informational)") {
    DenoiserConfig cfg; // default production size
    Rng rng(20);
    Denoiser model(cfg, rng);
    Rng prng(21);
    randomize_params(model, prng);
    Rng drng(22);
    auto z = random_video(drng, cfg.frames, cfg.height, cfg.width);
    auto cond = random_cond(drng, cfg, cfg.frames);

    auto t0 = std::chrono::steady_clock::now();
    auto v = model.denoise(z, 500, cond);
    auto t1 = std::chrono::steady_clock::now();
    DenoiserTape tape;
    auto pred = model.forward_train(z, 500, cond, tape);
    std::vector<float> grads(model.param_count(), 0.0f);
    model.backward(tape, pred, grads.data());
    auto t2 = std::chrono::steady_clock::now();

    const double fwd_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    const double step_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
    MESSAGE("params=" << model.param_count() << " inference_fwd=" << fwd_ms
                      << "ms train_fwd+bwd=" << step_ms << "ms");
    CHECK(v.size() == z.size());
}
