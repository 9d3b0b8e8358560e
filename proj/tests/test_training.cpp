#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "protag/training.hpp"

using namespace protag;

namespace {

DenoiserConfig small_model() {
    DenoiserConfig c;
    c.base_channels = 8;
    c.levels = 2;
    c.cond_dim = kEmbedDim;
    c.time_dim = 16;
    c.time_hidden = 32;
    c.groups = 4;
    return c; // frames/height/width filled by train_on_video
}

VideoTensor small_video(int f = 2, int r = 16) {
    SceneDescriptor d;
    d.frames = f;
    d.resolution = r;
    ProtagonistSpec p;
    p.shape = ShapeName::square;
    p.color = ColorName::red;
    p.trajectory.start_x = 0.4;
    p.trajectory.start_y = 0.5;
    p.trajectory.vel_x = 0.03;
    d.protagonists = {p};
    d.background = {StyleName::solid, ColorName::green};
    return generate_scene(d).video;
}

Denoiser zero_model(const VideoTensor& video) {
    DenoiserConfig c = small_model();
    c.frames = video.frames;
    c.height = video.height;
    c.width = video.width;
    Rng rng(0);
    return Denoiser(c, rng);
}

} // namespace

TEST_CASE("zero-init model: loss equals the mean squared v-target") {
    auto video = small_video();
    auto model = zero_model(video);
    auto sched = make_linear_schedule();
    auto experts = make_oracle_registry();
    TrainConfig cfg;
    cfg.cond_dropout_p = 0.1;

    Rng rng(7);
    const auto info = loss_step(model, video, "a red square moving right on a solid background", sched,
                                rng, cfg, experts);

    // replay the same draws to compute mean(v_target^2) directly
    Rng replay(7);
    const int t = 1 + static_cast<int>(replay.below(1000));
    VideoTensor eps(video.frames, 3, video.height, video.width);
    replay.fill_normal(eps.data);
    CHECK(t == info.t);
    const auto target = v_target(video, eps, t, sched);
    CHECK(info.loss == doctest::Approx(target.mean_square()).epsilon(1e-12));
}

TEST_CASE("loss_step is deterministic in the seed") {
    auto video = small_video();
    auto model = zero_model(video);
    auto sched = make_linear_schedule();
    auto experts = make_oracle_registry();
    TrainConfig cfg;
    Rng r1(3), r2(3), r3(4);
    const auto a = loss_step(model, video, "x", sched, r1, cfg, experts);
    const auto b = loss_step(model, video, "x", sched, r2, cfg, experts);
    const auto c = loss_step(model, video, "x", sched, r3, cfg, experts);
    CHECK(a.loss == b.loss);
    CHECK(a.t == b.t);
    CHECK((a.loss != c.loss || a.t != c.t));
}

TEST_CASE("zero-model expected loss matches the analytic baseline within 5%") {
    auto video = small_video();
    auto model = zero_model(video);
    auto sched = make_linear_schedule();
    auto experts = make_oracle_registry();
    TrainConfig cfg;
    Rng rng(11);
    double acc = 0;
    const int K = 400;
    for (int i = 0; i < K; ++i)
        acc += loss_step(model, video, "caption", sched, rng, cfg, experts).loss;
    const double mc = acc / K;
    const double analytic = zero_model_baseline_loss(video, sched);
    CHECK(std::abs(mc - analytic) / analytic < 0.05);
}

TEST_CASE("conditioning dropout frequency is p +/- 0.03 over 2000 steps") {
    // micro model so 2000 loss evaluations stay cheap
    SceneDescriptor d;
    d.frames = 1;
    d.resolution = 8;
    ProtagonistSpec p;
    p.shape = ShapeName::circle;
    p.color = ColorName::blue;
    p.trajectory.start_x = 0.5;
    p.trajectory.start_y = 0.5;
    d.protagonists = {p};
    d.background = {StyleName::solid, ColorName::green};
    auto video = generate_scene(d).video;

    DenoiserConfig c;
    c.base_channels = 4;
    c.levels = 1;
    c.cond_dim = kEmbedDim;
    c.frames = 1;
    c.height = 8;
    c.width = 8;
    c.time_dim = 8;
    c.time_hidden = 16;
    c.groups = 4;
    Rng mr(0);
    Denoiser model(c, mr);

    auto sched = make_linear_schedule();
    auto experts = make_oracle_registry();
    TrainConfig cfg;
    cfg.cond_dropout_p = 0.1;
    Rng rng(17);
    int dropped = 0;
    for (int i = 0; i < 2000; ++i)
        dropped += loss_step(model, video, "blue circle", sched, rng, cfg, experts).dropped ? 1 : 0;
    const double freq = dropped / 2000.0;
    CHECK(std::abs(freq - 0.1) <= 0.03);
}

TEST_CASE("steps = 0 returns the zero-init model unchanged") {
    auto video = small_video();
    auto sched = make_linear_schedule();
    auto experts = make_oracle_registry();
    TrainConfig cfg;
    cfg.steps = 0;
    auto dcfg = small_model();
    auto result = train_on_video(video, "cap", sched, cfg, experts, nullptr, &dcfg);
    CHECK(result.losses.empty());
    ConditioningBundle cond;
    auto v = result.model.denoise(video, 10, cond);
    for (float x : v.data) REQUIRE(x == 0.0f);
}

TEST_CASE("short fine-tune reduces the loss and is reproducible") {
    auto video = small_video();
    auto sched = make_linear_schedule();
    auto experts = make_oracle_registry();
    TrainConfig cfg;
    cfg.steps = 150;
    cfg.pretrain_steps = 0; // isolate the fine-tune loop
    cfg.learning_rate = 2e-3;
    cfg.seed = 5;
    auto dcfg = small_model();

    auto r1 = train_on_video(video, "a red square moving right on a solid background", sched, cfg,
                             experts, nullptr, &dcfg);
    auto r2 = train_on_video(video, "a red square moving right on a solid background", sched, cfg,
                             experts, nullptr, &dcfg);
    REQUIRE(r1.losses.size() == 150);
    CHECK(r1.losses == r2.losses); // identical loss curves across runs
    CHECK(r1.model.params().values() == r2.model.params().values());

    double head = 0, tail = 0;
    for (int i = 0; i < 20; ++i) head += r1.losses[static_cast<std::size_t>(i)];
    for (int i = 130; i < 150; ++i) tail += r1.losses[static_cast<std::size_t>(i)];
    CHECK(tail < head);
}

TEST_CASE("after training, zeroing the control channel changes the output") {
    auto video = small_video();
    auto sched = make_linear_schedule();
    auto experts = make_oracle_registry();
    TrainConfig cfg;
    cfg.steps = 80;
    cfg.pretrain_steps = 0;
    cfg.learning_rate = 2e-3;
    auto dcfg = small_model();
    auto result = train_on_video(video, "a red square moving right on a solid background", sched, cfg,
                                 experts, nullptr, &dcfg);

    Rng rng(9);
    VideoTensor z(video.frames, 3, video.height, video.width);
    for (auto& x : z.data) x = static_cast<float>(rng.normal());
    ConditioningBundle with_control;
    with_control.control = extract_control(video);
    ConditioningBundle without_control;
    without_control.control = ControlVolume(video.frames, video.height, video.width, 0.0f);
    auto v1 = result.model.denoise(z, 500, with_control);
    auto v2 = result.model.denoise(z, 500, without_control);
    double diff = 0;
    for (std::size_t i = 0; i < v1.size(); ++i)
        diff += (static_cast<double>(v1.data[i]) - v2.data[i]) * (v1.data[i] - v2.data[i]);
    CHECK(diff > 0.0);
}

TEST_CASE("divergent training aborts with a numeric error") {
    auto video = small_video();
    auto sched = make_linear_schedule();
    auto experts = make_oracle_registry();
    TrainConfig cfg;
    cfg.steps = 300;
    cfg.pretrain_steps = 0;
    cfg.learning_rate = 500.0; // guaranteed blow-up
    cfg.divergence_patience = 5;
    auto dcfg = small_model();
    CHECK_THROWS_AS(train_on_video(video, "cap", sched, cfg, experts, nullptr, &dcfg), NumericError);
}

TEST_CASE("grounding pretraining is deterministic and produces finite losses") {
    auto sched = make_linear_schedule();
    auto experts = make_oracle_registry();
    DenoiserConfig dcfg = small_model();
    dcfg.frames = 2;
    dcfg.height = 16;
    dcfg.width = 16;
    TrainConfig cfg;
    cfg.pretrain_steps = 25;
    cfg.pretrain_frames = 2;
    cfg.learning_rate = 1e-3;
    cfg.seed = 21;
    std::vector<double> l1, l2;
    auto m1 = pretrain_base(dcfg, cfg, sched, experts, &l1);
    auto m2 = pretrain_base(dcfg, cfg, sched, experts, &l2);
    REQUIRE(l1.size() == 25);
    CHECK(l1 == l2);
    CHECK(m1.params().values() == m2.params().values());
    for (double l : l1) CHECK(std::isfinite(l));
}

TEST_CASE("loss CSV writer emits step,loss rows") {
    auto path = std::filesystem::temp_directory_path() / "protag_losses.csv";
    write_loss_csv(path, {0.5, 0.25});
    std::ifstream f(path);
    std::string line;
    std::getline(f, line);
    CHECK(line == "step,loss");
    std::getline(f, line);
    CHECK(line == "1,0.5");
    std::getline(f, line);
    CHECK(line == "2,0.25");
}
