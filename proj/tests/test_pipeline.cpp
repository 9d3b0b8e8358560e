#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "protag/runner.hpp"

using namespace protag;
namespace fs = std::filesystem;

namespace {

fs::path work_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("protag_pipe_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// 16x16 2-frame corpus keeps pipeline tests quick
SceneDescriptor tiny_scene() {
    SceneDescriptor d;
    d.frames = 2;
    d.resolution = 16;
    ProtagonistSpec p;
    p.shape = ShapeName::square;
    p.color = ColorName::red;
    p.trajectory.start_x = 0.42;
    p.trajectory.start_y = 0.5;
    p.trajectory.vel_x = 0.04;
    d.protagonists = {p};
    d.background = {StyleName::solid, ColorName::green};
    return d;
}

fs::path write_tiny_scene(const std::string& name) {
    auto dir = work_dir(name);
    Scene scene = generate_scene(tiny_scene());
    save_video(scene.video, dir);
    for (std::size_t k = 0; k < scene.masks.size(); ++k)
        save_masks(scene.masks[k], dir, static_cast<int>(k));
    save_scene_descriptor(scene.descriptor, dir);
    return dir;
}

DenoiserConfig tiny_model_cfg() {
    DenoiserConfig c;
    c.base_channels = 8;
    c.levels = 2;
    c.cond_dim = kEmbedDim;
    c.time_dim = 16;
    c.time_hidden = 32;
    c.groups = 4;
    return c;
}

double iou(const Mask2D& a, const Mask2D& b) {
    double inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const bool pa = a.data[i] > 0.5f, pb = b.data[i] > 0.5f;
        inter += (pa && pb) ? 1 : 0;
        uni += (pa || pb) ? 1 : 0;
    }
    return uni > 0 ? inter / uni : 1.0;
}

} // namespace

TEST_CASE("parse_source: caption, masks vs ground truth, determinism") {
    auto dir = write_tiny_scene("parse");
    auto experts = make_oracle_registry();
    auto parsed = parse_source(dir, experts);

    CHECK(parsed.caption == "a red square moving right on a solid background");
    REQUIRE(parsed.protagonist_phrases.size() == 1);
    CHECK(parsed.protagonist_phrases[0] == "red square");
    REQUIRE(parsed.masks.size() == 1);
    CHECK(parsed.warnings.empty());

    Scene gt = generate_scene(tiny_scene());
    double mean_iou = 0;
    for (int f = 0; f < 2; ++f) mean_iou += iou(parsed.masks[0].frame(f), gt.masks[0].frame(f));
    CHECK(mean_iou / 2 >= 0.9);

    CHECK(static_cast<int>(parsed.per_frame_embeddings.size()) == parsed.video.frames);

    auto parsed2 = parse_source(dir, experts);
    CHECK(parsed2.masks[0].data == parsed.masks[0].data);
    CHECK(parsed2.control.data == parsed.control.data);
}

namespace {
// VQA stub whose phrase names a color absent from the scene
class WrongVqa final : public IProtagonistVqa {
public:
    std::vector<std::string> answer(const VideoTensor&, const SceneDescriptor*) const override {
        return {"cyan circle"};
    }
};
} // namespace

TEST_CASE("parse_source: empty segmentation for a phrase is an error naming the phrase") {
    auto dir = write_tiny_scene("parse_err");
    auto experts = make_oracle_registry();
    experts.protagonist_vqa = std::make_shared<WrongVqa>();
    CHECK_THROWS_WITH_AS(parse_source(dir, experts), doctest::Contains("cyan circle"),
                         ValidationError);
}

TEST_CASE("prepare_clues: embedding layout per mode") {
    auto dir = write_tiny_scene("clues");
    auto experts = make_oracle_registry();
    auto parsed = parse_source(dir, experts);

    // reference image: canonical blue circle
    auto render = canonical_render(ShapeName::circle, ColorName::blue, 16);
    const fs::path ref_path = dir / "ref.png";
    save_image(render.image, ref_path);

    EditRequest preq;
    preq.mode = EditMode::protagonist;
    preq.source = dir;
    preq.reference_images = {ref_path};
    auto pclues = prepare_clues(preq, parsed, experts);
    REQUIRE(pclues.protagonist_embeddings.size() == 1);
    CHECK(pclues.protagonist_embeddings[0].broadcast());       // one reference embedding
    CHECK(pclues.background_embedding.frames() == parsed.video.frames); // per-frame source rows
    CHECK(pclues.reference_phrases[0] == "blue circle");

    EditRequest breq;
    breq.mode = EditMode::background;
    breq.source = dir;
    breq.prompt = "on a striped background";
    auto bclues = prepare_clues(breq, parsed, experts);
    CHECK(bclues.protagonist_embeddings[0].frames() == parsed.video.frames); // source rows inside mask
    CHECK(bclues.background_embedding.broadcast());                          // single prior row
    // prior equality: the background embedding is exactly prior_convert(prompt)
    CHECK(bclues.background_embedding.row(0).data == prior_convert("on a striped background").data);

    EditRequest treq;
    treq.mode = EditMode::text2video;
    treq.source = dir;
    treq.reference_images = {ref_path};
    treq.prompt = "on a gradient background";
    auto tclues = prepare_clues(treq, parsed, experts);
    CHECK(tclues.protagonist_embeddings[0].broadcast());
    CHECK(tclues.background_embedding.row(0).data == prior_convert("on a gradient background").data);

    EditRequest rreq;
    rreq.mode = EditMode::reconstruct;
    rreq.source = dir;
    auto rclues = prepare_clues(rreq, parsed, experts);
    REQUIRE(rclues.masks.size() == 1);
    for (float m : rclues.masks[0].data) CHECK(m == 1.0f);

    EditRequest bad;
    bad.mode = EditMode::protagonist;
    bad.source = dir;
    CHECK_THROWS_AS(prepare_clues(bad, parsed, experts), ValidationError); // no reference

    EditRequest badprior;
    badprior.mode = EditMode::background;
    badprior.source = dir;
    badprior.prompt = "nothing recognizable";
    CHECK_THROWS_AS(prepare_clues(badprior, parsed, experts), ValidationError);
}

TEST_CASE("edit refuses a checkpoint whose source hash differs") {
    auto dir = write_tiny_scene("hash");
    auto experts = make_oracle_registry();
    auto sched = make_linear_schedule();

    auto cfg = tiny_model_cfg();
    cfg.frames = 2;
    cfg.height = 16;
    cfg.width = 16;
    Rng rng(1);
    Denoiser model(cfg, rng);
    nlohmann::json header;
    header["source_hash"] = "not-the-right-hash";

    EditRequest req;
    req.mode = EditMode::reconstruct;
    req.source = dir;
    req.n_steps = 3;
    CHECK_THROWS_WITH_AS(edit(req, model, header, sched, experts),
                         doctest::Contains("not fine-tuned"), ValidationError);
}

TEST_CASE("run_synth: default corpus on disk, bit-identical regeneration, empty config rejected") {
    auto out1 = work_dir("synth1");
    auto m1 = run_synth(std::nullopt, out1);
    REQUIRE(m1.at("scenes").size() == 6);
    CHECK(fs::exists(out1 / "manifest.json"));
    CHECK(fs::exists(out1 / "scene0" / "frame_0000.png"));
    CHECK(fs::exists(out1 / "scene0" / "mask_0000.png"));
    CHECK(fs::exists(out1 / "scene0" / "scene.json"));
    CHECK(fs::exists(out1 / "scene4" / "mask1_0000.png")); // two-protagonist scene

    auto out2 = work_dir("synth2");
    run_synth(std::nullopt, out2);
    for (const auto& name : {"scene0/frame_0003.png", "scene2/frame_0000.png", "scene4/mask1_0007.png"}) {
        std::ifstream f1(out1 / name, std::ios::binary), f2(out2 / name, std::ios::binary);
        std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
        std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
        REQUIRE_FALSE(b1.empty());
        CHECK(b1 == b2);
    }

    auto cfg_path = work_dir("synthcfg") / "cfg.json";
    write_json_file(cfg_path, nlohmann::json{{"scenes", nlohmann::json::array()}});
    CHECK_THROWS_AS(run_synth(cfg_path, work_dir("synth3")), ValidationError);
}

TEST_CASE("run_train: checkpoint + loss CSV, steps 0 gives zero-init, reruns byte-identical") {
    auto dir = write_tiny_scene("train");
    auto experts = make_oracle_registry();
    auto sched = make_linear_schedule();

    TrainCommand cmd;
    cmd.scene_dir = dir;
    cmd.out_checkpoint = dir / "model.ckpt";
    cmd.cfg.steps = 12;
    cmd.cfg.pretrain_steps = 6;
    cmd.cfg.pretrain_frames = 2;
    cmd.cfg.learning_rate = 1e-3;
    cmd.cfg.seed = 3;
    cmd.model_cfg = tiny_model_cfg();

    auto summary = run_train(cmd, experts, sched);
    CHECK(fs::exists(cmd.out_checkpoint));
    CHECK(fs::exists(dir / "model.ckpt.loss.csv"));
    CHECK(fs::exists(dir / "model.ckpt.pretrain_loss.csv"));
    CHECK(summary.at("zero_model_baseline").get<double>() > 0.0);

    nlohmann::json header;
    Denoiser model = Denoiser::load(cmd.out_checkpoint, &header);
    CHECK(header.at("source_hash").get<std::string>() ==
          video_content_hash(load_video(dir)));

    // same seed, same bytes
    TrainCommand cmd2 = cmd;
    cmd2.out_checkpoint = dir / "model2.ckpt";
    run_train(cmd2, experts, sched);
    std::ifstream f1(cmd.out_checkpoint, std::ios::binary), f2(cmd2.out_checkpoint, std::ios::binary);
    std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);

    // steps 0: zero-init checkpoint
    TrainCommand zcmd = cmd;
    zcmd.cfg.steps = 0;
    zcmd.out_checkpoint = dir / "zero.ckpt";
    run_train(zcmd, experts, sched);
    Denoiser zero = Denoiser::load(zcmd.out_checkpoint);
    ConditioningBundle cond;
    auto v = zero.denoise(load_video(dir), 10, cond);
    for (float x : v.data) REQUIRE(x == 0.0f);
}

TEST_CASE("run_edit: reconstruct writes frames, report and trace; deterministic") {
    auto dir = write_tiny_scene("edit");
    auto experts = make_oracle_registry();
    auto sched = make_linear_schedule();

    TrainCommand tcmd;
    tcmd.scene_dir = dir;
    tcmd.out_checkpoint = dir / "model.ckpt";
    tcmd.cfg.steps = 25;
    tcmd.cfg.pretrain_steps = 10;
    tcmd.cfg.pretrain_frames = 2;
    tcmd.cfg.learning_rate = 1e-3;
    tcmd.model_cfg = tiny_model_cfg();
    run_train(tcmd, experts, sched);

    EditCommand ecmd;
    ecmd.checkpoint = tcmd.out_checkpoint;
    ecmd.request.mode = EditMode::reconstruct;
    ecmd.request.source = dir;
    ecmd.request.n_steps = 5;
    ecmd.out_dir = dir / "out";
    ecmd.trace_path = dir / "trace.json";
    auto report = run_edit(ecmd, experts, sched);

    CHECK(fs::exists(ecmd.out_dir / "frame_0000.png"));
    CHECK(fs::exists(ecmd.out_dir / "edit_report.json"));
    CHECK(fs::exists(dir / "trace.json"));
    CHECK(report.at("mode").get<std::string>() == "reconstruct");
    CHECK(report.at("metrics").contains("rms_error"));
    CHECK(report.at("guidance").get<double>() == 1.0);
    auto trace = read_json_file(dir / "trace.json");
    CHECK(trace.size() == 5);

    EditCommand ecmd2 = ecmd;
    ecmd2.out_dir = dir / "out2";
    ecmd2.trace_path.reset();
    run_edit(ecmd2, experts, sched);
    std::ifstream f1(ecmd.out_dir / "frame_0001.png", std::ios::binary),
        f2(ecmd2.out_dir / "frame_0001.png", std::ios::binary);
    std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
}

TEST_CASE("run_eval: metric block with nulls for missing inputs") {
    auto dir = write_tiny_scene("eval");
    auto experts = make_oracle_registry();
    // edited = source shifted slightly outside the mask region
    auto video = load_video(dir);
    auto out_dir = dir / "edited";
    save_video(video, out_dir);

    EvalCommand cmd;
    cmd.source_dir = dir;
    cmd.edited_dir = out_dir;
    auto report = run_eval(cmd, experts);
    CHECK(report.at("background_preservation").get<double>() <= 1e-6);
    CHECK(report.at("prompt_fidelity").is_null());
    CHECK(report.at("subject_fidelity").is_null());

    auto render = canonical_render(ShapeName::square, ColorName::red, 16);
    const fs::path ref_path = dir / "ref.png";
    save_image(render.image, ref_path);
    cmd.prompt = "red square on a solid background";
    cmd.reference = ref_path;
    auto full = run_eval(cmd, experts);
    CHECK(full.at("prompt_fidelity").get<double>() > 0.0);
    CHECK(full.at("subject_fidelity").get<double>() > 0.9); // source protagonist is a red square
}
