#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "protag/experts.hpp"
#include "protag/synthdata.hpp"

using namespace protag;

namespace {

double iou(const Mask2D& a, const Mask2D& b) {
    double inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const bool pa = a.data[i] > 0.5f, pb = b.data[i] > 0.5f;
        inter += (pa && pb) ? 1 : 0;
        uni += (pa || pb) ? 1 : 0;
    }
    return uni > 0 ? inter / uni : 1.0;
}

double iou(const MaskVolume& a, const MaskVolume& b) {
    double s = 0;
    for (int f = 0; f < a.frames; ++f) s += iou(a.frame(f), b.frame(f));
    return s / a.frames;
}

} // namespace

TEST_CASE("caption oracle: template text, two-protagonist join, sidecar required") {
    auto corpus = default_corpus();
    auto scene0 = generate_scene(corpus[0]);
    OracleCaptioner cap;
    CHECK(cap.caption(scene0.video, &scene0.descriptor) ==
          "a red square moving right on a solid background");

    auto scene4 = generate_scene(corpus[4]);
    CHECK(cap.caption(scene4.video, &scene4.descriptor) ==
          "a red square and a blue circle moving right on a solid background");

    CHECK_THROWS_WITH_AS(cap.caption(scene0.video, nullptr), doctest::Contains("needs descriptor"),
                         ValidationError);
}

TEST_CASE("protagonist VQA oracle: one phrase per protagonist, z-order") {
    auto corpus = default_corpus();
    auto s0 = generate_scene(corpus[0]);
    OracleVqa vqa;
    CHECK(vqa.answer(s0.video, &s0.descriptor) == std::vector<std::string>{"red square"});
    auto s4 = generate_scene(corpus[4]);
    auto phrases = vqa.answer(s4.video, &s4.descriptor);
    REQUIRE(phrases.size() == 2);
    CHECK(phrases[0] == "red square");
    CHECK(phrases[1] == "blue circle");
}

TEST_CASE("segmentation: exact on solid background, empty flag for absent color") {
    auto scene = generate_scene(default_corpus()[0]);
    auto frame0 = frame_of(scene.video, 0);
    auto seg = segment_first_frame(frame0, "red square");
    CHECK_FALSE(seg.empty);
    CHECK(iou(seg.mask, scene.masks[0].frame(0)) == 1.0);

    auto none = segment_first_frame(frame0, "cyan circle");
    CHECK(none.empty);
    CHECK(none.mask.area() == 0.0);

    CHECK_THROWS_AS(segment_first_frame(frame0, "the thing"), ValidationError);
}

TEST_CASE("segmentation survives a striped background sharing the protagonist hue") {
    auto scene = generate_scene(default_corpus()[5]); // magenta square on magenta stripes
    auto frame0 = frame_of(scene.video, 0);
    auto seg = segment_first_frame(frame0, "magenta square");
    CHECK_FALSE(seg.empty);
    CHECK(iou(seg.mask, scene.masks[0].frame(0)) >= 0.9);
}

TEST_CASE("tracking: linear trajectory IoU >= 0.95, static protagonist exact") {
    auto scene = generate_scene(default_corpus()[0]);
    auto seg = segment_first_frame(frame_of(scene.video, 0), "red square");
    auto track = track_masks(scene.video, seg.mask);
    CHECK_FALSE(track.lost);
    CHECK(iou(track.masks, scene.masks[0]) >= 0.95);

    SceneDescriptor still = default_corpus()[0];
    still.protagonists[0].trajectory.vel_x = 0.0;
    auto sscene = generate_scene(still);
    auto strack = track_masks(sscene.video, sscene.masks[0].frame(0));
    CHECK_FALSE(strack.lost);
    for (int f = 0; f < 8; ++f) CHECK(strack.masks.frame(f).data == sscene.masks[0].frame(0).data);
}

TEST_CASE("tracking sets the lost flag when the protagonist vanishes from the palette") {
    auto scene = generate_scene(default_corpus()[0]);
    VideoTensor adversarial = scene.video;
    // wipe the protagonist from frame 4 onward
    for (int f = 4; f < 8; ++f)
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x)
                if (scene.masks[0].at(f, y, x) > 0.5f) {
                    adversarial.at(f, 0, y, x) = -1.0f;
                    adversarial.at(f, 1, y, x) = 0.0f;
                    adversarial.at(f, 2, y, x) = -1.0f;
                }
    auto track = track_masks(adversarial, scene.masks[0].frame(0));
    CHECK(track.lost);
    // previous mask carried forward
    CHECK(track.masks.frame(4).data == track.masks.frame(3).data);

    CHECK_THROWS_AS(track_masks(scene.video, Mask2D(32, 32, 0.0f)), ValidationError);
}

TEST_CASE("embed_image: translation tolerance, color separation, determinism, zero-mask error") {
    auto canon = canonical_render(ShapeName::square, ColorName::red);
    auto e1 = embed_image(canon.image, &canon.mask);

    // same shape rendered off-center
    SceneDescriptor d;
    d.frames = 1;
    d.resolution = 32;
    ProtagonistSpec p;
    p.shape = ShapeName::square;
    p.color = ColorName::red;
    p.trajectory.start_x = 0.3;
    p.trajectory.start_y = 0.65;
    d.protagonists = {p};
    d.background = {StyleName::solid, ColorName::green};
    auto scene = generate_scene(d);
    auto m0 = scene.masks[0].frame(0);
    auto f0 = frame_of(scene.video, 0);
    auto e2 = embed_image(f0, &m0);
    CHECK(cosine(e1, e2) >= 0.99);

    auto blue = canonical_render(ShapeName::square, ColorName::blue);
    auto e3 = embed_image(blue.image, &blue.mask);
    CHECK(cosine(e1, e3) < 0.8);

    CHECK(embed_image(canon.image, &canon.mask).data == e1.data);

    Mask2D zero(32, 32, 0.0f);
    CHECK_THROWS_AS(embed_image(canon.image, &zero), ValidationError);
}

TEST_CASE("embed_text: bag of attributes, order-free, empty flagged") {
    auto e = embed_text("red square");
    CHECK(e.space == EmbeddingSpace::textual);
    // exactly the red dim and the square dim, normalized
    std::vector<float> expect(kEmbedDim, 0.0f);
    expect[0] = 1.0f / std::sqrt(2.0f);
    expect[6] = 1.0f / std::sqrt(2.0f);
    for (int i = 0; i < kEmbedDim; ++i) CHECK(e.data[static_cast<std::size_t>(i)] == doctest::Approx(expect[static_cast<std::size_t>(i)]));

    CHECK(embed_text("square red").data == embed_text("red square").data);
    CHECK(embed_text("a red square moving right").data == embed_text("red right square").data);

    auto empty = embed_text("");
    CHECK(empty.flagged);
    auto oov = embed_text("pelican briefcase");
    CHECK(oov.flagged);
    CHECK(empty.data == oov.data);
}

TEST_CASE("prior_convert: definitional equality, background prompts, vocabulary errors") {
    auto e = prior_convert("blue circle");
    auto canon = canonical_render(ShapeName::circle, ColorName::blue);
    CHECK(e.data == embed_image(canon.image, &canon.mask).data);
    CHECK(e.space == EmbeddingSpace::visual);

    auto bg = prior_convert("solid green background");
    // histogram mass sits in green bins: dims where g-index > 0, r=b=0
    double green_mass = 0, total = 0;
    for (int bin = 0; bin < kHistBins; ++bin) {
        const int br = bin / 9, bg_ = (bin / 3) % 3, bb = bin % 3;
        const double m = std::abs(bg.data[static_cast<std::size_t>(bin)]);
        total += m;
        if (br == 0 && bb == 0 && bg_ > 0) green_mass += m;
    }
    CHECK(green_mass / total > 0.99);

    CHECK_THROWS_AS(prior_convert("nothing recognizable"), ValidationError);
}

TEST_CASE("prior consistency across the whole vocabulary (A8 property)") {
    // every vocabulary protagonist, rendered into a scene, embeds within
    // 0.05 cosine distance of its prior-converted name
    for (int ci = 0; ci < kNumColors; ++ci)
        for (int si = 0; si < kNumShapes; ++si) {
            const auto color = static_cast<ColorName>(ci);
            const auto shape = static_cast<ShapeName>(si);
            SceneDescriptor d;
            d.frames = 2;
            d.resolution = 32;
            ProtagonistSpec p;
            p.shape = shape;
            p.color = color;
            p.trajectory.start_x = 0.42;
            p.trajectory.start_y = 0.58;
            p.trajectory.vel_x = 0.02;
            d.protagonists = {p};
            // background color far from protagonist hue
            d.background = {StyleName::solid, color == ColorName::green ? ColorName::blue : ColorName::green};
            auto scene = generate_scene(d);
            auto f0 = frame_of(scene.video, 0);
            auto m0 = scene.masks[0].frame(0);
            const std::string name = std::string(to_word(color)) + " " + to_word(shape);
            const double c = cosine(prior_convert(name), embed_image(f0, &m0));
            INFO(name);
            CHECK(std::abs(c - 1.0) <= 0.05);
        }
}

TEST_CASE("extract_control: zero on uniform frames, concentrated at boundaries, brightness invariant") {
    VideoTensor flat(2, 3, 16, 16, 0.3f);
    auto ctl = extract_control(flat);
    for (float v : ctl.data) CHECK(v == 0.0f);

    auto scene = generate_scene(default_corpus()[0]);
    auto control = extract_control(scene.video);
    // nonzero control lives within 1 px of the mask boundary (solid background)
    for (int y = 1; y < 31; ++y)
        for (int x = 1; x < 31; ++x) {
            if (control.at(0, y, x) <= 1e-6f) continue;
            bool near_boundary = false;
            for (int dy = -2; dy <= 2 && !near_boundary; ++dy)
                for (int dx = -2; dx <= 2 && !near_boundary; ++dx) {
                    const int yy = std::clamp(y + dy, 0, 31), xx = std::clamp(x + dx, 0, 31);
                    if (scene.masks[0].at(0, yy, xx) != scene.masks[0].at(0, y, x)) near_boundary = true;
                }
            CHECK(near_boundary);
        }

    VideoTensor brighter = scene.video;
    for (auto& v : brighter.data) v += 0.05f;
    auto control2 = extract_control(brighter);
    for (std::size_t i = 0; i < control.data.size(); ++i)
        CHECK(control2.data[i] == doctest::Approx(control.data[i]).epsilon(1e-4));
}

TEST_CASE("segment+track composed over the corpus: mean IoU >= 0.9") {
    double sum = 0;
    int n = 0;
    for (const auto& desc : default_corpus()) {
        auto scene = generate_scene(desc);
        auto answers = oracle_protagonist_answers(desc);
        for (std::size_t k = 0; k < answers.size(); ++k) {
            auto seg = segment_first_frame(frame_of(scene.video, 0), answers[k]);
            REQUIRE_FALSE(seg.empty);
            auto track = track_masks(scene.video, seg.mask);
            sum += iou(track.masks, scene.masks[k]);
            ++n;
        }
    }
    CHECK(sum / n >= 0.9);
}

TEST_CASE("salient_mask and reference classification") {
    auto canon = canonical_render(ShapeName::triangle, ColorName::cyan);
    auto sal = salient_mask(canon.image);
    CHECK_FALSE(sal.empty);
    CHECK(iou(sal.mask, canon.mask) == 1.0);

    auto e = embed_image(canon.image, &sal.mask);
    auto phrase = classify_protagonist_embedding(e);
    REQUIRE(phrase.has_value());
    CHECK(*phrase == "cyan triangle");

    // far-from-vocabulary embedding classifies to nothing
    std::vector<float> odd(kEmbedDim, 0.0f);
    odd[13] = 1.0f;
    CHECK_FALSE(classify_protagonist_embedding(Embedding(std::move(odd), EmbeddingSpace::visual)).has_value());
}

TEST_CASE("registry assembly from config, unknown names rejected") {
    auto r = make_oracle_registry();
    r.validate();

    nlohmann::json cfg = {{"captioner", "oracle"}, {"tracker", "oracle"}};
    auto r2 = registry_from_config(cfg);
    r2.validate();

    CHECK_THROWS_AS(registry_from_config({{"captioner", "blip2"}}), ValidationError);
    CHECK_THROWS_AS(registry_from_config({{"mystery_slot", "oracle"}}), ValidationError);
}

TEST_CASE("oracle experts are pure: identical calls, identical outputs") {
    auto scene = generate_scene(default_corpus()[1]);
    auto f0 = frame_of(scene.video, 0);
    auto a = segment_first_frame(f0, "blue circle");
    auto b = segment_first_frame(f0, "blue circle");
    CHECK(a.mask.data == b.mask.data);
    auto ta = track_masks(scene.video, a.mask);
    auto tb = track_masks(scene.video, b.mask);
    CHECK(ta.masks.data == tb.masks.data);
    CHECK(extract_control(scene.video).data == extract_control(scene.video).data);
}
