#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "protag/experts.hpp"
#include "protag/io.hpp"
#include "protag/synthdata.hpp"

using namespace protag;
namespace fs = std::filesystem;

namespace {
SceneDescriptor red_square_scene() {
    SceneDescriptor d;
    d.frames = 8;
    d.resolution = 32;
    ProtagonistSpec p;
    p.shape = ShapeName::square;
    p.color = ColorName::red;
    p.trajectory.kind = Trajectory::Kind::linear;
    p.trajectory.start_x = 0.3;
    p.trajectory.start_y = 0.5;
    p.trajectory.vel_x = 0.05;
    d.protagonists = {p};
    d.background = {StyleName::solid, ColorName::green};
    return d;
}
} // namespace

TEST_CASE("single rigid protagonist keeps constant mask area across frames") {
    auto scene = generate_scene(red_square_scene());
    const double a0 = scene.masks[0].frame(0).area();
    CHECK(a0 > 0);
    for (int f = 1; f < 8; ++f) CHECK(scene.masks[0].frame(f).area() == a0);
}

TEST_CASE("frames stay in [-1,1] and masks are exact over the solid background") {
    auto scene = generate_scene(red_square_scene());
    for (float v : scene.video.data) {
        CHECK(v >= -1.0f);
        CHECK(v <= 1.0f);
    }
    // every pure-red pixel is masked, everything else is not
    for (int f = 0; f < scene.video.frames; ++f)
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                const bool red = scene.video.at(f, 0, y, x) == 1.0f &&
                                 scene.video.at(f, 1, y, x) == -1.0f &&
                                 scene.video.at(f, 2, y, x) == -1.0f;
                REQUIRE(scene.masks[0].at(f, y, x) == (red ? 1.0f : 0.0f));
            }
}

TEST_CASE("two protagonists: masks disjoint, union <= 1, z-order occludes") {
    auto corpus = default_corpus();
    auto scene = generate_scene(corpus[4]);
    REQUIRE(scene.masks.size() == 2);
    for (std::size_t i = 0; i < scene.masks[0].data.size(); ++i)
        CHECK(scene.masks[0].data[i] + scene.masks[1].data[i] <= 1.0f);

    // overlapping descriptor: later protagonist wins the contested pixels
    SceneDescriptor d = corpus[4];
    d.protagonists[1].trajectory = d.protagonists[0].trajectory; // same path
    auto clash = generate_scene(d);
    CHECK(clash.masks[1].frame(0).area() > 0);
    // protagonist 0 is fully occluded wherever 1 sits
    for (std::size_t i = 0; i < clash.masks[0].data.size(); ++i)
        CHECK(clash.masks[0].data[i] * clash.masks[1].data[i] == 0.0f);
}

TEST_CASE("determinism: same descriptor twice gives bit-identical frames") {
    auto a = generate_scene(red_square_scene());
    auto b = generate_scene(red_square_scene());
    CHECK(a.video.data == b.video.data);
    CHECK(a.masks[0].data == b.masks[0].data);
}

TEST_CASE("regenerating from a saved descriptor reproduces the dataset bit-exactly") {
    auto dir = fs::temp_directory_path() / "protag_test_scene_regen";
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto scene = generate_scene(red_square_scene());
    save_scene_descriptor(scene.descriptor, dir);
    auto loaded = try_load_scene_descriptor(dir);
    REQUIRE(loaded.has_value());
    auto again = generate_scene(*loaded);
    CHECK(again.video.data == scene.video.data);
}

TEST_CASE("trajectory exiting the frame fails at construction") {
    auto d = red_square_scene();
    d.protagonists[0].trajectory.vel_x = 0.2; // walks off the right edge
    CHECK_THROWS_WITH_AS(generate_scene(d), doctest::Contains("trajectory exits frame"), ValidationError);
}

TEST_CASE("canonical render: deterministic, centered, vocabulary-checked") {
    auto a = canonical_render(ShapeName::circle, ColorName::blue);
    auto b = canonical_render(ShapeName::circle, ColorName::blue);
    CHECK(a.image.data == b.image.data);
    CHECK(a.mask.data == b.mask.data);
    CHECK(a.mask.area() > 0);

    // centered blue circle on neutral gray
    const int c0 = 16;
    CHECK(a.mask.at(c0, c0) == 1.0f);
    CHECK(a.image.at(2, c0, c0) == 1.0f);  // blue channel
    CHECK(a.image.at(0, c0, c0) == -1.0f); // no red
    CHECK(a.image.at(0, 0, 0) == 0.0f);    // gray corner

    CHECK_THROWS_AS(parse_shape_or_throw("hexagon"), ValidationError);
    CHECK_THROWS_AS(parse_color_or_throw("teal"), ValidationError);
}

TEST_CASE("canonical embedding matches in-scene masked embedding within 0.02 cosine distance") {
    auto canon = canonical_render(ShapeName::square, ColorName::red);
    auto e_canon = embed_image(canon.image, &canon.mask);

    auto scene = generate_scene(red_square_scene());
    for (int f = 0; f < scene.video.frames; f += 3) {
        auto frame = frame_of(scene.video, f);
        auto mask = scene.masks[0].frame(f);
        auto e_scene = embed_image(frame, &mask);
        CHECK(1.0 - cosine(e_canon, e_scene) < 0.02);
    }
}

TEST_CASE("default corpus: six scenes, all render, styles covered") {
    auto corpus = default_corpus();
    REQUIRE(corpus.size() == 6);
    bool styles[3] = {false, false, false};
    for (const auto& d : corpus) {
        auto scene = generate_scene(d);
        CHECK(scene.video.frames == 8);
        CHECK(scene.video.height == 32);
        styles[static_cast<int>(d.background.style)] = true;
    }
    CHECK(styles[0]);
    CHECK(styles[1]);
    CHECK(styles[2]);
}
