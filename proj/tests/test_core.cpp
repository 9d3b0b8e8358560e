#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "protag/io.hpp"
#include "protag/rng.hpp"
#include "protag/tensor.hpp"

using namespace protag;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("protag_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}
} // namespace

TEST_CASE("seeded rng: same seed reproduces, different seeds differ") {
    Rng a(0), b(0), c(1);
    bool all_equal = true, any_diff = false;
    for (int i = 0; i < 100; ++i) {
        const double va = a.u01(), vb = b.u01(), vc = c.u01();
        all_equal = all_equal && va == vb;
        any_diff = any_diff || va != vc;
    }
    CHECK(all_equal);
    CHECK(any_diff);
}

TEST_CASE("rng normal has sane moments and forks are independent") {
    Rng r(7);
    double sum = 0, sum2 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double v = r.normal();
        sum += v;
        sum2 += v * v;
    }
    CHECK(std::abs(sum / n) < 0.03);
    CHECK(std::abs(sum2 / n - 1.0) < 0.05);

    Rng base(3);
    Rng f1 = base.fork("train");
    Rng f2 = base.fork("edit");
    CHECK(f1.next_u64() != f2.next_u64());
    CHECK(Rng(3).fork("train").next_u64() == Rng(3).fork("train").next_u64());
}

TEST_CASE("png round trip, gray and rgb") {
    png::Pixels px;
    px.width = 9;
    px.height = 5;
    px.channels = 3;
    px.data.resize(9 * 5 * 3);
    for (std::size_t i = 0; i < px.data.size(); ++i) px.data[i] = static_cast<std::uint8_t>((i * 37) % 256);
    auto bytes = png::encode(px);
    auto back = png::decode(bytes);
    CHECK(back.width == 9);
    CHECK(back.height == 5);
    CHECK(back.channels == 3);
    CHECK(back.data == px.data);

    px.channels = 1;
    px.data.resize(9 * 5);
    for (std::size_t i = 0; i < px.data.size(); ++i) px.data[i] = static_cast<std::uint8_t>((i * 11) % 256);
    CHECK(png::decode(png::encode(px)).data == px.data);
}

TEST_CASE("save_video: all-zeros maps to uniform mid-gray 128") {
    auto dir = temp_dir("midgray");
    VideoTensor v(8, 3, 32, 32, 0.0f);
    save_video(v, dir);
    auto px = png::read_file(dir / "frame_0000.png");
    for (auto b : px.data) REQUIRE(b == 128);
    json meta = read_json_file(dir / "meta.json");
    CHECK(meta.at("clamped").get<bool>() == false);
    CHECK(meta.at("frames").get<int>() == 8);
}

TEST_CASE("save_video endpoints: -1 -> 0 and +1 -> 255; clamp flag set when out of range") {
    auto dir = temp_dir("endpoints");
    VideoTensor v(1, 3, 2, 2, -1.0f);
    v.at(0, 0, 0, 1) = 1.0f;
    v.at(0, 0, 1, 1) = 1.7f; // out of range, clamps to 255
    save_video(v, dir);
    auto px = png::read_file(dir / "frame_0000.png");
    CHECK(px.data[0] == 0);
    CHECK(px.data[3] == 255);
    CHECK(px.data[(1 * 2 + 1) * 3] == 255);
    CHECK(read_json_file(dir / "meta.json").at("clamped").get<bool>() == true);
}

TEST_CASE("video save/load round trip within quantization bound") {
    auto dir = temp_dir("roundtrip");
    Rng rng(5);
    VideoTensor v(4, 3, 16, 16);
    for (auto& x : v.data) x = static_cast<float>(rng.u01() * 2.0 - 1.0);
    save_video(v, dir);
    VideoTensor back = load_video(dir);
    REQUIRE(back.same_shape(v));
    float max_err = 0.0f;
    for (std::size_t i = 0; i < v.size(); ++i) max_err = std::max(max_err, std::abs(v.data[i] - back.data[i]));
    CHECK(max_err <= 1.0f / 255.0f + 1e-6f);

    // second trip is exact: quantization is idempotent
    auto dir2 = temp_dir("roundtrip2");
    save_video(back, dir2);
    VideoTensor back2 = load_video(dir2);
    CHECK(back2.data == back.data);
}

TEST_CASE("load_video error paths") {
    auto dir = temp_dir("errors_empty");
    CHECK_THROWS_WITH_AS(load_video(dir), doctest::Contains("no frames found"), IoError);

    auto dir2 = temp_dir("errors_gap");
    VideoTensor v(3, 3, 8, 8, 0.0f);
    save_video(v, dir2);
    fs::remove(dir2 / "frame_0001.png");
    CHECK_THROWS_AS(load_video(dir2), IoError); // count mismatch reported

    auto dir3 = temp_dir("errors_named_gap");
    save_video(v, dir3);
    fs::rename(dir3 / "frame_0001.png", dir3 / "frame_0003.png");
    CHECK_THROWS_WITH_AS(load_video(dir3), doctest::Contains("missing frame index 1"), IoError);
}

TEST_CASE("mask volume save/load round trip") {
    auto dir = temp_dir("masks");
    MaskVolume m(3, 8, 8, 0.0f);
    m.at(0, 2, 3) = 1.0f;
    m.at(1, 4, 4) = 1.0f;
    m.at(2, 7, 7) = 0.5f;
    save_masks(m, dir, 0);
    save_masks(m, dir, 1);
    auto back = load_masks(dir, 3, 0);
    CHECK(back.at(0, 2, 3) == 1.0f);
    CHECK(back.at(1, 4, 4) == 1.0f);
    CHECK(back.at(2, 7, 7) == doctest::Approx(0.5).epsilon(0.01));
    CHECK(count_mask_volumes(dir) == 2);
}

TEST_CASE("embedding normalization and cosine guards") {
    Embedding e(std::vector<float>{3, 4}, EmbeddingSpace::visual);
    CHECK(e.data[0] == doctest::Approx(0.6f));
    CHECK(e.data[1] == doctest::Approx(0.8f));
    Embedding t(std::vector<float>{1, 0}, EmbeddingSpace::textual);
    CHECK_THROWS_AS(cosine(e, t), ValidationError);
    CHECK(cosine(e, e) == doctest::Approx(1.0));

    auto nul = Embedding::null_of(4, EmbeddingSpace::visual);
    CHECK(nul.is_null());
    CHECK(nul.flagged);
}

TEST_CASE("frame extraction and mask volume views") {
    VideoTensor v(2, 3, 4, 4, 0.0f);
    v.at(1, 2, 3, 1) = 0.25f;
    Image f1 = frame_of(v, 1);
    CHECK(f1.at(2, 3, 1) == 0.25f);
    CHECK_THROWS_AS(frame_of(v, 2), ValidationError);
}
