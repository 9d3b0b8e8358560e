#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "protag/common.hpp"
#include "protag/png.hpp"
#include "protag/scene.hpp"
#include "protag/tensor.hpp"

namespace protag {

namespace fs = std::filesystem;
using nlohmann::json;

// On-disk layout per video directory:
//   meta.json, frame_0000.png ..., mask_0000.png ... (protagonist 0),
//   mask1_0000.png ... (protagonist k>=1), scene.json (synthetic scenes only)

inline std::string frame_name(int f) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frame_%04d.png", f);
    return buf;
}
inline std::string mask_name(int protagonist, int f) {
    char buf[32];
    if (protagonist == 0)
        std::snprintf(buf, sizeof buf, "mask_%04d.png", f);
    else
        std::snprintf(buf, sizeof buf, "mask%d_%04d.png", protagonist, f);
    return buf;
}

inline std::uint8_t quantize_unit(float v) {
    // [-1,1] -> [0,255]
    float q = (v + 1.0f) * 0.5f * 255.0f;
    return static_cast<std::uint8_t>(std::clamp(std::lround(q), 0L, 255L));
}
inline float dequantize_unit(std::uint8_t b) {
    return static_cast<float>(b) / 255.0f * 2.0f - 1.0f;
}

inline void write_json_file(const fs::path& path, const json& j) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << j.dump(2) << "\n";
    if (!f) throw IoError("write failed: " + path.string());
}

inline json read_json_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path.string());
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw IoError("bad JSON in " + path.string() + ": " + e.what());
    }
    return j;
}

/// One 8-bit PNG per frame plus meta.json. Out-of-range values are clamped
/// and flagged in the metadata.
inline void save_video(const VideoTensor& video, const fs::path& dir) {
    require(video.channels == 3, "save_video: expected 3-channel video");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory: " + dir.string());

    bool clamped = false;
    for (float v : video.data)
        if (v < -1.0f || v > 1.0f) { clamped = true; break; }

    for (int f = 0; f < video.frames; ++f) {
        png::Pixels px;
        px.width = video.width;
        px.height = video.height;
        px.channels = 3;
        px.data.resize(static_cast<std::size_t>(px.width) * px.height * 3);
        for (int y = 0; y < video.height; ++y)
            for (int x = 0; x < video.width; ++x)
                for (int c = 0; c < 3; ++c)
                    px.data[(static_cast<std::size_t>(y) * px.width + x) * 3 + c] =
                        quantize_unit(video.at(f, c, y, x));
        png::write_file(dir / frame_name(f), px);
    }

    json meta;
    meta["frames"] = video.frames;
    meta["channels"] = video.channels;
    meta["height"] = video.height;
    meta["width"] = video.width;
    meta["frame_rate"] = video.frame_rate;
    meta["clamped"] = clamped;
    write_json_file(dir / "meta.json", meta);
}

inline VideoTensor load_video(const fs::path& dir) {
    if (!fs::exists(dir / "meta.json")) {
        bool any_frame = false;
        if (fs::exists(dir))
            for (const auto& e : fs::directory_iterator(dir))
                if (e.path().filename().string().rfind("frame_", 0) == 0) { any_frame = true; break; }
        if (!any_frame) throw IoError("no frames found in " + dir.string());
        throw IoError("missing meta.json in " + dir.string());
    }
    json meta = read_json_file(dir / "meta.json");
    const int F = meta.at("frames").get<int>();
    const int C = meta.at("channels").get<int>();
    const int H = meta.at("height").get<int>();
    const int W = meta.at("width").get<int>();
    require(F >= 1 && C == 3, "load_video: meta.json declares unsupported shape");

    int present = 0;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        if (name.rfind("frame_", 0) == 0 && name.size() == 14 && name.substr(10) == ".png") ++present;
    }
    if (present == 0) throw IoError("no frames found in " + dir.string());
    if (present != F)
        throw IoError("frame count mismatch in " + dir.string() + ": meta.json says " +
                      std::to_string(F) + ", found " + std::to_string(present));

    VideoTensor video(F, C, H, W);
    video.frame_rate = meta.value("frame_rate", 8);
    for (int f = 0; f < F; ++f) {
        const fs::path p = dir / frame_name(f);
        if (!fs::exists(p))
            throw IoError("missing frame index " + std::to_string(f) + " (" + p.string() + ")");
        png::Pixels px = png::read_file(p);
        if (px.width != W || px.height != H || (px.channels != 3 && px.channels != 4))
            throw IoError("frame shape mismatch at " + p.string());
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                for (int c = 0; c < 3; ++c)
                    video.at(f, c, y, x) = dequantize_unit(
                        px.data[(static_cast<std::size_t>(y) * W + x) * px.channels + c]);
    }
    return video;
}

/// 8-bit grayscale, 255 = protagonist.
inline void save_masks(const MaskVolume& masks, const fs::path& dir, int protagonist = 0) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory: " + dir.string());
    for (int f = 0; f < masks.frames; ++f) {
        png::Pixels px;
        px.width = masks.width;
        px.height = masks.height;
        px.channels = 1;
        px.data.resize(static_cast<std::size_t>(px.width) * px.height);
        for (int y = 0; y < masks.height; ++y)
            for (int x = 0; x < masks.width; ++x)
                px.data[static_cast<std::size_t>(y) * px.width + x] = static_cast<std::uint8_t>(
                    std::clamp(std::lround(masks.at(f, y, x) * 255.0f), 0L, 255L));
        png::write_file(dir / mask_name(protagonist, f), px);
    }
}

inline MaskVolume load_masks(const fs::path& dir, int frames, int protagonist = 0) {
    MaskVolume masks;
    for (int f = 0; f < frames; ++f) {
        const fs::path p = dir / mask_name(protagonist, f);
        if (!fs::exists(p))
            throw IoError("missing mask frame " + std::to_string(f) + " for protagonist " +
                          std::to_string(protagonist) + " in " + dir.string());
        png::Pixels px = png::read_file(p);
        require(px.channels == 1, "mask PNGs must be grayscale: " + p.string());
        if (f == 0) masks = MaskVolume(frames, px.height, px.width);
        require(px.height == masks.height && px.width == masks.width, "mask shape mismatch: " + p.string());
        for (int y = 0; y < px.height; ++y)
            for (int x = 0; x < px.width; ++x)
                masks.at(f, y, x) = static_cast<float>(px.data[static_cast<std::size_t>(y) * px.width + x]) / 255.0f;
    }
    return masks;
}

inline int count_mask_volumes(const fs::path& dir) {
    int k = 0;
    while (fs::exists(dir / mask_name(k, 0))) ++k;
    return k;
}

inline void save_scene_descriptor(const SceneDescriptor& d, const fs::path& dir) {
    write_json_file(dir / "scene.json", scene_json::to_json(d));
}

inline std::optional<SceneDescriptor> try_load_scene_descriptor(const fs::path& dir) {
    if (!fs::exists(dir / "scene.json")) return std::nullopt;
    return scene_json::descriptor_from_json(read_json_file(dir / "scene.json"));
}

/// Single image as RGB PNG (values clamped to [-1,1]).
inline void save_image(const Image& im, const fs::path& path) {
    require(im.channels == 3, "save_image: expected 3 channels");
    png::Pixels px;
    px.width = im.width;
    px.height = im.height;
    px.channels = 3;
    px.data.resize(static_cast<std::size_t>(px.width) * px.height * 3);
    for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x)
            for (int c = 0; c < 3; ++c)
                px.data[(static_cast<std::size_t>(y) * px.width + x) * 3 + c] = quantize_unit(im.at(c, y, x));
    png::write_file(path, px);
}

inline Image load_image(const fs::path& path) {
    png::Pixels px = png::read_file(path);
    require(px.channels >= 3, "load_image: expected RGB(A) PNG: " + path.string());
    Image im(3, px.height, px.width);
    for (int y = 0; y < px.height; ++y)
        for (int x = 0; x < px.width; ++x)
            for (int c = 0; c < 3; ++c)
                im.at(c, y, x) = dequantize_unit(px.data[(static_cast<std::size_t>(y) * px.width + x) * px.channels + c]);
    return im;
}

} // namespace protag
