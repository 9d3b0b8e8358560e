#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "protag/common.hpp"

namespace protag {

/// F x C x H x W video (frames, channels, height, width), row-major float32.
/// Decoded video lives in [-1, 1]; latents mid-denoising are unbounded.
/// Doubles as the latent because the autoencoder is the identity at toy scale.
struct VideoTensor {
    int frames = 0, channels = 0, height = 0, width = 0;
    int frame_rate = 8; // informational
    std::vector<float> data;

    VideoTensor() = default;
    VideoTensor(int f, int c, int h, int w, float fill = 0.0f)
        : frames(f), channels(c), height(h), width(w),
          data(static_cast<std::size_t>(f) * c * h * w, fill) {
        require(f >= 1 && c >= 1 && h >= 1 && w >= 1, "VideoTensor: dims must be positive");
    }

    std::size_t size() const { return data.size(); }
    std::size_t index(int f, int c, int y, int x) const {
        return ((static_cast<std::size_t>(f) * channels + c) * height + y) * width + x;
    }
    float& at(int f, int c, int y, int x) { return data[index(f, c, y, x)]; }
    float at(int f, int c, int y, int x) const { return data[index(f, c, y, x)]; }

    bool same_shape(const VideoTensor& o) const {
        return frames == o.frames && channels == o.channels && height == o.height && width == o.width;
    }
    std::string shape_str() const {
        return std::to_string(frames) + "x" + std::to_string(channels) + "x" +
               std::to_string(height) + "x" + std::to_string(width);
    }

    double norm() const {
        double s = 0.0;
        for (float v : data) s += static_cast<double>(v) * v;
        return std::sqrt(s);
    }
    double mean_square() const {
        if (data.empty()) return 0.0;
        double s = 0.0;
        for (float v : data) s += static_cast<double>(v) * v;
        return s / static_cast<double>(data.size());
    }
};

inline void require_same_shape(const VideoTensor& a, const VideoTensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ValidationError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

/// Single frame, C x H x W.
struct Image {
    int channels = 0, height = 0, width = 0;
    std::vector<float> data;

    Image() = default;
    Image(int c, int h, int w, float fill = 0.0f)
        : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

    std::size_t index(int c, int y, int x) const {
        return (static_cast<std::size_t>(c) * height + y) * width + x;
    }
    float& at(int c, int y, int x) { return data[index(c, y, x)]; }
    float at(int c, int y, int x) const { return data[index(c, y, x)]; }
};

inline Image frame_of(const VideoTensor& v, int f) {
    require(f >= 0 && f < v.frames, "frame_of: frame index out of range");
    Image im(v.channels, v.height, v.width);
    const std::size_t n = static_cast<std::size_t>(v.channels) * v.height * v.width;
    std::copy_n(v.data.begin() + static_cast<std::ptrdiff_t>(f) * n, n, im.data.begin());
    return im;
}

/// H x W mask, values in [0, 1].
struct Mask2D {
    int height = 0, width = 0;
    std::vector<float> data;

    Mask2D() = default;
    Mask2D(int h, int w, float fill = 0.0f)
        : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

    float& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
    float at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }

    double area() const {
        double s = 0.0;
        for (float v : data) s += v;
        return s;
    }
    bool empty_mask() const { return area() <= 0.0; }
};

/// F x H x W per-frame masks in [0, 1]. Segmentation output is binary {0, 1};
/// masks area-averaged to coarser levels are fractional.
struct MaskVolume {
    int frames = 0, height = 0, width = 0;
    std::vector<float> data;

    MaskVolume() = default;
    MaskVolume(int f, int h, int w, float fill = 0.0f)
        : frames(f), height(h), width(w), data(static_cast<std::size_t>(f) * h * w, fill) {}

    std::size_t index(int f, int y, int x) const {
        return (static_cast<std::size_t>(f) * height + y) * width + x;
    }
    float& at(int f, int y, int x) { return data[index(f, y, x)]; }
    float at(int f, int y, int x) const { return data[index(f, y, x)]; }

    Mask2D frame(int f) const {
        require(f >= 0 && f < frames, "MaskVolume::frame: index out of range");
        Mask2D m(height, width);
        std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(f) * height * width,
                    static_cast<std::size_t>(height) * width, m.data.begin());
        return m;
    }
    void set_frame(int f, const Mask2D& m) {
        require(m.height == height && m.width == width, "MaskVolume::set_frame: shape mismatch");
        std::copy_n(m.data.begin(), m.data.size(),
                    data.begin() + static_cast<std::ptrdiff_t>(f) * height * width);
    }
    void clamp01() {
        for (auto& v : data) v = std::clamp(v, 0.0f, 1.0f);
    }
};

/// F x 1 x H x W structure signal in [0, 1] (edge magnitude here; depth/pose
/// in the full-scale system). Stored as F x H x W.
struct ControlVolume {
    int frames = 0, height = 0, width = 0;
    std::vector<float> data;

    ControlVolume() = default;
    ControlVolume(int f, int h, int w, float fill = 0.0f)
        : frames(f), height(h), width(w), data(static_cast<std::size_t>(f) * h * w, fill) {}

    float& at(int f, int y, int x) { return data[(static_cast<std::size_t>(f) * height + y) * width + x]; }
    float at(int f, int y, int x) const { return data[(static_cast<std::size_t>(f) * height + y) * width + x]; }
};

enum class EmbeddingSpace { visual, textual };

inline const char* to_string(EmbeddingSpace s) {
    return s == EmbeddingSpace::visual ? "visual" : "textual";
}

/// Fixed-length unit-norm vector in the shared toy embedding space.
struct Embedding {
    std::vector<float> data;
    EmbeddingSpace space = EmbeddingSpace::visual;
    bool flagged = false; // set for degenerate inputs (empty prompt, ...)

    Embedding() = default;
    Embedding(std::vector<float> v, EmbeddingSpace s, bool normalize = true)
        : data(std::move(v)), space(s) {
        if (normalize) unit_normalize();
    }

    int dim() const { return static_cast<int>(data.size()); }

    void unit_normalize() {
        double n = 0.0;
        for (float v : data) n += static_cast<double>(v) * v;
        n = std::sqrt(n);
        require(n > 0.0, "Embedding: cannot normalize zero vector");
        for (auto& v : data) v = static_cast<float>(v / n);
    }

    static Embedding null_of(int dim, EmbeddingSpace s) {
        Embedding e;
        e.data.assign(static_cast<std::size_t>(dim), 0.0f);
        e.space = s;
        e.flagged = true;
        return e;
    }
    bool is_null() const {
        for (float v : data)
            if (v != 0.0f) return false;
        return true;
    }
};

inline double cosine(const Embedding& a, const Embedding& b) {
    require(a.space == b.space, "cosine: embeddings from different spaces");
    require(a.dim() == b.dim(), "cosine: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int i = 0; i < a.dim(); ++i) {
        dot += static_cast<double>(a.data[i]) * b.data[i];
        na += static_cast<double>(a.data[i]) * a.data[i];
        nb += static_cast<double>(b.data[i]) * b.data[i];
    }
    require(na > 0.0 && nb > 0.0, "cosine: zero embedding");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// F embeddings (one per frame) or a single broadcastable one.
struct FrameEmbeddings {
    std::vector<Embedding> rows;

    FrameEmbeddings() = default;
    explicit FrameEmbeddings(Embedding single) { rows.push_back(std::move(single)); }
    explicit FrameEmbeddings(std::vector<Embedding> per_frame) : rows(std::move(per_frame)) {
        require(!rows.empty(), "FrameEmbeddings: empty");
    }

    bool broadcast() const { return rows.size() == 1; }
    int frames() const { return static_cast<int>(rows.size()); }
    int dim() const { return rows.empty() ? 0 : rows.front().dim(); }

    const Embedding& row(int f) const { return broadcast() ? rows.front() : rows[static_cast<std::size_t>(f)]; }

    void check_frames(int f, const char* op) const {
        require(broadcast() || frames() == f,
                std::string(op) + ": FrameEmbeddings rows must be 1 or match frame count");
    }
};

} // namespace protag
