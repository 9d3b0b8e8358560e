#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "protag/common.hpp"
#include "protag/scene.hpp"
#include "protag/tensor.hpp"
#include "protag/vocab.hpp"

namespace protag {

// Toy scenes: rigid colored shapes translated along parametric paths over
// low-frequency backgrounds. Shapes are stamped from integer stencils at
// rounded centers, so a moving shape keeps its pixel area exactly and the
// ground-truth mask is exact by construction. No antialiasing on purpose.

namespace synth {

// Background palette uses dimmed colors so pure protagonist colors stay
// unique in the frame (segmentation / tracking oracles key on that).
inline constexpr float kBgDim = 0.5f;
inline constexpr float kGradientLow = 0.15f;
inline constexpr int kStripeHeight = 4;

struct Stencil {
    int radius = 0;
    std::vector<std::pair<int, int>> offsets; // (dy, dx)
};

inline Stencil make_stencil(ShapeName shape, int radius) {
    Stencil st;
    st.radius = radius;
    const int r = radius;
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
            bool in = false;
            switch (shape) {
                case ShapeName::square: in = true; break;
                case ShapeName::circle: in = dx * dx + dy * dy <= r * r; break;
                case ShapeName::triangle: in = std::abs(dx) <= (dy + r) / 2; break;
            }
            if (in) st.offsets.emplace_back(dy, dx);
        }
    return st;
}

inline int stencil_radius(double size_fraction, int resolution) {
    return std::max(1, static_cast<int>(std::lround(size_fraction * resolution / 2.0)));
}

// [-1,1] pixel value of a [0,1] intensity.
inline float to_unit(float v01) { return 2.0f * v01 - 1.0f; }

inline void paint_background(Image& im, const BackgroundSpec& bg) {
    const Rgb c = color_rgb(bg.color);
    for (int y = 0; y < im.height; ++y) {
        float fr, fg, fb;
        switch (bg.style) {
            case StyleName::solid:
                fr = kBgDim * c.r; fg = kBgDim * c.g; fb = kBgDim * c.b;
                break;
            case StyleName::gradient: {
                const float lam = im.height > 1
                    ? kBgDim + (kGradientLow - kBgDim) * static_cast<float>(y) / (im.height - 1)
                    : kBgDim;
                fr = lam * c.r; fg = lam * c.g; fb = lam * c.b;
                break;
            }
            case StyleName::stripes: {
                const bool band = (y / kStripeHeight) % 2 == 0;
                if (band) { fr = kBgDim * c.r; fg = kBgDim * c.g; fb = kBgDim * c.b; }
                else { fr = 0.5f; fg = 0.5f; fb = 0.5f; } // mid-gray band
                break;
            }
        }
        for (int x = 0; x < im.width; ++x) {
            im.at(0, y, x) = to_unit(fr);
            im.at(1, y, x) = to_unit(fg);
            im.at(2, y, x) = to_unit(fb);
        }
    }
}

inline std::pair<int, int> center_pixel(const Trajectory& t, int f, int resolution) {
    auto [x, y] = t.at(f);
    return {static_cast<int>(std::lround(x * (resolution - 1))),
            static_cast<int>(std::lround(y * (resolution - 1)))};
}

} // namespace synth

struct Scene {
    VideoTensor video;
    std::vector<MaskVolume> masks; // one per protagonist, z-order = descriptor order
    SceneDescriptor descriptor;
};

/// Renders the descriptor. Later protagonists occlude earlier ones; each mask
/// covers exactly the visible pixels of its protagonist.
inline Scene generate_scene(const SceneDescriptor& desc) {
    desc.validate();
    const int R = desc.resolution, F = desc.frames;
    const int K = static_cast<int>(desc.protagonists.size());

    // validate trajectories up front
    for (int k = 0; k < K; ++k) {
        const auto& p = desc.protagonists[k];
        const int r = synth::stencil_radius(p.size, R);
        for (int f = 0; f < F; ++f) {
            auto [cx, cy] = synth::center_pixel(p.trajectory, f, R);
            if (cx - r < 0 || cx + r >= R || cy - r < 0 || cy + r >= R)
                throw ValidationError("trajectory exits frame: protagonist " + std::to_string(k) +
                                      " (" + p.phrase() + ") at frame " + std::to_string(f));
        }
    }

    Scene scene;
    scene.descriptor = desc;
    scene.video = VideoTensor(F, 3, R, R);
    for (int k = 0; k < K; ++k) scene.masks.emplace_back(F, R, R, 0.0f);

    Image bg(3, R, R);
    synth::paint_background(bg, desc.background);

    std::vector<int> owner(static_cast<std::size_t>(R) * R);
    for (int f = 0; f < F; ++f) {
        std::fill(owner.begin(), owner.end(), -1);
        for (int k = 0; k < K; ++k) {
            const auto& p = desc.protagonists[k];
            const auto st = synth::make_stencil(p.shape, synth::stencil_radius(p.size, R));
            auto [cx, cy] = synth::center_pixel(p.trajectory, f, R);
            for (auto [dy, dx] : st.offsets)
                owner[static_cast<std::size_t>(cy + dy) * R + (cx + dx)] = k;
        }
        for (int y = 0; y < R; ++y)
            for (int x = 0; x < R; ++x) {
                const int k = owner[static_cast<std::size_t>(y) * R + x];
                if (k < 0) {
                    for (int c = 0; c < 3; ++c) scene.video.at(f, c, y, x) = bg.at(c, y, x);
                } else {
                    const Rgb rgb = color_rgb(desc.protagonists[k].color);
                    scene.video.at(f, 0, y, x) = synth::to_unit(rgb.r);
                    scene.video.at(f, 1, y, x) = synth::to_unit(rgb.g);
                    scene.video.at(f, 2, y, x) = synth::to_unit(rgb.b);
                    scene.masks[k].at(f, y, x) = 1.0f;
                }
            }
    }
    return scene;
}

struct CanonicalRender {
    Image image;
    Mask2D mask;
};

/// The shape centered on neutral mid-gray at canonical scale (40% of frame
/// height). Feeds the prior converter and reference-image generation.
inline CanonicalRender canonical_render(ShapeName shape, ColorName color, int resolution = 32) {
    require(resolution >= 8, "canonical_render: resolution too small");
    CanonicalRender out;
    out.image = Image(3, resolution, resolution, 0.0f); // mid-gray in [-1,1]
    out.mask = Mask2D(resolution, resolution, 0.0f);
    const int r = synth::stencil_radius(0.4, resolution);
    const int c0 = static_cast<int>(std::lround(0.5 * (resolution - 1)));
    const auto st = synth::make_stencil(shape, r);
    const Rgb rgb = color_rgb(color);
    for (auto [dy, dx] : st.offsets) {
        const int y = c0 + dy, x = c0 + dx;
        out.image.at(0, y, x) = synth::to_unit(rgb.r);
        out.image.at(1, y, x) = synth::to_unit(rgb.g);
        out.image.at(2, y, x) = synth::to_unit(rgb.b);
        out.mask.at(y, x) = 1.0f;
    }
    return out;
}

/// Full-frame background at the canonical palette, for background prompts.
inline Image canonical_background_render(StyleName style, ColorName color, int resolution = 32) {
    Image im(3, resolution, resolution);
    synth::paint_background(im, BackgroundSpec{style, color});
    return im;
}

/// The default six-scene corpus used by `synth` when no config is given.
/// Covers all editing modes: single protagonists over each background style,
/// a two-protagonist scene, and a hue-sharing adversarial scene.
inline std::vector<SceneDescriptor> default_corpus() {
    auto linear = [](double sx, double sy, double vx, double vy) {
        Trajectory t;
        t.kind = Trajectory::Kind::linear;
        t.start_x = sx; t.start_y = sy; t.vel_x = vx; t.vel_y = vy;
        return t;
    };
    auto circular = [](double cx, double cy, double r, double rate) {
        Trajectory t;
        t.kind = Trajectory::Kind::circular;
        t.start_x = cx; t.start_y = cy; t.radius = r; t.angular_rate = rate;
        return t;
    };

    std::vector<SceneDescriptor> scenes(6);
    scenes[0].protagonists = {{ShapeName::square, ColorName::red, linear(0.30, 0.50, 0.05, 0.0), 0.4}};
    scenes[0].background = {StyleName::solid, ColorName::green};
    scenes[0].seed = 0;

    scenes[1].protagonists = {{ShapeName::circle, ColorName::blue, linear(0.50, 0.30, 0.0, 0.04), 0.4}};
    scenes[1].background = {StyleName::gradient, ColorName::magenta};
    scenes[1].seed = 1;

    scenes[2].protagonists = {{ShapeName::triangle, ColorName::green, circular(0.50, 0.50, 0.15, 0.5), 0.4}};
    scenes[2].background = {StyleName::stripes, ColorName::yellow};
    scenes[2].seed = 2;

    scenes[3].protagonists = {{ShapeName::circle, ColorName::yellow, linear(0.65, 0.45, -0.045, 0.0), 0.4}};
    scenes[3].background = {StyleName::solid, ColorName::blue};
    scenes[3].seed = 3;

    scenes[4].protagonists = {
        {ShapeName::square, ColorName::red, linear(0.27, 0.30, 0.04, 0.0), 0.35},
        {ShapeName::circle, ColorName::blue, linear(0.70, 0.70, -0.04, 0.0), 0.35}};
    scenes[4].background = {StyleName::solid, ColorName::green};
    scenes[4].seed = 4;

    scenes[5].protagonists = {{ShapeName::square, ColorName::magenta, linear(0.50, 0.62, 0.0, -0.03), 0.4}};
    scenes[5].background = {StyleName::stripes, ColorName::magenta};
    scenes[5].seed = 5;

    for (auto& s : scenes) {
        s.frames = 8;
        s.resolution = 32;
    }
    return scenes;
}

} // namespace protag
