#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "protag/common.hpp"
#include "protag/vocab.hpp"

namespace protag {

/// Parametric path in [0,1]^2 scene coordinates (x right, y down).
struct Trajectory {
    enum class Kind { linear, circular };
    Kind kind = Kind::linear;
    double start_x = 0.5, start_y = 0.5; // linear: position at frame 0; circular: center
    double vel_x = 0.0, vel_y = 0.0;     // linear: units per frame
    double radius = 0.0;                 // circular
    double angular_rate = 0.0;           // circular: radians per frame
    double phase = 0.0;                  // circular: radians at frame 0

    // Continuous position at frame f.
    std::pair<double, double> at(int f) const {
        if (kind == Kind::linear)
            return {start_x + vel_x * f, start_y + vel_y * f};
        const double a = phase + angular_rate * f;
        return {start_x + radius * std::cos(a), start_y + radius * std::sin(a)};
    }

    // Caption word for the dominant motion.
    std::string direction_word() const {
        if (kind == Kind::circular) return "around";
        if (std::abs(vel_x) >= std::abs(vel_y))
            return vel_x >= 0 ? "right" : "left";
        return vel_y >= 0 ? "down" : "up";
    }
};

struct ProtagonistSpec {
    ShapeName shape = ShapeName::square;
    ColorName color = ColorName::red;
    Trajectory trajectory;
    double size = 0.4; // shape height as a fraction of frame height

    std::string phrase() const { return std::string(to_word(color)) + " " + to_word(shape); }
};

struct BackgroundSpec {
    StyleName style = StyleName::solid;
    ColorName color = ColorName::green;
};

/// Everything needed to regenerate a synthetic scene bit-exactly.
struct SceneDescriptor {
    std::vector<ProtagonistSpec> protagonists;
    BackgroundSpec background;
    int frames = 8;
    int resolution = 32;
    std::uint64_t seed = 0;

    void validate() const {
        require(frames >= 1, "SceneDescriptor: frames must be >= 1");
        require(resolution >= 8, "SceneDescriptor: resolution must be >= 8");
        require(protagonists.size() >= 1 && protagonists.size() <= 2,
                "SceneDescriptor: 1 or 2 protagonists required");
    }
};

namespace scene_json {

using nlohmann::json;

inline json to_json(const Trajectory& t) {
    json j;
    j["kind"] = t.kind == Trajectory::Kind::linear ? "linear" : "circular";
    if (t.kind == Trajectory::Kind::linear) {
        j["start"] = {t.start_x, t.start_y};
        j["velocity"] = {t.vel_x, t.vel_y};
    } else {
        j["center"] = {t.start_x, t.start_y};
        j["radius"] = t.radius;
        j["angular_rate"] = t.angular_rate;
        j["phase"] = t.phase;
    }
    return j;
}

inline Trajectory trajectory_from_json(const json& j) {
    Trajectory t;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "linear") {
        t.kind = Trajectory::Kind::linear;
        t.start_x = j.at("start").at(0).get<double>();
        t.start_y = j.at("start").at(1).get<double>();
        t.vel_x = j.at("velocity").at(0).get<double>();
        t.vel_y = j.at("velocity").at(1).get<double>();
    } else if (kind == "circular") {
        t.kind = Trajectory::Kind::circular;
        t.start_x = j.at("center").at(0).get<double>();
        t.start_y = j.at("center").at(1).get<double>();
        t.radius = j.at("radius").get<double>();
        t.angular_rate = j.at("angular_rate").get<double>();
        t.phase = j.value("phase", 0.0);
    } else {
        throw ValidationError("trajectory kind must be linear or circular, got '" + kind + "'");
    }
    return t;
}

inline json to_json(const SceneDescriptor& d) {
    json j;
    j["frames"] = d.frames;
    j["resolution"] = d.resolution;
    j["seed"] = d.seed;
    j["background"] = {{"style", to_word(d.background.style)}, {"color", to_word(d.background.color)}};
    j["protagonists"] = json::array();
    for (const auto& p : d.protagonists) {
        json pj;
        pj["shape"] = to_word(p.shape);
        pj["color"] = to_word(p.color);
        pj["size"] = p.size;
        pj["trajectory"] = to_json(p.trajectory);
        j["protagonists"].push_back(pj);
    }
    return j;
}

inline SceneDescriptor descriptor_from_json(const json& j) {
    SceneDescriptor d;
    d.frames = j.at("frames").get<int>();
    d.resolution = j.at("resolution").get<int>();
    d.seed = j.value("seed", std::uint64_t{0});
    d.background.style = parse_style_or_throw(j.at("background").at("style").get<std::string>());
    d.background.color = parse_color_or_throw(j.at("background").at("color").get<std::string>());
    for (const auto& pj : j.at("protagonists")) {
        ProtagonistSpec p;
        p.shape = parse_shape_or_throw(pj.at("shape").get<std::string>());
        p.color = parse_color_or_throw(pj.at("color").get<std::string>());
        p.size = pj.value("size", 0.4);
        p.trajectory = trajectory_from_json(pj.at("trajectory"));
        d.protagonists.push_back(p);
    }
    d.validate();
    return d;
}

} // namespace scene_json

} // namespace protag
