#pragma once

#include <array>
#include <cctype>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "protag/common.hpp"

namespace protag {

// Fixed scene vocabulary: 6 colors, 3 shapes, 3 background styles plus the
// motion words used by the caption template. Color values are in [0,1] RGB.

struct Rgb {
    float r = 0, g = 0, b = 0;
};

enum class ColorName { red, green, blue, yellow, magenta, cyan };
enum class ShapeName { square, circle, triangle };
enum class StyleName { solid, gradient, stripes };

inline constexpr int kNumColors = 6;
inline constexpr int kNumShapes = 3;
inline constexpr int kNumStyles = 3;
inline constexpr std::array<const char*, kNumColors> kColorWords = {
    "red", "green", "blue", "yellow", "magenta", "cyan"};
inline constexpr std::array<const char*, kNumShapes> kShapeWords = {"square", "circle", "triangle"};
inline constexpr std::array<const char*, kNumStyles> kStyleWords = {"solid", "gradient", "striped"};
inline constexpr std::array<const char*, 5> kDirectionWords = {"left", "right", "up", "down", "around"};

inline Rgb color_rgb(ColorName c) {
    switch (c) {
        case ColorName::red: return {1, 0, 0};
        case ColorName::green: return {0, 1, 0};
        case ColorName::blue: return {0, 0, 1};
        case ColorName::yellow: return {1, 1, 0};
        case ColorName::magenta: return {1, 0, 1};
        case ColorName::cyan: return {0, 1, 1};
    }
    return {};
}

inline const char* to_word(ColorName c) { return kColorWords[static_cast<int>(c)]; }
inline const char* to_word(ShapeName s) { return kShapeWords[static_cast<int>(s)]; }
inline const char* to_word(StyleName s) {
    switch (s) {
        case StyleName::solid: return "solid";
        case StyleName::gradient: return "gradient";
        case StyleName::stripes: return "stripes";
    }
    return "";
}
// Adjective form used in captions ("on a striped background").
inline const char* style_adjective(StyleName s) {
    return kStyleWords[static_cast<int>(s)];
}

inline std::string vocabulary_listing() {
    std::ostringstream os;
    os << "colors:";
    for (auto w : kColorWords) os << " " << w;
    os << "; shapes:";
    for (auto w : kShapeWords) os << " " << w;
    os << "; styles: solid gradient stripes";
    return os.str();
}

inline std::optional<ColorName> parse_color(const std::string& w) {
    for (int i = 0; i < kNumColors; ++i)
        if (w == kColorWords[i]) return static_cast<ColorName>(i);
    return std::nullopt;
}
inline std::optional<ShapeName> parse_shape(const std::string& w) {
    for (int i = 0; i < kNumShapes; ++i)
        if (w == kShapeWords[i]) return static_cast<ShapeName>(i);
    return std::nullopt;
}
inline std::optional<StyleName> parse_style(const std::string& w) {
    if (w == "solid") return StyleName::solid;
    if (w == "gradient") return StyleName::gradient;
    if (w == "stripes" || w == "striped" || w == "stripe") return StyleName::stripes;
    return std::nullopt;
}

inline ColorName parse_color_or_throw(const std::string& w) {
    auto c = parse_color(w);
    require(c.has_value(), "unknown color '" + w + "'; " + vocabulary_listing());
    return *c;
}
inline ShapeName parse_shape_or_throw(const std::string& w) {
    auto s = parse_shape(w);
    require(s.has_value(), "unknown shape '" + w + "'; " + vocabulary_listing());
    return *s;
}
inline StyleName parse_style_or_throw(const std::string& w) {
    auto s = parse_style(w);
    require(s.has_value(), "unknown style '" + w + "'; " + vocabulary_listing());
    return *s;
}

inline std::vector<std::string> tokenize_lower(const std::string& text) {
    std::vector<std::string> toks;
    std::string cur;
    for (char ch : text) {
        if (std::isalnum(static_cast<unsigned char>(ch))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        } else if (!cur.empty()) {
            toks.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) toks.push_back(cur);
    return toks;
}

// Attributes found in free text, in token order.
struct ParsedAttrs {
    std::optional<ColorName> color;
    std::optional<ShapeName> shape;
    std::optional<StyleName> style;
    std::optional<ColorName> style_color; // color token appearing after the style word
    bool any = false;
};

inline ParsedAttrs parse_attrs(const std::string& text) {
    ParsedAttrs a;
    auto toks = tokenize_lower(text);
    bool style_seen = false;
    for (const auto& t : toks) {
        if (auto c = parse_color(t)) {
            if (style_seen && !a.style_color) a.style_color = c;
            if (!a.color) a.color = c;
            a.any = true;
        } else if (auto s = parse_shape(t)) {
            if (!a.shape) a.shape = s;
            a.any = true;
        } else if (auto st = parse_style(t)) {
            if (!a.style) a.style = st;
            style_seen = true;
            a.any = true;
        }
    }
    // "blue circle on a red striped background": the color before the style
    // word belongs to the protagonist, the one after to the background.
    if (a.style && !a.style_color && !a.shape && a.color) a.style_color = a.color;
    return a;
}

} // namespace protag
