#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "fedod/box.hpp"

namespace fedod {

enum class BodyColor { Blue, Red, White };
enum class Windshield { None, A, B, C, D };

constexpr std::string_view to_string(BodyColor c) {
    switch (c) {
        case BodyColor::Blue: return "blue";
        case BodyColor::Red: return "red";
        case BodyColor::White: return "white";
    }
    return "?";
}

constexpr std::string_view to_string(Windshield w) {
    switch (w) {
        case Windshield::None: return "none";
        case Windshield::A: return "A";
        case Windshield::B: return "B";
        case Windshield::C: return "C";
        case Windshield::D: return "D";
    }
    return "?";
}

/// Scene metadata recorded alongside every generated image.
struct SceneMeta {
    BodyColor body_color = BodyColor::Blue;
    Windshield windshield = Windshield::None;
    int background_id = 0;
    double brightness = 1.0;
    bool blurred = false;

    friend bool operator==(const SceneMeta&, const SceneMeta&) = default;
};

/// One image with its ground-truth boxes.
struct Sample {
    Image image;
    std::vector<BBox> boxes;
    SceneMeta meta;
};

}  // namespace fedod
