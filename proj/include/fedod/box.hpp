#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

namespace fedod {

/// YOLO-normalized box: center and size as fractions of the image side.
struct BBox {
    int class_id = 0;
    double cx = 0.0;
    double cy = 0.0;
    double w = 0.0;
    double h = 0.0;

    double x0() const { return cx - w / 2.0; }
    double y0() const { return cy - h / 2.0; }
    double x1() const { return cx + w / 2.0; }
    double y1() const { return cy + h / 2.0; }
    double area() const { return w * h; }

    static BBox from_corners(int class_id, double x0, double y0, double x1, double y1) {
        return BBox{class_id, (x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0};
    }

    friend bool operator==(const BBox&, const BBox&) = default;
};

/// Intersection over union; class ids are ignored.
inline double iou(const BBox& a, const BBox& b) {
    const double iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
    const double ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double area_a = (a.x1() - a.x0()) * (a.y1() - a.y0());
    const double area_b = (b.x1() - b.x0()) * (b.y1() - b.y0());
    const double uni = area_a + area_b - inter;
    return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

/// A scored prediction.
struct Detection {
    BBox bbox;
    int class_id = 0;
    double confidence = 0.0;
};

/// Interleaved RGB raster, row-major, values in [0, 1].
struct Image {
    int size = 0;
    std::vector<float> pixels;  // size * size * 3

    Image() = default;
    explicit Image(int side) : size(side), pixels(static_cast<std::size_t>(side) * side * 3, 0.0f) {}

    float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * size + x) * 3 + c]; }
    float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * size + x) * 3 + c]; }

    friend bool operator==(const Image&, const Image&) = default;
};

}  // namespace fedod
