#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

namespace spda {

struct BoxF {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
    bool valid() const { return x2 > x1 && y2 > y1; }
    BoxF clipped(double w, double h) const {
        return {std::clamp(x1, 0.0, w), std::clamp(y1, 0.0, h), std::clamp(x2, 0.0, w),
                std::clamp(y2, 0.0, h)};
    }
};

inline double box_iou(const BoxF& a, const BoxF& b) {
    double ix1 = std::max(a.x1, b.x1), iy1 = std::max(a.y1, b.y1);
    double ix2 = std::min(a.x2, b.x2), iy2 = std::min(a.y2, b.y2);
    double inter = std::max(0.0, ix2 - ix1) * std::max(0.0, iy2 - iy1);
    double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

// Dense binary mask, row-major.
struct Mask {
    int h = 0, w = 0;
    std::vector<uint8_t> data;

    Mask() = default;
    Mask(int h_, int w_) : h(h_), w(w_), data(static_cast<size_t>(h_) * w_, 0) {}

    uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * w + x]; }
    uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * w + x]; }
    int64_t count() const {
        int64_t n = 0;
        for (uint8_t v : data) n += v != 0;
        return n;
    }
    bool empty_mask() const { return count() == 0; }
};

// Tight bounding box of the set pixels, in pixel-edge coordinates
// ([x, x+1) per pixel). Returns an invalid box for an empty mask.
inline BoxF tight_box(const Mask& m) {
    int minx = m.w, miny = m.h, maxx = -1, maxy = -1;
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x)
            if (m.at(y, x)) {
                minx = std::min(minx, x);
                miny = std::min(miny, y);
                maxx = std::max(maxx, x);
                maxy = std::max(maxy, y);
            }
    if (maxx < 0) return {};
    return {static_cast<double>(minx), static_cast<double>(miny), static_cast<double>(maxx + 1),
            static_cast<double>(maxy + 1)};
}

// One ground-truth or predicted object.
struct InstanceAnnotation {
    Mask mask;
    BoxF box;
    int category = 1;
    double score = 1.0;
};

}  // namespace spda
