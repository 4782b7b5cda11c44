#include "spda/data.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <set>

#include "spda/errors.hpp"
#include "spda/image_io.hpp"
#include "spda/model.hpp"

namespace spda {

namespace fs = std::filesystem;

bool ShapeSpec::contains(double px, double py) const {
    switch (kind) {
        case kCircle: {
            double dx = px - p[0], dy = py - p[1];
            return dx * dx + dy * dy <= r * r;
        }
        case kRectangle:
            return px >= p[0] && px <= p[2] && py >= p[1] && py <= p[3];
        case kTriangle: {
            auto cross = [](double ax, double ay, double bx, double by, double cx, double cy) {
                return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
            };
            double d1 = cross(p[0], p[1], p[2], p[3], px, py);
            double d2 = cross(p[2], p[3], p[4], p[5], px, py);
            double d3 = cross(p[4], p[5], p[0], p[1], px, py);
            bool neg = d1 < 0 || d2 < 0 || d3 < 0;
            bool pos = d1 > 0 || d2 > 0 || d3 > 0;
            return !(neg && pos);
        }
        default:
            return false;
    }
}

namespace {
constexpr int kMinVisibleArea = 4;

ShapeSpec random_shape(Rng& rng, int size, int kind) {
    ShapeSpec s;
    s.kind = kind;
    double sz = static_cast<double>(size);
    switch (kind) {
        case kCircle: {
            s.r = rng.uniform(0.10, 0.20) * sz;
            s.p[0] = rng.uniform(s.r, sz - s.r);
            s.p[1] = rng.uniform(s.r, sz - s.r);
            break;
        }
        case kRectangle: {
            double w = rng.uniform(0.18, 0.40) * sz;
            double h = rng.uniform(0.18, 0.40) * sz;
            double x0 = rng.uniform(0.0, sz - w);
            double y0 = rng.uniform(0.0, sz - h);
            s.p[0] = x0;
            s.p[1] = y0;
            s.p[2] = x0 + w;
            s.p[3] = y0 + h;
            break;
        }
        default: {  // triangle
            double cx = rng.uniform(0.2 * sz, 0.8 * sz);
            double cy = rng.uniform(0.2 * sz, 0.8 * sz);
            double rad = rng.uniform(0.12, 0.24) * sz;
            for (int v = 0; v < 3; ++v) {
                double ang = rng.uniform(0.0, 2.0 * M_PI / 3.0) + v * 2.0 * M_PI / 3.0;
                s.p[2 * v] = std::clamp(cx + rad * std::cos(ang), 0.0, sz);
                s.p[2 * v + 1] = std::clamp(cy + rad * std::sin(ang), 0.0, sz);
            }
            break;
        }
    }
    return s;
}

double shape_center_x(const ShapeSpec& s) {
    if (s.kind == kCircle) return s.p[0];
    if (s.kind == kRectangle) return 0.5 * (s.p[0] + s.p[2]);
    return (s.p[0] + s.p[2] + s.p[4]) / 3.0;
}
double shape_center_y(const ShapeSpec& s) {
    if (s.kind == kCircle) return s.p[1];
    if (s.kind == kRectangle) return 0.5 * (s.p[1] + s.p[3]);
    return (s.p[1] + s.p[3] + s.p[5]) / 3.0;
}

void translate_shape(ShapeSpec& s, double dx, double dy, int size) {
    int n = s.kind == kCircle ? 1 : (s.kind == kRectangle ? 2 : 3);
    for (int v = 0; v < n; ++v) {
        s.p[2 * v] = std::clamp(s.p[2 * v] + dx, 0.0, static_cast<double>(size));
        s.p[2 * v + 1] = std::clamp(s.p[2 * v + 1] + dy, 0.0, static_cast<double>(size));
    }
}
}  // namespace

Scene generate_scene(uint64_t seed, int n_objects, int size, SceneMode mode) {
    if (n_objects < 1) throw ConfigError("generate_scene: n_objects must be >= 1");
    n_objects = std::min(n_objects, 5);
    if (mode == SceneMode::kDepthSeparable) n_objects = std::max(n_objects, 2);
    Rng rng(seed);

    Scene scene;
    scene.rgb = Tensor({3, size, size});
    scene.depth = Tensor({size, size});

    double bg[3];
    for (double& c : bg) c = rng.uniform(0.02, 0.12);

    std::vector<ShapeSpec> shapes;
    int pair_count = 0;
    if (mode == SceneMode::kDepthSeparable) {
        // a same-colored overlapping pair, separable only through depth
        ShapeSpec a = random_shape(rng, size, rng.uniform_int(1, 3));
        ShapeSpec b = random_shape(rng, size, rng.uniform_int(1, 3));
        double dx = shape_center_x(a) - shape_center_x(b);
        double dy = shape_center_y(a) - shape_center_y(b);
        // pull b toward a so they overlap but keep distinct centers
        translate_shape(b, dx * rng.uniform(0.55, 0.75), dy * rng.uniform(0.55, 0.75), size);
        double color[3];
        for (double& c : color) c = rng.uniform(0.35, 1.0);
        for (int j = 0; j < 3; ++j) {
            a.color[j] = color[j];
            b.color[j] = color[j];
        }
        shapes.push_back(a);
        shapes.push_back(b);
        pair_count = 1;
    }
    while (static_cast<int>(shapes.size()) < n_objects) {
        ShapeSpec s = random_shape(rng, size, rng.uniform_int(1, 3));
        for (double& c : s.color) c = rng.uniform(0.35, 1.0);
        shapes.push_back(s);
    }

    // distinct depth planes, shuffled; depth value = 1 - z (nearer = larger)
    std::vector<double> planes;
    for (int i = 0; i < n_objects; ++i)
        planes.push_back((i + 1) / static_cast<double>(n_objects + 1));
    for (int i = n_objects - 1; i > 0; --i)
        std::swap(planes[static_cast<size_t>(i)], planes[static_cast<size_t>(rng.uniform_int(0, i))]);
    for (int i = 0; i < n_objects; ++i) shapes[static_cast<size_t>(i)].z = planes[static_cast<size_t>(i)];

    // paint far-to-near; the nearer shape owns contested pixels
    std::vector<int> order(shapes.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return shapes[static_cast<size_t>(a)].z > shapes[static_cast<size_t>(b)].z; });

    std::vector<int> owner(static_cast<size_t>(size) * size, -1);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            for (int c = 0; c < 3; ++c) scene.rgb.at3(c, y, x) = bg[c];
            scene.depth.at2(y, x) = 0.0;
        }
    for (int idx : order) {
        const ShapeSpec& s = shapes[static_cast<size_t>(idx)];
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                if (s.contains(x + 0.5, y + 0.5)) {
                    owner[static_cast<size_t>(y) * size + x] = idx;
                    for (int c = 0; c < 3; ++c) scene.rgb.at3(c, y, x) = s.color[c];
                    scene.depth.at2(y, x) = 1.0 - s.z;
                }
    }
    // mild sensor-like noise, uncorrelated with the shapes
    for (auto& v : scene.rgb.data) v = std::clamp(v + rng.normal(0.0, 0.01), 0.0, 1.0);

    for (size_t i = 0; i < shapes.size(); ++i) {
        Mask m(size, size);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                if (owner[static_cast<size_t>(y) * size + x] == static_cast<int>(i)) m.at(y, x) = 1;
        if (m.count() < kMinVisibleArea) continue;  // fully (or nearly) occluded
        InstanceAnnotation ann;
        ann.box = tight_box(m);
        ann.mask = std::move(m);
        ann.category = shapes[i].kind;
        scene.instances.push_back(std::move(ann));
    }
    scene.shapes = std::move(shapes);
    scene.depth_separable_pairs = pair_count;
    return scene;
}

std::vector<std::string> synthetic_category_names() { return {"circle", "rectangle", "triangle"}; }

std::vector<InstanceAnnotation> semantic_to_instances(const std::vector<int>& semantic, int h,
                                                      int w, int min_area) {
    if (static_cast<int64_t>(semantic.size()) != static_cast<int64_t>(h) * w)
        throw ShapeError("semantic_to_instances: label grid size mismatch");
    std::vector<InstanceAnnotation> out;
    std::vector<char> visited(semantic.size(), 0);
    for (int y0 = 0; y0 < h; ++y0)
        for (int x0 = 0; x0 < w; ++x0) {
            size_t start = static_cast<size_t>(y0) * w + x0;
            int cls = semantic[start];
            if (cls <= 0 || visited[start]) continue;
            // BFS over the 4-connected component of this class
            Mask m(h, w);
            int64_t area = 0;
            std::deque<std::pair<int, int>> queue{{y0, x0}};
            visited[start] = 1;
            while (!queue.empty()) {
                auto [y, x] = queue.front();
                queue.pop_front();
                m.at(y, x) = 1;
                ++area;
                const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
                for (int d = 0; d < 4; ++d) {
                    int ny = y + dy[d], nx = x + dx[d];
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                    size_t ni = static_cast<size_t>(ny) * w + nx;
                    if (!visited[ni] && semantic[ni] == cls) {
                        visited[ni] = 1;
                        queue.emplace_back(ny, nx);
                    }
                }
            }
            if (area < min_area) continue;
            InstanceAnnotation ann;
            ann.box = tight_box(m);
            ann.mask = std::move(m);
            ann.category = cls;
            out.push_back(std::move(ann));
        }
    return out;
}

Tensor load_depth(const std::string& path, int target_size) {
    Tensor raw;
    if (path.size() > 4 && path.substr(path.size() - 4) == ".f32") {
        raw = read_f32_grid(path);
    } else {
        ImageU16 img = read_png(path);
        raw = image_to_gray_tensor(img);
    }
    double lo = raw[0], hi = raw[0];
    for (double v : raw.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi - lo < 1e-12) {
        for (auto& v : raw.data) v = 0.5;
    } else {
        for (auto& v : raw.data) v = (v - lo) / (hi - lo);
    }
    if (target_size > 0 && (raw.dim(0) != target_size || raw.dim(1) != target_size))
        raw = resize_bilinear_hw(raw, target_size, target_size);
    return raw;
}

Mask resize_mask_nearest(const Mask& m, int out_h, int out_w) {
    Mask out(out_h, out_w);
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) {
            int sy = std::min(static_cast<int>((y + 0.5) * m.h / out_h), m.h - 1);
            int sx = std::min(static_cast<int>((x + 0.5) * m.w / out_w), m.w - 1);
            out.at(y, x) = m.at(sy, sx);
        }
    return out;
}

Scene resize_scene(const Scene& s, int size) {
    if (s.rgb.dim(1) == size && s.rgb.dim(2) == size) return s;
    Scene out;
    out.image_id = s.image_id;
    out.name = s.name;
    out.shapes = s.shapes;
    out.depth_separable_pairs = s.depth_separable_pairs;
    out.rgb = resize_bilinear_chw(s.rgb, size, size);
    out.depth = resize_bilinear_hw(s.depth, size, size);
    for (const auto& inst : s.instances) {
        InstanceAnnotation ann;
        ann.mask = resize_mask_nearest(inst.mask, size, size);
        if (ann.mask.empty_mask()) continue;
        ann.box = tight_box(ann.mask);
        ann.category = inst.category;
        ann.score = inst.score;
        out.instances.push_back(std::move(ann));
    }
    return out;
}

Scene hflip_scene(const Scene& s) {
    Scene out = s;
    int h = s.rgb.dim(1), w = s.rgb.dim(2);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.rgb.at3(c, y, x) = s.rgb.at3(c, y, w - 1 - x);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.depth.at2(y, x) = s.depth.at2(y, w - 1 - x);
    for (size_t i = 0; i < s.instances.size(); ++i) {
        const Mask& m = s.instances[i].mask;
        Mask& fm = out.instances[i].mask;
        for (int y = 0; y < m.h; ++y)
            for (int x = 0; x < m.w; ++x) fm.at(y, x) = m.at(y, m.w - 1 - x);
        out.instances[i].box = tight_box(fm);
    }
    out.shapes.clear();  // metadata no longer matches after flipping
    return out;
}

}  // namespace spda
