#pragma once

#include <optional>
#include <string>
#include <vector>

#include "spda/instances.hpp"
#include "spda/tensor.hpp"

namespace spda {

// Geometry of one generated object; kept as generator metadata so tests can
// re-render scenes independently.
struct ShapeSpec {
    int kind = 0;  // kCircle / kRectangle / kTriangle
    double z = 0;  // distance plane; depth map stores 1 - z
    double color[3] = {0, 0, 0};
    // circle: (cx, cy, r); rectangle: (x0, y0, x1, y1); triangle: 3 vertices
    double p[6] = {0, 0, 0, 0, 0, 0};
    double r = 0;

    bool contains(double px, double py) const;
};

// One RGB-D sample with ground truth. rgb is (3,S,S) in [0,1]; depth is (S,S)
// in [0,1], disparity-like (nearer = larger, background 0).
struct Scene {
    Tensor rgb;
    Tensor depth;
    std::vector<InstanceAnnotation> instances;
    int image_id = 0;
    std::string name;
    // generator metadata (empty for loaded datasets)
    std::vector<ShapeSpec> shapes;
    int depth_separable_pairs = 0;  // same-colored overlapping pairs
};

enum class SceneMode { kMixed, kDepthSeparable };

// Random circles/rectangles/triangles on distinct depth planes; occlusion is
// resolved nearest-wins. Depth-separable mode guarantees at least one
// same-colored overlapping pair per scene (distinguishable only via depth).
Scene generate_scene(uint64_t seed, int n_objects, int size, SceneMode mode = SceneMode::kMixed);

// Category ids used by the synthetic generator.
inline constexpr int kCircle = 1, kRectangle = 2, kTriangle = 3;
std::vector<std::string> synthetic_category_names();

// Connected component labeling (4-connectivity) per semantic class; components
// smaller than min_area are dropped. Labels: 0 = background.
std::vector<InstanceAnnotation> semantic_to_instances(const std::vector<int>& semantic,
                                                      int h, int w, int min_area = 4);

// Depth ingestion: 8/16-bit grayscale PNG or raw float32 grid (.f32), min-max
// normalized to [0,1] (constant maps become all 0.5), bilinear-resized.
Tensor load_depth(const std::string& path, int target_size);

// Missing-depth policy for dataset loading.
enum class DepthPolicy { kError, kPlaceholder };

struct Dataset {
    std::vector<Scene> scenes;
    std::vector<std::string> category_names;  // index 0 unused (background)
};

// COCO-format instance annotations + sibling depth files. Depth is searched at
// <root>/depth/<image_stem>.png then .f32; policy decides what a miss means.
Dataset load_coco(const std::string& annotation_path, const std::string& image_root,
                  DepthPolicy policy = DepthPolicy::kError, int resize_to = 0);

// Writes a synthetic dataset: images/*.png, depth/*.png (16-bit), and
// annotations.json in COCO format. Returns the annotation path.
std::string write_synthetic_dataset(const std::string& out_dir, int n, uint64_t seed,
                                    SceneMode mode, int size, int max_objects = 4);

Mask resize_mask_nearest(const Mask& m, int out_h, int out_w);
Scene resize_scene(const Scene& s, int size);
Scene hflip_scene(const Scene& s);

}  // namespace spda
