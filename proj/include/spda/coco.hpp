#pragma once

#include <string>
#include <vector>

#include "spda/instances.hpp"
#include "spda/metrics.hpp"

namespace spda {

// Uncompressed COCO run-length encoding: column-major scan, counts alternate
// background/foreground starting with background.
std::vector<int64_t> rle_encode(const Mask& m);
Mask rle_decode(const std::vector<int64_t>& counts, int h, int w);

// Rasterizes a COCO polygon (x0,y0,x1,y1,...) with even-odd scanline fill at
// pixel centers.
Mask polygon_to_mask(const std::vector<double>& xy, int h, int w);

// COCO results-style prediction export (image_id, category_id, segmentation
// RLE, bbox, score). Deterministic ordering and float formatting.
std::string predictions_to_coco_json(const std::vector<PredInstance>& preds);
std::vector<PredInstance> predictions_from_coco_json(const std::string& text);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace spda
