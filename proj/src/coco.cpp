#include "spda/coco.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "spda/data.hpp"
#include "spda/errors.hpp"
#include "spda/image_io.hpp"
#include "spda/model.hpp"

namespace spda {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::vector<int64_t> rle_encode(const Mask& m) {
    std::vector<int64_t> counts;
    int64_t run = 0;
    uint8_t cur = 0;  // counts start with background
    for (int x = 0; x < m.w; ++x)
        for (int y = 0; y < m.h; ++y) {
            uint8_t v = m.at(y, x) ? 1 : 0;
            if (v == cur) {
                ++run;
            } else {
                counts.push_back(run);
                cur = v;
                run = 1;
            }
        }
    counts.push_back(run);
    return counts;
}

Mask rle_decode(const std::vector<int64_t>& counts, int h, int w) {
    Mask m(h, w);
    int64_t pos = 0;
    uint8_t cur = 0;
    int64_t total = static_cast<int64_t>(h) * w;
    for (int64_t c : counts) {
        if (c < 0 || pos + c > total)
            throw IngestError("rle_decode: counts exceed mask size " + std::to_string(h) + "x" +
                              std::to_string(w));
        if (cur)
            for (int64_t i = 0; i < c; ++i) {
                int64_t p = pos + i;
                m.at(static_cast<int>(p % h), static_cast<int>(p / h)) = 1;
            }
        pos += c;
        cur = !cur;
    }
    if (pos != total) throw IngestError("rle_decode: counts do not cover the mask");
    return m;
}

Mask polygon_to_mask(const std::vector<double>& xy, int h, int w) {
    if (xy.size() < 6 || xy.size() % 2 != 0)
        throw IngestError("polygon_to_mask: need at least 3 (x,y) pairs");
    Mask m(h, w);
    size_t n = xy.size() / 2;
    for (int y = 0; y < h; ++y) {
        double py = y + 0.5;
        std::vector<double> xs;
        for (size_t i = 0; i < n; ++i) {
            double x1 = xy[2 * i], y1 = xy[2 * i + 1];
            double x2 = xy[2 * ((i + 1) % n)], y2 = xy[2 * ((i + 1) % n) + 1];
            if ((y1 <= py && y2 > py) || (y2 <= py && y1 > py))
                xs.push_back(x1 + (py - y1) / (y2 - y1) * (x2 - x1));
        }
        std::sort(xs.begin(), xs.end());
        for (size_t i = 0; i + 1 < xs.size(); i += 2) {
            int x_start = static_cast<int>(std::ceil(xs[i] - 0.5));
            int x_end = static_cast<int>(std::floor(xs[i + 1] - 0.5));
            for (int x = std::max(0, x_start); x <= std::min(w - 1, x_end); ++x) m.at(y, x) = 1;
        }
    }
    return m;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IngestError("cannot open for writing: " + path);
    f << content;
    if (!f) throw IngestError("failed writing: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IngestError("cannot open: " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

std::string predictions_to_coco_json(const std::vector<PredInstance>& preds) {
    std::vector<const PredInstance*> order;
    order.reserve(preds.size());
    for (const auto& p : preds) order.push_back(&p);
    std::stable_sort(order.begin(), order.end(), [](const PredInstance* a, const PredInstance* b) {
        if (a->image_id != b->image_id) return a->image_id < b->image_id;
        if (a->score != b->score) return a->score > b->score;
        return a->category < b->category;
    });
    json arr = json::array();
    for (const PredInstance* p : order) {
        json seg{{"size", json::array({p->mask.h, p->mask.w})}, {"counts", rle_encode(p->mask)}};
        arr.push_back(json{{"image_id", p->image_id},
                           {"category_id", p->category},
                           {"segmentation", seg},
                           {"bbox", json::array({p->box.x1, p->box.y1, p->box.width(),
                                                 p->box.height()})},
                           {"score", p->score}});
    }
    return arr.dump(2) + "\n";
}

std::vector<PredInstance> predictions_from_coco_json(const std::string& text) {
    json arr;
    try {
        arr = json::parse(text);
    } catch (const json::exception& e) {
        throw IngestError(std::string("bad predictions JSON: ") + e.what());
    }
    std::vector<PredInstance> out;
    for (const auto& j : arr) {
        PredInstance p;
        p.image_id = j.at("image_id").get<int>();
        p.category = j.at("category_id").get<int>();
        p.score = j.at("score").get<double>();
        const json& seg = j.at("segmentation");
        int h = seg.at("size")[0].get<int>(), w = seg.at("size")[1].get<int>();
        p.mask = rle_decode(seg.at("counts").get<std::vector<int64_t>>(), h, w);
        auto bb = j.at("bbox").get<std::vector<double>>();
        p.box = {bb[0], bb[1], bb[0] + bb[2], bb[1] + bb[3]};
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------- dataset io ----------------

namespace {
std::string stem_of(const std::string& file_name) { return fs::path(file_name).stem().string(); }
}  // namespace

Dataset load_coco(const std::string& annotation_path, const std::string& image_root,
                  DepthPolicy policy, int resize_to) {
    json root;
    try {
        root = json::parse(read_text_file(annotation_path));
    } catch (const json::exception& e) {
        throw IngestError("malformed COCO JSON in " + annotation_path + ": " + e.what());
    }

    Dataset ds;
    int max_cat = 0;
    std::map<int, std::string> cat_names;
    if (root.contains("categories"))
        for (const auto& c : root.at("categories")) {
            int id = c.at("id").get<int>();
            cat_names[id] = c.value("name", "class_" + std::to_string(id));
            max_cat = std::max(max_cat, id);
        }
    ds.category_names.assign(static_cast<size_t>(max_cat) + 1, "");
    for (const auto& [id, name] : cat_names) ds.category_names[static_cast<size_t>(id)] = name;

    std::map<int, Scene> scenes;       // by image id, ordered
    std::map<int, std::pair<int, int>> sizes;  // id -> (h, w)
    for (const auto& im : root.at("images")) {
        int id = im.at("id").get<int>();
        std::string file_name = im.at("file_name").get<std::string>();
        int w = im.at("width").get<int>(), h = im.at("height").get<int>();

        Scene sc;
        sc.image_id = id;
        sc.name = file_name;
        std::string img_path = image_root + "/" + file_name;
        ImageU16 img = read_png(img_path);
        if (img.h != h || img.w != w)
            throw IngestError("image " + img_path + " is " + std::to_string(img.w) + "x" +
                              std::to_string(img.h) + " but annotations say " + std::to_string(w) +
                              "x" + std::to_string(h));
        sc.rgb = image_to_rgb_tensor(img);

        std::string stem = stem_of(file_name);
        std::string depth_png = image_root + "/depth/" + stem + ".png";
        std::string depth_f32 = image_root + "/depth/" + stem + ".f32";
        if (fs::exists(depth_png)) {
            sc.depth = load_depth(depth_png, 0);
        } else if (fs::exists(depth_f32)) {
            sc.depth = load_depth(depth_f32, 0);
        } else if (policy == DepthPolicy::kPlaceholder) {
            sc.depth = Tensor::full({h, w}, 0.5);
        } else {
            throw IngestError("missing depth file for image " + file_name + " (looked for " +
                              depth_png + " and " + depth_f32 + ")");
        }
        if (sc.depth.dim(0) != h || sc.depth.dim(1) != w)
            sc.depth = resize_bilinear_hw(sc.depth, h, w);
        sizes[id] = {h, w};
        scenes.emplace(id, std::move(sc));
    }

    std::vector<int> dangling;
    for (const auto& an : root.at("annotations")) {
        int image_id = an.at("image_id").get<int>();
        auto it = scenes.find(image_id);
        if (it == scenes.end()) {
            dangling.push_back(image_id);
            continue;
        }
        auto [h, w] = sizes[image_id];
        InstanceAnnotation inst;
        inst.category = an.at("category_id").get<int>();

        const json& seg = an.at("segmentation");
        if (seg.is_object()) {
            int sh = seg.at("size")[0].get<int>(), sw = seg.at("size")[1].get<int>();
            inst.mask = rle_decode(seg.at("counts").get<std::vector<int64_t>>(), sh, sw);
        } else if (seg.is_array()) {
            Mask acc(h, w);
            for (const auto& poly : seg) {
                Mask part = polygon_to_mask(poly.get<std::vector<double>>(), h, w);
                for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] |= part.data[i];
            }
            inst.mask = std::move(acc);
        } else {
            throw IngestError("annotation segmentation must be RLE object or polygon list");
        }
        inst.box = tight_box(inst.mask);
        if (!inst.box.valid() && an.contains("bbox")) {
            auto bb = an.at("bbox").get<std::vector<double>>();
            inst.box = {bb[0], bb[1], bb[0] + bb[2], bb[1] + bb[3]};
        }
        it->second.instances.push_back(std::move(inst));
    }
    if (!dangling.empty()) {
        std::sort(dangling.begin(), dangling.end());
        dangling.erase(std::unique(dangling.begin(), dangling.end()), dangling.end());
        std::ostringstream os;
        os << "annotations reference unknown image ids:";
        for (int id : dangling) os << " " << id;
        throw IngestError(os.str());
    }

    for (auto& [id, sc] : scenes) {
        if (resize_to > 0) sc = resize_scene(sc, resize_to);
        ds.scenes.push_back(std::move(sc));
    }
    return ds;
}

std::string write_synthetic_dataset(const std::string& out_dir, int n, uint64_t seed,
                                    SceneMode mode, int size, int max_objects) {
    if (n < 1) throw ConfigError("write_synthetic_dataset: n must be >= 1");
    std::error_code ec;
    fs::create_directories(out_dir + "/images", ec);
    fs::create_directories(out_dir + "/depth", ec);
    if (!fs::exists(out_dir + "/images") || !fs::exists(out_dir + "/depth"))
        throw IngestError("cannot create dataset directories under " + out_dir);

    Rng master(seed);
    json images = json::array();
    json annotations = json::array();
    int ann_id = 1;
    for (int i = 0; i < n; ++i) {
        int n_obj = master.uniform_int(1, std::max(1, max_objects));
        uint64_t scene_seed = master.next_u64();
        Scene sc = generate_scene(scene_seed, n_obj, size, mode);

        char name[64];
        std::snprintf(name, sizeof(name), "scene_%04d", i);
        std::string img_rel = std::string("images/") + name + ".png";
        write_png_rgb(out_dir + "/" + img_rel, sc.rgb);
        write_png_gray(out_dir + "/depth/" + name + ".png", sc.depth, 16);

        images.push_back(json{{"id", i + 1},
                              {"file_name", img_rel},
                              {"width", size},
                              {"height", size},
                              {"depth_separable_pairs", sc.depth_separable_pairs}});
        for (const auto& inst : sc.instances) {
            json seg{{"size", json::array({size, size})}, {"counts", rle_encode(inst.mask)}};
            annotations.push_back(json{
                {"id", ann_id++},
                {"image_id", i + 1},
                {"category_id", inst.category},
                {"segmentation", seg},
                {"bbox", json::array({inst.box.x1, inst.box.y1, inst.box.width(),
                                      inst.box.height()})},
                {"area", static_cast<int64_t>(inst.mask.count())},
                {"iscrowd", 0}});
        }
    }
    json cats = json::array();
    auto names = synthetic_category_names();
    for (size_t i = 0; i < names.size(); ++i)
        cats.push_back(json{{"id", static_cast<int>(i) + 1}, {"name", names[i]}});
    json root{{"images", images}, {"annotations", annotations}, {"categories", cats}};
    std::string ann_path = out_dir + "/annotations.json";
    write_text_file(ann_path, root.dump(2) + "\n");
    return ann_path;
}

}  // namespace spda
