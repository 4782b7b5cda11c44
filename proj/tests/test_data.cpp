#include <algorithm>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "json.hpp"
#include "spda/coco.hpp"
#include "spda/data.hpp"
#include "spda/errors.hpp"
#include "spda/image_io.hpp"
#include "spda/model.hpp"
#include "testutil.hpp"

using namespace spda;
using testutil::bitwise_equal;
namespace fs = std::filesystem;

namespace {
// Independent flood-fill labeling oracle (explicit stack, 4-connectivity).
std::vector<std::vector<int>> flood_fill_components(const std::vector<int>& sem, int h, int w,
                                                    int cls) {
    std::vector<std::vector<int>> comps;
    std::vector<char> seen(sem.size(), 0);
    for (int start = 0; start < h * w; ++start) {
        if (seen[static_cast<size_t>(start)] || sem[static_cast<size_t>(start)] != cls) continue;
        std::vector<int> comp;
        std::vector<int> stack{start};
        seen[static_cast<size_t>(start)] = 1;
        while (!stack.empty()) {
            int p = stack.back();
            stack.pop_back();
            comp.push_back(p);
            int y = p / w, x = p % w;
            const int dy[4] = {1, -1, 0, 0}, dx[4] = {0, 0, 1, -1};
            for (int d = 0; d < 4; ++d) {
                int ny = y + dy[d], nx = x + dx[d];
                if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                int np = ny * w + nx;
                if (!seen[static_cast<size_t>(np)] && sem[static_cast<size_t>(np)] == cls) {
                    seen[static_cast<size_t>(np)] = 1;
                    stack.push_back(np);
                }
            }
        }
        std::sort(comp.begin(), comp.end());
        comps.push_back(std::move(comp));
    }
    return comps;
}
}  // namespace

TEST_CASE("generate_scene: one object means one instance on a single depth plane") {
    Scene sc = generate_scene(77, 1, 32);
    REQUIRE(sc.instances.size() == 1);
    const Mask& m = sc.instances[0].mask;
    CHECK(!m.empty_mask());
    double d0 = -1;
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            if (m.at(y, x)) {
                if (d0 < 0) d0 = sc.depth.at2(y, x);
                CHECK(sc.depth.at2(y, x) == d0);
            }
    CHECK(d0 > 0.0);
    CHECK(d0 < 1.0);
}

TEST_CASE("generate_scene is deterministic in the seed") {
    Scene a = generate_scene(123, 3, 32);
    Scene b = generate_scene(123, 3, 32);
    CHECK(bitwise_equal(a.rgb, b.rgb));
    CHECK(bitwise_equal(a.depth, b.depth));
    REQUIRE(a.instances.size() == b.instances.size());
    for (size_t i = 0; i < a.instances.size(); ++i)
        CHECK(a.instances[i].mask.data == b.instances[i].mask.data);
    Scene c = generate_scene(124, 3, 32);
    CHECK(!bitwise_equal(a.rgb, c.rgb));
}

TEST_CASE("generate_scene agrees with a painter's-algorithm oracle per pixel") {
    for (uint64_t seed : {201u, 202u, 203u}) {
        Scene sc = generate_scene(seed, 4, 32);
        REQUIRE(!sc.shapes.empty());
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                // nearest covering shape wins the pixel
                int best = -1;
                double best_z = 1e9;
                for (size_t i = 0; i < sc.shapes.size(); ++i)
                    if (sc.shapes[i].contains(x + 0.5, y + 0.5) && sc.shapes[i].z < best_z) {
                        best_z = sc.shapes[i].z;
                        best = static_cast<int>(i);
                    }
                if (best >= 0) {
                    CHECK(sc.depth.at2(y, x) == 1.0 - sc.shapes[static_cast<size_t>(best)].z);
                } else {
                    CHECK(sc.depth.at2(y, x) == 0.0);
                }
            }
    }
}

TEST_CASE("generate_scene: occlusion removes pixels, never adds") {
    Scene sc = generate_scene(301, 5, 32);
    int64_t sum_areas = 0;
    Mask uni(32, 32);
    for (const auto& inst : sc.instances) {
        sum_areas += inst.mask.count();
        for (size_t i = 0; i < uni.data.size(); ++i) uni.data[i] |= inst.mask.data[i];
    }
    CHECK(sum_areas >= uni.count());
    // visible masks are pairwise disjoint
    for (size_t i = 0; i < sc.instances.size(); ++i)
        for (size_t j = i + 1; j < sc.instances.size(); ++j) {
            int64_t inter = 0;
            for (size_t p = 0; p < uni.data.size(); ++p)
                inter += sc.instances[i].mask.data[p] && sc.instances[j].mask.data[p];
            CHECK(inter == 0);
        }
}

TEST_CASE("depth-separable mode always carries a same-colored overlapping pair") {
    for (uint64_t seed = 0; seed < 8; ++seed) {
        Scene sc = generate_scene(seed, 3, 32, SceneMode::kDepthSeparable);
        CHECK(sc.depth_separable_pairs >= 1);
        // verify the metadata claim: shapes 0 and 1 share color and overlap
        REQUIRE(sc.shapes.size() >= 2);
        for (int c = 0; c < 3; ++c) CHECK(sc.shapes[0].color[c] == sc.shapes[1].color[c]);
        int overlap = 0;
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x)
                overlap += sc.shapes[0].contains(x + 0.5, y + 0.5) &&
                           sc.shapes[1].contains(x + 0.5, y + 0.5);
        CHECK(overlap > 0);
        CHECK(sc.shapes[0].z != sc.shapes[1].z);
    }
}

TEST_CASE("semantic_to_instances: two disjoint blobs of one class become two instances") {
    int h = 8, w = 8;
    std::vector<int> sem(static_cast<size_t>(h * w), 0);
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) sem[static_cast<size_t>(y * w + x)] = 1;
    for (int y = 5; y < 8; ++y)
        for (int x = 5; x < 8; ++x) sem[static_cast<size_t>(y * w + x)] = 1;
    auto insts = semantic_to_instances(sem, h, w);
    CHECK(insts.size() == 2);
    for (const auto& inst : insts) CHECK(inst.category == 1);
}

TEST_CASE("semantic_to_instances: all background yields nothing") {
    std::vector<int> sem(64, 0);
    CHECK(semantic_to_instances(sem, 8, 8).empty());
}

TEST_CASE("semantic_to_instances: small components are dropped by min_area") {
    std::vector<int> sem(64, 0);
    sem[0] = 1;  // single pixel
    for (int y = 4; y < 7; ++y)
        for (int x = 4; x < 7; ++x) sem[static_cast<size_t>(y * 8 + x)] = 1;
    auto insts = semantic_to_instances(sem, 8, 8, 4);
    CHECK(insts.size() == 1);
    CHECK(insts[0].mask.count() == 9);
}

TEST_CASE("semantic_to_instances matches the flood-fill oracle on 100 random masks") {
    Rng rng(401);
    for (int trial = 0; trial < 100; ++trial) {
        int h = 6 + static_cast<int>(rng.next_u64() % 8);
        int w = 6 + static_cast<int>(rng.next_u64() % 8);
        std::vector<int> sem(static_cast<size_t>(h * w));
        for (auto& v : sem) v = rng.uniform() < 0.45 ? 1 : 0;

        auto insts = semantic_to_instances(sem, h, w, /*min_area=*/1);
        auto oracle = flood_fill_components(sem, h, w, 1);

        REQUIRE(insts.size() == oracle.size());
        // compare as sets of sorted pixel lists
        std::set<std::vector<int>> got, want;
        for (const auto& inst : insts) {
            std::vector<int> pix;
            for (int i = 0; i < h * w; ++i)
                if (inst.mask.data[static_cast<size_t>(i)]) pix.push_back(i);
            got.insert(pix);
        }
        for (const auto& comp : oracle) want.insert(comp);
        CHECK(got == want);
    }
}

TEST_CASE("semantic_to_instances: union by class reconstructs the mask minus dropped specks") {
    Rng rng(402);
    int h = 12, w = 12;
    std::vector<int> sem(static_cast<size_t>(h * w));
    for (auto& v : sem) v = static_cast<int>(rng.next_u64() % 3);  // classes 0..2
    auto insts = semantic_to_instances(sem, h, w, /*min_area=*/1);
    std::vector<int> rebuilt(static_cast<size_t>(h * w), 0);
    for (const auto& inst : insts)
        for (int i = 0; i < h * w; ++i)
            if (inst.mask.data[static_cast<size_t>(i)]) rebuilt[static_cast<size_t>(i)] = inst.category;
    CHECK(rebuilt == sem);
}

TEST_CASE("load_depth: min-max normalization, constants, idempotence") {
    std::string dir = "/tmp/spda_depth_test";
    fs::create_directories(dir);

    SUBCASE("16-bit extremes map to 0 and 1") {
        Tensor img({2, 2});
        img.data = {0.0, 1.0, 1.0, 0.0};  // written as 0 / 65535
        write_png_gray(dir + "/extremes.png", img, 16);
        Tensor d = load_depth(dir + "/extremes.png", 0);
        CHECK(d.at2(0, 0) == 0.0);
        CHECK(d.at2(0, 1) == 1.0);
    }
    SUBCASE("constant map becomes all one half") {
        write_png_gray(dir + "/flat.png", Tensor::full({4, 4}, 0.37), 16);
        Tensor d = load_depth(dir + "/flat.png", 0);
        for (double v : d.data) CHECK(v == 0.5);
    }
    SUBCASE("already normalized f32 grid loads unchanged") {
        Rng rng(403);
        Tensor g = testutil::random_tensor({5, 5}, rng, 0.0, 1.0);
        g[3] = 0.0;
        g[7] = 1.0;  // pin the range
        write_f32_grid(dir + "/grid.f32", g);
        Tensor once = load_depth(dir + "/grid.f32", 0);
        write_f32_grid(dir + "/grid2.f32", once);
        Tensor twice = load_depth(dir + "/grid2.f32", 0);
        CHECK(testutil::max_abs_diff(once, twice) < 1e-7);  // f32 storage precision
    }
    SUBCASE("resize to target") {
        write_png_gray(dir + "/resize.png", Tensor::full({8, 8}, 0.5), 8);
        Tensor d = load_depth(dir + "/resize.png", 4);
        CHECK(d.shape == Shape{4, 4});
    }
    SUBCASE("unreadable file names the path") {
        CHECK_THROWS_WITH_AS(load_depth(dir + "/missing.png", 0), doctest::Contains("missing.png"),
                             IngestError);
    }
    fs::remove_all(dir);
}

TEST_CASE("replicate3 copies the channel bitwise") {
    Rng rng(404);
    Tensor d = testutil::random_tensor({4, 4}, rng, 0.0, 1.0);
    Tensor r = replicate3(d);
    CHECK(r.shape == Shape{1, 3, 4, 4});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) CHECK(r.at4(0, c, y, x) == d.at2(y, x));
}

TEST_CASE("rle: encode/decode round trip and fixture identity") {
    Rng rng(405);
    Mask m(7, 5);
    for (auto& v : m.data) v = rng.uniform() < 0.4 ? 1 : 0;
    auto counts = rle_encode(m);
    Mask back = rle_decode(counts, 7, 5);
    CHECK(back.data == m.data);
    // encode(decode(rle)) == rle
    CHECK(rle_encode(back) == counts);
    // column-major convention: pixel (0,0) set means the first count is 0
    Mask corner(3, 3);
    corner.at(0, 0) = 1;
    auto cc = rle_encode(corner);
    CHECK(cc[0] == 0);
    CHECK(cc[1] == 1);
}

TEST_CASE("polygon rasterization stays within 2 percent of the stored area") {
    // axis-aligned rectangle: exact
    std::vector<double> rect = {2, 3, 10, 3, 10, 9, 2, 9};
    Mask m = polygon_to_mask(rect, 16, 16);
    CHECK(m.count() == 8 * 6);
    // right triangle, legs 80: shoelace area 3200
    std::vector<double> tri = {2, 2, 82, 2, 2, 82};
    Mask t = polygon_to_mask(tri, 100, 100);
    CHECK(std::fabs(static_cast<double>(t.count()) - 3200.0) / 3200.0 <= 0.02);
    // rotated quadrilateral, shoelace area 612
    std::vector<double> quad = {30, 4, 60, 22, 34, 40, 10, 20};
    double shoelace = 0.5 * std::fabs(30 * 22 - 60 * 4 + 60 * 40 - 34 * 22 + 34 * 20 - 10 * 40 +
                                      10 * 4 - 30 * 20);
    Mask q = polygon_to_mask(quad, 64, 64);
    CHECK(std::fabs(static_cast<double>(q.count()) - shoelace) / shoelace <= 0.02);
}

TEST_CASE("synthetic dataset writer: files, determinism, self-check") {
    std::string dir1 = "/tmp/spda_ds_a", dir2 = "/tmp/spda_ds_b";
    fs::remove_all(dir1);
    fs::remove_all(dir2);
    std::string ann1 = write_synthetic_dataset(dir1, 4, 99, SceneMode::kDepthSeparable, 32, 3);
    std::string ann2 = write_synthetic_dataset(dir2, 4, 99, SceneMode::kDepthSeparable, 32, 3);

    CHECK(fs::exists(dir1 + "/images/scene_0000.png"));
    CHECK(fs::exists(dir1 + "/depth/scene_0003.png"));
    int n_img = 0;
    for (auto& e : fs::directory_iterator(dir1 + "/images")) (void)e, ++n_img;
    CHECK(n_img == 4);

    // regeneration with the same seed gives identical bytes
    CHECK(read_text_file(ann1) == read_text_file(ann2));
    CHECK(read_text_file(dir1 + "/images/scene_0001.png") ==
          read_text_file(dir2 + "/images/scene_0001.png"));
    CHECK(read_text_file(dir1 + "/depth/scene_0001.png") ==
          read_text_file(dir2 + "/depth/scene_0001.png"));

    SUBCASE("round trip through the COCO loader") {
        Dataset ds = load_coco(ann1, dir1);
        CHECK(ds.scenes.size() == 4);
        CHECK(ds.category_names.size() == 4);
        for (const auto& sc : ds.scenes) {
            CHECK(sc.rgb.shape == Shape{3, 32, 32});
            CHECK(sc.depth.shape == Shape{32, 32});
            CHECK(!sc.instances.empty());
        }
    }
    fs::remove_all(dir1);
    fs::remove_all(dir2);
}

TEST_CASE("load_coco: fixture with one image and two annotations") {
    std::string dir = "/tmp/spda_coco_fixture";
    fs::remove_all(dir);
    fs::create_directories(dir + "/images");
    Scene sc = generate_scene(55, 1, 16);
    write_png_rgb(dir + "/images/img.png", sc.rgb);

    Mask m1(16, 16), m2(16, 16);
    for (int y = 2; y < 6; ++y)
        for (int x = 2; x < 6; ++x) m1.at(y, x) = 1;
    for (int y = 9; y < 13; ++y)
        for (int x = 9; x < 13; ++x) m2.at(y, x) = 1;

    nlohmann::json root;
    root["images"] = {{{"id", 1}, {"file_name", "images/img.png"}, {"width", 16}, {"height", 16}}};
    root["annotations"] = {
        {{"id", 1},
         {"image_id", 1},
         {"category_id", 1},
         {"segmentation", {{"size", {16, 16}}, {"counts", rle_encode(m1)}}},
         {"bbox", {2, 2, 4, 4}}},
        {{"id", 2},
         {"image_id", 1},
         {"category_id", 2},
         {"segmentation", {{"size", {16, 16}}, {"counts", rle_encode(m2)}}},
         {"bbox", {9, 9, 4, 4}}}};
    root["categories"] = {{{"id", 1}, {"name", "a"}}, {{"id", 2}, {"name", "b"}}};
    write_text_file(dir + "/annotations.json", root.dump());

    SUBCASE("missing depth with the error policy") {
        CHECK_THROWS_AS(load_coco(dir + "/annotations.json", dir, DepthPolicy::kError),
                        IngestError);
    }
    SUBCASE("missing depth with the placeholder policy") {
        Dataset ds = load_coco(dir + "/annotations.json", dir, DepthPolicy::kPlaceholder);
        REQUIRE(ds.scenes.size() == 1);
        CHECK(ds.scenes[0].instances.size() == 2);
        for (double v : ds.scenes[0].depth.data) CHECK(v == 0.5);
        CHECK(ds.scenes[0].instances[0].mask.data == m1.data);
    }
    SUBCASE("dangling image ids are listed") {
        root["annotations"][0]["image_id"] = 42;
        write_text_file(dir + "/annotations.json", root.dump());
        CHECK_THROWS_WITH_AS(load_coco(dir + "/annotations.json", dir, DepthPolicy::kPlaceholder),
                             doctest::Contains("42"), IngestError);
    }
    SUBCASE("malformed JSON is an ingestion error") {
        write_text_file(dir + "/annotations.json", "{not json");
        CHECK_THROWS_AS(load_coco(dir + "/annotations.json", dir), IngestError);
    }
    fs::remove_all(dir);
}

TEST_CASE("png round trip preserves 8-bit rgb exactly") {
    Rng rng(406);
    Tensor img({3, 6, 6});
    for (auto& v : img.data) v = std::round(rng.uniform(0.0, 255.0)) / 255.0;
    std::string path = "/tmp/spda_png_rt.png";
    write_png_rgb(path, img);
    ImageU16 back = read_png(path);
    Tensor t = image_to_rgb_tensor(back);
    CHECK(testutil::max_abs_diff(t, img) < 1e-12);
    fs::remove(path);
}

TEST_CASE("scene resize and horizontal flip keep annotations consistent") {
    Scene sc = generate_scene(61, 2, 32);
    Scene small = resize_scene(sc, 16);
    CHECK(small.rgb.shape == Shape{3, 16, 16});
    for (const auto& inst : small.instances) {
        CHECK(!inst.mask.empty_mask());
        BoxF tb = tight_box(inst.mask);
        CHECK(tb.x1 == inst.box.x1);
        CHECK(tb.y2 == inst.box.y2);
    }
    Scene flipped = hflip_scene(sc);
    Scene twice = hflip_scene(flipped);
    CHECK(bitwise_equal(twice.rgb, sc.rgb));
    CHECK(bitwise_equal(twice.depth, sc.depth));
    for (size_t i = 0; i < sc.instances.size(); ++i)
        CHECK(twice.instances[i].mask.data == sc.instances[i].mask.data);
}
