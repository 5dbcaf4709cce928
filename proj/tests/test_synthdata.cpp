#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "fedod/synthdata.hpp"
#include "fedod/tinydet.hpp"

using namespace fedod;
using namespace fedod::synthdata;

namespace {

PartitionSpec paper_spec(int samples = 200, std::uint64_t seed = 1) {
    PartitionSpec spec;
    spec.seed = seed;
    spec.clients = {{"client1",
                     {{BodyColor::Blue, Windshield::None}, {BodyColor::Blue, Windshield::A}, {BodyColor::Blue, Windshield::B}},
                     samples},
                    {"client2",
                     {{BodyColor::Red, Windshield::None}, {BodyColor::Red, Windshield::C}, {BodyColor::Red, Windshield::D}},
                     samples}};
    return spec;
}

std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("fedod_synth_" + name);
    std::filesystem::remove_all(dir);
    return dir;
}

}  // namespace

TEST(Generate, LabelingRule) {
    Rng rng(1);
    for (auto w : {Windshield::None, Windshield::A, Windshield::B, Windshield::C, Windshield::D}) {
        SceneParams sp;
        sp.windshield = w;
        const auto s = generate(sp, rng);
        ASSERT_EQ(s.boxes.size(), 1u);
        EXPECT_EQ(s.boxes[0].class_id, w == Windshield::None ? 0 : 1);
    }
}

TEST(Generate, Deterministic) {
    SceneParams sp;
    sp.body_color = BodyColor::Red;
    sp.windshield = Windshield::C;
    Rng a(77), b(77);
    const auto s1 = generate(sp, a), s2 = generate(sp, b);
    EXPECT_EQ(s1.image, s2.image);
    EXPECT_EQ(s1.boxes, s2.boxes);
    EXPECT_EQ(s1.meta, s2.meta);
}

TEST(Generate, BoxMatchesRasterizedBodyByPixelScan) {
    // Noise-free rendering: every pixel not equal to the background belongs
    // to the body (windshield included), so its bounds are the body rectangle.
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        SceneParams sp;
        sp.pixel_noise = 0.0;
        sp.blur_probability = 0.0;
        sp.brightness_lo = sp.brightness_hi = 1.0;
        sp.body_color = seed % 2 ? BodyColor::Blue : BodyColor::Red;
        sp.windshield = static_cast<Windshield>(seed % 5);
        Rng rng(seed);
        const auto s = generate(sp, rng);
        const auto& bg = sp.backgrounds[s.meta.background_id];
        int xmin = 1000, ymin = 1000, xmax = -1, ymax = -1;
        for (int y = 0; y < s.image.size; ++y)
            for (int x = 0; x < s.image.size; ++x) {
                bool differs = false;
                for (int c = 0; c < 3; ++c) differs = differs || std::abs(s.image.at(y, x, c) - bg[c]) > 1e-6f;
                if (!differs) continue;
                xmin = std::min(xmin, x), xmax = std::max(xmax, x);
                ymin = std::min(ymin, y), ymax = std::max(ymax, y);
            }
        const double n = s.image.size;
        const auto& b = s.boxes[0];
        EXPECT_NEAR(b.x0() * n, xmin, 1.0);
        EXPECT_NEAR(b.x1() * n, xmax + 1, 1.0);
        EXPECT_NEAR(b.y0() * n, ymin, 1.0);
        EXPECT_NEAR(b.y1() * n, ymax + 1, 1.0);
        EXPECT_GE(b.w, 0.3 - 1e-9);
        EXPECT_LE(b.w, 0.6 + 1e-9);
    }
}

TEST(Generate, WindshieldVisibleOnlyWhenMounted) {
    SceneParams sp;
    sp.pixel_noise = 0.0;
    sp.blur_probability = 0.0;
    sp.brightness_lo = sp.brightness_hi = 1.0;
    sp.windshield = Windshield::A;
    Rng rng(5);
    const auto s = generate(sp, rng);
    const auto shield = windshield_rgb(Windshield::A);
    int count = 0;
    for (int y = 0; y < s.image.size; ++y)
        for (int x = 0; x < s.image.size; ++x)
            count += std::abs(s.image.at(y, x, 0) - shield[0]) < 1e-6f && std::abs(s.image.at(y, x, 2) - shield[2]) < 1e-6f;
    EXPECT_GT(count, 0);
}

TEST(Generate, BoxesInsideImageAndOneCenterPerCell) {
    Rng rng(3);
    SceneParams sp;
    for (int i = 0; i < 200; ++i) {
        const auto s = generate(sp, rng);
        for (const auto& b : s.boxes) {
            EXPECT_GE(b.x0(), -1e-12);
            EXPECT_LE(b.x1(), 1 + 1e-12);
            EXPECT_GE(b.y0(), -1e-12);
            EXPECT_LE(b.y1(), 1 + 1e-12);
        }
        EXPECT_NO_THROW(tinydet::assign_cells(s.boxes, 4));
        for (float v : s.image.pixels) {
            ASSERT_GE(v, 0.0f);
            ASSERT_LE(v, 1.0f);
        }
    }
}

TEST(SplitSizes, FloorThenDistribute) {
    EXPECT_EQ(split_sizes(200, {0.70, 0.15, 0.15}), (std::array<int, 3>{140, 30, 30}));
    // 7 * (0.7, 0.15, 0.15) = (4.9, 1.05, 1.05): floors 4,1,1; the remaining
    // one goes to the largest fractional part (0.9).
    EXPECT_EQ(split_sizes(7, {0.70, 0.15, 0.15}), (std::array<int, 3>{5, 1, 1}));
    // 10 * (1/3 each): floors 3,3,3, tie on fractional part goes to the first split.
    EXPECT_EQ(split_sizes(10, {1.0 / 3, 1.0 / 3, 1.0 / 3}), (std::array<int, 3>{4, 3, 3}));
}

TEST(Partitions, PaperSpecShapes) {
    const auto parts = build_partitions(paper_spec());
    ASSERT_EQ(parts.clients.size(), 2u);
    for (const auto& c : parts.clients) {
        EXPECT_EQ(c.train.size(), 140u);
        EXPECT_EQ(c.val.size(), 30u);
        EXPECT_EQ(c.test.size(), 30u);
    }
    for (const auto* set : {&parts.clients[0].train, &parts.clients[0].val, &parts.clients[0].test})
        for (const auto& s : *set) EXPECT_EQ(s.meta.body_color, BodyColor::Blue);
    for (const auto& s : parts.clients[1].train) {
        EXPECT_EQ(s.meta.body_color, BodyColor::Red);
        EXPECT_TRUE(s.meta.windshield == Windshield::None || s.meta.windshield == Windshield::C ||
                    s.meta.windshield == Windshield::D);
    }

    const std::set<Combination> expected = {{BodyColor::Blue, Windshield::C},
                                            {BodyColor::Blue, Windshield::D},
                                            {BodyColor::Red, Windshield::A},
                                            {BodyColor::Red, Windshield::B}};
    EXPECT_EQ(std::set<Combination>(parts.cross_combinations.begin(), parts.cross_combinations.end()), expected);
    EXPECT_FALSE(parts.cross_test_empty);
    EXPECT_EQ(parts.cross_test.size(), 60u);
    for (const auto& s : parts.cross_test) EXPECT_TRUE(expected.count({s.meta.body_color, s.meta.windshield}));
    EXPECT_EQ(parts.domain_shift.size(), 60u);
    for (const auto& s : parts.domain_shift) {
        EXPECT_GE(s.meta.brightness, 0.4);
        EXPECT_LE(s.meta.brightness, 1.6);
    }
}

TEST(Partitions, IdenticalClientsLeaveCrossTestEmpty) {
    auto spec = paper_spec(20);
    spec.clients[1].allowed = spec.clients[0].allowed;
    const auto parts = build_partitions(spec);
    EXPECT_TRUE(parts.cross_test_empty);
    EXPECT_TRUE(parts.cross_test.empty());
}

TEST(Partitions, InvalidSpecs) {
    auto spec = paper_spec(20);
    spec.clients[0].allowed.clear();
    EXPECT_THROW(build_partitions(spec), Error);
    spec = paper_spec(20);
    spec.train_fraction = 0.9;
    EXPECT_THROW(build_partitions(spec), Error);
    spec = paper_spec(20);
    spec.cross_combinations = {{BodyColor::Blue, Windshield::A}};
    EXPECT_THROW(build_partitions(spec), Error);
}

TEST(Partitions, SwapSubsetKeepsClientColor) {
    const auto spec = paper_spec(20);
    const auto parts = build_partitions(spec);
    const auto swap1 = swap_subset(parts.cross_test, spec.clients[0]);
    EXPECT_FALSE(swap1.empty());
    for (const auto& s : swap1) {
        EXPECT_EQ(s.meta.body_color, BodyColor::Blue);
        EXPECT_TRUE(s.meta.windshield == Windshield::C || s.meta.windshield == Windshield::D);
    }
}

TEST(Labels, FixedFormat) {
    EXPECT_EQ(format_label({1, 0.5, 0.5, 0.25, 0.25}), "1 0.500000 0.500000 0.250000 0.250000");
    const auto b = parse_label("0 0.125000 0.875000 0.300000 0.400000");
    EXPECT_EQ(b.class_id, 0);
    EXPECT_DOUBLE_EQ(b.cy, 0.875);
}

TEST(Labels, MalformedLines) {
    for (const std::string bad : {"1 0.5 0.5 0.25", "1 0.5 0.5 0.25 0.25 9", "x 0.5 0.5 0.2 0.2", "1 1.5 0.5 0.2 0.2",
                                  "1 0.5 0.5 0 0.2", "-1 0.5 0.5 0.2 0.2", "1 0.5 0.5abc 0.2 0.2"}) {
        try {
            parse_label(bad);
            ADD_FAILURE() << "accepted '" << bad << "'";
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), ErrorKind::MalformedLabelLine);
        }
    }
}

TEST(YoloIo, RoundTrip) {
    auto spec = paper_spec(30);
    const auto parts = build_partitions(spec);
    std::vector<Sample> samples = parts.clients[0].train;
    samples.insert(samples.end(), parts.clients[1].train.begin(), parts.clients[1].train.end());
    samples.resize(30);
    const auto dir = scratch("roundtrip");
    write_yolo(dir, samples, {{"set", "test"}});
    const auto back = read_yolo(dir);
    ASSERT_EQ(back.size(), samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        ASSERT_EQ(back[i].boxes.size(), 1u);
        EXPECT_EQ(back[i].boxes[0].class_id, samples[i].boxes[0].class_id);
        EXPECT_NEAR(back[i].boxes[0].cx, samples[i].boxes[0].cx, 1e-6);
        EXPECT_NEAR(back[i].boxes[0].cy, samples[i].boxes[0].cy, 1e-6);
        EXPECT_NEAR(back[i].boxes[0].w, samples[i].boxes[0].w, 1e-6);
        EXPECT_NEAR(back[i].boxes[0].h, samples[i].boxes[0].h, 1e-6);
        EXPECT_EQ(back[i].meta, samples[i].meta);
        for (std::size_t p = 0; p < samples[i].image.pixels.size(); ++p)
            ASSERT_LE(std::abs(back[i].image.pixels[p] - samples[i].image.pixels[p]), 0.5f / 255.0f + 1e-6f);
    }
    std::filesystem::remove_all(dir);
}

TEST(YoloIo, DeterministicBytes) {
    const auto a = scratch("det_a"), b = scratch("det_b");
    write_yolo(a, build_partitions(paper_spec(10, 9)).clients[0].train);
    write_yolo(b, build_partitions(paper_spec(10, 9)).clients[0].train);
    auto slurp = [](const std::filesystem::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    };
    for (const auto& e : std::filesystem::recursive_directory_iterator(a)) {
        if (!e.is_regular_file()) continue;
        const auto rel = std::filesystem::relative(e.path(), a);
        EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
    }
    std::filesystem::remove_all(a);
    std::filesystem::remove_all(b);
}

TEST(YoloIo, MissingAndCorruptDirectories) {
    EXPECT_THROW(read_yolo(scratch("absent")), Error);
    const auto dir = scratch("corrupt");
    write_yolo(dir, build_partitions(paper_spec(10)).clients[0].train);
    {
        std::ofstream lab(dir / "labels" / "00000.txt", std::ios::trunc);
        lab << "1 0.5 0.5\n";
    }
    try {
        read_yolo(dir);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::MalformedLabelLine);
    }
    std::filesystem::remove_all(dir);
}
