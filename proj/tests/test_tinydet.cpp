#include <gtest/gtest.h>

#include <cmath>

#include "fedod/synthdata.hpp"
#include "fedod/tinydet.hpp"

using namespace fedod;
using namespace fedod::tinydet;

namespace {

std::vector<Sample> scenes(std::uint64_t seed, int n) {
    std::vector<Sample> out;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        synthdata::SceneParams sp;
        sp.body_color = i % 2 ? BodyColor::Red : BodyColor::Blue;
        sp.windshield = static_cast<Windshield>(i % 5);
        out.push_back(synthdata::generate(sp, rng));
    }
    return out;
}

// Loss written directly from its definition, one cell at a time.
double loss_oracle(const PredictionGrid& grid, const std::vector<BBox>& truths, const DetectorConfig& cfg) {
    auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    const int g = cfg.grid_s;
    double total = 0.0;
    for (int r = 0; r < g; ++r)
        for (int c = 0; c < g; ++c) {
            const auto& p = grid[r * g + c];
            const BBox* owner = nullptr;
            for (const auto& t : truths)
                if (static_cast<int>(t.cx * g) == c && static_cast<int>(t.cy * g) == r) owner = &t;
            const double po = sig(p.objectness_logit);
            if (!owner) {
                total += cfg.lambda_noobj * -std::log(1.0 - po);
                continue;
            }
            total += -std::log(po);
            const double tg[4] = {owner->cx * g - c, owner->cy * g - r, owner->w, owner->h};
            const double pr[4] = {sig(p.tx), sig(p.ty), sig(p.tw), sig(p.th)};
            for (int j = 0; j < 4; ++j) total += cfg.lambda_coord * (pr[j] - tg[j]) * (pr[j] - tg[j]);
            double z = 0.0;
            for (double l : p.class_logits) z += std::exp(l);
            total += -std::log(std::exp(p.class_logits[owner->class_id]) / z);
        }
    return total;
}

PredictionGrid zero_grid(const DetectorConfig& cfg) {
    PredictionGrid grid(static_cast<std::size_t>(cfg.grid_s) * cfg.grid_s);
    for (auto& c : grid) c.class_logits.assign(cfg.num_classes, 0.0);
    return grid;
}

}  // namespace

TEST(Config, Validation) {
    DetectorConfig cfg;
    EXPECT_NO_THROW(validate(cfg));
    cfg.image_size = 30;
    EXPECT_THROW(validate(cfg), Error);
    cfg = {};
    cfg.grid_s = 3;  // 32 is not divisible by 3
    EXPECT_THROW(validate(cfg), Error);
    cfg = {};
    cfg.head_kernel = 2;
    EXPECT_THROW(validate(cfg), Error);
    cfg = {};
    cfg.momentum = 1.0;
    EXPECT_THROW(validate(cfg), Error);
}

TEST(Init, SixTensorsXavierZeroBias) {
    for (int hk : {1, 3}) {
        DetectorConfig cfg;
        cfg.head_kernel = hk;
        Rng rng(1);
        const auto p = init_params(cfg, rng);
        ASSERT_EQ(p.tensor_count(), 6u);
        EXPECT_EQ(p[0].name(), "conv1.weight");
        EXPECT_EQ(p[5].name(), "head.bias");
        EXPECT_EQ(p[4].dims(), (std::vector<std::uint32_t>{7, 16, static_cast<std::uint32_t>(hk),
                                                            static_cast<std::uint32_t>(hk)}));
        for (std::size_t t = 0; t < p.tensor_count(); ++t) {
            if (p[t].rank() == 1) {
                for (float v : p[t].values()) EXPECT_EQ(v, 0.0f);
                continue;
            }
            const auto& d = p[t].dims();
            const double bound = std::sqrt(6.0 / ((d[0] + d[1]) * d[2] * d[3]));
            for (float v : p[t].values()) EXPECT_LE(std::abs(v), bound);
        }
        Rng again(1);
        EXPECT_EQ(init_params(cfg, again), p);
    }
}

TEST(Forward, ShapesAndSchemaChecks) {
    DetectorConfig cfg;
    Rng rng(2);
    const auto p = init_params(cfg, rng);
    const auto grid = forward(p, scenes(1, 1)[0].image, cfg);
    ASSERT_EQ(grid.size(), 16u);
    for (const auto& c : grid) EXPECT_EQ(c.class_logits.size(), 2u);

    EXPECT_THROW(forward(p, Image(16), cfg), Error);
    DetectorConfig other = cfg;
    other.num_classes = 3;
    try {
        forward(p, scenes(1, 1)[0].image, other);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::SchemaMismatch);
    }
}

TEST(Decode, CornerCellsWithNeutralLogits) {
    DetectorConfig cfg;
    CellPrediction cell;
    cell.class_logits = {0.0, 0.0};
    const auto a = decode(cell, 0, 0, cfg);
    EXPECT_DOUBLE_EQ(a.bbox.cx, 0.125);
    EXPECT_DOUBLE_EQ(a.bbox.cy, 0.125);
    EXPECT_DOUBLE_EQ(a.bbox.w, 0.5);
    EXPECT_DOUBLE_EQ(a.confidence, 0.25);
    const auto b = decode(cell, 3, 3, cfg);
    EXPECT_DOUBLE_EQ(b.bbox.cx, 0.875);
    EXPECT_DOUBLE_EQ(b.bbox.cy, 0.875);

    cell.class_logits = {0.0, std::log(3.0)};
    cell.objectness_logit = 50.0;
    const auto c = decode(cell, 1, 2, cfg);
    EXPECT_EQ(c.class_id, 1);
    EXPECT_NEAR(c.confidence, 0.75, 1e-12);
    EXPECT_DOUBLE_EQ(c.bbox.cx, 2.5 / 4);
    EXPECT_DOUBLE_EQ(c.bbox.cy, 1.5 / 4);
}

TEST(Loss, NeutralLogitsHandValue) {
    DetectorConfig cfg;
    const std::vector<BBox> truths = {{1, 0.3, 0.6, 0.4, 0.5}};
    const auto r = loss(zero_grid(cfg), truths, cfg);
    // 15 empty cells at lambda_noobj * ln2, owner cell: ln2 + coord + ln2.
    const double gx = 0.3 * 4 - 1, gy = 0.6 * 4 - 2;
    const double coord = 5.0 * ((0.5 - gx) * (0.5 - gx) + (0.5 - gy) * (0.5 - gy) + 0.1 * 0.1 + 0.0);
    EXPECT_NEAR(r.value, 15 * 0.5 * std::log(2.0) + 2 * std::log(2.0) + coord, 1e-12);
    EXPECT_EQ(r.responsibility[2 * 4 + 1], 0);
    EXPECT_EQ(std::count(r.responsibility.begin(), r.responsibility.end(), -1), 15);
}

TEST(Loss, MatchesDefinitionOnRandomGrids) {
    DetectorConfig cfg;
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        auto grid = zero_grid(cfg);
        for (auto& c : grid) {
            c.objectness_logit = rng.uniform(-4, 4);
            c.tx = rng.uniform(-3, 3), c.ty = rng.uniform(-3, 3);
            c.tw = rng.uniform(-3, 3), c.th = rng.uniform(-3, 3);
            for (auto& l : c.class_logits) l = rng.uniform(-3, 3);
        }
        std::vector<BBox> truths = {{static_cast<int>(rng.below(2)), rng.uniform(0.05, 0.45), rng.uniform(0.05, 0.45),
                                     rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)},
                                    {static_cast<int>(rng.below(2)), rng.uniform(0.55, 0.95), rng.uniform(0.55, 0.95),
                                     rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)}};
        EXPECT_NEAR(loss(grid, truths, cfg).value, loss_oracle(grid, truths, cfg), 1e-9);
    }
}

TEST(Loss, TwoCentersInOneCellRejected) {
    DetectorConfig cfg;
    const std::vector<BBox> truths = {{0, 0.1, 0.1, 0.1, 0.1}, {1, 0.2, 0.2, 0.1, 0.1}};
    try {
        loss(zero_grid(cfg), truths, cfg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::MultipleObjectsInCell);
    }
}

TEST(Gradient, MatchesCentralDifferencesInDouble) {
    for (int hk : {1, 3}) {
        DetectorConfig cfg;
        cfg.head_kernel = hk;
        Rng rng(3);
        auto p = init_params(cfg, rng);
        for (std::size_t t = 0; t < p.tensor_count(); ++t)
            if (p[t].rank() == 1)
                for (auto& v : p[t].values()) v = static_cast<float>(rng.uniform(-0.1, 0.1));
        const auto sample = scenes(5, 1)[0];
        Network<double> net(cfg);
        auto w = flatten<double>(p);
        std::vector<double> grad(w.size(), 0.0);
        net.accumulate_gradient(w, sample.image, sample.boxes, grad);

        const double h = 1e-6;
        int bad = 0;
        double worst = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double keep = w[i];
            w[i] = keep + h;
            const double up = net.loss(w, sample.image, sample.boxes);
            w[i] = keep - h;
            const double down = net.loss(w, sample.image, sample.boxes);
            w[i] = keep;
            const double numeric = (up - down) / (2 * h);
            const double err = std::abs(numeric - grad[i]) / std::max(1e-3, std::abs(numeric) + std::abs(grad[i]));
            worst = std::max(worst, err);
            bad += err > 1e-4;
        }
        EXPECT_EQ(bad, 0) << "head_kernel " << hk << " worst relative error " << worst;
    }
}

TEST(Gradient, FloatPathAgreesWithDouble) {
    DetectorConfig cfg;
    Rng rng(4);
    const auto p = init_params(cfg, rng);
    const auto sample = scenes(6, 1)[0];
    const auto gf = flatten<double>(backward(p, sample.image, sample.boxes, cfg));
    Network<double> net(cfg);
    const auto w = flatten<double>(p);
    std::vector<double> gd(w.size(), 0.0);
    net.accumulate_gradient(w, sample.image, sample.boxes, gd);
    double scale = 0.0;
    for (double v : gd) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < gd.size(); ++i) EXPECT_NEAR(gf[i], gd[i], 1e-4 * scale + 1e-6);
}

TEST(Nms, HandTrace) {
    auto det = [](int cls, double conf, double cx) {
        Detection d;
        d.class_id = cls;
        d.confidence = conf;
        d.bbox = {cls, cx, 0.5, 0.4, 0.4};
        return d;
    };
    // 0.8 overlaps 0.9 in the same class (IoU ~0.9), 0.7 overlaps it in the
    // other class, 0.6 is disjoint.
    const std::vector<Detection> in = {det(0, 0.8, 0.52), det(0, 0.6, 0.1), det(1, 0.7, 0.5), det(0, 0.9, 0.5)};
    const auto out = nms(in, 0.45);
    ASSERT_EQ(out.size(), 3u);
    EXPECT_DOUBLE_EQ(out[0].confidence, 0.9);
    EXPECT_DOUBLE_EQ(out[1].confidence, 0.7);
    EXPECT_DOUBLE_EQ(out[2].confidence, 0.6);
    // A threshold above their IoU keeps the overlapping pair.
    const double ab = iou(in[0].bbox, in[3].bbox);
    EXPECT_EQ(nms(in, ab).size(), 4u);
    EXPECT_EQ(nms(in, std::nextafter(ab, 0.0)).size(), 3u);
}

TEST(Training, ZeroLearningRateOrEpochsLeaveWeights) {
    const auto data = scenes(8, 16);
    DetectorConfig cfg;
    Rng rng(1);
    const auto p = init_params(cfg, rng);
    cfg.learning_rate = 0.0;
    cfg.local_epochs = 2;
    Rng r1(9);
    EXPECT_EQ(train_local(p, data, cfg, r1).params, p);
    cfg.learning_rate = 0.02;
    cfg.local_epochs = 0;
    Rng r2(9);
    const auto res = train_local(p, data, cfg, r2);
    EXPECT_EQ(res.params, p);
    EXPECT_TRUE(res.stats.epoch_mean_loss.empty());
}

TEST(Training, DeterministicForSeed) {
    const auto data = scenes(10, 24);
    DetectorConfig cfg;
    cfg.local_epochs = 2;
    Rng init(1);
    const auto p = init_params(cfg, init);
    Rng a(5), b(5), c(6);
    const auto ra = train_local(p, data, cfg, a), rb = train_local(p, data, cfg, b), rc = train_local(p, data, cfg, c);
    EXPECT_EQ(ra.params, rb.params);
    EXPECT_EQ(ra.stats.epoch_mean_loss, rb.stats.epoch_mean_loss);
    EXPECT_NE(ra.params, rc.params);
}

TEST(Training, LossDecreasesAcrossSeeds) {
    int decreasing = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto data = scenes(100 + seed, 40);
        DetectorConfig cfg;
        cfg.local_epochs = 8;
        Rng init(seed);
        const auto p = init_params(cfg, init);
        Rng rng(seed);
        const auto res = train_local(p, data, cfg, rng);
        const auto& l = res.stats.epoch_mean_loss;
        ASSERT_EQ(l.size(), 8u);
        decreasing += l.back() < l.front();
    }
    EXPECT_GE(decreasing, 9);
}

TEST(Training, EmptyDataRejected) {
    DetectorConfig cfg;
    Rng rng(1);
    const auto p = init_params(cfg, rng);
    try {
        train_local(p, {}, cfg, rng);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::EmptyDataset);
    }
}
