#pragma once

// Reference implementations used to check the library. Written for
// clarity rather than speed, sharing no code with include/fedod.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "fedod/box.hpp"
#include "fedod/fedcore/fedavg.hpp"
#include "fedod/params.hpp"
#include "fedod/tinydet.hpp"

namespace oracle {

using fedod::BBox;
using fedod::Detection;

/// IoU by counting cells of an n x n raster over [lo, hi]^2.
inline double raster_iou(const BBox& a, const BBox& b, double lo, double hi, int n = 2000) {
    long inter = 0, uni = 0;
    const double step = (hi - lo) / n;
    for (int i = 0; i < n; ++i) {
        const double y = lo + (i + 0.5) * step;
        for (int j = 0; j < n; ++j) {
            const double x = lo + (j + 0.5) * step;
            const bool ia = x >= a.x0() && x < a.x1() && y >= a.y0() && y < a.y1();
            const bool ib = x >= b.x0() && x < b.x1() && y >= b.y0() && y < b.y1();
            inter += ia && ib;
            uni += ia || ib;
        }
    }
    return uni ? static_cast<double>(inter) / uni : 0.0;
}

inline double box_iou(const BBox& a, const BBox& b) {
    const double w = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
    const double h = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
    const double inter = w * h;
    return inter > 0 ? inter / (a.w * a.h + b.w * b.h - inter) : 0.0;
}

/// 101-point interpolated AP of one class at one IoU threshold, by direct
/// enumeration: p(r) = max precision over ranks whose recall reaches r.
inline double class_ap(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<BBox>>& truths,
                       int cls, double thr) {
    struct Ranked {
        double conf;
        bool tp;
    };
    std::vector<Ranked> ranked;
    int positives = 0;
    for (std::size_t img = 0; img < dets.size(); ++img) {
        std::vector<Detection> d;
        for (const auto& x : dets[img])
            if (x.class_id == cls) d.push_back(x);
        std::stable_sort(d.begin(), d.end(), [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
        std::vector<BBox> t;
        for (const auto& x : truths[img])
            if (x.class_id == cls) t.push_back(x);
        positives += static_cast<int>(t.size());
        std::vector<bool> used(t.size(), false);
        for (const auto& x : d) {
            int best = -1;
            double best_iou = 0;
            for (std::size_t k = 0; k < t.size(); ++k) {
                if (used[k]) continue;
                const double v = box_iou(x.bbox, t[k]);
                if (v >= thr && (best < 0 || v > best_iou)) best = static_cast<int>(k), best_iou = v;
            }
            if (best >= 0) used[best] = true;
            ranked.push_back({x.confidence, best >= 0});
        }
    }
    if (positives == 0) return 0.0;
    std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.conf > b.conf; });
    std::vector<double> prec, rec;
    int tp = 0;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        tp += ranked[i].tp;
        prec.push_back(static_cast<double>(tp) / (i + 1));
        rec.push_back(static_cast<double>(tp) / positives);
    }
    double sum = 0;
    for (int k = 0; k <= 100; ++k) {
        double best = 0;
        for (std::size_t i = 0; i < prec.size(); ++i)
            if (rec[i] >= k / 100.0) best = std::max(best, prec[i]);
        sum += best;
    }
    return sum / 101;
}

struct MapResult {
    double map50 = 0, ap_5095 = 0;
};

/// Mean over classes with at least one truth.
inline MapResult mean_ap(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<BBox>>& truths,
                         int num_classes) {
    MapResult r;
    int counted = 0;
    for (int c = 0; c < num_classes; ++c) {
        bool present = false;
        for (const auto& img : truths)
            for (const auto& t : img) present = present || t.class_id == c;
        if (!present) continue;
        ++counted;
        r.map50 += class_ap(dets, truths, c, 0.5);
        double s = 0;
        for (int k = 0; k < 10; ++k) s += class_ap(dets, truths, c, 0.5 + 0.05 * k);
        r.ap_5095 += s / 10;
    }
    if (counted) r.map50 /= counted, r.ap_5095 /= counted;
    return r;
}

/// Random small scene: up to 3 truths, up to 5 detections, some of them
/// jittered copies of truths.
inline void random_scene(fedod::Rng& rng, int num_classes, std::vector<Detection>& dets, std::vector<BBox>& truths) {
    auto box = [&](int cls) {
        const double w = rng.uniform(0.1, 0.5), h = rng.uniform(0.1, 0.5);
        return BBox{cls, rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h};
    };
    truths.clear();
    dets.clear();
    const int nt = static_cast<int>(rng.below(4));
    for (int i = 0; i < nt; ++i) truths.push_back(box(static_cast<int>(rng.below(num_classes))));
    const int nd = static_cast<int>(rng.below(6));
    for (int i = 0; i < nd; ++i) {
        Detection d;
        if (!truths.empty() && rng.uniform() < 0.7) {
            d.bbox = truths[rng.below(truths.size())];
            d.bbox.cx += rng.uniform(-0.05, 0.05);
            d.bbox.cy += rng.uniform(-0.05, 0.05);
            d.bbox.w *= rng.uniform(0.8, 1.2);
            d.bbox.h *= rng.uniform(0.8, 1.2);
            if (rng.uniform() < 0.2) d.bbox.class_id = static_cast<int>(rng.below(num_classes));
        } else {
            d.bbox = box(static_cast<int>(rng.below(num_classes)));
        }
        d.class_id = d.bbox.class_id;
        d.confidence = rng.uniform();
        dets.push_back(d);
    }
}

/// Elementwise sum_k n_k w_k / sum_k n_k in long double, in input order.
inline std::vector<std::vector<double>> weighted_mean(const std::vector<fedod::fedcore::ClientUpdate>& updates) {
    std::vector<std::vector<double>> out;
    long double total = 0;
    for (const auto& u : updates) total += u.num_samples;
    const auto& first = updates.front().weights;
    for (std::size_t t = 0; t < first.tensor_count(); ++t) {
        std::vector<double> v(first[t].size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            long double s = 0;
            for (const auto& u : updates) s += static_cast<long double>(u.num_samples) * u.weights[t].values()[i];
            v[i] = static_cast<double>(s / total);
        }
        out.push_back(std::move(v));
    }
    return out;
}

/// 1-8 clients sharing a random schema of up to 10^3 elements per tensor.
inline std::vector<fedod::fedcore::ClientUpdate> random_updates(fedod::Rng& rng) {
    const int clients = 1 + static_cast<int>(rng.below(8));
    const int tensors = 1 + static_cast<int>(rng.below(3));
    std::vector<std::uint32_t> sizes;
    for (int t = 0; t < tensors; ++t) sizes.push_back(1 + static_cast<std::uint32_t>(rng.below(1000)));
    std::vector<fedod::fedcore::ClientUpdate> out;
    for (int k = 0; k < clients; ++k) {
        fedod::fedcore::ClientUpdate u;
        u.client_id = "c" + std::to_string(k);
        u.num_samples = 1 + static_cast<std::uint32_t>(rng.below(1000));
        for (int t = 0; t < tensors; ++t) {
            fedod::Tensor x("t" + std::to_string(t), {sizes[t]});
            for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-5, 5));
            u.weights.add(std::move(x));
        }
        out.push_back(std::move(u));
    }
    return out;
}

struct GradCheck {
    double max_rel_error = 0;
    std::size_t checked = 0;
};

/// Central differences of the double-precision network loss against
/// `analytic`. Relative error |a - n| / max(|a|, |n|, floor).
inline GradCheck check_gradient(const fedod::tinydet::DetectorConfig& cfg, std::vector<double> w,
                                const std::vector<double>& analytic, const fedod::Sample& s, double eps,
                                double floor) {
    fedod::tinydet::Network<double> net(cfg);
    GradCheck r;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double keep = w[i];
        w[i] = keep + eps;
        const double up = net.loss(w, s.image, s.boxes);
        w[i] = keep - eps;
        const double down = net.loss(w, s.image, s.boxes);
        w[i] = keep;
        const double numeric = (up - down) / (2 * eps);
        const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), floor});
        r.max_rel_error = std::max(r.max_rel_error, std::abs(numeric - analytic[i]) / denom);
        ++r.checked;
    }
    return r;
}

}  // namespace oracle
