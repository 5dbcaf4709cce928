#pragma once

// COCO-style detection evaluation: mAP@0.5, AP@[.50:.05:.95], and the
// medium/large size-bucket AP and AR columns.

#include <algorithm>
#include <array>
#include <cstdio>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedod/box.hpp"
#include "fedod/error.hpp"

namespace fedod::detmetrics {

using fedod::iou;

/// The ten COCO thresholds 0.50, 0.55, ..., 0.95.
inline std::array<double, 10> coco_thresholds() {
    std::array<double, 10> t{};
    for (int i = 0; i < 10; ++i) t[i] = (50 + 5 * i) / 100.0;
    return t;
}

inline constexpr std::size_t kMaxDetectionsPerImage = 100;

enum class SizeBucket { Small, Medium, Large };

/// Area-fraction thresholds (box area relative to the image).
struct SizeBuckets {
    double medium_min = 1.0 / 9.0;
    double large_min = 4.0 / 9.0;

    SizeBucket of(const BBox& b) const {
        const double a = b.area();
        if (a < medium_min) return SizeBucket::Small;
        if (a < large_min) return SizeBucket::Medium;
        return SizeBucket::Large;
    }
};

struct MatchedDetection {
    double confidence = 0.0;
    bool matched = false;
    double iou_at_match = 0.0;
    /// Matched to, or (unmatched and) sized outside, the evaluated bucket.
    bool ignored = false;
};

struct MatchResult {
    std::vector<MatchedDetection> detections;  // descending confidence
    std::vector<bool> truth_matched;           // input order
    std::size_t counted_truths = 0;            // truths not ignored
};

/// Greedy matching of one image's same-class detections. Detections are
/// visited by descending confidence (stable); each takes the unmatched
/// counted truth with the highest IoU >= threshold, falling back to an
/// unmatched ignored truth (which makes the detection ignored). Unmatched
/// detections whose own box is flagged by `det_ignored` are ignored rather
/// than counted as false positives.
inline MatchResult match(std::span<const Detection> detections, std::span<const BBox> truths, double iou_threshold,
                         const std::vector<bool>& truth_ignored = {},
                         const std::function<bool(const BBox&)>& det_ignored = nullptr) {
    std::vector<std::size_t> order(detections.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return detections[a].confidence > detections[b].confidence;
    });

    auto ignored_truth = [&](std::size_t t) { return !truth_ignored.empty() && truth_ignored[t]; };

    MatchResult r;
    r.truth_matched.assign(truths.size(), false);
    for (std::size_t t = 0; t < truths.size(); ++t)
        if (!ignored_truth(t)) ++r.counted_truths;

    for (auto i : order) {
        const auto& d = detections[i];
        MatchedDetection md{d.confidence, false, 0.0, false};
        for (int pass = 0; pass < 2 && !md.matched; ++pass) {
            const bool want_ignored = pass == 1;
            double best = -1.0;
            std::size_t best_t = truths.size();
            for (std::size_t t = 0; t < truths.size(); ++t) {
                if (r.truth_matched[t] || ignored_truth(t) != want_ignored) continue;
                const double v = iou(d.bbox, truths[t]);
                if (v >= iou_threshold && v > best) {
                    best = v;
                    best_t = t;
                }
            }
            if (best_t < truths.size()) {
                r.truth_matched[best_t] = true;
                md.matched = true;
                md.iou_at_match = best;
                md.ignored = want_ignored;
            }
        }
        if (!md.matched && det_ignored && det_ignored(d.bbox)) md.ignored = true;
        r.detections.push_back(md);
    }
    return r;
}

/// 101-point interpolated AP over the confidence-ranked union of all
/// images' detections. Ties keep image order, then per-image order.
inline double average_precision(std::span<const MatchResult> per_image) {
    std::size_t npos = 0;
    std::vector<MatchedDetection> ranked;
    for (const auto& m : per_image) {
        npos += m.counted_truths;
        for (const auto& d : m.detections)
            if (!d.ignored) ranked.push_back(d);
    }
    if (npos == 0) return 0.0;
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const MatchedDetection& a, const MatchedDetection& b) { return a.confidence > b.confidence; });

    std::vector<double> recall(ranked.size()), precision(ranked.size());
    std::size_t tp = 0;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        if (ranked[i].matched) ++tp;
        recall[i] = static_cast<double>(tp) / static_cast<double>(npos);
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    }
    // Envelope: precision at i becomes the max over all later points.
    for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);

    double sum = 0.0;
    for (int k = 0; k <= 100; ++k) {
        const double r = k / 100.0;
        const auto it = std::lower_bound(recall.begin(), recall.end(), r);
        if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
    }
    return sum / 101.0;
}

inline double recall_of(std::span<const MatchResult> per_image) {
    std::size_t npos = 0, hit = 0;
    for (const auto& m : per_image) {
        npos += m.counted_truths;
        for (const auto& d : m.detections)
            if (d.matched && !d.ignored) ++hit;
    }
    return npos == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(npos);
}

struct Metrics {
    double map50 = 0.0;
    double ap_5095 = 0.0;
    double ar = 0.0;
    std::optional<double> ap_medium, ap_large, ar_medium, ar_large;
};

struct ClassMetrics {
    int class_id = 0;
    std::size_t truths = 0;
    std::size_t detections = 0;
    Metrics metrics;
};

struct EvalReport {
    Metrics aggregate;
    std::vector<ClassMetrics> per_class;
    std::size_t images = 0;
    std::size_t truths = 0;
    std::size_t detections = 0;
};

namespace detail {

struct BucketResult {
    double ap50 = 0.0, ap_5095 = 0.0, ar = 0.0;
    std::size_t truths = 0;
};

/// AP/AR for one class; `bucket` restricts ground truth to one size bucket.
inline BucketResult evaluate_class(const std::vector<std::vector<Detection>>& dets,
                                   const std::vector<std::vector<BBox>>& truths, int cls,
                                   std::optional<SizeBucket> bucket, const SizeBuckets& sizes) {
    std::vector<std::vector<Detection>> cdets(dets.size());
    std::vector<std::vector<BBox>> ctruths(truths.size());
    std::vector<std::vector<bool>> ignored(truths.size());
    BucketResult r;
    for (std::size_t i = 0; i < dets.size(); ++i) {
        for (const auto& d : dets[i])
            if (d.class_id == cls) cdets[i].push_back(d);
        std::stable_sort(cdets[i].begin(), cdets[i].end(),
                         [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
        if (cdets[i].size() > kMaxDetectionsPerImage) cdets[i].resize(kMaxDetectionsPerImage);
        for (const auto& t : truths[i])
            if (t.class_id == cls) {
                ctruths[i].push_back(t);
                const bool out = bucket && sizes.of(t) != *bucket;
                ignored[i].push_back(out);
                if (!out) ++r.truths;
            }
    }

    std::function<bool(const BBox&)> det_out = nullptr;
    if (bucket) det_out = [&](const BBox& b) { return sizes.of(b) != *bucket; };

    const auto thresholds = coco_thresholds();
    double ap_sum = 0.0, ar_sum = 0.0;
    for (std::size_t ti = 0; ti < thresholds.size(); ++ti) {
        std::vector<MatchResult> per_image;
        per_image.reserve(dets.size());
        for (std::size_t i = 0; i < dets.size(); ++i)
            per_image.push_back(match(cdets[i], ctruths[i], thresholds[ti], ignored[i], det_out));
        const double ap = average_precision(per_image);
        if (ti == 0) r.ap50 = ap;
        ap_sum += ap;
        ar_sum += recall_of(per_image);
    }
    r.ap_5095 = ap_sum / thresholds.size();
    r.ar = ar_sum / thresholds.size();
    return r;
}

inline std::optional<double> mean_of(const std::vector<double>& v) {
    if (v.empty()) return std::nullopt;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace detail

/// Aggregates are unweighted means over classes that have ground truth
/// (in the bucket, for the bucketed columns). A bucket with no ground
/// truth at all is reported as absent.
inline EvalReport evaluate(const std::vector<std::vector<Detection>>& detections,
                           const std::vector<std::vector<BBox>>& truths, int num_classes,
                           const SizeBuckets& sizes = {}) {
    if (detections.size() != truths.size())
        throw Error(ErrorKind::ClassUniverseMismatch, "detections and truths cover different image counts");
    if (num_classes < 1) throw Error(ErrorKind::ClassUniverseMismatch, "num_classes must be >= 1");
    EvalReport rep;
    rep.images = truths.size();
    std::vector<std::size_t> gt_count(num_classes, 0), det_count(num_classes, 0);
    for (std::size_t i = 0; i < truths.size(); ++i) {
        for (const auto& t : truths[i]) {
            if (t.class_id < 0 || t.class_id >= num_classes)
                throw Error(ErrorKind::ClassUniverseMismatch, "truth class " + std::to_string(t.class_id));
            ++gt_count[t.class_id];
        }
        for (const auto& d : detections[i]) {
            if (d.class_id < 0 || d.class_id >= num_classes)
                throw Error(ErrorKind::ClassUniverseMismatch, "detection class " + std::to_string(d.class_id));
            ++det_count[d.class_id];
        }
        rep.truths += truths[i].size();
        rep.detections += detections[i].size();
    }

    std::vector<double> m50, m5095, mar, apm, apl, arm, arl;
    for (int c = 0; c < num_classes; ++c) {
        ClassMetrics cm;
        cm.class_id = c;
        cm.truths = gt_count[c];
        cm.detections = det_count[c];
        if (gt_count[c] > 0) {
            const auto all = detail::evaluate_class(detections, truths, c, std::nullopt, sizes);
            cm.metrics.map50 = all.ap50;
            cm.metrics.ap_5095 = all.ap_5095;
            cm.metrics.ar = all.ar;
            m50.push_back(all.ap50);
            m5095.push_back(all.ap_5095);
            mar.push_back(all.ar);
            const auto med = detail::evaluate_class(detections, truths, c, SizeBucket::Medium, sizes);
            if (med.truths > 0) {
                cm.metrics.ap_medium = med.ap_5095;
                cm.metrics.ar_medium = med.ar;
                apm.push_back(med.ap_5095);
                arm.push_back(med.ar);
            }
            const auto lg = detail::evaluate_class(detections, truths, c, SizeBucket::Large, sizes);
            if (lg.truths > 0) {
                cm.metrics.ap_large = lg.ap_5095;
                cm.metrics.ar_large = lg.ar;
                apl.push_back(lg.ap_5095);
                arl.push_back(lg.ar);
            }
        }
        rep.per_class.push_back(cm);
    }
    rep.aggregate.map50 = detail::mean_of(m50).value_or(0.0);
    rep.aggregate.ap_5095 = detail::mean_of(m5095).value_or(0.0);
    rep.aggregate.ar = detail::mean_of(mar).value_or(0.0);
    rep.aggregate.ap_medium = detail::mean_of(apm);
    rep.aggregate.ap_large = detail::mean_of(apl);
    rep.aggregate.ar_medium = detail::mean_of(arm);
    rep.aggregate.ar_large = detail::mean_of(arl);
    return rep;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

inline nlohmann::json optional_json(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const Metrics& m) {
    return {{"map50", m.map50},
            {"ap_5095", m.ap_5095},
            {"ar", m.ar},
            {"ap_medium", optional_json(m.ap_medium)},
            {"ap_large", optional_json(m.ap_large)},
            {"ar_medium", optional_json(m.ar_medium)},
            {"ar_large", optional_json(m.ar_large)}};
}

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json per_class = nlohmann::json::array();
    for (const auto& c : r.per_class) {
        auto j = to_json(c.metrics);
        j["class_id"] = c.class_id;
        j["truths"] = c.truths;
        j["detections"] = c.detections;
        per_class.push_back(std::move(j));
    }
    return {{"aggregate", to_json(r.aggregate)},
            {"per_class", std::move(per_class)},
            {"counts", {{"images", r.images}, {"truths", r.truths}, {"detections", r.detections}}}};
}

inline std::optional<double> optional_from_json(const nlohmann::json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

inline Metrics metrics_from_json(const nlohmann::json& j) {
    Metrics m;
    m.map50 = j.at("map50").get<double>();
    m.ap_5095 = j.at("ap_5095").get<double>();
    m.ar = j.value("ar", 0.0);
    m.ap_medium = optional_from_json(j.at("ap_medium"));
    m.ap_large = optional_from_json(j.at("ap_large"));
    m.ar_medium = optional_from_json(j.at("ar_medium"));
    m.ar_large = optional_from_json(j.at("ar_large"));
    return m;
}

/// Two decimals, or "__" for an absent bucket.
inline std::string format_metric(const std::optional<double>& v) {
    if (!v) return "__";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", *v);
    return buf;
}

inline const std::vector<std::string>& table_columns() {
    static const std::vector<std::string> cols = {"Model", "Test Dataset", "mAP", "AP@[.50:.05:.95]",
                                                  "APm",   "APl",          "ARm", "ARl"};
    return cols;
}

inline std::vector<std::string> table_cells(const std::string& model, const std::string& dataset, const Metrics& m) {
    return {model,
            dataset,
            format_metric(m.map50),
            format_metric(m.ap_5095),
            format_metric(m.ap_medium),
            format_metric(m.ap_large),
            format_metric(m.ar_medium),
            format_metric(m.ar_large)};
}

/// Fixed-width text table, one space-padded column per header.
inline std::string render_table(const std::vector<std::string>& header,
                                const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width(header.size());
    for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
    for (const auto& r : rows)
        for (std::size_t c = 0; c < r.size() && c < width.size(); ++c) width[c] = std::max(width[c], r[c].size());

    auto line = [&](const std::vector<std::string>& cells) {
        std::string out;
        for (std::size_t c = 0; c < header.size(); ++c) {
            const std::string cell = c < cells.size() ? cells[c] : "";
            out += cell + std::string(width[c] - cell.size(), ' ');
            out += c + 1 < header.size() ? " | " : "\n";
        }
        return out;
    };
    std::string out = line(header);
    std::size_t total = 0;
    for (auto w : width) total += w;
    out += std::string(total + 3 * (header.size() - 1), '-') + "\n";
    for (const auto& r : rows) out += line(r);
    return out;
}

inline std::string render_row_table(const std::string& model, const std::string& dataset, const EvalReport& r) {
    return render_table(table_columns(), {table_cells(model, dataset, r.aggregate)});
}

}  // namespace fedod::detmetrics
