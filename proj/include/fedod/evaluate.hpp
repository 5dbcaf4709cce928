#pragma once

#include <span>
#include <vector>

#include "fedod/detmetrics.hpp"
#include "fedod/params.hpp"
#include "fedod/sample.hpp"
#include "fedod/tinydet.hpp"

namespace fedod {

/// Runs the detector over `samples` and scores it against their labels.
inline detmetrics::EvalReport evaluate_model(const ParamSet& p, std::span<const Sample> samples,
                                             const tinydet::DetectorConfig& cfg,
                                             const detmetrics::SizeBuckets& sizes = {}) {
    tinydet::Detector det(p, cfg);
    std::vector<std::vector<Detection>> dets;
    std::vector<std::vector<BBox>> truths;
    dets.reserve(samples.size());
    truths.reserve(samples.size());
    for (const auto& s : samples) {
        dets.push_back(det(s.image, cfg.conf_threshold, cfg.nms_iou));
        truths.push_back(s.boxes);
    }
    return detmetrics::evaluate(dets, truths, cfg.num_classes, sizes);
}

}  // namespace fedod
