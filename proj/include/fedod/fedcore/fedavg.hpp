#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedod/error.hpp"
#include "fedod/params.hpp"

namespace fedod::fedcore {

/// One client's contribution to a communication round.
struct ClientUpdate {
    std::string client_id;
    std::uint32_t round = 0;
    ParamSet weights;
    std::uint32_t num_samples = 0;
    /// mAP@0.5 of the received global model on the client's test split.
    std::optional<double> reported_accuracy;
};

/// Sample-weighted mean sum_k n_k * w_k / sum_k n_k. Updates are folded in
/// ascending client_id order with double accumulators and rounded to float
/// once, so any permutation of the input gives bit-identical output.
inline ParamSet fedavg(std::span<const ClientUpdate> updates) {
    if (updates.empty()) throw Error(ErrorKind::EmptyUpdateSet, "no client updates to aggregate");
    for (const auto& u : updates) {
        if (u.weights.schema_hash() != updates.front().weights.schema_hash())
            throw Error(ErrorKind::SchemaMismatch, "update from '" + u.client_id + "' has a different schema");
        if (u.num_samples == 0)
            throw Error(ErrorKind::ProtocolViolation, "update from '" + u.client_id + "' declares zero samples");
    }

    std::vector<std::size_t> order(updates.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return updates[a].client_id < updates[b].client_id; });

    double total = 0.0;
    for (auto k : order) total += static_cast<double>(updates[k].num_samples);

    ParamSet out = zeros_like(updates.front().weights);
    std::vector<double> acc;
    for (std::size_t t = 0; t < out.tensor_count(); ++t) {
        acc.assign(out[t].size(), 0.0);
        for (auto k : order) {
            const double n = updates[k].num_samples;
            const auto w = updates[k].weights[t].values();
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += n * static_cast<double>(w[i]);
        }
        auto dst = out[t].values();
        for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = static_cast<float>(acc[i] / total);
    }
    return out;
}

}  // namespace fedod::fedcore
