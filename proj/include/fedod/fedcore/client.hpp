#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedod/error.hpp"
#include "fedod/evaluate.hpp"
#include "fedod/fedcore/fedavg.hpp"
#include "fedod/fedcore/protocol.hpp"
#include "fedod/fedcore/transport.hpp"
#include "fedod/params.hpp"
#include "fedod/sample.hpp"
#include "fedod/tinydet.hpp"

namespace fedod::fedcore {

/// The client's notion of "accuracy of the global model".
using AccuracyFn =
    std::function<double(const ParamSet&, std::span<const Sample>, const tinydet::DetectorConfig&)>;

inline double local_map50(const ParamSet& p, std::span<const Sample> test, const tinydet::DetectorConfig& cfg) {
    return evaluate_model(p, test, cfg).aggregate.map50;
}

struct ClientContext {
    std::string id;
    std::vector<Sample> train;
    std::vector<Sample> test;
    /// local_epochs here is E, the epochs per round.
    tinydet::DetectorConfig detector;
    std::uint64_t seed = 0;
    AccuracyFn accuracy = local_map50;
};

/// FNV-1a, used to give each client its own rng stream.
inline std::uint64_t stable_hash(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t client_seed(std::uint64_t federation_seed, std::string_view client_id) {
    return derive_seed(federation_seed, stable_hash(client_id));
}

inline ClientUpdate client_step(const ClientContext& ctx, std::uint32_t round, const ParamSet& global) {
    tinydet::require_schema(global, ctx.detector);
    if (ctx.train.empty()) throw Error(ErrorKind::EmptyDataset, "client '" + ctx.id + "' has no training samples");
    if (ctx.test.empty()) throw Error(ErrorKind::EmptyDataset, "client '" + ctx.id + "' has no test samples");

    ClientUpdate u;
    u.client_id = ctx.id;
    u.round = round;
    u.num_samples = static_cast<std::uint32_t>(ctx.train.size());
    if (round > 0) u.reported_accuracy = ctx.accuracy(global, ctx.test, ctx.detector);
    Rng rng(derive_seed(ctx.seed, round));
    u.weights = tinydet::train_local(global, ctx.train, ctx.detector, rng).params;
    return u;
}

/// Joins, answers every Broadcast with an Update, and returns the final
/// weights from the StopNotice.
inline ParamSet run_client(ClientChannel& ch, const ClientContext& ctx) {
    ch.send(encode_join({ctx.id, static_cast<std::uint32_t>(ctx.train.size())}));
    for (;;) {
        const Message m = ch.recv();
        switch (m.type) {
            case MessageType::Broadcast:
                ch.send(encode_update(client_step(ctx, m.round, decode_weights(m, MessageType::Broadcast))));
                break;
            case MessageType::StopNotice:
                return decode_weights(m, MessageType::StopNotice);
            case MessageType::Error: {
                const auto e = decode_error(m);
                throw Error(e.kind, "server rejected client '" + ctx.id + "' in round " + std::to_string(m.round) +
                                        ": " + e.message);
            }
            default:
                throw Error(ErrorKind::ProtocolViolation,
                            "client '" + ctx.id + "' received unexpected " + std::string(to_string(m.type)));
        }
    }
}

}  // namespace fedod::fedcore
