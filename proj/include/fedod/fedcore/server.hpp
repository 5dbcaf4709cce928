#pragma once

// The neutral server as a pure state machine: every transition takes the
// current RoundState and one event and returns the next state plus the
// messages to send. Invalid events throw and leave the caller's state as is.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "fedod/error.hpp"
#include "fedod/fedcore/fedavg.hpp"
#include "fedod/params.hpp"

namespace fedod::fedcore {

enum class Transport { InProcess, Tcp };

struct FedConfig {
    double stop_threshold = 0.96;
    int max_rounds = 10;
    int local_epochs = 15;
    std::vector<std::string> clients;
    Transport transport = Transport::InProcess;
    std::uint64_t seed = 1;
};

inline void validate(const FedConfig& cfg) {
    if (!(cfg.stop_threshold > 0.0 && cfg.stop_threshold <= 1.0))
        throw Error(ErrorKind::ConfigInvalid, "stop_threshold must lie in (0, 1]");
    if (cfg.max_rounds < 1) throw Error(ErrorKind::ConfigInvalid, "max_rounds must be >= 1");
    if (cfg.local_epochs < 0) throw Error(ErrorKind::ConfigInvalid, "local_epochs must be >= 0");
}

enum class Phase { Broadcasting, WaitingForUpdates, Aggregating, CheckingStop, Done };

constexpr std::string_view to_string(Phase p) {
    switch (p) {
        case Phase::Broadcasting: return "Broadcasting";
        case Phase::WaitingForUpdates: return "WaitingForUpdates";
        case Phase::Aggregating: return "Aggregating";
        case Phase::CheckingStop: return "CheckingStop";
        case Phase::Done: return "Done";
    }
    return "?";
}

enum class StopReason { None, Threshold, RoundCap };

/// Accuracy feedback gathered in one round. `mean` is set only when every
/// client reported an accuracy.
struct RoundRecord {
    std::uint32_t round = 0;
    std::map<std::string, double> accuracies;
    std::optional<double> mean;

    friend bool operator==(const RoundRecord&, const RoundRecord&) = default;
};

struct RoundState {
    std::uint32_t round_index = 0;
    Phase phase = Phase::Broadcasting;
    /// Expected clients with the training-set size each declared on joining.
    std::map<std::string, std::uint32_t> expected_clients;
    std::map<std::string, ClientUpdate> received;
    ParamSet global_weights;
    ParamSet aggregate;
    std::vector<RoundRecord> accuracy_history;
    StopReason stop_reason = StopReason::None;
    ParamSet final_weights;
};

struct BroadcastDone {};
struct UpdateArrived {
    ClientUpdate update;
};
/// Advances Aggregating -> CheckingStop -> (Broadcasting | Done).
struct Proceed {};

using ServerEvent = std::variant<BroadcastDone, UpdateArrived, Proceed>;

enum class OutgoingKind { Broadcast, StopNotice };

/// A message addressed to every expected client.
struct Outgoing {
    OutgoingKind kind = OutgoingKind::Broadcast;
    std::uint32_t round = 0;
    ParamSet weights;
};

struct StepResult {
    RoundState state;
    std::vector<Outgoing> messages;
};

/// Initial state (round 0, Broadcasting) and its broadcast of `initial`.
inline StepResult server_start(const std::map<std::string, std::uint32_t>& clients, const ParamSet& initial) {
    if (clients.empty()) throw Error(ErrorKind::ConfigInvalid, "federation needs at least one client");
    for (const auto& [id, n] : clients)
        if (n == 0) throw Error(ErrorKind::ProtocolViolation, "client '" + id + "' declared zero training samples");
    StepResult r;
    r.state.expected_clients = clients;
    r.state.global_weights = initial;
    r.messages.push_back({OutgoingKind::Broadcast, 0, initial});
    return r;
}

namespace detail {

[[noreturn]] inline void violation(const RoundState& s, const std::string& what) {
    throw Error(ErrorKind::ProtocolViolation,
                what + " (round " + std::to_string(s.round_index) + ", phase " + std::string(to_string(s.phase)) + ")");
}

inline void check_update(const RoundState& s, const ClientUpdate& u) {
    if (s.phase != Phase::WaitingForUpdates) violation(s, "update from '" + u.client_id + "' in wrong phase");
    const auto it = s.expected_clients.find(u.client_id);
    if (it == s.expected_clients.end()) violation(s, "update from unknown client '" + u.client_id + "'");
    if (u.round != s.round_index)
        violation(s, "update from '" + u.client_id + "' carries round " + std::to_string(u.round));
    if (s.received.count(u.client_id)) violation(s, "duplicate update from '" + u.client_id + "'");
    if (u.num_samples != it->second)
        violation(s, "client '" + u.client_id + "' declared " + std::to_string(it->second) + " samples but sent " +
                         std::to_string(u.num_samples));
    if (u.reported_accuracy && !(*u.reported_accuracy >= 0.0 && *u.reported_accuracy <= 1.0))
        violation(s, "accuracy from '" + u.client_id + "' outside [0, 1]");
    if (u.weights.schema_hash() != s.global_weights.schema_hash())
        throw Error(ErrorKind::SchemaMismatch, "update from '" + u.client_id + "' does not match the agreed schema");
}

}  // namespace detail

inline StepResult server_step(const RoundState& state, const ServerEvent& event, const FedConfig& cfg) {
    StepResult r{state, {}};
    RoundState& s = r.state;

    if (s.phase == Phase::Done) detail::violation(s, "event after federation finished");

    if (std::holds_alternative<BroadcastDone>(event)) {
        if (s.phase != Phase::Broadcasting) detail::violation(s, "broadcast completion in wrong phase");
        s.phase = Phase::WaitingForUpdates;
        return r;
    }

    if (const auto* arrived = std::get_if<UpdateArrived>(&event)) {
        detail::check_update(s, arrived->update);
        s.received.emplace(arrived->update.client_id, arrived->update);
        if (s.received.size() == s.expected_clients.size()) {
            std::vector<ClientUpdate> updates;
            for (const auto& [id, u] : s.received) updates.push_back(u);
            s.aggregate = fedavg(updates);
            s.phase = Phase::Aggregating;
        }
        return r;
    }

    // Proceed
    if (s.phase == Phase::Aggregating) {
        RoundRecord rec;
        rec.round = s.round_index;
        for (const auto& [id, u] : s.received)
            if (u.reported_accuracy) rec.accuracies[id] = *u.reported_accuracy;
        if (!rec.accuracies.empty() && rec.accuracies.size() == s.received.size()) {
            double sum = 0.0;
            for (const auto& [id, a] : rec.accuracies) sum += a;
            rec.mean = sum / static_cast<double>(rec.accuracies.size());
        }
        s.accuracy_history.push_back(std::move(rec));
        s.phase = Phase::CheckingStop;
        return r;
    }
    if (s.phase == Phase::CheckingStop) {
        const auto& last = s.accuracy_history.back();
        if (last.mean && *last.mean > cfg.stop_threshold) {
            // The reported accuracies describe the model broadcast this
            // round; it becomes the final model and this round's uploads are dropped.
            s.stop_reason = StopReason::Threshold;
            s.final_weights = s.global_weights;
        } else if (static_cast<int>(s.round_index) + 1 >= cfg.max_rounds) {
            s.stop_reason = StopReason::RoundCap;
            s.final_weights = s.aggregate;
        }
        if (s.stop_reason != StopReason::None) {
            s.phase = Phase::Done;
            r.messages.push_back({OutgoingKind::StopNotice, s.round_index, s.final_weights});
            return r;
        }
        s.round_index += 1;
        s.global_weights = s.aggregate;
        s.received.clear();
        s.phase = Phase::Broadcasting;
        r.messages.push_back({OutgoingKind::Broadcast, s.round_index, s.global_weights});
        return r;
    }
    detail::violation(s, "proceed in wrong phase");
}

}  // namespace fedod::fedcore
