#pragma once

#include <exception>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "fedod/error.hpp"
#include "fedod/fedcore/client.hpp"
#include "fedod/fedcore/protocol.hpp"
#include "fedod/fedcore/server.hpp"
#include "fedod/fedcore/transport.hpp"
#include "fedod/tinydet.hpp"

namespace fedod::fedcore {

struct FederationResult {
    ParamSet final_weights;
    std::vector<RoundRecord> accuracy_history;
    int rounds_used = 0;
    StopReason stop_reason = StopReason::None;
    /// Global weights broadcast at the start of each round.
    std::vector<ParamSet> round_globals;
    std::map<std::string, std::uint32_t> client_samples;
};

namespace detail {

inline std::string round_context(const RoundState& s) {
    return "round " + std::to_string(s.round_index) + ", phase " + std::string(to_string(s.phase));
}

}  // namespace detail

/// Server side of a federation over an already connected channel. Clients
/// named in cfg.clients must each join exactly once. A rejected message is
/// answered with Error and otherwise ignored; a lost connection aborts.
inline FederationResult serve(ServerChannel& ch, const FedConfig& cfg, const ParamSet& initial) {
    validate(cfg);
    const std::set<std::string> wanted(cfg.clients.begin(), cfg.clients.end());
    if (wanted.empty() || wanted.size() != cfg.clients.size())
        throw Error(ErrorKind::ConfigInvalid, "client list must be non-empty and free of duplicates");

    std::map<std::size_t, std::string> conn_client;
    std::map<std::string, std::size_t> client_conn;
    std::map<std::string, std::uint32_t> declared;
    while (declared.size() < wanted.size()) {
        Inbound in = ch.recv();
        if (!in.message) throw Error(ErrorKind::TransportFailure, "connection lost before joining: " + in.failure);
        try {
            const auto j = decode_join(*in.message);
            if (!wanted.count(j.client_id))
                throw Error(ErrorKind::ProtocolViolation, "unknown client '" + j.client_id + "'");
            if (declared.count(j.client_id) || conn_client.count(in.conn))
                throw Error(ErrorKind::ProtocolViolation, "duplicate join from '" + j.client_id + "'");
            if (j.num_samples == 0)
                throw Error(ErrorKind::ProtocolViolation, "client '" + j.client_id + "' declared zero samples");
            declared[j.client_id] = j.num_samples;
            conn_client[in.conn] = j.client_id;
            client_conn[j.client_id] = in.conn;
        } catch (const Error& e) {
            ch.send(in.conn, encode_error(0, {e.kind(), e.what()}));
            throw;
        }
    }

    FederationResult result;
    result.client_samples = declared;

    auto dispatch = [&](const std::vector<Outgoing>& out) {
        for (const auto& o : out) {
            const auto type = o.kind == OutgoingKind::Broadcast ? MessageType::Broadcast : MessageType::StopNotice;
            if (type == MessageType::Broadcast) result.round_globals.push_back(o.weights);
            const Message m = encode_weights(type, o.round, o.weights);
            for (const auto& [id, conn] : client_conn) ch.send(conn, m);
        }
    };

    StepResult step = server_start(declared, initial);
    RoundState state = std::move(step.state);
    dispatch(step.messages);
    state = server_step(state, BroadcastDone{}, cfg).state;

    while (state.phase != Phase::Done) {
        Inbound in = ch.recv();
        const auto who = conn_client.count(in.conn) ? conn_client[in.conn] : "connection " + std::to_string(in.conn);
        if (!in.message)
            throw Error(ErrorKind::TransportFailure,
                        "lost '" + who + "' during " + detail::round_context(state) + ": " + in.failure);
        try {
            if (in.message->type != MessageType::Update)
                throw Error(ErrorKind::ProtocolViolation,
                            "unexpected " + std::string(to_string(in.message->type)) + " from '" + who + "'");
            ClientUpdate u = decode_update(*in.message);
            if (u.client_id != who)
                throw Error(ErrorKind::ProtocolViolation, "'" + who + "' sent an update as '" + u.client_id + "'");
            state = server_step(state, UpdateArrived{std::move(u)}, cfg).state;
        } catch (const Error& e) {
            ch.send(in.conn, encode_error(in.message->round, {e.kind(), e.what()}));
            continue;
        }
        if (state.phase == Phase::Aggregating) {
            state = server_step(state, Proceed{}, cfg).state;
            step = server_step(state, Proceed{}, cfg);
            state = std::move(step.state);
            dispatch(step.messages);
            if (state.phase == Phase::Broadcasting) state = server_step(state, BroadcastDone{}, cfg).state;
        }
    }

    result.final_weights = state.final_weights;
    result.accuracy_history = state.accuracy_history;
    result.rounds_used = static_cast<int>(state.accuracy_history.size());
    result.stop_reason = state.stop_reason;
    return result;
}

struct ClientDataset {
    std::string id;
    std::vector<Sample> train;
    std::vector<Sample> test;
};

struct FederationOptions {
    /// TCP bind address; empty falls back to FEDOD_BIND, then 127.0.0.1:0.
    std::optional<std::string> bind;
    /// Overrides the accuracy function of every client (scripted tests).
    AccuracyFn accuracy;
};

/// Builds the per-client contexts used by run_federation and by
/// standalone client processes.
inline ClientContext make_client_context(const FedConfig& cfg, const tinydet::DetectorConfig& det,
                                         const ClientDataset& data) {
    ClientContext ctx;
    ctx.id = data.id;
    ctx.train = data.train;
    ctx.test = data.test;
    ctx.detector = det;
    ctx.detector.local_epochs = cfg.local_epochs;
    ctx.seed = client_seed(cfg.seed, data.id);
    return ctx;
}

inline ParamSet initial_weights(const FedConfig& cfg, const tinydet::DetectorConfig& det) {
    Rng rng(cfg.seed);
    return tinydet::init_params(det, rng);
}

/// Runs server and clients (one thread each) over the configured transport.
inline FederationResult run_federation(FedConfig cfg, const std::vector<ClientDataset>& clients,
                                       const tinydet::DetectorConfig& det, const FederationOptions& opts = {}) {
    tinydet::validate(det);
    if (clients.empty()) throw Error(ErrorKind::ConfigInvalid, "federation needs at least one client");
    std::vector<ClientContext> contexts;
    for (const auto& c : clients) {
        if (c.train.empty() || c.test.empty())
            throw Error(ErrorKind::EmptyDataset, "client '" + c.id + "' needs non-empty train and test splits");
        contexts.push_back(make_client_context(cfg, det, c));
        if (opts.accuracy) contexts.back().accuracy = opts.accuracy;
    }
    if (cfg.clients.empty())
        for (const auto& c : clients) cfg.clients.push_back(c.id);
    if (std::set<std::string>(cfg.clients.begin(), cfg.clients.end()) !=
        [&] {
            std::set<std::string> ids;
            for (const auto& c : clients) ids.insert(c.id);
            return ids;
        }())
        throw Error(ErrorKind::ConfigInvalid, "client list does not match the client datasets");
    validate(cfg);

    const ParamSet initial = initial_weights(cfg, det);

    std::unique_ptr<ServerChannel> server;
    std::vector<std::unique_ptr<ClientChannel>> channels;
    std::unique_ptr<TcpServerChannel> tcp;
    if (cfg.transport == Transport::InProcess) {
        auto hub = std::make_unique<InProcessHub>();
        for (std::size_t i = 0; i < contexts.size(); ++i) channels.push_back(hub->connect());
        server = std::move(hub);
    } else {
        tcp = std::make_unique<TcpServerChannel>(resolve_bind(opts.bind));
    }

    const std::optional<Endpoint> tcp_endpoint =
        tcp ? std::optional<Endpoint>(tcp->local_endpoint()) : std::nullopt;
    std::vector<std::exception_ptr> client_errors(contexts.size());
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < contexts.size(); ++i) {
        threads.emplace_back([&, i] {
            try {
                std::unique_ptr<ClientChannel> own;
                ClientChannel* ch = nullptr;
                if (tcp_endpoint) {
                    own = std::make_unique<TcpClientChannel>(*tcp_endpoint);
                    ch = own.get();
                } else {
                    ch = channels[i].get();
                }
                run_client(*ch, contexts[i]);
                ch->close();
            } catch (...) {
                client_errors[i] = std::current_exception();
                if (!tcp_endpoint) channels[i]->close();
            }
        });
    }

    FederationResult result;
    std::exception_ptr server_error;
    try {
        if (tcp) {
            tcp->accept(contexts.size());
            server = std::move(tcp);
        }
        result = serve(*server, cfg, initial);
    } catch (...) {
        server_error = std::current_exception();
    }
    if (tcp) tcp->close();
    if (server) server->close();
    for (auto& t : threads) t.join();

    // A lost connection on one side is usually the echo of a real failure
    // on the other; report the real one.
    auto is_transport = [](const std::exception_ptr& e) {
        try {
            std::rethrow_exception(e);
        } catch (const Error& err) {
            return err.kind() == ErrorKind::TransportFailure;
        } catch (...) {
            return false;
        }
    };
    if (server_error && !is_transport(server_error)) std::rethrow_exception(server_error);
    for (auto& e : client_errors)
        if (e && !is_transport(e)) std::rethrow_exception(e);
    if (server_error) std::rethrow_exception(server_error);
    for (auto& e : client_errors)
        if (e) std::rethrow_exception(e);
    return result;
}

}  // namespace fedod::fedcore
