#pragma once

// The fedctl subcommands. Each returns normally or throws CommandError
// carrying the process exit code:
//
//   2  invalid configuration or arguments
//   3  missing or corrupt dataset / checkpoint file
//   4  federation protocol or transport failure
//   5  checkpoint does not match the configured architecture
//   6  report inputs missing
//   7  experiment incomplete (no finished federated run)

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedod/detmetrics.hpp"
#include "fedod/error.hpp"
#include "fedod/evaluate.hpp"
#include "fedod/fedcore.hpp"
#include "fedod/fedctl/config.hpp"
#include "fedod/fedctl/layout.hpp"
#include "fedod/fedctl/report.hpp"
#include "fedod/params.hpp"
#include "fedod/synthdata.hpp"
#include "fedod/tinydet.hpp"

extern char** environ;

namespace fedod::fedctl {

enum ExitCode : int {
    kExitOk = 0,
    kExitConfig = 2,
    kExitDataset = 3,
    kExitProtocol = 4,
    kExitSchema = 5,
    kExitReportInput = 6,
    kExitIncomplete = 7,
};

class CommandError : public std::runtime_error {
public:
    CommandError(int code, const std::string& what) : std::runtime_error(what), code_(code) {}
    int code() const { return code_; }

private:
    int code_;
};

/// Default exit code for a library error that escaped a command.
inline int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::ConfigInvalid:
        case ErrorKind::SpecInvalid: return kExitConfig;
        case ErrorKind::ProtocolViolation:
        case ErrorKind::TransportFailure:
        case ErrorKind::EmptyUpdateSet: return kExitProtocol;
        case ErrorKind::SchemaMismatch: return kExitSchema;
        default: return kExitDataset;
    }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

inline fs::path require_data_run(const ExperimentConfig& cfg) {
    const Layout lay{cfg.output_dir};
    auto run = latest_run(lay.data());
    if (!run) throw CommandError(kExitDataset, "no dataset under " + lay.data().string() + "; run 'fedctl gen' first");
    return *run;
}

inline std::vector<Sample> load_set(const fs::path& dir) {
    try {
        return synthdata::read_yolo(dir);
    } catch (const Error& e) {
        throw CommandError(kExitDataset, "cannot read dataset " + dir.string() + ": " + e.what());
    }
}

/// Writes all partitions; returns the data run directory.
inline fs::path cmd_gen(const ExperimentConfig& cfg) {
    const auto parts = synthdata::build_partitions(cfg.partition);
    const fs::path run = create_run_dir(Layout{cfg.output_dir}.data());

    nlohmann::json counts = nlohmann::json::object();
    auto write = [&](const std::string& name, const std::vector<Sample>& samples) {
        synthdata::write_yolo(run / name, samples, {{"set", name}, {"seed", cfg.seed}});
        counts[name] = samples.size();
    };
    for (std::size_t k = 0; k < parts.clients.size(); ++k) {
        const auto& c = parts.clients[k];
        write(c.id + "/train", c.train);
        write(c.id + "/val", c.val);
        write(c.id + "/test", c.test);
        write("swap_" + c.id, synthdata::swap_subset(parts.cross_test, cfg.partition.clients[k]));
    }
    write("cross_test", parts.cross_test);
    write("domain_shift", parts.domain_shift);

    nlohmann::json combos = nlohmann::json::array();
    for (const auto& c : parts.cross_combinations)
        combos.push_back({to_string(c.body_color), to_string(c.windshield)});
    write_json(run / "manifest.json", {{"config", to_json(cfg)},
                                       {"seed", cfg.seed},
                                       {"classes", cfg.preset.class_names},
                                       {"counts", counts},
                                       {"cross_combinations", combos},
                                       {"cross_test_empty", parts.cross_test_empty}});
    return run;
}

// ---------------------------------------------------------------------------
// Local baselines
// ---------------------------------------------------------------------------

inline tinydet::DetectorConfig detector_with_epochs(const ExperimentConfig& cfg, int epochs) {
    auto d = cfg.detector;
    d.local_epochs = epochs;
    return d;
}

/// Trains one baseline per requested client; returns their run directories.
inline std::vector<fs::path> cmd_train_local(const ExperimentConfig& cfg, std::vector<std::string> clients = {}) {
    if (clients.empty()) clients = cfg.client_ids();
    for (const auto& id : clients) {
        try {
            cfg.client(id);
        } catch (const Error& e) {
            throw CommandError(kExitConfig, e.what());
        }
    }
    const fs::path data = require_data_run(cfg);
    const auto det = detector_with_epochs(cfg, cfg.baseline_epochs);
    const ParamSet init = fedcore::initial_weights(cfg.federation, cfg.detector);

    std::vector<fs::path> runs;
    for (const auto& id : clients) {
        const auto train = load_set(data / id / "train");
        if (train.empty()) throw CommandError(kExitDataset, "client '" + id + "' has an empty training split");
        Rng rng(derive_seed(cfg.seed, fedcore::stable_hash("baseline/" + id)));
        const auto result = tinydet::train_local(init, train, det, rng);

        const fs::path run = create_run_dir(Layout{cfg.output_dir}.local(id));
        save_checkpoint(run / "model.fdw", result.params);
        std::string stats;
        for (std::size_t e = 0; e < result.stats.epoch_mean_loss.size(); ++e)
            stats += nlohmann::json{{"epoch", e}, {"mean_loss", result.stats.epoch_mean_loss[e]}}.dump() + "\n";
        write_text(run / "stats.jsonl", stats);
        write_json(run / "config.json", to_json(cfg));
        std::cerr << "trained " << id << " for " << cfg.baseline_epochs << " epochs -> " << run.string() << "\n";
        runs.push_back(run);
    }
    return runs;
}

// ---------------------------------------------------------------------------
// Federation
// ---------------------------------------------------------------------------

inline std::string_view to_string(fedcore::StopReason r) {
    switch (r) {
        case fedcore::StopReason::Threshold: return "threshold";
        case fedcore::StopReason::RoundCap: return "round_cap";
        case fedcore::StopReason::None: return "none";
    }
    return "none";
}

inline nlohmann::json history_json(const ExperimentConfig& cfg, const fedcore::FederationResult& r) {
    nlohmann::json rounds = nlohmann::json::array();
    for (const auto& rec : r.accuracy_history) {
        rounds.push_back({{"round", rec.round},
                          {"accuracies", rec.accuracies},
                          {"mean", rec.mean ? nlohmann::json(*rec.mean) : nlohmann::json(nullptr)}});
    }
    return {{"rounds_used", r.rounds_used},
            {"stop_reason", to_string(r.stop_reason)},
            {"stop_threshold", cfg.federation.stop_threshold},
            {"max_rounds", cfg.federation.max_rounds},
            {"local_epochs", cfg.federation.local_epochs},
            {"clients", r.client_samples},
            {"history", std::move(rounds)}};
}

inline std::vector<fedcore::ClientDataset> load_client_datasets(const ExperimentConfig& cfg, const fs::path& data) {
    std::vector<fedcore::ClientDataset> out;
    for (const auto& id : cfg.client_ids()) {
        fedcore::ClientDataset d{id, load_set(data / id / "train"), load_set(data / id / "test")};
        if (d.train.empty() || d.test.empty())
            throw CommandError(kExitDataset, "client '" + id + "' needs non-empty train and test splits");
        out.push_back(std::move(d));
    }
    return out;
}

namespace detail {

inline fs::path self_executable() {
    std::error_code ec;
    auto p = fs::read_symlink("/proc/self/exe", ec);
    if (ec) throw CommandError(kExitProtocol, "cannot locate own executable for client processes");
    return p;
}

inline pid_t spawn(const std::vector<std::string>& args) {
    std::vector<char*> argv;
    for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);
    pid_t pid = 0;
    if (posix_spawn(&pid, argv[0], nullptr, nullptr, argv.data(), environ) != 0)
        throw CommandError(kExitProtocol, "cannot spawn client process");
    return pid;
}

inline fedcore::FederationResult serve_with_processes(const ExperimentConfig& cfg, const fs::path& config_file,
                                                      const fs::path& data) {
    fedcore::TcpServerChannel server(fedcore::resolve_bind(cfg.bind));
    auto connect = server.local_endpoint();
    if (connect.host == "0.0.0.0") connect.host = "127.0.0.1";
    std::cerr << "server listening on " << server.local_endpoint().str() << "\n";

    const auto exe = self_executable().string();
    std::vector<pid_t> children;
    for (const auto& id : cfg.client_ids())
        children.push_back(spawn({exe, "fed-client", "--config", config_file.string(), "--data", data.string(),
                                  "--client", id, "--connect", connect.str()}));

    std::optional<fedcore::FederationResult> result;
    std::string failure;
    try {
        server.accept(children.size());
        result = fedcore::serve(server, cfg.federation, fedcore::initial_weights(cfg.federation, cfg.detector));
    } catch (const std::exception& e) {
        failure = e.what();
    }
    server.close();
    for (auto pid : children) {
        int status = 0;
        waitpid(pid, &status, 0);
        if (failure.empty() && !(WIFEXITED(status) && WEXITSTATUS(status) == 0))
            failure = "client process " + std::to_string(pid) + " failed";
    }
    if (!failure.empty()) throw CommandError(kExitProtocol, "federation failed: " + failure);
    return *result;
}

}  // namespace detail

/// Runs the federation and persists every round's global model.
inline fs::path cmd_fed(const ExperimentConfig& cfg, bool client_processes = false) {
    const fs::path data = require_data_run(cfg);
    const auto clients = load_client_datasets(cfg, data);

    const fs::path run = create_run_dir(Layout{cfg.output_dir}.fed());
    write_json(run / "config.json", to_json(cfg));
    std::cerr << "federating " << clients.size() << " clients over " << to_string(cfg.federation.transport)
              << (client_processes ? " (client processes)" : "") << " -> " << run.string() << "\n";

    fedcore::FederationResult result;
    try {
        if (client_processes) {
            if (cfg.federation.transport != fedcore::Transport::Tcp)
                throw CommandError(kExitConfig, "client processes need --transport tcp");
            result = detail::serve_with_processes(cfg, run / "config.json", data);
        } else {
            result = fedcore::run_federation(cfg.federation, clients, cfg.detector, {cfg.bind, {}});
        }
    } catch (const Error& e) {
        const int code = e.kind() == ErrorKind::EmptyDataset ? kExitDataset : kExitProtocol;
        throw CommandError(code, std::string("federation failed: ") + e.what());
    }

    for (std::size_t r = 0; r < result.round_globals.size(); ++r)
        save_checkpoint(run / round_checkpoint_name(r), result.round_globals[r]);
    save_checkpoint(run / "final.fdw", result.final_weights);
    write_json(run / "history.json", history_json(cfg, result));
    std::cerr << "stopped after " << result.rounds_used << " rounds (" << to_string(result.stop_reason) << ")\n";
    return run;
}

/// One federation client in its own process, talking TCP to `server`.
inline void cmd_fed_client(const ExperimentConfig& cfg, const fs::path& data, const std::string& client,
                           const std::string& server) {
    try {
        cfg.client(client);
    } catch (const Error& e) {
        throw CommandError(kExitConfig, e.what());
    }
    fedcore::ClientDataset d{client, load_set(data / client / "train"), load_set(data / client / "test")};
    const auto ctx = fedcore::make_client_context(cfg.federation, cfg.detector, d);
    try {
        fedcore::TcpClientChannel ch(fedcore::parse_endpoint(server));
        fedcore::run_client(ch, ctx);
        ch.close();
    } catch (const Error& e) {
        throw CommandError(kExitProtocol, "client '" + client + "': " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// The model name that stands for "score the labels against themselves".
inline constexpr std::string_view kOracleModel = "oracle";

struct ResolvedModel {
    std::string name;
    std::optional<fs::path> checkpoint;
};

inline ResolvedModel resolve_model(const ExperimentConfig& cfg, const std::string& spec) {
    const Layout lay{cfg.output_dir};
    if (spec == kOracleModel) return {spec, std::nullopt};
    if (spec == "fed") {
        auto run = latest_run(lay.fed());
        if (!run || !fs::exists(*run / "final.fdw"))
            throw CommandError(kExitDataset, "no federated checkpoint under " + lay.fed().string());
        return {spec, *run / "final.fdw"};
    }
    for (const auto& id : cfg.client_ids()) {
        if (spec != id) continue;
        auto run = latest_run(lay.local(id));
        if (!run || !fs::exists(*run / "model.fdw"))
            throw CommandError(kExitDataset, "no local checkpoint under " + lay.local(id).string());
        return {spec, *run / "model.fdw"};
    }
    if (fs::is_regular_file(spec)) return {fs::path(spec).stem().string(), fs::path(spec)};
    throw CommandError(kExitConfig, "unknown model '" + spec + "' (client id, fed, oracle or a .fdw path)");
}

inline std::string display_model(const ExperimentConfig& cfg, const std::string& model) {
    if (model == "fed") return "Global federated model";
    for (const auto& c : cfg.preset.clients)
        if (c.id == model) return c.display_name;
    return model;
}

inline std::string eval_file_stem(const std::string& model, const std::string& dataset) {
    std::string d = dataset;
    for (auto& ch : d)
        if (ch == '/') ch = '-';
    return model + "__" + d;
}

inline std::vector<std::string> default_eval_datasets(const ExperimentConfig& cfg) {
    std::vector<std::string> out = {"cross_test", "domain_shift"};
    for (const auto& id : cfg.client_ids()) out.push_back("swap_" + id);
    for (const auto& id : cfg.client_ids()) out.push_back(id + "/test");
    return out;
}

inline detmetrics::EvalReport evaluate_oracle(std::span<const Sample> samples, int num_classes) {
    std::vector<std::vector<Detection>> dets;
    std::vector<std::vector<BBox>> truths;
    for (const auto& s : samples) {
        std::vector<Detection> d;
        for (const auto& b : s.boxes) d.push_back({b, b.class_id, 1.0});
        dets.push_back(std::move(d));
        truths.push_back(s.boxes);
    }
    return detmetrics::evaluate(dets, truths, num_classes);
}

struct EvalOutcome {
    fs::path run;
    std::string table;
};

/// Scores each model on each dataset. Empty lists mean "every client
/// baseline plus the federated model" and "the standard sets".
inline EvalOutcome cmd_eval(const ExperimentConfig& cfg, std::vector<std::string> models = {},
                            std::vector<std::string> datasets = {}) {
    if (models.empty()) {
        models = cfg.client_ids();
        models.push_back("fed");
    }
    if (datasets.empty()) datasets = default_eval_datasets(cfg);

    std::vector<ResolvedModel> resolved;
    for (const auto& m : models) resolved.push_back(resolve_model(cfg, m));

    const fs::path data = require_data_run(cfg);
    std::map<std::string, std::vector<Sample>> sets;
    for (const auto& d : datasets) {
        const fs::path dir = fs::is_directory(data / d) ? data / d : fs::path(d);
        if (!fs::is_directory(dir)) throw CommandError(kExitDataset, "no dataset '" + d + "' in " + data.string());
        sets[d] = load_set(dir);
    }

    std::map<std::string, ParamSet> weights;
    for (const auto& m : resolved) {
        if (!m.checkpoint) continue;
        try {
            auto p = load_checkpoint(*m.checkpoint);
            tinydet::require_schema(p, cfg.detector);
            weights[m.name] = std::move(p);
        } catch (const Error& e) {
            const int code = e.kind() == ErrorKind::IoFailure ? kExitDataset : kExitSchema;
            throw CommandError(code, m.checkpoint->string() + ": " + e.what());
        }
    }

    const fs::path run = create_run_dir(Layout{cfg.output_dir}.eval());
    std::vector<std::vector<std::string>> rows;
    for (const auto& m : resolved) {
        for (const auto& d : datasets) {
            const auto& samples = sets[d];
            if (samples.empty()) {
                std::cerr << "skipping empty dataset " << d << "\n";
                continue;
            }
            const auto rep = m.checkpoint ? evaluate_model(weights[m.name], samples, cfg.detector)
                                          : evaluate_oracle(samples, cfg.detector.num_classes);
            nlohmann::json j = {{"model", m.name},
                                {"dataset", d},
                                {"checkpoint", m.checkpoint ? fs::relative(*m.checkpoint, cfg.output_dir).generic_string()
                                                            : std::string("oracle")},
                                {"report", detmetrics::to_json(rep)}};
            write_json(run / (eval_file_stem(m.name, d) + ".json"), j);
            rows.push_back(detmetrics::table_cells(display_model(cfg, m.name), d, rep.aggregate));
        }
    }
    const auto table = detmetrics::render_table(detmetrics::table_columns(), rows);
    write_text(run / "table.txt", table);
    return {run, table};
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

inline detmetrics::Metrics read_eval_metrics(const fs::path& file) {
    if (!fs::exists(file)) throw CommandError(kExitReportInput, "missing evaluation " + file.string());
    try {
        return detmetrics::metrics_from_json(read_json(file).at("report").at("aggregate"));
    } catch (const std::exception& e) {
        throw CommandError(kExitReportInput, "unreadable evaluation " + file.string() + ": " + e.what());
    }
}

/// Markdown comparison of the local baselines and the federated model.
inline std::string cmd_report(const ExperimentConfig& cfg) {
    const Layout lay{cfg.output_dir};
    const auto eval = latest_run(lay.eval());
    if (!eval) throw CommandError(kExitReportInput, "missing evaluation directory " + lay.eval().string());

    auto row = [&](const std::string& model, const std::string& dataset) {
        const auto m = read_eval_metrics(*eval / (eval_file_stem(model, dataset) + ".json"));
        auto cells = detmetrics::table_cells(display_model(cfg, model), dataset, m);
        cells.push_back(paper_reference(cfg.preset.name, model, dataset));
        return cells;
    };

    std::vector<std::vector<std::string>> cross, swapped;
    for (const auto& id : cfg.client_ids()) cross.push_back(row(id, "cross_test"));
    cross.push_back(row("fed", "cross_test"));
    for (const auto& id : cfg.client_ids()) {
        swapped.push_back(row(id, "swap_" + id));
        swapped.push_back(row("fed", "swap_" + id));
    }

    std::ostringstream md;
    md << "# FedOD report: " << cfg.preset.name << ", seed " << cfg.seed << "\n\n";
    md << "## All models on the unseen-combination test set\n\n" << markdown_table(cross) << "\n";
    md << "## Each local model and the global model on its swapped combinations\n\n"
       << markdown_table(swapped) << "\n";
    md << "Notes:\n\n";
    md << "- Local baselines trained for " << cfg.baseline_epochs << " epochs; federated clients ran "
       << cfg.federation.max_rounds << " rounds x " << cfg.federation.local_epochs << " local epochs ("
       << cfg.federation.max_rounds * cfg.federation.local_epochs << " at most).\n";
    if (auto fed = latest_run(lay.fed()); fed && fs::exists(*fed / "history.json")) {
        const auto h = read_json(*fed / "history.json");
        md << "- Federation stopped after " << h.value("rounds_used", 0) << " rounds ("
           << h.value("stop_reason", std::string("unknown")) << ").\n";
    }
    md << "- \"Paper reported\" quotes mAP / AP@[.50:.05:.95] measured on photographic data; the synthetic "
          "desk-scale numbers are not expected to match them.\n";
    md << "- \"__\" marks a size bucket with no ground truth in the test set.\n";

    const fs::path run = create_run_dir(lay.report());
    write_text(run / "report.md", md.str());
    return md.str();
}

// ---------------------------------------------------------------------------
// Model card
// ---------------------------------------------------------------------------

inline constexpr std::string_view kModelCardSchema = "fedod-card/1";

inline nlohmann::json build_modelcard(const ExperimentConfig& cfg) {
    const Layout lay{cfg.output_dir};
    const auto fed = latest_run(lay.fed());
    if (!fed) throw CommandError(kExitIncomplete, "no federated run under " + lay.fed().string());
    for (const char* f : {"final.fdw", "history.json"})
        if (!fs::exists(*fed / f)) throw CommandError(kExitIncomplete, "incomplete federated run: missing " + (*fed / f).string());

    ParamSet final_weights;
    nlohmann::json history;
    try {
        final_weights = load_checkpoint(*fed / "final.fdw");
        history = read_json(*fed / "history.json");
    } catch (const Error& e) {
        throw CommandError(kExitIncomplete, std::string("unreadable federated run: ") + e.what());
    }

    const auto& d = cfg.detector;
    char hash[24];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(final_weights.schema_hash()));

    nlohmann::json clients = nlohmann::json::array();
    for (const auto& [id, n] : history.at("clients").items()) clients.push_back({{"id", id}, {"num_samples", n}});

    nlohmann::json accuracy = nlohmann::json::array();
    for (const auto& r : history.at("history")) accuracy.push_back({{"round", r.at("round")}, {"mean", r.at("mean")}});

    nlohmann::json evaluations = nlohmann::json::array();
    if (auto eval = latest_run(lay.eval())) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(*eval))
            if (e.path().extension() == ".json" && e.path().filename().string().rfind("fed__", 0) == 0)
                files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            const auto j = read_json(f);
            const auto m = detmetrics::metrics_from_json(j.at("report").at("aggregate"));
            evaluations.push_back({{"dataset", j.at("dataset")},
                                   {"report", fs::relative(f, cfg.output_dir).generic_string()},
                                   {"map50", m.map50},
                                   {"ap_5095", m.ap_5095}});
        }
    }

    return {
        {"schema_version", kModelCardSchema},
        {"name", "fedod-" + cfg.preset.name},
        {"version", "1.0.0"},
        {"task", cfg.preset.task},
        {"classes", cfg.preset.class_names},
        {"architecture",
         {{"family", "single-shot grid detector"},
          {"input_size", d.image_size},
          {"grid", d.grid_s},
          {"conv_channels", {d.conv1_channels, d.conv2_channels}},
          {"head_kernel", d.head_kernel},
          {"parameters", final_weights.total_size()},
          {"schema_hash", hash}}},
        {"training",
         {{"algorithm", "FedAvg"},
          {"rounds_used", history.at("rounds_used")},
          {"max_rounds", history.at("max_rounds")},
          {"local_epochs", history.at("local_epochs")},
          {"stop_threshold", history.at("stop_threshold")},
          {"stop_reason", history.at("stop_reason")},
          {"client_count", clients.size()},
          {"clients", clients},
          {"seed", cfg.seed},
          {"accuracy_history", accuracy}}},
        {"evaluations", evaluations},
        {"intended_use",
         "Demonstrating federated training of a visual inspection detector across organizations that "
         "cannot share images."},
        {"limitations",
         {"Trained on synthetic desk-scale scenes; not validated on photographs.",
          "Accuracy used for stopping is mAP@0.5 on each client's own test split.",
          "Objects outside the trained body colors and windshield styles are out of scope."}},
    };
}

inline nlohmann::json cmd_modelcard(const ExperimentConfig& cfg) {
    auto card = build_modelcard(cfg);
    const fs::path run = create_run_dir(Layout{cfg.output_dir}.modelcard());
    write_json(run / "modelcard.json", card);
    return card;
}

}  // namespace fedod::fedctl
