// fedctl: dataset generation, baseline and federated training, evaluation,
// reports and model cards for the FedOD desk-scale experiments.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fedod/fedctl.hpp"

namespace fc = fedod::fedctl;

namespace {

struct CommonFlags {
    std::optional<std::string> config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> transport;
    std::optional<std::string> bind;
    std::optional<std::string> out;

    void attach(CLI::App* app) {
        app->add_option("--config", config, "Experiment config (JSON)");
        app->add_option("--seed", seed, "Override the experiment seed");
        app->add_option("--transport", transport, "Federation transport")->check(CLI::IsMember({"inprocess", "tcp"}));
        app->add_option("--bind", bind, "TCP bind address host[:port] (else FEDOD_BIND)");
        app->add_option("--out", out, "Experiment directory");
    }

    fc::ExperimentConfig load() const {
        fc::Overrides ov;
        ov.seed = seed;
        ov.transport = transport;
        ov.bind = bind;
        if (out) ov.out = *out;
        std::optional<std::filesystem::path> path;
        if (config) path = *config;
        return fc::load_config(path, ov);
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FedOD federated object detection experiments"};
    app.require_subcommand(1);

    CommonFlags flags;
    std::vector<std::string> clients, models, datasets;
    bool processes = false;
    std::string data_dir, client_id, connect;

    auto* gen = app.add_subcommand("gen", "Generate client, cross-test and domain-shift datasets");
    auto* train = app.add_subcommand("train-local", "Train local baseline models");
    train->add_option("--client", clients, "Client id (repeatable; default all)");
    auto* fed = app.add_subcommand("fed", "Run the federation");
    fed->add_flag("--processes", processes, "Run each client as a separate process (tcp only)");
    auto* eval = app.add_subcommand("eval", "Evaluate checkpoints on datasets");
    eval->add_option("--model", models, "client id, fed, oracle or .fdw path (repeatable)");
    eval->add_option("--dataset", datasets, "dataset name or directory (repeatable)");
    auto* report = app.add_subcommand("report", "Markdown comparison of local and federated models");
    auto* card = app.add_subcommand("modelcard", "Export the model card of the federated model");
    auto* client = app.add_subcommand("fed-client", "One federation client process (used by fed --processes)");
    client->add_option("--data", data_dir, "Dataset run directory")->required();
    client->add_option("--client", client_id, "Client id")->required();
    client->add_option("--connect", connect, "Server host:port")->required();
    for (auto* sub : {gen, train, fed, eval, report, card, client}) flags.attach(sub);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return fc::kExitConfig;
    }

    try {
        const auto cfg = flags.load();
        if (*gen) {
            const auto run = fc::cmd_gen(cfg);
            std::cerr << "wrote " << run.string() << "\n";
        } else if (*train) {
            fc::cmd_train_local(cfg, clients);
        } else if (*fed) {
            const auto run = fc::cmd_fed(cfg, processes);
            std::cerr << "wrote " << run.string() << "\n";
        } else if (*eval) {
            const auto outcome = fc::cmd_eval(cfg, models, datasets);
            std::cout << outcome.table;
            std::cerr << "wrote " << outcome.run.string() << "\n";
        } else if (*report) {
            std::cout << fc::cmd_report(cfg);
        } else if (*card) {
            std::cout << fc::cmd_modelcard(cfg).dump(2) << "\n";
        } else if (*client) {
            fc::cmd_fed_client(cfg, data_dir, client_id, connect);
        }
    } catch (const fc::CommandError& e) {
        std::cerr << "fedctl: " << e.what() << "\n";
        return e.code();
    } catch (const fedod::Error& e) {
        std::cerr << "fedctl: " << to_string(e.kind()) << ": " << e.what() << "\n";
        return fc::exit_code_for(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "fedctl: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
