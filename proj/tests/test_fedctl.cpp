#include <gtest/gtest.h>

#include <fstream>

#include "fedod/fedctl.hpp"

using namespace fedod;
using namespace fedod::fedctl;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
    return out;
}

class FedctlTest : public ::testing::Test {
protected:
    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        root_ = fs::temp_directory_path() / (std::string("fedod_fedctl_") + info->name());
        fs::remove_all(root_);
    }
    void TearDown() override { fs::remove_all(root_); }

    ExperimentConfig tiny(nlohmann::json extra = nlohmann::json::object()) const {
        nlohmann::json j = {{"seed", 4},
                            {"output_dir", root_.string()},
                            {"baseline_epochs", 1},
                            {"data", {{"samples_per_client", 20}, {"cross_test_samples", 8}, {"domain_shift_samples", 4}}},
                            {"detector", {{"conv1_channels", 2}, {"conv2_channels", 4}}},
                            {"federation", {{"max_rounds", 2}, {"local_epochs", 1}}}};
        j.merge_patch(extra);
        return config_from_json(j);
    }

    static int exit_code_of(const std::function<void()>& f) {
        try {
            f();
        } catch (const CommandError& e) {
            return e.code();
        } catch (const Error& e) {
            return exit_code_for(e.kind());
        }
        return 0;
    }

    fs::path root_;
};

std::string config_error(const std::string& text) {
    try {
        config_from_text(text);
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::ConfigInvalid);
        EXPECT_EQ(exit_code_for(e.kind()), kExitConfig);
        return e.what();
    }
    ADD_FAILURE() << "accepted: " << text;
    return "";
}

}  // namespace

TEST(Config, DefaultsMatchPreset) {
    const auto cfg = config_from_json(nlohmann::json::object());
    EXPECT_EQ(cfg.preset.name, "cabin2");
    EXPECT_EQ(cfg.output_dir, "runs/cabin2");
    EXPECT_EQ(cfg.samples_per_client, 200);
    EXPECT_EQ(cfg.baseline_epochs, 150);
    EXPECT_EQ(cfg.federation.max_rounds, 10);
    EXPECT_EQ(cfg.federation.local_epochs, 15);
    EXPECT_DOUBLE_EQ(cfg.federation.stop_threshold, 0.96);
    EXPECT_EQ(cfg.federation.clients, (std::vector<std::string>{"client1", "client2"}));
    EXPECT_EQ(cfg.detector.num_classes, 2);
    EXPECT_EQ(cfg.partition.clients[0].samples, 200);

    const auto usb = config_from_json({{"preset", "usb3"}});
    EXPECT_EQ(usb.client_ids().size(), 3u);
    EXPECT_EQ(usb.preset.class_names, (std::vector<std::string>{"Okay", "Not_Okay"}));
}

TEST(Config, ErrorsNameFieldOrLine) {
    EXPECT_NE(config_error(R"({"detector": {"learning_rat": 0.1}})").find("detector.learning_rat: unknown field"),
              std::string::npos);
    EXPECT_NE(config_error(R"({"seed": "one"})").find("seed: expected an integer"), std::string::npos);
    EXPECT_NE(config_error(R"({"federation": {"transport": "udp"}})").find("federation.transport"), std::string::npos);
    EXPECT_NE(config_error(R"({"federation": {"max_rounds": 0}})").find("federation"), std::string::npos);
    EXPECT_NE(config_error(R"({"preset": "cabin9"})").find("cabin9"), std::string::npos);
    EXPECT_NE(config_error(R"({"schema_version": "fedod-config/2"})").find("schema_version"), std::string::npos);
    EXPECT_NE(config_error("{\n  \"seed\": 1,\n  \"data\": {,}\n}").find("line 3"), std::string::npos);
    EXPECT_THROW(load_config(fs::path("/nonexistent/fedod.json")), Error);
}

TEST(Config, OverridesBeatFileAndRoundTrip) {
    Overrides ov;
    ov.seed = 9;
    ov.transport = "tcp";
    ov.out = "elsewhere";
    const auto cfg = config_from_json({{"seed", 2}, {"federation", {{"transport", "inprocess"}}}}, ov);
    EXPECT_EQ(cfg.seed, 9u);
    EXPECT_EQ(cfg.federation.seed, 9u);
    EXPECT_EQ(cfg.partition.seed, 9u);
    EXPECT_EQ(cfg.federation.transport, fedcore::Transport::Tcp);
    EXPECT_EQ(cfg.output_dir, "elsewhere");
    EXPECT_EQ(to_json(config_from_json(to_json(cfg))), to_json(cfg));
}

TEST(Config, ShippedConfigsLoad) {
    for (const char* name : {"cabin2.json", "usb3.json"}) {
        const auto cfg = load_config(fs::path(FEDOD_SOURCE_DIR) / "configs" / name);
        EXPECT_EQ(to_json(cfg), to_json(config_from_json({{"preset", cfg.preset.name}})));
    }
}

TEST(Report, NineColumnsAndPaperReferences) {
    const auto cols = report_columns();
    ASSERT_EQ(cols.size(), 9u);
    EXPECT_EQ(cols.front(), "Model");
    EXPECT_EQ(cols.back(), "Paper reported");
    EXPECT_EQ(paper_reference("cabin2", "fed", "cross_test"), "1.0 / 0.93");
    EXPECT_EQ(paper_reference("cabin2", "client1", "swap_client1"), "0.83 / 0.70");
    EXPECT_EQ(paper_reference("cabin2", "fed", "domain_shift"), "__");
    EXPECT_EQ(paper_reference("usb3", "fed", "cross_test"), "__");
    const auto md = markdown_table({{"a", "b", "1.00", "0.93", "__", "0.93", "__", "0.95", "__"}});
    EXPECT_EQ(md.substr(0, md.find('\n')),
              "| Model | Test Dataset | mAP | AP@[.50:.05:.95] | APm | APl | ARm | ARl | Paper reported |");
    EXPECT_NE(md.find("| a | b | 1.00 | 0.93 | __ | 0.93 | __ | 0.95 | __ |"), std::string::npos);
}

TEST_F(FedctlTest, RunDirectoriesAreUniqueAndOrdered) {
    const auto a = create_run_dir(root_);
    const auto b = create_run_dir(root_);
    EXPECT_NE(a, b);
    EXPECT_EQ(*latest_run(root_), std::max(a, b));
    EXPECT_FALSE(latest_run(root_ / "none"));
    EXPECT_EQ(round_checkpoint_name(3), "round_03.fdw");
}

TEST_F(FedctlTest, GenWritesDeterministicCounts) {
    const auto cfg = tiny();
    const auto a = cmd_gen(cfg);
    const auto b = cmd_gen(cfg);
    EXPECT_EQ(tree(a), tree(b));
    const auto manifest = read_json(a / "manifest.json");
    EXPECT_EQ(manifest["counts"]["client1/train"], 14);
    EXPECT_EQ(manifest["counts"]["client2/test"], 3);
    EXPECT_EQ(manifest["counts"]["cross_test"], 8);
    EXPECT_EQ(manifest["cross_test_empty"], false);
    EXPECT_EQ(manifest["counts"]["swap_client1"].get<int>() + manifest["counts"]["swap_client2"].get<int>(), 8);
    EXPECT_TRUE(fs::exists(a / "client1" / "val" / "labels" / "00000.txt"));

    auto other = tiny({{"seed", 5}});
    EXPECT_NE(tree(cmd_gen(other)).at("cross_test/labels/00000.txt"), tree(a).at("cross_test/labels/00000.txt"));
}

TEST_F(FedctlTest, MissingInputsMapToExitCodes) {
    const auto cfg = tiny();
    EXPECT_EQ(exit_code_of([&] { cmd_train_local(cfg); }), kExitDataset);
    EXPECT_EQ(exit_code_of([&] { cmd_fed(cfg); }), kExitDataset);
    EXPECT_EQ(exit_code_of([&] { cmd_report(cfg); }), kExitReportInput);
    EXPECT_EQ(exit_code_of([&] { cmd_modelcard(cfg); }), kExitIncomplete);
    cmd_gen(cfg);
    EXPECT_EQ(exit_code_of([&] { cmd_train_local(cfg, {"client9"}); }), kExitConfig);
    EXPECT_EQ(exit_code_of([&] { cmd_eval(cfg, {"client1"}, {"cross_test"}); }), kExitDataset);
    EXPECT_EQ(exit_code_of([&] { cmd_eval(cfg, {"oracle"}, {"no_such_set"}); }), kExitDataset);
}

TEST_F(FedctlTest, TrainLocalWithZeroEpochsKeepsInitialWeights) {
    const auto cfg = tiny({{"baseline_epochs", 0}});
    cmd_gen(cfg);
    const auto runs = cmd_train_local(cfg, {"client2"});
    ASSERT_EQ(runs.size(), 1u);
    EXPECT_EQ(load_checkpoint(runs[0] / "model.fdw"), fedcore::initial_weights(cfg.federation, cfg.detector));
    EXPECT_EQ(slurp(runs[0] / "stats.jsonl"), "");
}

TEST_F(FedctlTest, CorruptCheckpointIsSchemaError) {
    const auto cfg = tiny();
    cmd_gen(cfg);
    const auto run = cmd_train_local(cfg, {"client1"})[0];
    {
        std::fstream f(run / "model.fdw", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(20);
        f.put('\x7f');
    }
    EXPECT_EQ(exit_code_of([&] { cmd_eval(cfg, {"client1"}, {"cross_test"}); }), kExitSchema);

    auto wider = tiny({{"detector", {{"conv2_channels", 6}}}});
    cmd_train_local(cfg, {"client2"});
    EXPECT_EQ(exit_code_of([&] { cmd_eval(wider, {"client2"}, {"cross_test"}); }), kExitSchema);
}

TEST_F(FedctlTest, FullPipeline) {
    const auto cfg = tiny();
    cmd_gen(cfg);
    cmd_train_local(cfg);
    const auto fed = cmd_fed(cfg);
    EXPECT_TRUE(fs::exists(fed / "round_00.fdw"));
    EXPECT_TRUE(fs::exists(fed / "round_01.fdw"));
    EXPECT_FALSE(fs::exists(fed / "round_02.fdw"));
    const auto history = read_json(fed / "history.json");
    EXPECT_EQ(history["rounds_used"], 2);
    EXPECT_EQ(history["history"][0]["mean"], nullptr);

    EXPECT_EQ(exit_code_of([&] { cmd_report(cfg); }), kExitReportInput);  // no evaluations yet
    const auto ev = cmd_eval(cfg);
    EXPECT_TRUE(fs::exists(ev.run / "fed__cross_test.json"));
    EXPECT_TRUE(fs::exists(ev.run / "client1__swap_client1.json"));
    EXPECT_NE(ev.table.find("Client1 (Blue cabin)"), std::string::npos);

    const auto md = cmd_report(cfg);
    EXPECT_NE(md.find("| Paper reported |"), std::string::npos);
    EXPECT_NE(md.find("1.0 / 0.93"), std::string::npos);
    ASSERT_TRUE(latest_run(Layout{cfg.output_dir}.report()));
    EXPECT_EQ(slurp(*latest_run(Layout{cfg.output_dir}.report()) / "report.md"), md);

    const auto card = cmd_modelcard(cfg);
    EXPECT_EQ(card["schema_version"], "fedod-card/1");
    EXPECT_EQ(card["training"]["rounds_used"], 2);
    EXPECT_FALSE(card["evaluations"].empty());

    fs::remove(fed / "final.fdw");
    EXPECT_EQ(exit_code_of([&] { cmd_modelcard(cfg); }), kExitIncomplete);
}

TEST_F(FedctlTest, OracleModelScoresOne) {
    const auto cfg = tiny();
    cmd_gen(cfg);
    const auto ev = cmd_eval(cfg, {"oracle"}, {"cross_test"});
    const auto j = read_json(ev.run / "oracle__cross_test.json");
    EXPECT_DOUBLE_EQ(j["report"]["aggregate"]["map50"].get<double>(), 1.0);
}
