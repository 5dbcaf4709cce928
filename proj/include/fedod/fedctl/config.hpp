#pragma once

// Experiment configuration: one JSON document, precedence CLI > file > defaults.
//
//   {
//     "schema_version": "fedod-config/1",
//     "preset": "cabin2",
//     "seed": 1,
//     "output_dir": "runs/cabin2",
//     "baseline_epochs": 150,
//     "data":       { "samples_per_client", "train_fraction", "val_fraction", "test_fraction",
//                     "cross_test_samples", "domain_shift_samples", "image_size" },
//     "detector":   { "grid_s", "conv1_channels", "conv2_channels", "head_kernel", "lambda_coord",
//                     "lambda_noobj", "learning_rate", "batch_size", "momentum",
//                     "conf_threshold", "nms_iou" },
//     "federation": { "stop_threshold", "max_rounds", "local_epochs", "transport", "bind" }
//   }
//
// Every field is optional.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedod/error.hpp"
#include "fedod/fedcore/server.hpp"
#include "fedod/sample.hpp"
#include "fedod/synthdata.hpp"
#include "fedod/tinydet.hpp"

namespace fedod::fedctl {

inline constexpr std::string_view kConfigSchema = "fedod-config/1";

struct ClientPreset {
    std::string id;
    std::string display_name;
    std::vector<synthdata::Combination> allowed;
};

struct Preset {
    std::string name;
    std::vector<std::string> class_names;
    std::vector<ClientPreset> clients;
    std::string task;
};

inline Preset cabin2_preset() {
    using enum BodyColor;
    using W = Windshield;
    return {"cabin2",
            {"Cabin_without_windshield", "Cabin_with_windshield"},
            {{"client1", "Client1 (Blue cabin)", {{Blue, W::None}, {Blue, W::A}, {Blue, W::B}}},
             {"client2", "Client2 (Red cabin)", {{Red, W::None}, {Red, W::C}, {Red, W::D}}}},
            "Detect toy cabins and classify whether a windshield is mounted"};
}

/// Three inspection clients, one body color and one error glyph each.
inline Preset usb3_preset() {
    using enum BodyColor;
    using W = Windshield;
    return {"usb3",
            {"Okay", "Not_Okay"},
            {{"client1", "Client1 (White body)", {{White, W::None}, {White, W::A}}},
             {"client2", "Client2 (Blue body)", {{Blue, W::None}, {Blue, W::B}}},
             {"client3", "Client3 (Red body)", {{Red, W::None}, {Red, W::C}}}},
            "Detect parts and classify them as okay or carrying a visible error glyph"};
}

inline Preset preset_named(const std::string& name) {
    if (name == "cabin2") return cabin2_preset();
    if (name == "usb3") return usb3_preset();
    throw Error(ErrorKind::ConfigInvalid, "preset: unknown preset '" + name + "' (expected cabin2 or usb3)");
}

struct ExperimentConfig {
    Preset preset = cabin2_preset();
    std::uint64_t seed = 1;
    std::filesystem::path output_dir = "runs/cabin2";
    int baseline_epochs = 150;
    int samples_per_client = 200;
    synthdata::PartitionSpec partition;
    tinydet::DetectorConfig detector;
    fedcore::FedConfig federation;
    std::optional<std::string> bind;

    std::vector<std::string> client_ids() const {
        std::vector<std::string> ids;
        for (const auto& c : preset.clients) ids.push_back(c.id);
        return ids;
    }

    const ClientPreset& client(const std::string& id) const {
        for (const auto& c : preset.clients)
            if (c.id == id) return c;
        throw Error(ErrorKind::ConfigInvalid, "unknown client '" + id + "' for preset " + preset.name);
    }
};

/// Values given on the command line; each one beats the file.
struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> transport;
    std::optional<std::string> bind;
    std::optional<std::filesystem::path> out;
};

namespace detail {

class FieldReader {
public:
    FieldReader(const nlohmann::json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj_.is_object()) fail(path_.empty() ? "top level" : path_, "expected an object");
    }

    [[noreturn]] static void fail(const std::string& field, const std::string& what) {
        throw Error(ErrorKind::ConfigInvalid, field + ": " + what);
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void allow(std::initializer_list<const char*> keys) const {
        for (const auto& [k, v] : obj_.items()) {
            bool known = false;
            for (const char* a : keys) known = known || k == a;
            if (!known) fail(field(k), "unknown field");
        }
    }

    const nlohmann::json* get(const std::string& key) const {
        const auto it = obj_.find(key);
        return it == obj_.end() ? nullptr : &*it;
    }

    void number(const std::string& key, double& out) const {
        if (const auto* v = get(key)) {
            if (!v->is_number()) fail(field(key), "expected a number");
            out = v->get<double>();
        }
    }

    template <typename Int>
    void integer(const std::string& key, Int& out) const {
        if (const auto* v = get(key)) {
            if (!v->is_number_integer()) fail(field(key), "expected an integer");
            if (v->is_number_unsigned()) {
                const auto u = v->get<std::uint64_t>();
                if (u > static_cast<std::uint64_t>(std::numeric_limits<Int>::max())) fail(field(key), "out of range");
                out = static_cast<Int>(u);
            } else {
                const auto s = v->get<std::int64_t>();
                if (s < static_cast<std::int64_t>(std::numeric_limits<Int>::min()) ||
                    (s > 0 && static_cast<std::uint64_t>(s) > static_cast<std::uint64_t>(std::numeric_limits<Int>::max())))
                    fail(field(key), "out of range");
                out = static_cast<Int>(s);
            }
        }
    }

    void string(const std::string& key, std::string& out) const {
        if (const auto* v = get(key)) {
            if (!v->is_string()) fail(field(key), "expected a string");
            out = v->get<std::string>();
        }
    }

    std::optional<FieldReader> object(const std::string& key) const {
        if (const auto* v = get(key)) return FieldReader(*v, field(key));
        return std::nullopt;
    }

private:
    const nlohmann::json& obj_;
    std::string path_;
};

inline fedcore::Transport parse_transport(const std::string& s, const std::string& field) {
    if (s == "inprocess") return fedcore::Transport::InProcess;
    if (s == "tcp") return fedcore::Transport::Tcp;
    FieldReader::fail(field, "expected \"inprocess\" or \"tcp\", got \"" + s + "\"");
}

/// Re-raise a validator error with the section it came from.
template <typename F>
void checked(const std::string& section, F&& f) {
    try {
        f();
    } catch (const Error& e) {
        throw Error(ErrorKind::ConfigInvalid, section + ": " + e.what());
    }
}

}  // namespace detail

inline std::string_view to_string(fedcore::Transport t) {
    return t == fedcore::Transport::Tcp ? "tcp" : "inprocess";
}

/// Fills partition and federation details that follow from the preset.
inline void finalize(ExperimentConfig& cfg) {
    cfg.partition.clients.clear();
    for (const auto& c : cfg.preset.clients)
        cfg.partition.clients.push_back({c.id, c.allowed, cfg.samples_per_client});
    cfg.partition.seed = cfg.seed;
    cfg.partition.image_size = cfg.detector.image_size;
    cfg.detector.num_classes = static_cast<int>(cfg.preset.class_names.size());
    cfg.federation.clients = cfg.client_ids();
    cfg.federation.seed = cfg.seed;

    detail::checked("data", [&] { synthdata::validate(cfg.partition); });
    detail::checked("detector", [&] {
        auto d = cfg.detector;
        d.local_epochs = cfg.federation.local_epochs;
        tinydet::validate(d);
    });
    detail::checked("federation", [&] { fedcore::validate(cfg.federation); });
    if (cfg.baseline_epochs < 0) detail::FieldReader::fail("baseline_epochs", "must be >= 0");
}

inline ExperimentConfig config_from_json(const nlohmann::json& j, const Overrides& ov = {}) {
    using detail::FieldReader;
    ExperimentConfig cfg;
    FieldReader top(j, "");
    top.allow({"schema_version", "preset", "seed", "output_dir", "baseline_epochs", "data", "detector", "federation"});

    std::string version(kConfigSchema);
    top.string("schema_version", version);
    if (version != kConfigSchema)
        FieldReader::fail("schema_version", "unsupported \"" + version + "\" (expected \"" + std::string(kConfigSchema) + "\")");

    std::string preset = "cabin2";
    top.string("preset", preset);
    cfg.preset = preset_named(preset);
    cfg.output_dir = "runs/" + preset;
    top.integer("seed", cfg.seed);
    std::string out;
    top.string("output_dir", out);
    if (!out.empty()) cfg.output_dir = out;
    top.integer("baseline_epochs", cfg.baseline_epochs);

    if (auto d = top.object("data")) {
        d->allow({"samples_per_client", "train_fraction", "val_fraction", "test_fraction", "cross_test_samples",
                  "domain_shift_samples", "image_size"});
        d->integer("samples_per_client", cfg.samples_per_client);
        d->number("train_fraction", cfg.partition.train_fraction);
        d->number("val_fraction", cfg.partition.val_fraction);
        d->number("test_fraction", cfg.partition.test_fraction);
        d->integer("cross_test_samples", cfg.partition.cross_test_samples);
        d->integer("domain_shift_samples", cfg.partition.domain_shift_samples);
        d->integer("image_size", cfg.detector.image_size);
    }
    if (auto d = top.object("detector")) {
        d->allow({"grid_s", "conv1_channels", "conv2_channels", "head_kernel", "lambda_coord", "lambda_noobj",
                  "learning_rate", "batch_size", "momentum", "conf_threshold", "nms_iou"});
        d->integer("grid_s", cfg.detector.grid_s);
        d->integer("conv1_channels", cfg.detector.conv1_channels);
        d->integer("conv2_channels", cfg.detector.conv2_channels);
        d->integer("head_kernel", cfg.detector.head_kernel);
        d->number("lambda_coord", cfg.detector.lambda_coord);
        d->number("lambda_noobj", cfg.detector.lambda_noobj);
        d->number("learning_rate", cfg.detector.learning_rate);
        d->integer("batch_size", cfg.detector.batch_size);
        d->number("momentum", cfg.detector.momentum);
        d->number("conf_threshold", cfg.detector.conf_threshold);
        d->number("nms_iou", cfg.detector.nms_iou);
    }
    if (auto f = top.object("federation")) {
        f->allow({"stop_threshold", "max_rounds", "local_epochs", "transport", "bind"});
        f->number("stop_threshold", cfg.federation.stop_threshold);
        f->integer("max_rounds", cfg.federation.max_rounds);
        f->integer("local_epochs", cfg.federation.local_epochs);
        std::string transport = "inprocess";
        f->string("transport", transport);
        cfg.federation.transport = detail::parse_transport(transport, "federation.transport");
        if (const auto* b = f->get("bind"); b && !b->is_null()) {
            if (!b->is_string()) FieldReader::fail("federation.bind", "expected a string or null");
            cfg.bind = b->get<std::string>();
        }
    }

    if (ov.seed) cfg.seed = *ov.seed;
    if (ov.transport) cfg.federation.transport = detail::parse_transport(*ov.transport, "--transport");
    if (ov.bind) cfg.bind = *ov.bind;
    if (ov.out) cfg.output_dir = *ov.out;

    finalize(cfg);
    return cfg;
}

/// Parses `text`; syntax errors report line and column.
inline ExperimentConfig config_from_text(const std::string& text, const Overrides& ov = {}) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        std::size_t line = 1, col = 1;
        for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw Error(ErrorKind::ConfigInvalid,
                    "line " + std::to_string(line) + ", column " + std::to_string(col) + ": invalid JSON");
    }
    return config_from_json(j, ov);
}

inline ExperimentConfig load_config(const std::optional<std::filesystem::path>& path, const Overrides& ov = {}) {
    if (!path) return config_from_json(nlohmann::json::object(), ov);
    std::ifstream in(*path);
    if (!in) throw Error(ErrorKind::ConfigInvalid, path->string() + ": cannot open config file");
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return config_from_text(ss.str(), ov);
    } catch (const Error& e) {
        throw Error(e.kind(), path->string() + ": " + e.what());
    }
}

/// Effective configuration, loadable again by config_from_json.
inline nlohmann::json to_json(const ExperimentConfig& cfg) {
    const auto& d = cfg.detector;
    const auto& f = cfg.federation;
    const auto& p = cfg.partition;
    return {
        {"schema_version", kConfigSchema},
        {"preset", cfg.preset.name},
        {"seed", cfg.seed},
        {"output_dir", cfg.output_dir.generic_string()},
        {"baseline_epochs", cfg.baseline_epochs},
        {"data",
         {{"samples_per_client", cfg.samples_per_client},
          {"train_fraction", p.train_fraction},
          {"val_fraction", p.val_fraction},
          {"test_fraction", p.test_fraction},
          {"cross_test_samples", p.cross_test_samples},
          {"domain_shift_samples", p.domain_shift_samples},
          {"image_size", d.image_size}}},
        {"detector",
         {{"grid_s", d.grid_s},
          {"conv1_channels", d.conv1_channels},
          {"conv2_channels", d.conv2_channels},
          {"head_kernel", d.head_kernel},
          {"lambda_coord", d.lambda_coord},
          {"lambda_noobj", d.lambda_noobj},
          {"learning_rate", d.learning_rate},
          {"batch_size", d.batch_size},
          {"momentum", d.momentum},
          {"conf_threshold", d.conf_threshold},
          {"nms_iou", d.nms_iou}}},
        {"federation",
         {{"stop_threshold", f.stop_threshold},
          {"max_rounds", f.max_rounds},
          {"local_epochs", f.local_epochs},
          {"transport", to_string(f.transport)},
          {"bind", cfg.bind ? nlohmann::json(*cfg.bind) : nlohmann::json(nullptr)}}},
    };
}

}  // namespace fedod::fedctl
