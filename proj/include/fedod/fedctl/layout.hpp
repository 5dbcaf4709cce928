#pragma once

// Experiment directory layout. Every command writes a fresh run-<UTC time>
// directory and consumers read the newest one.
//
//   EXP/data/run-*/               client1/{train,val,test}, cross_test, swap_<client>, domain_shift
//   EXP/local/<client>/run-*/     model.fdw, stats.jsonl, config.json
//   EXP/fed/run-*/                round_00.fdw ..., final.fdw, history.json, config.json
//   EXP/eval/run-*/               <model>__<dataset>.json, table.txt
//   EXP/report/run-*/             report.md
//   EXP/modelcard/run-*/          modelcard.json

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedod/error.hpp"

namespace fedod::fedctl {

namespace fs = std::filesystem;

struct Layout {
    fs::path root;

    fs::path data() const { return root / "data"; }
    fs::path local(const std::string& client) const { return root / "local" / client; }
    fs::path fed() const { return root / "fed"; }
    fs::path eval() const { return root / "eval"; }
    fs::path report() const { return root / "report"; }
    fs::path modelcard() const { return root / "modelcard"; }
};

inline std::string utc_stamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
    return buf;
}

/// Creates parent/run-<stamp>, adding -01, -02, ... when the second is taken.
inline fs::path create_run_dir(const fs::path& parent) {
    std::error_code ec;
    fs::create_directories(parent, ec);
    if (ec) throw Error(ErrorKind::IoFailure, "cannot create " + parent.string() + ": " + ec.message());
    const std::string base = "run-" + utc_stamp();
    for (int n = 0; n < 1000; ++n) {
        char suffix[8] = "";
        if (n > 0) std::snprintf(suffix, sizeof suffix, "-%02d", n);
        const fs::path dir = parent / (base + suffix);
        if (fs::create_directory(dir, ec)) return dir;
        if (ec) throw Error(ErrorKind::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
    }
    throw Error(ErrorKind::IoFailure, "too many runs in one second under " + parent.string());
}

inline std::optional<fs::path> latest_run(const fs::path& parent) {
    std::error_code ec;
    if (!fs::is_directory(parent, ec)) return std::nullopt;
    std::optional<fs::path> best;
    for (const auto& e : fs::directory_iterator(parent)) {
        const auto name = e.path().filename().string();
        if (!e.is_directory() || name.rfind("run-", 0) != 0) continue;
        if (!best || name > best->filename().string()) best = e.path();
    }
    return best;
}

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
    out << text;
    if (!out) throw Error(ErrorKind::IoFailure, "write failed for " + path.string());
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::IoFailure, path.string() + ": " + e.what());
    }
}

inline std::string round_checkpoint_name(std::size_t round) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "round_%02zu.fdw", round);
    return buf;
}

}  // namespace fedod::fedctl
