#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedod/detmetrics.hpp"

namespace fedod::fedctl {

/// mAP / AP@[.50:.05:.95] published for the photographic cabin study.
struct PaperReference {
    std::string model;
    std::string dataset;
    std::string value;
};

inline const std::vector<PaperReference>& cabin2_paper_references() {
    static const std::vector<PaperReference> refs = {
        {"client1", "cross_test", "0.42 / 0.35"},     {"client2", "cross_test", "0.49 / 0.42"},
        {"fed", "cross_test", "1.0 / 0.93"},          {"client1", "swap_client1", "0.83 / 0.70"},
        {"fed", "swap_client1", "1.0 / 0.96"},        {"client2", "swap_client2", "0.97 / 0.83"},
        {"fed", "swap_client2", "1.0 / 0.91"},
    };
    return refs;
}

inline std::string paper_reference(const std::string& preset, const std::string& model, const std::string& dataset) {
    if (preset != "cabin2") return "__";
    for (const auto& r : cabin2_paper_references())
        if (r.model == model && r.dataset == dataset) return r.value;
    return "__";
}

inline std::vector<std::string> report_columns() {
    auto cols = detmetrics::table_columns();
    cols.push_back("Paper reported");
    return cols;
}

inline std::string markdown_row(const std::vector<std::string>& cells) {
    std::string out = "|";
    for (const auto& c : cells) out += " " + c + " |";
    return out + "\n";
}

inline std::string markdown_table(const std::vector<std::vector<std::string>>& rows) {
    const auto cols = report_columns();
    std::string out = markdown_row(cols);
    out += "|";
    for (std::size_t i = 0; i < cols.size(); ++i) out += "---|";
    out += "\n";
    for (const auto& r : rows) out += markdown_row(r);
    return out;
}

}  // namespace fedod::fedctl
