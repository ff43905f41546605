#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "posnegdm/evaluation.hpp"

namespace posnegdm {

// Flat key-value config file: one `key value` (or `key=value`) pair per line,
// '#' starts a comment.
inline std::map<std::string, std::string> load_flat_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path);
    std::map<std::string, std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        for (auto& c : line)
            if (c == '=') c = ' ';
        std::istringstream ss(line);
        std::string k, v;
        if (ss >> k >> v) out[k] = v;
    }
    return out;
}

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
    nlohmann::json j;
    j["action_accuracy_positive_pct"] = r.action_accuracy_positive_pct;
    j["seed"] = r.seed;
    j["mortality_available"] = r.mortality_available;
    if (r.mortality_available) {
        j["mortality_step_by_step"] = {{"positive_data_pct", r.mortality_step_by_step.positive_data_pct},
                                       {"negative_data_pct", r.mortality_step_by_step.negative_data_pct},
                                       {"total_pct", r.mortality_step_by_step.total_pct}};
        j["mortality_complete_traj_pct"] = r.mortality_complete_traj_pct;
    } else {
        j["mortality_step_by_step"] = nullptr;
        j["mortality_complete_traj_pct"] = nullptr;
    }
    for (const auto& [name, hist] : r.histograms) {
        nlohmann::json grid = nlohmann::json::array();
        for (const auto& row : hist) grid.push_back(row);
        j["histograms"][name] = grid;
    }
    return j;
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << content;
}

// Writes eval.json plus one histogram_<cohort>.csv per cohort. JSON carries
// full precision; CSV tables use 2 decimals, matching the granularity of the
// reported tables.
inline void metrics_emit(const EvalReport& report, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    write_text_file((fs::path(dir) / "eval.json").string(), eval_report_to_json(report).dump(2) + "\n");
    for (const auto& [name, hist] : report.histograms) {
        std::ostringstream csv;
        for (const auto& row : hist) {
            for (int c = 0; c < 5; ++c) csv << (c ? "," : "") << row[c];
            csv << "\n";
        }
        write_text_file((fs::path(dir) / ("histogram_" + name + ".csv")).string(), csv.str());
    }
}

inline void write_ablation_csv(AblationParam param, const std::vector<AblationRow>& rows,
                               const std::string& path) {
    std::ostringstream csv;
    csv << ablation_param_str(param)
        << ",accuracy_pct,stepwise_mortality_pct,complete_traj_mortality_pct\n";
    char buf[160];
    for (const auto& r : rows) {
        if (r.mortality_available)
            std::snprintf(buf, sizeof buf, "%.2f,%.2f,%.2f,%.2f\n", r.value, r.accuracy_pct,
                          r.stepwise_mortality_pct, r.complete_traj_mortality_pct);
        else
            std::snprintf(buf, sizeof buf, "%.2f,%.2f,N/A,N/A\n", r.value, r.accuracy_pct);
        csv << buf;
    }
    write_text_file(path, csv.str());
}

inline void write_seeds_csv(const SeedSummary& summary, const std::string& path) {
    std::ostringstream csv;
    csv << "seed,accuracy_pct,stepwise_mortality_pct,complete_traj_mortality_pct\n";
    char buf[160];
    for (const auto& r : summary.rows) {
        std::snprintf(buf, sizeof buf, "%llu,%.2f,%.2f,%.2f\n",
                      static_cast<unsigned long long>(r.seed), r.accuracy_pct,
                      r.stepwise_mortality_pct, r.complete_traj_mortality_pct);
        csv << buf;
    }
    std::snprintf(buf, sizeof buf, "mean,%.2f,%.2f,%.2f\n", summary.mean.accuracy_pct,
                  summary.mean.stepwise_mortality_pct, summary.mean.complete_traj_mortality_pct);
    csv << buf;
    std::snprintf(buf, sizeof buf, "std,%.2f,%.2f,%.2f\n", summary.stddev.accuracy_pct,
                  summary.stddev.stepwise_mortality_pct, summary.stddev.complete_traj_mortality_pct);
    csv << buf;
    write_text_file(path, csv.str());
}

}  // namespace posnegdm
