#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "posnegdm/rng.hpp"

namespace posnegdm {

enum class Outcome { positive, negative };

inline const char* outcome_str(Outcome o) { return o == Outcome::positive ? "pos" : "neg"; }

// Two treatment dimensions, each in {0..4} (0 = none, 1..4 = dose quartiles).
struct ActionPair {
    int iv_bin = 0;
    int vaso_bin = 0;
};

inline int encode_action(int iv_bin, int vaso_bin) {
    if (iv_bin < 0 || iv_bin > 4 || vaso_bin < 0 || vaso_bin > 4)
        throw std::domain_error("encode_action: bins must be in {0..4}, got (" +
                                std::to_string(iv_bin) + "," + std::to_string(vaso_bin) + ")");
    return 5 * iv_bin + vaso_bin;
}

inline int encode_action(const ActionPair& a) { return encode_action(a.iv_bin, a.vaso_bin); }

inline ActionPair decode_action(int index) {
    if (index < 0 || index > 24)
        throw std::domain_error("decode_action: index must be in {0..24}, got " +
                                std::to_string(index));
    return ActionPair{index / 5, index % 5};
}

constexpr int kNumActions = 25;

// One patient's treatment sequence. The only reward is +-1 at the final step,
// so every returns-to-go entry equals the terminal reward.
struct Trajectory {
    std::string id;
    std::vector<std::vector<double>> states;  // T x D
    std::vector<ActionPair> actions;          // T
    double terminal_reward = 1.0;
    Outcome outcome = Outcome::positive;
    std::vector<double> returns_to_go;  // T

    size_t length() const { return states.size(); }
    int state_dim() const { return states.empty() ? 0 : static_cast<int>(states[0].size()); }

    void validate() const {
        if (states.empty()) throw std::logic_error("trajectory " + id + ": empty");
        if (actions.size() != states.size() || returns_to_go.size() != states.size())
            throw std::logic_error("trajectory " + id + ": length mismatch");
        bool pos = outcome == Outcome::positive;
        if ((terminal_reward > 0) != pos)
            throw std::logic_error("trajectory " + id + ": outcome/reward mismatch");
    }
};

inline std::vector<double> compute_returns_to_go(const std::vector<double>& rewards) {
    if (rewards.empty()) throw std::logic_error("compute_returns_to_go: empty rewards");
    for (size_t t = 0; t + 1 < rewards.size(); ++t)
        if (rewards[t] != 0.0)
            throw std::logic_error("compute_returns_to_go: nonzero reward at intermediate step " +
                                   std::to_string(t));
    double last = rewards.back();
    if (last != 1.0 && last != -1.0)
        throw std::logic_error("compute_returns_to_go: terminal reward must be +-1");
    std::vector<double> rtg(rewards.size());
    double acc = 0.0;
    for (size_t i = rewards.size(); i-- > 0;) {
        acc += rewards[i];
        rtg[i] = acc;
    }
    return rtg;
}

struct NormStats {
    std::vector<double> mean;
    std::vector<double> std;
};

struct DatasetSplit {
    std::vector<Trajectory> train;
    std::vector<Trajectory> test;
    NormStats norm_stats;
    bool normalized = false;

    int count_outcome(const std::vector<Trajectory>& v, Outcome o) const {
        return static_cast<int>(std::count_if(v.begin(), v.end(),
                                              [o](const Trajectory& t) { return t.outcome == o; }));
    }
};

// Disjoint random split at trajectory granularity; test size = round(n * fraction).
inline DatasetSplit split_train_test(std::vector<Trajectory> trajectories,
                                     double test_fraction, uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw std::invalid_argument("split_train_test: test_fraction must be in (0,1)");
    if (trajectories.size() < 2)
        throw std::invalid_argument("split_train_test: need at least 2 trajectories");
    size_t n = trajectories.size();
    size_t n_test = static_cast<size_t>(std::llround(static_cast<double>(n) * test_fraction));
    n_test = std::min(std::max<size_t>(n_test, 1), n - 1);

    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    RngStream rng(seed, "split");
    // Fisher-Yates
    for (size_t i = n - 1; i > 0; --i) {
        size_t j = rng.uniform_int(i + 1);
        std::swap(idx[i], idx[j]);
    }
    DatasetSplit split;
    for (size_t i = 0; i < n; ++i) {
        auto& t = trajectories[idx[i]];
        if (i < n_test)
            split.test.push_back(std::move(t));
        else
            split.train.push_back(std::move(t));
    }
    return split;
}

inline NormStats compute_norm_stats(const std::vector<Trajectory>& train) {
    if (train.empty()) throw std::invalid_argument("compute_norm_stats: empty train set");
    int d = train[0].state_dim();
    NormStats st;
    st.mean.assign(d, 0.0);
    st.std.assign(d, 0.0);
    size_t n = 0;
    for (const auto& t : train)
        for (const auto& s : t.states) {
            for (int j = 0; j < d; ++j) st.mean[j] += s[j];
            ++n;
        }
    for (int j = 0; j < d; ++j) st.mean[j] /= static_cast<double>(n);
    for (const auto& t : train)
        for (const auto& s : t.states)
            for (int j = 0; j < d; ++j) {
                double dv = s[j] - st.mean[j];
                st.std[j] += dv * dv;
            }
    for (int j = 0; j < d; ++j)
        st.std[j] = std::max(std::sqrt(st.std[j] / static_cast<double>(n)), 1e-6);
    return st;
}

// Z-scores every state feature against train statistics; test uses train stats.
inline DatasetSplit normalize_states(DatasetSplit split) {
    split.norm_stats = compute_norm_stats(split.train);
    auto apply = [&](std::vector<Trajectory>& v) {
        for (auto& t : v)
            for (auto& s : t.states)
                for (size_t j = 0; j < s.size(); ++j)
                    s[j] = (s[j] - split.norm_stats.mean[j]) / split.norm_stats.std[j];
    };
    apply(split.train);
    apply(split.test);
    split.normalized = true;
    return split;
}

inline std::vector<double> normalize_state(const std::vector<double>& s, const NormStats& st) {
    std::vector<double> out(s.size());
    for (size_t j = 0; j < s.size(); ++j) out[j] = (s[j] - st.mean[j]) / st.std[j];
    return out;
}

// ---- CSV schema -----------------------------------------------------------------
// traj_id, t, f0..f{D-1}, action_iv, action_vaso, reward, outcome
// reward in {-1,0,1}, nonzero only at each trajectory's final row; t contiguous from 0.

inline void save_trajectories_csv(const std::vector<Trajectory>& trajectories,
                                  const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_trajectories_csv: cannot open " + path);
    int d = trajectories.empty() ? 0 : trajectories[0].state_dim();
    out << "traj_id,t";
    for (int j = 0; j < d; ++j) out << ",f" << j;
    out << ",action_iv,action_vaso,reward,outcome\n";
    char buf[64];
    for (const auto& t : trajectories) {
        t.validate();
        for (size_t i = 0; i < t.length(); ++i) {
            out << t.id << ',' << i;
            for (int j = 0; j < d; ++j) {
                std::snprintf(buf, sizeof buf, "%.17g", t.states[i][j]);
                out << ',' << buf;
            }
            double reward = (i + 1 == t.length()) ? t.terminal_reward : 0.0;
            out << ',' << t.actions[i].iv_bin << ',' << t.actions[i].vaso_bin << ','
                << static_cast<int>(reward) << ',' << outcome_str(t.outcome) << '\n';
        }
    }
}

inline std::vector<Trajectory> load_trajectories_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_trajectories_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line))
        throw std::runtime_error("load_trajectories_csv: missing header in " + path);
    // header check
    {
        std::stringstream ss(line);
        std::string col;
        std::getline(ss, col, ',');
        if (col != "traj_id")
            throw std::runtime_error("load_trajectories_csv: unexpected header '" + line + "'");
    }
    size_t n_cols = 1 + std::count(line.begin(), line.end(), ',');
    if (n_cols < 7)
        throw std::runtime_error("load_trajectories_csv: header has too few columns");
    int d = static_cast<int>(n_cols) - 6;

    std::vector<Trajectory> out;
    Trajectory cur;
    std::vector<double> rewards;
    bool open = false;
    size_t row_no = 1;

    auto flush = [&]() {
        if (!open) return;
        if (rewards.empty() || (rewards.back() != 1.0 && rewards.back() != -1.0))
            throw std::runtime_error("load_trajectories_csv: trajectory " + cur.id +
                                     " has no terminal +-1 reward (row " +
                                     std::to_string(row_no) + ")");
        cur.terminal_reward = rewards.back();
        cur.returns_to_go = compute_returns_to_go(rewards);
        cur.validate();
        out.push_back(std::move(cur));
        cur = Trajectory{};
        rewards.clear();
        open = false;
    };

    std::vector<std::string> fields;
    fields.reserve(n_cols);
    while (std::getline(in, line)) {
        ++row_no;
        if (line.empty()) continue;
        fields.clear();
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) fields.push_back(f);
        if (fields.size() != n_cols)
            throw std::runtime_error("load_trajectories_csv: row " + std::to_string(row_no) +
                                     " has " + std::to_string(fields.size()) + " columns, expected " +
                                     std::to_string(n_cols));
        const std::string& id = fields[0];
        long t = std::stol(fields[1]);
        if (!open || id != cur.id) {
            flush();
            open = true;
            cur.id = id;
            if (t != 0)
                throw std::runtime_error("load_trajectories_csv: row " + std::to_string(row_no) +
                                         ": trajectory " + id + " does not start at t=0");
        } else if (t != static_cast<long>(cur.length())) {
            throw std::runtime_error("load_trajectories_csv: row " + std::to_string(row_no) +
                                     ": non-contiguous timestep " + std::to_string(t) +
                                     " in trajectory " + id);
        }
        std::vector<double> state(d);
        for (int j = 0; j < d; ++j) state[j] = std::stod(fields[2 + j]);
        int iv = std::stoi(fields[2 + d]);
        int vaso = std::stoi(fields[3 + d]);
        double reward = std::stod(fields[4 + d]);
        const std::string& oc = fields[5 + d];
        if (oc != "pos" && oc != "neg")
            throw std::runtime_error("load_trajectories_csv: row " + std::to_string(row_no) +
                                     ": bad outcome '" + oc + "'");
        if (reward != 0.0 && reward != 1.0 && reward != -1.0)
            throw std::runtime_error("load_trajectories_csv: row " + std::to_string(row_no) +
                                     ": bad reward " + fields[4 + d]);
        if (!rewards.empty() && rewards.back() != 0.0)
            throw std::runtime_error("load_trajectories_csv: row " + std::to_string(row_no) +
                                     ": reward before the final step of trajectory " + id);
        cur.states.push_back(std::move(state));
        cur.actions.push_back(ActionPair{iv, vaso});
        cur.outcome = oc == "pos" ? Outcome::positive : Outcome::negative;
        rewards.push_back(reward);
    }
    flush();
    return out;
}

}  // namespace posnegdm
