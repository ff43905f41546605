#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "posnegdm/dualsight.hpp"
#include "posnegdm/training.hpp"

namespace posnegdm {

using Histogram5x5 = std::array<std::array<long, 5>, 5>;

inline long histogram_total(const Histogram5x5& h) {
    long s = 0;
    for (const auto& row : h)
        for (long v : row) s += v;
    return s;
}

struct MortalityBreakdown {
    double positive_data_pct = 0.0;
    double negative_data_pct = 0.0;
    double total_pct = 0.0;
    long deaths_pos = 0, deaths_neg = 0, n_pos = 0, n_neg = 0;
};

struct EvalReport {
    double action_accuracy_positive_pct = 0.0;
    MortalityBreakdown mortality_step_by_step;
    double mortality_complete_traj_pct = 0.0;
    bool mortality_available = true;  // false when the state head was not trained
    std::map<std::string, Histogram5x5> histograms;
    uint64_t seed = 0;
};

namespace eval_detail {

// Number of trailing steps evaluated per trajectory ("last 10 time-steps",
// min(10, T) for short trajectories).
inline int last_steps(const Trajectory& t, int n = 10) {
    return std::min<int>(n, static_cast<int>(t.length()));
}

// Batch of the windows ending at each of the last n steps of a trajectory.
template <typename Real>
WindowBatch<Real> last_step_windows(const Trajectory& traj, int context_len, int n = 10) {
    int t_len = static_cast<int>(traj.length());
    int count = last_steps(traj, n);
    WindowBatch<Real> batch;
    batch.reserve_steps(count, context_len, traj.state_dim());
    for (int t = t_len - count; t < t_len; ++t) batch.append_window(traj, t);
    return batch;
}

template <typename Real>
int argmax_action(const Real* logits, int n_actions) {
    int best = 0;
    for (int a = 1; a < n_actions; ++a)
        if (logits[a] > logits[best]) best = a;
    return best;
}

}  // namespace eval_detail

// Action-prediction accuracy over the last min(10, T) steps of each positive
// test trajectory, teacher-forced context from ground truth.
template <typename Real>
double action_accuracy_last10(const DualSight<Real>& model,
                              const std::vector<Trajectory>& positive_test) {
    if (positive_test.empty())
        throw std::invalid_argument("action_accuracy_last10: empty positive test set");
    long matched = 0, total = 0;
    int k = model.config().context_len;
    int n_act = model.config().n_actions;
    for (const auto& traj : positive_test) {
        if (traj.outcome != Outcome::positive) continue;
        auto batch = eval_detail::last_step_windows<Real>(traj, k);
        auto out = model.forward(batch);
        for (int b = 0; b < batch.B; ++b) {
            int last = b * batch.K + (batch.K - 1);
            const Real* logits = out.action_logits.values().data() + size_t(last) * n_act;
            int pred = eval_detail::argmax_action(logits, n_act);
            if (pred == batch.actions[last]) ++matched;
            ++total;
        }
    }
    if (total == 0) throw std::invalid_argument("action_accuracy_last10: no positive trajectories");
    return 100.0 * static_cast<double>(matched) / static_cast<double>(total);
}

// Step-by-step protocol: teacher-forced contexts over the last min(10, T)
// steps; each predicted next state is classified at threshold 0.5; a
// trajectory counts as a death iff any predicted state classifies dead.
template <typename Real>
MortalityBreakdown mortality_step_by_step(const DualSight<Real>& model,
                                          const MortalityClassifier<Real>& mc_frozen,
                                          const std::vector<Trajectory>& test,
                                          Real threshold = Real(0.5)) {
    MortalityBreakdown out;
    int k = model.config().context_len;
    int d = model.config().state_dim;
    for (const auto& traj : test) {
        auto batch = eval_detail::last_step_windows<Real>(traj, k);
        auto pred = model.forward(batch).state_pred;
        // classify the window-final predicted next state of every window
        std::vector<Real> finals;
        finals.reserve(size_t(batch.B) * d);
        for (int b = 0; b < batch.B; ++b) {
            int last = b * batch.K + (batch.K - 1);
            const Real* sp = pred.values().data() + size_t(last) * d;
            finals.insert(finals.end(), sp, sp + d);
        }
        auto probs = mc_frozen.forward_probs(Tensor<Real>::from({batch.B, d}, std::move(finals)));
        bool death = false;
        for (int b = 0; b < batch.B; ++b)
            if (probs.values()[b] < threshold) death = true;
        if (traj.outcome == Outcome::positive) {
            ++out.n_pos;
            if (death) ++out.deaths_pos;
        } else {
            ++out.n_neg;
            if (death) ++out.deaths_neg;
        }
    }
    if (out.n_pos) out.positive_data_pct = 100.0 * out.deaths_pos / static_cast<double>(out.n_pos);
    if (out.n_neg) out.negative_data_pct = 100.0 * out.deaths_neg / static_cast<double>(out.n_neg);
    long n = out.n_pos + out.n_neg;
    if (n) out.total_pct = 100.0 * (out.deaths_pos + out.deaths_neg) / static_cast<double>(n);
    return out;
}

// Complete-trajectory protocol: a 10-step autoregressive rollout from each
// test trajectory's initial state; death iff any rolled-out state classifies
// dead.
template <typename Real>
double mortality_complete_trajectory(const DualSight<Real>& model,
                                     const MortalityClassifier<Real>& mc_frozen,
                                     const std::vector<Trajectory>& test, int horizon = 10,
                                     Real threshold = Real(0.5)) {
    if (test.empty()) return 0.0;
    if (horizon == 0) return 0.0;
    long deaths = 0;
    for (const auto& traj : test) {
        std::vector<Real> s0(traj.states[0].begin(), traj.states[0].end());
        auto roll = model.rollout(s0, Real(1), horizon, &mc_frozen);
        for (Real p : roll.survival_probs)
            if (p < threshold) {
                ++deaths;
                break;
            }
    }
    return 100.0 * static_cast<double>(deaths) / static_cast<double>(test.size());
}

// 5x5 (iv_bin x vaso_bin) counts over a list of action indices.
inline Histogram5x5 action_histogram_5x5(const std::vector<int>& action_indices) {
    Histogram5x5 h{};
    for (int idx : action_indices) {
        ActionPair a = decode_action(idx);
        ++h[a.iv_bin][a.vaso_bin];
    }
    return h;
}

// Expert and model action streams over the evaluated (last min(10,T)) steps,
// split by trajectory outcome. Cohort keys: ground_truth_pos/neg, model_pos/neg.
template <typename Real>
std::map<std::string, Histogram5x5> collect_action_histograms(
    const DualSight<Real>& model, const std::vector<Trajectory>& test) {
    std::map<std::string, std::vector<int>> streams{{"ground_truth_pos", {}},
                                                    {"ground_truth_neg", {}},
                                                    {"model_pos", {}},
                                                    {"model_neg", {}}};
    int k = model.config().context_len;
    int n_act = model.config().n_actions;
    for (const auto& traj : test) {
        bool pos = traj.outcome == Outcome::positive;
        auto batch = eval_detail::last_step_windows<Real>(traj, k);
        auto out = model.forward(batch);
        for (int b = 0; b < batch.B; ++b) {
            int last = b * batch.K + (batch.K - 1);
            streams[pos ? "ground_truth_pos" : "ground_truth_neg"].push_back(batch.actions[last]);
            const Real* logits = out.action_logits.values().data() + size_t(last) * n_act;
            streams[pos ? "model_pos" : "model_neg"].push_back(
                eval_detail::argmax_action(logits, n_act));
        }
    }
    std::map<std::string, Histogram5x5> result;
    for (auto& [name, actions] : streams) result[name] = action_histogram_5x5(actions);
    return result;
}

template <typename Real>
EvalReport evaluate_model(const DualSight<Real>& model, const MortalityClassifier<Real>& mc,
                          const std::vector<Trajectory>& test, uint64_t seed,
                          bool mortality_available = true) {
    EvalReport r;
    r.seed = seed;
    std::vector<Trajectory> positive;
    for (const auto& t : test)
        if (t.outcome == Outcome::positive) positive.push_back(t);
    r.action_accuracy_positive_pct = action_accuracy_last10(model, positive);
    r.mortality_available = mortality_available;
    if (mortality_available) {
        r.mortality_step_by_step = mortality_step_by_step(model, mc, test);
        r.mortality_complete_traj_pct = mortality_complete_trajectory(model, mc, test);
    }
    r.histograms = collect_action_histograms(model, test);
    return r;
}

// ---- sweeps -----------------------------------------------------------------------

struct AblationRow {
    double value;
    double accuracy_pct;
    double stepwise_mortality_pct;
    double complete_traj_mortality_pct;
    bool mortality_available;  // false for beta = 0 (no state head trained)
};

enum class AblationParam { alpha, beta, gamma };

inline const char* ablation_param_str(AblationParam p) {
    switch (p) {
        case AblationParam::alpha: return "alpha";
        case AblationParam::beta: return "beta";
        case AblationParam::gamma: return "gamma";
    }
    return "?";
}

inline AblationParam parse_ablation_param(const std::string& s) {
    if (s == "alpha") return AblationParam::alpha;
    if (s == "beta") return AblationParam::beta;
    if (s == "gamma") return AblationParam::gamma;
    throw std::invalid_argument("unknown ablation parameter '" + s + "'");
}

// Trains one PosNegDM per value of the swept weight (identical seed, other
// weights at their defaults) and evaluates each.
template <typename Real>
std::vector<AblationRow> ablation_sweep(AblationParam param, const std::vector<double>& values,
                                        const DMTrainConfig& base_cfg,
                                        const DualSightConfig& model_cfg,
                                        const DatasetSplit& split,
                                        const MortalityClassifier<Real>& mc_frozen) {
    std::vector<AblationRow> rows;
    for (double v : values) {
        if (!(v >= 0.0) || !std::isfinite(v))
            throw std::invalid_argument("ablation_sweep: values must be finite and >= 0");
        DMTrainConfig cfg = base_cfg;
        switch (param) {
            case AblationParam::alpha: cfg.weights.alpha = v; break;
            case AblationParam::beta: cfg.weights.beta = v; break;
            case AblationParam::gamma: cfg.weights.gamma = v; break;
        }
        auto trained = train_posnegdm(split, mc_frozen, model_cfg, cfg);
        bool mortality_ok = !(param == AblationParam::beta && v == 0.0);
        auto report = evaluate_model(trained.model, mc_frozen, split.test, cfg.seed, mortality_ok);
        rows.push_back({v, report.action_accuracy_positive_pct,
                        mortality_ok ? report.mortality_step_by_step.total_pct : -1.0,
                        mortality_ok ? report.mortality_complete_traj_pct : -1.0, mortality_ok});
    }
    return rows;
}

struct SeedRow {
    uint64_t seed;
    double accuracy_pct;
    double stepwise_mortality_pct;
    double complete_traj_mortality_pct;
};

struct SeedSummary {
    std::vector<SeedRow> rows;
    SeedRow mean{0, 0, 0, 0};
    SeedRow stddev{0, 0, 0, 0};
};

template <typename Real>
SeedSummary seed_sensitivity(const DMTrainConfig& base_cfg, const DualSightConfig& model_cfg,
                             const std::vector<uint64_t>& seeds, const DatasetSplit& split,
                             const MortalityClassifier<Real>& mc_frozen) {
    if (seeds.size() < 2) throw std::invalid_argument("seed_sensitivity: need at least 2 seeds");
    SeedSummary out;
    for (uint64_t s : seeds) {
        DMTrainConfig cfg = base_cfg;
        cfg.seed = s;
        auto trained = train_posnegdm(split, mc_frozen, model_cfg, cfg);
        auto report = evaluate_model(trained.model, mc_frozen, split.test, s);
        out.rows.push_back({s, report.action_accuracy_positive_pct,
                            report.mortality_step_by_step.total_pct,
                            report.mortality_complete_traj_pct});
    }
    auto agg = [&](auto field) {
        double m = 0;
        for (const auto& r : out.rows) m += r.*field;
        m /= static_cast<double>(out.rows.size());
        double var = 0;
        for (const auto& r : out.rows) var += (r.*field - m) * (r.*field - m);
        var /= static_cast<double>(out.rows.size() - 1);  // sample std
        return std::pair<double, double>(m, std::sqrt(var));
    };
    auto [ma, sa] = agg(&SeedRow::accuracy_pct);
    auto [ms, ss] = agg(&SeedRow::stepwise_mortality_pct);
    auto [mc_m, mc_s] = agg(&SeedRow::complete_traj_mortality_pct);
    out.mean = {0, ma, ms, mc_m};
    out.stddev = {0, sa, ss, mc_s};
    return out;
}

}  // namespace posnegdm
