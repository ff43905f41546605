#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "posnegdm/dataset.hpp"
#include "posnegdm/rng.hpp"

namespace posnegdm {

// Synthetic sepsis-like cohort. Each patient carries a latent health scalar
// with action-dependent drift: the patient-specific correct action improves
// health, wrong actions worsen it. A block of state features tracks latent
// health (so outcome is learnable from single states) and two features encode
// which action is correct (so the expert policy is learnable from states).
struct CohortConfig {
    int n_trajectories = 2000;
    int state_dim = 46;
    int min_len = 10;
    int max_len = 20;
    double mortality_target = 0.095;
    uint64_t seed = 1;
};

namespace synth_detail {

constexpr double kDeathThreshold = 0.30;
constexpr int kHealthFeatures = 8;  // features 2..9 track latent health

inline void fill_state(std::vector<double>& s, double health, double sev_signal,
                       double resp_signal, int d, RngStream& rng) {
    s.assign(d, 0.0);
    s[0] = sev_signal + rng.normal(0.0, 0.02);
    s[1] = resp_signal + rng.normal(0.0, 0.02);
    for (int j = 0; j < kHealthFeatures; ++j) {
        double scl = 0.5 + 0.25 * j;  // varied scales across the health block
        s[2 + j] = health * scl + rng.normal(0.0, 0.08);
    }
    for (int j = 2 + kHealthFeatures; j < d; ++j) s[j] = rng.normal(0.0, 1.0);
}

}  // namespace synth_detail

inline Trajectory generate_trajectory(const CohortConfig& cfg, RngStream rng, size_t index) {
    using namespace synth_detail;
    Trajectory traj;
    traj.id = "p" + std::to_string(index);

    int len = cfg.min_len + static_cast<int>(rng.uniform_int(cfg.max_len - cfg.min_len + 1));

    // Patient-specific correct action region, observable through features 0/1.
    int iv_star = static_cast<int>(rng.uniform_int(5));
    int vaso_star = static_cast<int>(rng.uniform_int(5));
    double sev_signal = (iv_star + 0.5) / 5.0;
    double resp_signal = (vaso_star + 0.5) / 5.0;

    // Frail patients start unhealthy and receive mostly wrong treatment; the
    // outcome still falls out of the latent-health dynamics below.
    bool frail = rng.bernoulli(cfg.mortality_target);
    double health = frail ? rng.normal(0.42, 0.04) : rng.normal(0.78, 0.05);
    double p_correct = frail ? 0.15 : 0.97;

    for (int t = 0; t < len; ++t) {
        std::vector<double> s;
        fill_state(s, health, sev_signal, resp_signal, cfg.state_dim, rng);
        traj.states.push_back(std::move(s));

        ActionPair a;
        if (rng.bernoulli(p_correct)) {
            a = ActionPair{iv_star, vaso_star};
        } else {
            // a wrong action, biased away from the correct cell
            do {
                a = ActionPair{static_cast<int>(rng.uniform_int(5)),
                               static_cast<int>(rng.uniform_int(5))};
            } while (a.iv_bin == iv_star && a.vaso_bin == vaso_star);
        }
        traj.actions.push_back(a);

        bool correct = a.iv_bin == iv_star && a.vaso_bin == vaso_star;
        health += (correct ? 0.015 : -0.055) + rng.normal(0.0, 0.01);
        health = std::min(health, 1.2);
    }

    bool died = health < kDeathThreshold;
    traj.outcome = died ? Outcome::negative : Outcome::positive;
    traj.terminal_reward = died ? -1.0 : 1.0;
    traj.returns_to_go.assign(len, traj.terminal_reward);
    return traj;
}

inline std::vector<Trajectory> generate_synthetic_cohort(const CohortConfig& cfg) {
    if (cfg.n_trajectories <= 0 || cfg.state_dim < 10 || cfg.min_len < 1 ||
        cfg.max_len < cfg.min_len)
        throw std::invalid_argument("generate_synthetic_cohort: invalid config");
    if (!(cfg.mortality_target > 0.0 && cfg.mortality_target < 1.0))
        throw std::invalid_argument("generate_synthetic_cohort: mortality_target must be in (0,1)");
    RngStream root(cfg.seed, "cohort");
    std::vector<Trajectory> out;
    out.reserve(cfg.n_trajectories);
    // Per-trajectory child streams keep generation order-independent.
    for (int i = 0; i < cfg.n_trajectories; ++i)
        out.push_back(generate_trajectory(cfg, root.child(i), i));
    return out;
}

}  // namespace posnegdm
