#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "posnegdm/rng.hpp"

namespace posnegdm {

struct SmoteResult {
    std::vector<std::vector<double>> states;
    std::vector<int> labels;
    bool fell_back_to_plain_smote = false;
    size_t n_synthesized = 0;
};

namespace smote_detail {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

// Indices of the k nearest points to `query` among `pool` (excluding self via
// skip_index); ties broken by index for determinism.
inline std::vector<size_t> k_nearest(const std::vector<std::vector<double>>& points,
                                     const std::vector<size_t>& pool, size_t self,
                                     const std::vector<double>& query, size_t k) {
    std::vector<std::pair<double, size_t>> dist;
    dist.reserve(pool.size());
    for (size_t idx : pool) {
        if (idx == self) continue;
        dist.emplace_back(sq_dist(points[idx], query), idx);
    }
    size_t kk = std::min(k, dist.size());
    std::partial_sort(dist.begin(), dist.begin() + kk, dist.end());
    std::vector<size_t> out(kk);
    for (size_t i = 0; i < kk; ++i) out[i] = dist[i].second;
    return out;
}

}  // namespace smote_detail

// Borderline-SMOTE over a binary dataset. Minority points whose m nearest
// neighbors (across both classes) contain >= m/2 but < m majority points are
// DANGER points; synthetic minority samples are p + u*(q - p) for a random
// minority neighbor q of a DANGER base p. Noise points (all m neighbors
// majority) are never used as bases. Synthesis stops once
// minority/majority == target_ratio. If no DANGER point exists, falls back to
// plain SMOTE over all minority points and flags the result.
inline SmoteResult borderline_smote(const std::vector<std::vector<double>>& states,
                                    const std::vector<int>& labels, int k = 5, int m = 5,
                                    double target_ratio = 1.0, uint64_t seed = 0) {
    using namespace smote_detail;
    if (states.size() != labels.size())
        throw std::invalid_argument("borderline_smote: state/label count mismatch");
    size_t n0 = 0, n1 = 0;
    for (int l : labels) (l == 0 ? n0 : n1)++;
    if (n0 == 0 || n1 == 0)
        throw std::invalid_argument("borderline_smote: both classes must be present");
    int minority_label = n0 < n1 ? 0 : 1;
    size_t n_min = std::min(n0, n1), n_maj = std::max(n0, n1);
    if (static_cast<size_t>(k) >= n_min || static_cast<size_t>(m) >= n_min)
        throw std::invalid_argument("borderline_smote: k and m must be below the minority count");

    std::vector<size_t> minority, all(states.size());
    std::iota(all.begin(), all.end(), 0);
    for (size_t i = 0; i < states.size(); ++i)
        if (labels[i] == minority_label) minority.push_back(i);

    // classify minority points: DANGER vs safe vs noise
    std::vector<size_t> danger;
    for (size_t p : minority) {
        auto nbrs = k_nearest(states, all, p, states[p], m);
        int majority_count = 0;
        for (size_t nb : nbrs)
            if (labels[nb] != minority_label) ++majority_count;
        if (2 * majority_count >= m && majority_count < m) danger.push_back(p);
    }

    SmoteResult result;
    result.states = states;
    result.labels = labels;
    const std::vector<size_t>* bases = &danger;
    if (danger.empty()) {
        result.fell_back_to_plain_smote = true;
        bases = &minority;
    }

    size_t target_min = static_cast<size_t>(std::llround(target_ratio * static_cast<double>(n_maj)));
    RngStream rng(seed, "smote");
    size_t cur_min = n_min;
    while (cur_min < target_min) {
        size_t p = (*bases)[rng.uniform_int(bases->size())];
        auto nbrs = k_nearest(states, minority, p, states[p], k);
        size_t q = nbrs[rng.uniform_int(nbrs.size())];
        double u = rng.uniform();
        std::vector<double> synth(states[p].size());
        for (size_t j = 0; j < synth.size(); ++j)
            synth[j] = states[p][j] + u * (states[q][j] - states[p][j]);
        result.states.push_back(std::move(synth));
        result.labels.push_back(minority_label);
        ++cur_min;
        ++result.n_synthesized;
    }
    return result;
}

}  // namespace posnegdm
