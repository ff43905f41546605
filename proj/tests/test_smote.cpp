#include <doctest.h>

#include <cmath>

#include "posnegdm/rng.hpp"
#include "posnegdm/smote.hpp"

using namespace posnegdm;

namespace {

// Two gaussian blobs with a contested border region so DANGER points exist.
void make_imbalanced(std::vector<std::vector<double>>& states, std::vector<int>& labels,
                     int n_majority, int n_minority, uint64_t seed) {
    RngStream rng(seed, "smote_fixture");
    for (int i = 0; i < n_majority; ++i) {
        states.push_back({rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)});
        labels.push_back(0);
    }
    for (int i = 0; i < n_minority; ++i) {
        states.push_back({rng.normal(1.5, 1.0), rng.normal(1.5, 1.0)});
        labels.push_back(1);
    }
}

// is x on the segment p + u*(q-p) for some u in [0,1]?
bool on_some_segment(const std::vector<double>& x, const std::vector<std::vector<double>>& states,
                     const std::vector<int>& labels, int minority_label) {
    for (size_t a = 0; a < states.size(); ++a) {
        if (labels[a] != minority_label) continue;
        for (size_t b = 0; b < states.size(); ++b) {
            if (b == a || labels[b] != minority_label) continue;
            const auto &p = states[a], &q = states[b];
            // solve u from the first coordinate with nonzero span, check the rest
            double u = -1;
            bool ok = true;
            for (size_t j = 0; j < x.size(); ++j) {
                double span = q[j] - p[j];
                if (std::abs(span) < 1e-12) {
                    if (std::abs(x[j] - p[j]) > 1e-9) ok = false;
                    continue;
                }
                double uj = (x[j] - p[j]) / span;
                if (u < 0)
                    u = uj;
                else if (std::abs(uj - u) > 1e-9)
                    ok = false;
            }
            if (ok && u >= -1e-12 && u <= 1.0 + 1e-12) return true;
        }
    }
    return false;
}

}  // namespace

TEST_CASE("synthetic minority samples are convex combinations of minority pairs") {
    std::vector<std::vector<double>> states;
    std::vector<int> labels;
    make_imbalanced(states, labels, 60, 12, 1);
    auto res = borderline_smote(states, labels, 5, 5, 1.0, 7);
    REQUIRE(res.n_synthesized == 60 - 12);
    for (size_t i = states.size(); i < res.states.size(); ++i) {
        CHECK(res.labels[i] == 1);
        CHECK(on_some_segment(res.states[i], states, labels, 1));
    }
}

TEST_CASE("95/905 imbalance is brought to parity without touching the majority") {
    std::vector<std::vector<double>> states;
    std::vector<int> labels;
    make_imbalanced(states, labels, 905, 95, 2);
    auto res = borderline_smote(states, labels, 5, 5, 1.0, 3);
    size_t n_min = 0, n_maj = 0;
    for (int l : res.labels) (l == 1 ? n_min : n_maj)++;
    CHECK(n_min == 905);
    CHECK(n_maj == 905);
    CHECK(res.n_synthesized == 905 - 95);
    // originals preserved verbatim, in order
    REQUIRE(res.states.size() == states.size() + res.n_synthesized);
    for (size_t i = 0; i < states.size(); ++i) {
        CHECK(res.states[i] == states[i]);
        CHECK(res.labels[i] == labels[i]);
    }
}

TEST_CASE("noise points are never interpolation bases") {
    // Minority cluster near the origin plus one isolated minority outlier whose
    // m nearest neighbors are all majority. No synthetic point may involve it.
    std::vector<std::vector<double>> states;
    std::vector<int> labels;
    // minority cluster (6 points), tight
    for (int i = 0; i < 6; ++i) {
        states.push_back({0.0 + 0.01 * i, 0.0});
        labels.push_back(1);
    }
    // majority ring around the cluster border so the cluster has DANGER members
    for (int i = 0; i < 10; ++i) {
        states.push_back({0.03 + 0.01 * i, 0.02});
        labels.push_back(0);
    }
    // isolated minority noise point at (100,100), surrounded by majority
    states.push_back({100.0, 100.0});
    labels.push_back(1);
    for (int i = 0; i < 6; ++i) {
        states.push_back({100.2 + 0.01 * i, 100.0});
        labels.push_back(0);
    }

    auto res = borderline_smote(states, labels, 3, 5, 1.0, 11);
    CHECK_FALSE(res.fell_back_to_plain_smote);
    CHECK(res.n_synthesized > 0);
    // every synthetic point stays near the origin cluster: nothing is built
    // from the (100,100) outlier as a base
    for (size_t i = states.size(); i < res.states.size(); ++i) {
        CHECK(res.states[i][0] < 50.0);
        CHECK(res.states[i][1] < 50.0);
    }
}

TEST_CASE("fallback to plain interpolation is flagged when no border exists") {
    // Classes far apart: every minority point's m neighbors are minority, so
    // the DANGER set is empty.
    std::vector<std::vector<double>> states;
    std::vector<int> labels;
    for (int i = 0; i < 8; ++i) {
        states.push_back({0.0 + 0.01 * i, 0.0});
        labels.push_back(1);
    }
    for (int i = 0; i < 20; ++i) {
        states.push_back({1000.0 + 0.01 * i, 0.0});
        labels.push_back(0);
    }
    auto res = borderline_smote(states, labels, 5, 5, 1.0, 1);
    CHECK(res.fell_back_to_plain_smote);
    CHECK(res.n_synthesized == 12);
    for (size_t i = states.size(); i < res.states.size(); ++i)
        CHECK(on_some_segment(res.states[i], states, labels, 1));
}

TEST_CASE("oversampling is deterministic in the seed") {
    std::vector<std::vector<double>> states;
    std::vector<int> labels;
    make_imbalanced(states, labels, 80, 15, 4);
    auto a = borderline_smote(states, labels, 5, 5, 1.0, 42);
    auto b = borderline_smote(states, labels, 5, 5, 1.0, 42);
    CHECK(a.states == b.states);
    auto c = borderline_smote(states, labels, 5, 5, 1.0, 43);
    CHECK(a.states != c.states);
}

TEST_CASE("degenerate inputs are rejected") {
    std::vector<std::vector<double>> states{{0, 0}, {1, 1}};
    CHECK_THROWS_AS(borderline_smote(states, {0, 0}), std::invalid_argument);
    CHECK_THROWS_AS(borderline_smote(states, {0}), std::invalid_argument);
    CHECK_THROWS_AS(borderline_smote(states, {0, 1}, 5, 5), std::invalid_argument);
}
