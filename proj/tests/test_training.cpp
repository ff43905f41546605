#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "posnegdm/synthetic.hpp"
#include "posnegdm/training.hpp"

using namespace posnegdm;
using Tf = Tensor<float>;

namespace {

DualSightConfig tiny_config(int state_dim = 12) {
    DualSightConfig cfg;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.embed_dim = 16;
    cfg.context_len = 3;
    cfg.dropout = 0.0;
    cfg.state_dim = state_dim;
    return cfg;
}

DatasetSplit tiny_split(int n, uint64_t seed, double mortality = 0.3) {
    CohortConfig cfg;
    cfg.n_trajectories = n;
    cfg.state_dim = 12;
    cfg.min_len = 6;
    cfg.max_len = 10;
    cfg.mortality_target = mortality;
    cfg.seed = seed;
    return normalize_states(split_train_test(generate_synthetic_cohort(cfg), 0.25, seed));
}

}  // namespace

TEST_CASE("action loss on all-positive rows is plain cross entropy") {
    auto logits = Tf::from({2, 25}, std::vector<float>(50, 0.0f), true);
    std::vector<int> targets{3, 7};
    std::vector<uint8_t> real{1, 1}, positive{1, 1};
    LossWeights w;
    auto l = loss_action_posneg(logits, targets, real, positive, w);
    CHECK(l.value() == doctest::Approx(std::log(25.0)).epsilon(1e-6));
}

TEST_CASE("negative rows are weighted by eta") {
    auto logits = Tf::from({2, 25}, std::vector<float>(50, 0.0f), true);
    std::vector<int> targets{3, 7};
    std::vector<uint8_t> real{1, 1};
    std::vector<uint8_t> positive{1, 0};  // second row is from a fatal trajectory
    LossWeights w;  // eta = -0.5
    auto l = loss_action_posneg(logits, targets, real, positive, w);
    // ln25 - 0.5*ln25 = 0.5*ln25 ~ 1.6094
    CHECK(l.value() == doctest::Approx(0.5 * std::log(25.0)).epsilon(1e-6));

    w.eta = 0.0;  // negatives contribute nothing
    auto l0 = loss_action_posneg(logits, targets, real, positive, w);
    CHECK(l0.value() == doctest::Approx(std::log(25.0)).epsilon(1e-6));
}

TEST_CASE("padded positions are excluded from the action loss") {
    // row 1 is a pad carrying absurd logits; only row 0 counts
    auto logits = Tf::from({2, 25}, [] {
        std::vector<float> v(50, 0.0f);
        for (int a = 0; a < 25; ++a) v[25 + a] = 1000.0f * a;
        return v;
    }(), true);
    std::vector<int> targets{5, 0};
    std::vector<uint8_t> real{1, 0}, positive{1, 1};
    LossWeights w;
    auto l = loss_action_posneg(logits, targets, real, positive, w);
    CHECK(l.value() == doctest::Approx(std::log(25.0)).epsilon(1e-6));
}

TEST_CASE("negative action term is bounded by |eta| times the cap") {
    // confident logits pointing at the target of a fatal row: CE huge without a cap
    std::vector<float> v(25, 0.0f);
    v[4] = -500.0f;  // target gets tiny probability -> CE ~ 500+
    for (int a = 0; a < 25; ++a)
        if (a != 4) v[a] = 10.0f;
    auto logits = Tf::from({1, 25}, v, true);
    std::vector<int> targets{4};
    std::vector<uint8_t> real{1}, positive{0};
    LossWeights w;
    auto l = loss_action_posneg(logits, targets, real, positive, w);
    CHECK(std::abs(l.value()) <= std::abs(w.eta) * w.neg_ce_cap + 1e-6);
    CHECK(l.value() == doctest::Approx(w.eta * w.neg_ce_cap).epsilon(1e-6));
}

TEST_CASE("state loss respects the mask and rejects an all-masked batch") {
    auto pred = Tf::from({2, 3}, {1, 1, 1, 9, 9, 9}, true);
    auto truth = Tf::from({2, 3}, {0, 0, 0, 0, 0, 0});
    auto l = loss_state(pred, truth, {1, 0});
    CHECK(l.value() == doctest::Approx(1.0));
    CHECK_THROWS_AS(loss_state(pred, truth, std::vector<uint8_t>{0, 0}), std::logic_error);
}

TEST_CASE("survival loss is -log of the classifier's survival probability") {
    MortalityClassifier<float> mc(4, 1);
    // zero the final layer so every probability is exactly one half
    for (auto& p : mc.named_parameters_unchecked())
        if (p.name == "mc.fc4.weight")
            std::fill(p.tensor.values().begin(), p.tensor.values().end(), 0.0f);
    CHECK_THROWS_AS(loss_survival(mc, Tf::zeros({1, 4}), std::vector<uint8_t>{1}),
                    std::logic_error);  // must be frozen first
    mc.freeze();
    auto l = loss_survival(mc, Tf::zeros({2, 4}), std::vector<uint8_t>{1, 1});
    CHECK(l.value() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("total loss is the exact weighted sum of its components") {
    auto a = Tf::scalar(2.0f), s = Tf::scalar(3.0f), v = Tf::scalar(5.0f);
    LossWeights w;  // alpha 1, beta 0.1, gamma 1
    auto t = loss_total(a, s, v, w);
    CHECK(t.value() == doctest::Approx(2.0 + 0.3 + 5.0).epsilon(1e-6));
    w.alpha = 2.0;
    w.beta = 0.5;
    w.gamma = 0.0;
    CHECK(loss_total(a, s, v, w).value() == doctest::Approx(4.0 + 1.5).epsilon(1e-6));
    w.alpha = -1;
    CHECK_THROWS_AS(w.validate(), std::invalid_argument);
}

TEST_CASE("short training run is seed-deterministic and logs every iteration") {
    auto split = tiny_split(40, 3);
    std::vector<std::vector<float>> states;
    std::vector<int> labels;
    for (const auto& t : split.train)
        for (const auto& s : t.states) {
            states.emplace_back(s.begin(), s.end());
            labels.push_back(t.outcome == Outcome::positive ? 1 : 0);
        }
    MCTrainConfig<float> mcfg;
    mcfg.max_iterations = 60;
    mcfg.eval_interval = 30;
    auto mc = mc_train(states, labels, mcfg);
    mc.freeze();

    DMTrainConfig cfg;
    cfg.batch_size = 8;
    cfg.iterations = 12;
    cfg.warmup_steps = 10;
    cfg.learning_rate = 1e-3;
    cfg.seed = 5;
    auto r1 = train_posnegdm(split, mc, tiny_config(), cfg);
    auto r2 = train_posnegdm(split, mc, tiny_config(), cfg);
    CHECK(r1.model.weight_hash() == r2.model.weight_hash());
    REQUIRE(r1.log.size() == 12);
    for (size_t i = 0; i < r1.log.size(); ++i) {
        CHECK(r1.log[i].iteration == (int)i + 1);
        CHECK(r1.log[i].l_total == r2.log[i].l_total);
        CHECK(std::isfinite(r1.log[i].l_total));
    }
    // warmup shows in the logged lr
    CHECK(r1.log[0].effective_lr == doctest::Approx(1e-4));
    CHECK(r1.log[9].effective_lr == doctest::Approx(1e-3));

    // classifier untouched by the run
    CHECK_THROWS_AS(mc.named_parameters(), std::logic_error);
}

TEST_CASE("posnegdm training requires a frozen classifier") {
    auto split = tiny_split(20, 7);
    MortalityClassifier<float> mc(12, 1);
    DMTrainConfig cfg;
    cfg.iterations = 1;
    cfg.batch_size = 4;
    CHECK_THROWS_AS(train_posnegdm(split, mc, tiny_config(), cfg), std::logic_error);
    auto raw = split;
    raw.normalized = false;
    mc.freeze();
    CHECK_THROWS_AS(train_posnegdm(raw, mc, tiny_config(), cfg), std::invalid_argument);
}

TEST_CASE("behavioral cloning trains on surviving trajectories only") {
    auto split = tiny_split(40, 9, 0.4);
    DMTrainConfig cfg;
    cfg.batch_size = 16;
    cfg.iterations = 8;
    cfg.warmup_steps = 10;
    cfg.seed = 2;
    auto r = train_baseline<float>(ModelKind::bc, split, tiny_config(), cfg);
    CHECK_FALSE(r.model.config().use_return_tokens);
    // with only positive rows and gamma=0, l_survival stays 0 and l_action >= 0
    for (const auto& row : r.log) {
        CHECK(row.l_survival == 0.0);
        CHECK(row.l_action >= 0.0);
    }
    CHECK_THROWS_AS(train_baseline<float>(ModelKind::posnegdm, split, tiny_config(), cfg),
                    std::invalid_argument);
}

TEST_CASE("return-conditioned baseline uses plain CE over all trajectories") {
    auto split = tiny_split(30, 11, 0.4);
    DMTrainConfig cfg;
    cfg.batch_size = 8;
    cfg.iterations = 6;
    cfg.warmup_steps = 10;
    auto r = train_baseline<float>(ModelKind::dt, split, tiny_config(), cfg);
    CHECK(r.model.config().use_return_tokens);
    // eta=+1: both cohorts add positive CE, so the action loss is positive
    for (const auto& row : r.log) {
        CHECK(row.l_action > 0.0);
        CHECK(row.l_survival == 0.0);
    }
}

TEST_CASE("training log round-trips through CSV") {
    std::vector<TrainLogRow> log{{1, 3.2, 1.0, 0.7, 4.0, 1e-4}, {2, 3.0, 0.9, 0.6, 3.8, 2e-4}};
    auto path = std::filesystem::temp_directory_path() / "trainlog.csv";
    save_training_log_csv(log, path.string());
    std::ifstream in(path);
    std::string header, row1;
    std::getline(in, header);
    std::getline(in, row1);
    CHECK(header == "iteration,l_action,l_state,l_survival,l_total,effective_lr");
    CHECK(row1.substr(0, 2) == "1,");
    std::filesystem::remove(path);
}
