#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "posnegdm/dualsight.hpp"
#include "posnegdm/mortality.hpp"

namespace posnegdm {

// Weights of the composite objective. eta scales the negative-trajectory
// action term; with eta < 0 the model is pushed away from fatal actions, and
// neg_ce_cap bounds each negative per-step CE before weighting so the term
// cannot dominate.
struct LossWeights {
    double alpha = 1.0;
    double beta = 0.1;
    double gamma = 1.0;
    double eta = -0.5;
    double neg_ce_cap = 10.0;

    void validate() const {
        if (alpha < 0 || beta < 0 || gamma < 0)
            throw std::invalid_argument("loss weights: alpha, beta, gamma must be >= 0");
        if (neg_ce_cap <= 0) throw std::invalid_argument("loss weights: neg_ce_cap must be > 0");
    }
};

struct DMTrainConfig {
    int batch_size = 64;
    double learning_rate = 1e-4;
    double weight_decay = 1e-4;
    long warmup_steps = 10000;
    int iterations = 2000;
    uint64_t seed = 1;
    LossWeights weights;
    int snapshot_interval = 50;  // last-good checkpoint cadence for divergence recovery
};

enum class ModelKind { posnegdm, dt, bc };

inline const char* model_kind_str(ModelKind k) {
    switch (k) {
        case ModelKind::posnegdm: return "posnegdm";
        case ModelKind::dt: return "dt";
        case ModelKind::bc: return "bc";
    }
    return "?";
}

inline ModelKind parse_model_kind(const std::string& s) {
    if (s == "posnegdm") return ModelKind::posnegdm;
    if (s == "dt") return ModelKind::dt;
    if (s == "bc") return ModelKind::bc;
    throw std::invalid_argument("unknown model kind '" + s + "' (expected posnegdm|dt|bc)");
}

struct TrainLogRow {
    int iteration;
    double l_action, l_state, l_survival, l_total, effective_lr;
};

struct TrainingDiverged : std::runtime_error {
    int iteration;
    explicit TrainingDiverged(int it)
        : std::runtime_error("training diverged (non-finite loss) at iteration " +
                             std::to_string(it) + "; model restored to last-good snapshot"),
          iteration(it) {}
};

// ---- loss terms ----------------------------------------------------------------

// MSE over unmasked window positions (all state-vector elements).
template <typename Real>
Tensor<Real> loss_state(const Tensor<Real>& pred_states, const Tensor<Real>& true_states,
                        const std::vector<uint8_t>& pad_mask) {
    size_t count = 0;
    for (auto m : pad_mask)
        if (m) ++count;
    if (count == 0) throw std::logic_error("loss_state: all positions masked out");
    return mse_masked_rows(pred_states, true_states, pad_mask);
}

// L_CE over positive-trajectory positions plus eta * capped L_CE over
// negative-trajectory positions.
template <typename Real>
Tensor<Real> loss_action_posneg(const Tensor<Real>& logits, const std::vector<int>& targets,
                                const std::vector<uint8_t>& real_mask,
                                const std::vector<uint8_t>& positive_mask,
                                const LossWeights& w) {
    std::vector<uint8_t> pos(real_mask.size()), neg(real_mask.size());
    for (size_t i = 0; i < real_mask.size(); ++i) {
        pos[i] = real_mask[i] && positive_mask[i];
        neg[i] = real_mask[i] && !positive_mask[i];
    }
    auto ce = ce_rows(logits, targets);
    auto pos_term = mean_masked_rows(ce, pos);
    auto neg_term = mean_masked_rows(clamp_max(ce, static_cast<Real>(w.neg_ce_cap)), neg);
    return add(pos_term, scale(neg_term, static_cast<Real>(w.eta)));
}

// Mean over unmasked predicted states of -log(mc(s)), i.e. cross entropy with
// a forced survival target. Gradients reach the DualSight weights through the
// frozen classifier but never its own weights.
template <typename Real>
Tensor<Real> loss_survival(const MortalityClassifier<Real>& mc_frozen,
                           const Tensor<Real>& pred_states,
                           const std::vector<uint8_t>& pad_mask) {
    if (!mc_frozen.frozen())
        throw std::logic_error("loss_survival: the mortality classifier must be frozen");
    auto logits = mc_frozen.forward_logits(pred_states);
    return mean_masked_rows(softplus(neg(logits)), pad_mask);
}

template <typename Real>
Tensor<Real> loss_total(const Tensor<Real>& l_action, const Tensor<Real>& l_state,
                        const Tensor<Real>& l_survival, const LossWeights& w) {
    return add(add(scale(l_action, static_cast<Real>(w.alpha)),
                   scale(l_state, static_cast<Real>(w.beta))),
               scale(l_survival, static_cast<Real>(w.gamma)));
}

// ---- training loops --------------------------------------------------------------

template <typename Real>
struct TrainResult {
    DualSight<Real> model;
    std::vector<TrainLogRow> log;
};

namespace train_detail {

template <typename Real>
WindowBatch<Real> sample_batch(const std::vector<Trajectory>& pool,
                               const std::vector<size_t>& eligible, int batch_size,
                               const DualSightConfig& cfg, RngStream& rng) {
    WindowBatch<Real> batch;
    batch.reserve_steps(batch_size, cfg.context_len, cfg.state_dim);
    for (int b = 0; b < batch_size; ++b) {
        const Trajectory& traj = pool[eligible[rng.uniform_int(eligible.size())]];
        int end_t = static_cast<int>(rng.uniform_int(traj.length()));
        batch.append_window(traj, end_t);
    }
    return batch;
}

}  // namespace train_detail

// Shared trainer for PosNegDM and the DT/BC baselines. PosNegDM uses the full
// composite objective with the frozen Feedback Reinforcer; DT keeps the same
// backbone with standard CE over all trajectories (eta=+1) and gamma=0; BC
// drops return tokens and trains on positive trajectories only with gamma=0.
// Both baselines keep the state head (beta) so the shared mortality evaluators
// can score their predicted states.
template <typename Real>
TrainResult<Real> train_decision_maker(ModelKind kind, const DatasetSplit& split,
                                       const MortalityClassifier<Real>* mc_frozen,
                                       DualSightConfig model_cfg, DMTrainConfig cfg) {
    cfg.weights.validate();
    if (split.train.empty()) throw std::invalid_argument("train: empty training split");
    if (!split.normalized) throw std::invalid_argument("train: split must be normalized first");

    LossWeights w = cfg.weights;
    if (kind == ModelKind::dt) {
        w.eta = 1.0;
        w.gamma = 0.0;
    } else if (kind == ModelKind::bc) {
        w.gamma = 0.0;
        model_cfg.use_return_tokens = false;
    } else {
        if (mc_frozen == nullptr)
            throw std::invalid_argument("train: posnegdm requires a mortality classifier");
        if (!mc_frozen->frozen())
            throw std::logic_error("train: the feedback reinforcer must be frozen");
    }
    model_cfg.state_dim = split.train[0].state_dim();
    bool use_mc = kind == ModelKind::posnegdm && w.gamma != 0.0;

    std::vector<size_t> eligible;
    for (size_t i = 0; i < split.train.size(); ++i)
        if (kind != ModelKind::bc || split.train[i].outcome == Outcome::positive)
            eligible.push_back(i);
    if (eligible.empty()) throw std::invalid_argument("train: no eligible trajectories");

    TrainResult<Real> result{DualSight<Real>(model_cfg, cfg.seed), {}};
    auto params = result.model.named_parameters();
    OptimizerState<Real> opt;
    opt.base_lr = static_cast<Real>(cfg.learning_rate);
    opt.weight_decay = static_cast<Real>(cfg.weight_decay);
    opt.warmup_steps = cfg.warmup_steps;

    RngStream data_rng(cfg.seed, "dm_data");
    RngStream drop_rng(cfg.seed, "dm_dropout");

    std::vector<std::vector<Real>> snapshot;
    auto take_snapshot = [&]() {
        snapshot.clear();
        for (auto& p : params) snapshot.push_back(p.tensor.values());
    };
    take_snapshot();

    for (int it = 1; it <= cfg.iterations; ++it) {
        auto batch = train_detail::sample_batch<Real>(split.train, eligible, cfg.batch_size,
                                                      model_cfg, data_rng);
        auto out = result.model.forward(batch, true, &drop_rng);

        auto l_action = loss_action_posneg(out.action_logits, batch.actions, batch.real,
                                           batch.positive, w);
        auto true_next = Tensor<Real>::from({batch.B * batch.K, batch.D}, batch.next_states);
        auto l_state = loss_state(out.state_pred, true_next, batch.has_next);
        auto l_survival = use_mc ? loss_survival(*mc_frozen, out.state_pred, batch.real)
                                 : Tensor<Real>::scalar(Real(0));
        auto l_total = loss_total(l_action, l_state, l_survival, w);

        if (!std::isfinite(static_cast<double>(l_total.value()))) {
            for (size_t i = 0; i < params.size(); ++i) params[i].tensor.values() = snapshot[i];
            throw TrainingDiverged(it);
        }

        zero_grads(params);
        backward(l_total);
        adam_step_with_warmup(params, opt);

        result.log.push_back({it, static_cast<double>(l_action.value()),
                              static_cast<double>(l_state.value()),
                              static_cast<double>(l_survival.value()),
                              static_cast<double>(l_total.value()),
                              static_cast<double>(opt.effective_lr(opt.step_count))});
        if (it % cfg.snapshot_interval == 0) take_snapshot();
    }
    return result;
}

template <typename Real>
TrainResult<Real> train_posnegdm(const DatasetSplit& split,
                                 const MortalityClassifier<Real>& mc_frozen,
                                 DualSightConfig model_cfg, const DMTrainConfig& cfg) {
    return train_decision_maker(ModelKind::posnegdm, split, &mc_frozen, model_cfg, cfg);
}

template <typename Real>
TrainResult<Real> train_baseline(ModelKind kind, const DatasetSplit& split,
                                 DualSightConfig model_cfg, const DMTrainConfig& cfg) {
    if (kind == ModelKind::posnegdm)
        throw std::invalid_argument("train_baseline: kind must be dt or bc");
    return train_decision_maker<Real>(kind, split, nullptr, model_cfg, cfg);
}

inline void save_training_log_csv(const std::vector<TrainLogRow>& log, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open training log " + path);
    out << "iteration,l_action,l_state,l_survival,l_total,effective_lr\n";
    char buf[160];
    for (const auto& r : log) {
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.iteration,
                      r.l_action, r.l_state, r.l_survival, r.l_total, r.effective_lr);
        out << buf;
    }
}

}  // namespace posnegdm
