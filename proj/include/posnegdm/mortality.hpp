#pragma once

#include <algorithm>
#include <stdexcept>
#include <vector>

#include "posnegdm/optimizer.hpp"
#include "posnegdm/smote.hpp"
#include "posnegdm/tensor.hpp"

namespace posnegdm {

// Survival-probability MLP: D -> 64 -> 64 -> 64 -> 64 -> 1, ReLU + dropout(0.2)
// after each hidden layer, logistic squash on the single output logit.
// Label convention: 1 = survival. Once frozen it acts as the Feedback
// Reinforcer: weights are read-only and dropout is disabled, but gradients
// still flow through it to its inputs.
template <typename Real>
class MortalityClassifier {
public:
    static constexpr int kHiddenWidth = 64;
    static constexpr int kNumLayers = 5;

    MortalityClassifier() = default;

    MortalityClassifier(int input_dim, uint64_t seed, Real dropout_rate = Real(0.2))
        : input_dim_(input_dim), dropout_rate_(dropout_rate) {
        RngStream rng(seed, "mc_init");
        int in = input_dim;
        for (int l = 0; l < kNumLayers; ++l) {
            int out = (l == kNumLayers - 1) ? 1 : kHiddenWidth;
            weights_.push_back(init_linear_weight<Real>(in, out, rng));
            biases_.push_back(init_zeros<Real>({1, out}));
            in = out;
        }
    }

    int input_dim() const { return input_dim_; }
    bool frozen() const { return frozen_; }
    Real dropout_rate() const { return dropout_rate_; }

    void freeze() {
        frozen_ = true;
        set_requires_grad(false);
    }

    void assert_mutable() const {
        if (frozen_)
            throw std::logic_error("mortality classifier is frozen; weight updates are rejected");
    }

    std::vector<NamedParam<Real>> named_parameters() {
        assert_mutable();
        return named_parameters_unchecked();
    }

    std::vector<NamedParam<Real>> named_parameters_unchecked() {
        std::vector<NamedParam<Real>> out;
        for (int l = 0; l < kNumLayers; ++l) {
            out.push_back({"mc.fc" + std::to_string(l) + ".weight", weights_[l]});
            out.push_back({"mc.fc" + std::to_string(l) + ".bias", biases_[l]});
        }
        return out;
    }

    // Forward to the raw survival logit, (N x 1). Stays in the caller's
    // autodiff graph, so a frozen classifier still routes gradients to the
    // input states.
    Tensor<Real> forward_logits(const Tensor<Real>& states, bool train = false,
                                RngStream* rng = nullptr) const {
        if (states.cols() != input_dim_)
            throw std::invalid_argument("mortality classifier: state dim " +
                                        std::to_string(states.cols()) + " != expected " +
                                        std::to_string(input_dim_));
        bool use_dropout = train && !frozen_;
        Tensor<Real> x = states;
        for (int l = 0; l < kNumLayers; ++l) {
            x = linear(x, weights_[l], biases_[l]);
            if (l + 1 < kNumLayers) {
                x = relu(x);
                x = dropout(x, dropout_rate_, use_dropout, rng);
            }
        }
        return x;
    }

    Tensor<Real> forward_probs(const Tensor<Real>& states, bool train = false,
                               RngStream* rng = nullptr) const {
        return sigmoid(forward_logits(states, train, rng));
    }

    // Survival probability of one state vector (eval mode).
    Real survival_probability(const std::vector<Real>& state) const {
        auto t = Tensor<Real>::from({1, input_dim_}, state);
        return forward_probs(t).values()[0];
    }

    uint64_t weight_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (int l = 0; l < kNumLayers; ++l) {
            h = fnv1a64(weights_[l].values().data(), weights_[l].size() * sizeof(Real), h);
            h = fnv1a64(biases_[l].values().data(), biases_[l].size() * sizeof(Real), h);
        }
        return h;
    }

    // Requires-grad toggling is how freezing keeps gradients out of the
    // weights while the graph still reaches the inputs.
    void set_requires_grad(bool rg) {
        for (auto& w : weights_) w.node()->requires_grad = rg;
        for (auto& b : biases_) b.node()->requires_grad = rg;
    }

private:
    int input_dim_ = 0;
    Real dropout_rate_ = Real(0.2);
    bool frozen_ = false;
    std::vector<Tensor<Real>> weights_;
    std::vector<Tensor<Real>> biases_;
};

template <typename Real>
struct MCTrainConfig {
    Real learning_rate = Real(1e-3);
    Real weight_decay = Real(1e-5);
    Real dropout = Real(0.2);
    int batch_size = 128;
    int max_iterations = 4000;
    int eval_interval = 100;
    int patience = 10;  // evaluations without val-accuracy improvement
    double val_fraction = 0.1;
    int smote_k = 5;
    int smote_m = 5;
    double smote_target_ratio = 1.0;
    uint64_t seed = 1;
};

struct MCEvalResult {
    double accuracy = 0.0;
    long tp = 0, tn = 0, fp = 0, fn = 0;
};

// Predicted-alive iff probability >= threshold (ties go to alive).
template <typename Real>
MCEvalResult mc_evaluate(const MortalityClassifier<Real>& mc,
                         const std::vector<std::vector<Real>>& states,
                         const std::vector<int>& labels, Real threshold = Real(0.5)) {
    MCEvalResult r;
    int d = mc.input_dim();
    const size_t chunk = 512;
    for (size_t base = 0; base < states.size(); base += chunk) {
        size_t n = std::min(chunk, states.size() - base);
        std::vector<Real> flat(n * d);
        for (size_t i = 0; i < n; ++i)
            std::copy(states[base + i].begin(), states[base + i].end(), flat.begin() + i * d);
        auto probs = mc.forward_probs(Tensor<Real>::from({(int)n, d}, std::move(flat)));
        for (size_t i = 0; i < n; ++i) {
            bool pred_alive = probs.values()[i] >= threshold;
            bool alive = labels[base + i] == 1;
            if (pred_alive && alive) ++r.tp;
            else if (!pred_alive && !alive) ++r.tn;
            else if (pred_alive && !alive) ++r.fp;
            else ++r.fn;
        }
    }
    size_t total = states.size();
    r.accuracy = total ? static_cast<double>(r.tp + r.tn) / static_cast<double>(total) : 0.0;
    return r;
}

// Trains the classifier on (state, survival-label) pairs. Borderline-SMOTE is
// applied to the training portion before batching; a held-out validation slice
// drives early stopping.
template <typename Real>
MortalityClassifier<Real> mc_train(const std::vector<std::vector<Real>>& states,
                                   const std::vector<int>& labels,
                                   const MCTrainConfig<Real>& cfg) {
    if (states.empty() || states.size() != labels.size())
        throw std::invalid_argument("mc_train: bad inputs");
    bool has0 = false, has1 = false;
    for (int l : labels) (l == 0 ? has0 : has1) = true;
    if (!has0 || !has1)
        throw std::invalid_argument("mc_train: both classes must be present (SMOTE undefined)");

    int d = static_cast<int>(states[0].size());
    RngStream data_rng(cfg.seed, "mc_data");
    RngStream drop_rng(cfg.seed, "mc_dropout");

    // validation slice (pre-SMOTE, stratification-free random)
    std::vector<size_t> idx(states.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (size_t i = idx.size() - 1; i > 0; --i) std::swap(idx[i], idx[data_rng.uniform_int(i + 1)]);
    size_t n_val = std::max<size_t>(1, static_cast<size_t>(states.size() * cfg.val_fraction));
    std::vector<std::vector<Real>> val_states, fit_states_r;
    std::vector<int> val_labels, fit_labels;
    std::vector<std::vector<double>> fit_states;
    for (size_t i = 0; i < idx.size(); ++i) {
        if (i < n_val) {
            val_states.push_back(states[idx[i]]);
            val_labels.push_back(labels[idx[i]]);
        } else {
            fit_states.emplace_back(states[idx[i]].begin(), states[idx[i]].end());
            fit_labels.push_back(labels[idx[i]]);
        }
    }

    auto aug = borderline_smote(fit_states, fit_labels, cfg.smote_k, cfg.smote_m,
                                cfg.smote_target_ratio, cfg.seed);

    size_t n_fit = aug.states.size();
    MortalityClassifier<Real> mc(d, cfg.seed, cfg.dropout);
    OptimizerState<Real> opt;
    opt.base_lr = cfg.learning_rate;
    opt.weight_decay = cfg.weight_decay;
    auto params = mc.named_parameters();

    double best_val = -1.0;
    int evals_since_best = 0;
    std::vector<std::vector<Real>> best_weights;
    auto snapshot = [&]() {
        best_weights.clear();
        for (auto& p : params) best_weights.push_back(p.tensor.values());
    };
    auto restore = [&]() {
        for (size_t i = 0; i < params.size(); ++i) params[i].tensor.values() = best_weights[i];
    };
    snapshot();

    std::vector<Real> batch_flat(size_t(cfg.batch_size) * d);
    std::vector<Real> batch_labels(cfg.batch_size);
    for (int it = 1; it <= cfg.max_iterations; ++it) {
        for (int b = 0; b < cfg.batch_size; ++b) {
            size_t i = data_rng.uniform_int(n_fit);
            for (int j = 0; j < d; ++j)
                batch_flat[size_t(b) * d + j] = static_cast<Real>(aug.states[i][j]);
            batch_labels[b] = static_cast<Real>(aug.labels[i]);
        }
        auto x = Tensor<Real>::from({cfg.batch_size, d}, batch_flat);
        auto logits = mc.forward_logits(x, true, &drop_rng);
        auto loss = bce_with_logits_mean(logits, batch_labels);
        zero_grads(params);
        backward(loss);
        adam_step_with_warmup(params, opt);

        if (it % cfg.eval_interval == 0) {
            double acc = mc_evaluate(mc, val_states, val_labels).accuracy;
            if (acc > best_val) {
                best_val = acc;
                evals_since_best = 0;
                snapshot();
            } else if (++evals_since_best >= cfg.patience) {
                break;
            }
        }
    }
    restore();
    return mc;
}

}  // namespace posnegdm
