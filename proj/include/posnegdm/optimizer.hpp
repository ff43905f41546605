#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "posnegdm/tensor.hpp"

namespace posnegdm {

// Named parameter handle; the name is used for checkpoints and diagnostics.
template <typename Real>
struct NamedParam {
    std::string name;
    Tensor<Real> tensor;
};

template <typename Real>
struct OptimizerState {
    long step_count = 0;
    std::vector<std::vector<Real>> first_moment;
    std::vector<std::vector<Real>> second_moment;
    Real base_lr = Real(1e-4);
    Real weight_decay = Real(0);
    long warmup_steps = 0;
    Real beta1 = Real(0.9);
    Real beta2 = Real(0.999);
    Real epsilon = Real(1e-8);

    Real effective_lr(long t) const {
        if (warmup_steps <= 0) return base_lr;
        return base_lr * std::min(Real(1), static_cast<Real>(t) / static_cast<Real>(warmup_steps));
    }
};

// Adam with bias correction, decoupled weight decay and linear warmup.
// Weight decay multiplies the parameter by (1 - lr*wd) before the Adam delta.
template <typename Real>
void adam_step_with_warmup(std::vector<NamedParam<Real>>& params, OptimizerState<Real>& state) {
    if (state.first_moment.empty()) {
        for (auto& p : params) {
            state.first_moment.emplace_back(p.tensor.size(), Real(0));
            state.second_moment.emplace_back(p.tensor.size(), Real(0));
        }
    }
    if (state.first_moment.size() != params.size())
        throw std::invalid_argument("adam: optimizer state does not match parameter list");

    state.step_count += 1;
    Real lr = state.effective_lr(state.step_count);
    Real bc1 = Real(1) - std::pow(state.beta1, static_cast<Real>(state.step_count));
    Real bc2 = Real(1) - std::pow(state.beta2, static_cast<Real>(state.step_count));

    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& t = params[pi].tensor;
        if (t.grad().size() != t.size())
            continue;  // parameter untouched this step (no grad buffer yet)
        auto& m = state.first_moment[pi];
        auto& v = state.second_moment[pi];
        if (m.size() != t.size())
            throw std::invalid_argument("adam: moment shape mismatch for " + params[pi].name);
        auto& val = t.values();
        auto& g = t.grad();
        for (size_t i = 0; i < val.size(); ++i) {
            if (!std::isfinite(g[i]))
                throw std::runtime_error("adam: non-finite gradient in parameter '" +
                                         params[pi].name + "'");
            if (state.weight_decay > Real(0))
                val[i] *= (Real(1) - lr * state.weight_decay);
            m[i] = state.beta1 * m[i] + (Real(1) - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (Real(1) - state.beta2) * g[i] * g[i];
            Real mhat = m[i] / bc1;
            Real vhat = v[i] / bc2;
            val[i] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    }
}

template <typename Real>
void zero_grads(std::vector<NamedParam<Real>>& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

// ---- finite-difference gradient oracle ----------------------------------------

struct GradCheckOptions {
    double eps = 1e-5;
    // Coordinates sampled per parameter; <=0 means check every coordinate.
    int max_coords_per_param = 0;
    uint64_t sample_seed = 17;
};

// Compares analytic gradients against central finite differences on sampled
// coordinates. loss_builder must be deterministic (eval-mode dropout, fixed
// data) and rebuild the graph from the current parameter values on each call.
// Returns max over checked coordinates of |a-n| / max(1e-8, |a|+|n|).
//
// Central differences cannot resolve derivatives below ~|f|*ulp/(2*eps): the
// subtraction f(x+eps)-f(x-eps) carries rounding noise of a few ulps of |f|.
// Coordinates where both the analytic and numeric values sit under that
// resolution floor (e.g. directions the loss is provably invariant to, where
// the true derivative is exactly zero) agree as well as the method can
// measure and are scored as exact; a genuinely wrong zero analytic gradient
// still fails because the numeric value stays large.
template <typename Real>
double grad_check_fd(const std::function<Tensor<Real>()>& loss_builder,
                     std::vector<NamedParam<Real>>& params,
                     const GradCheckOptions& opt = {}) {
    if (!(opt.eps >= 1e-6 && opt.eps <= 1e-3))
        throw std::invalid_argument("grad_check_fd: eps must be in [1e-6, 1e-3]");

    zero_grads(params);
    Tensor<Real> loss = loss_builder();
    backward(loss);
    const double fd_floor = std::abs(static_cast<double>(loss.value())) *
                            std::numeric_limits<double>::epsilon() / (2.0 * opt.eps) * 64.0;

    RngStream pick(opt.sample_seed, "grad_check_fd");
    double max_rel = 0.0;
    for (auto& p : params) {
        if (!p.tensor.requires_grad()) continue;
        size_t n = p.tensor.size();
        std::vector<size_t> coords;
        if (opt.max_coords_per_param <= 0 || static_cast<size_t>(opt.max_coords_per_param) >= n) {
            coords.resize(n);
            for (size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            for (int i = 0; i < opt.max_coords_per_param; ++i)
                coords.push_back(pick.uniform_int(n));
        }
        const auto& g = p.tensor.grad();
        for (size_t i : coords) {
            Real analytic = g.size() == n ? g[i] : Real(0);
            Real saved = p.tensor.values()[i];
            p.tensor.values()[i] = saved + static_cast<Real>(opt.eps);
            double f_plus = static_cast<double>(loss_builder().value());
            p.tensor.values()[i] = saved - static_cast<Real>(opt.eps);
            double f_minus = static_cast<double>(loss_builder().value());
            p.tensor.values()[i] = saved;
            double numeric = (f_plus - f_minus) / (2.0 * opt.eps);
            if (std::abs(static_cast<double>(analytic)) < fd_floor && std::abs(numeric) < fd_floor)
                continue;
            double denom = std::max(1e-8, std::abs(static_cast<double>(analytic)) + std::abs(numeric));
            max_rel = std::max(max_rel, std::abs(static_cast<double>(analytic) - numeric) / denom);
        }
    }
    return max_rel;
}

// ---- parameter initialization --------------------------------------------------

// Uniform in +-1/sqrt(fan_in) for linear weights.
template <typename Real>
Tensor<Real> init_linear_weight(int fan_in, int fan_out, RngStream& rng) {
    auto t = Tensor<Real>::zeros({fan_in, fan_out}, true);
    Real bound = Real(1) / std::sqrt(static_cast<Real>(fan_in));
    for (auto& v : t.values()) v = static_cast<Real>(rng.uniform(-bound, bound));
    return t;
}

template <typename Real>
Tensor<Real> init_zeros(std::vector<int> shape) {
    return Tensor<Real>::zeros(std::move(shape), true);
}

template <typename Real>
Tensor<Real> init_ones(std::vector<int> shape) {
    auto t = Tensor<Real>::zeros(std::move(shape), true);
    std::fill(t.values().begin(), t.values().end(), Real(1));
    return t;
}

// normal(0, 0.02) for embedding tables.
template <typename Real>
Tensor<Real> init_embedding(int vocab, int dim, RngStream& rng) {
    auto t = Tensor<Real>::zeros({vocab, dim}, true);
    for (auto& v : t.values()) v = static_cast<Real>(rng.normal(0.0, 0.02));
    return t;
}

}  // namespace posnegdm
