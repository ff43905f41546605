#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "posnegdm/dataset.hpp"
#include "posnegdm/mortality.hpp"
#include "posnegdm/optimizer.hpp"
#include "posnegdm/tensor.hpp"

namespace posnegdm {

struct DualSightConfig {
    int n_layers = 3;
    int n_heads = 1;
    int embed_dim = 128;
    int context_len = 3;  // K
    double dropout = 0.1;
    int state_dim = 46;
    int n_actions = kNumActions;
    int max_timestep = 512;
    // Behavioral Cloning uses the same backbone without return tokens.
    bool use_return_tokens = true;

    int tokens_per_step() const { return use_return_tokens ? 3 : 2; }

    void validate() const {
        if (embed_dim % n_heads != 0)
            throw std::invalid_argument("dualsight: embed_dim must be divisible by n_heads");
        if (context_len < 1) throw std::invalid_argument("dualsight: context_len must be >= 1");
        if (n_layers < 1 || state_dim < 1) throw std::invalid_argument("dualsight: bad config");
    }
};

// A batch of K-step context windows, left-padded when a window starts before
// the beginning of its trajectory. Pad positions are excluded from attention
// and from every loss.
template <typename Real>
struct WindowBatch {
    int B = 0, K = 0, D = 0;
    std::vector<Real> rtg;          // B*K
    std::vector<Real> states;       // B*K*D
    std::vector<int> actions;       // B*K (0 at pads)
    std::vector<int> timesteps;     // B*K (0 at pads)
    std::vector<uint8_t> real;      // B*K
    std::vector<Real> next_states;  // B*K*D ground-truth s_{t+1}, zero where absent
    std::vector<uint8_t> has_next;  // B*K
    std::vector<uint8_t> positive;  // B*K outcome of the owning trajectory

    void reserve_steps(int b, int k, int d) {
        B = 0;
        K = k;
        D = d;
        rtg.clear();
        states.clear();
        actions.clear();
        timesteps.clear();
        real.clear();
        next_states.clear();
        has_next.clear();
        positive.clear();
        rtg.reserve(size_t(b) * k);
        states.reserve(size_t(b) * k * d);
    }

    // Appends the window covering steps max(0, end_t-K+1)..end_t of `traj`.
    void append_window(const Trajectory& traj, int end_t) {
        int t_len = static_cast<int>(traj.length());
        if (end_t < 0 || end_t >= t_len)
            throw std::out_of_range("append_window: step " + std::to_string(end_t) +
                                    " out of range for trajectory of length " +
                                    std::to_string(t_len));
        int first = end_t - K + 1;
        bool pos = traj.outcome == Outcome::positive;
        for (int t = first; t <= end_t; ++t) {
            bool is_real = t >= 0;
            real.push_back(is_real);
            positive.push_back(is_real && pos);
            rtg.push_back(is_real ? static_cast<Real>(traj.returns_to_go[t]) : Real(0));
            timesteps.push_back(is_real ? t : 0);
            actions.push_back(is_real ? encode_action(traj.actions[t]) : 0);
            if (is_real) {
                for (double v : traj.states[t]) states.push_back(static_cast<Real>(v));
            } else {
                states.insert(states.end(), D, Real(0));
            }
            bool next = is_real && t + 1 < t_len;
            has_next.push_back(next);
            if (next) {
                for (double v : traj.states[t + 1]) next_states.push_back(static_cast<Real>(v));
            } else {
                next_states.insert(next_states.end(), D, Real(0));
            }
        }
        ++B;
    }
};

// Single-window context for step t of a trajectory.
template <typename Real>
WindowBatch<Real> assemble_context(const Trajectory& traj, int t, int context_len) {
    WindowBatch<Real> batch;
    batch.reserve_steps(1, context_len, traj.state_dim());
    batch.append_window(traj, t);
    return batch;
}

template <typename Real>
struct ModelOutput {
    Tensor<Real> action_logits;  // (B*K) x n_actions, read from state-token positions
    Tensor<Real> state_pred;     // (B*K) x D, read from action-token positions
};

template <typename Real>
struct RolloutResult {
    std::vector<int> actions;                     // horizon entries
    std::vector<std::vector<Real>> states;        // horizon predicted next states
    std::vector<Real> survival_probs;             // horizon entries when a classifier is given
};

// Causal GPT over interleaved (return, state, action) tokens with a learned
// episodic timestep encoding, emitting next-action logits from state-token
// positions and next-state predictions from action-token positions.
template <typename Real>
class DualSight {
public:
    DualSight() = default;

    DualSight(const DualSightConfig& cfg, uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        RngStream rng(seed, "dualsight_init");
        int e = cfg_.embed_dim;
        w_state_ = init_linear_weight<Real>(cfg_.state_dim, e, rng);
        b_state_ = init_zeros<Real>({1, e});
        if (cfg_.use_return_tokens) {
            w_rtg_ = init_linear_weight<Real>(1, e, rng);
            b_rtg_ = init_zeros<Real>({1, e});
        }
        action_table_ = init_embedding<Real>(cfg_.n_actions, e, rng);
        time_table_ = init_embedding<Real>(cfg_.max_timestep + 1, e, rng);
        for (int l = 0; l < cfg_.n_layers; ++l) {
            Block blk;
            blk.ln1_g = init_ones<Real>({1, e});
            blk.ln1_b = init_zeros<Real>({1, e});
            blk.w_qkv = init_linear_weight<Real>(e, 3 * e, rng);
            blk.b_qkv = init_zeros<Real>({1, 3 * e});
            blk.w_proj = init_linear_weight<Real>(e, e, rng);
            blk.b_proj = init_zeros<Real>({1, e});
            blk.ln2_g = init_ones<Real>({1, e});
            blk.ln2_b = init_zeros<Real>({1, e});
            blk.w_ff1 = init_linear_weight<Real>(e, 4 * e, rng);
            blk.b_ff1 = init_zeros<Real>({1, 4 * e});
            blk.w_ff2 = init_linear_weight<Real>(4 * e, e, rng);
            blk.b_ff2 = init_zeros<Real>({1, e});
            blocks_.push_back(std::move(blk));
        }
        lnf_g_ = init_ones<Real>({1, e});
        lnf_b_ = init_zeros<Real>({1, e});
        // zero-initialized heads: the untrained action distribution is uniform
        w_act_head_ = init_zeros<Real>({e, cfg_.n_actions});
        b_act_head_ = init_zeros<Real>({1, cfg_.n_actions});
        w_state_head_ = init_zeros<Real>({e, cfg_.state_dim});
        b_state_head_ = init_zeros<Real>({1, cfg_.state_dim});
    }

    const DualSightConfig& config() const { return cfg_; }

    std::vector<NamedParam<Real>> named_parameters() {
        std::vector<NamedParam<Real>> out;
        out.push_back({"dm.state_emb.weight", w_state_});
        out.push_back({"dm.state_emb.bias", b_state_});
        if (cfg_.use_return_tokens) {
            out.push_back({"dm.rtg_emb.weight", w_rtg_});
            out.push_back({"dm.rtg_emb.bias", b_rtg_});
        }
        out.push_back({"dm.action_emb.table", action_table_});
        out.push_back({"dm.time_emb.table", time_table_});
        for (size_t l = 0; l < blocks_.size(); ++l) {
            auto& b = blocks_[l];
            std::string p = "dm.block" + std::to_string(l) + ".";
            out.push_back({p + "ln1.gain", b.ln1_g});
            out.push_back({p + "ln1.bias", b.ln1_b});
            out.push_back({p + "qkv.weight", b.w_qkv});
            out.push_back({p + "qkv.bias", b.b_qkv});
            out.push_back({p + "proj.weight", b.w_proj});
            out.push_back({p + "proj.bias", b.b_proj});
            out.push_back({p + "ln2.gain", b.ln2_g});
            out.push_back({p + "ln2.bias", b.ln2_b});
            out.push_back({p + "ff1.weight", b.w_ff1});
            out.push_back({p + "ff1.bias", b.b_ff1});
            out.push_back({p + "ff2.weight", b.w_ff2});
            out.push_back({p + "ff2.bias", b.b_ff2});
        }
        out.push_back({"dm.lnf.gain", lnf_g_});
        out.push_back({"dm.lnf.bias", lnf_b_});
        out.push_back({"dm.act_head.weight", w_act_head_});
        out.push_back({"dm.act_head.bias", b_act_head_});
        out.push_back({"dm.state_head.weight", w_state_head_});
        out.push_back({"dm.state_head.bias", b_state_head_});
        return out;
    }

    uint64_t weight_hash() {
        uint64_t h = 0xcbf29ce484222325ull;
        for (auto& p : named_parameters())
            h = fnv1a64(p.tensor.values().data(), p.tensor.size() * sizeof(Real), h);
        return h;
    }

    ModelOutput<Real> forward(const WindowBatch<Real>& batch, bool train = false,
                              RngStream* rng = nullptr) const {
        if (batch.D != cfg_.state_dim || batch.K != cfg_.context_len)
            throw std::invalid_argument("dualsight forward: batch shape does not match config (D=" +
                                        std::to_string(batch.D) + ", K=" + std::to_string(batch.K) + ")");
        int bk = batch.B * batch.K;
        int tps = cfg_.tokens_per_step();
        int seq = batch.K * tps;
        Real rate = static_cast<Real>(cfg_.dropout);

        auto state_in = Tensor<Real>::from({bk, cfg_.state_dim}, batch.states);
        auto state_emb = linear(state_in, w_state_, b_state_);
        auto act_emb = embedding_lookup(action_table_, batch.actions);
        auto time_emb = embedding_lookup(time_table_, batch.timesteps);

        std::vector<Tensor<Real>> toks;
        if (cfg_.use_return_tokens) {
            auto rtg_in = Tensor<Real>::from({bk, 1}, batch.rtg);
            toks = {linear(rtg_in, w_rtg_, b_rtg_), state_emb, act_emb};
        } else {
            toks = {state_emb, act_emb};
        }
        auto x = interleave_rows(toks);
        auto time_tok = interleave_rows(std::vector<Tensor<Real>>(tps, time_emb));
        x = dropout(add(x, time_tok), rate, train, rng);

        // token-level attendability mask
        std::vector<uint8_t> token_real(size_t(batch.B) * seq);
        for (int i = 0; i < bk; ++i)
            for (int j = 0; j < tps; ++j) token_real[size_t(i) * tps + j] = batch.real[i];

        for (const auto& blk : blocks_) {
            auto h = causal_attention(linear(layer_norm(x, blk.ln1_g, blk.ln1_b), blk.w_qkv, blk.b_qkv),
                                      batch.B, seq, cfg_.n_heads, token_real);
            x = add(x, dropout(linear(h, blk.w_proj, blk.b_proj), rate, train, rng));
            auto f = linear(relu(linear(layer_norm(x, blk.ln2_g, blk.ln2_b), blk.w_ff1, blk.b_ff1)),
                            blk.w_ff2, blk.b_ff2);
            x = add(x, dropout(f, rate, train, rng));
        }
        x = layer_norm(x, lnf_g_, lnf_b_);

        // readout positions: action from the state token, next state from the
        // action token
        std::vector<int> state_tok_idx(bk), act_tok_idx(bk);
        int state_off = cfg_.use_return_tokens ? 1 : 0;
        for (int b = 0; b < batch.B; ++b)
            for (int k = 0; k < batch.K; ++k) {
                int i = b * batch.K + k;
                state_tok_idx[i] = b * seq + k * tps + state_off;
                act_tok_idx[i] = b * seq + k * tps + state_off + 1;
            }
        ModelOutput<Real> out;
        out.action_logits = linear(gather_rows(x, state_tok_idx), w_act_head_, b_act_head_);
        out.state_pred = linear(gather_rows(x, act_tok_idx), w_state_head_, b_state_head_);
        return out;
    }

    // Autoregressive generation: argmax actions (ties to the lowest index), the
    // model's own next-state predictions fed back as input, return token pinned
    // to target_return. Survival probabilities recorded when mc is supplied.
    RolloutResult<Real> rollout(const std::vector<Real>& initial_state,
                                Real target_return = Real(1), int horizon = 10,
                                const MortalityClassifier<Real>* mc = nullptr) const {
        if (static_cast<int>(initial_state.size()) != cfg_.state_dim)
            throw std::invalid_argument("rollout: initial state dimension mismatch");
        RolloutResult<Real> result;
        std::vector<std::vector<Real>> states_hist{initial_state};
        std::vector<int> actions_hist;

        for (int n = 0; n < horizon; ++n) {
            // pick the action for step n (the action token at step n is a
            // placeholder; causality keeps it out of the state-token readout)
            actions_hist.push_back(0);
            auto pick = forward(build_window(states_hist, actions_hist, target_return, n));
            int last = window_last_index(n);
            const Real* logits = pick.action_logits.values().data() + size_t(last) * cfg_.n_actions;
            int best = 0;
            for (int a = 1; a < cfg_.n_actions; ++a)
                if (logits[a] > logits[best]) best = a;
            actions_hist.back() = best;
            result.actions.push_back(best);

            // predict the next state under the chosen action
            auto step = forward(build_window(states_hist, actions_hist, target_return, n));
            std::vector<Real> next(cfg_.state_dim);
            const Real* sp = step.state_pred.values().data() + size_t(last) * cfg_.state_dim;
            for (int j = 0; j < cfg_.state_dim; ++j) {
                if (!std::isfinite(sp[j]))
                    throw std::runtime_error("rollout: non-finite predicted state at step " +
                                             std::to_string(n));
                next[j] = sp[j];
            }
            if (mc) result.survival_probs.push_back(mc->survival_probability(next));
            result.states.push_back(next);
            states_hist.push_back(std::move(next));
        }
        return result;
    }

private:
    struct Block {
        Tensor<Real> ln1_g, ln1_b, w_qkv, b_qkv, w_proj, b_proj;
        Tensor<Real> ln2_g, ln2_b, w_ff1, b_ff1, w_ff2, b_ff2;
    };

    int window_last_index(int n) const { return std::min(n, cfg_.context_len - 1); }

    WindowBatch<Real> build_window(const std::vector<std::vector<Real>>& states_hist,
                                   const std::vector<int>& actions_hist, Real target_return,
                                   int n) const {
        int k = cfg_.context_len;
        WindowBatch<Real> batch;
        batch.reserve_steps(1, k, cfg_.state_dim);
        batch.B = 1;
        for (int t = n - k + 1; t <= n; ++t) {
            bool is_real = t >= 0;
            batch.real.push_back(is_real);
            batch.positive.push_back(is_real);
            batch.rtg.push_back(is_real ? target_return : Real(0));
            batch.timesteps.push_back(is_real ? t : 0);
            batch.actions.push_back(is_real ? actions_hist[t] : 0);
            if (is_real)
                batch.states.insert(batch.states.end(), states_hist[t].begin(), states_hist[t].end());
            else
                batch.states.insert(batch.states.end(), cfg_.state_dim, Real(0));
            batch.has_next.push_back(false);
            batch.next_states.insert(batch.next_states.end(), cfg_.state_dim, Real(0));
        }
        return batch;
    }

    DualSightConfig cfg_;
    Tensor<Real> w_state_, b_state_, w_rtg_, b_rtg_;
    Tensor<Real> action_table_, time_table_;
    std::vector<Block> blocks_;
    Tensor<Real> lnf_g_, lnf_b_;
    Tensor<Real> w_act_head_, b_act_head_, w_state_head_, b_state_head_;
};

}  // namespace posnegdm
