#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <cblas.h>

#include "posnegdm/rng.hpp"

namespace posnegdm {

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta,
                 float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
                ldb, beta, c, ldc);
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb, double beta,
                 double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
                ldb, beta, c, ldc);
}

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <typename Real>
struct TensorNode {
    std::vector<int> shape;
    std::vector<Real> values;
    std::vector<Real> grad;  // allocated lazily, same size as values
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;  // accumulates into parents

    size_t size() const { return values.size(); }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), Real(0));
    }
};

// Handle to a node in the computation graph. Value semantics on the handle,
// shared ownership of the node.
template <typename Real>
class Tensor {
public:
    using Node = TensorNode<Real>;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        size_t total = 1;
        for (int d : shape) {
            if (d <= 0) throw std::invalid_argument("tensor dimension must be positive");
            total *= static_cast<size_t>(d);
        }
        n->shape = std::move(shape);
        n->values.assign(total, Real(0));
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from(std::vector<int> shape, std::vector<Real> values,
                       bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        if (values.size() != t.size())
            throw std::invalid_argument("value count does not match shape");
        t.node_->values = std::move(values);
        return t;
    }

    static Tensor scalar(Real v) { return from({1}, {v}); }

    bool valid() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    size_t size() const { return node_->values.size(); }
    int rows() const { return node_->shape.at(0); }
    int cols() const { return node_->shape.size() > 1 ? node_->shape.at(1) : 1; }

    std::vector<Real>& values() { return node_->values; }
    const std::vector<Real>& values() const { return node_->values; }
    std::vector<Real>& grad() { return node_->grad; }
    const std::vector<Real>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }

    Real value() const {
        if (size() != 1) throw std::logic_error("value() requires a scalar tensor");
        return node_->values[0];
    }

    void zero_grad() {
        if (node_->grad.size() == node_->values.size())
            std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
    }

    std::shared_ptr<Node> node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

template <typename Real>
Tensor<Real> make_op(std::vector<int> shape,
                     std::vector<std::shared_ptr<TensorNode<Real>>> parents,
                     std::function<void(TensorNode<Real>&)> backward_fn) {
    auto out = Tensor<Real>::zeros(std::move(shape));
    auto n = out.node();
    for (const auto& p : parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return out;
}

}  // namespace detail

// ---- elementwise / structural ops ------------------------------------------

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    auto pa = a.node(), pb = b.node();
    auto out = detail::make_op<Real>(a.shape(), {pa, pb}, [pa, pb](TensorNode<Real>& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < n.size(); ++i) pa->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < n.size(); ++i) pb->grad[i] += n.grad[i];
        }
    });
    for (size_t i = 0; i < out.size(); ++i)
        out.values()[i] = pa->values[i] + pb->values[i];
    return out;
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    auto pa = a.node(), pb = b.node();
    auto out = detail::make_op<Real>(a.shape(), {pa, pb}, [pa, pb](TensorNode<Real>& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < n.size(); ++i) pa->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < n.size(); ++i) pb->grad[i] -= n.grad[i];
        }
    });
    for (size_t i = 0; i < out.size(); ++i)
        out.values()[i] = pa->values[i] - pb->values[i];
    return out;
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
    auto pa = a.node();
    auto out = detail::make_op<Real>(a.shape(), {pa}, [pa, c](TensorNode<Real>& n) {
        pa->ensure_grad();
        for (size_t i = 0; i < n.size(); ++i) pa->grad[i] += c * n.grad[i];
    });
    for (size_t i = 0; i < out.size(); ++i) out.values()[i] = c * pa->values[i];
    return out;
}

template <typename Real>
Tensor<Real> neg(const Tensor<Real>& a) {
    return scale(a, Real(-1));
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    auto pa = a.node(), pb = b.node();
    auto out = detail::make_op<Real>(a.shape(), {pa, pb}, [pa, pb](TensorNode<Real>& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < n.size(); ++i) pa->grad[i] += pb->values[i] * n.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < n.size(); ++i) pb->grad[i] += pa->values[i] * n.grad[i];
        }
    });
    for (size_t i = 0; i < out.size(); ++i)
        out.values()[i] = pa->values[i] * pb->values[i];
    return out;
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& a) {
    auto pa = a.node();
    auto out = detail::make_op<Real>(a.shape(), {pa}, [pa](TensorNode<Real>& n) {
        pa->ensure_grad();
        for (size_t i = 0; i < n.size(); ++i)
            if (pa->values[i] > Real(0)) pa->grad[i] += n.grad[i];
    });
    for (size_t i = 0; i < out.size(); ++i)
        out.values()[i] = std::max(Real(0), pa->values[i]);
    return out;
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
    auto pa = a.node();
    auto out = detail::make_op<Real>(a.shape(), {pa}, [pa](TensorNode<Real>& n) {
        pa->ensure_grad();
        for (size_t i = 0; i < n.size(); ++i) pa->grad[i] += n.values[i] * (Real(1) - n.values[i]) * n.grad[i];
    });
    for (size_t i = 0; i < out.size(); ++i) {
        Real x = pa->values[i];
        out.values()[i] = x >= Real(0) ? Real(1) / (Real(1) + std::exp(-x))
                                       : std::exp(x) / (Real(1) + std::exp(x));
    }
    return out;
}

// log(1 + e^x), numerically stable.
template <typename Real>
Tensor<Real> softplus(const Tensor<Real>& a) {
    auto pa = a.node();
    auto out = detail::make_op<Real>(a.shape(), {pa}, [pa](TensorNode<Real>& n) {
        pa->ensure_grad();
        for (size_t i = 0; i < n.size(); ++i) {
            Real x = pa->values[i];
            Real sig = x >= Real(0) ? Real(1) / (Real(1) + std::exp(-x))
                                    : std::exp(x) / (Real(1) + std::exp(x));
            pa->grad[i] += sig * n.grad[i];
        }
    });
    for (size_t i = 0; i < out.size(); ++i) {
        Real x = pa->values[i];
        out.values()[i] = x > Real(30) ? x : std::log1p(std::exp(std::min(x, Real(30))));
    }
    return out;
}

// Elementwise min(x, cap); gradient zero where clamped.
template <typename Real>
Tensor<Real> clamp_max(const Tensor<Real>& a, Real cap) {
    auto pa = a.node();
    auto out = detail::make_op<Real>(a.shape(), {pa}, [pa, cap](TensorNode<Real>& n) {
        pa->ensure_grad();
        for (size_t i = 0; i < n.size(); ++i)
            if (pa->values[i] < cap) pa->grad[i] += n.grad[i];
    });
    for (size_t i = 0; i < out.size(); ++i)
        out.values()[i] = std::min(pa->values[i], cap);
    return out;
}

// Dropout: in train mode zero each element with probability `rate` and scale
// survivors by 1/(1-rate). Eval mode returns the input unchanged and never
// touches the RNG.
template <typename Real>
Tensor<Real> dropout(const Tensor<Real>& a, Real rate, bool train, RngStream* rng) {
    if (!(rate >= Real(0) && rate < Real(1)))
        throw std::invalid_argument("dropout: rate must be in [0,1)");
    if (!train || rate == Real(0)) return a;
    if (rng == nullptr) throw std::invalid_argument("dropout: train mode needs an RNG");
    auto pa = a.node();
    auto mask = std::make_shared<std::vector<Real>>(a.size());
    Real keep = Real(1) - rate;
    for (size_t i = 0; i < a.size(); ++i)
        (*mask)[i] = rng->uniform() >= rate ? Real(1) / keep : Real(0);
    auto out = detail::make_op<Real>(a.shape(), {pa}, [pa, mask](TensorNode<Real>& n) {
        pa->ensure_grad();
        for (size_t i = 0; i < n.size(); ++i) pa->grad[i] += (*mask)[i] * n.grad[i];
    });
    for (size_t i = 0; i < out.size(); ++i)
        out.values()[i] = pa->values[i] * (*mask)[i];
    return out;
}

// ---- matrix ops -------------------------------------------------------------

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
        throw std::invalid_argument("matmul: incompatible shapes " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    int m = a.rows(), k = a.cols(), n = b.cols();
    auto pa = a.node(), pb = b.node();
    auto out = detail::make_op<Real>({m, n}, {pa, pb}, [pa, pb, m, k, n](TensorNode<Real>& nd) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            // dA += dC * B^T
            gemm(false, true, m, k, n, Real(1), nd.grad.data(), n,
                 pb->values.data(), n, Real(1), pa->grad.data(), k);
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            // dB += A^T * dC
            gemm(true, false, k, n, m, Real(1), pa->values.data(), k,
                 nd.grad.data(), n, Real(1), pb->grad.data(), n);
        }
    });
    gemm(false, false, m, n, k, Real(1), pa->values.data(), k, pb->values.data(), n,
         Real(0), out.values().data(), n);
    return out;
}

// x (N x D) + row vector b (1 x D), broadcast over rows.
template <typename Real>
Tensor<Real> add_rowvec(const Tensor<Real>& x, const Tensor<Real>& b) {
    int nr = x.rows(), nc = x.cols();
    if (static_cast<int>(b.size()) != nc)
        throw std::invalid_argument("add_rowvec: bias length " + shape_str(b.shape()) +
                                    " does not match columns of " + shape_str(x.shape()));
    auto px = x.node(), pb = b.node();
    auto out = detail::make_op<Real>(x.shape(), {px, pb}, [px, pb, nr, nc](TensorNode<Real>& n) {
        if (px->requires_grad) {
            px->ensure_grad();
            for (size_t i = 0; i < n.size(); ++i) px->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int r = 0; r < nr; ++r)
                for (int c = 0; c < nc; ++c) pb->grad[c] += n.grad[size_t(r) * nc + c];
        }
    });
    for (int r = 0; r < nr; ++r)
        for (int c = 0; c < nc; ++c)
            out.values()[size_t(r) * nc + c] = px->values[size_t(r) * nc + c] + pb->values[c];
    return out;
}

template <typename Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b) {
    return add_rowvec(matmul(x, w), b);
}

// Row-wise softmax with per-row max subtraction.
template <typename Real>
Tensor<Real> softmax_rows(const Tensor<Real>& x) {
    int nr = x.rows(), nc = x.cols();
    auto px = x.node();
    auto out = detail::make_op<Real>(x.shape(), {px}, [px, nr, nc](TensorNode<Real>& n) {
        px->ensure_grad();
        for (int r = 0; r < nr; ++r) {
            const Real* p = n.values.data() + size_t(r) * nc;
            const Real* g = n.grad.data() + size_t(r) * nc;
            Real dot = 0;
            for (int c = 0; c < nc; ++c) dot += p[c] * g[c];
            Real* gx = px->grad.data() + size_t(r) * nc;
            for (int c = 0; c < nc; ++c) gx[c] += p[c] * (g[c] - dot);
        }
    });
    for (int r = 0; r < nr; ++r) {
        const Real* in = px->values.data() + size_t(r) * nc;
        Real* o = out.values().data() + size_t(r) * nc;
        Real mx = in[0];
        for (int c = 1; c < nc; ++c) mx = std::max(mx, in[c]);
        Real sum = 0;
        for (int c = 0; c < nc; ++c) {
            o[c] = std::exp(in[c] - mx);
            sum += o[c];
        }
        for (int c = 0; c < nc; ++c) o[c] /= sum;
    }
    return out;
}

// Row-wise layer normalization with learned gain and bias.
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain,
                        const Tensor<Real>& bias, Real eps = Real(1e-5)) {
    int nr = x.rows(), nc = x.cols();
    if (static_cast<int>(gain.size()) != nc || static_cast<int>(bias.size()) != nc)
        throw std::invalid_argument("layer_norm: gain/bias length mismatch");
    auto px = x.node(), pg = gain.node(), pb = bias.node();
    // Save normalized activations and inverse stddev for backward.
    auto xhat = std::make_shared<std::vector<Real>>(x.size());
    auto inv_std = std::make_shared<std::vector<Real>>(nr);
    auto out = detail::make_op<Real>(
        x.shape(), {px, pg, pb}, [px, pg, pb, xhat, inv_std, nr, nc](TensorNode<Real>& n) {
            if (pg->requires_grad) pg->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            if (px->requires_grad) px->ensure_grad();
            for (int r = 0; r < nr; ++r) {
                const Real* g = n.grad.data() + size_t(r) * nc;
                const Real* xh = xhat->data() + size_t(r) * nc;
                if (pg->requires_grad)
                    for (int c = 0; c < nc; ++c) pg->grad[c] += g[c] * xh[c];
                if (pb->requires_grad)
                    for (int c = 0; c < nc; ++c) pb->grad[c] += g[c];
                if (px->requires_grad) {
                    Real sum_gy = 0, sum_gy_xh = 0;
                    for (int c = 0; c < nc; ++c) {
                        Real gy = g[c] * pg->values[c];
                        sum_gy += gy;
                        sum_gy_xh += gy * xh[c];
                    }
                    Real* gx = px->grad.data() + size_t(r) * nc;
                    Real is = (*inv_std)[r];
                    for (int c = 0; c < nc; ++c) {
                        Real gy = g[c] * pg->values[c];
                        gx[c] += is * (gy - sum_gy / nc - xh[c] * sum_gy_xh / nc);
                    }
                }
            }
        });
    for (int r = 0; r < nr; ++r) {
        const Real* in = px->values.data() + size_t(r) * nc;
        Real mean = 0;
        for (int c = 0; c < nc; ++c) mean += in[c];
        mean /= nc;
        Real var = 0;
        for (int c = 0; c < nc; ++c) var += (in[c] - mean) * (in[c] - mean);
        var /= nc;
        Real is = Real(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        Real* xh = xhat->data() + size_t(r) * nc;
        Real* o = out.values().data() + size_t(r) * nc;
        for (int c = 0; c < nc; ++c) {
            xh[c] = (in[c] - mean) * is;
            o[c] = xh[c] * pg->values[c] + pb->values[c];
        }
    }
    return out;
}

// Gather rows by index; gradients are scattered back to the gathered rows only.
template <typename Real>
Tensor<Real> gather_rows(const Tensor<Real>& table, const std::vector<int>& ids) {
    int v = table.rows(), d = table.cols();
    for (int id : ids)
        if (id < 0 || id >= v)
            throw std::out_of_range("gather_rows: index " + std::to_string(id) +
                                    " out of range [0," + std::to_string(v) + ")");
    auto pt = table.node();
    auto idx = std::make_shared<std::vector<int>>(ids);
    auto out = detail::make_op<Real>({static_cast<int>(ids.size()), d}, {pt},
                                     [pt, idx, d](TensorNode<Real>& n) {
                                         pt->ensure_grad();
                                         for (size_t r = 0; r < idx->size(); ++r) {
                                             Real* dst = pt->grad.data() + size_t((*idx)[r]) * d;
                                             const Real* src = n.grad.data() + r * d;
                                             for (int c = 0; c < d; ++c) dst[c] += src[c];
                                         }
                                     });
    for (size_t r = 0; r < ids.size(); ++r)
        std::copy_n(pt->values.data() + size_t(ids[r]) * d, d,
                    out.values().data() + r * d);
    return out;
}

template <typename Real>
Tensor<Real> embedding_lookup(const Tensor<Real>& table, const std::vector<int>& ids) {
    return gather_rows(table, ids);
}

// Interleave the rows of equally-shaped matrices: output row (i*n + j) is
// row i of inputs[j]. Used to lay out per-step modality tokens.
template <typename Real>
Tensor<Real> interleave_rows(const std::vector<Tensor<Real>>& inputs) {
    if (inputs.empty()) throw std::invalid_argument("interleave_rows: no inputs");
    int nr = inputs[0].rows(), nc = inputs[0].cols();
    int n = static_cast<int>(inputs.size());
    std::vector<std::shared_ptr<TensorNode<Real>>> parents;
    for (const auto& t : inputs) {
        if (t.rows() != nr || t.cols() != nc)
            throw std::invalid_argument("interleave_rows: shape mismatch");
        parents.push_back(t.node());
    }
    auto ps = std::make_shared<std::vector<std::shared_ptr<TensorNode<Real>>>>(parents);
    auto out = detail::make_op<Real>({nr * n, nc}, parents, [ps, nr, nc, n](TensorNode<Real>& nd) {
        for (int j = 0; j < n; ++j) {
            auto& p = (*ps)[j];
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (int i = 0; i < nr; ++i) {
                const Real* src = nd.grad.data() + (size_t(i) * n + j) * nc;
                Real* dst = p->grad.data() + size_t(i) * nc;
                for (int c = 0; c < nc; ++c) dst[c] += src[c];
            }
        }
    });
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < nr; ++i)
            std::copy_n(parents[j]->values.data() + size_t(i) * nc, nc,
                        out.values().data() + (size_t(i) * n + j) * nc);
    return out;
}

// ---- attention --------------------------------------------------------------

// Multi-head causal self-attention over B independent sequences of length S.
// qkv is (B*S x 3E) laid out [Q | K | V]; token_real marks attendable tokens.
// Position j may attend to position i iff i <= j and token_real[i].
template <typename Real>
Tensor<Real> causal_attention(const Tensor<Real>& qkv, int batch, int seq_len,
                              int n_heads, const std::vector<uint8_t>& token_real) {
    int three_e = qkv.cols();
    if (three_e % 3 != 0) throw std::invalid_argument("causal_attention: qkv width not divisible by 3");
    int e = three_e / 3;
    if (e % n_heads != 0) throw std::invalid_argument("causal_attention: embed dim not divisible by heads");
    if (qkv.rows() != batch * seq_len || static_cast<int>(token_real.size()) != batch * seq_len)
        throw std::invalid_argument("causal_attention: row/mask count mismatch");
    int hd = e / n_heads;
    Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(hd));
    auto pq = qkv.node();
    auto probs = std::make_shared<std::vector<Real>>(size_t(batch) * n_heads * seq_len * seq_len, Real(0));
    auto mask = std::make_shared<std::vector<uint8_t>>(token_real);

    auto out = detail::make_op<Real>(
        {batch * seq_len, e}, {pq},
        [pq, probs, mask, batch, seq_len, n_heads, hd, e, three_e, inv_sqrt](TensorNode<Real>& n) {
            pq->ensure_grad();
            std::vector<Real> dp(size_t(seq_len) * seq_len);
            for (int b = 0; b < batch; ++b) {
                size_t row0 = size_t(b) * seq_len;
                for (int h = 0; h < n_heads; ++h) {
                    const Real* p = probs->data() + ((size_t(b) * n_heads + h) * seq_len) * seq_len;
                    auto q_at = [&](int i) { return pq->values.data() + (row0 + i) * three_e + h * hd; };
                    auto k_at = [&](int i) { return pq->values.data() + (row0 + i) * three_e + e + h * hd; };
                    auto v_at = [&](int i) { return pq->values.data() + (row0 + i) * three_e + 2 * e + h * hd; };
                    auto dq_at = [&](int i) { return pq->grad.data() + (row0 + i) * three_e + h * hd; };
                    auto dk_at = [&](int i) { return pq->grad.data() + (row0 + i) * three_e + e + h * hd; };
                    auto dv_at = [&](int i) { return pq->grad.data() + (row0 + i) * three_e + 2 * e + h * hd; };
                    auto dout_at = [&](int i) { return n.grad.data() + (row0 + i) * e + h * hd; };
                    // dV and dP
                    for (int j = 0; j < seq_len; ++j) {
                        const Real* go = dout_at(j);
                        for (int i = 0; i <= j; ++i) {
                            Real pij = p[size_t(j) * seq_len + i];
                            if (pij == Real(0)) { dp[size_t(j) * seq_len + i] = 0; continue; }
                            Real d = 0;
                            Real* dv = dv_at(i);
                            const Real* vi = v_at(i);
                            for (int c = 0; c < hd; ++c) {
                                dv[c] += pij * go[c];
                                d += go[c] * vi[c];
                            }
                            dp[size_t(j) * seq_len + i] = d;
                        }
                    }
                    // softmax backward, then dQ/dK
                    for (int j = 0; j < seq_len; ++j) {
                        Real dot = 0;
                        for (int i = 0; i <= j; ++i)
                            dot += dp[size_t(j) * seq_len + i] * p[size_t(j) * seq_len + i];
                        const Real* qj = q_at(j);
                        Real* dqj = dq_at(j);
                        for (int i = 0; i <= j; ++i) {
                            Real pij = p[size_t(j) * seq_len + i];
                            if (pij == Real(0)) continue;
                            Real ds = pij * (dp[size_t(j) * seq_len + i] - dot) * inv_sqrt;
                            const Real* ki = k_at(i);
                            Real* dki = dk_at(i);
                            for (int c = 0; c < hd; ++c) {
                                dqj[c] += ds * ki[c];
                                dki[c] += ds * qj[c];
                            }
                        }
                    }
                }
            }
        });

    std::vector<Real> scores(seq_len);
    for (int b = 0; b < batch; ++b) {
        size_t row0 = size_t(b) * seq_len;
        for (int h = 0; h < n_heads; ++h) {
            Real* p_base = probs->data() + ((size_t(b) * n_heads + h) * seq_len) * seq_len;
            for (int j = 0; j < seq_len; ++j) {
                if (!(*mask)[row0 + j]) continue;  // outputs at pad positions stay zero
                const Real* qj = pq->values.data() + (row0 + j) * three_e + h * hd;
                Real mx = -std::numeric_limits<Real>::infinity();
                for (int i = 0; i <= j; ++i) {
                    if (!(*mask)[row0 + i]) { scores[i] = -std::numeric_limits<Real>::infinity(); continue; }
                    const Real* ki = pq->values.data() + (row0 + i) * three_e + e + h * hd;
                    Real s = 0;
                    for (int c = 0; c < hd; ++c) s += qj[c] * ki[c];
                    s *= inv_sqrt;
                    scores[i] = s;
                    mx = std::max(mx, s);
                }
                Real sum = 0;
                Real* pj = p_base + size_t(j) * seq_len;
                for (int i = 0; i <= j; ++i) {
                    Real w = std::isinf(scores[i]) ? Real(0) : std::exp(scores[i] - mx);
                    pj[i] = w;
                    sum += w;
                }
                Real* oj = out.values().data() + (row0 + j) * e + h * hd;
                for (int i = 0; i <= j; ++i) {
                    pj[i] /= sum;
                    if (pj[i] == Real(0)) continue;
                    const Real* vi = pq->values.data() + (row0 + i) * three_e + 2 * e + h * hd;
                    for (int c = 0; c < hd; ++c) oj[c] += pj[i] * vi[c];
                }
            }
        }
    }
    return out;
}

// ---- reductions and losses ---------------------------------------------------

template <typename Real>
Tensor<Real> sum_all(const Tensor<Real>& x) {
    auto px = x.node();
    auto out = detail::make_op<Real>({1}, {px}, [px](TensorNode<Real>& n) {
        px->ensure_grad();
        for (size_t i = 0; i < px->values.size(); ++i) px->grad[i] += n.grad[0];
    });
    Real s = 0;
    for (Real v : px->values) s += v;
    out.values()[0] = s;
    return out;
}

template <typename Real>
Tensor<Real> mean_all(const Tensor<Real>& x) {
    return scale(sum_all(x), Real(1) / static_cast<Real>(x.size()));
}

// Per-row cross entropy: out[r] = logsumexp(logits[r]) - logits[r][target[r]].
template <typename Real>
Tensor<Real> ce_rows(const Tensor<Real>& logits, const std::vector<int>& targets) {
    int nr = logits.rows(), nc = logits.cols();
    if (static_cast<int>(targets.size()) != nr)
        throw std::invalid_argument("ce_rows: target count mismatch");
    for (int t : targets)
        if (t < 0 || t >= nc)
            throw std::out_of_range("ce_rows: target " + std::to_string(t) +
                                    " out of range [0," + std::to_string(nc) + ")");
    auto pl = logits.node();
    auto tgt = std::make_shared<std::vector<int>>(targets);
    auto out = detail::make_op<Real>({nr, 1}, {pl}, [pl, tgt, nr, nc](TensorNode<Real>& n) {
        pl->ensure_grad();
        for (int r = 0; r < nr; ++r) {
            const Real* in = pl->values.data() + size_t(r) * nc;
            Real mx = in[0];
            for (int c = 1; c < nc; ++c) mx = std::max(mx, in[c]);
            Real sum = 0;
            for (int c = 0; c < nc; ++c) sum += std::exp(in[c] - mx);
            Real g = n.grad[r];
            Real* gx = pl->grad.data() + size_t(r) * nc;
            for (int c = 0; c < nc; ++c) {
                Real p = std::exp(in[c] - mx) / sum;
                gx[c] += g * (p - (c == (*tgt)[r] ? Real(1) : Real(0)));
            }
        }
    });
    for (int r = 0; r < nr; ++r) {
        const Real* in = pl->values.data() + size_t(r) * nc;
        Real mx = in[0];
        for (int c = 1; c < nc; ++c) mx = std::max(mx, in[c]);
        Real sum = 0;
        for (int c = 0; c < nc; ++c) sum += std::exp(in[c] - mx);
        out.values()[r] = mx + std::log(sum) - in[targets[r]];
    }
    return out;
}

template <typename Real>
Tensor<Real> cross_entropy_mean(const Tensor<Real>& logits, const std::vector<int>& targets) {
    return mean_all(ce_rows(logits, targets));
}

template <typename Real>
Tensor<Real> mse_mean(const Tensor<Real>& pred, const Tensor<Real>& target) {
    if (pred.shape() != target.shape())
        throw std::invalid_argument("mse_mean: shape mismatch " + shape_str(pred.shape()) +
                                    " vs " + shape_str(target.shape()));
    auto pp = pred.node(), pt = target.node();
    size_t n_elem = pred.size();
    auto out = detail::make_op<Real>({1}, {pp, pt}, [pp, pt, n_elem](TensorNode<Real>& n) {
        Real g = n.grad[0] * Real(2) / static_cast<Real>(n_elem);
        if (pp->requires_grad) {
            pp->ensure_grad();
            for (size_t i = 0; i < n_elem; ++i)
                pp->grad[i] += g * (pp->values[i] - pt->values[i]);
        }
        if (pt->requires_grad) {
            pt->ensure_grad();
            for (size_t i = 0; i < n_elem; ++i)
                pt->grad[i] -= g * (pp->values[i] - pt->values[i]);
        }
    });
    Real s = 0;
    for (size_t i = 0; i < n_elem; ++i) {
        Real d = pp->values[i] - pt->values[i];
        s += d * d;
    }
    out.values()[0] = s / static_cast<Real>(n_elem);
    return out;
}

// MSE over the rows where row_mask is nonzero. Throws if no row survives.
template <typename Real>
Tensor<Real> mse_masked_rows(const Tensor<Real>& pred, const Tensor<Real>& target,
                             const std::vector<uint8_t>& row_mask) {
    if (pred.shape() != target.shape())
        throw std::invalid_argument("mse_masked_rows: shape mismatch");
    int nr = pred.rows(), nc = pred.cols();
    if (static_cast<int>(row_mask.size()) != nr)
        throw std::invalid_argument("mse_masked_rows: mask length mismatch");
    size_t count = 0;
    for (auto m : row_mask)
        if (m) ++count;
    if (count == 0) throw std::logic_error("mse_masked_rows: all rows masked out");
    size_t denom = count * static_cast<size_t>(nc);
    auto pp = pred.node(), pt = target.node();
    auto mask = std::make_shared<std::vector<uint8_t>>(row_mask);
    auto out = detail::make_op<Real>({1}, {pp, pt}, [pp, pt, mask, nr, nc, denom](TensorNode<Real>& n) {
        Real g = n.grad[0] * Real(2) / static_cast<Real>(denom);
        for (int r = 0; r < nr; ++r) {
            if (!(*mask)[r]) continue;
            for (int c = 0; c < nc; ++c) {
                size_t i = size_t(r) * nc + c;
                Real d = pp->values[i] - pt->values[i];
                if (pp->requires_grad) {
                    pp->ensure_grad();
                    pp->grad[i] += g * d;
                }
                if (pt->requires_grad) {
                    pt->ensure_grad();
                    pt->grad[i] -= g * d;
                }
            }
        }
    });
    Real s = 0;
    for (int r = 0; r < nr; ++r) {
        if (!row_mask[r]) continue;
        for (int c = 0; c < nc; ++c) {
            Real d = pp->values[size_t(r) * nc + c] - pt->values[size_t(r) * nc + c];
            s += d * d;
        }
    }
    out.values()[0] = s / static_cast<Real>(denom);
    return out;
}

// Mean of x over rows where row_mask is nonzero; returns constant 0 when no
// row is selected (used for outcome-conditional loss terms).
template <typename Real>
Tensor<Real> mean_masked_rows(const Tensor<Real>& x, const std::vector<uint8_t>& row_mask) {
    int nr = x.rows();
    if (x.cols() != 1) throw std::invalid_argument("mean_masked_rows: expects a column vector");
    if (static_cast<int>(row_mask.size()) != nr)
        throw std::invalid_argument("mean_masked_rows: mask length mismatch");
    size_t count = 0;
    for (auto m : row_mask)
        if (m) ++count;
    if (count == 0) return Tensor<Real>::scalar(Real(0));
    auto px = x.node();
    auto mask = std::make_shared<std::vector<uint8_t>>(row_mask);
    auto out = detail::make_op<Real>({1}, {px}, [px, mask, nr, count](TensorNode<Real>& n) {
        px->ensure_grad();
        Real g = n.grad[0] / static_cast<Real>(count);
        for (int r = 0; r < nr; ++r)
            if ((*mask)[r]) px->grad[r] += g;
    });
    Real s = 0;
    for (int r = 0; r < nr; ++r)
        if (row_mask[r]) s += px->values[r];
    out.values()[0] = s / static_cast<Real>(count);
    return out;
}

// Binary cross entropy with logits, mean over all elements. targets in {0,1}.
template <typename Real>
Tensor<Real> bce_with_logits_mean(const Tensor<Real>& logits, const std::vector<Real>& targets) {
    if (logits.size() != targets.size())
        throw std::invalid_argument("bce_with_logits_mean: target count mismatch");
    size_t n_elem = logits.size();
    auto pl = logits.node();
    auto tgt = std::make_shared<std::vector<Real>>(targets);
    auto out = detail::make_op<Real>({1}, {pl}, [pl, tgt, n_elem](TensorNode<Real>& n) {
        pl->ensure_grad();
        Real g = n.grad[0] / static_cast<Real>(n_elem);
        for (size_t i = 0; i < n_elem; ++i) {
            Real z = pl->values[i];
            Real sig = z >= Real(0) ? Real(1) / (Real(1) + std::exp(-z))
                                    : std::exp(z) / (Real(1) + std::exp(z));
            pl->grad[i] += g * (sig - (*tgt)[i]);
        }
    });
    Real s = 0;
    for (size_t i = 0; i < n_elem; ++i) {
        Real z = pl->values[i];
        // softplus(z) - z*y, stable
        Real sp = z > Real(30) ? z : std::log1p(std::exp(std::min(z, Real(30))));
        s += sp - z * targets[i];
    }
    out.values()[0] = s / static_cast<Real>(n_elem);
    return out;
}

// ---- backward -----------------------------------------------------------------

// Reverse-mode sweep from a scalar root. Gradients accumulate into every
// reachable requires_grad tensor; zeroing is the caller's job.
template <typename Real>
void backward(const Tensor<Real>& root) {
    if (root.size() != 1)
        throw std::logic_error("backward: root must be a scalar tensor");
    using Node = TensorNode<Real>;
    auto root_node = root.node();
    if (!root_node->requires_grad) return;

    // iterative post-order DFS
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root_node.get(), 0);
    visited.insert(root_node.get());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->parents.size()) {
            Node* child = node->parents[next_child++].get();
            if (child->requires_grad && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Interior grads are scratch for this sweep; leaf grads accumulate across
    // sweeps until explicitly zeroed.
    for (Node* n : order) {
        if (n->backward_fn) {
            n->ensure_grad();
            std::fill(n->grad.begin(), n->grad.end(), Real(0));
        }
    }
    root_node->ensure_grad();
    root_node->grad[0] += Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) {
            n->ensure_grad();
            n->backward_fn(*n);
        }
    }
}

}  // namespace posnegdm
