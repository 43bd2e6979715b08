#pragma once

// Tape-based reverse-mode automatic differentiation over svlab::Tensor.
//
// Nodes are appended in evaluation order, so the tape itself is a
// topological order; backward() walks it once in reverse. Gradients are
// materialized on first accumulation. A tape built with record = false
// keeps only values (inference mode).

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "svlab/numerics/tensor.hpp"

namespace svlab::ad {

class Tape;

struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const noexcept { return record_; }

    // Owned leaf; receives a gradient when requires_grad is set.
    Var leaf(Tensor value, bool requires_grad = true) {
        Node n;
        n.owned = std::move(value);
        n.requires_grad = requires_grad && record_;
        return append(std::move(n));
    }

    // Leaf that borrows storage owned elsewhere (model weights). The referent
    // must outlive the tape.
    Var borrow(const Tensor& value, bool requires_grad = true) {
        Node n;
        n.external = &value;
        n.requires_grad = requires_grad && record_;
        return append(std::move(n));
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }

    // Records an op result. `parents` decides whether the node needs a
    // gradient at all; `fn` is dropped when nothing upstream wants one.
    Var push(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
        Node n;
        n.owned = std::move(value);
        if (record_) {
            for (const auto& p : parents) n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
            if (n.requires_grad) n.backward = std::move(fn);
        }
        return append(std::move(n));
    }

    const Tensor& value(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.external ? *n.external : n.owned;
    }

    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    // Gradient buffer, zero-initialized on first access.
    Tensor& grad(std::size_t id) {
        Node& n = nodes_[id];
        if (!n.has_grad) {
            n.grad = Tensor(value(id).shape());
            n.has_grad = true;
        }
        return n.grad;
    }

    bool has_grad(std::size_t id) const { return nodes_[id].has_grad; }

    const Tensor& grad_of(Var v) {
        return grad(v.id);
    }

    void backward(Var loss) {
        if (!record_) throw ContractError("backward on a tape that does not record");
        if (value(loss.id).size() != 1) {
            throw ContractError("backward requires a scalar loss, got shape " + shape_str(value(loss.id).shape()));
        }
        grad(loss.id)[0] = 1.0;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.backward && n.has_grad) n.backward(*this, i);
        }
    }

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Tensor owned;
        const Tensor* external = nullptr;
        Tensor grad;
        bool has_grad = false;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Var append(Node n) {
        nodes_.push_back(std::move(n));
        return Var{this, nodes_.size() - 1};
    }

    bool record_;
    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

inline void require_matrix(const Tensor& a, const char* op) {
    if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

inline void accumulate(Tensor& dst, std::span<const double> src) {
    auto d = dst.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0]) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " +
                             shape_str(bv.shape()));
    }
    return t.push(svlab::matmul(av, bv), {a, b}, [a, b](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& A = tp.value(a.id);
        const Tensor& B = tp.value(b.id);
        const std::size_t m = A.shape()[0], k = A.shape()[1], n = B.shape()[1];
        if (tp.requires_grad(a.id)) {
            const Tensor bt = svlab::transpose(B);
            kernels::matmul_acc(g.data().data(), bt.data().data(), tp.grad(a.id).data().data(), m, n, k);
        }
        if (tp.requires_grad(b.id)) {
            kernels::matmul_tn_acc(A.data().data(), g.data().data(), tp.grad(b.id).data().data(), m, k, n);
        }
    });
}

inline Var add(Var a, Var b) {
    detail::require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    detail::accumulate(out, b.value().data());
    return a.tape->push(std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(a.id)) detail::accumulate(tp.grad(a.id), g.data());
        if (tp.requires_grad(b.id)) detail::accumulate(tp.grad(b.id), g.data());
    });
}

// Elementwise product of equally shaped tensors.
inline Var mul(Var a, Var b) {
    detail::require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    const auto bv = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return a.tape->push(std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
        const auto g = tp.grad(self).data();
        const auto av = tp.value(a.id).data();
        const auto bv2 = tp.value(b.id).data();
        if (tp.requires_grad(a.id)) {
            auto ga = tp.grad(a.id).data();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
        }
        if (tp.requires_grad(b.id)) {
            auto gb = tp.grad(b.id).data();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

inline Var scale(Var a, double s) {
    Tensor out = a.value();
    for (auto& v : out.data()) v *= s;
    return a.tape->push(std::move(out), {a}, [a, s](Tape& tp, std::size_t self) {
        const auto g = tp.grad(self).data();
        auto ga = tp.grad(a.id).data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    });
}

// x[m x n] + bias[n] added to every row.
inline Var add_row(Var x, Var bias) {
    const Tensor& xv = x.value();
    const Tensor& bv = bias.value();
    detail::require_matrix(xv, "add_row");
    if (bv.rank() != 1 || bv.size() != xv.cols()) {
        throw DimensionError("add_row: bias " + shape_str(bv.shape()) + " for rows of " + shape_str(xv.shape()));
    }
    Tensor out = xv;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto r = out.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] += bv[j];
    }
    return x.tape->push(std::move(out), {x, bias}, [x, bias](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(x.id)) detail::accumulate(tp.grad(x.id), g.data());
        if (tp.requires_grad(bias.id)) {
            auto gb = tp.grad(bias.id).data();
            for (std::size_t i = 0; i < g.rows(); ++i) {
                const auto r = g.row(i);
                for (std::size_t j = 0; j < r.size(); ++j) gb[j] += r[j];
            }
        }
    });
}

// Exact (erf-based) GELU.
inline Var gelu(Var x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    Tensor out = x.value();
    for (auto& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    return x.tape->push(std::move(out), {x}, [x](Tape& tp, std::size_t self) {
        constexpr double inv_sqrt2pi = 0.39894228040143267794;
        const auto g = tp.grad(self).data();
        const auto xv = tp.value(x.id).data();
        auto gx = tp.grad(x.id).data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = xv[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            gx[i] += g[i] * (cdf + v * pdf);
        }
    });
}

// Row-wise layer normalization with learned gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
    const Tensor& xv = x.value();
    detail::require_matrix(xv, "layer_norm");
    const std::size_t m = xv.rows(), n = xv.cols();
    if (gain.value().size() != n || bias.value().size() != n) throw DimensionError("layer_norm: parameter length");
    Tensor out(Shape{m, n});
    Tensor xhat(Shape{m, n});
    std::vector<double> inv_std(m);
    const auto gv = gain.value().data();
    const auto bv = bias.value().data();
    for (std::size_t i = 0; i < m; ++i) {
        const auto r = xv.row(i);
        double mean = 0.0;
        for (double v : r) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : r) var += (v - mean) * (v - mean);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        auto xh = xhat.row(i);
        auto o = out.row(i);
        for (std::size_t j = 0; j < n; ++j) {
            xh[j] = (r[j] - mean) * is;
            o[j] = xh[j] * gv[j] + bv[j];
        }
    }
    Tape& t = *x.tape;
    if (!t.recording()) return t.push(std::move(out), {x, gain, bias}, {});
    return t.push(std::move(out), {x, gain, bias},
                  [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, std::size_t self) {
                      const Tensor& g = tp.grad(self);
                      const std::size_t m = g.rows(), n = g.cols();
                      const auto gv = tp.value(gain.id).data();
                      if (tp.requires_grad(gain.id) || tp.requires_grad(bias.id)) {
                          auto gg = tp.grad(gain.id).data();
                          auto gb = tp.grad(bias.id).data();
                          for (std::size_t i = 0; i < m; ++i) {
                              const auto gr = g.row(i);
                              const auto xh = xhat.row(i);
                              for (std::size_t j = 0; j < n; ++j) {
                                  gg[j] += gr[j] * xh[j];
                                  gb[j] += gr[j];
                              }
                          }
                      }
                      if (tp.requires_grad(x.id)) {
                          Tensor& gx = tp.grad(x.id);
                          std::vector<double> dxh(n);
                          for (std::size_t i = 0; i < m; ++i) {
                              const auto gr = g.row(i);
                              const auto xh = xhat.row(i);
                              double s1 = 0.0, s2 = 0.0;
                              for (std::size_t j = 0; j < n; ++j) {
                                  dxh[j] = gr[j] * gv[j];
                                  s1 += dxh[j];
                                  s2 += dxh[j] * xh[j];
                              }
                              s1 /= static_cast<double>(n);
                              s2 /= static_cast<double>(n);
                              auto out = gx.row(i);
                              for (std::size_t j = 0; j < n; ++j) out[j] += inv_std[i] * (dxh[j] - s1 - xh[j] * s2);
                          }
                      }
                  });
}

// Softmax over the last axis of a matrix (or of a vector).
inline Var softmax_rows(Var x) {
    const Tensor& xv = x.value();
    if (xv.rank() != 1 && xv.rank() != 2) throw DimensionError("softmax_rows: rank must be 1 or 2");
    Tensor out = svlab::softmax(xv, xv.rank() - 1);
    return x.tape->push(std::move(out), {x}, [x](Tape& tp, std::size_t self) {
        const Tensor& y = tp.value(self);
        const Tensor& g = tp.grad(self);
        Tensor& gx = tp.grad(x.id);
        const std::size_t n = y.shape().back();
        const std::size_t m = y.size() / n;
        for (std::size_t i = 0; i < m; ++i) {
            const double* yr = y.data().data() + i * n;
            const double* gr = g.data().data() + i * n;
            double* o = gx.data().data() + i * n;
            const double s = kernels::dot(yr, gr, n);
            for (std::size_t j = 0; j < n; ++j) o[j] += yr[j] * (gr[j] - s);
        }
    });
}

// Gathers rows of a table: out[i] = table[ids[i]].
inline Var embedding(Var table, std::vector<std::size_t> ids) {
    const Tensor& tv = table.value();
    detail::require_matrix(tv, "embedding");
    const std::size_t d = tv.cols();
    Tensor out(Shape{ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= tv.rows()) {
            throw DimensionError("embedding: index " + std::to_string(ids[i]) + " out of range for " +
                                 std::to_string(tv.rows()) + " rows");
        }
        const auto src = tv.row(ids[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return table.tape->push(std::move(out), {table}, [table, ids = std::move(ids)](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        Tensor& gt = tp.grad(table.id);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            auto dst = gt.row(ids[i]);
            const auto src = g.row(i);
            for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
        }
    });
}

inline Var gather_rows(Var x, std::vector<std::size_t> rows) {
    return embedding(x, std::move(rows));
}

// Copy of x with one row replaced by `replacement` (a vector of row length).
inline Var replace_row(Var x, std::size_t row, Var replacement) {
    const Tensor& xv = x.value();
    detail::require_matrix(xv, "replace_row");
    if (row >= xv.rows()) throw DimensionError("replace_row: row " + std::to_string(row) + " out of range");
    if (replacement.value().size() != xv.cols()) {
        throw DimensionError("replace_row: replacement length " + std::to_string(replacement.value().size()) +
                             " != row length " + std::to_string(xv.cols()));
    }
    Tensor out = xv;
    const auto src = replacement.value().data();
    std::copy(src.begin(), src.end(), out.row(row).begin());
    return x.tape->push(std::move(out), {x, replacement}, [x, row, replacement](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(x.id)) {
            Tensor& gx = tp.grad(x.id);
            for (std::size_t i = 0; i < g.rows(); ++i) {
                if (i == row) continue;
                auto dst = gx.row(i);
                const auto src = g.row(i);
                for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
            }
        }
        if (tp.requires_grad(replacement.id)) detail::accumulate(tp.grad(replacement.id), g.row(row));
    });
}

inline Var sum(Var x) {
    double s = 0.0;
    for (double v : x.value().data()) s += v;
    return x.tape->push(Tensor::scalar(s), {x}, [x](Tape& tp, std::size_t self) {
        const double g = tp.grad(self)[0];
        for (auto& v : tp.grad(x.id).data()) v += g;
    });
}

inline Var outer(Var u, Var v) {
    Tensor out = svlab::outer(u.value(), v.value());
    return u.tape->push(std::move(out), {u, v}, [u, v](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& uv = tp.value(u.id);
        const Tensor& vv = tp.value(v.id);
        if (tp.requires_grad(u.id)) {
            auto gu = tp.grad(u.id).data();
            for (std::size_t i = 0; i < uv.size(); ++i) gu[i] += kernels::dot(g.row(i).data(), vv.data().data(), vv.size());
        }
        if (tp.requires_grad(v.id)) {
            auto gv = tp.grad(v.id).data();
            for (std::size_t i = 0; i < uv.size(); ++i) {
                const auto r = g.row(i);
                for (std::size_t j = 0; j < vv.size(); ++j) gv[j] += uv[i] * r[j];
            }
        }
    });
}

// Mean negative log-likelihood of integer targets under row-wise softmax of
// logits[m x V].
inline Var cross_entropy(Var logits, std::vector<std::size_t> targets) {
    const Tensor& lv = logits.value();
    detail::require_matrix(lv, "cross_entropy");
    const std::size_t m = lv.rows(), n = lv.cols();
    if (targets.size() != m) throw DimensionError("cross_entropy: one target per row required");
    Tensor probs = svlab::softmax(lv, 1);
    double loss = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        if (targets[i] >= n) throw DimensionError("cross_entropy: target out of range");
        loss -= std::log(std::max(probs(i, targets[i]), 1e-300));
    }
    loss /= static_cast<double>(m);
    Tape& t = *logits.tape;
    if (!t.recording()) return t.push(Tensor::scalar(loss), {logits}, {});
    return t.push(Tensor::scalar(loss), {logits},
                  [logits, targets = std::move(targets), probs = std::move(probs)](Tape& tp, std::size_t self) {
                      const double g = tp.grad(self)[0] / static_cast<double>(targets.size());
                      Tensor& gl = tp.grad(logits.id);
                      for (std::size_t i = 0; i < targets.size(); ++i) {
                          auto dst = gl.row(i);
                          const auto p = probs.row(i);
                          for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += g * p[j];
                          dst[targets[i]] -= g;
                      }
                  });
}

enum class AttentionKind { softmax, relaxed_linear };

struct AttentionShape {
    std::size_t batch = 1;
    std::size_t seq = 1;
    std::size_t heads = 1;
};

// Causal multi-head attention over q, k, v of shape [batch*seq x d] (rows
// grouped by sequence). Returns the concatenation of head outputs, i.e. the
// value-weighted sums before any output projection.
//
// softmax:        out_t = sum_{s<=t} softmax_s(q_t.k_s / sqrt(d_head)) v_s
// relaxed_linear: out_t = sum_{s<=t} (q_t.k_s) v_s   (no normalizer, no scaling)
inline Var causal_attention(Var q, Var k, Var v, AttentionShape as, AttentionKind kind) {
    const Tensor& qv = q.value();
    detail::require_matrix(qv, "causal_attention");
    detail::require_same_shape(qv, k.value(), "causal_attention");
    detail::require_same_shape(qv, v.value(), "causal_attention");
    const std::size_t d = qv.cols();
    if (as.heads == 0 || d % as.heads != 0) throw DimensionError("causal_attention: width not divisible by heads");
    if (qv.rows() != as.batch * as.seq) throw DimensionError("causal_attention: rows != batch*seq");
    const std::size_t dh = d / as.heads;
    const std::size_t T = as.seq;
    const double sc = kind == AttentionKind::softmax ? 1.0 / std::sqrt(static_cast<double>(dh)) : 1.0;

    // weights[b][h][t][s], s <= t, lower-triangular rows packed densely as T x T
    std::vector<double> weights(as.batch * as.heads * T * T, 0.0);
    Tensor out(Shape{qv.rows(), d});
    const double* Q = qv.data().data();
    const double* K = k.value().data().data();
    const double* V = v.value().data().data();
    for (std::size_t b = 0; b < as.batch; ++b) {
        for (std::size_t h = 0; h < as.heads; ++h) {
            double* W = weights.data() + (b * as.heads + h) * T * T;
            for (std::size_t t = 0; t < T; ++t) {
                const double* qt = Q + (b * T + t) * d + h * dh;
                double* wt = W + t * T;
                for (std::size_t s = 0; s <= t; ++s) wt[s] = sc * kernels::dot(qt, K + (b * T + s) * d + h * dh, dh);
                if (kind == AttentionKind::softmax) kernels::softmax_inplace(wt, t + 1);
                double* ot = out.data().data() + (b * T + t) * d + h * dh;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double w = wt[s];
                    const double* vs = V + (b * T + s) * d + h * dh;
                    for (std::size_t j = 0; j < dh; ++j) ot[j] += w * vs[j];
                }
            }
        }
    }
    Tape& tp0 = *q.tape;
    if (!tp0.recording()) return tp0.push(std::move(out), {q, k, v}, {});
    return tp0.push(
        std::move(out), {q, k, v},
        [q, k, v, as, kind, sc, dh, weights = std::move(weights)](Tape& tp, std::size_t self) {
            const Tensor& G = tp.grad(self);
            const std::size_t d = G.cols();
            const std::size_t T = as.seq;
            const double* Q = tp.value(q.id).data().data();
            const double* K = tp.value(k.id).data().data();
            const double* V = tp.value(v.id).data().data();
            double* dQ = tp.requires_grad(q.id) ? tp.grad(q.id).data().data() : nullptr;
            double* dK = tp.requires_grad(k.id) ? tp.grad(k.id).data().data() : nullptr;
            double* dV = tp.requires_grad(v.id) ? tp.grad(v.id).data().data() : nullptr;
            std::vector<double> dw(T);
            for (std::size_t b = 0; b < as.batch; ++b) {
                for (std::size_t h = 0; h < as.heads; ++h) {
                    const double* W = weights.data() + (b * as.heads + h) * T * T;
                    for (std::size_t t = 0; t < T; ++t) {
                        const double* gt = G.data().data() + (b * T + t) * d + h * dh;
                        const double* wt = W + t * T;
                        for (std::size_t s = 0; s <= t; ++s) {
                            const std::size_t off = (b * T + s) * d + h * dh;
                            dw[s] = kernels::dot(gt, V + off, dh);
                            if (dV) {
                                for (std::size_t j = 0; j < dh; ++j) dV[off + j] += wt[s] * gt[j];
                            }
                        }
                        // dscore = dweight for relaxed, softmax jacobian otherwise
                        if (kind == AttentionKind::softmax) {
                            double acc = 0.0;
                            for (std::size_t s = 0; s <= t; ++s) acc += wt[s] * dw[s];
                            for (std::size_t s = 0; s <= t; ++s) dw[s] = wt[s] * (dw[s] - acc);
                        }
                        const std::size_t qoff = (b * T + t) * d + h * dh;
                        for (std::size_t s = 0; s <= t; ++s) {
                            const double ds = sc * dw[s];
                            const std::size_t koff = (b * T + s) * d + h * dh;
                            if (dQ) {
                                for (std::size_t j = 0; j < dh; ++j) dQ[qoff + j] += ds * K[koff + j];
                            }
                            if (dK) {
                                for (std::size_t j = 0; j < dh; ++j) dK[koff + j] += ds * Q[qoff + j];
                            }
                        }
                    }
                }
            }
        });
}

}  // namespace svlab::ad
