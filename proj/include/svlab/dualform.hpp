#pragma once

// Numerical certificate for the dual form of relaxed linear attention:
//
//   W_V [X'; X] (W_K [X'; X])^T q
//     = (W_ZSL + sum_i (W_V x'_i) (x) (W_K x'_i)) q,   W_ZSL = W_V X (W_K X)^T
//
// and for reading the demonstration term as a gradient-descent update
// Delta W_GD = sum_i e_i (x) x_i with e_i = W_V x'_i and x_i = W_K x'_i.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "svlab/model.hpp"
#include "svlab/numerics/autodiff.hpp"
#include "svlab/numerics/tensor.hpp"
#include "svlab/util/rng.hpp"

namespace svlab::dualform {

struct Instance {
    Tensor w_k;          // [d x d]
    Tensor w_v;          // [d x d]
    Tensor demos;        // X': [d x m]
    Tensor zero_shot;    // X:  [d x k]
    std::vector<double> q;

    std::size_t d() const { return w_k.rows(); }
    std::size_t m() const { return demos.cols(); }

    void validate() const {
        if (w_k.rank() != 2 || w_v.rank() != 2 || demos.rank() != 2 || zero_shot.rank() != 2) {
            throw DimensionError("dual form: all operands must be matrices");
        }
        const std::size_t n = w_k.rows();
        if (w_k.cols() != n || w_v.rows() != n || w_v.cols() != n || demos.rows() != n || zero_shot.rows() != n ||
            q.size() != n) {
            throw DimensionError("dual form: inconsistent dimensions (W_K " + shape_str(w_k.shape()) + ", W_V " +
                                 shape_str(w_v.shape()) + ", X' " + shape_str(demos.shape()) + ", X " +
                                 shape_str(zero_shot.shape()) + ", q[" + std::to_string(q.size()) + "])");
        }
        for (const Tensor* t : {&w_k, &w_v, &demos, &zero_shot}) t->check_finite("dual form operand");
        Tensor::vector(q).check_finite("dual form query");
    }
};

struct Report {
    std::vector<double> a_direct;
    std::vector<double> a_decomposed;
    Tensor w_zsl;
    Tensor delta_w;
    std::vector<std::vector<double>> meta_gradients;  // e_i = W_V x'_i
    double max_rel_error = 0.0;
};

struct GdReport {
    Tensor delta_w_gd;
    Tensor delta_w_attention;
    double max_abs_diff = 0.0;
};

namespace detail {

inline Tensor hcat(const Tensor& a, const Tensor& b) {
    Tensor out(Shape{a.rows(), a.cols() + b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
        for (std::size_t j = 0; j < b.cols(); ++j) out(i, a.cols() + j) = b(i, j);
    }
    return out;
}

inline std::vector<double> column(const Tensor& a, std::size_t j) {
    std::vector<double> c(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) c[i] = a(i, j);
    return c;
}

// (W_V C)(W_K C)^T as an explicit d x d matrix.
inline Tensor kv_product(const Tensor& w_k, const Tensor& w_v, const Tensor& context) {
    if (context.cols() == 0) return Tensor(Shape{w_v.rows(), w_k.rows()});
    return matmul(matmul(w_v, context), transpose(matmul(w_k, context)));
}

inline double rel_error(std::span<const double> ref, std::span<const double> got) {
    double scale = 0.0;
    for (double v : ref) scale = std::max(scale, std::abs(v));
    return max_abs_diff(ref, got) / std::max(scale, 1e-30);
}

}  // namespace detail

inline std::vector<double> direct(const Instance& inst) {
    inst.validate();
    const Tensor context = detail::hcat(inst.demos, inst.zero_shot);
    return matvec(detail::kv_product(inst.w_k, inst.w_v, context), inst.q);
}

inline Report decomposed(const Instance& inst) {
    inst.validate();
    Report r;
    r.w_zsl = detail::kv_product(inst.w_k, inst.w_v, inst.zero_shot);
    const std::size_t d = inst.d();
    r.delta_w = Tensor(Shape{d, d});
    const Tensor values = matmul(inst.w_v, inst.demos);
    const Tensor keys = matmul(inst.w_k, inst.demos);
    for (std::size_t i = 0; i < inst.m(); ++i) {
        auto e = detail::column(values, i);
        const Tensor op = outer(Tensor::vector(e), Tensor::vector(detail::column(keys, i)));
        for (std::size_t t = 0; t < op.size(); ++t) r.delta_w[t] += op[t];
        r.meta_gradients.push_back(std::move(e));
    }
    const auto zsl = matvec(r.w_zsl, inst.q);
    const auto upd = matvec(r.delta_w, inst.q);
    r.a_decomposed.resize(d);
    for (std::size_t i = 0; i < d; ++i) r.a_decomposed[i] = zsl[i] + upd[i];
    r.a_direct = direct(inst);
    r.max_rel_error = detail::rel_error(r.a_direct, r.a_decomposed);
    return r;
}

// Builds a linear model y = W x (W starts at zero) on inputs x_i = W_K x'_i
// with a squared-error loss whose targets make the back-propagated errors
// -lr * dL/dy_i equal e_i = W_V x'_i. The weight gradient comes from the
// autodiff engine; Delta W_GD = -lr * dL/dW is compared with the outer
// product sum of the decomposition.
inline GdReport gd_correspondence(const Instance& inst, double lr = 1.0) {
    if (!(lr > 0)) throw std::invalid_argument("gd_correspondence: lr must be > 0");
    const Report dec = decomposed(inst);
    const std::size_t d = inst.d(), m = inst.m();
    GdReport r;
    r.delta_w_attention = dec.delta_w;
    if (m == 0) {
        r.delta_w_gd = Tensor(Shape{d, d});
        r.max_abs_diff = max_abs_diff(r.delta_w_gd.data(), r.delta_w_attention.data());
        return r;
    }
    // rows are examples: X_in [m x d], targets [m x d]
    const Tensor inputs = transpose(matmul(inst.w_k, inst.demos));
    Tensor targets(Shape{m, d});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) targets(i, j) = dec.meta_gradients[i][j] / lr;

    ad::Tape tape;
    const ad::Var w_t = tape.leaf(Tensor(Shape{d, d}));  // W^T, so that Y = X_in W^T
    const ad::Var x = tape.constant(inputs);
    const ad::Var neg_t = tape.constant([&] {
        Tensor n = targets;
        for (auto& v : n.data()) v = -v;
        return n;
    }());
    const ad::Var resid = ad::add(ad::matmul(x, w_t), neg_t);
    const ad::Var loss = ad::scale(ad::sum(ad::mul(resid, resid)), 0.5);
    tape.backward(loss);
    const Tensor grad_wt = tape.grad(w_t.id);
    r.delta_w_gd = Tensor(Shape{d, d});
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) r.delta_w_gd(i, j) = -lr * grad_wt(j, i);
    r.max_abs_diff = max_abs_diff(r.delta_w_gd.data(), r.delta_w_attention.data());
    return r;
}

// Distance between softmax attention (scaled by 1/sqrt(d)) and its relaxed
// linear form on the same instance; reported, never asserted small.
inline double softmax_gap(const Instance& inst) {
    inst.validate();
    const Tensor context = detail::hcat(inst.demos, inst.zero_shot);
    const auto relaxed = direct(inst);
    const auto soft = attention_head(inst.w_k, inst.w_v, context, inst.q, AttentionKind::softmax);
    return max_abs_diff(relaxed, soft);
}

// Gaussian instance with entries scaled by 1/sqrt(d).
inline Instance random_instance(std::uint64_t seed, std::size_t d, std::size_t m, std::size_t k = 2) {
    Rng rng(derive_seed(seed, "dualform"));
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    auto gen = [&](std::size_t r, std::size_t c) {
        Tensor t(Shape{r, c});
        for (auto& v : t.data()) v = sd * rng.normal();
        return t;
    };
    Instance inst;
    inst.w_k = gen(d, d);
    inst.w_v = gen(d, d);
    inst.demos = gen(d, m);
    inst.zero_shot = gen(d, k);
    inst.q.resize(d);
    for (auto& v : inst.q) v = rng.normal();
    return inst;
}

}  // namespace svlab::dualform
