#pragma once

// Two-component PCA of state vectors via eigendecomposition of the sample
// covariance.

#include <array>
#include <cmath>
#include <map>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "svlab/numerics/tensor.hpp"
#include "svlab/statevec.hpp"

namespace svlab::harness {

struct PcaExport {
    std::vector<std::array<double, 2>> points;
    std::vector<std::size_t> labels;           // example position of each point
    std::array<double, 2> explained_variance{};  // fraction of total variance
    std::array<std::vector<double>, 2> components;
    std::vector<double> mean;
};

// Rows are observations. Components are unit length, mutually orthogonal
// and sign-fixed so their largest-magnitude entry is positive. All-identical
// rows give zero explained variance and zero coordinates.
inline PcaExport pca_project(const std::vector<std::vector<double>>& rows, std::vector<std::size_t> labels = {}) {
    if (rows.size() < 3) throw std::invalid_argument("pca: need at least 3 observations, got " + std::to_string(rows.size()));
    const std::size_t n = rows.size(), d = rows.front().size();
    if (d < 2) throw DimensionError("pca: need at least 2 features");
    for (const auto& r : rows)
        if (r.size() != d) throw DimensionError("pca: ragged observations");
    if (!labels.empty() && labels.size() != n) throw DimensionError("pca: one label per observation required");
    if (labels.empty()) labels.assign(n, 0);

    Eigen::MatrixXd x(n, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) x(i, j) = rows[i][j];
    if (!x.allFinite()) throw NumericError("pca: non-finite input");
    const Eigen::RowVectorXd mu = x.colwise().mean();
    x.rowwise() -= mu;
    const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) throw NumericError("pca: eigendecomposition failed");

    PcaExport out;
    out.labels = std::move(labels);
    out.mean.assign(mu.data(), mu.data() + d);
    const Eigen::VectorXd& ev = eig.eigenvalues();  // ascending
    double total = 0.0;
    for (Eigen::Index i = 0; i < ev.size(); ++i) total += std::max(ev(i), 0.0);
    Eigen::MatrixXd comps(d, 2);
    for (int k = 0; k < 2; ++k) {
        Eigen::VectorXd c = eig.eigenvectors().col(static_cast<Eigen::Index>(d) - 1 - k);
        Eigen::Index imax = 0;
        c.cwiseAbs().maxCoeff(&imax);
        if (c(imax) < 0) c = -c;
        comps.col(k) = c;
        out.components[static_cast<std::size_t>(k)].assign(c.data(), c.data() + d);
        const double lam = std::max(ev(static_cast<Eigen::Index>(d) - 1 - k), 0.0);
        out.explained_variance[static_cast<std::size_t>(k)] = total > 0 ? lam / total : 0.0;
    }
    const bool degenerate = !(total > 0);
    const Eigen::MatrixXd proj = x * comps;
    out.points.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.points[i] = degenerate ? std::array<double, 2>{0.0, 0.0}
                                   : std::array<double, 2>{proj(static_cast<Eigen::Index>(i), 0), proj(static_cast<Eigen::Index>(i), 1)};
    }
    return out;
}

// Flattened across layers when `layer` is empty, else the given 1-based layer.
inline std::vector<double> pca_features(const StateVector& sv, std::optional<std::size_t> layer) {
    if (!layer) return sv.flattened();
    if (*layer < 1 || *layer > sv.L()) {
        throw std::out_of_range("pca: layer " + std::to_string(*layer) + " outside 1.." + std::to_string(sv.L()));
    }
    return sv.vectors[*layer - 1];
}

inline PcaExport pca_project(const std::vector<StateVector>& svs, std::optional<std::size_t> layer,
                             std::vector<std::size_t> labels = {}) {
    std::vector<std::vector<double>> rows;
    rows.reserve(svs.size());
    for (const auto& sv : svs) rows.push_back(pca_features(sv, layer));
    if (labels.empty())
        for (const auto& sv : svs) labels.push_back(sv.meta.n_examples_seen);
    return pca_project(rows, std::move(labels));
}

struct ClusterSeparation {
    double first_vs_rest_distance = 0.0;  // centroid of position 1 to centroid of positions >= 2
    double mean_within_spread = 0.0;      // mean distance to own position centroid, averaged over positions
};

inline ClusterSeparation cluster_separation(const std::vector<std::vector<double>>& rows,
                                            const std::vector<std::size_t>& positions) {
    if (rows.size() != positions.size() || rows.empty()) throw DimensionError("cluster_separation: bad input");
    const std::size_t d = rows.front().size();
    std::map<std::size_t, std::vector<std::size_t>> by_pos;
    for (std::size_t i = 0; i < rows.size(); ++i) by_pos[positions[i]].push_back(i);
    auto centroid = [&](const std::vector<std::size_t>& idx) {
        std::vector<double> c(d, 0.0);
        for (auto i : idx)
            for (std::size_t j = 0; j < d; ++j) c[j] += rows[i][j];
        for (auto& v : c) v /= static_cast<double>(idx.size());
        return c;
    };
    auto dist = [&](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
        return std::sqrt(s);
    };
    ClusterSeparation cs;
    std::vector<std::size_t> first, rest;
    for (const auto& [p, idx] : by_pos) (p == 1 ? first : rest).insert((p == 1 ? first : rest).end(), idx.begin(), idx.end());
    if (!first.empty() && !rest.empty()) cs.first_vs_rest_distance = dist(centroid(first), centroid(rest));
    double spread = 0.0;
    for (const auto& [p, idx] : by_pos) {
        const auto c = centroid(idx);
        double s = 0.0;
        for (auto i : idx) s += dist(rows[i], c);
        spread += s / static_cast<double>(idx.size());
    }
    cs.mean_within_spread = spread / static_cast<double>(by_pos.size());
    return cs;
}

}  // namespace svlab::harness
