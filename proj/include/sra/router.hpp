#pragma once

// Cosine-anchor routing: anchor initialization, resonance scoring, noisy
// top-k selection and the weighted expert mixture, plus the backward pieces
// the model needs to train through them.

#include "sra/common.hpp"
#include "sra/routing_record.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace sra {

/// Learnable semantic anchors, one row per expert.
template <RealScalar Scalar>
struct AnchorSet {
    Matrix<Scalar> anchors;
    Scalar eps = static_cast<Scalar>(kEps);

    int n_experts() const { return static_cast<int>(anchors.rows()); }
    int dim() const { return static_cast<int>(anchors.cols()); }

    void validate() const {
        require(anchors.rows() >= 2, "AnchorSet needs at least 2 anchors");
        require(anchors.cols() >= 1, "AnchorSet needs dim >= 1");
        require(anchors.allFinite(), "AnchorSet contains non-finite entries");
        for (Eigen::Index i = 0; i < anchors.rows(); ++i)
            require(anchors.row(i).norm() > eps, "AnchorSet row " + std::to_string(i) + " is zero");
    }
};

template <RealScalar Scalar>
using ResonanceScores = Vector<Scalar>;

template <RealScalar Scalar>
struct RoutingDecision {
    std::vector<int> indices;
    std::vector<Scalar> weights;
    std::vector<Scalar> selected_scores;  // perturbed scores that fed the softmax
    double noise_sigma = 0.0;
};

namespace detail {

inline void check_expert_shape(int n_experts, int dim) {
    require(n_experts >= 2, "n_experts must be >= 2");
    require(dim >= 1, "dim must be >= 1");
}

}  // namespace detail

/// Rows orthonormal in consecutive blocks of at most `dim` rows (a single block when N <= D).
template <RealScalar Scalar>
AnchorSet<Scalar> init_anchors_orthogonal(int n_experts, int dim, std::uint64_t seed) {
    detail::check_expert_shape(n_experts, dim);
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    Eigen::MatrixXd result(n_experts, dim);
    for (int start = 0; start < n_experts; start += dim) {
        const int rows = std::min(dim, n_experts - start);
        Eigen::MatrixXd gaussian(dim, rows);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < dim; ++c) gaussian(c, r) = normal(rng);
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian);
        Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(dim, rows);
        const Eigen::MatrixXd r_factor = qr.matrixQR().topRows(rows).template triangularView<Eigen::Upper>();
        for (int r = 0; r < rows; ++r)
            if (r_factor(r, r) < 0) q.col(r) *= -1.0;
        result.middleRows(start, rows) = q.transpose();
    }
    AnchorSet<Scalar> set;
    set.anchors = result.cast<Scalar>();
    return set;
}

/// Uniform on [-b, b] with b = sqrt(6 / dim).
template <RealScalar Scalar>
AnchorSet<Scalar> init_anchors_kaiming(int n_experts, int dim, std::uint64_t seed) {
    detail::check_expert_shape(n_experts, dim);
    Rng rng(seed);
    const double bound = std::sqrt(6.0 / dim);
    std::uniform_real_distribution<double> uniform(-bound, bound);
    AnchorSet<Scalar> set;
    set.anchors.resize(n_experts, dim);
    for (int i = 0; i < n_experts; ++i)
        for (int j = 0; j < dim; ++j) set.anchors(i, j) = static_cast<Scalar>(uniform(rng));
    return set;
}

/// cos(x_r, y_n) for every row pair, guarded as dot / (|x| |y| + eps). Shape rows(x) x rows(y).
template <RealScalar Scalar>
Matrix<Scalar> cosine_matrix(const Matrix<Scalar>& x, const Matrix<Scalar>& y, Scalar eps) {
    require(x.cols() == y.cols(), "cosine_matrix: dimension mismatch");
    const Vector<Scalar> x_norm = x.rowwise().norm();
    const Vector<Scalar> y_norm = y.rowwise().norm();
    Matrix<Scalar> dots = x * y.transpose();
    Matrix<Scalar> denom = x_norm * y_norm.transpose();
    denom.array() += eps;
    return (dots.array() / denom.array()).matrix();
}

/// Backward of cosine_matrix given dL/dC; accumulates into dx / dy when non-null.
template <RealScalar Scalar>
void cosine_matrix_backward(const Matrix<Scalar>& x, const Matrix<Scalar>& y, Scalar eps,
                            const Matrix<Scalar>& grad, Matrix<Scalar>* dx, Matrix<Scalar>* dy) {
    const Vector<Scalar> x_norm = x.rowwise().norm();
    const Vector<Scalar> y_norm = y.rowwise().norm();
    const Matrix<Scalar> dots = x * y.transpose();
    Matrix<Scalar> denom = x_norm * y_norm.transpose();
    denom.array() += eps;

    // dC/dx = y/den - dot * |y| x / (|x| den^2), symmetric for y.
    const Matrix<Scalar> direct = (grad.array() / denom.array()).matrix();
    const Matrix<Scalar> radial = (grad.array() * dots.array() / denom.array().square()).matrix();

    if (dx) {
        Matrix<Scalar> g = direct * y;
        const Vector<Scalar> coeff = radial * y_norm;
        for (Eigen::Index r = 0; r < x.rows(); ++r)
            if (x_norm(r) > Scalar(0)) g.row(r) -= (coeff(r) / x_norm(r)) * x.row(r);
        *dx += g;
    }
    if (dy) {
        Matrix<Scalar> g = direct.transpose() * x;
        const Vector<Scalar> coeff = radial.transpose() * x_norm;
        for (Eigen::Index n = 0; n < y.rows(); ++n)
            if (y_norm(n) > Scalar(0)) g.row(n) -= (coeff(n) / y_norm(n)) * y.row(n);
        *dy += g;
    }
}

/// Resonance of one token representation against every anchor.
template <RealScalar Scalar>
ResonanceScores<Scalar> resonance(const Vector<Scalar>& token_repr, const AnchorSet<Scalar>& anchors) {
    require(token_repr.size() == anchors.dim(), "resonance: token dimension " +
                                                    std::to_string(token_repr.size()) + " != anchor dimension " +
                                                    std::to_string(anchors.dim()));
    require(token_repr.allFinite(), "resonance: token representation is not finite");
    const Matrix<Scalar> row = token_repr.transpose();
    return cosine_matrix<Scalar>(row, anchors.anchors, anchors.eps).row(0).transpose();
}

/// Resonance for a T x D block of token representations; returns T x N.
template <RealScalar Scalar>
Matrix<Scalar> resonance_matrix(const Matrix<Scalar>& token_reprs, const AnchorSet<Scalar>& anchors) {
    require(token_reprs.cols() == anchors.dim(), "resonance: token dimension " +
                                                     std::to_string(token_reprs.cols()) +
                                                     " != anchor dimension " + std::to_string(anchors.dim()));
    return cosine_matrix<Scalar>(token_reprs, anchors.anchors, anchors.eps);
}

/// Top-k over (scores + noise), ties to the lowest index, softmax over the selected values.
/// No random numbers are drawn when noise_sigma == 0.
template <typename Derived>
RoutingDecision<typename Derived::Scalar> select_topk(const Eigen::DenseBase<Derived>& scores, int k,
                                                      double noise_sigma, Rng& rng) {
    using Scalar = typename Derived::Scalar;
    const int n = static_cast<int>(scores.size());
    require(k >= 1 && k <= n, "select_topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    require(noise_sigma >= 0.0, "select_topk: noise_sigma must be nonnegative");

    std::vector<Scalar> perturbed(n);
    for (int i = 0; i < n; ++i) perturbed[i] = scores.derived()(i);
    if (noise_sigma > 0.0) {
        std::normal_distribution<double> normal(0.0, noise_sigma);
        for (auto& v : perturbed) v += static_cast<Scalar>(normal(rng));
    }

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
        return perturbed[a] > perturbed[b] || (perturbed[a] == perturbed[b] && a < b);
    });

    RoutingDecision<Scalar> decision;
    decision.noise_sigma = noise_sigma;
    decision.indices.assign(order.begin(), order.begin() + k);
    decision.selected_scores.resize(k);
    for (int s = 0; s < k; ++s) decision.selected_scores[s] = perturbed[decision.indices[s]];

    const Scalar top = decision.selected_scores.front();
    decision.weights.resize(k);
    Scalar total(0);
    for (int s = 0; s < k; ++s) total += decision.weights[s] = std::exp(decision.selected_scores[s] - top);
    for (auto& w : decision.weights) w /= total;
    return decision;
}

/// dL/d(selected score) from dL/d(weight) through the top-k softmax.
template <RealScalar Scalar>
std::vector<Scalar> topk_softmax_backward(const RoutingDecision<Scalar>& decision,
                                          const std::vector<Scalar>& d_weights) {
    Scalar inner(0);
    for (std::size_t s = 0; s < d_weights.size(); ++s) inner += decision.weights[s] * d_weights[s];
    std::vector<Scalar> d_scores(d_weights.size());
    for (std::size_t s = 0; s < d_weights.size(); ++s)
        d_scores[s] = decision.weights[s] * (d_weights[s] - inner);
    return d_scores;
}

/// Routes every row of `scores` independently.
template <RealScalar Scalar>
std::vector<RoutingDecision<Scalar>> route_tokens(const Matrix<Scalar>& scores, int k, double noise_sigma, Rng& rng) {
    std::vector<RoutingDecision<Scalar>> decisions;
    decisions.reserve(scores.rows());
    for (Eigen::Index t = 0; t < scores.rows(); ++t) decisions.push_back(select_topk(scores.row(t), k, noise_sigma, rng));
    return decisions;
}

/// Per-expert list of (token row, slot) pairs, in token order.
struct Dispatch {
    std::vector<std::vector<int>> rows;
    std::vector<std::vector<int>> slots;
};

template <RealScalar Scalar>
Dispatch group_by_expert(const std::vector<RoutingDecision<Scalar>>& decisions, int n_experts) {
    Dispatch dispatch;
    dispatch.rows.resize(n_experts);
    dispatch.slots.resize(n_experts);
    for (std::size_t t = 0; t < decisions.size(); ++t) {
        const auto& d = decisions[t];
        for (std::size_t s = 0; s < d.indices.size(); ++s) {
            dispatch.rows[d.indices[s]].push_back(static_cast<int>(t));
            dispatch.slots[d.indices[s]].push_back(static_cast<int>(s));
        }
    }
    return dispatch;
}

template <RealScalar Scalar>
Matrix<Scalar> gather_rows(const Matrix<Scalar>& source, const std::vector<int>& rows) {
    Matrix<Scalar> out(static_cast<Eigen::Index>(rows.size()), source.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = source.row(rows[i]);
    return out;
}

template <RealScalar Scalar>
LayerRecord make_layer_record(const std::vector<RoutingDecision<Scalar>>& decisions) {
    LayerRecord record;
    record.entries.reserve(decisions.size());
    for (std::size_t t = 0; t < decisions.size(); ++t) {
        RoutingEntry entry;
        entry.position = static_cast<std::int64_t>(t);
        entry.experts = decisions[t].indices;
        entry.weights.assign(decisions[t].weights.begin(), decisions[t].weights.end());
        record.entries.push_back(std::move(entry));
    }
    return record;
}

/// Anything that maps a block of D-dimensional rows to D-dimensional rows, per expert.
template <typename Bank, typename Scalar>
concept ExpertBank = requires(const Bank& bank, int e, const Matrix<Scalar>& rows) {
    { bank.size() } -> std::convertible_to<int>;
    { bank.apply(e, rows) } -> std::convertible_to<Matrix<Scalar>>;
};

template <RealScalar Scalar>
struct CsrResult {
    Matrix<Scalar> outputs;
    LayerRecord record;
    Matrix<Scalar> all_scores;  // pre-noise resonance, T x N
    std::vector<RoutingDecision<Scalar>> decisions;
    std::vector<Matrix<Scalar>> expert_outputs;  // per expert, rows follow Dispatch order
    Dispatch dispatch;
};

/// y_t = sum over selected i of w_i * Expert_i(h_t).
template <RealScalar Scalar, ExpertBank<Scalar> Bank>
CsrResult<Scalar> csr_forward(const Matrix<Scalar>& token_reprs, const AnchorSet<Scalar>& anchors, const Bank& experts,
                              int k, double noise_sigma, Rng& rng) {
    require(experts.size() == anchors.n_experts(), "csr_forward: expert bank size != number of anchors");
    CsrResult<Scalar> result;
    result.all_scores = resonance_matrix(token_reprs, anchors);
    result.decisions = route_tokens(result.all_scores, k, noise_sigma, rng);
    result.record = make_layer_record(result.decisions);
    result.dispatch = group_by_expert(result.decisions, anchors.n_experts());
    result.outputs = Matrix<Scalar>::Zero(token_reprs.rows(), token_reprs.cols());
    result.expert_outputs.resize(anchors.n_experts());
    for (int e = 0; e < anchors.n_experts(); ++e) {
        const auto& rows = result.dispatch.rows[e];
        if (rows.empty()) continue;
        result.expert_outputs[e] = experts.apply(e, gather_rows(token_reprs, rows));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const Scalar w = result.decisions[rows[i]].weights[result.dispatch.slots[e][i]];
            result.outputs.row(rows[i]) += w * result.expert_outputs[e].row(static_cast<Eigen::Index>(i));
        }
    }
    return result;
}

/// dL/d(pre-noise scores) of the mixture given dL/d(outputs). Dense T x N, zero off the selected slots.
template <RealScalar Scalar>
Matrix<Scalar> mixture_scores_backward(const std::vector<RoutingDecision<Scalar>>& decisions, const Dispatch& dispatch,
                                       const std::vector<Matrix<Scalar>>& expert_outputs, const Matrix<Scalar>& d_outputs,
                                       int n_experts) {
    std::vector<std::vector<Scalar>> d_weights(decisions.size());
    for (std::size_t t = 0; t < decisions.size(); ++t) d_weights[t].assign(decisions[t].indices.size(), Scalar(0));
    for (int e = 0; e < n_experts; ++e) {
        const auto& rows = dispatch.rows[e];
        for (std::size_t i = 0; i < rows.size(); ++i)
            d_weights[rows[i]][dispatch.slots[e][i]] =
                d_outputs.row(rows[i]).dot(expert_outputs[e].row(static_cast<Eigen::Index>(i)));
    }
    Matrix<Scalar> d_scores = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(decisions.size()), n_experts);
    for (std::size_t t = 0; t < decisions.size(); ++t) {
        const auto d_sel = topk_softmax_backward(decisions[t], d_weights[t]);
        for (std::size_t s = 0; s < d_sel.size(); ++s) d_scores(static_cast<Eigen::Index>(t), decisions[t].indices[s]) += d_sel[s];
    }
    return d_scores;
}

}  // namespace sra
