#pragma once

// Language-modeling cross-entropy and the three routing regularizers.
// Each loss optionally accumulates `scale * dLoss/dInput` into a caller-owned
// gradient buffer so the model can fold coefficients in without temporaries.

#include "sra/common.hpp"
#include "sra/router.hpp"

#include <cmath>
#include <span>

namespace sra {

struct LossBreakdown {
    double lm = 0.0;
    double balance = 0.0;
    double dispersion = 0.0;
    double z = 0.0;
    double total = 0.0;
    double alpha = 0.0;
    double beta = 0.0;
    double gamma = 0.0;
};

struct LossWeights {
    double alpha = 0.4;  // balance
    double beta = 0.6;   // dispersion
    double gamma = 0.0;  // z-loss
};

namespace detail {

template <RealScalar Scalar>
Vector<Scalar> row_logsumexp(const Matrix<Scalar>& m) {
    const Vector<Scalar> row_max = m.rowwise().maxCoeff();
    Vector<Scalar> out(m.rows());
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        out(r) = row_max(r) + std::log((m.row(r).array() - row_max(r)).exp().sum());
    return out;
}

template <RealScalar Scalar>
Matrix<Scalar> row_softmax(const Matrix<Scalar>& m) {
    const Vector<Scalar> lse = row_logsumexp(m);
    return (m.colwise() - lse).array().exp().matrix();
}

}  // namespace detail

/// Mean next-token cross-entropy in nats.
template <RealScalar Scalar>
Scalar lm_loss(const Matrix<Scalar>& logits, std::span<const std::int32_t> targets, Matrix<Scalar>* d_logits = nullptr,
               Scalar scale = Scalar(1)) {
    require(static_cast<Eigen::Index>(targets.size()) == logits.rows(), "lm_loss: target count != logit rows");
    const Eigen::Index vocab = logits.cols();
    for (auto t : targets) require(t >= 0 && t < vocab, "lm_loss: target id " + std::to_string(t) + " out of range");
    if (logits.rows() == 0) return Scalar(0);

    const Vector<Scalar> lse = detail::row_logsumexp(logits);
    Scalar sum(0);
    for (Eigen::Index r = 0; r < logits.rows(); ++r) sum += lse(r) - logits(r, targets[r]);
    const Scalar n = static_cast<Scalar>(logits.rows());

    if (d_logits) {
        Matrix<Scalar> probs = (logits.colwise() - lse).array().exp().matrix();
        for (Eigen::Index r = 0; r < logits.rows(); ++r) probs(r, targets[r]) -= Scalar(1);
        *d_logits += (scale / n) * probs;
    }
    return sum / n;
}

/// N * Var(m) / (Mean(m)^2 + eps), population variance, for a given mean-probability vector.
template <RealScalar Scalar>
Scalar balance_loss_from_mean(const Vector<Scalar>& p_mean) {
    const Scalar n = static_cast<Scalar>(p_mean.size());
    const Scalar mean = p_mean.mean();
    const Scalar var = (p_mean.array() - mean).square().sum() / n;
    return n * var / (mean * mean + static_cast<Scalar>(kEps));
}

/// Squared-CV balance loss over the batch-mean of softmax(scores).
template <RealScalar Scalar>
Scalar balance_loss(const Matrix<Scalar>& all_scores, Matrix<Scalar>* d_scores = nullptr, Scalar scale = Scalar(1)) {
    require(all_scores.rows() >= 1, "balance_loss: need at least one token");
    const Scalar tokens = static_cast<Scalar>(all_scores.rows());
    const Scalar n = static_cast<Scalar>(all_scores.cols());
    const Matrix<Scalar> probs = detail::row_softmax(all_scores);
    const Vector<Scalar> p_mean = probs.colwise().mean().transpose();
    const Scalar mean = p_mean.mean();
    const Scalar denom = mean * mean + static_cast<Scalar>(kEps);
    const Vector<Scalar> centered = p_mean.array() - mean;
    const Scalar var = centered.squaredNorm() / n;
    const Scalar loss = n * var / denom;

    if (d_scores) {
        // d/dP_i = 2 (P_i - mean) / denom - 2 var mean / denom^2 (the mean is shared by all N entries).
        const Vector<Scalar> g_mean =
            (Scalar(2) / denom) * centered.array() - Scalar(2) * var * mean / (denom * denom);
        // Through softmax of each row, then the 1/T average.
        const RowVector<Scalar> g = g_mean.transpose();
        for (Eigen::Index t = 0; t < all_scores.rows(); ++t) {
            const auto p = probs.row(t);
            const Scalar inner = p.dot(g);
            d_scores->row(t) += (scale / tokens) * (p.array() * (g.array() - inner)).matrix();
        }
    }
    return loss;
}

/// Mean cosine over ordered anchor pairs i != j.
template <RealScalar Scalar>
Scalar dispersion_loss(const AnchorSet<Scalar>& anchors, Matrix<Scalar>* d_anchors = nullptr, Scalar scale = Scalar(1)) {
    const Eigen::Index n = anchors.anchors.rows();
    require(n >= 2, "dispersion_loss: need at least 2 anchors");
    const Matrix<Scalar> cos = cosine_matrix(anchors.anchors, anchors.anchors, anchors.eps);
    const Scalar pairs = static_cast<Scalar>(n * (n - 1));
    const Scalar loss = (cos.sum() - cos.trace()) / pairs;

    if (d_anchors) {
        Matrix<Scalar> g = Matrix<Scalar>::Constant(n, n, scale / pairs);
        g.diagonal().setZero();
        cosine_matrix_backward(anchors.anchors, anchors.anchors, anchors.eps, g, d_anchors, d_anchors);
    }
    return loss;
}

/// Mean over tokens of logsumexp(scores)^2.
template <RealScalar Scalar>
Scalar z_loss(const Matrix<Scalar>& all_scores, Matrix<Scalar>* d_scores = nullptr, Scalar scale = Scalar(1)) {
    require(all_scores.rows() >= 1, "z_loss: need at least one token");
    const Scalar tokens = static_cast<Scalar>(all_scores.rows());
    const Vector<Scalar> lse = detail::row_logsumexp(all_scores);
    if (d_scores) {
        const Matrix<Scalar> probs = (all_scores.colwise() - lse).array().exp().matrix();
        for (Eigen::Index t = 0; t < all_scores.rows(); ++t)
            d_scores->row(t) += (scale * Scalar(2) * lse(t) / tokens) * probs.row(t);
    }
    return lse.squaredNorm() / tokens;
}

inline LossBreakdown total_loss(double lm, double balance, double dispersion, double z, double alpha, double beta,
                                double gamma) {
    require(alpha >= 0 && beta >= 0 && gamma >= 0, "total_loss: coefficients must be nonnegative");
    LossBreakdown out;
    out.lm = lm;
    out.balance = balance;
    out.dispersion = dispersion;
    out.z = z;
    out.alpha = alpha;
    out.beta = beta;
    out.gamma = gamma;
    out.total = lm + alpha * balance + beta * dispersion + gamma * z;
    return out;
}

}  // namespace sra
