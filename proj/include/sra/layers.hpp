#pragma once

// Transformer building blocks with explicit forward caches and backward passes.

#include "sra/common.hpp"

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

namespace sra {

template <RealScalar Scalar>
struct Param {
    Matrix<Scalar> value;
    Matrix<Scalar> grad;

    void resize(Eigen::Index rows, Eigen::Index cols) {
        value = Matrix<Scalar>::Zero(rows, cols);
        grad = Matrix<Scalar>::Zero(rows, cols);
    }
    void fill_normal(Rng& rng, double stddev) {
        std::normal_distribution<double> normal(0.0, stddev);
        for (Eigen::Index i = 0; i < value.size(); ++i) value.data()[i] = static_cast<Scalar>(normal(rng));
    }
};

/// Non-owning handle used by the optimizer, checkpoints and gradient checks.
template <RealScalar Scalar>
struct ParamRef {
    std::string name;
    Matrix<Scalar>* value = nullptr;
    Matrix<Scalar>* grad = nullptr;
    bool decay = false;
};

// ---------------------------------------------------------------------------
// GELU (Gaussian CDF form)

template <RealScalar Scalar>
Scalar gelu(Scalar x) {
    return Scalar(0.5) * x * (Scalar(1) + std::erf(x / std::numbers::sqrt2_v<Scalar>));
}

template <RealScalar Scalar>
Scalar gelu_grad(Scalar x) {
    const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x / std::numbers::sqrt2_v<Scalar>));
    const Scalar pdf = std::exp(Scalar(-0.5) * x * x) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
    return cdf + x * pdf;
}

// ---------------------------------------------------------------------------
// Rotary position embedding

inline constexpr double kRopeBase = 10000.0;

/// Rotates consecutive pairs (2j, 2j+1) inside every head block of `x` by pos * base^(-2j/head_dim).
/// Row r of `x` sits at positions[r]. `inverse` applies the transpose rotation (used by backward).
template <RealScalar Scalar>
Matrix<Scalar> rope_apply(const Matrix<Scalar>& x, std::span<const int> positions, int head_dim, bool inverse = false) {
    require(head_dim > 0 && head_dim % 2 == 0, "rope_apply: head dimension must be even");
    require(x.cols() % head_dim == 0, "rope_apply: columns must be a multiple of the head dimension");
    require(static_cast<Eigen::Index>(positions.size()) == x.rows(), "rope_apply: one position per row required");
    Matrix<Scalar> out(x.rows(), x.cols());
    const int half = head_dim / 2;
    std::vector<double> cos_t(half), sin_t(half);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        for (int j = 0; j < half; ++j) {
            const double angle = positions[r] * std::pow(kRopeBase, -2.0 * j / head_dim);
            cos_t[j] = std::cos(angle);
            sin_t[j] = inverse ? -std::sin(angle) : std::sin(angle);
        }
        for (Eigen::Index base = 0; base < x.cols(); base += head_dim) {
            for (int j = 0; j < half; ++j) {
                const Scalar a = x(r, base + 2 * j), b = x(r, base + 2 * j + 1);
                const Scalar c = static_cast<Scalar>(cos_t[j]), s = static_cast<Scalar>(sin_t[j]);
                out(r, base + 2 * j) = a * c - b * s;
                out(r, base + 2 * j + 1) = a * s + b * c;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// LayerNorm

inline constexpr double kLayerNormEps = 1e-5;

template <RealScalar Scalar>
struct LayerNorm {
    Param<Scalar> gain;  // 1 x D
    Param<Scalar> bias;  // 1 x D

    struct Cache {
        Matrix<Scalar> xhat;
        Vector<Scalar> rstd;
    };

    void init(int dim) {
        gain.resize(1, dim);
        gain.value.setOnes();
        bias.resize(1, dim);
    }

    Matrix<Scalar> forward(const Matrix<Scalar>& x, Cache* cache) const {
        const Vector<Scalar> mean = x.rowwise().mean();
        Matrix<Scalar> centered = x.colwise() - mean;
        const Vector<Scalar> var = centered.rowwise().squaredNorm() / static_cast<Scalar>(x.cols());
        const Vector<Scalar> rstd = (var.array() + static_cast<Scalar>(kLayerNormEps)).rsqrt();
        Matrix<Scalar> xhat = centered.array().colwise() * rstd.array();
        Matrix<Scalar> y = xhat.array().rowwise() * gain.value.row(0).array();
        y.rowwise() += bias.value.row(0);
        if (cache) {
            cache->xhat = std::move(xhat);
            cache->rstd = rstd;
        }
        return y;
    }

    Matrix<Scalar> backward(const Matrix<Scalar>& dy, const Cache& cache) {
        gain.grad.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
        bias.grad.row(0) += dy.colwise().sum();
        const Matrix<Scalar> dxhat = dy.array().rowwise() * gain.value.row(0).array();
        const Scalar inv_d = Scalar(1) / static_cast<Scalar>(dy.cols());
        const Vector<Scalar> mean_dxhat = dxhat.rowwise().sum() * inv_d;
        const Vector<Scalar> mean_dxhat_xhat = (dxhat.array() * cache.xhat.array()).rowwise().sum().matrix() * inv_d;
        Matrix<Scalar> dx = dxhat.colwise() - mean_dxhat;
        dx -= (cache.xhat.array().colwise() * mean_dxhat_xhat.array()).matrix();
        return dx.array().colwise() * cache.rstd.array();
    }

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".gain", gain, false);
        fn(prefix + ".bias", bias, false);
    }
};

// ---------------------------------------------------------------------------
// Causal multi-head self-attention with rotary embeddings (no projection biases)

template <RealScalar Scalar>
struct Attention {
    Param<Scalar> wq, wk, wv, wo;  // D x D each, applied as x * W
    int n_heads = 1;

    struct Cache {
        Matrix<Scalar> x, q, k, v, concat;
        std::vector<Matrix<Scalar>> probs;  // one L x L matrix per (sequence, head)
        std::vector<int> positions;
        int batch = 0, seq_len = 0;
    };

    void init(int dim, int heads, int n_layers, Rng& rng) {
        n_heads = heads;
        for (auto* p : {&wq, &wk, &wv, &wo}) p->resize(dim, dim);
        wq.fill_normal(rng, 0.02);
        wk.fill_normal(rng, 0.02);
        wv.fill_normal(rng, 0.02);
        wo.fill_normal(rng, 0.02 / std::sqrt(2.0 * n_layers));
    }

    Matrix<Scalar> forward(const Matrix<Scalar>& x, int batch, int seq_len, Cache* cache) const {
        const int dim = static_cast<int>(x.cols());
        const int head_dim = dim / n_heads;
        std::vector<int> positions(static_cast<std::size_t>(batch) * seq_len);
        for (std::size_t t = 0; t < positions.size(); ++t) positions[t] = static_cast<int>(t % seq_len);

        Matrix<Scalar> q = rope_apply<Scalar>(x * wq.value, positions, head_dim);
        Matrix<Scalar> k = rope_apply<Scalar>(x * wk.value, positions, head_dim);
        Matrix<Scalar> v = x * wv.value;
        Matrix<Scalar> concat(x.rows(), dim);
        const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(head_dim));
        std::vector<Matrix<Scalar>> probs;
        if (cache) probs.reserve(static_cast<std::size_t>(batch) * n_heads);

        for (int b = 0; b < batch; ++b) {
            for (int h = 0; h < n_heads; ++h) {
                const auto qb = q.block(b * seq_len, h * head_dim, seq_len, head_dim);
                const auto kb = k.block(b * seq_len, h * head_dim, seq_len, head_dim);
                Matrix<Scalar> s = (qb * kb.transpose()) * scale;
                for (int i = 0; i < seq_len; ++i) {
                    const Scalar row_max = s.row(i).head(i + 1).maxCoeff();
                    Scalar total(0);
                    for (int j = 0; j <= i; ++j) total += s(i, j) = std::exp(s(i, j) - row_max);
                    s.row(i).head(i + 1) /= total;
                    s.row(i).tail(seq_len - i - 1).setZero();
                }
                concat.block(b * seq_len, h * head_dim, seq_len, head_dim).noalias() =
                    s * v.block(b * seq_len, h * head_dim, seq_len, head_dim);
                if (cache) probs.push_back(std::move(s));
            }
        }
        Matrix<Scalar> out = concat * wo.value;
        if (cache) {
            cache->x = x;
            cache->q = std::move(q);
            cache->k = std::move(k);
            cache->v = std::move(v);
            cache->concat = std::move(concat);
            cache->probs = std::move(probs);
            cache->positions = std::move(positions);
            cache->batch = batch;
            cache->seq_len = seq_len;
        }
        return out;
    }

    Matrix<Scalar> backward(const Matrix<Scalar>& d_out, const Cache& c) {
        const int dim = static_cast<int>(d_out.cols());
        const int head_dim = dim / n_heads;
        const int seq_len = c.seq_len;
        const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(head_dim));

        wo.grad.noalias() += c.concat.transpose() * d_out;
        const Matrix<Scalar> d_concat = d_out * wo.value.transpose();
        Matrix<Scalar> dq(d_out.rows(), dim), dk(d_out.rows(), dim), dv(d_out.rows(), dim);

        for (int b = 0; b < c.batch; ++b) {
            for (int h = 0; h < n_heads; ++h) {
                const Matrix<Scalar>& p = c.probs[static_cast<std::size_t>(b) * n_heads + h];
                const auto rows = Eigen::seqN(b * seq_len, seq_len);
                const auto cols = Eigen::seqN(h * head_dim, head_dim);
                const Matrix<Scalar> d_o = d_concat(rows, cols);
                const Matrix<Scalar> dp = d_o * c.v(rows, cols).transpose();
                dv(rows, cols).noalias() = p.transpose() * d_o;
                const Vector<Scalar> inner = (dp.array() * p.array()).rowwise().sum();
                const Matrix<Scalar> ds = (p.array() * (dp.colwise() - inner).array()).matrix() * scale;
                dq(rows, cols).noalias() = ds * c.k(rows, cols);
                dk(rows, cols).noalias() = ds.transpose() * c.q(rows, cols);
            }
        }
        dq = rope_apply<Scalar>(dq, c.positions, head_dim, true);
        dk = rope_apply<Scalar>(dk, c.positions, head_dim, true);
        wq.grad.noalias() += c.x.transpose() * dq;
        wk.grad.noalias() += c.x.transpose() * dk;
        wv.grad.noalias() += c.x.transpose() * dv;
        Matrix<Scalar> dx = dq * wq.value.transpose();
        dx.noalias() += dk * wk.value.transpose();
        dx.noalias() += dv * wv.value.transpose();
        return dx;
    }

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".wq", wq, true);
        fn(prefix + ".wk", wk, true);
        fn(prefix + ".wv", wv, true);
        fn(prefix + ".wo", wo, true);
    }
};

// ---------------------------------------------------------------------------
// Two-layer GELU feed-forward expert: w_out^T GELU(w_in^T h + b_in) + b_out

template <RealScalar Scalar>
struct ExpertFFN {
    Param<Scalar> w_in;   // D x D_ff
    Param<Scalar> b_in;   // 1 x D_ff
    Param<Scalar> w_out;  // D_ff x D
    Param<Scalar> b_out;  // 1 x D

    struct Cache {
        Matrix<Scalar> x, z, g;
    };

    void init(int dim, int hidden, int n_layers, Rng& rng) {
        w_in.resize(dim, hidden);
        b_in.resize(1, hidden);
        w_out.resize(hidden, dim);
        b_out.resize(1, dim);
        w_in.fill_normal(rng, 0.02);
        w_out.fill_normal(rng, 0.02 / std::sqrt(2.0 * n_layers));
    }

    int dim() const { return static_cast<int>(w_in.value.rows()); }
    std::int64_t parameter_count() const {
        return w_in.value.size() + b_in.value.size() + w_out.value.size() + b_out.value.size();
    }

    Matrix<Scalar> forward(const Matrix<Scalar>& x, Cache* cache) const {
        require(x.cols() == w_in.value.rows(), "expert_forward: input dimension mismatch");
        Matrix<Scalar> z = x * w_in.value;
        z.rowwise() += b_in.value.row(0);
        Matrix<Scalar> g = z.unaryExpr([](Scalar v) { return gelu(v); });
        Matrix<Scalar> out = g * w_out.value;
        out.rowwise() += b_out.value.row(0);
        if (cache) {
            cache->x = x;
            cache->z = std::move(z);
            cache->g = std::move(g);
        }
        return out;
    }

    Matrix<Scalar> backward(const Matrix<Scalar>& d_out, const Cache& c) {
        w_out.grad.noalias() += c.g.transpose() * d_out;
        b_out.grad.row(0) += d_out.colwise().sum();
        Matrix<Scalar> dz = d_out * w_out.value.transpose();
        dz.array() *= c.z.unaryExpr([](Scalar v) { return gelu_grad(v); }).array();
        w_in.grad.noalias() += c.x.transpose() * dz;
        b_in.grad.row(0) += dz.colwise().sum();
        return dz * w_in.value.transpose();
    }

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".w_in", w_in, true);
        fn(prefix + ".b_in", b_in, false);
        fn(prefix + ".w_out", w_out, true);
        fn(prefix + ".b_out", b_out, false);
    }
};

/// Single-token convenience wrapper.
template <RealScalar Scalar>
Vector<Scalar> expert_forward(const ExpertFFN<Scalar>& expert, const Vector<Scalar>& h) {
    require(h.size() == expert.dim(), "expert_forward: input dimension mismatch");
    const Matrix<Scalar> row = h.transpose();
    return expert.forward(row, nullptr).row(0).transpose();
}

}  // namespace sra
