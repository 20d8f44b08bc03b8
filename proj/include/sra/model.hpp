#pragma once

// Pre-LayerNorm decoder with tied embeddings. The feed-forward slot of each
// block is either a cosine-anchor MoE (sra), a learned-gate MoE
// (standard_moe) or a single wide FFN (dense).

#include "sra/common.hpp"
#include "sra/layers.hpp"
#include "sra/losses.hpp"
#include "sra/model_config.hpp"
#include "sra/router.hpp"

#include <optional>
#include <span>
#include <vector>

namespace sra {

enum class Mode { train, eval };

struct ForwardOptions {
    Mode mode = Mode::eval;
    int top_k = 0;  // 0 = config.top_k
    double noise_sigma = 0.0;  // only honored in train mode
};

template <RealScalar Scalar>
struct ForwardResult {
    Matrix<Scalar> logits;                 // (B*L) x V, row b*L + l
    RoutingRecord records;                 // empty layers for the dense variant
    std::vector<Matrix<Scalar>> all_scores;  // per MoE layer, (B*L) x N, pre-noise
};

/// Feed-forward slot of a block: router + expert bank, or one dense FFN.
template <RealScalar Scalar>
struct FeedForward {
    Variant variant = Variant::sra;
    AnchorSet<Scalar> anchors;      // sra
    Matrix<Scalar> anchors_grad;    // sra
    Param<Scalar> gate;             // standard_moe, D x N
    std::vector<ExpertFFN<Scalar>> experts;  // MoE: N experts; dense: one wide FFN

    struct Cache {
        Matrix<Scalar> input;
        Matrix<Scalar> scores;
        std::vector<RoutingDecision<Scalar>> decisions;
        Dispatch dispatch;
        std::vector<typename ExpertFFN<Scalar>::Cache> expert_caches;
        std::vector<Matrix<Scalar>> expert_outputs;
    };

    int n_experts() const { return static_cast<int>(experts.size()); }

    Matrix<Scalar> scores(const Matrix<Scalar>& x) const {
        if (variant == Variant::sra) return resonance_matrix(x, anchors);
        return x * gate.value;
    }

    Matrix<Scalar> forward(const Matrix<Scalar>& x, int k, double noise_sigma, Rng& rng, Cache& cache) const {
        cache.input = x;
        if (variant == Variant::dense) {
            cache.expert_caches.resize(1);
            return experts[0].forward(x, &cache.expert_caches[0]);
        }
        const int n = n_experts();
        cache.scores = scores(x);
        cache.decisions = route_tokens(cache.scores, k, noise_sigma, rng);
        cache.dispatch = group_by_expert(cache.decisions, n);
        cache.expert_caches.assign(n, {});
        cache.expert_outputs.assign(n, {});
        Matrix<Scalar> y = Matrix<Scalar>::Zero(x.rows(), x.cols());
        for (int e = 0; e < n; ++e) {
            const auto& rows = cache.dispatch.rows[e];
            if (rows.empty()) continue;
            cache.expert_outputs[e] = experts[e].forward(gather_rows(x, rows), &cache.expert_caches[e]);
            for (std::size_t i = 0; i < rows.size(); ++i) {
                const Scalar w = cache.decisions[rows[i]].weights[cache.dispatch.slots[e][i]];
                y.row(rows[i]) += w * cache.expert_outputs[e].row(static_cast<Eigen::Index>(i));
            }
        }
        return y;
    }

    /// `d_scores_aux` carries balance/z gradients w.r.t. the pre-noise scores (may be empty).
    Matrix<Scalar> backward(const Matrix<Scalar>& dy, const Matrix<Scalar>& d_scores_aux, Cache& cache) {
        if (variant == Variant::dense) return experts[0].backward(dy, cache.expert_caches[0]);
        const int n = n_experts();
        Matrix<Scalar> dx = Matrix<Scalar>::Zero(dy.rows(), dy.cols());
        for (int e = 0; e < n; ++e) {
            const auto& rows = cache.dispatch.rows[e];
            if (rows.empty()) continue;
            Matrix<Scalar> d_out(static_cast<Eigen::Index>(rows.size()), dy.cols());
            for (std::size_t i = 0; i < rows.size(); ++i) {
                const Scalar w = cache.decisions[rows[i]].weights[cache.dispatch.slots[e][i]];
                d_out.row(static_cast<Eigen::Index>(i)) = w * dy.row(rows[i]);
            }
            const Matrix<Scalar> d_rows = experts[e].backward(d_out, cache.expert_caches[e]);
            for (std::size_t i = 0; i < rows.size(); ++i) dx.row(rows[i]) += d_rows.row(static_cast<Eigen::Index>(i));
        }
        Matrix<Scalar> d_scores = mixture_scores_backward(cache.decisions, cache.dispatch, cache.expert_outputs, dy, n);
        if (d_scores_aux.size() > 0) d_scores += d_scores_aux;
        if (variant == Variant::sra) {
            cosine_matrix_backward(cache.input, anchors.anchors, anchors.eps, d_scores, &dx, &anchors_grad);
        } else {
            gate.grad.noalias() += cache.input.transpose() * d_scores;
            dx.noalias() += d_scores * gate.value.transpose();
        }
        return dx;
    }
};

template <RealScalar Scalar>
struct Block {
    LayerNorm<Scalar> ln1, ln2;
    Attention<Scalar> attn;
    FeedForward<Scalar> ffn;

    struct Cache {
        typename LayerNorm<Scalar>::Cache ln1, ln2;
        typename Attention<Scalar>::Cache attn;
        typename FeedForward<Scalar>::Cache ffn;
        Matrix<Scalar> attn_mask, ffn_mask;  // inverted-dropout multipliers, empty when inactive
    };
};

template <RealScalar Scalar>
class Model {
public:
    Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
        config_.validate();
        Rng rng(seed);
        const int d = config_.dim;
        embedding_.resize(config_.vocab_size, d);
        embedding_.fill_normal(rng, 0.02);
        blocks_.resize(config_.n_layers);
        for (auto& block : blocks_) {
            block.ln1.init(d);
            block.ln2.init(d);
            block.attn.init(d, config_.n_heads, config_.n_layers, rng);
            auto& ffn = block.ffn;
            ffn.variant = config_.variant;
            if (config_.variant == Variant::dense) {
                ffn.experts.resize(1);
                ffn.experts[0].init(d, config_.dense_hidden(), config_.n_layers, rng);
                continue;
            }
            if (config_.variant == Variant::sra) {
                const std::uint64_t anchor_seed = rng();
                ffn.anchors = config_.anchor_init == AnchorInit::orthogonal
                                  ? init_anchors_orthogonal<Scalar>(config_.n_experts, d, anchor_seed)
                                  : init_anchors_kaiming<Scalar>(config_.n_experts, d, anchor_seed);
                ffn.anchors_grad = Matrix<Scalar>::Zero(config_.n_experts, d);
            } else {
                ffn.gate.resize(d, config_.n_experts);
                ffn.gate.fill_normal(rng, 0.02);
            }
            ffn.experts.resize(config_.n_experts);
            for (auto& expert : ffn.experts) expert.init(d, config_.d_ff, config_.n_layers, rng);
        }
        final_ln_.init(d);
    }

    const ModelConfig& config() const { return config_; }
    std::vector<Block<Scalar>>& blocks() { return blocks_; }
    const std::vector<Block<Scalar>>& blocks() const { return blocks_; }

    // The embedding table doubles as the output projection.
    Param<Scalar>& embedding() { return embedding_; }
    const Param<Scalar>& embedding() const { return embedding_; }
    const Matrix<Scalar>& output_projection() const { return embedding_.value; }

    /// Anchors of every sra layer, in layer order (empty for other variants).
    std::vector<AnchorSet<Scalar>> anchor_sets() const {
        std::vector<AnchorSet<Scalar>> out;
        if (config_.variant != Variant::sra) return out;
        for (const auto& block : blocks_) out.push_back(block.ffn.anchors);
        return out;
    }

    /// Every trainable array, in a fixed order. Anchors, norms and biases are not decayed.
    std::vector<ParamRef<Scalar>> parameters() {
        std::vector<ParamRef<Scalar>> refs;
        auto add = [&](const std::string& name, Param<Scalar>& p, bool decay) {
            refs.push_back({name, &p.value, &p.grad, decay});
        };
        add("embedding", embedding_, true);
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            auto& block = blocks_[l];
            const std::string prefix = "blocks." + std::to_string(l);
            block.ln1.visit(prefix + ".ln1", add);
            block.attn.visit(prefix + ".attn", add);
            block.ln2.visit(prefix + ".ln2", add);
            auto& ffn = block.ffn;
            if (ffn.variant == Variant::sra)
                refs.push_back({prefix + ".anchors", &ffn.anchors.anchors, &ffn.anchors_grad, false});
            else if (ffn.variant == Variant::standard_moe)
                add(prefix + ".gate", ffn.gate, true);
            if (ffn.variant == Variant::dense) {
                ffn.experts[0].visit(prefix + ".ffn", add);
            } else {
                for (std::size_t e = 0; e < ffn.experts.size(); ++e)
                    ffn.experts[e].visit(prefix + ".experts." + std::to_string(e), add);
            }
        }
        final_ln_.visit("final_ln", add);
        return refs;
    }

    void zero_grad() {
        for (auto& p : parameters()) p.grad->setZero();
    }

    /// Counted from the allocated arrays; agrees with count_parameters(config).
    ParameterCount count_parameters() {
        ParameterCount count;
        for (auto& p : parameters()) count.total += p.value->size();
        count.active_per_token = count.total;
        if (config_.is_moe()) {
            const std::int64_t expert = blocks_.front().ffn.experts.front().parameter_count();
            count.active_per_token -= static_cast<std::int64_t>(config_.n_layers) * (config_.n_experts - config_.top_k) * expert;
        }
        return count;
    }

    ForwardResult<Scalar> forward(const IdMatrix& ids, const ForwardOptions& options, Rng& rng) const {
        std::vector<typename Block<Scalar>::Cache> caches;
        Matrix<Scalar> final_x;
        typename LayerNorm<Scalar>::Cache final_cache;
        return run(ids, options, rng, caches, final_x, final_cache);
    }

    /// Forward + losses + backward; gradients accumulate into every parameter's grad.
    /// Aux losses are averaged over MoE layers before weighting.
    LossBreakdown loss_and_grad(const IdMatrix& ids, const IdMatrix& targets, const ForwardOptions& options,
                                const LossWeights& weights, Rng& rng) {
        require(targets.rows() == ids.rows() && targets.cols() == ids.cols(), "targets must match inputs in shape");
        std::vector<typename Block<Scalar>::Cache> caches;
        Matrix<Scalar> final_x;
        typename LayerNorm<Scalar>::Cache final_cache;
        ForwardResult<Scalar> fwd = run(ids, options, rng, caches, final_x, final_cache);

        const std::span<const std::int32_t> target_span(targets.data(), static_cast<std::size_t>(targets.size()));
        Matrix<Scalar> d_logits = Matrix<Scalar>::Zero(fwd.logits.rows(), fwd.logits.cols());
        const double lm = lm_loss<Scalar>(fwd.logits, target_span, &d_logits);
        if (!std::isfinite(lm)) throw NonFiniteLoss("lm");

        const int n_layers = config_.n_layers;
        const auto per_layer = [&](double w) { return static_cast<Scalar>(w / n_layers); };
        double balance = 0, dispersion = 0, z = 0;
        std::vector<Matrix<Scalar>> d_scores(n_layers);
        if (config_.is_moe()) {
            for (int l = 0; l < n_layers; ++l) {
                const Matrix<Scalar>& s = fwd.all_scores[l];
                d_scores[l] = Matrix<Scalar>::Zero(s.rows(), s.cols());
                balance += balance_loss<Scalar>(s, weights.alpha > 0 ? &d_scores[l] : nullptr, per_layer(weights.alpha));
                z += z_loss<Scalar>(s, weights.gamma > 0 ? &d_scores[l] : nullptr, per_layer(weights.gamma));
                if (config_.variant == Variant::sra) {
                    auto& ffn = blocks_[l].ffn;
                    dispersion += dispersion_loss<Scalar>(ffn.anchors, weights.beta > 0 ? &ffn.anchors_grad : nullptr,
                                                          per_layer(weights.beta));
                }
            }
            balance /= n_layers;
            z /= n_layers;
            dispersion /= n_layers;
        }
        if (!std::isfinite(balance)) throw NonFiniteLoss("balance");
        if (!std::isfinite(dispersion)) throw NonFiniteLoss("dispersion");
        if (!std::isfinite(z)) throw NonFiniteLoss("z");

        backward(ids, d_logits, d_scores, caches, final_x, final_cache);
        return total_loss(lm, balance, dispersion, z, weights.alpha, weights.beta, weights.gamma);
    }

private:
    int active_k(const ForwardOptions& options) const { return options.top_k > 0 ? options.top_k : config_.top_k; }

    void check_ids(const IdMatrix& ids) const {
        require(ids.cols() <= config_.max_seq_len, "sequence length " + std::to_string(ids.cols()) +
                                                       " exceeds max_seq_len " + std::to_string(config_.max_seq_len));
        for (Eigen::Index i = 0; i < ids.size(); ++i)
            require(ids.data()[i] >= 0 && ids.data()[i] < config_.vocab_size,
                    "token id " + std::to_string(ids.data()[i]) + " out of range");
    }

    Matrix<Scalar> dropout_mask(Eigen::Index rows, Eigen::Index cols, Rng& rng) const {
        const double keep = 1.0 - config_.dropout;
        std::uniform_real_distribution<double> uniform(0.0, 1.0);
        Matrix<Scalar> mask(rows, cols);
        const Scalar kept = static_cast<Scalar>(1.0 / keep);
        for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = uniform(rng) < keep ? kept : Scalar(0);
        return mask;
    }

    ForwardResult<Scalar> run(const IdMatrix& ids, const ForwardOptions& options, Rng& rng,
                              std::vector<typename Block<Scalar>::Cache>& caches, Matrix<Scalar>& final_x,
                              typename LayerNorm<Scalar>::Cache& final_cache) const {
        check_ids(ids);
        const int batch = static_cast<int>(ids.rows());
        const int seq_len = static_cast<int>(ids.cols());
        const Eigen::Index tokens = ids.size();
        const bool training = options.mode == Mode::train;
        const bool use_dropout = training && config_.dropout > 0.0;
        const double sigma = training ? options.noise_sigma : 0.0;
        const int k = active_k(options);
        if (config_.is_moe()) require(k >= 1 && k <= config_.n_experts, "top_k outside [1, n_experts]");

        ForwardResult<Scalar> result;
        result.records.n_experts = config_.is_moe() ? config_.n_experts : 0;
        result.records.layers.resize(config_.is_moe() ? config_.n_layers : 0);

        Matrix<Scalar> x(tokens, config_.dim);
        for (Eigen::Index t = 0; t < tokens; ++t) x.row(t) = embedding_.value.row(ids.data()[t]);

        caches.assign(blocks_.size(), {});
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            const auto& block = blocks_[l];
            auto& cache = caches[l];
            Matrix<Scalar> attn = block.attn.forward(block.ln1.forward(x, &cache.ln1), batch, seq_len, &cache.attn);
            if (use_dropout) {
                cache.attn_mask = dropout_mask(attn.rows(), attn.cols(), rng);
                attn.array() *= cache.attn_mask.array();
            }
            Matrix<Scalar> h = x + attn;
            Matrix<Scalar> ff = block.ffn.forward(block.ln2.forward(h, &cache.ln2), k, sigma, rng, cache.ffn);
            if (use_dropout) {
                cache.ffn_mask = dropout_mask(ff.rows(), ff.cols(), rng);
                ff.array() *= cache.ffn_mask.array();
            }
            x = h + ff;
            if (config_.is_moe()) {
                result.all_scores.push_back(cache.ffn.scores);
                LayerRecord record = make_layer_record(cache.ffn.decisions);
                for (auto& entry : record.entries) entry.token_id = ids.data()[entry.position];
                result.records.layers[l] = std::move(record);
            }
        }
        final_x = final_ln_.forward(x, &final_cache);
        result.logits = final_x * embedding_.value.transpose();
        return result;
    }

    void backward(const IdMatrix& ids, const Matrix<Scalar>& d_logits, const std::vector<Matrix<Scalar>>& d_scores,
                  std::vector<typename Block<Scalar>::Cache>& caches, const Matrix<Scalar>& final_x,
                  const typename LayerNorm<Scalar>::Cache& final_cache) {
        embedding_.grad.noalias() += d_logits.transpose() * final_x;
        Matrix<Scalar> dx = final_ln_.backward(d_logits * embedding_.value, final_cache);
        for (std::size_t li = blocks_.size(); li-- > 0;) {
            auto& block = blocks_[li];
            auto& cache = caches[li];
            // x_out = h + drop(ffn(ln2(h))), h = x + drop(attn(ln1(x)))
            Matrix<Scalar> d_ff = dx;
            if (cache.ffn_mask.size() > 0) d_ff.array() *= cache.ffn_mask.array();
            const Matrix<Scalar> empty;
            const Matrix<Scalar>& aux = config_.is_moe() ? d_scores[li] : empty;
            Matrix<Scalar> dh = dx + block.ln2.backward(block.ffn.backward(d_ff, aux, cache.ffn), cache.ln2);
            Matrix<Scalar> d_attn = dh;
            if (cache.attn_mask.size() > 0) d_attn.array() *= cache.attn_mask.array();
            dx = dh + block.ln1.backward(block.attn.backward(d_attn, cache.attn), cache.ln1);
        }
        for (Eigen::Index t = 0; t < ids.size(); ++t) embedding_.grad.row(ids.data()[t]) += dx.row(t);
    }

    ModelConfig config_;
    Param<Scalar> embedding_;
    std::vector<Block<Scalar>> blocks_;
    LayerNorm<Scalar> final_ln_;
};

}  // namespace sra
