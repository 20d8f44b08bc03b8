#pragma once

// Optimization loop: AdamW with warmup + cosine decay, the progressive Top-k
// schedule, periodic validation, checkpoints and JSON-lines metrics.

#include "sra/analysis.hpp"
#include "sra/batching.hpp"
#include "sra/checkpoint.hpp"
#include "sra/config.hpp"
#include "sra/model.hpp"
#include "sra/tokenizer.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <optional>
#include <sstream>

namespace sra {

/// Linear warmup to lr_peak, then cosine decay to zero at total_steps.
inline double lr_at(std::int64_t step, const TrainConfig& cfg) {
    require(cfg.total_steps > 0, "lr_at: total_steps must be resolved");
    require(step >= 0 && step <= cfg.total_steps, "lr_at: step outside [0, total_steps]");
    if (step < cfg.warmup_steps) return cfg.lr_peak * static_cast<double>(step) / cfg.warmup_steps;
    if (cfg.total_steps == cfg.warmup_steps) return cfg.lr_peak;
    const double progress = static_cast<double>(step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps);
    return cfg.lr_peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Top-1 before switch_epoch, Top-2 from it on. Epochs count from 1.
inline int progressive_k(int epoch, const TrainConfig& cfg) {
    require(epoch >= 1, "progressive_k: epochs count from 1");
    return epoch < cfg.switch_epoch ? 1 : 2;
}

/// progressive_k unless top_k_only pins k.
inline int scheduled_k(int epoch, const TrainConfig& cfg) {
    return cfg.top_k_only > 0 ? cfg.top_k_only : progressive_k(epoch, cfg);
}

inline int resolved_eval_interval(int steps_per_epoch, const TrainConfig& cfg) {
    return cfg.eval_interval > 0 ? cfg.eval_interval : std::max(100, steps_per_epoch / 4);
}

/// Batch order of one epoch: a fixed function of (seed, epoch), so a resumed
/// run replays the same order.
inline std::uint64_t epoch_shuffle_seed(std::uint64_t seed, int epoch) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(epoch);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

struct MetricsRow {
    std::int64_t step = 0;
    int epoch = 0;
    int k_active = 0;  // 0 for the dense variant
    double lm_loss = 0, balance = 0, dispersion = 0, z = 0, total = 0;
    double learning_rate = 0;
    std::optional<double> val_perplexity;

    bool operator==(const MetricsRow&) const = default;
};

inline nlohmann::json to_json(const MetricsRow& row) {
    nlohmann::json j{{"step", row.step},       {"epoch", row.epoch},           {"k_active", row.k_active},
                     {"lm_loss", row.lm_loss}, {"balance", row.balance},       {"dispersion", row.dispersion},
                     {"z", row.z},             {"total", row.total},           {"learning_rate", row.learning_rate}};
    if (row.val_perplexity) j["val_perplexity"] = *row.val_perplexity;
    return j;
}

inline MetricsRow metrics_row_from_json(const nlohmann::json& j) {
    MetricsRow row;
    row.step = j.at("step").get<std::int64_t>();
    row.epoch = j.at("epoch").get<int>();
    row.k_active = j.at("k_active").get<int>();
    row.lm_loss = j.at("lm_loss").get<double>();
    row.balance = j.at("balance").get<double>();
    row.dispersion = j.at("dispersion").get<double>();
    row.z = j.at("z").get<double>();
    row.total = j.at("total").get<double>();
    row.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("val_perplexity")) row.val_perplexity = j.at("val_perplexity").get<double>();
    return row;
}

inline std::vector<MetricsRow> read_metrics(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open metrics file: " + path.string());
    std::vector<MetricsRow> rows;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) rows.push_back(metrics_row_from_json(nlohmann::json::parse(line)));
    return rows;
}

/// AdamW with decoupled weight decay: theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta),
/// the decay term applied only to parameters marked for decay.
template <RealScalar Scalar>
class AdamW {
public:
    AdamW(std::vector<ParamRef<Scalar>> params, double beta1, double beta2, double weight_decay, double eps = 1e-8)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {
        for (const auto& p : params_) {
            m_.push_back(Matrix<Scalar>::Zero(p.value->rows(), p.value->cols()));
            v_.push_back(Matrix<Scalar>::Zero(p.value->rows(), p.value->cols()));
        }
    }

    void step(double lr) {
        ++t_;
        const Scalar b1 = static_cast<Scalar>(beta1_), b2 = static_cast<Scalar>(beta2_);
        const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(beta1_, static_cast<double>(t_)));
        const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(beta2_, static_cast<double>(t_)));
        const Scalar rate = static_cast<Scalar>(lr), eps = static_cast<Scalar>(eps_);
        const Scalar decay = static_cast<Scalar>(lr * weight_decay_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            auto g = p.grad->array();
            m_[i].array() = b1 * m_[i].array() + (Scalar(1) - b1) * g;
            v_[i].array() = b2 * v_[i].array() + (Scalar(1) - b2) * g.square();
            auto update = (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
            if (p.decay && weight_decay_ > 0)
                p.value->array() -= rate * update + decay * p.value->array();
            else
                p.value->array() -= rate * update;
        }
    }

    std::int64_t steps() const { return t_; }
    void set_steps(std::int64_t t) { t_ = t; }
    const std::vector<ParamRef<Scalar>>& params() const { return params_; }
    std::vector<Matrix<Scalar>>& first_moments() { return m_; }
    std::vector<Matrix<Scalar>>& second_moments() { return v_; }

private:
    std::vector<ParamRef<Scalar>> params_;
    std::vector<Matrix<Scalar>> m_, v_;
    double beta1_, beta2_, weight_decay_, eps_;
    std::int64_t t_ = 0;
};

/// Scales every gradient so the global L2 norm is at most max_norm; returns the norm before clipping.
template <RealScalar Scalar>
double clip_grad_norm(const std::vector<ParamRef<Scalar>>& params, double max_norm) {
    double sq = 0;
    for (const auto& p : params) sq += p.grad->template cast<double>().squaredNorm();
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const Scalar scale = static_cast<Scalar>(max_norm / (norm + 1e-6));
        for (const auto& p : params) *p.grad *= scale;
    }
    return norm;
}

struct EvalResult {
    double perplexity = 0;
    double mean_loss = 0;
    std::int64_t predicted = 0;  // positions with a next token
    RoutingRecord records;       // positions are offsets into the evaluated stream
};

/// Eval-mode pass over consecutive windows of at most seq_len tokens covering
/// the whole stream. Every token is routed; every token but the last is predicted.
template <RealScalar Scalar>
EvalResult evaluate(const Model<Scalar>& model, std::span<const std::int32_t> ids, int seq_len, int batch_rows, int top_k) {
    require(ids.size() >= 2, "evaluate: need at least two tokens");
    require(seq_len >= 1 && batch_rows >= 1, "evaluate: seq_len and batch_rows must be positive");
    const auto& config = model.config();
    const std::size_t n = ids.size();
    EvalResult result;
    result.records.n_experts = config.is_moe() ? config.n_experts : 0;
    result.records.layers.resize(config.is_moe() ? config.n_layers : 0);
    double total = 0;
    Rng unused(0);

    auto run = [&](std::size_t first, int rows, int len) {
        IdMatrix window(rows, len);
        for (int r = 0; r < rows; ++r)
            for (int t = 0; t < len; ++t) window(r, t) = ids[first + static_cast<std::size_t>(r) * len + t];
        const auto out = model.forward(window, {Mode::eval, top_k, 0.0}, unused);
        const Vector<Scalar> lse = detail::row_logsumexp(out.logits);
        for (Eigen::Index row = 0; row < out.logits.rows(); ++row) {
            const std::size_t pos = first + static_cast<std::size_t>(row);
            if (pos + 1 >= n) continue;
            total += static_cast<double>(lse(row)) - static_cast<double>(out.logits(row, ids[pos + 1]));
            ++result.predicted;
        }
        for (std::size_t l = 0; l < out.records.layers.size(); ++l)
            for (auto entry : out.records.layers[l].entries) {
                entry.position += static_cast<std::int64_t>(first);
                result.records.layers[l].entries.push_back(std::move(entry));
            }
    };

    const std::size_t full = n / seq_len;
    for (std::size_t w = 0; w < full; w += batch_rows) {
        const int rows = static_cast<int>(std::min<std::size_t>(batch_rows, full - w));
        run(w * seq_len, rows, seq_len);
    }
    if (n % seq_len != 0) run(full * seq_len, 1, static_cast<int>(n % seq_len));

    result.mean_loss = total / static_cast<double>(result.predicted);
    result.perplexity = std::exp(result.mean_loss);
    return result;
}

struct PreparedData {
    Tokenizer tokenizer;
    std::vector<std::int32_t> train;
    std::vector<std::int32_t> val;
};

/// Reads the corpus, trains (or reuses) the tokenizer and splits off validation.
PreparedData prepare_data(const RunConfig& config, const Tokenizer* tokenizer = nullptr);

struct TrainOptions {
    std::filesystem::path out_dir;
    std::optional<std::filesystem::path> resume_from;
    std::ostream* log = &std::cerr;  // progress lines; nullptr silences
    int log_every = 50;
};

struct TrainOutcome {
    std::filesystem::path final_checkpoint;
    std::filesystem::path metrics_path;
    std::int64_t steps = 0;
    std::int64_t total_steps = 0;
    int steps_per_epoch = 0;
    bool finished = false;  // reached the end of the schedule (not stopped by max_steps)
    double initial_val_perplexity = 0;
    std::vector<double> epoch_val_perplexity;
    std::vector<DispersionStats> anchor_stats;  // per sra layer at the end
    double seconds = 0;
};

/// Runs (or resumes) training; see TrainOptions. Writes metrics.jsonl,
/// checkpoints/epoch_<e>/ (and step_<s>/ when stopped early) and summary.json
/// under out_dir.
TrainOutcome train(const RunConfig& config, const TrainOptions& options);

/// The k a checkpoint was last trained with, used when evaluating it.
int checkpoint_top_k(const Checkpoint& checkpoint);

template <RealScalar Scalar>
Model<Scalar> model_from_checkpoint(const Checkpoint& checkpoint) {
    Model<Scalar> model(checkpoint.config.model, checkpoint.config.train.seed);
    auto refs = model.parameters();
    std::vector<Matrix<Scalar>*> targets;
    for (auto& r : refs) targets.push_back(r.value);
    import_tensors(checkpoint.params, refs, targets);
    return model;
}

struct CheckpointEval {
    EvalResult eval;
    int top_k = 0;
    std::int64_t tokens = 0;  // tokens in the evaluated split
};

/// Evaluates a checkpoint on the "val" or "train" split of its corpus
/// (or of `corpus` when given).
CheckpointEval evaluate_checkpoint(const std::filesystem::path& dir, const std::string& split,
                                   const std::string& corpus = "");

/// Per-token routing of `text` at `layer` through a checkpoint.
std::vector<TraceRow> trace_checkpoint(const std::filesystem::path& dir, const std::string& text, int layer);

namespace detail {

template <RealScalar Scalar>
class TrainLoop {
public:
    TrainLoop(const RunConfig& config, const TrainOptions& options) : config_(config), options_(options) {}

    TrainOutcome run() {
        const auto started = std::chrono::steady_clock::now();
        config_.validate();
        std::optional<Checkpoint> resume;
        if (options_.resume_from) {
            resume = load_checkpoint(*options_.resume_from);
            RunConfig a = resume->config, b = config_;
            a.train.max_steps = b.train.max_steps = 0;
            if (!(a == b))
                throw std::invalid_argument("resume config differs from the checkpoint's (hash " + config_hash(a) +
                                            " vs " + config_hash(b) + ")");
        }
        data_ = prepare_data(config_, resume ? &resume->tokenizer : nullptr);
        require(data_.tokenizer.size() <= config_.model.vocab_size,
                "tokenizer has " + std::to_string(data_.tokenizer.size()) + " tokens, more than model.vocab_size");
        const int batch = config_.data.batch_size, len = config_.seq_len();
        require(data_.train.size() >= static_cast<std::size_t>(batch) * (len + 1),
                "corpus too small: " + std::to_string(data_.train.size()) + " training tokens cannot fill one " +
                    std::to_string(batch) + "x" + std::to_string(len + 1) + " batch");
        require(data_.val.size() >= 2, "validation split is too small");

        const int steps_per_epoch = BatchStream(data_.train, batch, len).size();
        TrainConfig schedule = config_.train;
        if (schedule.total_steps == 0) schedule.total_steps = static_cast<std::int64_t>(steps_per_epoch) * schedule.epochs;
        require(schedule.warmup_steps <= schedule.total_steps,
                "warmup_steps " + std::to_string(schedule.warmup_steps) + " exceeds total_steps " +
                    std::to_string(schedule.total_steps));
        const int eval_every = resolved_eval_interval(steps_per_epoch, schedule);

        Model<Scalar> model(config_.model, config_.train.seed);
        auto params = model.parameters();
        AdamW<Scalar> adam(params, schedule.beta1, schedule.beta2, schedule.weight_decay);
        Rng rng(config_.train.seed ^ 0xA5A5A5A5A5A5A5A5ull);
        TrainingState state;
        state.total_steps = schedule.total_steps;

        std::filesystem::create_directories(options_.out_dir);
        TrainOutcome outcome;
        outcome.metrics_path = options_.out_dir / "metrics.jsonl";
        outcome.steps_per_epoch = steps_per_epoch;
        outcome.total_steps = schedule.total_steps;

        if (resume) {
            std::vector<Matrix<Scalar>*> values, ms, vs;
            for (std::size_t i = 0; i < params.size(); ++i) {
                values.push_back(params[i].value);
                ms.push_back(&adam.first_moments()[i]);
                vs.push_back(&adam.second_moments()[i]);
            }
            import_tensors(resume->params, params, values);
            import_tensors(resume->adam_m, params, ms);
            import_tensors(resume->adam_v, params, vs);
            state = resume->state;
            require(state.total_steps == schedule.total_steps, "checkpoint schedule length differs from the config's");
            adam.set_steps(state.step);
            std::istringstream(state.rng) >> rng;
        } else {
            std::ofstream(outcome.metrics_path, std::ios::trunc);
            state.initial_val_perplexity = validate(model, scheduled_k(1, schedule)).perplexity;
            log("untrained validation perplexity " + std::to_string(state.initial_val_perplexity));
        }
        std::ofstream metrics(outcome.metrics_path, std::ios::app);

        const LossWeights weights{schedule.alpha, schedule.beta, schedule.gamma};
        const std::int64_t stop_at = schedule.max_steps > 0 ? schedule.max_steps : schedule.total_steps;
        std::filesystem::path last_checkpoint = resume ? *options_.resume_from : std::filesystem::path{};

        while (state.epoch <= schedule.epochs && state.step < stop_at) {
            const int epoch = state.epoch;
            const int k = scheduled_k(epoch, schedule);
            BatchStream stream(data_.train, batch, len, epoch_shuffle_seed(schedule.seed, epoch));
            stream.seek(state.batch_in_epoch);
            while (stream.has_next() && state.step < stop_at) {
                const BatchPlan plan = stream.next();
                model.zero_grad();
                LossBreakdown loss;
                try {
                    loss = model.loss_and_grad(plan.inputs, plan.targets, {Mode::train, k, schedule.noise_sigma},
                                               weights, rng);
                } catch (const NonFiniteLoss& e) {
                    log("aborting at step " + std::to_string(state.step + 1) + ": " + e.what());
                    throw;
                }
                clip_grad_norm(params, schedule.grad_clip);
                ++state.step;
                const double lr = lr_at(std::min<std::int64_t>(state.step, schedule.total_steps), schedule);
                adam.step(lr);
                state.batch_in_epoch = stream.position();

                MetricsRow row{state.step, epoch, config_.model.is_moe() ? k : 0, loss.lm, loss.balance,
                               loss.dispersion, loss.z, loss.total, lr, std::nullopt};
                const bool epoch_end = !stream.has_next();
                if (epoch_end || state.step % eval_every == 0) row.val_perplexity = validate(model, k).perplexity;
                metrics << to_json(row).dump() << '\n';
                metrics.flush();
                if (options_.log_every > 0 && (state.step % options_.log_every == 0 || epoch_end))
                    log_row(row, steps_per_epoch);

                if (epoch_end) {
                    state.epoch_val_perplexity.push_back(*row.val_perplexity);
                    state.epoch = epoch + 1;
                    state.batch_in_epoch = 0;
                    last_checkpoint = options_.out_dir / "checkpoints" / ("epoch_" + std::to_string(epoch));
                    save(model, adam, rng, state, last_checkpoint);
                }
            }
        }
        outcome.finished = state.epoch > schedule.epochs || state.step >= schedule.total_steps;
        if (!outcome.finished && state.batch_in_epoch > 0) {
            last_checkpoint = options_.out_dir / "checkpoints" / ("step_" + std::to_string(state.step));
            save(model, adam, rng, state, last_checkpoint);
        }

        outcome.final_checkpoint = last_checkpoint;
        outcome.steps = state.step;
        outcome.initial_val_perplexity = state.initial_val_perplexity;
        outcome.epoch_val_perplexity = state.epoch_val_perplexity;
        for (const auto& set : model.anchor_sets()) outcome.anchor_stats.push_back(anchor_dispersion_stats(set));
        outcome.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        write_summary(outcome);
        return outcome;
    }

private:
    EvalResult validate(const Model<Scalar>& model, int k) const {
        return evaluate(model, data_.val, config_.seq_len(), config_.data.eval_batch_size, k);
    }

    void save(Model<Scalar>& model, AdamW<Scalar>& adam, const Rng& rng, TrainingState state,
              const std::filesystem::path& dir) const {
        std::ostringstream engine;
        engine << rng;
        state.rng = engine.str();
        Checkpoint checkpoint;
        checkpoint.config = config_;
        checkpoint.state = std::move(state);
        checkpoint.params = export_tensors(model.parameters());
        checkpoint.adam_m = export_tensors(adam.params(), adam.first_moments());
        checkpoint.adam_v = export_tensors(adam.params(), adam.second_moments());
        checkpoint.tokenizer = data_.tokenizer;
        save_checkpoint(checkpoint, dir);
    }

    void write_summary(const TrainOutcome& outcome) const {
        nlohmann::json anchors = nlohmann::json::array();
        for (const auto& s : outcome.anchor_stats) anchors.push_back({{"mean", s.mean}, {"std", s.std}});
        nlohmann::json summary{{"config_hash", config_hash(config_)},
                               {"steps", outcome.steps},
                               {"total_steps", outcome.total_steps},
                               {"steps_per_epoch", outcome.steps_per_epoch},
                               {"finished", outcome.finished},
                               {"initial_val_perplexity", outcome.initial_val_perplexity},
                               {"epoch_val_perplexity", outcome.epoch_val_perplexity},
                               {"anchor_cosine", anchors},
                               {"final_checkpoint", outcome.final_checkpoint.string()},
                               {"seconds", outcome.seconds}};
        std::ofstream(options_.out_dir / "summary.json") << summary.dump(2) << '\n';
    }

    void log(const std::string& message) const {
        if (options_.log != nullptr) *options_.log << message << std::endl;
    }

    void log_row(const MetricsRow& row, int steps_per_epoch) const {
        std::ostringstream line;
        line.precision(4);
        line << "step " << row.step << " epoch " << row.epoch << " (" << steps_per_epoch << "/epoch) k=" << row.k_active
             << " lm " << row.lm_loss << " total " << row.total << " lr " << row.learning_rate;
        if (row.val_perplexity) line << " val_ppl " << *row.val_perplexity;
        log(line.str());
    }

    RunConfig config_;
    TrainOptions options_;
    PreparedData data_;
};

}  // namespace detail

}  // namespace sra
