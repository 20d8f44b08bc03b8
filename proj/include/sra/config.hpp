#pragma once

#include "sra/model_config.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace sra {

struct TrainConfig {
    double lr_peak = 3e-4;
    int warmup_steps = 4000;
    int total_steps = 0;  // 0 = epochs * steps per epoch
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.1;
    double alpha = 0.4;
    double beta = 0.6;
    double gamma = 0.0;
    int switch_epoch = 6;
    int epochs = 10;
    int top_k_only = 0;  // nonzero pins k for every epoch
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;
    double grad_clip = 1.0;  // 0 disables clipping
    int eval_interval = 0;   // 0 = max(100, steps_per_epoch / 4)
    int max_steps = 0;       // stop after this many steps, 0 = run to the end
    std::string dtype = "float32";

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

struct DataConfig {
    std::string corpus;
    std::string tokenizer;  // existing tokenizer directory; empty = train one on the corpus
    int batch_size = 16;
    int seq_len = 0;  // 0 = model.max_seq_len
    double val_fraction = 0.05;
    int eval_batch_size = 16;

    bool operator==(const DataConfig&) const = default;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;

    int seq_len() const { return data.seq_len > 0 ? data.seq_len : model.max_seq_len; }
    void validate() const;
    bool operator==(const RunConfig&) const = default;
};

/// Nested {"model": {...}, "train": {...}, "data": {...}} form.
nlohmann::json to_json(const RunConfig& config);
/// Missing keys keep their defaults; unknown keys throw std::invalid_argument.
RunConfig run_config_from_json(const nlohmann::json& json);
RunConfig load_run_config(const std::filesystem::path& path);

/// Every settable dotted key, e.g. "model.dim", "train.switch_epoch".
std::vector<std::string> config_keys();

/// Applies "KEY=VALUE". KEY is dotted or a bare name that is unique across
/// sections (switch_epoch, beta, top_k_only, ...). VALUE is parsed as JSON,
/// falling back to a plain string.
void apply_override(RunConfig& config, std::string_view assignment);

/// FNV-1a over the canonical JSON form, as 16 hex digits.
std::string config_hash(const RunConfig& config);

}  // namespace sra
