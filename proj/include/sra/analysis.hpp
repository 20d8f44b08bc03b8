#pragma once

// Diagnostics over routing records and anchors: utilization, specialization,
// per-token traces and anchor dispersion.

#include "sra/model.hpp"
#include "sra/routing_record.hpp"
#include "sra/tokenizer.hpp"

#include <json.hpp>

#include <array>
#include <string>
#include <vector>

namespace sra {

struct LayerUtilization {
    int layer = 0;
    std::vector<std::int64_t> counts;  // per expert, every routing slot counted
    std::int64_t tokens = 0;
    double cv = 0.0;  // population std / mean of counts
    int dead = 0;
    std::vector<int> dead_ids;
};

struct UtilizationStats {
    int n_experts = 0;
    std::vector<LayerUtilization> layers;
};

/// Throws std::invalid_argument naming the first empty layer.
UtilizationStats utilization(const RoutingRecord& records, int n_experts);

struct ExpertTokens {
    int expert = 0;
    std::vector<std::int32_t> token_ids;  // most frequent first, ties by id
    std::vector<std::int64_t> counts;
    std::vector<std::string> tokens;      // decoded, when a tokenizer is supplied
};

/// Per-expert top_m tokens of one layer, ranked by routed count.
std::vector<ExpertTokens> specialization_table(const RoutingRecord& records, int layer, int top_m,
                                               const Tokenizer* tokenizer = nullptr);

struct DispersionStats {
    double mean = 0.0;
    double std = 0.0;  // population
    std::int64_t pairs = 0;
    std::array<std::int64_t, 20> histogram{};  // buckets of width 0.1 over [-1, 1]
};

/// Statistics of the N(N-1)/2 unordered pairwise anchor cosines.
DispersionStats anchor_dispersion_stats(const Matrix<double>& anchors, double eps = kEps);

template <RealScalar Scalar>
DispersionStats anchor_dispersion_stats(const AnchorSet<Scalar>& set) {
    return anchor_dispersion_stats(set.anchors.template cast<double>(), set.eps);
}

struct TraceRow {
    std::int64_t position = 0;
    std::int32_t token_id = 0;
    std::string token;
    std::vector<int> experts;
    std::vector<double> weights;
};

/// Eval-mode routing of one token sequence at `layer`. Sequences longer than
/// max_seq_len are cut into consecutive windows.
template <RealScalar Scalar>
std::vector<TraceRow> routing_trace(const Model<Scalar>& model, std::span<const std::int32_t> ids, int layer, int top_k,
                                    const Tokenizer* tokenizer = nullptr) {
    const auto& config = model.config();
    require(config.is_moe(), "routing trace needs an MoE variant; the dense model has no router");
    require(layer >= 0 && layer < config.n_layers,
            "layer " + std::to_string(layer) + " outside [0, " + std::to_string(config.n_layers) + ")");
    std::vector<TraceRow> rows;
    Rng unused(0);
    for (std::size_t start = 0; start < ids.size(); start += config.max_seq_len) {
        const auto len = std::min<std::size_t>(config.max_seq_len, ids.size() - start);
        IdMatrix window(1, static_cast<Eigen::Index>(len));
        for (std::size_t t = 0; t < len; ++t) window(0, static_cast<Eigen::Index>(t)) = ids[start + t];
        const auto out = model.forward(window, {Mode::eval, top_k, 0.0}, unused);
        for (const auto& entry : out.records.layers[layer].entries) {
            TraceRow row{static_cast<std::int64_t>(start) + entry.position, entry.token_id, {}, entry.experts,
                         entry.weights};
            if (tokenizer != nullptr) row.token = tokenizer->token_text(entry.token_id);
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

// Reports: aligned text for people, JSON for tools, CSV for the histogram.
std::string format_utilization(const UtilizationStats& stats);
nlohmann::json utilization_json(const UtilizationStats& stats);
std::string format_specialization(const std::vector<ExpertTokens>& table, int layer);
nlohmann::json specialization_json(const std::vector<ExpertTokens>& table, int layer);
std::string format_dispersion(const std::vector<DispersionStats>& per_layer);
nlohmann::json dispersion_json(const std::vector<DispersionStats>& per_layer);
std::string dispersion_histogram_csv(const std::vector<DispersionStats>& per_layer);
std::string format_trace(const std::vector<TraceRow>& rows, int layer);
nlohmann::json trace_json(const std::vector<TraceRow>& rows, int layer);

/// Printable form of a token for tables: control bytes and spaces escaped.
std::string display_token(std::string_view token);

}  // namespace sra
