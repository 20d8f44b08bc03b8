#pragma once

#include <cstdint>
#include <string>

namespace sra {

enum class Variant { sra, standard_moe, dense };
enum class AnchorInit { orthogonal, kaiming };

std::string to_string(Variant variant);
std::string to_string(AnchorInit init);
Variant parse_variant(const std::string& text);
AnchorInit parse_anchor_init(const std::string& text);

struct ModelConfig {
    int dim = 64;
    int n_layers = 2;
    int n_heads = 4;
    int n_experts = 8;
    int top_k = 2;
    int d_ff = 128;
    int vocab_size = 2000;
    int max_seq_len = 64;
    double dropout = 0.1;
    Variant variant = Variant::sra;
    AnchorInit anchor_init = AnchorInit::orthogonal;

    bool is_moe() const { return variant != Variant::dense; }
    int head_dim() const { return dim / n_heads; }
    /// Hidden width of the dense FFN: twice the expert width so Top-2 MoE and dense match in active size.
    int dense_hidden() const { return 2 * d_ff; }

    /// Throws std::invalid_argument describing the first violated constraint.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

struct ParameterCount {
    std::int64_t total = 0;
    std::int64_t active_per_token = 0;
};

std::int64_t expert_parameter_count(const ModelConfig& config);

/// Closed-form count for a config; no weights are allocated.
ParameterCount count_parameters(const ModelConfig& config);

}  // namespace sra
