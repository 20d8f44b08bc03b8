#include "sra/model_config.hpp"

#include "sra/common.hpp"

namespace sra {

std::string to_string(Variant variant) {
    switch (variant) {
        case Variant::sra: return "sra";
        case Variant::standard_moe: return "standard_moe";
        case Variant::dense: return "dense";
    }
    return "unknown";
}

std::string to_string(AnchorInit init) {
    return init == AnchorInit::orthogonal ? "orthogonal" : "kaiming";
}

Variant parse_variant(const std::string& text) {
    if (text == "sra") return Variant::sra;
    if (text == "standard_moe") return Variant::standard_moe;
    if (text == "dense") return Variant::dense;
    throw std::invalid_argument("unknown variant '" + text + "' (expected sra|standard_moe|dense)");
}

AnchorInit parse_anchor_init(const std::string& text) {
    if (text == "orthogonal") return AnchorInit::orthogonal;
    if (text == "kaiming") return AnchorInit::kaiming;
    throw std::invalid_argument("unknown anchor_init '" + text + "' (expected orthogonal|kaiming)");
}

void ModelConfig::validate() const {
    require(dim >= 1, "dim must be positive");
    require(n_layers >= 1, "n_layers must be positive");
    require(n_heads >= 1 && dim % n_heads == 0, "n_heads must divide dim");
    require(head_dim() % 2 == 0, "head dimension must be even for rotary embeddings");
    require(d_ff >= 1, "d_ff must be positive");
    require(vocab_size >= 1, "vocab_size must be positive");
    require(max_seq_len >= 1, "max_seq_len must be positive");
    require(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
    if (is_moe()) {
        require(n_experts >= 2, "n_experts must be >= 2 for MoE variants");
        require(top_k >= 1 && top_k <= n_experts, "top_k must lie in [1, n_experts]");
    }
}

std::int64_t expert_parameter_count(const ModelConfig& c) {
    const std::int64_t d = c.dim, h = c.d_ff;
    return d * h + h + h * d + d;
}

ParameterCount count_parameters(const ModelConfig& c) {
    c.validate();
    const std::int64_t d = c.dim;
    const std::int64_t embedding = static_cast<std::int64_t>(c.vocab_size) * d;  // tied with the output projection
    const std::int64_t norm = 2 * d;
    const std::int64_t attention = 4 * d * d;

    ParameterCount count;
    count.total = embedding + norm;  // final norm
    count.active_per_token = count.total;
    for (int layer = 0; layer < c.n_layers; ++layer) {
        const std::int64_t shared = 2 * norm + attention;
        count.total += shared;
        count.active_per_token += shared;
        if (c.is_moe()) {
            const std::int64_t router = static_cast<std::int64_t>(c.n_experts) * d;  // anchors or gate, same size
            const std::int64_t expert = expert_parameter_count(c);
            count.total += router + c.n_experts * expert;
            count.active_per_token += router + c.top_k * expert;
        } else {
            const std::int64_t hidden = c.dense_hidden();
            const std::int64_t ffn = d * hidden + hidden + hidden * d + d;
            count.total += ffn;
            count.active_per_token += ffn;
        }
    }
    return count;
}

}  // namespace sra
