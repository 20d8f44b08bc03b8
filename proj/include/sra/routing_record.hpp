#pragma once

#include <cstdint>
#include <vector>

namespace sra {

/// One routed token: where it sat, what it was, and which experts took it.
struct RoutingEntry {
    std::int64_t position = 0;
    std::int32_t token_id = -1;
    std::vector<int> experts;
    std::vector<double> weights;
};

struct LayerRecord {
    std::vector<RoutingEntry> entries;
};

/// Token-to-expert assignment log for every MoE layer of a model.
struct RoutingRecord {
    int n_experts = 0;
    std::vector<LayerRecord> layers;

    bool empty() const {
        for (const auto& layer : layers)
            if (!layer.entries.empty()) return false;
        return true;
    }
};

}  // namespace sra
