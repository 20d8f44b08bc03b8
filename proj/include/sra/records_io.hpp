#pragma once

#include "sra/routing_record.hpp"

#include <json.hpp>

#include <filesystem>

namespace sra {

/// A routing-records file: one JSON header line, then one line per
/// (layer, token) with its experts and weights.
struct RecordsFile {
    nlohmann::json header;  // format, variant, n_experts, n_layers, top_k, tokens, ...
    RoutingRecord records;

    int top_k() const { return header.value("top_k", 0); }
};

void write_records(const std::filesystem::path& path, const RecordsFile& file);
RecordsFile read_records(const std::filesystem::path& path);

}  // namespace sra
