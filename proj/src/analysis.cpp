#include "sra/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace sra {

using nlohmann::json;

namespace {

std::string fixed(double value, int digits) {
    char buffer[64];
    std::snprintf(buffer, sizeof buffer, "%.*f", digits, value);
    return buffer;
}

// Terminal columns of UTF-8 text, one per code point.
std::size_t display_width(const std::string& text) {
    return static_cast<std::size_t>(std::count_if(text.begin(), text.end(), [](char c) { return (c & 0xC0) != 0x80; }));
}

std::string pad(const std::string& text, std::size_t width) {
    const std::size_t w = display_width(text);
    return w >= width ? text : text + std::string(width - w, ' ');
}

// Renders rows of cells with every column padded to its widest cell.
std::string aligned(const std::vector<std::vector<std::string>>& rows, const std::vector<std::size_t>& rule_after = {}) {
    std::vector<std::size_t> width;
    for (const auto& row : rows)
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (width.size() <= c) width.push_back(0);
            width[c] = std::max(width[c], display_width(row[c]));
        }
    std::size_t total = 0;
    for (auto w : width) total += w + 2;
    std::ostringstream out;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::string line;
        for (std::size_t c = 0; c < rows[r].size(); ++c) line += pad(rows[r][c], width[c] + 2);
        while (!line.empty() && line.back() == ' ') line.pop_back();
        out << line << '\n';
        if (std::find(rule_after.begin(), rule_after.end(), r) != rule_after.end())
            out << std::string(total > 2 ? total - 2 : total, '-') << '\n';
    }
    return out.str();
}

}  // namespace

std::string display_token(std::string_view token) {
    std::string out;
    for (unsigned char c : token) {
        if (c == ' ') out += "␣";  // open box
        else if (c == '\n') out += "\\n";
        else if (c == '\t') out += "\\t";
        else if (c < 0x20 || c == 0x7f) {
            char buffer[8];
            std::snprintf(buffer, sizeof buffer, "\\x%02x", c);
            out += buffer;
        } else out.push_back(static_cast<char>(c));
    }
    return out;
}

UtilizationStats utilization(const RoutingRecord& records, int n_experts) {
    require(n_experts >= 1, "utilization: n_experts must be positive");
    UtilizationStats stats;
    stats.n_experts = n_experts;
    for (std::size_t l = 0; l < records.layers.size(); ++l) {
        const auto& entries = records.layers[l].entries;
        require(!entries.empty(), "utilization: layer " + std::to_string(l) + " has no routed tokens");
        LayerUtilization layer;
        layer.layer = static_cast<int>(l);
        layer.counts.assign(n_experts, 0);
        layer.tokens = static_cast<std::int64_t>(entries.size());
        for (const auto& entry : entries)
            for (int e : entry.experts) {
                require(e >= 0 && e < n_experts, "utilization: expert id " + std::to_string(e) + " out of range");
                ++layer.counts[e];
            }
        double sum = 0;
        for (auto c : layer.counts) sum += static_cast<double>(c);
        const double mean = sum / n_experts;
        double var = 0;
        for (auto c : layer.counts) var += (static_cast<double>(c) - mean) * (static_cast<double>(c) - mean);
        var /= n_experts;
        layer.cv = mean > 0 ? std::sqrt(var) / mean : 0.0;
        for (int e = 0; e < n_experts; ++e)
            if (layer.counts[e] == 0) layer.dead_ids.push_back(e);
        layer.dead = static_cast<int>(layer.dead_ids.size());
        stats.layers.push_back(std::move(layer));
    }
    return stats;
}

std::vector<ExpertTokens> specialization_table(const RoutingRecord& records, int layer, int top_m,
                                               const Tokenizer* tokenizer) {
    require(top_m >= 1, "specialization_table: top_m must be >= 1");
    require(layer >= 0 && layer < static_cast<int>(records.layers.size()),
            "specialization_table: layer " + std::to_string(layer) + " not present in the records");
    std::vector<std::map<std::int32_t, std::int64_t>> freq(records.n_experts);
    for (const auto& entry : records.layers[layer].entries)
        for (int e : entry.experts) {
            require(e >= 0 && e < records.n_experts, "specialization_table: expert id out of range");
            ++freq[e][entry.token_id];
        }
    std::vector<ExpertTokens> table;
    for (int e = 0; e < records.n_experts; ++e) {
        std::vector<std::pair<std::int32_t, std::int64_t>> ranked(freq[e].begin(), freq[e].end());
        std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
        if (static_cast<int>(ranked.size()) > top_m) ranked.resize(top_m);
        ExpertTokens row;
        row.expert = e;
        for (const auto& [id, count] : ranked) {
            row.token_ids.push_back(id);
            row.counts.push_back(count);
            if (tokenizer != nullptr) row.tokens.push_back(tokenizer->token_text(id));
        }
        table.push_back(std::move(row));
    }
    return table;
}

DispersionStats anchor_dispersion_stats(const Matrix<double>& anchors, double eps) {
    const auto n = anchors.rows();
    require(n >= 2, "anchor_dispersion_stats needs at least two anchors");
    const Eigen::VectorXd norms = anchors.rowwise().norm();
    DispersionStats stats;
    std::vector<double> values;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double c = anchors.row(i).dot(anchors.row(j)) / (norms(i) * norms(j) + eps);
            values.push_back(c);
            const int bucket = std::clamp(static_cast<int>(std::floor((c + 1.0) / 0.1)), 0, 19);
            ++stats.histogram[bucket];
        }
    stats.pairs = static_cast<std::int64_t>(values.size());
    for (double v : values) stats.mean += v;
    stats.mean /= static_cast<double>(values.size());
    for (double v : values) stats.std += (v - stats.mean) * (v - stats.mean);
    stats.std = std::sqrt(stats.std / static_cast<double>(values.size()));
    return stats;
}

std::string format_utilization(const UtilizationStats& stats) {
    std::vector<std::vector<std::string>> rows{{"Layer", "CV", "Dead", "Dead IDs", "Tokens"}};
    int total_dead = 0;
    for (const auto& layer : stats.layers) {
        std::string ids;
        for (int id : layer.dead_ids) ids += (ids.empty() ? "E" : ", E") + std::to_string(id);
        rows.push_back({std::to_string(layer.layer), fixed(layer.cv, 2), std::to_string(layer.dead),
                        ids.empty() ? "-" : ids, std::to_string(layer.tokens)});
        total_dead += layer.dead;
    }
    rows.push_back({"Total", "--", std::to_string(total_dead), "", ""});
    return aligned(rows, {0, rows.size() - 2});
}

json utilization_json(const UtilizationStats& stats) {
    json layers = json::array();
    int total_dead = 0;
    for (const auto& layer : stats.layers) {
        layers.push_back({{"layer", layer.layer},
                          {"counts", layer.counts},
                          {"tokens", layer.tokens},
                          {"cv", layer.cv},
                          {"dead", layer.dead},
                          {"dead_ids", layer.dead_ids}});
        total_dead += layer.dead;
    }
    return {{"report", "utilization"}, {"n_experts", stats.n_experts}, {"layers", layers}, {"total_dead", total_dead}};
}

std::string format_specialization(const std::vector<ExpertTokens>& table, int layer) {
    std::vector<std::vector<std::string>> rows{{"Expert", "Routed", "Top Tokens (layer " + std::to_string(layer) + ")"}};
    for (const auto& row : table) {
        std::int64_t routed = 0;
        std::string list;
        for (std::size_t i = 0; i < row.token_ids.size(); ++i) {
            routed += row.counts[i];
            const std::string text = row.tokens.empty() ? std::to_string(row.token_ids[i]) : display_token(row.tokens[i]);
            list += (i == 0 ? "" : ", ") + text;
        }
        rows.push_back({"E" + std::to_string(row.expert), std::to_string(routed), list.empty() ? "-" : list});
    }
    return aligned(rows, {0});
}

json specialization_json(const std::vector<ExpertTokens>& table, int layer) {
    json experts = json::array();
    for (const auto& row : table) {
        json entry{{"expert", row.expert}, {"token_ids", row.token_ids}, {"counts", row.counts}};
        if (!row.tokens.empty()) {
            json tokens = json::array();
            for (const auto& t : row.tokens) tokens.push_back(escape_token(t));
            entry["tokens"] = tokens;
        }
        experts.push_back(std::move(entry));
    }
    return {{"report", "specialization"}, {"layer", layer}, {"experts", experts}};
}

std::string format_dispersion(const std::vector<DispersionStats>& per_layer) {
    std::vector<std::vector<std::string>> rows{{"Layer", "Mean cosine", "Std", "Pairs"}};
    for (std::size_t l = 0; l < per_layer.size(); ++l)
        rows.push_back({std::to_string(l), fixed(per_layer[l].mean, 4), fixed(per_layer[l].std, 4),
                        std::to_string(per_layer[l].pairs)});
    return aligned(rows, {0});
}

json dispersion_json(const std::vector<DispersionStats>& per_layer) {
    json layers = json::array();
    for (std::size_t l = 0; l < per_layer.size(); ++l)
        layers.push_back({{"layer", l},
                          {"mean", per_layer[l].mean},
                          {"std", per_layer[l].std},
                          {"pairs", per_layer[l].pairs},
                          {"histogram", per_layer[l].histogram}});
    return {{"report", "dispersion"}, {"bucket_width", 0.1}, {"range", {-1.0, 1.0}}, {"layers", layers}};
}

std::string dispersion_histogram_csv(const std::vector<DispersionStats>& per_layer) {
    std::ostringstream out;
    out << "layer,bucket_low,bucket_high,count\n";
    for (std::size_t l = 0; l < per_layer.size(); ++l)
        for (int b = 0; b < 20; ++b)
            out << l << ',' << fixed(-1.0 + 0.1 * b, 1) << ',' << fixed(-1.0 + 0.1 * (b + 1), 1) << ','
                << per_layer[l].histogram[b] << '\n';
    return out.str();
}

std::string format_trace(const std::vector<TraceRow>& rows, int layer) {
    constexpr std::size_t kColumns = 12;
    std::size_t k = 0;
    for (const auto& row : rows) k = std::max(k, row.experts.size());
    std::ostringstream out;
    out << "Routing decisions (layer " << layer << ")\n";
    for (std::size_t start = 0; start < rows.size(); start += kColumns) {
        const std::size_t end = std::min(rows.size(), start + kColumns);
        std::vector<std::vector<std::string>> table{{"Token"}};
        for (std::size_t slot = 0; slot < k; ++slot) {
            table.push_back({"Expert " + std::to_string(slot + 1)});
            table.push_back({"(Weight)"});
        }
        for (std::size_t i = start; i < end; ++i) {
            const auto& row = rows[i];
            table[0].push_back(row.token.empty() ? std::to_string(row.token_id) : display_token(row.token));
            for (std::size_t slot = 0; slot < k; ++slot) {
                const bool has = slot < row.experts.size();
                table[1 + 2 * slot].push_back(has ? "E" + std::to_string(row.experts[slot]) : "-");
                table[2 + 2 * slot].push_back(has ? "(" + fixed(row.weights[slot], 3) + ")" : "");
            }
        }
        std::vector<std::size_t> rules{0};
        for (std::size_t slot = 1; slot < k; ++slot) rules.push_back(2 * slot);
        if (start > 0) out << '\n';
        out << aligned(table, rules);
    }
    return out.str();
}

json trace_json(const std::vector<TraceRow>& rows, int layer) {
    json tokens = json::array();
    for (const auto& row : rows)
        tokens.push_back({{"pos", row.position},
                          {"token_id", row.token_id},
                          {"token", escape_token(row.token)},
                          {"experts", row.experts},
                          {"weights", row.weights}});
    return {{"report", "trace"}, {"layer", layer}, {"tokens", tokens}};
}

}  // namespace sra
