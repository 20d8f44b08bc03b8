#include "sra/records_io.hpp"

#include <fstream>
#include <stdexcept>

namespace sra {

using nlohmann::json;

namespace {
constexpr const char* kFormat = "sra-routing-records";
}

void write_records(const std::filesystem::path& path, const RecordsFile& file) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write records file: " + path.string());
    json header = file.header;
    header["format"] = kFormat;
    header["n_experts"] = file.records.n_experts;
    header["n_layers"] = file.records.layers.size();
    out << header.dump() << '\n';
    for (std::size_t l = 0; l < file.records.layers.size(); ++l)
        for (const auto& e : file.records.layers[l].entries)
            out << json{{"layer", l}, {"pos", e.position}, {"token", e.token_id}, {"experts", e.experts},
                        {"weights", e.weights}}
                       .dump()
                << '\n';
    if (!out) throw std::runtime_error("failed writing records file: " + path.string());
}

RecordsFile read_records(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open records file: " + path.string());
    RecordsFile file;
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("records file is empty: " + path.string());
    try {
        file.header = json::parse(line);
        if (file.header.value("format", "") != kFormat)
            throw std::runtime_error("not a routing-records file: " + path.string());
        file.records.n_experts = file.header.at("n_experts").get<int>();
        file.records.layers.resize(file.header.at("n_layers").get<std::size_t>());
        std::size_t line_no = 1;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            const json row = json::parse(line);
            const auto layer = row.at("layer").get<std::size_t>();
            if (layer >= file.records.layers.size())
                throw std::runtime_error("records line " + std::to_string(line_no) + " names layer " +
                                         std::to_string(layer) + " beyond n_layers");
            RoutingEntry entry;
            entry.position = row.at("pos").get<std::int64_t>();
            entry.token_id = row.at("token").get<std::int32_t>();
            entry.experts = row.at("experts").get<std::vector<int>>();
            entry.weights = row.at("weights").get<std::vector<double>>();
            file.records.layers[layer].entries.push_back(std::move(entry));
        }
    } catch (const json::exception& e) {
        throw std::runtime_error("malformed records file " + path.string() + ": " + e.what());
    }
    return file;
}

}  // namespace sra
