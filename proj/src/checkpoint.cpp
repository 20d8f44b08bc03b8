#include "sra/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace sra {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'S', 'R', 'A', 'C', 'K', 'P', 'T', '1'};

json tensor_table(const std::vector<Tensor>& tensors) {
    json table = json::array();
    for (const auto& t : tensors) table.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
    return table;
}

void write_tensors(std::ostream& out, const std::vector<Tensor>& tensors) {
    for (const auto& t : tensors)
        out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
}

std::vector<Tensor> read_tensors(std::istream& in, const json& table) {
    std::vector<Tensor> tensors;
    for (const auto& entry : table) {
        Tensor t{entry.at("name").get<std::string>(), entry.at("rows").get<Eigen::Index>(),
                 entry.at("cols").get<Eigen::Index>(), {}};
        if (t.rows < 0 || t.cols < 0) throw std::runtime_error("checkpoint tensor '" + t.name + "' has a negative shape");
        t.data.resize(static_cast<std::size_t>(t.rows * t.cols));
        in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        if (!in) throw std::runtime_error("checkpoint is truncated inside tensor '" + t.name + "'");
        tensors.push_back(std::move(t));
    }
    return tensors;
}

}  // namespace

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto& s = checkpoint.state;
    json header{{"config", to_json(checkpoint.config)},
                {"config_hash", config_hash(checkpoint.config)},
                {"state",
                 {{"step", s.step},
                  {"epoch", s.epoch},
                  {"batch_in_epoch", s.batch_in_epoch},
                  {"total_steps", s.total_steps},
                  {"rng", s.rng},
                  {"initial_val_perplexity", s.initial_val_perplexity},
                  {"epoch_val_perplexity", s.epoch_val_perplexity}}},
                {"params", tensor_table(checkpoint.params)},
                {"adam_m", tensor_table(checkpoint.adam_m)},
                {"adam_v", tensor_table(checkpoint.adam_v)}};
    const std::string text = header.dump();
    const std::uint64_t length = text.size();

    const auto tmp = dir / "model.bin.tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write checkpoint in " + dir.string());
        out.write(kMagic, sizeof kMagic);
        out.write(reinterpret_cast<const char*>(&length), sizeof length);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        write_tensors(out, checkpoint.params);
        write_tensors(out, checkpoint.adam_m);
        write_tensors(out, checkpoint.adam_v);
        if (!out) throw std::runtime_error("failed writing checkpoint in " + dir.string());
    }
    std::filesystem::rename(tmp, dir / "model.bin");
    checkpoint.tokenizer.save(dir / "tokenizer");

    std::ofstream manifest(dir / "manifest.json");
    manifest << json{{"config_hash", config_hash(checkpoint.config)},
                     {"step", s.step},
                     {"epoch", s.epoch},
                     {"batch_in_epoch", s.batch_in_epoch},
                     {"variant", to_string(checkpoint.config.model.variant)},
                     {"dtype", checkpoint.config.train.dtype}}
                    .dump(2)
             << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    const auto path = dir / "model.bin";
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("no checkpoint found at " + dir.string());
    char magic[sizeof kMagic];
    std::uint64_t length = 0;
    in.read(magic, sizeof magic);
    in.read(reinterpret_cast<char*>(&length), sizeof length);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw std::runtime_error(path.string() + " is not a checkpoint");
    if (length > (1u << 30)) throw std::runtime_error(path.string() + " has an implausible header length");
    std::string text(length, '\0');
    in.read(text.data(), static_cast<std::streamsize>(length));
    if (!in) throw std::runtime_error(path.string() + " is truncated");

    Checkpoint checkpoint;
    try {
        const json header = json::parse(text);
        checkpoint.config = run_config_from_json(header.at("config"));
        if (header.at("config_hash").get<std::string>() != config_hash(checkpoint.config))
            throw std::runtime_error("checkpoint config hash does not match its config");
        const json& s = header.at("state");
        auto& state = checkpoint.state;
        state.step = s.at("step").get<std::int64_t>();
        state.epoch = s.at("epoch").get<int>();
        state.batch_in_epoch = s.at("batch_in_epoch").get<int>();
        state.total_steps = s.at("total_steps").get<std::int64_t>();
        state.rng = s.at("rng").get<std::string>();
        state.initial_val_perplexity = s.at("initial_val_perplexity").get<double>();
        state.epoch_val_perplexity = s.at("epoch_val_perplexity").get<std::vector<double>>();
        checkpoint.params = read_tensors(in, header.at("params"));
        checkpoint.adam_m = read_tensors(in, header.at("adam_m"));
        checkpoint.adam_v = read_tensors(in, header.at("adam_v"));
    } catch (const json::exception& e) {
        throw std::runtime_error("malformed checkpoint header in " + path.string() + ": " + e.what());
    }
    checkpoint.tokenizer = Tokenizer::load(dir / "tokenizer");
    if (checkpoint.tokenizer.size() > checkpoint.config.model.vocab_size)
        throw std::runtime_error("checkpoint tokenizer has " + std::to_string(checkpoint.tokenizer.size()) +
                                 " tokens but the model vocabulary is " +
                                 std::to_string(checkpoint.config.model.vocab_size));
    return checkpoint;
}

}  // namespace sra
