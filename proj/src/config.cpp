#include "sra/config.hpp"

#include "sra/common.hpp"

#include <cstdio>
#include <fstream>
#include <functional>

namespace sra {

using nlohmann::json;

void TrainConfig::validate() const {
    require(lr_peak > 0, "train.lr_peak must be positive");
    require(warmup_steps >= 1, "train.warmup_steps must be positive");
    require(total_steps >= 0, "train.total_steps must be >= 0");
    require(total_steps == 0 || warmup_steps <= total_steps, "train.warmup_steps must not exceed train.total_steps");
    require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "train.beta1/beta2 must lie in [0, 1)");
    require(weight_decay >= 0, "train.weight_decay must be >= 0");
    require(alpha >= 0 && beta >= 0 && gamma >= 0, "loss coefficients alpha, beta, gamma must be >= 0");
    require(epochs >= 1, "train.epochs must be positive");
    require(switch_epoch >= 1 && switch_epoch <= epochs + 1, "train.switch_epoch must lie in [1, epochs + 1]");
    require(top_k_only >= 0, "train.top_k_only must be >= 0");
    require(noise_sigma >= 0, "train.noise_sigma must be >= 0");
    require(grad_clip >= 0, "train.grad_clip must be >= 0");
    require(eval_interval >= 0, "train.eval_interval must be >= 0");
    require(max_steps >= 0, "train.max_steps must be >= 0");
    require(dtype == "float32" || dtype == "float64", "train.dtype must be float32 or float64");
}

void RunConfig::validate() const {
    model.validate();
    train.validate();
    require(data.batch_size >= 1, "data.batch_size must be positive");
    require(data.eval_batch_size >= 1, "data.eval_batch_size must be positive");
    require(data.seq_len >= 0 && seq_len() <= model.max_seq_len, "data.seq_len must not exceed model.max_seq_len");
    require(data.val_fraction > 0 && data.val_fraction < 1, "data.val_fraction must lie in (0, 1)");
    if (model.is_moe() && train.top_k_only > 0)
        require(train.top_k_only <= model.n_experts, "train.top_k_only must not exceed model.n_experts");
}

namespace {

struct Field {
    std::string key;
    std::function<json(const RunConfig&)> get;
    std::function<void(RunConfig&, const json&)> set;
};

template <typename Section, typename T>
Field field(std::string key, Section RunConfig::*section, T Section::*member) {
    auto get = [=](const RunConfig& c) { return json((c.*section).*member); };
    auto set = [=, name = key](RunConfig& c, const json& value) {
        try {
            if constexpr (std::is_integral_v<T>) {
                require(value.is_number_integer() || value.is_number_unsigned(), "");
            } else if constexpr (std::is_floating_point_v<T>) {
                require(value.is_number(), "");
            } else {
                require(value.is_string(), "");
            }
            (c.*section).*member = value.get<T>();
        } catch (const std::exception&) {
            throw std::invalid_argument("config key '" + name + "' has a value of the wrong type: " + value.dump());
        }
    };
    return {std::move(key), get, set};
}

template <typename E>
Field enum_field(std::string key, E ModelConfig::*member, std::string (*print)(E), E (*parse)(const std::string&)) {
    auto get = [=](const RunConfig& c) { return json(print(c.model.*member)); };
    auto set = [=, name = key](RunConfig& c, const json& value) {
        if (!value.is_string()) throw std::invalid_argument("config key '" + name + "' expects a string");
        c.model.*member = parse(value.get<std::string>());
    };
    return {std::move(key), get, set};
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = [] {
        using M = ModelConfig;
        using T = TrainConfig;
        using D = DataConfig;
        auto m = &RunConfig::model;
        auto t = &RunConfig::train;
        auto d = &RunConfig::data;
        return std::vector<Field>{
            field("model.dim", m, &M::dim),
            field("model.n_layers", m, &M::n_layers),
            field("model.n_heads", m, &M::n_heads),
            field("model.n_experts", m, &M::n_experts),
            field("model.top_k", m, &M::top_k),
            field("model.d_ff", m, &M::d_ff),
            field("model.vocab_size", m, &M::vocab_size),
            field("model.max_seq_len", m, &M::max_seq_len),
            field("model.dropout", m, &M::dropout),
            enum_field<Variant>("model.variant", &M::variant, &to_string, &parse_variant),
            enum_field<AnchorInit>("model.anchor_init", &M::anchor_init, &to_string, &parse_anchor_init),
            field("train.lr_peak", t, &T::lr_peak),
            field("train.warmup_steps", t, &T::warmup_steps),
            field("train.total_steps", t, &T::total_steps),
            field("train.beta1", t, &T::beta1),
            field("train.beta2", t, &T::beta2),
            field("train.weight_decay", t, &T::weight_decay),
            field("train.alpha", t, &T::alpha),
            field("train.beta", t, &T::beta),
            field("train.gamma", t, &T::gamma),
            field("train.switch_epoch", t, &T::switch_epoch),
            field("train.epochs", t, &T::epochs),
            field("train.top_k_only", t, &T::top_k_only),
            field("train.noise_sigma", t, &T::noise_sigma),
            field("train.seed", t, &T::seed),
            field("train.grad_clip", t, &T::grad_clip),
            field("train.eval_interval", t, &T::eval_interval),
            field("train.max_steps", t, &T::max_steps),
            field("train.dtype", t, &T::dtype),
            field("data.corpus", d, &D::corpus),
            field("data.tokenizer", d, &D::tokenizer),
            field("data.batch_size", d, &D::batch_size),
            field("data.seq_len", d, &D::seq_len),
            field("data.val_fraction", d, &D::val_fraction),
            field("data.eval_batch_size", d, &D::eval_batch_size),
        };
    }();
    return table;
}

const Field& find_field(std::string_view key) {
    const Field* match = nullptr;
    int matches = 0;
    for (const auto& f : fields()) {
        if (f.key == key) return f;
        const auto dot = f.key.find('.');
        if (std::string_view(f.key).substr(dot + 1) == key) {
            match = &f;
            ++matches;
        }
    }
    if (matches == 1) return *match;
    if (matches > 1) throw std::invalid_argument("config key '" + std::string(key) + "' is ambiguous; use the dotted form");
    throw std::invalid_argument("unknown config key '" + std::string(key) + "'");
}

}  // namespace

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& f : fields()) keys.push_back(f.key);
    return keys;
}

json to_json(const RunConfig& config) {
    json out = json::object();
    for (const auto& f : fields()) out[json::json_pointer("/" + f.key.substr(0, f.key.find('.')) + "/" +
                                                          f.key.substr(f.key.find('.') + 1))] = f.get(config);
    return out;
}

RunConfig run_config_from_json(const json& in) {
    require(in.is_object(), "config must be a JSON object");
    RunConfig config;
    for (const auto& [section, body] : in.items()) {
        if (section != "model" && section != "train" && section != "data")
            throw std::invalid_argument("unknown config section '" + section + "'");
        require(body.is_object(), "config section '" + section + "' must be an object");
        for (const auto& [key, value] : body.items()) find_field(section + "." + key).set(config, value);
    }
    return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path.string());
    json parsed;
    try {
        parsed = json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(parsed);
}

void apply_override(RunConfig& config, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0)
        throw std::invalid_argument("override '" + std::string(assignment) + "' must look like KEY=VALUE");
    const Field& f = find_field(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    f.set(config, value);
}

std::string config_hash(const RunConfig& config) {
    std::uint64_t hash = 14695981039346656037ull;
    for (unsigned char c : to_json(config).dump()) {
        hash ^= c;
        hash *= 1099511628211ull;
    }
    char buffer[17];
    std::snprintf(buffer, sizeof buffer, "%016llx", static_cast<unsigned long long>(hash));
    return buffer;
}

}  // namespace sra
