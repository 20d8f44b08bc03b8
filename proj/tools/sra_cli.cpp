// sra: tokenizer training, model training, evaluation, routing analysis and
// gradient checks from one executable.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include "sra/analysis.hpp"
#include "sra/config.hpp"
#include "sra/gradcheck.hpp"
#include "sra/records_io.hpp"
#include "sra/tokenizer.hpp"
#include "sra/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

std::string utc_now() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buffer[32];
    std::strftime(buffer, sizeof buffer, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    return buffer;
}

void write_json(const fs::path& path, const json& value) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << value.dump(2) << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

// ---------------------------------------------------------------------------

struct TokenizeArgs {
    std::string corpus, out;
    int vocab_size = 0;
    int min_pair_count = 2;
};

int run_tokenize(const TokenizeArgs& a) {
    const std::string text = sra::read_text_file(a.corpus);
    const auto tok = sra::train_bpe(text, a.vocab_size, a.min_pair_count);
    tok.save(a.out);
    const auto ids = tok.encode(text);
    write_json(fs::path(a.out) / "manifest.json", {{"corpus", fs::absolute(a.corpus).string()},
                                                    {"corpus_bytes", text.size()},
                                                    {"vocab_size_requested", a.vocab_size},
                                                    {"vocab_size", tok.size()},
                                                    {"alphabet_size", tok.alphabet_size()},
                                                    {"merges", tok.merges().size()},
                                                    {"min_pair_count", a.min_pair_count},
                                                    {"corpus_tokens", ids.size()},
                                                    {"created", utc_now()}});
    std::cout << "tokenizer: " << tok.size() << " tokens (" << tok.alphabet_size() << " bytes, " << tok.merges().size()
              << " merges); corpus encodes to " << ids.size() << " tokens\n"
              << "wrote " << (fs::path(a.out) / "vocab.txt").string() << " and merges.txt\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config, variant, out, resume;
    std::vector<std::string> overrides;
    bool quiet = false;
};

int run_train(const TrainArgs& a) {
    sra::RunConfig config = sra::load_run_config(a.config);
    if (!a.variant.empty()) config.model.variant = sra::parse_variant(a.variant);
    for (const auto& o : a.overrides) sra::apply_override(config, o);
    // Relative data paths are taken relative to the config file.
    const fs::path base = fs::absolute(a.config).parent_path();
    if (!config.data.corpus.empty() && fs::path(config.data.corpus).is_relative())
        config.data.corpus = fs::weakly_canonical(base / config.data.corpus).string();
    if (!config.data.tokenizer.empty() && fs::path(config.data.tokenizer).is_relative())
        config.data.tokenizer = fs::weakly_canonical(base / config.data.tokenizer).string();
    config.validate();
    if (config.data.corpus.empty()) throw std::invalid_argument("data.corpus is not set (use --override data.corpus=PATH)");

    const std::string hash = sra::config_hash(config);
    const fs::path out = a.out.empty() ? fs::path("runs") / (fs::path(a.config).stem().string() + "_" +
                                                             sra::to_string(config.model.variant) + "_" + hash.substr(0, 8))
                                       : fs::path(a.out);
    fs::create_directories(out);
    write_json(out / "config.json", sra::to_json(config));
    json manifest{{"config_file", fs::absolute(a.config).string()},
                  {"config_hash", hash},
                  {"out_dir", fs::absolute(out).string()},
                  {"seed", config.train.seed},
                  {"overrides", a.overrides},
                  {"resume_from", a.resume},
                  {"started", utc_now()}};
    write_json(out / "manifest.json", manifest);

    sra::TrainOptions options;
    options.out_dir = out;
    if (!a.resume.empty()) options.resume_from = a.resume;
    if (a.quiet) options.log = nullptr;
    const auto outcome = sra::train(config, options);

    manifest["finished"] = utc_now();
    manifest["steps"] = outcome.steps;
    manifest["final_checkpoint"] = outcome.final_checkpoint.string();
    write_json(out / "manifest.json", manifest);

    std::cout << "run directory: " << out.string() << "\n"
              << "steps: " << outcome.steps << "/" << outcome.total_steps << "\n"
              << "untrained val perplexity: " << outcome.initial_val_perplexity << "\n";
    for (std::size_t e = 0; e < outcome.epoch_val_perplexity.size(); ++e)
        std::cout << "epoch " << e + 1 << " val perplexity: " << outcome.epoch_val_perplexity[e] << "\n";
    for (std::size_t l = 0; l < outcome.anchor_stats.size(); ++l)
        std::cout << "layer " << l << " anchor cosine: " << outcome.anchor_stats[l].mean << " +/- "
                  << outcome.anchor_stats[l].std << "\n";
    std::cout << "final checkpoint: " << outcome.final_checkpoint.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint, split = "val", corpus, out;
};

int run_eval(const EvalArgs& a) {
    if (!fs::exists(fs::path(a.checkpoint) / "model.bin"))
        throw std::runtime_error("no checkpoint found at " + a.checkpoint);
    const auto result = sra::evaluate_checkpoint(a.checkpoint, a.split, a.corpus);
    const sra::Checkpoint meta = sra::load_checkpoint(a.checkpoint);
    const fs::path out = a.out.empty() ? fs::path(a.checkpoint) : fs::path(a.out);
    fs::create_directories(out);
    const fs::path records_path = out / ("records_" + a.split + ".jsonl");

    sra::RecordsFile file;
    file.header = {{"variant", sra::to_string(meta.config.model.variant)},
                   {"top_k", result.top_k},
                   {"tokens", result.tokens},
                   {"split", a.split},
                   {"checkpoint", fs::absolute(a.checkpoint).string()}};
    file.records = result.eval.records;
    sra::write_records(records_path, file);
    write_json(out / ("eval_" + a.split + ".json"), {{"checkpoint", fs::absolute(a.checkpoint).string()},
                                                     {"split", a.split},
                                                     {"perplexity", result.eval.perplexity},
                                                     {"mean_loss", result.eval.mean_loss},
                                                     {"tokens", result.tokens},
                                                     {"predicted", result.eval.predicted},
                                                     {"top_k", result.top_k},
                                                     {"records", fs::absolute(records_path).string()}});
    std::cout << a.split << " perplexity: " << result.eval.perplexity << " over " << result.eval.predicted
              << " predictions (" << result.tokens << " tokens, k=" << result.top_k << ")\n"
              << "records: " << records_path.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct AnalyzeArgs {
    std::string records, report, out, checkpoint;
    int layer = 0;
    int top_m = 10;
};

int run_analyze(const AnalyzeArgs& a) {
    const sra::RecordsFile file = sra::read_records(a.records);
    std::string checkpoint = a.checkpoint;
    if (checkpoint.empty()) checkpoint = file.header.value("checkpoint", "");
    fs::create_directories(a.out);

    if (a.report == "utilization") {
        if (file.records.layers.empty()) throw std::invalid_argument("records hold no routed layers (dense model?)");
        const auto stats = sra::utilization(file.records, file.records.n_experts);
        const std::string table = sra::format_utilization(stats);
        write_text(fs::path(a.out) / "utilization.txt", table);
        write_json(fs::path(a.out) / "utilization.json", sra::utilization_json(stats));
        std::cout << table;
    } else if (a.report == "specialization") {
        std::optional<sra::Tokenizer> tok;
        if (!checkpoint.empty() && fs::exists(fs::path(checkpoint) / "tokenizer"))
            tok = sra::Tokenizer::load(fs::path(checkpoint) / "tokenizer");
        const auto table = sra::specialization_table(file.records, a.layer, a.top_m, tok ? &*tok : nullptr);
        const std::string text = sra::format_specialization(table, a.layer);
        write_text(fs::path(a.out) / "specialization.txt", text);
        write_json(fs::path(a.out) / "specialization.json", sra::specialization_json(table, a.layer));
        std::cout << text;
    } else if (a.report == "dispersion") {
        if (checkpoint.empty()) throw std::invalid_argument("dispersion needs anchors: pass --checkpoint");
        const sra::Checkpoint ck = sra::load_checkpoint(checkpoint);
        if (ck.config.model.variant != sra::Variant::sra)
            throw std::invalid_argument("dispersion report needs an sra checkpoint");
        std::vector<sra::DispersionStats> per_layer;
        for (const auto& t : ck.params)
            if (t.name.ends_with(".anchors"))
                per_layer.push_back(sra::anchor_dispersion_stats(
                    Eigen::Map<const sra::Matrix<double>>(t.data.data(), t.rows, t.cols).eval()));
        const std::string text = sra::format_dispersion(per_layer);
        write_text(fs::path(a.out) / "dispersion.txt", text);
        write_json(fs::path(a.out) / "dispersion.json", sra::dispersion_json(per_layer));
        write_text(fs::path(a.out) / "dispersion_histogram.csv", sra::dispersion_histogram_csv(per_layer));
        std::cout << text;
    } else {
        throw std::invalid_argument("unknown report '" + a.report + "'");
    }
    return 0;
}

// ---------------------------------------------------------------------------

struct TraceArgs {
    std::string checkpoint, text, json_out;
    int layer = 0;
};

int run_trace(const TraceArgs& a) {
    const auto rows = sra::trace_checkpoint(a.checkpoint, a.text, a.layer);
    std::cout << sra::format_trace(rows, a.layer);
    if (!a.json_out.empty()) write_json(a.json_out, sra::trace_json(rows, a.layer));
    return 0;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
    std::string component, json_out;
    double tol = 1e-4;
    std::uint64_t seed = 0;
};

int run_gradcheck(const GradcheckArgs& a) {
    sra::GradCheckOptions options;
    options.seed = a.seed;
    const auto report = sra::grad_check(a.component, a.tol, options);
    std::cout << sra::format_report(report);
    if (!a.json_out.empty()) write_json(a.json_out, sra::report_json(report));
    return report.pass ? 0 : kRuntime;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Semantic Resonance Architecture toolkit: cosine-anchor mixture-of-experts language models"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Help for every subcommand");

    TokenizeArgs tokenize;
    auto* tok_cmd = app.add_subcommand("tokenize", "Train a byte-level BPE tokenizer");
    tok_cmd->add_option("--corpus", tokenize.corpus, "UTF-8 text file")->required()->check(CLI::ExistingFile);
    tok_cmd->add_option("--vocab-size", tokenize.vocab_size, "Vocabulary size including <unk>")->required();
    tok_cmd->add_option("--out", tokenize.out, "Output directory for vocab.txt, merges.txt, manifest.json")->required();
    tok_cmd->add_option("--min-pair-count", tokenize.min_pair_count, "Stop when the best pair occurs fewer times")
        ->capture_default_str();

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON config");
    train_cmd->add_option("--config", train.config, "JSON config with model/train/data sections")
        ->required()
        ->check(CLI::ExistingFile);
    train_cmd->add_option("--variant", train.variant, "Override model.variant")
        ->check(CLI::IsMember({"sra", "standard_moe", "dense"}));
    train_cmd->add_option("--override", train.overrides, "KEY=VALUE, repeatable (e.g. switch_epoch=1, beta=0)");
    train_cmd->add_option("--out", train.out, "Run directory (default runs/<config>_<variant>_<hash>)");
    train_cmd->add_option("--resume", train.resume, "Checkpoint directory to continue from");
    train_cmd->add_flag("--quiet", train.quiet, "No progress lines");

    EvalArgs eval;
    auto* eval_cmd = app.add_subcommand("eval", "Validation perplexity and routing records of a checkpoint");
    eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint directory")->required();
    eval_cmd->add_option("--split", eval.split, "val or train")->capture_default_str()->check(CLI::IsMember({"val", "train"}));
    eval_cmd->add_option("--corpus", eval.corpus, "Evaluate on this corpus instead of the training one");
    eval_cmd->add_option("--out", eval.out, "Output directory (default: the checkpoint directory)");

    AnalyzeArgs analyze;
    auto* analyze_cmd = app.add_subcommand("analyze", "Reports over a routing-records file");
    analyze_cmd->add_option("--records", analyze.records, "records_*.jsonl written by eval")
        ->required()
        ->check(CLI::ExistingFile);
    analyze_cmd->add_option("--report", analyze.report, "utilization | specialization | dispersion")
        ->required()
        ->check(CLI::IsMember({"utilization", "specialization", "dispersion"}));
    analyze_cmd->add_option("--out", analyze.out, "Output directory")->required();
    analyze_cmd->add_option("--checkpoint", analyze.checkpoint, "Checkpoint for token strings and anchors (default: from the records header)");
    analyze_cmd->add_option("--layer", analyze.layer, "Layer for the specialization table")->capture_default_str();
    analyze_cmd->add_option("--top-m", analyze.top_m, "Tokens listed per expert")->capture_default_str()->check(CLI::PositiveNumber);

    TraceArgs trace;
    auto* trace_cmd = app.add_subcommand("trace", "Per-token routing of a sentence");
    trace_cmd->add_option("--checkpoint", trace.checkpoint, "Checkpoint directory")->required();
    trace_cmd->add_option("--text", trace.text, "Text to route")->required();
    trace_cmd->add_option("--layer", trace.layer, "Layer index")->capture_default_str();
    trace_cmd->add_option("--json", trace.json_out, "Also write the trace as JSON here");

    GradcheckArgs grad;
    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of analytic gradients (float64)");
    grad_cmd->add_option("--component", grad.component, "resonance | balance_loss | dispersion_loss | z_loss | lm_loss | model | model_standard_moe | model_dense")
        ->required()
        ->check(CLI::IsMember(sra::grad_check_components()));
    grad_cmd->add_option("--tol", grad.tol, "Pass threshold on the max relative error")->capture_default_str()->check(CLI::PositiveNumber);
    grad_cmd->add_option("--seed", grad.seed, "Instance seed")->capture_default_str();
    grad_cmd->add_option("--json", grad.json_out, "Also write the report as JSON here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*tok_cmd) return run_tokenize(tokenize);
        if (*train_cmd) return run_train(train);
        if (*eval_cmd) return run_eval(eval);
        if (*analyze_cmd) return run_analyze(analyze);
        if (*trace_cmd) return run_trace(trace);
        if (*grad_cmd) return run_gradcheck(grad);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const sra::NonFiniteLoss& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return kUsage;
}
