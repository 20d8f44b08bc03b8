// Acceptance suite: one PASS/FAIL line per criterion, on stdout and in
// acceptance_report.txt. Exit status is the number of failed criteria.

#include "sra/analysis.hpp"
#include "sra/gradcheck.hpp"
#include "sra/losses.hpp"
#include "sra/records_io.hpp"
#include "sra/router.hpp"
#include "sra/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>

using namespace sra;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail += (detail.empty() ? "" : "; ") + std::string("violated: ") + what;
        }
    }
    void note(const std::string& text) { detail += (detail.empty() ? "" : "; ") + text; }
};

std::string num(double v, int digits = 4) {
    std::ostringstream out;
    out.precision(digits);
    out << v;
    return out.str();
}

int failures = 0;
std::ofstream report_file("acceptance_report.txt");

void emit(const std::string& line) {
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    report_file << line << '\n' << std::flush;
}

void criterion(int id, const std::string& name, const std::function<Verdict()>& body) {
    Verdict v;
    const auto start = std::chrono::steady_clock::now();
    try {
        v = body();
    } catch (const std::exception& e) {
        v.pass = false;
        v.detail = std::string("exception: ") + e.what();
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += !v.pass;
    char head[160];
    std::snprintf(head, sizeof head, "%s  %2d. %s [%.1fs]: ", v.pass ? "PASS" : "FAIL", id, name.c_str(), seconds);
    emit(head + v.detail);
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

double median3(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

// ---------------------------------------------------------------------------
// Toy runs shared by criteria 5 to 10.

const fs::path work = fs::temp_directory_path() / "sra_acceptance";

RunConfig toy_config() {
    RunConfig c = load_run_config(fs::path(SRA_CONFIG_DIR) / "toy_sra.json");
    c.data.corpus = (fs::path(SRA_DATA_DIR) / "moby_dick.txt").string();
    c.data.tokenizer = (work / "tokenizer").string();
    return c;
}

void prepare_tokenizer() {
    fs::remove_all(work);
    fs::create_directories(work);
    RunConfig c = load_run_config(fs::path(SRA_CONFIG_DIR) / "toy_sra.json");
    train_bpe(read_text_file(fs::path(SRA_DATA_DIR) / "moby_dick.txt"), c.model.vocab_size).save(work / "tokenizer");
}

struct ToyRun {
    TrainOutcome outcome;
    std::vector<MetricsRow> rows;
    int dead = 0;  // dead experts on the validation split, summed over layers
    double cv = 0;  // utilization CV, averaged over layers
    double anchor_mean = 0;
};

std::map<std::string, ToyRun> runs;

const ToyRun& toy_run(const std::string& name, const std::function<void(RunConfig&)>& edit) {
    if (auto it = runs.find(name); it != runs.end()) return it->second;
    RunConfig c = toy_config();
    edit(c);
    std::fprintf(stderr, "training %s ...\n", name.c_str());
    ToyRun run;
    run.outcome = train(c, {work / name, std::nullopt, nullptr, 0});
    run.rows = read_metrics(run.outcome.metrics_path);
    const auto eval = evaluate_checkpoint(run.outcome.final_checkpoint, "val");
    const auto stats = utilization(eval.eval.records, c.model.n_experts);
    for (const auto& layer : stats.layers) {
        run.dead += layer.dead;
        run.cv += layer.cv / static_cast<double>(stats.layers.size());
    }
    for (const auto& s : run.outcome.anchor_stats) run.anchor_mean += s.mean / run.outcome.anchor_stats.size();
    std::fprintf(stderr, "  %s: %.1fs, val ppl %.2f, dead %d\n", name.c_str(), run.outcome.seconds,
                 run.outcome.epoch_val_perplexity.empty() ? 0.0 : run.outcome.epoch_val_perplexity.back(), run.dead);
    return runs[name] = std::move(run);
}

const ToyRun& progressive(std::uint64_t seed) {
    return toy_run("progressive_seed" + std::to_string(seed), [seed](RunConfig& c) { c.train.seed = seed; });
}

const ToyRun& top2_from_start(std::uint64_t seed) {
    return toy_run("top2_seed" + std::to_string(seed), [seed](RunConfig& c) {
        c.train.seed = seed;
        c.train.switch_epoch = 1;
    });
}

// ---------------------------------------------------------------------------

Verdict parameter_counts() {
    Verdict v;
    const ModelConfig full = load_run_config(fs::path(SRA_CONFIG_DIR) / "full_sra.json").model;
    const double total_ref = 558.5e6, active_ref = 29.0e6;
    for (Variant variant : {Variant::sra, Variant::standard_moe, Variant::dense}) {
        ModelConfig c = full;
        c.variant = variant;
        const auto count = count_parameters(c);
        const double expect_total = variant == Variant::dense ? active_ref : total_ref;
        const double e_total = std::abs(count.total - expect_total) / expect_total;
        const double e_active = std::abs(count.active_per_token - active_ref) / active_ref;
        v.note(to_string(variant) + " total " + num(count.total / 1e6, 6) + "M active " +
               num(count.active_per_token / 1e6, 5) + "M");
        v.require(e_total < 0.02, to_string(variant) + " total within 2%");
        v.require(e_active < 0.02, to_string(variant) + " active within 2%");
    }
    return v;
}

Verdict gradient_suite() {
    Verdict v;
    double worst_unit = 0, worst_model = 0;
    std::int64_t skipped = 0;
    for (auto [tokens, experts, dim, seed] : {std::tuple{4, 4, 8, 1ull}, {8, 8, 16, 2ull}, {5, 3, 4, 3ull}}) {
        GradCheckOptions o{tokens, experts, dim, seed};
        for (const char* unit : {"resonance", "balance_loss", "dispersion_loss", "z_loss", "lm_loss"}) {
            const auto r = grad_check(unit, 1e-4, o);
            worst_unit = std::max(worst_unit, r.max_rel_error);
            v.require(r.pass, std::string(unit) + " < 1e-4 at T=" + std::to_string(tokens) + " N=" + std::to_string(experts));
        }
        for (const char* model : {"model", "model_standard_moe", "model_dense"}) {
            const auto r = grad_check(model, 1e-3, o);
            worst_model = std::max(worst_model, r.max_rel_error);
            skipped += r.skipped;
            v.require(r.pass, std::string(model) + " < 1e-3");
        }
    }
    v.note("max rel err: losses/resonance " + num(worst_unit, 3) + " (tol 1e-4), models " + num(worst_model, 3) +
           " (tol 1e-3), " + std::to_string(skipped) + " model entries skipped at top-k kinks");
    return v;
}

Verdict loss_identities() {
    Verdict v;
    const double ortho = dispersion_loss(init_anchors_orthogonal<double>(8, 16, 4));
    AnchorSet<double> same;
    same.anchors = Matrix<double>(5, 6);
    same.anchors.rowwise() = Eigen::RowVectorXd::LinSpaced(6, -1.0, 2.0);
    const double identical = dispersion_loss(same);
    const double uniform = balance_loss<double>(Matrix<double>::Constant(6, 4, 0.3));
    Matrix<double> skew(1, 2);
    skew << std::log(0.8), std::log(0.2);
    const double engineered = balance_loss<double>(skew);
    const double from_mean = balance_loss_from_mean<double>(Vector<double>{{0.8, 0.2}});
    const double z = z_loss<double>(Matrix<double>::Zero(1, 4));
    const double ln4sq = std::log(4.0) * std::log(4.0);
    v.note("dispersion(orthogonal) " + num(ortho, 3) + ", dispersion(identical) " + num(identical, 10) +
           ", balance(uniform) " + num(uniform, 3) + ", balance([0.8,0.2]) " + num(engineered, 10) + ", z " +
           num(z, 10) + " vs (ln 4)^2 " + num(ln4sq, 10));
    v.require(std::abs(ortho) <= 1e-6, "dispersion = 0 on orthogonal anchors");
    v.require(std::abs(identical - 1.0) <= 1e-6, "dispersion = 1 on identical anchors");
    v.require(std::abs(uniform) <= 1e-6, "balance = 0 on uniform routing");
    v.require(std::abs(engineered - 0.72) <= 1e-6 && std::abs(from_mean - 0.72) <= 1e-6, "balance = 0.72");
    v.require(std::abs(z - ln4sq) <= 1e-6, "z = (ln 4)^2");
    return v;
}

Verdict routing_oracles() {
    Verdict v;
    Rng rng(2024);
    std::uniform_int_distribution<int> pick_n(1, 32);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<int> grid(0, 3);
    int ties = 0, mismatched = 0, bad_simplex = 0;
    double worst_weight = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = pick_n(rng);
        std::uniform_int_distribution<int> pick_k(1, n);
        const int k = pick_k(rng);
        Vector<double> s(n);
        const bool coarse = trial % 2 == 0;  // few distinct values: ties everywhere
        for (int i = 0; i < n; ++i) s(i) = coarse ? 0.25 * grid(rng) : normal(rng);

        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return s(a) > s(b); });
        order.resize(k);
        for (int j = 1; j < k; ++j) ties += s(order[j]) == s(order[j - 1]);
        long double z = 0;
        for (int i : order) z += std::exp(static_cast<long double>(s(i)));

        Rng unused(0);
        const auto d = select_topk(s, k, 0.0, unused);
        if (d.indices != order) ++mismatched;
        double sum = 0;
        bool ok = d.weights.size() == static_cast<std::size_t>(k);
        for (int j = 0; ok && j < k; ++j) {
            ok = d.weights[j] >= 0 && d.weights[j] <= 1;
            sum += d.weights[j];
            const double expected = static_cast<double>(std::exp(static_cast<long double>(s(order[j]))) / z);
            worst_weight = std::max(worst_weight, std::abs(d.weights[j] - expected));
        }
        if (!ok || std::abs(sum - 1.0) > 1e-12) ++bad_simplex;
    }
    v.note("1000 vectors, " + std::to_string(ties) + " tied selections, index mismatches " + std::to_string(mismatched) +
           ", simplex violations " + std::to_string(bad_simplex) + ", max weight error " + num(worst_weight, 3));
    v.require(mismatched == 0, "indices equal the sort oracle");
    v.require(bad_simplex == 0, "weights on the simplex");
    v.require(worst_weight <= 1e-12, "weights equal the softmax oracle");
    v.require(ties > 0, "tie cases exercised");
    return v;
}

Verdict progressive_schedule() {
    Verdict v;
    const ToyRun& run = progressive(0);
    const int sw = toy_config().train.switch_epoch;
    int before = 0, after = 0, wrong = 0;
    std::int64_t switch_step = -1;
    for (const auto& row : run.rows) {
        const int expected = row.epoch < sw ? 1 : 2;
        wrong += row.k_active != expected;
        (row.epoch < sw ? before : after) += 1;
        if (switch_step < 0 && row.epoch >= sw) switch_step = row.step;
    }
    int finite = 0;
    for (const auto& row : run.rows)
        if (switch_step >= 0 && row.step >= switch_step && row.step < switch_step + 50)
            finite += std::isfinite(row.lm_loss) && std::isfinite(row.balance) && std::isfinite(row.dispersion) &&
                      std::isfinite(row.z) && std::isfinite(row.total);
    v.note(std::to_string(before) + " rows at k=1 before epoch " + std::to_string(sw) + ", " + std::to_string(after) +
           " at k=2; " + std::to_string(finite) + "/50 finite steps after the switch at step " +
           std::to_string(switch_step));
    v.require(wrong == 0, "k_active follows the schedule");
    v.require(before > 0 && after > 0, "both phases present");
    v.require(finite == 50, "50 finite steps after the switch");
    return v;
}

Verdict toy_smoke() {
    Verdict v;
    const auto chars = fs::file_size(fs::path(SRA_DATA_DIR) / "moby_dick.txt");
    const ToyRun& run = progressive(0);
    const auto& o = run.outcome;
    std::string epochs;
    for (double p : o.epoch_val_perplexity) epochs += " " + num(p, 5);
    v.note("corpus " + std::to_string(chars) + " bytes, untrained ppl " + num(o.initial_val_perplexity, 5) +
           ", epoch-end ppl" + epochs + ", " + num(o.seconds, 3) + "s");
    v.require(chars >= 1'000'000, "corpus of at least 1M characters");
    v.require(o.finished && o.epoch_val_perplexity.size() == 2, "two epochs completed");
    v.require(!o.epoch_val_perplexity.empty() && o.epoch_val_perplexity.back() < 0.5 * o.initial_val_perplexity,
              "final ppl < 0.5x untrained");
    for (std::size_t e = 1; e < o.epoch_val_perplexity.size(); ++e)
        v.require(o.epoch_val_perplexity[e] <= o.epoch_val_perplexity[e - 1], "epoch-end ppl non-increasing");
    v.require(o.seconds < 1800, "under 30 minutes");
    return v;
}

Verdict collapse() {
    Verdict v;
    std::vector<double> prog, top2;
    std::string detail;
    for (std::uint64_t seed : {0ull, 1ull, 2ull}) {
        prog.push_back(progressive(seed).dead);
        top2.push_back(top2_from_start(seed).dead);
        detail += " seed " + std::to_string(seed) + ": " + num(top2.back()) + " vs " + num(prog.back()) + " (cv " +
                  num(top2_from_start(seed).cv, 3) + " vs " + num(progressive(seed).cv, 3) + ");";
    }
    const double m_top2 = median3(top2), m_prog = median3(prog);
    v.note("dead experts (top-2 from start vs progressive, of 16):" + detail + " medians " + num(m_top2) + " vs " +
           num(m_prog));
    v.require(m_top2 >= m_prog, "median dead(top-2 from start) >= median dead(progressive)");
    return v;
}

Verdict dispersion_efficacy() {
    Verdict v;
    const ToyRun& with = progressive(0);
    const ToyRun& without = toy_run("progressive_seed0_beta0", [](RunConfig& c) { c.train.beta = 0.0; });
    auto describe = [](const ToyRun& r) {
        std::string s;
        for (const auto& l : r.outcome.anchor_stats) s += " " + num(l.mean, 4) + "+/-" + num(l.std, 3);
        return s;
    };
    v.note("mean anchor cosine beta=0.6:" + describe(with) + " (avg " + num(with.anchor_mean, 4) + "), beta=0:" +
           describe(without) + " (avg " + num(without.anchor_mean, 4) + "), full-scale reference 0.073 +/- 0.065");
    v.require(with.outcome.steps == without.outcome.steps, "equal steps");
    v.require(with.anchor_mean < without.anchor_mean, "beta=0.6 mean cosine < beta=0 mean cosine");
    return v;
}

Verdict determinism_and_resume() {
    Verdict v;
    const ToyRun& first = progressive(0);
    const RunConfig c = toy_config();
    const TrainOutcome again = train(c, {work / "repeat", std::nullopt, nullptr, 0});
    const bool same = slurp(first.outcome.metrics_path) == slurp(again.metrics_path);

    RunConfig partial = c;
    partial.train.max_steps = first.outcome.steps_per_epoch + 37;  // stop inside epoch 2, after the switch
    const TrainOutcome stopped = train(partial, {work / "resumed", std::nullopt, nullptr, 0});
    const TrainOutcome resumed = train(c, {work / "resumed", stopped.final_checkpoint, nullptr, 0});
    const bool resume_metrics = slurp(first.outcome.metrics_path) == slurp(resumed.metrics_path);
    const Checkpoint a = load_checkpoint(first.outcome.final_checkpoint), b = load_checkpoint(resumed.final_checkpoint);
    bool resume_params = a.params.size() == b.params.size();
    for (std::size_t i = 0; resume_params && i < a.params.size(); ++i)
        resume_params = a.params[i].data == b.params[i].data && a.adam_m[i].data == b.adam_m[i].data &&
                        a.adam_v[i].data == b.adam_v[i].data;
    v.note("repeat run metrics " + std::string(same ? "identical" : "differ") + "; stop at step " +
           std::to_string(stopped.steps) + " + resume: metrics " + (resume_metrics ? "identical" : "differ") +
           ", final weights and moments " + (resume_params ? "identical" : "differ"));
    v.require(same, "same-seed runs bit-identical");
    v.require(resume_metrics && resume_params, "resume equals uninterrupted training");
    return v;
}

Verdict analysis_conservation() {
    Verdict v;
    std::int64_t checked_layers = 0, routed = 0, traced = 0, trace_mismatch = 0;
    bool conserved = true;
    std::vector<fs::path> checkpoints{progressive(0).outcome.final_checkpoint,
                                      work / "progressive_seed0" / "checkpoints" / "epoch_1",
                                      top2_from_start(1).outcome.final_checkpoint};
    for (const auto& dir : checkpoints) {
        const auto result = evaluate_checkpoint(dir, "val");
        RecordsFile file;
        file.header = {{"top_k", result.top_k}};
        file.records = result.eval.records;
        const fs::path path = work / "records.jsonl";
        write_records(path, file);
        const RecordsFile back = read_records(path);
        for (const auto& layer : utilization(back.records, back.records.n_experts).layers) {
            const auto sum = std::accumulate(layer.counts.begin(), layer.counts.end(), std::int64_t{0});
            conserved = conserved && sum == back.top_k() * layer.tokens && layer.tokens == result.tokens;
            ++checked_layers;
            routed += layer.tokens;
        }
    }

    const Checkpoint ck = load_checkpoint(checkpoints[0]);
    const std::string text = read_text_file(fs::path(SRA_DATA_DIR) / "moby_dick.txt").substr(600000, 3000) +
                             " The film was released in December 1995 and received positive reviews.";
    const auto ids = ck.tokenizer.encode(text);
    const Model<float> model = model_from_checkpoint<float>(ck);
    const int k = checkpoint_top_k(ck);
    const auto eval = evaluate(model, ids, ck.config.model.max_seq_len, ck.config.data.eval_batch_size, k);
    for (int layer = 0; layer < ck.config.model.n_layers; ++layer) {
        const auto rows = trace_checkpoint(checkpoints[0], text, layer);
        std::map<std::int64_t, const RoutingEntry*> logged;
        for (const auto& e : eval.records.layers[layer].entries) logged[e.position] = &e;
        trace_mismatch += static_cast<std::int64_t>(rows.size() != ids.size());
        for (const auto& row : rows) {
            ++traced;
            const auto it = logged.find(row.position);
            trace_mismatch += it == logged.end() || it->second->token_id != row.token_id ||
                              it->second->experts != row.experts || it->second->weights != row.weights;
        }
    }
    v.note(std::to_string(checked_layers) + " layer records, " + std::to_string(routed) +
           " routed tokens conserved; trace vs evaluate: " + std::to_string(traced) + " token-layers, " +
           std::to_string(trace_mismatch) + " mismatches");
    v.require(conserved, "sum of counts = k x routed tokens");
    v.require(trace_mismatch == 0 && traced > 0, "trace matches evaluate token for token");
    return v;
}

}  // namespace

int main() {
    criterion(1, "parameter counts at full scale", parameter_counts);
    criterion(2, "gradient suite", gradient_suite);
    criterion(3, "loss identities", loss_identities);
    criterion(4, "routing oracles", routing_oracles);
    prepare_tokenizer();
    criterion(5, "progressive schedule", progressive_schedule);
    criterion(6, "toy training smoke", toy_smoke);
    criterion(7, "directional collapse over 3 seeds", collapse);
    criterion(8, "dispersion efficacy", dispersion_efficacy);
    criterion(9, "determinism and resume", determinism_and_resume);
    criterion(10, "analysis conservation", analysis_conservation);
    emit(std::to_string(10 - failures) + " of 10 criteria passed");
    return failures;
}
