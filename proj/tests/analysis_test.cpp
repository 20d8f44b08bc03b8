#include <doctest.h>

#include "sra/analysis.hpp"
#include "sra/records_io.hpp"
#include "sra/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

using namespace sra;
namespace fs = std::filesystem;

namespace {

RoutingRecord one_layer(int n_experts, const std::vector<std::pair<std::int32_t, std::vector<int>>>& routed) {
    RoutingRecord r;
    r.n_experts = n_experts;
    r.layers.resize(1);
    std::int64_t pos = 0;
    for (const auto& [token, experts] : routed) {
        std::vector<double> w(experts.size(), 1.0 / static_cast<double>(experts.size()));
        r.layers[0].entries.push_back({pos++, token, experts, w});
    }
    return r;
}

RoutingRecord random_records(int n_layers, int n_experts, int k, int tokens, std::uint64_t seed) {
    Rng rng(seed);
    RoutingRecord r;
    r.n_experts = n_experts;
    r.layers.resize(n_layers);
    std::vector<int> ids(n_experts);
    std::iota(ids.begin(), ids.end(), 0);
    std::uniform_int_distribution<int> token(0, 49);
    for (auto& layer : r.layers)
        for (int t = 0; t < tokens; ++t) {
            std::shuffle(ids.begin(), ids.end(), rng);
            std::vector<int> experts(ids.begin(), ids.begin() + k);
            layer.entries.push_back({t, token(rng), experts, std::vector<double>(k, 1.0 / k)});
        }
    return r;
}

ModelConfig tiny_model(int top_k) {
    ModelConfig c;
    c.dim = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.n_experts = 6;
    c.top_k = top_k;
    c.d_ff = 24;
    c.vocab_size = 64;
    c.max_seq_len = 12;
    return c;
}

std::vector<std::int32_t> random_ids(int n, int vocab, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_int_distribution<int> pick(0, vocab - 1);
    std::vector<std::int32_t> ids(n);
    for (auto& id : ids) id = pick(rng);
    return ids;
}

}  // namespace

TEST_CASE("utilization: everything on one expert gives cv 1 and one dead expert") {
    const int T = 37;
    const auto stats = utilization(one_layer(2, std::vector(T, std::pair<std::int32_t, std::vector<int>>{3, {0}})), 2);
    REQUIRE(stats.layers.size() == 1);
    const auto& l = stats.layers[0];
    CHECK(l.counts == std::vector<std::int64_t>{T, 0});
    CHECK(l.cv == doctest::Approx(1.0));
    CHECK(l.dead == 1);
    CHECK(l.dead_ids == std::vector<int>{1});
    CHECK(l.tokens == T);
}

TEST_CASE("utilization: uniform counts give cv 0") {
    std::vector<std::pair<std::int32_t, std::vector<int>>> routed;
    for (int t = 0; t < 20; ++t) routed.push_back({t, {t % 4, (t + 1) % 4}});
    const auto l = utilization(one_layer(4, routed), 4).layers[0];
    CHECK(l.counts == std::vector<std::int64_t>{10, 10, 10, 10});
    CHECK(l.cv == 0.0);
    CHECK(l.dead == 0);
}

TEST_CASE("utilization: cv is population std over mean, dead experts included") {
    // counts [1, 2, 3, 6, 0]: mean 2.4, population variance 4.24
    std::vector<std::pair<std::int32_t, std::vector<int>>> routed;
    const std::vector<int> counts{1, 2, 3, 6, 0};
    for (int e = 0; e < 5; ++e)
        for (int i = 0; i < counts[e]; ++i) routed.push_back({0, {e}});
    const auto l = utilization(one_layer(5, routed), 5).layers[0];
    CHECK(l.cv == doctest::Approx(std::sqrt(4.24) / 2.4));
    CHECK(l.dead_ids == std::vector<int>{4});
}

TEST_CASE("utilization conserves k slots per routed token") {
    for (int k : {1, 2, 3}) {
        const auto stats = utilization(random_records(3, 8, k, 500, 11 + k), 8);
        for (const auto& l : stats.layers) {
            CHECK(std::accumulate(l.counts.begin(), l.counts.end(), std::int64_t{0}) == k * l.tokens);
            CHECK(l.dead == std::count(l.counts.begin(), l.counts.end(), 0));
        }
    }
}

TEST_CASE("utilization rejects an empty layer by name") {
    RoutingRecord r = random_records(2, 4, 1, 10, 1);
    r.layers.push_back({});
    try {
        utilization(r, 4);
        FAIL("expected an error");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("layer 2") != std::string::npos);
    }
}

TEST_CASE("specialization: counts by hand and ties by id") {
    const auto records = one_layer(4, {{5, {3}}, {7, {3}}, {5, {3}}, {5, {3}}, {9, {1}}, {2, {1}}, {9, {1}}, {2, {1}}});
    const auto table = specialization_table(records, 0, 2);
    REQUIRE(table.size() == 4);
    CHECK(table[3].token_ids == std::vector<std::int32_t>{5, 7});
    CHECK(table[3].counts == std::vector<std::int64_t>{3, 1});
    CHECK(table[1].token_ids == std::vector<std::int32_t>{2, 9});
    CHECK(table[0].token_ids.empty());
    CHECK_THROWS_AS(specialization_table(records, 0, 0), std::invalid_argument);
}

TEST_CASE("specialization decodes tokens: an expert fed only one token lists only it") {
    const Tokenizer tok = train_bpe("May May May May May", 12);
    const auto ids = tok.encode("May");
    REQUIRE(ids.size() == 1);
    const auto records = one_layer(2, {{ids[0], {1}}, {ids[0], {1}}, {tok.encode("a")[0], {0}}});
    const auto table = specialization_table(records, 0, 5, &tok);
    CHECK(table[1].tokens == std::vector<std::string>{"May"});
    CHECK(format_specialization(table, 0).find("May") != std::string::npos);
}

TEST_CASE("specialization is stable under record reordering") {
    RoutingRecord r = random_records(1, 6, 2, 800, 4);
    const auto before = specialization_table(r, 0, 5);
    Rng rng(9);
    std::shuffle(r.layers[0].entries.begin(), r.layers[0].entries.end(), rng);
    const auto after = specialization_table(r, 0, 5);
    REQUIRE(before.size() == after.size());
    for (std::size_t e = 0; e < before.size(); ++e) {
        CHECK(before[e].token_ids == after[e].token_ids);
        CHECK(before[e].counts == after[e].counts);
    }
}

TEST_CASE("anchor dispersion: identity, 45 degrees, histogram, orthogonal init") {
    const auto identity = anchor_dispersion_stats(Matrix<double>::Identity(4, 4));
    CHECK(std::abs(identity.mean) < 1e-12);
    CHECK(identity.std == doctest::Approx(0.0));
    CHECK(identity.pairs == 6);
    CHECK(identity.histogram[10] == 6);

    Matrix<double> pair(2, 2);
    pair << 1, 0, 1, 1;
    const auto diagonal = anchor_dispersion_stats(pair);
    CHECK(diagonal.mean == doctest::Approx(std::sqrt(0.5)).epsilon(1e-7));
    CHECK(diagonal.std == doctest::Approx(0.0));
    CHECK(diagonal.histogram[17] == 1);

    Matrix<double> same(3, 5);
    same.rowwise() = Eigen::RowVectorXd::LinSpaced(5, 1, 5);
    const auto collapsed = anchor_dispersion_stats(same);
    CHECK(collapsed.mean == doctest::Approx(1.0));
    CHECK(collapsed.histogram[19] == 3);

    for (auto [n, d] : {std::pair{8, 8}, {8, 64}, {128, 512}}) {
        const auto stats = anchor_dispersion_stats(init_anchors_orthogonal<double>(n, d, 7));
        CAPTURE(n);
        CHECK(std::abs(stats.mean) < 1e-5);
        CHECK(stats.pairs == static_cast<std::int64_t>(n) * (n - 1) / 2);
    }
    CHECK_THROWS_AS(anchor_dispersion_stats(Matrix<double>::Ones(1, 4)), std::invalid_argument);
}

TEST_CASE("routing_trace matches the assignments evaluate logs") {
    for (int k : {1, 2}) {
        Model<double> model(tiny_model(k), 21);
        const auto ids = random_ids(30, 64, 5);  // spans three windows of 12
        const auto eval = evaluate(model, ids, model.config().max_seq_len, 2, k);
        for (int layer = 0; layer < 2; ++layer) {
            const auto rows = routing_trace(model, ids, layer, k);
            REQUIRE(rows.size() == ids.size());
            std::vector<const RoutingEntry*> by_pos(ids.size());
            for (const auto& e : eval.records.layers[layer].entries) by_pos[e.position] = &e;
            for (std::size_t t = 0; t < rows.size(); ++t) {
                CHECK(rows[t].position == static_cast<std::int64_t>(t));
                CHECK(rows[t].token_id == ids[t]);
                CHECK(rows[t].experts == by_pos[t]->experts);
                CHECK(rows[t].weights == by_pos[t]->weights);
                CHECK(std::accumulate(rows[t].weights.begin(), rows[t].weights.end(), 0.0) ==
                      doctest::Approx(1.0).epsilon(1e-6));
                if (k == 1) CHECK(rows[t].weights[0] == 1.0);
            }
        }
        CHECK_THROWS_AS(routing_trace(model, ids, 2, k), std::invalid_argument);
    }
    ModelConfig dense = tiny_model(2);
    dense.variant = Variant::dense;
    Model<double> dense_model(dense, 0);
    CHECK_THROWS_AS(routing_trace(dense_model, random_ids(5, 64, 1), 0, 2), std::invalid_argument);
}

TEST_CASE("records file round trip") {
    const fs::path path = fs::temp_directory_path() / "sra_analysis_test_records.jsonl";
    RecordsFile file;
    file.header = {{"variant", "sra"}, {"top_k", 2}};
    file.records = random_records(2, 5, 2, 40, 3);
    file.records.layers[1].entries[3].weights = {0.1234567890123456789, 1 - 0.1234567890123456789};
    write_records(path, file);
    const RecordsFile back = read_records(path);
    CHECK(back.top_k() == 2);
    CHECK(back.header.at("format") == "sra-routing-records");
    CHECK(back.records.n_experts == 5);
    REQUIRE(back.records.layers.size() == 2);
    for (std::size_t l = 0; l < 2; ++l) {
        REQUIRE(back.records.layers[l].entries.size() == file.records.layers[l].entries.size());
        for (std::size_t i = 0; i < file.records.layers[l].entries.size(); ++i) {
            const auto &a = file.records.layers[l].entries[i], &b = back.records.layers[l].entries[i];
            CHECK(a.position == b.position);
            CHECK(a.token_id == b.token_id);
            CHECK(a.experts == b.experts);
            CHECK(a.weights == b.weights);
        }
    }
    fs::remove(path);
}

TEST_CASE("report layouts") {
    const auto stats = utilization(random_records(2, 4, 2, 16, 8), 4);
    const std::string table = format_utilization(stats);
    CHECK(table.rfind("Layer", 0) == 0);
    CHECK(table.find("CV") != std::string::npos);
    CHECK(table.find("Dead") != std::string::npos);
    CHECK(utilization_json(stats).at("layers").size() == 2);

    std::vector<DispersionStats> per_layer{anchor_dispersion_stats(Matrix<double>::Identity(3, 3))};
    const std::string csv = dispersion_histogram_csv(per_layer);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 21);
    CHECK(csv.rfind("layer,bucket_low,bucket_high,count\n", 0) == 0);
    CHECK(csv.find("0,0.0,0.1,3\n") != std::string::npos);
    CHECK(dispersion_json(per_layer).at("layers")[0].at("pairs") == 3);

    CHECK(display_token(" the\n") == "␣the\\n");

    std::vector<TraceRow> rows{{0, 4, "film", {42, 26}, {0.551, 0.449}}, {1, 5, " was", {3, 9}, {0.6, 0.4}}};
    const std::string trace = format_trace(rows, 0);
    CHECK(trace.find("film") != std::string::npos);
    CHECK(trace.find("E42") != std::string::npos);
    CHECK(trace.find("(0.551)") != std::string::npos);
    CHECK(trace.find("Expert 2") != std::string::npos);
    CHECK(trace_json(rows, 0).at("tokens").size() == 2);
}
