#include "sra/gradcheck.hpp"

#include "sra/losses.hpp"
#include "sra/model.hpp"
#include "sra/router.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

namespace sra {

namespace {

using Dense = Matrix<double>;

Dense random_dense(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
    std::normal_distribution<double> normal(0.0, scale);
    Dense m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
}

using Routes = std::function<std::vector<int>()>;

// Entries whose perturbation changes any top-k selection straddle a kink of
// the objective; they are counted as skipped rather than compared.
GradGroup compare(const std::string& name, Dense& theta, const Dense& analytic, const std::function<double()>& f,
                  const Routes& routes = {}) {
    GradGroup group{name, theta.size(), 0, 0.0};
    const std::vector<int> base = routes ? routes() : std::vector<int>{};
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
        const double saved = theta.data()[i];
        const double h = 1e-5 * std::max(1.0, std::abs(saved));
        theta.data()[i] = saved + h;
        const double up = f();
        const bool flip_up = routes && routes() != base;
        theta.data()[i] = saved - h;
        const double down = f();
        const bool flip_down = routes && routes() != base;
        theta.data()[i] = saved;
        if (flip_up || flip_down) {
            ++group.skipped;
            continue;
        }
        const double numeric = (up - down) / (2 * h);
        const double a = analytic.data()[i];
        const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
        group.max_rel_error = std::max(group.max_rel_error, err);
    }
    return group;
}

struct LinearBank {
    std::vector<Dense> maps;
    int size() const { return static_cast<int>(maps.size()); }
    Dense apply(int e, const Dense& rows) const { return rows * maps[e]; }
};

std::vector<GradGroup> check_resonance(const GradCheckOptions& o, Rng& rng) {
    AnchorSet<double> anchors = init_anchors_kaiming<double>(o.n_experts, o.dim, rng());
    LinearBank bank;
    for (int e = 0; e < o.n_experts; ++e) bank.maps.push_back(random_dense(o.dim, o.dim, rng));
    Dense h = random_dense(o.tokens, o.dim, rng);
    const Dense probe = random_dense(o.tokens, o.dim, rng);
    const int k = std::min(2, o.n_experts);
    auto objective = [&] {
        Rng unused(0);
        return (csr_forward(h, anchors, bank, k, 0.0, unused).outputs.array() * probe.array()).sum();
    };
    auto routes = [&] {
        Rng unused(0);
        std::vector<int> ids;
        for (const auto& d : csr_forward(h, anchors, bank, k, 0.0, unused).decisions)
            ids.insert(ids.end(), d.indices.begin(), d.indices.end());
        return ids;
    };
    Rng unused(0);
    const auto fwd = csr_forward(h, anchors, bank, k, 0.0, unused);
    const Dense d_scores = mixture_scores_backward(fwd.decisions, fwd.dispatch, fwd.expert_outputs, probe, o.n_experts);
    Dense d_anchors = Dense::Zero(o.n_experts, o.dim), d_h = Dense::Zero(o.tokens, o.dim);
    cosine_matrix_backward<double>(h, anchors.anchors, anchors.eps, d_scores, &d_h, &d_anchors);
    // The expert path also depends on h; add it so the token gradient is complete.
    for (int e = 0; e < o.n_experts; ++e) {
        const auto& rows = fwd.dispatch.rows[e];
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const double w = fwd.decisions[rows[i]].weights[fwd.dispatch.slots[e][i]];
            d_h.row(rows[i]) += w * probe.row(rows[i]) * bank.maps[e].transpose();
        }
    }
    return {compare("anchors", anchors.anchors, d_anchors, objective, routes),
            compare("tokens", h, d_h, objective, routes)};
}

std::vector<GradGroup> check_model(Variant variant, const GradCheckOptions& o, Rng& rng) {
    ModelConfig c;
    c.dim = o.dim;
    c.n_layers = 1;
    c.n_heads = 2;
    c.n_experts = o.n_experts;
    c.top_k = std::min(2, o.n_experts);
    c.d_ff = 6;
    c.vocab_size = 16;
    c.max_seq_len = o.tokens;
    c.dropout = 0.0;
    c.variant = variant;
    Model<double> model(c, rng());
    std::uniform_int_distribution<int> pick(0, c.vocab_size - 1);
    IdMatrix ids(2, o.tokens), targets(2, o.tokens);
    for (Eigen::Index i = 0; i < ids.size(); ++i) {
        ids.data()[i] = pick(rng);
        targets.data()[i] = pick(rng);
    }
    const LossWeights weights{0.4, 0.6, 0.1};
    const ForwardOptions options{Mode::train, 0, 0.0};
    auto objective = [&] {
        Rng r(0);
        return model.loss_and_grad(ids, targets, options, weights, r).total;
    };
    Routes routes;
    if (c.is_moe())
        routes = [&] {
            Rng r(0);
            std::vector<int> chosen;
            for (const auto& layer : model.forward(ids, options, r).records.layers)
                for (const auto& e : layer.entries) chosen.insert(chosen.end(), e.experts.begin(), e.experts.end());
            return chosen;
        };
    model.zero_grad();
    objective();
    auto params = model.parameters();
    std::vector<Dense> analytic;
    for (auto& p : params) analytic.push_back(*p.grad);
    std::vector<GradGroup> groups;
    for (std::size_t i = 0; i < params.size(); ++i) groups.push_back(compare(params[i].name, *params[i].value, analytic[i], objective, routes));
    return groups;
}

}  // namespace

std::vector<std::string> grad_check_components() {
    return {"resonance", "balance_loss", "dispersion_loss", "z_loss", "lm_loss", "model", "model_standard_moe", "model_dense"};
}

GradCheckReport grad_check(const std::string& component, double tol, const GradCheckOptions& o) {
    require(tol > 0, "grad_check: tol must be positive");
    require(o.tokens >= 1 && o.n_experts >= 2 && o.dim >= 2 && o.dim % 4 == 0,
            "grad_check: need tokens >= 1, n_experts >= 2 and dim a multiple of 4");
    Rng rng(o.seed);
    GradCheckReport report;
    report.component = component;
    report.tol = tol;

    if (component == "resonance") {
        report.groups = check_resonance(o, rng);
    } else if (component == "balance_loss" || component == "z_loss") {
        Dense scores = random_dense(o.tokens, o.n_experts, rng, 1.5);
        Dense grad = Dense::Zero(o.tokens, o.n_experts);
        const bool balance = component == "balance_loss";
        auto f = [&] { return balance ? balance_loss<double>(scores) : z_loss<double>(scores); };
        if (balance) balance_loss<double>(scores, &grad);
        else z_loss<double>(scores, &grad);
        report.groups.push_back(compare("scores", scores, grad, f));
    } else if (component == "dispersion_loss") {
        AnchorSet<double> anchors;
        anchors.anchors = random_dense(o.n_experts, o.dim, rng);
        Dense grad = Dense::Zero(o.n_experts, o.dim);
        dispersion_loss(anchors, &grad);
        report.groups.push_back(compare("anchors", anchors.anchors, grad, [&] { return dispersion_loss(anchors); }));
    } else if (component == "lm_loss") {
        const int vocab = 2 * o.n_experts;
        Dense logits = random_dense(o.tokens, vocab, rng);
        std::vector<std::int32_t> targets(o.tokens);
        std::uniform_int_distribution<int> pick(0, vocab - 1);
        for (auto& t : targets) t = pick(rng);
        Dense grad = Dense::Zero(o.tokens, vocab);
        lm_loss<double>(logits, targets, &grad);
        report.groups.push_back(compare("logits", logits, grad, [&] { return lm_loss<double>(logits, targets); }));
    } else if (component == "model") {
        report.groups = check_model(Variant::sra, o, rng);
    } else if (component == "model_standard_moe") {
        report.groups = check_model(Variant::standard_moe, o, rng);
    } else if (component == "model_dense") {
        report.groups = check_model(Variant::dense, o, rng);
    } else {
        std::string names;
        for (const auto& n : grad_check_components()) names += (names.empty() ? "" : "|") + n;
        throw std::invalid_argument("unknown gradcheck component '" + component + "' (expected " + names + ")");
    }

    std::int64_t entries = 0;
    for (const auto& g : report.groups) {
        report.max_rel_error = std::max(report.max_rel_error, g.max_rel_error);
        report.skipped += g.skipped;
        entries += g.entries;
    }
    report.pass = report.max_rel_error < tol && report.skipped * 20 < entries;
    return report;
}

std::string format_report(const GradCheckReport& report) {
    std::size_t width = 5;
    for (const auto& g : report.groups) width = std::max(width, g.name.size());
    std::ostringstream out;
    char line[256];
    std::snprintf(line, sizeof line, "%-*s  %8s  %8s  %12s\n", static_cast<int>(width), "group", "entries", "skipped",
                  "max rel err");
    out << line;
    for (const auto& g : report.groups) {
        std::snprintf(line, sizeof line, "%-*s  %8lld  %8lld  %12.3e\n", static_cast<int>(width), g.name.c_str(),
                      static_cast<long long>(g.entries), static_cast<long long>(g.skipped), g.max_rel_error);
        out << line;
    }
    if (report.skipped > 0) {
        std::snprintf(line, sizeof line, "%lld entries skipped: the perturbation changed a top-k selection\n",
                      static_cast<long long>(report.skipped));
        out << line;
    }
    std::snprintf(line, sizeof line, "%s: %s max rel err %.3e (tol %.1e)\n", report.pass ? "PASS" : "FAIL",
                  report.component.c_str(), report.max_rel_error, report.tol);
    out << line;
    return out.str();
}

nlohmann::json report_json(const GradCheckReport& report) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : report.groups)
        groups.push_back(
            {{"name", g.name}, {"entries", g.entries}, {"skipped", g.skipped}, {"max_rel_error", g.max_rel_error}});
    return {{"component", report.component},
            {"tol", report.tol},
            {"max_rel_error", report.max_rel_error},
            {"skipped", report.skipped},
            {"pass", report.pass},
            {"groups", groups}};
}

}  // namespace sra
