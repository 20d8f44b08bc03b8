#pragma once

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace sra {

struct GradGroup {
    std::string name;
    std::int64_t entries = 0;
    std::int64_t skipped = 0;  // perturbation crossed a top-k boundary
    double max_rel_error = 0;
};

struct GradCheckReport {
    std::string component;
    double tol = 0;
    std::vector<GradGroup> groups;
    double max_rel_error = 0;
    std::int64_t skipped = 0;
    bool pass = false;
};

struct GradCheckOptions {
    int tokens = 4;
    int n_experts = 4;
    int dim = 8;
    std::uint64_t seed = 0;
};

/// Names accepted by grad_check: resonance, balance_loss, dispersion_loss,
/// z_loss, lm_loss, model (sra), model_standard_moe, model_dense.
std::vector<std::string> grad_check_components();

/// Float64 central differences, h = 1e-5 * max(1, |theta|), against the
/// analytic gradient. Relative error per entry is |a - n| / max(|a|, |n|, 1e-6).
/// Entries whose +-h perturbation changes a top-k selection sit on a kink and
/// are skipped; a report passes only if fewer than 5% of entries are skipped.
GradCheckReport grad_check(const std::string& component, double tol, const GradCheckOptions& options = {});

std::string format_report(const GradCheckReport& report);
nlohmann::json report_json(const GradCheckReport& report);

}  // namespace sra
