#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace sra {

// Token-major storage: one row per token, so row gathers stay contiguous.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using IdMatrix = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Rng = std::mt19937_64;

template <typename Scalar>
concept RealScalar = std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>;

/// Division guard shared by cosine scoring, dispersion, and the balance loss.
inline constexpr double kEps = 1e-8;

/// Raised when a training step produces a NaN/Inf; `component()` names the culprit.
class NonFiniteLoss : public std::runtime_error {
public:
    explicit NonFiniteLoss(std::string component)
        : std::runtime_error("non-finite loss in component '" + component + "'"),
          component_(std::move(component)) {}
    const std::string& component() const noexcept { return component_; }

private:
    std::string component_;
};

inline void require(bool condition, const std::string& message) {
    if (!condition) throw std::invalid_argument(message);
}

}  // namespace sra
