#pragma once

#include "sra/common.hpp"

#include <algorithm>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace sra {

struct BatchPlan {
    IdMatrix inputs;   // B x L
    IdMatrix targets;  // B x L, inputs shifted left by one
    int batch_size() const { return static_cast<int>(inputs.rows()); }
    int seq_len() const { return static_cast<int>(inputs.cols()); }
};

/// Splits a token stream into B contiguous lanes and walks them L tokens at a
/// time. Batch i covers lane offsets [i*L, i*L + L] (the extra token feeds the
/// targets); the trailing partial chunk of each lane is dropped. With a seed
/// the batch order is a seeded permutation, otherwise sequential.
class BatchStream {
public:
    BatchStream(std::span<const std::int32_t> ids, int batch_size, int seq_len,
                std::optional<std::uint64_t> shuffle_seed = std::nullopt)
        : ids_(ids), batch_(batch_size), len_(seq_len) {
        require(batch_size > 0 && seq_len > 0, "make_batches: B and L must be positive");
        require(ids.size() >= static_cast<std::size_t>(batch_size) * (seq_len + 1),
                "make_batches: need at least B*(L+1) = " + std::to_string(batch_size * (seq_len + 1)) +
                    " tokens, got " + std::to_string(ids.size()));
        lane_len_ = static_cast<int>(ids.size() / batch_size);
        order_.resize((lane_len_ - 1) / seq_len);
        std::iota(order_.begin(), order_.end(), 0);
        if (shuffle_seed) {
            Rng rng(*shuffle_seed);
            std::shuffle(order_.begin(), order_.end(), rng);
        }
    }

    int size() const { return static_cast<int>(order_.size()); }
    int lane_length() const { return lane_len_; }

    /// The i-th batch in stream order.
    BatchPlan at(int i) const {
        require(i >= 0 && i < size(), "batch index out of range");
        const int chunk = order_[i];
        BatchPlan plan{IdMatrix(batch_, len_), IdMatrix(batch_, len_)};
        for (int b = 0; b < batch_; ++b) {
            const std::size_t start = static_cast<std::size_t>(b) * lane_len_ + static_cast<std::size_t>(chunk) * len_;
            for (int t = 0; t < len_; ++t) {
                plan.inputs(b, t) = ids_[start + t];
                plan.targets(b, t) = ids_[start + t + 1];
            }
        }
        return plan;
    }

    bool has_next() const { return cursor_ < size(); }
    BatchPlan next() { return at(cursor_++); }
    /// Moves the cursor, e.g. to resume mid-epoch.
    void seek(int i) {
        require(i >= 0 && i <= size(), "seek position out of range");
        cursor_ = i;
    }
    int position() const { return cursor_; }

private:
    std::span<const std::int32_t> ids_;
    int batch_;
    int len_;
    int lane_len_ = 0;
    std::vector<int> order_;
    int cursor_ = 0;
};

inline std::vector<BatchPlan> make_batches(std::span<const std::int32_t> ids, int batch_size, int seq_len,
                                           std::optional<std::uint64_t> shuffle_seed = std::nullopt) {
    BatchStream stream(ids, batch_size, seq_len, shuffle_seed);
    std::vector<BatchPlan> out;
    out.reserve(stream.size());
    while (stream.has_next()) out.push_back(stream.next());
    return out;
}

struct TrainValSplit {
    std::vector<std::int32_t> train;
    std::vector<std::int32_t> val;
};

/// The final `val_fraction` of the stream becomes validation.
inline TrainValSplit split_train_val(std::span<const std::int32_t> ids, double val_fraction = 0.05) {
    require(val_fraction >= 0.0 && val_fraction < 1.0, "validation fraction must lie in [0, 1)");
    const auto n_val = static_cast<std::size_t>(static_cast<double>(ids.size()) * val_fraction);
    const std::size_t cut = ids.size() - n_val;
    return {{ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(cut)},
            {ids.begin() + static_cast<std::ptrdiff_t>(cut), ids.end()}};
}

}  // namespace sra
