#pragma once

#include "sra/config.hpp"
#include "sra/layers.hpp"
#include "sra/tokenizer.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace sra {

/// A named array, stored as float64 whatever the training precision.
struct Tensor {
    std::string name;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    std::vector<double> data;
};

/// Where training stands: the next batch to run and everything needed to run it.
struct TrainingState {
    std::int64_t step = 0;        // optimizer updates done
    int epoch = 1;                // epoch of the next batch, from 1
    int batch_in_epoch = 0;       // index of the next batch within its epoch
    std::int64_t total_steps = 0; // resolved schedule length
    std::string rng;              // serialized training random engine
    double initial_val_perplexity = 0.0;
    std::vector<double> epoch_val_perplexity;
};

/// Directory layout: model.bin (binary container), manifest.json,
/// tokenizer/{vocab.txt, merges.txt}.
struct Checkpoint {
    RunConfig config;
    TrainingState state;
    std::vector<Tensor> params;
    std::vector<Tensor> adam_m;  // empty when no optimizer state is stored
    std::vector<Tensor> adam_v;
    Tokenizer tokenizer;
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

template <RealScalar Scalar>
std::vector<Tensor> export_tensors(const std::vector<ParamRef<Scalar>>& refs) {
    std::vector<Tensor> out;
    for (const auto& ref : refs) {
        Tensor t{ref.name, ref.value->rows(), ref.value->cols(), {}};
        t.data.assign(ref.value->data(), ref.value->data() + ref.value->size());
        out.push_back(std::move(t));
    }
    return out;
}

template <RealScalar Scalar>
std::vector<Tensor> export_tensors(const std::vector<ParamRef<Scalar>>& refs, const std::vector<Matrix<Scalar>>& values) {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        Tensor t{refs[i].name, values[i].rows(), values[i].cols(), {}};
        t.data.assign(values[i].data(), values[i].data() + values[i].size());
        out.push_back(std::move(t));
    }
    return out;
}

/// Copies tensors into matrices matched by name and shape; every ref must be covered.
template <RealScalar Scalar>
void import_tensors(const std::vector<Tensor>& tensors, const std::vector<ParamRef<Scalar>>& refs,
                    std::vector<Matrix<Scalar>*> targets) {
    require(tensors.size() == refs.size(), "checkpoint holds " + std::to_string(tensors.size()) +
                                               " tensors, the model expects " + std::to_string(refs.size()));
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const Tensor& t = tensors[i];
        Matrix<Scalar>& dst = *targets[i];
        require(t.name == refs[i].name, "checkpoint tensor '" + t.name + "' where '" + refs[i].name + "' was expected");
        require(t.rows == dst.rows() && t.cols == dst.cols(), "checkpoint tensor '" + t.name + "' has the wrong shape");
        for (Eigen::Index j = 0; j < dst.size(); ++j) dst.data()[j] = static_cast<Scalar>(t.data[j]);
    }
}

}  // namespace sra
