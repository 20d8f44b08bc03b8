#include "sra/training.hpp"

namespace sra {

PreparedData prepare_data(const RunConfig& config, const Tokenizer* tokenizer) {
    require(!config.data.corpus.empty(), "data.corpus is not set");
    const std::string text = read_text_file(config.data.corpus);
    PreparedData data;
    if (tokenizer != nullptr)
        data.tokenizer = *tokenizer;
    else if (!config.data.tokenizer.empty())
        data.tokenizer = Tokenizer::load(config.data.tokenizer);
    else
        data.tokenizer = train_bpe(text, config.model.vocab_size);
    const auto ids = data.tokenizer.encode(text);
    auto split = split_train_val(ids, config.data.val_fraction);
    data.train = std::move(split.train);
    data.val = std::move(split.val);
    return data;
}

TrainOutcome train(const RunConfig& config, const TrainOptions& options) {
    if (config.train.dtype == "float64") return detail::TrainLoop<double>(config, options).run();
    return detail::TrainLoop<float>(config, options).run();
}

int checkpoint_top_k(const Checkpoint& checkpoint) {
    const auto& s = checkpoint.state;
    const int trained_epoch = std::clamp(s.batch_in_epoch > 0 ? s.epoch : s.epoch - 1, 1, checkpoint.config.train.epochs);
    return scheduled_k(trained_epoch, checkpoint.config.train);
}

namespace {

template <RealScalar Scalar>
CheckpointEval evaluate_loaded(const Checkpoint& checkpoint, const std::vector<std::int32_t>& ids) {
    const Model<Scalar> model = model_from_checkpoint<Scalar>(checkpoint);
    CheckpointEval out;
    out.top_k = checkpoint_top_k(checkpoint);
    out.tokens = static_cast<std::int64_t>(ids.size());
    out.eval = evaluate(model, ids, checkpoint.config.seq_len(), checkpoint.config.data.eval_batch_size, out.top_k);
    return out;
}

template <RealScalar Scalar>
std::vector<TraceRow> trace_loaded(const Checkpoint& checkpoint, const std::vector<std::int32_t>& ids, int layer) {
    const Model<Scalar> model = model_from_checkpoint<Scalar>(checkpoint);
    return routing_trace(model, ids, layer, checkpoint_top_k(checkpoint), &checkpoint.tokenizer);
}

}  // namespace

CheckpointEval evaluate_checkpoint(const std::filesystem::path& dir, const std::string& split, const std::string& corpus) {
    require(split == "val" || split == "train", "split must be 'val' or 'train', got '" + split + "'");
    const Checkpoint checkpoint = load_checkpoint(dir);
    RunConfig config = checkpoint.config;
    if (!corpus.empty()) config.data.corpus = corpus;
    PreparedData data = prepare_data(config, &checkpoint.tokenizer);
    const auto& ids = split == "val" ? data.val : data.train;
    if (checkpoint.config.train.dtype == "float64") return evaluate_loaded<double>(checkpoint, ids);
    return evaluate_loaded<float>(checkpoint, ids);
}

std::vector<TraceRow> trace_checkpoint(const std::filesystem::path& dir, const std::string& text, int layer) {
    const Checkpoint checkpoint = load_checkpoint(dir);
    require(!text.empty(), "trace text is empty");
    const auto ids = checkpoint.tokenizer.encode(text);
    if (checkpoint.config.train.dtype == "float64") return trace_loaded<double>(checkpoint, ids, layer);
    return trace_loaded<float>(checkpoint, ids, layer);
}

}  // namespace sra
