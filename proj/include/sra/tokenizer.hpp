#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace sra {

/// Byte-level BPE. Id 0 is <unk>, ids 1..A are the corpus bytes in ascending
/// order, and every later id is one merge, in training order.
class Tokenizer {
public:
    static constexpr std::int32_t kUnknownId = 0;
    static constexpr std::string_view kUnknownToken = "<unk>";

    Tokenizer() = default;

    int size() const { return static_cast<int>(vocab_.size()); }
    /// Distinct corpus bytes.
    int alphabet_size() const { return alphabet_size_; }
    /// <unk> plus the byte alphabet: the vocabulary before any merge.
    int base_size() const { return alphabet_size_ + 1; }
    const std::vector<std::string>& vocab() const { return vocab_; }
    /// (left id, right id) per merge; merge m produces id alphabet_size() + 1 + m.
    const std::vector<std::pair<std::int32_t, std::int32_t>>& merges() const { return merges_; }

    std::vector<std::int32_t> encode(std::string_view text) const;
    std::string decode(std::span<const std::int32_t> ids) const;
    std::string token_text(std::int32_t id) const;

    /// Writes vocab.txt and merges.txt into `dir`.
    void save(const std::filesystem::path& dir) const;
    static Tokenizer load(const std::filesystem::path& dir);

    bool operator==(const Tokenizer&) const = default;

private:
    friend Tokenizer train_bpe(std::string_view corpus, int vocab_size, int min_pair_count);
    void rebuild_index();

    std::vector<std::string> vocab_;
    std::vector<std::pair<std::int32_t, std::int32_t>> merges_;
    int alphabet_size_ = 0;
    std::int32_t byte_to_id_[256] = {};
    std::unordered_map<std::uint64_t, std::int32_t> merge_rank_;
};

/// Greedy most-frequent-pair merging until the vocabulary holds `vocab_size`
/// entries (including <unk>) or the best pair occurs fewer than
/// `min_pair_count` times. Requires vocab_size > base_size(). Frequency ties go to the lexicographically smallest
/// (left, right) byte strings.
Tokenizer train_bpe(std::string_view corpus, int vocab_size, int min_pair_count = 2);

/// Escaped single-line form used in vocab/merges files: printable ASCII other
/// than space and backslash is kept, everything else becomes \xHH.
std::string escape_token(std::string_view token);
std::string unescape_token(std::string_view line);

std::string read_text_file(const std::filesystem::path& path);

}  // namespace sra
