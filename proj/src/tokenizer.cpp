#include "sra/tokenizer.hpp"

#include "sra/common.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <sstream>
#include <unordered_map>

namespace sra {

namespace {

using PairKey = std::uint64_t;

PairKey key_of(std::int32_t a, std::int32_t b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}
std::int32_t left_of(PairKey k) { return static_cast<std::int32_t>(k >> 32); }
std::int32_t right_of(PairKey k) { return static_cast<std::int32_t>(k & 0xffffffffu); }

// Doubly linked symbol sequence shared by training and encoding.
struct SymbolList {
    std::vector<std::int32_t> id;
    std::vector<int> prev, next;
    std::vector<bool> alive;

    explicit SymbolList(std::vector<std::int32_t> ids) : id(std::move(ids)) {
        const int n = static_cast<int>(id.size());
        prev.resize(n);
        next.resize(n);
        alive.assign(n, true);
        for (int i = 0; i < n; ++i) {
            prev[i] = i - 1;
            next[i] = i + 1 < n ? i + 1 : -1;
        }
    }

    // Merges position i with its successor into `merged`.
    void merge(int i, std::int32_t merged) {
        const int j = next[i];
        id[i] = merged;
        alive[j] = false;
        next[i] = next[j];
        if (next[j] >= 0) prev[next[j]] = i;
    }
};

}  // namespace

std::string escape_token(std::string_view token) {
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned char c : token) {
        if (c > 0x20 && c < 0x7f && c != '\\') {
            out.push_back(static_cast<char>(c));
        } else {
            out += "\\x";
            out.push_back(hex[c >> 4]);
            out.push_back(hex[c & 0xf]);
        }
    }
    return out;
}

std::string unescape_token(std::string_view line) {
    std::string out;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '\\') {
            if (i + 3 >= line.size()) throw std::runtime_error("truncated escape in token file");
            if (line[i + 1] != 'x') throw std::runtime_error("bad escape in token file");
            out.push_back(static_cast<char>(std::stoi(std::string(line.substr(i + 2, 2)), nullptr, 16)));
            i += 3;
        } else {
            out.push_back(line[i]);
        }
    }
    return out;
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file: " + path.string());
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void Tokenizer::rebuild_index() {
    std::fill(std::begin(byte_to_id_), std::end(byte_to_id_), kUnknownId);
    for (int id = 1; id <= alphabet_size_; ++id)
        byte_to_id_[static_cast<unsigned char>(vocab_[id][0])] = id;
    merge_rank_.clear();
    for (std::size_t m = 0; m < merges_.size(); ++m)
        merge_rank_.emplace(key_of(merges_[m].first, merges_[m].second), static_cast<std::int32_t>(m));
}

Tokenizer train_bpe(std::string_view corpus, int vocab_size, int min_pair_count) {
    require(!corpus.empty(), "train_bpe: corpus is empty");
    bool present[256] = {};
    for (unsigned char c : corpus) present[c] = true;
    const int alphabet = static_cast<int>(std::count(std::begin(present), std::end(present), true));
    require(vocab_size > alphabet + 1, "train_bpe: vocab_size " + std::to_string(vocab_size) +
                                           " must exceed the base vocabulary size " + std::to_string(alphabet + 1) +
                                           " (<unk> plus distinct bytes)");
    require(min_pair_count >= 1, "train_bpe: min_pair_count must be >= 1");

    Tokenizer tok;
    tok.vocab_.emplace_back(Tokenizer::kUnknownToken);
    for (int b = 0; b < 256; ++b)
        if (present[b]) tok.vocab_.emplace_back(1, static_cast<char>(b));
    tok.alphabet_size_ = alphabet;
    tok.rebuild_index();

    std::vector<std::int32_t> initial(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) initial[i] = tok.byte_to_id_[static_cast<unsigned char>(corpus[i])];
    SymbolList seq(std::move(initial));

    std::unordered_map<PairKey, std::int64_t> counts;
    std::unordered_map<PairKey, std::vector<int>> positions;
    for (int i = 0; i + 1 < static_cast<int>(seq.id.size()); ++i) {
        const PairKey k = key_of(seq.id[i], seq.id[i + 1]);
        ++counts[k];
        positions[k].push_back(i);
    }

    struct Candidate {
        std::int64_t count;
        PairKey key;
    };
    const auto& vocab = tok.vocab_;
    // Highest count first; ties to the smallest (left, right) strings.
    auto worse = [&vocab](const Candidate& x, const Candidate& y) {
        if (x.count != y.count) return x.count < y.count;
        const auto& xl = vocab[left_of(x.key)];
        const auto& yl = vocab[left_of(y.key)];
        if (xl != yl) return xl > yl;
        return vocab[right_of(x.key)] > vocab[right_of(y.key)];
    };
    std::priority_queue<Candidate, std::vector<Candidate>, decltype(worse)> heap(worse);
    for (const auto& [k, c] : counts) heap.push({c, k});

    PairKey merging = 0;
    auto adjust = [&](std::int32_t a, std::int32_t b, std::int64_t delta, int position) {
        const PairKey k = key_of(a, b);
        if (k == merging) return;  // overlapping occurrence of the pair being merged, e.g. "aaa"
        auto& c = counts[k];
        c += delta;
        if (delta > 0) positions[k].push_back(position);
        if (c > 0) heap.push({c, k});
    };

    while (tok.size() < vocab_size && !heap.empty()) {
        const Candidate top = heap.top();
        heap.pop();
        const auto it = counts.find(top.key);
        if (it == counts.end() || it->second != top.count) continue;  // stale entry
        if (top.count < min_pair_count) break;

        const std::int32_t a = left_of(top.key), b = right_of(top.key);
        const auto merged = static_cast<std::int32_t>(tok.vocab_.size());
        tok.vocab_.push_back(tok.vocab_[a] + tok.vocab_[b]);
        tok.merges_.emplace_back(a, b);

        std::vector<int> sites = std::move(positions[top.key]);
        positions.erase(top.key);
        counts.erase(top.key);
        merging = top.key;
        std::sort(sites.begin(), sites.end());
        for (int i : sites) {
            if (!seq.alive[i] || seq.id[i] != a) continue;
            const int j = seq.next[i];
            if (j < 0 || seq.id[j] != b) continue;
            const int p = seq.prev[i];
            const int n = seq.next[j];
            if (p >= 0) adjust(seq.id[p], a, -1, p);
            if (n >= 0) adjust(b, seq.id[n], -1, j);
            seq.merge(i, merged);
            if (p >= 0) adjust(seq.id[p], merged, +1, p);
            if (n >= 0) adjust(merged, seq.id[n], +1, i);
        }
    }
    tok.rebuild_index();
    return tok;
}

std::vector<std::int32_t> Tokenizer::encode(std::string_view text) const {
    std::vector<std::int32_t> initial(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) initial[i] = byte_to_id_[static_cast<unsigned char>(text[i])];
    if (merges_.empty() || text.size() < 2) return initial;

    const auto& rank = merge_rank_;
    SymbolList seq(std::move(initial));
    using Item = std::pair<std::int32_t, int>;  // (rank, position): lowest rank, then leftmost
    std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
    auto consider = [&](int i) {
        if (i < 0) return;
        const int j = seq.next[i];
        if (j < 0) return;
        const auto it = rank.find(key_of(seq.id[i], seq.id[j]));
        if (it != rank.end()) heap.emplace(it->second, i);
    };
    for (int i = 0; i + 1 < static_cast<int>(seq.id.size()); ++i) consider(i);

    const std::int32_t first_merge_id = alphabet_size_ + 1;
    while (!heap.empty()) {
        const auto [r, i] = heap.top();
        heap.pop();
        if (!seq.alive[i] || seq.next[i] < 0) continue;
        const auto it = rank.find(key_of(seq.id[i], seq.id[seq.next[i]]));
        if (it == rank.end() || it->second != r) continue;
        seq.merge(i, first_merge_id + r);
        consider(seq.prev[i]);
        consider(i);
    }

    std::vector<std::int32_t> out;
    for (int i = 0; i >= 0; i = seq.next[i]) out.push_back(seq.id[i]);
    return out;
}

std::string Tokenizer::token_text(std::int32_t id) const {
    require(id >= 0 && id < size(), "token id " + std::to_string(id) + " out of range");
    if (id == kUnknownId) return "\xEF\xBF\xBD";  // U+FFFD
    return vocab_[id];
}

std::string Tokenizer::decode(std::span<const std::int32_t> ids) const {
    std::string out;
    for (auto id : ids) out += token_text(id);
    return out;
}

void Tokenizer::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    std::ofstream vocab(dir / "vocab.txt", std::ios::binary);
    vocab << kUnknownToken << '\n';
    for (std::size_t i = 1; i < vocab_.size(); ++i) vocab << escape_token(vocab_[i]) << '\n';
    std::ofstream merges(dir / "merges.txt", std::ios::binary);
    for (const auto& [a, b] : merges_) merges << escape_token(vocab_[a]) << ' ' << escape_token(vocab_[b]) << '\n';
    if (!vocab || !merges) throw std::runtime_error("failed writing tokenizer files to " + dir.string());
}

Tokenizer Tokenizer::load(const std::filesystem::path& dir) {
    std::ifstream vocab(dir / "vocab.txt", std::ios::binary);
    std::ifstream merges(dir / "merges.txt", std::ios::binary);
    if (!vocab || !merges) throw std::runtime_error("tokenizer files not found in " + dir.string());

    Tokenizer tok;
    std::string line;
    if (!std::getline(vocab, line) || line != kUnknownToken) throw std::runtime_error("vocab.txt must start with <unk>");
    tok.vocab_.emplace_back(kUnknownToken);
    while (std::getline(vocab, line)) tok.vocab_.push_back(unescape_token(line));

    std::unordered_map<std::string, std::int32_t> lookup;
    for (std::size_t i = 1; i < tok.vocab_.size(); ++i) lookup.emplace(tok.vocab_[i], static_cast<std::int32_t>(i));
    while (std::getline(merges, line)) {
        const auto space = line.find(' ');
        if (space == std::string::npos) throw std::runtime_error("malformed merges.txt line: " + line);
        const auto a = lookup.find(unescape_token(std::string_view(line).substr(0, space)));
        const auto b = lookup.find(unescape_token(std::string_view(line).substr(space + 1)));
        if (a == lookup.end() || b == lookup.end()) throw std::runtime_error("merge refers to unknown token: " + line);
        tok.merges_.emplace_back(a->second, b->second);
    }
    tok.alphabet_size_ = static_cast<int>(tok.vocab_.size() - 1 - tok.merges_.size());
    for (int id = 1; id <= tok.alphabet_size_; ++id)
        if (tok.vocab_[id].size() != 1) throw std::runtime_error("vocab.txt: base entries must be single bytes");
    for (std::size_t m = 0; m < tok.merges_.size(); ++m) {
        const auto& [a, b] = tok.merges_[m];
        if (tok.vocab_[tok.alphabet_size_ + 1 + m] != tok.vocab_[a] + tok.vocab_[b])
            throw std::runtime_error("merges.txt is inconsistent with vocab.txt at merge " + std::to_string(m));
    }
    tok.rebuild_index();
    return tok;
}

}  // namespace sra
