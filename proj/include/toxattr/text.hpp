#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

namespace toxattr::text {

enum class Label : int { kExplicit = 0, kImplicit = 1, kNone = 2 };

constexpr int kNumLabels = 3;

// Wire names; the UI maps kNone to "non-hateful" on its side.
const char* label_name(Label label);
bool label_from_string(const std::string& s, Label* out);

struct RawRecord {
  std::string text;  // stored normalized
  Label label;
};

struct Corpus {
  std::vector<RawRecord> records;
  std::string provenance;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
};

struct LoadStats {
  std::size_t kept = 0;
  std::size_t dropped_empty = 0;
  std::size_t dropped_duplicate = 0;
};

struct Vocabulary {
  static constexpr std::uint32_t kPadId = 0;
  static constexpr std::uint32_t kUnkId = 1;

  std::unordered_map<std::string, std::uint32_t> token_to_id;
  std::vector<std::string> id_to_token;

  std::size_t size() const { return id_to_token.size(); }

  std::uint32_t lookup(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kUnkId : it->second;
  }
};

struct EncodedExample {
  std::vector<std::uint32_t> ids;   // length max_len, PAD where mask is 0
  std::vector<std::uint8_t> mask;   // prefix of 1s
  int label_index = -1;

  std::size_t real_tokens() const {
    std::size_t n = 0;
    for (auto m : mask) n += m;
    return n;
  }
};

struct SplitSpec {
  double train_fraction = 1.0 / 3.0;
  double dev_fraction = 1.0 / 3.0;
  double test_fraction = 1.0 / 3.0;
  std::uint64_t seed = 0;
};

struct SplitResult {
  Corpus train;
  Corpus dev;
  Corpus test;
};

// Lowercase, strip URLs (http:// or https:// through the next whitespace),
// drop characters outside {a-z, 0-9, whitespace, . , ! ? '}, collapse
// whitespace runs, trim. Idempotent.
std::string normalize_text(const std::string& raw);

// Whitespace split with . , ! ? as standalone tokens; apostrophes stay inside
// words. Input is expected to be normalized already.
std::vector<std::string> tokenize(const std::string& normalized);

// Ids 2.. assigned by descending frequency, ties broken lexicographically.
Vocabulary build_vocab(const Corpus& corpus, std::size_t min_freq);

// Ids + mask only; label_index is left at -1.
EncodedExample encode(const std::vector<std::string>& tokens, const Vocabulary& vocab,
                      std::size_t max_len);

EncodedExample encode_record(const RawRecord& record, const Vocabulary& vocab,
                             std::size_t max_len);

// One JSON object per line with fields "text" and "label". Normalizes,
// validates labels, drops empty-after-normalization records and duplicate
// normalized texts (first occurrence wins).
Corpus load_corpus(std::istream& in, const std::string& provenance, LoadStats* stats = nullptr);
Corpus load_corpus_file(const std::string& path, LoadStats* stats = nullptr);

void save_corpus_file(const Corpus& corpus, const std::string& path);

// Deterministic shuffle under spec.seed, then contiguous partition. Sizes are
// floor(n * fraction); remainder records go to train.
SplitResult split_corpus(const Corpus& corpus, const SplitSpec& spec);

}  // namespace toxattr::text
