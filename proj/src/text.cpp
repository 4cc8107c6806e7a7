#include "toxattr/text.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <stdexcept>
#include <unordered_set>

#include <json.hpp>

#include "toxattr/rng.hpp"

namespace toxattr::text {

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_kept_punct(char c) { return c == '.' || c == ',' || c == '!' || c == '?'; }

bool is_kept(char c) {
  return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || is_space(c) || is_kept_punct(c) ||
         c == '\'';
}

std::string strip_urls(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    if (s.compare(i, 7, "http://") == 0 || s.compare(i, 8, "https://") == 0) {
      while (i < s.size() && !is_space(s[i])) ++i;
      continue;
    }
    out.push_back(s[i]);
    ++i;
  }
  return out;
}

}  // namespace

const char* label_name(Label label) {
  switch (label) {
    case Label::kExplicit: return "explicit";
    case Label::kImplicit: return "implicit";
    case Label::kNone: return "none";
  }
  return "?";
}

bool label_from_string(const std::string& s, Label* out) {
  if (s == "explicit") { *out = Label::kExplicit; return true; }
  if (s == "implicit") { *out = Label::kImplicit; return true; }
  if (s == "none") { *out = Label::kNone; return true; }
  return false;
}

std::string normalize_text(const std::string& raw) {
  std::string lowered;
  lowered.reserve(raw.size());
  for (char c : raw) lowered.push_back(c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a') : c);

  std::string filtered;
  filtered.reserve(lowered.size());
  for (char c : strip_urls(lowered))
    if (is_kept(c)) filtered.push_back(c);

  std::string out;
  out.reserve(filtered.size());
  for (char c : filtered) {
    if (is_space(c)) {
      if (!out.empty() && out.back() != ' ') out.push_back(' ');
    } else {
      out.push_back(c);
    }
  }
  if (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

std::vector<std::string> tokenize(const std::string& normalized) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      tokens.push_back(current);
      current.clear();
    }
  };
  for (char c : normalized) {
    if (is_space(c)) {
      flush();
    } else if (is_kept_punct(c)) {
      flush();
      tokens.push_back(std::string(1, c));
    } else {
      current.push_back(c);
    }
  }
  flush();
  return tokens;
}

Vocabulary build_vocab(const Corpus& corpus, std::size_t min_freq) {
  if (min_freq < 1) throw std::invalid_argument("build_vocab: min_freq must be >= 1");

  std::unordered_map<std::string, std::size_t> freq;
  for (const RawRecord& record : corpus.records)
    for (const std::string& token : tokenize(record.text)) ++freq[token];

  std::vector<std::pair<std::string, std::size_t>> ranked;
  ranked.reserve(freq.size());
  for (auto& [token, count] : freq)
    if (count >= min_freq) ranked.emplace_back(token, count);
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary vocab;
  vocab.id_to_token = {"<pad>", "<unk>"};
  vocab.token_to_id = {{"<pad>", Vocabulary::kPadId}, {"<unk>", Vocabulary::kUnkId}};
  for (auto& [token, count] : ranked) {
    vocab.token_to_id.emplace(token, static_cast<std::uint32_t>(vocab.id_to_token.size()));
    vocab.id_to_token.push_back(token);
  }
  return vocab;
}

EncodedExample encode(const std::vector<std::string>& tokens, const Vocabulary& vocab,
                      std::size_t max_len) {
  if (max_len < 1) throw std::invalid_argument("encode: max_len must be >= 1");
  EncodedExample example;
  example.ids.assign(max_len, Vocabulary::kPadId);
  example.mask.assign(max_len, 0);
  std::size_t n = std::min(tokens.size(), max_len);
  for (std::size_t i = 0; i < n; ++i) {
    example.ids[i] = vocab.lookup(tokens[i]);
    example.mask[i] = 1;
  }
  return example;
}

EncodedExample encode_record(const RawRecord& record, const Vocabulary& vocab,
                             std::size_t max_len) {
  EncodedExample example = encode(tokenize(record.text), vocab, max_len);
  example.label_index = static_cast<int>(record.label);
  return example;
}

Corpus load_corpus(std::istream& in, const std::string& provenance, LoadStats* stats) {
  Corpus corpus;
  corpus.provenance = provenance;
  LoadStats local;
  std::unordered_set<std::string> seen;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;

    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("load_corpus: line " + std::to_string(line_no) +
                               ": malformed record: " + e.what());
    }
    if (!obj.is_object() || !obj.contains("text") || !obj.contains("label") ||
        !obj["text"].is_string() || !obj["label"].is_string()) {
      throw std::runtime_error("load_corpus: line " + std::to_string(line_no) +
                               ": record must be an object with string fields 'text' and 'label'");
    }

    Label label;
    const std::string label_str = obj["label"].get<std::string>();
    if (!label_from_string(label_str, &label)) {
      throw std::runtime_error("load_corpus: line " + std::to_string(line_no) +
                               ": unknown label '" + label_str + "'");
    }

    std::string normalized = normalize_text(obj["text"].get<std::string>());
    if (normalized.empty()) {
      ++local.dropped_empty;
      continue;
    }
    if (!seen.insert(normalized).second) {
      ++local.dropped_duplicate;
      continue;
    }
    corpus.records.push_back({std::move(normalized), label});
    ++local.kept;
  }

  if (stats) *stats = local;
  return corpus;
}

Corpus load_corpus_file(const std::string& path, LoadStats* stats) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_corpus: cannot open " + path);
  return load_corpus(in, path, stats);
}

void save_corpus_file(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_corpus: cannot open " + path);
  for (const RawRecord& record : corpus.records) {
    nlohmann::json obj;
    obj["text"] = record.text;
    obj["label"] = label_name(record.label);
    out << obj.dump() << "\n";
  }
}

SplitResult split_corpus(const Corpus& corpus, const SplitSpec& spec) {
  if (corpus.empty()) throw std::invalid_argument("split_corpus: empty corpus");
  if (spec.train_fraction < 0 || spec.dev_fraction < 0 || spec.test_fraction < 0)
    throw std::invalid_argument("split_corpus: negative fraction");
  double total = spec.train_fraction + spec.dev_fraction + spec.test_fraction;
  if (std::abs(total - 1.0) > 1e-9)
    throw std::invalid_argument("split_corpus: fractions must sum to 1");

  const std::size_t n = corpus.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(spec.seed);
  rng.shuffle(order);

  std::size_t n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * spec.train_fraction));
  std::size_t n_dev = static_cast<std::size_t>(std::floor(static_cast<double>(n) * spec.dev_fraction));
  std::size_t n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * spec.test_fraction));
  n_train += n - (n_train + n_dev + n_test);  // remainder goes to train

  SplitResult result;
  result.train.provenance = corpus.provenance + "#train";
  result.dev.provenance = corpus.provenance + "#dev";
  result.test.provenance = corpus.provenance + "#test";
  for (std::size_t i = 0; i < n; ++i) {
    const RawRecord& record = corpus.records[order[i]];
    if (i < n_train) result.train.records.push_back(record);
    else if (i < n_train + n_dev) result.dev.records.push_back(record);
    else result.test.records.push_back(record);
  }
  return result;
}

}  // namespace toxattr::text
