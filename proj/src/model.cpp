#include "toxattr/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "toxattr/rng.hpp"

namespace toxattr::model {

namespace ad = toxattr::autodiff;

namespace {

constexpr double kLayerNormEpsilon = 1e-5;
constexpr double kMaskBias = -1e9;

bool is_prefix_mask(const std::vector<std::uint8_t>& mask) {
  bool seen_zero = false;
  for (auto m : mask) {
    if (m != 0 && m != 1) return false;
    if (m == 0) seen_zero = true;
    else if (seen_zero) return false;
  }
  return true;
}

void check_example(const ModelConfig& config, const text::EncodedExample& example) {
  if (example.ids.size() != config.max_len || example.mask.size() != config.max_len)
    throw std::invalid_argument("forward: example length does not match max_len");
  if (!is_prefix_mask(example.mask))
    throw std::invalid_argument("forward: mask is not a prefix of 1s");
  for (std::uint32_t id : example.ids)
    if (id >= config.vocab_size)
      throw std::invalid_argument("forward: token id " + std::to_string(id) + " out of vocabulary");
  if (example.real_tokens() == 0) throw std::invalid_argument("forward: empty input");
}

struct LayerLeaves {
  ad::NodeId wq, bq, wk, bk, wv, bv, wo, bo;
  ad::NodeId w1, b1, w2, b2;
  ad::NodeId ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
};

struct ParamLeaves {
  ad::NodeId tok_embedding, pos_embedding;
  std::vector<LayerLeaves> layers;
  ad::NodeId head_w, head_b;
};

ParamLeaves make_param_leaves(ad::Graph& graph, const ModelParams& params, ForwardGraph& out) {
  ParamLeaves leaves;
  leaves.layers.resize(params.layers.size());
  std::size_t layer_slot = 0;

  for_each_tensor(params, [&](const std::string& name, const Tensor& tensor) {
    ad::NodeId id = graph.leaf(tensor.shape, name);
    out.param_bindings.emplace_back(id, &tensor);
    out.param_leaves.emplace_back(name, id);

    if (name == "tok_embedding") leaves.tok_embedding = id;
    else if (name == "pos_embedding") leaves.pos_embedding = id;
    else if (name == "head_w") leaves.head_w = id;
    else if (name == "head_b") leaves.head_b = id;
    else {
      LayerLeaves& layer = leaves.layers[layer_slot];
      std::string field = name.substr(name.find('.') + 1);
      if (field == "wq") layer.wq = id;
      else if (field == "bq") layer.bq = id;
      else if (field == "wk") layer.wk = id;
      else if (field == "bk") layer.bk = id;
      else if (field == "wv") layer.wv = id;
      else if (field == "bv") layer.bv = id;
      else if (field == "wo") layer.wo = id;
      else if (field == "bo") layer.bo = id;
      else if (field == "w1") layer.w1 = id;
      else if (field == "b1") layer.b1 = id;
      else if (field == "w2") layer.w2 = id;
      else if (field == "b2") layer.b2 = id;
      else if (field == "ln1_gamma") layer.ln1_gamma = id;
      else if (field == "ln1_beta") layer.ln1_beta = id;
      else if (field == "ln2_gamma") layer.ln2_gamma = id;
      else if (field == "ln2_beta") {
        layer.ln2_beta = id;
        ++layer_slot;
      }
    }
  });
  return leaves;
}

// Shared per-graph constants for one mask pattern.
struct MaskConstants {
  ad::NodeId attn_bias;  // [M,M]: 0 on real key columns, -1e9 on padded ones
  ad::NodeId attn_scale; // [M,M] filled with 1/sqrt(d_head)
  std::vector<double> pool_mask;
};

MaskConstants make_mask_constants(ad::Graph& graph, const ModelConfig& config,
                                  const std::vector<std::uint8_t>& mask) {
  const std::size_t m = config.max_len;
  MaskConstants constants;
  Tensor bias({m, m}, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      if (mask[j] == 0) bias.at(i, j) = kMaskBias;
  constants.attn_bias = graph.constant(std::move(bias), "attn_mask_bias");

  double scale = 1.0 / std::sqrt(static_cast<double>(config.d_model / config.n_heads));
  constants.attn_scale = graph.constant(Tensor({m, m}, scale), "attn_scale");

  constants.pool_mask.assign(mask.begin(), mask.end());
  return constants;
}

// Encoder stack from the embedded sequence to the [1,C] logits node.
ad::NodeId build_encoder(ad::Graph& graph, const ModelConfig& config, const ParamLeaves& leaves,
                         ad::NodeId embedded, const MaskConstants& constants,
                         const std::string& tag) {
  const std::size_t d_head = config.d_model / config.n_heads;
  ad::NodeId x = embedded;

  for (std::size_t l = 0; l < leaves.layers.size(); ++l) {
    const LayerLeaves& layer = leaves.layers[l];
    const std::string p = tag + "layer" + std::to_string(l) + ".";

    ad::NodeId q = graph.add_bias(graph.matmul(x, layer.wq, false, false, p + "q_proj"), layer.bq);
    ad::NodeId k = graph.add_bias(graph.matmul(x, layer.wk, false, false, p + "k_proj"), layer.bk);
    ad::NodeId v = graph.add_bias(graph.matmul(x, layer.wv, false, false, p + "v_proj"), layer.bv);

    std::vector<ad::NodeId> heads;
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      std::size_t lo = h * d_head, hi = (h + 1) * d_head;
      ad::NodeId qh = graph.slice_cols(q, lo, hi);
      ad::NodeId kh = graph.slice_cols(k, lo, hi);
      ad::NodeId vh = graph.slice_cols(v, lo, hi);
      ad::NodeId scores = graph.matmul(qh, kh, false, true, p + "scores_h" + std::to_string(h));
      ad::NodeId scaled = graph.mul(scores, constants.attn_scale);
      ad::NodeId masked = graph.add(scaled, constants.attn_bias);
      ad::NodeId weights = graph.softmax(masked, p + "attn_h" + std::to_string(h));
      heads.push_back(graph.matmul(weights, vh));
    }
    ad::NodeId concat = graph.concat_cols(heads, p + "heads");
    ad::NodeId attn_out = graph.add_bias(graph.matmul(concat, layer.wo, false, false, p + "o_proj"),
                                         layer.bo);
    x = graph.layer_norm(graph.add(x, attn_out), layer.ln1_gamma, layer.ln1_beta,
                         kLayerNormEpsilon, p + "ln1");

    ad::NodeId hidden = graph.relu(
        graph.add_bias(graph.matmul(x, layer.w1, false, false, p + "ff1"), layer.b1));
    ad::NodeId ff_out = graph.add_bias(graph.matmul(hidden, layer.w2, false, false, p + "ff2"),
                                       layer.b2);
    x = graph.layer_norm(graph.add(x, ff_out), layer.ln2_gamma, layer.ln2_beta,
                         kLayerNormEpsilon, p + "ln2");
  }

  ad::NodeId pooled = graph.masked_mean_pool(x, constants.pool_mask, tag + "pool");
  return graph.add_bias(graph.matmul(pooled, leaves.head_w, false, false, tag + "head"),
                        leaves.head_b);
}

ad::NodeId build_embedded_from_ids(ad::Graph& graph, const ParamLeaves& leaves,
                                   const text::EncodedExample& example, const std::string& tag) {
  ad::NodeId tok = graph.embedding_gather(leaves.tok_embedding, example.ids, tag + "tok_embed");
  return graph.add(tok, leaves.pos_embedding, tag + "embed");
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("config: vocab_size must be >= 2 (PAD and UNK)");
  if (d_model < 1 || n_heads < 1 || n_layers < 1 || d_ff < 1 || max_len < 1)
    throw std::invalid_argument("config: all dimensions must be >= 1");
  if (d_model % n_heads != 0)
    throw std::invalid_argument("config: d_model (" + std::to_string(d_model) +
                                ") not divisible by n_heads (" + std::to_string(n_heads) + ")");
  if (n_classes != 3) throw std::invalid_argument("config: n_classes must be 3");
}

std::size_t parameter_count(const ModelParams& params) {
  std::size_t total = 0;
  for_each_tensor(params, [&](const std::string&, const Tensor& t) { total += t.numel(); });
  return total;
}

ModelParams init_model(const ModelConfig& config) {
  config.validate();
  const std::size_t v = config.vocab_size, d = config.d_model, f = config.d_ff,
                    m = config.max_len, c = config.n_classes;

  ModelParams params;
  params.tok_embedding = Tensor({v, d});
  params.pos_embedding = Tensor({m, d});
  params.layers.resize(config.n_layers);
  for (LayerParams& layer : params.layers) {
    layer.wq = Tensor({d, d});
    layer.bq = Tensor({d});
    layer.wk = Tensor({d, d});
    layer.bk = Tensor({d});
    layer.wv = Tensor({d, d});
    layer.bv = Tensor({d});
    layer.wo = Tensor({d, d});
    layer.bo = Tensor({d});
    layer.w1 = Tensor({d, f});
    layer.b1 = Tensor({f});
    layer.w2 = Tensor({f, d});
    layer.b2 = Tensor({d});
    layer.ln1_gamma = Tensor({d}, 1.0);
    layer.ln1_beta = Tensor({d});
    layer.ln2_gamma = Tensor({d}, 1.0);
    layer.ln2_beta = Tensor({d});
  }
  params.head_w = Tensor({d, c});
  params.head_b = Tensor({c});

  Rng rng(config.seed);
  for_each_tensor(params, [&](const std::string& name, Tensor& tensor) {
    bool is_weight = name == "tok_embedding" || name == "pos_embedding" ||
                     name.ends_with(".wq") || name.ends_with(".wk") || name.ends_with(".wv") ||
                     name.ends_with(".wo") || name.ends_with(".w1") || name.ends_with(".w2");
    if (is_weight)
      for (double& value : tensor.data) value = rng.uniform(-0.05, 0.05);
  });
  return params;
}

ForwardGraph build_classify_graph(const ModelConfig& config, const ModelParams& params,
                                  const text::EncodedExample& example) {
  config.validate();
  check_example(config, example);

  ForwardGraph out;
  ParamLeaves leaves = make_param_leaves(out.graph, params, out);
  MaskConstants constants = make_mask_constants(out.graph, config, example.mask);
  ad::NodeId embedded = build_embedded_from_ids(out.graph, leaves, example, "");
  ad::NodeId logits = build_encoder(out.graph, config, leaves, embedded, constants, "");
  out.logits.push_back(logits);
  out.graph.set_output(out.graph.select(logits, {0, 0}, "logit0"));
  return out;
}

ForwardGraph build_loss_graph(const ModelConfig& config, const ModelParams& params,
                              const std::vector<const text::EncodedExample*>& batch) {
  config.validate();
  if (batch.empty()) throw std::invalid_argument("build_loss_graph: empty batch");

  ForwardGraph out;
  ParamLeaves leaves = make_param_leaves(out.graph, params, out);

  std::vector<ad::NodeId> losses;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const text::EncodedExample& example = *batch[i];
    check_example(config, example);
    if (example.label_index < 0 || example.label_index >= static_cast<int>(config.n_classes))
      throw std::invalid_argument("build_loss_graph: example " + std::to_string(i) +
                                  " has no valid label");
    const std::string tag = "ex" + std::to_string(i) + ".";
    MaskConstants constants = make_mask_constants(out.graph, config, example.mask);
    ad::NodeId embedded = build_embedded_from_ids(out.graph, leaves, example, tag);
    ad::NodeId logits = build_encoder(out.graph, config, leaves, embedded, constants, tag);
    out.logits.push_back(logits);
    losses.push_back(out.graph.softmax_cross_entropy(
        logits, static_cast<std::uint32_t>(example.label_index), tag + "loss"));
  }

  ad::NodeId sum = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i) sum = out.graph.add(sum, losses[i]);
  ad::NodeId mean = out.graph.mul(
      sum, out.graph.constant(Tensor::scalar(1.0 / static_cast<double>(losses.size()))),
      "batch_mean_loss");
  out.loss = mean;
  out.graph.set_output(mean);
  return out;
}

ForwardGraph build_embedded_input_graph(const ModelConfig& config, const ModelParams& params,
                                        const std::vector<std::uint8_t>& mask) {
  config.validate();
  if (mask.size() != config.max_len)
    throw std::invalid_argument("build_embedded_input_graph: mask length mismatch");
  if (!is_prefix_mask(mask))
    throw std::invalid_argument("build_embedded_input_graph: mask is not a prefix of 1s");

  ForwardGraph out;
  ParamLeaves leaves = make_param_leaves(out.graph, params, out);
  MaskConstants constants = make_mask_constants(out.graph, config, mask);
  out.embedded_input = out.graph.leaf({config.max_len, config.d_model}, "embedded_input");
  ad::NodeId logits = build_encoder(out.graph, config, leaves, out.embedded_input, constants, "");
  out.logits.push_back(logits);
  out.graph.set_output(out.graph.select(logits, {0, 0}, "logit0"));
  return out;
}

Tensor embed_example(const ModelConfig& config, const ModelParams& params,
                     const text::EncodedExample& example) {
  const std::size_t m = config.max_len, d = config.d_model;
  if (example.ids.size() != m) throw std::invalid_argument("embed_example: length mismatch");
  Tensor embedded({m, d});
  for (std::size_t i = 0; i < m; ++i) {
    const double* tok = params.tok_embedding.data.data() + example.ids[i] * d;
    const double* pos = params.pos_embedding.data.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) embedded.data[i * d + j] = tok[j] + pos[j];
  }
  return embedded;
}

std::vector<double> forward(const ModelConfig& config, const ModelParams& params,
                            const text::EncodedExample& example) {
  ForwardGraph fg = build_classify_graph(config, params, example);
  ad::Evaluator evaluator(fg.graph);
  evaluator.forward(fg.param_bindings);
  const Tensor& logits = evaluator.value(fg.logits[0]);
  return logits.data;
}

Decision decide(const std::vector<double>& logits) {
  Decision decision;
  decision.probabilities.resize(logits.size());
  double max_logit = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    decision.probabilities[i] = std::exp(logits[i] - max_logit);
    sum += decision.probabilities[i];
  }
  for (double& p : decision.probabilities) p /= sum;
  decision.label_index = 0;
  for (std::size_t i = 1; i < decision.probabilities.size(); ++i)
    if (decision.probabilities[i] > decision.probabilities[decision.label_index])
      decision.label_index = static_cast<int>(i);
  decision.confidence = decision.probabilities[decision.label_index];
  return decision;
}

Prediction predict(const Classifier& classifier, const std::string& input_text) {
  std::string normalized = text::normalize_text(input_text);
  if (normalized.empty()) throw std::invalid_argument("predict: empty input");
  std::vector<std::string> tokens = text::tokenize(normalized);
  if (tokens.size() > classifier.config.max_len) tokens.resize(classifier.config.max_len);

  text::EncodedExample example = text::encode(tokens, classifier.vocab, classifier.config.max_len);
  std::vector<double> logits = forward(classifier.config, classifier.params, example);
  Decision decision = decide(logits);

  Prediction prediction;
  prediction.label = static_cast<text::Label>(decision.label_index);
  prediction.confidence = decision.confidence;
  prediction.probabilities = std::move(decision.probabilities);
  prediction.tokens = std::move(tokens);
  return prediction;
}

// --------------------------------------------------------------------------
// Checkpoint format (little-endian):
//   magic "TXAT" | version u32 | vocab_size u32 | d_model u32 | n_heads u32 |
//   n_layers u32 | d_ff u32 | max_len u32 | n_classes u32 | seed u64 |
//   label count u32, each label length-prefixed (u32) UTF-8 |
//   token count u64, each token length-prefixed (u32) UTF-8, in id order |
//   payload count u64, then raw doubles in canonical tensor order.

namespace {

constexpr char kMagic[4] = {'T', 'X', 'A', 'T'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 4);
  }
  void u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 8);
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void close() {
    out_.close();
    if (!out_) throw std::runtime_error("checkpoint: write failed");
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("checkpoint: cannot open " + path);
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw std::runtime_error("checkpoint: truncated or corrupt payload at byte offset " +
                               std::to_string(offset_ + static_cast<std::size_t>(in_.gcount())));
    offset_ += n;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint64_t u64() {
    unsigned char b[8];
    bytes(b, 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    std::uint32_t n = u32();
    std::string s(n, '\0');
    if (n > 0) bytes(s.data(), n);
    return s;
  }
  std::size_t offset() const { return offset_; }
  bool at_eof() {
    in_.peek();
    return in_.eof();
  }

 private:
  std::ifstream in_;
  std::size_t offset_ = 0;
};

}  // namespace

void save_checkpoint(const Classifier& classifier, const std::string& path) {
  const ModelConfig& config = classifier.config;
  if (classifier.vocab.size() != config.vocab_size)
    throw std::invalid_argument("checkpoint: vocabulary size does not match config");

  Writer w(path);
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.u32(config.vocab_size);
  w.u32(config.d_model);
  w.u32(config.n_heads);
  w.u32(config.n_layers);
  w.u32(config.d_ff);
  w.u32(config.max_len);
  w.u32(config.n_classes);
  w.u64(config.seed);

  w.u32(text::kNumLabels);
  for (int i = 0; i < text::kNumLabels; ++i)
    w.str(text::label_name(static_cast<text::Label>(i)));

  w.u64(classifier.vocab.size());
  for (const std::string& token : classifier.vocab.id_to_token) w.str(token);

  std::uint64_t payload = parameter_count(classifier.params);
  w.u64(payload);
  for_each_tensor(classifier.params, [&](const std::string&, const Tensor& tensor) {
    for (double v : tensor.data) w.f64(v);
  });
  w.close();
}

Classifier load_checkpoint(const std::string& path) {
  Reader r(path);

  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic, not a checkpoint file");
  std::uint32_t version = r.u32();
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                             " (expected " + std::to_string(kVersion) + ")");

  Classifier classifier;
  ModelConfig& config = classifier.config;
  config.vocab_size = r.u32();
  config.d_model = r.u32();
  config.n_heads = r.u32();
  config.n_layers = r.u32();
  config.d_ff = r.u32();
  config.max_len = r.u32();
  config.n_classes = r.u32();
  config.seed = r.u64();
  config.validate();

  std::uint32_t label_count = r.u32();
  if (label_count != text::kNumLabels)
    throw std::runtime_error("checkpoint: unexpected label count " + std::to_string(label_count));
  for (int i = 0; i < text::kNumLabels; ++i) {
    std::string name = r.str();
    if (name != text::label_name(static_cast<text::Label>(i)))
      throw std::runtime_error("checkpoint: label mapping mismatch at index " + std::to_string(i) +
                               ": '" + name + "'");
  }

  std::uint64_t token_count = r.u64();
  if (token_count != config.vocab_size)
    throw std::runtime_error("checkpoint: vocabulary size " + std::to_string(token_count) +
                             " does not match config " + std::to_string(config.vocab_size));
  classifier.vocab.id_to_token.reserve(token_count);
  for (std::uint64_t i = 0; i < token_count; ++i) {
    std::string token = r.str();
    classifier.vocab.token_to_id.emplace(token, static_cast<std::uint32_t>(i));
    classifier.vocab.id_to_token.push_back(std::move(token));
  }

  // Shape the parameter tensors, then fill from the payload.
  ModelConfig shaped = config;
  classifier.params = init_model(shaped);
  std::uint64_t payload = r.u64();
  if (payload != parameter_count(classifier.params))
    throw std::runtime_error("checkpoint: payload count " + std::to_string(payload) +
                             " does not match model shape (" +
                             std::to_string(parameter_count(classifier.params)) + ")");
  for_each_tensor(classifier.params, [&](const std::string&, Tensor& tensor) {
    for (double& v : tensor.data) v = r.f64();
  });
  if (!r.at_eof())
    throw std::runtime_error("checkpoint: trailing bytes at offset " + std::to_string(r.offset()));
  return classifier;
}

}  // namespace toxattr::model
