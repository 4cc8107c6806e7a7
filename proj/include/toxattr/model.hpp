#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "toxattr/autodiff.hpp"
#include "toxattr/tensor.hpp"
#include "toxattr/text.hpp"

namespace toxattr::model {

struct ModelConfig {
  std::uint32_t vocab_size = 0;
  std::uint32_t d_model = 32;
  std::uint32_t n_heads = 2;
  std::uint32_t n_layers = 2;
  std::uint32_t d_ff = 128;
  std::uint32_t max_len = 64;
  std::uint32_t n_classes = 3;
  std::uint64_t seed = 0;

  void validate() const;
};

struct LayerParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor w1, b1, w2, b2;
  Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
};

struct ModelParams {
  Tensor tok_embedding;  // V x d
  Tensor pos_embedding;  // M x d
  std::vector<LayerParams> layers;
  Tensor head_w;  // d x C
  Tensor head_b;  // C
};

// Canonical tensor order; also the checkpoint payload order.
template <typename Params, typename Fn>
void for_each_tensor(Params& params, Fn&& fn) {
  fn("tok_embedding", params.tok_embedding);
  fn("pos_embedding", params.pos_embedding);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& layer = params.layers[l];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    fn(prefix + "wq", layer.wq);
    fn(prefix + "bq", layer.bq);
    fn(prefix + "wk", layer.wk);
    fn(prefix + "bk", layer.bk);
    fn(prefix + "wv", layer.wv);
    fn(prefix + "bv", layer.bv);
    fn(prefix + "wo", layer.wo);
    fn(prefix + "bo", layer.bo);
    fn(prefix + "w1", layer.w1);
    fn(prefix + "b1", layer.b1);
    fn(prefix + "w2", layer.w2);
    fn(prefix + "b2", layer.b2);
    fn(prefix + "ln1_gamma", layer.ln1_gamma);
    fn(prefix + "ln1_beta", layer.ln1_beta);
    fn(prefix + "ln2_gamma", layer.ln2_gamma);
    fn(prefix + "ln2_beta", layer.ln2_beta);
  }
  fn("head_w", params.head_w);
  fn("head_b", params.head_b);
}

std::size_t parameter_count(const ModelParams& params);

// Weight matrices uniform(-0.05, 0.05) from a seeded mt19937_64 in canonical
// order; biases and the classifier head zero; layer-norm scales one.
ModelParams init_model(const ModelConfig& config);

// A loaded model: everything inference needs.
struct Classifier {
  ModelConfig config;
  ModelParams params;
  text::Vocabulary vocab;
};

// Recorded forward pass plus the leaf bookkeeping needed to bind parameters
// and (for training / attribution) to ask for gradients.
struct ForwardGraph {
  autodiff::Graph graph;
  autodiff::LeafBindings param_bindings;
  std::vector<std::pair<std::string, autodiff::NodeId>> param_leaves;
  std::vector<autodiff::NodeId> logits;  // one [1,C] node per example
  autodiff::NodeId loss = 0;             // loss-mode graphs only
  autodiff::NodeId embedded_input = 0;   // embedded-input graphs only
};

// Classification graph for one encoded example (embeddings looked up from ids).
ForwardGraph build_classify_graph(const ModelConfig& config, const ModelParams& params,
                                  const text::EncodedExample& example);

// Mean cross-entropy over a batch; examples must carry label_index.
ForwardGraph build_loss_graph(const ModelConfig& config, const ModelParams& params,
                              const std::vector<const text::EncodedExample*>& batch);

// Forward pass whose input is the already-embedded sequence (a bindable
// [max_len, d_model] leaf); gradients w.r.t. it drive integrated gradients.
ForwardGraph build_embedded_input_graph(const ModelConfig& config, const ModelParams& params,
                                        const std::vector<std::uint8_t>& mask);

// Token + positional embedding of an example, as the embedded-input leaf
// expects it. PAD id at every real position gives the attribution baseline.
Tensor embed_example(const ModelConfig& config, const ModelParams& params,
                     const text::EncodedExample& example);

std::vector<double> forward(const ModelConfig& config, const ModelParams& params,
                            const text::EncodedExample& example);

struct Decision {
  int label_index = 0;
  double confidence = 0.0;
  std::vector<double> probabilities;
};

// Softmax + argmax with ties resolved to the lowest label index.
Decision decide(const std::vector<double>& logits);

struct Prediction {
  text::Label label;
  double confidence;
  std::vector<double> probabilities;
  std::vector<std::string> tokens;  // display tokens (truncated to max_len)
};

Prediction predict(const Classifier& classifier, const std::string& input_text);

void save_checkpoint(const Classifier& classifier, const std::string& path);
Classifier load_checkpoint(const std::string& path);

}  // namespace toxattr::model
