#pragma once

#include <string>
#include <utility>
#include <vector>

#include "toxattr/autodiff.hpp"
#include "toxattr/model.hpp"
#include "toxattr/tensor.hpp"
#include "toxattr/text.hpp"

namespace toxattr::attribution {

struct AttributionResult {
  std::vector<std::string> tokens;
  std::vector<double> raw_scores;         // embedding-dim-summed integrated gradients
  std::vector<double> normalized_scores;  // raw / max |raw|, in [-1, 1]
  int target_label = 0;
  std::size_t steps = 0;
  std::string baseline_kind;
  double completeness_gap = 0.0;
  double output_delta = 0.0;  // F(input) - F(baseline)
};

struct RankedToken {
  std::string token;
  double score;
  std::size_t position;
};

struct RankedTokens {
  std::vector<RankedToken> items;
};

struct PathIntegral {
  Tensor attributions;  // coordinate-level, same shape as the input leaf
  double output_delta = 0.0;
  double completeness_gap = 0.0;
};

// Midpoint-rule integrated gradients of the graph's scalar output along the
// straight path baseline -> input, scaled by (input - baseline). `fixed`
// binds every leaf except `input_leaf`.
PathIntegral integrate_path(const autodiff::Graph& graph, const autodiff::LeafBindings& fixed,
                            autodiff::NodeId input_leaf, const Tensor& input,
                            const Tensor& baseline, std::size_t steps);

// Divide by max |value|; all-zero stays all-zero.
std::vector<double> normalize_attributions(const std::vector<double>& raw);

// Attribution of the target class's pre-softmax logit w.r.t. the embedded
// input, with a PAD-token-embedding baseline (positional terms cancel).
AttributionResult integrated_gradients(const model::Classifier& classifier,
                                       const std::string& input_text, int target_label,
                                       std::size_t steps);

// Same, over an already-encoded example with display tokens supplied.
AttributionResult integrated_gradients_example(const model::Classifier& classifier,
                                               const text::EncodedExample& example,
                                               const std::vector<std::string>& tokens,
                                               int target_label, std::size_t steps);

// (gap, output_delta) without normalization.
std::pair<double, double> completeness_gap(const model::Classifier& classifier,
                                           const std::string& input_text, int target_label,
                                           std::size_t steps);

// Strictly positive normalized scores, descending; ties by input position.
RankedTokens rank_tokens(const AttributionResult& result);

}  // namespace toxattr::attribution
