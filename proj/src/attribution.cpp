#include "toxattr/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace toxattr::attribution {

namespace ad = toxattr::autodiff;

PathIntegral integrate_path(const ad::Graph& graph, const ad::LeafBindings& fixed,
                            ad::NodeId input_leaf, const Tensor& input, const Tensor& baseline,
                            std::size_t steps) {
  if (steps < 1) throw std::invalid_argument("integrated_gradients: steps must be >= 1");
  if (!input.same_shape(baseline))
    throw std::invalid_argument("integrated_gradients: input and baseline shapes differ");

  Tensor point = input;
  ad::LeafBindings bindings = fixed;
  bindings.emplace_back(input_leaf, &point);

  ad::Evaluator evaluator(graph);
  const double f_input = evaluator.forward(bindings);
  point = baseline;
  const double f_baseline = evaluator.forward(bindings);

  Tensor mean_grad(input.shape);
  const std::size_t n = input.numel();
  for (std::size_t k = 1; k <= steps; ++k) {
    const double alpha = (static_cast<double>(k) - 0.5) / static_cast<double>(steps);
    for (std::size_t i = 0; i < n; ++i)
      point.data[i] = baseline.data[i] + alpha * (input.data[i] - baseline.data[i]);
    ad::EvalResult result = evaluator.run(bindings, {input_leaf});
    const Tensor& grad = result.gradients.at(input_leaf);
    for (std::size_t i = 0; i < n; ++i) mean_grad.data[i] += grad.data[i];
  }

  PathIntegral integral;
  integral.attributions = Tensor(input.shape);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    integral.attributions.data[i] =
        (input.data[i] - baseline.data[i]) * mean_grad.data[i] / static_cast<double>(steps);
    total += integral.attributions.data[i];
  }
  integral.output_delta = f_input - f_baseline;
  integral.completeness_gap = std::abs(total - integral.output_delta);
  return integral;
}

std::vector<double> normalize_attributions(const std::vector<double>& raw) {
  double max_abs = 0.0;
  for (double v : raw) max_abs = std::max(max_abs, std::abs(v));
  std::vector<double> normalized(raw.size(), 0.0);
  if (max_abs == 0.0) return normalized;
  for (std::size_t i = 0; i < raw.size(); ++i) normalized[i] = raw[i] / max_abs;
  return normalized;
}

AttributionResult integrated_gradients_example(const model::Classifier& classifier,
                                               const text::EncodedExample& example,
                                               const std::vector<std::string>& tokens,
                                               int target_label, std::size_t steps) {
  const model::ModelConfig& config = classifier.config;
  if (steps < 1) throw std::invalid_argument("integrated_gradients: steps must be >= 1");
  if (target_label < 0 || target_label >= static_cast<int>(config.n_classes))
    throw std::invalid_argument("integrated_gradients: target label out of range");
  const std::size_t real = example.real_tokens();
  if (real == 0) throw std::invalid_argument("integrated_gradients: empty token sequence");
  if (tokens.size() != real)
    throw std::invalid_argument("integrated_gradients: token list does not match mask");

  model::ForwardGraph fg =
      model::build_embedded_input_graph(config, classifier.params, example.mask);
  fg.graph.set_output(fg.graph.select(fg.logits[0], {0, static_cast<std::uint32_t>(target_label)},
                                      "target_logit"));

  Tensor input = model::embed_example(config, classifier.params, example);
  text::EncodedExample pad_example = example;
  std::fill(pad_example.ids.begin(), pad_example.ids.end(), text::Vocabulary::kPadId);
  Tensor baseline = model::embed_example(config, classifier.params, pad_example);

  PathIntegral integral =
      integrate_path(fg.graph, fg.param_bindings, fg.embedded_input, input, baseline, steps);

  AttributionResult result;
  result.tokens = tokens;
  result.target_label = target_label;
  result.steps = steps;
  result.baseline_kind = "pad-embedding";
  result.output_delta = integral.output_delta;
  result.completeness_gap = integral.completeness_gap;

  const std::size_t d = config.d_model;
  result.raw_scores.resize(real);
  for (std::size_t i = 0; i < real; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) sum += integral.attributions.data[i * d + j];
    result.raw_scores[i] = sum;
  }
  result.normalized_scores = normalize_attributions(result.raw_scores);
  return result;
}

AttributionResult integrated_gradients(const model::Classifier& classifier,
                                       const std::string& input_text, int target_label,
                                       std::size_t steps) {
  std::string normalized = text::normalize_text(input_text);
  if (normalized.empty())
    throw std::invalid_argument("integrated_gradients: empty token sequence");
  std::vector<std::string> tokens = text::tokenize(normalized);
  if (tokens.size() > classifier.config.max_len) tokens.resize(classifier.config.max_len);
  text::EncodedExample example =
      text::encode(tokens, classifier.vocab, classifier.config.max_len);
  return integrated_gradients_example(classifier, example, tokens, target_label, steps);
}

std::pair<double, double> completeness_gap(const model::Classifier& classifier,
                                           const std::string& input_text, int target_label,
                                           std::size_t steps) {
  AttributionResult result = integrated_gradients(classifier, input_text, target_label, steps);
  return {result.completeness_gap, result.output_delta};
}

RankedTokens rank_tokens(const AttributionResult& result) {
  RankedTokens ranked;
  for (std::size_t i = 0; i < result.tokens.size(); ++i)
    if (result.normalized_scores[i] > 0.0)
      ranked.items.push_back({result.tokens[i], result.normalized_scores[i], i});
  std::stable_sort(ranked.items.begin(), ranked.items.end(),
                   [](const RankedToken& a, const RankedToken& b) {
                     if (a.score != b.score) return a.score > b.score;
                     return a.position < b.position;
                   });
  return ranked;
}

}  // namespace toxattr::attribution
