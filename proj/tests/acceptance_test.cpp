// Acceptance suite: every criterion runs at its pinned tolerance and prints
// one PASS/FAIL line. Exit code is nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "support/gradcheck.hpp"
#include "support/synthetic.hpp"
#include "toxattr/attribution.hpp"
#include "toxattr/model.hpp"
#include "toxattr/rng.hpp"
#include "toxattr/serving.hpp"
#include "toxattr/text.hpp"
#include "toxattr/trainer.hpp"

using namespace toxattr;

namespace {

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool condition, const std::string& message) {
  if (!condition) throw Failure(message);
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// ---------------------------------------------------------------------------
// Shared end-to-end fixture: the synthetic corpus, its 33:33:33 split, and a
// desk-scale model trained on it. Built once; criteria 2, 6, 7 and 9 use it.

struct Fixture {
  text::Corpus corpus;
  text::SplitResult split;
  model::Classifier classifier;
  train::TrainHistory history;
  double first_batch_loss = 0.0;
  double train_seconds = 0.0;
};

const Fixture& fixture() {
  static Fixture fx = [] {
    Fixture f;
    testsupport::SyntheticSpec spec;
    spec.per_label = 400;
    spec.seed = 7;
    f.corpus = testsupport::make_synthetic_corpus(spec);

    text::SplitSpec split_spec;
    split_spec.seed = 42;
    f.split = text::split_corpus(f.corpus, split_spec);

    f.classifier.vocab = text::build_vocab(f.split.train, 1);
    f.classifier.config.vocab_size = static_cast<std::uint32_t>(f.classifier.vocab.size());
    f.classifier.config.d_model = 32;
    f.classifier.config.n_heads = 2;
    f.classifier.config.n_layers = 2;
    f.classifier.config.d_ff = 128;
    f.classifier.config.max_len = 64;
    f.classifier.config.seed = 42;
    f.classifier.params = model::init_model(f.classifier.config);

    // loss of the first training batch at the fresh zero-head model
    {
      std::vector<text::EncodedExample> encoded;
      for (std::size_t i = 0; i < 16; ++i)
        encoded.push_back(text::encode_record(f.split.train.records[i], f.classifier.vocab,
                                              f.classifier.config.max_len));
      std::vector<const text::EncodedExample*> batch;
      for (const auto& e : encoded) batch.push_back(&e);
      model::ForwardGraph fg =
          model::build_loss_graph(f.classifier.config, f.classifier.params, batch);
      autodiff::Evaluator ev(fg.graph);
      f.first_batch_loss = ev.forward(fg.param_bindings);
    }

    train::Hyperparams hp;
    hp.learning_rate = 1e-3;
    hp.batch_size = 16;
    hp.epochs = 5;
    hp.seed = 42;
    auto start = std::chrono::steady_clock::now();
    f.history = train::train(f.classifier, f.split.train, f.split.dev, hp);
    f.train_seconds = seconds_since(start);
    return f;
  }();
  return fx;
}

// ---------------------------------------------------------------------------

void criterion_gradient_correctness() {
  auto start = std::chrono::steady_clock::now();
  auto op_results = testsupport::check_all_primitive_ops(200, 20240601, 1e-5);
  for (const auto& result : op_results)
    require(result.worst_rel_error <= 1e-4,
            result.op + " worst rel error " + std::to_string(result.worst_rel_error));

  model::ModelConfig config;
  config.vocab_size = 16;
  config.d_model = 8;
  config.n_heads = 2;
  config.n_layers = 1;
  config.d_ff = 32;
  config.max_len = 8;
  config.seed = 9;
  double worst = testsupport::check_model_gradients(config, 3, 2024, 1e-5);
  require(worst <= 1e-4, "full-model worst rel error " + std::to_string(worst));

  double elapsed = seconds_since(start);
  require(elapsed < 60.0, "runtime " + std::to_string(elapsed) + " s exceeds 60 s");
}

void criterion_ig_completeness() {
  const Fixture& f = fixture();
  auto start = std::chrono::steady_clock::now();

  Rng rng(2025);
  std::size_t within = 0;
  const std::size_t n = 100;
  for (std::size_t i = 0; i < n; ++i) {
    const text::RawRecord& record =
        f.split.test.records[rng.below(f.split.test.size())];
    model::Prediction prediction = model::predict(f.classifier, record.text);
    attribution::AttributionResult result = attribution::integrated_gradients(
        f.classifier, record.text, static_cast<int>(prediction.label), 128);
    double allowed = std::max(1e-3, 0.01 * std::abs(result.output_delta));
    if (result.completeness_gap <= allowed) ++within;
  }
  require(within >= 99, "only " + std::to_string(within) + "/100 inputs met the gap bound");

  double elapsed = seconds_since(start);
  require(elapsed < 120.0, "runtime " + std::to_string(elapsed) + " s exceeds 120 s");
}

void criterion_ig_linear_exactness() {
  Rng rng(404);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t d = 2 + rng.below(8);
    Tensor w({d, 1});
    for (double& v : w.data) v = rng.uniform(-1.0, 1.0);

    autodiff::Graph g;
    autodiff::NodeId e = g.leaf({1, d}, "e");
    autodiff::NodeId pooled = g.masked_mean_pool(e, {1.0});
    g.set_output(g.select(g.matmul(pooled, g.constant(w)), {0, 0}));

    Tensor x({1, d});
    for (double& v : x.data) v = rng.uniform(-1.0, 1.0);
    Tensor baseline({1, d}, 0.0);

    for (std::size_t m : {std::size_t{1}, std::size_t{4}, std::size_t{64}}) {
      attribution::PathIntegral integral =
          attribution::integrate_path(g, {}, e, x, baseline, m);
      for (std::size_t j = 0; j < d; ++j)
        require(std::abs(integral.attributions.data[j] - x.data[j] * w.data[j]) <= 1e-12,
                "linear attribution deviates at m=" + std::to_string(m));
      require(integral.completeness_gap <= 1e-12, "linear completeness gap too large");
    }
  }
}

void criterion_ig_cubic_quadrature() {
  autodiff::Graph g;
  autodiff::NodeId e = g.leaf({}, "e");
  g.set_output(g.mul(g.mul(e, e), e));
  Tensor x = Tensor::scalar(1.0), baseline = Tensor::scalar(0.0);
  attribution::PathIntegral integral = attribution::integrate_path(g, {}, e, x, baseline, 2);
  require(std::abs(integral.attributions.data[0] - 0.9375) <= 1e-12,
          "cubic midpoint attribution " + std::to_string(integral.attributions.data[0]));
}

void criterion_metrics_oracle() {
  // hand-computed cases
  {
    train::MetricsReport r = train::compute_metrics({0, 1, 2}, {0, 1, 1});
    require(std::abs(r.accuracy - 2.0 / 3.0) <= 1e-12, "hand case 1 accuracy");
    require(std::abs(r.macro_f1 - 5.0 / 9.0) <= 1e-12, "hand case 1 macro F1");
    require(std::abs(r.macro_precision - 0.5) <= 1e-12, "hand case 1 macro precision");
    require(std::abs(r.macro_recall - 2.0 / 3.0) <= 1e-12, "hand case 1 macro recall");
  }
  {
    train::MetricsReport r = train::compute_metrics({0, 1, 2}, {0, 0, 0});
    require(std::abs(r.accuracy - 1.0 / 3.0) <= 1e-12, "hand case 2 accuracy");
    require(std::abs(r.macro_f1 - 1.0 / 6.0) <= 1e-12, "hand case 2 macro F1");
    require(std::abs(r.macro_precision - 1.0 / 9.0) <= 1e-12, "hand case 2 macro precision");
  }

  // brute-force confusion-matrix oracle, fully independent counting
  Rng rng(555);
  for (int rep = 0; rep < 1000; ++rep) {
    std::size_t n = 1 + rng.below(50);
    std::vector<int> y_true(n), y_pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      y_true[i] = static_cast<int>(rng.below(3));
      y_pred[i] = static_cast<int>(rng.below(3));
    }
    train::MetricsReport r = train::compute_metrics(y_true, y_pred);

    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (y_true[i] == y_pred[i]) ++hits;
    require(std::abs(r.accuracy - static_cast<double>(hits) / n) <= 1e-12, "oracle accuracy");

    double macro_p = 0, macro_r = 0, macro_f1 = 0;
    for (int c = 0; c < 3; ++c) {
      std::size_t tp = 0, predicted = 0, actual = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (y_pred[i] == c) ++predicted;
        if (y_true[i] == c) ++actual;
        if (y_pred[i] == c && y_true[i] == c) ++tp;
      }
      double p = predicted == 0 ? 0.0 : double(tp) / predicted;
      double rc = actual == 0 ? 0.0 : double(tp) / actual;
      double f1 = (p + rc) == 0.0 ? 0.0 : 2 * p * rc / (p + rc);
      require(std::abs(r.precision[c] - p) <= 1e-12, "oracle precision");
      require(std::abs(r.recall[c] - rc) <= 1e-12, "oracle recall");
      require(std::abs(r.f1[c] - f1) <= 1e-12, "oracle F1");
      macro_p += p / 3;
      macro_r += rc / 3;
      macro_f1 += f1 / 3;
    }
    require(std::abs(r.macro_precision - macro_p) <= 1e-12, "oracle macro precision");
    require(std::abs(r.macro_recall - macro_r) <= 1e-12, "oracle macro recall");
    require(std::abs(r.macro_f1 - macro_f1) <= 1e-12, "oracle macro F1");
  }
}

void criterion_synthetic_end_to_end() {
  auto start = std::chrono::steady_clock::now();
  const Fixture& f = fixture();

  require(f.corpus.size() == 1200, "corpus size " + std::to_string(f.corpus.size()));
  require(f.split.train.size() == 400 && f.split.dev.size() == 400 && f.split.test.size() == 400,
          "split sizes off");
  require(std::abs(f.first_batch_loss - std::log(3.0)) <= 1e-9,
          "first-batch loss " + std::to_string(f.first_batch_loss));
  require(f.history.train_loss.size() <= 5, "trained for more than 5 epochs");

  train::MetricsReport test_report = train::evaluate(f.classifier, f.split.test);
  std::printf("    test accuracy %.4f, macro F1 %.4f\n", test_report.accuracy,
              test_report.macro_f1);
  require(test_report.accuracy >= 0.95,
          "test accuracy " + std::to_string(test_report.accuracy) + " < 0.95");
  require(test_report.macro_f1 >= 0.95,
          "test macro F1 " + std::to_string(test_report.macro_f1) + " < 0.95");

  // explicit-class attribution: the lexicon token should top the ranking
  std::size_t correct_explicit = 0, lexicon_top = 0;
  for (const text::RawRecord& record : f.split.test.records) {
    if (record.label != text::Label::kExplicit) continue;
    model::Prediction prediction = model::predict(f.classifier, record.text);
    if (prediction.label != text::Label::kExplicit) continue;
    ++correct_explicit;
    attribution::AttributionResult result =
        attribution::integrated_gradients(f.classifier, record.text, 0, 64);
    std::size_t argmax = 0;
    for (std::size_t i = 1; i < result.normalized_scores.size(); ++i)
      if (result.normalized_scores[i] > result.normalized_scores[argmax]) argmax = i;
    if (result.normalized_scores[argmax] > 0.0 &&
        testsupport::is_lexicon_token(result.tokens[argmax]))
      ++lexicon_top;
  }
  require(correct_explicit > 0, "no correctly classified explicit test items");
  double ratio = static_cast<double>(lexicon_top) / static_cast<double>(correct_explicit);
  std::printf("    lexicon-token top attribution: %zu/%zu (%.1f%%)\n", lexicon_top,
              correct_explicit, 100.0 * ratio);
  require(ratio >= 0.80, "lexicon top-attribution ratio " + std::to_string(ratio) + " < 0.80");

  // criterion 6 runs before the other fixture users, so corpus generation and
  // training land inside this window
  double elapsed = seconds_since(start);
  require(elapsed < 300.0, "runtime " + std::to_string(elapsed) + " s exceeds 300 s");
}

void criterion_determinism() {
  testsupport::SyntheticSpec spec;
  spec.per_label = 40;
  spec.seed = 99;
  text::Corpus corpus = testsupport::make_synthetic_corpus(spec);

  auto build_and_train = [&] {
    model::Classifier classifier;
    classifier.vocab = text::build_vocab(corpus, 1);
    classifier.config.vocab_size = static_cast<std::uint32_t>(classifier.vocab.size());
    classifier.config.d_model = 16;
    classifier.config.n_heads = 2;
    classifier.config.n_layers = 1;
    classifier.config.d_ff = 32;
    classifier.config.max_len = 24;
    classifier.config.seed = 5;
    classifier.params = model::init_model(classifier.config);
    train::Hyperparams hp;
    hp.learning_rate = 1e-3;
    hp.batch_size = 12;
    hp.epochs = 2;
    hp.seed = 5;
    train::train(classifier, corpus, corpus, hp);
    return classifier;
  };

  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path();
  std::string path_a = (dir / "toxattr_acceptance_a.ckpt").string();
  std::string path_b = (dir / "toxattr_acceptance_b.ckpt").string();
  model::save_checkpoint(build_and_train(), path_a);
  model::save_checkpoint(build_and_train(), path_b);

  auto slurp = [](const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  require(slurp(path_a) == slurp(path_b), "repeated training is not bit-identical");

  // round-trip: load and re-save reproduces the file byte for byte
  std::string path_c = (dir / "toxattr_acceptance_c.ckpt").string();
  model::save_checkpoint(model::load_checkpoint(path_a), path_c);
  require(slurp(path_a) == slurp(path_c), "checkpoint round-trip is not bit-identical");

  fs::remove(path_a);
  fs::remove(path_b);
  fs::remove(path_c);
}

void criterion_split_contract() {
  Rng rng(808);
  for (int rep = 0; rep < 100; ++rep) {
    std::size_t n = 1 + rng.below(1000);
    text::Corpus corpus;
    for (std::size_t i = 0; i < n; ++i)
      corpus.records.push_back(
          {"record " + std::to_string(i), static_cast<text::Label>(rng.below(3))});

    text::SplitSpec spec;
    spec.seed = rng.next();
    text::SplitResult split = text::split_corpus(corpus, spec);

    std::size_t third = n / 3;
    require(split.dev.size() == third, "dev size");
    require(split.test.size() == third, "test size");
    require(split.train.size() == n - 2 * third, "train size (floor + remainder)");

    std::multiset<std::string> original, unioned;
    for (const auto& r : corpus.records) original.insert(r.text);
    for (const text::Corpus* part : {&split.train, &split.dev, &split.test})
      for (const auto& r : part->records) unioned.insert(r.text);
    require(original == unioned, "split is not an exact partition");
  }
}

void criterion_api_contract() {
  const Fixture& f = fixture();
  auto registry = std::make_shared<serving::ModelRegistry>();
  registry->register_classifier("main", "Synthetic model",
                                std::make_shared<const model::Classifier>(f.classifier));

  serving::ServerConfig config;
  config.host = "127.0.0.1";
  config.port = 0;
  serving::Service service(registry, config);
  service.start();

  httplib::Client client("127.0.0.1", service.port());
  client.set_read_timeout(std::chrono::seconds(120));

  nlohmann::json request = {{"text", "honestly those people are vermin these days"},
                            {"model_id", "main"},
                            {"steps", 64}};
  auto r1 = client.Post("/classify", request.dump(), "application/json");
  auto r2 = client.Post("/classify", request.dump(), "application/json");
  require(r1 && r1->status == 200, "classify request failed");
  require(r2 && r2->status == 200, "second classify request failed");

  nlohmann::json b1 = nlohmann::json::parse(r1->body);
  nlohmann::json b2 = nlohmann::json::parse(r2->body);

  double sum = 0.0;
  std::size_t argmax = 0;
  std::vector<double> probs = b1["probabilities"].get<std::vector<double>>();
  require(probs.size() == 3, "expected 3 probabilities");
  for (std::size_t c = 0; c < 3; ++c) {
    sum += probs[c];
    if (probs[c] > probs[argmax]) argmax = c;
  }
  require(std::abs(sum - 1.0) <= 1e-9, "probabilities sum " + std::to_string(sum));
  require(b1["label"] == text::label_name(static_cast<text::Label>(argmax)),
          "label is not the argmax");
  for (const auto& token : b1["tokens"]) {
    double score = token["score"].get<double>();
    require(score >= -1.0 && score <= 1.0, "token score outside [-1,1]");
  }

  b1.erase("latency_ms");
  b2.erase("latency_ms");
  require(b1.dump() == b2.dump(), "identical requests gave different bodies");

  auto missing = client.Post("/classify", nlohmann::json{{"text", "x"}, {"model_id", "ghost"}}.dump(),
                             "application/json");
  require(missing && missing->status == 404, "unknown model should 404");
  require(nlohmann::json::parse(missing->body)["code"] == "model_not_found",
          "unknown model error code");

  auto empty = client.Post("/classify", nlohmann::json{{"text", ""}, {"model_id", "main"}}.dump(),
                           "application/json");
  require(empty && empty->status == 400, "empty text should 400");
  require(nlohmann::json::parse(empty->body)["code"] == "invalid_text", "empty text error code");

  service.stop();
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    std::function<void()> body;
  };

  // dependency order: cheap standalone checks first, then everything that
  // needs the trained fixture
  std::vector<Criterion> criteria = {
      {1, "gradient correctness (ops + full model, rel err <= 1e-4)", criterion_gradient_correctness},
      {3, "IG exactness on linear models (<= 1e-12, m in {1,4,64})", criterion_ig_linear_exactness},
      {4, "IG quadrature: scalar cubic reproduces 0.9375 at m=2", criterion_ig_cubic_quadrature},
      {5, "metrics match the brute-force oracle exactly", criterion_metrics_oracle},
      {8, "split contract: 33:33:33 sizes and exact partition", criterion_split_contract},
      {6, "synthetic end-to-end: accuracy, ln 3 start, lexicon attribution", criterion_synthetic_end_to_end},
      {2, "IG completeness on the trained model (99/100 at m=128)", criterion_ig_completeness},
      {7, "determinism: bit-identical training and checkpoint round-trip", criterion_determinism},
      {9, "API contract over HTTP", criterion_api_contract},
  };

  struct Outcome {
    int id;
    std::string name;
    bool passed;
    std::string detail;
    double seconds;
  };
  std::vector<Outcome> outcomes;

  for (const Criterion& criterion : criteria) {
    std::printf("running criterion %d: %s\n", criterion.id, criterion.name);
    std::fflush(stdout);
    auto start = std::chrono::steady_clock::now();
    Outcome outcome{criterion.id, criterion.name, true, "", 0.0};
    try {
      criterion.body();
    } catch (const std::exception& e) {
      outcome.passed = false;
      outcome.detail = e.what();
    }
    outcome.seconds = seconds_since(start);
    outcomes.push_back(std::move(outcome));
  }

  std::sort(outcomes.begin(), outcomes.end(),
            [](const Outcome& a, const Outcome& b) { return a.id < b.id; });

  std::printf("\n");
  bool all_passed = true;
  for (const Outcome& outcome : outcomes) {
    std::printf("[%s] criterion %d: %s (%.1f s)%s%s\n", outcome.passed ? "PASS" : "FAIL",
                outcome.id, outcome.name.c_str(), outcome.seconds,
                outcome.passed ? "" : " - ", outcome.detail.c_str());
    all_passed &= outcome.passed;
  }
  return all_passed ? 0 : 1;
}
