#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "toxattr/model.hpp"
#include "toxattr/text.hpp"

namespace toxattr::train {

struct Hyperparams {
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t epochs = 5;
  std::uint64_t seed = 42;
};

struct MetricsReport {
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::array<double, 3> precision{};
  std::array<double, 3> recall{};
  std::array<double, 3> f1{};
  std::array<std::array<std::size_t, 3>, 3> confusion{};  // [true][predicted]
  std::size_t total = 0;
};

struct TrainHistory {
  std::vector<double> train_loss;            // per-epoch mean over examples
  std::vector<MetricsReport> dev_metrics;    // per-epoch
  double wall_seconds = 0.0;
};

struct GridSpec {
  std::vector<double> learning_rates{1e-5, 2e-5, 3e-5};
  std::vector<std::size_t> batch_sizes{16, 32, 64};
  std::vector<std::size_t> epoch_counts{3, 4, 5};
};

struct GridPointResult {
  Hyperparams hyperparams;
  MetricsReport dev_report;
};

struct GridSearchResult {
  Hyperparams best;
  std::vector<GridPointResult> reports;
};

// Adam (beta1 0.9, beta2 0.999, eps 1e-8) over mean cross-entropy batches.
// Deterministic under hp.seed; mutates classifier.params in place.
TrainHistory train(model::Classifier& classifier, const text::Corpus& train_corpus,
                   const text::Corpus& dev_corpus, const Hyperparams& hp);

// Per-class precision/recall/F1 with zero conventions: precision 0 when a
// class is never predicted, recall 0 when it never occurs, F1 0 when P+R=0.
// Macro values are unweighted class means.
MetricsReport compute_metrics(const std::vector<int>& y_true, const std::vector<int>& y_pred);

MetricsReport evaluate(const model::Classifier& classifier, const text::Corpus& corpus);

// Index of the winning report: max dev macro F1, ties broken by smaller
// learning rate, then smaller batch, then fewer epochs.
std::size_t select_best(const std::vector<GridPointResult>& reports);

// One fresh model per grid point (factory must reinitialize), same seed
// everywhere so only the hyperparameters vary.
GridSearchResult grid_search(const std::function<model::Classifier()>& factory,
                             const text::Corpus& train_corpus, const text::Corpus& dev_corpus,
                             const GridSpec& grid, std::uint64_t seed);

// Table-shaped report object: name, f1, precision, recall, accuracy,
// per_class, confusion.
std::string metrics_report_json(const std::string& name, const MetricsReport& report);

}  // namespace toxattr::train
