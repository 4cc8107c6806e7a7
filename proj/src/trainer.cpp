#include "toxattr/trainer.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "toxattr/rng.hpp"

namespace toxattr::train {

namespace ad = toxattr::autodiff;

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEpsilon = 1e-8;

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;
};

}  // namespace

TrainHistory train(model::Classifier& classifier, const text::Corpus& train_corpus,
                   const text::Corpus& dev_corpus, const Hyperparams& hp) {
  if (train_corpus.empty() || dev_corpus.empty())
    throw std::invalid_argument("train: corpora must be non-empty");
  if (hp.batch_size < 1 || hp.epochs < 1 || hp.learning_rate <= 0.0)
    throw std::invalid_argument("train: invalid hyperparameters");
  if (hp.batch_size > train_corpus.size())
    throw std::invalid_argument("train: batch_size " + std::to_string(hp.batch_size) +
                                " exceeds corpus size " + std::to_string(train_corpus.size()));

  const auto start = std::chrono::steady_clock::now();

  std::vector<text::EncodedExample> encoded;
  encoded.reserve(train_corpus.size());
  for (const text::RawRecord& record : train_corpus.records)
    encoded.push_back(text::encode_record(record, classifier.vocab, classifier.config.max_len));

  // Adam slots in canonical tensor order, matching param_leaves order.
  AdamState adam;
  model::for_each_tensor(classifier.params, [&](const std::string&, Tensor& tensor) {
    adam.m.emplace_back(tensor.shape);
    adam.v.emplace_back(tensor.shape);
  });

  TrainHistory history;
  Rng rng(hp.seed);
  std::vector<std::size_t> order(encoded.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;

    for (std::size_t begin = 0, batch_index = 0; begin < order.size();
         begin += hp.batch_size, ++batch_index) {
      std::size_t end = std::min(begin + hp.batch_size, order.size());
      std::vector<const text::EncodedExample*> batch;
      batch.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i) batch.push_back(&encoded[order[i]]);

      model::ForwardGraph fg =
          model::build_loss_graph(classifier.config, classifier.params, batch);
      std::vector<ad::NodeId> wrt;
      wrt.reserve(fg.param_leaves.size());
      for (const auto& [name, id] : fg.param_leaves) wrt.push_back(id);

      ad::EvalResult result;
      try {
        result = ad::evaluate_with_gradient(fg.graph, fg.param_bindings, wrt);
      } catch (const std::runtime_error& e) {
        throw std::runtime_error("train: divergence at epoch " + std::to_string(epoch + 1) +
                                 ", batch " + std::to_string(batch_index + 1) + ": " + e.what());
      }
      if (!std::isfinite(result.output))
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch + 1) +
                                 ", batch " + std::to_string(batch_index + 1));
      loss_sum += result.output * static_cast<double>(end - begin);

      ++adam.step;
      const double bias1 = 1.0 - std::pow(kBeta1, static_cast<double>(adam.step));
      const double bias2 = 1.0 - std::pow(kBeta2, static_cast<double>(adam.step));
      std::size_t slot = 0;
      model::for_each_tensor(classifier.params, [&](const std::string&, Tensor& tensor) {
        const Tensor& grad = result.gradients.at(fg.param_leaves[slot].second);
        Tensor& m = adam.m[slot];
        Tensor& v = adam.v[slot];
        for (std::size_t i = 0; i < tensor.data.size(); ++i) {
          const double g = grad.data[i];
          m.data[i] = kBeta1 * m.data[i] + (1.0 - kBeta1) * g;
          v.data[i] = kBeta2 * v.data[i] + (1.0 - kBeta2) * g * g;
          const double mhat = m.data[i] / bias1;
          const double vhat = v.data[i] / bias2;
          tensor.data[i] -= hp.learning_rate * mhat / (std::sqrt(vhat) + kAdamEpsilon);
        }
        ++slot;
      });
    }

    history.train_loss.push_back(loss_sum / static_cast<double>(encoded.size()));
    history.dev_metrics.push_back(evaluate(classifier, dev_corpus));
  }

  history.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return history;
}

MetricsReport compute_metrics(const std::vector<int>& y_true, const std::vector<int>& y_pred) {
  if (y_true.size() != y_pred.size())
    throw std::invalid_argument("compute_metrics: length mismatch (" +
                                std::to_string(y_true.size()) + " vs " +
                                std::to_string(y_pred.size()) + ")");
  if (y_true.empty()) throw std::invalid_argument("compute_metrics: empty input");

  MetricsReport report;
  report.total = y_true.size();
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i] < 0 || y_true[i] > 2 || y_pred[i] < 0 || y_pred[i] > 2)
      throw std::invalid_argument("compute_metrics: label outside {0,1,2} at index " +
                                  std::to_string(i));
    ++report.confusion[y_true[i]][y_pred[i]];
  }

  std::size_t correct = 0;
  for (int c = 0; c < 3; ++c) correct += report.confusion[c][c];
  report.accuracy = static_cast<double>(correct) / static_cast<double>(report.total);

  for (int c = 0; c < 3; ++c) {
    std::size_t tp = report.confusion[c][c];
    std::size_t fp = 0, fn = 0;
    for (int o = 0; o < 3; ++o) {
      if (o == c) continue;
      fp += report.confusion[o][c];
      fn += report.confusion[c][o];
    }
    report.precision[c] = (tp + fp) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    report.recall[c] = (tp + fn) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
    double pr = report.precision[c] + report.recall[c];
    report.f1[c] = pr == 0.0 ? 0.0 : 2.0 * report.precision[c] * report.recall[c] / pr;
    report.macro_precision += report.precision[c] / 3.0;
    report.macro_recall += report.recall[c] / 3.0;
    report.macro_f1 += report.f1[c] / 3.0;
  }
  return report;
}

MetricsReport evaluate(const model::Classifier& classifier, const text::Corpus& corpus) {
  if (corpus.empty()) throw std::invalid_argument("evaluate: empty corpus");
  std::vector<int> y_true, y_pred;
  y_true.reserve(corpus.size());
  y_pred.reserve(corpus.size());
  for (const text::RawRecord& record : corpus.records) {
    y_true.push_back(static_cast<int>(record.label));
    model::Prediction prediction = model::predict(classifier, record.text);
    y_pred.push_back(static_cast<int>(prediction.label));
  }
  return compute_metrics(y_true, y_pred);
}

std::size_t select_best(const std::vector<GridPointResult>& reports) {
  if (reports.empty()) throw std::invalid_argument("select_best: no reports");
  std::size_t best = 0;
  for (std::size_t i = 1; i < reports.size(); ++i) {
    const Hyperparams& a = reports[i].hyperparams;
    const Hyperparams& b = reports[best].hyperparams;
    double fa = reports[i].dev_report.macro_f1;
    double fb = reports[best].dev_report.macro_f1;
    if (fa > fb) {
      best = i;
    } else if (fa == fb) {
      if (a.learning_rate < b.learning_rate ||
          (a.learning_rate == b.learning_rate && a.batch_size < b.batch_size) ||
          (a.learning_rate == b.learning_rate && a.batch_size == b.batch_size &&
           a.epochs < b.epochs)) {
        best = i;
      }
    }
  }
  return best;
}

GridSearchResult grid_search(const std::function<model::Classifier()>& factory,
                             const text::Corpus& train_corpus, const text::Corpus& dev_corpus,
                             const GridSpec& grid, std::uint64_t seed) {
  if (grid.learning_rates.empty() || grid.batch_sizes.empty() || grid.epoch_counts.empty())
    throw std::invalid_argument("grid_search: empty grid dimension");

  GridSearchResult result;
  for (double lr : grid.learning_rates) {
    for (std::size_t batch : grid.batch_sizes) {
      for (std::size_t epochs : grid.epoch_counts) {
        Hyperparams hp;
        hp.learning_rate = lr;
        hp.batch_size = batch;
        hp.epochs = epochs;
        hp.seed = seed;
        model::Classifier candidate = factory();
        train(candidate, train_corpus, dev_corpus, hp);
        result.reports.push_back({hp, evaluate(candidate, dev_corpus)});
      }
    }
  }
  result.best = result.reports[select_best(result.reports)].hyperparams;
  return result;
}

std::string metrics_report_json(const std::string& name, const MetricsReport& report) {
  nlohmann::ordered_json obj;
  obj["name"] = name;
  obj["f1"] = report.macro_f1;
  obj["precision"] = report.macro_precision;
  obj["recall"] = report.macro_recall;
  obj["accuracy"] = report.accuracy;
  for (int c = 0; c < 3; ++c) {
    nlohmann::ordered_json cls;
    cls["precision"] = report.precision[c];
    cls["recall"] = report.recall[c];
    cls["f1"] = report.f1[c];
    obj["per_class"][text::label_name(static_cast<text::Label>(c))] = cls;
  }
  obj["confusion"] = report.confusion;
  return obj.dump();
}

}  // namespace toxattr::train
