#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "toxattr/attribution.hpp"
#include "toxattr/model.hpp"
#include "toxattr/serving.hpp"
#include "toxattr/text.hpp"
#include "toxattr/trainer.hpp"

namespace {

using namespace toxattr;

serving::Service* g_service = nullptr;

void handle_signal(int) {
  if (g_service != nullptr) g_service->stop();
}

std::string path_stem(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

void print_metrics_row(const std::string& name, const train::MetricsReport& report) {
  std::printf("%-16s F1 %.3f  Precision %.3f  Recall %.3f  Accuracy %.3f\n", name.c_str(),
              report.macro_f1, report.macro_precision, report.macro_recall, report.accuracy);
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

struct TrainOptions {
  std::string corpus_path;
  std::string out_path;
  double lr = 1e-3;
  std::size_t batch = 16;
  std::size_t epochs = 5;
  std::uint64_t seed = 42;
  bool grid = false;
};

int run_train(const TrainOptions& opt) {
  text::LoadStats stats;
  text::Corpus corpus = text::load_corpus_file(opt.corpus_path, &stats);
  std::printf("loaded %zu records (%zu empty dropped, %zu duplicates dropped)\n", stats.kept,
              stats.dropped_empty, stats.dropped_duplicate);

  text::SplitSpec split_spec;
  split_spec.seed = opt.seed;
  text::SplitResult split = text::split_corpus(corpus, split_spec);
  std::printf("split train/dev/test = %zu/%zu/%zu\n", split.train.size(), split.dev.size(),
              split.test.size());

  text::Vocabulary vocab = text::build_vocab(split.train, 1);
  model::ModelConfig config;
  config.vocab_size = static_cast<std::uint32_t>(vocab.size());
  config.seed = opt.seed;

  auto fresh = [&] {
    model::Classifier classifier;
    classifier.config = config;
    classifier.params = model::init_model(config);
    classifier.vocab = vocab;
    return classifier;
  };

  train::Hyperparams hp;
  hp.learning_rate = opt.lr;
  hp.batch_size = opt.batch;
  hp.epochs = opt.epochs;
  hp.seed = opt.seed;

  if (opt.grid) {
    train::GridSpec grid;  // lr {1e-5, 2e-5, 3e-5} x batch {16, 32, 64} x epochs {3, 4, 5}
    std::printf("grid search over %zu configurations...\n",
                grid.learning_rates.size() * grid.batch_sizes.size() * grid.epoch_counts.size());
    train::GridSearchResult result =
        train::grid_search(fresh, split.train, split.dev, grid, opt.seed);
    for (const train::GridPointResult& point : result.reports)
      std::printf("  lr %-8g batch %-3zu epochs %zu -> dev macro F1 %.4f\n",
                  point.hyperparams.learning_rate, point.hyperparams.batch_size,
                  point.hyperparams.epochs, point.dev_report.macro_f1);
    hp = result.best;
    std::printf("best: lr %g batch %zu epochs %zu\n", hp.learning_rate, hp.batch_size, hp.epochs);
  }

  model::Classifier classifier = fresh();
  train::TrainHistory history = train::train(classifier, split.train, split.dev, hp);
  for (std::size_t e = 0; e < history.train_loss.size(); ++e)
    std::printf("epoch %zu: train loss %.4f, dev macro F1 %.4f\n", e + 1, history.train_loss[e],
                history.dev_metrics[e].macro_f1);
  std::printf("trained in %.1f s\n", history.wall_seconds);
  print_metrics_row("dev", history.dev_metrics.back());

  model::save_checkpoint(classifier, opt.out_path);
  std::printf("checkpoint written to %s\n", opt.out_path.c_str());
  return 0;
}

int run_evaluate(const std::string& corpus_path, const std::string& ckpt_path,
                 const std::string& report_path) {
  model::Classifier classifier = model::load_checkpoint(ckpt_path);
  text::Corpus corpus = text::load_corpus_file(corpus_path);
  train::MetricsReport report = train::evaluate(classifier, corpus);
  const std::string name = path_stem(ckpt_path);
  print_metrics_row(name, report);

  if (!report_path.empty()) {
    std::ofstream out(report_path);
    if (!out) {
      std::cerr << "cannot open report path " << report_path << "\n";
      return 1;
    }
    out << "[" << train::metrics_report_json(name, report) << "]\n";
    std::printf("report written to %s\n", report_path.c_str());
  }
  return 0;
}

int run_attribute(const std::string& ckpt_path, const std::string& input_text, std::size_t steps,
                  const std::string& target) {
  model::Classifier classifier = model::load_checkpoint(ckpt_path);
  model::Prediction prediction = model::predict(classifier, input_text);

  int target_index = static_cast<int>(prediction.label);
  if (!target.empty()) {
    text::Label label;
    if (!text::label_from_string(target, &label)) {
      std::cerr << "unknown target label '" << target << "' (expected explicit|implicit|none)\n";
      return 1;
    }
    target_index = static_cast<int>(label);
  }

  attribution::AttributionResult result =
      attribution::integrated_gradients(classifier, input_text, target_index, steps);
  attribution::RankedTokens ranked = attribution::rank_tokens(result);

  nlohmann::json obj;
  obj["label"] = text::label_name(prediction.label);
  obj["confidence"] = prediction.confidence;
  obj["probabilities"] = prediction.probabilities;
  obj["target"] = text::label_name(static_cast<text::Label>(target_index));
  obj["steps"] = result.steps;
  obj["tokens"] = nlohmann::json::array();
  for (std::size_t i = 0; i < result.tokens.size(); ++i)
    obj["tokens"].push_back({{"token", result.tokens[i]},
                             {"score", result.normalized_scores[i]},
                             {"raw", result.raw_scores[i]}});
  obj["ranked_tokens"] = nlohmann::json::array();
  for (const attribution::RankedToken& t : ranked.items)
    obj["ranked_tokens"].push_back({{"token", t.token}, {"score", t.score}});
  obj["completeness_gap"] = result.completeness_gap;
  obj["output_delta"] = result.output_delta;
  std::cout << obj.dump(2) << "\n";
  return 0;
}

struct ServeOptions {
  std::string ckpts;
  std::string host = "0.0.0.0";
  int port = 8080;
  std::string ranker_mode = "stub";
  std::string ranker_endpoint;
  std::string ranker_auth_env = "TOXATTR_RANKER_TOKEN";
  int ranker_timeout_ms = 2000;
  std::string ranker_prompt_file;
  bool allow_empty = false;
};

int run_serve(const ServeOptions& opt) {
  auto registry = std::make_shared<serving::ModelRegistry>();
  for (const std::string& path : split_commas(opt.ckpts)) {
    std::string id = path_stem(path);
    // de-duplicate ids coming from same-named files
    std::string unique = id;
    for (int suffix = 2; registry->find(unique) != nullptr; ++suffix)
      unique = id + "-" + std::to_string(suffix);
    registry->register_checkpoint(unique, unique, path);
  }
  for (const serving::RegistryEntry& entry : registry->entries())
    std::printf("model %-16s ready=%s\n", entry.model_id.c_str(), entry.ready ? "yes" : "no");

  serving::ServerConfig config;
  config.host = opt.host;
  config.port = opt.port;
  config.allow_empty = opt.allow_empty;
  config.ranker.mode = opt.ranker_mode == "remote" ? serving::RankerConfig::Mode::kRemote
                                                   : serving::RankerConfig::Mode::kStub;
  config.ranker.endpoint = opt.ranker_endpoint;
  config.ranker.auth_env = opt.ranker_auth_env;
  config.ranker.timeout_ms = opt.ranker_timeout_ms;
  if (!opt.ranker_prompt_file.empty()) {
    std::ifstream in(opt.ranker_prompt_file);
    if (!in) {
      std::cerr << "cannot open prompt template " << opt.ranker_prompt_file << "\n";
      return 1;
    }
    std::stringstream ss;
    ss << in.rdbuf();
    config.ranker.prompt_template = ss.str();
  }

  serving::Service service(registry, config);
  g_service = &service;
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);
  service.start();
  std::printf("listening on %s:%d\n", opt.host.c_str(), service.port());
  int code = service.wait();
  g_service = nullptr;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"toxattr: 3-class toxicity classifier with integrated-gradients explanations"};
  app.require_subcommand(1);

  TrainOptions train_opt;
  CLI::App* train_cmd = app.add_subcommand("train", "Train a classifier on a JSONL corpus");
  train_cmd->add_option("--corpus", train_opt.corpus_path, "corpus file (JSONL)")->required();
  train_cmd->add_option("--out", train_opt.out_path, "output checkpoint path")->required();
  train_cmd->add_option("--lr", train_opt.lr, "learning rate");
  train_cmd->add_option("--batch", train_opt.batch, "batch size");
  train_cmd->add_option("--epochs", train_opt.epochs, "epochs");
  train_cmd->add_option("--seed", train_opt.seed, "seed for init/split/shuffle");
  train_cmd->add_flag("--grid", train_opt.grid,
                      "grid-search lr {1e-5,2e-5,3e-5} x batch {16,32,64} x epochs {3,4,5}");

  std::string eval_corpus, eval_ckpt, eval_report;
  CLI::App* eval_cmd = app.add_subcommand("evaluate", "Evaluate a checkpoint on a corpus");
  eval_cmd->add_option("--corpus", eval_corpus, "corpus file (JSONL)")->required();
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
  eval_cmd->add_option("--report", eval_report, "write JSON metrics report here");

  std::string attr_ckpt, attr_text, attr_target;
  std::size_t attr_steps = 64;
  CLI::App* attr_cmd = app.add_subcommand("attribute", "Explain one input with integrated gradients");
  attr_cmd->add_option("--ckpt", attr_ckpt, "checkpoint path")->required();
  attr_cmd->add_option("--text", attr_text, "input text")->required();
  attr_cmd->add_option("--steps", attr_steps, "integration steps");
  attr_cmd->add_option("--target", attr_target, "target label (default: predicted)");

  ServeOptions serve_opt;
  CLI::App* serve_cmd = app.add_subcommand("serve", "Serve classify+explain over HTTP");
  serve_cmd->add_option("--ckpt", serve_opt.ckpts, "checkpoint path(s), comma separated")
      ->required();
  serve_cmd->add_option("--port", serve_opt.port, "port to listen on")->required();
  serve_cmd->add_option("--host", serve_opt.host, "bind host");
  serve_cmd->add_option("--ranker", serve_opt.ranker_mode, "stub|remote")
      ->check(CLI::IsMember({"stub", "remote"}));
  serve_cmd->add_option("--ranker-endpoint", serve_opt.ranker_endpoint, "remote ranker URL");
  serve_cmd->add_option("--ranker-auth-env", serve_opt.ranker_auth_env,
                        "env var holding the ranker bearer token");
  serve_cmd->add_option("--ranker-timeout-ms", serve_opt.ranker_timeout_ms, "remote timeout");
  serve_cmd->add_option("--ranker-prompt-file", serve_opt.ranker_prompt_file,
                        "prompt template file ({text} placeholder)");
  serve_cmd->add_flag("--allow-empty", serve_opt.allow_empty, "start with no ready models");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return run_train(train_opt);
    if (*eval_cmd) return run_evaluate(eval_corpus, eval_ckpt, eval_report);
    if (*attr_cmd) return run_attribute(attr_ckpt, attr_text, attr_steps, attr_target);
    if (*serve_cmd) return run_serve(serve_opt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
