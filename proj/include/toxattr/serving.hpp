#pragma once

#include <memory>
#include <string>
#include <vector>

#include "toxattr/attribution.hpp"
#include "toxattr/model.hpp"

namespace toxattr::serving {

struct RegistryEntry {
  std::string model_id;
  std::string display_name;
  std::string checkpoint_path;
  std::shared_ptr<const model::Classifier> classifier;  // null when not ready
  bool ready = false;
  std::string error;  // load failure detail
};

// Roster of loaded checkpoints. Populated at startup and immutable afterwards,
// so concurrent readers need no locking.
class ModelRegistry {
 public:
  // A failed load registers the entry with ready=false instead of throwing.
  void register_checkpoint(const std::string& model_id, const std::string& display_name,
                           const std::string& path);
  void register_classifier(const std::string& model_id, const std::string& display_name,
                           std::shared_ptr<const model::Classifier> classifier);

  const RegistryEntry* find(const std::string& model_id) const;
  const std::vector<RegistryEntry>& entries() const { return entries_; }
  std::size_t ready_count() const;

 private:
  std::vector<RegistryEntry> entries_;
};

struct ClassifyRequest {
  std::string text;
  std::string model_id;
  std::size_t steps = 64;
};

constexpr std::size_t kMaxTextBytes = 10000;
constexpr std::size_t kMaxSteps = 1024;

// Machine-readable error; the HTTP layer maps http_status onto the response.
struct ApiError {
  std::string code;
  std::string message;
  int http_status;
};

struct TokenScore {
  std::string token;
  double score;
};

struct ClassifyResponse {
  std::string model_id;
  std::string label;
  double confidence = 0.0;
  std::vector<double> probabilities;
  std::vector<TokenScore> tokens;
  std::vector<TokenScore> ranked_tokens;
  std::string ranked_source;
  double completeness_gap = 0.0;
  double latency_ms = 0.0;

  // Deterministic except latency_ms.
  std::string to_json() const;
};

struct RankerConfig {
  enum class Mode { kStub, kRemote };
  Mode mode = Mode::kStub;
  std::string endpoint;       // remote mode: http://host:port/path
  std::string auth_env;       // name of the env var holding the bearer token
  int timeout_ms = 2000;
  std::string prompt_template;  // "{text}" placeholder

  static const char* default_prompt_template();
  void validate() const;
};

struct RankOutcome {
  attribution::RankedTokens tokens;
  std::string source;  // stub | remote | fallback
};

// Stub mode returns the fallback verbatim. Remote mode renders the prompt,
// posts it, and parses a comma-separated word list into ranked tokens with
// scores 1, 1-1/n, ...; any failure falls back to the attribution ranking.
RankOutcome external_rank(const std::string& input_text,
                          const attribution::RankedTokens& fallback, const RankerConfig& config);

// predict + integrated gradients (target = predicted label) + token ranking.
// Throws ApiError on validation/lookup failures. Stateless.
ClassifyResponse handle_classify(const ModelRegistry& registry, const ClassifyRequest& request,
                                 const RankerConfig& ranker);

struct ModelSummary {
  std::string model_id;
  std::string display_name;
  bool ready;
};

std::vector<ModelSummary> list_models(const ModelRegistry& registry);

struct ServerConfig {
  std::string host = "0.0.0.0";
  int port = 8080;
  bool allow_empty = false;
  RankerConfig ranker;
};

// HTTP front end: POST /classify, GET /models, GET /health.
class Service {
 public:
  Service(std::shared_ptr<const ModelRegistry> registry, ServerConfig config);
  ~Service();

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Spawns the listener thread; throws on bind failure.
  void start();
  // Blocks until stop(); returns the exit code (0 on clean shutdown).
  int wait();
  // start() + wait().
  int run();
  void stop();
  int port() const { return config_.port; }

 private:
  struct Impl;
  std::shared_ptr<const ModelRegistry> registry_;
  ServerConfig config_;
  std::unique_ptr<Impl> impl_;
};

}  // namespace toxattr::serving
