#include "toxattr/serving.hpp"

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <iostream>
#include <stdexcept>
#include <thread>

#include <httplib.h>
#include <json.hpp>

namespace toxattr::serving {

using nlohmann::json;

void ModelRegistry::register_checkpoint(const std::string& model_id,
                                        const std::string& display_name, const std::string& path) {
  if (find(model_id) != nullptr)
    throw std::invalid_argument("registry: duplicate model_id '" + model_id + "'");
  RegistryEntry entry;
  entry.model_id = model_id;
  entry.display_name = display_name;
  entry.checkpoint_path = path;
  try {
    entry.classifier = std::make_shared<const model::Classifier>(model::load_checkpoint(path));
    entry.ready = true;
  } catch (const std::exception& e) {
    entry.ready = false;
    entry.error = e.what();
    std::cerr << "registry: failed to load '" << model_id << "' from " << path << ": " << e.what()
              << "\n";
  }
  entries_.push_back(std::move(entry));
}

void ModelRegistry::register_classifier(const std::string& model_id,
                                        const std::string& display_name,
                                        std::shared_ptr<const model::Classifier> classifier) {
  if (find(model_id) != nullptr)
    throw std::invalid_argument("registry: duplicate model_id '" + model_id + "'");
  RegistryEntry entry;
  entry.model_id = model_id;
  entry.display_name = display_name;
  entry.classifier = std::move(classifier);
  entry.ready = entry.classifier != nullptr;
  entries_.push_back(std::move(entry));
}

const RegistryEntry* ModelRegistry::find(const std::string& model_id) const {
  for (const RegistryEntry& entry : entries_)
    if (entry.model_id == model_id) return &entry;
  return nullptr;
}

std::size_t ModelRegistry::ready_count() const {
  std::size_t n = 0;
  for (const RegistryEntry& entry : entries_) n += entry.ready ? 1 : 0;
  return n;
}

std::vector<ModelSummary> list_models(const ModelRegistry& registry) {
  std::vector<ModelSummary> out;
  out.reserve(registry.entries().size());
  for (const RegistryEntry& entry : registry.entries())
    out.push_back({entry.model_id, entry.display_name, entry.ready});
  return out;
}

// ---------------------------------------------------------------------------

const char* RankerConfig::default_prompt_template() {
  return "Identify and list the words from the following sentence that contribute most to its "
         "harmful or hateful meaning, in descending order of importance, separated by commas. "
         "Sentence: {text}";
}

void RankerConfig::validate() const {
  if (timeout_ms < 1) throw std::invalid_argument("ranker: timeout_ms must be >= 1");
  if (mode == Mode::kRemote) {
    if (endpoint.empty()) throw std::invalid_argument("ranker: remote mode requires an endpoint");
    if (auth_env.empty())
      throw std::invalid_argument("ranker: remote mode requires an auth token source");
  }
}

namespace {

std::string render_prompt(const std::string& tmpl, const std::string& input_text) {
  const std::string placeholder = "{text}";
  std::string out = tmpl.empty() ? RankerConfig::default_prompt_template() : tmpl;
  std::size_t pos = out.find(placeholder);
  while (pos != std::string::npos) {
    out.replace(pos, placeholder.size(), input_text);
    pos = out.find(placeholder, pos + input_text.size());
  }
  return out;
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> parse_word_list(const std::string& body) {
  // Accept either a JSON object carrying the list, or plain text.
  std::string payload = body;
  try {
    json parsed = json::parse(body);
    if (parsed.is_object() && parsed.contains("words") && parsed["words"].is_array()) {
      std::vector<std::string> words;
      for (const auto& w : parsed["words"])
        if (w.is_string() && !trim(w.get<std::string>()).empty())
          words.push_back(trim(w.get<std::string>()));
      return words;
    }
    if (parsed.is_object() && parsed.contains("text") && parsed["text"].is_string())
      payload = parsed["text"].get<std::string>();
    else if (parsed.is_string())
      payload = parsed.get<std::string>();
  } catch (const json::exception&) {
    // plain text body
  }

  std::vector<std::string> words;
  std::size_t start = 0;
  while (start <= payload.size()) {
    std::size_t comma = payload.find(',', start);
    std::string piece =
        comma == std::string::npos ? payload.substr(start) : payload.substr(start, comma - start);
    piece = trim(piece);
    if (!piece.empty()) words.push_back(piece);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return words;
}

// endpoint -> (scheme://host:port, path)
std::pair<std::string, std::string> split_endpoint(const std::string& endpoint) {
  std::size_t scheme = endpoint.find("://");
  std::size_t slash = scheme == std::string::npos ? endpoint.find('/')
                                                  : endpoint.find('/', scheme + 3);
  if (slash == std::string::npos) return {endpoint, "/"};
  return {endpoint.substr(0, slash), endpoint.substr(slash)};
}

}  // namespace

RankOutcome external_rank(const std::string& input_text,
                          const attribution::RankedTokens& fallback, const RankerConfig& config) {
  config.validate();
  if (config.mode == RankerConfig::Mode::kStub) return {fallback, "stub"};

  auto [base, path] = split_endpoint(config.endpoint);
  httplib::Client client(base);
  client.set_connection_timeout(std::chrono::milliseconds(config.timeout_ms));
  client.set_read_timeout(std::chrono::milliseconds(config.timeout_ms));
  client.set_write_timeout(std::chrono::milliseconds(config.timeout_ms));
  if (!config.auth_env.empty()) {
    if (const char* token = std::getenv(config.auth_env.c_str()))
      client.set_bearer_token_auth(token);
  }

  json body;
  body["prompt"] = render_prompt(config.prompt_template, input_text);
  httplib::Result result = client.Post(path, body.dump(), "application/json");

  if (!result || result->status < 200 || result->status >= 300) {
    std::cerr << "ranker: remote call failed (" << (result ? std::to_string(result->status)
                                                           : httplib::to_string(result.error()))
              << "), using attribution fallback\n";
    return {fallback, "fallback"};
  }

  std::vector<std::string> words = parse_word_list(result->body);
  if (words.empty()) {
    std::cerr << "ranker: could not parse remote word list, using attribution fallback\n";
    return {fallback, "fallback"};
  }

  RankOutcome outcome;
  outcome.source = "remote";
  const double n = static_cast<double>(words.size());
  for (std::size_t k = 0; k < words.size(); ++k)
    outcome.tokens.items.push_back({words[k], 1.0 - static_cast<double>(k) / n, k});
  return outcome;
}

// ---------------------------------------------------------------------------

std::string ClassifyResponse::to_json() const {
  json obj;
  obj["model_id"] = model_id;
  obj["label"] = label;
  obj["confidence"] = confidence;
  obj["probabilities"] = probabilities;
  obj["tokens"] = json::array();
  for (const TokenScore& t : tokens) obj["tokens"].push_back({{"token", t.token}, {"score", t.score}});
  obj["ranked_tokens"] = json::array();
  for (const TokenScore& t : ranked_tokens)
    obj["ranked_tokens"].push_back({{"token", t.token}, {"score", t.score}});
  obj["ranked_source"] = ranked_source;
  obj["completeness_gap"] = completeness_gap;
  obj["latency_ms"] = latency_ms;
  return obj.dump();
}

ClassifyResponse handle_classify(const ModelRegistry& registry, const ClassifyRequest& request,
                                 const RankerConfig& ranker) {
  const auto start = std::chrono::steady_clock::now();

  const RegistryEntry* entry = registry.find(request.model_id);
  if (entry == nullptr || !entry->ready)
    throw ApiError{"model_not_found", "no ready model with id '" + request.model_id + "'", 404};
  if (request.text.empty() || request.text.size() > kMaxTextBytes)
    throw ApiError{"invalid_text", "text must be non-empty and at most " +
                                       std::to_string(kMaxTextBytes) + " bytes", 400};
  if (request.steps < 1 || request.steps > kMaxSteps)
    throw ApiError{"invalid_steps", "steps must be in [1, " + std::to_string(kMaxSteps) + "]", 400};

  const model::Classifier& classifier = *entry->classifier;

  model::Prediction prediction;
  try {
    prediction = model::predict(classifier, request.text);
  } catch (const std::invalid_argument& e) {
    throw ApiError{"invalid_text", e.what(), 400};
  }

  attribution::AttributionResult attribution_result;
  try {
    attribution_result = attribution::integrated_gradients(
        classifier, request.text, static_cast<int>(prediction.label), request.steps);
  } catch (const std::exception& e) {
    throw ApiError{"attribution_error", e.what(), 500};
  }
  attribution::RankedTokens ranked = attribution::rank_tokens(attribution_result);
  RankOutcome outcome = external_rank(request.text, ranked, ranker);

  ClassifyResponse response;
  response.model_id = request.model_id;
  response.label = text::label_name(prediction.label);
  response.confidence = prediction.confidence;
  response.probabilities = prediction.probabilities;
  for (std::size_t i = 0; i < attribution_result.tokens.size(); ++i)
    response.tokens.push_back(
        {attribution_result.tokens[i], attribution_result.normalized_scores[i]});
  for (const attribution::RankedToken& t : outcome.tokens.items)
    response.ranked_tokens.push_back({t.token, t.score});
  response.ranked_source = outcome.source;
  response.completeness_gap = attribution_result.completeness_gap;
  response.latency_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return response;
}

// ---------------------------------------------------------------------------

struct Service::Impl {
  httplib::Server server;
  std::thread listener;
  std::atomic<bool> bound{false};
};

namespace {

void send_error(httplib::Response& res, const ApiError& error) {
  json obj;
  obj["code"] = error.code;
  obj["message"] = error.message;
  res.status = error.http_status;
  res.set_content(obj.dump(), "application/json");
}

}  // namespace

Service::Service(std::shared_ptr<const ModelRegistry> registry, ServerConfig config)
    : registry_(std::move(registry)), config_(std::move(config)), impl_(new Impl) {
  if (registry_ == nullptr) throw std::invalid_argument("service: null registry");
  if (!config_.allow_empty && registry_->ready_count() == 0)
    throw std::invalid_argument(
        "service: no ready models (pass allow_empty to start anyway)");
  config_.ranker.validate();

  httplib::Server& server = impl_->server;
  // no SO_REUSEPORT: binding an in-use port must fail, not silently share it
  server.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const char*>(&yes), sizeof(yes));
  });
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Headers", "Content-Type"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});

  server.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  server.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
    json obj;
    obj["status"] = "ok";
    obj["models"] = json::array();
    for (const RegistryEntry& entry : registry_->entries())
      obj["models"].push_back({{"model_id", entry.model_id}, {"ready", entry.ready}});
    res.set_content(obj.dump(), "application/json");
  });

  server.Get("/models", [this](const httplib::Request&, httplib::Response& res) {
    json arr = json::array();
    for (const ModelSummary& m : list_models(*registry_))
      arr.push_back({{"model_id", m.model_id},
                     {"display_name", m.display_name},
                     {"ready", m.ready}});
    res.set_content(arr.dump(), "application/json");
  });

  server.Post("/classify", [this](const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      send_error(res, {"invalid_request", "body is not valid JSON", 400});
      return;
    }
    if (!body.is_object() || !body.contains("text") || !body["text"].is_string() ||
        !body.contains("model_id") || !body["model_id"].is_string()) {
      send_error(res, {"invalid_request", "expected {text, model_id, steps?}", 400});
      return;
    }

    ClassifyRequest request;
    request.text = body["text"].get<std::string>();
    request.model_id = body["model_id"].get<std::string>();
    if (body.contains("steps")) {
      if (!body["steps"].is_number_integer() || body["steps"].get<long long>() < 1 ||
          body["steps"].get<long long>() > static_cast<long long>(kMaxSteps)) {
        send_error(res, {"invalid_steps",
                         "steps must be an integer in [1, " + std::to_string(kMaxSteps) + "]",
                         400});
        return;
      }
      request.steps = body["steps"].get<std::size_t>();
    }

    try {
      ClassifyResponse response = handle_classify(*registry_, request, config_.ranker);
      res.set_content(response.to_json(), "application/json");
    } catch (const ApiError& error) {
      send_error(res, error);
    } catch (const std::exception& e) {
      send_error(res, {"internal_error", e.what(), 500});
    }
  });

  // Content is never logged; counts and latencies only.
  server.set_logger([](const httplib::Request& req, const httplib::Response& res) {
    std::cerr << req.method << " " << req.path << " -> " << res.status << "\n";
  });
}

Service::~Service() {
  stop();
  if (impl_->listener.joinable()) impl_->listener.join();
}

void Service::start() {
  httplib::Server& server = impl_->server;
  if (config_.port == 0) {
    int port = server.bind_to_any_port(config_.host);
    if (port < 0) throw std::runtime_error("service: failed to bind " + config_.host);
    config_.port = port;
  } else if (!server.bind_to_port(config_.host, config_.port)) {
    throw std::runtime_error("service: failed to bind " + config_.host + ":" +
                             std::to_string(config_.port));
  }
  impl_->bound = true;
  impl_->listener = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

int Service::wait() {
  if (impl_->listener.joinable()) impl_->listener.join();
  return 0;
}

int Service::run() {
  start();
  return wait();
}

void Service::stop() {
  if (impl_ && impl_->bound) impl_->server.stop();
}

}  // namespace toxattr::serving
