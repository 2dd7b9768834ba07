#include "lmm/service.hpp"

#include <cmath>
#include <random>
#include <thread>

#include "httplib.h"
#include "json.hpp"

namespace lmm::service {

namespace {

using json = nlohmann::ordered_json;

struct HttpError {
  int status;
  std::string code;
  std::string message;
};

Response error_response(int status, std::string_view code, const std::string& message) {
  json j;
  j["error"] = code;
  j["message"] = message;
  return {status, j.dump()};
}

int status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::PromptTooLong:
    case ErrorCode::SequenceTooLong:
      return 413;
    case ErrorCode::NonFiniteLoss:
      return 500;
    default:
      return 400;
  }
}

std::string unquote(std::string v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  return v;
}

template <class T>
T number(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    T out{};
    if constexpr (std::is_same_v<T, double>) out = std::stod(value, &pos);
    else out = static_cast<T>(std::stoll(value, &pos));
    if (pos != value.size()) throw std::invalid_argument(value);
    return out;
  } catch (const std::exception&) {
    throw Error(ErrorCode::ConfigError, "config key '" + key + "' expects a number, got '" + value + "'");
  }
}

seq::TokenSequence tokens_history(const json& arr, const Vocabulary& vocab) {
  seq::TokenSequence s;
  for (const auto& t : arr) s.tokens.push_back(vocab.id_of(t.get<std::string>()));
  if (s.tokens.size() < seq::kPrefixLength || s.tokens[0] != kBos) {
    throw Error(ErrorCode::FormatError, "token history must start with [BOS], age and sex tokens");
  }
  return s;
}

seq::TokenSequence parse_history(const json& h, const Vocabulary& vocab, std::size_t max_events) {
  if (h.is_array()) {
    if (h.size() > max_events) throw HttpError{413, "HistoryTooLong", "history exceeds " + std::to_string(max_events) + " tokens"};
    return tokens_history(h, vocab);
  }
  if (!h.is_object()) throw Error(ErrorCode::FormatError, "history must be an object or a token list");
  if (h.contains("tokens")) {
    const auto& t = h.at("tokens");
    if (t.size() > max_events) throw HttpError{413, "HistoryTooLong", "history exceeds " + std::to_string(max_events) + " tokens"};
    return tokens_history(t, vocab);
  }
  const int age = h.at("age").get<int>();
  const Sex sex = parse_sex(h.value("sex", std::string("U")));
  std::vector<MedicalEvent> events;
  const auto& list = h.value("events", json::array());
  if (list.size() > max_events) throw HttpError{413, "HistoryTooLong", "history exceeds " + std::to_string(max_events) + " events"};
  for (const auto& e : list) {
    MedicalEvent ev;
    ev.date = parse_date(e.at("date").get<std::string>());
    ev.system = parse_code_system(e.at("system").get<std::string>());
    ev.code = e.value("code", std::string());
    if (e.contains("paid") && !e.at("paid").is_null()) ev.paid = e.at("paid").get<double>();
    events.push_back(std::move(ev));
  }
  std::stable_sort(events.begin(), events.end(), [](const auto& a, const auto& b) { return a.date < b.date; });
  seq::TokenSequence s;
  s.tokens = {kBos, vocab.age_token(age), vocab.sex_token(sex)};
  if (!events.empty()) s.anchor_date = events.front().date;
  seq::append_events(s.tokens, events, vocab, std::nullopt, UnknownPolicy::Strict);
  return s;
}

std::uint64_t fresh_seed() {
  std::random_device rd;
  return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

mc::SimulationRequest request_from(const json& knobs, const ServiceConfig& cfg) {
  mc::SimulationRequest r;
  r.n_futures = knobs.value("n_futures", cfg.n_futures);
  r.horizon_days = knobs.value("horizon_days", cfg.horizon_days);
  r.temperature = knobs.value("temperature", cfg.temperature);
  r.top_k = knobs.value("top_k", cfg.top_k);
  r.base_seed = knobs.contains("seed") ? knobs.at("seed").get<std::uint64_t>() : fresh_seed();
  r.predicates = knobs.value("predicates", cfg.predicates);
  r.bucketing = mc::parse_bucketing(knobs.value("bucketing", std::string("monthly")));
  r.threads = cfg.threads;
  if (r.n_futures > cfg.max_futures) {
    throw Error(ErrorCode::ConfigError, "n_futures above the service limit of " + std::to_string(cfg.max_futures));
  }
  r.validate();
  return r;
}

}  // namespace

void ServiceConfig::validate() const {
  if (max_concurrent < 1) throw Error(ErrorCode::ConfigError, "max_concurrent must be >= 1");
  if (port < 0 || port > 65535) throw Error(ErrorCode::ConfigError, "port out of range");
  if (n_futures < 1 || n_futures > max_futures) throw Error(ErrorCode::ConfigError, "n_futures must be 1..max_futures");
  if (!(horizon_days >= 1) || !(temperature >= 0) || top_k < 0) {
    throw Error(ErrorCode::ConfigError, "invalid default simulation settings");
  }
}

ServiceConfig parse_config(std::string_view text) {
  ServiceConfig c;
  std::size_t line_no = 0;
  for (const auto& raw : split(text, '\n')) {
    ++line_no;
    std::string line = raw;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::ConfigError, "config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = unquote(trim(line.substr(eq + 1)));
    if (key == "host") c.host = value;
    else if (key == "port") c.port = number<int>(key, value);
    else if (key == "checkpoint") c.checkpoint_path = value;
    else if (key == "vocab") c.vocab_path = value;
    else if (key == "n_futures") c.n_futures = number<int>(key, value);
    else if (key == "horizon_days") c.horizon_days = number<double>(key, value);
    else if (key == "temperature") c.temperature = number<double>(key, value);
    else if (key == "top_k") c.top_k = number<int>(key, value);
    else if (key == "max_concurrent") c.max_concurrent = number<int>(key, value);
    else if (key == "max_futures") c.max_futures = number<int>(key, value);
    else if (key == "max_body_bytes") c.max_body_bytes = number<std::size_t>(key, value);
    else if (key == "max_history_events") c.max_history_events = number<std::size_t>(key, value);
    else if (key == "threads") c.threads = number<unsigned>(key, value);
    else if (key == "predicates") {
      c.predicates.clear();
      for (const auto& p : split(value, ',')) {
        if (!trim(p).empty()) c.predicates.push_back(trim(p));
      }
    } else {
      throw Error(ErrorCode::ConfigError, "config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

ServiceConfig load_config(const std::string& path) { return parse_config(read_file(path)); }

// ---------------------------------------------------------------------------

SimulationService::SimulationService(model::ModelParameters params, Vocabulary vocab, ServiceConfig config)
    : params_(std::move(params)), vocab_(std::move(vocab)), config_(std::move(config)) {
  config_.validate();
  if (static_cast<std::size_t>(params_.config.vocab_size) != vocab_.size()) {
    degraded_ = "checkpoint vocab_size " + std::to_string(params_.config.vocab_size) + " differs from vocabulary size " +
                std::to_string(vocab_.size());
  }
  model_ = std::make_unique<mc::TransformerModel>(params_);
}

SimulationService::Slot SimulationService::try_acquire() const {
  if (in_flight_.fetch_add(1) >= config_.max_concurrent) {
    in_flight_.fetch_sub(1);
    return Slot();
  }
  return Slot(&in_flight_);
}

Response SimulationService::handle(const std::string& method, const std::string& path, const std::string& body) const {
  try {
    if (path == "/v1/health") {
      if (method != "GET") return error_response(405, "MethodNotAllowed", "use GET");
      return health();
    }
    if (path == "/v1/vocab") {
      if (method != "GET") return error_response(405, "MethodNotAllowed", "use GET");
      return vocab_summary();
    }
    if (path != "/v1/simulate" && path != "/v1/intervene") return error_response(404, "NotFound", path);
    if (method != "POST") return error_response(405, "MethodNotAllowed", "use POST");
    if (body.size() > config_.max_body_bytes) {
      return error_response(413, "BodyTooLarge", "body exceeds " + std::to_string(config_.max_body_bytes) + " bytes");
    }
    if (!degraded_.empty()) return error_response(422, "VocabModelMismatch", degraded_);
    const auto slot = try_acquire();
    if (!slot) return error_response(503, "Busy", "concurrency limit reached");
    return path == "/v1/simulate" ? simulate(body) : intervene(body);
  } catch (const HttpError& e) {
    return error_response(e.status, e.code, e.message);
  } catch (const Error& e) {
    return error_response(status_for(e.code()), to_string(e.code()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return error_response(400, "FormatError", e.what());
  }
}

Response SimulationService::simulate(const std::string& body) const {
  const auto j = json::parse(body);
  auto req = request_from(j, config_);
  req.prompt = parse_history(j.at("history"), vocab_, config_.max_history_events);
  const auto bundle = mc::simulate_futures(*model_, vocab_, req);
  return {200, mc::bundle_to_json(bundle, vocab_, j.value("verbose", false))};
}

Response SimulationService::intervene(const std::string& body) const {
  const auto j = json::parse(body);
  const auto knobs = j.value("simulate", json::object());
  auto req = request_from(knobs, config_);
  const auto prompt = parse_history(j.at("history"), vocab_, config_.max_history_events);
  const auto& iv = j.at("intervention");
  MedicalEvent event;
  event.system = parse_code_system(iv.at("system").get<std::string>());
  event.code = iv.value("code", std::string());
  if (iv.contains("paid") && !iv.at("paid").is_null()) event.paid = iv.at("paid").get<double>();

  req.prompt = prompt;
  const auto base = mc::simulate_futures(*model_, vocab_, req);
  req.prompt = mc::intervene(prompt, event, vocab_);
  const auto treated = mc::simulate_futures(*model_, vocab_, req);

  const bool verbose = knobs.value("verbose", false);
  json out;
  out["seed"] = req.base_seed;
  out["base"] = json::parse(mc::bundle_to_json(base, vocab_, verbose));
  out["intervened"] = json::parse(mc::bundle_to_json(treated, vocab_, verbose));
  auto deltas = json::array();
  const double n1 = static_cast<double>(base.n_futures()), n2 = static_cast<double>(treated.n_futures());
  for (std::size_t i = 0; i < req.predicates.size(); ++i) {
    const double p1 = base.event_probs[i].any_time, p2 = treated.event_probs[i].any_time;
    deltas.push_back({{"predicate", req.predicates[i]},
                      {"base", p1},
                      {"intervened", p2},
                      {"delta", p2 - p1},
                      {"std_error", std::sqrt(p1 * (1 - p1) / n1 + p2 * (1 - p2) / n2)}});
  }
  out["deltas"] = deltas;
  out["cost_delta"] = treated.predicted_cost - base.predicted_cost;
  return {200, out.dump()};
}

Response SimulationService::vocab_summary() const {
  json j;
  j["size"] = vocab_.size();
  json kinds = json::object();
  for (auto k : {CodeSystem::ICD10CM, CodeSystem::ICD10PCS, CodeSystem::CPT4, CodeSystem::HCPCS, CodeSystem::NDC,
                 CodeSystem::PLACE_OF_SERVICE, CodeSystem::DEMOGRAPHIC, CodeSystem::COST, CodeSystem::TIME_GAP,
                 CodeSystem::STRUCTURAL}) {
    kinds[std::string(to_string(k))] = vocab_.count(k);
  }
  j["kinds"] = kinds;
  j["cost_edges"] = vocab_.cost_edges();
  j["gap_edges"] = vocab_.gap_edges();
  auto tokens = json::array();
  for (const auto& t : vocab_.tokens()) tokens.push_back({{"id", t.id}, {"kind", to_string(t.kind)}, {"surface", t.surface}});
  j["tokens"] = tokens;
  return {200, j.dump()};
}

Response SimulationService::health() const {
  json j;
  j["status"] = degraded_.empty() ? "ok" : "degraded";
  if (!degraded_.empty()) j["reason"] = degraded_;
  j["model_config"] = json::parse(params_.config.to_json());
  j["vocab_size"] = vocab_.size();
  j["defaults"] = {{"n_futures", config_.n_futures},
                   {"horizon_days", config_.horizon_days},
                   {"temperature", config_.temperature},
                   {"top_k", config_.top_k},
                   {"predicates", config_.predicates}};
  return {200, j.dump()};
}

std::unique_ptr<SimulationService> load_service(const ServiceConfig& config) {
  if (config.checkpoint_path.empty() || config.vocab_path.empty()) {
    throw Error(ErrorCode::ConfigError, "checkpoint and vocab paths are required");
  }
  return std::make_unique<SimulationService>(model::load_checkpoint(config.checkpoint_path),
                                             Vocabulary::load(config.vocab_path), config);
}

// ---------------------------------------------------------------------------

struct HttpServer::Impl {
  const SimulationService& service;
  httplib::Server server;
  std::thread thread;

  explicit Impl(const SimulationService& s) : service(s) {
    auto route = [this](const httplib::Request& req, httplib::Response& res) {
      const auto r = service.handle(req.method, req.path, req.body);
      res.status = r.status;
      res.set_content(r.body, "application/json");
    };
    server.Get("/v1/health", route);
    server.Get("/v1/vocab", route);
    server.Post("/v1/simulate", route);
    server.Post("/v1/intervene", route);
    server.set_payload_max_length(service.config().max_body_bytes);
    server.new_task_queue = [this] {
      return new httplib::ThreadPool(static_cast<std::size_t>(service.config().max_concurrent) + 2);
    };
  }
};

HttpServer::HttpServer(const SimulationService& service) : impl_(std::make_unique<Impl>(service)) {}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw Error(ErrorCode::ConfigError, "cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void HttpServer::listen(const std::string& host, int port) {
  if (!impl_->server.listen(host, port)) {
    throw Error(ErrorCode::ConfigError, "cannot listen on " + host + ":" + std::to_string(port));
  }
}

void HttpServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace lmm::service
