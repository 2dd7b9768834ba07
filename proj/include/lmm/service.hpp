#ifndef LMM_SERVICE_HPP
#define LMM_SERVICE_HPP

#include <atomic>
#include <memory>
#include <string>
#include <vector>

#include "lmm/model.hpp"
#include "lmm/montecarlo.hpp"
#include "lmm/vocab.hpp"

namespace lmm::service {

/// Config file: one `key = value` per line, `#` starts a comment, string
/// values may be double-quoted. `predicates` is a comma-separated list.
struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string checkpoint_path;
  std::string vocab_path;

  int n_futures = 64;
  double horizon_days = 365;
  double temperature = 1.0;
  int top_k = 0;
  std::vector<std::string> predicates{"DX:G20"};

  int max_concurrent = 4;
  int max_futures = 4096;
  std::size_t max_body_bytes = 1 << 20;
  std::size_t max_history_events = 5000;
  unsigned threads = 0;

  /// Throws ConfigError.
  void validate() const;
};

ServiceConfig parse_config(std::string_view text);
ServiceConfig load_config(const std::string& path);

struct Response {
  int status = 200;
  std::string body;
};

/// Transport-independent request handling over one immutable model and
/// vocabulary. Thread-safe; the only mutable state is the in-flight counter.
class SimulationService {
 public:
  SimulationService(model::ModelParameters params, Vocabulary vocab, ServiceConfig config);

  Response handle(const std::string& method, const std::string& path, const std::string& body) const;

  /// Non-empty when the vocabulary and checkpoint disagree; simulation
  /// endpoints then answer 422.
  const std::string& degraded_reason() const { return degraded_; }
  const ServiceConfig& config() const { return config_; }

  /// Holds one simulation slot; empty when the limit is reached.
  class Slot {
   public:
    Slot() = default;
    explicit Slot(std::atomic<int>* counter) : counter_(counter) {}
    Slot(Slot&& o) noexcept : counter_(o.counter_) { o.counter_ = nullptr; }
    Slot& operator=(Slot&&) = delete;
    ~Slot() {
      if (counter_) counter_->fetch_sub(1);
    }
    explicit operator bool() const { return counter_ != nullptr; }

   private:
    std::atomic<int>* counter_ = nullptr;
  };
  Slot try_acquire() const;

 private:
  Response simulate(const std::string& body) const;
  Response intervene(const std::string& body) const;
  Response vocab_summary() const;
  Response health() const;

  model::ModelParameters params_;
  Vocabulary vocab_;
  ServiceConfig config_;
  std::unique_ptr<mc::TransformerModel> model_;
  std::string degraded_;
  mutable std::atomic<int> in_flight_{0};
};

/// Loads checkpoint and vocabulary named in the config.
std::unique_ptr<SimulationService> load_service(const ServiceConfig& config);

/// HTTP front end. start() binds and serves on a background thread.
class HttpServer {
 public:
  explicit HttpServer(const SimulationService& service);
  ~HttpServer();
  /// Returns the bound port (port 0 picks a free one).
  int start(const std::string& host, int port);
  /// Blocks until stop() is called from another thread.
  void listen(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace lmm::service

#endif  // LMM_SERVICE_HPP
