#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "cbp/generator.hpp"
#include "cbp/toy_lm.hpp"

namespace cbp::svc {

// Reals cross the wire as decimal strings so both transports emit identical
// bytes and round-trip exactly.
std::string fmt_real(double x);
double parse_real(const std::string& s);

struct SessionLedger {
  std::string session_id;
  long budget{0};
  long used{0};
  std::map<std::string, long> histogram;  // message type -> count
};

struct Reply {
  int status;
  std::string body;  // JSON
};

// The z-conditioned evaluation service. Owns the frozen LM and the trained
// generator; exposes the same JSON handlers to the in-process loopback and
// the HTTP transport, so responses are byte-identical across transports.
class Service {
 public:
  struct Config {
    bool serve_generator{false};  // optional generator-checkpoint download
    bool drop_instance{false};    // mirror of the generator's training ablation
    std::size_t max_batch{128};
    std::size_t dedup_window{1024};
  };

  Service(lm::FrozenLM lm, gen::GeneratorParams gen, Config cfg,
          std::string audit_log_path = "");

  Reply handle(const std::string& method, const std::string& path,
               const std::string& body);

  std::vector<SessionLedger> ledgers() const;
  const lm::FrozenLM& lm() const { return lm_; }
  const gen::GeneratorParams& generator() const { return gen_; }
  std::string checkpoint_digest() const { return checkpoint_digest_; }

 private:
  lm::FrozenLM lm_;
  gen::GeneratorParams gen_;
  Config cfg_;
  std::string audit_path_;
  std::string lm_digest_, gen_digest_, checkpoint_digest_;

  mutable std::mutex mu_;
  struct Session {
    SessionLedger ledger;
    std::map<std::string, std::string> dedup;  // request_id -> cached body
    std::vector<std::string> dedup_order;
  };
  std::map<std::string, Session> sessions_;
  long next_session_{1};

  Reply handle_session(const std::string& body);
  Reply handle_eval(const std::string& body);
  Reply handle_meta() const;
  void audit(const std::string& session, const std::string& msg_type,
             std::size_t bytes);
};

// Serves a Service over HTTP on a background thread.
class HttpServer {
 public:
  HttpServer(Service& svc, const std::string& host, int port);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;
  int port() const { return port_; }
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_;
};

// Loads both checkpoints (digest-verified) and returns a ready service.
std::unique_ptr<Service> make_service(const std::string& lm_checkpoint,
                                      const std::string& gen_checkpoint,
                                      Service::Config cfg,
                                      const std::string& audit_log_path);

}  // namespace cbp::svc
