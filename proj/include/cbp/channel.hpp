#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>
#include <vector>

#include "cbp/service.hpp"
#include "cbp/tokenizer.hpp"

namespace cbp::svc {

struct EvalOutcome {
  double mean_loss{0.0};
  std::vector<double> per_candidate;  // per_candidate_losses mode
  long evals_remaining{0};
  std::string checkpoint_digest;
};

struct MetaInfo {
  int d, m, t, r, V;
  std::string generator_digest, lm_digest;
  Eigen::VectorXd z0;
};

// Client-side typed wrapper over a raw transport. Keeps a local budget mirror
// and cross-checks it against the server's evals_remaining after every call.
class EvalChannel {
 public:
  virtual ~EvalChannel() = default;

  MetaInfo meta();
  void open_session(long budget);
  EvalOutcome eval(const Eigen::VectorXd& z,
                   const std::vector<lm::Example>& examples,
                   const std::string& mode = "loss",
                   const std::string& task_tag = "");

  long remaining() const { return remaining_; }
  long used() const { return used_; }
  const std::string& session_id() const { return session_; }

 protected:
  virtual Reply transport(const std::string& method, const std::string& path,
                          const std::string& body) = 0;
  // retries allowed only when the transport itself failed (idempotent by
  // request_id); loopback never fails
  virtual int max_attempts() const { return 1; }

 private:
  std::string session_;
  long budget_{0}, used_{0}, remaining_{0};
  long next_request_{1};
  std::string fresh_request_id();
};

class LoopbackChannel : public EvalChannel {
 public:
  explicit LoopbackChannel(Service& svc) : svc_(svc) {}

 protected:
  Reply transport(const std::string& method, const std::string& path,
                  const std::string& body) override {
    return svc_.handle(method, path, body);
  }

 private:
  Service& svc_;
};

class HttpChannel : public EvalChannel {
 public:
  HttpChannel(const std::string& host, int port);
  ~HttpChannel() override;

 protected:
  Reply transport(const std::string& method, const std::string& path,
                  const std::string& body) override;
  int max_attempts() const override { return 3; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace cbp::svc
