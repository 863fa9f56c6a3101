#include "cbp/service.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

using nlohmann::json;

namespace cbp::svc {

std::string fmt_real(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

double parse_real(const std::string& s) {
  std::size_t pos = 0;
  double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("bad real: " + s);
  return v;
}

namespace {

json error_body(const std::string& code, const std::string& detail) {
  return json{{"error", code}, {"detail", detail}};
}

std::vector<int> get_ids(const json& j, const char* key) {
  return j.at(key).get<std::vector<int>>();
}

}  // namespace

Service::Service(lm::FrozenLM lm, gen::GeneratorParams gen, Config cfg,
                 std::string audit_log_path)
    : lm_(std::move(lm)), gen_(std::move(gen)), cfg_(cfg),
      audit_path_(std::move(audit_log_path)) {
  lm_digest_ = hex(lm_.weights_digest());
  gen_digest_ = hex(gen_.digest());
  checkpoint_digest_ = hex(sha256(lm_digest_ + ":" + gen_digest_));
}

void Service::audit(const std::string& session, const std::string& msg_type,
                    std::size_t bytes) {
  if (audit_path_.empty()) return;
  const auto ts = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::system_clock::now().time_since_epoch())
                      .count();
  json j{{"ts", ts}, {"session", session}, {"msg_type", msg_type},
         {"bytes", bytes}};
  std::ofstream os(audit_path_, std::ios::app);
  os << j.dump() << "\n";
}

Reply Service::handle(const std::string& method, const std::string& path,
                      const std::string& body) {
  try {
    if (method == "GET" && path == "/v1/health") {
      audit("", "health", body.size());
      return {200, json{{"status", "ok"}}.dump()};
    }
    if (method == "GET" && path == "/v1/meta") {
      audit("", "meta", body.size());
      return handle_meta();
    }
    if (method == "POST" && path == "/v1/session") {
      return handle_session(body);
    }
    if (method == "POST" && path == "/v1/eval") {
      return handle_eval(body);
    }
    if (method == "GET" && path == "/v1/generator") {
      if (!cfg_.serve_generator) {
        audit("", "unknown", body.size());
        return {404, error_body("not_found", "generator distribution disabled").dump()};
      }
      audit("", "generator", body.size());
      json j{{"d", gen_.dims.d}, {"m", gen_.dims.m}, {"t", gen_.dims.t},
             {"r", gen_.dims.r}, {"digest", gen_digest_}};
      json z0 = json::array();
      for (int i = 0; i < gen_.dims.r; ++i) z0.push_back(fmt_real(gen_.z0.value(i, 0)));
      j["z0"] = z0;
      return {200, j.dump()};
    }
    audit("", "unknown", body.size());
    return {404, error_body("not_found", path).dump()};
  } catch (const json::exception& e) {
    return {400, error_body("bad_json", e.what()).dump()};
  } catch (const std::invalid_argument& e) {
    return {400, error_body("bad_request", e.what()).dump()};
  } catch (const std::exception& e) {
    return {500, error_body("internal", e.what()).dump()};
  }
}

Reply Service::handle_meta() const {
  json j{{"d", gen_.dims.d},       {"m", gen_.dims.m},
         {"t", gen_.dims.t},       {"r", gen_.dims.r},
         {"V", lm_.cfg.vocab_size}, {"generator_digest", gen_digest_},
         {"lm_digest", lm_digest_}};
  // the domain-initialized task vector the client customizes from
  json z0 = json::array();
  for (int i = 0; i < gen_.dims.r; ++i) z0.push_back(fmt_real(gen_.z0.value(i, 0)));
  j["z0"] = z0;
  return {200, j.dump()};
}

Reply Service::handle_session(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error& e) {
    audit("", "session", body.size());
    return {400, error_body("bad_json", e.what()).dump()};
  }
  const long budget = j.at("budget").get<long>();
  if (budget < 1) {
    audit("", "session", body.size());
    return {400, error_body("bad_request", "budget must be >= 1").dump()};
  }
  std::lock_guard<std::mutex> lk(mu_);
  std::string sid = "s" + std::to_string(next_session_++);
  Session s;
  s.ledger.session_id = sid;
  s.ledger.budget = budget;
  s.ledger.histogram["session"] = 1;
  sessions_[sid] = std::move(s);
  audit(sid, "session", body.size());
  return {200, json{{"session_id", sid}, {"budget", budget}}.dump()};
}

Reply Service::handle_eval(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error& e) {
    audit("", "eval", body.size());
    return {400, error_body("bad_json", std::string(e.what())).dump()};
  }
  const std::string sid = j.at("session_id").get<std::string>();
  const std::string rid = j.at("request_id").get<std::string>();

  {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = sessions_.find(sid);
    if (it == sessions_.end()) {
      audit(sid, "eval", body.size());
      return {404, error_body("no_session", sid).dump()};
    }
    auto dit = it->second.dedup.find(rid);
    if (dit != it->second.dedup.end()) {
      // idempotent retry: replay without charging the budget again
      audit(sid, "eval", body.size());
      return {200, dit->second};
    }
    if (it->second.ledger.used >= it->second.ledger.budget) {
      audit(sid, "eval", body.size());
      return {429, error_body("budget_exhausted",
                              "used " + std::to_string(it->second.ledger.used) +
                                  " of " + std::to_string(it->second.ledger.budget))
                       .dump()};
    }
  }

  const auto z_str = j.at("z").get<std::vector<std::string>>();
  if (static_cast<int>(z_str.size()) != gen_.dims.r) {
    audit(sid, "eval", body.size());
    return {400, error_body("r_mismatch",
                            "server r is " + std::to_string(gen_.dims.r) +
                                ", request carries " + std::to_string(z_str.size()))
                     .dump()};
  }
  Eigen::VectorXd z(gen_.dims.r);
  for (int i = 0; i < gen_.dims.r; ++i) z[i] = parse_real(z_str[i]);

  const auto& examples = j.at("examples");
  if (!examples.is_array() || examples.empty()) {
    audit(sid, "eval", body.size());
    return {400, error_body("bad_request", "examples must be nonempty").dump()};
  }
  if (examples.size() > cfg_.max_batch) {
    audit(sid, "eval", body.size());
    return {400, error_body("batch_limit",
                            "batch " + std::to_string(examples.size()) +
                                " exceeds limit " + std::to_string(cfg_.max_batch))
                     .dump()};
  }
  const std::string mode = j.value("mode", "loss");
  if (mode != "loss" && mode != "per_candidate_losses") {
    audit(sid, "eval", body.size());
    return {400, error_body("bad_request", "unknown mode " + mode).dump()};
  }

  std::vector<lm::Example> exs(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    exs[i].instruction_ids.ids = get_ids(examples[i], "instruction_ids");
    exs[i].answer_ids.ids = get_ids(examples[i], "answer_ids");
  }

  // Candidate batches repeat the same instruction back to back with answers
  // that differ only in their final token. The prompt depends only on
  // (instruction, z) and, under causal masking, every logit row a loss term
  // reads depends only on the shared prefix -- so one forward pass serves the
  // whole run of candidates with bit-identical results.
  std::vector<double> losses(exs.size());
  std::size_t i = 0;
  while (i < exs.size()) {
    std::size_t j = i + 1;
    const auto& a0 = exs[i].answer_ids.ids;
    while (j < exs.size() && exs[j].instruction_ids.ids == exs[i].instruction_ids.ids &&
           exs[j].answer_ids.ids.size() == a0.size() && !a0.empty() &&
           std::equal(a0.begin(), a0.end() - 1, exs[j].answer_ids.ids.begin())) {
      ++j;
    }
    ad::Matrix prompt =
        gen_.prompt_for(lm_, exs[i].instruction_ids.ids, z, cfg_.drop_instance);
    const bool has_context =
        prompt.rows() + exs[i].instruction_ids.length() + long(a0.size()) >= 2;
    if (j - i == 1 || !has_context) {
      for (std::size_t e = i; e < j; ++e) {
        losses[e] = lm_.answer_loss(prompt, exs[e]);
      }
    } else {
      std::vector<int> ids = exs[i].instruction_ids.ids;
      ids.insert(ids.end(), a0.begin(), a0.end());
      const ad::Matrix logits = lm_.forward_logits(prompt, ids);
      const long base = prompt.rows() + exs[i].instruction_ids.length();
      const long L = long(a0.size());
      double shared = 0.0;
      for (long k = 0; k + 1 < L; ++k) {
        shared += ad::cross_entropy_row(logits.row(base + k - 1), a0[std::size_t(k)]);
      }
      for (std::size_t e = i; e < j; ++e) {
        const double last = ad::cross_entropy_row(logits.row(base + L - 2),
                                                  exs[e].answer_ids.ids.back());
        losses[e] = (shared + last) / double(L);
      }
    }
    i = j;
  }

  long remaining = 0;
  json resp{{"request_id", rid}, {"server_checkpoint_digest", checkpoint_digest_}};
  if (mode == "loss") {
    double mean = 0.0;
    for (double l : losses) mean += l;
    mean /= double(losses.size());
    resp["mean_loss"] = fmt_real(mean);
  } else {
    json arr = json::array();
    for (double l : losses) arr.push_back(fmt_real(l));
    resp["losses"] = arr;
  }

  {
    std::lock_guard<std::mutex> lk(mu_);
    auto& s = sessions_.at(sid);
    if (s.ledger.used >= s.ledger.budget) {
      audit(sid, "eval", body.size());
      return {429, error_body("budget_exhausted", "raced out of budget").dump()};
    }
    s.ledger.used += 1;
    s.ledger.histogram["eval"] += 1;
    remaining = s.ledger.budget - s.ledger.used;
    resp["evals_remaining"] = remaining;
    std::string out = resp.dump();
    s.dedup[rid] = out;
    s.dedup_order.push_back(rid);
    if (s.dedup_order.size() > cfg_.dedup_window) {
      s.dedup.erase(s.dedup_order.front());
      s.dedup_order.erase(s.dedup_order.begin());
    }
    audit(sid, "eval", body.size());
    return {200, out};
  }
}

std::vector<SessionLedger> Service::ledgers() const {
  std::lock_guard<std::mutex> lk(mu_);
  std::vector<SessionLedger> out;
  for (const auto& [_, s] : sessions_) out.push_back(s.ledger);
  return out;
}

struct HttpServer::Impl {
  httplib::Server srv;
  std::thread th;
};

HttpServer::HttpServer(Service& svc, const std::string& host, int port)
    : impl_(std::make_unique<Impl>()), port_(port) {
  auto route = [&svc](const std::string& method) {
    return [&svc, method](const httplib::Request& req, httplib::Response& res) {
      Reply r = svc.handle(method, req.path, req.body);
      res.status = r.status;
      res.set_content(r.body, "application/json");
    };
  };
  impl_->srv.Get("/v1/health", route("GET"));
  impl_->srv.Get("/v1/meta", route("GET"));
  impl_->srv.Get("/v1/generator", route("GET"));
  impl_->srv.Post("/v1/session", route("POST"));
  impl_->srv.Post("/v1/eval", route("POST"));
  if (port_ == 0) {
    port_ = impl_->srv.bind_to_any_port(host);
  } else if (!impl_->srv.bind_to_port(host, port_)) {
    throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port_));
  }
  impl_->th = std::thread([this] { impl_->srv.listen_after_bind(); });
  impl_->srv.wait_until_ready();
}

void HttpServer::stop() {
  if (impl_ && impl_->th.joinable()) {
    impl_->srv.stop();
    impl_->th.join();
  }
}

HttpServer::~HttpServer() { stop(); }

std::unique_ptr<Service> make_service(const std::string& lm_checkpoint,
                                      const std::string& gen_checkpoint,
                                      Service::Config cfg,
                                      const std::string& audit_log_path) {
  lm::FrozenLM lm = lm::FrozenLM::load(lm_checkpoint);
  gen::GeneratorParams gp = gen::GeneratorParams::load(gen_checkpoint);
  if (gp.dims.d != lm.cfg.model_dim) {
    throw std::runtime_error("generator d=" + std::to_string(gp.dims.d) +
                             " does not match LM d=" +
                             std::to_string(lm.cfg.model_dim));
  }
  return std::make_unique<Service>(std::move(lm), std::move(gp), cfg,
                                   audit_log_path);
}

}  // namespace cbp::svc
