#include "cbp/channel.hpp"

#include <random>
#include <stdexcept>

#include <httplib.h>
#include <nlohmann/json.hpp>

using nlohmann::json;

namespace cbp::svc {

namespace {

[[noreturn]] void protocol_error(const std::string& what) {
  throw std::runtime_error("protocol error: " + what);
}

}  // namespace

std::string EvalChannel::fresh_request_id() {
  // client-chosen id, unique per session
  static std::random_device rd;
  return session_ + "-" + std::to_string(next_request_++) + "-" +
         std::to_string(rd());
}

MetaInfo EvalChannel::meta() {
  Reply r = transport("GET", "/v1/meta", "");
  if (r.status != 200) protocol_error("meta returned " + std::to_string(r.status));
  json j = json::parse(r.body);
  MetaInfo m;
  m.d = j.at("d").get<int>();
  m.m = j.at("m").get<int>();
  m.t = j.at("t").get<int>();
  m.r = j.at("r").get<int>();
  m.V = j.at("V").get<int>();
  m.generator_digest = j.at("generator_digest").get<std::string>();
  m.lm_digest = j.at("lm_digest").get<std::string>();
  const auto& z0 = j.at("z0");
  m.z0 = Eigen::VectorXd(z0.size());
  for (size_t i = 0; i < z0.size(); ++i) {
    m.z0[long(i)] = parse_real(z0[i].get<std::string>());
  }
  return m;
}

void EvalChannel::open_session(long budget) {
  Reply r = transport("POST", "/v1/session", json{{"budget", budget}}.dump());
  if (r.status != 200) {
    protocol_error("session open failed (" + std::to_string(r.status) +
                   "): " + r.body);
  }
  json j = json::parse(r.body);
  session_ = j.at("session_id").get<std::string>();
  budget_ = j.at("budget").get<long>();
  used_ = 0;
  remaining_ = budget_;
}

EvalOutcome EvalChannel::eval(const Eigen::VectorXd& z,
                              const std::vector<lm::Example>& examples,
                              const std::string& mode,
                              const std::string& task_tag) {
  if (session_.empty()) protocol_error("eval before session open");
  if (remaining_ <= 0) {
    protocol_error("local budget mirror exhausted (" + std::to_string(budget_) +
                   " evals used)");
  }
  json z_arr = json::array();
  for (int i = 0; i < z.size(); ++i) z_arr.push_back(fmt_real(z[i]));
  json ex_arr = json::array();
  for (const auto& ex : examples) {
    ex_arr.push_back(json{{"instruction_ids", ex.instruction_ids.ids},
                          {"answer_ids", ex.answer_ids.ids}});
  }
  json req{{"request_id", fresh_request_id()},
           {"session_id", session_},
           {"task_tag", task_tag},
           {"z", z_arr},
           {"examples", ex_arr},
           {"mode", mode}};
  const std::string body = req.dump();

  Reply r{0, ""};
  std::string last_err;
  for (int attempt = 0; attempt < max_attempts(); ++attempt) {
    try {
      r = transport("POST", "/v1/eval", body);
      break;
    } catch (const std::exception& e) {
      last_err = e.what();
      r.status = 0;
    }
  }
  if (r.status == 0) protocol_error("transport failed: " + last_err);
  if (r.status != 200) {
    protocol_error("eval failed (" + std::to_string(r.status) + "): " + r.body);
  }
  json j = json::parse(r.body);

  EvalOutcome out;
  out.checkpoint_digest = j.at("server_checkpoint_digest").get<std::string>();
  out.evals_remaining = j.at("evals_remaining").get<long>();
  if (mode == "loss") {
    out.mean_loss = parse_real(j.at("mean_loss").get<std::string>());
  } else {
    for (const auto& s : j.at("losses")) {
      out.per_candidate.push_back(parse_real(s.get<std::string>()));
    }
  }

  ++used_;
  --remaining_;
  if (out.evals_remaining != remaining_) {
    protocol_error("budget mirror disagreement: server says " +
                   std::to_string(out.evals_remaining) + " remaining, client " +
                   std::to_string(remaining_));
  }
  return out;
}

struct HttpChannel::Impl {
  httplib::Client cli;
  Impl(const std::string& host, int port) : cli(host, port) {
    cli.set_connection_timeout(5);
    cli.set_read_timeout(60);
  }
};

HttpChannel::HttpChannel(const std::string& host, int port)
    : impl_(std::make_unique<Impl>(host, port)) {}

HttpChannel::~HttpChannel() = default;

Reply HttpChannel::transport(const std::string& method, const std::string& path,
                             const std::string& body) {
  httplib::Result res = (method == "GET")
                            ? impl_->cli.Get(path)
                            : impl_->cli.Post(path, body, "application/json");
  if (!res) {
    throw std::runtime_error("http transport error: " +
                             httplib::to_string(res.error()));
  }
  return Reply{res->status, res->body};
}

}  // namespace cbp::svc
