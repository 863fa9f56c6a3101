#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cbp/channel.hpp"
#include "cbp/pipeline.hpp"
#include "cbp/service.hpp"
#include "cbp/ulc.hpp"

namespace pl = cbp::pipeline;

namespace {

// Minimal TOML-subset reader: `key = value` lines, # comments, flat file.
std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r\"");
      const auto b = s.find_last_not_of(" \t\r\"");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                  ": expected key = value");
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

void apply_config(pl::Preset& p, const std::map<std::string, std::string>& kv) {
  for (const auto& [key, val] : kv) {
    if (key == "preset") continue;  // informational
    else if (key == "budget") p.ulc_cfg.budget = std::stol(val);
    else if (key == "population") p.ulc_cfg.population = std::stoi(val);
    else if (key == "sigma0") p.ulc_cfg.sigma0 = std::stod(val);
    else if (key == "ridge") p.ulc_cfg.ridge = std::stod(val);
    else if (key == "shots") { p.shots = std::stoi(val); p.ulc_cfg.shots = p.shots; }
    else if (key == "subspace_dim") p.dims.r = std::stoi(val);
    else if (key == "bottleneck") p.dims.m = std::stoi(val);
    else if (key == "prompt_len") p.dims.t = std::stoi(val);
    else if (key == "eval_n") p.eval_n = std::stoi(val);
    else if (key == "domain_n_per_family") p.domain_n_per_family = std::stoi(val);
    else if (key == "sdt_lr") p.sdt_cfg.learning_rate = std::stod(val);
    else if (key == "sdt_epochs") p.sdt_cfg.epochs = std::stoi(val);
    else if (key == "sdt_batch") p.sdt_cfg.batch_size = std::stoi(val);
    else if (key == "pretrain_epochs") p.pretrain_epochs = std::stoi(val);
    else if (key == "pretrain_lr") p.pretrain_lr = std::stod(val);
    else throw std::invalid_argument("unknown config key: " + key);
  }
}

struct CommonOpts {
  std::string preset_name{"commonsense-toy"};
  std::string config_file;
  // symbol-named flag overrides; <0 / empty means "preset value"
  long budget{-1};
  int population{-1};
  double sigma0{-1.0};
  double ridge{-1.0};
  int subspace_dim{-1};
  int bottleneck{-1};
  int prompt_len{-1};

  pl::Preset resolve() const {
    pl::Preset p = pl::preset_by_name(preset_name);
    if (!config_file.empty()) apply_config(p, read_config_file(config_file));
    if (budget >= 0) p.ulc_cfg.budget = budget;
    if (population >= 0) p.ulc_cfg.population = population;
    if (sigma0 >= 0) p.ulc_cfg.sigma0 = sigma0;
    if (ridge >= 0) p.ulc_cfg.ridge = ridge;
    if (subspace_dim >= 0) p.dims.r = subspace_dim;
    if (bottleneck >= 0) p.dims.m = bottleneck;
    if (prompt_len >= 0) p.dims.t = prompt_len;
    p.ulc_cfg.validate();
    p.sdt_cfg.validate();
    return p;
  }
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--preset", o.preset_name, "commonsense-toy | medical-toy | financial-toy");
  cmd->add_option("--config", o.config_file, "TOML-style preset file");
  cmd->add_option("--budget", o.budget, "evaluation budget B");
  cmd->add_option("--population", o.population, "CMA-ES population lambda");
  cmd->add_option("--sigma0", o.sigma0, "initial step size sigma");
  cmd->add_option("--ridge", o.ridge, "proximal pull toward z0 during customization");
  cmd->add_option("--subspace-dim", o.subspace_dim, "task-vector dimension r");
  cmd->add_option("--bottleneck", o.bottleneck, "generator bottleneck m");
  cmd->add_option("--prompt-len", o.prompt_len, "soft prompt length t");
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoull(tok));
  if (out.empty()) throw std::invalid_argument("need at least one seed");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CBP-style two-stage prompt tuning over a toy frozen LM"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string artifacts = "artifacts";
  std::string results = "results";
  std::string seeds_str = "1,2,3";
  std::string arms_str;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string snapshot_path;

  auto* pretrain = app.add_subcommand("pretrain", "build the domain corpus and the frozen toy LM");
  add_common(pretrain, opts);
  pretrain->add_option("--artifacts", artifacts, "artifact directory");

  auto* sdt = app.add_subcommand("sdt", "server-side domain training of the prompt generator");
  add_common(sdt, opts);
  sdt->add_option("--artifacts", artifacts);

  auto* serve = app.add_subcommand("serve", "run the evaluation service over HTTP");
  add_common(serve, opts);
  serve->add_option("--artifacts", artifacts);
  serve->add_option("--host", host);
  serve->add_option("--port", port, "0 picks a free port");

  auto* customize = app.add_subcommand("customize", "client-side CMA-ES customization of one task");
  add_common(customize, opts);
  std::string task_id = "parity";
  std::uint64_t one_seed = 1;
  std::string out_json = "customized.json";
  std::string server;  // host:port; empty = in-process loopback
  customize->add_option("--artifacts", artifacts);
  customize->add_option("--task", task_id, "parity | smallest | mostly | tally");
  customize->add_option("--seed", one_seed);
  customize->add_option("--out", out_json);
  customize->add_option("--server", server, "host:port of a running serve command (default: loopback)");
  customize->add_option("--snapshot", snapshot_path, "per-generation resume file");

  auto* evalc = app.add_subcommand("eval", "run comparison arms and write per-seed result JSON");
  add_common(evalc, opts);
  evalc->add_option("--artifacts", artifacts);
  evalc->add_option("--results", results);
  evalc->add_option("--seeds", seeds_str, "comma-separated");
  evalc->add_option("--arms", arms_str, "comma-separated subset (default: all)");

  auto* report = app.add_subcommand("report", "aggregate results into markdown + CSV tables");
  report->add_option("--results", results);

  auto* runall = app.add_subcommand("run-all", "pretrain + sdt + eval + report in one go");
  add_common(runall, opts);
  runall->add_option("--artifacts", artifacts);
  runall->add_option("--results", results);
  runall->add_option("--seeds", seeds_str);

  CLI11_PARSE(app, argc, argv);

  try {
    auto do_eval = [&](const pl::Preset& p) {
      std::set<std::string> arms;
      if (arms_str.empty()) {
        arms.insert(pl::all_arms().begin(), pl::all_arms().end());
      } else {
        std::stringstream ss(arms_str);
        std::string tok;
        while (std::getline(ss, tok, ',')) arms.insert(tok);
      }
      pl::run_arms(p, artifacts, results, parse_seeds(seeds_str), arms);
    };
    auto do_report = [&] {
      pl::Aggregate agg = pl::aggregate_results(results);
      pl::write_report_markdown(results + "/report.md", agg);
      pl::write_report_csv(results + "/report.csv", agg);
      std::ifstream is(results + "/report.md");
      std::cout << is.rdbuf();
    };

    if (pretrain->parsed()) {
      pl::build_lm(opts.resolve(), artifacts);
      std::cout << "wrote " << pl::artifact_paths(artifacts).lm_ckpt << "\n";
    } else if (sdt->parsed()) {
      pl::build_server_artifacts(opts.resolve(), artifacts);
      std::cout << "wrote " << pl::artifact_paths(artifacts).gen_ckpt << "\n";
    } else if (serve->parsed()) {
      auto paths = pl::artifact_paths(artifacts);
      auto svc = cbp::svc::make_service(paths.lm_ckpt, paths.gen_ckpt, {},
                                        artifacts + "/audit.jsonl");
      cbp::svc::HttpServer http(*svc, host, port);
      std::cout << "serving on " << host << ":" << http.port()
                << " (checkpoint " << svc->checkpoint_digest() << ")\n"
                << "press enter to stop\n";
      std::string line;
      std::getline(std::cin, line);
    } else if (customize->parsed()) {
      pl::Preset p = opts.resolve();
      cbp::data::TaskSpec spec{task_id, cbp::data::family_from_name(task_id), 0};
      auto split = cbp::data::make_customization_task(spec, p.shots, p.eval_n, one_seed);
      auto paths = pl::artifact_paths(artifacts);
      std::unique_ptr<cbp::svc::Service> svc;
      std::unique_ptr<cbp::svc::EvalChannel> ch;
      if (server.empty()) {
        svc = cbp::svc::make_service(paths.lm_ckpt, paths.gen_ckpt, {},
                                     artifacts + "/audit.jsonl");
        ch = std::make_unique<cbp::svc::LoopbackChannel>(*svc);
      } else {
        const auto colon = server.rfind(':');
        if (colon == std::string::npos) {
          throw std::invalid_argument("--server expects host:port");
        }
        ch = std::make_unique<cbp::svc::HttpChannel>(
            server.substr(0, colon), std::stoi(server.substr(colon + 1)));
      }
      cbp::svc::MetaInfo meta = ch->meta();
      cbp::ulc::UlcConfig ucfg = p.ulc_cfg;
      ucfg.seed = one_seed;
      ucfg.snapshot_path = snapshot_path;
      ch->open_session(ucfg.budget);
      auto res = cbp::ulc::customize(*ch, split.shots, meta.z0, ucfg);
      const std::string trace_path = out_json + ".trace.csv";
      cbp::cmaes::write_trace_csv(trace_path, res.trace);
      cbp::ulc::save_result_json(out_json, res, p.name, trace_path);
      std::cout << "final loss " << res.final_loss << " after "
                << res.evals_used << " evals; wrote " << out_json << "\n";
    } else if (evalc->parsed()) {
      do_eval(opts.resolve());
    } else if (report->parsed()) {
      do_report();
    } else if (runall->parsed()) {
      pl::Preset p = opts.resolve();
      pl::build_lm(p, artifacts);
      pl::build_server_artifacts(p, artifacts);
      do_eval(p);
      do_report();
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::runtime_error& e) {
    const std::string what = e.what();
    std::cerr << "error: " << what << "\n";
    return what.find("diverged") != std::string::npos ? 4 : 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
