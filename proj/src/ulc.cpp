#include "cbp/ulc.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace cbp::ulc {

void UlcConfig::validate() const {
  if (shots < 1) throw std::invalid_argument("shots must be >= 1");
  if (population < 2) throw std::invalid_argument("population must be >= 2");
  if (budget < population) {
    throw std::invalid_argument("budget " + std::to_string(budget) +
                                " below population " + std::to_string(population) +
                                "; a zero-generation run is not allowed");
  }
  if (sigma0 <= 0.0) throw std::invalid_argument("sigma0 must be positive");
  if (ridge < 0.0) throw std::invalid_argument("ridge must be non-negative");
}

namespace {

struct RunState {
  cmaes::CmaState cma;
  Eigen::VectorXd best_z;
  double best_f{std::numeric_limits<double>::infinity()};
  long evals_used{0};
  std::vector<cmaes::GenStats> trace;
};

void save_snapshot(const std::string& path, const RunState& rs) {
  std::ostringstream cma_text;
  rs.cma.save_text(cma_text);
  nlohmann::json j;
  j["cma"] = cma_text.str();
  j["best_f"] = svc::fmt_real(rs.best_f);
  auto bz = nlohmann::json::array();
  for (int i = 0; i < rs.best_z.size(); ++i) bz.push_back(svc::fmt_real(rs.best_z[i]));
  j["best_z"] = bz;
  j["evals_used"] = rs.evals_used;
  auto tr = nlohmann::json::array();
  for (const auto& g : rs.trace) {
    tr.push_back({{"generation", g.generation},
                  {"evals_used", g.evals_used},
                  {"best_fitness", svc::fmt_real(g.best_fitness)},
                  {"sigma", svc::fmt_real(g.sigma)},
                  {"mean_norm", svc::fmt_real(g.mean_norm)}});
  }
  j["trace"] = tr;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp);
    os << j.dump() << "\n";
  }
  std::filesystem::rename(tmp, path);
}

RunState load_snapshot(const std::string& path) {
  std::ifstream is(path);
  nlohmann::json j;
  is >> j;
  std::istringstream cma_text(j.at("cma").get<std::string>());
  RunState rs{cmaes::CmaState::load_text(cma_text), {}, 0.0, 0, {}};
  rs.best_f = svc::parse_real(j.at("best_f").get<std::string>());
  const auto& bz = j.at("best_z");
  rs.best_z = Eigen::VectorXd(bz.size());
  for (size_t i = 0; i < bz.size(); ++i) {
    rs.best_z[long(i)] = svc::parse_real(bz[i].get<std::string>());
  }
  rs.evals_used = j.at("evals_used").get<long>();
  for (const auto& g : j.at("trace")) {
    rs.trace.push_back(cmaes::GenStats{
        g.at("generation").get<long>(), g.at("evals_used").get<long>(),
        svc::parse_real(g.at("best_fitness").get<std::string>()),
        svc::parse_real(g.at("sigma").get<std::string>()),
        svc::parse_real(g.at("mean_norm").get<std::string>())});
  }
  return rs;
}

}  // namespace

CustomizedTask customize(svc::EvalChannel& channel,
                         const std::vector<data::Instance>& task_shots,
                         const Eigen::VectorXd& z0, const UlcConfig& cfg) {
  cfg.validate();
  if (task_shots.empty()) throw std::invalid_argument("no customization shots");
  if (static_cast<int>(task_shots.size()) != cfg.shots) {
    throw std::invalid_argument("shot set size " +
                                std::to_string(task_shots.size()) +
                                " != configured shots " + std::to_string(cfg.shots));
  }

  // All shots travel in one request per CMA-ES candidate. The batch holds
  // every (shot, answer option) pair so the fitness can be the multiple-choice
  // cross-entropy over the option set -- minimizing the gold loss alone can
  // lower every option's loss uniformly without improving discrimination.
  std::vector<lm::Example> batch;
  std::vector<int> gold_idx, first_of_shot;
  for (const auto& inst : task_shots) {
    first_of_shot.push_back(int(batch.size()));
    int gi = -1;
    for (size_t i = 0; i < inst.candidates.size(); ++i) {
      if (inst.candidates[i] == inst.answer) gi = int(batch.size());
      batch.push_back(data::to_example(inst, inst.candidates[i]));
    }
    if (gi < 0) throw std::invalid_argument("shot answer missing from its candidate set");
    gold_idx.push_back(gi);
  }
  first_of_shot.push_back(int(batch.size()));
  auto choice_ce = [&](const std::vector<double>& losses) {
    double total = 0.0;
    for (size_t s = 0; s < gold_idx.size(); ++s) {
      double lse = 0.0;
      for (int i = first_of_shot[s]; i < first_of_shot[s + 1]; ++i) {
        lse += std::exp(losses[size_t(gold_idx[s])] - losses[size_t(i)]);
      }
      total += std::log(lse);
    }
    return total / double(gold_idx.size());
  };
  const std::string task_tag = task_shots.front().task_id;

  const long generations = cfg.budget / cfg.population;

  RunState rs{cmaes::CmaState::init(z0, cfg.sigma0, cfg.population, cfg.seed),
              z0, std::numeric_limits<double>::infinity(), 0, {}};
  if (!cfg.snapshot_path.empty() && std::filesystem::exists(cfg.snapshot_path)) {
    rs = load_snapshot(cfg.snapshot_path);
  }

  while (rs.cma.generation < generations) {
    std::vector<cmaes::Candidate> cands = rs.cma.ask();
    if (cfg.inject_z0 && rs.cma.generation == 0) cands[0].z = z0;
    int n_bad = 0;
    for (auto& c : cands) {
      // a channel failure here propagates; the per-generation snapshot below
      // is what a restarted run resumes from
      auto out = channel.eval(c.z, batch, "per_candidate_losses", task_tag);
      double f = choice_ce(out.per_candidate) + cfg.ridge * (c.z - z0).squaredNorm();
      ++rs.evals_used;
      if (std::isnan(f)) {
        f = std::numeric_limits<double>::infinity();
        ++n_bad;
      }
      c.fitness = f;
      if (c.fitness < rs.best_f) {
        rs.best_f = c.fitness;
        rs.best_z = c.z;
      }
    }
    if (n_bad == cfg.population) {
      throw std::runtime_error("all candidates of generation " +
                               std::to_string(rs.cma.generation + 1) +
                               " failed to evaluate");
    }
    rs.cma.tell(std::move(cands));
    rs.trace.push_back(cmaes::GenStats{rs.cma.generation, rs.evals_used,
                                       rs.best_f, rs.cma.sigma,
                                       rs.cma.mean.norm()});
    if (!cfg.snapshot_path.empty()) save_snapshot(cfg.snapshot_path, rs);
  }

  CustomizedTask out;
  out.task_id = task_tag;
  out.z_star = rs.best_z;
  out.final_loss = rs.best_f;
  out.evals_used = rs.evals_used;
  out.trace = std::move(rs.trace);
  return out;
}

EvalReport evaluate_with_vector(svc::EvalChannel& channel,
                                const std::vector<data::Instance>& eval_set,
                                const Eigen::VectorXd& z) {
  if (eval_set.empty()) throw std::invalid_argument("empty evaluation split");
  EvalReport rep;
  for (const auto& inst : eval_set) {
    std::vector<lm::Example> exs;
    for (const auto& cand : inst.candidates) exs.push_back(data::to_example(inst, cand));
    auto out = channel.eval(z, exs, "per_candidate_losses", inst.task_id);
    int argmin = 0;
    for (size_t i = 1; i < out.per_candidate.size(); ++i) {
      if (out.per_candidate[i] < out.per_candidate[size_t(argmin)]) argmin = int(i);
    }
    double gold_loss = 0.0;
    for (size_t i = 0; i < inst.candidates.size(); ++i) {
      if (inst.candidates[i] == inst.answer) gold_loss = out.per_candidate[i];
    }
    rep.mean_loss += gold_loss;
    if (inst.candidates[size_t(argmin)] == inst.answer) rep.accuracy += 1.0;
    ++rep.n;
  }
  rep.accuracy /= rep.n;
  rep.mean_loss /= rep.n;
  return rep;
}

EvalReport evaluate_zero_shot(const lm::FrozenLM& lm,
                              const std::vector<data::Instance>& eval_set) {
  const ad::Matrix no_prompt = ad::Matrix::Zero(0, lm.cfg.model_dim);
  return evaluate_with_prompt_fn(
      lm, eval_set, [&](const std::vector<int>&) { return no_prompt; });
}

EvalReport evaluate_with_prompt_fn(
    const lm::FrozenLM& lm, const std::vector<data::Instance>& eval_set,
    const std::function<ad::Matrix(const std::vector<int>&)>& prompt_fn) {
  if (eval_set.empty()) throw std::invalid_argument("empty evaluation split");
  EvalReport rep;
  for (const auto& inst : eval_set) {
    int argmin = -1;
    double best = std::numeric_limits<double>::infinity();
    double gold_loss = 0.0;
    for (size_t i = 0; i < inst.candidates.size(); ++i) {
      lm::Example ex = data::to_example(inst, inst.candidates[i]);
      ad::Matrix prompt = prompt_fn(ex.instruction_ids.ids);
      const double l = lm.answer_loss(prompt, ex);
      if (l < best) {
        best = l;
        argmin = int(i);
      }
      if (inst.candidates[i] == inst.answer) gold_loss = l;
    }
    rep.mean_loss += gold_loss;
    if (inst.candidates[size_t(argmin)] == inst.answer) rep.accuracy += 1.0;
    ++rep.n;
  }
  rep.accuracy /= rep.n;
  rep.mean_loss /= rep.n;
  return rep;
}

void save_result_json(const std::string& path, const CustomizedTask& task,
                      const std::string& preset, const std::string& trace_path) {
  nlohmann::json j;
  j["task_id"] = task.task_id;
  j["preset"] = preset;
  j["r"] = task.z_star.size();
  auto z = nlohmann::json::array();
  for (int i = 0; i < task.z_star.size(); ++i) z.push_back(svc::fmt_real(task.z_star[i]));
  j["z_star"] = z;
  j["final_loss"] = svc::fmt_real(task.final_loss);
  j["evals_used"] = task.evals_used;
  j["trace_path"] = trace_path;
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for write");
  os << j.dump(2) << "\n";
}

}  // namespace cbp::ulc
