#include "cbp/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "cbp/channel.hpp"
#include "cbp/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cbp::pipeline {

namespace {

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

sdt::TrainConfig sdt_defaults(double lr, int epochs) {
  sdt::TrainConfig c;
  c.learning_rate = lr;
  c.batch_size = 16;
  c.epochs = epochs;
  c.optimizer_kind = "adam";
  c.seed = 11;
  return c;
}

}  // namespace

std::vector<std::string> preset_names() {
  return {"commonsense-toy", "medical-toy", "financial-toy"};
}

Preset preset_by_name(const std::string& name) {
  Preset p;
  p.name = name;
  // lr/epochs rescaled for the toy dims; the relative financial cut is kept
  p.sdt_cfg = sdt_defaults(3e-3, 12);
  p.fewshot_cfg = sdt_defaults(3e-3, 12);
  p.ulc_cfg.population = 30;
  // with 16 shots the search overfits easily; a proximal pull toward the
  // server's z0 keeps the customized vector from trading domain skill away
  p.ulc_cfg.ridge = 10.0;
  if (name == "commonsense-toy") {
    p.shots = 16;
    p.ulc_cfg.shots = 16;
    p.ulc_cfg.budget = 300;
    p.ulc_cfg.sigma0 = 0.01;
  } else if (name == "medical-toy") {
    p.shots = 5;
    p.ulc_cfg.shots = 5;
    p.ulc_cfg.budget = 1500;
    p.ulc_cfg.sigma0 = 0.05;
  } else if (name == "financial-toy") {
    p.shots = 16;
    p.ulc_cfg.shots = 16;
    p.ulc_cfg.budget = 300;
    p.ulc_cfg.sigma0 = 0.05;
    p.sdt_cfg = sdt_defaults(1e-3, 6);
  } else {
    throw std::invalid_argument("unknown preset: " + name +
                                " (expected commonsense-toy, medical-toy or "
                                "financial-toy)");
  }
  p.ulc_cfg.preset = name;
  return p;
}

std::vector<data::TaskSpec> domain_specs() {
  return {{"mindigit", data::Family::MinDigit, 0},
          {"countmod", data::Family::CountMod, 0},
          {"vowels", data::Family::Vowels, 0},
          {"sumdigit", data::Family::SumDigit, 0}};
}

std::vector<data::TaskSpec> customization_specs() {
  return {{"parity", data::Family::Parity, 0},
          {"smallest", data::Family::Smallest, 0},
          {"mostly", data::Family::Mostly, 0},
          {"tally", data::Family::Tally, 0}};
}

const std::vector<std::string>& all_arms() {
  static const std::vector<std::string> arms{"zero_shot",  "prompt_tuning",
                                             "cbp_wo_ulc", "cbp_full",
                                             "wo_instance", "fewshot_ft"};
  return arms;
}

ArtifactPaths artifact_paths(const std::string& dir) {
  return ArtifactPaths{dir + "/domain_corpus.jsonl",
                       dir + "/lm.ckpt",
                       dir + "/generator.ckpt",
                       dir + "/generator_wo_instance.ckpt",
                       dir + "/prompt_tuning.bin",
                       dir + "/sdt_loss_curve.csv"};
}

void build_lm(const Preset& p, const std::string& dir) {
  fs::create_directories(dir);
  ArtifactPaths paths = artifact_paths(dir);
  auto corpus = data::make_domain_dataset(domain_specs(), p.domain_n_per_family,
                                          /*seed=*/42);
  data::write_jsonl(paths.corpus_jsonl, corpus);

  lm::FrozenLM model = lm::FrozenLM::random_init(p.lm_cfg, p.pretrain_seed);
  sdt::pretrain_lm(model, corpus, p.pretrain_epochs, p.pretrain_lr,
                   p.pretrain_seed, p.dims.t);
  model.freeze();
  model.save(paths.lm_ckpt);
}

void build_server_artifacts(const Preset& p, const std::string& dir) {
  ArtifactPaths paths = artifact_paths(dir);
  lm::FrozenLM model = lm::FrozenLM::load(paths.lm_ckpt);
  auto corpus = data::read_jsonl(paths.corpus_jsonl);
  const Sha256 before = model.weights_digest();

  {
    gen::GeneratorParams g = gen::GeneratorParams::random_init(p.dims, 21);
    auto res = sdt::sdt_train(model, g, corpus, p.sdt_cfg);
    sdt::write_loss_curve_csv(paths.sdt_curve_csv, res.curve);
    g.save(paths.gen_ckpt);
  }
  {
    sdt::TrainConfig cfg = p.sdt_cfg;
    cfg.drop_instance_term = true;
    gen::GeneratorParams g = gen::GeneratorParams::random_init(p.dims, 21);
    sdt::sdt_train(model, g, corpus, cfg);
    g.save(paths.gen_wo_instance_ckpt);
  }
  {
    auto res = sdt::prompt_tuning_baseline(model, p.dims.t, corpus, p.sdt_cfg);
    save_prompt_matrix(paths.prompt_tuning_bin, res.prompt);
  }
  if (model.compute_digest() != before) {
    throw std::runtime_error("frozen-LM invariant violated during SDT");
  }
}

void save_prompt_matrix(const std::string& path, const ad::Matrix& prompt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for write");
  os.write("CBPPT1", 6);
  const std::uint32_t r = std::uint32_t(prompt.rows()), c = std::uint32_t(prompt.cols());
  os.write(reinterpret_cast<const char*>(&r), 4);
  os.write(reinterpret_cast<const char*>(&c), 4);
  for (long i = 0; i < prompt.rows(); ++i)
    for (long j = 0; j < prompt.cols(); ++j) {
      double x = prompt(i, j);
      os.write(reinterpret_cast<const char*>(&x), 8);
    }
}

ad::Matrix load_prompt_matrix(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  char magic[6];
  is.read(magic, 6);
  if (std::string(magic, 6) != "CBPPT1") {
    throw std::runtime_error("bad prompt matrix magic in " + path);
  }
  std::uint32_t r = 0, c = 0;
  is.read(reinterpret_cast<char*>(&r), 4);
  is.read(reinterpret_cast<char*>(&c), 4);
  ad::Matrix m(r, c);
  for (std::uint32_t i = 0; i < r; ++i)
    for (std::uint32_t j = 0; j < c; ++j) {
      double x = 0;
      is.read(reinterpret_cast<char*>(&x), 8);
      m(i, j) = x;
    }
  if (!is) throw std::runtime_error("truncated prompt matrix: " + path);
  return m;
}

namespace {

void write_arm_json(const std::string& results_dir, const std::string& task,
                    const std::string& arm, std::uint64_t seed,
                    const ArmOutcome& out, const std::string& lm_digest,
                    const std::string& gen_digest) {
  json j{{"task", task},
         {"arm", arm},
         {"seed", seed},
         {"accuracy", svc::fmt_real(out.accuracy)},
         {"mean_loss", svc::fmt_real(out.mean_loss)},
         {"final_ulc_loss", svc::fmt_real(out.final_ulc_loss)},
         {"evals_used", out.evals_used},
         {"wall_seconds", out.wall_seconds},
         {"lm_digest", lm_digest},
         {"gen_digest", gen_digest}};
  const std::string path = results_dir + "/" + task + "__" + arm + "__seed" +
                           std::to_string(seed) + ".json";
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for write");
  os << j.dump(2) << "\n";
}

}  // namespace

void run_arms(const Preset& p, const std::string& artifact_dir,
              const std::string& results_dir,
              const std::vector<std::uint64_t>& seeds,
              const std::set<std::string>& arms) {
  if (seeds.empty()) throw std::invalid_argument("need at least one seed");
  for (const auto& a : arms) {
    if (std::find(all_arms().begin(), all_arms().end(), a) == all_arms().end()) {
      throw std::invalid_argument("unknown arm: " + a);
    }
  }
  fs::create_directories(results_dir);
  ArtifactPaths paths = artifact_paths(artifact_dir);
  for (const std::string& needed :
       {paths.lm_ckpt, paths.gen_ckpt, paths.gen_wo_instance_ckpt,
        paths.prompt_tuning_bin}) {
    if (!fs::exists(needed)) {
      throw std::runtime_error("missing artifact " + needed +
                               "; run the pretrain/sdt commands first");
    }
  }

  lm::FrozenLM model = lm::FrozenLM::load(paths.lm_ckpt);
  const std::string lm_digest = hex(model.weights_digest());

  svc::Service::Config std_cfg;
  auto svc_std = svc::make_service(paths.lm_ckpt, paths.gen_ckpt, std_cfg,
                                   results_dir + "/audit.jsonl");
  svc::Service::Config woi_cfg;
  woi_cfg.drop_instance = true;
  auto svc_woi = svc::make_service(paths.lm_ckpt, paths.gen_wo_instance_ckpt,
                                   woi_cfg, results_dir + "/audit_wo_instance.jsonl");
  const std::string gen_digest = hex(svc_std->generator().digest());

  const ad::Matrix pt_prompt = load_prompt_matrix(paths.prompt_tuning_bin);

  const auto tasks = customization_specs();
  for (size_t ti = 0; ti < tasks.size(); ++ti) {
    const auto& spec = tasks[ti];
    for (std::uint64_t seed : seeds) {
      const std::uint64_t split_seed = seed * 131 + ti;
      auto split =
          data::make_customization_task(spec, p.shots, p.eval_n, split_seed);

      auto run_ulc_arm = [&](svc::Service& service) {
        svc::LoopbackChannel ch(service);
        svc::MetaInfo meta = ch.meta();
        ulc::UlcConfig ucfg = p.ulc_cfg;
        ucfg.seed = seed * 977 + ti + 1;
        ch.open_session(ucfg.budget);
        ulc::CustomizedTask res = ulc::customize(ch, split.shots, meta.z0, ucfg);
        svc::LoopbackChannel eval_ch(service);
        eval_ch.open_session(long(split.eval.size()));
        ulc::EvalReport rep =
            ulc::evaluate_with_vector(eval_ch, split.eval, res.z_star);
        ArmOutcome out;
        out.accuracy = rep.accuracy;
        out.mean_loss = rep.mean_loss;
        out.final_ulc_loss = res.final_loss;
        out.evals_used = res.evals_used + long(split.eval.size());
        return out;
      };

      for (const std::string& arm : arms) {
        const double t0 = now_seconds();
        ArmOutcome out;
        if (arm == "zero_shot") {
          auto rep = ulc::evaluate_zero_shot(model, split.eval);
          out.accuracy = rep.accuracy;
          out.mean_loss = rep.mean_loss;
        } else if (arm == "prompt_tuning") {
          auto rep = ulc::evaluate_with_prompt_fn(
              model, split.eval,
              [&](const std::vector<int>&) { return pt_prompt; });
          out.accuracy = rep.accuracy;
          out.mean_loss = rep.mean_loss;
        } else if (arm == "cbp_wo_ulc") {
          svc::LoopbackChannel ch(*svc_std);
          svc::MetaInfo meta = ch.meta();
          ch.open_session(long(split.eval.size()));
          auto rep = ulc::evaluate_with_vector(ch, split.eval, meta.z0);
          out.accuracy = rep.accuracy;
          out.mean_loss = rep.mean_loss;
          out.evals_used = long(split.eval.size());
        } else if (arm == "cbp_full") {
          out = run_ulc_arm(*svc_std);
        } else if (arm == "wo_instance") {
          out = run_ulc_arm(*svc_woi);
        } else if (arm == "fewshot_ft") {
          gen::GeneratorParams g = gen::GeneratorParams::load(paths.gen_ckpt);
          sdt::TrainConfig cfg = p.fewshot_cfg;
          cfg.seed = seed * 31 + ti;
          cfg.batch_size = std::min(cfg.batch_size, int(split.shots.size()));
          sdt::fewshot_finetune_variant(model, g, split.shots, cfg);
          const Eigen::VectorXd z0 = g.z0.value.col(0);
          auto rep = ulc::evaluate_with_prompt_fn(
              model, split.eval, [&](const std::vector<int>& instr) {
                return g.prompt_for(model, instr, z0);
              });
          out.accuracy = rep.accuracy;
          out.mean_loss = rep.mean_loss;
        }
        out.wall_seconds = now_seconds() - t0;
        write_arm_json(results_dir, spec.task_id, arm, seed, out, lm_digest,
                       gen_digest);
      }
    }
  }
}

double CellStats::mean() const {
  double s = 0;
  for (double v : per_seed) s += v;
  return per_seed.empty() ? 0.0 : s / double(per_seed.size());
}

double CellStats::sd() const {
  if (per_seed.size() < 2) return 0.0;
  const double m = mean();
  double s = 0;
  for (double v : per_seed) s += (v - m) * (v - m);
  return std::sqrt(s / double(per_seed.size() - 1));
}

double CellStats::median() const {
  if (per_seed.empty()) return 0.0;
  std::vector<double> v = per_seed;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Aggregate aggregate_results(const std::string& results_dir) {
  Aggregate agg;
  std::vector<fs::path> files;
  if (fs::exists(results_dir)) {
    for (const auto& e : fs::directory_iterator(results_dir)) {
      if (e.path().extension() == ".json" &&
          e.path().filename().string().find("__") != std::string::npos) {
        files.push_back(e.path());
      }
    }
  }
  if (files.empty()) {
    throw std::runtime_error("no arms found in results directory " +
                             results_dir);
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::ifstream is(f);
    json j;
    is >> j;
    const std::string task = j.at("task").get<std::string>();
    const std::string arm = j.at("arm").get<std::string>();
    agg.acc[task][arm].per_seed.push_back(
        svc::parse_real(j.at("accuracy").get<std::string>()));
    agg.wall[task][arm] += j.at("wall_seconds").get<double>();
    agg.evals[task][arm] += j.at("evals_used").get<long>();
    if (arm == "cbp_full") {
      agg.final_loss[task].per_seed.push_back(
          svc::parse_real(j.at("final_ulc_loss").get<std::string>()));
    }
    agg.lm_digest = j.at("lm_digest").get<std::string>();
    agg.gen_digest = j.at("gen_digest").get<std::string>();
    if (std::find(agg.tasks.begin(), agg.tasks.end(), task) == agg.tasks.end()) {
      agg.tasks.push_back(task);
    }
    if (std::find(agg.arms.begin(), agg.arms.end(), arm) == agg.arms.end()) {
      agg.arms.push_back(arm);
    }
  }
  std::sort(agg.tasks.begin(), agg.tasks.end());
  // keep the canonical arm order for readability
  std::vector<std::string> ordered;
  for (const auto& a : all_arms()) {
    if (std::find(agg.arms.begin(), agg.arms.end(), a) != agg.arms.end()) {
      ordered.push_back(a);
    }
  }
  agg.arms = ordered;
  return agg;
}

void write_report_markdown(const std::string& path, const Aggregate& agg) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for write");
  os << "# Task accuracy by arm (mean +/- sd over seeds)\n\n";
  os << "| task |";
  for (const auto& a : agg.arms) os << " " << a << " |";
  os << "\n|---|";
  for (size_t i = 0; i < agg.arms.size(); ++i) os << "---|";
  os << "\n";
  char buf[64];
  for (const auto& t : agg.tasks) {
    os << "| " << t << " |";
    for (const auto& a : agg.arms) {
      auto it = agg.acc.at(t).find(a);
      if (it == agg.acc.at(t).end()) {
        os << " - |";
      } else {
        std::snprintf(buf, sizeof(buf), " %.3f ± %.3f |", it->second.mean(),
                      it->second.sd());
        os << buf;
      }
    }
    os << "\n";
  }
  os << "\n# Final ULC loss per task (cbp_full, mean over seeds)\n\n";
  os << "| task | final_loss |\n|---|---|\n";
  for (const auto& t : agg.tasks) {
    auto it = agg.final_loss.find(t);
    if (it != agg.final_loss.end()) {
      std::snprintf(buf, sizeof(buf), "| %s | %.6g |\n", t.c_str(),
                    it->second.mean());
      os << buf;
    }
  }
  os << "\n# Cost (total wall seconds / eval API calls across seeds)\n\n";
  os << "| task |";
  for (const auto& a : agg.arms) os << " " << a << " |";
  os << "\n|---|";
  for (size_t i = 0; i < agg.arms.size(); ++i) os << "---|";
  os << "\n";
  for (const auto& t : agg.tasks) {
    os << "| " << t << " |";
    for (const auto& a : agg.arms) {
      const double w = agg.wall.count(t) && agg.wall.at(t).count(a)
                           ? agg.wall.at(t).at(a)
                           : 0.0;
      const long e = agg.evals.count(t) && agg.evals.at(t).count(a)
                         ? agg.evals.at(t).at(a)
                         : 0;
      std::snprintf(buf, sizeof(buf), " %.1fs / %ld |", w, e);
      os << buf;
    }
    os << "\n";
  }
  os << "\nlm_digest: " << agg.lm_digest << "\n";
  os << "gen_digest: " << agg.gen_digest << "\n";
}

void write_report_csv(const std::string& path, const Aggregate& agg) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for write");
  os << "task,arm,seed_index,accuracy\n";
  for (const auto& t : agg.tasks) {
    for (const auto& a : agg.arms) {
      auto it = agg.acc.at(t).find(a);
      if (it == agg.acc.at(t).end()) continue;
      for (size_t i = 0; i < it->second.per_seed.size(); ++i) {
        os << t << "," << a << "," << i << ","
           << svc::fmt_real(it->second.per_seed[i]) << "\n";
      }
    }
  }
}

}  // namespace cbp::pipeline
