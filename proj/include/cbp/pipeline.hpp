#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "cbp/datagen.hpp"
#include "cbp/generator.hpp"
#include "cbp/sdt.hpp"
#include "cbp/toy_lm.hpp"
#include "cbp/ulc.hpp"

namespace cbp::pipeline {

// Everything a named experiment needs; resolved entirely by the preset, every
// field overridable from the CLI.
struct Preset {
  std::string name;
  lm::LmConfig lm_cfg;
  gen::GenDims dims;

  int domain_n_per_family{400};
  int shots{16};
  int eval_n{40};

  int pretrain_epochs{15};
  double pretrain_lr{1e-3};
  std::uint64_t pretrain_seed{7};

  sdt::TrainConfig sdt_cfg;
  sdt::TrainConfig fewshot_cfg;
  ulc::UlcConfig ulc_cfg;
};

Preset preset_by_name(const std::string& name);
std::vector<std::string> preset_names();

std::vector<data::TaskSpec> domain_specs();
std::vector<data::TaskSpec> customization_specs();

// Arm identifiers, in report column order.
const std::vector<std::string>& all_arms();

struct ArtifactPaths {
  std::string corpus_jsonl;
  std::string lm_ckpt;
  std::string gen_ckpt;
  std::string gen_wo_instance_ckpt;
  std::string prompt_tuning_bin;
  std::string sdt_curve_csv;
};

ArtifactPaths artifact_paths(const std::string& dir);

// Stage 1-2: corpus + pretrained frozen LM checkpoint.
void build_lm(const Preset& p, const std::string& dir);
// Stage 3: SDT for the standard and w/o-instance generators plus the prompt
// tuning baseline. Requires build_lm outputs.
void build_server_artifacts(const Preset& p, const std::string& dir);

void save_prompt_matrix(const std::string& path, const ad::Matrix& prompt);
ad::Matrix load_prompt_matrix(const std::string& path);

struct ArmOutcome {
  double accuracy{0.0};
  double mean_loss{0.0};
  double final_ulc_loss{0.0};  // ULC arms only
  long evals_used{0};
  double wall_seconds{0.0};
};

// Runs the requested arms for every customization task and seed; writes one
// JSON per (task, arm, seed) under results_dir.
void run_arms(const Preset& p, const std::string& artifact_dir,
              const std::string& results_dir,
              const std::vector<std::uint64_t>& seeds,
              const std::set<std::string>& arms);

struct CellStats {
  std::vector<double> per_seed;
  double mean() const;
  double sd() const;
  double median() const;
};

struct Aggregate {
  std::vector<std::string> tasks;
  std::vector<std::string> arms;
  // task -> arm -> accuracy across seeds
  std::map<std::string, std::map<std::string, CellStats>> acc;
  // task -> arm -> total wall seconds / eval calls
  std::map<std::string, std::map<std::string, double>> wall;
  std::map<std::string, std::map<std::string, long>> evals;
  // task -> final ULC loss across seeds
  std::map<std::string, CellStats> final_loss;
  std::string lm_digest, gen_digest;
};

Aggregate aggregate_results(const std::string& results_dir);
void write_report_markdown(const std::string& path, const Aggregate& agg);
void write_report_csv(const std::string& path, const Aggregate& agg);

}  // namespace cbp::pipeline
