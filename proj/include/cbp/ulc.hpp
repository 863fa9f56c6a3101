#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cbp/channel.hpp"
#include "cbp/cmaes.hpp"
#include "cbp/datagen.hpp"
#include "cbp/toy_lm.hpp"

namespace cbp::ulc {

struct UlcConfig {
  int shots{16};
  long budget{300};
  int population{30};
  double sigma0{0.01};
  // proximal coefficient on ||z - z0||^2 added to the fitness; keeps the
  // search from drifting far from the domain solution on very few shots
  double ridge{0.0};
  std::uint64_t seed{0};
  std::string preset{"commonsense-toy"};
  bool inject_z0{true};  // evaluate the starting point as candidate 0 of gen 1
  std::string snapshot_path;  // optional per-generation resume file

  void validate() const;
};

struct CustomizedTask {
  std::string task_id;
  Eigen::VectorXd z_star;
  double final_loss{0.0};
  long evals_used{0};
  std::vector<cmaes::GenStats> trace;
};

// User-side local customization: CMA-ES on the task vector through the
// black-box evaluation channel. Issues exactly population * floor(budget /
// population) remote evaluations.
CustomizedTask customize(svc::EvalChannel& channel,
                         const std::vector<data::Instance>& task_shots,
                         const Eigen::VectorXd& z0, const UlcConfig& cfg);

struct EvalReport {
  double accuracy{0.0};
  double mean_loss{0.0};
  int n{0};
};

// Candidate-ranking evaluation: predict the argmin-loss candidate answer.
EvalReport evaluate_with_vector(svc::EvalChannel& channel,
                                const std::vector<data::Instance>& eval_set,
                                const Eigen::VectorXd& z);

// Plain-model baseline (no soft prompt at all); computed against the LM
// directly since the evaluation channel always applies the generator.
EvalReport evaluate_zero_shot(const lm::FrozenLM& lm,
                              const std::vector<data::Instance>& eval_set);

// Local counterpart of evaluate_with_vector for arms that bypass the service
// (prompt tuning baseline uses a fixed prompt; fine-tuned generators live
// client-side in the comparison arm).
EvalReport evaluate_with_prompt_fn(
    const lm::FrozenLM& lm, const std::vector<data::Instance>& eval_set,
    const std::function<ad::Matrix(const std::vector<int>&)>& prompt_fn);

void save_result_json(const std::string& path, const CustomizedTask& task,
                      const std::string& preset, const std::string& trace_path);

}  // namespace cbp::ulc
