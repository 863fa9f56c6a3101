#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cbp/autodiff.hpp"
#include "cbp/digest.hpp"
#include "cbp/toy_lm.hpp"

namespace cbp::gen {

using ad::Matrix;
using ad::Tensor;

struct GenDims {
  int d{64};   // model dimension
  int m{16};   // bottleneck width
  int t{4};    // soft prompt length
  int r{8};    // task-vector subspace dimension
};

struct ParamCount {
  std::uint64_t server_total;
  std::uint64_t user_per_task;
};

// server_total = m*d + m*t*d + r*d + r; user side stores r scalars per task.
ParamCount param_count(const GenDims& dims);

struct TaskVector {
  Eigen::VectorXd z;
  std::string task_id;
};

// Bottleneck prompt generator: I = mean_pool(Emb(X)) + A z, then
// p = reshape(L_U gelu(L_D I), t x d).
class GeneratorParams {
 public:
  GenDims dims;
  Tensor L_D;  // m x d
  Tensor L_U;  // (t*d) x m
  Tensor A;    // d x r
  Tensor z0;   // r x 1

  static GeneratorParams random_init(const GenDims& dims, std::uint64_t seed);

  std::vector<Tensor*> params();
  void zero_grads();

  Eigen::VectorXd project(const Eigen::VectorXd& z) const;  // A z
  Eigen::VectorXd make_input(const lm::FrozenLM& lm, const std::vector<int>& instr_ids,
                             const Eigen::VectorXd& z, bool drop_instance = false) const;
  Matrix generate_prompt(const Eigen::VectorXd& input) const;  // t x d
  // Whole pipeline for the evaluation path: instruction -> soft prompt.
  Matrix prompt_for(const lm::FrozenLM& lm, const std::vector<int>& instr_ids,
                    const Eigen::VectorXd& z, bool drop_instance = false) const;

  // Training path: prompt as a taped Var with L_D, L_U, A, z0 as leaves.
  ad::Var prompt_taped(ad::Tape& tape, lm::FrozenLM& lm,
                       const std::vector<int>& instr_ids,
                       bool drop_instance = false);

  Sha256 digest() const;
  void save(const std::string& path) const;  // + JSON sidecar at path + ".json"
  static GeneratorParams load(const std::string& path);
};

}  // namespace cbp::gen
