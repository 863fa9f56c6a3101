#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cbp/rng.hpp"

namespace cbp::cmaes {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct Candidate {
  VectorXd z;
  double fitness{0.0};
  int eval_index{0};
};

// Strategy constants (standard defaults as functions of dimension and the
// selection mass mu_eff):
//   mu      = floor(lambda / 2)
//   w_i     ∝ ln((lambda+1)/2) - ln(i),  normalized to sum 1 over the mu best
//   mu_eff  = 1 / sum w_i^2
//   c_sigma = (mu_eff + 2) / (n + mu_eff + 5)
//   d_sigma = 1 + 2 max(0, sqrt((mu_eff-1)/(n+1)) - 1) + c_sigma
//   c_c     = (4 + mu_eff/n) / (n + 4 + 2 mu_eff/n)
//   c_1     = 2 / ((n+1.3)^2 + mu_eff)
//   c_mu    = min(1 - c_1, 2 (mu_eff - 2 + 1/mu_eff) / ((n+2)^2 + mu_eff))
struct CmaConstants {
  int lambda;
  int mu;
  VectorXd weights;  // mu entries, descending, sum 1
  double mu_eff;
  double c_sigma, d_sigma, c_c, c_1, c_mu;
  double chi_n;  // E||N(0,I)||
};

class CmaState {
 public:
  VectorXd mean;
  double sigma;
  MatrixXd C;  // symmetric positive definite
  VectorXd p_sigma, p_c;
  long generation{0};
  CmaConstants k;

  static CmaState init(const VectorXd& mean0, double sigma0, int lambda,
                       std::uint64_t seed);

  std::vector<Candidate> ask();
  void tell(std::vector<Candidate> candidates);

  int dim() const { return static_cast<int>(mean.size()); }
  double min_eigenvalue() const;

  // Exact text snapshot (hexfloat doubles), for per-generation resume.
  void save_text(std::ostream& os) const;
  static CmaState load_text(std::istream& is);

 private:
  GaussianRng rng_{0};
  // Decomposition C = B diag(D^2) B^T, refreshed at ask()
  MatrixXd B_;
  VectorXd D_;
  bool decomp_valid_{false};
  void decompose();
  void repair();
};

struct GenStats {
  long generation;
  long evals_used;
  double best_fitness;
  double sigma;
  double mean_norm;
};

struct MinimizeResult {
  Candidate best;
  std::vector<GenStats> trace;
  long evals_used{0};
};

struct MinimizeOptions {
  // Replaces candidate 0 of the first generation (used to guarantee the
  // starting point itself is evaluated).
  std::optional<VectorXd> inject_first;
};

using Objective = std::function<double(const VectorXd&)>;

// Runs exactly floor(budget / lambda) generations; NaN fitness becomes +inf.
MinimizeResult minimize(const Objective& objective, CmaState& state, long budget,
                        const MinimizeOptions& opts = {});

void write_trace_csv(const std::string& path, const std::vector<GenStats>& trace);

}  // namespace cbp::cmaes
