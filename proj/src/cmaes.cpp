#include "cbp/cmaes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace cbp::cmaes {

namespace {
constexpr double kMaxCondition = 1e14;
}

CmaState CmaState::init(const VectorXd& mean0, double sigma0, int lambda,
                        std::uint64_t seed) {
  if (sigma0 <= 0.0) throw std::invalid_argument("sigma0 must be positive");
  if (lambda < 2) throw std::invalid_argument("lambda must be >= 2");
  const int n = static_cast<int>(mean0.size());
  if (n < 1) throw std::invalid_argument("dimension must be >= 1");

  CmaState s;
  s.mean = mean0;
  s.sigma = sigma0;
  s.C = MatrixXd::Identity(n, n);
  s.p_sigma = VectorXd::Zero(n);
  s.p_c = VectorXd::Zero(n);
  s.rng_ = GaussianRng(seed);

  CmaConstants k;
  k.lambda = lambda;
  k.mu = lambda / 2;
  k.weights = VectorXd(k.mu);
  for (int i = 0; i < k.mu; ++i) {
    k.weights[i] = std::log((lambda + 1) / 2.0) - std::log(i + 1.0);
  }
  k.weights /= k.weights.sum();
  k.mu_eff = 1.0 / k.weights.squaredNorm();
  k.c_sigma = (k.mu_eff + 2.0) / (n + k.mu_eff + 5.0);
  k.d_sigma = 1.0 +
              2.0 * std::max(0.0, std::sqrt((k.mu_eff - 1.0) / (n + 1.0)) - 1.0) +
              k.c_sigma;
  k.c_c = (4.0 + k.mu_eff / n) / (n + 4.0 + 2.0 * k.mu_eff / n);
  k.c_1 = 2.0 / ((n + 1.3) * (n + 1.3) + k.mu_eff);
  k.c_mu = std::min(1.0 - k.c_1, 2.0 * (k.mu_eff - 2.0 + 1.0 / k.mu_eff) /
                                     ((n + 2.0) * (n + 2.0) + k.mu_eff));
  k.chi_n = std::sqrt(double(n)) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
  s.k = k;
  return s;
}

void CmaState::repair() {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(C);
  if (es.info() != Eigen::Success) {
    throw std::runtime_error("covariance eigendecomposition failed beyond repair");
  }
  VectorXd ev = es.eigenvalues();
  const double mx = std::max(ev.maxCoeff(), 1e-300);
  const double floor_ev = mx / kMaxCondition;
  for (int i = 0; i < ev.size(); ++i) ev[i] = std::max(ev[i], floor_ev);
  C = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  C = 0.5 * (C + C.transpose());
}

void CmaState::decompose() {
  // symmetrize before factoring; tell() only introduces symmetric terms but
  // rounding drift accumulates
  C = 0.5 * (C + C.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(C);
  bool bad = es.info() != Eigen::Success || es.eigenvalues().minCoeff() <= 0.0 ||
             es.eigenvalues().maxCoeff() / es.eigenvalues().minCoeff() > kMaxCondition;
  if (bad) {
    repair();
    es.compute(C);
    if (es.info() != Eigen::Success || es.eigenvalues().minCoeff() <= 0.0) {
      throw std::runtime_error("covariance not positive definite after repair");
    }
  }
  B_ = es.eigenvectors();
  D_ = es.eigenvalues().cwiseSqrt();
  decomp_valid_ = true;
}

double CmaState::min_eigenvalue() const {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(C);
  return es.eigenvalues().minCoeff();
}

std::vector<Candidate> CmaState::ask() {
  decompose();
  const int n = dim();
  std::vector<Candidate> out(k.lambda);
  for (int i = 0; i < k.lambda; ++i) {
    VectorXd nvec(n);
    for (int j = 0; j < n; ++j) nvec[j] = rng_.normal();
    out[i].z = mean + sigma * (B_ * (D_.cwiseProduct(nvec)));
    out[i].eval_index = i;
  }
  return out;
}

void CmaState::tell(std::vector<Candidate> cands) {
  if (static_cast<int>(cands.size()) != k.lambda) {
    throw std::logic_error("tell expects exactly lambda candidates, got " +
                           std::to_string(cands.size()));
  }
  for (const auto& c : cands) {
    if (!std::isfinite(c.fitness)) {
      // +inf is allowed (failed evaluation), NaN is not
      if (std::isnan(c.fitness)) throw std::logic_error("tell got NaN fitness");
    }
  }
  if (!decomp_valid_) decompose();
  const int n = dim();

  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.fitness != b.fitness) return a.fitness < b.fitness;
    return a.eval_index < b.eval_index;
  });

  const VectorXd old_mean = mean;
  VectorXd new_mean = VectorXd::Zero(n);
  for (int i = 0; i < k.mu; ++i) new_mean += k.weights[i] * cands[i].z;
  mean = new_mean;

  const VectorXd y_w = (mean - old_mean) / sigma;
  // C^{-1/2} y_w via the cached decomposition
  const VectorXd c_inv_sqrt_y = B_ * (B_.transpose() * y_w).cwiseQuotient(D_);

  p_sigma = (1.0 - k.c_sigma) * p_sigma +
            std::sqrt(k.c_sigma * (2.0 - k.c_sigma) * k.mu_eff) * c_inv_sqrt_y;

  const double ps_norm = p_sigma.norm();
  const double denom =
      std::sqrt(1.0 - std::pow(1.0 - k.c_sigma, 2.0 * (generation + 1)));
  const bool h_sigma = ps_norm / denom < (1.4 + 2.0 / (n + 1.0)) * k.chi_n;

  p_c = (1.0 - k.c_c) * p_c;
  if (h_sigma) {
    p_c += std::sqrt(k.c_c * (2.0 - k.c_c) * k.mu_eff) * y_w;
  }

  MatrixXd rank_mu = MatrixXd::Zero(n, n);
  for (int i = 0; i < k.mu; ++i) {
    const VectorXd y = (cands[i].z - old_mean) / sigma;
    rank_mu += k.weights[i] * (y * y.transpose());
  }
  const double delta_h = h_sigma ? 0.0 : k.c_c * (2.0 - k.c_c);
  C = (1.0 - k.c_1 - k.c_mu) * C +
      k.c_1 * (p_c * p_c.transpose() + delta_h * C) + k.c_mu * rank_mu;

  sigma *= std::exp((k.c_sigma / k.d_sigma) * (ps_norm / k.chi_n - 1.0));

  ++generation;
  decomp_valid_ = false;
}

namespace {

void put_real(std::ostream& os, double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%a", x);
  os << buf << "\n";
}

double get_real(std::istream& is) {
  std::string s;
  is >> s;
  return std::strtod(s.c_str(), nullptr);
}

void put_vec(std::ostream& os, const VectorXd& v) {
  os << v.size() << "\n";
  for (int i = 0; i < v.size(); ++i) put_real(os, v[i]);
}

VectorXd get_vec(std::istream& is) {
  long n = 0;
  is >> n;
  VectorXd v(n);
  for (long i = 0; i < n; ++i) v[i] = get_real(is);
  return v;
}

}  // namespace

void CmaState::save_text(std::ostream& os) const {
  os << "cmastate 1\n" << dim() << " " << k.lambda << " " << generation << "\n";
  put_real(os, sigma);
  put_vec(os, mean);
  put_vec(os, p_sigma);
  put_vec(os, p_c);
  for (int i = 0; i < C.rows(); ++i)
    for (int j = 0; j < C.cols(); ++j) put_real(os, C(i, j));
  rng_.save(os);
}

CmaState CmaState::load_text(std::istream& is) {
  std::string tag;
  int version = 0;
  is >> tag >> version;
  if (tag != "cmastate" || version != 1) {
    throw std::runtime_error("bad CMA state snapshot header");
  }
  int n = 0, lambda = 0;
  long generation = 0;
  is >> n >> lambda >> generation;
  double sigma = get_real(is);
  VectorXd mean = get_vec(is);
  CmaState s = CmaState::init(mean, sigma, lambda, 0);
  s.generation = generation;
  s.p_sigma = get_vec(is);
  s.p_c = get_vec(is);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) s.C(i, j) = get_real(is);
  s.rng_.load(is);
  return s;
}

MinimizeResult minimize(const Objective& objective, CmaState& state, long budget,
                        const MinimizeOptions& opts) {
  const int lambda = state.k.lambda;
  if (budget < lambda) {
    throw std::invalid_argument("budget " + std::to_string(budget) +
                                " below population size " + std::to_string(lambda));
  }
  const long generations = budget / lambda;

  MinimizeResult res;
  res.best.fitness = std::numeric_limits<double>::infinity();

  for (long g = 0; g < generations; ++g) {
    std::vector<Candidate> cands = state.ask();
    if (g == 0 && opts.inject_first.has_value()) {
      if (opts.inject_first->size() != state.dim()) {
        throw std::invalid_argument("injected candidate has wrong dimension");
      }
      cands[0].z = *opts.inject_first;
    }
    int n_bad = 0;
    for (auto& c : cands) {
      double f = objective(c.z);
      ++res.evals_used;
      if (std::isnan(f)) {
        f = std::numeric_limits<double>::infinity();
        ++n_bad;
      }
      c.fitness = f;
      if (c.fitness < res.best.fitness) res.best = c;
    }
    if (n_bad == lambda) {
      throw std::runtime_error("all " + std::to_string(lambda) +
                               " evaluations of generation " + std::to_string(g + 1) +
                               " returned NaN; aborting");
    }
    state.tell(cands);
    res.trace.push_back(GenStats{state.generation, res.evals_used,
                                 res.best.fitness, state.sigma,
                                 state.mean.norm()});
  }
  return res;
}

void write_trace_csv(const std::string& path, const std::vector<GenStats>& trace) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for write");
  os << "generation,evals_used,best_fitness,sigma,mean_norm\n";
  char buf[256];
  for (const auto& g : trace) {
    std::snprintf(buf, sizeof(buf), "%ld,%ld,%.17g,%.17g,%.17g\n", g.generation,
                  g.evals_used, g.best_fitness, g.sigma, g.mean_norm);
    os << buf;
  }
}

}  // namespace cbp::cmaes
