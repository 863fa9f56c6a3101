#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "cbp/cmaes.hpp"

using namespace cbp::cmaes;

namespace {

double sphere(const VectorXd& x) { return x.squaredNorm(); }

double rosenbrock(const VectorXd& x) {
  double s = 0.0;
  for (int i = 0; i + 1 < x.size(); ++i) {
    s += 100.0 * std::pow(x[i + 1] - x[i] * x[i], 2) + std::pow(1.0 - x[i], 2);
  }
  return s;
}

int default_lambda(int n) { return 4 + int(3.0 * std::log(double(n))); }

}  // namespace

TEST_CASE("strategy constants follow the standard formulas") {
  CmaState st = CmaState::init(VectorXd::Zero(10), 1.0, 10, 1);
  const auto& k = st.k;
  CHECK(k.lambda == 10);
  CHECK(k.mu == 5);
  CHECK(k.weights.size() == 5);
  CHECK(k.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
  for (int i = 1; i < k.mu; ++i) CHECK(k.weights[i] < k.weights[i - 1]);
  CHECK(k.mu_eff == doctest::Approx(1.0 / k.weights.squaredNorm()).epsilon(1e-12));
  CHECK(k.c_sigma == doctest::Approx((k.mu_eff + 2.0) / (10 + k.mu_eff + 5.0)).epsilon(1e-12));
  CHECK(k.c_1 == doctest::Approx(2.0 / (11.3 * 11.3 + k.mu_eff)).epsilon(1e-12));
  // E||N(0,I_10)|| ~ sqrt(10)(1 - 1/40 + 1/2100)
  CHECK(k.chi_n == doctest::Approx(std::sqrt(10.0) * (1 - 1.0 / 40 + 1.0 / 2100)).epsilon(1e-12));
}

TEST_CASE("invalid construction is rejected") {
  CHECK_THROWS_AS(CmaState::init(VectorXd::Zero(3), 0.0, 8, 1), std::invalid_argument);
  CHECK_THROWS_AS(CmaState::init(VectorXd::Zero(3), 1.0, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(CmaState::init(VectorXd::Zero(0), 1.0, 8, 1), std::invalid_argument);
}

TEST_CASE("same seed reproduces the run exactly") {
  auto run = [] {
    CmaState st = CmaState::init(VectorXd::Constant(6, 2.0), 0.7, 9, 123);
    return minimize(sphere, st, 450);
  };
  MinimizeResult a = run();
  MinimizeResult b = run();
  CHECK(a.best.fitness == b.best.fitness);
  CHECK(a.best.z == b.best.z);
  REQUIRE(a.trace.size() == b.trace.size());
  for (size_t i = 0; i < a.trace.size(); ++i) {
    CHECK(a.trace[i].best_fitness == b.trace[i].best_fitness);
    CHECK(a.trace[i].sigma == b.trace[i].sigma);
  }
}

TEST_CASE("minimize runs exactly floor(budget / lambda) generations") {
  CmaState st = CmaState::init(VectorXd::Constant(4, 1.0), 0.5, 7, 5);
  MinimizeResult r = minimize(sphere, st, 100);  // floor(100/7) = 14
  CHECK(st.generation == 14);
  CHECK(r.trace.size() == 14);
  CHECK(r.evals_used == 14 * 7);
  CHECK_THROWS_AS(
      [] {
        CmaState s2 = CmaState::init(VectorXd::Zero(4), 0.5, 7, 5);
        minimize(sphere, s2, 6);  // below one generation
      }(),
      std::invalid_argument);
}

TEST_CASE("first-generation injection guarantees the start point is evaluated") {
  VectorXd x0 = VectorXd::Constant(5, 0.75);
  CmaState st = CmaState::init(x0, 0.4, 8, 9);
  MinimizeOptions opts;
  opts.inject_first = x0;
  MinimizeResult r = minimize(sphere, st, 64);
  CHECK(r.best.fitness <= sphere(x0));
}

TEST_CASE("translation equivariance") {
  const VectorXd c = VectorXd::LinSpaced(5, -3.0, 4.0);
  CmaState plain = CmaState::init(VectorXd::Constant(5, 1.5), 0.6, 8, 77);
  CmaState moved = CmaState::init(VectorXd::Constant(5, 1.5) + c, 0.6, 8, 77);
  MinimizeResult a = minimize(sphere, plain, 400);
  MinimizeResult b =
      minimize([&](const VectorXd& x) { return sphere(x - c); }, moved, 400);
  CHECK(a.best.fitness == doctest::Approx(b.best.fitness).epsilon(1e-9));
  CHECK((b.best.z - c - a.best.z).norm() < 1e-9);
}

TEST_CASE("invariance under strictly monotone fitness transforms") {
  // rankings drive everything, so exp(f) must produce the identical mean path
  CmaState a = CmaState::init(VectorXd::Constant(4, 1.2), 0.5, 8, 31);
  CmaState b = CmaState::init(VectorXd::Constant(4, 1.2), 0.5, 8, 31);
  minimize(sphere, a, 240);
  minimize([](const VectorXd& x) { return std::exp(sphere(x)); }, b, 240);
  CHECK(a.mean == b.mean);
  CHECK(a.sigma == b.sigma);
}

TEST_CASE("ask samples around the current mean") {
  CmaState st = CmaState::init(VectorXd::Constant(6, 5.0), 0.3, 4000, 13);
  auto cands = st.ask();
  VectorXd emp = VectorXd::Zero(6);
  for (const auto& cand : cands) emp += cand.z;
  emp /= double(cands.size());
  // CLT bound: sigma / sqrt(lambda) ~ 0.0047 per coordinate; allow 5x
  for (int i = 0; i < 6; ++i) CHECK(std::abs(emp[i] - 5.0) < 5 * 0.3 / std::sqrt(4000.0));
}

TEST_CASE("covariance stays positive definite through adaptation") {
  CmaState st = CmaState::init(VectorXd::Zero(5), 0.5, default_lambda(5), 2);
  minimize(rosenbrock, st, 3000);
  CHECK(st.min_eigenvalue() > 0.0);
  CHECK(st.C.isApprox(st.C.transpose(), 1e-12));
}

TEST_CASE("text snapshot resumes bit-identically") {
  CmaState st = CmaState::init(VectorXd::Constant(5, 2.0), 0.8, 8, 41);
  minimize(sphere, st, 80);  // advance 10 generations
  std::ostringstream snap;
  st.save_text(snap);
  std::istringstream in(snap.str());
  CmaState back = CmaState::load_text(in);
  CHECK(back.generation == st.generation);
  CHECK(back.mean == st.mean);
  CHECK(back.sigma == st.sigma);
  CHECK(back.C == st.C);
  auto ca = st.ask();
  auto cb = back.ask();
  REQUIRE(ca.size() == cb.size());
  for (size_t i = 0; i < ca.size(); ++i) CHECK(ca[i].z == cb[i].z);
}

TEST_CASE("NaN fitness becomes +inf and never wins") {
  auto holey = [](const VectorXd& x) {
    if (x[0] < 0.0) return std::nan("");
    return sphere(x);
  };
  CmaState st = CmaState::init(VectorXd::Constant(3, 1.0), 0.5, 8, 19);
  MinimizeResult r = minimize(holey, st, 400);
  CHECK(std::isfinite(r.best.fitness));
  CHECK(r.best.z[0] >= 0.0);
}

TEST_CASE("tell validates its input") {
  CmaState st = CmaState::init(VectorXd::Zero(3), 1.0, 6, 1);
  auto cands = st.ask();
  cands.pop_back();
  CHECK_THROWS_AS(st.tell(std::move(cands)), std::logic_error);
}

TEST_CASE("sphere converges to the frozen threshold on a spot-check seed") {
  CmaState st = CmaState::init(VectorXd::Constant(10, 3.0), 2.0, default_lambda(10), 1);
  MinimizeResult r = minimize(sphere, st, 5000);
  CHECK(r.best.fitness < 1e-9);
}

TEST_CASE("rosenbrock converges to the frozen threshold on a spot-check seed") {
  CmaState st = CmaState::init(VectorXd::Zero(5), 0.5, default_lambda(5), 1);
  MinimizeResult r = minimize(rosenbrock, st, 30000);
  CHECK(r.best.fitness < 1e-6);
}
