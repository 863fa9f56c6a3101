#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "cbp/generator.hpp"
#include "cbp/toy_lm.hpp"

using cbp::ad::Matrix;
using cbp::gen::GenDims;
using cbp::gen::GeneratorParams;
using cbp::gen::param_count;
using cbp::lm::FrozenLM;
using cbp::lm::LmConfig;
using cbp::lm::Tokenizer;

namespace {

GenDims small_dims() { return GenDims{16, 4, 3, 5}; }

FrozenLM small_lm() {
  LmConfig c;
  c.model_dim = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.max_context = 48;
  return FrozenLM::random_init(c, 3);
}

}  // namespace

TEST_CASE("parameter accounting reproduces the published total") {
  // m*d + m*t*d + r*d + r at the full-scale configuration
  auto pc = param_count(GenDims{4096, 256, 10, 500});
  CHECK(pc.server_total == 13582836ULL);
  CHECK(pc.user_per_task == 500ULL);
}

TEST_CASE("parameter accounting at toy dimensions") {
  auto pc = param_count(GenDims{64, 16, 4, 8});
  // 16*64 + 16*4*64 + 8*64 + 8
  CHECK(pc.server_total == 5640ULL);
  CHECK(pc.user_per_task == 8ULL);

  auto tiny = param_count(small_dims());
  CHECK(tiny.server_total ==
        std::uint64_t(4 * 16 + 4 * 3 * 16 + 5 * 16 + 5));
  CHECK(tiny.user_per_task == 5ULL);
}

TEST_CASE("project computes A z") {
  GeneratorParams g = GeneratorParams::random_init(small_dims(), 8);
  Eigen::VectorXd z = Eigen::VectorXd::LinSpaced(5, -1.0, 1.0);
  CHECK(g.project(z).isApprox(g.A.value * z, 1e-14));
  Eigen::VectorXd wrong(4);
  wrong.setZero();
  CHECK_THROWS_AS(g.project(wrong), std::invalid_argument);
}

TEST_CASE("generator input is pooled embedding plus projected task vector") {
  GeneratorParams g = GeneratorParams::random_init(small_dims(), 8);
  FrozenLM lm = small_lm();
  auto ids = Tokenizer::encode("q: sum of 12? a:");
  Eigen::VectorXd z = Eigen::VectorXd::Constant(5, 0.3);
  Eigen::VectorXd input = g.make_input(lm, ids, z);
  Eigen::VectorXd expected =
      lm.mean_pool(lm.embed(ids)).transpose() + g.A.value * z;
  CHECK(input.isApprox(expected, 1e-14));

  // the ablated input drops the pooled-instance term entirely
  Eigen::VectorXd ablated = g.make_input(lm, ids, z, /*drop_instance=*/true);
  CHECK(ablated.isApprox(Eigen::VectorXd(g.A.value * z), 1e-14));
}

TEST_CASE("prompt is the reshaped two-layer bottleneck output") {
  GeneratorParams g = GeneratorParams::random_init(small_dims(), 12);
  // make L_U nonzero so the check is not vacuous
  g.L_U.value.setRandom();
  Eigen::VectorXd input = Eigen::VectorXd::LinSpaced(16, -0.5, 0.5);
  Matrix p = g.generate_prompt(input);
  REQUIRE(p.rows() == 3);
  REQUIRE(p.cols() == 16);
  Eigen::VectorXd hidden =
      (g.L_D.value * input).unaryExpr([](double v) { return cbp::ad::gelu_scalar(v); });
  Eigen::VectorXd flat = g.L_U.value * hidden;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 16; ++j)
      CHECK(p(i, j) == doctest::Approx(flat[i * 16 + j]).epsilon(1e-14));
}

TEST_CASE("freshly initialized generator emits an exactly zero prompt") {
  GeneratorParams g = GeneratorParams::random_init(small_dims(), 77);
  FrozenLM lm = small_lm();
  auto ids = Tokenizer::encode("q: abc? a:");
  Matrix p = g.prompt_for(lm, ids, g.z0.value.col(0));
  CHECK(p.isZero(0.0));  // L_U starts at zero by construction
}

TEST_CASE("gradient flows to all four generator tensors") {
  GeneratorParams g = GeneratorParams::random_init(small_dims(), 4);
  g.L_U.value.setRandom();
  // z0 starts at zero, which makes dL/dA = (dL/dI) z0^T structurally zero;
  // move it off the origin so every tensor can receive gradient
  g.z0.value.setConstant(0.1);
  FrozenLM lm = small_lm();
  lm.freeze();
  cbp::lm::Example ex;
  ex.instruction_ids.ids = Tokenizer::encode("q: ab? a:");
  ex.answer_ids.ids = Tokenizer::encode(" 1");
  g.zero_grads();
  cbp::ad::Tape tape;
  cbp::ad::Var prompt = g.prompt_taped(tape, lm, ex.instruction_ids.ids);
  tape.backward(lm.answer_loss_taped(tape, prompt, ex));
  for (cbp::ad::Tensor* t : g.params()) {
    CHECK(t->grad.cwiseAbs().maxCoeff() > 0.0);
  }
  for (const cbp::ad::Tensor* t : lm.params()) {
    CHECK(t->grad.isZero());
  }
}

TEST_CASE("checkpoint round-trip preserves every tensor and the digest") {
  GeneratorParams g = GeneratorParams::random_init(small_dims(), 10);
  g.L_U.value.setRandom();
  const std::string path =
      (std::filesystem::temp_directory_path() / "gen_roundtrip.ckpt").string();
  g.save(path);
  GeneratorParams back = GeneratorParams::load(path);
  CHECK(cbp::hex(back.digest()) == cbp::hex(g.digest()));
  CHECK(back.L_D.value == g.L_D.value);
  CHECK(back.L_U.value == g.L_U.value);
  CHECK(back.A.value == g.A.value);
  CHECK(back.z0.value == g.z0.value);
  std::remove(path.c_str());
  std::remove((path + ".json").c_str());
}

TEST_CASE("dimension mismatches are rejected") {
  GeneratorParams g = GeneratorParams::random_init(small_dims(), 10);
  CHECK_THROWS_AS(g.generate_prompt(Eigen::VectorXd::Zero(15)), std::invalid_argument);
  FrozenLM lm = small_lm();
  CHECK_THROWS_AS(
      g.prompt_for(lm, Tokenizer::encode("ab"), Eigen::VectorXd::Zero(2)),
      std::invalid_argument);
}
