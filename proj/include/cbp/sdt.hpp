#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cbp/datagen.hpp"
#include "cbp/generator.hpp"
#include "cbp/toy_lm.hpp"

namespace cbp::sdt {

using ad::Matrix;
using ad::Tensor;

struct TrainConfig {
  double learning_rate{3e-4};
  int batch_size{16};
  int epochs{5};
  int max_seq_len{96};
  std::string optimizer_kind{"adam"};  // "adam" or "sgd"
  std::uint64_t seed{0};
  bool drop_instance_term{false};
  bool freeze_A{false};

  void validate() const;
};

// Adam with bias correction; falls back to plain SGD when beta1 < 0 is
// requested via make_sgd().
class Optimizer {
 public:
  static Optimizer make(const std::string& kind, double lr);
  void step(const std::vector<Tensor*>& params);

 private:
  bool adam_{true};
  double lr_{1e-3};
  double beta1_{0.9}, beta2_{0.999}, eps_{1e-8};
  long t_{0};
  std::vector<Matrix> m_, v_;
  std::vector<Tensor*> bound_;
};

struct LossCurvePoint {
  int epoch;
  std::string split;
  double mean_loss;
};

struct SdtResult {
  std::vector<LossCurvePoint> curve;
};

// Eq-style server-side domain training: optimizes {L_D, L_U, A, z0} by
// gradient descent against mean answer loss, LM frozen throughout.
SdtResult sdt_train(lm::FrozenLM& lm, gen::GeneratorParams& gen,
                    const std::vector<data::Instance>& domain_data,
                    const TrainConfig& cfg);

struct PromptTuningResult {
  Matrix prompt;  // t x d
  std::vector<LossCurvePoint> curve;
};

// Comparison arm: a single unconditioned soft prompt trained by the same loop.
PromptTuningResult prompt_tuning_baseline(lm::FrozenLM& lm, int prompt_len,
                                          const std::vector<data::Instance>& domain_data,
                                          const TrainConfig& cfg);

// Continues generator training on a small task set (gradient-based
// customization arm). epochs == 0 leaves the generator untouched.
SdtResult fewshot_finetune_variant(lm::FrozenLM& lm, gen::GeneratorParams& gen,
                                   const std::vector<data::Instance>& task_data,
                                   const TrainConfig& cfg);

// Short next-token pretraining of the toy LM on the raw corpus text; the
// caller freezes and checkpoints the result. Half the examples are trained
// with `prompt_len` reserved zero-prompt rows so the frozen model later
// tolerates both the bare and the prompted layout.
std::vector<LossCurvePoint> pretrain_lm(lm::FrozenLM& lm,
                                        const std::vector<data::Instance>& corpus,
                                        int epochs, double lr, std::uint64_t seed,
                                        int prompt_len = 0);

void write_loss_curve_csv(const std::string& path,
                          const std::vector<LossCurvePoint>& curve);

}  // namespace cbp::sdt
