#pragma once

#include <string>
#include <vector>

#include "cbp/autodiff.hpp"
#include "cbp/digest.hpp"
#include "cbp/tokenizer.hpp"

namespace cbp::lm {

using ad::Matrix;
using ad::Tensor;

struct LmConfig {
  int vocab_size{Tokenizer::kVocabSize};
  int model_dim{64};
  int n_layers{2};
  int n_heads{2};
  int max_context{128};
};

struct LayerParams {
  Tensor Wq, Wk, Wv, Wo;
  Tensor ln1_g, ln1_b;
  Tensor W1, W2;
  Tensor ln2_g, ln2_b;
};

// Tiny pre-LN causal transformer with learned absolute positions. The soft
// prompt occupies positions 0..t-1; token embeddings follow at t..t+l-1.
// After freeze() all parameters stop requiring grad and weights_digest pins
// the parameter bytes.
class FrozenLM {
 public:
  LmConfig cfg;
  Tensor embedding;      // V x d
  Tensor pos_embedding;  // max_context x d
  std::vector<LayerParams> layers;
  Tensor lnf_g, lnf_b;   // 1 x d
  Tensor unembed;        // d x V

  static FrozenLM random_init(const LmConfig& cfg, std::uint64_t seed);

  std::vector<Tensor*> params();
  std::vector<const Tensor*> params() const;
  void set_requires_grad(bool rg);
  void zero_grads();

  Sha256 compute_digest() const;
  const Sha256& weights_digest() const { return digest_; }
  void freeze();

  Matrix embed(const std::vector<int>& ids) const;  // l x d
  Eigen::RowVectorXd mean_pool(const Matrix& h) const;

  // Forward pass without gradient tracking (evaluation path).
  Matrix forward_logits(const Matrix& prompt, const std::vector<int>& ids) const;
  double answer_loss(const Matrix& prompt, const Example& ex) const;

  // Forward pass on a tape (training path). `prompt` may be a 0 x d Var.
  ad::Var forward_logits_taped(ad::Tape& tape, ad::Var prompt,
                               const std::vector<int>& ids);
  ad::Var answer_loss_taped(ad::Tape& tape, ad::Var prompt, const Example& ex);
  // Mean next-token loss over the whole sequence (pretraining objective).
  // reserve_rows > 0 prepends that many all-zero prompt rows so the model
  // also learns the layout it will see once a soft prompt is attached.
  ad::Var next_token_loss_taped(ad::Tape& tape, const std::vector<int>& ids,
                                long reserve_rows = 0);
  // Same loss with a fixed (non-trainable) prompt occupying the reserved
  // rows — used to pretrain the hint-reading behaviour.
  ad::Var next_token_loss_taped(ad::Tape& tape, const std::vector<int>& ids,
                                const Matrix& fixed_prompt);

  void save(const std::string& path) const;
  static FrozenLM load(const std::string& path);

 private:
  Sha256 digest_{};
  void check_length(long prompt_rows, std::size_t l) const;
};

}  // namespace cbp::lm
