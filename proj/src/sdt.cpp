#include "cbp/sdt.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "cbp/rng.hpp"

namespace cbp::sdt {

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw std::invalid_argument("learning_rate must be positive");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (optimizer_kind != "adam" && optimizer_kind != "sgd") {
    throw std::invalid_argument("unknown optimizer: " + optimizer_kind);
  }
}

Optimizer Optimizer::make(const std::string& kind, double lr) {
  Optimizer o;
  o.adam_ = (kind == "adam");
  o.lr_ = lr;
  return o;
}

void Optimizer::step(const std::vector<Tensor*>& params) {
  if (!adam_) {
    for (Tensor* p : params) p->value -= lr_ * p->grad;
    return;
  }
  if (bound_.empty()) {
    bound_ = params;
    for (Tensor* p : params) {
      m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  } else if (bound_ != params) {
    throw std::logic_error("optimizer bound to a different parameter set");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    const Matrix& gr = params[i]->grad;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * gr;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * gr.cwiseProduct(gr);
    params[i]->value.array() -=
        lr_ * (m_[i].array() / bc1) /
        ((v_[i].array() / bc2).sqrt() + eps_);
  }
}

namespace {

std::vector<int> shuffled_indices(size_t n, GaussianRng& rng) {
  std::vector<int> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = int(i);
  for (size_t i = n - 1; i > 0; --i) std::swap(idx[i], idx[rng.below(i + 1)]);
  return idx;
}

struct Snapshot {
  std::vector<Matrix> values;
  static Snapshot take(const std::vector<Tensor*>& params) {
    Snapshot s;
    for (Tensor* p : params) s.values.push_back(p->value);
    return s;
  }
  void restore(const std::vector<Tensor*>& params) const {
    for (size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
  }
};

// Shared epoch loop over per-example taped losses. `make_loss` builds the
// scalar loss Var for one instance on a fresh tape.
template <typename MakeLoss>
std::vector<LossCurvePoint> train_loop(
    const std::vector<data::Instance>& dataset, const TrainConfig& cfg,
    const std::vector<Tensor*>& trainable, MakeLoss&& make_loss,
    int epochs_override = -1) {
  if (dataset.empty()) throw std::invalid_argument("empty training set");
  const int epochs = epochs_override >= 0 ? epochs_override : cfg.epochs;
  Optimizer opt = Optimizer::make(cfg.optimizer_kind, cfg.learning_rate);
  GaussianRng rng(cfg.seed);
  std::vector<LossCurvePoint> curve;
  Snapshot last_good = Snapshot::take(trainable);

  for (int epoch = 0; epoch < epochs; ++epoch) {
    auto idx = shuffled_indices(dataset.size(), rng);
    double epoch_loss = 0.0;
    size_t done = 0;
    for (size_t start = 0; start < idx.size(); start += size_t(cfg.batch_size)) {
      const size_t end = std::min(idx.size(), start + size_t(cfg.batch_size));
      for (Tensor* p : trainable) p->zero_grad();
      for (size_t i = start; i < end; ++i) {
        ad::Tape tape;
        ad::Var loss = make_loss(tape, dataset[size_t(idx[i])]);
        ad::Var scaled = tape.scale(loss, 1.0 / double(end - start));
        tape.backward(scaled);
        epoch_loss += tape.val(loss)(0, 0);
        ++done;
      }
      opt.step(trainable);
    }
    const double mean = epoch_loss / double(done);
    if (!std::isfinite(mean)) {
      last_good.restore(trainable);
      throw std::runtime_error("training diverged (NaN loss) at epoch " +
                               std::to_string(epoch + 1) +
                               "; parameters restored to last good epoch");
    }
    curve.push_back(LossCurvePoint{epoch + 1, "train", mean});
    last_good = Snapshot::take(trainable);
  }
  return curve;
}

}  // namespace

SdtResult sdt_train(lm::FrozenLM& lm, gen::GeneratorParams& gen,
                    const std::vector<data::Instance>& domain_data,
                    const TrainConfig& cfg) {
  cfg.validate();
  lm.set_requires_grad(false);
  std::vector<Tensor*> trainable{&gen.L_D, &gen.L_U};
  if (!cfg.freeze_A) trainable.push_back(&gen.A);
  trainable.push_back(&gen.z0);

  auto curve = train_loop(domain_data, cfg, trainable,
                          [&](ad::Tape& tape, const data::Instance& inst) {
                            lm::Example ex = data::to_example(inst);
                            ad::Var prompt = gen.prompt_taped(
                                tape, lm, ex.instruction_ids.ids,
                                cfg.drop_instance_term);
                            return lm.answer_loss_taped(tape, prompt, ex);
                          });
  return SdtResult{std::move(curve)};
}

PromptTuningResult prompt_tuning_baseline(lm::FrozenLM& lm, int prompt_len,
                                          const std::vector<data::Instance>& domain_data,
                                          const TrainConfig& cfg) {
  cfg.validate();
  if (prompt_len < 1) throw std::invalid_argument("prompt_len must be >= 1");
  lm.set_requires_grad(false);
  Tensor prompt(Matrix::Zero(prompt_len, lm.cfg.model_dim));
  std::vector<Tensor*> trainable{&prompt};

  auto curve = train_loop(domain_data, cfg, trainable,
                          [&](ad::Tape& tape, const data::Instance& inst) {
                            lm::Example ex = data::to_example(inst);
                            ad::Var p = tape.leaf(prompt);
                            return lm.answer_loss_taped(tape, p, ex);
                          });
  return PromptTuningResult{prompt.value, std::move(curve)};
}

SdtResult fewshot_finetune_variant(lm::FrozenLM& lm, gen::GeneratorParams& gen,
                                   const std::vector<data::Instance>& task_data,
                                   const TrainConfig& cfg) {
  if (cfg.epochs == 0) return SdtResult{};
  return sdt_train(lm, gen, task_data, cfg);
}

std::vector<LossCurvePoint> pretrain_lm(lm::FrozenLM& lm,
                                        const std::vector<data::Instance>& corpus,
                                        int epochs, double lr, std::uint64_t seed,
                                        int prompt_len) {
  lm.set_requires_grad(true);
  TrainConfig cfg;
  cfg.learning_rate = lr;
  cfg.batch_size = 16;
  cfg.epochs = epochs;
  cfg.seed = seed;
  cfg.validate();
  auto trainable = lm.params();
  long step = 0;
  GaussianRng shuffle_rng(seed ^ 0x9e3779b97f4a7c15ULL);
  // Four layouts cycle when prompt slots are reserved: bare, zero prompt,
  // a "hint" prompt holding the embedding of the informative answer
  // character, and a hint over a gibberish question. Bare/zero layouts pair
  // the question with a RANDOM candidate, so the model learns the
  // instruction format and the candidate vocabulary but never the task
  // mappings; the hint layouts carry the gold answer, which makes the prompt
  // slots the sole route to task knowledge — the frozen-LM analogue of
  // adapting a generic model purely via prompts. The gibberish variant keeps
  // the hint-reading behaviour from binding to the domain surfaces.
  auto hint_loss = [&](ad::Tape& tape, const std::string& instruction,
                       const std::string& answer) {
    auto ids = lm::Tokenizer::encode(instruction + answer);
    const auto ans = lm::Tokenizer::encode(answer);
    const int hint_id = ans.size() > 1 ? ans[1] : ans[0];
    Matrix hint(prompt_len, lm.cfg.model_dim);
    hint.rowwise() = lm.embedding.value.row(hint_id);
    return lm.next_token_loss_taped(tape, ids, hint);
  };
  auto gibberish_body = [&] {
    // multi-word nonsense shaped like a real question (words, digits, "?")
    std::string body;
    const int n_words = 2 + int(shuffle_rng.below(3));
    for (int w = 0; w < n_words; ++w) {
      if (w > 0) body.push_back(' ');
      const int len = 2 + int(shuffle_rng.below(7));
      for (int i = 0; i < len; ++i) {
        body.push_back(shuffle_rng.below(4) == 0
                           ? char('0' + shuffle_rng.below(10))
                           : char('a' + shuffle_rng.below(26)));
      }
    }
    return body;
  };
  auto curve = train_loop(
      corpus, cfg, trainable, [&](ad::Tape& tape, const data::Instance& inst) {
        const long layout = (prompt_len > 0) ? step++ % 5 : 0;
        if (layout < 2) {
          const std::string& ans =
              inst.candidates[shuffle_rng.below(inst.candidates.size())];
          auto ids = lm::Tokenizer::encode(inst.instruction + ans);
          return lm.next_token_loss_taped(tape, ids, layout == 0 ? 0 : prompt_len);
        }
        if (layout == 2) return hint_loss(tape, inst.instruction, inst.answer);
        std::string ans;
        switch (shuffle_rng.below(3)) {
          case 0: ans = " " + std::string(1, char('0' + shuffle_rng.below(10))); break;
          case 1: ans = " " + std::string(1, char('a' + shuffle_rng.below(26))); break;
          default: ans = shuffle_rng.below(2) ? " yes" : " no"; break;
        }
        return hint_loss(tape, "q: " + gibberish_body() + "? a:", ans);
      });
  return curve;
}

void write_loss_curve_csv(const std::string& path,
                          const std::vector<LossCurvePoint>& curve) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for write");
  os << "epoch,split,mean_loss\n";
  char buf[128];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof(buf), "%d,%s,%.17g\n", p.epoch, p.split.c_str(),
                  p.mean_loss);
    os << buf;
  }
}

}  // namespace cbp::sdt
