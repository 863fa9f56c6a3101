#include "cbp/toy_lm.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "cbp/rng.hpp"

namespace cbp::lm {

namespace {

constexpr char kMagic[6] = {'C', 'B', 'P', 'L', 'M', '1'};
constexpr double kLnEps = 1e-5;

Matrix randn(GaussianRng& rng, long rows, long cols, double std_dev) {
  Matrix m(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j) m(i, j) = std_dev * rng.normal();
  return m;
}

Matrix layer_norm_rows(const Matrix& x, const Eigen::RowVectorXd& gamma,
                       const Eigen::RowVectorXd& beta) {
  Matrix y(x.rows(), x.cols());
  for (long i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + kLnEps);
    y.row(i) = (((x.row(i).array() - mu) * is) * gamma.array()) + beta.array();
  }
  return y;
}

Matrix causal_softmax_rows(const Matrix& s) {
  Matrix p = Matrix::Zero(s.rows(), s.cols());
  for (long i = 0; i < s.rows(); ++i) {
    const long n = std::min<long>(i + 1, s.cols());
    const double mx = s.row(i).head(n).maxCoeff();
    Eigen::RowVectorXd e = (s.row(i).head(n).array() - mx).exp();
    p.row(i).head(n) = e / e.sum();
  }
  return p;
}

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

void write_matrix(std::ostream& os, Sha256Stream& hash, const Matrix& m) {
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j) {
      double x = m(i, j);
      os.write(reinterpret_cast<const char*>(&x), 8);
      hash.update(&x, 8);
    }
}

void read_matrix(std::istream& is, Sha256Stream& hash, Matrix& m) {
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j) {
      double x = 0;
      is.read(reinterpret_cast<char*>(&x), 8);
      hash.update(&x, 8);
      m(i, j) = x;
    }
}

void hash_matrix(Sha256Stream& hash, const Matrix& m) {
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j) {
      double x = m(i, j);
      hash.update(&x, 8);
    }
}

}  // namespace

FrozenLM FrozenLM::random_init(const LmConfig& cfg, std::uint64_t seed) {
  if (cfg.model_dim % cfg.n_heads != 0) {
    throw std::invalid_argument("model_dim must be divisible by n_heads");
  }
  GaussianRng rng(seed);
  FrozenLM lm;
  lm.cfg = cfg;
  const int d = cfg.model_dim;
  lm.embedding = Tensor(randn(rng, cfg.vocab_size, d, 0.02));
  lm.pos_embedding = Tensor(randn(rng, cfg.max_context, d, 0.02));
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerParams p;
    p.Wq = Tensor(randn(rng, d, d, 0.02));
    p.Wk = Tensor(randn(rng, d, d, 0.02));
    p.Wv = Tensor(randn(rng, d, d, 0.02));
    p.Wo = Tensor(randn(rng, d, d, 0.02));
    p.ln1_g = Tensor(Matrix::Ones(1, d));
    p.ln1_b = Tensor(Matrix::Zero(1, d));
    p.W1 = Tensor(randn(rng, d, 4 * d, 0.02));
    p.W2 = Tensor(randn(rng, 4 * d, d, 0.02));
    p.ln2_g = Tensor(Matrix::Ones(1, d));
    p.ln2_b = Tensor(Matrix::Zero(1, d));
    lm.layers.push_back(std::move(p));
  }
  lm.lnf_g = Tensor(Matrix::Ones(1, d));
  lm.lnf_b = Tensor(Matrix::Zero(1, d));
  lm.unembed = Tensor(randn(rng, d, cfg.vocab_size, 0.02));
  lm.digest_ = lm.compute_digest();
  return lm;
}

std::vector<Tensor*> FrozenLM::params() {
  std::vector<Tensor*> out{&embedding, &pos_embedding};
  for (auto& l : layers) {
    for (Tensor* t : {&l.Wq, &l.Wk, &l.Wv, &l.Wo, &l.ln1_g, &l.ln1_b, &l.W1,
                      &l.W2, &l.ln2_g, &l.ln2_b}) {
      out.push_back(t);
    }
  }
  out.push_back(&lnf_g);
  out.push_back(&lnf_b);
  out.push_back(&unembed);
  return out;
}

std::vector<const Tensor*> FrozenLM::params() const {
  auto mut = const_cast<FrozenLM*>(this)->params();
  return {mut.begin(), mut.end()};
}

void FrozenLM::set_requires_grad(bool rg) {
  for (Tensor* t : params()) t->requires_grad = rg;
}

void FrozenLM::zero_grads() {
  for (Tensor* t : params()) t->zero_grad();
}

Sha256 FrozenLM::compute_digest() const {
  Sha256Stream h;
  for (const Tensor* t : params()) hash_matrix(h, t->value);
  return h.finish();
}

void FrozenLM::freeze() {
  set_requires_grad(false);
  digest_ = compute_digest();
}

Matrix FrozenLM::embed(const std::vector<int>& ids) const {
  Matrix m(static_cast<long>(ids.size()), cfg.model_dim);
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= cfg.vocab_size) {
      throw std::out_of_range("token id out of vocab: " + std::to_string(ids[i]));
    }
    m.row(static_cast<long>(i)) = embedding.value.row(ids[i]);
  }
  return m;
}

Eigen::RowVectorXd FrozenLM::mean_pool(const Matrix& h) const {
  if (h.rows() == 0) throw std::invalid_argument("mean_pool of empty sequence");
  return h.colwise().mean();
}

void FrozenLM::check_length(long prompt_rows, std::size_t l) const {
  if (prompt_rows + static_cast<long>(l) > cfg.max_context) {
    throw std::length_error("sequence length " + std::to_string(prompt_rows + l) +
                            " exceeds max_context " +
                            std::to_string(cfg.max_context));
  }
}

Matrix FrozenLM::forward_logits(const Matrix& prompt,
                                const std::vector<int>& ids) const {
  if (prompt.rows() > 0 && prompt.cols() != cfg.model_dim) {
    throw std::invalid_argument("prompt width != model_dim");
  }
  check_length(prompt.rows(), ids.size());
  const int d = cfg.model_dim;
  const int hd = d / cfg.n_heads;
  const long n = prompt.rows() + static_cast<long>(ids.size());
  Matrix x(n, d);
  if (prompt.rows() > 0) x.topRows(prompt.rows()) = prompt;
  if (!ids.empty()) x.bottomRows(static_cast<long>(ids.size())) = embed(ids);
  x += pos_embedding.value.topRows(n);

  for (const auto& lp : layers) {
    Matrix h = layer_norm_rows(x, lp.ln1_g.value.row(0), lp.ln1_b.value.row(0));
    Matrix Q = h * lp.Wq.value;
    Matrix K = h * lp.Wk.value;
    Matrix V = h * lp.Wv.value;
    Matrix ctx(n, d);
    for (int hI = 0; hI < cfg.n_heads; ++hI) {
      auto Qh = Q.middleCols(hI * hd, hd);
      auto Kh = K.middleCols(hI * hd, hd);
      auto Vh = V.middleCols(hI * hd, hd);
      Matrix scores = (Qh * Kh.transpose()) * (1.0 / std::sqrt(double(hd)));
      Matrix P = causal_softmax_rows(scores);
      ctx.middleCols(hI * hd, hd) = P * Vh;
    }
    x = x + ctx * lp.Wo.value;
    Matrix h2 = layer_norm_rows(x, lp.ln2_g.value.row(0), lp.ln2_b.value.row(0));
    Matrix a = (h2 * lp.W1.value).unaryExpr([](double v) { return ad::gelu_scalar(v); });
    x = x + a * lp.W2.value;
  }
  x = layer_norm_rows(x, lnf_g.value.row(0), lnf_b.value.row(0));
  return x * unembed.value;
}

double FrozenLM::answer_loss(const Matrix& prompt, const Example& ex) const {
  if (ex.answer_ids.ids.empty()) {
    throw std::invalid_argument("answer_loss: empty answer");
  }
  std::vector<int> ids = ex.instruction_ids.ids;
  ids.insert(ids.end(), ex.answer_ids.ids.begin(), ex.answer_ids.ids.end());
  Matrix logits = forward_logits(prompt, ids);
  const long base = prompt.rows() + ex.instruction_ids.length();
  if (base == 0) throw std::invalid_argument("answer has no preceding context");
  double total = 0.0;
  for (int j = 0; j < ex.answer_ids.length(); ++j) {
    total += ad::cross_entropy_row(logits.row(base + j - 1), ex.answer_ids.ids[j]);
  }
  return total / ex.answer_ids.length();
}

ad::Var FrozenLM::forward_logits_taped(ad::Tape& tape, ad::Var prompt,
                                       const std::vector<int>& ids) {
  const long t_rows = tape.val(prompt).rows();
  check_length(t_rows, ids.size());
  const int d = cfg.model_dim;
  const int hd = d / cfg.n_heads;
  const long n = t_rows + static_cast<long>(ids.size());

  ad::Var emb_table = tape.leaf(embedding);
  ad::Var x;
  if (!ids.empty()) {
    ad::Var tok = tape.gather_rows(emb_table, ids);
    x = (t_rows > 0) ? tape.vstack({prompt, tok}) : tok;
  } else {
    x = prompt;
  }
  ad::Var pos = tape.slice_rows(tape.leaf(pos_embedding), 0, n);
  x = tape.add(x, pos);

  for (auto& lp : layers) {
    ad::Var h = tape.layer_norm(x, tape.leaf(lp.ln1_g), tape.leaf(lp.ln1_b));
    ad::Var Q = tape.matmul(h, tape.leaf(lp.Wq));
    ad::Var K = tape.matmul(h, tape.leaf(lp.Wk));
    ad::Var V = tape.matmul(h, tape.leaf(lp.Wv));
    std::vector<ad::Var> heads;
    for (int hI = 0; hI < cfg.n_heads; ++hI) {
      ad::Var Qh = tape.slice_cols(Q, hI * hd, hd);
      ad::Var Kh = tape.slice_cols(K, hI * hd, hd);
      ad::Var Vh = tape.slice_cols(V, hI * hd, hd);
      ad::Var scores =
          tape.scale(tape.matmul(Qh, tape.transpose(Kh)), 1.0 / std::sqrt(double(hd)));
      ad::Var P = tape.causal_softmax(scores);
      heads.push_back(tape.matmul(P, Vh));
    }
    ad::Var ctx = (cfg.n_heads > 1) ? tape.hstack(heads) : heads[0];
    x = tape.add(x, tape.matmul(ctx, tape.leaf(lp.Wo)));
    ad::Var h2 = tape.layer_norm(x, tape.leaf(lp.ln2_g), tape.leaf(lp.ln2_b));
    ad::Var a = tape.gelu(tape.matmul(h2, tape.leaf(lp.W1)));
    x = tape.add(x, tape.matmul(a, tape.leaf(lp.W2)));
  }
  x = tape.layer_norm(x, tape.leaf(lnf_g), tape.leaf(lnf_b));
  return tape.matmul(x, tape.leaf(unembed));
}

ad::Var FrozenLM::answer_loss_taped(ad::Tape& tape, ad::Var prompt,
                                    const Example& ex) {
  if (ex.answer_ids.ids.empty()) {
    throw std::invalid_argument("answer_loss: empty answer");
  }
  std::vector<int> ids = ex.instruction_ids.ids;
  ids.insert(ids.end(), ex.answer_ids.ids.begin(), ex.answer_ids.ids.end());
  ad::Var logits = forward_logits_taped(tape, prompt, ids);
  const long base = tape.val(prompt).rows() + ex.instruction_ids.length();
  if (base == 0) throw std::invalid_argument("answer has no preceding context");
  std::vector<std::pair<int, int>> pos;
  for (int j = 0; j < ex.answer_ids.length(); ++j) {
    pos.emplace_back(static_cast<int>(base) + j - 1, ex.answer_ids.ids[j]);
  }
  return tape.ce_mean(logits, pos);
}

ad::Var FrozenLM::next_token_loss_taped(ad::Tape& tape,
                                        const std::vector<int>& ids,
                                        long reserve_rows) {
  if (reserve_rows < 0) throw std::invalid_argument("reserve_rows must be >= 0");
  return next_token_loss_taped(tape, ids,
                               Matrix::Zero(reserve_rows, cfg.model_dim));
}

ad::Var FrozenLM::next_token_loss_taped(ad::Tape& tape,
                                        const std::vector<int>& ids,
                                        const Matrix& fixed_prompt) {
  if (ids.size() < 2) throw std::invalid_argument("need >= 2 tokens");
  ad::Var prompt = tape.constant(fixed_prompt);
  ad::Var logits = forward_logits_taped(tape, prompt, ids);
  std::vector<std::pair<int, int>> pos;
  for (size_t j = 1; j < ids.size(); ++j) {
    pos.emplace_back(static_cast<int>(fixed_prompt.rows() + j) - 1, ids[j]);
  }
  return tape.ce_mean(logits, pos);
}

void FrozenLM::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for write");
  os.write(kMagic, sizeof(kMagic));
  write_u32(os, static_cast<std::uint32_t>(cfg.vocab_size));
  write_u32(os, static_cast<std::uint32_t>(cfg.model_dim));
  write_u32(os, static_cast<std::uint32_t>(cfg.n_layers));
  write_u32(os, static_cast<std::uint32_t>(cfg.n_heads));
  write_u32(os, static_cast<std::uint32_t>(cfg.max_context));
  Sha256Stream hash;
  for (const Tensor* t : params()) write_matrix(os, hash, t->value);
  Sha256 d = hash.finish();
  os.write(reinterpret_cast<const char*>(d.data()), d.size());
  if (!os) throw std::runtime_error("write failed: " + path);
}

FrozenLM FrozenLM::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  char magic[6];
  is.read(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("bad LM checkpoint magic in " + path);
  }
  LmConfig cfg;
  cfg.vocab_size = static_cast<int>(read_u32(is));
  cfg.model_dim = static_cast<int>(read_u32(is));
  cfg.n_layers = static_cast<int>(read_u32(is));
  cfg.n_heads = static_cast<int>(read_u32(is));
  cfg.max_context = static_cast<int>(read_u32(is));
  FrozenLM lm = random_init(cfg, 0);
  Sha256Stream hash;
  for (Tensor* t : lm.params()) read_matrix(is, hash, t->value);
  Sha256 computed = hash.finish();
  Sha256 stored{};
  is.read(reinterpret_cast<char*>(stored.data()), stored.size());
  if (!is) throw std::runtime_error("truncated LM checkpoint: " + path);
  if (computed != stored) {
    throw std::runtime_error("LM checkpoint digest mismatch in " + path +
                             ": stored " + hex(stored) + " computed " +
                             hex(computed));
  }
  lm.freeze();
  return lm;
}

}  // namespace cbp::lm
