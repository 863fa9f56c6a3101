#include "cbp/generator.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "cbp/rng.hpp"

namespace cbp::gen {

namespace {

constexpr char kMagic[5] = {'C', 'B', 'P', 'G', '1'};

Matrix randn(GaussianRng& rng, long rows, long cols, double std_dev) {
  Matrix m(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j) m(i, j) = std_dev * rng.normal();
  return m;
}

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

void write_matrix(std::ostream& os, const Matrix& m) {
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j) {
      double x = m(i, j);
      os.write(reinterpret_cast<const char*>(&x), 8);
    }
}

void read_matrix(std::istream& is, Matrix& m) {
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j) {
      double x = 0;
      is.read(reinterpret_cast<char*>(&x), 8);
      m(i, j) = x;
    }
}

void hash_matrix(Sha256Stream& h, const Matrix& m) {
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j) {
      double x = m(i, j);
      h.update(&x, 8);
    }
}

}  // namespace

ParamCount param_count(const GenDims& dims) {
  if (dims.d <= 0 || dims.m <= 0 || dims.t <= 0 || dims.r <= 0) {
    throw std::invalid_argument("param_count: dims must be positive");
  }
  const auto d = static_cast<std::uint64_t>(dims.d);
  const auto m = static_cast<std::uint64_t>(dims.m);
  const auto t = static_cast<std::uint64_t>(dims.t);
  const auto r = static_cast<std::uint64_t>(dims.r);
  return ParamCount{m * d + m * t * d + r * d + r, r};
}

GeneratorParams GeneratorParams::random_init(const GenDims& dims,
                                             std::uint64_t seed) {
  GaussianRng rng(seed);
  GeneratorParams g;
  g.dims = dims;
  g.L_D = Tensor(randn(rng, dims.m, dims.d, 0.02));
  // L_U starts at zero so the initial soft prompt is exactly zero and SDT
  // departs from the frozen LM's unperturbed behaviour
  g.L_U = Tensor(Matrix::Zero(dims.t * dims.d, dims.m));
  g.A = Tensor(randn(rng, dims.d, dims.r, 1.0 / std::sqrt(double(dims.r))));
  g.z0 = Tensor(Matrix::Zero(dims.r, 1));
  return g;
}

std::vector<Tensor*> GeneratorParams::params() { return {&L_D, &L_U, &A, &z0}; }

void GeneratorParams::zero_grads() {
  for (Tensor* t : params()) t->zero_grad();
}

Eigen::VectorXd GeneratorParams::project(const Eigen::VectorXd& z) const {
  if (z.size() != dims.r) {
    throw std::invalid_argument("task vector dimension " +
                                std::to_string(z.size()) + " != r " +
                                std::to_string(dims.r));
  }
  return A.value * z;
}

Eigen::VectorXd GeneratorParams::make_input(const lm::FrozenLM& lm,
                                            const std::vector<int>& instr_ids,
                                            const Eigen::VectorXd& z,
                                            bool drop_instance) const {
  Eigen::VectorXd az = project(z);
  if (drop_instance) return az;
  if (instr_ids.empty()) throw std::invalid_argument("make_input: empty sequence");
  Eigen::RowVectorXd pooled = lm.mean_pool(lm.embed(instr_ids));
  return pooled.transpose() + az;
}

Matrix GeneratorParams::generate_prompt(const Eigen::VectorXd& input) const {
  if (input.size() != dims.d) {
    throw std::invalid_argument("generator input dimension mismatch");
  }
  Eigen::VectorXd h =
      (L_D.value * input).unaryExpr([](double v) { return ad::gelu_scalar(v); });
  Eigen::VectorXd flat = L_U.value * h;  // t*d
  Matrix p(dims.t, dims.d);
  for (int i = 0; i < dims.t; ++i)
    for (int j = 0; j < dims.d; ++j) p(i, j) = flat[i * dims.d + j];
  return p;
}

Matrix GeneratorParams::prompt_for(const lm::FrozenLM& lm,
                                   const std::vector<int>& instr_ids,
                                   const Eigen::VectorXd& z,
                                   bool drop_instance) const {
  return generate_prompt(make_input(lm, instr_ids, z, drop_instance));
}

ad::Var GeneratorParams::prompt_taped(ad::Tape& tape, lm::FrozenLM& lm,
                                      const std::vector<int>& instr_ids,
                                      bool drop_instance) {
  ad::Var Az = tape.matmul(tape.leaf(A), tape.leaf(z0));  // d x 1
  ad::Var I;
  if (drop_instance) {
    I = Az;
  } else {
    if (instr_ids.empty()) throw std::invalid_argument("prompt_taped: empty sequence");
    ad::Var emb = tape.gather_rows(tape.leaf(lm.embedding), instr_ids);
    ad::Var pooled = tape.transpose(tape.mean_rows(emb));  // d x 1
    I = tape.add(pooled, Az);
  }
  ad::Var h = tape.gelu(tape.matmul(tape.leaf(L_D), I));
  ad::Var flat = tape.matmul(tape.leaf(L_U), h);  // (t*d) x 1
  return tape.reshape_rowmajor(flat, dims.t, dims.d);
}

Sha256 GeneratorParams::digest() const {
  Sha256Stream h;
  for (const Matrix* m : {&L_D.value, &L_U.value, &A.value, &z0.value}) {
    hash_matrix(h, *m);
  }
  return h.finish();
}

void GeneratorParams::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for write");
  os.write(kMagic, sizeof(kMagic));
  write_u32(os, static_cast<std::uint32_t>(dims.d));
  write_u32(os, static_cast<std::uint32_t>(dims.m));
  write_u32(os, static_cast<std::uint32_t>(dims.t));
  write_u32(os, static_cast<std::uint32_t>(dims.r));
  write_matrix(os, L_D.value);
  write_matrix(os, L_U.value);
  write_matrix(os, A.value);
  write_matrix(os, z0.value);
  if (!os) throw std::runtime_error("write failed: " + path);

  nlohmann::json side{{"d", dims.d}, {"m", dims.m}, {"t", dims.t},
                      {"r", dims.r}, {"digest", hex(digest())}};
  std::ofstream js(path + ".json");
  js << side.dump(2) << "\n";
}

GeneratorParams GeneratorParams::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  char magic[5];
  is.read(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("bad generator checkpoint magic in " + path);
  }
  GenDims dims;
  dims.d = static_cast<int>(read_u32(is));
  dims.m = static_cast<int>(read_u32(is));
  dims.t = static_cast<int>(read_u32(is));
  dims.r = static_cast<int>(read_u32(is));
  GeneratorParams g = random_init(dims, 0);
  read_matrix(is, g.L_D.value);
  read_matrix(is, g.L_U.value);
  read_matrix(is, g.A.value);
  read_matrix(is, g.z0.value);
  if (!is) throw std::runtime_error("truncated generator checkpoint: " + path);
  return g;
}

}  // namespace cbp::gen
