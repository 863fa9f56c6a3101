#include "cbp/autodiff.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace cbp::ad {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

constexpr double kLnEps = 1e-5;

}  // namespace

double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
}

double cross_entropy_row(const Eigen::RowVectorXd& logits, int target) {
  if (target < 0 || target >= logits.size()) {
    throw std::out_of_range("cross_entropy target " + std::to_string(target) +
                            " out of range for vocab " +
                            std::to_string(logits.size()));
  }
  const double mx = logits.maxCoeff();
  const double lse = std::log((logits.array() - mx).exp().sum());
  return -(logits[target] - mx - lse);
}

int Tape::push(Matrix v, bool needs_grad, Tensor* owner) {
  Slot s;
  s.value = std::move(v);
  if (needs_grad) s.grad = Matrix::Zero(s.value.rows(), s.value.cols());
  s.needs_grad = needs_grad;
  s.owner = owner;
  slots_.push_back(std::move(s));
  return static_cast<int>(slots_.size()) - 1;
}

void Tape::check_same_tape(Var a) const {
  if (a.tape != this || a.id < 0 || a.id >= size()) {
    throw std::logic_error("Var does not belong to this tape");
  }
}

Var Tape::leaf(Tensor& t) {
  return Var{this, push(t.value, t.requires_grad, t.requires_grad ? &t : nullptr)};
}

Var Tape::constant(Matrix v) { return Var{this, push(std::move(v), false)}; }

Var Tape::matmul(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Matrix& A = v(a.id);
  const Matrix& B = v(b.id);
  if (A.cols() != B.rows()) {
    throw std::invalid_argument("matmul dimension mismatch: " + shape_str(A) +
                                " * " + shape_str(B));
  }
  bool ng = needs_grad(a) || needs_grad(b);
  Var out{this, push(A * B, ng)};
  if (ng) {
    int ai = a.id, bi = b.id, oi = out.id;
    record([this, ai, bi, oi] {
      if (slots_[ai].needs_grad) g(ai) += g(oi) * v(bi).transpose();
      if (slots_[bi].needs_grad) g(bi) += v(ai).transpose() * g(oi);
    });
  }
  return out;
}

Var Tape::add(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Matrix& A = v(a.id);
  const Matrix& B = v(b.id);
  if (A.rows() != B.rows() || A.cols() != B.cols()) {
    throw std::invalid_argument("add dimension mismatch: " + shape_str(A) +
                                " + " + shape_str(B));
  }
  bool ng = needs_grad(a) || needs_grad(b);
  Var out{this, push(A + B, ng)};
  if (ng) {
    int ai = a.id, bi = b.id, oi = out.id;
    record([this, ai, bi, oi] {
      if (slots_[ai].needs_grad) g(ai) += g(oi);
      if (slots_[bi].needs_grad) g(bi) += g(oi);
    });
  }
  return out;
}

Var Tape::subtract(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  bool ng = needs_grad(a) || needs_grad(b);
  Var out{this, push(v(a.id) - v(b.id), ng)};
  if (ng) {
    int ai = a.id, bi = b.id, oi = out.id;
    record([this, ai, bi, oi] {
      if (slots_[ai].needs_grad) g(ai) += g(oi);
      if (slots_[bi].needs_grad) g(bi) -= g(oi);
    });
  }
  return out;
}

Var Tape::mul_elem(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  bool ng = needs_grad(a) || needs_grad(b);
  Var out{this, push(v(a.id).cwiseProduct(v(b.id)), ng)};
  if (ng) {
    int ai = a.id, bi = b.id, oi = out.id;
    record([this, ai, bi, oi] {
      if (slots_[ai].needs_grad) g(ai) += g(oi).cwiseProduct(v(bi));
      if (slots_[bi].needs_grad) g(bi) += g(oi).cwiseProduct(v(ai));
    });
  }
  return out;
}

Var Tape::scale(Var a, double c) {
  check_same_tape(a);
  bool ng = needs_grad(a);
  Var out{this, push(v(a.id) * c, ng)};
  if (ng) {
    int ai = a.id, oi = out.id;
    record([this, ai, oi, c] { g(ai) += g(oi) * c; });
  }
  return out;
}

Var Tape::transpose(Var a) {
  check_same_tape(a);
  bool ng = needs_grad(a);
  Var out{this, push(v(a.id).transpose(), ng)};
  if (ng) {
    int ai = a.id, oi = out.id;
    record([this, ai, oi] { g(ai) += g(oi).transpose(); });
  }
  return out;
}

Var Tape::gelu(Var a) {
  check_same_tape(a);
  const Matrix& A = v(a.id);
  Matrix y = A.unaryExpr([](double x) { return gelu_scalar(x); });
  bool ng = needs_grad(a);
  Var out{this, push(std::move(y), ng)};
  if (ng) {
    int ai = a.id, oi = out.id;
    record([this, ai, oi] {
      const Matrix& X = v(ai);
      Matrix d = X.unaryExpr([](double x) {
        const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
        return cdf + x * pdf;
      });
      g(ai) += g(oi).cwiseProduct(d);
    });
  }
  return out;
}

Var Tape::slice_rows(Var a, int r0, int n) {
  check_same_tape(a);
  bool ng = needs_grad(a);
  Var out{this, push(v(a.id).middleRows(r0, n), ng)};
  if (ng) {
    int ai = a.id, oi = out.id;
    record([this, ai, oi, r0, n] { g(ai).middleRows(r0, n) += g(oi); });
  }
  return out;
}

Var Tape::slice_cols(Var a, int c0, int n) {
  check_same_tape(a);
  bool ng = needs_grad(a);
  Var out{this, push(v(a.id).middleCols(c0, n), ng)};
  if (ng) {
    int ai = a.id, oi = out.id;
    record([this, ai, oi, c0, n] { g(ai).middleCols(c0, n) += g(oi); });
  }
  return out;
}

Var Tape::vstack(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("vstack of nothing");
  long rows = 0;
  long cols = v(parts[0].id).cols();
  bool ng = false;
  for (Var p : parts) {
    check_same_tape(p);
    rows += v(p.id).rows();
    ng = ng || needs_grad(p);
  }
  Matrix m(rows, cols);
  long r = 0;
  for (Var p : parts) {
    m.middleRows(r, v(p.id).rows()) = v(p.id);
    r += v(p.id).rows();
  }
  Var out{this, push(std::move(m), ng)};
  if (ng) {
    std::vector<int> ids;
    for (Var p : parts) ids.push_back(p.id);
    int oi = out.id;
    record([this, ids, oi] {
      long r = 0;
      for (int pi : ids) {
        long n = v(pi).rows();
        if (slots_[pi].needs_grad) g(pi) += g(oi).middleRows(r, n);
        r += n;
      }
    });
  }
  return out;
}

Var Tape::hstack(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("hstack of nothing");
  long cols = 0;
  long rows = v(parts[0].id).rows();
  bool ng = false;
  for (Var p : parts) {
    check_same_tape(p);
    cols += v(p.id).cols();
    ng = ng || needs_grad(p);
  }
  Matrix m(rows, cols);
  long c = 0;
  for (Var p : parts) {
    m.middleCols(c, v(p.id).cols()) = v(p.id);
    c += v(p.id).cols();
  }
  Var out{this, push(std::move(m), ng)};
  if (ng) {
    std::vector<int> ids;
    for (Var p : parts) ids.push_back(p.id);
    int oi = out.id;
    record([this, ids, oi] {
      long c = 0;
      for (int pi : ids) {
        long n = v(pi).cols();
        if (slots_[pi].needs_grad) g(pi) += g(oi).middleCols(c, n);
        c += n;
      }
    });
  }
  return out;
}

Var Tape::gather_rows(Var table, std::vector<int> ids) {
  check_same_tape(table);
  const Matrix& T = v(table.id);
  Matrix m(static_cast<long>(ids.size()), T.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= T.rows()) {
      throw std::out_of_range("gather_rows id " + std::to_string(ids[i]) +
                              " out of range " + std::to_string(T.rows()));
    }
    m.row(static_cast<long>(i)) = T.row(ids[i]);
  }
  bool ng = needs_grad(table);
  Var out{this, push(std::move(m), ng)};
  if (ng) {
    int ti = table.id, oi = out.id;
    record([this, ti, oi, ids = std::move(ids)] {
      for (size_t i = 0; i < ids.size(); ++i) {
        g(ti).row(ids[i]) += g(oi).row(static_cast<long>(i));
      }
    });
  }
  return out;
}

Var Tape::mean_rows(Var a) {
  check_same_tape(a);
  const Matrix& A = v(a.id);
  if (A.rows() == 0) throw std::invalid_argument("mean_rows of empty matrix");
  Matrix m = A.colwise().mean();
  bool ng = needs_grad(a);
  Var out{this, push(std::move(m), ng)};
  if (ng) {
    int ai = a.id, oi = out.id;
    record([this, ai, oi] {
      const double inv = 1.0 / static_cast<double>(v(ai).rows());
      g(ai).rowwise() += (g(oi).row(0) * inv).eval();
    });
  }
  return out;
}

Var Tape::reshape_rowmajor(Var a, int rows, int cols) {
  check_same_tape(a);
  const Matrix& A = v(a.id);
  if (A.size() != static_cast<long>(rows) * cols) {
    throw std::invalid_argument("reshape size mismatch: " + shape_str(A) +
                                " -> " + std::to_string(rows) + "x" +
                                std::to_string(cols));
  }
  Matrix m(rows, cols);
  long k = 0;
  for (long i = 0; i < A.rows(); ++i)
    for (long j = 0; j < A.cols(); ++j) {
      m(k / cols, k % cols) = A(i, j);
      ++k;
    }
  bool ng = needs_grad(a);
  Var out{this, push(std::move(m), ng)};
  if (ng) {
    int ai = a.id, oi = out.id;
    record([this, ai, oi, cols] {
      const Matrix& G = g(oi);
      long k = 0;
      Matrix& GA = g(ai);
      for (long i = 0; i < GA.rows(); ++i)
        for (long j = 0; j < GA.cols(); ++j) {
          GA(i, j) += G(k / cols, k % cols);
          ++k;
        }
    });
  }
  return out;
}

Var Tape::layer_norm(Var x, Var gamma, Var beta) {
  check_same_tape(x);
  check_same_tape(gamma);
  check_same_tape(beta);
  const Matrix& X = v(x.id);
  const long d = X.cols();
  Matrix xhat(X.rows(), d);
  Eigen::VectorXd inv_sigma(X.rows());
  for (long i = 0; i < X.rows(); ++i) {
    const double mu = X.row(i).mean();
    const double var = (X.row(i).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + kLnEps);
    inv_sigma[i] = is;
    xhat.row(i) = (X.row(i).array() - mu) * is;
  }
  Matrix y =
      (xhat.array().rowwise() * v(gamma.id).row(0).array()).rowwise() +
      v(beta.id).row(0).array();
  bool ng = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
  Var out{this, push(std::move(y), ng)};
  if (ng) {
    int xi = x.id, gi = gamma.id, bi = beta.id, oi = out.id;
    record([this, xi, gi, bi, oi, xhat = std::move(xhat),
            inv_sigma = std::move(inv_sigma)] {
      const Matrix& GY = g(oi);
      const long d = GY.cols();
      if (slots_[gi].needs_grad)
        g(gi).row(0) += GY.cwiseProduct(xhat).colwise().sum();
      if (slots_[bi].needs_grad) g(bi).row(0) += GY.colwise().sum();
      if (slots_[xi].needs_grad) {
        const Eigen::RowVectorXd gam = v(gi).row(0);
        for (long i = 0; i < GY.rows(); ++i) {
          Eigen::RowVectorXd gxh = GY.row(i).cwiseProduct(gam);
          const double m1 = gxh.mean();
          const double m2 = gxh.cwiseProduct(xhat.row(i)).mean();
          g(xi).row(i) +=
              inv_sigma[i] *
              (gxh.array() - m1 - xhat.row(i).array() * m2).matrix();
        }
        (void)d;
      }
    });
  }
  return out;
}

Var Tape::causal_softmax(Var scores) {
  check_same_tape(scores);
  const Matrix& S = v(scores.id);
  Matrix p = Matrix::Zero(S.rows(), S.cols());
  for (long i = 0; i < S.rows(); ++i) {
    const long n = std::min<long>(i + 1, S.cols());
    const auto row = S.row(i).head(n);
    const double mx = row.maxCoeff();
    Eigen::RowVectorXd e = (row.array() - mx).exp();
    p.row(i).head(n) = e / e.sum();
  }
  bool ng = needs_grad(scores);
  Var out{this, push(std::move(p), ng)};
  if (ng) {
    int si = scores.id, oi = out.id;
    record([this, si, oi] {
      const Matrix& P = v(oi);
      const Matrix& GY = g(oi);
      for (long i = 0; i < P.rows(); ++i) {
        const long n = std::min<long>(i + 1, P.cols());
        const double dot = GY.row(i).head(n).dot(P.row(i).head(n));
        g(si).row(i).head(n) += P.row(i).head(n).cwiseProduct(
            (GY.row(i).head(n).array() - dot).matrix());
      }
    });
  }
  return out;
}

Var Tape::sum(Var a) {
  check_same_tape(a);
  Matrix m(1, 1);
  m(0, 0) = v(a.id).sum();
  bool ng = needs_grad(a);
  Var out{this, push(std::move(m), ng)};
  if (ng) {
    int ai = a.id, oi = out.id;
    record([this, ai, oi] { g(ai).array() += g(oi)(0, 0); });
  }
  return out;
}

Var Tape::softmax_cross_entropy(Var logits, int row, int target) {
  return ce_mean(logits, {{row, target}});
}

Var Tape::ce_mean(Var logits,
                  const std::vector<std::pair<int, int>>& row_targets) {
  check_same_tape(logits);
  if (row_targets.empty()) throw std::invalid_argument("ce_mean over no positions");
  const Matrix& L = v(logits.id);
  double total = 0.0;
  for (auto [r, t] : row_targets) {
    if (r < 0 || r >= L.rows())
      throw std::out_of_range("ce_mean row " + std::to_string(r));
    total += cross_entropy_row(L.row(r), t);
  }
  Matrix m(1, 1);
  m(0, 0) = total / static_cast<double>(row_targets.size());
  bool ng = needs_grad(logits);
  Var out{this, push(std::move(m), ng)};
  if (ng) {
    int li = logits.id, oi = out.id;
    record([this, li, oi, row_targets] {
      const Matrix& L = v(li);
      const double go = g(oi)(0, 0) / static_cast<double>(row_targets.size());
      for (auto [r, t] : row_targets) {
        const double mx = L.row(r).maxCoeff();
        Eigen::RowVectorXd p = (L.row(r).array() - mx).exp();
        p /= p.sum();
        p[t] -= 1.0;
        g(li).row(r) += go * p;
      }
    });
  }
  return out;
}

void Tape::backward(Var loss) {
  check_same_tape(loss);
  const Matrix& L = v(loss.id);
  if (L.rows() != 1 || L.cols() != 1) {
    throw std::logic_error("backward requires a scalar loss, got " +
                           shape_str(L));
  }
  if (!slots_[loss.id].needs_grad) {
    throw std::logic_error(
        "backward on a value with no taped dependency on any requires_grad "
        "tensor");
  }
  g(loss.id)(0, 0) = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  for (auto& s : slots_) {
    if (s.owner != nullptr) s.owner->grad += s.grad;
  }
}

}  // namespace cbp::ad
