#pragma once

#include <Eigen/Dense>
#include <functional>
#include <utility>
#include <vector>

namespace cbp::ad {

using Matrix = Eigen::MatrixXd;

// Trainable (or frozen) dense array with an accumulated gradient slot.
struct Tensor {
  Matrix value;
  Matrix grad;
  bool requires_grad{true};

  Tensor() = default;
  explicit Tensor(Matrix v, bool rg = true)
      : value(std::move(v)),
        grad(Matrix::Zero(value.rows(), value.cols())),
        requires_grad(rg) {}

  void zero_grad() { grad.setZero(); }
};

class Tape;

// Handle into a Tape; cheap to copy, valid for the tape's lifetime.
struct Var {
  Tape* tape{nullptr};
  int id{-1};
};

// Reverse-mode tape. Rebuilt per forward pass; backward runs each recorded
// node exactly once in reverse order, then flushes leaf gradients into the
// owning Tensors (accumulating with +=).
class Tape {
 public:
  Var leaf(Tensor& t);
  Var constant(Matrix v);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var subtract(Var a, Var b);
  Var mul_elem(Var a, Var b);
  Var scale(Var a, double c);
  Var transpose(Var a);
  Var gelu(Var a);
  Var slice_rows(Var a, int r0, int n);
  Var slice_cols(Var a, int c0, int n);
  Var vstack(const std::vector<Var>& parts);
  Var hstack(const std::vector<Var>& parts);
  Var gather_rows(Var table, std::vector<int> ids);
  Var mean_rows(Var a);                               // 1 x cols
  Var reshape_rowmajor(Var a, int rows, int cols);
  Var layer_norm(Var x, Var gamma, Var beta);         // row-wise; gamma/beta 1 x d
  Var causal_softmax(Var scores);                     // row-wise, mask j > i
  Var sum(Var a);                                     // 1 x 1
  Var softmax_cross_entropy(Var logits, int row, int target);
  // Mean cross-entropy over selected (row, target) pairs of a logits matrix.
  Var ce_mean(Var logits, const std::vector<std::pair<int, int>>& row_targets);

  void backward(Var loss);

  const Matrix& val(Var v) const { return slots_[v.id].value; }
  const Matrix& grad_of(Var v) const { return slots_[v.id].grad; }
  bool needs_grad(Var v) const { return slots_[v.id].needs_grad; }
  int size() const { return static_cast<int>(slots_.size()); }

 private:
  struct Slot {
    Matrix value;
    Matrix grad;
    bool needs_grad{false};
    Tensor* owner{nullptr};
  };
  std::vector<Slot> slots_;
  std::vector<std::function<void()>> nodes_;

  int push(Matrix v, bool needs_grad, Tensor* owner = nullptr);
  Matrix& g(int id) { return slots_[id].grad; }
  const Matrix& v(int id) const { return slots_[id].value; }
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
  void check_same_tape(Var a) const;
};

// Stable -log softmax(logits)[target] for a plain row vector (no tape).
double cross_entropy_row(const Eigen::RowVectorXd& logits, int target);

double gelu_scalar(double x);

}  // namespace cbp::ad
