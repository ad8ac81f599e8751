#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace gradgen {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Value + optional tape handle. Data buffers are shared and treated as
// immutable once wrapped in a Tensor; optimizers mutate the underlying
// parameter buffers between tapes, never while a tape referencing them
// is still in use.
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  Tape* tape = nullptr;
  int node = -1;

  Tensor() = default;
  Tensor(Shape s, std::shared_ptr<std::vector<double>> d, Tape* t = nullptr,
         int n = -1)
      : shape(std::move(s)), data(std::move(d)), tape(t), node(n) {}

  int64_t size() const { return data ? int64_t(data->size()) : 0; }
  bool on_tape() const { return tape != nullptr && node >= 0; }
  bool defined() const { return data != nullptr; }
  double scalar() const;
  double at(int64_t i) const { return (*data)[i]; }
  double at(int64_t i, int64_t j) const;
};

// Constant (off-tape) tensor constructors. Reject non-finite entries.
Tensor constant(Shape shape, std::vector<double> values);
Tensor constant_scalar(double v);
Tensor full(Shape shape, double v);
Tensor zeros(Shape shape);
Tensor ones(Shape shape);

enum class Op : uint8_t {
  Leaf, Add, Sub, Mul, Div, Scale, AddC, MatMul, SumAll, SumAxis, MeanAll,
  MeanAxis, Broadcast, Reshape, Gather, SliceRows, ConcatRows, Tanh, Sigmoid,
  Exp, Log, Softplus, Sqrt, PowC, MaxC, Softmax, L2Normalize, Sin, Cos
};

struct Node {
  Op op;
  std::vector<int> inputs;
  Shape shape;
  std::shared_ptr<std::vector<double>> value;
  std::vector<double> dpay;
  std::vector<int64_t> ipay;
};

// Gradient of a scalar root with respect to every tape node, keyed by node id.
class Gradients {
 public:
  Gradients(const Tape* tape, std::vector<std::shared_ptr<std::vector<double>>> g)
      : tape_(tape), grads_(std::move(g)) {}
  bool has(const Tensor& t) const;
  // Gradient as an off-tape tensor with t's shape; zeros if t never
  // influenced the root.
  Tensor at(const Tensor& t) const;

 private:
  const Tape* tape_;
  std::vector<std::shared_ptr<std::vector<double>>> grads_;
};

class Tape {
 public:
  Tensor leaf(Shape shape, std::vector<double> values);
  // Wraps an existing buffer without copying (used for model parameters).
  Tensor leaf_shared(Shape shape, std::shared_ptr<std::vector<double>> data);

  int size() const { return int(nodes_.size()); }
  const Node& node(int id) const { return nodes_.at(id); }

  // Reverse-mode sweep from a scalar root. The tape is left unchanged and
  // may be swept again.
  Gradients backward(const Tensor& root) const;

  int push(Node n);

 private:
  std::vector<Node> nodes_;
};

// --- operations -----------------------------------------------------------
// Each op evaluates eagerly; the result lands on a tape iff any input is on
// one (all taped inputs must share the same tape).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);    // c * x
Tensor add_const(const Tensor& x, double c);
Tensor neg(const Tensor& x);
// a (m,k) @ b (k,n); with transpose_b, b is (n,k).
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
Tensor sum(const Tensor& x);                // scalar
Tensor sum(const Tensor& x, int axis);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, int axis);
Tensor broadcast_to(const Tensor& x, const Shape& target);
Tensor reshape(const Tensor& x, const Shape& target);
// out[i] = x.flat[indices[i]]; out_shape must match indices length.
Tensor gather(const Tensor& x, const std::vector<int64_t>& indices,
              const Shape& out_shape);
Tensor slice_rows(const Tensor& x, int64_t row_lo, int64_t row_hi);
Tensor concat_rows(const std::vector<Tensor>& xs);
Tensor tanh_(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp_(const Tensor& x);
Tensor log_(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor sqrt_(const Tensor& x);
Tensor pow_(const Tensor& x, double exponent);
Tensor max_const(const Tensor& x, double c);
Tensor min_const(const Tensor& x, double c);
Tensor softmax(const Tensor& x);            // along last axis
Tensor l2_normalize(const Tensor& x);       // along last axis
Tensor sin_(const Tensor& x);
Tensor cos_(const Tensor& x);

// Dot product of two equal-shaped tensors (sum(mul)).
Tensor dot(const Tensor& a, const Tensor& b);

// String-kind dispatch; throws std::invalid_argument on unknown kind.
// `payload` supplies the constant for kinds that need one ("scale",
// "power", "max-with-constant", ...).
Tensor record(const std::string& op_kind, const std::vector<Tensor>& inputs,
              const std::vector<double>& payload = {});

// Central finite differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
// Throws std::runtime_error naming the coordinate if f returns non-finite.
Tensor finite_diff(const std::function<double(const Tensor&)>& f,
                   const Tensor& x, double h);

// max(|a-b| / max(1, |a|, |b|)) over all coordinates.
double max_rel_err(const Tensor& a, const Tensor& b);

}  // namespace gradgen
