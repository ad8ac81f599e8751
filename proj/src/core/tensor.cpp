#include "gradgen/tensor.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <sstream>

#include "gradgen/kernels.hpp"

namespace gradgen {

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

double Tensor::scalar() const {
  if (size() != 1)
    throw std::invalid_argument("scalar() on tensor of shape " + shape_str(shape));
  return (*data)[0];
}

double Tensor::at(int64_t i, int64_t j) const {
  return (*data)[size_t(i * shape.back() + j)];
}

static void check_finite(const std::vector<double>& v, const char* what) {
  for (size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i]))
      throw std::invalid_argument(std::string(what) +
                                  ": non-finite entry at index " + std::to_string(i));
  }
}

Tensor constant(Shape shape, std::vector<double> values) {
  if (numel(shape) != int64_t(values.size()))
    throw std::invalid_argument("constant: shape " + shape_str(shape) + " wants " +
                                std::to_string(numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  check_finite(values, "constant");
  return Tensor(std::move(shape), std::make_shared<std::vector<double>>(std::move(values)));
}

Tensor constant_scalar(double v) { return constant({}, {v}); }

Tensor full(Shape shape, double v) {
  if (!std::isfinite(v)) throw std::invalid_argument("full: non-finite fill value");
  auto d = std::make_shared<std::vector<double>>(size_t(numel(shape)), v);
  return Tensor(std::move(shape), std::move(d));
}

Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

// --- tape -------------------------------------------------------------------

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return int(nodes_.size()) - 1;
}

Tensor Tape::leaf(Shape shape, std::vector<double> values) {
  Tensor c = constant(std::move(shape), std::move(values));
  return leaf_shared(c.shape, c.data);
}

Tensor Tape::leaf_shared(Shape shape, std::shared_ptr<std::vector<double>> data) {
  if (numel(shape) != int64_t(data->size()))
    throw std::invalid_argument("leaf: shape/data mismatch");
  Node n;
  n.op = Op::Leaf;
  n.shape = shape;
  n.value = data;
  int id = push(std::move(n));
  return Tensor(std::move(shape), std::move(data), this, id);
}

bool Gradients::has(const Tensor& t) const {
  return t.on_tape() && t.tape == tape_ && t.node < int(grads_.size()) &&
         grads_[size_t(t.node)] != nullptr;
}

Tensor Gradients::at(const Tensor& t) const {
  if (!t.on_tape() || t.tape != tape_)
    throw std::invalid_argument("Gradients::at: tensor not on this tape");
  if (!has(t)) return zeros(t.shape);
  return Tensor(t.shape, grads_[size_t(t.node)]);
}

// --- op plumbing ------------------------------------------------------------

namespace {

Tape* common_tape(const std::vector<const Tensor*>& xs) {
  Tape* t = nullptr;
  for (const Tensor* x : xs) {
    if (!x->defined()) throw std::invalid_argument("op input is undefined");
    if (x->on_tape()) {
      if (t && t != x->tape)
        throw std::invalid_argument("op inputs live on different tapes");
      t = x->tape;
    }
  }
  return t;
}

Tensor emit(Tape* tape, Op op, const std::vector<const Tensor*>& ins, Shape shape,
            std::shared_ptr<std::vector<double>> value,
            std::vector<double> dpay = {}, std::vector<int64_t> ipay = {}) {
  if (!tape) return Tensor(std::move(shape), std::move(value));
  Node n;
  n.op = op;
  n.shape = shape;
  n.value = value;
  n.dpay = std::move(dpay);
  n.ipay = std::move(ipay);
  for (const Tensor* x : ins) {
    // Constants fold into the node as auxiliary leaves so backward can see
    // their values without granting them gradients.
    if (x->on_tape()) {
      n.inputs.push_back(x->node);
    } else {
      Node leaf;
      leaf.op = Op::Leaf;
      leaf.shape = x->shape;
      leaf.value = x->data;
      n.inputs.push_back(tape->push(std::move(leaf)));
    }
  }
  int id = tape->push(std::move(n));
  return Tensor(std::move(shape), std::move(value), tape, id);
}

std::shared_ptr<std::vector<double>> buf(int64_t n, double v = 0.0) {
  return std::make_shared<std::vector<double>>(size_t(n), v);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape) + " vs " + shape_str(b.shape));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  // log(1+e^x) = max(x,0) + log1p(e^-|x|)
  return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

template <class F>
Tensor elementwise_binary(Op op, const char* name, const Tensor& a, const Tensor& b,
                          F f) {
  require_same_shape(a, b, name);
  Tape* tape = common_tape({&a, &b});
  auto out = buf(a.size());
  const double* pa = a.data->data();
  const double* pb = b.data->data();
  double* po = out->data();
  kern::parallel_for(a.size(), [&](int64_t i) { po[i] = f(pa[i], pb[i]); });
  return emit(tape, op, {&a, &b}, a.shape, std::move(out));
}

template <class F>
Tensor elementwise_unary(Op op, const Tensor& x, F f, std::vector<double> dpay = {}) {
  Tape* tape = common_tape({&x});
  auto out = buf(x.size());
  const double* px = x.data->data();
  double* po = out->data();
  kern::parallel_for(x.size(), [&](int64_t i) { po[i] = f(px[i]); });
  return emit(tape, op, {&x}, x.shape, std::move(out), std::move(dpay));
}

// Right-aligned numpy-style broadcast mapping from `target` down to `src`.
struct BroadcastMap {
  std::vector<int64_t> tdims;       // target dims
  std::vector<int64_t> sstride;     // stride into src per target axis (0 if broadcast)
};

BroadcastMap make_broadcast_map(const Shape& src, const Shape& target) {
  const int tr = int(target.size());
  const int sr = int(src.size());
  if (sr > tr)
    throw std::invalid_argument("broadcast: source rank exceeds target rank, " +
                                shape_str(src) + " vs " + shape_str(target));
  BroadcastMap m;
  m.tdims = target;
  m.sstride.assign(size_t(tr), 0);
  std::vector<int64_t> sstrides(size_t(sr), 1);
  for (int i = sr - 2; i >= 0; --i)
    sstrides[size_t(i)] = sstrides[size_t(i + 1)] * src[size_t(i + 1)];
  for (int i = 0; i < sr; ++i) {
    const int64_t sd = src[size_t(sr - 1 - i)];
    const int64_t td = target[size_t(tr - 1 - i)];
    if (sd == td) {
      m.sstride[size_t(tr - 1 - i)] = sstrides[size_t(sr - 1 - i)];
    } else if (sd == 1) {
      m.sstride[size_t(tr - 1 - i)] = 0;
    } else {
      throw std::invalid_argument("broadcast: cannot expand " + shape_str(src) +
                                  " to " + shape_str(target));
    }
  }
  return m;
}

int64_t broadcast_src_index(const BroadcastMap& m, int64_t out_idx) {
  int64_t src = 0;
  for (int i = int(m.tdims.size()) - 1; i >= 0; --i) {
    const int64_t d = m.tdims[size_t(i)];
    const int64_t c = out_idx % d;
    out_idx /= d;
    src += c * m.sstride[size_t(i)];
  }
  return src;
}

}  // namespace

// --- forward ops ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(Op::Add, "add", a, b, [](double x, double y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(Op::Sub, "sub", a, b, [](double x, double y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(Op::Mul, "mul", a, b, [](double x, double y) { return x * y; });
}
Tensor div(const Tensor& a, const Tensor& b) {
  return elementwise_binary(Op::Div, "div", a, b, [](double x, double y) { return x / y; });
}
Tensor scale(const Tensor& x, double c) {
  return elementwise_unary(Op::Scale, x, [c](double v) { return c * v; }, {c});
}
Tensor add_const(const Tensor& x, double c) {
  return elementwise_unary(Op::AddC, x, [c](double v) { return v + c; }, {c});
}
Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.shape.size() != 2 || b.shape.size() != 2)
    throw std::invalid_argument("matmul: rank-2 operands required, got " +
                                shape_str(a.shape) + " and " + shape_str(b.shape));
  const int64_t m = a.shape[0], k = a.shape[1];
  const int64_t bk = transpose_b ? b.shape[1] : b.shape[0];
  const int64_t n = transpose_b ? b.shape[0] : b.shape[1];
  if (k != bk)
    throw std::invalid_argument("matmul: inner dim mismatch " + shape_str(a.shape) +
                                (transpose_b ? " @T " : " @ ") + shape_str(b.shape));
  Tape* tape = common_tape({&a, &b});
  auto out = buf(m * n);
  if (transpose_b)
    kern::matmul_nt(m, k, n, a.data->data(), b.data->data(), out->data());
  else
    kern::matmul(m, k, n, a.data->data(), b.data->data(), out->data());
  return emit(tape, Op::MatMul, {&a, &b}, {m, n}, std::move(out), {},
              {transpose_b ? 1 : 0});
}

Tensor sum(const Tensor& x) {
  Tape* tape = common_tape({&x});
  auto out = buf(1);
  (*out)[0] = kern::sum(x.data->data(), x.size());
  return emit(tape, Op::SumAll, {&x}, {}, std::move(out));
}

namespace {
// Reduce over `axis`: out[outer, inner] = reduce x[outer, axis, inner].
struct AxisDims {
  int64_t outer, n, inner;
};
AxisDims axis_dims(const Shape& s, int axis) {
  if (axis < 0 || axis >= int(s.size()))
    throw std::invalid_argument("reduce: axis " + std::to_string(axis) +
                                " out of range for " + shape_str(s));
  AxisDims d{1, s[size_t(axis)], 1};
  for (int i = 0; i < axis; ++i) d.outer *= s[size_t(i)];
  for (int i = axis + 1; i < int(s.size()); ++i) d.inner *= s[size_t(i)];
  return d;
}
Shape drop_axis(const Shape& s, int axis) {
  Shape out;
  for (int i = 0; i < int(s.size()); ++i)
    if (i != axis) out.push_back(s[size_t(i)]);
  return out;
}
}  // namespace

Tensor sum(const Tensor& x, int axis) {
  Tape* tape = common_tape({&x});
  const AxisDims d = axis_dims(x.shape, axis);
  auto out = buf(d.outer * d.inner);
  const double* px = x.data->data();
  double* po = out->data();
  kern::parallel_for(d.outer * d.inner, [&](int64_t oi) {
    const int64_t o = oi / d.inner, i = oi % d.inner;
    const double* base = px + o * d.n * d.inner + i;
    double s = 0.0;
    for (int64_t j = 0; j < d.n; ++j) s += base[j * d.inner];
    po[oi] = s;
  });
  return emit(tape, Op::SumAxis, {&x}, drop_axis(x.shape, axis), std::move(out), {},
              {axis});
}

Tensor mean(const Tensor& x) {
  Tape* tape = common_tape({&x});
  auto out = buf(1);
  (*out)[0] = kern::sum(x.data->data(), x.size()) / double(x.size());
  return emit(tape, Op::MeanAll, {&x}, {}, std::move(out));
}

Tensor mean(const Tensor& x, int axis) {
  Tape* tape = common_tape({&x});
  const AxisDims d = axis_dims(x.shape, axis);
  auto out = buf(d.outer * d.inner);
  const double* px = x.data->data();
  double* po = out->data();
  const double inv = 1.0 / double(d.n);
  kern::parallel_for(d.outer * d.inner, [&](int64_t oi) {
    const int64_t o = oi / d.inner, i = oi % d.inner;
    const double* base = px + o * d.n * d.inner + i;
    double s = 0.0;
    for (int64_t j = 0; j < d.n; ++j) s += base[j * d.inner];
    po[oi] = s * inv;
  });
  return emit(tape, Op::MeanAxis, {&x}, drop_axis(x.shape, axis), std::move(out), {},
              {axis});
}

Tensor broadcast_to(const Tensor& x, const Shape& target) {
  Tape* tape = common_tape({&x});
  const BroadcastMap m = make_broadcast_map(x.shape, target);
  auto out = buf(numel(target));
  const double* px = x.data->data();
  double* po = out->data();
  kern::parallel_for(numel(target),
                     [&](int64_t i) { po[i] = px[broadcast_src_index(m, i)]; });
  std::vector<int64_t> ipay = target;
  return emit(tape, Op::Broadcast, {&x}, target, std::move(out), {}, std::move(ipay));
}

Tensor reshape(const Tensor& x, const Shape& target) {
  if (numel(target) != x.size())
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape) + " as " +
                                shape_str(target));
  Tape* tape = common_tape({&x});
  // Same buffer, new shape; the node exists only to route gradients.
  return emit(tape, Op::Reshape, {&x}, target, x.data);
}

Tensor gather(const Tensor& x, const std::vector<int64_t>& indices,
              const Shape& out_shape) {
  if (numel(out_shape) != int64_t(indices.size()))
    throw std::invalid_argument("gather: out shape " + shape_str(out_shape) +
                                " does not match index count " +
                                std::to_string(indices.size()));
  Tape* tape = common_tape({&x});
  auto out = buf(int64_t(indices.size()));
  const double* px = x.data->data();
  double* po = out->data();
  const int64_t n = x.size();
  for (size_t i = 0; i < indices.size(); ++i) {
    const int64_t idx = indices[i];
    if (idx < 0 || idx >= n)
      throw std::invalid_argument("gather: index " + std::to_string(idx) +
                                  " out of range [0," + std::to_string(n) + ")");
    po[i] = px[idx];
  }
  return emit(tape, Op::Gather, {&x}, out_shape, std::move(out), {}, indices);
}

Tensor slice_rows(const Tensor& x, int64_t row_lo, int64_t row_hi) {
  if (x.shape.empty())
    throw std::invalid_argument("slice: scalar has no rows");
  const int64_t rows = x.shape[0];
  if (row_lo < 0 || row_hi > rows || row_lo >= row_hi)
    throw std::invalid_argument("slice: rows [" + std::to_string(row_lo) + "," +
                                std::to_string(row_hi) + ") invalid for " +
                                shape_str(x.shape));
  Tape* tape = common_tape({&x});
  const int64_t rowsz = x.size() / rows;
  Shape out_shape = x.shape;
  out_shape[0] = row_hi - row_lo;
  auto out = buf((row_hi - row_lo) * rowsz);
  std::memcpy(out->data(), x.data->data() + row_lo * rowsz,
              size_t((row_hi - row_lo) * rowsz) * sizeof(double));
  return emit(tape, Op::SliceRows, {&x}, std::move(out_shape), std::move(out), {},
              {row_lo, row_hi});
}

Tensor concat_rows(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  Shape tail = xs[0].shape;
  if (tail.empty()) throw std::invalid_argument("concat: scalar inputs");
  std::vector<const Tensor*> ptrs;
  int64_t rows = 0;
  for (const Tensor& x : xs) {
    if (Shape(x.shape.begin() + 1, x.shape.end()) !=
        Shape(tail.begin() + 1, tail.end()))
      throw std::invalid_argument("concat: row shape mismatch " + shape_str(x.shape) +
                                  " vs " + shape_str(tail));
    rows += x.shape[0];
    ptrs.push_back(&x);
  }
  Tape* tape = common_tape(ptrs);
  Shape out_shape = tail;
  out_shape[0] = rows;
  auto out = buf(numel(out_shape));
  int64_t off = 0;
  for (const Tensor& x : xs) {
    std::memcpy(out->data() + off, x.data->data(), size_t(x.size()) * sizeof(double));
    off += x.size();
  }
  return emit(tape, Op::ConcatRows, ptrs, std::move(out_shape), std::move(out));
}

Tensor tanh_(const Tensor& x) {
  return elementwise_unary(Op::Tanh, x, [](double v) { return std::tanh(v); });
}
Tensor sigmoid(const Tensor& x) {
  return elementwise_unary(Op::Sigmoid, x, stable_sigmoid);
}
Tensor exp_(const Tensor& x) {
  return elementwise_unary(Op::Exp, x, [](double v) { return std::exp(v); });
}
Tensor log_(const Tensor& x) {
  return elementwise_unary(Op::Log, x, [](double v) { return std::log(v); });
}
Tensor softplus(const Tensor& x) {
  return elementwise_unary(Op::Softplus, x, stable_softplus);
}
Tensor sqrt_(const Tensor& x) {
  return elementwise_unary(Op::Sqrt, x, [](double v) { return std::sqrt(v); });
}
Tensor pow_(const Tensor& x, double e) {
  return elementwise_unary(Op::PowC, x, [e](double v) { return std::pow(v, e); }, {e});
}
Tensor max_const(const Tensor& x, double c) {
  return elementwise_unary(Op::MaxC, x, [c](double v) { return std::max(v, c); }, {c});
}
Tensor min_const(const Tensor& x, double c) {
  // min(x,c) = -max(-x,-c)
  return neg(max_const(neg(x), -c));
}
Tensor sin_(const Tensor& x) {
  return elementwise_unary(Op::Sin, x, [](double v) { return std::sin(v); });
}
Tensor cos_(const Tensor& x) {
  return elementwise_unary(Op::Cos, x, [](double v) { return std::cos(v); });
}

Tensor softmax(const Tensor& x) {
  if (x.shape.empty()) throw std::invalid_argument("softmax: scalar input");
  Tape* tape = common_tape({&x});
  const int64_t cols = x.shape.back();
  const int64_t rows = x.size() / cols;
  auto out = buf(x.size());
  const double* px = x.data->data();
  double* po = out->data();
  kern::parallel_for(rows, [&](int64_t r) {
    const double* in = px + r * cols;
    double* o = po + r * cols;
    double m = in[0];
    for (int64_t j = 1; j < cols; ++j) m = std::max(m, in[j]);
    double s = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      o[j] = std::exp(in[j] - m);
      s += o[j];
    }
    const double inv = 1.0 / s;
    for (int64_t j = 0; j < cols; ++j) o[j] *= inv;
  });
  return emit(tape, Op::Softmax, {&x}, x.shape, std::move(out));
}

Tensor l2_normalize(const Tensor& x) {
  if (x.shape.empty()) throw std::invalid_argument("l2-normalize: scalar input");
  Tape* tape = common_tape({&x});
  const int64_t cols = x.shape.back();
  const int64_t rows = x.size() / cols;
  auto out = buf(x.size());
  const double* px = x.data->data();
  double* po = out->data();
  kern::parallel_for(rows, [&](int64_t r) {
    const double* in = px + r * cols;
    double* o = po + r * cols;
    double s = 0.0;
    for (int64_t j = 0; j < cols; ++j) s += in[j] * in[j];
    const double inv = 1.0 / std::sqrt(s + 1e-24);
    for (int64_t j = 0; j < cols; ++j) o[j] = in[j] * inv;
  });
  return emit(tape, Op::L2Normalize, {&x}, x.shape, std::move(out));
}

Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

// --- backward ---------------------------------------------------------------

namespace {

using GradBuf = std::shared_ptr<std::vector<double>>;

void accumulate(std::vector<GradBuf>& grads, int id, const Node& n,
                const std::function<void(double*)>& fill) {
  if (!grads[size_t(id)]) grads[size_t(id)] = buf(numel(n.shape));
  fill(grads[size_t(id)]->data());
}

}  // namespace

Gradients Tape::backward(const Tensor& root) const {
  if (!root.on_tape() || root.tape != this)
    throw std::invalid_argument("backward: root is not on this tape");
  if (!root.shape.empty())
    throw std::invalid_argument("backward: root must be scalar, got shape " +
                                shape_str(root.shape));
  std::vector<GradBuf> grads(nodes_.size());
  grads[size_t(root.node)] = buf(1, 1.0);

  for (int id = root.node; id >= 0; --id) {
    const Node& n = nodes_[size_t(id)];
    if (!grads[size_t(id)] || n.op == Op::Leaf) continue;
    const double* g = grads[size_t(id)]->data();
    auto in = [&](int slot) -> const Node& { return nodes_[size_t(n.inputs[size_t(slot)])]; };
    auto acc = [&](int slot, const std::function<void(double*)>& fill) {
      const int iid = n.inputs[size_t(slot)];
      accumulate(grads, iid, nodes_[size_t(iid)], fill);
    };
    const int64_t sz = numel(n.shape);

    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::Add: {
        acc(0, [&](double* gx) { kern::parallel_for(sz, [&](int64_t i) { gx[i] += g[i]; }); });
        acc(1, [&](double* gx) { kern::parallel_for(sz, [&](int64_t i) { gx[i] += g[i]; }); });
        break;
      }
      case Op::Sub: {
        acc(0, [&](double* gx) { kern::parallel_for(sz, [&](int64_t i) { gx[i] += g[i]; }); });
        acc(1, [&](double* gx) { kern::parallel_for(sz, [&](int64_t i) { gx[i] -= g[i]; }); });
        break;
      }
      case Op::Mul: {
        const double* a = in(0).value->data();
        const double* b = in(1).value->data();
        acc(0, [&](double* gx) { kern::parallel_for(sz, [&](int64_t i) { gx[i] += g[i] * b[i]; }); });
        acc(1, [&](double* gx) { kern::parallel_for(sz, [&](int64_t i) { gx[i] += g[i] * a[i]; }); });
        break;
      }
      case Op::Div: {
        const double* a = in(0).value->data();
        const double* b = in(1).value->data();
        acc(0, [&](double* gx) { kern::parallel_for(sz, [&](int64_t i) { gx[i] += g[i] / b[i]; }); });
        acc(1, [&](double* gx) {
          kern::parallel_for(sz, [&](int64_t i) { gx[i] -= g[i] * a[i] / (b[i] * b[i]); });
        });
        break;
      }
      case Op::Scale: {
        const double c = n.dpay[0];
        acc(0, [&](double* gx) { kern::parallel_for(sz, [&](int64_t i) { gx[i] += c * g[i]; }); });
        break;
      }
      case Op::AddC: {
        acc(0, [&](double* gx) { kern::parallel_for(sz, [&](int64_t i) { gx[i] += g[i]; }); });
        break;
      }
      case Op::MatMul: {
        const Node& na = in(0);
        const Node& nb = in(1);
        const bool tb = n.ipay[0] != 0;
        const int64_t m = na.shape[0], k = na.shape[1];
        const int64_t nn = n.shape[1];
        const double* A = na.value->data();
        const double* B = nb.value->data();
        // dA = G @ B^T (or G @ B when tb)
        acc(0, [&](double* gx) {
          std::vector<double> tmp(size_t(m * k));
          if (tb) kern::matmul(m, nn, k, g, B, tmp.data());
          else kern::matmul_nt(m, nn, k, g, B, tmp.data());
          kern::parallel_for(m * k, [&](int64_t i) { gx[i] += tmp[size_t(i)]; });
        });
        // dB = A^T @ G (or G^T @ A when tb)
        acc(1, [&](double* gx) {
          if (tb) {
            // B is (n,k): dB = G^T @ A -> (n,k)
            std::vector<double> tmp(size_t(nn * k), 0.0);
            kern::matmul_tn_acc(m, nn, k, g, A, tmp.data());
            kern::parallel_for(nn * k, [&](int64_t i) { gx[i] += tmp[size_t(i)]; });
          } else {
            std::vector<double> tmp(size_t(k * nn), 0.0);
            kern::matmul_tn_acc(m, k, nn, A, g, tmp.data());
            kern::parallel_for(k * nn, [&](int64_t i) { gx[i] += tmp[size_t(i)]; });
          }
        });
        break;
      }
      case Op::SumAll: {
        const double gv = g[0];
        const int64_t isz = numel(in(0).shape);
        acc(0, [&](double* gx) { kern::parallel_for(isz, [&](int64_t i) { gx[i] += gv; }); });
        break;
      }
      case Op::MeanAll: {
        const int64_t isz = numel(in(0).shape);
        const double gv = g[0] / double(isz);
        acc(0, [&](double* gx) { kern::parallel_for(isz, [&](int64_t i) { gx[i] += gv; }); });
        break;
      }
      case Op::SumAxis:
      case Op::MeanAxis: {
        const int axis = int(n.ipay[0]);
        const AxisDims d = axis_dims(in(0).shape, axis);
        const double inv = n.op == Op::MeanAxis ? 1.0 / double(d.n) : 1.0;
        acc(0, [&](double* gx) {
          kern::parallel_for(d.outer * d.n * d.inner, [&](int64_t idx) {
            const int64_t inner = idx % d.inner;
            const int64_t o = idx / (d.n * d.inner);
            gx[idx] += inv * g[o * d.inner + inner];
          });
        });
        break;
      }
      case Op::Broadcast: {
        const BroadcastMap m = make_broadcast_map(in(0).shape, n.shape);
        const int64_t isz = numel(in(0).shape);
        acc(0, [&](double* gx) {
          // Each input element sums its broadcast fiber; deterministic and
          // race-free under the parallel loop.
          std::vector<double> partial(size_t(isz), 0.0);
          for (int64_t i = 0; i < sz; ++i) partial[size_t(broadcast_src_index(m, i))] += g[i];
          kern::parallel_for(isz, [&](int64_t i) { gx[i] += partial[size_t(i)]; });
        });
        break;
      }
      case Op::Reshape: {
        const int64_t isz = numel(in(0).shape);
        acc(0, [&](double* gx) { kern::parallel_for(isz, [&](int64_t i) { gx[i] += g[i]; }); });
        break;
      }
      case Op::Gather: {
        acc(0, [&](double* gx) {
          for (int64_t i = 0; i < sz; ++i) gx[n.ipay[size_t(i)]] += g[i];
        });
        break;
      }
      case Op::SliceRows: {
        const int64_t lo = n.ipay[0];
        const int64_t rowsz = numel(in(0).shape) / in(0).shape[0];
        acc(0, [&](double* gx) {
          kern::parallel_for(sz, [&](int64_t i) { gx[lo * rowsz + i] += g[i]; });
        });
        break;
      }
      case Op::ConcatRows: {
        int64_t off = 0;
        for (size_t slot = 0; slot < n.inputs.size(); ++slot) {
          const int64_t isz = numel(in(int(slot)).shape);
          const int64_t base = off;
          acc(int(slot), [&](double* gx) {
            kern::parallel_for(isz, [&](int64_t i) { gx[i] += g[base + i]; });
          });
          off += isz;
        }
        break;
      }
      case Op::Tanh: {
        const double* y = n.value->data();
        acc(0, [&](double* gx) {
          kern::parallel_for(sz, [&](int64_t i) { gx[i] += g[i] * (1.0 - y[i] * y[i]); });
        });
        break;
      }
      case Op::Sigmoid: {
        const double* y = n.value->data();
        acc(0, [&](double* gx) {
          kern::parallel_for(sz, [&](int64_t i) { gx[i] += g[i] * y[i] * (1.0 - y[i]); });
        });
        break;
      }
      case Op::Exp: {
        const double* y = n.value->data();
        acc(0, [&](double* gx) { kern::parallel_for(sz, [&](int64_t i) { gx[i] += g[i] * y[i]; }); });
        break;
      }
      case Op::Log: {
        const double* x = in(0).value->data();
        acc(0, [&](double* gx) { kern::parallel_for(sz, [&](int64_t i) { gx[i] += g[i] / x[i]; }); });
        break;
      }
      case Op::Softplus: {
        const double* x = in(0).value->data();
        acc(0, [&](double* gx) {
          kern::parallel_for(sz, [&](int64_t i) { gx[i] += g[i] * stable_sigmoid(x[i]); });
        });
        break;
      }
      case Op::Sqrt: {
        const double* y = n.value->data();
        acc(0, [&](double* gx) {
          kern::parallel_for(sz, [&](int64_t i) { gx[i] += g[i] * 0.5 / y[i]; });
        });
        break;
      }
      case Op::PowC: {
        const double e = n.dpay[0];
        const double* x = in(0).value->data();
        acc(0, [&](double* gx) {
          kern::parallel_for(sz, [&](int64_t i) { gx[i] += g[i] * e * std::pow(x[i], e - 1.0); });
        });
        break;
      }
      case Op::MaxC: {
        const double c = n.dpay[0];
        const double* x = in(0).value->data();
        acc(0, [&](double* gx) {
          kern::parallel_for(sz, [&](int64_t i) { gx[i] += x[i] >= c ? g[i] : 0.0; });
        });
        break;
      }
      case Op::Softmax: {
        const double* y = n.value->data();
        const int64_t cols = n.shape.back();
        const int64_t rows = sz / cols;
        acc(0, [&](double* gx) {
          kern::parallel_for(rows, [&](int64_t r) {
            const double* yr = y + r * cols;
            const double* gr = g + r * cols;
            double dotv = 0.0;
            for (int64_t j = 0; j < cols; ++j) dotv += gr[j] * yr[j];
            double* gxr = gx + r * cols;
            for (int64_t j = 0; j < cols; ++j) gxr[j] += yr[j] * (gr[j] - dotv);
          });
        });
        break;
      }
      case Op::L2Normalize: {
        const double* x = in(0).value->data();
        const int64_t cols = n.shape.back();
        const int64_t rows = sz / cols;
        acc(0, [&](double* gx) {
          kern::parallel_for(rows, [&](int64_t r) {
            const double* xr = x + r * cols;
            const double* gr = g + r * cols;
            double s = 0.0, dotv = 0.0;
            for (int64_t j = 0; j < cols; ++j) s += xr[j] * xr[j];
            const double nrm = std::sqrt(s + 1e-24);
            for (int64_t j = 0; j < cols; ++j) dotv += gr[j] * xr[j];
            const double inv = 1.0 / nrm, inv3 = 1.0 / (nrm * nrm * nrm);
            double* gxr = gx + r * cols;
            for (int64_t j = 0; j < cols; ++j)
              gxr[j] += gr[j] * inv - xr[j] * dotv * inv3;
          });
        });
        break;
      }
      case Op::Sin: {
        const double* x = in(0).value->data();
        acc(0, [&](double* gx) {
          kern::parallel_for(sz, [&](int64_t i) { gx[i] += g[i] * std::cos(x[i]); });
        });
        break;
      }
      case Op::Cos: {
        const double* x = in(0).value->data();
        acc(0, [&](double* gx) {
          kern::parallel_for(sz, [&](int64_t i) { gx[i] -= g[i] * std::sin(x[i]); });
        });
        break;
      }
    }
  }
  return Gradients(this, std::move(grads));
}

// --- string dispatch --------------------------------------------------------

Tensor record(const std::string& op_kind, const std::vector<Tensor>& inputs,
              const std::vector<double>& payload) {
  auto want = [&](size_t n) {
    if (inputs.size() != n)
      throw std::invalid_argument("op '" + op_kind + "' expects " + std::to_string(n) +
                                  " inputs, got " + std::to_string(inputs.size()));
  };
  auto p0 = [&]() {
    if (payload.empty())
      throw std::invalid_argument("op '" + op_kind + "' needs a payload constant");
    return payload[0];
  };
  if (op_kind == "add") { want(2); return add(inputs[0], inputs[1]); }
  if (op_kind == "sub") { want(2); return sub(inputs[0], inputs[1]); }
  if (op_kind == "mul") { want(2); return mul(inputs[0], inputs[1]); }
  if (op_kind == "div") { want(2); return div(inputs[0], inputs[1]); }
  if (op_kind == "matmul") { want(2); return matmul(inputs[0], inputs[1]); }
  if (op_kind == "sum") { want(1); return sum(inputs[0]); }
  if (op_kind == "mean") { want(1); return mean(inputs[0]); }
  if (op_kind == "broadcast") {
    want(1);
    Shape t;
    for (double v : payload) t.push_back(int64_t(v));
    return broadcast_to(inputs[0], t);
  }
  if (op_kind == "reshape") {
    want(1);
    Shape t;
    for (double v : payload) t.push_back(int64_t(v));
    return reshape(inputs[0], t);
  }
  if (op_kind == "slice") {
    want(1);
    if (payload.size() != 2) throw std::invalid_argument("slice needs [lo,hi] payload");
    return slice_rows(inputs[0], int64_t(payload[0]), int64_t(payload[1]));
  }
  if (op_kind == "gather") {
    want(1);
    std::vector<int64_t> idx;
    for (double v : payload) idx.push_back(int64_t(v));
    return gather(inputs[0], idx, {int64_t(idx.size())});
  }
  if (op_kind == "concat") return concat_rows(inputs);
  if (op_kind == "tanh") { want(1); return tanh_(inputs[0]); }
  if (op_kind == "sigmoid") { want(1); return sigmoid(inputs[0]); }
  if (op_kind == "exp") { want(1); return exp_(inputs[0]); }
  if (op_kind == "log") { want(1); return log_(inputs[0]); }
  if (op_kind == "softplus") { want(1); return softplus(inputs[0]); }
  if (op_kind == "sqrt") { want(1); return sqrt_(inputs[0]); }
  if (op_kind == "power") { want(1); return pow_(inputs[0], p0()); }
  if (op_kind == "max-with-constant") { want(1); return max_const(inputs[0], p0()); }
  if (op_kind == "softmax") { want(1); return softmax(inputs[0]); }
  if (op_kind == "l2-normalize") { want(1); return l2_normalize(inputs[0]); }
  if (op_kind == "sin") { want(1); return sin_(inputs[0]); }
  if (op_kind == "cos") { want(1); return cos_(inputs[0]); }
  if (op_kind == "scale") { want(1); return scale(inputs[0], p0()); }
  if (op_kind == "addc") { want(1); return add_const(inputs[0], p0()); }
  throw std::invalid_argument("unknown op kind: '" + op_kind + "'");
}

Tensor finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& x,
                   double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff: h must be > 0");
  auto out = std::make_shared<std::vector<double>>(size_t(x.size()), 0.0);
  for (int64_t i = 0; i < x.size(); ++i) {
    auto plus = std::make_shared<std::vector<double>>(*x.data);
    auto minus = std::make_shared<std::vector<double>>(*x.data);
    (*plus)[size_t(i)] += h;
    (*minus)[size_t(i)] -= h;
    const double fp = f(Tensor(x.shape, plus));
    const double fm = f(Tensor(x.shape, minus));
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("finite_diff: f returned non-finite value at coordinate " +
                               std::to_string(i));
    (*out)[size_t(i)] = (fp - fm) / (2.0 * h);
  }
  return Tensor(x.shape, std::move(out));
}

double max_rel_err(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("max_rel_err: shape mismatch");
  double worst = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    const double x = a.at(i), y = b.at(i);
    const double denom = std::max({1.0, std::fabs(x), std::fabs(y)});
    worst = std::max(worst, std::fabs(x - y) / denom);
  }
  return worst;
}

}  // namespace gradgen
