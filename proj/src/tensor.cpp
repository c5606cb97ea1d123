#include "maggen/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <optional>
#include <sstream>

namespace maggen {

namespace {

thread_local Tape* g_active_tape = nullptr;

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

void validate_shape(const Shape& s) {
  if (s.empty()) throw ShapeError("tensor shape must have at least one axis");
  for (int64_t d : s) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(s));
  }
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void ensure_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(op) + " produced a non-finite value");
    }
  }
}

void require_rank2(const char* op, const Tensor& t) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got " + shape_str(t.shape()));
  }
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

class TensorFactory {
 public:
  static Tensor make(Shape shape, std::vector<double> values, int node,
                     uint64_t serial, bool requires_grad) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<const std::vector<double>>(std::move(values));
    t.node_ = node;
    t.serial_ = serial;
    t.requires_grad_ = requires_grad;
    return t;
  }

  static Tensor share(const Tensor& src, int node, uint64_t serial, bool requires_grad) {
    Tensor t;
    t.shape_ = src.shape_;
    t.data_ = src.data_;
    t.node_ = node;
    t.serial_ = serial;
    t.requires_grad_ = requires_grad;
    return t;
  }

  static uint64_t serial(const Tensor& t) { return t.serial_; }
};

}  // namespace detail

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  validate_shape(shape);
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)), value);
  return detail::TensorFactory::make(std::move(shape), std::move(v), -1, 0, false);
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  validate_shape(shape);
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  return detail::TensorFactory::make(std::move(shape), std::move(values), -1, 0, false);
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

int64_t Tensor::size() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

int64_t Tensor::rows() const { return shape_.empty() ? 0 : shape_[0]; }

int64_t Tensor::cols() const {
  if (rank() == 2) return shape_[1];
  return 1;
}

double Tensor::item() const {
  if (!data_ || data_->size() != 1) {
    throw UsageError("item() requires a single-element tensor, got " + shape_str(shape_));
  }
  return (*data_)[0];
}

Tensor Tensor::detached() const {
  Tensor t(*this);
  t.node_ = -1;
  t.serial_ = 0;
  t.requires_grad_ = false;
  return t;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const auto& x = a.data();
  const auto& y = b.data();
  return std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
}

bool allclose(const Tensor& a, const Tensor& b, double tol) {
  if (a.shape() != b.shape()) return false;
  for (size_t i = 0; i < a.data().size(); ++i) {
    if (std::abs(a.data()[i] - b.data()[i]) > tol) return false;
  }
  return true;
}

// ---- Tape ------------------------------------------------------------------

Tape::Scope::Scope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }

Tape::Scope::~Scope() { g_active_tape = prev_; }

Tape::NoRecord::NoRecord() : tape_(g_active_tape) {
  if (tape_) {
    prev_ = tape_->recording_;
    tape_->recording_ = false;
  }
}

Tape::NoRecord::~NoRecord() {
  if (tape_) tape_->recording_ = prev_;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::truncate(std::size_t mark) {
  if (mark > nodes_.size()) throw UsageError("tape truncate mark is beyond the tape end");
  nodes_.resize(mark);
}

void Tape::reset() { nodes_.clear(); }

int Tape::record(const char* op, std::vector<int> inputs, Shape out_shape, Vjp vjp) {
  Node n;
  n.op = op;
  n.serial = next_serial_++;
  n.inputs = std::move(inputs);
  n.out_shape = std::move(out_shape);
  n.vjp = std::move(vjp);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

bool Tape::valid_handle(int node, uint64_t serial) const {
  return node >= 0 && node < static_cast<int>(nodes_.size()) &&
         nodes_[static_cast<size_t>(node)].serial == serial;
}

Tensor Tape::watch(const Tensor& t) {
  if (!t.defined()) throw UsageError("cannot watch an undefined tensor");
  int id = record("leaf", {}, t.shape(), nullptr);
  return detail::TensorFactory::share(t, id, nodes_.back().serial, true);
}

std::vector<Tensor> Tape::gradients(const Tensor& output, std::span<const Tensor> wrt,
                                    bool create_graph) {
  if (!output.defined() || output.size() != 1) {
    throw UsageError("backward requires a single-element output tensor");
  }
  if (!valid_handle(output.node(), detail::TensorFactory::serial(output))) {
    throw UsageError("scalar output is not on the active tape (detached or truncated)");
  }

  const int out_id = output.node();
  // Mark nodes the output actually depends on; inputs always precede a node,
  // so one reverse sweep settles reachability.
  std::vector<char> needed(static_cast<size_t>(out_id) + 1, 0);
  needed[static_cast<size_t>(out_id)] = 1;
  for (int i = out_id; i >= 0; --i) {
    if (!needed[static_cast<size_t>(i)]) continue;
    for (int in : nodes_[static_cast<size_t>(i)].inputs) {
      if (in >= 0) needed[static_cast<size_t>(in)] = 1;
    }
  }

  std::vector<std::optional<Tensor>> adjoint(static_cast<size_t>(out_id) + 1);
  adjoint[static_cast<size_t>(out_id)] = Tensor::ones({1});

  std::optional<NoRecord> pause;
  if (!create_graph) pause.emplace();

  for (int i = out_id; i >= 0; --i) {
    if (!needed[static_cast<size_t>(i)] || !adjoint[static_cast<size_t>(i)]) continue;
    // Copy out of nodes_: the vjp may append nodes and reallocate the vector.
    Vjp vjp = nodes_[static_cast<size_t>(i)].vjp;
    if (!vjp) continue;  // leaf
    std::vector<int> inputs = nodes_[static_cast<size_t>(i)].inputs;
    const Tensor adj = *adjoint[static_cast<size_t>(i)];
    vjp(adj, [&](int slot, Tensor grad) {
      int id = inputs[static_cast<size_t>(slot)];
      if (id < 0) return;  // constant input
      auto& cell = adjoint[static_cast<size_t>(id)];
      cell = cell ? add(*cell, std::move(grad)) : std::move(grad);
    });
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const Tensor& p : wrt) {
    int id = p.node();
    if (valid_handle(id, detail::TensorFactory::serial(p)) && id <= out_id &&
        adjoint[static_cast<size_t>(id)]) {
      out.push_back(*adjoint[static_cast<size_t>(id)]);
    } else {
      out.push_back(Tensor::zeros(p.shape()));
    }
  }
  return out;
}

// ---- op plumbing -----------------------------------------------------------

namespace {

// Builds the op result and records it when the active tape is recording and
// at least one input carries a live tape handle.
template <class F>
Tensor op_result(const char* op, Shape shape, std::vector<double> values,
                 std::initializer_list<const Tensor*> inputs, F&& vjp) {
  ensure_finite(op, values);
  Tape* tape = Tape::active();
  bool attach = false;
  bool wants_grad = false;
  if (tape && tape->recording()) {
    for (const Tensor* in : inputs) {
      if (in->on_tape() &&
          tape->valid_handle(in->node(), detail::TensorFactory::serial(*in))) {
        attach = true;
        wants_grad = wants_grad || in->requires_grad();
      }
    }
  }
  if (!attach) {
    return detail::TensorFactory::make(std::move(shape), std::move(values), -1, 0, false);
  }
  std::vector<int> ids;
  ids.reserve(inputs.size());
  for (const Tensor* in : inputs) {
    bool live = in->on_tape() &&
                tape->valid_handle(in->node(), detail::TensorFactory::serial(*in));
    ids.push_back(live ? in->node() : -1);
  }
  int id = tape->record(op, std::move(ids), shape, Tape::Vjp(std::forward<F>(vjp)));
  uint64_t serial = tape->serial_at(id);
  return detail::TensorFactory::make(std::move(shape), std::move(values), id, serial, wants_grad);
}

std::vector<double> zip(const char* op, const Tensor& a, const Tensor& b,
                        double (*f)(double, double)) {
  if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
  const auto& x = a.data();
  const auto& y = b.data();
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], y[i]);
  return out;
}

std::vector<double> unary_map(const Tensor& a, double (*f)(double)) {
  const auto& x = a.data();
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

}  // namespace

// ---- ops -------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  auto v = zip("add", a, b, [](double x, double y) { return x + y; });
  return op_result("add", a.shape(), std::move(v), {&a, &b},
                   [](const Tensor& g, const Tape::Accum& acc) {
                     acc(0, g);
                     acc(1, g);
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto v = zip("sub", a, b, [](double x, double y) { return x - y; });
  return op_result("sub", a.shape(), std::move(v), {&a, &b},
                   [](const Tensor& g, const Tape::Accum& acc) {
                     acc(0, g);
                     acc(1, scalar_mul(g, -1.0));
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto v = zip("mul", a, b, [](double x, double y) { return x * y; });
  return op_result("mul", a.shape(), std::move(v), {&a, &b},
                   [a, b](const Tensor& g, const Tape::Accum& acc) {
                     acc(0, mul(g, b));
                     acc(1, mul(g, a));
                   });
}

Tensor divide(const Tensor& a, const Tensor& b) {
  auto v = zip("divide", a, b, [](double x, double y) { return x / y; });
  return op_result("divide", a.shape(), std::move(v), {&a, &b},
                   [a, b](const Tensor& g, const Tape::Accum& acc) {
                     acc(0, divide(g, b));
                     acc(1, neg(divide(mul(g, a), mul(b, b))));
                   });
}

Tensor scalar_mul(const Tensor& a, double c) {
  const auto& x = a.data();
  std::vector<double> v(x.size());
  for (size_t i = 0; i < x.size(); ++i) v[i] = x[i] * c;
  return op_result("scalar_mul", a.shape(), std::move(v), {&a},
                   [c](const Tensor& g, const Tape::Accum& acc) {
                     acc(0, scalar_mul(g, c));
                   });
}

Tensor scalar_add(const Tensor& a, double c) {
  const auto& x = a.data();
  std::vector<double> v(x.size());
  for (size_t i = 0; i < x.size(); ++i) v[i] = x[i] + c;
  return op_result("scalar_add", a.shape(), std::move(v), {&a},
                   [](const Tensor& g, const Tape::Accum& acc) { acc(0, g); });
}

Tensor neg(const Tensor& a) { return scalar_mul(a, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  if (a.shape()[1] != b.shape()[0]) shape_fail("matmul", a.shape(), b.shape());
  const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> v(static_cast<size_t>(m * n), 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (int64_t i = 0; i < m; ++i) {
    double* row = v.data() + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double aik = pa[i * k + p];
      const double* brow = pb + p * n;
      for (int64_t j = 0; j < n; ++j) row[j] += aik * brow[j];
    }
  }
  return op_result("matmul", {m, n}, std::move(v), {&a, &b},
                   [a, b](const Tensor& g, const Tape::Accum& acc) {
                     acc(0, matmul(g, transpose(b)));
                     acc(1, matmul(transpose(a), g));
                   });
}

Tensor transpose(const Tensor& a) {
  require_rank2("transpose", a);
  const int64_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> v(static_cast<size_t>(m * n));
  const double* pa = a.data().data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) v[static_cast<size_t>(j * m + i)] = pa[i * n + j];
  return op_result("transpose", {n, m}, std::move(v), {&a},
                   [](const Tensor& g, const Tape::Accum& acc) {
                     acc(0, transpose(g));
                   });
}

Tensor relu(const Tensor& a) {
  const auto& x = a.data();
  std::vector<double> v(x.size());
  std::vector<double> mask(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    bool pos = x[i] > 0.0;
    v[i] = pos ? x[i] : 0.0;
    mask[i] = pos ? 1.0 : 0.0;
  }
  Tensor mask_t = Tensor::from(a.shape(), std::move(mask));
  return op_result("relu", a.shape(), std::move(v), {&a},
                   [mask_t](const Tensor& g, const Tape::Accum& acc) {
                     acc(0, mul(g, mask_t));
                   });
}

Tensor log(const Tensor& a) {
  auto v = unary_map(a, [](double x) { return std::log(x); });
  return op_result("log", a.shape(), std::move(v), {&a},
                   [a](const Tensor& g, const Tape::Accum& acc) {
                     acc(0, divide(g, a));
                   });
}

Tensor exp(const Tensor& a) {
  auto v = unary_map(a, [](double x) { return std::exp(x); });
  // The derivative recomputes exp(a) so second-order passes see the
  // dependence on `a` rather than a frozen copy of the output.
  return op_result("exp", a.shape(), std::move(v), {&a},
                   [a](const Tensor& g, const Tape::Accum& acc) {
                     acc(0, mul(g, exp(a)));
                   });
}

Tensor sqrt(const Tensor& a) {
  auto v = unary_map(a, [](double x) { return std::sqrt(x); });
  return op_result("sqrt", a.shape(), std::move(v), {&a},
                   [a](const Tensor& g, const Tape::Accum& acc) {
                     acc(0, divide(g, scalar_mul(sqrt(a), 2.0)));
                   });
}

Tensor clamp_min(const Tensor& a, double floor) {
  const auto& x = a.data();
  std::vector<double> v(x.size());
  std::vector<double> mask(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    bool pass = x[i] > floor;
    v[i] = pass ? x[i] : floor;
    mask[i] = pass ? 1.0 : 0.0;
  }
  Tensor mask_t = Tensor::from(a.shape(), std::move(mask));
  return op_result("clamp_min", a.shape(), std::move(v), {&a},
                   [mask_t](const Tensor& g, const Tape::Accum& acc) {
                     acc(0, mul(g, mask_t));
                   });
}

Tensor reshape(const Tensor& a, Shape shape) {
  validate_shape(shape);
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Shape prev = a.shape();
  std::vector<double> v = a.data();
  return op_result("reshape", std::move(shape), std::move(v), {&a},
                   [prev](const Tensor& g, const Tape::Accum& acc) {
                     acc(0, reshape(g, prev));
                   });
}

Tensor sum_axis(const Tensor& a, int axis) {
  if (a.rank() == 1) {
    if (axis != 0) throw ShapeError("sum_axis: axis out of range for rank-1 tensor");
    double s = 0;
    for (double x : a.data()) s += x;
    int64_t extent = a.shape()[0];
    return op_result("sum_axis", {1}, {s}, {&a},
                     [extent](const Tensor& g, const Tape::Accum& acc) {
                       acc(0, broadcast_axis(g, 0, extent));
                     });
  }
  require_rank2("sum_axis", a);
  const int64_t m = a.shape()[0], n = a.shape()[1];
  if (axis != 0 && axis != 1) throw ShapeError("sum_axis: axis out of range for rank-2 tensor");
  const double* pa = a.data().data();
  if (axis == 0) {
    std::vector<double> v(static_cast<size_t>(n), 0.0);
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) v[static_cast<size_t>(j)] += pa[i * n + j];
    return op_result("sum_axis", {n}, std::move(v), {&a},
                     [m](const Tensor& g, const Tape::Accum& acc) {
                       acc(0, broadcast_axis(g, 0, m));
                     });
  }
  std::vector<double> v(static_cast<size_t>(m), 0.0);
  for (int64_t i = 0; i < m; ++i) {
    double s = 0;
    for (int64_t j = 0; j < n; ++j) s += pa[i * n + j];
    v[static_cast<size_t>(i)] = s;
  }
  return op_result("sum_axis", {m}, std::move(v), {&a},
                   [n](const Tensor& g, const Tape::Accum& acc) {
                     acc(0, broadcast_axis(g, 1, n));
                   });
}

Tensor mean_axis(const Tensor& a, int axis) {
  int64_t extent = a.rank() == 1 ? a.shape()[0] : a.shape()[axis == 0 ? 0 : 1];
  return scalar_mul(sum_axis(a, axis), 1.0 / static_cast<double>(extent));
}

Tensor broadcast_axis(const Tensor& a, int axis, int64_t extent) {
  if (extent <= 0) throw ShapeError("broadcast_axis: extent must be positive");
  if (a.rank() != 1) {
    throw ShapeError("broadcast_axis: expected a rank-1 tensor, got " + shape_str(a.shape()));
  }
  const int64_t n = a.shape()[0];
  const double* pa = a.data().data();
  if (n == 1 && axis == 0) {
    // [1] -> [extent]
    std::vector<double> v(static_cast<size_t>(extent), pa[0]);
    return op_result("broadcast_axis", {extent}, std::move(v), {&a},
                     [](const Tensor& g, const Tape::Accum& acc) {
                       acc(0, sum_axis(g, 0));
                     });
  }
  if (axis == 0) {
    // [n] -> [extent, n], rows replicated
    std::vector<double> v(static_cast<size_t>(extent * n));
    for (int64_t i = 0; i < extent; ++i) std::copy(pa, pa + n, v.data() + i * n);
    return op_result("broadcast_axis", {extent, n}, std::move(v), {&a},
                     [](const Tensor& g, const Tape::Accum& acc) {
                       acc(0, sum_axis(g, 0));
                     });
  }
  if (axis == 1) {
    // [n] -> [n, extent], columns replicated
    std::vector<double> v(static_cast<size_t>(n * extent));
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < extent; ++j) v[static_cast<size_t>(i * extent + j)] = pa[i];
    return op_result("broadcast_axis", {n, extent}, std::move(v), {&a},
                     [](const Tensor& g, const Tape::Accum& acc) {
                       acc(0, sum_axis(g, 1));
                     });
  }
  throw ShapeError("broadcast_axis: axis out of range");
}

Tensor sum_all(const Tensor& a) {
  if (a.rank() == 1) return sum_axis(a, 0);
  return sum_axis(sum_axis(a, 0), 0);
}

Tensor mean_all(const Tensor& a) {
  return scalar_mul(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

namespace {

// Per-row max as a constant: softmax(z - c) == softmax(z) identically for any
// per-row constant c, so treating the max as constant changes nothing.
Tensor rowmax_constant(const Tensor& rows) {
  const int64_t m = rows.shape()[0], n = rows.shape()[1];
  std::vector<double> v(static_cast<size_t>(m));
  const double* p = rows.data().data();
  for (int64_t i = 0; i < m; ++i) {
    double mx = p[i * n];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, p[i * n + j]);
    v[static_cast<size_t>(i)] = mx;
  }
  return Tensor::from({m}, std::move(v));
}

}  // namespace

Tensor softmax(const Tensor& a, double tau) {
  if (tau <= 0.0) throw UsageError("softmax: temperature must be positive");
  if (a.rank() == 1) {
    return reshape(softmax(reshape(a, {1, a.shape()[0]}), tau), a.shape());
  }
  require_rank2("softmax", a);
  Tensor z = tau == 1.0 ? a : scalar_mul(a, 1.0 / tau);
  const int64_t cols = z.shape()[1];
  Tensor stable = sub(z, broadcast_axis(rowmax_constant(z), 1, cols));
  Tensor e = exp(stable);
  Tensor s = sum_axis(e, 1);
  return divide(e, broadcast_axis(s, 1, cols));
}

Tensor log_softmax(const Tensor& a) {
  if (a.rank() == 1) {
    return reshape(log_softmax(reshape(a, {1, a.shape()[0]})), a.shape());
  }
  require_rank2("log_softmax", a);
  const int64_t cols = a.shape()[1];
  Tensor m = rowmax_constant(a);
  Tensor stable = sub(a, broadcast_axis(m, 1, cols));
  Tensor lse = add(log(sum_axis(exp(stable), 1)), m);
  return sub(a, broadcast_axis(lse, 1, cols));
}

Tensor squared_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("squared_distance", a.shape(), b.shape());
  Tensor d = sub(a, b);
  return sum_all(mul(d, d));
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& rows) {
  require_rank2("gather_rows", a);
  const int64_t n = a.shape()[0];
  if (rows.empty()) throw UsageError("gather_rows: empty index list");
  std::vector<double> sel(rows.size() * static_cast<size_t>(n), 0.0);
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= n) {
      throw UsageError("gather_rows: row index " + std::to_string(rows[i]) +
                       " out of range [0," + std::to_string(n) + ")");
    }
    sel[i * static_cast<size_t>(n) + static_cast<size_t>(rows[i])] = 1.0;
  }
  Tensor selector = Tensor::from({static_cast<int64_t>(rows.size()), n}, std::move(sel));
  return matmul(selector, a);
}

Tensor pick_per_row(const Tensor& a, const std::vector<int>& index) {
  require_rank2("pick_per_row", a);
  const int64_t m = a.shape()[0], n = a.shape()[1];
  if (static_cast<int64_t>(index.size()) != m) {
    throw ShapeError("pick_per_row: index count " + std::to_string(index.size()) +
                     " does not match row count " + std::to_string(m));
  }
  std::vector<double> onehot(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i) {
    int c = index[static_cast<size_t>(i)];
    if (c < 0 || c >= n) {
      throw UsageError("pick_per_row: index " + std::to_string(c) + " out of range [0," +
                       std::to_string(n) + ")");
    }
    onehot[static_cast<size_t>(i * n + c)] = 1.0;
  }
  Tensor mask = Tensor::from({m, n}, std::move(onehot));
  return sum_axis(mul(a, mask), 1);
}

Tensor slice_rows(const Tensor& a, int64_t r0, int64_t r1) {
  require_rank2("slice_rows", a);
  const int64_t m = a.shape()[0], n = a.shape()[1];
  if (r0 < 0 || r1 > m || r0 >= r1) {
    throw UsageError("slice_rows: invalid range [" + std::to_string(r0) + "," +
                     std::to_string(r1) + ") for " + std::to_string(m) + " rows");
  }
  std::vector<double> v(a.data().begin() + r0 * n, a.data().begin() + r1 * n);
  return op_result("slice_rows", {r1 - r0, n}, std::move(v), {&a},
                   [r0, m](const Tensor& g, const Tape::Accum& acc) {
                     acc(0, pad_rows(g, r0, m));
                   });
}

Tensor pad_rows(const Tensor& a, int64_t offset, int64_t total_rows) {
  require_rank2("pad_rows", a);
  const int64_t m = a.shape()[0], n = a.shape()[1];
  if (offset < 0 || offset + m > total_rows) {
    throw UsageError("pad_rows: rows [" + std::to_string(offset) + "," +
                     std::to_string(offset + m) + ") exceed target of " +
                     std::to_string(total_rows) + " rows");
  }
  std::vector<double> v(static_cast<size_t>(total_rows * n), 0.0);
  std::copy(a.data().begin(), a.data().end(), v.begin() + offset * n);
  return op_result("pad_rows", {total_rows, n}, std::move(v), {&a},
                   [offset, m](const Tensor& g, const Tape::Accum& acc) {
                     acc(0, slice_rows(g, offset, offset + m));
                   });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw UsageError("concat_rows: no tensors given");
  int64_t total = 0;
  const int64_t n = parts[0].cols();
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.cols() != n) {
      throw ShapeError("concat_rows: parts must be rank-2 with equal column counts");
    }
    total += p.rows();
  }
  Tensor out = pad_rows(parts[0], 0, total);
  int64_t offset = parts[0].rows();
  for (size_t i = 1; i < parts.size(); ++i) {
    out = add(out, pad_rows(parts[i], offset, total));
    offset += parts[i].rows();
  }
  return out;
}

Tensor l2_normalize_rows(const Tensor& a) {
  require_rank2("l2_normalize_rows", a);
  Tensor sq = sum_axis(mul(a, a), 1);
  for (double s : sq.data()) {
    if (s < 1e-300) {
      throw NumericError("l2_normalize_rows: zero row cannot be normalized");
    }
  }
  Tensor norm = scalar_add(sqrt(sq), 1e-12);
  return divide(a, broadcast_axis(norm, 1, a.shape()[1]));
}

// ---- meta-gradient helpers -------------------------------------------------

std::vector<Tensor> grad_through_update(const LossFn& loss_fn,
                                        const std::vector<Tensor>& params,
                                        double inner_lr, GradMode mode) {
  Tape tape;
  Tape::Scope scope(tape);
  std::vector<Tensor> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(tape.watch(p.detached()));

  Tensor inner = loss_fn(leaves);
  bool exact = mode == GradMode::Exact;
  std::vector<Tensor> g = tape.gradients(inner, leaves, /*create_graph=*/exact);

  std::vector<Tensor> primed;
  primed.reserve(params.size());
  if (exact) {
    for (size_t i = 0; i < leaves.size(); ++i) {
      primed.push_back(sub(leaves[i], scalar_mul(g[i], inner_lr)));
    }
    Tensor outer = loss_fn(primed);
    return tape.gradients(outer, leaves);
  }
  for (size_t i = 0; i < leaves.size(); ++i) {
    Tensor stepped;
    {
      Tape::NoRecord pause;
      stepped = sub(leaves[i].detached(), scalar_mul(g[i].detached(), inner_lr));
    }
    primed.push_back(tape.watch(stepped));
  }
  Tensor outer = loss_fn(primed);
  return tape.gradients(outer, primed);
}

double finite_diff_check(const LossFn& loss_fn, const std::vector<Tensor>& params,
                         double step) {
  if (step <= 0) throw UsageError("finite_diff_check: step must be positive");

  std::vector<Tensor> analytic;
  {
    Tape tape;
    Tape::Scope scope(tape);
    std::vector<Tensor> leaves;
    leaves.reserve(params.size());
    for (const Tensor& p : params) leaves.push_back(tape.watch(p.detached()));
    Tensor loss = loss_fn(leaves);
    analytic = tape.gradients(loss, leaves);
  }

  std::vector<std::vector<double>> buffers;
  buffers.reserve(params.size());
  for (const Tensor& p : params) buffers.push_back(p.data());

  auto eval = [&]() {
    std::vector<Tensor> plain;
    plain.reserve(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      plain.push_back(Tensor::from(params[i].shape(), buffers[i]));
    }
    return loss_fn(plain).item();
  };

  double worst = 0.0;
  for (size_t i = 0; i < params.size(); ++i) {
    for (size_t j = 0; j < buffers[i].size(); ++j) {
      const double saved = buffers[i][j];
      buffers[i][j] = saved + step;
      double up = eval();
      buffers[i][j] = saved - step;
      double down = eval();
      buffers[i][j] = saved;
      double numeric = (up - down) / (2.0 * step);
      double exact = analytic[i].data()[j];
      double err = std::abs(exact - numeric) /
                   std::max({std::abs(exact), std::abs(numeric), 1e-12});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace maggen
