#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "maggen/error.hpp"

namespace maggen {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);

class Tape;

namespace detail {
class TensorFactory;
}

// Dense 64-bit float tensor. The payload is immutable and shared between
// copies; every op returns a fresh tensor. A tensor may hold a handle to a
// node on the thread's active Tape, in which case gradients can flow to it.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t size() const;
  int64_t rows() const;  // rank-1: length, rank-2: first dim
  int64_t cols() const;  // rank-2 second dim, rank-1: 1

  bool defined() const { return data_ != nullptr; }
  const std::vector<double>& data() const { return *data_; }

  double item() const;  // value of a single-element tensor
  double at(int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
  double at(int64_t r, int64_t c) const {
    return (*data_)[static_cast<size_t>(r * cols() + c)];
  }

  bool requires_grad() const { return requires_grad_; }
  bool on_tape() const { return node_ >= 0; }
  int node() const { return node_; }

  // Same payload with the tape handle stripped.
  Tensor detached() const;

 private:
  friend class Tape;
  friend class detail::TensorFactory;

  std::shared_ptr<const std::vector<double>> data_;
  Shape shape_;
  int node_ = -1;
  uint64_t serial_ = 0;
  bool requires_grad_ = false;
};

bool bitwise_equal(const Tensor& a, const Tensor& b);
bool allclose(const Tensor& a, const Tensor& b, double tol = 1e-9);

// Reverse-mode differentiation record. Nodes are appended in execution
// order, so every node's inputs precede it; backward walks the record once
// in reverse. One tape is active per thread at a time (Scope); recording can
// be suspended (NoRecord) so value-only arithmetic stays off the record.
class Tape {
 public:
  using Accum = std::function<void(int slot, Tensor grad)>;
  using Vjp = std::function<void(const Tensor& adjoint, const Accum& accum)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Makes a tape the thread's active tape for the guard's lifetime.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  // Suspends recording on the active tape for the guard's lifetime.
  class NoRecord {
   public:
    NoRecord();
    ~NoRecord();
    NoRecord(const NoRecord&) = delete;
    NoRecord& operator=(const NoRecord&) = delete;

   private:
    Tape* tape_;
    bool prev_ = false;
  };

  static Tape* active();

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  // Mark / truncate / clear. Node handles above a truncation point become
  // invalid; handles below it stay usable.
  std::size_t checkpoint() const { return nodes_.size(); }
  void truncate(std::size_t mark);
  void reset();

  // Registers a copy of `t` as a fresh leaf on this tape.
  Tensor watch(const Tensor& t);

  // Gradients of a single-element `output` with respect to each tensor in
  // `wrt`. Tensors unreachable from the output get zero gradients. With
  // `create_graph` the adjoint arithmetic itself is recorded, so the
  // returned gradients are differentiable functions of the leaves.
  std::vector<Tensor> gradients(const Tensor& output,
                                std::span<const Tensor> wrt,
                                bool create_graph = false);

  int record(const char* op, std::vector<int> inputs, Shape out_shape, Vjp vjp);
  bool valid_handle(int node, uint64_t serial) const;
  uint64_t serial_at(int node) const { return nodes_[static_cast<std::size_t>(node)].serial; }

 private:
  struct Node {
    const char* op;
    uint64_t serial;
    std::vector<int> inputs;
    Shape out_shape;
    Vjp vjp;  // null for leaves
  };

  std::vector<Node> nodes_;
  uint64_t next_serial_ = 1;
  bool recording_ = true;
};

// ---- forward ops -----------------------------------------------------------
// Every op validates shapes, rejects non-finite outputs, and records itself
// on the active tape when any input carries a tape handle.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double c);
Tensor scalar_add(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor clamp_min(const Tensor& a, double floor);
Tensor reshape(const Tensor& a, Shape shape);

// Reductions and their inverses. `axis` names the dimension being removed
// (sum) or inserted (broadcast).
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean_axis(const Tensor& a, int axis);
Tensor broadcast_axis(const Tensor& a, int axis, int64_t extent);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// Row softmax / log-softmax over the last axis, with a temperature divisor.
Tensor softmax(const Tensor& a, double tau = 1.0);
Tensor log_softmax(const Tensor& a);

// sum((a - b)^2) over all elements; scalar result.
Tensor squared_distance(const Tensor& a, const Tensor& b);

// Row selection by index (differentiable through a constant selector).
Tensor gather_rows(const Tensor& a, const std::vector<int>& rows);
// Per-row element pick: out[i] = a[i, index[i]].
Tensor pick_per_row(const Tensor& a, const std::vector<int>& index);
// Stacks rank-2 tensors with equal column counts along the row axis.
Tensor concat_rows(std::span<const Tensor> parts);
// Rows r0..r1 of a rank-2 tensor.
Tensor slice_rows(const Tensor& a, int64_t r0, int64_t r1);
// Embeds a rank-2 tensor into a taller zero tensor starting at `offset`.
Tensor pad_rows(const Tensor& a, int64_t offset, int64_t total_rows);

// Rows scaled to unit Euclidean norm. A zero row is a numeric-domain error;
// the norm gets +1e-12 before dividing.
Tensor l2_normalize_rows(const Tensor& a);

// ---- meta-gradient helpers -------------------------------------------------

// Whether gradients taken after an inner update flow through the update
// itself (Exact) or treat the updated parameters as constants (FirstOrder).
enum class GradMode { FirstOrder, Exact };

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Gradient of loss_fn(params') with respect to params, where
// params' = params - inner_lr * d loss_fn / d params.
std::vector<Tensor> grad_through_update(const LossFn& loss_fn,
                                        const std::vector<Tensor>& params,
                                        double inner_lr, GradMode mode);

// Max relative error between analytic gradients of loss_fn and central
// finite differences with the given step.
double finite_diff_check(const LossFn& loss_fn,
                         const std::vector<Tensor>& params, double step);

}  // namespace maggen
