// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vilbert/common.hpp"
#include "vilbert/rng.hpp"

namespace vilbert {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<real> value;
  std::vector<real> grad;  // empty until someone accumulates into it
  bool requires_grad = false;
  std::string name;

  std::vector<real>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

using NodePtr = std::shared_ptr<TensorNode>;

}  // namespace detail

/// Dense row-major tensor participating in reverse-mode differentiation.
/// Value-semantic handle: copies share the underlying node. Values are
/// immutable once an op has consumed the tensor; gradients accumulate in
/// place across backward passes until zero_grad().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, real value, bool requires_grad = false);
  static Tensor scalar(real value);
  static Tensor from_data(Shape shape, std::vector<real> data,
                          bool requires_grad = false);
  /// I.i.d. normal entries with the given standard deviation.
  static Tensor randn(Shape shape, Rng& rng, real stddev = 1.0,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node()->shape; }
  int64_t rank() const { return static_cast<int64_t>(shape().size()); }
  int64_t numel() const { return static_cast<int64_t>(node()->value.size()); }
  /// Rank-2 helpers.
  int64_t rows() const;
  int64_t cols() const;

  real item() const;
  real at(int64_t i) const;
  real at(int64_t i, int64_t j) const;

  std::span<const real> data() const { return node()->value; }
  /// Direct write access for initialization; never use on a tensor that has
  /// already been consumed by a recorded op.
  std::span<real> mutable_data() { return node()->value; }

  bool requires_grad() const { return node()->requires_grad; }
  void set_requires_grad(bool v) { node()->requires_grad = v; }
  const std::string& name() const { return node()->name; }
  void set_name(std::string name) { node()->name = std::move(name); }

  bool has_grad() const { return !node()->grad.empty(); }
  std::span<const real> grad() const;
  void zero_grad() { node()->grad.clear(); }

  /// Value copy with no graph linkage (used e.g. for cached activations).
  Tensor detach() const;

  const detail::NodePtr& node() const {
    if (!node_) throw ContractError("operation on an undefined tensor");
    return node_;
  }

 private:
  detail::NodePtr node_;
};

/// Recording tape. Ops executed while a GraphScope is active append their
/// backward rules in execution order, which is a topological order of the
/// data flow. One backward() pass then populates the grad of every
/// requires_grad tensor reachable from the loss.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void record(detail::NodePtr out, std::vector<detail::NodePtr> inputs,
              std::function<void()> backward_fn);

  /// Reverse sweep from a scalar loss; seeds d(loss)/d(loss) = 1.
  void backward(const Tensor& loss);

  size_t num_ops() const { return ops_.size(); }

  static Graph* active();

 private:
  friend class GraphScope;
  struct OpRecord {
    detail::NodePtr out;
    std::vector<detail::NodePtr> inputs;
    std::function<void()> backward_fn;
  };
  std::vector<OpRecord> ops_;
};

/// RAII activation of a graph; ops run without recording when none is active.
class GraphScope {
 public:
  explicit GraphScope(Graph& g);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* prev_;
};

/// When enabled, every op verifies its output is finite and throws
/// NumericError otherwise. Off by default; tests and gradcheck turn it on.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

// ---- operations -----------------------------------------------------------

/// C = A x B for A[m x k], B[k x n]. Gradients dA = dC Bt, dB = At dC.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Elementwise add. Also accepts a rank-1 right operand matching the last
/// extent of the left (trailing-dimension affine broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real c);

/// Max-subtracted softmax along the given axis; slices sum to 1.
Tensor softmax(const Tensor& x, int64_t axis);
/// Numerically stable log-softmax along the last axis.
Tensor log_softmax(const Tensor& x);
/// Per-row normalization over the last extent, then gamma * xhat + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  real eps = 1e-6);
/// GELU, tanh approximation.
Tensor gelu(const Tensor& x);
Tensor tanh(const Tensor& x);

/// Row gather: out[i, :] = table[ids[i], :]. Backward scatter-adds.
Tensor embedding_lookup(const Tensor& table, std::span<const int64_t> ids);

Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int64_t begin, int64_t end);
Tensor slice_cols(const Tensor& x, int64_t begin, int64_t end);
Tensor transpose(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

/// Inverted dropout with an explicit rng; identity when p == 0.
Tensor dropout(const Tensor& x, real p, Rng& rng);

/// -mean_r log_probs[r, targets[r]] over all rows.
Tensor nll_loss(const Tensor& log_probs, std::span<const int64_t> targets);
/// -(1/R) sum_rc targets[r,c] * log_probs[r,c]; targets is a constant.
Tensor soft_nll(const Tensor& log_probs, const Tensor& targets);
/// Mean stable binary cross-entropy on logits; targets in [0,1], constant.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

}  // namespace vilbert
