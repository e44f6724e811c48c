// SPDX-License-Identifier: Apache-2.0
#include "vilbert/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace vilbert {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace {

thread_local Graph* g_active_graph = nullptr;
bool g_finite_checks = false;

detail::NodePtr make_node(Shape shape, std::vector<real> value) {
  auto n = std::make_shared<detail::TensorNode>();
  if (shape_numel(shape) != static_cast<int64_t>(value.size())) {
    throw DimensionError("tensor data length " + std::to_string(value.size()) +
                         " does not match shape " + shape_str(shape));
  }
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

void check_finite(const char* op, const detail::NodePtr& n) {
  if (!g_finite_checks) return;
  for (real v : n->value) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value in output of ") + op);
    }
  }
}

bool any_requires_grad(std::initializer_list<const Tensor*> ins) {
  for (const Tensor* t : ins) {
    if ((*t).requires_grad()) return true;
  }
  return false;
}

/// Common op epilogue: propagate requires_grad and record on the active tape.
Tensor finish_op(const char* op, detail::NodePtr out,
                 std::initializer_list<const Tensor*> ins,
                 std::function<void()> backward_fn) {
  check_finite(op, out);
  Graph* g = Graph::active();
  if (g != nullptr && any_requires_grad(ins)) {
    out->requires_grad = true;
    std::vector<detail::NodePtr> inputs;
    inputs.reserve(ins.size());
    for (const Tensor* t : ins) inputs.push_back(t->node());
    g->record(out, std::move(inputs), std::move(backward_fn));
  }
  return Tensor(std::move(out));
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " requires a rank-2 tensor, got " +
                         shape_str(t.shape()));
  }
}

// ---- matmul kernels. Loop orders chosen so the inner loop is a contiguous
// stream in both operands and vectorizes.

void mm_forward(const real* a, const real* b, real* c, int64_t m, int64_t k,
                int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    real* crow = c + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const real av = a[i * k + kk];
      const real* brow = b + kk * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA[i,kk] += sum_j dC[i,j] * B[kk,j]
void mm_grad_a(const real* dc, const real* b, real* da, int64_t m, int64_t k,
               int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const real* dcrow = dc + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const real* brow = b + kk * n;
      real s = 0;
      for (int64_t j = 0; j < n; ++j) s += dcrow[j] * brow[j];
      da[i * k + kk] += s;
    }
  }
}

// dB[kk,j] += sum_i A[i,kk] * dC[i,j]
void mm_grad_b(const real* a, const real* dc, real* db, int64_t m, int64_t k,
               int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const real* dcrow = dc + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const real av = a[i * k + kk];
      real* dbrow = db + kk * n;
      for (int64_t j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
    }
  }
}

}  // namespace

// ---- Tensor --------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, real value, bool requires_grad) {
  const size_t count = static_cast<size_t>(shape_numel(shape));
  auto n = make_node(std::move(shape), std::vector<real>(count, value));
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(real value) { return from_data({1}, {value}); }

Tensor Tensor::from_data(Shape shape, std::vector<real> data,
                         bool requires_grad) {
  auto n = make_node(std::move(shape), std::move(data));
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::randn(Shape shape, Rng& rng, real stddev, bool requires_grad) {
  std::vector<real> data(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : data) v = rng.normal(0.0, stddev);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

int64_t Tensor::rows() const {
  if (rank() < 1) throw DimensionError("rows() on rank-0 tensor");
  return shape()[0];
}

int64_t Tensor::cols() const {
  require_rank2(*this, "cols()");
  return shape()[1];
}

real Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() requires a scalar tensor, got shape " +
                        shape_str(shape()));
  }
  return node()->value[0];
}

real Tensor::at(int64_t i) const {
  if (i < 0 || i >= numel()) {
    throw IndexError("flat index " + std::to_string(i) +
                     " out of range for shape " + shape_str(shape()));
  }
  return node()->value[static_cast<size_t>(i)];
}

real Tensor::at(int64_t i, int64_t j) const {
  require_rank2(*this, "at(i,j)");
  if (i < 0 || i >= shape()[0] || j < 0 || j >= shape()[1]) {
    throw IndexError("index (" + std::to_string(i) + "," + std::to_string(j) +
                     ") out of range for shape " + shape_str(shape()));
  }
  return node()->value[static_cast<size_t>(i * shape()[1] + j)];
}

std::span<const real> Tensor::grad() const {
  if (node()->grad.empty()) {
    throw ContractError("tensor '" + node()->name +
                        "' has no gradient (backward not run or unreachable)");
  }
  return node()->grad;
}

Tensor Tensor::detach() const {
  return Tensor::from_data(shape(), std::vector<real>(node()->value));
}

// ---- Graph -----------------------------------------------------------------

Graph* Graph::active() { return g_active_graph; }

void Graph::record(detail::NodePtr out, std::vector<detail::NodePtr> inputs,
                   std::function<void()> backward_fn) {
  ops_.push_back(OpRecord{std::move(out), std::move(inputs),
                          std::move(backward_fn)});
}

void Graph::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_str(loss.shape()));
  }
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    if (!it->out->grad.empty()) it->backward_fn();
  }
}

GraphScope::GraphScope(Graph& g) : prev_(g_active_graph) {
  g_active_graph = &g;
}

GraphScope::~GraphScope() { g_active_graph = prev_; }

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks_enabled() { return g_finite_checks; }

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const int64_t m = a.shape()[0], k = a.shape()[1];
  const int64_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw DimensionError("matmul inner extents differ: " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<real> c(static_cast<size_t>(m * n), 0.0);
  mm_forward(a.data().data(), b.data().data(), c.data(), m, k, n);
  auto out = make_node({m, n}, std::move(c));
  return finish_op("matmul", out, {&a, &b},
                   [an = a.node(), bn = b.node(), on = out, m, k, n]() {
                     const real* dc = on->grad.data();
                     if (an->requires_grad) {
                       mm_grad_a(dc, bn->value.data(),
                                 an->grad_buffer().data(), m, k, n);
                     }
                     if (bn->requires_grad) {
                       mm_grad_b(an->value.data(), dc,
                                 bn->grad_buffer().data(), m, k, n);
                     }
                   });
}

Tensor add(const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  const bool bcast = !same && b.rank() == 1 && a.rank() >= 1 &&
                     a.shape().back() == b.shape()[0];
  if (!same && !bcast) {
    throw DimensionError("add shapes incompatible: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  std::vector<real> v(a.data().begin(), a.data().end());
  if (same) {
    const real* bp = b.data().data();
    for (size_t i = 0; i < v.size(); ++i) v[i] += bp[i];
  } else {
    const int64_t d = b.shape()[0];
    const real* bp = b.data().data();
    for (size_t i = 0; i < v.size(); ++i) v[i] += bp[i % d];
  }
  auto out = make_node(a.shape(), std::move(v));
  return finish_op("add", out, {&a, &b},
                   [an = a.node(), bn = b.node(), on = out, same]() {
                     const auto& dc = on->grad;
                     if (an->requires_grad) {
                       auto& da = an->grad_buffer();
                       for (size_t i = 0; i < dc.size(); ++i) da[i] += dc[i];
                     }
                     if (bn->requires_grad) {
                       auto& db = bn->grad_buffer();
                       if (same) {
                         for (size_t i = 0; i < dc.size(); ++i) db[i] += dc[i];
                       } else {
                         const size_t d = bn->value.size();
                         for (size_t i = 0; i < dc.size(); ++i) {
                           db[i % d] += dc[i];
                         }
                       }
                     }
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul shapes differ: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  std::vector<real> v(a.data().begin(), a.data().end());
  const real* bp = b.data().data();
  for (size_t i = 0; i < v.size(); ++i) v[i] *= bp[i];
  auto out = make_node(a.shape(), std::move(v));
  return finish_op("mul", out, {&a, &b},
                   [an = a.node(), bn = b.node(), on = out]() {
                     const auto& dc = on->grad;
                     if (an->requires_grad) {
                       auto& da = an->grad_buffer();
                       for (size_t i = 0; i < dc.size(); ++i) {
                         da[i] += dc[i] * bn->value[i];
                       }
                     }
                     if (bn->requires_grad) {
                       auto& db = bn->grad_buffer();
                       for (size_t i = 0; i < dc.size(); ++i) {
                         db[i] += dc[i] * an->value[i];
                       }
                     }
                   });
}

Tensor scale(const Tensor& a, real c) {
  std::vector<real> v(a.data().begin(), a.data().end());
  for (auto& x : v) x *= c;
  auto out = make_node(a.shape(), std::move(v));
  return finish_op("scale", out, {&a}, [an = a.node(), on = out, c]() {
    if (!an->requires_grad) return;
    auto& da = an->grad_buffer();
    for (size_t i = 0; i < on->grad.size(); ++i) da[i] += c * on->grad[i];
  });
}

namespace {

/// Applies fn to every 1-d line of x along `axis`; fn(offset, stride, len).
template <typename F>
void for_each_line(const Shape& shape, int64_t axis, F&& fn) {
  const int64_t rank = static_cast<int64_t>(shape.size());
  int64_t inner = 1;
  for (int64_t d = axis + 1; d < rank; ++d) inner *= shape[d];
  int64_t outer = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= shape[d];
  const int64_t len = shape[axis];
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < inner; ++i) {
      fn(o * len * inner + i, inner, len);
    }
  }
}

}  // namespace

Tensor softmax(const Tensor& x, int64_t axis) {
  if (axis < 0 || axis >= x.rank()) {
    throw DimensionError("softmax axis " + std::to_string(axis) +
                         " invalid for shape " + shape_str(x.shape()));
  }
  std::vector<real> y(x.data().begin(), x.data().end());
  for_each_line(x.shape(), axis, [&](int64_t off, int64_t stride, int64_t len) {
    real m = y[off];
    for (int64_t i = 1; i < len; ++i) m = std::max(m, y[off + i * stride]);
    real sum = 0;
    for (int64_t i = 0; i < len; ++i) {
      real& v = y[off + i * stride];
      v = std::exp(v - m);
      sum += v;
    }
    const real inv = 1.0 / sum;
    for (int64_t i = 0; i < len; ++i) y[off + i * stride] *= inv;
  });
  auto out = make_node(x.shape(), std::move(y));
  return finish_op("softmax", out, {&x}, [xn = x.node(), on = out, axis]() {
    if (!xn->requires_grad) return;
    auto& dx = xn->grad_buffer();
    const auto& yv = on->value;
    const auto& dy = on->grad;
    for_each_line(on->shape, axis,
                  [&](int64_t off, int64_t stride, int64_t len) {
                    real dot = 0;
                    for (int64_t i = 0; i < len; ++i) {
                      const int64_t p = off + i * stride;
                      dot += dy[p] * yv[p];
                    }
                    for (int64_t i = 0; i < len; ++i) {
                      const int64_t p = off + i * stride;
                      dx[p] += yv[p] * (dy[p] - dot);
                    }
                  });
  });
}

Tensor log_softmax(const Tensor& x) {
  if (x.rank() < 1) throw DimensionError("log_softmax requires rank >= 1");
  const int64_t d = x.shape().back();
  const int64_t rows = x.numel() / d;
  std::vector<real> y(x.data().begin(), x.data().end());
  for (int64_t r = 0; r < rows; ++r) {
    real* row = y.data() + r * d;
    real m = row[0];
    for (int64_t j = 1; j < d; ++j) m = std::max(m, row[j]);
    real sum = 0;
    for (int64_t j = 0; j < d; ++j) sum += std::exp(row[j] - m);
    const real lse = m + std::log(sum);
    for (int64_t j = 0; j < d; ++j) row[j] -= lse;
  }
  auto out = make_node(x.shape(), std::move(y));
  return finish_op("log_softmax", out, {&x}, [xn = x.node(), on = out, d]() {
    if (!xn->requires_grad) return;
    auto& dx = xn->grad_buffer();
    const auto& yv = on->value;
    const auto& dy = on->grad;
    const int64_t rows = static_cast<int64_t>(yv.size()) / d;
    for (int64_t r = 0; r < rows; ++r) {
      const int64_t off = r * d;
      real total = 0;
      for (int64_t j = 0; j < d; ++j) total += dy[off + j];
      for (int64_t j = 0; j < d; ++j) {
        dx[off + j] += dy[off + j] - std::exp(yv[off + j]) * total;
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  real eps) {
  if (x.rank() < 1) throw DimensionError("layer_norm requires rank >= 1");
  const int64_t d = x.shape().back();
  if (gamma.rank() != 1 || gamma.shape()[0] != d || beta.rank() != 1 ||
      beta.shape()[0] != d) {
    throw DimensionError("layer_norm affine params must be rank-1 of size " +
                         std::to_string(d) + ", got gamma " +
                         shape_str(gamma.shape()) + ", beta " +
                         shape_str(beta.shape()));
  }
  const int64_t rows = x.numel() / d;
  std::vector<real> y(static_cast<size_t>(x.numel()));
  auto xhat = std::make_shared<std::vector<real>>(y.size());
  auto inv_std = std::make_shared<std::vector<real>>(rows);
  const real* xp = x.data().data();
  const real* gp = gamma.data().data();
  const real* bp = beta.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const real* row = xp + r * d;
    real mean = 0;
    for (int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<real>(d);
    real var = 0;
    for (int64_t j = 0; j < d; ++j) {
      const real c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<real>(d);
    const real inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (int64_t j = 0; j < d; ++j) {
      const real xh = (row[j] - mean) * inv;
      (*xhat)[r * d + j] = xh;
      y[r * d + j] = gp[j] * xh + bp[j];
    }
  }
  auto out = make_node(x.shape(), std::move(y));
  return finish_op(
      "layer_norm", out, {&x, &gamma, &beta},
      [xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out, xhat,
       inv_std, d]() {
        const auto& dy = on->grad;
        const int64_t rows = static_cast<int64_t>(dy.size()) / d;
        if (gn->requires_grad) {
          auto& dg = gn->grad_buffer();
          for (int64_t r = 0; r < rows; ++r) {
            for (int64_t j = 0; j < d; ++j) {
              dg[j] += dy[r * d + j] * (*xhat)[r * d + j];
            }
          }
        }
        if (bn->requires_grad) {
          auto& db = bn->grad_buffer();
          for (int64_t r = 0; r < rows; ++r) {
            for (int64_t j = 0; j < d; ++j) db[j] += dy[r * d + j];
          }
        }
        if (xn->requires_grad) {
          auto& dx = xn->grad_buffer();
          for (int64_t r = 0; r < rows; ++r) {
            real mean_g = 0, mean_gx = 0;
            for (int64_t j = 0; j < d; ++j) {
              const real g = dy[r * d + j] * gn->value[j];
              mean_g += g;
              mean_gx += g * (*xhat)[r * d + j];
            }
            mean_g /= static_cast<real>(d);
            mean_gx /= static_cast<real>(d);
            const real inv = (*inv_std)[r];
            for (int64_t j = 0; j < d; ++j) {
              const real g = dy[r * d + j] * gn->value[j];
              dx[r * d + j] +=
                  inv * (g - mean_g - (*xhat)[r * d + j] * mean_gx);
            }
          }
        }
      });
}

namespace {
constexpr real kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr real kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  std::vector<real> y(x.data().begin(), x.data().end());
  for (auto& v : y) {
    const real u = kGeluC * (v + kGeluA * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  auto out = make_node(x.shape(), std::move(y));
  return finish_op("gelu", out, {&x}, [xn = x.node(), on = out]() {
    if (!xn->requires_grad) return;
    auto& dx = xn->grad_buffer();
    for (size_t i = 0; i < on->grad.size(); ++i) {
      const real v = xn->value[i];
      const real t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const real d = 0.5 * (1.0 + t) +
                     0.5 * v * (1.0 - t * t) * kGeluC *
                         (1.0 + 3.0 * kGeluA * v * v);
      dx[i] += on->grad[i] * d;
    }
  });
}

Tensor tanh(const Tensor& x) {
  std::vector<real> y(x.data().begin(), x.data().end());
  for (auto& v : y) v = std::tanh(v);
  auto out = make_node(x.shape(), std::move(y));
  return finish_op("tanh", out, {&x}, [xn = x.node(), on = out]() {
    if (!xn->requires_grad) return;
    auto& dx = xn->grad_buffer();
    for (size_t i = 0; i < on->grad.size(); ++i) {
      dx[i] += on->grad[i] * (1.0 - on->value[i] * on->value[i]);
    }
  });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int64_t> ids) {
  require_rank2(table, "embedding_lookup");
  const int64_t v = table.shape()[0], d = table.shape()[1];
  for (int64_t id : ids) {
    if (id < 0 || id >= v) {
      throw IndexError("embedding id " + std::to_string(id) +
                       " out of range [0," + std::to_string(v) + ")");
    }
  }
  const int64_t n = static_cast<int64_t>(ids.size());
  std::vector<real> y(static_cast<size_t>(n * d));
  for (int64_t i = 0; i < n; ++i) {
    std::memcpy(y.data() + i * d, table.data().data() + ids[i] * d,
                sizeof(real) * static_cast<size_t>(d));
  }
  auto out = make_node({n, d}, std::move(y));
  std::vector<int64_t> ids_copy(ids.begin(), ids.end());
  return finish_op("embedding_lookup", out, {&table},
                   [tn = table.node(), on = out,
                    ids2 = std::move(ids_copy), d]() {
                     if (!tn->requires_grad) return;
                     auto& dt = tn->grad_buffer();
                     for (size_t i = 0; i < ids2.size(); ++i) {
                       const real* src = on->grad.data() + i * d;
                       real* dst = dt.data() + ids2[i] * d;
                       for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                     }
                   });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  require_rank2(a, "concat_rows");
  require_rank2(b, "concat_rows");
  if (a.shape()[1] != b.shape()[1]) {
    throw DimensionError("concat_rows column counts differ: " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<real> y;
  y.reserve(a.data().size() + b.data().size());
  y.insert(y.end(), a.data().begin(), a.data().end());
  y.insert(y.end(), b.data().begin(), b.data().end());
  auto out = make_node({a.shape()[0] + b.shape()[0], a.shape()[1]},
                       std::move(y));
  return finish_op("concat_rows", out, {&a, &b},
                   [an = a.node(), bn = b.node(), on = out]() {
                     const auto& dc = on->grad;
                     const size_t na = an->value.size();
                     if (an->requires_grad) {
                       auto& da = an->grad_buffer();
                       for (size_t i = 0; i < na; ++i) da[i] += dc[i];
                     }
                     if (bn->requires_grad) {
                       auto& db = bn->grad_buffer();
                       for (size_t i = 0; i < bn->value.size(); ++i) {
                         db[i] += dc[na + i];
                       }
                     }
                   });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols of zero tensors");
  const int64_t rows = parts[0].shape()[0];
  int64_t total = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.shape()[0] != rows) {
      throw DimensionError("concat_cols row counts differ");
    }
    total += p.shape()[1];
  }
  std::vector<real> y(static_cast<size_t>(rows * total));
  int64_t col = 0;
  for (const auto& p : parts) {
    const int64_t d = p.shape()[1];
    for (int64_t r = 0; r < rows; ++r) {
      std::memcpy(y.data() + r * total + col, p.data().data() + r * d,
                  sizeof(real) * static_cast<size_t>(d));
    }
    col += d;
  }
  auto out = make_node({rows, total}, std::move(y));
  std::vector<detail::NodePtr> nodes;
  nodes.reserve(parts.size());
  for (const auto& p : parts) nodes.push_back(p.node());
  Graph* g = Graph::active();
  bool needs = false;
  for (const auto& p : parts) needs = needs || p.requires_grad();
  check_finite("concat_cols", out);
  if (g != nullptr && needs) {
    out->requires_grad = true;
    auto fn = [nodes, on = out, rows, total]() {
      int64_t col = 0;
      for (const auto& node : nodes) {
        const int64_t d = node->shape[1];
        if (node->requires_grad) {
          auto& dp = node->grad_buffer();
          for (int64_t r = 0; r < rows; ++r) {
            const real* src = on->grad.data() + r * total + col;
            for (int64_t j = 0; j < d; ++j) dp[r * d + j] += src[j];
          }
        }
        col += d;
      }
    };
    g->record(out, nodes, std::move(fn));
  }
  return Tensor(out);
}

Tensor slice_rows(const Tensor& x, int64_t begin, int64_t end) {
  require_rank2(x, "slice_rows");
  const int64_t rows = x.shape()[0], d = x.shape()[1];
  if (begin < 0 || end < begin || end > rows) {
    throw IndexError("slice_rows [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") out of range for " +
                     shape_str(x.shape()));
  }
  std::vector<real> y(x.data().begin() + begin * d,
                      x.data().begin() + end * d);
  auto out = make_node({end - begin, d}, std::move(y));
  return finish_op("slice_rows", out, {&x},
                   [xn = x.node(), on = out, begin, d]() {
                     if (!xn->requires_grad) return;
                     auto& dx = xn->grad_buffer();
                     for (size_t i = 0; i < on->grad.size(); ++i) {
                       dx[static_cast<size_t>(begin * d) + i] += on->grad[i];
                     }
                   });
}

Tensor slice_cols(const Tensor& x, int64_t begin, int64_t end) {
  require_rank2(x, "slice_cols");
  const int64_t rows = x.shape()[0], d = x.shape()[1];
  if (begin < 0 || end < begin || end > d) {
    throw IndexError("slice_cols [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") out of range for " +
                     shape_str(x.shape()));
  }
  const int64_t w = end - begin;
  std::vector<real> y(static_cast<size_t>(rows * w));
  for (int64_t r = 0; r < rows; ++r) {
    std::memcpy(y.data() + r * w, x.data().data() + r * d + begin,
                sizeof(real) * static_cast<size_t>(w));
  }
  auto out = make_node({rows, w}, std::move(y));
  return finish_op("slice_cols", out, {&x},
                   [xn = x.node(), on = out, begin, d, w, rows]() {
                     if (!xn->requires_grad) return;
                     auto& dx = xn->grad_buffer();
                     for (int64_t r = 0; r < rows; ++r) {
                       const real* src = on->grad.data() + r * w;
                       real* dst = dx.data() + r * d + begin;
                       for (int64_t j = 0; j < w; ++j) dst[j] += src[j];
                     }
                   });
}

Tensor transpose(const Tensor& x) {
  require_rank2(x, "transpose");
  const int64_t m = x.shape()[0], n = x.shape()[1];
  std::vector<real> y(static_cast<size_t>(m * n));
  const real* xp = x.data().data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) y[j * m + i] = xp[i * n + j];
  }
  auto out = make_node({n, m}, std::move(y));
  return finish_op("transpose", out, {&x}, [xn = x.node(), on = out, m, n]() {
    if (!xn->requires_grad) return;
    auto& dx = xn->grad_buffer();
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t j = 0; j < n; ++j) dx[i * n + j] += on->grad[j * m + i];
    }
  });
}

Tensor sum_all(const Tensor& x) {
  real s = 0;
  for (real v : x.data()) s += v;
  auto out = make_node({1}, {s});
  return finish_op("sum_all", out, {&x}, [xn = x.node(), on = out]() {
    if (!xn->requires_grad) return;
    auto& dx = xn->grad_buffer();
    const real g = on->grad[0];
    for (auto& v : dx) v += g;
  });
}

Tensor mean_all(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean_all of an empty tensor");
  real s = 0;
  for (real v : x.data()) s += v;
  const real n = static_cast<real>(x.numel());
  auto out = make_node({1}, {s / n});
  return finish_op("mean_all", out, {&x}, [xn = x.node(), on = out, n]() {
    if (!xn->requires_grad) return;
    auto& dx = xn->grad_buffer();
    const real g = on->grad[0] / n;
    for (auto& v : dx) v += g;
  });
}

Tensor dropout(const Tensor& x, real p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw ContractError("dropout rate must be in [0,1), got " +
                        format_real(p));
  }
  if (p == 0.0) return x;
  const real keep = 1.0 - p;
  auto mask = std::make_shared<std::vector<real>>(x.data().size());
  std::vector<real> y(x.data().begin(), x.data().end());
  for (size_t i = 0; i < y.size(); ++i) {
    const real m = rng.uniform() < p ? 0.0 : 1.0 / keep;
    (*mask)[i] = m;
    y[i] *= m;
  }
  auto out = make_node(x.shape(), std::move(y));
  return finish_op("dropout", out, {&x}, [xn = x.node(), on = out, mask]() {
    if (!xn->requires_grad) return;
    auto& dx = xn->grad_buffer();
    for (size_t i = 0; i < on->grad.size(); ++i) {
      dx[i] += on->grad[i] * (*mask)[i];
    }
  });
}

Tensor nll_loss(const Tensor& log_probs, std::span<const int64_t> targets) {
  require_rank2(log_probs, "nll_loss");
  const int64_t rows = log_probs.shape()[0], d = log_probs.shape()[1];
  if (static_cast<int64_t>(targets.size()) != rows) {
    throw DimensionError("nll_loss needs one target per row, got " +
                         std::to_string(targets.size()) + " targets for " +
                         shape_str(log_probs.shape()));
  }
  if (rows == 0) throw ContractError("nll_loss over zero rows");
  real s = 0;
  for (int64_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || targets[r] >= d) {
      throw IndexError("nll target " + std::to_string(targets[r]) +
                       " out of range [0," + std::to_string(d) + ")");
    }
    s -= log_probs.at(r, targets[r]);
  }
  auto out = make_node({1}, {s / static_cast<real>(rows)});
  std::vector<int64_t> t(targets.begin(), targets.end());
  return finish_op("nll_loss", out, {&log_probs},
                   [ln = log_probs.node(), on = out, t = std::move(t), d]() {
                     if (!ln->requires_grad) return;
                     auto& dl = ln->grad_buffer();
                     const real g = on->grad[0] / static_cast<real>(t.size());
                     for (size_t r = 0; r < t.size(); ++r) {
                       dl[r * d + static_cast<size_t>(t[r])] -= g;
                     }
                   });
}

Tensor soft_nll(const Tensor& log_probs, const Tensor& targets) {
  require_rank2(log_probs, "soft_nll");
  if (log_probs.shape() != targets.shape()) {
    throw DimensionError("soft_nll shapes differ: " +
                         shape_str(log_probs.shape()) + " vs " +
                         shape_str(targets.shape()));
  }
  const int64_t rows = log_probs.shape()[0];
  if (rows == 0) throw ContractError("soft_nll over zero rows");
  real s = 0;
  const real* lp = log_probs.data().data();
  const real* tp = targets.data().data();
  for (size_t i = 0; i < log_probs.data().size(); ++i) s -= tp[i] * lp[i];
  auto out = make_node({1}, {s / static_cast<real>(rows)});
  return finish_op("soft_nll", out, {&log_probs},
                   [ln = log_probs.node(), tn = targets.node(), on = out,
                    rows]() {
                     if (!ln->requires_grad) return;
                     auto& dl = ln->grad_buffer();
                     const real g = on->grad[0] / static_cast<real>(rows);
                     for (size_t i = 0; i < dl.size(); ++i) {
                       dl[i] -= g * tn->value[i];
                     }
                   });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) {
    throw DimensionError("bce_with_logits shapes differ: " +
                         shape_str(logits.shape()) + " vs " +
                         shape_str(targets.shape()));
  }
  const int64_t n = logits.numel();
  if (n == 0) throw ContractError("bce_with_logits over zero elements");
  real s = 0;
  const real* zp = logits.data().data();
  const real* yp = targets.data().data();
  for (int64_t i = 0; i < n; ++i) {
    const real z = zp[i], y = yp[i];
    s += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  auto out = make_node({1}, {s / static_cast<real>(n)});
  return finish_op("bce_with_logits", out, {&logits},
                   [ln = logits.node(), tn = targets.node(), on = out, n]() {
                     if (!ln->requires_grad) return;
                     auto& dl = ln->grad_buffer();
                     const real g = on->grad[0] / static_cast<real>(n);
                     for (int64_t i = 0; i < n; ++i) {
                       const real z = ln->value[i];
                       const real sig = 1.0 / (1.0 + std::exp(-z));
                       dl[i] += g * (sig - tn->value[i]);
                     }
                   });
}

}  // namespace vilbert
