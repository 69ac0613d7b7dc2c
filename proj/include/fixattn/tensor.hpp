#pragma once

// Dense tensors with reverse-mode differentiation.
//
// A Tensor is a shared handle to a graph node. Operations on tensors that
// require gradients record their inputs and a backward closure; backward()
// walks the recorded graph once in reverse topological order and accumulates
// gradients additively into every participating node. Matrix products are
// delegated to Eigen.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fixattn/error.hpp"

namespace fixattn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t k = 0; k < shape.size(); ++k) {
    if (k > 0) out += ", ";
    out += std::to_string(shape[k]);
  }
  return out + "]";
}

namespace detail {
inline thread_local bool grad_mode = true;
}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode; }

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (numel(shape) != data.size()) {
      throw ShapeError("shape " + fixattn::to_string(shape) + " needs " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto count = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(count, T(0)), requires_grad);
  }

  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    const auto count = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(count, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  static Tensor from_node(std::shared_ptr<Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  T item() const { return node_->value.at(0); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
using ParameterList = std::vector<NamedParameter<T>>;

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;
template <class T>
using MutMap = Eigen::Map<RowMatrix<T>>;

template <class T>
ConstMap<T> as_matrix(const std::vector<T>& v, std::size_t offset, std::size_t rows,
                      std::size_t cols) {
  return ConstMap<T>(v.data() + offset, static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(cols));
}

template <class T>
MutMap<T> as_matrix(std::vector<T>& v, std::size_t offset, std::size_t rows,
                    std::size_t cols) {
  return MutMap<T>(v.data() + offset, static_cast<Eigen::Index>(rows),
                   static_cast<Eigen::Index>(cols));
}

// Wraps a freshly computed value into a node. The node joins the graph only
// when recording is enabled and some input requires a gradient.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(value));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& in : inputs) node.parents.push_back(in.node());
  node.backward = std::move(backward);
  return out;
}

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(value));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& in : inputs) node.parents.push_back(in.node());
  node.backward = std::move(backward);
  return out;
}

inline std::string shapes_message(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + to_string(a) + " and " +
         to_string(b);
}

}  // namespace detail

// Runs reverse-mode differentiation from a scalar root.
template <class T>
void backward(const Tensor<T>& root) {
  if (root.size() != 1) {
    throw ShapeError("backward needs a scalar root, got shape " + to_string(root.shape()));
  }
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& node = **it;
    if (node.backward && !node.grad.empty()) node.backward(node);
  }
}

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

// Matrix product over the last two axes. A rank-2 right operand is shared by
// every leading index of the left operand; two rank-3 operands multiply
// batch-wise.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  using detail::as_matrix;
  if (a.rank() < 2 || (b.rank() != 2 && b.rank() != 3)) {
    throw ShapeError(detail::shapes_message("matmul", a.shape(), b.shape()));
  }
  const std::size_t k = a.shape().back();
  const bool batched = b.rank() == 3;
  if (batched && (a.rank() != 3 || a.dim(0) != b.dim(0))) {
    throw ShapeError(detail::shapes_message("matmul", a.shape(), b.shape()));
  }
  const std::size_t b_rows = b.dim(b.rank() - 2);
  const std::size_t n = b.shape().back();
  if (b_rows != k) throw ShapeError(detail::shapes_message("matmul", a.shape(), b.shape()));

  const std::size_t batches = batched ? a.dim(0) : 1;
  const std::size_t m = a.size() / (k * batches);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);

  std::vector<T> out(batches * m * n);
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t s = 0; s < batches; ++s) {
    as_matrix(out, s * m * n, m, n).noalias() =
        as_matrix(av, s * m * k, m, k) * as_matrix(bv, batched ? s * k * n : 0, k, n);
  }
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {a, b},
      [batches, m, k, n, batched](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (std::size_t s = 0; s < batches; ++s) {
          const auto g = as_matrix(self.grad, s * m * n, m, n);
          const std::size_t b_off = batched ? s * k * n : 0;
          if (pa.requires_grad) {
            as_matrix(pa.ensure_grad(), s * m * k, m, k).noalias() +=
                g * as_matrix(pb.value, b_off, k, n).transpose();
          }
          if (pb.requires_grad) {
            as_matrix(pb.ensure_grad(), b_off, k, n).noalias() +=
                as_matrix(pa.value, s * m * k, m, k).transpose() * g;
          }
        }
      });
}

// Swaps the last two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  using detail::as_matrix;
  if (a.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + to_string(a.shape()));
  const std::size_t rows = a.dim(a.rank() - 2);
  const std::size_t cols = a.shape().back();
  const std::size_t batches = a.size() / (rows * cols);
  Shape out_shape = a.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  std::vector<T> out(a.size());
  const auto& av = a.node()->value;
  for (std::size_t s = 0; s < batches; ++s) {
    as_matrix(out, s * rows * cols, cols, rows) =
        as_matrix(av, s * rows * cols, rows, cols).transpose();
  }
  return detail::make_result<T>(std::move(out_shape), std::move(out), {a},
                                [batches, rows, cols](Node<T>& self) {
                                  auto& pa = *self.parents[0];
                                  for (std::size_t s = 0; s < batches; ++s) {
                                    as_matrix(pa.ensure_grad(), s * rows * cols, rows, cols) +=
                                        as_matrix(self.grad, s * rows * cols, cols, rows)
                                            .transpose();
                                  }
                                });
}

// Elementwise sum of equal shapes, or a rank-1 bias added along the last axis.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const bool bias = b.rank() == 1 && a.shape().back() == b.dim(0) && a.shape() != b.shape();
  if (!bias && a.shape() != b.shape()) {
    throw ShapeError(detail::shapes_message("add", a.shape(), b.shape()));
  }
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  std::vector<T> out(av);
  const std::size_t width = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[bias ? i % width : i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b},
                                [bias, width](Node<T>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  const auto& g = self.grad;
                                  if (pa.requires_grad) {
                                    auto& ga = pa.ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                                  }
                                  if (pb.requires_grad) {
                                    auto& gb = pb.ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) {
                                      gb[bias ? i % width : i] += g[i];
                                    }
                                  }
                                });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.node()->value);
  for (auto& v : out) v *= factor;
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [factor](Node<T>& self) {
    auto& ga = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += factor * self.grad[i];
  });
}

// Softmax over the last axis. Entries equal to -inf receive zero probability.
template <class T>
Tensor<T> row_softmax(const Tensor<T>& a) {
  const std::size_t width = a.shape().back();
  const std::size_t rows = a.size() / width;
  const auto& av = a.node()->value;
  std::vector<T> out(av.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * width;
    T* y = out.data() + r * width;
    const T peak = *std::max_element(x, x + width);
    T total = 0;
    for (std::size_t j = 0; j < width; ++j) {
      y[j] = std::exp(x[j] - peak);
      total += y[j];
    }
    for (std::size_t j = 0; j < width; ++j) y[j] /= total;
  }
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [rows, width](Node<T>& self) {
    auto& ga = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * width;
      const T* g = self.grad.data() + r * width;
      T dot = 0;
      for (std::size_t j = 0; j < width; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < width; ++j) ga[r * width + j] += y[j] * (g[j] - dot);
    }
  });
}

inline constexpr double kLayerNormEpsilon = 1e-9;

// Normalizes each row over the last axis, then applies gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T epsilon = T(kLayerNormEpsilon)) {
  const std::size_t width = x.shape().back();
  if (gain.shape() != Shape{width} || bias.shape() != Shape{width}) {
    throw ShapeError(detail::shapes_message("layer_norm", x.shape(), gain.shape()));
  }
  const std::size_t rows = x.size() / width;
  const auto& xv = x.node()->value;
  const auto& gv = gain.node()->value;
  const auto& bv = bias.node()->value;
  auto normalized = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * width;
    T mean = 0;
    for (std::size_t j = 0; j < width; ++j) mean += row[j];
    mean /= static_cast<T>(width);
    T var = 0;
    for (std::size_t j = 0; j < width; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(width);
    const T inv = T(1) / std::sqrt(var + epsilon);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < width; ++j) {
      const T h = (row[j] - mean) * inv;
      (*normalized)[r * width + j] = h;
      out[r * width + j] = h * gv[j] + bv[j];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, width, normalized, inv_std](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& gv = pg.value;
        const auto& h = *normalized;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* g = self.grad.data() + r * width;
          if (pg.requires_grad || pb.requires_grad) {
            auto& gg = pg.ensure_grad();
            auto& gb = pb.ensure_grad();
            for (std::size_t j = 0; j < width; ++j) {
              gg[j] += g[j] * h[r * width + j];
              gb[j] += g[j];
            }
          }
          if (px.requires_grad) {
            T mean_dh = 0;
            T mean_dh_h = 0;
            for (std::size_t j = 0; j < width; ++j) {
              const T dh = g[j] * gv[j];
              mean_dh += dh;
              mean_dh_h += dh * h[r * width + j];
            }
            mean_dh /= static_cast<T>(width);
            mean_dh_h /= static_cast<T>(width);
            auto& gx = px.ensure_grad();
            for (std::size_t j = 0; j < width; ++j) {
              const T dh = g[j] * gv[j];
              gx[r * width + j] +=
                  (*inv_std)[r] * (dh - mean_dh - h[r * width + j] * mean_dh_h);
            }
          }
        }
      });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.node()->value);
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
    auto& ga = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (self.value[i] > T(0)) ga[i] += self.grad[i];
    }
  });
}

// Gathers rows of a [vocab, width] table.
template <class T, class Id>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const Id> ids) {
  if (table.rank() != 2) throw ShapeError("embedding table must be rank 2, got " + to_string(table.shape()));
  const std::size_t vocab = table.dim(0);
  const std::size_t width = table.dim(1);
  std::vector<std::size_t> rows(ids.size());
  std::vector<T> out(ids.size() * width);
  const auto& tv = table.node()->value;
  for (std::size_t p = 0; p < ids.size(); ++p) {
    const auto id = static_cast<std::size_t>(ids[p]);
    if (id >= vocab) {
      throw ShapeError("embedding id " + std::to_string(id) + " outside table " +
                       to_string(table.shape()));
    }
    rows[p] = id;
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(id * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(p * width));
  }
  return detail::make_result<T>({ids.size(), width}, std::move(out), {table},
                                [rows = std::move(rows), width](Node<T>& self) {
                                  auto& gt = self.parents[0]->ensure_grad();
                                  for (std::size_t p = 0; p < rows.size(); ++p) {
                                    for (std::size_t j = 0; j < width; ++j) {
                                      gt[rows[p] * width + j] += self.grad[p * width + j];
                                    }
                                  }
                                });
}

template <class T>
Tensor<T> concat_last_dim(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_last_dim of no tensors");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape l(p.shape().begin(), p.shape().end() - 1);
    if (l != lead) throw ShapeError(detail::shapes_message("concat_last_dim", parts[0].shape(), p.shape()));
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  const std::size_t rows = numel(lead);
  std::vector<T> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].node()->value;
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(r * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    }
    offset += widths[k];
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  return detail::make_result<T>(std::move(out_shape), std::move(out), parts,
                                [rows, total, widths](Node<T>& self) {
                                  std::size_t offset = 0;
                                  for (std::size_t k = 0; k < widths.size(); ++k) {
                                    auto& parent = *self.parents[k];
                                    if (parent.requires_grad) {
                                      auto& g = parent.ensure_grad();
                                      for (std::size_t r = 0; r < rows; ++r) {
                                        for (std::size_t j = 0; j < widths[k]; ++j) {
                                          g[r * widths[k] + j] += self.grad[r * total + offset + j];
                                        }
                                      }
                                    }
                                    offset += widths[k];
                                  }
                                });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError(detail::shapes_message("reshape", a.shape(), shape));
  }
  return detail::make_result<T>(std::move(shape), a.node()->value, {a}, [](Node<T>& self) {
    auto& ga = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  const auto& av = a.node()->value;
  const T total = std::accumulate(av.begin(), av.end(), T(0));
  return detail::make_result<T>({1}, {total}, {a}, [](Node<T>& self) {
    auto& ga = self.parents[0]->ensure_grad();
    for (auto& g : ga) g += self.grad[0];
  });
}

// Inverted dropout; the identity when probability is zero.
template <class T, class Rng>
Tensor<T> dropout(const Tensor<T>& a, double probability, Rng& rng) {
  if (probability <= 0.0) return a;
  std::bernoulli_distribution keep(1.0 - probability);
  const T factor = T(1.0 / (1.0 - probability));
  auto mask = std::make_shared<std::vector<T>>(a.size());
  std::vector<T> out(a.node()->value);
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = keep(rng) ? factor : T(0);
    out[i] *= (*mask)[i];
  }
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [mask](Node<T>& self) {
    auto& ga = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += (*mask)[i] * self.grad[i];
  });
}

struct CrossEntropyStats {
  std::size_t correct = 0;
  std::size_t counted = 0;
};

// Mean negative log-likelihood of targets over rows whose mask is nonzero.
// Also reports how many counted rows have their target as the argmax.
template <class T, class Id>
Tensor<T> cross_entropy_with_mask(const Tensor<T>& logits, std::span<const Id> targets,
                                  std::span<const T> mask, CrossEntropyStats* stats = nullptr) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size() || mask.size() != targets.size()) {
    throw ShapeError("cross_entropy_with_mask: logits " + to_string(logits.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets and " +
                     std::to_string(mask.size()) + " mask entries");
  }
  const std::size_t rows = logits.dim(0);
  const std::size_t vocab = logits.dim(1);
  const auto& lv = logits.node()->value;
  auto probs = std::make_shared<std::vector<T>>(lv.size());
  T weight = 0;
  for (auto m : mask) weight += m;
  if (weight <= T(0)) throw InvalidInput("cross entropy over an all-masked batch");
  T loss = 0;
  CrossEntropyStats local;
  std::vector<std::size_t> target_index(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto t = static_cast<std::size_t>(targets[r]);
    if (t >= vocab) throw ShapeError("target id " + std::to_string(t) + " outside vocabulary of " + std::to_string(vocab));
    target_index[r] = t;
    const T* x = lv.data() + r * vocab;
    const auto argmax = static_cast<std::size_t>(std::max_element(x, x + vocab) - x);
    const T peak = x[argmax];
    T total = 0;
    for (std::size_t j = 0; j < vocab; ++j) total += std::exp(x[j] - peak);
    const T log_total = std::log(total);
    for (std::size_t j = 0; j < vocab; ++j) (*probs)[r * vocab + j] = std::exp(x[j] - peak - log_total);
    if (mask[r] != T(0)) {
      loss += mask[r] * (log_total - (x[t] - peak));
      ++local.counted;
      if (argmax == t) ++local.correct;
    }
  }
  if (stats != nullptr) *stats = local;
  std::vector<T> mask_copy(mask.begin(), mask.end());
  return detail::make_result<T>(
      {1}, {loss / weight}, {logits},
      [rows, vocab, probs, weight, target_index = std::move(target_index),
       mask_copy = std::move(mask_copy)](Node<T>& self) {
        auto& gl = self.parents[0]->ensure_grad();
        const T g = self.grad[0] / weight;
        for (std::size_t r = 0; r < rows; ++r) {
          if (mask_copy[r] == T(0)) continue;
          const T w = g * mask_copy[r];
          for (std::size_t j = 0; j < vocab; ++j) gl[r * vocab + j] += w * (*probs)[r * vocab + j];
          gl[r * vocab + target_index[r]] -= w;
        }
      });
}

// ---------------------------------------------------------------------------
// Initialization and optimization
// ---------------------------------------------------------------------------

template <class T, class Rng>
Tensor<T> xavier_uniform(Shape shape, Rng& rng) {
  const std::size_t fan_in = shape.size() >= 2 ? shape[shape.size() - 2] : shape[0];
  const std::size_t fan_out = shape.back();
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> data(numel(shape));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(data), true);
}

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
};

template <class T>
struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
};

// One bias-corrected Adam update over every parameter that holds a gradient.
template <class T>
void adam_step(ParameterList<T>& params, AdamState<T>& state, const AdamConfig& config) {
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.tensor.size(), T(0));
      state.second_moment.emplace_back(p.tensor.size(), T(0));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ConfigError("optimizer state tracks " + std::to_string(state.first_moment.size()) +
                      " parameters, got " + std::to_string(params.size()));
  }
  for (const auto& p : params) {
    for (auto g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
  ++state.step;
  const double correction1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  const T b1 = T(config.beta1);
  const T b2 = T(config.beta2);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& tensor = params[k].tensor;
    if (!tensor.has_grad()) continue;
    auto grad = tensor.grad();
    auto value = tensor.mutable_data();
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
      v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
      const double m_hat = static_cast<double>(m[i]) / correction1;
      const double v_hat = static_cast<double>(v[i]) / correction2;
      value[i] -= static_cast<T>(config.lr * m_hat / (std::sqrt(v_hat) + config.epsilon));
    }
  }
}

template <class T>
void zero_grad(ParameterList<T>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

struct GradientCheckEntry {
  std::string name;
  std::size_t coordinates = 0;
  double max_relative_error = 0.0;
  bool passed = false;
};

struct GradientCheckReport {
  std::vector<GradientCheckEntry> entries;

  bool passed() const {
    return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
  }
  double max_relative_error() const {
    double worst = 0.0;
    for (const auto& e : entries) worst = std::max(worst, e.max_relative_error);
    return worst;
  }
};

struct GradientCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  std::size_t coordinates = 32;
  // Relative errors are measured against max(|analytic|, |numeric|, floor).
  double floor = 1e-6;
  std::uint64_t seed = 7;
};

// Compares analytic gradients of a scalar computation against central
// differences on a sample of coordinates of each parameter.
inline GradientCheckReport finite_difference_check(
    const std::function<Tensor<double>()>& loss_fn, ParameterList<double>& params,
    const GradientCheckOptions& options = {}) {
  zero_grad(params);
  const auto loss = loss_fn();
  if (!std::isfinite(loss.item())) throw NumericalError("loss is not finite");
  backward(loss);

  auto evaluate = [&]() {
    NoGradGuard guard;
    const double value = loss_fn().item();
    if (!std::isfinite(value)) throw NumericalError("perturbed loss is not finite");
    return value;
  };

  std::mt19937_64 rng(options.seed);
  GradientCheckReport report;
  for (auto& p : params) {
    GradientCheckEntry entry;
    entry.name = p.name;
    const std::size_t count = p.tensor.size();
    std::vector<std::size_t> coords(count);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (count > options.coordinates) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.coordinates);
    }
    std::vector<double> analytic(count, 0.0);
    if (p.tensor.has_grad()) {
      const auto g = p.tensor.grad();
      analytic.assign(g.begin(), g.end());
    }
    auto values = p.tensor.mutable_data();
    for (auto c : coords) {
      const double original = values[c];
      values[c] = original + options.epsilon;
      const double plus = evaluate();
      values[c] = original - options.epsilon;
      const double minus = evaluate();
      values[c] = original;
      const double numeric = (plus - minus) / (2.0 * options.epsilon);
      if (!std::isfinite(numeric) || !std::isfinite(analytic[c])) {
        throw NumericalError("non-finite gradient for '" + p.name + "'");
      }
      const double denom =
          std::max({std::abs(analytic[c]), std::abs(numeric), options.floor});
      entry.max_relative_error =
          std::max(entry.max_relative_error, std::abs(analytic[c] - numeric) / denom);
    }
    entry.coordinates = coords.size();
    entry.passed = entry.max_relative_error < options.tolerance;
    report.entries.push_back(std::move(entry));
  }
  zero_grad(params);
  return report;
}

}  // namespace fixattn
