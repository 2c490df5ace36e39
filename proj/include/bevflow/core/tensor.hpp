#pragma once

// Dense row-major tensor with reverse-mode automatic differentiation.
// Ops execute eagerly; when any input is tracked, the op appends a node to
// the implicit tape and the output carries a gradient buffer. backward()
// replays the reachable tape in reverse construction order, which is a
// valid topological order because inputs always exist before outputs.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace bevflow {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ")";
  return os.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("tensor: non-positive dim in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

namespace detail {
inline uint64_t next_seq() {
  static std::atomic<uint64_t> counter{0};
  return ++counter;
}
}  // namespace detail

template <typename T>
struct TapeNode {
  uint64_t seq = 0;
  std::vector<std::shared_ptr<TapeNode<T>>> parents;
  // The op output's gradient buffer, handed to backprop. Lambdas capture
  // data/grad buffers by shared_ptr, never nodes, so the graph holds no
  // reference cycles.
  std::shared_ptr<std::vector<T>> out_grad;
  std::function<void(const std::vector<T>&)> backprop;
};

template <typename T>
class Tensor {
 public:
  using Buffer = std::vector<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), T(0), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    return Tensor(std::move(shape), value, requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), T(1), requires_grad);
  }
  static Tensor from_data(Shape shape, Buffer data, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<Buffer>(std::move(data));
    if (requires_grad) t.set_requires_grad();
    return t;
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  const Shape& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  T* data() { return data_->data(); }
  const T* data() const { return data_->data(); }
  T& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
  T operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
  T item() const {
    if (numel() != 1) throw std::invalid_argument("item: tensor has " + std::to_string(numel()) + " elements");
    return (*data_)[0];
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on = true) {
    requires_grad_ = on;
    if (on && !grad_) grad_ = std::make_shared<Buffer>(data_->size(), T(0));
  }
  bool tracked() const { return requires_grad_ || node_ != nullptr; }

  const Buffer& grad() const {
    if (!grad_) throw std::runtime_error("grad: tensor has no gradient buffer");
    return *grad_;
  }
  T* grad_data() { return grad_ ? grad_->data() : nullptr; }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
  }

  // Same storage viewed under a new shape; gradient flows through unchanged.
  Tensor reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != numel())
      throw std::invalid_argument("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(new_shape));
    Tensor t = *this;
    t.shape_ = std::move(new_shape);
    return t;
  }

  // Value copy with no tape history.
  Tensor detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<Buffer>(*data_);
    return t;
  }

  std::shared_ptr<Buffer> data_handle() const { return data_; }
  std::shared_ptr<Buffer> grad_handle() const { return grad_; }
  std::shared_ptr<TapeNode<T>> node() const { return node_; }

  // Wires an op output into the tape: allocates the grad buffer and records
  // the node with its parents' nodes for traversal.
  void attach_node(std::vector<std::shared_ptr<TapeNode<T>>> parents,
                   std::function<void(const std::vector<T>&)> backprop) {
    if (!grad_) grad_ = std::make_shared<Buffer>(data_->size(), T(0));
    node_ = std::make_shared<TapeNode<T>>();
    node_->seq = detail::next_seq();
    for (auto& p : parents)
      if (p) node_->parents.push_back(std::move(p));
    node_->out_grad = grad_;
    node_->backprop = std::move(backprop);
  }

 private:
  Tensor(Shape shape, T fill, bool requires_grad) {
    int64_t n = shape_numel(shape);
    shape_ = std::move(shape);
    data_ = std::make_shared<Buffer>(static_cast<size_t>(n), fill);
    if (requires_grad) set_requires_grad();
  }

  Shape shape_;
  std::shared_ptr<Buffer> data_;
  std::shared_ptr<Buffer> grad_;
  std::shared_ptr<TapeNode<T>> node_;
  bool requires_grad_ = false;
};

// The portion of the tape reachable from one root, in reverse topological
// order. Each node appears exactly once.
template <typename T>
struct Tape {
  std::vector<TapeNode<T>*> order;

  static Tape from(const std::shared_ptr<TapeNode<T>>& root) {
    Tape tape;
    if (!root) return tape;
    std::vector<TapeNode<T>*> stack{root.get()};
    std::vector<TapeNode<T>*> seen;
    while (!stack.empty()) {
      TapeNode<T>* n = stack.back();
      stack.pop_back();
      if (std::find(seen.begin(), seen.end(), n) != seen.end()) continue;
      seen.push_back(n);
      for (auto& p : n->parents) stack.push_back(p.get());
    }
    tape.order = std::move(seen);
    std::sort(tape.order.begin(), tape.order.end(),
              [](const TapeNode<T>* a, const TapeNode<T>* b) { return a->seq > b->seq; });
    return tape;
  }

  void replay() const {
    for (TapeNode<T>* n : order)
      if (n->backprop) n->backprop(*n->out_grad);
  }
};

// Accumulates d(loss)/d(leaf) into every tracked leaf reachable from loss.
template <typename T>
void backward(Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.node()) {
    std::cerr << "[bevflow] warning: backward on a detached graph; gradients stay zero\n";
    return;
  }
  (*loss.grad_handle())[0] += T(1);
  Tape<T>::from(loss.node()).replay();
}

// ---------------------------------------------------------------------------
// op helpers

namespace detail {

template <typename T>
using GradPtr = std::shared_ptr<std::vector<T>>;

template <typename T>
GradPtr<T> grad_of(const Tensor<T>& t) {
  return t.tracked() ? (t.grad_handle() ? t.grad_handle() : nullptr) : nullptr;
}

// grad buffer of an input that might be tracked but constructed without one
// (leaf with requires_grad handles this in set_requires_grad; intermediates
// always have one).
template <typename T>
GradPtr<T> ensure_grad(Tensor<T>& t) {
  if (!t.tracked()) return nullptr;
  if (!t.grad_handle()) t.set_requires_grad(t.requires_grad());
  return t.grad_handle();
}

template <typename T>
bool any_tracked(std::initializer_list<const Tensor<T>*> ts) {
  for (auto* t : ts)
    if (t->tracked()) return true;
  return false;
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
  if (detail::any_tracked<T>({&a, &b})) {
    auto ga = a.grad_handle(), gb = b.grad_handle();
    if (!a.tracked()) ga = nullptr;
    if (!b.tracked()) gb = nullptr;
    out.attach_node({a.node(), b.node()}, [ga, gb, n](const std::vector<T>& go) {
      for (int64_t i = 0; i < n; ++i) {
        if (ga) (*ga)[i] += go[i];
        if (gb) (*gb)[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
  if (detail::any_tracked<T>({&a, &b})) {
    auto ga = a.tracked() ? a.grad_handle() : nullptr;
    auto gb = b.tracked() ? b.grad_handle() : nullptr;
    out.attach_node({a.node(), b.node()}, [ga, gb, n](const std::vector<T>& go) {
      for (int64_t i = 0; i < n; ++i) {
        if (ga) (*ga)[i] += go[i];
        if (gb) (*gb)[i] -= go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
  if (detail::any_tracked<T>({&a, &b})) {
    auto ga = a.tracked() ? a.grad_handle() : nullptr;
    auto gb = b.tracked() ? b.grad_handle() : nullptr;
    out.attach_node({a.node(), b.node()},
                    [ga, gb, da = a.data_handle(), db = b.data_handle(), n](const std::vector<T>& go) {
                      for (int64_t i = 0; i < n; ++i) {
                        if (ga) (*ga)[i] += go[i] * (*db)[i];
                        if (gb) (*gb)[i] += go[i] * (*da)[i];
                      }
                    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] * c;
  if (a.tracked()) {
    out.attach_node({a.node()}, [ga = a.grad_handle(), c, n](const std::vector<T>& go) {
      for (int64_t i = 0; i < n; ++i) (*ga)[i] += go[i] * c;
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] + c;
  if (a.tracked()) {
    out.attach_node({a.node()}, [ga = a.grad_handle(), n](const std::vector<T>& go) {
      for (int64_t i = 0; i < n; ++i) (*ga)[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
  if (a.tracked()) {
    out.attach_node({a.node()}, [ga = a.grad_handle(), da = a.data_handle(), n](const std::vector<T>& go) {
      for (int64_t i = 0; i < n; ++i)
        if ((*da)[i] > T(0)) (*ga)[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = std::tanh(a[i]);
  if (a.tracked()) {
    out.attach_node({a.node()}, [ga = a.grad_handle(), dout = out.data_handle(), n](const std::vector<T>& go) {
      for (int64_t i = 0; i < n; ++i) {
        const T y = (*dout)[i];
        (*ga)[i] += go[i] * (T(1) - y * y);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = std::fabs(a[i]);
  if (a.tracked()) {
    out.attach_node({a.node()}, [ga = a.grad_handle(), da = a.data_handle(), n](const std::vector<T>& go) {
      for (int64_t i = 0; i < n; ++i) {
        const T x = (*da)[i];
        if (x > T(0)) (*ga)[i] += go[i];
        else if (x < T(0)) (*ga)[i] -= go[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = std::accumulate(a.data(), a.data() + a.numel(), T(0));
  Tensor<T> out = Tensor<T>::scalar(s);
  if (a.tracked()) {
    out.attach_node({a.node()}, [ga = a.grad_handle(), n = a.numel()](const std::vector<T>& go) {
      const T g = go[0];
      for (int64_t i = 0; i < n; ++i) (*ga)[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> sum_rows(const Tensor<T>& a) {
  if (a.rank() != 2) throw std::invalid_argument("sum_rows: expected 2-D, got " + shape_str(a.shape()));
  const int R = a.dim(0), C = a.dim(1);
  Tensor<T> out = Tensor<T>::zeros({1, C});
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out[c] += a[static_cast<int64_t>(r) * C + c];
  if (a.tracked()) {
    out.attach_node({a.node()}, [ga = a.grad_handle(), R, C](const std::vector<T>& go) {
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) (*ga)[static_cast<size_t>(r) * C + c] += go[c];
    });
  }
  return out;
}

// Per-column max over rows; gradient routes to the first argmax row.
template <typename T>
Tensor<T> max_rows(const Tensor<T>& a) {
  if (a.rank() != 2) throw std::invalid_argument("max_rows: expected 2-D, got " + shape_str(a.shape()));
  const int R = a.dim(0), C = a.dim(1);
  Tensor<T> out = Tensor<T>::zeros({1, C});
  auto arg = std::make_shared<std::vector<int>>(C, 0);
  for (int c = 0; c < C; ++c) {
    T best = a[c];
    int bi = 0;
    for (int r = 1; r < R; ++r) {
      const T v = a[static_cast<int64_t>(r) * C + c];
      if (v > best) { best = v; bi = r; }
    }
    out[c] = best;
    (*arg)[c] = bi;
  }
  if (a.tracked()) {
    out.attach_node({a.node()}, [ga = a.grad_handle(), arg, C](const std::vector<T>& go) {
      for (int c = 0; c < C; ++c) (*ga)[static_cast<size_t>((*arg)[c]) * C + c] += go[c];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matrix ops

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: expected 2-D operands, got " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: inner dims differ, " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor<T> out = Tensor<T>::zeros({M, N});
  detail::ConstMatMap<T> ma(a.data(), M, K), mb(b.data(), K, N);
  detail::MatMap<T> mo(out.data(), M, N);
  mo.noalias() = ma * mb;
  if (detail::any_tracked<T>({&a, &b})) {
    auto ga = a.tracked() ? a.grad_handle() : nullptr;
    auto gb = b.tracked() ? b.grad_handle() : nullptr;
    out.attach_node({a.node(), b.node()},
                    [ga, gb, da = a.data_handle(), db = b.data_handle(), M, K, N](const std::vector<T>& go) {
                      detail::ConstMatMap<T> mgo(go.data(), M, N);
                      if (ga) {
                        detail::ConstMatMap<T> mdb(db->data(), K, N);
                        detail::MatMap<T> mga(ga->data(), M, K);
                        mga.noalias() += mgo * mdb.transpose();
                      }
                      if (gb) {
                        detail::ConstMatMap<T> mda(da->data(), M, K);
                        detail::MatMap<T> mgb(gb->data(), K, N);
                        mgb.noalias() += mda.transpose() * mgo;
                      }
                    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: expected 2-D, got " + shape_str(a.shape()));
  const int R = a.dim(0), C = a.dim(1);
  Tensor<T> out = Tensor<T>::zeros({C, R});
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out[static_cast<int64_t>(c) * R + r] = a[static_cast<int64_t>(r) * C + c];
  if (a.tracked()) {
    out.attach_node({a.node()}, [ga = a.grad_handle(), R, C](const std::vector<T>& go) {
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c)
          (*ga)[static_cast<size_t>(r) * C + c] += go[static_cast<size_t>(c) * R + r];
    });
  }
  return out;
}

// bias add: every row of a gets b
template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.numel() != a.dim(1))
    throw std::invalid_argument("add_row: need 2-D a and b of length cols, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  const int R = a.dim(0), C = a.dim(1);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out[static_cast<int64_t>(r) * C + c] = a[static_cast<int64_t>(r) * C + c] + b[c];
  if (detail::any_tracked<T>({&a, &b})) {
    auto ga = a.tracked() ? a.grad_handle() : nullptr;
    auto gb = b.tracked() ? b.grad_handle() : nullptr;
    out.attach_node({a.node(), b.node()}, [ga, gb, R, C](const std::vector<T>& go) {
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) {
          const T g = go[static_cast<size_t>(r) * C + c];
          if (ga) (*ga)[static_cast<size_t>(r) * C + c] += g;
          if (gb) (*gb)[c] += g;
        }
    });
  }
  return out;
}

// per-column scaling: every row of a is multiplied elementwise by g
template <typename T>
Tensor<T> mul_row(const Tensor<T>& a, const Tensor<T>& g) {
  if (a.rank() != 2 || g.numel() != a.dim(1))
    throw std::invalid_argument("mul_row: need 2-D a and g of length cols, got " + shape_str(a.shape()) +
                                " and " + shape_str(g.shape()));
  const int R = a.dim(0), C = a.dim(1);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out[static_cast<int64_t>(r) * C + c] = a[static_cast<int64_t>(r) * C + c] * g[c];
  if (detail::any_tracked<T>({&a, &g})) {
    auto ga = a.tracked() ? a.grad_handle() : nullptr;
    auto gg = g.tracked() ? g.grad_handle() : nullptr;
    out.attach_node({a.node(), g.node()},
                    [ga, gg, da = a.data_handle(), dg = g.data_handle(), R, C](const std::vector<T>& go) {
                      for (int r = 0; r < R; ++r)
                        for (int c = 0; c < C; ++c) {
                          const size_t i = static_cast<size_t>(r) * C + c;
                          if (ga) (*ga)[i] += go[i] * (*dg)[c];
                          if (gg) (*gg)[c] += go[i] * (*da)[i];
                        }
                    });
  }
  return out;
}

// row i of a scaled by w[i]
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& a, const Tensor<T>& w) {
  if (a.rank() != 2 || w.numel() != a.dim(0))
    throw std::invalid_argument("scale_rows: need 2-D a and w of length rows, got " + shape_str(a.shape()) +
                                " and " + shape_str(w.shape()));
  const int R = a.dim(0), C = a.dim(1);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out[static_cast<int64_t>(r) * C + c] = a[static_cast<int64_t>(r) * C + c] * w[r];
  if (detail::any_tracked<T>({&a, &w})) {
    auto ga = a.tracked() ? a.grad_handle() : nullptr;
    auto gw = w.tracked() ? w.grad_handle() : nullptr;
    out.attach_node({a.node(), w.node()},
                    [ga, gw, da = a.data_handle(), dw = w.data_handle(), R, C](const std::vector<T>& go) {
                      for (int r = 0; r < R; ++r) {
                        T acc = T(0);
                        for (int c = 0; c < C; ++c) {
                          const size_t i = static_cast<size_t>(r) * C + c;
                          if (ga) (*ga)[i] += go[i] * (*dw)[r];
                          acc += go[i] * (*da)[i];
                        }
                        if (gw) (*gw)[r] += acc;
                      }
                    });
  }
  return out;
}

// sums each consecutive group of `group` rows
template <typename T>
Tensor<T> group_sum_rows(const Tensor<T>& a, int group) {
  if (a.rank() != 2 || group < 1 || a.dim(0) % group != 0)
    throw std::invalid_argument("group_sum_rows: rows " + std::to_string(a.rank() == 2 ? a.dim(0) : -1) +
                                " not divisible by group " + std::to_string(group));
  const int R = a.dim(0), C = a.dim(1), G = R / group;
  Tensor<T> out = Tensor<T>::zeros({G, C});
  for (int r = 0; r < R; ++r) {
    const int g = r / group;
    for (int c = 0; c < C; ++c) out[static_cast<int64_t>(g) * C + c] += a[static_cast<int64_t>(r) * C + c];
  }
  if (a.tracked()) {
    out.attach_node({a.node()}, [ga = a.grad_handle(), R, C, group](const std::vector<T>& go) {
      for (int r = 0; r < R; ++r) {
        const int g = r / group;
        for (int c = 0; c < C; ++c)
          (*ga)[static_cast<size_t>(r) * C + c] += go[static_cast<size_t>(g) * C + c];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape surgery

template <typename T>
Tensor<T> slice_lastdim(const Tensor<T>& a, int offset, int len) {
  if (a.rank() < 1) throw std::invalid_argument("slice_lastdim: scalar input");
  const int L = a.shape().back();
  if (offset < 0 || len <= 0 || offset + len > L)
    throw std::invalid_argument("slice_lastdim: [" + std::to_string(offset) + "," +
                                std::to_string(offset + len) + ") out of last dim " + std::to_string(L));
  Shape os = a.shape();
  os.back() = len;
  const int64_t outer = a.numel() / L;
  Tensor<T> out = Tensor<T>::zeros(os);
  for (int64_t o = 0; o < outer; ++o)
    for (int i = 0; i < len; ++i) out[o * len + i] = a[o * L + offset + i];
  if (a.tracked()) {
    out.attach_node({a.node()}, [ga = a.grad_handle(), outer, L, offset, len](const std::vector<T>& go) {
      for (int64_t o = 0; o < outer; ++o)
        for (int i = 0; i < len; ++i)
          (*ga)[static_cast<size_t>(o * L + offset + i)] += go[static_cast<size_t>(o * len + i)];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_lastdim(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_lastdim: empty input list");
  Shape base = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<int>(base.size()))
      throw std::invalid_argument("concat_lastdim: rank mismatch");
    for (size_t i = 0; i + 1 < base.size(); ++i)
      if (p.shape()[i] != base[i]) throw std::invalid_argument("concat_lastdim: leading dims differ");
    total += p.shape().back();
  }
  Shape os = base;
  os.back() = total;
  const int64_t outer = parts[0].numel() / base.back();
  Tensor<T> out = Tensor<T>::zeros(os);
  bool tracked = false;
  int off = 0;
  for (const auto& p : parts) {
    const int L = p.shape().back();
    for (int64_t o = 0; o < outer; ++o)
      for (int i = 0; i < L; ++i) out[o * total + off + i] = p[o * L + i];
    off += L;
    tracked = tracked || p.tracked();
  }
  if (tracked) {
    std::vector<std::shared_ptr<TapeNode<T>>> nodes;
    struct Piece {
      detail::GradPtr<T> g;
      int off, len;
    };
    auto pieces = std::make_shared<std::vector<Piece>>();
    off = 0;
    for (const auto& p : parts) {
      nodes.push_back(p.node());
      pieces->push_back({p.tracked() ? p.grad_handle() : nullptr, off, p.shape().back()});
      off += p.shape().back();
    }
    out.attach_node(std::move(nodes), [pieces, outer, total](const std::vector<T>& go) {
      for (const auto& pc : *pieces) {
        if (!pc.g) continue;
        for (int64_t o = 0; o < outer; ++o)
          for (int i = 0; i < pc.len; ++i)
            (*pc.g)[static_cast<size_t>(o * pc.len + i)] += go[static_cast<size_t>(o * total + pc.off + i)];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input list");
  const int C = parts[0].rank() == 2 ? parts[0].dim(1) : -1;
  int R = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != C) throw std::invalid_argument("concat_rows: need 2-D parts with equal cols");
    R += p.dim(0);
  }
  Tensor<T> out = Tensor<T>::zeros({R, C});
  bool tracked = false;
  int64_t pos = 0;
  for (const auto& p : parts) {
    std::copy(p.data(), p.data() + p.numel(), out.data() + pos);
    pos += p.numel();
    tracked = tracked || p.tracked();
  }
  if (tracked) {
    std::vector<std::shared_ptr<TapeNode<T>>> nodes;
    struct Piece {
      detail::GradPtr<T> g;
      int64_t off, n;
    };
    auto pieces = std::make_shared<std::vector<Piece>>();
    pos = 0;
    for (const auto& p : parts) {
      nodes.push_back(p.node());
      pieces->push_back({p.tracked() ? p.grad_handle() : nullptr, pos, p.numel()});
      pos += p.numel();
    }
    out.attach_node(std::move(nodes), [pieces](const std::vector<T>& go) {
      for (const auto& pc : *pieces) {
        if (!pc.g) continue;
        for (int64_t i = 0; i < pc.n; ++i) (*pc.g)[static_cast<size_t>(i)] += go[static_cast<size_t>(pc.off + i)];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<int64_t>& idx) {
  if (a.rank() != 2) throw std::invalid_argument("gather_rows: expected 2-D, got " + shape_str(a.shape()));
  const int R = a.dim(0), C = a.dim(1);
  for (int64_t i : idx)
    if (i < 0 || i >= R)
      throw std::invalid_argument("gather_rows: index " + std::to_string(i) + " out of " + std::to_string(R));
  Tensor<T> out = Tensor<T>::zeros({static_cast<int>(idx.size()), C});
  for (size_t k = 0; k < idx.size(); ++k)
    std::copy(a.data() + idx[k] * C, a.data() + (idx[k] + 1) * C, out.data() + static_cast<int64_t>(k) * C);
  if (a.tracked()) {
    auto ix = std::make_shared<std::vector<int64_t>>(idx);
    out.attach_node({a.node()}, [ga = a.grad_handle(), ix, C](const std::vector<T>& go) {
      for (size_t k = 0; k < ix->size(); ++k)
        for (int c = 0; c < C; ++c)
          (*ga)[static_cast<size_t>((*ix)[k] * C + c)] += go[k * static_cast<size_t>(C) + c];
    });
  }
  return out;
}

// out = base, then out[idx[k]] += src[k] rowwise
template <typename T>
Tensor<T> index_add_rows(const Tensor<T>& base, const Tensor<T>& src, const std::vector<int64_t>& idx) {
  if (base.rank() != 2 || src.rank() != 2 || base.dim(1) != src.dim(1) ||
      src.dim(0) != static_cast<int>(idx.size()))
    throw std::invalid_argument("index_add_rows: bad shapes " + shape_str(base.shape()) + " / " +
                                shape_str(src.shape()) + " with " + std::to_string(idx.size()) + " indices");
  const int R = base.dim(0), C = base.dim(1);
  for (int64_t i : idx)
    if (i < 0 || i >= R)
      throw std::invalid_argument("index_add_rows: index " + std::to_string(i) + " out of " + std::to_string(R));
  Tensor<T> out = base.detached();
  for (size_t k = 0; k < idx.size(); ++k)
    for (int c = 0; c < C; ++c) out[idx[k] * C + c] += src[static_cast<int64_t>(k) * C + c];
  if (detail::any_tracked<T>({&base, &src})) {
    auto gb = base.tracked() ? base.grad_handle() : nullptr;
    auto gs = src.tracked() ? src.grad_handle() : nullptr;
    auto ix = std::make_shared<std::vector<int64_t>>(idx);
    out.attach_node({base.node(), src.node()}, [gb, gs, ix, C, n = base.numel()](const std::vector<T>& go) {
      if (gb)
        for (int64_t i = 0; i < n; ++i) (*gb)[static_cast<size_t>(i)] += go[static_cast<size_t>(i)];
      if (gs)
        for (size_t k = 0; k < ix->size(); ++k)
          for (int c = 0; c < C; ++c)
            (*gs)[k * static_cast<size_t>(C) + c] += go[static_cast<size_t>((*ix)[k] * C + c)];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization

// softmax over the last dim, numerically shifted by the row max
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
  if (a.rank() < 1) throw std::invalid_argument("softmax_lastdim: scalar input");
  const int L = a.shape().back();
  const int64_t outer = a.numel() / L;
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (int64_t o = 0; o < outer; ++o) {
    const T* row = a.data() + o * L;
    T mx = row[0];
    for (int i = 1; i < L; ++i) mx = std::max(mx, row[i]);
    T z = T(0);
    for (int i = 0; i < L; ++i) {
      const T e = std::exp(row[i] - mx);
      out[o * L + i] = e;
      z += e;
    }
    for (int i = 0; i < L; ++i) out[o * L + i] /= z;
  }
  if (a.tracked()) {
    out.attach_node({a.node()}, [ga = a.grad_handle(), dy = out.data_handle(), outer, L](const std::vector<T>& go) {
      for (int64_t o = 0; o < outer; ++o) {
        const size_t base = static_cast<size_t>(o * L);
        T dot = T(0);
        for (int i = 0; i < L; ++i) dot += go[base + i] * (*dy)[base + i];
        for (int i = 0; i < L; ++i) (*ga)[base + i] += (*dy)[base + i] * (go[base + i] - dot);
      }
    });
  }
  return out;
}

// layernorm over the last dim, pre-affine; zero-variance rows map to zeros
template <typename T>
Tensor<T> layernorm_lastdim(const Tensor<T>& a, T eps = T(1e-5)) {
  if (a.rank() < 1) throw std::invalid_argument("layernorm_lastdim: scalar input");
  const int L = a.shape().back();
  const int64_t outer = a.numel() / L;
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto mu = std::make_shared<std::vector<T>>(outer);
  auto rstd = std::make_shared<std::vector<T>>(outer);
  for (int64_t o = 0; o < outer; ++o) {
    const T* row = a.data() + o * L;
    T m = T(0);
    for (int i = 0; i < L; ++i) m += row[i];
    m /= static_cast<T>(L);
    T v = T(0);
    for (int i = 0; i < L; ++i) v += (row[i] - m) * (row[i] - m);
    v /= static_cast<T>(L);
    const T rs = T(1) / std::sqrt(v + eps);
    (*mu)[o] = m;
    (*rstd)[o] = rs;
    for (int i = 0; i < L; ++i) out[o * L + i] = (row[i] - m) * rs;
  }
  if (a.tracked()) {
    out.attach_node({a.node()},
                    [ga = a.grad_handle(), dy = out.data_handle(), mu, rstd, outer, L](const std::vector<T>& go) {
                      for (int64_t o = 0; o < outer; ++o) {
                        const size_t base = static_cast<size_t>(o * L);
                        const T rs = (*rstd)[o];
                        T gsum = T(0), gdot = T(0);
                        for (int i = 0; i < L; ++i) {
                          gsum += go[base + i];
                          gdot += go[base + i] * (*dy)[base + i];
                        }
                        const T invL = T(1) / static_cast<T>(L);
                        for (int i = 0; i < L; ++i) {
                          const T y = (*dy)[base + i];
                          (*ga)[base + i] += rs * (go[base + i] - invL * gsum - y * invL * gdot);
                        }
                      }
                    });
  }
  return out;
}

// mean cross-entropy of integer targets against logits rows
template <typename T>
Tensor<T> cross_entropy_rows(const Tensor<T>& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<int>(targets.size()))
    throw std::invalid_argument("cross_entropy_rows: logits " + shape_str(logits.shape()) + " vs " +
                                std::to_string(targets.size()) + " targets");
  const int R = logits.dim(0), C = logits.dim(1);
  for (int t : targets)
    if (t < 0 || t >= C) throw std::invalid_argument("cross_entropy_rows: target class out of range");
  auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(R) * C);
  T loss = T(0);
  for (int r = 0; r < R; ++r) {
    const T* row = logits.data() + static_cast<int64_t>(r) * C;
    T mx = row[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    T z = T(0);
    for (int c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    const T logz = std::log(z) + mx;
    loss += logz - row[targets[static_cast<size_t>(r)]];
    for (int c = 0; c < C; ++c) (*probs)[static_cast<size_t>(r) * C + c] = std::exp(row[c] - logz);
  }
  loss /= static_cast<T>(R);
  Tensor<T> out = Tensor<T>::scalar(loss);
  if (logits.tracked()) {
    auto tg = std::make_shared<std::vector<int>>(targets);
    out.attach_node({logits.node()}, [ga = logits.grad_handle(), probs, tg, R, C](const std::vector<T>& go) {
      const T g = go[0] / static_cast<T>(R);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) {
          T p = (*probs)[static_cast<size_t>(r) * C + c];
          if (c == (*tg)[static_cast<size_t>(r)]) p -= T(1);
          (*ga)[static_cast<size_t>(r) * C + c] += g * p;
        }
    });
  }
  return out;
}

}  // namespace bevflow
