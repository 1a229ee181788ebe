#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <vector>

#include "attnseries/common.hpp"
#include "attnseries/rng.hpp"

namespace ats {

namespace detail {

// Row-major GEMM kernels. The saxpy loop order keeps the innermost loop
// contiguous over both C and B so the compiler can vectorize it.

// C[m x n] (+)= A[m x k] * B[k x n]
inline void gemm(int m, int k, int n, const double* A, const double* B,
                 double* C, bool accumulate) {
  if (!accumulate) std::fill(C, C + static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    const double* arow = A + static_cast<size_t>(i) * k;
    double* crow = C + static_cast<size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const double a = arow[l];
      if (a == 0.0) continue;
      const double* brow = B + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

// C[m x n] (+)= A[m x k] * B^T with B stored [n x k]
inline void gemm_nt(int m, int k, int n, const double* A, const double* Bt,
                    double* C, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const double* arow = A + static_cast<size_t>(i) * k;
    double* crow = C + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = Bt + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int l = 0; l < k; ++l) acc += arow[l] * brow[l];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

// C[m x n] (+)= A^T * B with A stored [k x m]
inline void gemm_tn(int m, int k, int n, const double* At, const double* B,
                    double* C, bool accumulate) {
  if (!accumulate) std::fill(C, C + static_cast<size_t>(m) * n, 0.0);
  for (int l = 0; l < k; ++l) {
    const double* arow = At + static_cast<size_t>(l) * m;
    const double* brow = B + static_cast<size_t>(l) * n;
    for (int i = 0; i < m; ++i) {
      const double a = arow[i];
      if (a == 0.0) continue;
      double* crow = C + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

}  // namespace detail

struct TensorNode {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // lazily allocated, same length as value
  bool requires_grad = false;
  int64_t tape_id = -1;  // tape this node last participated in
  int32_t node_id = -1;  // position on that tape

  size_t size() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tape;
Tape* active_tape();

// Value-semantics handle over a shared numeric buffer. Copying a Tensor
// aliases the underlying storage; clone() makes an independent copy.
class Tensor {
 public:
  Tensor() : node_(std::make_shared<TensorNode>()) {}

  Tensor(std::vector<int> shape, std::vector<double> data)
      : node_(std::make_shared<TensorNode>()) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    if (n != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(data);
  }

  static Tensor zeros(std::vector<int> shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }

  static Tensor full(std::vector<int> shape, double v) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor uniform(std::vector<int> shape, double lo, double hi, Rng& rng) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    std::vector<double> data(n);
    for (auto& x : data) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(data));
  }

  const std::vector<int>& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  size_t size() const { return node_->value.size(); }

  const std::vector<double>& values() const { return node_->value; }
  std::vector<double>& values() { return node_->value; }
  const double* data() const { return node_->value.data(); }
  double* data() { return node_->value.data(); }

  double at(int i) const { return node_->value[static_cast<size_t>(i)]; }
  double at(int i, int j) const {
    return node_->value[static_cast<size_t>(i) * dim(1) + j];
  }
  double at(int i, int j, int k) const {
    return node_->value[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
  }
  double& at(int i) { return node_->value[static_cast<size_t>(i)]; }
  double& at(int i, int j) {
    return node_->value[static_cast<size_t>(i) * dim(1) + j];
  }
  double& at(int i, int j, int k) {
    return node_->value[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  const std::vector<double>& grad() const { return node_->grad; }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  Tensor clone() const {
    Tensor t(node_->shape, node_->value);
    return t;
  }

  // drops any autodiff participation; shares no graph history
  Tensor detached() const {
    Tensor t = clone();
    t.node_->requires_grad = false;
    return t;
  }

  const std::shared_ptr<TensorNode>& node() const { return node_; }

  bool participates_in(int64_t tape_id) const { return node_->tape_id == tape_id; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Single-use reverse-mode tape. Operations append their backward rules in
// execution order, which is already topological; backward() replays them in
// reverse exactly once and then consumes the tape.
class Tape {
 public:
  Tape() : id_(next_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int64_t id() const { return id_; }
  size_t node_count() const { return ops_.size(); }
  bool consumed() const { return consumed_; }

  void record(std::function<void()> backward_rule) {
    ops_.push_back(std::move(backward_rule));
  }

  void note(const Tensor& t) {
    auto& n = *t.node();
    if (n.tape_id != id_) {
      n.tape_id = id_;
      n.node_id = static_cast<int32_t>(next_node_++);
    }
  }

  void backward(const Tensor& loss) {
    if (consumed_) throw ContractError("tape already consumed by backward");
    if (loss.size() != 1)
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_str(loss.shape()));
    if (!loss.participates_in(id_))
      throw ContractError("loss tensor is not on this tape");
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
    consumed_ = true;
  }

 private:
  static int64_t next_id() {
    static int64_t counter = 0;
    return ++counter;
  }

  int64_t id_;
  size_t next_node_ = 0;
  std::vector<std::function<void()>> ops_;
  bool consumed_ = false;
};

namespace detail {
inline Tape*& active_tape_slot() {
  thread_local Tape* slot = nullptr;
  return slot;
}
}  // namespace detail

inline Tape* active_tape() { return detail::active_tape_slot(); }

// RAII activation of a tape for the current thread.
struct TapeScope {
  explicit TapeScope(Tape& t) : prev_(detail::active_tape_slot()) {
    detail::active_tape_slot() = &t;
  }
  ~TapeScope() { detail::active_tape_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

inline void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

namespace detail {

// Returns the active tape iff any input wants gradients; marks the output as
// a graph participant. Ops call this once and record a closure when non-null.
inline Tape* tape_for(std::initializer_list<const Tensor*> inputs, Tensor& out) {
  Tape* t = active_tape();
  if (!t) return nullptr;
  bool any = false;
  for (const Tensor* in : inputs)
    if (in->requires_grad()) {
      any = true;
      break;
    }
  if (!any) return nullptr;
  for (const Tensor* in : inputs) t->note(*in);
  out.set_requires_grad(true);
  t->note(out);
  return t;
}

inline bool grad_ready(const std::shared_ptr<TensorNode>& n) {
  // an output whose gradient was never written feeds zeros downstream
  return n->grad.size() == n->value.size();
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] + b.values()[i];
  if (Tape* t = detail::tape_for({&a, &b}, out)) {
    t->record([an = a.node(), bn = b.node(), on = out.node()] {
      if (!detail::grad_ready(on)) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] - b.values()[i];
  if (Tape* t = detail::tape_for({&a, &b}, out)) {
    t->record([an = a.node(), bn = b.node(), on = out.node()] {
      if (!detail::grad_ready(on)) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * b.values()[i];
  if (Tape* t = detail::tape_for({&a, &b}, out)) {
    t->record([an = a.node(), bn = b.node(), on = out.node()] {
      if (!detail::grad_ready(on)) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += on->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i)
          bn->grad[i] += on->grad[i] * an->value[i];
      }
    });
  }
  return out;
}

inline Tensor mul_scalar(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] * s;
  if (Tape* t = detail::tape_for({&a}, out)) {
    t->record([an = a.node(), on = out.node(), s] {
      if (!detail::grad_ready(on)) return;
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * s;
    });
  }
  return out;
}

inline Tensor add_scalar(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] + s;
  if (Tape* t = detail::tape_for({&a}, out)) {
    t->record([an = a.node(), on = out.node()] {
      if (!detail::grad_ready(on)) return;
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

// broadcast a vector over the last axis: out[..., j] = a[..., j] + v[j]
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  if (v.ndim() != 1 || a.ndim() < 1 || a.dim(a.ndim() - 1) != v.dim(0))
    throw DimensionError("add_rowvec: " + shape_str(a.shape()) + " + " +
                         shape_str(v.shape()));
  Tensor out = Tensor::zeros(a.shape());
  const int d = v.dim(0);
  const size_t rows = a.size() / static_cast<size_t>(d);
  for (size_t r = 0; r < rows; ++r)
    for (int j = 0; j < d; ++j)
      out.values()[r * d + j] = a.values()[r * d + j] + v.values()[j];
  if (Tape* t = detail::tape_for({&a, &v}, out)) {
    t->record([an = a.node(), vn = v.node(), on = out.node(), d, rows] {
      if (!detail::grad_ready(on)) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (vn->requires_grad) {
        vn->ensure_grad();
        for (size_t r = 0; r < rows; ++r)
          for (int j = 0; j < d; ++j) vn->grad[j] += on->grad[r * d + j];
      }
    });
  }
  return out;
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

// broadcast a [T x D] matrix over the batch axis: out[n,t,j] = a[n,t,j] + m[t,j]
inline Tensor add_mat_bcast(const Tensor& a, const Tensor& m) {
  if (a.ndim() != 3 || m.ndim() != 2 || a.dim(1) != m.dim(0) ||
      a.dim(2) != m.dim(1))
    throw DimensionError("add_mat_bcast: " + shape_str(a.shape()) + " + " +
                         shape_str(m.shape()));
  Tensor out = Tensor::zeros(a.shape());
  const size_t block = m.size();
  for (int b = 0; b < a.dim(0); ++b)
    for (size_t i = 0; i < block; ++i)
      out.values()[b * block + i] = a.values()[b * block + i] + m.values()[i];
  if (Tape* t = detail::tape_for({&a, &m}, out)) {
    t->record([an = a.node(), mn = m.node(), on = out.node(), block] {
      if (!detail::grad_ready(on)) return;
      const size_t nb = on->value.size() / block;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (mn->requires_grad) {
        mn->ensure_grad();
        for (size_t b = 0; b < nb; ++b)
          for (size_t i = 0; i < block; ++i)
            mn->grad[i] += on->grad[b * block + i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matrix products

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  detail::gemm(m, k, n, a.data(), b.data(), out.data(), false);
  if (Tape* t = detail::tape_for({&a, &b}, out)) {
    t->record([an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
      if (!detail::grad_ready(on)) return;
      if (an->requires_grad) {
        an->ensure_grad();
        // dA = dC * B^T
        detail::gemm_nt(m, n, k, on->grad.data(), bn->value.data(),
                        an->grad.data(), true);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        // dB = A^T * dC
        detail::gemm_tn(k, m, n, an->value.data(), on->grad.data(),
                        bn->grad.data(), true);
      }
    });
  }
  return out;
}

// apply a shared [k x n] weight to the last axis of a 3-d tensor
inline Tensor matmul3(const Tensor& a, const Tensor& w) {
  if (a.ndim() != 3 || w.ndim() != 2 || a.dim(2) != w.dim(0))
    throw DimensionError("matmul3: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(w.shape()));
  const int n0 = a.dim(0), m = a.dim(1), k = a.dim(2), n = w.dim(1);
  Tensor out = Tensor::zeros({n0, m, n});
  detail::gemm(n0 * m, k, n, a.data(), w.data(), out.data(), false);
  if (Tape* t = detail::tape_for({&a, &w}, out)) {
    t->record([an = a.node(), wn = w.node(), on = out.node(), n0, m, k, n] {
      if (!detail::grad_ready(on)) return;
      if (an->requires_grad) {
        an->ensure_grad();
        detail::gemm_nt(n0 * m, n, k, on->grad.data(), wn->value.data(),
                        an->grad.data(), true);
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        detail::gemm_tn(k, n0 * m, n, an->value.data(), on->grad.data(),
                        wn->grad.data(), true);
      }
    });
  }
  return out;
}

// batched matmul: out[b] = A[b] * B[b]
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(1))
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  const int nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor out = Tensor::zeros({nb, m, n});
  for (int i = 0; i < nb; ++i)
    detail::gemm(m, k, n, a.data() + static_cast<size_t>(i) * m * k,
                 b.data() + static_cast<size_t>(i) * k * n,
                 out.data() + static_cast<size_t>(i) * m * n, false);
  if (Tape* t = detail::tape_for({&a, &b}, out)) {
    t->record([an = a.node(), bn = b.node(), on = out.node(), nb, m, k, n] {
      if (!detail::grad_ready(on)) return;
      for (int i = 0; i < nb; ++i) {
        const double* dC = on->grad.data() + static_cast<size_t>(i) * m * n;
        if (an->requires_grad) {
          an->ensure_grad();
          detail::gemm_nt(m, n, k, dC,
                          bn->value.data() + static_cast<size_t>(i) * k * n,
                          an->grad.data() + static_cast<size_t>(i) * m * k, true);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          detail::gemm_tn(k, m, n,
                          an->value.data() + static_cast<size_t>(i) * m * k, dC,
                          bn->grad.data() + static_cast<size_t>(i) * k * n, true);
        }
      }
    });
  }
  return out;
}

// batched matmul against a transposed right factor: out[b] = A[b] * B[b]^T
inline Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(2))
    throw DimensionError("bmm_nt: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  const int nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  Tensor out = Tensor::zeros({nb, m, n});
  for (int i = 0; i < nb; ++i)
    detail::gemm_nt(m, k, n, a.data() + static_cast<size_t>(i) * m * k,
                    b.data() + static_cast<size_t>(i) * n * k,
                    out.data() + static_cast<size_t>(i) * m * n, false);
  if (Tape* t = detail::tape_for({&a, &b}, out)) {
    t->record([an = a.node(), bn = b.node(), on = out.node(), nb, m, k, n] {
      if (!detail::grad_ready(on)) return;
      for (int i = 0; i < nb; ++i) {
        const double* dC = on->grad.data() + static_cast<size_t>(i) * m * n;
        if (an->requires_grad) {
          an->ensure_grad();
          // dA = dC * B
          detail::gemm(m, n, k, dC,
                       bn->value.data() + static_cast<size_t>(i) * n * k,
                       an->grad.data() + static_cast<size_t>(i) * m * k, true);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          // dB = dC^T * A
          detail::gemm_tn(n, m, k, dC,
                          an->value.data() + static_cast<size_t>(i) * m * k,
                          bn->grad.data() + static_cast<size_t>(i) * n * k, true);
        }
      }
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2)
    throw DimensionError("transpose expects a matrix, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  if (Tape* t = detail::tape_for({&a}, out)) {
    t->record([an = a.node(), on = out.node(), m, n] {
      if (!detail::grad_ready(on)) return;
      an->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          an->grad[static_cast<size_t>(i) * n + j] +=
              on->grad[static_cast<size_t>(j) * m + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// activations and normalizers

enum class Act { Identity, Tanh, Sigmoid, Relu, Tan };

inline const char* act_name(Act a) {
  switch (a) {
    case Act::Identity: return "identity";
    case Act::Tanh: return "tanh";
    case Act::Sigmoid: return "sigmoid";
    case Act::Relu: return "relu";
    case Act::Tan: return "tan";
  }
  return "?";
}

inline Act act_from_name(const std::string& s) {
  if (s == "identity") return Act::Identity;
  if (s == "tanh") return Act::Tanh;
  if (s == "sigmoid") return Act::Sigmoid;
  if (s == "relu") return Act::Relu;
  if (s == "tan") return Act::Tan;
  throw ConfigError("unknown activation '" + s + "'");
}

inline Tensor activation(const Tensor& x, Act kind) {
  if (kind == Act::Identity) return x;
  Tensor out = Tensor::zeros(x.shape());
  const size_t n = x.size();
  switch (kind) {
    case Act::Tanh:
      for (size_t i = 0; i < n; ++i) out.values()[i] = std::tanh(x.values()[i]);
      break;
    case Act::Sigmoid:
      for (size_t i = 0; i < n; ++i)
        out.values()[i] = 1.0 / (1.0 + std::exp(-x.values()[i]));
      break;
    case Act::Relu:
      for (size_t i = 0; i < n; ++i)
        out.values()[i] = x.values()[i] > 0.0 ? x.values()[i] : 0.0;
      break;
    case Act::Tan:
      for (size_t i = 0; i < n; ++i) out.values()[i] = std::tan(x.values()[i]);
      break;
    case Act::Identity:
      break;
  }
  if (Tape* t = detail::tape_for({&x}, out)) {
    t->record([xn = x.node(), on = out.node(), kind] {
      if (!detail::grad_ready(on)) return;
      xn->ensure_grad();
      const size_t n = on->grad.size();
      switch (kind) {
        case Act::Tanh:
          for (size_t i = 0; i < n; ++i)
            xn->grad[i] += on->grad[i] * (1.0 - on->value[i] * on->value[i]);
          break;
        case Act::Sigmoid:
          for (size_t i = 0; i < n; ++i)
            xn->grad[i] += on->grad[i] * on->value[i] * (1.0 - on->value[i]);
          break;
        case Act::Relu:
          for (size_t i = 0; i < n; ++i)
            if (xn->value[i] > 0.0) xn->grad[i] += on->grad[i];
          break;
        case Act::Tan:
          for (size_t i = 0; i < n; ++i)
            xn->grad[i] += on->grad[i] * (1.0 + on->value[i] * on->value[i]);
          break;
        case Act::Identity:
          break;
      }
    });
  }
  return out;
}

inline Tensor relu(const Tensor& x) { return activation(x, Act::Relu); }
inline Tensor tanh_t(const Tensor& x) { return activation(x, Act::Tanh); }
inline Tensor sigmoid(const Tensor& x) { return activation(x, Act::Sigmoid); }

// softmax along `axis`; shifted by the slice max so large logits stay finite
inline Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.ndim())
    throw DimensionError("softmax: axis " + std::to_string(axis) +
                         " out of range for " + shape_str(x.shape()));
  const auto& shape = x.shape();
  const int d = shape[static_cast<size_t>(axis)];
  size_t inner = 1, outer = 1;
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= static_cast<size_t>(shape[i]);
  for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(shape[i]);
  Tensor out = Tensor::zeros(x.shape());
  for (size_t o = 0; o < outer; ++o) {
    for (size_t in = 0; in < inner; ++in) {
      const size_t base = o * d * inner + in;
      double mx = -INFINITY;
      for (int j = 0; j < d; ++j) mx = std::max(mx, x.values()[base + j * inner]);
      double sum = 0.0;
      for (int j = 0; j < d; ++j) {
        const double e = std::exp(x.values()[base + j * inner] - mx);
        out.values()[base + j * inner] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (int j = 0; j < d; ++j) out.values()[base + j * inner] *= inv;
    }
  }
  if (Tape* t = detail::tape_for({&x}, out)) {
    t->record([xn = x.node(), on = out.node(), d, inner, outer] {
      if (!detail::grad_ready(on)) return;
      xn->ensure_grad();
      for (size_t o = 0; o < outer; ++o) {
        for (size_t in = 0; in < inner; ++in) {
          const size_t base = o * d * inner + in;
          double dot = 0.0;
          for (int j = 0; j < d; ++j)
            dot += on->grad[base + j * inner] * on->value[base + j * inner];
          for (int j = 0; j < d; ++j)
            xn->grad[base + j * inner] +=
                on->value[base + j * inner] * (on->grad[base + j * inner] - dot);
        }
      }
    });
  }
  return out;
}

// standardize the last axis, then scale/shift: y = (x - mean)/sqrt(var + eps) * gain + bias
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps) {
  if (eps < 0.0) throw ConfigError("layer_norm: eps must be >= 0");
  const int d = x.dim(x.ndim() - 1);
  if (gain.ndim() != 1 || bias.ndim() != 1 || gain.dim(0) != d || bias.dim(0) != d)
    throw DimensionError("layer_norm: gain/bias must be length-" + std::to_string(d) +
                         " vectors");
  const size_t rows = x.size() / static_cast<size_t>(d);
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> inv_std(rows), mean(rows);
  for (size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double m = 0.0;
    for (int j = 0; j < d; ++j) m += xr[j];
    m /= d;
    double v = 0.0;
    for (int j = 0; j < d; ++j) v += (xr[j] - m) * (xr[j] - m);
    v /= d;
    const double is = 1.0 / std::sqrt(v + eps);
    mean[r] = m;
    inv_std[r] = is;
    double* yr = out.data() + r * d;
    for (int j = 0; j < d; ++j)
      yr[j] = (xr[j] - m) * is * gain.values()[j] + bias.values()[j];
  }
  if (Tape* t = detail::tape_for({&x, &gain, &bias}, out)) {
    t->record([xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node(),
               d, rows, mean, inv_std] {
      if (!detail::grad_ready(on)) return;
      for (size_t r = 0; r < rows; ++r) {
        const double* xr = xn->value.data() + r * d;
        const double* dy = on->grad.data() + r * d;
        const double is = inv_std[r], m = mean[r];
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (int j = 0; j < d; ++j) gn->grad[j] += dy[j] * (xr[j] - m) * is;
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int j = 0; j < d; ++j) bn->grad[j] += dy[j];
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (int j = 0; j < d; ++j) {
            const double xhat = (xr[j] - m) * is;
            const double dxhat = dy[j] * gn->value[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
          }
          double* dx = xn->grad.data() + r * d;
          for (int j = 0; j < d; ++j) {
            const double xhat = (xr[j] - m) * is;
            const double dxhat = dy[j] * gn->value[j];
            dx[j] += is * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
          }
        }
      }
    });
  }
  return out;
}

enum class Mode { Train, Eval };

// Batch-norm state: learnable affine plus running statistics over the channel
// (= last) axis. Running variance stores the biased batch estimate so that
// momentum=1 makes an eval pass reproduce the preceding train pass.
struct BNState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;

  explicit BNState(int channels = 0)
      : gamma(Tensor::full({channels}, 1.0)),
        beta(Tensor::zeros({channels})),
        running_mean(Tensor::zeros({channels})),
        running_var(Tensor::full({channels}, 1.0)) {
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }

  int channels() const { return gamma.dim(0); }
};

inline Tensor batch_norm(const Tensor& x, BNState& state, Mode mode,
                         double momentum, double eps) {
  const int d = x.dim(x.ndim() - 1);
  if (d != state.channels())
    throw DimensionError("batch_norm: input channels " + std::to_string(d) +
                         " != state channels " + std::to_string(state.channels()));
  const size_t rows = x.size() / static_cast<size_t>(d);
  Tensor out = Tensor::zeros(x.shape());
  if (mode == Mode::Eval) {
    // frozen statistics: a per-channel affine map
    std::vector<double> inv_std(d);
    for (int j = 0; j < d; ++j)
      inv_std[static_cast<size_t>(j)] = 1.0 / std::sqrt(state.running_var.at(j) + eps);
    for (size_t r = 0; r < rows; ++r)
      for (int j = 0; j < d; ++j)
        out.values()[r * d + j] =
            (x.values()[r * d + j] - state.running_mean.at(j)) * inv_std[j] *
                state.gamma.values()[j] +
            state.beta.values()[j];
    if (Tape* t = detail::tape_for({&x, &state.gamma, &state.beta}, out)) {
      t->record([xn = x.node(), gn = state.gamma.node(), bn = state.beta.node(),
                 on = out.node(), mn = state.running_mean.node(), d, rows,
                 inv_std] {
        if (!detail::grad_ready(on)) return;
        for (size_t r = 0; r < rows; ++r)
          for (int j = 0; j < d; ++j) {
            const double dy = on->grad[r * d + j];
            if (xn->requires_grad) {
              xn->ensure_grad();
              xn->grad[r * d + j] += dy * gn->value[j] * inv_std[j];
            }
            if (gn->requires_grad) {
              gn->ensure_grad();
              gn->grad[j] += dy * (xn->value[r * d + j] - mn->value[j]) * inv_std[j];
            }
            if (bn->requires_grad) {
              bn->ensure_grad();
              bn->grad[j] += dy;
            }
          }
      });
    }
    return out;
  }
  if (rows < 2)
    throw DimensionError("batch_norm: train mode needs at least 2 reduced elements");
  std::vector<double> mean(d, 0.0), var(d, 0.0);
  for (size_t r = 0; r < rows; ++r)
    for (int j = 0; j < d; ++j) mean[j] += x.values()[r * d + j];
  for (int j = 0; j < d; ++j) mean[j] /= static_cast<double>(rows);
  for (size_t r = 0; r < rows; ++r)
    for (int j = 0; j < d; ++j) {
      const double c = x.values()[r * d + j] - mean[j];
      var[j] += c * c;
    }
  for (int j = 0; j < d; ++j) var[j] /= static_cast<double>(rows);
  std::vector<double> inv_std(d);
  for (int j = 0; j < d; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  for (size_t r = 0; r < rows; ++r)
    for (int j = 0; j < d; ++j)
      out.values()[r * d + j] = (x.values()[r * d + j] - mean[j]) * inv_std[j] *
                                    state.gamma.values()[j] +
                                state.beta.values()[j];
  for (int j = 0; j < d; ++j) {
    state.running_mean.at(j) =
        (1.0 - momentum) * state.running_mean.at(j) + momentum * mean[j];
    state.running_var.at(j) =
        (1.0 - momentum) * state.running_var.at(j) + momentum * var[j];
  }
  if (Tape* t = detail::tape_for({&x, &state.gamma, &state.beta}, out)) {
    t->record([xn = x.node(), gn = state.gamma.node(), bn = state.beta.node(),
               on = out.node(), d, rows, mean, inv_std] {
      if (!detail::grad_ready(on)) return;
      std::vector<double> sum_dy(d, 0.0), sum_dy_xhat(d, 0.0);
      for (size_t r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) {
          const double dy = on->grad[r * d + j];
          const double xhat = (xn->value[r * d + j] - mean[j]) * inv_std[j];
          sum_dy[j] += dy;
          sum_dy_xhat[j] += dy * xhat;
        }
      if (gn->requires_grad) {
        gn->ensure_grad();
        for (int j = 0; j < d; ++j) gn->grad[j] += sum_dy_xhat[j];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int j = 0; j < d; ++j) bn->grad[j] += sum_dy[j];
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        const double inv_rows = 1.0 / static_cast<double>(rows);
        for (size_t r = 0; r < rows; ++r)
          for (int j = 0; j < d; ++j) {
            const double dy = on->grad[r * d + j];
            const double xhat = (xn->value[r * d + j] - mean[j]) * inv_std[j];
            xn->grad[r * d + j] +=
                gn->value[j] * inv_std[j] *
                (dy - sum_dy[j] * inv_rows - xhat * sum_dy_xhat[j] * inv_rows);
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolution

enum class Padding { Same, Valid };

// 1-d cross-correlation along the time axis.
//   x: [T x D_in] or [N x T x D_in], kernels: [D_out x K x D_in]
inline Tensor conv1d(const Tensor& x, const Tensor& kernels, Padding padding) {
  if (kernels.ndim() != 3)
    throw DimensionError("conv1d: kernels must be [D_out x K x D_in], got " +
                         shape_str(kernels.shape()));
  const bool batched = x.ndim() == 3;
  if (!batched && x.ndim() != 2)
    throw DimensionError("conv1d: input must be [T x D_in] or [N x T x D_in]");
  const int nb = batched ? x.dim(0) : 1;
  const int t_in = batched ? x.dim(1) : x.dim(0);
  const int d_in = batched ? x.dim(2) : x.dim(1);
  const int d_out = kernels.dim(0), k = kernels.dim(1);
  if (kernels.dim(2) != d_in)
    throw DimensionError("conv1d: kernel D_in " + std::to_string(kernels.dim(2)) +
                         " != input D_in " + std::to_string(d_in));
  if (t_in < 1) throw DimensionError("conv1d: empty time axis");
  if (padding == Padding::Same && k % 2 == 0)
    throw ConfigError("conv1d: 'same' padding requires an odd kernel size, got " +
                      std::to_string(k));
  const int pad = padding == Padding::Same ? (k - 1) / 2 : 0;
  const int t_out = padding == Padding::Same ? t_in : t_in - k + 1;
  if (t_out < 1) throw DimensionError("conv1d: kernel longer than input");

  // kernels flattened to [K*D_in x D_out] for the im2col product
  const int kd = k * d_in;
  std::vector<double> wmat(static_cast<size_t>(kd) * d_out);
  for (int o = 0; o < d_out; ++o)
    for (int kk = 0; kk < k; ++kk)
      for (int i = 0; i < d_in; ++i)
        wmat[(static_cast<size_t>(kk) * d_in + i) * d_out + o] =
            kernels.at(o, kk, i);

  Tensor out = batched ? Tensor::zeros({nb, t_out, d_out})
                       : Tensor::zeros({t_out, d_out});
  std::vector<double> cols(static_cast<size_t>(t_out) * kd);
  auto fill_cols = [&](const double* xs) {
    std::fill(cols.begin(), cols.end(), 0.0);
    for (int tt = 0; tt < t_out; ++tt)
      for (int kk = 0; kk < k; ++kk) {
        const int src = tt + kk - pad;
        if (src < 0 || src >= t_in) continue;
        std::memcpy(&cols[(static_cast<size_t>(tt) * k + kk) * d_in],
                    xs + static_cast<size_t>(src) * d_in,
                    sizeof(double) * static_cast<size_t>(d_in));
      }
  };
  for (int b = 0; b < nb; ++b) {
    fill_cols(x.data() + static_cast<size_t>(b) * t_in * d_in);
    detail::gemm(t_out, kd, d_out, cols.data(), wmat.data(),
                 out.data() + static_cast<size_t>(b) * t_out * d_out, false);
  }

  if (Tape* t = detail::tape_for({&x, &kernels}, out)) {
    t->record([xn = x.node(), wn = kernels.node(), on = out.node(), wmat, nb,
               t_in, d_in, d_out, k, pad, t_out] {
      if (!detail::grad_ready(on)) return;
      const int kd = k * d_in;
      std::vector<double> cols(static_cast<size_t>(t_out) * kd);
      std::vector<double> dcols(static_cast<size_t>(t_out) * kd);
      std::vector<double> dwmat;
      if (wn->requires_grad) dwmat.assign(static_cast<size_t>(kd) * d_out, 0.0);
      if (xn->requires_grad) xn->ensure_grad();
      for (int b = 0; b < nb; ++b) {
        const double* xs = xn->value.data() + static_cast<size_t>(b) * t_in * d_in;
        const double* dy = on->grad.data() + static_cast<size_t>(b) * t_out * d_out;
        if (wn->requires_grad) {
          std::fill(cols.begin(), cols.end(), 0.0);
          for (int tt = 0; tt < t_out; ++tt)
            for (int kk = 0; kk < k; ++kk) {
              const int src = tt + kk - pad;
              if (src < 0 || src >= t_in) continue;
              std::memcpy(&cols[(static_cast<size_t>(tt) * k + kk) * d_in],
                          xs + static_cast<size_t>(src) * d_in,
                          sizeof(double) * static_cast<size_t>(d_in));
            }
          detail::gemm_tn(kd, t_out, d_out, cols.data(), dy, dwmat.data(), true);
        }
        if (xn->requires_grad) {
          detail::gemm_nt(t_out, d_out, kd, dy, wmat.data(), dcols.data(), false);
          double* dx = xn->grad.data() + static_cast<size_t>(b) * t_in * d_in;
          for (int tt = 0; tt < t_out; ++tt)
            for (int kk = 0; kk < k; ++kk) {
              const int src = tt + kk - pad;
              if (src < 0 || src >= t_in) continue;
              const double* seg = &dcols[(static_cast<size_t>(tt) * k + kk) * d_in];
              double* dst = dx + static_cast<size_t>(src) * d_in;
              for (int i = 0; i < d_in; ++i) dst[i] += seg[i];
            }
        }
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        for (int o = 0; o < d_out; ++o)
          for (int kk = 0; kk < k; ++kk)
            for (int i = 0; i < d_in; ++i)
              wn->grad[(static_cast<size_t>(o) * k + kk) * d_in + i] +=
                  dwmat[(static_cast<size_t>(kk) * d_in + i) * d_out + o];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// pooling

// per-channel maximum over the time axis; ties route the gradient to the
// first maximal index
inline Tensor pool_global_max_time(const Tensor& x) {
  const bool batched = x.ndim() == 3;
  if (!batched && x.ndim() != 2)
    throw DimensionError("pool_global_max_time: need [T x D] or [N x T x D]");
  const int nb = batched ? x.dim(0) : 1;
  const int tt = batched ? x.dim(1) : x.dim(0);
  const int d = batched ? x.dim(2) : x.dim(1);
  if (tt < 1 || d < 1) throw DimensionError("pool_global_max_time: empty input");
  Tensor out = batched ? Tensor::zeros({nb, d}) : Tensor::zeros({d});
  std::vector<int> argmax(static_cast<size_t>(nb) * d);
  for (int b = 0; b < nb; ++b)
    for (int j = 0; j < d; ++j) {
      const double* base = x.data() + (static_cast<size_t>(b) * tt) * d + j;
      double best = base[0];
      int at = 0;
      for (int i = 1; i < tt; ++i) {
        const double v = base[static_cast<size_t>(i) * d];
        if (v > best) {
          best = v;
          at = i;
        }
      }
      out.values()[static_cast<size_t>(b) * d + j] = best;
      argmax[static_cast<size_t>(b) * d + j] = at;
    }
  if (Tape* t = detail::tape_for({&x}, out)) {
    t->record([xn = x.node(), on = out.node(), argmax, nb, tt, d] {
      if (!detail::grad_ready(on)) return;
      xn->ensure_grad();
      for (int b = 0; b < nb; ++b)
        for (int j = 0; j < d; ++j) {
          const int at = argmax[static_cast<size_t>(b) * d + j];
          xn->grad[(static_cast<size_t>(b) * tt + at) * d + j] +=
              on->grad[static_cast<size_t>(b) * d + j];
        }
    });
  }
  return out;
}

// non-overlapping windowed mean along time; a trailing partial window is
// averaged over its actual length
inline Tensor pool_avg1d(const Tensor& x, int window) {
  const bool batched = x.ndim() == 3;
  if (!batched && x.ndim() != 2)
    throw DimensionError("pool_avg1d: need [T x D] or [N x T x D]");
  const int nb = batched ? x.dim(0) : 1;
  const int tt = batched ? x.dim(1) : x.dim(0);
  const int d = batched ? x.dim(2) : x.dim(1);
  if (tt < 1) throw DimensionError("pool_avg1d: empty input");
  if (window < 1 || window > tt)
    throw DimensionError("pool_avg1d: window " + std::to_string(window) +
                         " invalid for T=" + std::to_string(tt));
  const int t_out = (tt + window - 1) / window;
  Tensor out = batched ? Tensor::zeros({nb, t_out, d}) : Tensor::zeros({t_out, d});
  for (int b = 0; b < nb; ++b)
    for (int w = 0; w < t_out; ++w) {
      const int lo = w * window;
      const int hi = std::min(tt, lo + window);
      const double inv = 1.0 / (hi - lo);
      for (int j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int i = lo; i < hi; ++i)
          acc += x.values()[(static_cast<size_t>(b) * tt + i) * d + j];
        out.values()[(static_cast<size_t>(b) * t_out + w) * d + j] = acc * inv;
      }
    }
  if (Tape* t = detail::tape_for({&x}, out)) {
    t->record([xn = x.node(), on = out.node(), nb, tt, d, window, t_out] {
      if (!detail::grad_ready(on)) return;
      xn->ensure_grad();
      for (int b = 0; b < nb; ++b)
        for (int w = 0; w < t_out; ++w) {
          const int lo = w * window;
          const int hi = std::min(tt, lo + window);
          const double inv = 1.0 / (hi - lo);
          for (int j = 0; j < d; ++j) {
            const double g =
                on->grad[(static_cast<size_t>(b) * t_out + w) * d + j] * inv;
            for (int i = lo; i < hi; ++i)
              xn->grad[(static_cast<size_t>(b) * tt + i) * d + j] += g;
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// dropout

inline Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng) {
  if (p < 0.0 || p >= 1.0)
    throw ConfigError("dropout: p must lie in [0,1), got " + std::to_string(p));
  if (mode == Mode::Eval || p == 0.0) return x;
  const double scale = 1.0 / (1.0 - p);
  Tensor out = Tensor::zeros(x.shape());
  std::vector<float> mask(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const bool keep = rng.uniform() >= p;
    mask[i] = keep ? 1.0f : 0.0f;
    out.values()[i] = keep ? x.values()[i] * scale : 0.0;
  }
  if (Tape* t = detail::tape_for({&x}, out)) {
    t->record([xn = x.node(), on = out.node(), mask = std::move(mask), scale] {
      if (!detail::grad_ready(on)) return;
      xn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i)
        if (mask[i] != 0.0f) xn->grad[i] += on->grad[i] * scale;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// structural ops

inline Tensor reshape(const Tensor& x, std::vector<int> shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  if (n != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  Tensor out(std::move(shape), x.values());
  if (Tape* t = detail::tape_for({&x}, out)) {
    t->record([xn = x.node(), on = out.node()] {
      if (!detail::grad_ready(on)) return;
      xn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

// single time step of a [N x T x D] tensor -> [N x D]
inline Tensor slice_time(const Tensor& x, int t_index) {
  if (x.ndim() != 3) throw DimensionError("slice_time: need [N x T x D]");
  const int nb = x.dim(0), tt = x.dim(1), d = x.dim(2);
  if (t_index < 0 || t_index >= tt)
    throw DimensionError("slice_time: index out of range");
  Tensor out = Tensor::zeros({nb, d});
  for (int b = 0; b < nb; ++b)
    std::memcpy(out.data() + static_cast<size_t>(b) * d,
                x.data() + (static_cast<size_t>(b) * tt + t_index) * d,
                sizeof(double) * static_cast<size_t>(d));
  if (Tape* t = detail::tape_for({&x}, out)) {
    t->record([xn = x.node(), on = out.node(), nb, tt, d, t_index] {
      if (!detail::grad_ready(on)) return;
      xn->ensure_grad();
      for (int b = 0; b < nb; ++b)
        for (int j = 0; j < d; ++j)
          xn->grad[(static_cast<size_t>(b) * tt + t_index) * d + j] +=
              on->grad[static_cast<size_t>(b) * d + j];
    });
  }
  return out;
}

// columns [lo, hi) of the last axis
inline Tensor col_slice(const Tensor& x, int lo, int hi) {
  const int d = x.dim(x.ndim() - 1);
  if (lo < 0 || hi > d || lo >= hi) throw DimensionError("col_slice: bad range");
  const int w = hi - lo;
  std::vector<int> shape = x.shape();
  shape.back() = w;
  const size_t rows = x.size() / static_cast<size_t>(d);
  Tensor out = Tensor::zeros(shape);
  for (size_t r = 0; r < rows; ++r)
    std::memcpy(out.data() + r * w, x.data() + r * d + lo,
                sizeof(double) * static_cast<size_t>(w));
  if (Tape* t = detail::tape_for({&x}, out)) {
    t->record([xn = x.node(), on = out.node(), d, lo, w, rows] {
      if (!detail::grad_ready(on)) return;
      xn->ensure_grad();
      for (size_t r = 0; r < rows; ++r)
        for (int j = 0; j < w; ++j)
          xn->grad[r * d + lo + j] += on->grad[r * w + j];
    });
  }
  return out;
}

// concatenate along the last axis; all leading dims must agree
inline Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_last: no inputs");
  std::vector<int> lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  int total = 0;
  for (const auto& p : parts) {
    std::vector<int> l(p.shape().begin(), p.shape().end() - 1);
    if (l != lead)
      throw DimensionError("concat_last: leading dims differ");
    total += p.dim(p.ndim() - 1);
  }
  std::vector<int> shape = lead;
  shape.push_back(total);
  size_t rows = 1;
  for (int d : lead) rows *= static_cast<size_t>(d);
  Tensor out = Tensor::zeros(shape);
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.dim(p.ndim() - 1);
    for (size_t r = 0; r < rows; ++r)
      std::memcpy(out.data() + r * total + off, p.data() + r * w,
                  sizeof(double) * static_cast<size_t>(w));
    off += w;
  }
  Tape* t = active_tape();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (t && any) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorNode>> nodes;
    std::vector<int> widths;
    for (const auto& p : parts) {
      t->note(p);
      nodes.push_back(p.node());
      widths.push_back(p.dim(p.ndim() - 1));
    }
    t->note(out);
    t->record([nodes, widths, on = out.node(), rows, total] {
      if (!detail::grad_ready(on)) return;
      int off = 0;
      for (size_t pi = 0; pi < nodes.size(); ++pi) {
        const int w = widths[pi];
        if (nodes[pi]->requires_grad) {
          nodes[pi]->ensure_grad();
          for (size_t r = 0; r < rows; ++r)
            for (int j = 0; j < w; ++j)
              nodes[pi]->grad[r * w + j] += on->grad[r * total + off + j];
        }
        off += w;
      }
    });
  }
  return out;
}

// stack T tensors of shape [N x D] into [N x T x D]
inline Tensor stack_time(const std::vector<Tensor>& steps) {
  if (steps.empty()) throw DimensionError("stack_time: no inputs");
  const int nb = steps[0].dim(0), d = steps[0].dim(1);
  const int tt = static_cast<int>(steps.size());
  for (const auto& s : steps)
    if (s.ndim() != 2 || s.dim(0) != nb || s.dim(1) != d)
      throw DimensionError("stack_time: inconsistent step shapes");
  Tensor out = Tensor::zeros({nb, tt, d});
  for (int i = 0; i < tt; ++i)
    for (int b = 0; b < nb; ++b)
      std::memcpy(out.data() + (static_cast<size_t>(b) * tt + i) * d,
                  steps[static_cast<size_t>(i)].data() + static_cast<size_t>(b) * d,
                  sizeof(double) * static_cast<size_t>(d));
  Tape* t = active_tape();
  bool any = false;
  for (const auto& s : steps) any = any || s.requires_grad();
  if (t && any) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const auto& s : steps) {
      t->note(s);
      nodes.push_back(s.node());
    }
    t->note(out);
    t->record([nodes, on = out.node(), nb, tt, d] {
      if (!detail::grad_ready(on)) return;
      for (int i = 0; i < tt; ++i) {
        auto& n = nodes[static_cast<size_t>(i)];
        if (!n->requires_grad) continue;
        n->ensure_grad();
        for (int b = 0; b < nb; ++b)
          for (int j = 0; j < d; ++j)
            n->grad[static_cast<size_t>(b) * d + j] +=
                on->grad[(static_cast<size_t>(b) * tt + i) * d + j];
      }
    });
  }
  return out;
}

// stack N tensors of shape [D] into [N x D]
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw DimensionError("stack_rows: no inputs");
  const int d = rows[0].dim(0);
  const int nb = static_cast<int>(rows.size());
  for (const auto& r : rows)
    if (r.ndim() != 1 || r.dim(0) != d)
      throw DimensionError("stack_rows: inconsistent row shapes");
  Tensor out = Tensor::zeros({nb, d});
  for (int b = 0; b < nb; ++b)
    std::memcpy(out.data() + static_cast<size_t>(b) * d,
                rows[static_cast<size_t>(b)].data(),
                sizeof(double) * static_cast<size_t>(d));
  Tape* t = active_tape();
  bool any = false;
  for (const auto& r : rows) any = any || r.requires_grad();
  if (t && any) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const auto& r : rows) {
      t->note(r);
      nodes.push_back(r.node());
    }
    t->note(out);
    t->record([nodes, on = out.node(), nb, d] {
      if (!detail::grad_ready(on)) return;
      for (int b = 0; b < nb; ++b) {
        auto& n = nodes[static_cast<size_t>(b)];
        if (!n->requires_grad) continue;
        n->ensure_grad();
        for (int j = 0; j < d; ++j)
          n->grad[j] += on->grad[static_cast<size_t>(b) * d + j];
      }
    });
  }
  return out;
}

// gather rows of the time axis by index; duplicates accumulate on backward
inline Tensor gather_time(const Tensor& x, const std::vector<int>& idx) {
  const bool batched = x.ndim() == 3;
  if (!batched && x.ndim() != 2)
    throw DimensionError("gather_time: need [T x D] or [N x T x D]");
  const int nb = batched ? x.dim(0) : 1;
  const int tt = batched ? x.dim(1) : x.dim(0);
  const int d = batched ? x.dim(2) : x.dim(1);
  const int t_out = static_cast<int>(idx.size());
  for (int i : idx)
    if (i < 0 || i >= tt) throw DimensionError("gather_time: index out of range");
  Tensor out = batched ? Tensor::zeros({nb, t_out, d}) : Tensor::zeros({t_out, d});
  for (int b = 0; b < nb; ++b)
    for (int i = 0; i < t_out; ++i)
      std::memcpy(out.data() + (static_cast<size_t>(b) * t_out + i) * d,
                  x.data() + (static_cast<size_t>(b) * tt + idx[static_cast<size_t>(i)]) * d,
                  sizeof(double) * static_cast<size_t>(d));
  if (Tape* t = detail::tape_for({&x}, out)) {
    t->record([xn = x.node(), on = out.node(), idx, nb, tt, d, t_out] {
      if (!detail::grad_ready(on)) return;
      xn->ensure_grad();
      for (int b = 0; b < nb; ++b)
        for (int i = 0; i < t_out; ++i)
          for (int j = 0; j < d; ++j)
            xn->grad[(static_cast<size_t>(b) * tt + idx[static_cast<size_t>(i)]) * d + j] +=
                on->grad[(static_cast<size_t>(b) * t_out + i) * d + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (Tape* t = detail::tape_for({&x}, out)) {
    t->record([xn = x.node(), on = out.node()] {
      if (!detail::grad_ready(on)) return;
      xn->ensure_grad();
      const double g = on->grad[0];
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
    });
  }
  return out;
}

inline Tensor mean_all(const Tensor& x) {
  return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

// scalar pick by flat index
inline Tensor select_index(const Tensor& x, int flat_index) {
  if (flat_index < 0 || static_cast<size_t>(flat_index) >= x.size())
    throw DimensionError("select_index: out of range");
  Tensor out = Tensor::scalar(x.values()[static_cast<size_t>(flat_index)]);
  if (Tape* t = detail::tape_for({&x}, out)) {
    t->record([xn = x.node(), on = out.node(), flat_index] {
      if (!detail::grad_ready(on)) return;
      xn->ensure_grad();
      xn->grad[static_cast<size_t>(flat_index)] += on->grad[0];
    });
  }
  return out;
}

}  // namespace ats
