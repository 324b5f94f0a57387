#pragma once
// Dense n-dimensional tensors with reverse-mode automatic differentiation.
//
// Tensors are eager: every op computes its result immediately and, when any
// input requires gradients, records a backward closure onto an explicit Tape.
// A tape is single-threaded; independent tapes may run concurrently as long
// as shared tensors (parameters) are only read.
//
// Broadcasting is restricted to leading dimensions: two shapes are
// compatible when equal, or when one is a suffix of the other.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "docfuse/common.hpp"

namespace docfuse {

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

template <typename S>
struct Tensor {
  Shape shape;
  std::vector<S> data;
  bool requires_grad = false;
  std::vector<S> grad;  // empty until touched by backward

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(int i) const {
    const int r = static_cast<int>(shape.size());
    return shape[static_cast<size_t>(i < 0 ? r + i : i)];
  }
  int rank() const { return static_cast<int>(shape.size()); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), S(0));
  }
  void zero_grad() { grad.assign(data.size(), S(0)); }
};

template <typename S>
using TensorPtr = std::shared_ptr<Tensor<S>>;

template <typename S>
TensorPtr<S> make_tensor(Shape shape, bool requires_grad = false) {
  auto t = std::make_shared<Tensor<S>>();
  t->shape = std::move(shape);
  const int64_t n = shape_numel(t->shape);
  if (n < 0) throw DimensionError("negative dimension in shape " + shape_str(t->shape));
  t->data.assign(static_cast<size_t>(n), S(0));
  t->requires_grad = requires_grad;
  return t;
}

template <typename S>
TensorPtr<S> make_tensor(Shape shape, std::vector<S> data, bool requires_grad = false) {
  auto t = std::make_shared<Tensor<S>>();
  t->shape = std::move(shape);
  if (shape_numel(t->shape) != static_cast<int64_t>(data.size()))
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(t->shape));
  t->data = std::move(data);
  t->requires_grad = requires_grad;
  return t;
}

template <typename S>
TensorPtr<S> full_like_value(const Shape& shape, S v, bool requires_grad = false) {
  auto t = make_tensor<S>(shape, requires_grad);
  std::fill(t->data.begin(), t->data.end(), v);
  return t;
}

template <typename S>
TensorPtr<S> randn_tensor(const Shape& shape, Rng& rng, double stddev = 1.0,
                          bool requires_grad = false) {
  auto t = make_tensor<S>(shape, requires_grad);
  for (auto& v : t->data) v = static_cast<S>(rng.normal(0.0, stddev));
  return t;
}

template <typename S>
void check_finite(const TensorPtr<S>& t, const char* op) {
  for (const S v : t->data) {
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

// ---------------------------------------------------------------------------
// Tape

template <typename S>
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    ops_.push_back(std::move(backward_fn));
  }

  // Seeds d(loss)/d(loss) = 1 and runs recorded closures in reverse order.
  // A second call without reset() is rejected.
  void backward(const TensorPtr<S>& loss) {
    if (backward_done_)
      throw ValidationError("tape backward called twice without reset");
    if (loss->size() != 1)
      throw DimensionError("backward requires a scalar loss, got shape " + shape_str(loss->shape));
    backward_done_ = true;
    loss->ensure_grad();
    loss->grad[0] = S(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  void reset() {
    ops_.clear();
    backward_done_ = false;
  }

  size_t size() const { return ops_.size(); }
  bool backward_done() const { return backward_done_; }

 private:
  std::vector<std::function<void()>> ops_;
  bool backward_done_ = false;
};

namespace detail {

// Leading-dim broadcast: b broadcasts over a iff b.shape is a suffix of
// a.shape. Returns 0 if equal, +1 if b broadcasts over a, -1 if a over b.
inline int broadcast_mode(const Shape& a, const Shape& b) {
  if (a == b) return 0;
  auto suffix = [](const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
  };
  if (suffix(a, b)) return 1;
  if (suffix(b, a)) return -1;
  throw DimensionError("shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
}

template <typename S>
bool any_requires(const std::initializer_list<TensorPtr<S>>& ts) {
  for (const auto& t : ts)
    if (t->requires_grad) return true;
  return false;
}

// c (+)= a[m,k] . b[k,n]
template <typename S>
void mm_nn(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    S* crow = c + i * n;
    const S* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const S aip = arow[p];
      if (aip == S(0)) continue;
      const S* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// c (+)= a[m,k] . b[n,k]^T
template <typename S>
void mm_nt(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const S* brow = b + j * k;
      S acc = S(0);
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// c (+)= a[k,m]^T . b[k,n]
template <typename S>
void mm_tn(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t p = 0; p < k; ++p) {
    const S* arow = a + p * m;
    const S* brow = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const S aip = arow[i];
      if (aip == S(0)) continue;
      S* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename S>
TensorPtr<S> add(Tape<S>& tape, const TensorPtr<S>& a, const TensorPtr<S>& b) {
  const int mode = detail::broadcast_mode(a->shape, b->shape);
  const TensorPtr<S>& big = (mode >= 0) ? a : b;
  const TensorPtr<S>& small = (mode >= 0) ? b : a;
  auto out = make_tensor<S>(big->shape);
  const int64_t ns = small->size() == 0 ? 1 : small->size();
  if (small->size() == 0 && big->size() != 0)
    throw DimensionError("broadcast against empty tensor");
  for (int64_t i = 0; i < big->size(); ++i)
    out->data[i] = big->data[i] + small->data[i % ns];
  check_finite(out, "add");
  if (detail::any_requires<S>({a, b})) {
    out->requires_grad = true;
    tape.record([out, big, small, ns]() {
      if (out->grad.empty()) return;
      if (big->requires_grad) {
        big->ensure_grad();
        for (int64_t i = 0; i < big->size(); ++i) big->grad[i] += out->grad[i];
      }
      if (small->requires_grad) {
        small->ensure_grad();
        for (int64_t i = 0; i < big->size(); ++i) small->grad[i % ns] += out->grad[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorPtr<S> mul(Tape<S>& tape, const TensorPtr<S>& a, const TensorPtr<S>& b) {
  const int mode = detail::broadcast_mode(a->shape, b->shape);
  const TensorPtr<S>& big = (mode >= 0) ? a : b;
  const TensorPtr<S>& small = (mode >= 0) ? b : a;
  auto out = make_tensor<S>(big->shape);
  const int64_t ns = small->size() == 0 ? 1 : small->size();
  if (small->size() == 0 && big->size() != 0)
    throw DimensionError("broadcast against empty tensor");
  for (int64_t i = 0; i < big->size(); ++i)
    out->data[i] = big->data[i] * small->data[i % ns];
  check_finite(out, "mul");
  if (detail::any_requires<S>({a, b})) {
    out->requires_grad = true;
    tape.record([out, big, small, ns]() {
      if (out->grad.empty()) return;
      if (big->requires_grad) {
        big->ensure_grad();
        for (int64_t i = 0; i < big->size(); ++i)
          big->grad[i] += out->grad[i] * small->data[i % ns];
      }
      if (small->requires_grad) {
        small->ensure_grad();
        for (int64_t i = 0; i < big->size(); ++i)
          small->grad[i % ns] += out->grad[i] * big->data[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorPtr<S> scale(Tape<S>& tape, const TensorPtr<S>& a, double k) {
  auto out = make_tensor<S>(a->shape);
  for (int64_t i = 0; i < a->size(); ++i) out->data[i] = static_cast<S>(a->data[i] * k);
  check_finite(out, "scale");
  if (a->requires_grad) {
    out->requires_grad = true;
    tape.record([out, a, k]() {
      if (out->grad.empty()) return;
      a->ensure_grad();
      for (int64_t i = 0; i < a->size(); ++i)
        a->grad[i] += static_cast<S>(out->grad[i] * k);
    });
  }
  return out;
}

template <typename S>
TensorPtr<S> relu(Tape<S>& tape, const TensorPtr<S>& a) {
  auto out = make_tensor<S>(a->shape);
  for (int64_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] > S(0) ? a->data[i] : S(0);
  check_finite(out, "relu");
  if (a->requires_grad) {
    out->requires_grad = true;
    tape.record([out, a]() {
      if (out->grad.empty()) return;
      a->ensure_grad();
      for (int64_t i = 0; i < a->size(); ++i)
        if (a->data[i] > S(0)) a->grad[i] += out->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matmul: [m,k].[k,n], [B,m,k].[B,k,n], or [B,m,k].[k,n]

template <typename S>
TensorPtr<S> matmul(Tape<S>& tape, const TensorPtr<S>& a, const TensorPtr<S>& b) {
  const int ra = a->rank(), rb = b->rank();
  if ((ra != 2 && ra != 3) || (rb != 2 && rb != 3) || rb > ra)
    throw DimensionError("matmul ranks unsupported: " + shape_str(a->shape) + " x " +
                         shape_str(b->shape));
  const int64_t m = a->dim(-2), k = a->dim(-1);
  const int64_t kb = b->dim(-2), n = b->dim(-1);
  if (k != kb)
    throw DimensionError("matmul inner dims differ: " + shape_str(a->shape) + " x " +
                         shape_str(b->shape));
  const int64_t batch = (ra == 3) ? a->shape[0] : 1;
  if (ra == 3 && rb == 3 && b->shape[0] != batch)
    throw DimensionError("matmul batch dims differ: " + shape_str(a->shape) + " x " +
                         shape_str(b->shape));
  Shape out_shape = (ra == 3) ? Shape{batch, m, n} : Shape{m, n};
  auto out = make_tensor<S>(out_shape);
  const bool shared_b = (rb == 2);
  for (int64_t s = 0; s < batch; ++s) {
    detail::mm_nn(a->data.data() + s * m * k,
                  b->data.data() + (shared_b ? 0 : s * k * n),
                  out->data.data() + s * m * n, m, k, n);
  }
  check_finite(out, "matmul");
  if (detail::any_requires<S>({a, b})) {
    out->requires_grad = true;
    tape.record([out, a, b, m, k, n, batch, shared_b]() {
      if (out->grad.empty()) return;
      if (a->requires_grad) {
        a->ensure_grad();
        for (int64_t s = 0; s < batch; ++s)
          detail::mm_nt(out->grad.data() + s * m * n,
                        b->data.data() + (shared_b ? 0 : s * k * n),
                        a->grad.data() + s * m * k, m, n, k);
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (int64_t s = 0; s < batch; ++s)
          detail::mm_tn(a->data.data() + s * m * k,
                        out->grad.data() + s * m * n,
                        b->grad.data() + (shared_b ? 0 : s * k * n), k, m, n);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename S>
TensorPtr<S> reshape(Tape<S>& tape, const TensorPtr<S>& a, Shape new_shape) {
  if (shape_numel(new_shape) != a->size())
    throw DimensionError("reshape " + shape_str(a->shape) + " -> " + shape_str(new_shape) +
                         " changes element count");
  auto out = make_tensor<S>(std::move(new_shape));
  out->data = a->data;
  if (a->requires_grad) {
    out->requires_grad = true;
    tape.record([out, a]() {
      if (out->grad.empty()) return;
      a->ensure_grad();
      for (int64_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
    });
  }
  return out;
}

namespace detail {

inline std::vector<int64_t> row_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

template <typename S>
void permute_copy(const S* src, S* dst, const Shape& in_shape, const std::vector<int>& perm,
                  bool accumulate_back) {
  // dst[idx_perm] = src[idx] when !accumulate_back; src-grad accumulation otherwise.
  const int r = static_cast<int>(in_shape.size());
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = in_shape[perm[i]];
  const auto in_st = row_strides(in_shape);
  const auto out_st = row_strides(out_shape);
  const int64_t total = shape_numel(in_shape);
  std::vector<int64_t> idx(r, 0);
  for (int64_t lin = 0; lin < total; ++lin) {
    int64_t rem = lin;
    int64_t off = 0;
    for (int i = 0; i < r; ++i) {
      idx[i] = rem / in_st[i];
      rem %= in_st[i];
    }
    for (int i = 0; i < r; ++i) off += idx[perm[i]] * out_st[i];
    if (accumulate_back)
      const_cast<S*>(src)[lin] += dst[off];
    else
      dst[off] = src[lin];
  }
}

}  // namespace detail

template <typename S>
TensorPtr<S> transpose(Tape<S>& tape, const TensorPtr<S>& a, std::vector<int> perm) {
  const int r = a->rank();
  if (static_cast<int>(perm.size()) != r)
    throw DimensionError("transpose perm rank mismatch for " + shape_str(a->shape));
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = a->shape[perm[i]];
  auto out = make_tensor<S>(out_shape);
  detail::permute_copy(a->data.data(), out->data.data(), a->shape, perm, false);
  if (a->requires_grad) {
    out->requires_grad = true;
    tape.record([out, a, perm]() {
      if (out->grad.empty()) return;
      a->ensure_grad();
      detail::permute_copy(a->grad.data(), const_cast<S*>(out->grad.data()), a->shape, perm, true);
    });
  }
  return out;
}

template <typename S>
TensorPtr<S> concat(Tape<S>& tape, const std::vector<TensorPtr<S>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const int r = parts[0]->rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("concat axis out of range");
  Shape out_shape = parts[0]->shape;
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    if (p->rank() != r) throw DimensionError("concat rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && p->shape[i] != out_shape[i])
        throw DimensionError("concat shape mismatch: " + shape_str(p->shape) + " vs " +
                             shape_str(out_shape));
    axis_total += p->shape[axis];
  }
  out_shape[axis] = axis_total;
  auto out = make_tensor<S>(out_shape);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[i];
  int64_t offset = 0;
  std::vector<int64_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const int64_t pa = p->shape[axis];
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(p->data.data() + o * pa * inner, pa * inner,
                  out->data.data() + (o * axis_total + offset) * inner);
    offset += pa;
  }
  bool needs = false;
  for (const auto& p : parts) needs |= p->requires_grad;
  if (needs) {
    out->requires_grad = true;
    tape.record([out, parts, offsets, outer, inner, axis_total, axis]() {
      if (out->grad.empty()) return;
      for (size_t pi = 0; pi < parts.size(); ++pi) {
        const auto& p = parts[pi];
        if (!p->requires_grad) continue;
        p->ensure_grad();
        const int64_t pa = p->shape[axis];
        for (int64_t o = 0; o < outer; ++o) {
          const S* g = out->grad.data() + (o * axis_total + offsets[pi]) * inner;
          S* dst = p->grad.data() + o * pa * inner;
          for (int64_t i = 0; i < pa * inner; ++i) dst[i] += g[i];
        }
      }
    });
  }
  return out;
}

template <typename S>
TensorPtr<S> slice(Tape<S>& tape, const TensorPtr<S>& a, int axis, int64_t start, int64_t end) {
  const int r = a->rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("slice axis out of range");
  if (start < 0 || end < start || end > a->shape[axis])
    throw DimensionError("slice [" + std::to_string(start) + "," + std::to_string(end) +
                         ") out of range for " + shape_str(a->shape));
  Shape out_shape = a->shape;
  out_shape[axis] = end - start;
  auto out = make_tensor<S>(out_shape);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a->shape[i];
  for (int i = axis + 1; i < r; ++i) inner *= a->shape[i];
  const int64_t in_axis = a->shape[axis], out_axis = end - start;
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(a->data.data() + (o * in_axis + start) * inner, out_axis * inner,
                out->data.data() + o * out_axis * inner);
  if (a->requires_grad) {
    out->requires_grad = true;
    tape.record([out, a, outer, inner, in_axis, out_axis, start]() {
      if (out->grad.empty()) return;
      a->ensure_grad();
      for (int64_t o = 0; o < outer; ++o) {
        const S* g = out->grad.data() + o * out_axis * inner;
        S* dst = a->grad.data() + (o * in_axis + start) * inner;
        for (int64_t i = 0; i < out_axis * inner; ++i) dst[i] += g[i];
      }
    });
  }
  return out;
}

// Stacks equal-shape tensors along a new axis.
template <typename S>
TensorPtr<S> stack(Tape<S>& tape, const std::vector<TensorPtr<S>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("stack of zero tensors");
  const int r = parts[0]->rank();
  if (axis < 0) axis += r + 1;
  if (axis < 0 || axis > r) throw DimensionError("stack axis out of range");
  std::vector<TensorPtr<S>> reshaped;
  reshaped.reserve(parts.size());
  for (const auto& p : parts) {
    if (p->shape != parts[0]->shape)
      throw DimensionError("stack shape mismatch: " + shape_str(p->shape) + " vs " +
                           shape_str(parts[0]->shape));
    Shape s = p->shape;
    s.insert(s.begin() + axis, 1);
    reshaped.push_back(reshape(tape, p, s));
  }
  return concat(tape, reshaped, axis);
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
TensorPtr<S> sum_axis(Tape<S>& tape, const TensorPtr<S>& a, int axis) {
  const int r = a->rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("sum axis out of range");
  Shape out_shape = a->shape;
  out_shape.erase(out_shape.begin() + axis);
  auto out = make_tensor<S>(out_shape);
  int64_t outer = 1, inner = 1;
  const int64_t ax = a->shape[axis];
  for (int i = 0; i < axis; ++i) outer *= a->shape[i];
  for (int i = axis + 1; i < r; ++i) inner *= a->shape[i];
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < ax; ++k) {
      const S* src = a->data.data() + (o * ax + k) * inner;
      S* dst = out->data.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  check_finite(out, "sum_axis");
  if (a->requires_grad) {
    out->requires_grad = true;
    tape.record([out, a, outer, inner, ax]() {
      if (out->grad.empty()) return;
      a->ensure_grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t k = 0; k < ax; ++k) {
          const S* g = out->grad.data() + o * inner;
          S* dst = a->grad.data() + (o * ax + k) * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += g[i];
        }
    });
  }
  return out;
}

template <typename S>
TensorPtr<S> mean_all(Tape<S>& tape, const TensorPtr<S>& a) {
  if (a->size() == 0) throw DimensionError("mean of empty tensor");
  auto out = make_tensor<S>(Shape{1});
  double acc = 0.0;
  for (const S v : a->data) acc += static_cast<double>(v);
  out->data[0] = static_cast<S>(acc / static_cast<double>(a->size()));
  check_finite(out, "mean_all");
  if (a->requires_grad) {
    out->requires_grad = true;
    const double inv = 1.0 / static_cast<double>(a->size());
    tape.record([out, a, inv]() {
      if (out->grad.empty()) return;
      a->ensure_grad();
      const S g = static_cast<S>(static_cast<double>(out->grad[0]) * inv);
      for (int64_t i = 0; i < a->size(); ++i) a->grad[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax along an axis, max-subtracted.

template <typename S>
TensorPtr<S> softmax(Tape<S>& tape, const TensorPtr<S>& a, int axis) {
  const int r = a->rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("softmax axis out of range");
  const int64_t ax = a->shape[axis];
  if (ax == 0) throw DimensionError("softmax along empty axis of " + shape_str(a->shape));
  auto out = make_tensor<S>(a->shape);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a->shape[i];
  for (int i = axis + 1; i < r; ++i) inner *= a->shape[i];
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      const S* src = a->data.data() + o * ax * inner + i;
      S* dst = out->data.data() + o * ax * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t k = 0; k < ax; ++k)
        mx = std::max(mx, static_cast<double>(src[k * inner]));
      double denom = 0.0;
      for (int64_t k = 0; k < ax; ++k)
        denom += std::exp(static_cast<double>(src[k * inner]) - mx);
      for (int64_t k = 0; k < ax; ++k)
        dst[k * inner] = static_cast<S>(std::exp(static_cast<double>(src[k * inner]) - mx) / denom);
    }
  check_finite(out, "softmax");
  if (a->requires_grad) {
    out->requires_grad = true;
    tape.record([out, a, outer, inner, ax]() {
      if (out->grad.empty()) return;
      a->ensure_grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
          const S* p = out->data.data() + o * ax * inner + i;
          const S* g = out->grad.data() + o * ax * inner + i;
          S* dst = a->grad.data() + o * ax * inner + i;
          double dot = 0.0;
          for (int64_t k = 0; k < ax; ++k)
            dot += static_cast<double>(p[k * inner]) * static_cast<double>(g[k * inner]);
          for (int64_t k = 0; k < ax; ++k)
            dst[k * inner] += static_cast<S>(static_cast<double>(p[k * inner]) *
                                             (static_cast<double>(g[k * inner]) - dot));
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// RMS norm over the last axis. The second moment and the rescale are always
// computed at 64-bit precision regardless of the storage type.

template <typename S>
TensorPtr<S> rms_norm(Tape<S>& tape, const TensorPtr<S>& a, const TensorPtr<S>& w, double eps) {
  const int64_t d = a->rank() == 0 ? 1 : a->dim(-1);
  if (w->rank() != 1 || w->shape[0] != d)
    throw DimensionError("rms_norm weight shape " + shape_str(w->shape) +
                         " does not match last dim of " + shape_str(a->shape));
  if (!(eps > 0.0)) throw ConfigError("rms_norm eps must be > 0");
  auto out = make_tensor<S>(a->shape);
  const int64_t rows = d == 0 ? 0 : a->size() / d;
  std::vector<double> rinv(static_cast<size_t>(rows));
  for (int64_t rI = 0; rI < rows; ++rI) {
    const S* x = a->data.data() + rI * d;
    double ms = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      const double xv = static_cast<double>(x[i]);
      ms += xv * xv;
    }
    ms /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(ms + eps);
    rinv[static_cast<size_t>(rI)] = r;
    S* y = out->data.data() + rI * d;
    for (int64_t i = 0; i < d; ++i)
      y[i] = static_cast<S>(static_cast<double>(w->data[i]) * static_cast<double>(x[i]) * r);
  }
  check_finite(out, "rms_norm");
  if (a->requires_grad || w->requires_grad) {
    out->requires_grad = true;
    tape.record([out, a, w, rows, d, rinv]() {
      if (out->grad.empty()) return;
      if (w->requires_grad) w->ensure_grad();
      if (a->requires_grad) a->ensure_grad();
      for (int64_t rI = 0; rI < rows; ++rI) {
        const S* x = a->data.data() + rI * d;
        const S* g = out->grad.data() + rI * d;
        const double r = rinv[static_cast<size_t>(rI)];
        if (w->requires_grad) {
          for (int64_t i = 0; i < d; ++i)
            w->grad[i] += static_cast<S>(static_cast<double>(g[i]) * static_cast<double>(x[i]) * r);
        }
        if (a->requires_grad) {
          // y_i = w_i x_i r, r = (mean(x^2)+eps)^{-1/2}
          // dx_j = r w_j g_j - r^3 x_j/d * sum_i g_i w_i x_i
          double dot = 0.0;
          for (int64_t i = 0; i < d; ++i)
            dot += static_cast<double>(g[i]) * static_cast<double>(w->data[i]) *
                   static_cast<double>(x[i]);
          const double c = r * r * r * dot / static_cast<double>(d);
          S* dst = a->grad.data() + rI * d;
          for (int64_t i = 0; i < d; ++i)
            dst[i] += static_cast<S>(r * static_cast<double>(w->data[i]) *
                                         static_cast<double>(g[i]) -
                                     c * static_cast<double>(x[i]));
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dropout. Identity (same tensor, nothing recorded) when not training or
// rate == 0. The generator is explicit; no ambient RNG state.

template <typename S>
TensorPtr<S> dropout(Tape<S>& tape, const TensorPtr<S>& a, double rate, bool training, Rng* rng) {
  if (!training || rate == 0.0) return a;
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must be in [0,1)");
  if (rng == nullptr) throw ConfigError("dropout in training mode requires an rng");
  auto mask = std::make_shared<std::vector<S>>(a->data.size());
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  for (auto& m : *mask) m = (rng->uniform() >= rate) ? keep_scale : S(0);
  auto out = make_tensor<S>(a->shape);
  for (int64_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] * (*mask)[i];
  if (a->requires_grad) {
    out->requires_grad = true;
    tape.record([out, a, mask]() {
      if (out->grad.empty()) return;
      a->ensure_grad();
      for (int64_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i] * (*mask)[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding lookup: rows of table gathered by token id.

template <typename S>
TensorPtr<S> embedding_lookup(Tape<S>& tape, const TensorPtr<S>& table,
                              const std::vector<int32_t>& ids) {
  if (table->rank() != 2)
    throw DimensionError("embedding table must be 2-d, got " + shape_str(table->shape));
  const int64_t vocab = table->shape[0], d = table->shape[1];
  auto out = make_tensor<S>(Shape{static_cast<int64_t>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    const int32_t id = ids[i];
    if (id < 0 || id >= vocab)
      throw ValidationError("token id " + std::to_string(id) + " outside vocab of " +
                            std::to_string(vocab));
    std::copy_n(table->data.data() + static_cast<int64_t>(id) * d, d,
                out->data.data() + static_cast<int64_t>(i) * d);
  }
  if (table->requires_grad) {
    out->requires_grad = true;
    tape.record([out, table, ids, d]() {
      if (out->grad.empty()) return;
      table->ensure_grad();
      for (size_t i = 0; i < ids.size(); ++i) {
        const S* g = out->grad.data() + static_cast<int64_t>(i) * d;
        S* dst = table->grad.data() + static_cast<int64_t>(ids[i]) * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += g[j];
      }
    });
  }
  return out;
}

// Gather of learned scalars: out[h,i,j] = table[h, idx[i*n+j]].
template <typename S>
TensorPtr<S> bias_gather(Tape<S>& tape, const TensorPtr<S>& table,
                         const std::vector<int32_t>& idx, int64_t rows, int64_t cols) {
  if (table->rank() != 2)
    throw DimensionError("bias table must be 2-d, got " + shape_str(table->shape));
  if (static_cast<int64_t>(idx.size()) != rows * cols)
    throw DimensionError("bias index count does not match rows*cols");
  const int64_t heads = table->shape[0], buckets = table->shape[1];
  auto out = make_tensor<S>(Shape{heads, rows, cols});
  for (int64_t h = 0; h < heads; ++h) {
    const S* trow = table->data.data() + h * buckets;
    S* orow = out->data.data() + h * rows * cols;
    for (int64_t i = 0; i < rows * cols; ++i) {
      const int32_t b = idx[static_cast<size_t>(i)];
      if (b < 0 || b >= buckets)
        throw ValidationError("bias bucket " + std::to_string(b) + " outside table of " +
                              std::to_string(buckets));
      orow[i] = trow[b];
    }
  }
  if (table->requires_grad) {
    out->requires_grad = true;
    tape.record([out, table, idx, rows, cols, heads, buckets]() {
      if (out->grad.empty()) return;
      table->ensure_grad();
      for (int64_t h = 0; h < heads; ++h) {
        S* trow = table->grad.data() + h * buckets;
        const S* orow = out->grad.data() + h * rows * cols;
        for (int64_t i = 0; i < rows * cols; ++i) trow[idx[static_cast<size_t>(i)]] += orow[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fixed linear mixes of rows: out[i] = sum_k w_ik * x[row_ik]. Used for RoI
// pooling, where the mix weights come from box/cell geometry.

template <typename S>
TensorPtr<S> sparse_row_mix(Tape<S>& tape, const TensorPtr<S>& x,
                            const std::vector<std::vector<std::pair<int64_t, double>>>& mixes) {
  if (x->rank() != 2) throw DimensionError("sparse_row_mix input must be 2-d");
  const int64_t rows = x->shape[0], d = x->shape[1];
  auto out = make_tensor<S>(Shape{static_cast<int64_t>(mixes.size()), d});
  for (size_t i = 0; i < mixes.size(); ++i) {
    S* dst = out->data.data() + static_cast<int64_t>(i) * d;
    for (const auto& [row, w] : mixes[i]) {
      if (row < 0 || row >= rows) throw DimensionError("sparse_row_mix row out of range");
      const S* src = x->data.data() + row * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += static_cast<S>(w * static_cast<double>(src[j]));
    }
  }
  check_finite(out, "sparse_row_mix");
  if (x->requires_grad) {
    out->requires_grad = true;
    tape.record([out, x, mixes, d]() {
      if (out->grad.empty()) return;
      x->ensure_grad();
      for (size_t i = 0; i < mixes.size(); ++i) {
        const S* g = out->grad.data() + static_cast<int64_t>(i) * d;
        for (const auto& [row, w] : mixes[i]) {
          S* dst = x->grad.data() + row * d;
          for (int64_t j = 0; j < d; ++j) dst[j] += static_cast<S>(w * static_cast<double>(g[j]));
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Token cross entropy: -log softmax(logits)[target], summed or averaged over
// rows. Stable via logsumexp; backward recomputes softmax from the kept
// logits instead of storing it.

template <typename S>
TensorPtr<S> cross_entropy(Tape<S>& tape, const TensorPtr<S>& logits,
                           const std::vector<int32_t>& targets, bool mean_reduce) {
  if (logits->rank() != 2) throw DimensionError("cross_entropy expects [n, vocab] logits");
  const int64_t n = logits->shape[0], vocab = logits->shape[1];
  if (static_cast<int64_t>(targets.size()) != n)
    throw DimensionError("cross_entropy target count mismatch");
  if (n == 0) throw DimensionError("cross_entropy over zero rows");
  auto out = make_tensor<S>(Shape{1});
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const int32_t t = targets[static_cast<size_t>(i)];
    if (t < 0 || t >= vocab) throw ValidationError("cross_entropy target outside vocab");
    const S* row = logits->data.data() + i * vocab;
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (int64_t j = 0; j < vocab; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    total += mx + std::log(denom) - static_cast<double>(row[t]);
  }
  const double norm = mean_reduce ? 1.0 / static_cast<double>(n) : 1.0;
  out->data[0] = static_cast<S>(total * norm);
  check_finite(out, "cross_entropy");
  if (logits->requires_grad) {
    out->requires_grad = true;
    tape.record([out, logits, targets, n, vocab, norm]() {
      if (out->grad.empty()) return;
      logits->ensure_grad();
      const double gscale = static_cast<double>(out->grad[0]) * norm;
      for (int64_t i = 0; i < n; ++i) {
        const S* row = logits->data.data() + i * vocab;
        S* dst = logits->grad.data() + i * vocab;
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (int64_t j = 0; j < vocab; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        for (int64_t j = 0; j < vocab; ++j) {
          const double p = std::exp(static_cast<double>(row[j]) - mx) / denom;
          const double onehot = (j == targets[static_cast<size_t>(i)]) ? 1.0 : 0.0;
          dst[j] += static_cast<S>(gscale * (p - onehot));
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// 2-d convolution over [H, W, Cin] with kernel [kh, kw, Cin, Cout].

template <typename S>
TensorPtr<S> conv2d(Tape<S>& tape, const TensorPtr<S>& x, const TensorPtr<S>& kernel,
                    int stride, int pad) {
  if (x->rank() != 3 || kernel->rank() != 4)
    throw DimensionError("conv2d expects [H,W,Cin] input and [kh,kw,Cin,Cout] kernel");
  const int64_t h = x->shape[0], w = x->shape[1], cin = x->shape[2];
  const int64_t kh = kernel->shape[0], kw = kernel->shape[1];
  if (kernel->shape[2] != cin)
    throw DimensionError("conv2d channel mismatch: " + shape_str(x->shape) + " vs " +
                         shape_str(kernel->shape));
  const int64_t cout = kernel->shape[3];
  const int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const int64_t ow = (w + 2 * pad - kw) / stride + 1;
  if (oh < 1 || ow < 1) throw DimensionError("conv2d output would be empty");
  auto out = make_tensor<S>(Shape{oh, ow, cout});
  auto at = [&](const TensorPtr<S>& t, int64_t i, int64_t j, int64_t c) -> S {
    return t->data[(i * w + j) * cin + c];
  };
  for (int64_t oi = 0; oi < oh; ++oi)
    for (int64_t oj = 0; oj < ow; ++oj) {
      S* dst = out->data.data() + (oi * ow + oj) * cout;
      for (int64_t u = 0; u < kh; ++u) {
        const int64_t ii = oi * stride + u - pad;
        if (ii < 0 || ii >= h) continue;
        for (int64_t v = 0; v < kw; ++v) {
          const int64_t jj = oj * stride + v - pad;
          if (jj < 0 || jj >= w) continue;
          for (int64_t c = 0; c < cin; ++c) {
            const S xv = at(x, ii, jj, c);
            if (xv == S(0)) continue;
            const S* krow = kernel->data.data() + ((u * kw + v) * cin + c) * cout;
            for (int64_t o = 0; o < cout; ++o) dst[o] += xv * krow[o];
          }
        }
      }
    }
  check_finite(out, "conv2d");
  if (x->requires_grad || kernel->requires_grad) {
    out->requires_grad = true;
    tape.record([out, x, kernel, stride, pad, h, w, cin, kh, kw, cout, oh, ow]() {
      if (out->grad.empty()) return;
      if (x->requires_grad) x->ensure_grad();
      if (kernel->requires_grad) kernel->ensure_grad();
      for (int64_t oi = 0; oi < oh; ++oi)
        for (int64_t oj = 0; oj < ow; ++oj) {
          const S* g = out->grad.data() + (oi * ow + oj) * cout;
          for (int64_t u = 0; u < kh; ++u) {
            const int64_t ii = oi * stride + u - pad;
            if (ii < 0 || ii >= h) continue;
            for (int64_t v = 0; v < kw; ++v) {
              const int64_t jj = oj * stride + v - pad;
              if (jj < 0 || jj >= w) continue;
              for (int64_t c = 0; c < cin; ++c) {
                const int64_t xoff = (ii * w + jj) * cin + c;
                const int64_t koff = ((u * kw + v) * cin + c) * cout;
                if (kernel->requires_grad) {
                  const S xv = x->data[xoff];
                  for (int64_t o = 0; o < cout; ++o) kernel->grad[koff + o] += xv * g[o];
                }
                if (x->requires_grad) {
                  S acc = S(0);
                  for (int64_t o = 0; o < cout; ++o) acc += kernel->data[koff + o] * g[o];
                  x->grad[xoff] += acc;
                }
              }
            }
          }
        }
    });
  }
  return out;
}

}  // namespace docfuse
