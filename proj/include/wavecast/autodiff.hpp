#pragma once

// Tape-based reverse-mode differentiation over dense tensors.
//
// A Tape records every op executed during one forward pass. Values are
// immutable once recorded; backward() walks the tape once in reverse and
// accumulates adjoints. Parameters live in a ParamStore and enter a tape as
// leaves; their gradients are read back with accumulate_param_grads().

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "wavecast/errors.hpp"
#include "wavecast/kernels.hpp"
#include "wavecast/tensor.hpp"

namespace wavecast {

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  bool valid() const noexcept { return tape != nullptr; }
  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

/// Named tensors with matching gradient slots. Non-learnable entries hold
/// buffers such as batch-norm running statistics.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool learnable = true;
  };

  std::size_t add(const std::string& name, Tensor<T> init, bool learnable = true) {
    if (index_.count(name)) throw UsageError("duplicate parameter name: " + name);
    Tensor<T> grad(init.shape());
    entries_.push_back(Entry{name, std::move(init), std::move(grad), learnable});
    index_[name] = entries_.size() - 1;
    return entries_.size() - 1;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter: " + name);
    return it->second;
  }

  Entry& at(std::size_t i) { return entries_.at(i); }
  const Entry& at(std::size_t i) const { return entries_.at(i); }
  Entry& at(const std::string& name) { return entries_[index_of(name)]; }
  const Entry& at(const std::string& name) const { return entries_[index_of(name)]; }

  std::size_t size() const noexcept { return entries_.size(); }
  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  void zero_grad() {
    for (auto& e : entries_) e.grad.fill(T{0});
  }

  std::size_t learnable_scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
      if (e.learnable) n += e.value.size();
    }
    return n;
  }

  /// Fresh zeroed gradient buffers aligned with entries().
  std::vector<Tensor<T>> gradient_buffers() const {
    std::vector<Tensor<T>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.emplace_back(e.value.shape());
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  /// With `record_gradients` false, parameters enter as constants and no
  /// backward closures are kept (inference).
  explicit Tape(bool record_gradients) : record_gradients_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  /// Differentiable leaf; its gradient is available through grad() after backward.
  Var<T> leaf(Tensor<T> value) { return push(std::move(value), record_gradients_, nullptr); }

  Var<T> param(const ParamStore<T>& store, std::size_t index) {
    const auto key = std::make_pair(&store, index);
    if (auto it = param_nodes_.find(key); it != param_nodes_.end()) {
      return Var<T>{this, it->second};
    }
    const auto& entry = store.at(index);
    Var<T> v = push(entry.value, entry.learnable && record_gradients_, nullptr);
    nodes_[v.id].store = &store;
    nodes_[v.id].param_index = index;
    param_nodes_[key] = v.id;
    return v;
  }

  Var<T> param(const ParamStore<T>& store, const std::string& name) {
    return param(store, store.index_of(name));
  }

  /// Records an op output. `fn` propagates this node's gradient to its inputs.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) {
      check_owned(in);
      needs = needs || nodes_[in.id].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) {
      check_owned(in);
      needs = needs || nodes_[in.id].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  const Tensor<T>& value(const Var<T>& v) const {
    check_owned(v);
    return nodes_[v.id].value;
  }
  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient slot of node `id`, allocated on first use.
  Tensor<T>& grad_ref(std::size_t id) {
    auto& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  /// Adjoint of `v` after backward(); zeros when nothing flowed into it.
  Tensor<T> grad(const Var<T>& v) const {
    check_owned(v);
    const auto& n = nodes_[v.id];
    return n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad;
  }

  void backward(const Var<T>& out) {
    check_owned(out);
    backward(out, Tensor<T>(nodes_[out.id].value.shape(), T{1}));
  }

  void backward(const Var<T>& out, const Tensor<T>& seed) {
    if (nodes_.empty()) throw UsageError("backward called on an empty tape");
    if (consumed_) throw UsageError("tape already consumed by backward; reset it first");
    check_owned(out);
    if (seed.shape() != nodes_[out.id].value.shape()) {
      throw DimensionError("backward seed shape mismatch");
    }
    consumed_ = true;
    if (!nodes_[out.id].requires_grad) return;
    grad_ref(out.id) = seed;
    for (std::size_t i = out.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  /// Adds parameter adjoints into `sink`, which is aligned with the store's entries.
  void accumulate_param_grads(const ParamStore<T>& store, std::vector<Tensor<T>>& sink) const {
    for (const auto& [key, id] : param_nodes_) {
      if (key.first != &store) continue;
      const auto& n = nodes_[id];
      if (n.grad.empty()) continue;
      auto& dst = sink.at(key.second);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += n.grad[j];
    }
  }

  void accumulate_param_grads(ParamStore<T>& store) const {
    for (const auto& [key, id] : param_nodes_) {
      if (key.first != &store) continue;
      const auto& n = nodes_[id];
      if (n.grad.empty()) continue;
      auto& dst = store.at(key.second).grad;
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += n.grad[j];
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  void reset() {
    nodes_.clear();
    param_nodes_.clear();
    consumed_ = false;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    const ParamStore<T>* store = nullptr;
    std::size_t param_index = 0;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, BackwardFn fn) {
    if (consumed_) throw UsageError("tape already consumed by backward; reset it first");
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, requires_grad, std::move(fn)});
    return Var<T>{this, nodes_.size() - 1};
  }

  void check_owned(const Var<T>& v) const {
    if (v.tape != this || v.id >= nodes_.size()) {
      throw UsageError("variable does not belong to this tape");
    }
  }

  std::deque<Node> nodes_;  // stable references while ops append
  std::map<std::pair<const ParamStore<T>*, std::size_t>, std::size_t> param_nodes_;
  bool consumed_ = false;
  bool record_gradients_ = true;
};

// ---------------------------------------------------------------------------
// Elementwise ops

namespace detail {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  if (a.tape != b.tape) throw UsageError(std::string(op) + ": operands on different tapes");
}

template <typename T>
void add_into(Tape<T>& tape, std::size_t id, const Tensor<T>& g) {
  if (!tape.requires_grad(id)) return;
  auto& dst = tape.grad_ref(id);
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self);
    detail::add_into(t, ia, g);
    detail::add_into(t, ib, g);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self);
    detail::add_into(t, ia, g);
    if (t.requires_grad(ib)) {
      auto& db = t.grad_ref(ib);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] -= g[i];
    }
  });
}

/// Hadamard product.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self);
    const auto& av = t.value(ia);
    const auto& bv2 = t.value(ib);
    if (t.requires_grad(ia)) {
      auto& da = t.grad_ref(ia);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * bv2[i];
    }
    if (t.requires_grad(ib)) {
      auto& db = t.grad_ref(ib);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

/// scale * a + shift, with scalar constants.
template <typename T>
Var<T> affine(const Var<T>& a, T scale, T shift = T{0}) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = scale * v + shift;
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, scale](Tape<T>& t, std::size_t self) {
    if (!t.requires_grad(ia)) return;
    const auto& g = t.grad_ref(self);
    auto& da = t.grad_ref(ia);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += scale * g[i];
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = detail::stable_sigmoid(v);
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self);
    const auto& y = t.value(self);
    auto& da = t.grad_ref(ia);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * y[i] * (T{1} - y[i]);
  });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = std::tanh(v);
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self);
    const auto& y = t.value(self);
    auto& da = t.grad_ref(ia);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * (T{1} - y[i] * y[i]);
  });
}

inline constexpr double kLeakySlope = 0.01;

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope = T(kLeakySlope)) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T{0} ? v : slope * v;
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, slope](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self);
    const auto& x = t.value(ia);
    auto& da = t.grad_ref(ia);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += x[i] > T{0} ? g[i] : slope * g[i];
  });
}

/// (1 - weight) * prev + weight * target, elementwise.
template <typename T>
Var<T> blend(const Var<T>& prev, const Var<T>& target, const Var<T>& weight) {
  detail::require_same_shape(prev, target, "blend");
  detail::require_same_shape(prev, weight, "blend");
  const auto& p = prev.value();
  const auto& q = target.value();
  const auto& w = weight.value();
  Tensor<T> out(p.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (T{1} - w[i]) * p[i] + w[i] * q[i];
  const std::size_t ip = prev.id, iq = target.id, iw = weight.id;
  return prev.tape->record(
      std::move(out), {prev, target, weight}, [ip, iq, iw](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_ref(self);
        const auto& p2 = t.value(ip);
        const auto& q2 = t.value(iq);
        const auto& w2 = t.value(iw);
        if (t.requires_grad(ip)) {
          auto& d = t.grad_ref(ip);
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * (T{1} - w2[i]);
        }
        if (t.requires_grad(iq)) {
          auto& d = t.grad_ref(iq);
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * w2[i];
        }
        if (t.requires_grad(iw)) {
          auto& d = t.grad_ref(iw);
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * (q2[i] - p2[i]);
        }
      });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (auto v : a.value().values()) s += v;
  const std::size_t ia = a.id;
  return a.tape->record(Tensor<T>::scalar(s), {a}, [ia](Tape<T>& t, std::size_t self) {
    const T g = t.grad_ref(self)[0];
    auto& da = t.grad_ref(ia);
    for (auto& v : da.values()) v += g;
  });
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self);
    auto& da = t.grad_ref(ia);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i];
  });
}

/// Concatenates along axis 0; trailing dims must agree.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  Shape shape = first;
  shape[0] = 0;
  std::vector<T> data;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(s.begin() + 1, s.end(), first.begin() + 1)) {
      throw DimensionError("concat: trailing dims differ");
    }
    shape[0] += s[0];
    data.insert(data.end(), p.value().values().begin(), p.value().values().end());
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  return parts[0].tape->record(Tensor<T>(shape, std::move(data)), parts,
                               [ids](Tape<T>& t, std::size_t self) {
                                 const auto& g = t.grad_ref(self);
                                 std::size_t offset = 0;
                                 for (auto id : ids) {
                                   const std::size_t n = t.value(id).size();
                                   if (t.requires_grad(id)) {
                                     auto& d = t.grad_ref(id);
                                     for (std::size_t i = 0; i < n; ++i) d[i] += g[offset + i];
                                   }
                                   offset += n;
                                 }
                               });
}

/// Rows [begin, begin + count) along axis 0, rank preserved.
template <typename T>
Var<T> slice(const Var<T>& a, std::size_t begin, std::size_t count) {
  const Shape& s = a.shape();
  if (count == 0 || begin + count > s.at(0)) throw DimensionError("slice out of range");
  const std::size_t inner = a.value().size() / s[0];
  Shape shape = s;
  shape[0] = count;
  const auto& src = a.value().vector();
  std::vector<T> data(src.begin() + static_cast<std::ptrdiff_t>(begin * inner),
                      src.begin() + static_cast<std::ptrdiff_t>((begin + count) * inner));
  const std::size_t ia = a.id, off = begin * inner;
  return a.tape->record(Tensor<T>(shape, std::move(data)), {a},
                        [ia, off](Tape<T>& t, std::size_t self) {
                          const auto& g = t.grad_ref(self);
                          auto& d = t.grad_ref(ia);
                          for (std::size_t i = 0; i < g.size(); ++i) d[off + i] += g[i];
                        });
}

/// Element `index` of the leading axis, which is dropped.
template <typename T>
Var<T> select(const Var<T>& a, std::size_t index) {
  const Shape& s = a.shape();
  if (s.size() < 2) throw DimensionError("select needs rank >= 2");
  Var<T> row = slice(a, index, 1);
  return reshape(row, Shape(s.begin() + 1, s.end()));
}

template <typename T>
Var<T> stack(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("stack of zero tensors");
  std::vector<Var<T>> lifted;
  lifted.reserve(parts.size());
  for (const auto& p : parts) {
    Shape s{1};
    s.insert(s.end(), p.shape().begin(), p.shape().end());
    lifted.push_back(reshape(p, s));
  }
  return concat(lifted);
}

// ---------------------------------------------------------------------------
// Convolutions

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad) {
  if (stride == 0) throw DimensionError("stride must be >= 1");
  if (k > in + 2 * pad) throw DimensionError("kernel larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

inline std::size_t conv_transpose_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                             std::size_t pad) {
  if (stride == 0) throw DimensionError("stride must be >= 1");
  const std::size_t full = (in - 1) * stride + k;
  if (full <= 2 * pad) throw DimensionError("transposed convolution output would be empty");
  return full - 2 * pad;
}

namespace detail {

struct ConvLayout {
  std::size_t batch;  // 1 for rank-3 inputs
  bool batched;
  kernels::ConvGeometry geom;
  std::size_t out_channels;
};

template <typename T>
ConvLayout conv_layout(const Shape& x, const Shape& k, std::size_t stride, std::size_t pad) {
  if (x.size() != 3 && x.size() != 4) throw DimensionError("conv2d input must be rank 3 or 4");
  if (k.size() != 4) throw DimensionError("conv2d kernel must be rank 4");
  const bool batched = x.size() == 4;
  const std::size_t off = batched ? 1 : 0;
  const std::size_t c = x[off], h = x[off + 1], w = x[off + 2];
  if (k[1] != c) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(k[1]) +
                         " input channels, got " + std::to_string(c));
  }
  kernels::ConvGeometry g{c, h, w, k[2], k[3], stride, pad, 0, 0};
  g.out_h = conv_out_extent(h, k[2], stride, pad);
  g.out_w = conv_out_extent(w, k[3], stride, pad);
  return ConvLayout{batched ? x[0] : 1, batched, g, k[0]};
}

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>* bias,
                       const ConvLayout& L) {
  const auto& g = L.geom;
  const std::size_t patch = g.channels * g.kh * g.kw;
  const std::size_t cols = g.out_h * g.out_w;
  Shape shape = L.batched ? Shape{L.batch, L.out_channels, g.out_h, g.out_w}
                          : Shape{L.out_channels, g.out_h, g.out_w};
  Tensor<T> out(shape);
  std::vector<T> col(patch * cols);
  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t out_stride = L.out_channels * cols;
  for (std::size_t n = 0; n < L.batch; ++n) {
    kernels::im2col(x.data() + n * in_stride, g, col.data());
    T* o = out.data() + n * out_stride;
    kernels::gemm(false, false, L.out_channels, cols, patch, k.data(), col.data(), o, false);
    if (bias) {
      for (std::size_t c = 0; c < L.out_channels; ++c) {
        const T b = (*bias)[c];
        for (std::size_t j = 0; j < cols; ++j) o[c * cols + j] += b;
      }
    }
  }
  return out;
}

// Shared backward for conv2d: gradient wrt input, kernel and bias.
template <typename T>
void conv_backward(Tape<T>& t, std::size_t self, std::size_t ix, std::size_t ik,
                   std::optional<std::size_t> ib, const ConvLayout& L) {
  const auto& g = L.geom;
  const std::size_t patch = g.channels * g.kh * g.kw;
  const std::size_t cols = g.out_h * g.out_w;
  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t out_stride = L.out_channels * cols;
  const auto& dout = t.grad_ref(self);
  const auto& x = t.value(ix);
  const auto& k = t.value(ik);
  std::vector<T> col(patch * cols);
  const bool need_x = t.requires_grad(ix);
  const bool need_k = t.requires_grad(ik);
  for (std::size_t n = 0; n < L.batch; ++n) {
    const T* go = dout.data() + n * out_stride;
    if (need_k) {
      kernels::im2col(x.data() + n * in_stride, g, col.data());
      kernels::gemm(false, true, L.out_channels, patch, cols, go, col.data(),
                    t.grad_ref(ik).data(), true);
    }
    if (need_x) {
      kernels::gemm(true, false, patch, cols, L.out_channels, k.data(), go, col.data(), false);
      kernels::col2im(col.data(), g, t.grad_ref(ix).data() + n * in_stride);
    }
  }
  if (ib && t.requires_grad(*ib)) {
    auto& db = t.grad_ref(*ib);
    for (std::size_t n = 0; n < L.batch; ++n) {
      for (std::size_t c = 0; c < L.out_channels; ++c) {
        const T* go = dout.data() + n * out_stride + c * cols;
        T s = 0;
        for (std::size_t j = 0; j < cols; ++j) s += go[j];
        db[c] += s;
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation of [C_in,H,W] (or [N,C_in,H,W]) with kernel [C_out,C_in,kh,kw].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, std::size_t stride, std::size_t pad) {
  const auto L = detail::conv_layout<T>(x.shape(), kernel.shape(), stride, pad);
  Tensor<T> out = detail::conv_forward(x.value(), kernel.value(), static_cast<const Tensor<T>*>(nullptr), L);
  const std::size_t ix = x.id, ik = kernel.id;
  return x.tape->record(std::move(out), {x, kernel}, [ix, ik, L](Tape<T>& t, std::size_t self) {
    detail::conv_backward(t, self, ix, ik, std::nullopt, L);
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, std::size_t stride,
              std::size_t pad) {
  const auto L = detail::conv_layout<T>(x.shape(), kernel.shape(), stride, pad);
  if (bias.shape() != Shape{L.out_channels}) throw DimensionError("conv2d: bias shape mismatch");
  Tensor<T> out = detail::conv_forward(x.value(), kernel.value(), &bias.value(), L);
  const std::size_t ix = x.id, ik = kernel.id, ib = bias.id;
  return x.tape->record(std::move(out), {x, kernel, bias},
                        [ix, ik, ib, L](Tape<T>& t, std::size_t self) {
                          detail::conv_backward(t, self, ix, ik, ib, L);
                        });
}

namespace detail {

struct ConvTLayout {
  std::size_t batch;
  bool batched;
  std::size_t in_channels, in_h, in_w;
  kernels::ConvGeometry out_geom;  // geometry of the output viewed as a conv input
};

inline ConvTLayout conv_transpose_layout(const Shape& x, const Shape& k, std::size_t stride,
                                         std::size_t pad) {
  if (x.size() != 3 && x.size() != 4) {
    throw DimensionError("conv2d_transpose input must be rank 3 or 4");
  }
  if (k.size() != 4) throw DimensionError("conv2d_transpose kernel must be rank 4");
  const bool batched = x.size() == 4;
  const std::size_t off = batched ? 1 : 0;
  const std::size_t c = x[off], h = x[off + 1], w = x[off + 2];
  if (k[0] != c) {
    throw DimensionError("conv2d_transpose: kernel expects " + std::to_string(k[0]) +
                         " input channels, got " + std::to_string(c));
  }
  kernels::ConvGeometry g{k[1], conv_transpose_out_extent(h, k[2], stride, pad),
                          conv_transpose_out_extent(w, k[3], stride, pad),
                          k[2], k[3], stride, pad, h, w};
  // The forward conv of the output must land back on the input grid.
  if (conv_out_extent(g.height, g.kh, stride, pad) != h ||
      conv_out_extent(g.width, g.kw, stride, pad) != w) {
    throw DimensionError("conv2d_transpose: inconsistent geometry");
  }
  return ConvTLayout{batched ? x[0] : 1, batched, c, h, w, g};
}

template <typename T>
void conv_transpose_backward(Tape<T>& t, std::size_t self, std::size_t ix, std::size_t ik,
                             std::optional<std::size_t> ib, const ConvTLayout& L) {
  const auto& g = L.out_geom;
  const std::size_t patch = g.channels * g.kh * g.kw;
  const std::size_t cols = L.in_h * L.in_w;
  const std::size_t in_stride = L.in_channels * cols;
  const std::size_t out_plane = g.height * g.width;
  const std::size_t out_stride = g.channels * out_plane;
  const auto& dout = t.grad_ref(self);
  const auto& x = t.value(ix);
  const auto& k = t.value(ik);
  std::vector<T> col(patch * cols);
  const bool need_x = t.requires_grad(ix);
  const bool need_k = t.requires_grad(ik);
  for (std::size_t n = 0; n < L.batch; ++n) {
    kernels::im2col(dout.data() + n * out_stride, g, col.data());
    if (need_x) {
      kernels::gemm(false, false, L.in_channels, cols, patch, k.data(), col.data(),
                    t.grad_ref(ix).data() + n * in_stride, true);
    }
    if (need_k) {
      kernels::gemm(false, true, L.in_channels, patch, cols, x.data() + n * in_stride,
                    col.data(), t.grad_ref(ik).data(), true);
    }
  }
  if (ib && t.requires_grad(*ib)) {
    auto& db = t.grad_ref(*ib);
    for (std::size_t n = 0; n < L.batch; ++n) {
      for (std::size_t c = 0; c < g.channels; ++c) {
        const T* go = dout.data() + n * out_stride + c * out_plane;
        T s = 0;
        for (std::size_t j = 0; j < out_plane; ++j) s += go[j];
        db[c] += s;
      }
    }
  }
}

template <typename T>
Tensor<T> conv_transpose_forward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>* bias,
                                 const ConvTLayout& L) {
  const auto& g = L.out_geom;
  const std::size_t patch = g.channels * g.kh * g.kw;
  const std::size_t cols = L.in_h * L.in_w;
  const std::size_t in_stride = L.in_channels * cols;
  const std::size_t out_plane = g.height * g.width;
  Shape shape = L.batched ? Shape{L.batch, g.channels, g.height, g.width}
                          : Shape{g.channels, g.height, g.width};
  Tensor<T> out(shape);
  std::vector<T> col(patch * cols);
  for (std::size_t n = 0; n < L.batch; ++n) {
    kernels::gemm(true, false, patch, cols, L.in_channels, k.data(), x.data() + n * in_stride,
                  col.data(), false);
    T* o = out.data() + n * g.channels * out_plane;
    kernels::col2im(col.data(), g, o);
    if (bias) {
      for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t j = 0; j < out_plane; ++j) o[c * out_plane + j] += (*bias)[c];
      }
    }
  }
  return out;
}

}  // namespace detail

/// Adjoint of conv2d with respect to its input. Kernel layout [C_in,C_out,kh,kw];
/// output extent (H-1)*stride - 2*pad + kh.
template <typename T>
Var<T> conv2d_transpose(const Var<T>& x, const Var<T>& kernel, std::size_t stride,
                        std::size_t pad) {
  const auto L = detail::conv_transpose_layout(x.shape(), kernel.shape(), stride, pad);
  Tensor<T> out = detail::conv_transpose_forward(x.value(), kernel.value(), static_cast<const Tensor<T>*>(nullptr), L);
  const std::size_t ix = x.id, ik = kernel.id;
  return x.tape->record(std::move(out), {x, kernel}, [ix, ik, L](Tape<T>& t, std::size_t self) {
    detail::conv_transpose_backward(t, self, ix, ik, std::nullopt, L);
  });
}

template <typename T>
Var<T> conv2d_transpose(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias,
                        std::size_t stride, std::size_t pad) {
  const auto L = detail::conv_transpose_layout(x.shape(), kernel.shape(), stride, pad);
  if (bias.shape() != Shape{L.out_geom.channels}) {
    throw DimensionError("conv2d_transpose: bias shape mismatch");
  }
  Tensor<T> out = detail::conv_transpose_forward(x.value(), kernel.value(), &bias.value(), L);
  const std::size_t ix = x.id, ik = kernel.id, ib = bias.id;
  return x.tape->record(std::move(out), {x, kernel, bias},
                        [ix, ik, ib, L](Tape<T>& t, std::size_t self) {
                          detail::conv_transpose_backward(t, self, ix, ik, ib, L);
                        });
}

// ---------------------------------------------------------------------------
// Pixel shuffle

/// [C*r*r, H, W] -> [C, H*r, W*r] (rank 4 inputs are shuffled per batch item).
template <typename T>
Tensor<T> pixel_shuffle_values(const Tensor<T>& x, std::size_t r) {
  const Shape& s = x.shape();
  if (s.size() != 3 && s.size() != 4) throw DimensionError("pixel_shuffle needs rank 3 or 4");
  if (r == 0) throw DimensionError("pixel_shuffle factor must be >= 1");
  const std::size_t off = s.size() == 4 ? 1 : 0;
  const std::size_t batch = off ? s[0] : 1;
  const std::size_t cin = s[off], h = s[off + 1], w = s[off + 2];
  if (cin % (r * r) != 0) {
    throw DimensionError("pixel_shuffle: " + std::to_string(cin) +
                         " channels not divisible by r^2=" + std::to_string(r * r));
  }
  const std::size_t c = cin / (r * r);
  Shape shape = off ? Shape{batch, c, h * r, w * r} : Shape{c, h * r, w * r};
  Tensor<T> out(shape);
  const std::size_t stride = cin * h * w;
  for (std::size_t n = 0; n < batch; ++n) {
    const T* src = x.data() + n * stride;
    T* dst = out.data() + n * stride;
    std::size_t o = 0;
    for (std::size_t cc = 0; cc < c; ++cc)
      for (std::size_t y = 0; y < h * r; ++y)
        for (std::size_t xx = 0; xx < w * r; ++xx)
          dst[o++] = src[kernels::pixel_shuffle_source(cc, y, xx, r, h, w)];
  }
  return out;
}

/// Inverse reindexing of pixel_shuffle_values: [C, H*r, W*r] -> [C*r*r, H, W].
template <typename T>
Tensor<T> pixel_unshuffle_values(const Tensor<T>& x, std::size_t r) {
  const Shape& s = x.shape();
  if (s.size() != 3 && s.size() != 4) throw DimensionError("pixel_unshuffle needs rank 3 or 4");
  const std::size_t off = s.size() == 4 ? 1 : 0;
  const std::size_t batch = off ? s[0] : 1;
  const std::size_t c = s[off], hr = s[off + 1], wr = s[off + 2];
  if (r == 0 || hr % r || wr % r) throw DimensionError("pixel_unshuffle: extent not divisible");
  const std::size_t h = hr / r, w = wr / r;
  Shape shape = off ? Shape{batch, c * r * r, h, w} : Shape{c * r * r, h, w};
  Tensor<T> out(shape);
  const std::size_t stride = c * hr * wr;
  for (std::size_t n = 0; n < batch; ++n) {
    const T* src = x.data() + n * stride;
    T* dst = out.data() + n * stride;
    std::size_t i = 0;
    for (std::size_t cc = 0; cc < c; ++cc)
      for (std::size_t y = 0; y < hr; ++y)
        for (std::size_t xx = 0; xx < wr; ++xx)
          dst[kernels::pixel_shuffle_source(cc, y, xx, r, h, w)] = src[i++];
  }
  return out;
}

template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, std::size_t r) {
  Tensor<T> out = pixel_shuffle_values(x.value(), r);
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {x}, [ix, r](Tape<T>& t, std::size_t self) {
    const auto back = pixel_unshuffle_values(t.grad_ref(self), r);
    detail::add_into(t, ix, back);
  });
}

// ---------------------------------------------------------------------------
// Dense and normalization layers

/// weight[m,n] * x[n] + bias[m].
template <typename T>
Var<T> dense(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape& ws = weight.shape();
  if (x.shape().size() != 1 || ws.size() != 2 || ws[1] != x.shape()[0]) {
    throw DimensionError("dense: input " + shape_string(x.shape()) + " vs weight " +
                         shape_string(ws));
  }
  if (bias.shape() != Shape{ws[0]}) throw DimensionError("dense: bias shape mismatch");
  const std::size_t m = ws[0], n = ws[1];
  Tensor<T> out = bias.value();
  kernels::gemm(false, false, m, 1, n, weight.value().data(), x.value().data(), out.data(), true);
  const std::size_t ix = x.id, iw = weight.id, ib = bias.id;
  return x.tape->record(std::move(out), {x, weight, bias},
                        [ix, iw, ib, m, n](Tape<T>& t, std::size_t self) {
                          const auto& g = t.grad_ref(self);
                          if (t.requires_grad(ix)) {
                            kernels::gemm(true, false, n, 1, m, t.value(iw).data(), g.data(),
                                          t.grad_ref(ix).data(), true);
                          }
                          if (t.requires_grad(iw)) {
                            kernels::gemm(false, true, m, n, 1, g.data(), t.value(ix).data(),
                                          t.grad_ref(iw).data(), true);
                          }
                          detail::add_into(t, ib, g);
                        });
}

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Per-channel batch statistics observed during a training-mode pass.
template <typename T>
struct BatchStats {
  Tensor<T> mean;
  Tensor<T> var;
};

/// Blends observed batch statistics into running buffers.
template <typename T>
void update_running_stats(Tensor<T>& running_mean, Tensor<T>& running_var,
                          const BatchStats<T>& observed, T momentum = T(kBatchNormMomentum)) {
  for (std::size_t c = 0; c < running_mean.size(); ++c) {
    running_mean[c] = (T{1} - momentum) * running_mean[c] + momentum * observed.mean[c];
    running_var[c] = (T{1} - momentum) * running_var[c] + momentum * observed.var[c];
  }
}

/// Batch normalization over every axis but the channel axis ([C,H,W] or [N,C,H,W]).
/// Training mode standardizes with the batch statistics (population variance) and
/// reports them through `observed`; eval mode uses the running buffers.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  const Tensor<T>& running_mean, const Tensor<T>& running_var, bool training,
                  BatchStats<T>* observed = nullptr, T eps = T(kBatchNormEpsilon)) {
  const Shape& s = x.shape();
  if (s.size() != 3 && s.size() != 4) throw DimensionError("batch_norm needs rank 3 or 4");
  const std::size_t off = s.size() == 4 ? 1 : 0;
  const std::size_t batch = off ? s[0] : 1;
  const std::size_t C = s[off];
  const std::size_t plane = s[off + 1] * s[off + 2];
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C} ||
      running_mean.shape() != Shape{C} || running_var.shape() != Shape{C}) {
    throw DimensionError("batch_norm: per-channel parameter shape mismatch");
  }
  const auto& xv = x.value();
  const T count = static_cast<T>(batch * plane);
  std::vector<T> mean(C), inv(C);
  BatchStats<T> stats{Tensor<T>(Shape{C}), Tensor<T>(Shape{C})};
  for (std::size_t c = 0; c < C; ++c) {
    T m, v;
    if (training) {
      T acc = 0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = xv.data() + (n * C + c) * plane;
        for (std::size_t j = 0; j < plane; ++j) acc += p[j];
      }
      m = acc / count;
      T sq = 0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = xv.data() + (n * C + c) * plane;
        for (std::size_t j = 0; j < plane; ++j) sq += (p[j] - m) * (p[j] - m);
      }
      v = sq / count;
      stats.mean[c] = m;
      stats.var[c] = v;
    } else {
      m = running_mean[c];
      v = running_var[c];
    }
    mean[c] = m;
    inv[c] = T{1} / std::sqrt(v + eps);
  }
  if (training && observed) *observed = stats;

  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<T> out(s);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = xv.data() + (n * C + c) * plane;
      T* o = out.data() + (n * C + c) * plane;
      for (std::size_t j = 0; j < plane; ++j) o[j] = gv[c] * (p[j] - mean[c]) * inv[c] + bv[c];
    }
  }
  const std::size_t ix = x.id, ig = gamma.id, ibeta = beta.id;
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ibeta, mean, inv, training, batch, C, plane, count](Tape<T>& t, std::size_t self) {
        const auto& dy = t.grad_ref(self);
        const auto& xv2 = t.value(ix);
        const auto& gv2 = t.value(ig);
        for (std::size_t c = 0; c < C; ++c) {
          T sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t base = (n * C + c) * plane;
            for (std::size_t j = 0; j < plane; ++j) {
              const T xhat = (xv2[base + j] - mean[c]) * inv[c];
              sum_dy += dy[base + j];
              sum_dy_xhat += dy[base + j] * xhat;
            }
          }
          if (t.requires_grad(ig)) t.grad_ref(ig)[c] += sum_dy_xhat;
          if (t.requires_grad(ibeta)) t.grad_ref(ibeta)[c] += sum_dy;
          if (!t.requires_grad(ix)) continue;
          auto& dx = t.grad_ref(ix);
          for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t base = (n * C + c) * plane;
            for (std::size_t j = 0; j < plane; ++j) {
              if (training) {
                const T xhat = (xv2[base + j] - mean[c]) * inv[c];
                dx[base + j] += gv2[c] * inv[c] / count *
                                (count * dy[base + j] - sum_dy - xhat * sum_dy_xhat);
              } else {
                dx[base + j] += gv2[c] * inv[c] * dy[base + j];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Losses against constant targets

/// (1/T) * sum_t ||pred_t - target_t||_F^2 with T the leading axis.
template <typename T>
Var<T> l2_loss(const Var<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) throw DimensionError("l2_loss: shape mismatch");
  const auto& p = pred.value();
  const T steps = static_cast<T>(p.shape()[0]);
  T acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += (p[i] - target[i]) * (p[i] - target[i]);
  const std::size_t ip = pred.id;
  return pred.tape->record(Tensor<T>::scalar(acc / steps), {pred},
                           [ip, target, steps](Tape<T>& t, std::size_t self) {
                             const T g = t.grad_ref(self)[0];
                             const auto& p2 = t.value(ip);
                             auto& d = t.grad_ref(ip);
                             for (std::size_t i = 0; i < d.size(); ++i)
                               d[i] += g * T{2} * (p2[i] - target[i]) / steps;
                           });
}

inline constexpr double kHuberDelta = 1.0;

/// Mean over all elements of the Huber penalty with threshold delta.
template <typename T>
Var<T> huber_loss(const Var<T>& pred, const Tensor<T>& target, T delta = T(kHuberDelta)) {
  if (pred.shape() != target.shape()) throw DimensionError("huber_loss: shape mismatch");
  const auto& p = pred.value();
  const T n = static_cast<T>(p.size());
  T acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T d = p[i] - target[i];
    const T a = std::abs(d);
    acc += a <= delta ? T(0.5) * d * d : delta * (a - T(0.5) * delta);
  }
  const std::size_t ip = pred.id;
  return pred.tape->record(Tensor<T>::scalar(acc / n), {pred},
                           [ip, target, delta, n](Tape<T>& t, std::size_t self) {
                             const T g = t.grad_ref(self)[0];
                             const auto& p2 = t.value(ip);
                             auto& d = t.grad_ref(ip);
                             for (std::size_t i = 0; i < d.size(); ++i) {
                               const T diff = p2[i] - target[i];
                               const T slope = std::abs(diff) <= delta
                                                   ? diff
                                                   : (diff > T{0} ? delta : -delta);
                               d[i] += g * slope / n;
                             }
                           });
}

/// Mean binary cross-entropy of sigmoid(logits) against targets in [0,1].
template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& target) {
  if (logits.shape() != target.shape()) throw DimensionError("bce_with_logits: shape mismatch");
  const auto& z = logits.value();
  const T n = static_cast<T>(z.size());
  T acc = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    // log(1 + e^z) - y z, computed without overflow
    const T zi = z[i];
    acc += std::max(zi, T{0}) - zi * target[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  const std::size_t iz = logits.id;
  return logits.tape->record(Tensor<T>::scalar(acc / n), {logits},
                             [iz, target, n](Tape<T>& t, std::size_t self) {
                               const T g = t.grad_ref(self)[0];
                               const auto& z2 = t.value(iz);
                               auto& d = t.grad_ref(iz);
                               for (std::size_t i = 0; i < d.size(); ++i)
                                 d[i] += g * (detail::stable_sigmoid(z2[i]) - target[i]) / n;
                             });
}

}  // namespace wavecast
