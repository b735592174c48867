#pragma once

// Convolutional recurrent cells: ConvLEM (with optional reset gate and
// peephole connections), plus peephole ConvLSTM and ConvGRU baselines.
//
// Each cell owns named kernels in a ParamStore. Before stepping, a cell is
// bound to a tape; binding fuses the input-side kernels (and the
// hidden-side kernels) into one convolution each, so a step costs two
// convolutions plus one for W_ch in ConvLEM.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "wavecast/autodiff.hpp"
#include "wavecast/errors.hpp"
#include "wavecast/tensor.hpp"

namespace wavecast {

enum class CellType { convlem, convlstm, convgru };

inline const char* to_string(CellType t) {
  switch (t) {
    case CellType::convlem: return "convlem";
    case CellType::convlstm: return "convlstm";
    case CellType::convgru: return "convgru";
  }
  return "?";
}

inline CellType parse_cell_type(const std::string& s) {
  if (s == "convlem") return CellType::convlem;
  if (s == "convlstm") return CellType::convlstm;
  if (s == "convgru") return CellType::convgru;
  throw ConfigError("unknown cell type: " + s);
}

struct CellSpec {
  CellType type = CellType::convlem;
  std::size_t in_channels = 1;
  std::size_t hidden_channels = 1;
  std::size_t height = 1;  // hidden-state spatial extent
  std::size_t width = 1;
  std::size_t kernel = 3;  // odd, same padding
  double dt = 1.0;         // ConvLEM time step factor, in (0, 1]
  bool reset = true;       // ConvLEM reset gate
  bool peephole = true;    // ConvLEM and ConvLSTM peepholes

  void validate() const {
    if (in_channels == 0 || hidden_channels == 0 || height == 0 || width == 0) {
      throw ConfigError("cell dimensions must be positive");
    }
    if (kernel % 2 == 0) throw ConfigError("cell kernel size must be odd");
    if (!(dt > 0.0 && dt <= 1.0)) throw ConfigError("cell dt must lie in (0, 1]");
  }
};

/// Slow state H and fast state C. ConvGRU leaves `c` unset.
template <typename T>
struct CellState {
  Var<T> h;
  Var<T> c;
};

/// Per-step copies of the ConvLEM multiscale step sizes.
template <typename T>
struct GateTrace {
  std::vector<Tensor<T>> fast;  // dt * g_c, drives C
  std::vector<Tensor<T>> slow;  // dt * g_h, drives H
};

template <typename T>
class RecurrentCell {
 public:
  class Bound;

  /// Registers this cell's parameters under `prefix` and initializes them:
  /// kernels uniform in +-1/sqrt(fan_in), biases and peepholes zero.
  RecurrentCell(const CellSpec& spec, std::string prefix, ParamStore<T>& store,
                std::mt19937_64& rng)
      : spec_(spec), prefix_(std::move(prefix)) {
    spec_.validate();
    for (const auto& g : x_gates()) add_kernel(store, rng, "W_x" + g, spec_.in_channels);
    for (const auto& g : h_gates()) add_kernel(store, rng, "W_h" + g, spec_.hidden_channels);
    if (spec_.type == CellType::convlem) add_kernel(store, rng, "W_ch", spec_.hidden_channels);
    for (const auto& g : peephole_gates()) {
      store.add(name("W_c" + g), Tensor<T>(hidden_shape()));
    }
  }

  const CellSpec& spec() const noexcept { return spec_; }
  const std::string& prefix() const noexcept { return prefix_; }
  std::string name(const std::string& local) const { return prefix_ + "." + local; }

  Shape hidden_shape() const {
    return Shape{spec_.hidden_channels, spec_.height, spec_.width};
  }

  /// Zero-initialized state on `tape`.
  CellState<T> zero_state(Tape<T>& tape) const {
    CellState<T> s;
    s.h = tape.constant(Tensor<T>(hidden_shape()));
    if (spec_.type != CellType::convgru) s.c = tape.constant(Tensor<T>(hidden_shape()));
    return s;
  }

  Bound bind(Tape<T>& tape, const ParamStore<T>& store) const { return Bound(*this, tape, store); }

  /// Gate suffixes fed by the input convolution, in fused order.
  std::vector<std::string> x_gates() const {
    switch (spec_.type) {
      case CellType::convlem: {
        std::vector<std::string> g{"c", "t", "tbar", "h"};
        if (spec_.reset) g.push_back("r");
        return g;
      }
      case CellType::convlstm: return {"i", "f", "c", "o"};
      case CellType::convgru: return {"z", "r", "o"};
    }
    return {};
  }

  /// Gate suffixes fed by the hidden-state convolution, in fused order.
  std::vector<std::string> h_gates() const {
    switch (spec_.type) {
      case CellType::convlem: {
        std::vector<std::string> g{"c", "t", "tbar"};
        if (spec_.reset) g.push_back("r");
        return g;
      }
      case CellType::convlstm: return {"i", "f", "c", "o"};
      case CellType::convgru: return {"z", "r", "o"};
    }
    return {};
  }

  std::vector<std::string> peephole_gates() const {
    if (!spec_.peephole) return {};
    switch (spec_.type) {
      case CellType::convlem: {
        std::vector<std::string> g{"t", "tbar"};
        if (spec_.reset) g.push_back("r");
        return g;
      }
      case CellType::convlstm: return {"i", "f", "o"};
      case CellType::convgru: return {};
    }
    return {};
  }

  class Bound {
   public:
    Bound(const RecurrentCell& cell, Tape<T>& tape, const ParamStore<T>& store)
        : cell_(&cell), tape_(&tape) {
      std::vector<Var<T>> xk, xb, hk, hb;
      for (const auto& g : cell.x_gates()) {
        xk.push_back(tape.param(store, cell.name("W_x" + g)));
        xb.push_back(tape.param(store, cell.name("b_x" + g)));
      }
      for (const auto& g : cell.h_gates()) {
        hk.push_back(tape.param(store, cell.name("W_h" + g)));
        hb.push_back(tape.param(store, cell.name("b_h" + g)));
      }
      x_kernel_ = concat(xk);
      x_bias_ = concat(xb);
      h_kernel_ = concat(hk);
      h_bias_ = concat(hb);
      if (cell.spec().type == CellType::convlem) {
        ch_kernel_ = tape.param(store, cell.name("W_ch"));
        ch_bias_ = tape.param(store, cell.name("b_ch"));
      }
      for (const auto& g : cell.peephole_gates()) {
        peep_.push_back(tape.param(store, cell.name("W_c" + g)));
      }
    }

    CellState<T> step(const CellState<T>& prev, const Var<T>& x,
                      GateTrace<T>* trace = nullptr) const {
      const auto& spec = cell_->spec();
      const Shape hs = cell_->hidden_shape();
      if (prev.h.shape() != hs) throw DimensionError("cell: hidden state shape mismatch");
      if (x.shape().size() != 3 || x.shape()[0] != spec.in_channels ||
          x.shape()[1] != spec.height || x.shape()[2] != spec.width) {
        throw DimensionError("cell: input " + shape_string(x.shape()) +
                             " incompatible with hidden " + shape_string(hs));
      }
      if (!prev.h.value().all_finite() ||
          (prev.c.valid() && !prev.c.value().all_finite())) {
        throw NumericError("cell: non-finite recurrent state");
      }
      const std::size_t pad = spec.kernel / 2;
      const std::size_t r = spec.hidden_channels;
      Var<T> xs = conv2d(x, x_kernel_, x_bias_, 1, pad);
      Var<T> hconv = conv2d(prev.h, h_kernel_, h_bias_, 1, pad);
      auto xpart = [&](std::size_t i) { return slice(xs, i * r, r); };
      auto hpart = [&](std::size_t i) { return slice(hconv, i * r, r); };
      switch (spec.type) {
        case CellType::convlem: return lem_step(prev, xpart, hpart, trace);
        case CellType::convlstm: return lstm_step(prev, xpart, hpart);
        case CellType::convgru: return gru_step(prev, xpart, hpart);
      }
      throw UsageError("unreachable cell type");
    }

   private:
    template <typename XP, typename HP>
    CellState<T> lem_step(const CellState<T>& prev, XP xpart, HP hpart,
                          GateTrace<T>* trace) const {
      const auto& spec = cell_->spec();
      const T dt = static_cast<T>(spec.dt);
      const std::size_t pad = spec.kernel / 2;
      // x order: c, t, tbar, h, [r]; h order: c, t, tbar, [r]; peepholes: t, tbar, [r]
      Var<T> fc = tanh(add(xpart(0), hpart(0)));
      Var<T> pre_c = add(xpart(1), hpart(1));
      Var<T> pre_h = add(xpart(2), hpart(2));
      if (spec.peephole) {
        pre_c = add(pre_c, mul(peep_[0], prev.c));
        pre_h = add(pre_h, mul(peep_[1], prev.c));
      }
      Var<T> step_c = affine(sigmoid(pre_c), dt);
      Var<T> c_next = blend(prev.c, fc, step_c);
      Var<T> step_h = affine(sigmoid(pre_h), dt);
      Var<T> coupling = conv2d(c_next, ch_kernel_, ch_bias_, 1, pad);
      if (spec.reset) {
        Var<T> pre_r = add(xpart(4), hpart(3));
        if (spec.peephole) pre_r = add(pre_r, mul(peep_[2], c_next));
        coupling = mul(sigmoid(pre_r), coupling);
      }
      Var<T> fh = tanh(add(coupling, xpart(3)));
      Var<T> h_next = blend(prev.h, fh, step_h);
      if (trace) {
        trace->fast.push_back(step_c.value());
        trace->slow.push_back(step_h.value());
      }
      return CellState<T>{h_next, c_next};
    }

    template <typename XP, typename HP>
    CellState<T> lstm_step(const CellState<T>& prev, XP xpart, HP hpart) const {
      const bool peep = cell_->spec().peephole;
      Var<T> pre_i = add(xpart(0), hpart(0));
      Var<T> pre_f = add(xpart(1), hpart(1));
      if (peep) {
        pre_i = add(pre_i, mul(peep_[0], prev.c));
        pre_f = add(pre_f, mul(peep_[1], prev.c));
      }
      Var<T> gi = sigmoid(pre_i);
      Var<T> gf = sigmoid(pre_f);
      Var<T> cand = tanh(add(xpart(2), hpart(2)));
      Var<T> c_next = add(mul(gf, prev.c), mul(gi, cand));
      Var<T> pre_o = add(xpart(3), hpart(3));
      if (peep) pre_o = add(pre_o, mul(peep_[2], c_next));
      Var<T> h_next = mul(sigmoid(pre_o), tanh(c_next));
      return CellState<T>{h_next, c_next};
    }

    template <typename XP, typename HP>
    CellState<T> gru_step(const CellState<T>& prev, XP xpart, HP hpart) const {
      Var<T> z = sigmoid(add(xpart(0), hpart(0)));
      Var<T> rg = sigmoid(add(xpart(1), hpart(1)));
      Var<T> o = tanh(add(xpart(2), mul(rg, hpart(2))));
      return CellState<T>{blend(prev.h, o, z), Var<T>{}};
    }

    const RecurrentCell* cell_;
    Tape<T>* tape_;
    Var<T> x_kernel_, x_bias_, h_kernel_, h_bias_, ch_kernel_, ch_bias_;
    std::vector<Var<T>> peep_;
  };

 private:
  void add_kernel(ParamStore<T>& store, std::mt19937_64& rng, const std::string& local,
                  std::size_t in_ch) {
    const std::size_t k = spec_.kernel;
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * k * k));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> w(Shape{spec_.hidden_channels, in_ch, k, k});
    for (auto& v : w.values()) v = static_cast<T>(dist(rng));
    store.add(name(local), std::move(w));
    store.add(name("b" + local.substr(1)), Tensor<T>(Shape{spec_.hidden_channels}));
  }

  CellSpec spec_;
  std::string prefix_;
};

// ---------------------------------------------------------------------------
// Gate histograms

/// Log-binned counts of step-size activations in (0, 1]. Bin 0 collects
/// everything at or below the lowest edge.
struct GateHistogram {
  std::vector<double> edges;  // ascending upper edges; edges.back() == 1
  std::vector<std::size_t> fast;
  std::vector<std::size_t> slow;
  double fast_min = 1.0, fast_max = 0.0, slow_min = 1.0, slow_max = 0.0;

  explicit GateHistogram(int decades = 8, int bins_per_decade = 10) {
    const int n = decades * bins_per_decade;
    for (int i = 0; i <= n; ++i) {
      edges.push_back(std::pow(10.0, -decades + static_cast<double>(i) / bins_per_decade));
    }
    fast.assign(edges.size(), 0);
    slow.assign(edges.size(), 0);
  }

  std::size_t bin_of(double v) const {
    auto it = std::lower_bound(edges.begin(), edges.end(), v);
    if (it == edges.end()) return edges.size() - 1;
    return static_cast<std::size_t>(it - edges.begin());
  }

  template <typename T>
  void add(const GateTrace<T>& trace) {
    for (const auto& t : trace.fast) {
      for (auto v : t.values()) {
        const double d = static_cast<double>(v);
        ++fast[bin_of(d)];
        if (d > 0) fast_min = std::min(fast_min, d);
        fast_max = std::max(fast_max, d);
      }
    }
    for (const auto& t : trace.slow) {
      for (auto v : t.values()) {
        const double d = static_cast<double>(v);
        ++slow[bin_of(d)];
        if (d > 0) slow_min = std::min(slow_min, d);
        slow_max = std::max(slow_max, d);
      }
    }
  }

  std::size_t fast_total() const {
    std::size_t n = 0;
    for (auto c : fast) n += c;
    return n;
  }
  std::size_t slow_total() const {
    std::size_t n = 0;
    for (auto c : slow) n += c;
    return n;
  }

  /// Decades spanned by the observed positive activations.
  double fast_decades() const { return fast_max > 0 ? std::log10(fast_max / fast_min) : 0.0; }
  double slow_decades() const { return slow_max > 0 ? std::log10(slow_max / slow_min) : 0.0; }
};

/// Runs a ConvLEM cell over each input sequence from a zero state and bins
/// every step-size activation.
template <typename T>
GateHistogram gate_histogram(const RecurrentCell<T>& cell, const ParamStore<T>& store,
                             const std::vector<std::vector<Tensor<T>>>& sequences) {
  if (cell.spec().type != CellType::convlem) {
    throw UsageError("gate histograms are defined for ConvLEM cells only");
  }
  if (sequences.empty()) throw UsageError("gate_histogram: empty batch");
  GateHistogram hist;
  for (const auto& seq : sequences) {
    Tape<T> tape(false);
    auto bound = cell.bind(tape, store);
    CellState<T> s = cell.zero_state(tape);
    GateTrace<T> trace;
    for (const auto& x : seq) s = bound.step(s, tape.constant(x), &trace);
    hist.add(trace);
  }
  return hist;
}

}  // namespace wavecast
