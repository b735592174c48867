#pragma once

// Normalization schemes, losses and evaluation metrics on wavefield
// sequences shaped [T, C, H, W]. Channel 0 and 1 are the horizontal
// components (X, Y); channel 2 is vertical/temporal and never enters PGV.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "wavecast/errors.hpp"
#include "wavecast/tensor.hpp"

namespace wavecast {

namespace detail {

inline void require_sequence(const Shape& s, const char* what) {
  if (s.size() != 4) {
    throw DimensionError(std::string(what) + ": expected [T,C,H,W], got " + shape_string(s));
  }
}

template <typename T>
void require_pair(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  require_sequence(a.shape(), what);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

}  // namespace detail

inline constexpr double kNormEpsilon = 1e-8;

/// Per-element mean and population standard deviation over every training
/// snapshot; both shaped like one snapshot [C,H,W].
template <typename T>
struct NormStats {
  Tensor<T> mean;
  Tensor<T> std;
  T epsilon = T(kNormEpsilon);
};

template <typename T>
NormStats<T> fit_norm_stats(const std::vector<Tensor<T>>& sequences) {
  if (sequences.empty()) throw UsageError("fit_norm_stats: no sequences");
  const Shape& s0 = sequences[0].shape();
  detail::require_sequence(s0, "fit_norm_stats");
  const Shape snap(s0.begin() + 1, s0.end());
  const std::size_t n = numel(snap);
  // Welford in double precision.
  std::vector<double> mean(n, 0.0), m2(n, 0.0);
  double count = 0;
  for (const auto& seq : sequences) {
    if (Shape(seq.shape().begin() + 1, seq.shape().end()) != snap || seq.rank() != 4) {
      throw DimensionError("fit_norm_stats: snapshot shapes differ");
    }
    for (std::size_t t = 0; t < seq.shape()[0]; ++t) {
      count += 1;
      const T* p = seq.data() + t * n;
      for (std::size_t i = 0; i < n; ++i) {
        const double x = static_cast<double>(p[i]);
        const double d = x - mean[i];
        mean[i] += d / count;
        m2[i] += d * (x - mean[i]);
      }
    }
  }
  NormStats<T> out{Tensor<T>(snap), Tensor<T>(snap)};
  for (std::size_t i = 0; i < n; ++i) {
    out.mean[i] = static_cast<T>(mean[i]);
    out.std[i] = static_cast<T>(std::sqrt(std::max(0.0, m2[i] / count)));
  }
  return out;
}

/// (x - mean) / std per element; elements with std <= epsilon map to 0.
/// Accepts a snapshot [C,H,W] or a sequence [T,C,H,W].
template <typename T>
Tensor<T> normalize(const Tensor<T>& x, const NormStats<T>& stats) {
  const std::size_t n = stats.mean.size();
  if (x.size() % n != 0 || x.shape().back() != stats.mean.shape().back()) {
    throw DimensionError("normalize: data does not match stats shape");
  }
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t k = i % n;
    out[i] = stats.std[k] > stats.epsilon ? (x[i] - stats.mean[k]) / stats.std[k] : T{0};
  }
  return out;
}

/// Inverse of normalize wherever std > epsilon; guarded elements return the mean.
template <typename T>
Tensor<T> denormalize(const Tensor<T>& x, const NormStats<T>& stats) {
  const std::size_t n = stats.mean.size();
  if (x.size() % n != 0 || x.shape().back() != stats.mean.shape().back()) {
    throw DimensionError("denormalize: data does not match stats shape");
  }
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t k = i % n;
    out[i] = stats.std[k] > stats.epsilon ? x[i] * stats.std[k] + stats.mean[k] : stats.mean[k];
  }
  return out;
}

template <typename T>
struct WindowScaling {
  Tensor<T> sequence;
  std::vector<T> scales;  // per-channel divisor applied
};

/// Channel-wise rescaling for domain-shifted inputs: each channel is divided
/// by its population std over steps [t1, t2] and the whole grid. A zero std
/// leaves the channel untouched.
template <typename T>
WindowScaling<T> renormalize_window(const Tensor<T>& seq, std::size_t t1, std::size_t t2) {
  detail::require_sequence(seq.shape(), "renormalize_window");
  const auto& s = seq.shape();
  if (t1 > t2 || t2 >= s[0]) throw UsageError("renormalize_window: need t1 <= t2 < T");
  const std::size_t C = s[1], plane = s[2] * s[3];
  WindowScaling<T> out{seq, std::vector<T>(C, T{1})};
  for (std::size_t c = 0; c < C; ++c) {
    double sum = 0, count = 0;
    for (std::size_t t = t1; t <= t2; ++t) {
      const T* p = seq.data() + (t * C + c) * plane;
      for (std::size_t j = 0; j < plane; ++j) sum += p[j];
      count += static_cast<double>(plane);
    }
    const double mean = sum / count;
    double sq = 0;
    for (std::size_t t = t1; t <= t2; ++t) {
      const T* p = seq.data() + (t * C + c) * plane;
      for (std::size_t j = 0; j < plane; ++j) sq += (p[j] - mean) * (p[j] - mean);
    }
    const double sd = std::sqrt(sq / count);
    if (sd > 0) out.scales[c] = static_cast<T>(sd);
  }
  for (std::size_t t = 0; t < s[0]; ++t)
    for (std::size_t c = 0; c < C; ++c) {
      T* p = out.sequence.data() + (t * C + c) * plane;
      for (std::size_t j = 0; j < plane; ++j) p[j] /= out.scales[c];
    }
  return out;
}

// ---------------------------------------------------------------------------
// Losses (plain evaluation; the differentiable versions live in autodiff.hpp)

/// (1/T) * sum_t ||pred_t - true_t||_F^2.
template <typename T>
double loss_l2(const Tensor<T>& pred, const Tensor<T>& truth) {
  detail::require_pair(pred, truth, "loss_l2");
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(truth[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(pred.shape()[0]);
}

inline double huber_penalty(double diff, double delta) {
  const double a = std::abs(diff);
  return a <= delta ? 0.5 * diff * diff : delta * (a - 0.5 * delta);
}

/// Mean over T*C*H*W of the per-element Huber penalty.
template <typename T>
double loss_huber(const Tensor<T>& pred, const Tensor<T>& truth, double delta = 1.0) {
  detail::require_pair(pred, truth, "loss_huber");
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    acc += huber_penalty(static_cast<double>(pred[i]) - static_cast<double>(truth[i]), delta);
  }
  return acc / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// Peak ground velocity

template <typename T>
struct PeakMaps {
  Tensor<T> pgv;                       // [H,W]
  std::vector<std::size_t> t_pgv;      // row-major [H*W], step index of the peak
  std::size_t height = 0, width = 0;
};

/// Per grid point, the max over t of sqrt(X^2 + Y^2) and its first argmax.
template <typename T>
PeakMaps<T> peak_ground_velocity(const Tensor<T>& seq) {
  detail::require_sequence(seq.shape(), "pgv");
  const auto& s = seq.shape();
  if (s[1] < 2) throw DimensionError("pgv needs at least two horizontal channels");
  const std::size_t H = s[2], W = s[3], plane = H * W, C = s[1];
  PeakMaps<T> out{Tensor<T>(Shape{H, W}), std::vector<std::size_t>(plane, 0), H, W};
  std::vector<T> best(plane, T{-1});
  for (std::size_t t = 0; t < s[0]; ++t) {
    const T* x = seq.data() + (t * C + 0) * plane;
    const T* y = seq.data() + (t * C + 1) * plane;
    for (std::size_t j = 0; j < plane; ++j) {
      const T amp = std::sqrt(x[j] * x[j] + y[j] * y[j]);
      if (amp > best[j]) {
        best[j] = amp;
        out.t_pgv[j] = t;
      }
    }
  }
  for (std::size_t j = 0; j < plane; ++j) out.pgv[j] = best[j];
  return out;
}

template <typename T>
Tensor<T> pgv(const Tensor<T>& seq) {
  return peak_ground_velocity(seq).pgv;
}

/// Peak times as a [H,W] tensor of step indices.
template <typename T>
Tensor<T> t_pgv(const Tensor<T>& seq) {
  auto maps = peak_ground_velocity(seq);
  Tensor<T> out(Shape{maps.height, maps.width});
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<T>(maps.t_pgv[j]);
  return out;
}

// ---------------------------------------------------------------------------
// Accuracy metrics

struct AccResult {
  double value = 0.0;
  bool defined = true;  // false when some channel has zero energy on either side
};

/// Cosine similarity over (t,h,w) per channel, averaged over channels. An
/// undefined channel contributes 0 and clears `defined`.
template <typename T>
AccResult acc(const Tensor<T>& pred, const Tensor<T>& truth) {
  detail::require_pair(pred, truth, "acc");
  const auto& s = pred.shape();
  const std::size_t C = s[1], plane = s[2] * s[3];
  AccResult out;
  double total = 0;
  for (std::size_t c = 0; c < C; ++c) {
    double dot = 0, pp = 0, tt = 0;
    for (std::size_t t = 0; t < s[0]; ++t) {
      const std::size_t base = (t * C + c) * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        const double a = pred[base + j], b = truth[base + j];
        dot += a * b;
        pp += a * a;
        tt += b * b;
      }
    }
    if (pp > 0 && tt > 0) {
      total += dot / std::sqrt(pp * tt);
    } else {
      out.defined = false;
    }
  }
  out.value = total / static_cast<double>(C);
  return out;
}

/// ||pred - true||_F / ||true||_F over all axes.
template <typename T>
double rfne(const Tensor<T>& pred, const Tensor<T>& truth) {
  detail::require_pair(pred, truth, "rfne");
  double num = 0, den = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(truth[i]);
    num += d * d;
    den += static_cast<double>(truth[i]) * static_cast<double>(truth[i]);
  }
  if (den == 0) return num == 0 ? 0.0 : std::numeric_limits<double>::infinity();
  return std::sqrt(num / den);
}

/// Grid points whose true peak falls inside the input window are excluded
/// from peak-time error maps. `window_steps` counts input steps that precede
/// the evaluated sequence's step 0 in `truth_full` (i.e. truth_full covers
/// input + forecast).
struct PeakTimeError {
  double mean_abs_steps = 0;   // over included points
  std::size_t included = 0;
  std::vector<std::uint8_t> mask;  // 1 = included
};

template <typename T>
PeakTimeError t_pgv_error(const Tensor<T>& pred_full, const Tensor<T>& truth_full,
                          std::size_t window_steps) {
  detail::require_pair(pred_full, truth_full, "t_pgv_error");
  const auto p = peak_ground_velocity(pred_full);
  const auto t = peak_ground_velocity(truth_full);
  PeakTimeError out;
  out.mask.assign(t.t_pgv.size(), 0);
  double acc = 0;
  for (std::size_t j = 0; j < t.t_pgv.size(); ++j) {
    if (t.t_pgv[j] < window_steps) continue;
    out.mask[j] = 1;
    ++out.included;
    acc += std::abs(static_cast<double>(p.t_pgv[j]) - static_cast<double>(t.t_pgv[j]));
  }
  out.mean_abs_steps = out.included ? acc / static_cast<double>(out.included) : 0.0;
  return out;
}

/// Mean absolute difference of ln(PGV) over grid points with positive PGV on both sides.
template <typename T>
double log_pgv_error(const Tensor<T>& pred, const Tensor<T>& truth) {
  const auto a = pgv(pred);
  const auto b = pgv(truth);
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    if (a[j] > 0 && b[j] > 0) {
      acc += std::abs(std::log(static_cast<double>(a[j])) - std::log(static_cast<double>(b[j])));
      ++n;
    }
  }
  return n ? acc / static_cast<double>(n) : 0.0;
}

/// Machine-readable metric line: `metric=<name> value=<float>`.
inline std::string metric_line(const std::string& name, double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", value);
  return "metric=" + name + " value=" + buf;
}

}  // namespace wavecast
