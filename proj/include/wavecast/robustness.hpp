#pragma once

// Input perturbations for stress tests: additive Gaussian noise, two-factor
// correlated noise and per-station latency shifts, plus a sweep that scores a
// predictor under each perturbation level.
//
// Readings are laid out [C, T, S] (channel, time, station). Dense windows
// [T, C, H, W] map to readings with one station per grid point.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "wavecast/errors.hpp"
#include "wavecast/evaluation.hpp"
#include "wavecast/tensor.hpp"

namespace wavecast {

inline constexpr double kNoiseSigma = 0.32;
inline constexpr int kMaxLatencySteps = 4;

enum class PerturbationKind { gaussian_noise, correlated_noise, latency_shift };

inline const char* to_string(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::gaussian_noise: return "gaussian_noise";
    case PerturbationKind::correlated_noise: return "correlated_noise";
    case PerturbationKind::latency_shift: return "latency_shift";
  }
  return "?";
}

inline PerturbationKind parse_perturbation_kind(const std::string& s) {
  if (s == "gaussian_noise" || s == "gaussian") return PerturbationKind::gaussian_noise;
  if (s == "correlated_noise" || s == "correlated") return PerturbationKind::correlated_noise;
  if (s == "latency_shift" || s == "latency") return PerturbationKind::latency_shift;
  throw ConfigError("unknown perturbation kind: " + s);
}

struct PerturbationSpec {
  PerturbationKind kind = PerturbationKind::gaussian_noise;
  double level = 0;  // nu
  std::uint64_t seed = 0;

  void validate() const {
    if (!(level >= 0) || !std::isfinite(level)) throw ConfigError("perturbation level must be >= 0");
  }
};

namespace detail {

inline void require_readings(const Shape& s, const char* what) {
  if (s.size() != 3) {
    throw DimensionError(std::string(what) + ": expected [C,T,S], got " + shape_string(s));
  }
}

}  // namespace detail

/// [T,C,H,W] -> [C,T,H*W].
template <typename T>
Tensor<T> window_to_readings(const Tensor<T>& w) {
  detail::require_sequence(w.shape(), "window_to_readings");
  const std::size_t Tn = w.dim(0), C = w.dim(1), S = w.dim(2) * w.dim(3);
  Tensor<T> out(Shape{C, Tn, S});
  for (std::size_t t = 0; t < Tn; ++t)
    for (std::size_t c = 0; c < C; ++c)
      std::copy_n(w.data() + (t * C + c) * S, S, out.data() + (c * Tn + t) * S);
  return out;
}

/// Inverse of window_to_readings for a [H, W] grid.
template <typename T>
Tensor<T> readings_to_window(const Tensor<T>& r, std::size_t height, std::size_t width) {
  detail::require_readings(r.shape(), "readings_to_window");
  const std::size_t C = r.dim(0), Tn = r.dim(1), S = r.dim(2);
  if (S != height * width) throw DimensionError("readings_to_window: station count != H*W");
  Tensor<T> out(Shape{Tn, C, height, width});
  for (std::size_t t = 0; t < Tn; ++t)
    for (std::size_t c = 0; c < C; ++c)
      std::copy_n(r.data() + (c * Tn + t) * S, S, out.data() + (t * C + c) * S);
  return out;
}

/// Adds i.i.d. N(0, (0.32 nu)^2) to every element.
template <typename T>
Tensor<T> add_gaussian_noise(const Tensor<T>& readings, double level, std::uint64_t seed) {
  detail::require_readings(readings.shape(), "add_gaussian_noise");
  PerturbationSpec{PerturbationKind::gaussian_noise, level, seed}.validate();
  Tensor<T> out = readings;
  if (level == 0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, kNoiseSigma * level);
  for (auto& v : out.values()) v = static_cast<T>(static_cast<double>(v) + n(rng));
  return out;
}

/// Weights of the shared and station-local noise factors. The defaults keep
/// the per-element std at 0.32 nu and give an inter-station correlation of 0.5.
struct CorrelatedNoiseWeights {
  double common = 1.0 / std::sqrt(2.0);  // alpha
  double local = 1.0 / std::sqrt(2.0);   // beta
};

/// noise[c,t,s] = 0.32 nu (alpha g[c,t] + beta e[c,t,s]) with g, e standard normal.
template <typename T>
Tensor<T> add_correlated_noise(const Tensor<T>& readings, double level, std::uint64_t seed,
                               CorrelatedNoiseWeights w = {}) {
  detail::require_readings(readings.shape(), "add_correlated_noise");
  PerturbationSpec{PerturbationKind::correlated_noise, level, seed}.validate();
  Tensor<T> out = readings;
  if (level == 0) return out;
  const std::size_t C = readings.dim(0), Tn = readings.dim(1), S = readings.dim(2);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  const double scale = kNoiseSigma * level;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t t = 0; t < Tn; ++t) {
      const double g = n(rng);
      T* row = out.data() + (c * Tn + t) * S;
      for (std::size_t s = 0; s < S; ++s) {
        row[s] = static_cast<T>(static_cast<double>(row[s]) + scale * (w.common * g + w.local * n(rng)));
      }
    }
  }
  return out;
}

/// sign(s) * min(ceil|s|, 4) in steps.
inline int latency_steps(double s) {
  if (s == 0 || !std::isfinite(s)) return 0;
  const double m = std::min(std::ceil(std::abs(s)), static_cast<double>(kMaxLatencySteps));
  return s > 0 ? static_cast<int>(m) : -static_cast<int>(m);
}

template <typename T>
struct ShiftedReadings {
  Tensor<T> readings;
  std::vector<int> shifts;  // steps per station; positive delays the series
};

/// Shifts each station's series by latency_steps(nu * z), z ~ N(0, 1).
/// Vacated samples are zero.
template <typename T>
ShiftedReadings<T> latency_shift(const Tensor<T>& readings, double level, std::uint64_t seed) {
  detail::require_readings(readings.shape(), "latency_shift");
  PerturbationSpec{PerturbationKind::latency_shift, level, seed}.validate();
  const std::size_t C = readings.dim(0), Tn = readings.dim(1), S = readings.dim(2);
  ShiftedReadings<T> out{Tensor<T>(readings.shape()), std::vector<int>(S, 0)};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t s = 0; s < S; ++s) out.shifts[s] = latency_steps(level * n(rng));
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t s = 0; s < S; ++s) {
      const long k = out.shifts[s];
      for (std::size_t t = 0; t < Tn; ++t) {
        const long src = static_cast<long>(t) - k;
        if (src < 0 || src >= static_cast<long>(Tn)) continue;
        out.readings[(c * Tn + t) * S + s] = readings[(c * Tn + static_cast<std::size_t>(src)) * S + s];
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> apply_perturbation(const Tensor<T>& readings, const PerturbationSpec& p) {
  switch (p.kind) {
    case PerturbationKind::gaussian_noise: return add_gaussian_noise(readings, p.level, p.seed);
    case PerturbationKind::correlated_noise: return add_correlated_noise(readings, p.level, p.seed);
    case PerturbationKind::latency_shift: return latency_shift(readings, p.level, p.seed).readings;
  }
  throw UsageError("unknown perturbation");
}

/// Perturbs a dense window [T,C,H,W] through its station view. With `unit`
/// ([C,H,W], typically the per-element normalization std) additive noise is
/// drawn in normalized units and scaled back element by element.
template <typename T>
Tensor<T> perturb_window(const Tensor<T>& window, const PerturbationSpec& p,
                         const Tensor<T>* unit = nullptr) {
  if (p.level == 0) return window;
  const std::size_t H = window.dim(2), W = window.dim(3);
  if (!unit || p.kind == PerturbationKind::latency_shift) {
    return readings_to_window(apply_perturbation(window_to_readings(window), p), H, W);
  }
  const std::size_t plane = window.dim(1) * H * W;
  if (unit->size() != plane) throw DimensionError("perturb_window: unit does not match a snapshot");
  Tensor<T> zero(Shape{window.dim(1), window.dim(0), H * W});
  const Tensor<T> noise = readings_to_window(apply_perturbation(zero, p), H, W);
  Tensor<T> out = window;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += noise[i] * (*unit)[i % plane];
  return out;
}

struct SweepRow {
  PerturbationKind kind;
  double level = 0;
  CaseMetrics metrics;
};

/// Scores `predict` on every case under each perturbation in `grid`. Case i
/// of a row uses seed spec.seed + i, so rows are reproducible and
/// independent of the thread count. A zero level leaves inputs untouched.
template <typename T>
std::vector<SweepRow> run_robustness_sweep(const Predictor<T>& predict,
                                           const std::vector<ForecastCase<T>>& cases,
                                           const std::vector<PerturbationSpec>& grid,
                                           std::size_t threads = 1,
                                           const Tensor<T>* unit = nullptr) {
  std::vector<SweepRow> rows;
  for (const auto& p : grid) {
    p.validate();
    InputTransform<T> tf;
    if (p.level > 0) {
      tf = [p, unit](const Tensor<T>& in, std::size_t i) {
        PerturbationSpec q = p;
        q.seed = p.seed + i;
        return perturb_window(in, q, unit);
      };
    }
    rows.push_back(SweepRow{p.kind, p.level, evaluate_cases(predict, cases, threads, tf).aggregate});
  }
  return rows;
}

inline std::string sweep_table(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-18s %8s %10s %10s %14s\n", "kind", "level", "acc", "rfne",
                "log_pgv_error");
  out << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-18s %8.3f %10.6f %10.6f %14.6f\n", to_string(r.kind), r.level,
                  r.metrics.acc, r.metrics.rfne, r.metrics.log_pgv);
    out << buf;
  }
  return out.str();
}

inline std::vector<std::string> sweep_metric_lines(const std::vector<SweepRow>& rows) {
  std::vector<std::string> out;
  for (const auto& r : rows) {
    char lvl[32];
    std::snprintf(lvl, sizeof(lvl), "%g", r.level);
    const std::string tag = std::string(to_string(r.kind)) + "_" + lvl + "_";
    out.push_back(metric_line(tag + "acc", r.metrics.acc));
    out.push_back(metric_line(tag + "rfne", r.metrics.rfne));
    out.push_back(metric_line(tag + "log_pgv_error", r.metrics.log_pgv));
  }
  return out;
}

}  // namespace wavecast
