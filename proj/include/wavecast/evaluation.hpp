#pragma once

// Scoring of one-window forecasts: per-case and aggregate ACC, RFNE and
// ln(PGV) error.

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "wavecast/metrics.hpp"
#include "wavecast/parallel.hpp"
#include "wavecast/tensor.hpp"

namespace wavecast {

/// `input` is what the model sees; `truth` is compared against the returned
/// prediction in whatever units the predictor produces.
template <typename T>
struct ForecastCase {
  std::size_t id = 0;
  Tensor<T> input;  // [J,C,H,W]
  Tensor<T> truth;  // [K,C,H,W]
};

struct CaseMetrics {
  std::size_t id = 0;
  double acc = 0;
  bool acc_defined = true;
  double rfne = 0;
  double log_pgv = 0;
};

struct EvalReport {
  std::vector<CaseMetrics> cases;
  CaseMetrics aggregate;  // mean over cases

  std::vector<std::string> metric_lines(const std::string& prefix = "") const {
    return {metric_line(prefix + "acc", aggregate.acc), metric_line(prefix + "rfne", aggregate.rfne),
            metric_line(prefix + "log_pgv_error", aggregate.log_pgv)};
  }
};

template <typename T>
CaseMetrics score_forecast(const Tensor<T>& pred, const Tensor<T>& truth) {
  CaseMetrics m;
  const auto a = acc(pred, truth);
  m.acc = a.value;
  m.acc_defined = a.defined;
  m.rfne = rfne(pred, truth);
  m.log_pgv = log_pgv_error(pred, truth);
  return m;
}

inline CaseMetrics mean_metrics(const std::vector<CaseMetrics>& rows) {
  CaseMetrics out;
  if (rows.empty()) return out;
  for (const auto& r : rows) {
    out.acc += r.acc;
    out.rfne += r.rfne;
    out.log_pgv += r.log_pgv;
    out.acc_defined = out.acc_defined && r.acc_defined;
  }
  const double n = static_cast<double>(rows.size());
  out.acc /= n;
  out.rfne /= n;
  out.log_pgv /= n;
  return out;
}

template <typename T>
using Predictor = std::function<Tensor<T>(const Tensor<T>& input)>;

/// Optional input transform applied per case before prediction.
template <typename T>
using InputTransform = std::function<Tensor<T>(const Tensor<T>& input, std::size_t case_index)>;

/// Scores every case; the result does not depend on the thread count.
template <typename T>
EvalReport evaluate_cases(const Predictor<T>& predict, const std::vector<ForecastCase<T>>& cases,
                          std::size_t threads = 1, const InputTransform<T>& transform = {}) {
  EvalReport rep;
  rep.cases.resize(cases.size());
  parallel_for(cases.size(), threads, [&](std::size_t i) {
    const auto& c = cases[i];
    Tensor<T> pred = transform ? predict(transform(c.input, i)) : predict(c.input);
    rep.cases[i] = score_forecast(pred, c.truth);
    rep.cases[i].id = c.id;
  });
  rep.aggregate = mean_metrics(rep.cases);
  return rep;
}

}  // namespace wavecast
