#pragma once

// Training, evaluation, forecasting and bootstrap ensembles for WaveCastNet
// on simulated datasets.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "wavecast/autodiff.hpp"
#include "wavecast/checkpoint.hpp"
#include "wavecast/errors.hpp"
#include "wavecast/evaluation.hpp"
#include "wavecast/metrics.hpp"
#include "wavecast/network.hpp"
#include "wavecast/parallel.hpp"
#include "wavecast/wavesim.hpp"

namespace wavecast {

enum class LossKind { huber, l2 };

inline const char* to_string(LossKind k) { return k == LossKind::huber ? "huber" : "l2"; }

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "huber") return LossKind::huber;
  if (s == "l2") return LossKind::l2;
  throw ConfigError("unknown loss: " + s);
}

struct TrainConfig {
  NetworkConfig net;
  double learning_rate = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, adam_epsilon = 1e-8;
  double clip_norm = 5.0;
  std::size_t batch_size = 4;
  std::size_t epochs = 10;
  LossKind loss = LossKind::huber;
  double huber_delta = kHuberDelta;
  std::uint64_t seed = 0;
  double mask_ratio = 0.0;
  std::string dataset;  // manifest path
  double validation_fraction = 0.1;
  std::uint64_t split_seed = 0;     // validation selection; shared by ensemble members
  std::size_t eval_start = 0;       // first input frame of the evaluation window
  bool random_offsets = true;       // training windows may start anywhere
  double short_window_prob = 0.0;   // share of samples with noise-padded short inputs
  std::size_t min_observed = 1;     // shortest observed prefix in such samples
  double teacher_forcing = 0.0;     // scheduled sampling probability per decoder step
  std::size_t samples_per_epoch = 0;  // 0: one per training event
  double time_budget = 0.0;           // seconds, 0 = unlimited
  std::size_t threads = 1;

  void validate() const {
    net.validate();
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(mask_ratio >= 0 && mask_ratio < 1)) throw ConfigError("mask_ratio must be in [0,1)");
    if (!(huber_delta > 0)) throw ConfigError("huber_delta must be > 0");
    if (!(validation_fraction >= 0 && validation_fraction < 1)) {
      throw ConfigError("validation_fraction must be in [0,1)");
    }
    if (!(clip_norm >= 0)) throw ConfigError("clip_norm must be >= 0");
    if (!(short_window_prob >= 0 && short_window_prob <= 1)) {
      throw ConfigError("short_window_prob must be in [0,1]");
    }
    if (!(teacher_forcing >= 0 && teacher_forcing <= 1)) {
      throw ConfigError("teacher_forcing must be in [0,1]");
    }
    if (min_observed < 1 || min_observed > net.window) {
      throw ConfigError("min_observed must lie in [1, window]");
    }
  }
};

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with optional global-norm gradient clipping over learnable entries.
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(const ParamStore<T>& store, double lr, double b1, double b2, double eps, double clip)
      : lr_(lr), b1_(b1), b2_(b2), eps_(eps), clip_(clip), m_(store.gradient_buffers()),
        v_(store.gradient_buffers()) {}

  /// Returns the gradient norm before clipping.
  double step(ParamStore<T>& store, const std::vector<Tensor<T>>& grads) {
    double sq = 0;
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (!store.at(i).learnable) continue;
      for (auto g : grads[i].values()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    const double scale = (clip_ > 0 && norm > clip_) ? clip_ / norm : 1.0;
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < grads.size(); ++i) {
      auto& e = store.at(i);
      if (!e.learnable) continue;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < e.value.size(); ++j) {
        const double g = static_cast<double>(grads[i][j]) * scale;
        m[j] = static_cast<T>(b1_ * m[j] + (1 - b1_) * g);
        v[j] = static_cast<T>(b2_ * v[j] + (1 - b2_) * g * g);
        const double mh = m[j] / c1, vh = v[j] / c2;
        e.value[j] = static_cast<T>(e.value[j] - lr_ * mh / (std::sqrt(vh) + eps_));
      }
    }
    return norm;
  }

  std::uint64_t steps() const noexcept { return t_; }
  std::vector<Tensor<T>>& first_moments() noexcept { return m_; }
  std::vector<Tensor<T>>& second_moments() noexcept { return v_; }
  void set_steps(std::uint64_t t) noexcept { t_ = t; }

 private:
  double lr_ = 1e-3, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8, clip_ = 0;
  std::vector<Tensor<T>> m_, v_;
  std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Data

struct EventData {
  EventRecord record;
  Tensor<float> frames;  // physical units [T,C,H,W]
};

inline std::vector<EventData> load_events(const DatasetManifest& m,
                                          const std::vector<const EventRecord*>& which) {
  std::vector<EventData> out;
  for (const auto* e : which) {
    auto seq = load_sequence(m.resolve(*e));
    if (Shape(seq.frames.shape().begin() + 1, seq.frames.shape().end()) != m.snapshot) {
      throw DimensionError("event " + std::to_string(e->id) + " does not match the manifest snapshot");
    }
    out.push_back(EventData{*e, std::move(seq.frames)});
  }
  return out;
}

/// Seeded selection of ceil-rounded validation_fraction of training events;
/// each event is a distinct source location.
inline std::vector<std::size_t> validation_indices(std::size_t n_train, double fraction,
                                                   std::uint64_t seed) {
  if (fraction <= 0 || n_train < 2) return {};
  auto n_val = static_cast<std::size_t>(std::lround(fraction * double(n_train)));
  n_val = std::clamp<std::size_t>(n_val, 1, n_train - 1);
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(n_val);
  std::sort(order.begin(), order.end());
  return order;
}

/// Frames [start, start+count) of a sequence.
template <typename T>
Tensor<T> frame_range(const Tensor<T>& seq, std::size_t start, std::size_t count) {
  if (start + count > seq.dim(0)) {
    throw DimensionError("window [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") exceeds sequence length " + std::to_string(seq.dim(0)));
  }
  Shape s = seq.shape();
  s[0] = count;
  const std::size_t frame = seq.size() / seq.dim(0);
  std::vector<T> v(seq.data() + start * frame, seq.data() + (start + count) * frame);
  return Tensor<T>(s, std::move(v));
}

/// Population std per channel over every frame of every sequence.
inline std::vector<float> channel_scales(const std::vector<EventData>& events) {
  if (events.empty()) return {};
  const std::size_t C = events[0].frames.dim(1);
  std::vector<double> sum(C, 0), sq(C, 0);
  double n = 0;
  for (const auto& e : events) {
    const auto& f = e.frames;
    const std::size_t plane = f.dim(2) * f.dim(3);
    for (std::size_t t = 0; t < f.dim(0); ++t)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t j = 0; j < plane; ++j) {
          const double v = f[(t * C + c) * plane + j];
          sum[c] += v;
          sq[c] += v * v;
        }
    n += static_cast<double>(f.dim(0) * plane);
  }
  std::vector<float> out(C);
  for (std::size_t c = 0; c < C; ++c) {
    const double m = sum[c] / n;
    out[c] = static_cast<float>(std::sqrt(std::max(0.0, sq[c] / n - m * m)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trained model bundle

/// A network together with the normalization it was trained under.
struct ModelBundle {
  std::unique_ptr<WaveCastNet<float>> net;
  NormStats<float> norm;
  std::vector<float> channel_scale;  // reference per-channel std of training data

  const NetworkConfig& config() const { return net->config(); }

  /// Physical window [J,C,H,W] -> physical forecast [K,C,H,W].
  Tensor<float> predict_physical(const Tensor<float>& window,
                                 const std::vector<std::uint8_t>* mask = nullptr) const {
    return denormalize(net->predict(normalize(window, norm), mask), norm);
  }

  Predictor<float> predictor(const std::vector<std::uint8_t>* mask = nullptr) const {
    return [this, mask](const Tensor<float>& x) { return predict_physical(x, mask); };
  }
};

inline void put_network_meta(Checkpoint& ck, const NetworkConfig& c) {
  ck.set("cell", to_string(c.cell_type));
  ck.set("reset_gate", c.reset_gate ? "true" : "false");
  ck.set("peephole", c.peephole ? "true" : "false");
  ck.set("layers", std::to_string(c.layers));
  ck.set("latent_channels", std::to_string(c.latent_channels));
  ck.set("channels", std::to_string(c.channels));
  ck.set("height", std::to_string(c.height));
  ck.set("width", std::to_string(c.width));
  ck.set("window", std::to_string(c.window));
  ck.set("horizon", std::to_string(c.horizon));
  ck.set("embedding", to_string(c.embedding));
  ck.set("station_count", std::to_string(c.station_count));
  ck.set("sparse_hidden", std::to_string(c.sparse_hidden));
  ck.set("cell_kernel", std::to_string(c.cell_kernel));
  std::ostringstream dt;
  dt.precision(17);
  dt << c.cell_dt;
  ck.set("cell_dt", dt.str());
}

inline NetworkConfig network_from_meta(const Checkpoint& ck) {
  auto count = [&](const char* k) {
    try {
      return static_cast<std::size_t>(std::stoull(ck.get(k)));
    } catch (const std::invalid_argument&) {
      throw FormatError(std::string("checkpoint meta '") + k + "' is not an integer");
    }
  };
  NetworkConfig c;
  c.cell_type = parse_cell_type(ck.get("cell"));
  c.reset_gate = ck.get("reset_gate") == "true";
  c.peephole = ck.get("peephole") == "true";
  c.layers = count("layers");
  c.latent_channels = count("latent_channels");
  c.channels = count("channels");
  c.height = count("height");
  c.width = count("width");
  c.window = count("window");
  c.horizon = count("horizon");
  c.embedding = parse_embedding_mode(ck.get("embedding"));
  c.station_count = count("station_count");
  c.sparse_hidden = count("sparse_hidden");
  c.cell_kernel = count("cell_kernel");
  c.cell_dt = std::stod(ck.get("cell_dt"));
  return c;
}

inline void put_model(Checkpoint& ck, const ModelBundle& m) {
  put_network_meta(ck, m.config());
  for (const auto& e : m.net->params().entries()) ck.put("param." + e.name, e.value);
  ck.put("norm.mean", m.norm.mean);
  ck.put("norm.std", m.norm.std);
  ck.put("norm.channel_scale",
         Tensor<float>(Shape{m.channel_scale.size()}, m.channel_scale));
  const auto& st = m.net->stations();
  if (st.size() == 0) return;
  Tensor<float> pts(Shape{st.size(), 2});
  for (std::size_t i = 0; i < st.size(); ++i) {
    pts[2 * i] = static_cast<float>(st.points[i].first);
    pts[2 * i + 1] = static_cast<float>(st.points[i].second);
  }
  ck.put("stations", pts);
}

inline ModelBundle model_from_checkpoint(const Checkpoint& ck) {
  const NetworkConfig c = network_from_meta(ck);
  StationLayout st;
  if (ck.has_tensor("stations")) {
    const auto& pts = ck.tensor("stations");
    for (std::size_t i = 0; i < pts.dim(0); ++i) {
      st.points.emplace_back(static_cast<std::size_t>(pts[2 * i]),
                             static_cast<std::size_t>(pts[2 * i + 1]));
    }
  }
  ModelBundle m;
  m.net = std::make_unique<WaveCastNet<float>>(c, 0, st);
  for (auto& e : m.net->params().entries()) {
    const auto& t = ck.tensor("param." + e.name);
    if (t.shape() != e.value.shape()) {
      throw DimensionError("checkpoint tensor " + e.name + " has shape " + shape_string(t.shape()) +
                           ", model expects " + shape_string(e.value.shape()));
    }
    e.value = t;
  }
  m.norm.mean = ck.tensor("norm.mean");
  m.norm.std = ck.tensor("norm.std");
  if (m.norm.mean.shape() != c.snapshot_shape() || m.norm.std.shape() != c.snapshot_shape()) {
    throw DimensionError("checkpoint normalization does not match the snapshot shape");
  }
  const auto& cs = ck.tensor("norm.channel_scale");
  m.channel_scale.assign(cs.values().begin(), cs.values().end());
  return m;
}

inline ModelBundle load_model(const std::string& path) {
  return model_from_checkpoint(load_checkpoint(path));
}

// ---------------------------------------------------------------------------
// Trainer

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double grad_norm = 0;  // mean pre-clip norm
  double seconds = 0;
  bool improved = false;
};

/// One training sample: which event, where its window starts, how many
/// leading input frames are replaced with padding noise, and which decoder
/// steps are teacher-forced.
struct SampleSpec {
  std::size_t event = 0;
  std::size_t start = 0;
  std::size_t padded = 0;
  std::uint64_t noise_seed = 0;
  std::vector<std::uint8_t> teacher;
};

class Trainer {
 public:
  using Logger = std::function<void(const std::string&)>;

  /// `train_override`, when non-empty, lists training-event indices (into
  /// the non-validation training events, repeats allowed) instead of using
  /// each once; used for bootstrap resamples.
  Trainer(const TrainConfig& cfg, const DatasetManifest& manifest,
          std::vector<std::size_t> train_override = {})
      : cfg_(cfg) {
    cfg_.validate();
    const Shape snap = manifest.snapshot;
    if (snap != cfg_.net.snapshot_shape()) {
      throw DimensionError("dataset snapshot " + shape_string(snap) +
                           " does not match the network input " +
                           shape_string(cfg_.net.snapshot_shape()));
    }
    auto all_train = load_events(manifest, manifest.split("train"));
    if (all_train.empty()) throw FormatError("dataset has no training events");
    const auto val_idx = validation_indices(all_train.size(), cfg_.validation_fraction, cfg_.split_seed);
    std::vector<bool> is_val(all_train.size(), false);
    for (auto i : val_idx) is_val[i] = true;
    for (std::size_t i = 0; i < all_train.size(); ++i) {
      (is_val[i] ? val_ : pool_).push_back(std::move(all_train[i]));
    }
    const std::size_t need = cfg_.net.window + cfg_.net.horizon;
    for (const auto* set : {&pool_, &val_}) {
      for (const auto& e : *set) {
        if (e.frames.dim(0) < cfg_.eval_start + need) {
          throw DimensionError("event " + std::to_string(e.record.id) + " has " +
                               std::to_string(e.frames.dim(0)) + " frames; window needs " +
                               std::to_string(cfg_.eval_start + need));
        }
      }
    }
    if (train_override.empty()) {
      order_.resize(pool_.size());
      std::iota(order_.begin(), order_.end(), 0);
    } else {
      for (auto i : train_override) {
        if (i >= pool_.size()) throw UsageError("bootstrap index out of range");
      }
      order_ = std::move(train_override);
    }
    std::vector<Tensor<float>> seqs;
    std::vector<EventData> fit_set;
    for (auto i : order_) {
      seqs.push_back(pool_[i].frames);
      fit_set.push_back(pool_[i]);
    }
    model_.norm = fit_norm_stats(seqs);
    model_.channel_scale = channel_scales(fit_set);
    model_.net = std::make_unique<WaveCastNet<float>>(cfg_.net, cfg_.seed);
    init_optimizer();
  }

  ModelBundle& model() noexcept { return model_; }
  const ModelBundle& model() const noexcept { return model_; }
  const TrainConfig& config() const noexcept { return cfg_; }
  std::size_t epochs_done() const noexcept { return epoch_; }
  double best_val_loss() const noexcept { return best_val_; }
  const std::vector<EventData>& validation_events() const noexcept { return val_; }
  const std::vector<EventData>& training_events() const noexcept { return pool_; }

  /// Samples of epoch `e`: a deterministic function of (seed, e).
  std::vector<SampleSpec> plan_epoch(std::size_t e) const {
    std::mt19937_64 rng(cfg_.seed * 0x100000001B3ULL + 0x51ED27A1ULL + e);
    const std::size_t n = cfg_.samples_per_epoch ? cfg_.samples_per_epoch : order_.size();
    std::vector<std::size_t> events;
    while (events.size() < n) {
      auto perm = order_;
      std::shuffle(perm.begin(), perm.end(), rng);
      events.insert(events.end(), perm.begin(), perm.end());
    }
    events.resize(n);
    const std::size_t J = cfg_.net.window, K = cfg_.net.horizon;
    std::vector<SampleSpec> out;
    std::uniform_real_distribution<double> u(0, 1);
    for (auto ev : events) {
      SampleSpec s;
      s.event = ev;
      const std::size_t T = pool_[ev].frames.dim(0);
      s.start = cfg_.eval_start;
      if (cfg_.random_offsets) {
        std::uniform_int_distribution<std::size_t> pick(0, T - J - K);
        s.start = pick(rng);
      }
      if (cfg_.short_window_prob > 0 && u(rng) < cfg_.short_window_prob) {
        std::uniform_int_distribution<std::size_t> keep(cfg_.min_observed, J);
        s.padded = J - keep(rng);
      }
      s.noise_seed = rng();
      if (cfg_.teacher_forcing > 0) {
        s.teacher.resize(K, 0);
        for (std::size_t k = 1; k < K; ++k) s.teacher[k] = u(rng) < cfg_.teacher_forcing;
      }
      out.push_back(std::move(s));
    }
    return out;
  }

  /// Normalized (input, target) pair for a sample.
  std::pair<Tensor<float>, Tensor<float>> make_pair(const SampleSpec& s) const {
    const auto& f = pool_[s.event].frames;
    const std::size_t J = cfg_.net.window, K = cfg_.net.horizon;
    Tensor<float> in = normalize(frame_range(f, s.start, J), model_.norm);
    if (s.padded) {
      std::mt19937_64 rng(s.noise_seed);
      std::normal_distribution<double> n(0.0, kPaddingNoiseStd);
      const std::size_t frame = in.size() / J;
      for (std::size_t i = 0; i < s.padded * frame; ++i) in[i] = static_cast<float>(n(rng));
    }
    return {std::move(in), normalize(frame_range(f, s.start + J, K), model_.norm)};
  }

  /// Runs epochs until `cfg.epochs` are done or the time budget would be
  /// exceeded. `on_epoch` sees each finished epoch (e.g. to checkpoint).
  std::vector<EpochLog> run(const Logger& log = {},
                            const std::function<void(const EpochLog&)>& on_epoch = {}) {
    std::vector<EpochLog> logs;
    const auto t0 = std::chrono::steady_clock::now();
    double last_epoch = 0;
    while (epoch_ < cfg_.epochs) {
      const double elapsed =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (cfg_.time_budget > 0 && epoch_ > 0 && elapsed + last_epoch > cfg_.time_budget) {
        if (log) log("time budget reached after " + std::to_string(epoch_) + " epochs");
        break;
      }
      EpochLog e = train_epoch();
      last_epoch = e.seconds;
      logs.push_back(e);
      if (log) {
        std::ostringstream os;
        os << "epoch " << e.epoch << " train_loss " << e.train_loss << " val_loss " << e.val_loss
           << " grad_norm " << e.grad_norm << " seconds " << e.seconds
           << (e.improved ? " best" : "");
        log(os.str());
      }
      if (on_epoch) on_epoch(e);
    }
    return logs;
  }

  EpochLog train_epoch() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto plan = plan_epoch(epoch_);
    auto& store = model_.net->params();
    const std::size_t B = cfg_.batch_size;
    const std::size_t threads = resolve_threads(cfg_.threads);
    double loss_sum = 0, norm_sum = 0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < plan.size(); b0 += B) {
      const std::size_t nb = std::min(B, plan.size() - b0);
      std::vector<std::vector<Tensor<float>>> grads(nb);
      std::vector<std::vector<BatchStats<float>>> stats(nb);
      std::vector<double> losses(nb);
      parallel_for(nb, threads, [&](std::size_t i) {
        const auto& spec = plan[b0 + i];
        auto [in, target] = make_pair(spec);
        Tape<float> tape;
        ForwardOptions<float> opt;
        opt.training = true;
        opt.bn_stats = &stats[i];
        std::vector<std::uint8_t> mask;
        if (cfg_.net.embedding == EmbeddingMode::sparse && cfg_.mask_ratio > 0) {
          std::mt19937_64 mrng(spec.noise_seed ^ 0xA5A5A5A5ULL);
          mask = random_station_mask(cfg_.net.station_count, cfg_.mask_ratio, mrng);
          opt.mask = &mask;
        }
        if (!spec.teacher.empty()) {
          opt.teacher = &target;
          opt.teacher_steps = &spec.teacher;
        }
        Var<float> pred = model_.net->forward(tape, in, opt);
        Var<float> loss = cfg_.loss == LossKind::huber
                              ? huber_loss(pred, target, static_cast<float>(cfg_.huber_delta))
                              : l2_loss(pred, target);
        losses[i] = loss.value()[0];
        tape.backward(loss);
        grads[i] = store.gradient_buffers();
        tape.accumulate_param_grads(store, grads[i]);
      });
      auto total = store.gradient_buffers();
      for (std::size_t i = 0; i < nb; ++i) {
        if (!std::isfinite(losses[i])) {
          throw NumericError("non-finite training loss at epoch " + std::to_string(epoch_ + 1));
        }
        loss_sum += losses[i];
        for (std::size_t p = 0; p < total.size(); ++p)
          for (std::size_t j = 0; j < total[p].size(); ++j) total[p][j] += grads[i][p][j];
      }
      const float inv = 1.0f / static_cast<float>(nb);
      for (auto& g : total)
        for (auto& v : g.values()) v *= inv;
      norm_sum += adam_.step(store, total);
      for (auto& s : stats) model_.net->apply_bn_stats(s);
      ++batches;
    }
    ++epoch_;
    EpochLog e;
    e.epoch = epoch_;
    e.train_loss = plan.empty() ? 0 : loss_sum / static_cast<double>(plan.size());
    e.grad_norm = batches ? norm_sum / static_cast<double>(batches) : 0;
    e.val_loss = validation_loss();
    if (!std::isfinite(e.val_loss)) throw NumericError("non-finite validation loss");
    if (e.val_loss < best_val_) {
      best_val_ = e.val_loss;
      e.improved = true;
    }
    e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return e;
  }

  /// Loss on the evaluation window of every validation event (training
  /// events when there is no validation split).
  double validation_loss() const {
    const auto& set = val_.empty() ? pool_ : val_;
    const std::size_t J = cfg_.net.window, K = cfg_.net.horizon;
    std::vector<double> losses(set.size());
    parallel_for(set.size(), resolve_threads(cfg_.threads), [&](std::size_t i) {
      const auto& f = set[i].frames;
      auto in = normalize(frame_range(f, cfg_.eval_start, J), model_.norm);
      auto target = normalize(frame_range(f, cfg_.eval_start + J, K), model_.norm);
      auto pred = model_.net->predict(in);
      losses[i] = cfg_.loss == LossKind::huber ? loss_huber(pred, target, cfg_.huber_delta)
                                               : loss_l2(pred, target);
    });
    double s = 0;
    for (double l : losses) s += l;
    return set.empty() ? 0 : s / static_cast<double>(set.size());
  }

  /// Full training state: model, optimizer moments, epoch and best loss.
  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.set("kind", "model");
    ck.set("epoch", std::to_string(epoch_));
    ck.set("adam_steps", std::to_string(adam_.steps()));
    std::ostringstream bv;
    bv.precision(17);
    bv << best_val_;
    ck.set("best_val_loss", bv.str());
    ck.set("seed", std::to_string(cfg_.seed));
    put_model(ck, model_);
    auto& self = const_cast<Trainer&>(*this);
    const auto& entries = model_.net->params().entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (!entries[i].learnable) continue;
      ck.put("adam.m." + entries[i].name, self.adam_.first_moments()[i]);
      ck.put("adam.v." + entries[i].name, self.adam_.second_moments()[i]);
    }
    return ck;
  }

  /// Restores a state written by checkpoint(); the data split is recomputed
  /// from the config, so resume with the same dataset and seed.
  void resume(const Checkpoint& ck) {
    ModelBundle m = model_from_checkpoint(ck);
    const auto& a = m.config();
    const auto& b = cfg_.net;
    if (a.latent_channels != b.latent_channels || a.layers != b.layers || a.window != b.window ||
        a.horizon != b.horizon || a.cell_type != b.cell_type || a.height != b.height ||
        a.width != b.width || a.embedding != b.embedding) {
      throw ConfigError("checkpoint architecture differs from the training config");
    }
    model_ = std::move(m);
    init_optimizer();
    auto& entries = model_.net->params().entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (!entries[i].learnable) continue;
      if (ck.has_tensor("adam.m." + entries[i].name)) {
        adam_.first_moments()[i] = ck.tensor("adam.m." + entries[i].name);
        adam_.second_moments()[i] = ck.tensor("adam.v." + entries[i].name);
      }
    }
    adam_.set_steps(ck.has("adam_steps") ? std::stoull(ck.get("adam_steps")) : 0);
    epoch_ = ck.has("epoch") ? std::stoull(ck.get("epoch")) : 0;
    best_val_ = ck.has("best_val_loss") ? std::stod(ck.get("best_val_loss"))
                                        : std::numeric_limits<double>::infinity();
  }

 private:
  void init_optimizer() {
    adam_ = Adam<float>(model_.net->params(), cfg_.learning_rate, cfg_.beta1, cfg_.beta2,
                        cfg_.adam_epsilon, cfg_.clip_norm);
  }

  TrainConfig cfg_;
  std::vector<EventData> pool_, val_;
  std::vector<std::size_t> order_;
  ModelBundle model_;
  Adam<float> adam_;
  std::size_t epoch_ = 0;
  double best_val_ = std::numeric_limits<double>::infinity();
};

// ---------------------------------------------------------------------------
// Evaluation

/// One-window cases starting at `start`: physical input [start, start+J),
/// physical truth [start+J, start+J+K).
inline std::vector<ForecastCase<float>> window_cases(const std::vector<EventData>& events,
                                                     const NetworkConfig& c, std::size_t start) {
  std::vector<ForecastCase<float>> out;
  for (const auto& e : events) {
    ForecastCase<float> fc;
    fc.id = e.record.id;
    fc.input = frame_range(e.frames, start, c.window);
    fc.truth = frame_range(e.frames, start + c.window, c.horizon);
    out.push_back(std::move(fc));
  }
  return out;
}

struct EvaluationResult {
  EvalReport report;
  std::vector<PeakTimeError> peak_time;  // per event
  double peak_time_mean = 0;
};

/// Scores the one-window forecast on each event; peak-time errors compare the
/// full [input ; forecast] sequence with the truth and skip in-window peaks.
inline EvaluationResult evaluate_model(const ModelBundle& m, const std::vector<EventData>& events,
                                       std::size_t start, std::size_t threads = 1) {
  const auto cases = window_cases(events, m.config(), start);
  EvaluationResult r;
  r.report = evaluate_cases(m.predictor(), cases, threads);
  r.peak_time.resize(cases.size());
  const std::size_t J = m.config().window;
  parallel_for(cases.size(), threads, [&](std::size_t i) {
    const auto pred = m.predict_physical(cases[i].input);
    Shape s = cases[i].input.shape();
    s[0] += pred.dim(0);
    std::vector<float> full(cases[i].input.values().begin(), cases[i].input.values().end());
    full.insert(full.end(), pred.values().begin(), pred.values().end());
    std::vector<float> truth(cases[i].input.values().begin(), cases[i].input.values().end());
    truth.insert(truth.end(), cases[i].truth.values().begin(), cases[i].truth.values().end());
    r.peak_time[i] = t_pgv_error(Tensor<float>(s, std::move(full)), Tensor<float>(s, std::move(truth)), J);
  });
  double acc = 0;
  for (const auto& p : r.peak_time) acc += p.mean_abs_steps;
  r.peak_time_mean = r.peak_time.empty() ? 0 : acc / static_cast<double>(r.peak_time.size());
  return r;
}

/// Forecast from the last `observed` frames of each event's input window,
/// left-padded with noise up to J. Cases are the same targets as
/// window_cases(events, c, start).
inline EvalReport evaluate_short_inputs(const ModelBundle& m, const std::vector<EventData>& events,
                                        std::size_t start, std::size_t observed,
                                        std::uint64_t seed, std::size_t threads = 1) {
  const auto& c = m.config();
  if (observed < 1 || observed > c.window) throw UsageError("observed must lie in [1, J]");
  const auto cases = window_cases(events, c, start);
  Predictor<float> predict = [&](const Tensor<float>& x) {
    auto prefix = normalize(frame_range(x, c.window - observed, observed), m.norm);
    auto f = forecast_iterative(*m.net, prefix, static_cast<long>(c.horizon), seed);
    return denormalize(f.frames, m.norm);
  };
  return evaluate_cases(predict, cases, threads);
}

// ---------------------------------------------------------------------------
// Ensembles

struct EnsembleConfig {
  std::size_t members = 8;
  std::uint64_t resample_seed = 0;
  bool identical_members = false;  // same seed and resample for every member
  TrainConfig base;

  void validate() const {
    if (members < 2) throw ConfigError("ensemble needs at least 2 members");
    base.validate();
  }

  std::uint64_t member_seed(std::size_t m) const {
    return identical_members ? base.seed : base.seed + m;
  }

  /// With-replacement resample of n training-event indices for member m.
  std::vector<std::size_t> resample(std::size_t m, std::size_t n) const {
    std::mt19937_64 rng(identical_members ? resample_seed : resample_seed + 0x632BE5ABULL * (m + 1));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<std::size_t> out(n);
    for (auto& v : out) v = pick(rng);
    return out;
  }
};

struct EnsembleMaps {
  Tensor<float> wave_mean, wave_std;      // [K,C,H,W]
  Tensor<float> ln_pgv_mean, ln_pgv_std;  // [H,W]
  Tensor<float> t_pgv_mean, t_pgv_std;    // [H,W], steps
};

inline constexpr double kPgvFloor = 1e-12;

namespace detail {

inline void mean_std(const std::vector<const Tensor<float>*>& xs, Tensor<float>& mean,
                     Tensor<float>& sd) {
  const std::size_t n = xs[0]->size();
  mean = Tensor<float>(xs[0]->shape());
  sd = Tensor<float>(xs[0]->shape());
  const double M = static_cast<double>(xs.size());
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0;
    for (const auto* x : xs) s += (*x)[j];
    const double mu = s / M;
    double v = 0;
    for (const auto* x : xs) v += ((*x)[j] - mu) * ((*x)[j] - mu);
    mean[j] = static_cast<float>(mu);
    sd[j] = static_cast<float>(std::sqrt(v / M));
  }
}

}  // namespace detail

/// Per-point mean and population std across member forecasts [K,C,H,W].
inline EnsembleMaps ensemble_maps(const std::vector<Tensor<float>>& forecasts) {
  if (forecasts.empty()) throw UsageError("ensemble_maps: no forecasts");
  for (const auto& f : forecasts) {
    if (f.shape() != forecasts[0].shape()) throw DimensionError("ensemble_maps: shape mismatch");
  }
  EnsembleMaps out;
  std::vector<const Tensor<float>*> ptrs;
  std::vector<Tensor<float>> lnp, tp;
  for (const auto& f : forecasts) {
    ptrs.push_back(&f);
    auto maps = peak_ground_velocity(f);
    Tensor<float> l(Shape{maps.height, maps.width}), t(Shape{maps.height, maps.width});
    for (std::size_t j = 0; j < l.size(); ++j) {
      l[j] = static_cast<float>(std::log(std::max(static_cast<double>(maps.pgv[j]), kPgvFloor)));
      t[j] = static_cast<float>(maps.t_pgv[j]);
    }
    lnp.push_back(std::move(l));
    tp.push_back(std::move(t));
  }
  detail::mean_std(ptrs, out.wave_mean, out.wave_std);
  std::vector<const Tensor<float>*> lp, tpp;
  for (const auto& x : lnp) lp.push_back(&x);
  for (const auto& x : tp) tpp.push_back(&x);
  detail::mean_std(lp, out.ln_pgv_mean, out.ln_pgv_std);
  detail::mean_std(tpp, out.t_pgv_mean, out.t_pgv_std);
  return out;
}

}  // namespace wavecast
