#pragma once

// WaveCastNet: embedding -> stacked recurrent encoder -> autoregressive
// stacked recurrent decoder -> reconstruction, over windows of wavefield
// snapshots.
//
// Dense embedding: three conv(4x4, stride 2, pad 1) + leaky ReLU + batch-norm
// stages with channels C -> r/4 -> r/2 -> r, so the latent grid is (H/8, W/8).
// Sparse embedding: station readings -> two dense layers (hidden, r*p*q/4)
// -> reshape to (r/4, p, q) -> two 3x3 convs up to r channels.
// Reconstruction: transposed conv (x2) to C*16 channels, then pixel shuffle (x4).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "wavecast/autodiff.hpp"
#include "wavecast/cells.hpp"
#include "wavecast/errors.hpp"
#include "wavecast/tensor.hpp"

namespace wavecast {

enum class EmbeddingMode { dense, sparse };

inline const char* to_string(EmbeddingMode m) {
  return m == EmbeddingMode::dense ? "dense" : "sparse";
}

inline EmbeddingMode parse_embedding_mode(const std::string& s) {
  if (s == "dense") return EmbeddingMode::dense;
  if (s == "sparse") return EmbeddingMode::sparse;
  throw ConfigError("unknown embedding mode: " + s);
}

struct NetworkConfig {
  CellType cell_type = CellType::convlem;
  bool reset_gate = true;
  bool peephole = true;
  std::size_t layers = 2;
  std::size_t latent_channels = 144;
  std::size_t channels = 3;
  std::size_t height = 344;
  std::size_t width = 224;
  std::size_t window = 60;   // J, input steps
  std::size_t horizon = 60;  // K, predicted steps per invocation
  EmbeddingMode embedding = EmbeddingMode::dense;
  std::size_t station_count = 0;
  std::size_t sparse_hidden = 512;
  std::size_t cell_kernel = 3;
  double cell_dt = 1.0;

  std::size_t latent_height() const { return height / 8; }
  std::size_t latent_width() const { return width / 8; }
  Shape latent_shape() const { return {latent_channels, latent_height(), latent_width()}; }
  Shape snapshot_shape() const { return {channels, height, width}; }

  void validate() const {
    if (layers < 1) throw ConfigError("layers must be >= 1");
    if (window < 1 || horizon < 1) throw ConfigError("window and horizon must be >= 1");
    if (channels < 1) throw ConfigError("channels must be >= 1");
    if (height % 8 || width % 8 || height == 0 || width == 0) {
      throw ConfigError("input height and width must be positive multiples of 8");
    }
    if (latent_channels < 4 || latent_channels % 4) {
      throw ConfigError("latent channels must be a positive multiple of 4");
    }
    if (embedding == EmbeddingMode::sparse && station_count < 1) {
      throw ConfigError("sparse embedding needs station_count >= 1");
    }
    CellSpec{cell_type, latent_channels, latent_channels, latent_height(), latent_width(),
             cell_kernel, cell_dt, reset_gate, peephole}
        .validate();
  }
};

/// Grid positions (row, col) of the sensing stations.
struct StationLayout {
  std::vector<std::pair<std::size_t, std::size_t>> points;

  std::size_t size() const noexcept { return points.size(); }

  void validate(std::size_t height, std::size_t width) const {
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const auto& p : points) {
      if (p.first >= height || p.second >= width) {
        throw ConfigError("station outside the grid");
      }
      if (!seen.insert(p).second) throw ConfigError("duplicate station position");
    }
  }

  /// `count` distinct cells drawn uniformly without replacement.
  static StationLayout random(std::size_t count, std::size_t height, std::size_t width,
                              std::uint64_t seed) {
    if (count > height * width) throw ConfigError("more stations than grid cells");
    std::vector<std::size_t> cells(height * width);
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
    std::mt19937_64 rng(seed);
    StationLayout out;
    for (std::size_t i = 0; i < count; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, cells.size() - 1);
      std::swap(cells[i], cells[pick(rng)]);
      out.points.emplace_back(cells[i] / width, cells[i] % width);
    }
    return out;
  }
};

/// Readings at the stations: [T,C,H,W] -> [T,C,S].
template <typename T>
Tensor<T> gather_stations(const Tensor<T>& frames, const StationLayout& layout) {
  const Shape& s = frames.shape();
  if (s.size() != 4) throw DimensionError("gather_stations expects [T,C,H,W]");
  const std::size_t S = layout.size();
  Tensor<T> out(Shape{s[0], s[1], S});
  for (std::size_t t = 0; t < s[0]; ++t)
    for (std::size_t c = 0; c < s[1]; ++c)
      for (std::size_t k = 0; k < S; ++k) {
        const auto [h, w] = layout.points[k];
        out[(t * s[1] + c) * S + k] = frames[((t * s[1] + c) * s[2] + h) * s[3] + w];
      }
  return out;
}

/// Station keep-mask (1 kept, 0 masked). Stations are masked uniformly
/// without replacement; exactly ceil((1 - mask_ratio) * S) survive.
inline std::vector<std::uint8_t> random_station_mask(std::size_t stations, double mask_ratio,
                                                     std::mt19937_64& rng) {
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must be in [0,1)");
  const double keep_exact = (1.0 - mask_ratio) * static_cast<double>(stations);
  auto keep = static_cast<std::size_t>(std::ceil(keep_exact - 1e-9));
  keep = std::max<std::size_t>(keep, 1);
  std::vector<std::size_t> order(stations);
  for (std::size_t i = 0; i < stations; ++i) order[i] = i;
  for (std::size_t i = 0; i < keep; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, stations - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  std::vector<std::uint8_t> mask(stations, 0);
  for (std::size_t i = 0; i < keep; ++i) mask[order[i]] = 1;
  return mask;
}

template <typename T>
struct ForwardOptions {
  bool training = false;
  std::vector<BatchStats<T>>* bn_stats = nullptr;     // filled in training mode
  const std::vector<std::uint8_t>* mask = nullptr;    // sparse mode; null keeps all
  GateTrace<T>* encoder_trace = nullptr;
  // Scheduled sampling: decoder step k >= 1 reads the embedded target frame
  // k-1 instead of its own previous output when teacher_steps[k] is set.
  const Tensor<T>* teacher = nullptr;  // [K,C,H,W]
  const std::vector<std::uint8_t>* teacher_steps = nullptr;
};

template <typename T>
class WaveCastNet {
 public:
  WaveCastNet(const NetworkConfig& config, std::uint64_t seed, StationLayout stations = {})
      : config_(config), stations_(std::move(stations)) {
    config_.validate();
    if (config_.embedding == EmbeddingMode::sparse) {
      if (stations_.size() == 0) {
        stations_ = StationLayout::random(config_.station_count, config_.height, config_.width,
                                          seed ^ 0x5747A710ULL);
      }
      if (stations_.size() != config_.station_count) {
        throw ConfigError("station layout size differs from station_count");
      }
      stations_.validate(config_.height, config_.width);
    }
    std::mt19937_64 rng(seed);
    if (config_.embedding == EmbeddingMode::dense) {
      build_dense_embedding(rng);
    } else {
      build_sparse_embedding(rng);
    }
    const std::size_t r = config_.latent_channels;
    CellSpec spec{config_.cell_type, r, r, config_.latent_height(), config_.latent_width(),
                  config_.cell_kernel, config_.cell_dt, config_.reset_gate, config_.peephole};
    for (std::size_t l = 0; l < config_.layers; ++l) {
      encoder_.emplace_back(spec, "encoder.l" + std::to_string(l), store_, rng);
    }
    for (std::size_t l = 0; l < config_.layers; ++l) {
      decoder_.emplace_back(spec, "decoder.l" + std::to_string(l), store_, rng);
    }
    const std::size_t out_ch = config_.channels * 16;
    add_uniform("recon.W", Shape{r, out_ch, 4, 4}, r * 4, rng);
    store_.add("recon.b", Tensor<T>(Shape{out_ch}));
  }

  const NetworkConfig& config() const noexcept { return config_; }
  const StationLayout& stations() const noexcept { return stations_; }
  ParamStore<T>& params() noexcept { return store_; }
  const ParamStore<T>& params() const noexcept { return store_; }
  const std::vector<RecurrentCell<T>>& encoder_cells() const noexcept { return encoder_; }

  std::size_t count_parameters() const { return store_.learnable_scalar_count(); }

  /// [N,C,H,W] snapshots -> [N,r,H/8,W/8] latents.
  Var<T> embed_dense(Tape<T>& tape, const Var<T>& frames, const ForwardOptions<T>& opt) const {
    if (config_.embedding != EmbeddingMode::dense) throw UsageError("model uses sparse embedding");
    const Shape& s = frames.shape();
    if (s.size() != 4 || s[1] != config_.channels || s[2] != config_.height ||
        s[3] != config_.width) {
      throw DimensionError("embed_dense: expected [N," + std::to_string(config_.channels) + "," +
                           std::to_string(config_.height) + "," + std::to_string(config_.width) +
                           "], got " + shape_string(s));
    }
    Var<T> x = frames;
    for (int i = 1; i <= 3; ++i) {
      const std::string p = "embed.stage" + std::to_string(i);
      x = conv2d(x, tape.param(store_, p + ".W"), tape.param(store_, p + ".b"), 2, 1);
      x = leaky_relu(x);
      BatchStats<T> observed;
      x = batch_norm(x, tape.param(store_, p + ".gamma"), tape.param(store_, p + ".beta"),
                     store_.at(p + ".running_mean").value, store_.at(p + ".running_var").value,
                     opt.training, &observed);
      if (opt.training && opt.bn_stats) opt.bn_stats->push_back(std::move(observed));
    }
    return x;
  }

  /// [N,C,S] station readings -> [N,r,p,q] latents. Masked stations are zeroed
  /// before the feedforward stage; the same mask applies to every step.
  Var<T> embed_sparse(Tape<T>& tape, const Var<T>& readings, const ForwardOptions<T>& opt) const {
    if (config_.embedding != EmbeddingMode::sparse) throw UsageError("model uses dense embedding");
    const Shape& s = readings.shape();
    const std::size_t S = config_.station_count;
    if (s.size() != 3 || s[1] != config_.channels || s[2] != S) {
      throw DimensionError("embed_sparse: expected [N," + std::to_string(config_.channels) + "," +
                           std::to_string(S) + "], got " + shape_string(s));
    }
    Var<T> x = readings;
    if (opt.mask) {
      const auto& m = *opt.mask;
      if (m.size() != S) throw DimensionError("embed_sparse: mask length differs from stations");
      bool any = false;
      for (auto v : m) any = any || v;
      if (!any) throw UsageError("embed_sparse: every station is masked");
      Tensor<T> full(s);
      for (std::size_t i = 0; i < full.size(); ++i) full[i] = m[i % S] ? T{1} : T{0};
      x = mul(x, tape.constant(std::move(full)));
    }
    const std::size_t r = config_.latent_channels;
    const Shape quarter{r / 4, config_.latent_height(), config_.latent_width()};
    std::vector<Var<T>> latents;
    for (std::size_t n = 0; n < s[0]; ++n) {
      Var<T> v = reshape(select(x, n), Shape{config_.channels * S});
      v = leaky_relu(dense(v, tape.param(store_, "embed.fc1.W"), tape.param(store_, "embed.fc1.b")));
      v = leaky_relu(dense(v, tape.param(store_, "embed.fc2.W"), tape.param(store_, "embed.fc2.b")));
      v = reshape(v, quarter);
      v = leaky_relu(conv2d(v, tape.param(store_, "embed.conv1.W"),
                            tape.param(store_, "embed.conv1.b"), 1, 1));
      v = conv2d(v, tape.param(store_, "embed.conv2.W"), tape.param(store_, "embed.conv2.b"), 1, 1);
      latents.push_back(v);
    }
    return stack(latents);
  }

  /// Consumes J embedded steps in order; returns the final state of every layer.
  std::vector<CellState<T>> encode(Tape<T>& tape, const std::vector<Var<T>>& steps,
                                   GateTrace<T>* trace = nullptr) const {
    if (steps.size() != config_.window) {
      throw DimensionError("encode: expected " + std::to_string(config_.window) +
                           " steps, got " + std::to_string(steps.size()));
    }
    std::vector<typename RecurrentCell<T>::Bound> bound;
    std::vector<CellState<T>> states;
    for (const auto& cell : encoder_) {
      bound.push_back(cell.bind(tape, store_));
      states.push_back(cell.zero_state(tape));
    }
    for (const auto& x : steps) {
      Var<T> input = x;
      for (std::size_t l = 0; l < encoder_.size(); ++l) {
        states[l] = bound[l].step(states[l], input, trace);
        input = states[l].h;
      }
    }
    return states;
  }

  /// Autoregressive rollout of `steps` latent predictions. Decoder layer i
  /// starts from encoder layer i's state; step 1 reads `first_input`, later
  /// steps read the previous top-layer output.
  std::vector<Var<T>> decode(Tape<T>& tape, std::vector<CellState<T>> states,
                             const Var<T>& first_input, std::size_t steps,
                             const std::vector<Var<T>>& forced = {}) const {
    if (steps == 0) throw UsageError("decode: K must be >= 1");
    if (states.size() != decoder_.size()) throw DimensionError("decode: layer count mismatch");
    std::vector<typename RecurrentCell<T>::Bound> bound;
    for (const auto& cell : decoder_) bound.push_back(cell.bind(tape, store_));
    std::vector<Var<T>> outputs;
    Var<T> input = first_input;
    for (std::size_t k = 0; k < steps; ++k) {
      if (k < forced.size() && forced[k].valid()) input = forced[k];
      for (std::size_t l = 0; l < decoder_.size(); ++l) {
        states[l] = bound[l].step(states[l], input);
        input = states[l].h;
      }
      outputs.push_back(input);
    }
    return outputs;
  }

  /// [r,p,q] -> [C,H,W], or batched [N,r,p,q] -> [N,C,H,W].
  Var<T> reconstruct(Tape<T>& tape, const Var<T>& latent) const {
    const Shape& s = latent.shape();
    const Shape ls = config_.latent_shape();
    const bool batched = s.size() == 4;
    if (!(batched ? Shape(s.begin() + 1, s.end()) == ls : s == ls)) {
      throw DimensionError("reconstruct: latent " + shape_string(s) + " vs expected " +
                           shape_string(ls));
    }
    Var<T> up = conv2d_transpose(latent, tape.param(store_, "recon.W"),
                                 tape.param(store_, "recon.b"), 2, 1);
    return pixel_shuffle(up, 4);
  }

  /// One Seq2Seq pass: normalized window [J,C,H,W] -> predictions [K,C,H,W].
  Var<T> forward(Tape<T>& tape, const Tensor<T>& window, const ForwardOptions<T>& opt = {}) const {
    const Shape expect{config_.window, config_.channels, config_.height, config_.width};
    if (window.shape() != expect) {
      throw DimensionError("forward: window " + shape_string(window.shape()) + " vs expected " +
                           shape_string(expect));
    }
    Var<T> emb;
    if (config_.embedding == EmbeddingMode::dense) {
      emb = embed_dense(tape, tape.constant(window), opt);
    } else {
      emb = embed_sparse(tape, tape.constant(gather_stations(window, stations_)), opt);
    }
    std::vector<Var<T>> steps;
    for (std::size_t j = 0; j < config_.window; ++j) steps.push_back(select(emb, j));
    auto states = encode(tape, steps, opt.encoder_trace);
    std::vector<Var<T>> forced;
    if (opt.teacher && opt.teacher_steps) {
      const Shape tgt{config_.horizon, config_.channels, config_.height, config_.width};
      if (opt.teacher->shape() != tgt || opt.teacher_steps->size() != config_.horizon) {
        throw DimensionError("forward: teacher targets do not match the horizon");
      }
      Var<T> te = config_.embedding == EmbeddingMode::dense
                      ? embed_dense(tape, tape.constant(*opt.teacher), opt)
                      : embed_sparse(tape, tape.constant(gather_stations(*opt.teacher, stations_)), opt);
      for (std::size_t k = 0; k < config_.horizon; ++k) {
        forced.push_back(k > 0 && (*opt.teacher_steps)[k] ? select(te, k - 1) : Var<T>{});
      }
    }
    auto outputs = decode(tape, std::move(states), steps.back(), config_.horizon, forced);
    return reconstruct(tape, stack(outputs));
  }

  /// Eval-mode prediction without gradient bookkeeping.
  Tensor<T> predict(const Tensor<T>& window, const std::vector<std::uint8_t>* mask = nullptr,
                    GateTrace<T>* trace = nullptr) const {
    Tape<T> tape(false);
    ForwardOptions<T> opt;
    opt.mask = mask;
    opt.encoder_trace = trace;
    return forward(tape, window, opt).value();
  }

  /// Blends batch statistics gathered during training into the running buffers,
  /// in the order they were observed.
  void apply_bn_stats(const std::vector<BatchStats<T>>& stats) {
    if (config_.embedding != EmbeddingMode::dense) return;
    if (stats.size() % 3) throw UsageError("apply_bn_stats: expected a multiple of 3 entries");
    for (std::size_t i = 0; i < stats.size(); ++i) {
      const std::string p = "embed.stage" + std::to_string(i % 3 + 1);
      update_running_stats(store_.at(p + ".running_mean").value,
                           store_.at(p + ".running_var").value, stats[i]);
    }
  }

 private:
  void add_uniform(const std::string& name, Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> w(std::move(shape));
    for (auto& v : w.values()) v = static_cast<T>(dist(rng));
    store_.add(name, std::move(w));
  }

  void build_dense_embedding(std::mt19937_64& rng) {
    const std::size_t r = config_.latent_channels;
    const std::size_t chans[4] = {config_.channels, r / 4, r / 2, r};
    for (int i = 1; i <= 3; ++i) {
      const std::string p = "embed.stage" + std::to_string(i);
      const std::size_t cin = chans[i - 1], cout = chans[i];
      add_uniform(p + ".W", Shape{cout, cin, 4, 4}, cin * 16, rng);
      store_.add(p + ".b", Tensor<T>(Shape{cout}));
      store_.add(p + ".gamma", Tensor<T>(Shape{cout}, T{1}));
      store_.add(p + ".beta", Tensor<T>(Shape{cout}));
      store_.add(p + ".running_mean", Tensor<T>(Shape{cout}), false);
      store_.add(p + ".running_var", Tensor<T>(Shape{cout}, T{1}), false);
    }
  }

  void build_sparse_embedding(std::mt19937_64& rng) {
    const std::size_t r = config_.latent_channels;
    const std::size_t in = config_.channels * config_.station_count;
    const std::size_t hidden = config_.sparse_hidden;
    const std::size_t width = r * config_.latent_height() * config_.latent_width() / 4;
    add_uniform("embed.fc1.W", Shape{hidden, in}, in, rng);
    store_.add("embed.fc1.b", Tensor<T>(Shape{hidden}));
    add_uniform("embed.fc2.W", Shape{width, hidden}, hidden, rng);
    store_.add("embed.fc2.b", Tensor<T>(Shape{width}));
    add_uniform("embed.conv1.W", Shape{r / 2, r / 4, 3, 3}, r / 4 * 9, rng);
    store_.add("embed.conv1.b", Tensor<T>(Shape{r / 2}));
    add_uniform("embed.conv2.W", Shape{r, r / 2, 3, 3}, r / 2 * 9, rng);
    store_.add("embed.conv2.b", Tensor<T>(Shape{r}));
  }

  NetworkConfig config_;
  StationLayout stations_;
  ParamStore<T> store_;
  std::vector<RecurrentCell<T>> encoder_;
  std::vector<RecurrentCell<T>> decoder_;
};

// ---------------------------------------------------------------------------
// Iterative forecasting

inline constexpr double kPaddingNoiseStd = 0.01;

template <typename T>
struct IterativeForecast {
  Tensor<T> frames;            // [horizon, C, H, W]
  std::size_t invocations = 0;
  std::size_t padded_steps = 0;
};

/// Forecasts `horizon` steps past the observed prefix [L,C,H,W] (normalized
/// units). Prefixes shorter than the window are left-padded with seeded
/// zero-mean Gaussian noise; each invocation's K predictions are appended and
/// the window slides forward until the horizon is covered.
template <typename T>
IterativeForecast<T> forecast_iterative(const WaveCastNet<T>& model, const Tensor<T>& observed,
                                        long horizon, std::uint64_t seed,
                                        const std::vector<std::uint8_t>* mask = nullptr,
                                        double noise_std = kPaddingNoiseStd) {
  const auto& cfg = model.config();
  if (horizon <= 0) throw UsageError("forecast horizon must be positive");
  const Shape& s = observed.shape();
  if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != cfg.snapshot_shape()) {
    throw DimensionError("forecast_iterative: observed " + shape_string(s) +
                         " does not match snapshot " + shape_string(cfg.snapshot_shape()));
  }
  const std::size_t J = cfg.window;
  const Shape snap = cfg.snapshot_shape();
  const std::size_t frame = numel(snap);
  IterativeForecast<T> result;
  std::vector<T> history;
  if (s[0] < J) {
    result.padded_steps = J - s[0];
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, noise_std);
    history.resize(result.padded_steps * frame);
    for (auto& v : history) v = static_cast<T>(noise(rng));
  }
  history.insert(history.end(), observed.values().begin(), observed.values().end());
  const auto total = static_cast<std::size_t>(horizon);
  std::vector<T> produced;
  while (produced.size() < total * frame) {
    std::vector<T> win(history.end() - static_cast<std::ptrdiff_t>(J * frame), history.end());
    Shape ws{J};
    ws.insert(ws.end(), snap.begin(), snap.end());
    Tensor<T> pred = model.predict(Tensor<T>(ws, std::move(win)), mask);
    ++result.invocations;
    history.insert(history.end(), pred.values().begin(), pred.values().end());
    produced.insert(produced.end(), pred.values().begin(), pred.values().end());
  }
  produced.resize(total * frame);
  Shape out{total};
  out.insert(out.end(), snap.begin(), snap.end());
  result.frames = Tensor<T>(out, std::move(produced));
  return result;
}

// ---------------------------------------------------------------------------
// Cells-only forecaster (frame-level, no embedding or reconstruction)

/// Stacked cells applied directly to [1,H,W] frames, with a 1x1 readout to
/// frame logits. The decoder feeds back sigmoid(previous logits).
template <typename T>
class CellStackForecaster {
 public:
  CellStackForecaster(CellType type, std::size_t layers, std::size_t hidden, std::size_t height,
                      std::size_t width, std::uint64_t seed)
      : height_(height), width_(width), hidden_(hidden) {
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l < layers; ++l) {
      CellSpec spec{type, l == 0 ? 1 : hidden, hidden, height, width, 3, 1.0, true, true};
      encoder_.emplace_back(spec, "encoder.l" + std::to_string(l), store_, rng);
    }
    for (std::size_t l = 0; l < layers; ++l) {
      CellSpec spec{type, l == 0 ? 1 : hidden, hidden, height, width, 3, 1.0, true, true};
      decoder_.emplace_back(spec, "decoder.l" + std::to_string(l), store_, rng);
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> w(Shape{1, hidden, 1, 1});
    for (auto& v : w.values()) v = static_cast<T>(dist(rng));
    store_.add("readout.W", std::move(w));
    store_.add("readout.b", Tensor<T>(Shape{1}));
  }

  ParamStore<T>& params() noexcept { return store_; }
  const ParamStore<T>& params() const noexcept { return store_; }
  std::size_t count_parameters() const { return store_.learnable_scalar_count(); }

  /// inputs [J,1,H,W] -> logits [K,1,H,W].
  Var<T> forward(Tape<T>& tape, const Tensor<T>& inputs, std::size_t steps) const {
    const std::size_t J = inputs.shape().at(0);
    std::vector<typename RecurrentCell<T>::Bound> enc, dec;
    std::vector<CellState<T>> states;
    for (const auto& c : encoder_) {
      enc.push_back(c.bind(tape, store_));
      states.push_back(c.zero_state(tape));
    }
    for (const auto& c : decoder_) dec.push_back(c.bind(tape, store_));
    Var<T> frames = tape.constant(inputs);
    for (std::size_t j = 0; j < J; ++j) {
      Var<T> in = select(frames, j);
      for (std::size_t l = 0; l < enc.size(); ++l) {
        states[l] = enc[l].step(states[l], in);
        in = states[l].h;
      }
    }
    Var<T> rw = tape.param(store_, "readout.W");
    Var<T> rb = tape.param(store_, "readout.b");
    std::vector<Var<T>> logits;
    Var<T> in = select(frames, J - 1);
    for (std::size_t k = 0; k < steps; ++k) {
      Var<T> x = in;
      for (std::size_t l = 0; l < dec.size(); ++l) {
        states[l] = dec[l].step(states[l], x);
        x = states[l].h;
      }
      Var<T> z = conv2d(x, rw, rb, 1, 0);
      logits.push_back(z);
      in = sigmoid(z);
    }
    return stack(logits);
  }

 private:
  std::size_t height_, width_, hidden_;
  ParamStore<T> store_;
  std::vector<RecurrentCell<T>> encoder_;
  std::vector<RecurrentCell<T>> decoder_;
};

}  // namespace wavecast
