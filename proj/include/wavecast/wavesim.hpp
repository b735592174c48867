#pragma once

// 2-D scalar acoustic simulator (second-order leapfrog) with an absorbing
// sponge, dataset generation, and the WCS1 sequence format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "wavecast/errors.hpp"
#include "wavecast/io.hpp"
#include "wavecast/parallel.hpp"
#include "wavecast/tensor.hpp"

namespace wavecast {

// ---------------------------------------------------------------------------
// Velocity models

/// Low-velocity ellipse; `taper` cells of smooth transition at its rim.
struct Basin {
  double row = 0, col = 0;
  double radius_rows = 1, radius_cols = 1;
  double velocity = 1500;
  double taper = 2;
};

struct VelocityModel {
  double background = 2000;
  std::vector<Basin> basins;
};

inline Tensor<double> build_velocity(std::size_t height, std::size_t width,
                                     const VelocityModel& model) {
  if (!(model.background > 0)) throw ConfigError("background velocity must be positive");
  Tensor<double> c(Shape{height, width}, model.background);
  for (const auto& b : model.basins) {
    if (!(b.velocity > 0) || !(b.radius_rows > 0) || !(b.radius_cols > 0)) {
      throw ConfigError("basin velocity and radii must be positive");
    }
    const double mean_radius = 0.5 * (b.radius_rows + b.radius_cols);
    for (std::size_t i = 0; i < height; ++i) {
      for (std::size_t j = 0; j < width; ++j) {
        const double dr = (double(i) - b.row) / b.radius_rows;
        const double dc = (double(j) - b.col) / b.radius_cols;
        // signed distance to the rim in cells, positive inside
        const double inside = (1.0 - std::sqrt(dr * dr + dc * dc)) * mean_radius;
        const double w = b.taper > 0 ? 0.5 * (1.0 + std::tanh(inside / b.taper))
                                     : (inside >= 0 ? 1.0 : 0.0);
        double& v = c[i * width + j];
        v = std::min(v, (1.0 - w) * model.background + w * b.velocity);
      }
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Simulation

/// Ricker wavelet, truncated to exactly zero after 2*delay.
struct RickerWavelet {
  double peak_frequency = 0.9;  // Hz
  double amplitude = 1e6;
  double delay = 0.0;  // s; <= 0 selects 1.2 / peak_frequency

  double effective_delay() const { return delay > 0 ? delay : 1.2 / peak_frequency; }
  double cutoff() const { return 2.0 * effective_delay(); }
  /// Highest frequency carrying appreciable energy.
  double max_frequency() const { return 2.5 * peak_frequency; }

  double operator()(double t) const {
    if (t < 0 || t > cutoff()) return 0.0;
    const double a = std::numbers::pi * peak_frequency * (t - effective_delay());
    return amplitude * (1.0 - 2.0 * a * a) * std::exp(-a * a);
  }
};

inline constexpr double kCflSafety = 0.9;
inline constexpr double kMinPointsPerWavelength = 6.0;

struct SimConfig {
  std::size_t height = 64, width = 64;
  double spacing = 100.0;   // m
  Tensor<double> velocity;  // [height, width] m/s
  double dt = 0.025;        // s
  std::size_t record_interval = 4;
  double duration = 6.0;  // s of recording
  std::size_t source_row = 32, source_col = 32;
  RickerWavelet wavelet;
  std::size_t sponge_width = 20;
  double sponge_reflection = 1e-3;  // target reflection coefficient

  std::size_t frames() const {
    return static_cast<std::size_t>(std::floor(duration / record_dt() + 1e-9));
  }
  double record_dt() const { return dt * static_cast<double>(record_interval); }

  double max_velocity() const { return *std::max_element(velocity.values().begin(), velocity.values().end()); }
  double min_velocity() const { return *std::min_element(velocity.values().begin(), velocity.values().end()); }

  void validate() const {
    if (height < 3 || width < 3) throw ConfigError("simulation grid must be at least 3x3");
    if (velocity.shape() != Shape{height, width}) {
      throw ConfigError("velocity field shape " + shape_string(velocity.shape()) +
                        " does not match grid");
    }
    for (auto v : velocity.values()) {
      if (!(v > 0) || !std::isfinite(v)) throw ConfigError("velocity must be positive everywhere");
    }
    if (!(spacing > 0) || !(dt > 0)) throw ConfigError("spacing and dt must be positive");
    if (record_interval < 1) throw ConfigError("record_interval must be >= 1");
    if (frames() < 1) throw ConfigError("duration shorter than one record interval");
    const double limit = kCflSafety * spacing / (max_velocity() * std::sqrt(2.0));
    if (dt > limit) {
      throw ConfigError("CFL violated: dt=" + std::to_string(dt) + " exceeds " +
                        std::to_string(limit));
    }
    if (source_row >= height || source_col >= width) throw ConfigError("source outside grid");
    if (!(wavelet.peak_frequency > 0)) throw ConfigError("peak frequency must be positive");
    const double ppw = min_velocity() / (wavelet.max_frequency() * spacing);
    if (ppw < kMinPointsPerWavelength) {
      throw ConfigError("wavelet too sharp for the grid: " + std::to_string(ppw) +
                        " points per wavelength");
    }
    if (!(sponge_reflection > 0 && sponge_reflection < 1)) {
      throw ConfigError("sponge_reflection must lie in (0,1)");
    }
  }
};

struct SimOptions {
  bool track_energy = false;
  bool keep_displacement = false;
};

struct SimResult {
  Tensor<float> frames;  // [T, 3, H, W]: du/dx, du/dy, du/dt
  double record_dt = 0;
  std::vector<double> energy;      // per step, discrete energy at n+1/2 (whole grid)
  std::size_t source_off_step = 0; // first step with an exactly zero source term
  Tensor<double> displacement;     // [T, H, W] when requested
};

/// Leapfrog solution of u_tt + gamma u_t = c^2 lap(u) + s(t) delta_src on the
/// recorded grid padded by a sponge. Frame i is taken at step (i + 1) * k.
inline SimResult simulate(const SimConfig& cfg, const SimOptions& opt = {}) {
  cfg.validate();
  const std::size_t w = cfg.sponge_width;
  const std::size_t H = cfg.height + 2 * w, W = cfg.width + 2 * w;
  const double h2 = cfg.spacing * cfg.spacing, dt = cfg.dt;

  // Padded velocity (edge replication) and damping profile.
  std::vector<double> c2(H * W), damp(H * W, 0.0);
  const double gamma_max = w ? 3.0 * cfg.max_velocity() * std::log(1.0 / cfg.sponge_reflection) /
                                   (2.0 * double(w) * cfg.spacing)
                             : 0.0;
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      const std::size_t ri = std::clamp<long>(long(i) - long(w), 0, long(cfg.height) - 1);
      const std::size_t rj = std::clamp<long>(long(j) - long(w), 0, long(cfg.width) - 1);
      const double v = cfg.velocity[ri * cfg.width + rj];
      c2[i * W + j] = v * v;
      if (w) {
        const double di = std::max({0.0, double(w) - double(i), double(i) - double(H - 1 - w)});
        const double dj = std::max({0.0, double(w) - double(j), double(j) - double(W - 1 - w)});
        const double d = std::min(1.0, std::sqrt(di * di + dj * dj) / double(w));
        damp[i * W + j] = gamma_max * d * d;
      }
    }
  }

  std::vector<double> prev(H * W, 0.0), cur(H * W, 0.0), next(H * W, 0.0), lap(H * W, 0.0);
  auto laplacian = [&](const std::vector<double>& u) {
    for (std::size_t i = 0; i < H; ++i) {
      for (std::size_t j = 0; j < W; ++j) {
        const std::size_t p = i * W + j;
        const double up = i ? u[p - W] : 0.0, down = i + 1 < H ? u[p + W] : 0.0;
        const double left = j ? u[p - 1] : 0.0, right = j + 1 < W ? u[p + 1] : 0.0;
        lap[p] = (up + down + left + right - 4.0 * u[p]) / h2;
      }
    }
  };

  const std::size_t T = cfg.frames();
  const std::size_t steps = T * cfg.record_interval;
  const std::size_t src = (cfg.source_row + w) * W + (cfg.source_col + w);
  SimResult res;
  res.record_dt = cfg.record_dt();
  res.frames = Tensor<float>(Shape{T, 3, cfg.height, cfg.width});
  if (opt.keep_displacement) res.displacement = Tensor<double>(Shape{T, cfg.height, cfg.width});
  res.source_off_step = static_cast<std::size_t>(std::floor(cfg.wavelet.cutoff() / dt)) + 1;
  const std::size_t plane = cfg.height * cfg.width;

  for (std::size_t n = 0; n < steps; ++n) {
    laplacian(cur);
    const double s = cfg.wavelet(double(n) * dt) / h2;
    for (std::size_t p = 0; p < H * W; ++p) {
      const double g = 0.5 * damp[p] * dt;
      double rhs = 2.0 * cur[p] - (1.0 - g) * prev[p] + dt * dt * c2[p] * lap[p];
      if (p == src) rhs += dt * dt * s;
      next[p] = rhs / (1.0 + g);
    }
    if (opt.track_energy) {
      double e = 0;
      for (std::size_t p = 0; p < H * W; ++p) {
        const double v = (next[p] - cur[p]) / dt;
        e += 0.5 * v * v / c2[p] - 0.5 * next[p] * lap[p];
      }
      res.energy.push_back(e * h2);
    }
    if ((n + 1) % cfg.record_interval == 0) {
      // frame at step n, centered differences in space and time
      const std::size_t f = (n + 1) / cfg.record_interval - 1;
      float* fx = res.frames.data() + (f * 3 + 0) * plane;
      float* fy = res.frames.data() + (f * 3 + 1) * plane;
      float* ft = res.frames.data() + (f * 3 + 2) * plane;
      for (std::size_t i = 0; i < cfg.height; ++i) {
        for (std::size_t j = 0; j < cfg.width; ++j) {
          const std::size_t p = (i + w) * W + (j + w);
          const std::size_t q = i * cfg.width + j;
          const double left = j + w ? cur[p - 1] : 0.0, right = j + w + 1 < W ? cur[p + 1] : 0.0;
          const double up = i + w ? cur[p - W] : 0.0, down = i + w + 1 < H ? cur[p + W] : 0.0;
          fx[q] = static_cast<float>((right - left) / (2.0 * cfg.spacing));
          fy[q] = static_cast<float>((down - up) / (2.0 * cfg.spacing));
          ft[q] = static_cast<float>((next[p] - prev[p]) / (2.0 * dt));
          if (opt.keep_displacement) res.displacement[f * plane + q] = cur[p];
        }
      }
    }
    std::swap(prev, cur);
    std::swap(cur, next);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Sequence files

struct WavefieldSequence {
  Tensor<float> frames;  // [T, C, H, W]
  double dt = 0;
};

inline constexpr char kSequenceMagic[4] = {'W', 'C', 'S', '1'};

inline void save_sequence(const Tensor<float>& frames, double dt, const std::string& path) {
  if (frames.rank() != 4) throw DimensionError("save_sequence: expected [T,C,H,W]");
  std::string out(kSequenceMagic, 4);
  for (auto d : frames.shape()) io::put_le<std::int64_t>(out, static_cast<std::int64_t>(d));
  io::put_le<double>(out, dt);
  out.reserve(out.size() + frames.size() * 4);
  for (auto v : frames.values()) io::put_le<float>(out, v);
  io::write_file(path, out);
}

inline WavefieldSequence load_sequence(const std::string& path) {
  const std::string data = io::read_file(path);
  io::Reader in(data, path);
  if (in.bytes(4) != std::string(kSequenceMagic, 4)) throw FormatError(path + ": bad magic");
  Shape shape(4);
  for (auto& d : shape) {
    const auto v = in.get<std::int64_t>();
    if (v <= 0) throw FormatError(path + ": non-positive dimension in header");
    d = static_cast<std::size_t>(v);
  }
  const double dt = in.get<double>();
  const std::size_t n = numel(shape);
  if (in.remaining() != n * 4) {
    if (in.remaining() < n * 4) {
      throw IntegrityError(path + ": payload shorter than header shape " + shape_string(shape));
    }
    throw FormatError(path + ": payload length does not match header shape " +
                      shape_string(shape));
  }
  WavefieldSequence seq{Tensor<float>(shape), dt};
  in.floats(seq.frames.data(), n);
  return seq;
}

// ---------------------------------------------------------------------------
// Datasets

struct EventRecord {
  std::size_t id = 0;
  std::size_t source_row = 0, source_col = 0;
  std::size_t depth = 0;  // index of the source row band
  std::string split;      // "train" or "test"
  std::string path;       // relative to the manifest directory
};

struct DatasetManifest {
  std::vector<EventRecord> events;
  Shape snapshot;  // [C, H, W]
  double dt = 0;
  std::string norm_stats = "none";
  std::string directory;  // where the manifest lives; not serialized

  std::vector<const EventRecord*> split(const std::string& tag) const {
    std::vector<const EventRecord*> out;
    for (const auto& e : events) {
      if (e.split == tag) out.push_back(&e);
    }
    return out;
  }
  std::string resolve(const EventRecord& e) const {
    return (std::filesystem::path(directory) / e.path).string();
  }
};

struct DatasetSpec {
  SimConfig base;  // source position is overridden per event
  std::size_t events = 10;
  std::size_t depths = 1;
  std::size_t margin = 6;  // cells kept free at the grid edges
  double train_fraction = 0.8;
  std::uint64_t split_seed = 0;
};

/// Event layout and split without simulating: sources on evenly spaced
/// columns along one row per depth band; within each band a seeded shuffle
/// sends round(train_fraction * n) locations to training.
inline DatasetManifest plan_dataset(const DatasetSpec& spec) {
  const auto& b = spec.base;
  if (spec.events < 1 || spec.depths < 1) throw ConfigError("events and depths must be >= 1");
  if (spec.depths > spec.events) throw ConfigError("more depth bands than events");
  if (2 * spec.margin >= b.height || 2 * spec.margin >= b.width) {
    throw ConfigError("margin leaves no room for sources");
  }
  const std::size_t span_r = b.height - 1 - 2 * spec.margin;
  const std::size_t span_c = b.width - 1 - 2 * spec.margin;
  DatasetManifest m;
  m.snapshot = Shape{3, b.height, b.width};
  m.dt = b.record_dt();
  std::mt19937_64 rng(spec.split_seed);
  std::size_t id = 0;
  for (std::size_t d = 0; d < spec.depths; ++d) {
    const std::size_t n = spec.events / spec.depths + (d < spec.events % spec.depths ? 1 : 0);
    if (n > span_c + 1) throw ConfigError("too many events per depth band for the grid width");
    const std::size_t row =
        spec.depths == 1 ? b.height / 2
                         : spec.margin + static_cast<std::size_t>(std::lround(
                                             double(d) * double(span_r) / double(spec.depths - 1)));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::lround(spec.train_fraction * double(n)));
    std::vector<bool> is_train(n, false);
    for (std::size_t i = 0; i < n_train; ++i) is_train[order[i]] = true;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t col =
          n == 1 ? b.width / 2
                 : spec.margin + static_cast<std::size_t>(
                                     std::lround(double(i) * double(span_c) / double(n - 1)));
      EventRecord e;
      e.id = id;
      e.source_row = row;
      e.source_col = col;
      e.depth = d;
      e.split = is_train[i] ? "train" : "test";
      e.path = "event_" + std::to_string(id) + ".wcs";
      m.events.push_back(e);
      ++id;
    }
  }
  return m;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  std::ostringstream out;
  out << "# wavecast dataset manifest\n";
  out << "# snapshot " << m.snapshot.at(0) << ' ' << m.snapshot.at(1) << ' ' << m.snapshot.at(2)
      << '\n';
  out.precision(17);
  out << "# dt " << m.dt << '\n';
  out << "# norm_stats " << m.norm_stats << '\n';
  out << "# id source_row source_col depth split path\n";
  for (const auto& e : m.events) {
    out << e.id << ' ' << e.source_row << ' ' << e.source_col << ' ' << e.depth << ' ' << e.split
        << ' ' << e.path << '\n';
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot write manifest " + path);
  f << out.str();
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open manifest " + path);
  DatasetManifest m;
  m.directory = std::filesystem::path(path).parent_path().string();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    if (line[0] == '#') {
      std::string hash, key;
      ls >> hash >> key;
      if (key == "snapshot") {
        m.snapshot.assign(3, 0);
        ls >> m.snapshot[0] >> m.snapshot[1] >> m.snapshot[2];
      } else if (key == "dt") {
        ls >> m.dt;
      } else if (key == "norm_stats") {
        ls >> m.norm_stats;
      }
      continue;
    }
    EventRecord e;
    if (!(ls >> e.id >> e.source_row >> e.source_col >> e.depth >> e.split >> e.path) ||
        (e.split != "train" && e.split != "test")) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": malformed event line");
    }
    m.events.push_back(e);
  }
  if (m.snapshot.size() != 3) throw FormatError(path + ": missing snapshot header");
  if (m.events.empty()) throw FormatError(path + ": no events");
  return m;
}

/// Simulates every planned event into `out_dir` and writes manifest.txt.
/// `progress` is called once per finished event (under a lock).
inline DatasetManifest generate_dataset(
    const DatasetSpec& spec, const std::string& out_dir, std::size_t threads = 1,
    const std::function<void(const EventRecord&)>& progress = {}) {
  SimConfig probe = spec.base;  // per-event sources replace the base position
  probe.source_row = probe.height / 2;
  probe.source_col = probe.width / 2;
  probe.validate();
  DatasetManifest m = plan_dataset(spec);
  std::filesystem::create_directories(out_dir);
  m.directory = out_dir;
  std::mutex lock;
  parallel_for(m.events.size(), threads, [&](std::size_t i) {
    const auto& e = m.events[i];
    SimConfig cfg = spec.base;
    cfg.source_row = e.source_row;
    cfg.source_col = e.source_col;
    auto res = simulate(cfg);
    save_sequence(res.frames, res.record_dt, m.resolve(e));
    if (progress) {
      std::lock_guard<std::mutex> g(lock);
      progress(e);
    }
  });
  save_manifest(m, (std::filesystem::path(out_dir) / "manifest.txt").string());
  return m;
}

}  // namespace wavecast
