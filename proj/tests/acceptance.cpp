// Acceptance driver: one PASS/FAIL line per criterion. Criteria that need the
// command-line tool run it as a subprocess from a scratch work directory.

#include <CLI11.hpp>

#include <wavecast/commands.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "support/gradcheck.hpp"
#include "support/physics.hpp"

using namespace wavecast;
namespace fs = std::filesystem;
using testsupport::check_gradients;
using testsupport::random_tensor;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// Subprocess helpers

struct Harness {
  std::string cli;
  fs::path work;
  double train_budget = 1680;
  std::size_t threads = 1;
  bool reuse = false;  // keep an existing desk dataset and model

  struct Run {
    int code = -1;
    std::string output;
    std::map<std::string, double> metrics;
    double seconds = 0;
  };

  std::string write_config(const std::string& name, const std::string& text) const {
    const auto path = (work / name).string();
    io::write_file(path, text);
    return path;
  }

  Run run(const std::string& command, const std::string& config, const std::string& out,
          const std::string& extra = "") const {
    const auto log = (work / (fs::path(out).filename().string() + "." + command + ".log")).string();
    const std::string cmd = "\"" + cli + "\" " + command + " --config \"" + config + "\" --out \"" +
                            out + "\" --threads " + std::to_string(threads) + " " + extra + " > \"" +
                            log + "\" 2>&1";
    const auto t0 = Clock::now();
    Run r;
    const int status = std::system(cmd.c_str());
    r.seconds = seconds_since(t0);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.output = io::read_file(log);
    std::istringstream in(r.output);
    for (std::string line; std::getline(in, line);) {
      if (line.rfind("metric=", 0) != 0) continue;
      const auto sp = line.find(" value=");
      if (sp == std::string::npos) continue;
      r.metrics[line.substr(7, sp - 7)] = std::strtod(line.c_str() + sp + 7, nullptr);
    }
    if (r.code != 0) {
      std::cerr << "command failed (" << r.code << "): " << cmd << "\n" << r.output << '\n';
    }
    return r;
  }
};

// Desk preset: 64x64 grid, two low-velocity basins, 80 events over 4 depth
// bands. 64 train and 16 test events.
std::string desk_sim_config() {
  return "height = 64\nwidth = 64\nevents = 80\ndepths = 4\nsplit_seed = 1\n"
         "basin = 40 24 10 14 1400 2\n";
}

std::string desk_train_config(const std::string& dataset, double budget) {
  return desk_sim_config() + "dataset = " + dataset +
         "\ncell = convlem\nlayers = 2\nlatent_channels = 32\nwindow = 20\nhorizon = 20\n"
         "epochs = 100000\nshort_window_prob = 0.25\nmin_observed = 5\ntime_budget = " +
         num(budget) + "\nseed = 7\n";
}

// Fast preset: 32x32 grid, 12 events, a few seconds per training run.
std::string fast_sim_config() {
  return "height = 32\nwidth = 32\nevents = 12\ndepths = 2\nmargin = 4\nsplit_seed = 2\n"
         "duration = 3\nsponge_width = 10\nricker_frequency = 1.0\n"
         "basin = 20 12 5 7 1600 2\n";
}

std::string fast_train_config(const std::string& dataset) {
  return fast_sim_config() + "dataset = " + dataset +
         "\nlatent_channels = 8\nwindow = 4\nhorizon = 4\nepochs = 2\nbatch_size = 3\n"
         "eval_start = 6\nseed = 5\n";
}

// ---------------------------------------------------------------------------
// 1. Gradient oracle suite

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(20240611);
  int trials = 0, failed = 0;
  double worst = 0;
  auto check = [&](const testsupport::Builder& f, const std::vector<Tensor<double>>& in) {
    const auto rep = check_gradients(f, in, rng);
    ++trials;
    worst = std::max(worst, rep.worst);
    if (!rep.ok(1e-4)) ++failed;
  };
  for (int t = 0; t < 4; ++t) {
    const Shape s{2, 3, 4};
    auto a = random_tensor(s, rng), b = random_tensor(s, rng), w = random_tensor(s, rng, 0, 1);
    check([](auto&, auto& v) { return add(v[0], v[1]); }, {a, b});
    check([](auto&, auto& v) { return sub(v[0], v[1]); }, {a, b});
    check([](auto&, auto& v) { return mul(v[0], v[1]); }, {a, b});
    check([](auto&, auto& v) { return affine(v[0], 0.7, -0.2); }, {a});
    check([](auto&, auto& v) { return sigmoid(v[0]); }, {a});
    check([](auto&, auto& v) { return wavecast::tanh(v[0]); }, {a});
    check([](auto&, auto& v) { return leaky_relu(v[0]); }, {a});
    check([](auto&, auto& v) { return blend(v[0], v[1], v[2]); }, {a, b, w});

    auto x = random_tensor(Shape{4, 2, 3}, rng), y = random_tensor(Shape{2, 2, 3}, rng);
    check([](auto&, auto& v) { return sum(v[0]); }, {x});
    check([](auto&, auto& v) { return reshape(v[0], Shape{8, 3}); }, {x});
    check([](auto&, auto& v) { return concat(std::vector{v[0], v[1]}); }, {x, y});
    check([](auto&, auto& v) { return slice(v[0], 1, 2); }, {x});
    check([](auto&, auto& v) { return select(v[0], 3); }, {x});
    check([](auto&, auto& v) { return stack(std::vector{select(v[0], 0), v[1]}); },
          {x, random_tensor(Shape{2, 3}, rng)});

    auto img = random_tensor(Shape{2, 8, 8}, rng);
    auto k3 = random_tensor(Shape{4, 2, 3, 3}, rng), k4 = random_tensor(Shape{3, 2, 4, 4}, rng);
    check([](auto&, auto& v) { return conv2d(v[0], v[1], v[2], 1, 1); },
          {img, k3, random_tensor(Shape{4}, rng)});
    check([](auto&, auto& v) { return conv2d(v[0], v[1], v[2], 2, 1); },
          {img, k4, random_tensor(Shape{3}, rng)});
    check([](auto&, auto& v) { return conv2d(v[0], v[1], 1, 0); },
          {random_tensor(Shape{2, 2, 5, 5}, rng), k3});
    auto kt = random_tensor(Shape{4, 2, 4, 4}, rng);
    check([](auto&, auto& v) { return conv2d_transpose(v[0], v[1], v[2], 2, 1); },
          {random_tensor(Shape{4, 4, 4}, rng), kt, random_tensor(Shape{2}, rng)});
    check([](auto&, auto& v) { return conv2d_transpose(v[0], v[1], 2, 1); },
          {random_tensor(Shape{2, 4, 2, 2}, rng), kt});

    check([](auto&, auto& v) { return pixel_shuffle(v[0], 2); }, {random_tensor(Shape{4, 3, 2}, rng)});
    check([](auto&, auto& v) { return pixel_shuffle(v[0], 2); },
          {random_tensor(Shape{2, 8, 2, 2}, rng)});
    check([](auto&, auto& v) { return dense(v[0], v[1], v[2]); },
          {random_tensor(Shape{6}, rng), random_tensor(Shape{4, 6}, rng), random_tensor(Shape{4}, rng)});
    const Tensor<double> rm(Shape{3}), rv(Shape{3}, 1.0);
    for (bool training : {true, false}) {
      check([&rm, &rv, training](auto&, auto& v) {
              return batch_norm(v[0], v[1], v[2], rm, rv, training);
            },
            {random_tensor(Shape{2, 3, 4, 4}, rng), random_tensor(Shape{3}, rng, 0.5, 1.5),
             random_tensor(Shape{3}, rng)});
    }

    auto p = random_tensor(Shape{3, 2, 4}, rng, -2, 2), tgt = random_tensor(Shape{3, 2, 4}, rng, -2, 2);
    auto t01 = random_tensor(Shape{3, 2, 4}, rng, 0, 1);
    check([&tgt](auto&, auto& v) { return l2_loss(v[0], tgt); }, {p});
    check([&tgt](auto&, auto& v) { return huber_loss(v[0], tgt, 1.0); }, {p});
    check([&t01](auto&, auto& v) { return bce_with_logits(v[0], t01); }, {p});
  }

  struct Variant {
    CellType type;
    bool reset, peephole;
  };
  const std::vector<Variant> variants{{CellType::convlem, false, false}, {CellType::convlem, true, false},
                                      {CellType::convlem, false, true},  {CellType::convlem, true, true},
                                      {CellType::convlstm, false, true}, {CellType::convgru, false, false}};
  for (int t = 0; t < 2; ++t) {
    for (const auto& v : variants) {
      ParamStore<double> store;
      RecurrentCell<double> cell(CellSpec{v.type, 2, 2, 4, 4, 3, 1.0, v.reset, v.peephole}, "c",
                                 store, rng);
      std::uniform_real_distribution<double> d(-0.5, 0.5);
      for (auto& e : store.entries())
        for (auto& x : e.value.values()) x = d(rng);
      const bool gru = v.type == CellType::convgru;
      std::vector<Tensor<double>> in{random_tensor(Shape{3, 2, 4, 4}, rng),
                                     random_tensor(Shape{2, 4, 4}, rng)};
      if (!gru) in.push_back(random_tensor(Shape{2, 4, 4}, rng));
      auto build = [&](Tape<double>& tape, const std::vector<Var<double>>& x) {
        auto bound = cell.bind(tape, store);
        CellState<double> s{x[1], gru ? Var<double>{} : x[2]};
        for (std::size_t k = 0; k < 3; ++k) s = bound.step(s, select(x[0], k));
        return gru ? s.h : concat(std::vector{s.h, s.c});
      };
      const auto rep = check_gradients(build, in, store, rng);
      ++trials;
      worst = std::max(worst, rep.worst);
      if (!rep.ok(1e-4)) ++failed;
    }
  }
  const double secs = seconds_since(t0);
  return {failed == 0 && trials >= 100 && secs < 120,
          std::to_string(trials) + " trials, " + std::to_string(failed) + " over tolerance, worst " +
              num(worst) + ", " + num(secs) + " s"};
}

// ---------------------------------------------------------------------------
// 2. Cell identities

template <typename T>
struct IdentityProbe {
  double fixed = 0;     // gates -> 0: deviation of the carried state
  double unit = 0;      // gates -> 1: deviation from the candidate
  double bound = 0;     // convex-combination overshoot
};

template <typename T>
IdentityProbe<T> probe_identities(std::mt19937_64& rng) {
  IdentityProbe<T> out;
  auto gap = [](const Tensor<T>& a, const Tensor<T>& b) { return static_cast<double>(max_abs_diff(a, b)); };
  std::uniform_real_distribution<double> d(-0.8, 0.8);
  auto rand = [&](const Shape& s, double scale) {
    Tensor<T> t(s);
    for (auto& v : t.values()) v = static_cast<T>(scale * d(rng));
    return t;
  };
  auto forced = [&](ParamStore<T>& store, const std::string& bias, double v) {
    store.at(bias).value.fill(static_cast<T>(v));
  };
  const Shape hs{3, 5, 5}, xs{2, 5, 5};
  for (int trial = 0; trial < 10; ++trial) {
    for (bool reset : {false, true}) {
      for (bool peep : {false, true}) {
        ParamStore<T> store;
        RecurrentCell<T> cell(CellSpec{CellType::convlem, 2, 3, 5, 5, 3, 1.0, reset, peep}, "c", store, rng);
        for (auto& e : store.entries()) e.value = rand(e.value.shape(), 1.0);
        const auto x = rand(xs, 2.0), h = rand(hs, 1.2), c = rand(hs, 1.2);
        forced(store, "c.b_xt", -1e4);
        forced(store, "c.b_xtbar", -1e4);
        {
          Tape<T> tape(false);
          auto s = cell.bind(tape, store).step({tape.constant(h), tape.constant(c)}, tape.constant(x));
          out.fixed = std::max({out.fixed, gap(s.c.value(), c), gap(s.h.value(), h)});
        }
        forced(store, "c.b_xt", 1e4);
        {
          Tape<T> tape(false);
          auto s = cell.bind(tape, store).step({tape.constant(h), tape.constant(c)}, tape.constant(x));
          auto p = [&](const std::string& n) { return tape.param(store, "c." + n); };
          auto fc = wavecast::tanh(add(conv2d(tape.constant(x), p("W_xc"), p("b_xc"), 1, 1),
                                       conv2d(tape.constant(h), p("W_hc"), p("b_hc"), 1, 1)));
          out.unit = std::max(out.unit, gap(s.c.value(), fc.value()));
        }
      }
    }
    {
      ParamStore<T> store;
      RecurrentCell<T> cell(CellSpec{CellType::convlstm, 2, 3, 5, 5}, "c", store, rng);
      for (auto& e : store.entries()) e.value = rand(e.value.shape(), 1.0);
      const auto x = rand(xs, 2.0), h = rand(hs, 1.0), c = rand(hs, 1.5);
      forced(store, "c.b_xf", 1e4);
      forced(store, "c.b_xi", -1e4);
      Tape<T> tape(false);
      auto s = cell.bind(tape, store).step({tape.constant(h), tape.constant(c)}, tape.constant(x));
      out.fixed = std::max(out.fixed, gap(s.c.value(), c));
    }
    {
      ParamStore<T> store;
      RecurrentCell<T> cell(CellSpec{CellType::convgru, 2, 3, 5, 5}, "c", store, rng);
      for (auto& e : store.entries()) e.value = rand(e.value.shape(), 2.0);
      const auto x = rand(xs, 3.0), h = rand(hs, 2.5);
      {
        Tape<T> tape(false);
        auto s = cell.bind(tape, store).step({tape.constant(h), {}}, tape.constant(x));
        for (std::size_t i = 0; i < h.size(); ++i) {
          const double lim = std::max(1.0, std::abs(static_cast<double>(h[i])));
          out.bound = std::max(out.bound, std::abs(static_cast<double>(s.h.value()[i])) - lim);
        }
      }
      forced(store, "c.b_xz", -1e4);
      Tape<T> tape(false);
      auto s = cell.bind(tape, store).step({tape.constant(h), {}}, tape.constant(x));
      out.fixed = std::max(out.fixed, gap(s.h.value(), h));
    }
  }
  return out;
}

Outcome cell_identities() {
  std::mt19937_64 rng(77);
  const auto d = probe_identities<double>(rng);
  const auto f = probe_identities<float>(rng);
  const bool ok = d.fixed <= 1e-15 && d.unit <= 1e-12 && d.bound <= 1e-15 && f.fixed <= 1e-6 &&
                  f.unit <= 1e-6 && f.bound <= 1e-6;
  return {ok, "double fixed " + num(d.fixed) + " unit " + num(d.unit) + " bound " + num(d.bound) +
                  "; float fixed " + num(f.fixed) + " unit " + num(f.unit) + " bound " + num(f.bound)};
}

// ---------------------------------------------------------------------------
// 3. Shape contract

Outcome shape_contract() {
  auto probe = [](std::size_t h, std::size_t w) {
    NetworkConfig c;
    c.height = h;
    c.width = w;
    c.window = c.horizon = 2;
    WaveCastNet<float> net(c, 1);
    Tape<float> tape(false);
    auto z = net.embed_dense(tape, tape.constant(Tensor<float>(Shape{1, 3, h, w}, 0.25f)), {});
    auto back = net.reconstruct(tape, z);
    return std::make_pair(z.shape(), back.shape());
  };
  const auto full = probe(344, 224);
  const auto desk = probe(32, 32);
  const bool ok = full.first == Shape{1, 144, 43, 28} && full.second == Shape{1, 3, 344, 224} &&
                  desk.first == Shape{1, 144, 4, 4} && desk.second == Shape{1, 3, 32, 32};
  return {ok, "full " + shape_string(full.first) + " -> " + shape_string(full.second) + ", desk " +
                  shape_string(desk.first) + " -> " + shape_string(desk.second)};
}

// ---------------------------------------------------------------------------
// 4. Metric unit suite

Outcome metric_suite() {
  std::vector<std::string> bad;
  auto expect = [&](bool c, const std::string& what) {
    if (!c) bad.push_back(what);
  };
  Tensor<double> s(Shape{1, 3, 1, 1}, std::vector<double>{3, 4, 100});
  expect(pgv(s)[0] == 5.0, "pgv 3-4-5");
  std::mt19937_64 rng(5);
  auto t = random_tensor(Shape{2, 3, 2, 2}, rng);
  auto neg = t;
  for (auto& v : neg.values()) v = -v;
  expect(std::abs(acc(t, t).value - 1.0) <= 1e-15, "acc +1");
  expect(std::abs(acc(neg, t).value + 1.0) <= 1e-15, "acc -1");
  expect(rfne(t, t) == 0.0, "rfne 0");
  expect(rfne(Tensor<double>(t.shape()), t) == 1.0, "rfne 1");
  expect(rfne(neg, t) == 2.0, "rfne 2");
  Tensor<double> z(Shape{1, 1, 1, 1});
  expect(loss_huber(Tensor<double>(Shape{1, 1, 1, 1}, 0.5), z) == 0.125, "huber 0.125");
  expect(loss_huber(Tensor<double>(Shape{1, 1, 1, 1}, 2.0), z) == 1.5, "huber 1.5");
  expect(huber_penalty(1.0, 1.0) == 0.5, "huber at delta");
  expect(std::abs(huber_penalty(std::nextafter(1.0, 2.0), 1.0) - 0.5) <= 1e-15 &&
             std::abs(huber_penalty(std::nextafter(1.0, 0.0), 1.0) - 0.5) <= 1e-15,
         "huber continuity");
  std::string detail = "11 cases";
  for (const auto& b : bad) detail += ", failed " + b;
  return {bad.empty(), detail};
}

// ---------------------------------------------------------------------------
// 5. Latency formula

Outcome latency_formula() {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> n(0.0, 3.0);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  int worst = 0;
  for (int i = 0; i < 1000000; ++i) {
    const double s = (i % 2) ? n(rng) : u(rng);
    worst = std::max(worst, std::abs(latency_steps(s)));
  }
  Tensor<float> readings(Shape{3, 20, 500}, 1.0f);
  const auto shifted = latency_shift(readings, 10.0, 3);
  for (int k : shifted.shifts) worst = std::max(worst, std::abs(k));
  const bool cases = latency_steps(0.3) == 1 && latency_steps(-5.2) == -4;
  return {worst <= kMaxLatencySteps && cases,
          "max |shift| " + std::to_string(worst) + " over 1e6 samples, s=0.3 -> " +
              std::to_string(latency_steps(0.3)) + ", s=-5.2 -> " + std::to_string(latency_steps(-5.2))};
}

// ---------------------------------------------------------------------------
// 6. Physics oracles

Outcome physics() {
  std::vector<std::string> parts;
  bool ok = true;
  double slowest = 0;
  auto timed = [&](const std::function<bool(std::string&)>& f) {
    const auto t0 = Clock::now();
    std::string d;
    ok = f(d) && ok;
    slowest = std::max(slowest, seconds_since(t0));
    parts.push_back(d);
  };
  timed([](std::string& d) {
    auto cfg = testsupport::homogeneous();
    cfg.wavelet.peak_frequency = 1.3;
    cfg.duration = 3.2;
    const auto fit = testsupport::wavefront_speed(cfg, 6, 28);
    d = "speed " + num(fit.slope) + " m/s vs 2000";
    return fit.points >= 5 && std::abs(fit.slope - 2000.0) <= 100.0;
  });
  timed([](std::string& d) {
    auto cfg = testsupport::homogeneous();
    cfg.velocity = build_velocity(64, 64, VelocityModel{2000, {Basin{20, 40, 8, 12, 1400, 2}}});
    const auto one = simulate(cfg).frames;
    cfg.wavelet.amplitude *= 2;
    const auto two = simulate(cfg).frames;
    double worst = 0, peak = 0;
    for (std::size_t i = 0; i < one.size(); ++i) {
      worst = std::max(worst, std::abs(double(two[i]) - 2.0 * double(one[i])));
      peak = std::max(peak, std::abs(2.0 * double(one[i])));
    }
    d = "linearity " + num(worst / peak);
    return worst / peak < 1e-6;
  });
  timed([](std::string& d) {
    auto cfg = testsupport::homogeneous();
    cfg.velocity = build_velocity(64, 64, VelocityModel{2000, {Basin{40, 20, 10, 10, 1400, 2}}});
    const auto res = simulate(cfg, SimOptions{true, false});
    const double g = testsupport::worst_energy_growth(res);
    d = "energy growth " + num(g);
    return res.energy.size() > res.source_off_step + 10 && g <= 1e-12;
  });
  timed([](std::string& d) {
    const double e = testsupport::reciprocity_error(testsupport::homogeneous(), 20, 15, 40, 45);
    d = "reciprocity " + num(e);
    return e < 1e-4;
  });
  std::string detail;
  for (const auto& p : parts) detail += p + ", ";
  detail += "slowest " + num(slowest) + " s";
  return {ok && slowest < 60, detail};
}

// ---------------------------------------------------------------------------
// 8. Moving blobs

struct BlobTask {
  std::vector<Tensor<float>> inputs, targets;
};

BlobTask moving_blobs(std::size_t count, std::size_t J, std::size_t K, std::size_t n,
                      std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(3.0, n - 3.0), vel(-1.2, 1.2), rad(1.2, 2.2);
  BlobTask task;
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t blobs = 1 + s % 2;
    std::vector<std::array<double, 5>> b(blobs);
    for (auto& x : b) x = {pos(rng), pos(rng), vel(rng), vel(rng), rad(rng)};
    Tensor<float> seq(Shape{J + K, 1, n, n});
    for (std::size_t t = 0; t < J + K; ++t) {
      for (auto& x : b) {
        for (int axis = 0; axis < 2; ++axis) {
          x[axis] += x[2 + axis];
          if (x[axis] < 1 || x[axis] > n - 2.0) {
            x[2 + axis] = -x[2 + axis];
            x[axis] += 2 * x[2 + axis];
          }
        }
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double r2 = (i - x[0]) * (i - x[0]) + (j - x[1]) * (j - x[1]);
            float& v = seq[(t * n + i) * n + j];
            v = std::max(v, static_cast<float>(std::exp(-r2 / (2 * x[4] * x[4]))));
          }
      }
    }
    task.inputs.push_back(frame_range(seq, 0, J));
    task.targets.push_back(frame_range(seq, J, K));
  }
  return task;
}

double train_blob_forecaster(CellType type, const BlobTask& train, const BlobTask& test,
                             std::size_t steps, std::size_t& params) {
  const std::size_t K = train.targets[0].dim(0), n = train.targets[0].dim(2);
  CellStackForecaster<float> f(type, 2, 8, n, n, 11);
  params = f.count_parameters();
  Adam<float> adam(f.params(), 3e-3, 0.9, 0.999, 1e-8, 5.0);
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t i = s % train.inputs.size();
    Tape<float> tape;
    auto loss = bce_with_logits(f.forward(tape, train.inputs[i], K), train.targets[i]);
    tape.backward(loss);
    auto grads = f.params().gradient_buffers();
    tape.accumulate_param_grads(f.params(), grads);
    adam.step(f.params(), grads);
  }
  double total = 0;
  for (std::size_t i = 0; i < test.inputs.size(); ++i) {
    Tape<float> tape(false);
    total += bce_with_logits(f.forward(tape, test.inputs[i], K), test.targets[i]).value()[0];
  }
  return total / static_cast<double>(test.inputs.size());
}

Outcome cell_comparison() {
  const auto train = moving_blobs(48, 5, 5, 16, 1);
  const auto test = moving_blobs(16, 5, 5, 16, 2);
  std::size_t plem = 0, plstm = 0;
  const double lem = train_blob_forecaster(CellType::convlem, train, test, 480, plem);
  const double lstm = train_blob_forecaster(CellType::convlstm, train, test, 480, plstm);
  const bool finite = std::isfinite(lem) && std::isfinite(lstm);
  return {finite, "held-out BCE convlem " + num(lem) + " (" + std::to_string(plem) +
                      " params) convlstm " + num(lstm) + " (" + std::to_string(plstm) +
                      " params); ordering convlem <= convlstm " + (lem <= lstm ? "holds" : "fails") +
                      " (advisory)"};
}

// ---------------------------------------------------------------------------
// CLI-driven criteria

struct DeskState {
  bool ready = false;
  std::string dataset, model;
  double train_seconds = 0;
  std::string error;
};

DeskState prepare_desk(const Harness& h) {
  DeskState d;
  const auto data = (h.work / "desk_data").string();
  const auto best = h.work / "desk_model" / "best.wcn";
  if (h.reuse && fs::exists(best)) {
    d.ready = true;
    d.dataset = data;
    d.model = best.string();
    const auto log = io::read_file((h.work / "desk_model.train.log").string());
    const auto at = log.rfind("seconds_total ");
    d.train_seconds = at == std::string::npos ? NAN : std::strtod(log.c_str() + at + 14, nullptr);
    return d;
  }
  const auto sim = h.write_config("desk_sim.conf", desk_sim_config());
  auto rs = h.run("simulate", sim, data);
  if (rs.code != 0) {
    d.error = "simulate exit " + std::to_string(rs.code);
    return d;
  }
  const auto out = (h.work / "desk_model").string();
  fs::remove_all(out);
  const auto tc = h.write_config("desk_train.conf", desk_train_config(data, h.train_budget));
  auto rt = h.run("train", tc, out);
  if (rt.code != 0) {
    d.error = "train exit " + std::to_string(rt.code);
    return d;
  }
  d.ready = true;
  d.dataset = data;
  d.model = (fs::path(out) / "best.wcn").string();
  d.train_seconds = rt.seconds;
  std::ofstream(h.work / "desk_model.train.log", std::ios::app) << "seconds_total " << rt.seconds << '\n';
  return d;
}

Outcome desk_learning(const DeskState& d) {
  if (!d.ready) return {false, d.error};
  const auto model = load_model(d.model);
  const auto manifest = open_dataset(d.dataset);
  const auto test = split_events(manifest, "test");
  const auto train = split_events(manifest, "train");
  const auto trained = evaluate_model(model, test, 0);
  ModelBundle untrained;
  untrained.net = std::make_unique<WaveCastNet<float>>(model.config(), 7);
  untrained.norm = model.norm;
  untrained.channel_scale = model.channel_scale;
  const auto base = evaluate_model(untrained, test, 0);
  const double a = trained.report.aggregate.acc, r = trained.report.aggregate.rfne;
  const double u = base.report.aggregate.acc;
  const bool ok = train.size() >= 64 && test.size() >= 16 && d.train_seconds <= 1800 && a >= 0.90 &&
                  r <= 0.45 && a - u >= 0.5;
  return {ok, std::to_string(train.size()) + " train / " + std::to_string(test.size()) +
                  " test events, trained in " + num(d.train_seconds) + " s, test ACC " + num(a) +
                  " RFNE " + num(r) + ", untrained ACC " + num(u)};
}

Outcome iterative_forecasting(const Harness& h, const DeskState& d) {
  if (!d.ready) return {false, d.error};
  bool ok = true;
  std::string detail;
  for (std::size_t horizon : {140u, 130u, 20u}) {
    const auto cfg = h.write_config(
        "forecast_" + std::to_string(horizon) + ".conf",
        "checkpoint = " + d.model + "\ndataset = " + d.dataset + "\nevent = 0\nhorizon_steps = " +
            std::to_string(horizon) + "\nobserved_length = 7\nseed = 3\n");
    const auto r = h.run("forecast", cfg, (h.work / ("forecast_" + std::to_string(horizon))).string());
    const double want = std::ceil(horizon / 20.0);
    const double got = r.metrics.count("invocations") ? r.metrics.at("invocations") : -1;
    bool finite = r.code == 0;
    if (finite) {
      const auto f = load_sequence((h.work / ("forecast_" + std::to_string(horizon)) / "forecast.wcs").string());
      for (auto v : f.frames.values()) finite = finite && std::isfinite(v);
      finite = finite && f.frames.dim(0) == horizon;
    }
    ok = ok && finite && got == want;
    detail += "horizon " + std::to_string(horizon) + " -> " + num(got) + " invocations; ";
  }
  const auto model = load_model(d.model);
  const auto test = split_events(open_dataset(d.dataset), "test");
  const auto full = evaluate_model(model, test, 0).report.aggregate;
  const auto shortr = evaluate_short_inputs(model, test, 0, 7, 5).aggregate;
  const bool finite = std::isfinite(shortr.acc) && std::isfinite(shortr.rfne);
  ok = ok && finite && std::abs(full.acc - shortr.acc) <= 0.1;
  detail += "7-step input ACC " + num(shortr.acc) + " vs full-window ACC " + num(full.acc);
  return {ok, detail};
}

Outcome robustness(const DeskState& d) {
  if (!d.ready) return {false, d.error};
  const auto model = load_model(d.model);
  const auto test = split_events(open_dataset(d.dataset), "test");
  const auto cases = window_cases(test, model.config(), 0);
  const auto clean = evaluate_cases(model.predictor(), cases).aggregate;
  std::vector<PerturbationSpec> grid;
  for (auto k : {PerturbationKind::gaussian_noise, PerturbationKind::correlated_noise,
                 PerturbationKind::latency_shift}) {
    grid.push_back({k, 0.0, 9});
  }
  grid.push_back({PerturbationKind::gaussian_noise, 1.0, 9});
  grid.push_back({PerturbationKind::gaussian_noise, 2.0, 9});
  const auto rows = run_robustness_sweep(model.predictor(), cases, grid, 1, &model.norm.std);
  bool bitwise = true;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& m = rows[i].metrics;
    bitwise = bitwise && m.acc == clean.acc && m.rfne == clean.rfne && m.log_pgv == clean.log_pgv;
  }
  const double drop = clean.acc - rows[3].metrics.acc;
  return {bitwise && drop < 0.15,
          std::string("zero-level rows ") + (bitwise ? "bitwise equal" : "differ") + ", clean ACC " +
              num(clean.acc) + ", gaussian 1 ACC " + num(rows[3].metrics.acc) + " (drop " + num(drop) +
              "), gaussian 2 ACC " + num(rows[4].metrics.acc)};
}

struct FastState {
  bool ready = false;
  std::string dataset;
};

FastState prepare_fast(const Harness& h) {
  FastState f;
  const auto data = (h.work / "fast_data").string();
  const auto sim = h.write_config("fast_sim.conf", fast_sim_config());
  f.ready = h.run("simulate", sim, data).code == 0;
  f.dataset = data;
  return f;
}

double min_of_file(const fs::path& p) {
  const auto s = load_sequence(p.string());
  double m = INFINITY;
  for (auto v : s.frames.values()) m = std::min(m, static_cast<double>(v));
  return m;
}

Outcome ensemble(const Harness& h, const FastState& f) {
  if (!f.ready) return {false, "simulate failed"};
  const std::string base = fast_train_config(f.dataset) + "members = 8\n";
  const auto boot = h.run("ensemble", h.write_config("ens_boot.conf", base),
                          (h.work / "ens_boot").string());
  const auto same = h.run("ensemble", h.write_config("ens_same.conf", base + "identical_members = true\n"),
                          (h.work / "ens_same").string());
  if (boot.code != 0 || same.code != 0) return {false, "ensemble command failed"};
  double file_min = INFINITY;
  std::size_t maps = 0;
  for (const auto& e : fs::directory_iterator(h.work / "ens_boot")) {
    const auto name = e.path().filename().string();
    if (name.size() > 8 && name.ends_with("_std.wcs")) {
      file_min = std::min(file_min, min_of_file(e.path()));
      ++maps;
    }
  }
  const double smin = boot.metrics.count("ensemble_std_min") ? boot.metrics.at("ensemble_std_min") : -1;
  const double smax = boot.metrics.count("ensemble_std_max") ? boot.metrics.at("ensemble_std_max") : -1;
  const double zero = same.metrics.count("ensemble_std_max") ? same.metrics.at("ensemble_std_max") : 1;
  const double members = boot.metrics.count("ensemble_members") ? boot.metrics.at("ensemble_members") : 0;
  const bool ok = members == 8 && maps > 0 && file_min >= 0 && smin >= 0 && smax > 0 && zero < 1e-6;
  return {ok, "M=" + num(members) + ", " + std::to_string(maps) + " std maps, min " + num(file_min) +
                  ", bootstrap std max " + num(smax) + ", identical-member std max " + num(zero)};
}

Outcome determinism(const Harness& h, const FastState& f, const DeskState& d) {
  if (!f.ready) return {false, "simulate failed"};
  std::vector<std::string> bad;
  // Checkpoint roundtrip.
  if (d.ready) {
    const auto m1 = load_model(d.model);
    const auto copy = (h.work / "roundtrip.wcn").string();
    save_checkpoint(load_checkpoint(d.model), copy);
    const auto m2 = load_model(copy);
    const auto test = split_events(open_dataset(d.dataset), "test");
    const auto a = evaluate_model(m1, test, 0).report.aggregate;
    const auto b = evaluate_model(m2, test, 0).report.aggregate;
    if (!(a.acc == b.acc && a.rfne == b.rfne && a.log_pgv == b.log_pgv)) bad.push_back("roundtrip metrics");
    if (io::read_file(copy) != io::read_file(d.model)) bad.push_back("roundtrip bytes");
  } else {
    bad.push_back("desk model missing");
  }
  // Repeated CLI runs.
  const auto sim = h.write_config("repro_sim.conf", fast_sim_config());
  if (h.run("simulate", sim, (h.work / "repro_data").string()).code != 0) bad.push_back("simulate");
  for (const auto& e : fs::directory_iterator(h.work / "repro_data")) {
    const auto other = h.work / "fast_data" / e.path().filename();
    if (io::read_file(e.path().string()) != io::read_file(other.string())) {
      bad.push_back("simulate " + e.path().filename().string());
    }
  }
  const auto tc = h.write_config("repro_train.conf", fast_train_config(f.dataset));
  std::vector<Harness::Run> runs;
  for (const char* out : {"repro_a", "repro_b"}) {
    fs::remove_all(h.work / out);
    runs.push_back(h.run("train", tc, (h.work / out).string(), "--seed 13"));
  }
  if (runs[0].code != 0 || runs[1].code != 0) bad.push_back("train exit");
  if (runs[0].metrics != runs[1].metrics) bad.push_back("train metrics");
  for (const char* file : {"last.wcn", "best.wcn"}) {
    if (io::read_file((h.work / "repro_a" / file).string()) != io::read_file((h.work / "repro_b" / file).string())) {
      bad.push_back(std::string("train ") + file);
    }
  }
  std::vector<std::string> reports;
  for (const char* out : {"repro_a", "repro_b"}) {
    const auto ec = h.write_config(std::string(out) + "_eval.conf",
                                   "checkpoint = " + (h.work / out / "best.wcn").string() +
                                       "\ndataset = " + f.dataset + "\neval_start = 6\n");
    const auto r = h.run("evaluate", ec, (h.work / (std::string(out) + "_eval")).string());
    reports.push_back(r.code == 0 ? io::read_file((h.work / (std::string(out) + "_eval") / "evaluation.txt").string())
                                  : std::string("failed"));
  }
  if (reports[0] != reports[1] || reports[0] == "failed") bad.push_back("evaluate report");
  std::string detail = bad.empty() ? "checkpoint roundtrip and repeated simulate/train/evaluate runs identical"
                                   : "mismatch:";
  for (const auto& b : bad) detail += " " + b;
  return {bad.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"wavecast acceptance checks"};
  Harness h;
  std::string work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--cli", h.cli, "path to the wavecast executable")->required();
  app.add_option("--work", work, "scratch directory");
  app.add_option("--train-budget", h.train_budget, "desk training time budget in seconds");
  app.add_option("--only", only, "run only these criteria");
  app.add_flag("--reuse-desk", h.reuse, "reuse a previously trained desk model");
  CLI11_PARSE(app, argc, argv);
  h.work = fs::absolute(work);
  h.cli = fs::absolute(h.cli).string();
  fs::create_directories(h.work);

  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };
  int failures = 0;
  auto report = [&](int n, const std::string& title, const std::function<Outcome()>& f) {
    if (!wanted(n)) return;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << "criterion " << n << ' ' << (o.pass ? "PASS" : "FAIL") << ' ' << title << ": "
              << o.detail << " [" << num(seconds_since(t0)) << " s]" << std::endl;
  };

  report(1, "gradient oracle suite", gradient_suite);
  report(2, "cell algebraic identities", cell_identities);
  report(3, "shape contract", shape_contract);
  report(4, "metric unit suite", metric_suite);
  report(5, "latency formula", latency_formula);
  report(6, "wave-sim physics oracles", physics);

  DeskState desk;
  if (wanted(7) || wanted(9) || wanted(10) || wanted(12)) {
    try {
      desk = prepare_desk(h);
    } catch (const std::exception& e) {
      desk.error = e.what();
    }
  }
  report(7, "desk-scale learning", [&] { return desk_learning(desk); });
  report(8, "moving-blobs cell comparison", cell_comparison);
  report(9, "iterative forecasting", [&] { return iterative_forecasting(h, desk); });
  report(10, "robustness sweep", [&] { return robustness(desk); });
  FastState fast;
  if (wanted(11) || wanted(12)) fast = prepare_fast(h);
  report(11, "bootstrap ensemble", [&] { return ensemble(h, fast); });
  report(12, "determinism and persistence", [&] { return determinism(h, fast, desk); });
  return failures == 0 ? 0 : 1;
}
