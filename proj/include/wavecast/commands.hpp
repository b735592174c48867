#pragma once

// Subcommands behind the `wavecast` executable. Each reads a ConfigFile and
// writes artifacts under an output directory; progress and metric lines go
// to the supplied stream.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "wavecast/config.hpp"
#include "wavecast/robustness.hpp"
#include "wavecast/train.hpp"

namespace wavecast {

inline const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys{
      // simulation and dataset
      "height", "width", "spacing", "dt", "record_interval", "duration", "sponge_width",
      "sponge_reflection", "ricker_frequency", "ricker_amplitude", "ricker_delay",
      "background_velocity", "basin", "events", "depths", "margin", "train_fraction", "split_seed",
      // network
      "cell", "reset_gate", "peephole", "layers", "latent_channels", "window", "horizon",
      "embedding", "station_count", "sparse_hidden", "cell_kernel", "cell_dt",
      // training
      "dataset", "learning_rate", "batch_size", "epochs", "loss", "huber_delta", "clip_norm",
      "mask_ratio", "validation_fraction", "eval_start", "random_offsets", "short_window_prob",
      "min_observed", "teacher_forcing", "samples_per_epoch", "time_budget", "resume", "seed",
      "threads", "output",
      // ensemble
      "members", "resample_seed", "identical_members",
      // evaluation, forecasting, robustness, gates
      "checkpoint", "split", "input", "event", "observed_start", "observed_length",
      "horizon_steps", "renormalize", "noise_levels", "perturbations", "robustness_seed",
      "sample_events"};
  return keys;
}

inline ConfigFile load_config(const std::string& path) {
  return ConfigFile::load(path, known_config_keys(), {"basin"});
}

struct CommandContext {
  ConfigFile config;
  std::string out_dir;
  std::size_t threads = 1;
  std::ostream* log = nullptr;

  void say(const std::string& line) const {
    if (log) *log << line << std::endl;
  }
  std::string path(const std::string& name) const {
    return (std::filesystem::path(out_dir) / name).string();
  }
};

// ---------------------------------------------------------------------------
// Config readers

/// "row col radius_rows radius_cols velocity [taper]"
inline Basin parse_basin(const std::string& s) {
  std::istringstream in(s);
  std::vector<double> v;
  std::string tok;
  while (in >> tok) v.push_back(ConfigFile::to_real("basin", tok));
  if (v.size() != 5 && v.size() != 6) {
    throw ConfigError("basin expects 'row col radius_rows radius_cols velocity [taper]'");
  }
  Basin b{v[0], v[1], v[2], v[3], v[4], v.size() == 6 ? v[5] : 2.0};
  return b;
}

inline DatasetSpec dataset_spec_from(const ConfigFile& c) {
  DatasetSpec spec;
  auto& b = spec.base;
  b.height = c.count("height", b.height);
  b.width = c.count("width", b.width);
  b.spacing = c.real("spacing", b.spacing);
  b.dt = c.real("dt", b.dt);
  b.record_interval = c.count("record_interval", b.record_interval);
  b.duration = c.real("duration", b.duration);
  b.sponge_width = c.count("sponge_width", b.sponge_width);
  b.sponge_reflection = c.real("sponge_reflection", b.sponge_reflection);
  b.wavelet.peak_frequency = c.real("ricker_frequency", b.wavelet.peak_frequency);
  b.wavelet.amplitude = c.real("ricker_amplitude", b.wavelet.amplitude);
  b.wavelet.delay = c.real("ricker_delay", b.wavelet.delay);
  VelocityModel vm;
  vm.background = c.real("background_velocity", vm.background);
  for (const auto& s : c.all("basin")) vm.basins.push_back(parse_basin(s));
  b.velocity = build_velocity(b.height, b.width, vm);
  b.source_row = b.height / 2;
  b.source_col = b.width / 2;
  spec.events = c.count("events", spec.events);
  spec.depths = c.count("depths", spec.depths);
  spec.margin = c.count("margin", spec.margin);
  spec.train_fraction = c.real("train_fraction", spec.train_fraction);
  spec.split_seed = c.u64("split_seed", c.u64("seed", spec.split_seed));
  if (!(spec.train_fraction > 0 && spec.train_fraction < 1)) {
    throw ConfigError("train_fraction must be in (0,1)");
  }
  return spec;
}

inline NetworkConfig network_config_from(const ConfigFile& c) {
  NetworkConfig n;
  n.cell_type = parse_cell_type(c.str("cell", to_string(n.cell_type)));
  n.reset_gate = c.flag("reset_gate", n.reset_gate);
  n.peephole = c.flag("peephole", n.peephole);
  n.layers = c.count("layers", n.layers);
  n.latent_channels = c.count("latent_channels", n.latent_channels);
  n.height = c.count("height", n.height);
  n.width = c.count("width", n.width);
  n.window = c.count("window", n.window);
  n.horizon = c.count("horizon", n.horizon);
  n.embedding = parse_embedding_mode(c.str("embedding", to_string(n.embedding)));
  n.station_count = c.count("station_count", n.station_count);
  n.sparse_hidden = c.count("sparse_hidden", n.sparse_hidden);
  n.cell_kernel = c.count("cell_kernel", n.cell_kernel);
  n.cell_dt = c.real("cell_dt", n.cell_dt);
  return n;
}

inline TrainConfig train_config_from(const ConfigFile& c) {
  TrainConfig t;
  t.net = network_config_from(c);
  t.learning_rate = c.real("learning_rate", t.learning_rate);
  t.batch_size = c.count("batch_size", t.batch_size);
  t.epochs = c.count("epochs", t.epochs);
  t.loss = parse_loss_kind(c.str("loss", to_string(t.loss)));
  t.huber_delta = c.real("huber_delta", t.huber_delta);
  t.clip_norm = c.real("clip_norm", t.clip_norm);
  t.seed = c.u64("seed", t.seed);
  t.mask_ratio = c.real("mask_ratio", t.mask_ratio);
  t.dataset = c.str("dataset", "");
  t.validation_fraction = c.real("validation_fraction", t.validation_fraction);
  t.split_seed = c.u64("split_seed", t.split_seed);
  t.eval_start = c.count("eval_start", t.eval_start);
  t.random_offsets = c.flag("random_offsets", t.random_offsets);
  t.short_window_prob = c.real("short_window_prob", t.short_window_prob);
  t.min_observed = c.count("min_observed", t.min_observed);
  t.teacher_forcing = c.real("teacher_forcing", t.teacher_forcing);
  t.samples_per_epoch = c.count("samples_per_epoch", t.samples_per_epoch);
  t.time_budget = c.real("time_budget", t.time_budget);
  t.validate();
  return t;
}

inline EnsembleConfig ensemble_config_from(const ConfigFile& c) {
  EnsembleConfig e;
  e.base = train_config_from(c);
  e.members = c.count("members", e.members);
  e.resample_seed = c.u64("resample_seed", e.base.seed);
  e.identical_members = c.flag("identical_members", e.identical_members);
  e.validate();
  return e;
}

/// A manifest path, or a directory holding manifest.txt.
inline DatasetManifest open_dataset(const std::string& where) {
  if (where.empty()) throw ConfigError("missing required key 'dataset'");
  std::filesystem::path p(where);
  if (std::filesystem::is_directory(p)) p /= "manifest.txt";
  return load_manifest(p.string());
}

inline std::vector<EventData> split_events(const DatasetManifest& m, const std::string& split) {
  if (split != "train" && split != "test") throw ConfigError("split must be 'train' or 'test'");
  auto ev = load_events(m, m.split(split));
  if (ev.empty()) throw FormatError("dataset has no '" + split + "' events");
  return ev;
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_simulate(const CommandContext& ctx) {
  const DatasetSpec spec = dataset_spec_from(ctx.config);
  spec.base.validate();
  const auto planned = plan_dataset(spec);
  std::size_t done = 0;
  const std::size_t total = planned.events.size();
  auto m = generate_dataset(spec, ctx.out_dir, ctx.threads, [&](const EventRecord& e) {
    ++done;
    ctx.say("event " + std::to_string(e.id) + " simulated (" + std::to_string(done) + "/" +
            std::to_string(total) + ") source " + std::to_string(e.source_row) + "," +
            std::to_string(e.source_col) + " split " + e.split);
  });
  ctx.say("manifest " + ctx.path("manifest.txt") + " events " + std::to_string(m.events.size()) +
          " train " + std::to_string(m.split("train").size()) + " test " +
          std::to_string(m.split("test").size()));
  return 0;
}

inline int cmd_train(const CommandContext& ctx) {
  TrainConfig cfg = train_config_from(ctx.config);
  cfg.threads = ctx.threads;
  const auto manifest = open_dataset(cfg.dataset);
  Trainer trainer(cfg, manifest);
  if (ctx.config.has("resume")) {
    trainer.resume(load_checkpoint(ctx.config.required("resume")));
    ctx.say("resumed at epoch " + std::to_string(trainer.epochs_done()));
  }
  ctx.say("parameters " + std::to_string(trainer.model().net->count_parameters()) +
          " train_events " + std::to_string(trainer.training_events().size()) +
          " validation_events " + std::to_string(trainer.validation_events().size()));
  std::ofstream log(ctx.path("train.log"), std::ios::app);
  auto logs = trainer.run(
      [&](const std::string& s) {
        ctx.say(s);
        log << s << '\n';
      },
      [&](const EpochLog& e) {
        const auto ck = trainer.checkpoint();
        save_checkpoint(ck, ctx.path("last.wcn"));
        if (e.improved) save_checkpoint(ck, ctx.path("best.wcn"));
      });
  if (!logs.empty()) {
    ctx.say(metric_line("train_loss", logs.back().train_loss));
    ctx.say(metric_line("val_loss", logs.back().val_loss));
  }
  ctx.say(metric_line("best_val_loss", trainer.best_val_loss()));
  return 0;
}

inline void write_sequence(const Tensor<float>& t, double dt, const std::string& path) {
  if (t.rank() == 4) {
    save_sequence(t, dt, path);
  } else {
    Tensor<float> s(Shape{1, 1, t.dim(0), t.dim(1)},
                    std::vector<float>(t.values().begin(), t.values().end()));
    save_sequence(s, dt, path);
  }
}

inline int cmd_ensemble(const CommandContext& ctx) {
  EnsembleConfig ens = ensemble_config_from(ctx.config);
  ens.base.threads = ctx.threads;
  const auto manifest = open_dataset(ens.base.dataset);
  const auto test = split_events(manifest, ctx.config.str("split", "test"));
  const auto cases = window_cases(test, ens.base.net, ens.base.eval_start);
  std::vector<std::vector<Tensor<float>>> forecasts(cases.size());
  const std::size_t n_train = manifest.split("train").size();
  const std::size_t pool =
      n_train - validation_indices(n_train, ens.base.validation_fraction, ens.base.split_seed).size();
  for (std::size_t m = 0; m < ens.members; ++m) {
    TrainConfig cfg = ens.base;
    cfg.seed = ens.member_seed(m);
    Trainer trainer(cfg, manifest, ens.resample(m, pool));
    trainer.run([&](const std::string& s) { ctx.say("member " + std::to_string(m) + " " + s); });
    save_checkpoint(trainer.checkpoint(), ctx.path("member_" + std::to_string(m) + ".wcn"));
    for (std::size_t i = 0; i < cases.size(); ++i) {
      forecasts[i].push_back(trainer.model().predict_physical(cases[i].input));
    }
  }
  double max_std = 0, mean_std = 0, min_std = std::numeric_limits<double>::infinity();
  std::size_t n = 0;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto maps = ensemble_maps(forecasts[i]);
    const std::string tag = "event_" + std::to_string(cases[i].id) + "_";
    write_sequence(maps.wave_mean, manifest.dt, ctx.path(tag + "wave_mean.wcs"));
    write_sequence(maps.wave_std, manifest.dt, ctx.path(tag + "wave_std.wcs"));
    write_sequence(maps.ln_pgv_mean, manifest.dt, ctx.path(tag + "ln_pgv_mean.wcs"));
    write_sequence(maps.ln_pgv_std, manifest.dt, ctx.path(tag + "ln_pgv_std.wcs"));
    write_sequence(maps.t_pgv_mean, manifest.dt, ctx.path(tag + "t_pgv_mean.wcs"));
    write_sequence(maps.t_pgv_std, manifest.dt, ctx.path(tag + "t_pgv_std.wcs"));
    for (auto v : maps.wave_std.values()) {
      max_std = std::max<double>(max_std, v);
      min_std = std::min<double>(min_std, v);
      mean_std += v;
      ++n;
    }
    const auto score = score_forecast(maps.wave_mean, cases[i].truth);
    ctx.say("event " + std::to_string(cases[i].id) + " ensemble_mean_acc " + fmt(score.acc) +
            " rfne " + fmt(score.rfne));
  }
  ctx.say(metric_line("ensemble_members", static_cast<double>(ens.members)));
  ctx.say(metric_line("ensemble_std_min", n ? min_std : 0.0));
  ctx.say(metric_line("ensemble_std_max", max_std));
  ctx.say(metric_line("ensemble_std_mean", n ? mean_std / static_cast<double>(n) : 0.0));
  return 0;
}

inline std::string evaluation_report(const EvaluationResult& r) {
  std::ostringstream out;
  out << "# event acc rfne log_pgv_error t_pgv_error_steps\n";
  for (std::size_t i = 0; i < r.report.cases.size(); ++i) {
    const auto& c = r.report.cases[i];
    out << c.id << ' ' << fmt(c.acc) << ' ' << fmt(c.rfne) << ' ' << fmt(c.log_pgv) << ' '
        << fmt(r.peak_time[i].mean_abs_steps) << '\n';
  }
  const auto& a = r.report.aggregate;
  out << "all " << fmt(a.acc) << ' ' << fmt(a.rfne) << ' ' << fmt(a.log_pgv) << ' '
      << fmt(r.peak_time_mean) << '\n';
  return out.str();
}

inline int cmd_evaluate(const CommandContext& ctx) {
  const auto model = load_model(ctx.config.required("checkpoint"));
  const auto manifest = open_dataset(ctx.config.str("dataset", ""));
  const auto events = split_events(manifest, ctx.config.str("split", "test"));
  const std::size_t start = ctx.config.count("eval_start", 0);
  const auto r = evaluate_model(model, events, start, ctx.threads);
  const std::string report = evaluation_report(r);
  io::write_file(ctx.path("evaluation.txt"), report);
  std::istringstream rows(report);
  for (std::string line; std::getline(rows, line);) ctx.say(line);
  for (std::size_t i = 0; i < r.peak_time.size(); ++i) {
    const auto& mask = r.peak_time[i].mask;
    Tensor<float> m(Shape{model.config().height, model.config().width});
    for (std::size_t j = 0; j < mask.size(); ++j) m[j] = mask[j];
    write_sequence(m, manifest.dt,
                   ctx.path("event_" + std::to_string(r.report.cases[i].id) + "_t_pgv_mask.wcs"));
  }
  for (const auto& l : r.report.metric_lines()) ctx.say(l);
  ctx.say(metric_line("t_pgv_error", r.peak_time_mean));
  return 0;
}

inline int cmd_forecast(const CommandContext& ctx) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto model = load_model(ctx.config.required("checkpoint"));
  const auto& nc = model.config();
  Tensor<float> seq;
  double dt = 0;
  if (ctx.config.has("input")) {
    auto s = load_sequence(ctx.config.required("input"));
    seq = std::move(s.frames);
    dt = s.dt;
  } else {
    const auto manifest = open_dataset(ctx.config.str("dataset", ""));
    const std::size_t id = ctx.config.count("event", 0);
    const EventRecord* rec = nullptr;
    for (const auto& e : manifest.events)
      if (e.id == id) rec = &e;
    if (!rec) throw ConfigError("event " + std::to_string(id) + " not in the dataset");
    auto s = load_sequence(manifest.resolve(*rec));
    seq = std::move(s.frames);
    dt = s.dt;
  }
  if (seq.rank() != 4 || Shape(seq.shape().begin() + 1, seq.shape().end()) != nc.snapshot_shape()) {
    throw DimensionError("input sequence " + shape_string(seq.shape()) +
                         " does not match the model snapshot " + shape_string(nc.snapshot_shape()));
  }
  const std::size_t start = ctx.config.count("observed_start", 0);
  const std::size_t length = ctx.config.count("observed_length", nc.window);
  if (length < 1) throw ConfigError("observed_length must be >= 1");
  const long horizon = static_cast<long>(ctx.config.count("horizon_steps", nc.horizon));
  Tensor<float> observed = frame_range(seq, start, length);
  std::vector<float> scale(nc.channels, 1.0f);
  if (ctx.config.flag("renormalize", false)) {
    auto w = renormalize_window(observed, 0, length - 1);
    for (std::size_t c = 0; c < nc.channels; ++c) {
      const float ref = c < model.channel_scale.size() ? model.channel_scale[c] : 1.0f;
      scale[c] = w.scales[c] / ref;
      ctx.say("renormalize channel " + std::to_string(c) + " window_std " + fmt(w.scales[c]) +
              " reference_std " + fmt(ref) + " factor " + fmt(scale[c]));
    }
    const std::size_t plane = nc.height * nc.width;
    for (std::size_t i = 0; i < observed.size(); ++i) observed[i] /= scale[(i / plane) % nc.channels];
  }
  // Only the last J frames can reach the model.
  if (length > nc.window) observed = frame_range(observed, length - nc.window, nc.window);
  const auto f = forecast_iterative(*model.net, normalize(observed, model.norm), horizon,
                                    ctx.config.u64("seed", 0));
  Tensor<float> out = denormalize(f.frames, model.norm);
  const std::size_t plane = nc.height * nc.width;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= scale[(i / plane) % nc.channels];
  save_sequence(out, dt, ctx.path("forecast.wcs"));
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ctx.say("observed " + std::to_string(length) + " steps from " + std::to_string(start) +
          " padded " + std::to_string(f.padded_steps) + " invocations " +
          std::to_string(f.invocations) + " horizon " + std::to_string(horizon));
  ctx.say(metric_line("invocations", static_cast<double>(f.invocations)));
  ctx.say(metric_line("wall_clock_seconds", secs));
  const std::size_t truth_end = start + length + static_cast<std::size_t>(horizon);
  if (truth_end <= seq.dim(0)) {
    const auto truth = frame_range(seq, start + length, static_cast<std::size_t>(horizon));
    const auto s = score_forecast(out, truth);
    ctx.say(metric_line("acc", s.acc));
    ctx.say(metric_line("rfne", s.rfne));
  }
  return 0;
}

inline int cmd_robustness(const CommandContext& ctx) {
  const auto model = load_model(ctx.config.required("checkpoint"));
  const auto manifest = open_dataset(ctx.config.str("dataset", ""));
  const auto events = split_events(manifest, ctx.config.str("split", "test"));
  const auto cases = window_cases(events, model.config(), ctx.config.count("eval_start", 0));
  std::vector<double> levels = ctx.config.reals("noise_levels");
  if (levels.empty()) levels = {0.0, 0.5, 1.0, 2.0};
  std::vector<PerturbationKind> kinds;
  {
    std::istringstream in(ctx.config.str("perturbations", "gaussian_noise correlated_noise latency_shift"));
    std::string k;
    while (in >> k) kinds.push_back(parse_perturbation_kind(k));
  }
  const std::uint64_t seed = ctx.config.u64("robustness_seed", ctx.config.u64("seed", 0));
  std::vector<PerturbationSpec> grid;
  for (auto k : kinds)
    for (double l : levels) grid.push_back({k, l, seed});
  const auto rows = run_robustness_sweep(model.predictor(), cases, grid, ctx.threads, &model.norm.std);
  const std::string table = sweep_table(rows);
  io::write_file(ctx.path("robustness.txt"), table);
  std::istringstream in(table);
  for (std::string line; std::getline(in, line);) ctx.say(line);
  for (const auto& l : sweep_metric_lines(rows)) ctx.say(l);
  return 0;
}

inline int cmd_inspect_gates(const CommandContext& ctx) {
  const auto model = load_model(ctx.config.required("checkpoint"));
  if (model.config().cell_type != CellType::convlem) {
    throw UsageError("gate inspection needs a ConvLEM model");
  }
  const auto manifest = open_dataset(ctx.config.str("dataset", ""));
  auto events = split_events(manifest, ctx.config.str("split", "test"));
  const std::size_t n = std::min(events.size(), ctx.config.count("sample_events", 4));
  events.resize(n);
  const auto cases = window_cases(events, model.config(), ctx.config.count("eval_start", 0));
  GateHistogram hist;
  for (const auto& c : cases) {
    GateTrace<float> trace;
    model.net->predict(normalize(c.input, model.norm), nullptr, &trace);
    hist.add(trace);
  }
  std::ostringstream out;
  out << "# upper_edge fast_count slow_count\n";
  for (std::size_t i = 0; i < hist.edges.size(); ++i) {
    out << fmt(hist.edges[i]) << ' ' << hist.fast[i] << ' ' << hist.slow[i] << '\n';
  }
  io::write_file(ctx.path("gates.txt"), out.str());
  ctx.say("gate samples fast " + std::to_string(hist.fast_total()) + " slow " +
          std::to_string(hist.slow_total()));
  ctx.say(metric_line("fast_gate_decades", hist.fast_decades()));
  ctx.say(metric_line("slow_gate_decades", hist.slow_decades()));
  ctx.say(metric_line("fast_gate_min", hist.fast_min));
  ctx.say(metric_line("fast_gate_max", hist.fast_max));
  return 0;
}

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"simulate", "train", "ensemble", "evaluate",
                                              "forecast", "robustness", "inspect-gates"};
  return names;
}

inline int run_command(const std::string& name, const CommandContext& ctx) {
  std::filesystem::create_directories(ctx.out_dir);
  if (name == "simulate") return cmd_simulate(ctx);
  if (name == "train") return cmd_train(ctx);
  if (name == "ensemble") return cmd_ensemble(ctx);
  if (name == "evaluate") return cmd_evaluate(ctx);
  if (name == "forecast") return cmd_forecast(ctx);
  if (name == "robustness") return cmd_robustness(ctx);
  if (name == "inspect-gates") return cmd_inspect_gates(ctx);
  throw UsageError("unknown command: " + name);
}

}  // namespace wavecast
