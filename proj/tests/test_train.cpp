#include <gtest/gtest.h>

#include <wavecast/commands.hpp>

#include <filesystem>
#include <sstream>

using namespace wavecast;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("wavecast_train_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// 32x32, 12 events, 30 frames each; shared by the tests below.
const DatasetManifest& tiny_dataset() {
  static const DatasetManifest m = [] {
    auto dir = fresh_dir("data");
    DatasetSpec spec;
    spec.base.height = spec.base.width = 32;
    spec.base.velocity = build_velocity(32, 32, VelocityModel{2000, {Basin{20, 12, 5, 7, 1600, 2}}});
    spec.base.duration = 3.0;
    spec.base.sponge_width = 10;
    spec.base.wavelet.peak_frequency = 1.0;
    spec.events = 12;
    spec.depths = 2;
    spec.margin = 4;
    spec.split_seed = 2;
    generate_dataset(spec, dir.string());
    return load_manifest((dir / "manifest.txt").string());
  }();
  return m;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.net.height = c.net.width = 32;
  c.net.latent_channels = 8;
  c.net.window = c.net.horizon = 4;
  c.epochs = 2;
  c.batch_size = 3;
  c.eval_start = 6;
  c.seed = 5;
  return c;
}

bool same_params(const ModelBundle& a, const ModelBundle& b) {
  const auto& ea = a.net->params().entries();
  const auto& eb = b.net->params().entries();
  if (ea.size() != eb.size()) return false;
  for (std::size_t i = 0; i < ea.size(); ++i) {
    if (!(ea[i].value == eb[i].value)) return false;
  }
  return true;
}

ConfigFile parse(const std::string& text) {
  return ConfigFile::parse(text, "test", known_config_keys(), {"basin"});
}

}  // namespace

TEST(Adam, MatchesClosedFormFirstStep) {
  ParamStore<double> store;
  store.add("w", Tensor<double>(Shape{2}, std::vector<double>{1.0, -2.0}));
  store.add("buf", Tensor<double>(Shape{1}, 7.0), false);
  Adam<double> opt(store, 0.1, 0.9, 0.999, 1e-8, 0.0);
  auto g = store.gradient_buffers();
  g[0][0] = 0.5;
  g[0][1] = -3.0;
  g[1][0] = 100.0;
  EXPECT_NEAR(opt.step(store, g), std::sqrt(0.25 + 9.0), 1e-12);
  // The first bias-corrected step is lr * sign(g) up to epsilon.
  EXPECT_NEAR(store.at("w").value[0], 1.0 - 0.1, 1e-6);
  EXPECT_NEAR(store.at("w").value[1], -2.0 + 0.1, 1e-6);
  EXPECT_EQ(store.at("buf").value[0], 7.0);
}

TEST(Adam, ClipsToGlobalNorm) {
  ParamStore<double> a, b;
  a.add("w", Tensor<double>(Shape{2}));
  b.add("w", Tensor<double>(Shape{2}));
  Adam<double> clipped(a, 0.1, 0.9, 0.999, 1e-8, 5.0), scaled(b, 0.1, 0.9, 0.999, 1e-8, 0.0);
  auto g = a.gradient_buffers();
  g[0][0] = 30.0;
  g[0][1] = 40.0;  // norm 50
  auto small = g;
  small[0][0] = 3.0;
  small[0][1] = 4.0;  // norm 5
  for (int i = 0; i < 3; ++i) {
    clipped.step(a, g);
    scaled.step(b, small);
  }
  for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(a.at("w").value[j], b.at("w").value[j], 1e-12);
  g[0][0] = std::nan("");
  EXPECT_THROW(clipped.step(a, g), NumericError);
}

TEST(Checkpoint, RoundtripIsByteIdentical) {
  Checkpoint ck;
  ck.set("kind", "model");
  ck.set("note", "two words");
  ck.put("a", Tensor<float>(Shape{2, 3}, 1.25f));
  ck.put("b", Tensor<double>(Shape{4}, -0.5));
  const std::string bytes = serialize_checkpoint(ck);
  const auto back = parse_checkpoint(bytes, "mem");
  EXPECT_EQ(back.get("note"), "two words");
  EXPECT_EQ(back.tensor("b").shape(), (Shape{4}));
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 3), "mem"), IntegrityError);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, 10), "mem"), IntegrityError);
  EXPECT_THROW(parse_checkpoint("XXXX" + bytes.substr(4), "mem"), FormatError);
  EXPECT_THROW(parse_checkpoint(bytes + "z", "mem"), FormatError);
  EXPECT_THROW(back.get("missing"), FormatError);
}

TEST(Config, ParsingRules) {
  auto c = parse("# comment\nlatent_channels = 16  # trailing\nbasin = 1 2 3 4 1500\nbasin = 5 6 7 8 1600 3\n");
  EXPECT_EQ(c.count("latent_channels", 0), 16u);
  EXPECT_EQ(c.all("basin").size(), 2u);
  EXPECT_THROW(parse("no_such_key = 1\n"), ConfigError);
  EXPECT_THROW(parse("window = 3\nwindow = 4\n"), ConfigError);
  EXPECT_THROW(parse("just text\n"), ConfigError);
  EXPECT_THROW(parse("window = abc\n").count("window", 1), ConfigError);
  EXPECT_THROW(parse("window = -3\n").count("window", 1), ConfigError);
  EXPECT_THROW(parse("reset_gate = maybe\n").flag("reset_gate", true), ConfigError);
  EXPECT_THROW(parse_basin("1 2 3"), ConfigError);
  auto spec = dataset_spec_from(parse("height = 32\nwidth = 32\nbasin = 16 16 4 4 1500\n"));
  EXPECT_LT(spec.base.velocity[16 * 32 + 16], 1600.0);
  auto t = train_config_from(parse("height = 32\nwidth = 32\nlatent_channels = 8\nloss = l2\n"));
  EXPECT_EQ(t.loss, LossKind::l2);
  EXPECT_THROW(train_config_from(parse("learning_rate = 0\n")), ConfigError);
  EXPECT_THROW(train_config_from(parse("mask_ratio = 1\n")), ConfigError);
  EXPECT_THROW(train_config_from(parse("loss = l1\n")), ConfigError);
  EXPECT_THROW(ensemble_config_from(parse("members = 1\nheight = 32\nwidth = 32\n")), ConfigError);
}

TEST(Training, ValidationSplitByLocation) {
  auto v = validation_indices(64, 0.1, 0);
  EXPECT_EQ(v.size(), 6u);
  EXPECT_TRUE(std::is_sorted(v.begin(), v.end()));
  EXPECT_EQ(std::adjacent_find(v.begin(), v.end()), v.end());
  EXPECT_EQ(validation_indices(64, 0.1, 0), v);
  EXPECT_TRUE(validation_indices(1, 0.1, 0).empty());
  EXPECT_TRUE(validation_indices(10, 0.0, 0).empty());
}

TEST(Training, SmokeRunLossIsFiniteAndDrops) {
  auto cfg = tiny_config();
  cfg.epochs = 40;
  Trainer tr(cfg, tiny_dataset());
  EXPECT_FALSE(tr.validation_events().empty());
  auto logs = tr.run();
  ASSERT_EQ(logs.size(), 40u);
  for (const auto& e : logs) {
    EXPECT_TRUE(std::isfinite(e.train_loss));
    EXPECT_TRUE(std::isfinite(e.val_loss));
  }
  EXPECT_LE(logs.back().val_loss, logs.front().val_loss);
}

TEST(Training, EpochPlanIsSeeded) {
  auto cfg = tiny_config();
  cfg.short_window_prob = 0.5;
  cfg.teacher_forcing = 0.5;
  Trainer a(cfg, tiny_dataset()), b(cfg, tiny_dataset());
  auto pa = a.plan_epoch(3), pb = b.plan_epoch(3);
  ASSERT_EQ(pa.size(), pb.size());
  bool padded = false, forced = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].event, pb[i].event);
    EXPECT_EQ(pa[i].start, pb[i].start);
    EXPECT_EQ(pa[i].padded, pb[i].padded);
    EXPECT_LE(pa[i].start + 8, 30u);
    padded = padded || pa[i].padded > 0;
    for (auto t : pa[i].teacher) forced = forced || t;
  }
  EXPECT_TRUE(padded);
  EXPECT_TRUE(forced);
  // teacher-forced and padded samples still train
  cfg.epochs = 1;
  Trainer c(cfg, tiny_dataset());
  EXPECT_TRUE(std::isfinite(c.run().back().train_loss));
}

TEST(Training, ResumeReproducesNextEpochBitwise) {
  auto cfg = tiny_config();
  Trainer straight(cfg, tiny_dataset());
  straight.run();

  auto one = cfg;
  one.epochs = 1;
  Trainer first(one, tiny_dataset());
  first.run();
  const auto path = (fresh_dir("resume") / "last.wcn").string();
  save_checkpoint(first.checkpoint(), path);

  Trainer resumed(cfg, tiny_dataset());
  resumed.resume(load_checkpoint(path));
  EXPECT_EQ(resumed.epochs_done(), 1u);
  resumed.run();
  EXPECT_EQ(resumed.epochs_done(), 2u);
  EXPECT_TRUE(same_params(resumed.model(), straight.model()));
  EXPECT_EQ(resumed.best_val_loss(), straight.best_val_loss());
}

TEST(Training, CheckpointPreservesEvaluationBitwise) {
  auto cfg = tiny_config();
  cfg.epochs = 1;
  Trainer tr(cfg, tiny_dataset());
  tr.run();
  const auto test = load_events(tiny_dataset(), tiny_dataset().split("test"));
  const auto before = evaluate_model(tr.model(), test, cfg.eval_start);
  const auto path = (fresh_dir("ckpt") / "m.wcn").string();
  save_checkpoint(tr.checkpoint(), path);
  const auto bytes = io::read_file(path);
  const auto loaded = load_model(path);
  const auto after = evaluate_model(loaded, test, cfg.eval_start);
  EXPECT_EQ(before.report.aggregate.acc, after.report.aggregate.acc);
  EXPECT_EQ(before.report.aggregate.rfne, after.report.aggregate.rfne);
  EXPECT_EQ(before.peak_time_mean, after.peak_time_mean);
  EXPECT_EQ(serialize_checkpoint(load_checkpoint(path)), bytes);

  // A model scored against its own forecasts is perfect.
  auto cases = window_cases(test, cfg.net, cfg.eval_start);
  for (auto& c : cases) c.truth = loaded.predict_physical(c.input);
  const auto self = evaluate_cases(loaded.predictor(), cases).aggregate;
  EXPECT_NEAR(self.acc, 1.0, 1e-12);
  EXPECT_EQ(self.rfne, 0.0);
}

TEST(Ensemble, MapsMatchLoopOracle) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  std::vector<Tensor<float>> f(3, Tensor<float>(Shape{4, 3, 2, 2}));
  for (auto& t : f)
    for (auto& v : t.values()) v = static_cast<float>(n(rng));
  auto maps = ensemble_maps(f);
  for (std::size_t j = 0; j < f[0].size(); ++j) {
    const double m = (double(f[0][j]) + f[1][j] + f[2][j]) / 3.0;
    double v = 0;
    for (const auto& t : f) v += (t[j] - m) * (t[j] - m);
    EXPECT_NEAR(maps.wave_mean[j], m, 1e-6);
    EXPECT_NEAR(maps.wave_std[j], std::sqrt(v / 3.0), 1e-6);
  }
  for (auto v : maps.ln_pgv_std.values()) EXPECT_GE(v, 0.0f);
  for (auto v : maps.t_pgv_std.values()) EXPECT_GE(v, 0.0f);
  auto same = ensemble_maps({f[0], f[0]});
  for (auto v : same.wave_std.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Ensemble, ResamplesAreSeededWithReplacement) {
  EnsembleConfig e;
  auto a = e.resample(0, 20), b = e.resample(1, 20);
  EXPECT_EQ(a, e.resample(0, 20));
  EXPECT_NE(a, b);
  for (auto i : a) EXPECT_LT(i, 20u);
  e.identical_members = true;
  EXPECT_EQ(e.resample(0, 20), e.resample(5, 20));
  EXPECT_EQ(e.member_seed(0), e.member_seed(3));
}

TEST(Commands, EvaluateForecastRobustnessGates) {
  auto cfg = tiny_config();
  cfg.epochs = 1;
  Trainer tr(cfg, tiny_dataset());
  tr.run();
  auto dir = fresh_dir("cmds");
  const auto ck = (dir / "m.wcn").string();
  save_checkpoint(tr.checkpoint(), ck);
  const std::string base = "checkpoint = " + ck + "\ndataset = " + tiny_dataset().directory +
                           "\neval_start = 6\n";
  std::ostringstream out;
  CommandContext ctx{parse(base), (dir / "eval").string(), 1, &out};
  EXPECT_EQ(run_command("evaluate", ctx), 0);
  const auto report = io::read_file((dir / "eval" / "evaluation.txt").string());
  std::size_t rows = 0;
  for (char ch : report) rows += ch == '\n';
  EXPECT_EQ(rows, 1 + tiny_dataset().split("test").size() + 1);  // header + events + aggregate
  EXPECT_NE(out.str().find("metric=acc value="), std::string::npos);

  out.str("");
  ctx = CommandContext{parse(base + "event = 0\nobserved_start = 2\nobserved_length = 4\nhorizon_steps = 4\n"),
                       (dir / "fc").string(), 1, &out};
  EXPECT_EQ(run_command("forecast", ctx), 0);
  EXPECT_NE(out.str().find("metric=invocations value=1"), std::string::npos);
  auto f = load_sequence((dir / "fc" / "forecast.wcs").string());
  EXPECT_EQ(f.frames.shape(), (Shape{4, 3, 32, 32}));

  out.str("");
  ctx = CommandContext{parse(base + "event = 1\nobserved_length = 12\nhorizon_steps = 10\nrenormalize = true\n"),
                       (dir / "fc2").string(), 1, &out};
  EXPECT_EQ(run_command("forecast", ctx), 0);
  EXPECT_NE(out.str().find("renormalize channel 0"), std::string::npos);
  EXPECT_NE(out.str().find("metric=invocations value=3"), std::string::npos);

  out.str("");
  ctx = CommandContext{parse(base + "noise_levels = 0 1\nperturbations = gaussian_noise latency_shift\n"),
                       (dir / "rob").string(), 1, &out};
  EXPECT_EQ(run_command("robustness", ctx), 0);
  EXPECT_NE(out.str().find("metric=latency_shift_1_acc"), std::string::npos);

  out.str("");
  ctx = CommandContext{parse(base + "sample_events = 2\n"), (dir / "gates").string(), 1, &out};
  EXPECT_EQ(run_command("inspect-gates", ctx), 0);
  EXPECT_TRUE(std::filesystem::exists(dir / "gates" / "gates.txt"));

  ctx = CommandContext{parse("checkpoint = " + (dir / "missing.wcn").string() + "\n"),
                       (dir / "x").string(), 1, &out};
  try {
    run_command("evaluate", ctx);
    FAIL() << "expected a format error";
  } catch (const Error& e) {
    EXPECT_EQ(e.exit_code(), 2);
  }
}

TEST(Commands, IdenticalEnsembleHasZeroSpread) {
  auto dir = fresh_dir("ens");
  std::ostringstream out;
  CommandContext ctx{parse("dataset = " + tiny_dataset().directory +
                           "\nheight = 32\nwidth = 32\nlatent_channels = 8\nwindow = 4\n"
                           "horizon = 4\nepochs = 1\neval_start = 6\nmembers = 2\n"
                           "identical_members = true\n"),
                     dir.string(), 1, &out};
  EXPECT_EQ(run_command("ensemble", ctx), 0);
  EXPECT_NE(out.str().find("metric=ensemble_std_max value=0\n"), std::string::npos) << out.str();
  EXPECT_TRUE(std::filesystem::exists(dir / "member_1.wcn"));
}
