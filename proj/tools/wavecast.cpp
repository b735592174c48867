#include <CLI11.hpp>

#include <wavecast/commands.hpp>

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"wavecast: wavefield forecasting with recurrent seq2seq networks"};
  app.require_subcommand(1, 1);
  std::string config_path, out_dir;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  for (const auto& name : wavecast::command_names()) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "key = value config file")->required();
    sub->add_option("--seed", seed, "overrides the config seed");
    sub->add_option("--threads", threads, "worker threads (WAVECAST_THREADS overrides)");
    sub->add_option("--out", out_dir, "output directory");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  auto* sub = app.get_subcommands().front();
  try {
    wavecast::CommandContext ctx;
    ctx.config = wavecast::load_config(config_path);
    if (sub->count("--seed")) ctx.config.set("seed", std::to_string(seed));
    if (!sub->count("--threads") && ctx.config.has("threads")) {
      threads = ctx.config.count("threads", 1);
    }
    ctx.threads = wavecast::resolve_threads(threads);
    ctx.out_dir = !out_dir.empty() ? out_dir : ctx.config.str("output", "wavecast_out");
    ctx.log = &std::cout;
    return wavecast::run_command(command, ctx);
  } catch (const wavecast::Error& e) {
    std::cerr << "wavecast " << command << ": " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "wavecast " << command << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "wavecast " << command << ": " << e.what() << '\n';
    return 1;
  }
}
