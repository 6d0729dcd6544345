#include "kunpeng/cli.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale KunPeng ocean forecasting: data preparation, training, forecasting and diagnostics"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::map<std::string, std::string> paths;
  app.add_option("--config", config_path, "key = value configuration file");
  app.add_option("--seed", seed, "seed for data synthesis, initialization, shuffling and traces");
  app.add_option("--set", overrides, "key=value override, repeatable");
  for (const char* key : {"raw_dir", "data_dir", "run_dir", "out_dir", "checkpoint"}) {
    std::string flag = std::string("--") + key;
    std::replace(flag.begin() + 2, flag.end(), '_', '-');
    app.add_option_function<std::string>(flag, [&paths, key](const std::string& v) { paths[key] = v; },
                                         std::string("sets ") + key);
  }

  using Command = void (*)(const kp::RunConfig&, std::ostream&);
  Command command = nullptr;
  const auto add = [&](const char* name, const char* help, Command fn) {
    auto* sub = app.add_subcommand(name, help);
    sub->callback([&command, fn] { command = fn; });
    return sub;
  };
  add("synth", "write a synthetic raw dataset to raw_dir", kp::cmd_synth);
  add("preprocess", "raw_dir -> normalized samples, stats and climatology in data_dir", kp::cmd_preprocess);
  add("train", "train on data_dir, writing checkpoints, loss.csv and manifest.json to run_dir", kp::cmd_train);
  add("predict", "roll out a checkpoint from predict.init_date, denormalized OFB per step in out_dir",
      kp::cmd_predict);
  add("evaluate", "per-variable, per-lead MSE/MAE/ACC plus per-lead summary in out_dir", kp::cmd_evaluate);
  std::string kind;
  auto* diag = add("diagnose", "eddy, front or fishing-ground diagnostics on a field", kp::cmd_diagnose);
  diag->add_option("kind", kind, "eddy-ssh | eddy-uv | front | cpue");
  add("bench-cache", "replay an epoch access trace through both cache modes", kp::cmd_bench_cache);
  bool show = false;
  app.add_subcommand("config", "print the resolved configuration")->callback([&show] { show = true; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    kp::RunConfig cfg;
    if (!config_path.empty()) cfg.load_file(config_path);
    cfg.load_env();
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw kp::ValidationError("--set expects key=value, got '" + o + "'");
      cfg.set(o.substr(0, eq), o.substr(eq + 1));
    }
    for (const auto& [k, v] : paths) cfg.set(k, v);
    if (seed) cfg.set("seed", std::to_string(*seed));
    if (!kind.empty()) cfg.set("diag.kind", kind);
    if (show) {
      cfg.validate();
      for (const auto& [k, v] : cfg.values()) std::cout << k << " = " << v << "\n";
      return 0;
    }
    command(cfg, std::cout);
  } catch (const kp::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
