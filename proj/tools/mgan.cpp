// Command-line runner: train, attack, invert, compare.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "mgan/experiment.hpp"

namespace fs = std::filesystem;
using namespace mgan;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> victim;
  std::optional<std::string> mode;
  std::optional<std::string> out;
  std::optional<int> rounds;
  std::vector<std::pair<std::string, CLI::Option*>> section_opts;
  std::map<std::string, std::string> section_values;
};

void add_common(CLI::App* sub, CommonFlags& f) {
  sub->add_option("--config", f.config, "JSON config file");
  sub->add_option("--seed", f.seed, "root seed (federated.seed)");
  sub->add_option("--victim", f.victim, "victim client id (attack.victim)");
  sub->add_option("--mode", f.mode, "passive or active (attack.mode)");
  sub->add_option("--out", f.out, "output directory (output.dir)");
  sub->add_option("--rounds", f.rounds, "federated rounds (federated.rounds)");
  for (const auto& key : config_keys()) {
    auto* opt = sub->add_option("--" + key, f.section_values[key], "override " + key);
    opt->group("Config overrides")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    f.section_opts.emplace_back(key, opt);
  }
}

ExperimentConfig effective_config(const CommonFlags& f) {
  json j = f.config.empty() ? json::object() : read_json_file(f.config);
  if (f.seed) j["federated"]["seed"] = *f.seed;
  if (f.victim) j["attack"]["victim"] = *f.victim;
  if (f.mode) j["attack"]["mode"] = *f.mode;
  if (f.out) j["output"]["dir"] = *f.out;
  if (f.rounds) j["federated"]["rounds"] = *f.rounds;
  for (const auto& [key, opt] : f.section_opts)
    if (opt->count() > 0) apply_override(j, key, f.section_values.at(key));
  return config_from_json(j);
}

void echo_config(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.output.dir);
  std::ofstream((fs::path(cfg.output.dir) / "effective_config.json").string()) << to_json(cfg).dump(2) << '\n';
  std::cout << "config: " << to_json(cfg).dump() << '\n';
}

void write_json(const fs::path& path, const json& j) { std::ofstream(path.string()) << j.dump(2) << '\n'; }

int cmd_train(const CommonFlags& f) {
  const auto cfg = effective_config(f);
  echo_config(cfg);
  const auto e = prepare_experiment(cfg);
  const auto r = run_training(e, cfg.output.dir);
  for (const auto& m : r.trace) std::cout << "round " << m.round << " accuracy " << format_real(m.accuracy) << '\n';
  return 0;
}

int cmd_attack(const CommonFlags& f) {
  const auto cfg = effective_config(f);
  echo_config(cfg);
  const auto e = prepare_experiment(cfg);
  const auto out = run_attack(e, cfg.attack.mode, cfg.output.dir);
  for (const auto& r : out.rounds) {
    std::cout << "round " << r.round << " sample-accuracy " << format_real(r.accuracy)
              << (r.converged ? " converged" : "") << (r.skipped ? " (frozen)" : "") << '\n';
  }
  const auto rates = measure_recovery(e, out.state.g);
  json summary{{"mode", to_string(cfg.attack.mode)},
               {"victim", cfg.attack.victim},
               {"converged", out.state.converged},
               {"converged_round", out.state.converged_round},
               {"final_shared_accuracy", out.fed.trace.back().accuracy},
               {"victim_rotated_rate", rates.victim_rate},
               {"other_rotated_rate", rates.other_rate},
               {"detector_accuracy", rates.detector_accuracy},
               {"victim_classes", rates.victim_classes},
               {"victim_rotated_rate_all_classes", rates.victim_rate_all_classes},
               {"victim_rotated_rate_by_class", rates.victim_rate_by_class},
               {"seconds", out.seconds}};
  if (!out.iso_distance.empty()) summary["iso_distance"] = out.iso_distance;
  write_json(fs::path(cfg.output.dir) / "summary.json", summary);
  std::cout << summary.dump() << '\n';
  return 0;
}

struct InvertFlags {
  std::string model, update, truth, labels;
};

int cmd_invert(const CommonFlags& f, const InvertFlags& inv) {
  const auto cfg = effective_config(f);
  echo_config(cfg);
  auto arch = std::make_shared<ArchitectureSpec>(
      presets::by_name(cfg.model.preset, cfg.dataset.classes, cfg.dataset.side));
  const SharedClassifier m(arch, load_params(inv.model));
  ClientUpdate u{0, 0, load_params(inv.update)};
  require_aligned(m.params(), u.delta, "update file");
  InversionConfig icfg = cfg.inversion;
  if (!(icfg.gamma > 0)) {
    icfg.gamma = default_inversion_gamma(cfg.federated.fed, std::size_t(cfg.federated.samples_per_client));
  }
  std::optional<std::vector<int>> labels;
  if (!inv.labels.empty()) {
    labels.emplace();
    std::stringstream ss(inv.labels);
    for (std::string tok; std::getline(ss, tok, ',');) labels->push_back(std::stoi(tok));
  }
  Rng rng = make_rng(cfg.seed(), "invert");
  const auto rep = compute_representatives(u, m, icfg, rng, std::nullopt, labels);
  const double tv = tv_loss(rep.images, icfg.beta).loss;
  json report{{"residual", rep.residual},
              {"initial_residual", rep.initial_residual},
              {"iterations", rep.iterations},
              {"labels", rep.labels},
              {"gamma", icfg.gamma},
              {"lambda", icfg.lambda},
              {"tv", tv},
              {"tv_term", icfg.lambda * tv}};
  if (!inv.truth.empty()) {
    const auto truth = parse_idx_images(read_file_bytes(inv.truth), inv.truth);
    const auto t = from_idx(truth, std::vector<std::uint8_t>(truth.count(), 0), 1).images;
    if (t.shape() != rep.images.shape()) throw FormatError("truth images do not match the representatives");
    double mse = 0;
    for (std::size_t i = 0; i < t.size(); ++i) mse += std::pow(double(t[i]) - rep.images[i], 2);
    report["mse"] = mse / double(t.size());
  }
  save_image_grid(rep.images, std::size_t(rep.labels.size()),
                  (fs::path(cfg.output.dir) / "representatives.pgm").string());
  write_json(fs::path(cfg.output.dir) / "invert.json", report);
  std::cout << report.dump() << '\n';
  return 0;
}

int cmd_compare(const CommonFlags& f) {
  const auto cfg = effective_config(f);
  echo_config(cfg);
  const auto e = prepare_experiment(cfg);
  const auto c = run_compare(e, cfg.output.dir);
  write_json(fs::path(cfg.output.dir) / "compare.json", to_json(c));
  std::cout << to_json(c).dump() << '\n' << "verdict: " << c.verdict << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning simulator with a client-level reconstruction attack"};
  app.require_subcommand(1);
  CommonFlags train_f, attack_f, invert_f, compare_f;
  InvertFlags inv;
  auto* train = app.add_subcommand("train", "federated run without an attack");
  add_common(train, train_f);
  auto* attack = app.add_subcommand("attack", "federated run under the passive or active attack");
  add_common(attack, attack_f);
  auto* invert = app.add_subcommand("invert", "representatives from a model checkpoint and an update file");
  add_common(invert, invert_f);
  invert->add_option("--model", inv.model, "model checkpoint (.flps)")->required();
  invert->add_option("--update", inv.update, "update file (.flps)")->required();
  invert->add_option("--truth", inv.truth, "IDX image file to score against");
  invert->add_option("--labels", inv.labels, "comma-separated labels instead of inference");
  auto* compare = app.add_subcommand("compare", "passive, active and baseline runs with a verdict");
  add_common(compare, compare_f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*train) return cmd_train(train_f);
    if (*attack) return cmd_attack(attack_f);
    if (*invert) return cmd_invert(invert_f, inv);
    if (*compare) return cmd_compare(compare_f);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
