#pragma once

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mgan/attack.hpp"
#include "mgan/data.hpp"
#include "mgan/fed.hpp"
#include "mgan/inversion.hpp"
#include "mgan/models.hpp"
#include "mgan/serialize.hpp"

namespace mgan {

using json = nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetConfig {
  std::string source = "synthetic";  // synthetic | idx | image-dir
  std::string kind = "bars";         // synthetic only
  int classes = 10;
  int side = 16;
  int train_per_class = 120;
  int test_per_class = 20;
  std::string train_images, train_labels, test_images, test_labels;  // idx
  std::string image_dir;                                            // image-dir
  double test_fraction = 0.2;                                       // image-dir split
  double victim_rotation = 30.0;  // degrees; 0 leaves the victim unchanged
  double aux_rotated_fraction = -1.0;  // share of test images rotated; < 0 means 1/N
};

struct ModelConfig {
  std::string preset = "small";
};

/// Desk-scale federated defaults: 30 rounds of one local epoch, B = 20, lr 0.05.
inline FedConfig desk_fed_defaults() {
  FedConfig f;
  f.rounds = 30;
  f.batch_size = 20;
  f.sgd.learning_rate = 0.05f;
  f.seed = 1;
  return f;
}

struct FederatedSection {
  FedConfig fed = desk_fed_defaults();
  int classes_per_client = 3;
  int samples_per_client = 100;
};

struct OutputConfig {
  std::string dir = "out";
  bool checkpoints = true;
  int image_every = 1;  // generated grids every k rounds; 0 disables
  int detector_samples = 200;
};

struct CompareConfig {
  int window = 10;  // final rounds averaged for the accuracy ordering
  int mi_images = 10;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ModelConfig model;
  FederatedSection federated;
  AttackConfig attack;
  InversionConfig inversion;
  MiConfig mi;
  GanClientConfig gan_client;
  CompareConfig compare;
  OutputConfig output;
  bool end_on_convergence = false;  // attack runs stop once the attack converges

  std::uint64_t seed() const { return federated.fed.seed; }
};

namespace detail {

/// Walks every configurable field once; used for both reading and writing so
/// the key list exists in one place.
template <class V>
void visit_config(ExperimentConfig& c, V& v) {
  auto& d = c.dataset;
  v.section("dataset");
  v("source", d.source);
  v("kind", d.kind);
  v("classes", d.classes);
  v("side", d.side);
  v("train_per_class", d.train_per_class);
  v("test_per_class", d.test_per_class);
  v("train_images", d.train_images);
  v("train_labels", d.train_labels);
  v("test_images", d.test_images);
  v("test_labels", d.test_labels);
  v("image_dir", d.image_dir);
  v("test_fraction", d.test_fraction);
  v("victim_rotation", d.victim_rotation);
  v("aux_rotated_fraction", d.aux_rotated_fraction);

  v.section("model");
  v("preset", c.model.preset);

  auto& f = c.federated;
  v.section("federated");
  v("num_clients", f.fed.num_clients);
  v("rounds", f.fed.rounds);
  v("local_epochs", f.fed.local_epochs);
  v("batch_size", f.fed.batch_size);
  v("learning_rate", f.fed.sgd.learning_rate);
  v("seed", f.fed.seed);
  v("threads", f.fed.threads);
  v("classes_per_client", f.classes_per_client);
  v("samples_per_client", f.samples_per_client);

  auto& a = c.attack;
  v.section("attack");
  v("mode", a.mode);
  v("victim", a.victim);
  v("threshold", a.threshold);
  v("d_epoch_base", a.d_epoch_base);
  v("d_epoch_step", a.d_epoch_step);
  v("d_epoch_cap", a.d_epoch_cap);
  v("batch_size", a.batch_size);
  v("g_steps_per_epoch", a.g_steps_per_epoch);
  v("d_learning_rate", a.d_learning_rate);
  v("g_learning_rate", a.g_learning_rate);
  v("beta1", a.beta1);
  v("id_weight", a.id_weight);
  v("min_rounds", a.min_rounds);
  v("stop_samples", a.stop_samples);
  v("stop_on_convergence", a.stop_on_convergence);
  v("end_run_on_convergence", c.end_on_convergence);

  auto& i = c.inversion;
  v.section("inversion");
  v("gamma", i.gamma);
  v("lambda", i.lambda);
  v("beta", i.beta);
  v("representatives", i.representatives);
  v("classes_per_client", i.classes_per_client);
  v("lower", i.lower);
  v("upper", i.upper);
  v("warm_start", i.warm_start);
  v("max_iterations", i.lbfgs.max_iterations);
  v("history", i.lbfgs.history);
  v("grad_tolerance", i.lbfgs.grad_tolerance);
  v("f_rel_tolerance", i.lbfgs.f_rel_tolerance);

  v.section("mi");
  v("steps", c.mi.steps);
  v("step_size", c.mi.step_size);
  v("init_amplitude", c.mi.init_amplitude);

  auto& g = c.gan_client;
  v.section("gan_client");
  v("adversary", g.adversary);
  v("target_class", g.target_class);
  v("inject", g.inject);
  v("g_steps", g.g_steps);
  v("batch_size", g.batch_size);
  v("learning_rate", g.learning_rate);
  v("enabled", g.enabled);

  v.section("compare");
  v("window", c.compare.window);
  v("mi_images", c.compare.mi_images);

  auto& o = c.output;
  v.section("output");
  v("dir", o.dir);
  v("checkpoints", o.checkpoints);
  v("image_every", o.image_every);
  v("detector_samples", o.detector_samples);
}

struct ConfigWriter {
  json out = json::object();
  std::string current;
  void section(const char* s) {
    current = s;
    out[current] = json::object();
  }
  template <class T>
  void operator()(const char* key, T& field) {
    out[current][key] = field;
  }
  void operator()(const char* key, float& field) {
    // shortest float text, so 0.05f is written as 0.05
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, field);
    out[current][key] = std::stod(std::string(buf, r.ptr));
  }
  void operator()(const char* key, AttackMode& m) { out[current][key] = to_string(m); }
};

struct ConfigReader {
  explicit ConfigReader(const json& j) : in(j) {}
  const json& in;
  std::string current;
  const json* sec = nullptr;
  std::map<std::string, std::set<std::string>> known;

  void section(const char* s) {
    current = s;
    known[current];
    sec = in.contains(current) ? &in.at(current) : nullptr;
    if (sec && !sec->is_object()) throw ConfigError("section '" + current + "' must be an object");
  }
  template <class T>
  void operator()(const char* key, T& field) {
    known[current].insert(key);
    if (!sec || !sec->contains(key)) return;
    try {
      field = sec->at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(current + "." + key + ": " + e.what());
    }
  }
  void operator()(const char* key, AttackMode& m) {
    std::string s = to_string(m);
    (*this)(key, s);
    try {
      m = parse_attack_mode(s);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(current + "." + key + ": " + e.what());
    }
  }
  void reject_unknown() const {
    if (!in.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& [s, body] : in.items()) {
      const auto it = known.find(s);
      if (it == known.end()) throw ConfigError("unknown config section '" + s + "'");
      for (const auto& [k, val] : body.items()) {
        if (!it->second.count(k)) throw ConfigError("unknown config key '" + s + "." + k + "'");
      }
    }
  }
};

struct KeyLister {
  std::vector<std::string> keys;
  std::string current;
  void section(const char* s) { current = s; }
  template <class T>
  void operator()(const char* key, T&) {
    keys.push_back(current + "." + key);
  }
};

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  ExperimentConfig copy = c;
  detail::ConfigWriter w;
  detail::visit_config(copy, w);
  return w.out;
}

/// All `section.key` names accepted in a config file.
inline std::vector<std::string> config_keys() {
  ExperimentConfig c;
  detail::KeyLister l;
  detail::visit_config(c, l);
  return l.keys;
}

inline void validate(const ExperimentConfig& c) {
  try {
    const auto& d = c.dataset;
    if (d.source != "synthetic" && d.source != "idx" && d.source != "image-dir") {
      throw ConfigError("dataset.source must be synthetic, idx or image-dir");
    }
    if (d.source == "synthetic") {
      parse_synth_kind(d.kind);
      if (d.train_per_class < 1 || d.test_per_class < 1) {
        throw ConfigError("dataset per-class counts must be >= 1");
      }
    }
    if (d.classes < 2) throw ConfigError("dataset.classes must be >= 2");
    if (d.side < 4) throw ConfigError("dataset.side must be >= 4");
    if (!(d.test_fraction > 0 && d.test_fraction < 1)) throw ConfigError("test_fraction in (0,1)");
    if (!(d.victim_rotation > -180 && d.victim_rotation <= 180)) {
      throw ConfigError("dataset.victim_rotation must be in (-180, 180]");
    }
    if (d.aux_rotated_fraction > 1) throw ConfigError("aux_rotated_fraction must be <= 1");
    c.federated.fed.validate();
    if (c.federated.classes_per_client < 1 || c.federated.classes_per_client > d.classes) {
      throw ConfigError("federated.classes_per_client must be in [1, classes]");
    }
    if (c.federated.samples_per_client < c.federated.classes_per_client) {
      throw ConfigError("federated.samples_per_client must be >= classes_per_client");
    }
    c.attack.validate(c.federated.fed.num_clients);
    c.inversion.validate();
    if (c.gan_client.adversary < 0 || c.gan_client.adversary >= c.federated.fed.num_clients) {
      throw ConfigError("gan_client.adversary outside [0, N)");
    }
    if (c.gan_client.adversary == c.attack.victim) {
      throw ConfigError("gan_client.adversary must differ from attack.victim");
    }
    if (c.gan_client.target_class < -1 || c.gan_client.target_class >= d.classes) {
      throw ConfigError("gan_client.target_class outside [-1, C)");
    }
    if (c.compare.window < 1) throw ConfigError("compare.window must be >= 1");
    if (c.output.image_every < 0 || c.output.detector_samples < 1) {
      throw ConfigError("invalid output settings");
    }
    if (c.mi.steps < 0) throw ConfigError("mi.steps must be >= 0");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

/// Defaults, overlaid by `j`; unknown sections or keys are errors.
inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  detail::ConfigReader r(j);
  detail::visit_config(c, r);
  r.reject_unknown();
  validate(c);
  return c;
}

/// Applies a `section.key` override given as text. The text is parsed as
/// JSON when possible and taken as a string otherwise.
inline void apply_override(json& j, const std::string& path, const std::string& text) {
  const auto dot = path.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == path.size()) {
    throw ConfigError("override '" + path + "' must be section.key");
  }
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  j[path.substr(0, dot)][path.substr(dot + 1)] = value;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Setup

struct Experiment {
  ExperimentConfig cfg;
  ArchPtr arch;
  LabeledDataset train;
  LabeledDataset test;  // also the attacker's auxiliary set
  std::vector<ClientDataset> clients;
  Models models;
};

namespace detail {

inline std::pair<LabeledDataset, LabeledDataset> split_dataset(const LabeledDataset& d,
                                                               double test_fraction,
                                                               std::uint64_t seed) {
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(seed, "data/split");
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_test = std::max<std::size_t>(1, std::size_t(std::round(test_fraction * double(d.size()))));
  std::vector<std::size_t> test(idx.begin(), idx.begin() + std::ptrdiff_t(n_test));
  std::vector<std::size_t> train(idx.begin() + std::ptrdiff_t(n_test), idx.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  return {d.subset(train), d.subset(test)};
}

}  // namespace detail

/// Data, partition, victim property and initial models, all derived from the
/// federated seed through named streams.
inline Experiment prepare_experiment(const ExperimentConfig& cfg) {
  validate(cfg);
  Experiment e;
  e.cfg = cfg;
  const auto& d = cfg.dataset;
  const std::uint64_t seed = cfg.seed();
  if (d.source == "synthetic") {
    const auto kind = parse_synth_kind(d.kind);
    e.train = synth_dataset(kind, d.classes, d.train_per_class, d.side, derive_seed(seed, "data/train"));
    e.test = synth_dataset(kind, d.classes, d.test_per_class, d.side, derive_seed(seed, "data/test"));
  } else if (d.source == "idx") {
    e.train = load_idx(d.train_images, d.train_labels, d.classes);
    e.test = load_idx(d.test_images, d.test_labels, d.classes);
  } else {
    auto all = load_image_dir(d.image_dir, d.side);
    if (all.num_classes != d.classes) {
      throw ConfigError("image directory has " + std::to_string(all.num_classes) +
                        " classes, config says " + std::to_string(d.classes));
    }
    std::tie(e.train, e.test) = detail::split_dataset(all, d.test_fraction, seed);
  }
  if (e.train.side() != d.side || e.test.side() != d.side) {
    throw ConfigError("dataset images are not " + std::to_string(d.side) + "x" + std::to_string(d.side));
  }
  const int n = cfg.federated.fed.num_clients;
  if (d.victim_rotation != 0.0) {
    // the population the test split stands for contains the victim's images
    const double frac = d.aux_rotated_fraction < 0 ? 1.0 / n : d.aux_rotated_fraction;
    std::vector<std::size_t> idx(e.test.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng = make_rng(seed, "data/aux");
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::size_t(std::round(frac * double(e.test.size()))));
    std::sort(idx.begin(), idx.end());
    if (!idx.empty()) {
      const Tensor rot = rotate_images(detail::gather_rows(e.test.images, idx), d.victim_rotation);
      const std::size_t row = e.test.images.size() / e.test.size();
      for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(rot.storage().begin() + std::ptrdiff_t(i * row), row,
                    e.test.images.storage().begin() + std::ptrdiff_t(idx[i] * row));
    }
  }
  e.clients = partition_non_iid(e.train, n, cfg.federated.classes_per_client,
                                cfg.federated.samples_per_client, derive_seed(seed, "data/partition"));
  const int v = cfg.attack.victim;
  e.clients[std::size_t(v)] = apply_victim_property(e.clients[std::size_t(v)],
                                                    VictimProperty{VictimProperty::Kind::rotation,
                                                                   d.victim_rotation});
  e.clients[std::size_t(v)].is_victim = true;
  e.arch = std::make_shared<ArchitectureSpec>(presets::by_name(cfg.model.preset, d.classes, d.side));
  e.models = build_models(*e.arch, derive_seed(seed, "init"));
  return e;
}

inline InversionConfig effective_inversion(const Experiment& e) {
  InversionConfig inv = e.cfg.inversion;
  if (!(inv.gamma > 0)) {
    inv.gamma = default_inversion_gamma(e.cfg.federated.fed, std::size_t(e.cfg.federated.samples_per_client));
  }
  if (inv.classes_per_client > e.cfg.dataset.classes) inv.classes_per_client = e.cfg.dataset.classes;
  return inv;
}

// ---------------------------------------------------------------------------
// Runs

inline FedOutput fed_output(const ExperimentConfig& cfg, const std::string& dir, const std::string& tag) {
  namespace fs = std::filesystem;
  FedOutput o;
  if (dir.empty()) return o;
  fs::create_directories(dir);
  if (cfg.output.checkpoints) o.checkpoint_dir = (fs::path(dir) / (tag + "_checkpoints")).string();
  o.accuracy_csv = (fs::path(dir) / (tag + "_accuracy.csv")).string();
  return o;
}

inline FedResult run_training(const Experiment& e, const std::string& dir = "") {
  FedRunOptions opts;
  opts.output = fed_output(e.cfg, dir, "train");
  return run_federated(e.cfg.federated.fed, e.models.classifier, e.clients, e.test, opts);
}

struct RecoveryRates {
  double victim_rate = 0.0;  // victim-conditioned samples of the victim's classes flagged as rotated
  double victim_rate_all_classes = 0.0;
  double other_rate = 0.0;   // other-conditioned samples flagged as rotated
  double detector_accuracy = 0.0;
  std::vector<int> victim_classes;
  std::vector<double> victim_rate_by_class;
};

/// Generated samples for the given classes cycling, conditioned on `id`.
inline Tensor conditioned_samples(const Generator& g, int n, int id, const std::vector<int>& classes, Rng& rng) {
  std::vector<int> cats(static_cast<std::size_t>(n)), ids(static_cast<std::size_t>(n), id);
  for (int i = 0; i < n; ++i) cats[std::size_t(i)] = classes[std::size_t(i) % classes.size()];
  return g.generate(g.sample_noise(std::size_t(n), rng), cats, ids);
}

/// Same, cycling over every class.
inline Tensor conditioned_samples(const Generator& g, int n, int id, Rng& rng) {
  std::vector<int> all(static_cast<std::size_t>(g.arch().num_classes));
  std::iota(all.begin(), all.end(), 0);
  return conditioned_samples(g, n, id, all, rng);
}

inline RecoveryRates measure_recovery(const Experiment& e, const Generator& g) {
  const auto& d = e.cfg.dataset;
  const SynthKind kind = d.source == "synthetic" ? parse_synth_kind(d.kind) : SynthKind::bars;
  const int classes = std::min(d.classes, kMaxBarClasses);
  const double angle = d.victim_rotation != 0.0 ? d.victim_rotation : 30.0;
  const auto det = train_rotation_detector(kind, classes, d.side, angle, derive_seed(e.cfg.seed(), "detector"));
  Rng rng = make_rng(e.cfg.seed(), "recovery");
  const int n = e.cfg.output.detector_samples;
  const int c = g.arch().num_classes;
  RecoveryRates r;
  r.detector_accuracy = det.accuracy;
  const auto& labels = e.clients[std::size_t(e.cfg.attack.victim)].labels;
  r.victim_classes.assign(labels.begin(), labels.end());
  std::sort(r.victim_classes.begin(), r.victim_classes.end());
  r.victim_classes.erase(std::unique(r.victim_classes.begin(), r.victim_classes.end()), r.victim_classes.end());
  r.victim_rate = det.rate(conditioned_samples(g, n, 1, r.victim_classes, rng));
  const Tensor all = conditioned_samples(g, n, 1, rng);
  const auto pred = det.model.predict(all);
  std::vector<int> hits(std::size_t(c), 0), count(std::size_t(c), 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    count[i % std::size_t(c)] += 1;
    hits[i % std::size_t(c)] += pred[i] == 1;
  }
  for (int k = 0; k < c; ++k) {
    const auto kk = std::size_t(k);
    r.victim_rate_by_class.push_back(count[kk] ? double(hits[kk]) / count[kk] : 0.0);
  }
  r.victim_rate_all_classes = double(std::count(pred.begin(), pred.end(), 1)) / double(pred.size());
  r.other_rate = det.rate(conditioned_samples(g, n, 0, rng));
  return r;
}

struct RoundSummary {
  int round = 0;
  double accuracy = 0.0;  // stop-criterion accuracy
  bool converged = false;
  bool skipped = false;
  int d_epochs = 0;
  int g_steps = 0;
  double mean_residual = 0.0;
};

struct AttackOutcome {
  FedResult fed;
  std::vector<RoundSummary> rounds;
  std::vector<LossReport> losses;
  std::vector<double> iso_distance;
  AttackState state;
  double seconds = 0.0;
};

/// Federated run with the attack observer attached. Writes the loss CSV, the
/// stop log and generated grids under `dir` when it is non-empty.
inline AttackOutcome run_attack(const Experiment& e, AttackMode mode, const std::string& dir = "") {
  namespace fs = std::filesystem;
  const auto t0 = std::chrono::steady_clock::now();
  AttackConfig acfg = e.cfg.attack;
  acfg.mode = mode;
  MganObserver obs(make_attack_state(e.models.discriminator, e.models.generator, acfg), acfg,
                   effective_inversion(e), e.test.images, e.cfg.seed());
  std::optional<CsvWriter> losses, stops;
  if (!dir.empty()) {
    fs::create_directories(fs::path(dir) / "images");
    losses.emplace((fs::path(dir) / "losses.csv").string(), "round,step,L_real,L_cat,L_id");
    stops.emplace((fs::path(dir) / "stop.csv").string(), "round,accuracy,converged");
  }
  AttackOutcome out;
  const int every = e.cfg.output.image_every;
  obs.on_round([&](const AttackRoundReport& r, const AttackState& st) {
    RoundSummary s{r.round, r.accuracy, r.converged, r.skipped, r.d_epochs, r.g_steps, 0.0};
    for (const auto& b : r.representatives) s.mean_residual += b.residual;
    if (!r.representatives.empty()) s.mean_residual /= double(r.representatives.size());
    out.rounds.push_back(s);
    for (const auto& l : r.losses) {
      out.losses.push_back(l);
      if (losses) {
        losses->row(std::to_string(l.round) + "," + std::to_string(l.step) + "," +
                    format_real(l.l_real) + "," + format_real(l.l_cat) + "," +
                    (l.l_id ? format_real(*l.l_id) : std::string()));
      }
    }
    if (!dir.empty() && st.iso && e.cfg.output.checkpoints) {
      const auto iso_dir = fs::path(dir) / "iso_checkpoints";
      fs::create_directories(iso_dir);
      save_params((iso_dir / checkpoint_name("iso", r.round + 1)).string(), st.iso->params());
    }
    if (stops) stops->row(std::to_string(r.round) + "," + format_real(r.accuracy) + "," + (r.converged ? "1" : "0"));
    if (!dir.empty() && every > 0 && !r.skipped && (r.round % every == 0 || r.converged)) {
      // one row per class, victim-conditioned
      const int c = st.g.arch().num_classes, per = 8;
      std::vector<int> cats, ids(std::size_t(c * per), 1);
      for (int k = 0; k < c; ++k) cats.insert(cats.end(), per, k);
      Rng rng = make_rng(e.cfg.seed(), "grid", {std::uint64_t(r.round)});
      const Tensor x = st.g.generate(st.g.sample_noise(cats.size(), rng), cats, ids);
      char name[64];
      std::snprintf(name, sizeof name, "client-%d_round_%04d.pgm", acfg.victim, r.round);
      save_image_grid(x, std::size_t(per), (fs::path(dir) / "images" / name).string());
      if (!r.representatives.empty()) {
        std::vector<Tensor> reps;
        for (const auto& b : r.representatives) reps.push_back(b.images);
        std::snprintf(name, sizeof name, "representatives_%04d.pgm", r.round);
        save_image_grid(concat_rows(reps), std::size_t(r.representatives.front().images.dim(0)),
                        (fs::path(dir) / "images" / name).string());
      }
    }
  });
  if (!dir.empty() && mode == AttackMode::active && e.cfg.output.checkpoints) {
    const auto iso_dir = fs::path(dir) / "iso_checkpoints";
    fs::create_directories(iso_dir);
    save_params((iso_dir / checkpoint_name("iso", 0)).string(), e.models.classifier.params());
  }
  FedRunOptions opts;
  opts.observer = &obs;
  opts.output = fed_output(e.cfg, dir, std::string(to_string(mode)));
  if (e.cfg.end_on_convergence) opts.stop = [&] { return obs.state().converged; };
  out.fed = run_federated(e.cfg.federated.fed, e.models.classifier, e.clients, e.test, opts);
  out.iso_distance = obs.iso_distance();
  out.state = obs.state();
  if (!dir.empty()) {
    save_params((fs::path(dir) / "generator.flps").string(), out.state.g.params());
    save_params((fs::path(dir) / "discriminator.flps").string(), out.state.d.params());
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

struct GanClientOutcome {
  FedResult fed;
  Generator generator;
};

/// Lowest class of the victim that the adversary does not hold itself, else
/// the victim's lowest class.
inline int gan_client_target(const Experiment& e) {
  const auto& victim = e.clients[std::size_t(e.cfg.attack.victim)].labels;
  const auto& own = e.clients[std::size_t(e.cfg.gan_client.adversary)].labels;
  const std::set<int> v(victim.begin(), victim.end()), a(own.begin(), own.end());
  for (int c : v)
    if (!a.count(c)) return c;
  return v.empty() ? 0 : *v.begin();
}

/// Federated run in which one client is the GAN adversary. The shared model
/// gets an extra output for the fake class.
inline GanClientOutcome run_gan_client_baseline(const Experiment& e, const std::string& dir = "") {
  // only the classifier of this spec is used; the generator is conditioned on real classes
  const auto spec = presets::by_name(e.cfg.model.preset, e.cfg.dataset.classes + 1, e.cfg.dataset.side);
  const auto gspec = presets::by_name(e.cfg.model.preset, e.cfg.dataset.classes, e.cfg.dataset.side);
  const auto m = build_models(spec, derive_seed(e.cfg.seed(), "init"));
  const auto gm = build_models(gspec, derive_seed(e.cfg.seed(), "init/gan-client"));
  const auto& f = e.cfg.federated.fed;
  GanClientConfig gcfg = e.cfg.gan_client;
  if (gcfg.target_class < 0) gcfg.target_class = gan_client_target(e);
  auto adversary = std::make_shared<GanClientAdversary>(gm.generator, gcfg, f.local_epochs,
                                                        f.batch_size, f.sgd);
  FedRunOptions opts;
  opts.custom_clients[e.cfg.gan_client.adversary] = [adversary](const SharedClassifier& model,
                                                                const ClientDataset& data, int round,
                                                                Rng& rng) {
    return (*adversary)(model, data, round, rng);
  };
  opts.output = fed_output(e.cfg, dir, "gan_client");
  GanClientOutcome out;
  out.fed = run_federated(f, m.classifier, e.clients, e.test, opts);
  out.generator = adversary->generator();
  return out;
}

// ---------------------------------------------------------------------------
// Comparison

struct TraceStats {
  double mean = 0.0;      // mean accuracy over the window
  double variance = 0.0;  // variance of round-to-round differences in the window
};

/// Statistics over the final `window` entries of an accuracy trace.
inline TraceStats trace_stats(const std::vector<double>& acc, int window) {
  if (window < 2 || int(acc.size()) < window) throw std::invalid_argument("trace shorter than window");
  const auto first = acc.end() - window;
  TraceStats s;
  for (auto it = first; it != acc.end(); ++it) s.mean += *it;
  s.mean /= window;
  std::vector<double> diff;
  for (auto it = first + 1; it != acc.end(); ++it) diff.push_back(*it - *(it - 1));
  double m = 0;
  for (double d : diff) m += d;
  m /= double(diff.size());
  for (double d : diff) s.variance += (d - m) * (d - m);
  s.variance /= double(diff.size());
  return s;
}

inline std::vector<double> accuracies(const FedResult& r) {
  std::vector<double> a;
  for (const auto& m : r.trace) a.push_back(m.accuracy);
  return a;
}

struct CompareOutcome {
  std::vector<double> passive, active, gan_client;
  TraceStats passive_stats, active_stats, gan_client_stats;
  bool sufficient_rounds = false;
  bool ordering = false;          // passive >= active >= gan-client in mean accuracy
  bool gan_client_noisiest = false;
  double mgan_sharpness = 0.0;
  double mi_sharpness = 0.0;
  std::string verdict;
  AttackOutcome passive_run;  // G is frozen at convergence when the attack converged
};

/// The three accuracy traces and the sharpness comparison of MI images vs
/// mGAN-AI samples. The passive trace is the attacked run itself.
inline CompareOutcome run_compare(const Experiment& e, const std::string& dir = "") {
  namespace fs = std::filesystem;
  CompareOutcome c;
  Experiment full = e;
  full.cfg.end_on_convergence = false;
  c.passive_run = run_attack(full, AttackMode::passive, dir.empty() ? "" : (fs::path(dir) / "passive").string());
  const auto& passive = c.passive_run;
  const auto active = run_attack(full, AttackMode::active, dir.empty() ? "" : (fs::path(dir) / "active").string());
  const auto gan = run_gan_client_baseline(full, dir.empty() ? "" : (fs::path(dir) / "gan_client").string());
  c.passive = accuracies(passive.fed);
  c.active = accuracies(active.fed);
  c.gan_client = accuracies(gan.fed);

  const int w = e.cfg.compare.window;
  c.sufficient_rounds = int(c.passive.size()) >= w && w >= 2;
  if (c.sufficient_rounds) {
    c.passive_stats = trace_stats(c.passive, w);
    c.active_stats = trace_stats(c.active, w);
    c.gan_client_stats = trace_stats(c.gan_client, w);
    c.ordering = c.passive_stats.mean >= c.active_stats.mean &&
                 c.active_stats.mean >= c.gan_client_stats.mean;
    c.gan_client_noisiest = c.gan_client_stats.variance > c.passive_stats.variance &&
                            c.gan_client_stats.variance > c.active_stats.variance;
  }

  Rng rng = make_rng(e.cfg.seed(), "compare/mi");
  const int n = e.cfg.compare.mi_images;
  std::vector<Tensor> mi;
  for (int i = 0; i < n; ++i)
    mi.push_back(mi_attack_baseline(passive.fed.model, i % e.cfg.dataset.classes, e.cfg.mi, rng));
  const Tensor mi_x = concat_rows(mi);
  const Tensor mgan_x = conditioned_samples(passive.state.g, n, 1, rng);
  c.mi_sharpness = sharpness(mi_x);
  c.mgan_sharpness = sharpness(mgan_x);

  if (!c.sufficient_rounds) {
    c.verdict = "insufficient rounds: need at least " + std::to_string(w) + " accuracy entries";
  } else {
    c.verdict = std::string(c.ordering ? "ordering holds" : "ordering violated") + "; " +
                (c.gan_client_noisiest ? "gan-client noisiest" : "gan-client not noisiest") + "; " +
                (c.mi_sharpness < c.mgan_sharpness ? "MI blurrier" : "MI not blurrier");
  }

  if (!dir.empty()) {
    fs::create_directories(dir);
    CsvWriter csv((fs::path(dir) / "compare_accuracy.csv").string(), "round,passive,active,gan_client");
    for (std::size_t r = 0; r < c.passive.size(); ++r) {
      csv.row(std::to_string(r) + "," + format_real(c.passive[r]) + "," +
              format_real(r < c.active.size() ? c.active[r] : NAN) + "," +
              format_real(r < c.gan_client.size() ? c.gan_client[r] : NAN));
    }
    save_image_grid(mi_x, std::size_t(n), (fs::path(dir) / "mi_images.pgm").string());
    save_image_grid(mgan_x, std::size_t(n), (fs::path(dir) / "mgan_images.pgm").string());
  }
  return c;
}

inline json to_json(const CompareOutcome& c) {
  auto stats = [](const TraceStats& s) { return json{{"mean", s.mean}, {"variance", s.variance}}; };
  return json{{"passive", stats(c.passive_stats)},
              {"active", stats(c.active_stats)},
              {"gan_client", stats(c.gan_client_stats)},
              {"sufficient_rounds", c.sufficient_rounds},
              {"ordering", c.ordering},
              {"gan_client_noisiest", c.gan_client_noisiest},
              {"mi_sharpness", c.mi_sharpness},
              {"mgan_sharpness", c.mgan_sharpness},
              {"verdict", c.verdict}};
}

}  // namespace mgan
