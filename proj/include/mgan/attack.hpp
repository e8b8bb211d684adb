#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mgan/fed.hpp"
#include "mgan/inversion.hpp"
#include "mgan/losses.hpp"
#include "mgan/models.hpp"
#include "mgan/optim.hpp"

namespace mgan {

enum class AttackMode { passive, active };

inline AttackMode parse_attack_mode(const std::string& s) {
  if (s == "passive") return AttackMode::passive;
  if (s == "active") return AttackMode::active;
  throw std::invalid_argument("attack mode must be passive or active, got '" + s + "'");
}

inline const char* to_string(AttackMode m) { return m == AttackMode::passive ? "passive" : "active"; }

// ---------------------------------------------------------------------------
// Discriminator task losses

/// `value` is the log-likelihood form for the binary tasks (<= 0) and the
/// cross-entropy for the category task. Gradients are of what D minimizes:
/// -value for the binary tasks, value for the category task.
template <class T>
struct BasicHeadLoss {
  double value = 0.0;
  BasicParamSet<T> params;
  BasicTensor<T> first_input;   // d objective / d first batch
  BasicTensor<T> second_input;  // d objective / d second batch (binary tasks)
};

namespace detail {

template <class T>
void add_into(BasicParamSet<T>& acc, const BasicParamSet<T>& g, double scale = 1.0) {
  for (auto& [name, t] : acc) {
    const auto& s = g.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += T(scale) * s[i];
  }
}

template <class T>
BasicHeadLoss<T> binary_head_loss(const ArchitectureSpec& arch, const BasicParamSet<T>& d,
                                  const BasicTensor<T>& first, const BasicTensor<T>& second,
                                  const char* head) {
  if (first.empty() || second.empty()) throw std::invalid_argument("empty batch for head loss");
  BasicHeadLoss<T> out;
  out.params = d.zeros_like();
  for (int which = 0; which < 2; ++which) {
    const BasicTensor<T>& x = which == 0 ? first : second;
    BasicTape<T> tape;
    const auto pass = run_trunk(arch, d, x, tape);
    const auto z = apply_layer(arch.head(head, 1), d, pass.features, tape);
    const float target = which == 0 ? 1.0f : 0.0f;
    const auto bce = sigmoid_bce(tape.value(z), std::vector<float>(x.dim(0), target));
    out.value -= double(bce.loss);
    const auto g = backward(tape, z, bce.grad);
    add_into(out.params, g.params_like(d));
    (which == 0 ? out.first_input : out.second_input) = g.wrt(pass.input, x.shape());
  }
  return out;
}

}  // namespace detail

/// Real/fake task: aux labelled 1, fakes labelled 0.
template <class T>
BasicHeadLoss<T> loss_real(const ArchitectureSpec& arch, const BasicParamSet<T>& d,
                           const BasicTensor<T>& aux, const BasicTensor<T>& fake) {
  return detail::binary_head_loss(arch, d, aux, fake, kHeadReal);
}

/// Identity task: victim representatives labelled 1, the others 0.
template <class T>
BasicHeadLoss<T> loss_id(const ArchitectureSpec& arch, const BasicParamSet<T>& d,
                         const BasicTensor<T>& victim, const BasicTensor<T>& others) {
  if (victim.empty()) throw std::invalid_argument("empty victim batch");
  return detail::binary_head_loss(arch, d, victim, others, kHeadId);
}

/// Category task: mean cross-entropy of the category head against the labels
/// the samples were conditioned on.
template <class T>
BasicHeadLoss<T> loss_cat(const ArchitectureSpec& arch, const BasicParamSet<T>& d,
                          const BasicTensor<T>& fake, const std::vector<int>& labels) {
  BasicTape<T> tape;
  const auto pass = run_trunk(arch, d, fake, tape);
  const auto z = classifier_logits(arch, d, pass.features, tape);
  const auto ce = softmax_cross_entropy(tape.value(z), labels);
  const auto g = backward(tape, z, ce.grad);
  BasicHeadLoss<T> out;
  out.value = double(ce.loss);
  out.params = g.params_like(d);
  out.first_input = g.wrt(pass.input, fake.shape());
  return out;
}

// ---------------------------------------------------------------------------
// Generator objective

struct GeneratorBatch {
  Tensor noise;
  std::vector<int> cats;
  std::vector<int> ids;
};

struct GeneratorGrads {
  ParamSet params;
  double l_real = 0.0;  // mean log D_real(fake)
  double l_cat = 0.0;   // CE(D_cat(fake), cats)
  double l_id = 0.0;    // mean log D_id(fake) over victim-conditioned rows
  double l_cat_victim = 0.0;  // CE over victim-conditioned rows (report only)
};

/// Gradient of CE(D_cat) - log D_real + w * (-log D_id on id = victim rows)
/// with respect to theta_G. The real term is non-saturating. Running
/// batchnorm statistics of G are updated when `update_running` is set.
inline GeneratorGrads generator_gradients(const MultiTaskDiscriminator& d, Generator& g,
                                          const GeneratorBatch& batch, double id_weight,
                                          bool use_id, bool update_running = true) {
  const std::size_t b = batch.cats.size();
  Tape tg;
  const auto gp = g.forward(g.pack_input(batch.noise, batch.cats, batch.ids), tg, update_running);
  const Tensor fake = tg.value(gp.images);

  Tape td;
  const auto dp = d.forward(fake, td);
  GeneratorGrads out;
  const auto real = sigmoid_bce(td.value(dp.real), std::vector<float>(b, 1.0f));
  out.l_real = -double(real.loss);
  const auto cat = softmax_cross_entropy(td.value(dp.cat), batch.cats);
  out.l_cat = double(cat.loss);
  std::vector<std::pair<Tape::Node, Tensor>> seeds = {{dp.real, real.grad}, {dp.cat, cat.grad}};

  std::size_t victims = 0;
  for (int id : batch.ids) victims += id == 1;
  if (victims > 0) {
    const Tensor& zc = td.value(dp.cat);
    const std::size_t c = zc.dim(1);
    Tensor rows({victims, c});
    std::vector<int> labels;
    for (std::size_t r = 0, j = 0; r < b; ++r) {
      if (batch.ids[r] != 1) continue;
      std::copy_n(zc.data().begin() + std::ptrdiff_t(r * c), c, rows.storage().begin() + std::ptrdiff_t(j++ * c));
      labels.push_back(batch.cats[r]);
    }
    out.l_cat_victim = double(softmax_cross_entropy(rows, labels).loss);
  }
  if (use_id && victims > 0) {
    const Tensor& zid = td.value(dp.id);
    Tensor rows({victims, 1});
    for (std::size_t r = 0, j = 0; r < b; ++r)
      if (batch.ids[r] == 1) rows[j++] = zid[r];
    const auto id = sigmoid_bce(rows, std::vector<float>(victims, 1.0f));
    out.l_id = -double(id.loss);
    Tensor gid(zid.shape());
    for (std::size_t r = 0, j = 0; r < b; ++r)
      if (batch.ids[r] == 1) gid[r] = float(id_weight) * id.grad[j++];
    seeds.push_back({dp.id, gid});
  }
  const auto dg = backward(td, seeds);
  const Tensor gx = dg.wrt(dp.input, fake.shape());
  out.params = backward(tg, gp.images, gx).params_like(g.params());
  return out;
}

// ---------------------------------------------------------------------------
// Attack state and rounds

struct AttackConfig {
  int victim = 0;
  AttackMode mode = AttackMode::passive;
  double threshold = 0.8;
  int d_epoch_base = 1;
  int d_epoch_step = 10;
  int d_epoch_cap = 5;
  int batch_size = 32;
  int g_steps_per_epoch = 1;  // G steps after each D epoch
  float d_learning_rate = 0.0002f;
  float g_learning_rate = 0.0002f;
  float beta1 = 0.5f;
  double id_weight = 1.0;
  int min_rounds = 0;  // stop criterion is not checked before this round
  int stop_samples = 100;
  bool stop_on_convergence = true;

  void validate(int num_clients) const {
    if (victim < 0 || victim >= num_clients) {
      throw std::invalid_argument("victim id " + std::to_string(victim) + " outside [0, " +
                                  std::to_string(num_clients) + ")");
    }
    if (!(threshold > 0 && threshold <= 1)) throw std::invalid_argument("threshold must be in (0,1]");
    if (d_epoch_base < 1 || d_epoch_step < 1 || d_epoch_cap < d_epoch_base) {
      throw std::invalid_argument("invalid discriminator epoch schedule");
    }
    if (batch_size < 1) throw std::invalid_argument("attack batch size must be >= 1");
    if (g_steps_per_epoch < 1) throw std::invalid_argument("generator steps must be >= 1");
    if (stop_samples < 1) throw std::invalid_argument("stop samples must be >= 1");
  }
};

/// epochs(t) = min(base + floor(t / step), cap)
inline int d_epochs(int round, const AttackConfig& cfg) {
  return std::min(cfg.d_epoch_base + round / cfg.d_epoch_step, cfg.d_epoch_cap);
}

struct LossReport {
  int round = 0;
  int step = 0;
  double l_real = 0.0;
  double l_cat = 0.0;
  std::optional<double> l_id;
  double l_cat_victim = 0.0;
};

struct AttackState {
  MultiTaskDiscriminator d;
  Generator g;
  AdamState adam_d;
  AdamState adam_g;
  int round = 0;
  bool converged = false;
  int converged_round = -1;
  double last_accuracy = 0.0;
  std::map<int, Tensor> warm;            // last representatives per client
  std::optional<SharedClassifier> iso;   // active mode: the victim's private model
};

inline AttackState make_attack_state(const MultiTaskDiscriminator& d, const Generator& g,
                                     const AttackConfig& cfg) {
  AttackState s;
  s.d = d;
  s.g = g;
  s.adam_d = make_adam(d.params(), cfg.d_learning_rate, cfg.beta1);
  s.adam_g = make_adam(g.params(), cfg.g_learning_rate, cfg.beta1);
  return s;
}

struct AttackRoundReport {
  int round = 0;
  int d_epochs = 0;
  int d_steps = 0;
  int g_steps = 0;
  double accuracy = 0.0;  // victim-conditioned samples classified as conditioned
  bool converged = false;
  bool skipped = false;   // attack had already converged
  std::vector<LossReport> losses;
  std::vector<RepresentativeBatch> representatives;
};

/// Fraction of `n` victim-conditioned samples (categories cycling over all
/// classes) that `model` assigns to the category they were conditioned on.
inline double victim_sample_accuracy(const Generator& g, const SharedClassifier& model, int n,
                                     Rng& rng) {
  const int c = g.arch().num_classes;
  std::vector<int> cats(static_cast<std::size_t>(n)), ids(static_cast<std::size_t>(n), 1);
  for (int i = 0; i < n; ++i) cats[std::size_t(i)] = i % c;
  const Tensor x = g.generate(g.sample_noise(std::size_t(n), rng), cats, ids);
  const auto pred = model.predict(x);
  int hit = 0;
  for (int i = 0; i < n; ++i) hit += pred[std::size_t(i)] == cats[std::size_t(i)];
  return double(hit) / n;
}

inline GeneratorBatch sample_generator_batch(const Generator& g, std::size_t n, bool use_id,
                                             Rng& rng) {
  GeneratorBatch b;
  b.noise = g.sample_noise(n, rng);
  std::uniform_int_distribution<int> cat(0, g.arch().num_classes - 1);
  for (std::size_t i = 0; i < n; ++i) {
    b.cats.push_back(cat(rng));
    // active mode conditions every sample on the victim
    b.ids.push_back(use_id ? int(i % 2) : 1);
  }
  return b;
}

namespace detail {

inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
  const std::size_t row = x.size() / x.dim(0);
  Shape s = x.shape();
  s[0] = idx.size();
  Tensor out(s);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(x.storage().begin() + std::ptrdiff_t(idx[i] * row), row,
                out.storage().begin() + std::ptrdiff_t(i * row));
  return out;
}

}  // namespace detail

/// One Adam step of D on the real/fake task (plus the identity task when
/// representatives are given). Returns (L_real, L_id) before the step.
inline std::pair<double, double> discriminator_step(AttackState& st, const Tensor& real,
                                                    const Tensor* victim_reps,
                                                    const Tensor* other_reps,
                                                    const AttackConfig& cfg, Rng& rng) {
  const bool use_id = victim_reps != nullptr;
  const auto gb = sample_generator_batch(st.g, real.dim(0), use_id, rng);
  Tape tg;
  const auto gp = st.g.forward(st.g.pack_input(gb.noise, gb.cats, gb.ids), tg, false);
  const Tensor fake = tg.value(gp.images);
  auto lr = loss_real(st.d.arch(), st.d.params(), real, fake);
  ParamSet grad = std::move(lr.params);
  double l_id = 0.0;
  if (use_id) {
    const auto li = loss_id(st.d.arch(), st.d.params(), *victim_reps, *other_reps);
    l_id = li.value;
    detail::add_into(grad, li.params, cfg.id_weight);
  }
  st.d.params() = adam_step(st.d.params(), grad, st.adam_d);
  return {lr.value, l_id};
}

/// One Adam step of G on a fresh batch of `batch` samples.
inline GeneratorGrads generator_step(AttackState& st, std::size_t batch, bool use_id,
                                     const AttackConfig& cfg, Rng& rng) {
  const auto gb = sample_generator_batch(st.g, batch, use_id, rng);
  auto gg = generator_gradients(st.d, st.g, gb, cfg.id_weight, use_id);
  st.g.params() = adam_step(st.g.params(), gg.params, st.adam_g);
  return gg;
}

namespace detail {

/// D epochs over aux minibatches, each followed by the configured G steps.
inline void gan_updates(AttackState& st, const Tensor& aux, const Tensor* victim_reps,
                        const Tensor* other_reps, const AttackConfig& cfg, Rng& rng,
                        AttackRoundReport& rep) {
  const bool use_id = victim_reps != nullptr;
  const std::size_t n = aux.dim(0);
  const std::size_t bs = std::min<std::size_t>(std::size_t(cfg.batch_size), n);
  const std::size_t batches = (n + bs - 1) / bs;
  const int epochs = d_epochs(st.round, cfg);
  rep.d_epochs = epochs;
  std::pair<double, double> last{0.0, 0.0};
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t end = std::min(n, (b + 1) * bs);
      const std::vector<std::size_t> idx(order.begin() + std::ptrdiff_t(b * bs),
                                         order.begin() + std::ptrdiff_t(end));
      last = discriminator_step(st, gather_rows(aux, idx), victim_reps, other_reps, cfg, rng);
      ++rep.d_steps;
    }
    for (int k = 0; k < cfg.g_steps_per_epoch; ++k) {
      const auto gg = generator_step(st, bs, use_id, cfg, rng);
      LossReport row{st.round, rep.g_steps, last.first, gg.l_cat, std::nullopt, gg.l_cat_victim};
      if (use_id) row.l_id = last.second;
      rep.losses.push_back(row);
      ++rep.g_steps;
    }
  }
}

inline const ClientUpdate& find_update(const std::vector<ClientUpdate>& updates, int id) {
  for (const auto& u : updates)
    if (u.client_id == id) return u;
  throw std::invalid_argument("missing update from client " + std::to_string(id));
}

inline void check_stop(AttackState& st, const SharedClassifier& judge, const AttackConfig& cfg,
                       Rng& rng, AttackRoundReport& rep) {
  rep.accuracy = victim_sample_accuracy(st.g, judge, cfg.stop_samples, rng);
  st.last_accuracy = rep.accuracy;
  if (!st.converged && st.round >= cfg.min_rounds && rep.accuracy >= cfg.threshold) {
    st.converged = true;
    st.converged_round = st.round;
    rep.converged = true;
  }
}

}  // namespace detail

/// One passive round: D <- M_t + u_v, representatives for every client, then
/// D minimizes the real and identity objectives and G the category, real
/// (non-saturating) and identity objectives.
inline AttackRoundReport passive_attack_round(AttackState& st, const SharedClassifier& mt,
                                              const std::vector<ClientUpdate>& updates,
                                              const Tensor& aux, const AttackConfig& cfg,
                                              const InversionConfig& inv, Rng& rng) {
  AttackRoundReport rep;
  rep.round = st.round;
  if (st.converged && cfg.stop_on_convergence) {
    rep.skipped = true;
    rep.accuracy = st.last_accuracy;
    ++st.round;
    return rep;
  }
  const auto& uv = detail::find_update(updates, cfg.victim);
  st.d = overwrite_trunk(st.d, axpy(mt.params(), uv.delta));

  std::vector<Tensor> others;
  Tensor victim;
  for (const auto& u : updates) {
    Rng irng = make_rng(rng(), "inversion", {std::uint64_t(u.client_id)});
    std::optional<Tensor> init;
    if (inv.warm_start && st.warm.count(u.client_id)) init = st.warm.at(u.client_id);
    auto r = compute_representatives(u, mt, inv, irng, init);
    st.warm[u.client_id] = r.images;
    if (u.client_id == cfg.victim) {
      victim = r.images;
    } else {
      others.push_back(r.images);
    }
    rep.representatives.push_back(std::move(r));
  }
  const Tensor other = concat_rows(others);
  detail::gan_updates(st, aux, &victim, &other, cfg, rng, rep);
  detail::check_stop(st, mt, cfg, rng, rep);
  ++st.round;
  return rep;
}

/// One active round. D <- M_iso + u_v and M_iso <- M_iso + u_v; the identity
/// task and the representatives are dropped.
inline AttackRoundReport active_attack_round(AttackState& st, const ClientUpdate& u_victim,
                                             const Tensor& aux, const AttackConfig& cfg,
                                             Rng& rng) {
  if (!st.iso) throw std::logic_error("active round without an isolated model");
  AttackRoundReport rep;
  rep.round = st.round;
  st.iso->params() = axpy(st.iso->params(), u_victim.delta);
  if (st.converged && cfg.stop_on_convergence) {
    rep.skipped = true;
    rep.accuracy = st.last_accuracy;
    ++st.round;
    return rep;
  }
  st.d = overwrite_trunk(st.d, st.iso->params());
  detail::gan_updates(st, aux, nullptr, nullptr, cfg, rng, rep);
  detail::check_stop(st, *st.iso, cfg, rng, rep);
  ++st.round;
  return rep;
}

/// Scale matching a client that ran E epochs of ceil(n / B) SGD steps: its
/// update is roughly -lr * steps * (mean gradient).
inline double default_inversion_gamma(const FedConfig& cfg, std::size_t samples_per_client) {
  const std::size_t b = std::size_t(std::max(cfg.batch_size, 1));
  const std::size_t steps = (samples_per_client + b - 1) / b;
  return double(cfg.sgd.learning_rate) * cfg.local_epochs * double(std::max<std::size_t>(steps, 1));
}

/// Runs the attack from inside the federated loop. Passive mode only reads;
/// active mode hands the victim its isolated model each round.
class MganObserver : public RoundObserver {
 public:
  using Callback = std::function<void(const AttackRoundReport&, const AttackState&)>;

  MganObserver(AttackState state, AttackConfig cfg, InversionConfig inv, Tensor aux,
               std::uint64_t seed)
      : state_(std::move(state)), cfg_(cfg), inv_(inv), aux_(std::move(aux)),
        rng_(make_rng(seed, "attack")) {
    if (cfg_.mode == AttackMode::passive && !(inv_.gamma > 0)) {
      throw std::invalid_argument("passive attack needs a positive inversion gamma");
    }
  }

  void on_round(Callback cb) { callback_ = std::move(cb); }

  std::map<int, SharedClassifier> overrides(int, const SharedClassifier& mt) override {
    if (cfg_.mode != AttackMode::active) return {};
    if (!state_.iso) state_.iso = mt;  // M_iso_0 = M_0
    iso_distance_.push_back(std::sqrt(squared_norm(difference(state_.iso->params(), mt.params()))));
    return {{cfg_.victim, *state_.iso}};
  }

  void observe(int, const SharedClassifier& mt, const std::vector<ClientUpdate>& updates) override {
    AttackRoundReport rep;
    if (cfg_.mode == AttackMode::passive) {
      rep = passive_attack_round(state_, mt, updates, aux_, cfg_, inv_, rng_);
    } else {
      rep = active_attack_round(state_, detail::find_update(updates, cfg_.victim), aux_, cfg_, rng_);
    }
    reports_.push_back(rep.accuracy);
    if (callback_) callback_(rep, state_);
  }

  const AttackState& state() const { return state_; }
  const std::vector<double>& accuracies() const { return reports_; }
  /// ||M_iso - M_t|| at the start of each round (active mode).
  const std::vector<double>& iso_distance() const { return iso_distance_; }

 private:
  AttackState state_;
  AttackConfig cfg_;
  InversionConfig inv_;
  Tensor aux_;
  Rng rng_;
  Callback callback_;
  std::vector<double> reports_;
  std::vector<double> iso_distance_;
};

// ---------------------------------------------------------------------------
// Baselines

struct MiConfig {
  int steps = 300;
  float step_size = 0.05f;
  float init_amplitude = 0.1f;
  float lower = -1.0f;
  float upper = 1.0f;
};

/// Gradient ascent on log p(target | x) from low-amplitude white noise, with
/// the box enforced after each step. Returns `count` images.
inline Tensor mi_attack_baseline(const SharedClassifier& m, int target, const MiConfig& cfg,
                                 Rng& rng, int count = 1) {
  if (target < 0 || target >= m.arch().num_classes) throw std::out_of_range("MI target class");
  Tensor x(m.arch().image_shape(std::size_t(count)));
  for (auto& v : x.storage()) v = uniform(rng, -cfg.init_amplitude, cfg.init_amplitude);
  const std::vector<int> labels(std::size_t(count), target);
  for (int s = 0; s < cfg.steps; ++s) {
    const auto g = classifier_gradient(m.arch(), m.params(), x, labels);
    if (!std::isfinite(g.loss)) throw NumericalError("non-finite loss in MI ascent");
    // the input gradient of a batch mean is 1/count of each image's own
    for (std::size_t i = 0; i < x.size(); ++i)
      x[i] = std::clamp(x[i] - cfg.step_size * float(count) * g.input[i], cfg.lower, cfg.upper);
  }
  return x;
}

struct GanClientConfig {
  int adversary = 1;
  int target_class = -1;  // < 0: picked by the experiment (a class the victim holds)
  int inject = 100;  // generated samples added to local data, labelled as the extra class
  int g_steps = 20;
  int batch_size = 32;
  float learning_rate = 0.001f;
  float beta1 = 0.5f;
  bool enabled = true;
};

/// Malicious client that uses the received shared model as its discriminator.
/// The shared model must have one more output than the real class count; the
/// last output is the "fake" class its injected samples carry.
class GanClientAdversary {
 public:
  GanClientAdversary(Generator g, GanClientConfig cfg, int local_epochs, int batch_size,
                     SgdConfig sgd)
      : g_(std::move(g)), cfg_(cfg), epochs_(local_epochs), batch_(batch_size), sgd_(sgd),
        adam_(make_adam(g_.params(), cfg.learning_rate, cfg.beta1)) {}

  ClientUpdate operator()(const SharedClassifier& m, const ClientDataset& data, int round,
                          Rng& rng) {
    if (!cfg_.enabled) return local_train(m, data, epochs_, batch_, sgd_, rng, round);
    const int fake_class = m.arch().num_classes - 1;
    if (cfg_.target_class < 0 || cfg_.target_class >= fake_class) {
      throw std::invalid_argument("gan-client target class outside [0, C)");
    }
    for (int s = 0; s < cfg_.g_steps; ++s) {
      const std::size_t b = std::size_t(cfg_.batch_size);
      const std::vector<int> cats(b, cfg_.target_class), ids(b, 0);
      Tape tg;
      const auto gp = g_.forward(g_.pack_input(g_.sample_noise(b, rng), cats, ids), tg, true);
      const auto cg = classifier_gradient(m.arch(), m.params(), tg.value(gp.images), cats);
      const auto grads = backward(tg, gp.images, cg.input).params_like(g_.params());
      g_.params() = adam_step(g_.params(), grads, adam_);
    }
    ClientDataset poisoned = data;
    if (cfg_.inject > 0) {
      const std::size_t n = std::size_t(cfg_.inject);
      // batch statistics, as in the G steps above
      Tape t;
      const Tensor fakes = t.value(
          g_.forward(g_.pack_input(g_.sample_noise(n, rng), std::vector<int>(n, cfg_.target_class),
                                   std::vector<int>(n, 0)),
                     t, false)
              .images);
      poisoned.samples = concat_rows(std::vector<Tensor>{data.samples, fakes});
      poisoned.labels.insert(poisoned.labels.end(), n, fake_class);
    }
    return local_train(m, poisoned, epochs_, batch_, sgd_, rng, round);
  }

  const Generator& generator() const { return g_; }

 private:
  Generator g_;
  GanClientConfig cfg_;
  int epochs_;
  int batch_;
  SgdConfig sgd_;
  AdamState adam_;
};

// ---------------------------------------------------------------------------
// Evaluation helpers

/// Mean absolute 4-neighbour Laplacian over interior pixels.
inline double sharpness(const Tensor& images) {
  if (images.rank() != 4 || images.dim(2) < 3 || images.dim(3) < 3) {
    throw ShapeError("sharpness needs [N,C,H,W] with H,W >= 3");
  }
  const std::size_t planes = images.dim(0) * images.dim(1), h = images.dim(2), w = images.dim(3);
  double total = 0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < planes; ++p) {
    const float* a = images.data().data() + p * h * w;
    for (std::size_t i = 1; i + 1 < h; ++i)
      for (std::size_t j = 1; j + 1 < w; ++j) {
        total += std::abs(double(a[(i - 1) * w + j]) + a[(i + 1) * w + j] + a[i * w + j - 1] +
                          a[i * w + j + 1] - 4.0 * a[i * w + j]);
        ++count;
      }
  }
  return total / double(count);
}

struct PropertyDetector {
  SharedClassifier model;  // class 1 = property present
  double accuracy = 0.0;   // on a held-out set

  /// Fraction of images flagged as carrying the property.
  double rate(const Tensor& images) const {
    const auto pred = model.predict(images);
    return double(std::count(pred.begin(), pred.end(), 1)) / double(pred.size());
  }
};

/// Trains a binary rotated-vs-upright classifier on fresh synthetic images.
inline PropertyDetector train_rotation_detector(SynthKind kind, int classes, int side,
                                                double angle, std::uint64_t seed,
                                                int per_class = 60, int epochs = 8) {
  auto make = [&](std::uint64_t s) {
    const auto base = synth_dataset(kind, classes, per_class, side, s);
    const Tensor rotated = rotate_images(base.images, angle);
    ClientDataset d;
    d.samples = concat_rows(std::vector<Tensor>{base.images, rotated});
    d.labels.assign(base.size(), 0);
    d.labels.insert(d.labels.end(), base.size(), 1);
    return d;
  };
  const auto train = make(derive_seed(seed, "detector/train"));
  const auto test = make(derive_seed(seed, "detector/test"));
  PropertyDetector det;
  det.model = build_models(presets::small(2, side), derive_seed(seed, "detector/init")).classifier;
  Rng rng = make_rng(seed, "detector/sgd");
  for (int e = 0; e < epochs; ++e) {
    const auto u = local_train(det.model, train, 1, 32, SgdConfig{0.05f}, rng);
    det.model.params() = axpy(det.model.params(), u.delta);
  }
  det.accuracy = evaluate(det.model, test.samples, test.labels).accuracy;
  return det;
}

}  // namespace mgan
