#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "mgan/data.hpp"
#include "mgan/losses.hpp"
#include "mgan/models.hpp"
#include "mgan/optim.hpp"
#include "mgan/rng.hpp"
#include "mgan/serialize.hpp"

namespace mgan {

struct ClientUpdate {
  int client_id = 0;
  int round = 0;
  ParamSet delta;
};

struct FedConfig {
  int num_clients = 10;
  int rounds = 10;
  int local_epochs = 1;
  int batch_size = 32;
  SgdConfig sgd;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const {
    if (num_clients < 2) throw std::invalid_argument("federation needs at least 2 clients");
    if (rounds < 0) throw std::invalid_argument("rounds must be >= 0");
    if (local_epochs < 1) throw std::invalid_argument("local epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    if (!std::isfinite(sgd.learning_rate) || sgd.learning_rate < 0) {
      throw std::invalid_argument("learning rate must be finite and >= 0");
    }
    if (threads < 1) throw std::invalid_argument("threads must be >= 1");
  }
};

template <class T>
struct BasicClassifierGrad {
  T loss{};
  BasicParamSet<T> params;
  BasicTensor<T> input;
};

/// Mean cross-entropy of the classifier and its gradients with respect to the
/// parameters and the input batch.
template <class T>
BasicClassifierGrad<T> classifier_gradient(const ArchitectureSpec& arch,
                                           const BasicParamSet<T>& params,
                                           const BasicTensor<T>& images,
                                           const std::vector<int>& labels) {
  BasicTape<T> tape;
  const auto pass = run_trunk(arch, params, images, tape);
  const auto z = classifier_logits(arch, params, pass.features, tape);
  auto ce = softmax_cross_entropy(tape.value(z), labels);
  const auto g = backward(tape, z, ce.grad);
  return {ce.loss, g.params_like(params), g.wrt(pass.input, images.shape())};
}

struct Evaluation {
  double accuracy = 0.0;
  double loss = 0.0;
};

inline Evaluation evaluate(const SharedClassifier& m, const Tensor& images,
                           const std::vector<int>& labels, std::size_t batch = 256) {
  if (labels.empty()) return {};
  double correct = 0, loss = 0;
  for (std::size_t b = 0; b < labels.size(); b += batch) {
    const std::size_t e = std::min(labels.size(), b + batch);
    const Tensor x = images.slice_rows(b, e);
    const std::vector<int> y(labels.begin() + std::ptrdiff_t(b), labels.begin() + std::ptrdiff_t(e));
    const Tensor z = m.logits(x);
    loss += double(softmax_cross_entropy(z, y).loss) * double(e - b);
    const std::size_t k = z.dim(1);
    for (std::size_t r = 0; r < e - b; ++r) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (z[r * k + j] > z[r * k + best]) best = j;
      correct += int(best) == y[r];
    }
  }
  return {correct / double(labels.size()), loss / double(labels.size())};
}

inline Evaluation evaluate(const SharedClassifier& m, const LabeledDataset& d) {
  return evaluate(m, d.images, d.labels);
}

/// Each client draws `samples_per_client` samples, split as evenly as
/// possible over `classes_per_client` distinct classes chosen at random.
/// Clients draw independently, so classes and samples may be shared.
inline std::vector<ClientDataset> partition_non_iid(const LabeledDataset& data, int num_clients,
                                                    int classes_per_client,
                                                    int samples_per_client, std::uint64_t seed) {
  if (num_clients < 1) throw std::invalid_argument("need at least one client");
  if (classes_per_client < 1 || classes_per_client > data.num_classes) {
    throw std::invalid_argument("classes per client must be in [1, " +
                                std::to_string(data.num_classes) + "]");
  }
  if (samples_per_client < classes_per_client) {
    throw std::invalid_argument("fewer samples per client than classes per client");
  }
  std::vector<std::vector<std::size_t>> by_class(std::size_t(data.num_classes));
  for (std::size_t i = 0; i < data.size(); ++i) by_class[std::size_t(data.labels[i])].push_back(i);

  std::vector<ClientDataset> clients;
  for (int k = 0; k < num_clients; ++k) {
    Rng rng = make_rng(seed, "partition", {std::uint64_t(k)});
    std::vector<int> classes(std::size_t(data.num_classes));
    std::iota(classes.begin(), classes.end(), 0);
    std::shuffle(classes.begin(), classes.end(), rng);
    classes.resize(std::size_t(classes_per_client));
    std::sort(classes.begin(), classes.end());

    std::vector<std::size_t> picked;
    for (int j = 0; j < classes_per_client; ++j) {
      const int want = samples_per_client / classes_per_client +
                       (j < samples_per_client % classes_per_client ? 1 : 0);
      auto pool = by_class[std::size_t(classes[std::size_t(j)])];
      if (int(pool.size()) < want) {
        throw std::invalid_argument("class " + std::to_string(classes[std::size_t(j)]) + " has " +
                                    std::to_string(pool.size()) + " samples, client " +
                                    std::to_string(k) + " needs " + std::to_string(want));
      }
      std::shuffle(pool.begin(), pool.end(), rng);
      picked.insert(picked.end(), pool.begin(), pool.begin() + want);
    }
    std::shuffle(picked.begin(), picked.end(), rng);
    const auto sub = data.subset(picked);
    ClientDataset c;
    c.client_id = k;
    c.samples = sub.images;
    c.labels = sub.labels;
    clients.push_back(std::move(c));
  }
  return clients;
}

inline Rng client_rng(std::uint64_t seed, int client, int round) {
  return make_rng(seed, "clients", {std::uint64_t(client), std::uint64_t(round)});
}

/// E epochs of shuffled mini-batch SGD on a copy of M. The delta is
/// accumulated directly (sum of -lr * g), so one full-batch step yields
/// exactly -lr * grad.
inline ClientUpdate local_train(const SharedClassifier& m, const ClientDataset& data, int epochs,
                                int batch_size, const SgdConfig& cfg, Rng& rng, int round = 0) {
  if (data.size() == 0) throw std::invalid_argument("client " + std::to_string(data.client_id) +
                                                    " has no data");
  const auto& arch = m.arch();
  ParamSet delta = m.params().zeros_like();
  ParamSet theta = m.params();
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = std::min<std::size_t>(std::size_t(batch_size), data.size());
  for (int e = 0; e < epochs; ++e) {
    if (bs < data.size()) std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const std::size_t end = std::min(order.size(), b + bs);
      std::vector<std::size_t> idx(order.begin() + std::ptrdiff_t(b),
                                   order.begin() + std::ptrdiff_t(end));
      const std::size_t row = arch.image_numel();
      Tensor x(arch.image_shape(idx.size()));
      std::vector<int> y;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy_n(data.samples.storage().begin() + std::ptrdiff_t(idx[i] * row), row,
                    x.storage().begin() + std::ptrdiff_t(i * row));
        y.push_back(data.labels[idx[i]]);
      }
      const auto g = classifier_gradient(arch, theta, x, y);
      if (!std::isfinite(g.loss)) {
        throw NumericalError("non-finite loss on client " + std::to_string(data.client_id));
      }
      delta = axpy(delta, g.params, -cfg.learning_rate);
      theta = axpy(m.params(), delta);
    }
  }
  return {data.client_id, round, std::move(delta)};
}

/// M + mean(updates), accumulated in double in ascending client order.
inline SharedClassifier aggregate(const SharedClassifier& m,
                                  const std::vector<const ClientUpdate*>& updates) {
  if (updates.empty()) throw std::invalid_argument("no updates to aggregate");
  std::vector<const ClientUpdate*> sorted = updates;
  std::sort(sorted.begin(), sorted.end(),
            [](const ClientUpdate* a, const ClientUpdate* b) { return a->client_id < b->client_id; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i]->client_id == sorted[i - 1]->client_id) {
      throw std::invalid_argument("duplicate update from client " +
                                  std::to_string(sorted[i]->client_id));
    }
  }
  for (const auto* u : sorted) require_aligned(m.params(), u->delta, "client update");
  SharedClassifier out = m;
  const double n = double(sorted.size());
  for (auto& [name, t] : out.params()) {
    std::vector<double> acc(t.size(), 0.0);
    for (const auto* u : sorted) {
      const auto& d = u->delta.at(name);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += double(d[i]);
    }
    for (std::size_t i = 0; i < acc.size(); ++i) t[i] = float(double(t[i]) + acc[i] / n);
  }
  return out;
}

/// Requires exactly the client ids 0..N-1.
inline SharedClassifier aggregate(const SharedClassifier& m, const std::vector<ClientUpdate>& updates,
                                  int num_clients) {
  std::set<int> ids;
  std::vector<const ClientUpdate*> ptrs;
  for (const auto& u : updates) {
    if (!ids.insert(u.client_id).second) {
      throw std::invalid_argument("duplicate update from client " + std::to_string(u.client_id));
    }
    ptrs.push_back(&u);
  }
  for (int k = 0; k < num_clients; ++k) {
    if (!ids.count(k)) throw std::invalid_argument("missing update from client " + std::to_string(k));
  }
  if (int(ids.size()) != num_clients) throw std::invalid_argument("unknown client id in updates");
  return aggregate(m, ptrs);
}

/// Server-side hook. `overrides` runs before local training and may hand
/// specific clients a different model; `observe` sees the round read-only.
class RoundObserver {
 public:
  virtual ~RoundObserver() = default;
  virtual std::map<int, SharedClassifier> overrides(int /*round*/, const SharedClassifier&) {
    return {};
  }
  virtual void observe(int round, const SharedClassifier& model,
                       const std::vector<ClientUpdate>& updates) = 0;
};

/// Replaces the honest training routine of one client.
using ClientTrainer = std::function<ClientUpdate(const SharedClassifier& model,
                                                 const ClientDataset& data, int round, Rng& rng)>;

struct RoundMetrics {
  int round = 0;
  double accuracy = 0.0;
  double loss = 0.0;
};

struct FedOutput {
  std::string checkpoint_dir;  // empty: no checkpoints
  std::string accuracy_csv;    // empty: no CSV
  std::string checkpoint_prefix = "model";
};

struct FedRunOptions {
  RoundObserver* observer = nullptr;
  std::map<int, ClientTrainer> custom_clients;
  FedOutput output;
  /// Called after aggregation with (t+1, M_{t+1}); for extra per-round logs.
  std::function<void(int, const SharedClassifier&)> after_round;
  /// Checked after each round; true ends the run early.
  std::function<bool()> stop;
};

struct FedResult {
  SharedClassifier model;
  std::vector<RoundMetrics> trace;  // entry r evaluates M_r, r = 0..T
};

inline std::string checkpoint_name(const std::string& prefix, int round) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%04d.flps", round);
  return prefix + buf;
}

inline FedResult run_federated(const FedConfig& cfg, const SharedClassifier& initial,
                               const std::vector<ClientDataset>& clients,
                               const LabeledDataset& test, const FedRunOptions& opts = {}) {
  cfg.validate();
  if (int(clients.size()) != cfg.num_clients) {
    throw std::invalid_argument("expected " + std::to_string(cfg.num_clients) + " clients, got " +
                                std::to_string(clients.size()));
  }
  for (std::size_t k = 0; k < clients.size(); ++k) {
    if (clients[k].client_id != int(k)) throw std::invalid_argument("client ids must be 0..N-1");
  }
  namespace fs = std::filesystem;
  if (!opts.output.checkpoint_dir.empty()) fs::create_directories(opts.output.checkpoint_dir);
  std::optional<CsvWriter> csv;
  if (!opts.output.accuracy_csv.empty()) csv.emplace(opts.output.accuracy_csv, "round,accuracy,loss");

  FedResult res;
  res.model = initial;
  auto record = [&](int r) {
    const auto ev = evaluate(res.model, test);
    res.trace.push_back({r, ev.accuracy, ev.loss});
    if (csv) csv->row(std::to_string(r) + "," + format_real(ev.accuracy) + "," + format_real(ev.loss));
    if (!opts.output.checkpoint_dir.empty()) {
      save_params((fs::path(opts.output.checkpoint_dir) /
                   checkpoint_name(opts.output.checkpoint_prefix, r)).string(),
                  res.model.params());
    }
  };
  record(0);

  for (int t = 0; t < cfg.rounds; ++t) {
    const SharedClassifier& mt = res.model;
    std::map<int, SharedClassifier> over;
    if (opts.observer) over = opts.observer->overrides(t, mt);
    for (const auto& [k, mk] : over) {
      if (k < 0 || k >= cfg.num_clients) throw std::invalid_argument("override for unknown client");
    }

    std::vector<ClientUpdate> updates(clients.size());
    auto train_one = [&](std::size_t k) {
      Rng rng = client_rng(cfg.seed, int(k), t);
      const auto it = over.find(int(k));
      const SharedClassifier& model = it == over.end() ? mt : it->second;
      const auto custom = opts.custom_clients.find(int(k));
      updates[k] = custom != opts.custom_clients.end()
                       ? custom->second(model, clients[k], t, rng)
                       : local_train(model, clients[k], cfg.local_epochs, cfg.batch_size, cfg.sgd,
                                     rng, t);
      updates[k].client_id = int(k);
      updates[k].round = t;
    };
    if (cfg.threads <= 1) {
      for (std::size_t k = 0; k < clients.size(); ++k) train_one(k);
    } else {
      std::atomic<std::size_t> next{0};
      std::vector<std::exception_ptr> errors(clients.size());
      std::vector<std::thread> pool;
      for (int w = 0; w < cfg.threads; ++w) {
        pool.emplace_back([&] {
          for (std::size_t k = next++; k < clients.size(); k = next++) {
            try {
              train_one(k);
            } catch (...) {
              errors[k] = std::current_exception();
            }
          }
        });
      }
      for (auto& th : pool) th.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }

    if (opts.observer) opts.observer->observe(t, mt, updates);

    std::vector<const ClientUpdate*> kept;
    for (const auto& u : updates)
      if (!over.count(u.client_id)) kept.push_back(&u);
    res.model = aggregate(mt, kept);
    record(t + 1);
    if (opts.after_round) opts.after_round(t + 1, res.model);
    if (opts.stop && opts.stop()) break;
  }
  return res;
}

}  // namespace mgan
