#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

#include "mgan/fed.hpp"
#include "mgan/optim.hpp"
#include "mgan/rng.hpp"

namespace mgan {

struct InversionConfig {
  double gamma = 0.0;  // <= 0: caller derives lr * local steps
  double lambda = 0.00015;
  double beta = 1.25;
  int representatives = 8;
  int classes_per_client = 3;
  float lower = -1.0f;
  float upper = 1.0f;
  bool warm_start = true;
  BoxLbfgsConfig lbfgs{10, -1.0f, 1.0f, 60, 1e-7, 1e-6};

  void validate() const {
    if (!(lambda >= 0)) throw std::invalid_argument("lambda must be >= 0");
    if (!(beta > 0)) throw std::invalid_argument("beta must be > 0");
    if (representatives < 1) throw std::invalid_argument("representatives must be >= 1");
    if (classes_per_client < 1) throw std::invalid_argument("classes per client must be >= 1");
    if (!(lower < upper)) throw std::invalid_argument("inversion box requires lower < upper");
  }
};

struct RepresentativeBatch {
  int client_id = 0;
  Tensor images;
  std::vector<int> labels;
  double residual = 0.0;          // gradient-match term at the result
  double initial_residual = 0.0;  // same term at the starting point
  int iterations = 0;
};

/// Classes whose category-head bias moved up. Cross-entropy descent raises the
/// bias of classes present in the batch (delta = lr * (frequency - mean
/// probability)), so the largest positive components are taken, at most
/// `max_classes` of them.
inline std::vector<int> infer_client_labels(const ClientUpdate& u, int max_classes) {
  const std::string name = std::string(kHeadCat) + ".bias";
  if (!u.delta.contains(name)) throw ShapeError("update lacks '" + name + "'");
  const Tensor& b = u.delta.at(name);
  std::vector<int> idx(b.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int x, int y) { return b[x] > b[y]; });
  std::vector<int> out;
  for (int i : idx) {
    if (int(out.size()) >= max_classes || !(b[i] > 0.0f)) break;
    out.push_back(i);
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// R labels spread evenly over `classes`, lower classes first on ties.
inline std::vector<int> assign_labels(const std::vector<int>& classes, int count) {
  std::vector<int> sorted = classes;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> out;
  const int k = int(sorted.size());
  for (int j = 0; j < k; ++j) {
    const int n = count / k + (j < count % k ? 1 : 0);
    out.insert(out.end(), std::size_t(n), sorted[std::size_t(j)]);
  }
  return out;
}

template <class T>
struct BasicMatchResult {
  double loss = 0.0;
  BasicTensor<T> grad;  // d loss / d X
};

/// ||u + gamma * dL(X)/dtheta||^2 and its gradient with respect to X.
///
/// The X-gradient is 2 gamma (d^2 L / dX dtheta) r with r = u + gamma g. It is
/// the tangent of dL/dX under a forward-mode perturbation of theta along r, so
/// the backward pass is re-run with dual-number parameters carrying r.
template <class T>
BasicMatchResult<T> gradient_match_loss(const BasicTensor<T>& x, const std::vector<int>& labels,
                                        const BasicParamSet<T>& u, const ArchitectureSpec& arch,
                                        const BasicParamSet<T>& theta, double gamma) {
  require_aligned(theta, u, "update");
  const auto g = classifier_gradient(arch, theta, x, labels);
  BasicParamSet<T> r;
  double loss = 0.0;
  for (const auto& [name, ut] : u) {
    const auto& gt = g.params.at(name);
    BasicTensor<T> rt(ut.shape());
    for (std::size_t i = 0; i < rt.size(); ++i) {
      rt[i] = ut[i] + T(gamma) * gt[i];
      loss += double(rt[i]) * double(rt[i]);
    }
    r.set(name, std::move(rt));
  }
  if (!std::isfinite(loss)) throw NumericalError("non-finite gradient-match loss");
  BasicMatchResult<T> out{loss, BasicTensor<T>(x.shape())};
  if (gamma == 0.0) return out;

  using D = Dual<T>;
  BasicParamSet<D> pd;
  for (const auto& [name, t] : theta) {
    const auto& rt = r.at(name);
    BasicTensor<D> dt(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) dt[i] = D{t[i], rt[i]};
    pd.set(name, std::move(dt));
  }
  BasicTensor<D> xd(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) xd[i] = D{x[i], T(0)};
  const auto gd = classifier_gradient(arch, pd, xd, labels);
  for (std::size_t i = 0; i < x.size(); ++i) {
    out.grad[i] = T(2.0 * gamma) * gd.input[i].d;
    if (!is_finite(out.grad[i])) throw NumericalError("non-finite gradient-match gradient");
  }
  return out;
}

inline BasicMatchResult<float> gradient_match_loss(const Tensor& x, const std::vector<int>& labels,
                                                   const ClientUpdate& u,
                                                   const SharedClassifier& m, double gamma) {
  return gradient_match_loss<float>(x, labels, u.delta, m.arch(), m.params(), gamma);
}

/// Sum over images and pixels of ((x[i][j+1]-x[i][j])^2 + (x[i+1][j]-x[i][j])^2)^beta;
/// differences past the last row/column are zero.
template <class T>
BasicMatchResult<T> tv_loss(const BasicTensor<T>& x, double beta) {
  if (x.rank() != 4 || x.dim(2) < 2 || x.dim(3) < 2) {
    throw ShapeError("total variation needs [N,C,H,W] with H,W >= 2, got " + shape_str(x.shape()));
  }
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  BasicMatchResult<T> out{0.0, BasicTensor<T>(x.shape())};
  for (std::size_t p = 0; p < planes; ++p) {
    const T* a = x.data().data() + p * h * w;
    T* g = out.grad.data().data() + p * h * w;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const double c = double(a[i * w + j]);
        const double dx = j + 1 < w ? double(a[i * w + j + 1]) - c : 0.0;
        const double dy = i + 1 < h ? double(a[(i + 1) * w + j]) - c : 0.0;
        const double s = dx * dx + dy * dy;
        if (s <= 0.0) continue;
        out.loss += std::pow(s, beta);
        const double k = 2.0 * beta * std::pow(s, beta - 1.0);
        if (j + 1 < w) g[i * w + j + 1] += T(k * dx);
        if (i + 1 < h) g[(i + 1) * w + j] += T(k * dy);
        g[i * w + j] -= T(k * (dx + dy));
      }
    }
  }
  return out;
}

/// Minimizes ||u - u_X||^2 + lambda * TV(X) over the box with projected
/// L-BFGS. `init` (same shape) replaces the uniform-noise start; `labels`
/// replaces inference from the bias delta.
inline RepresentativeBatch compute_representatives(
    const ClientUpdate& u, const SharedClassifier& m, const InversionConfig& cfg, Rng& rng,
    const std::optional<Tensor>& init = std::nullopt,
    const std::optional<std::vector<int>>& labels = std::nullopt) {
  cfg.validate();
  RepresentativeBatch rep;
  rep.client_id = u.client_id;
  if (labels) {
    rep.labels = *labels;
  } else {
    auto classes = infer_client_labels(u, cfg.classes_per_client);
    if (classes.empty()) classes = {0};
    rep.labels = assign_labels(classes, cfg.representatives);
  }
  for (int l : rep.labels) {
    if (l < 0 || l >= m.arch().num_classes) throw std::out_of_range("representative label");
  }
  const Shape shape = m.arch().image_shape(rep.labels.size());
  Tensor x0(shape);
  if (init && init->shape() == shape) {
    x0 = *init;
  } else {
    for (auto& v : x0.storage()) v = uniform(rng, cfg.lower, cfg.upper);
  }

  const double gamma = cfg.gamma;
  double last_match = 0.0;
  const Objective f = [&](const Tensor& x, Tensor& grad) {
    const auto match = gradient_match_loss(x, rep.labels, u, m, gamma);
    last_match = match.loss;
    grad = match.grad;
    double value = match.loss;
    if (cfg.lambda > 0) {
      const auto tv = tv_loss(x, cfg.beta);
      value += cfg.lambda * tv.loss;
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += float(cfg.lambda * tv.grad[i]);
    }
    return value;
  };
  BoxLbfgsConfig lb = cfg.lbfgs;
  lb.lower = cfg.lower;
  lb.upper = cfg.upper;
  Tensor scratch(shape);
  f(x0, scratch);
  rep.initial_residual = last_match;
  const auto res = lbfgs_minimize(f, x0, lb);
  rep.images = res.x;
  rep.iterations = res.iterations;
  rep.residual = gradient_match_loss(res.x, rep.labels, u, m, gamma).loss;
  return rep;
}

}  // namespace mgan
