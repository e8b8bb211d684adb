#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <stdexcept>
#include <vector>

#include "mgan/tensor.hpp"

namespace mgan {

struct SgdConfig {
  float learning_rate = 0.002f;
};

/// theta - lr * g
inline ParamSet sgd_step(const ParamSet& params, const ParamSet& grads, const SgdConfig& cfg) {
  if (!std::isfinite(cfg.learning_rate)) throw std::invalid_argument("non-finite learning rate");
  return axpy(params, grads, -cfg.learning_rate);
}

struct AdamState {
  float learning_rate = 0.0002f;
  float beta1 = 0.5f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
  ParamSet first;
  ParamSet second;
  long step = 0;
};

inline AdamState make_adam(const ParamSet& params, float lr = 0.0002f, float beta1 = 0.5f,
                           float beta2 = 0.999f, float eps = 1e-8f) {
  AdamState s;
  s.learning_rate = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.epsilon = eps;
  s.first = params.zeros_like();
  s.second = params.zeros_like();
  return s;
}

/// Bias-corrected Adam; advances `state`.
inline ParamSet adam_step(const ParamSet& params, const ParamSet& grads, AdamState& state) {
  require_aligned(params, grads, "adam grads");
  require_aligned(params, state.first, "adam state");
  state.step += 1;
  const double c1 = 1.0 - std::pow(double(state.beta1), double(state.step));
  const double c2 = 1.0 - std::pow(double(state.beta2), double(state.step));
  ParamSet out = params;
  for (auto& [name, t] : out) {
    const auto& g = grads.at(name);
    auto& m = state.first.at(name);
    auto& v = state.second.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0f - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0f - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      t[i] = float(t[i] - state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
  return out;
}

struct BoxLbfgsConfig {
  int history = 10;
  float lower = -1.0f;
  float upper = 1.0f;
  int max_iterations = 300;
  double grad_tolerance = 1e-5;
  /// Stop when the relative objective decrease of a step falls below this.
  double f_rel_tolerance = 0.0;
  double armijo_c = 1e-4;
  double shrink = 0.5;
  int max_backtracks = 20;

  void validate() const {
    if (!(lower < upper)) throw std::invalid_argument("box requires lower < upper");
    if (history < 1) throw std::invalid_argument("history must be >= 1");
  }
};

/// f(x) with gradient written into `grad` (same shape as x).
using Objective = std::function<double(const Tensor& x, Tensor& grad)>;

struct LbfgsResult {
  Tensor x;
  double value = 0.0;
  double initial_value = 0.0;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

/// Projected L-BFGS on the box [lower, upper]^n. Iterates are projected after
/// every line-search trial; coordinates pinned at a bound with the gradient
/// pointing out are frozen, and the curvature history is dropped whenever
/// that set changes.
inline LbfgsResult lbfgs_minimize(const Objective& objective, const Tensor& x0,
                                  const BoxLbfgsConfig& cfg) {
  cfg.validate();
  const std::size_t n = x0.size();
  const float lo = cfg.lower, hi = cfg.upper;
  auto project = [&](Tensor& x) {
    for (auto& v : x.storage()) v = std::clamp(v, lo, hi);
  };
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };

  LbfgsResult res;
  Tensor x = x0;
  project(x);
  Tensor g(x.shape());
  double f = objective(x, g);
  res.evaluations = 1;
  if (!std::isfinite(f) || !g.all_finite()) {
    throw NumericalError("objective non-finite at the initial point");
  }
  res.initial_value = f;

  std::deque<std::vector<double>> s_hist, y_hist;
  std::deque<double> rho_hist;
  std::vector<char> active(n, 0), prev_active(n, 0);

  for (int iter = 0; iter < cfg.max_iterations; ++iter) {
    double pg_inf = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool at_lo = x[i] <= lo && g[i] > 0;
      const bool at_hi = x[i] >= hi && g[i] < 0;
      active[i] = at_lo || at_hi;
      if (!active[i]) pg_inf = std::max(pg_inf, std::abs(double(g[i])));
    }
    if (pg_inf < cfg.grad_tolerance) {
      res.converged = true;
      break;
    }
    if (active != prev_active) {
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      prev_active = active;
    }

    std::vector<double> q(n);
    for (std::size_t i = 0; i < n; ++i) q[i] = active[i] ? 0.0 : double(g[i]);

    std::vector<double> d = q;
    {
      const std::size_t m = s_hist.size();
      std::vector<double> alpha(m);
      for (std::size_t k = m; k-- > 0;) {
        alpha[k] = rho_hist[k] * dot(s_hist[k], d);
        for (std::size_t i = 0; i < n; ++i) d[i] -= alpha[k] * y_hist[k][i];
      }
      if (m > 0) {
        const double gamma = dot(s_hist.back(), y_hist.back()) / dot(y_hist.back(), y_hist.back());
        for (auto& v : d) v *= gamma;
      }
      for (std::size_t k = 0; k < m; ++k) {
        const double beta = rho_hist[k] * dot(y_hist[k], d);
        for (std::size_t i = 0; i < n; ++i) d[i] += s_hist[k][i] * (alpha[k] - beta);
      }
      for (std::size_t i = 0; i < n; ++i) d[i] = active[i] ? 0.0 : -d[i];
    }
    double slope = 0.0;
    for (std::size_t i = 0; i < n; ++i) slope += d[i] * g[i];
    if (!(slope < 0.0)) {
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      for (std::size_t i = 0; i < n; ++i) d[i] = -q[i];
    }

    double step = 1.0;
    if (s_hist.empty()) {
      double dmax = 0.0;
      for (double v : d) dmax = std::max(dmax, std::abs(v));
      step = std::min(1.0, 1.0 / std::max(dmax, 1e-300));
    }

    Tensor x_new(x.shape());
    Tensor g_new(x.shape());
    double f_new = 0.0;
    bool accepted = false;
    for (int bt = 0; bt <= cfg.max_backtracks; ++bt) {
      for (std::size_t i = 0; i < n; ++i) x_new[i] = float(double(x[i]) + step * d[i]);
      project(x_new);
      double decrease = 0.0;
      for (std::size_t i = 0; i < n; ++i) decrease += double(g[i]) * (double(x_new[i]) - x[i]);
      f_new = objective(x_new, g_new);
      res.evaluations += 1;
      if (std::isfinite(f_new) && g_new.all_finite() &&
          f_new <= f + cfg.armijo_c * decrease && decrease < 0.0) {
        accepted = true;
        break;
      }
      step *= cfg.shrink;
    }
    res.iterations = iter + 1;
    if (!accepted) {
      if (!s_hist.empty()) {
        s_hist.clear();
        y_hist.clear();
        rho_hist.clear();
        continue;
      }
      break;
    }

    std::vector<double> s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = double(x_new[i]) - x[i];
      y[i] = double(g_new[i]) - g[i];
      if (active[i]) s[i] = y[i] = 0.0;
    }
    const double sy = dot(s, y);
    if (sy > 1e-12 * std::sqrt(dot(s, s) * dot(y, y)) && sy > 0.0) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
      if (int(s_hist.size()) > cfg.history) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    const double rel = (f - f_new) / std::max({std::abs(f), std::abs(f_new), 1e-300});
    x = std::move(x_new);
    g = std::move(g_new);
    f = f_new;
    if (cfg.f_rel_tolerance > 0.0 && rel < cfg.f_rel_tolerance) break;
  }
  res.x = std::move(x);
  res.value = f;
  return res;
}

}  // namespace mgan
