#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "mgan/rng.hpp"
#include "mgan/tape.hpp"
#include "mgan/tensor.hpp"

namespace mgan::testing {

template <class T>
BasicTensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  BasicTensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.storage()) v = T(dist(rng));
  return t;
}

/// Keeps values at least `gap` away from zero so piecewise-linear kinks are
/// not straddled by a finite-difference probe.
template <class T>
void push_off_zero(BasicTensor<T>& t, double gap) {
  for (auto& v : t.storage()) {
    if (std::abs(double(v)) < gap) v = T(v < T(0) ? -gap : gap);
  }
}

template <class T>
double norm(const BasicTensor<T>& t) {
  double s = 0;
  for (auto v : t.storage()) s += double(v) * double(v);
  return std::sqrt(s);
}

template <class T>
double relative_error(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    diff += d * d;
  }
  const double scale = std::max({norm(a), norm(b), 1e-12});
  return std::sqrt(diff) / scale;
}

template <class T>
double relative_error(const BasicParamSet<T>& a, const BasicParamSet<T>& b) {
  double diff = 0, na = 0, nb = 0;
  for (const auto& [name, ta] : a) {
    const auto& tb = b.at(name);
    for (std::size_t i = 0; i < ta.size(); ++i) {
      const double d = double(ta[i]) - double(tb[i]);
      diff += d * d;
      na += double(ta[i]) * double(ta[i]);
      nb += double(tb[i]) * double(tb[i]);
    }
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

/// Central differences of f over every entry of `x`.
inline BasicTensor<double> fd_tensor(const std::function<double(const BasicTensor<double>&)>& f,
                                     const BasicTensor<double>& x, double step) {
  BasicTensor<double> g(x.shape());
  BasicTensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double up = f(probe);
    probe[i] = x[i] - step;
    const double down = f(probe);
    probe[i] = x[i];
    g[i] = (up - down) / (2 * step);
  }
  return g;
}

inline Tensor to_float(const BasicTensor<double>& t) {
  std::vector<float> d(t.storage().begin(), t.storage().end());
  return Tensor(t.shape(), std::move(d));
}

}  // namespace mgan::testing
