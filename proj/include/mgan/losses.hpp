#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "mgan/tape.hpp"
#include "mgan/tensor.hpp"

namespace mgan {

inline constexpr double kProbFloor = 1e-7;

template <class T>
struct BasicLossGrad {
  T loss{};
  BasicTensor<T> grad;  // d loss / d logits
};

/// Mean softmax cross-entropy of logits [B,C] against integer labels.
template <class T>
BasicLossGrad<T> softmax_cross_entropy(const BasicTensor<T>& logits,
                                       const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || labels.empty()) {
    throw ShapeError("cross-entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  BasicLossGrad<T> out{T(0), BasicTensor<T>(logits.shape())};
  const T inv_b = T(1) / T(double(b));
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] < 0 || std::size_t(labels[r]) >= k) {
      throw std::out_of_range("label " + std::to_string(labels[r]) + " outside [0," +
                              std::to_string(k) + ")");
    }
    T mx = logits[r * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits[r * k + j]);
    T sum(0);
    for (std::size_t j = 0; j < k; ++j) {
      out.grad[r * k + j] = exp(logits[r * k + j] - mx);
      sum += out.grad[r * k + j];
    }
    const T log_sum = log(sum) + mx;
    out.loss += (log_sum - logits[r * k + labels[r]]) * inv_b;
    for (std::size_t j = 0; j < k; ++j) {
      T p = out.grad[r * k + j] / sum;
      if (int(j) == labels[r]) p -= T(1);
      out.grad[r * k + j] = p * inv_b;
    }
  }
  return out;
}

/// Mean binary cross-entropy of sigmoid(logits) against targets in {0,1}.
/// Probabilities are clamped to [1e-7, 1-1e-7] before the log; clamped rows
/// contribute no gradient.
template <class T>
BasicLossGrad<T> sigmoid_bce(const BasicTensor<T>& logits, const std::vector<float>& targets) {
  if (logits.size() != targets.size() || targets.empty()) {
    throw ShapeError("bce: " + std::to_string(logits.size()) + " logits vs " +
                     std::to_string(targets.size()) + " targets");
  }
  BasicLossGrad<T> out{T(0), BasicTensor<T>(logits.shape())};
  double total = 0.0;
  const double inv_n = 1.0 / double(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double z = double(logits[i]);
    const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    const double pc = std::clamp(p, kProbFloor, 1.0 - kProbFloor);
    const double y = targets[i];
    total -= (y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc)) * inv_n;
    const bool clamped = pc != p;
    out.grad[i] = clamped ? T(0) : T((p - y) * inv_n);
  }
  out.loss = T(total);
  return out;
}

/// Mean of log(sigmoid(z)) (target 1) or log(1 - sigmoid(z)) (target 0), with
/// the same clamp. This is the log-likelihood form used in reports.
inline double mean_log_likelihood(const Tensor& logits, float target) {
  std::vector<float> t(logits.size(), target);
  return -double(sigmoid_bce(logits, t).loss);
}

}  // namespace mgan
