#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mgan/layers.hpp"
#include "mgan/tensor.hpp"

namespace mgan {

/// Batchnorm behaviour for one forward pass. In training mode batch
/// statistics normalize and, when `running` is set, the running averages are
/// updated in it. In inference mode the running averages are read from it.
template <class T>
struct BasicForwardOptions {
  bool training = true;
  BasicParamSet<T>* running = nullptr;
};

template <class T>
class BasicTape {
 public:
  using Node = std::size_t;

  Node leaf(BasicTensor<T> value) {
    values_.push_back(std::move(value));
    return values_.size() - 1;
  }

  const BasicTensor<T>& value(Node n) const { return values_.at(n); }
  std::size_t num_records() const { return records_.size(); }
  bool consumed() const { return consumed_; }

  struct Record {
    LayerSpec spec;
    Node in = 0;
    Node out = 0;
    std::vector<BasicTensor<T>> saved;
    bool training = true;
  };

  Node push(Record r, BasicTensor<T> out) {
    if (consumed_) throw std::logic_error("tape already consumed by backward");
    if (!out.all_finite()) {
      throw NumericalError(std::string("non-finite output from ") + to_string(r.spec.kind) +
                           (r.spec.name.empty() ? "" : " '" + r.spec.name + "'"));
    }
    r.out = leaf(std::move(out));
    records_.push_back(std::move(r));
    return records_.back().out;
  }

  const std::vector<Record>& records() const { return records_; }
  void mark_consumed() {
    if (consumed_) throw std::logic_error("tape consumed twice");
    consumed_ = true;
  }

 private:
  std::vector<BasicTensor<T>> values_;
  std::vector<Record> records_;
  bool consumed_ = false;
};

using Tape = BasicTape<float>;
using ForwardOptions = BasicForwardOptions<float>;

namespace detail {

template <class T>
BasicTensor<T> as_4d(const BasicTensor<T>& x, int channels, int side) {
  if (x.rank() == 4) return x;
  return x.reshaped({x.dim(0), std::size_t(channels), std::size_t(side), std::size_t(side)});
}

inline int label_at(float v) { return static_cast<int>(std::lround(v)); }
inline int label_at(double v) { return static_cast<int>(std::lround(v)); }
template <class T> int label_at(const Dual<T>& v) { return label_at(v.v); }

/// Logistic function kept strictly inside (0,1) at the scalar's precision.
template <class T>
T sigmoid(const T& x) {
  using V = decltype(value_of(x));
  // split keeps exp() from overflowing for large |x|
  T y;
  if (x >= T(0)) {
    y = T(1) / (T(1) + exp(-x));
  } else {
    const T e = exp(x);
    y = e / (T(1) + e);
  }
  constexpr V top = V(1) - std::numeric_limits<V>::epsilon() / V(2);
  if (value_of(y) > top) return T(top);
  if (value_of(y) < std::numeric_limits<V>::min()) return T(std::numeric_limits<V>::min());
  return y;
}

/// Channel count and per-channel element stride for batchnorm layouts.
inline std::pair<std::size_t, std::size_t> bn_layout(const Shape& s) {
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return {s[1], inner};
}

}  // namespace detail

/// Runs one layer forward and records it on the tape.
template <class T>
typename BasicTape<T>::Node apply_layer(const LayerSpec& spec, const BasicParamSet<T>& params,
                                        typename BasicTape<T>::Node input, BasicTape<T>& tape,
                                        const BasicForwardOptions<T>& opts = {}) {
  using Rec = typename BasicTape<T>::Record;
  const BasicTensor<T>& x = tape.value(input);
  const Shape out_shape = output_shape(spec, x.shape());
  BasicTensor<T> y(out_shape);
  Rec rec;
  rec.spec = spec;
  rec.in = input;
  rec.training = opts.training;

  switch (spec.kind) {
    case LayerKind::conv2d: {
      const auto& w = params.at(spec.name + ".weight");
      const auto& b = params.at(spec.name + ".bias");
      const int L = spatial_side(spec, x.shape());
      const int S = static_cast<int>(out_shape[2]);
      const auto g = kernels::conv_geometry(spec, x.dim(0), L, S);
      kernels::conv_forward(x.data().data(), w.data().data(), b.data().data(),
                            y.data().data(), g, L, S);
      rec.saved = {w};
      break;
    }
    case LayerKind::deconv2d: {
      const auto& w = params.at(spec.name + ".weight");
      const auto& b = params.at(spec.name + ".bias");
      const int S = spatial_side(spec, x.shape());
      const int L = static_cast<int>(out_shape[2]);
      const auto g = kernels::conv_geometry(spec, x.dim(0), L, S);
      kernels::deconv_forward(x.data().data(), w.data().data(), b.data().data(),
                              y.data().data(), g, S, L);
      rec.saved = {w};
      break;
    }
    case LayerKind::fully_connected: {
      const auto& w = params.at(spec.name + ".weight");
      const auto& b = params.at(spec.name + ".bias");
      kernels::fc_forward(x.data().data(), w.data().data(), b.data().data(),
                          y.data().data(), int(x.dim(0)), spec.in_channels,
                          spec.out_channels);
      rec.saved = {w};
      break;
    }
    case LayerKind::embedding: {
      const auto& w = params.at(spec.name + ".weight");
      const auto& b = params.at(spec.name + ".bias");
      const auto& cat = params.at(spec.name + ".cat_table");
      const auto& id = params.at(spec.name + ".id_table");
      const int noise = spec.in_channels, out = spec.out_channels, row = noise + 2;
      const int batch = int(x.dim(0));
      for (int n = 0; n < batch; ++n) {
        const int c = detail::label_at(x[std::size_t(n) * row + noise]);
        const int v = detail::label_at(x[std::size_t(n) * row + noise + 1]);
        if (c < 0 || c >= spec.num_classes) {
          throw std::out_of_range("category label " + std::to_string(c) + " outside [0," +
                                  std::to_string(spec.num_classes) + ")");
        }
        if (v < 0 || v > 1) {
          throw std::out_of_range("identity label " + std::to_string(v) + " not in {0,1}");
        }
        for (int o = 0; o < out; ++o) {
          T acc = b[o] + cat[std::size_t(c) * out + o] + id[std::size_t(v) * out + o];
          const T* wo = w.data().data() + std::size_t(o) * noise;
          const T* xn = x.data().data() + std::size_t(n) * row;
          for (int i = 0; i < noise; ++i) acc += wo[i] * xn[i];
          y[std::size_t(n) * out + o] = acc;
        }
      }
      rec.saved = {w};
      break;
    }
    case LayerKind::relu:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
      break;
    case LayerKind::lrelu:
      for (std::size_t i = 0; i < x.size(); ++i)
        y[i] = x[i] > T(0) ? x[i] : T(spec.slope) * x[i];
      break;
    case LayerKind::tanh:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = tanh(x[i]);
      break;
    case LayerKind::sigmoid:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = detail::sigmoid(x[i]);
      break;
    case LayerKind::softmax: {
      const std::size_t rows = x.dim(0), k = x.dim(1);
      for (std::size_t r = 0; r < rows; ++r) {
        T mx = x[r * k];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x[r * k + j]);
        T sum(0);
        for (std::size_t j = 0; j < k; ++j) {
          y[r * k + j] = exp(x[r * k + j] - mx);
          sum += y[r * k + j];
        }
        for (std::size_t j = 0; j < k; ++j) y[r * k + j] /= sum;
      }
      break;
    }
    case LayerKind::batchnorm: {
      const auto& gamma = params.at(spec.name + ".gamma");
      const auto& beta = params.at(spec.name + ".beta");
      const auto [channels, inner] = detail::bn_layout(x.shape());
      const std::size_t batch = x.dim(0);
      const std::size_t count = batch * inner;
      BasicTensor<T> xhat(x.shape());
      BasicTensor<T> inv_std({channels});
      for (std::size_t c = 0; c < channels; ++c) {
        T mean(0), var(0);
        if (opts.training) {
          for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t i = 0; i < inner; ++i) mean += x[(n * channels + c) * inner + i];
          mean /= T(double(count));
          for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t i = 0; i < inner; ++i) {
              const T d = x[(n * channels + c) * inner + i] - mean;
              var += d * d;
            }
          var /= T(double(count));
          if (opts.running) {
            auto& rm = opts.running->at(spec.name + ".running_mean");
            auto& rv = opts.running->at(spec.name + ".running_var");
            const T m(spec.bn_momentum);
            const T unbiased = count > 1 ? var * T(double(count)) / T(double(count - 1)) : var;
            rm[c] = m * rm[c] + (T(1) - m) * mean;
            rv[c] = m * rv[c] + (T(1) - m) * unbiased;
          }
        } else {
          if (!opts.running) throw std::logic_error("inference batchnorm needs running stats");
          mean = opts.running->at(spec.name + ".running_mean")[c];
          var = opts.running->at(spec.name + ".running_var")[c];
        }
        const T is = T(1) / sqrt(var + T(spec.bn_eps));
        inv_std[c] = is;
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t idx = (n * channels + c) * inner + i;
            xhat[idx] = (x[idx] - mean) * is;
            y[idx] = gamma[c] * xhat[idx] + beta[c];
          }
      }
      rec.saved = {gamma, xhat, inv_std};
      break;
    }
  }
  return tape.push(std::move(rec), std::move(y));
}

/// Gradients produced by one backward pass.
template <class T>
struct BasicGradients {
  BasicParamSet<T> params;
  std::vector<std::optional<BasicTensor<T>>> nodes;

  /// Gradient with respect to a tape node (zeros if it did not influence the loss).
  BasicTensor<T> wrt(typename BasicTape<T>::Node n, const Shape& shape) const {
    if (n < nodes.size() && nodes[n]) return *nodes[n];
    return BasicTensor<T>(shape);
  }

  /// Gradient aligned with `universe`: unused parameters get zero tensors.
  BasicParamSet<T> params_like(const BasicParamSet<T>& universe) const {
    BasicParamSet<T> out;
    for (const auto& [name, t] : universe) {
      out.set(name, params.contains(name) ? params.at(name) : BasicTensor<T>(t.shape()));
    }
    return out;
  }
};

using Gradients = BasicGradients<float>;

namespace detail {

template <class T>
void accumulate(std::optional<BasicTensor<T>>& slot, BasicTensor<T>&& g) {
  if (!slot) {
    slot = std::move(g);
    return;
  }
  if (slot->shape() != g.shape()) {
    throw ShapeError("gradient shape mismatch " + shape_str(slot->shape()) + " vs " +
                     shape_str(g.shape()));
  }
  for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
}

template <class T>
BasicTensor<T>& param_slot(BasicParamSet<T>& grads, const std::string& name,
                           const Shape& shape) {
  if (!grads.contains(name)) grads.set(name, BasicTensor<T>(shape));
  return grads.at(name);
}

}  // namespace detail

/// Reverse pass over the whole tape. `seeds` are (node, dLoss/dNode) pairs.
template <class T>
BasicGradients<T> backward(BasicTape<T>& tape,
                           const std::vector<std::pair<typename BasicTape<T>::Node,
                                                       BasicTensor<T>>>& seeds) {
  tape.mark_consumed();
  BasicGradients<T> out;
  auto& node_grads = out.nodes;
  node_grads.resize(tape.records().empty() ? 0 : tape.records().back().out + 1);
  for (const auto& [node, g] : seeds) {
    if (node >= node_grads.size()) node_grads.resize(node + 1);
    if (g.shape() != tape.value(node).shape()) {
      throw ShapeError("seed gradient shape " + shape_str(g.shape()) + " vs node " +
                       shape_str(tape.value(node).shape()));
    }
    BasicTensor<T> copy = g;
    detail::accumulate(node_grads[node], std::move(copy));
  }

  const auto& records = tape.records();
  for (auto it = records.rbegin(); it != records.rend(); ++it) {
    const auto& r = *it;
    const auto& spec = r.spec;
    const BasicTensor<T>& x = tape.value(r.in);
    const BasicTensor<T>& y = tape.value(r.out);

    // every parameter of a recorded layer gets a (possibly zero) gradient
    auto& grads = out.params;
    if (spec.kind == LayerKind::conv2d || spec.kind == LayerKind::deconv2d ||
        spec.kind == LayerKind::fully_connected || spec.kind == LayerKind::embedding) {
      detail::param_slot(grads, spec.name + ".weight", r.saved[0].shape());
      detail::param_slot(grads, spec.name + ".bias", {std::size_t(spec.out_channels)});
      if (spec.kind == LayerKind::embedding) {
        detail::param_slot(grads, spec.name + ".cat_table",
                           {std::size_t(spec.num_classes), std::size_t(spec.out_channels)});
        detail::param_slot(grads, spec.name + ".id_table",
                           {std::size_t(2), std::size_t(spec.out_channels)});
      }
    } else if (spec.kind == LayerKind::batchnorm) {
      detail::param_slot(grads, spec.name + ".gamma", {std::size_t(spec.in_channels)});
      detail::param_slot(grads, spec.name + ".beta", {std::size_t(spec.in_channels)});
    }

    if (r.out >= node_grads.size() || !node_grads[r.out]) continue;
    const BasicTensor<T>& gy = *node_grads[r.out];
    BasicTensor<T> gx(x.shape());

    switch (spec.kind) {
      case LayerKind::conv2d: {
        const int L = spatial_side(spec, x.shape());
        const int S = static_cast<int>(y.dim(2));
        const auto g = kernels::conv_geometry(spec, x.dim(0), L, S);
        auto& gw = grads.at(spec.name + ".weight");
        auto& gb = grads.at(spec.name + ".bias");
        kernels::conv_backward(x.data().data(), r.saved[0].data().data(), gy.data().data(),
                               gx.data().data(), gw.data().data(), gb.data().data(), g, L, S);
        break;
      }
      case LayerKind::deconv2d: {
        const int S = spatial_side(spec, x.shape());
        const int L = static_cast<int>(y.dim(2));
        const auto g = kernels::conv_geometry(spec, x.dim(0), L, S);
        auto& gw = grads.at(spec.name + ".weight");
        auto& gb = grads.at(spec.name + ".bias");
        kernels::deconv_backward(x.data().data(), r.saved[0].data().data(), gy.data().data(),
                                 gx.data().data(), gw.data().data(), gb.data().data(), g, S,
                                 L);
        break;
      }
      case LayerKind::fully_connected: {
        auto& gw = grads.at(spec.name + ".weight");
        auto& gb = grads.at(spec.name + ".bias");
        kernels::fc_backward(x.data().data(), r.saved[0].data().data(), gy.data().data(),
                             gx.data().data(), gw.data().data(), gb.data().data(),
                             int(x.dim(0)), spec.in_channels, spec.out_channels);
        break;
      }
      case LayerKind::embedding: {
        auto& gw = grads.at(spec.name + ".weight");
        auto& gb = grads.at(spec.name + ".bias");
        auto& gcat = grads.at(spec.name + ".cat_table");
        auto& gid = grads.at(spec.name + ".id_table");
        const auto& w = r.saved[0];
        const int noise = spec.in_channels, outc = spec.out_channels, row = noise + 2;
        for (std::size_t n = 0; n < x.dim(0); ++n) {
          const int c = detail::label_at(x[n * row + noise]);
          const int v = detail::label_at(x[n * row + noise + 1]);
          for (int o = 0; o < outc; ++o) {
            const T d = gy[n * outc + o];
            gb[o] += d;
            gcat[std::size_t(c) * outc + o] += d;
            gid[std::size_t(v) * outc + o] += d;
            for (int i = 0; i < noise; ++i) {
              gw[std::size_t(o) * noise + i] += d * x[n * row + i];
              gx[n * row + i] += d * w[std::size_t(o) * noise + i];
            }
          }
        }
        break;
      }
      case LayerKind::relu:
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] = x[i] > T(0) ? gy[i] : T(0);
        break;
      case LayerKind::lrelu:
        for (std::size_t i = 0; i < x.size(); ++i)
          gx[i] = x[i] > T(0) ? gy[i] : T(spec.slope) * gy[i];
        break;
      case LayerKind::tanh:
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] = gy[i] * (T(1) - y[i] * y[i]);
        break;
      case LayerKind::sigmoid:
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] = gy[i] * y[i] * (T(1) - y[i]);
        break;
      case LayerKind::softmax: {
        const std::size_t rows = x.dim(0), k = x.dim(1);
        for (std::size_t rr = 0; rr < rows; ++rr) {
          T dot(0);
          for (std::size_t j = 0; j < k; ++j) dot += gy[rr * k + j] * y[rr * k + j];
          for (std::size_t j = 0; j < k; ++j)
            gx[rr * k + j] = y[rr * k + j] * (gy[rr * k + j] - dot);
        }
        break;
      }
      case LayerKind::batchnorm: {
        const auto& gamma = r.saved[0];
        const auto& xhat = r.saved[1];
        const auto& inv_std = r.saved[2];
        auto& ggamma = grads.at(spec.name + ".gamma");
        auto& gbeta = grads.at(spec.name + ".beta");
        const auto [channels, inner] = detail::bn_layout(x.shape());
        const std::size_t batch = x.dim(0);
        const T count(double(batch * inner));
        for (std::size_t c = 0; c < channels; ++c) {
          T sum_g(0), sum_gx(0);
          for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (n * channels + c) * inner + i;
              sum_g += gy[idx];
              sum_gx += gy[idx] * xhat[idx];
            }
          ggamma[c] += sum_gx;
          gbeta[c] += sum_g;
          for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (n * channels + c) * inner + i;
              if (r.training) {
                gx[idx] = gamma[c] * inv_std[c] / count *
                          (count * gy[idx] - sum_g - xhat[idx] * sum_gx);
              } else {
                gx[idx] = gamma[c] * inv_std[c] * gy[idx];
              }
            }
        }
        break;
      }
    }
    if (!gx.all_finite()) {
      throw NumericalError(std::string("non-finite gradient in ") + to_string(spec.kind));
    }
    if (r.in >= node_grads.size()) node_grads.resize(r.in + 1);
    detail::accumulate(node_grads[r.in], std::move(gx));
  }
  return out;
}

template <class T>
BasicGradients<T> backward(BasicTape<T>& tape, typename BasicTape<T>::Node node,
                           const BasicTensor<T>& grad) {
  return backward(tape, {{node, grad}});
}

/// Convenience: run a chain of layers starting at `input`.
template <class T>
typename BasicTape<T>::Node apply_chain(const std::vector<LayerSpec>& chain,
                                        const BasicParamSet<T>& params,
                                        typename BasicTape<T>::Node input, BasicTape<T>& tape,
                                        const BasicForwardOptions<T>& opts = {}) {
  auto node = input;
  for (const auto& spec : chain) node = apply_layer(spec, params, node, tape, opts);
  return node;
}

/// Central-difference gradient, one coordinate at a time.
template <class T>
BasicParamSet<T> finite_diff_grad(const std::function<double(const BasicParamSet<T>&)>& f,
                                  const BasicParamSet<T>& params, double step) {
  if (!(step > 0)) throw std::invalid_argument("finite difference step must be positive");
  BasicParamSet<T> grad = params.zeros_like();
  BasicParamSet<T> probe = params;
  for (auto& [name, t] : probe) {
    auto& g = grad.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const T orig = t[i];
      t[i] = orig + T(step);
      const double up = f(probe);
      t[i] = orig - T(step);
      const double down = f(probe);
      t[i] = orig;
      g[i] = T((up - down) / (2.0 * step));
    }
  }
  return grad;
}

}  // namespace mgan
