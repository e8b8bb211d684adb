#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mgan/tensor.hpp"

namespace mgan {

enum class LayerKind {
  conv2d,
  deconv2d,
  fully_connected,
  relu,
  lrelu,
  tanh,
  sigmoid,
  softmax,
  batchnorm,
  embedding,
};

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::deconv2d: return "deconv2d";
    case LayerKind::fully_connected: return "fully-connected";
    case LayerKind::relu: return "relu";
    case LayerKind::lrelu: return "lrelu";
    case LayerKind::tanh: return "tanh";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::softmax: return "softmax";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::embedding: return "embedding";
  }
  return "?";
}

/// One layer of a network.
///
/// Channel fields are reused by the dense kinds: for fully-connected they are
/// the input/output feature counts, for batchnorm `in_channels` is the number
/// of normalized channels, and for embedding `in_channels` is the noise length
/// while `num_classes` sizes the category table. An embedding input row is
/// `[noise..., category, identity]`.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::string name;
  int kernel_h = 0;
  int kernel_w = 0;
  int stride = 0;
  int in_channels = 0;
  int out_channels = 0;
  /// deconv2d only: output spatial size; 0 means input size times stride.
  int out_size = 0;
  float slope = 0.2f;
  int num_classes = 0;
  float bn_eps = 1e-5f;
  float bn_momentum = 0.9f;

  bool is_spatial() const {
    return kind == LayerKind::conv2d || kind == LayerKind::deconv2d;
  }
  bool has_params() const {
    return is_spatial() || kind == LayerKind::fully_connected ||
           kind == LayerKind::batchnorm || kind == LayerKind::embedding;
  }
};

namespace layer {

inline LayerSpec conv(std::string name, int in_ch, int out_ch, int kernel, int stride) {
  LayerSpec s;
  s.kind = LayerKind::conv2d;
  s.name = std::move(name);
  s.in_channels = in_ch;
  s.out_channels = out_ch;
  s.kernel_h = s.kernel_w = kernel;
  s.stride = stride;
  return s;
}
inline LayerSpec deconv(std::string name, int in_ch, int out_ch, int kernel, int stride,
                        int out_size = 0) {
  LayerSpec s = conv(std::move(name), in_ch, out_ch, kernel, stride);
  s.kind = LayerKind::deconv2d;
  s.out_size = out_size;
  return s;
}
inline LayerSpec fc(std::string name, int in, int out) {
  LayerSpec s;
  s.kind = LayerKind::fully_connected;
  s.name = std::move(name);
  s.in_channels = in;
  s.out_channels = out;
  return s;
}
inline LayerSpec batchnorm(std::string name, int channels) {
  LayerSpec s;
  s.kind = LayerKind::batchnorm;
  s.name = std::move(name);
  s.in_channels = s.out_channels = channels;
  return s;
}
inline LayerSpec embedding(std::string name, int noise_len, int num_classes, int out) {
  LayerSpec s;
  s.kind = LayerKind::embedding;
  s.name = std::move(name);
  s.in_channels = noise_len;
  s.num_classes = num_classes;
  s.out_channels = out;
  return s;
}
inline LayerSpec activation(LayerKind kind, float slope = 0.2f) {
  LayerSpec s;
  s.kind = kind;
  s.slope = slope;
  return s;
}

}  // namespace layer

/// Throws ShapeError if the spec's own fields are inconsistent.
inline void validate(const LayerSpec& s) {
  const bool has_kernel = s.kernel_h > 0 || s.kernel_w > 0 || s.stride > 0;
  if (s.is_spatial()) {
    if (s.kernel_h <= 0 || s.kernel_w <= 0 || s.stride <= 0) {
      throw ShapeError(std::string(to_string(s.kind)) + " '" + s.name +
                       "' needs kernel and stride");
    }
  } else if (has_kernel) {
    throw ShapeError(std::string(to_string(s.kind)) + " '" + s.name +
                     "' must not carry kernel/stride");
  }
  if (s.has_params() && (s.in_channels <= 0 || s.out_channels <= 0)) {
    throw ShapeError("layer '" + s.name + "' needs positive channel counts");
  }
  if (s.has_params() && s.name.empty()) {
    throw ShapeError(std::string(to_string(s.kind)) + " layer needs a parameter name");
  }
  if (s.kind == LayerKind::embedding && s.num_classes <= 0) {
    throw ShapeError("embedding '" + s.name + "' needs num_classes");
  }
}

/// Padding before/after along one axis for a stride-s conv mapping `in` to
/// ceil(in/s); stride 1 gives "same" padding.
struct Padding {
  int before = 0;
  int after = 0;
};

inline Padding conv_padding(int in, int out, int kernel, int stride) {
  const int total = std::max((out - 1) * stride + kernel - in, 0);
  return {total / 2, total - total / 2};
}

inline int conv_out_size(int in, int stride) { return (in + stride - 1) / stride; }

/// Spatial side of a conv/deconv input; flat [B, C*S*S] inputs are read as
/// square maps.
inline int spatial_side(const LayerSpec& s, const Shape& in) {
  if (in.size() == 4) {
    if (static_cast<int>(in[1]) != s.in_channels || in[2] != in[3]) {
      throw ShapeError("layer '" + s.name + "' expects " +
                       std::to_string(s.in_channels) + " square channels, got " +
                       shape_str(in));
    }
    return static_cast<int>(in[2]);
  }
  if (in.size() == 2) {
    const auto per = in[1] / static_cast<std::size_t>(s.in_channels);
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(double(per))));
    if (per * s.in_channels != in[1] || side * side != per) {
      throw ShapeError("layer '" + s.name + "' cannot read " + shape_str(in) +
                       " as square map with " + std::to_string(s.in_channels) +
                       " channels");
    }
    return static_cast<int>(side);
  }
  throw ShapeError("layer '" + s.name + "' got rank-" + std::to_string(in.size()) +
                   " input");
}

inline int deconv_out_side(const LayerSpec& s, int in_side) {
  return s.out_size > 0 ? s.out_size : in_side * s.stride;
}

/// Output shape as a pure function of input shape and spec.
inline Shape output_shape(const LayerSpec& s, const Shape& in) {
  validate(s);
  if (in.empty()) throw ShapeError("empty input shape");
  const std::size_t batch = in[0];
  const std::size_t features = shape_numel(in) / std::max<std::size_t>(batch, 1);
  switch (s.kind) {
    case LayerKind::conv2d: {
      const int side = spatial_side(s, in);
      const int out = conv_out_size(side, s.stride);
      return {batch, std::size_t(s.out_channels), std::size_t(out), std::size_t(out)};
    }
    case LayerKind::deconv2d: {
      const int side = spatial_side(s, in);
      const int out = deconv_out_side(s, side);
      const Padding pad = conv_padding(out, side, s.kernel_h, s.stride);
      if ((out + pad.before + pad.after - s.kernel_h) / s.stride + 1 != side) {
        throw ShapeError("deconv '" + s.name + "' output " + std::to_string(out) +
                         " does not stride back to " + std::to_string(side));
      }
      return {batch, std::size_t(s.out_channels), std::size_t(out), std::size_t(out)};
    }
    case LayerKind::fully_connected:
      if (features != std::size_t(s.in_channels)) {
        throw ShapeError("fc '" + s.name + "' expects " + std::to_string(s.in_channels) +
                         " features, got " + shape_str(in));
      }
      return {batch, std::size_t(s.out_channels)};
    case LayerKind::embedding:
      if (in.size() != 2 || in[1] != std::size_t(s.in_channels + 2)) {
        throw ShapeError("embedding '" + s.name + "' expects [B," +
                         std::to_string(s.in_channels + 2) + "], got " + shape_str(in));
      }
      return {batch, std::size_t(s.out_channels)};
    case LayerKind::batchnorm:
      if (in.size() < 2 || in[1] != std::size_t(s.in_channels)) {
        throw ShapeError("batchnorm '" + s.name + "' expects " +
                         std::to_string(s.in_channels) + " channels, got " + shape_str(in));
      }
      return in;
    case LayerKind::softmax:
      if (in.size() != 2) throw ShapeError("softmax expects [B,K], got " + shape_str(in));
      return in;
    default:
      return in;
  }
}

namespace kernels {

struct ConvGeometry {
  int batch, in_ch, out_ch, in_side, out_side, kh, kw, stride;
  Padding pad_y, pad_x;
};

/// Geometry of the strided conv that maps the large grid to the small one.
inline ConvGeometry conv_geometry(const LayerSpec& s, std::size_t batch, int large,
                                  int small) {
  ConvGeometry g{};
  g.batch = static_cast<int>(batch);
  g.in_ch = s.in_channels;
  g.out_ch = s.out_channels;
  g.kh = s.kernel_h;
  g.kw = s.kernel_w;
  g.stride = s.stride;
  g.pad_y = conv_padding(large, small, s.kernel_h, s.stride);
  g.pad_x = conv_padding(large, small, s.kernel_w, s.stride);
  return g;
}

/// Visits every (large pixel, small pixel, ky, kx) contact of a strided conv.
/// `fn(large_index_y, large_index_x, small_y, small_x, ky, kx)`.
template <class Fn>
inline void for_each_contact(int large, int small, const ConvGeometry& g, Fn&& fn) {
  for (int ky = 0; ky < g.kh; ++ky) {
    for (int kx = 0; kx < g.kw; ++kx) {
      for (int sy = 0; sy < small; ++sy) {
        const int ly = sy * g.stride + ky - g.pad_y.before;
        if (ly < 0 || ly >= large) continue;
        for (int sx = 0; sx < small; ++sx) {
          const int lx = sx * g.stride + kx - g.pad_x.before;
          if (lx < 0 || lx >= large) continue;
          fn(ly, lx, sy, sx, ky, kx);
        }
      }
    }
  }
}

// Conv: input grid is large (side L), output grid small (side S).
// weight [Co, Ci, kh, kw].
template <class T>
void conv_forward(const T* x, const T* w, const T* b, T* y, const ConvGeometry& g,
                  int L, int S) {
  const int LL = L * L, SS = S * S;
  for (int n = 0; n < g.batch; ++n) {
    for (int co = 0; co < g.out_ch; ++co) {
      T* yo = y + (std::size_t(n) * g.out_ch + co) * SS;
      for (int i = 0; i < SS; ++i) yo[i] = b[co];
      for (int ci = 0; ci < g.in_ch; ++ci) {
        const T* xi = x + (std::size_t(n) * g.in_ch + ci) * LL;
        const T* wk = w + (std::size_t(co) * g.in_ch + ci) * g.kh * g.kw;
        for_each_contact(L, S, g, [&](int ly, int lx, int sy, int sx, int ky, int kx) {
          yo[sy * S + sx] += wk[ky * g.kw + kx] * xi[ly * L + lx];
        });
      }
    }
  }
}

template <class T>
void conv_backward(const T* x, const T* w, const T* gy, T* gx, T* gw, T* gb,
                   const ConvGeometry& g, int L, int S) {
  const int LL = L * L, SS = S * S;
  for (int n = 0; n < g.batch; ++n) {
    for (int co = 0; co < g.out_ch; ++co) {
      const T* go = gy + (std::size_t(n) * g.out_ch + co) * SS;
      for (int i = 0; i < SS; ++i) gb[co] += go[i];
      for (int ci = 0; ci < g.in_ch; ++ci) {
        const T* xi = x + (std::size_t(n) * g.in_ch + ci) * LL;
        T* gxi = gx + (std::size_t(n) * g.in_ch + ci) * LL;
        const T* wk = w + (std::size_t(co) * g.in_ch + ci) * g.kh * g.kw;
        T* gwk = gw + (std::size_t(co) * g.in_ch + ci) * g.kh * g.kw;
        for_each_contact(L, S, g, [&](int ly, int lx, int sy, int sx, int ky, int kx) {
          const T& d = go[sy * S + sx];
          gwk[ky * g.kw + kx] += d * xi[ly * L + lx];
          gxi[ly * L + lx] += d * wk[ky * g.kw + kx];
        });
      }
    }
  }
}

// Deconv is the adjoint of a conv from the large output grid (side L) to the
// small input grid (side S). weight [Ci, Co, kh, kw].
template <class T>
void deconv_forward(const T* x, const T* w, const T* b, T* y, const ConvGeometry& g,
                    int S, int L) {
  const int LL = L * L, SS = S * S;
  for (int n = 0; n < g.batch; ++n) {
    for (int co = 0; co < g.out_ch; ++co) {
      T* yo = y + (std::size_t(n) * g.out_ch + co) * LL;
      for (int i = 0; i < LL; ++i) yo[i] = b[co];
      for (int ci = 0; ci < g.in_ch; ++ci) {
        const T* xi = x + (std::size_t(n) * g.in_ch + ci) * SS;
        const T* wk = w + (std::size_t(ci) * g.out_ch + co) * g.kh * g.kw;
        for_each_contact(L, S, g, [&](int ly, int lx, int sy, int sx, int ky, int kx) {
          yo[ly * L + lx] += wk[ky * g.kw + kx] * xi[sy * S + sx];
        });
      }
    }
  }
}

template <class T>
void deconv_backward(const T* x, const T* w, const T* gy, T* gx, T* gw, T* gb,
                     const ConvGeometry& g, int S, int L) {
  const int LL = L * L, SS = S * S;
  for (int n = 0; n < g.batch; ++n) {
    for (int co = 0; co < g.out_ch; ++co) {
      const T* go = gy + (std::size_t(n) * g.out_ch + co) * LL;
      for (int i = 0; i < LL; ++i) gb[co] += go[i];
      for (int ci = 0; ci < g.in_ch; ++ci) {
        const T* xi = x + (std::size_t(n) * g.in_ch + ci) * SS;
        T* gxi = gx + (std::size_t(n) * g.in_ch + ci) * SS;
        const T* wk = w + (std::size_t(ci) * g.out_ch + co) * g.kh * g.kw;
        T* gwk = gw + (std::size_t(ci) * g.out_ch + co) * g.kh * g.kw;
        for_each_contact(L, S, g, [&](int ly, int lx, int sy, int sx, int ky, int kx) {
          const T& d = go[ly * L + lx];
          gwk[ky * g.kw + kx] += d * xi[sy * S + sx];
          gxi[sy * S + sx] += d * wk[ky * g.kw + kx];
        });
      }
    }
  }
}

// y[n, o] = b[o] + sum_i w[o, i] x[n, i]
template <class T>
void fc_forward(const T* x, const T* w, const T* b, T* y, int batch, int in, int out) {
  for (int n = 0; n < batch; ++n) {
    const T* xn = x + std::size_t(n) * in;
    for (int o = 0; o < out; ++o) {
      const T* wo = w + std::size_t(o) * in;
      T acc = b[o];
      for (int i = 0; i < in; ++i) acc += wo[i] * xn[i];
      y[std::size_t(n) * out + o] = acc;
    }
  }
}

template <class T>
void fc_backward(const T* x, const T* w, const T* gy, T* gx, T* gw, T* gb, int batch,
                 int in, int out) {
  for (int n = 0; n < batch; ++n) {
    const T* xn = x + std::size_t(n) * in;
    T* gxn = gx + std::size_t(n) * in;
    for (int o = 0; o < out; ++o) {
      const T d = gy[std::size_t(n) * out + o];
      gb[o] += d;
      const T* wo = w + std::size_t(o) * in;
      T* gwo = gw + std::size_t(o) * in;
      for (int i = 0; i < in; ++i) {
        gwo[i] += d * xn[i];
        gxn[i] += d * wo[i];
      }
    }
  }
}

}  // namespace kernels
}  // namespace mgan
