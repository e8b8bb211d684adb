#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "mgan/layers.hpp"
#include "mgan/rng.hpp"
#include "mgan/tape.hpp"
#include "mgan/tensor.hpp"

namespace mgan {

inline constexpr const char* kTrunkPrefix = "trunk.";
inline constexpr const char* kHeadCat = "head_cat";
inline constexpr const char* kHeadReal = "head_real";
inline constexpr const char* kHeadId = "head_id";

/// Shapes of the classifier trunk, the three heads and the generator chain.
struct ArchitectureSpec {
  int height = 16;
  int width = 16;
  int channels = 1;
  int num_classes = 10;
  std::vector<LayerSpec> trunk;
  std::vector<LayerSpec> generator;
  int noise_length = 100;
  int embed_length = 100;

  Shape image_shape(std::size_t batch) const {
    return {batch, std::size_t(channels), std::size_t(height), std::size_t(width)};
  }
  std::size_t image_numel() const { return std::size_t(channels) * height * width; }

  /// Flattened length of the trunk output.
  std::size_t trunk_features() const {
    Shape s = image_shape(1);
    for (const auto& l : trunk) s = output_shape(l, s);
    return shape_numel(s);
  }

  LayerSpec head(const char* name, int out) const {
    return layer::fc(name, int(trunk_features()), out);
  }

  /// Throws ShapeError if the shape chains do not line up.
  void validate() const {
    if (height != width) throw ShapeError("only square inputs are supported");
    if (num_classes < 2) throw ShapeError("need at least two classes");
    if (trunk.empty()) throw ShapeError("empty trunk");
    for (const auto& l : trunk) {
      if (!l.name.empty() && l.name.rfind(kTrunkPrefix, 0) != 0) {
        throw ShapeError("trunk layer '" + l.name + "' must be named trunk.*");
      }
    }
    (void)trunk_features();
    if (generator.empty() || generator.front().kind != LayerKind::embedding) {
      throw ShapeError("generator must start with an embedding layer");
    }
    const auto& emb = generator.front();
    if (emb.in_channels != noise_length || emb.out_channels != embed_length ||
        emb.num_classes != num_classes) {
      throw ShapeError("generator embedding does not match noise/embed/class sizes");
    }
    Shape s{1, std::size_t(noise_length + 2)};
    for (const auto& l : generator) s = output_shape(l, s);
    if (s != image_shape(1)) {
      throw ShapeError("generator chain ends at " + shape_str(s) + ", expected " +
                       shape_str(image_shape(1)));
    }
    if (generator.back().kind != LayerKind::tanh) {
      throw ShapeError("generator must end in tanh");
    }
  }
};

namespace presets {

inline std::vector<LayerSpec> lrelu_convs(const std::vector<std::pair<int, int>>& layers,
                                          int in_ch) {
  std::vector<LayerSpec> out;
  int c = in_ch;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto [ch, stride] = layers[i];
    out.push_back(layer::conv("trunk.conv" + std::to_string(i), c, ch, 3, stride));
    out.push_back(layer::activation(LayerKind::lrelu));
    c = ch;
  }
  return out;
}

/// FC from the embedding to `side`^2 x `ch`, then 5x5 stride-2 deconvs with
/// batchnorm + relu between, tanh on the last.
inline std::vector<LayerSpec> deconv_generator(int noise, int embed, int classes, int side,
                                               int ch,
                                               const std::vector<std::pair<int, int>>& ups,
                                               int out_channels, int final_stride = 2) {
  std::vector<LayerSpec> g;
  g.push_back(layer::embedding("gen.embed", noise, classes, embed));
  const int flat = side * side * ch;
  g.push_back(layer::fc("gen.fc", embed, flat));
  g.push_back(layer::batchnorm("gen.bn_fc", flat));
  g.push_back(layer::activation(LayerKind::relu));
  int c = ch;
  for (std::size_t i = 0; i < ups.size(); ++i) {
    const auto [next_ch, out_side] = ups[i];
    const bool last = i + 1 == ups.size();
    const int stride = last ? final_stride : 2;
    g.push_back(layer::deconv("gen.deconv" + std::to_string(i), c,
                              last ? out_channels : next_ch, 5, stride, out_side));
    if (!last) {
      g.push_back(layer::batchnorm("gen.bn" + std::to_string(i), next_ch));
      g.push_back(layer::activation(LayerKind::relu));
    }
    c = next_ch;
  }
  g.push_back(layer::activation(LayerKind::tanh));
  return g;
}

/// 28x28 digits: 28->14->14->7->7 conv trunk, 3->7->14->28 generator.
inline ArchitectureSpec mnist(int classes = 10) {
  ArchitectureSpec a;
  a.height = a.width = 28;
  a.channels = 1;
  a.num_classes = classes;
  a.trunk = lrelu_convs({{32, 2}, {64, 1}, {128, 2}, {256, 1}}, 1);
  a.generator = deconv_generator(100, 100, classes, 3, 384, {{192, 7}, {96, 14}, {1, 28}}, 1);
  return a;
}

/// 64x64 faces.
inline ArchitectureSpec att(int classes = 40) {
  ArchitectureSpec a;
  a.height = a.width = 64;
  a.channels = 1;
  a.num_classes = classes;
  a.trunk = lrelu_convs({{32, 2}, {64, 1}, {128, 2}, {256, 2}}, 1);
  a.generator = deconv_generator(100, 100, classes, 4, 512,
                                 {{256, 8}, {128, 16}, {256, 32}, {256, 64}, {1, 64}}, 1,
                                 /*final_stride=*/1);
  return a;
}

/// Desk-scale default: 16x16 input, two stride-2 convs (8, 16 channels).
inline ArchitectureSpec small(int classes = 10, int side = 16) {
  ArchitectureSpec a;
  a.height = a.width = side;
  a.channels = 1;
  a.num_classes = classes;
  a.trunk = lrelu_convs({{8, 2}, {16, 2}}, 1);
  const int base = side / 4;
  a.generator = deconv_generator(100, 100, classes, base, 32, {{16, side / 2}, {1, side}}, 1);
  return a;
}

/// One sigmoid hidden layer on the flattened image; the small generator.
inline ArchitectureSpec fc(int classes = 10, int side = 16, int hidden = 16) {
  ArchitectureSpec a = small(classes, side);
  a.trunk = {layer::fc("trunk.fc0", side * side, hidden), layer::activation(LayerKind::sigmoid)};
  return a;
}

inline ArchitectureSpec by_name(const std::string& name, int classes, int side = 16) {
  if (name == "mnist") return mnist(classes);
  if (name == "att") return att(classes);
  if (name == "small") return small(classes, side);
  if (name == "fc") return fc(classes, side);
  throw std::invalid_argument("unknown architecture preset '" + name + "'");
}

}  // namespace presets

/// Glorot-uniform weights, zero biases, unit batchnorm scale.
inline void init_layer(const LayerSpec& l, std::uint64_t seed, ParamSet& params,
                       ParamSet* buffers) {
  if (!l.has_params()) return;
  Rng rng = make_rng(seed, "init/" + l.name);
  auto glorot = [&](Shape shape, double fan_in, double fan_out) {
    const float bound = float(std::sqrt(6.0 / (fan_in + fan_out)));
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = uniform(rng, -bound, bound);
    return t;
  };
  const auto in = std::size_t(l.in_channels), out = std::size_t(l.out_channels);
  const auto kk = std::size_t(l.kernel_h) * l.kernel_w;
  switch (l.kind) {
    case LayerKind::conv2d:
      params.set(l.name + ".weight",
                 glorot({out, in, std::size_t(l.kernel_h), std::size_t(l.kernel_w)},
                        double(in * kk), double(out * kk)));
      params.set(l.name + ".bias", Tensor({out}));
      break;
    case LayerKind::deconv2d:
      params.set(l.name + ".weight",
                 glorot({in, out, std::size_t(l.kernel_h), std::size_t(l.kernel_w)},
                        double(in * kk), double(out * kk)));
      params.set(l.name + ".bias", Tensor({out}));
      break;
    case LayerKind::fully_connected:
      params.set(l.name + ".weight", glorot({out, in}, double(in), double(out)));
      params.set(l.name + ".bias", Tensor({out}));
      break;
    case LayerKind::embedding: {
      const double fan_in = double(in + 2);
      params.set(l.name + ".weight", glorot({out, in}, fan_in, double(out)));
      params.set(l.name + ".cat_table",
                 glorot({std::size_t(l.num_classes), out}, fan_in, double(out)));
      params.set(l.name + ".id_table", glorot({2, out}, fan_in, double(out)));
      params.set(l.name + ".bias", Tensor({out}));
      break;
    }
    case LayerKind::batchnorm:
      params.set(l.name + ".gamma", Tensor({in}, 1.0f));
      params.set(l.name + ".beta", Tensor({in}));
      if (buffers) {
        buffers->set(l.name + ".running_mean", Tensor({in}));
        buffers->set(l.name + ".running_var", Tensor({in}, 1.0f));
      }
      break;
    default:
      break;
  }
}

using ArchPtr = std::shared_ptr<const ArchitectureSpec>;

/// Tape nodes of a classifier-shaped forward pass.
template <class T>
struct BasicTrunkPass {
  typename BasicTape<T>::Node input;
  typename BasicTape<T>::Node features;
};

template <class T>
BasicTrunkPass<T> run_trunk(const ArchitectureSpec& arch, const BasicParamSet<T>& params,
                            BasicTensor<T> images, BasicTape<T>& tape) {
  if (images.rank() != 4 || images.dim(1) != std::size_t(arch.channels) ||
      images.dim(2) != std::size_t(arch.height) || images.dim(3) != std::size_t(arch.width)) {
    throw ShapeError("images " + shape_str(images.shape()) + " do not match input shape " +
                     shape_str(arch.image_shape(images.empty() ? 0 : images.dim(0))));
  }
  const auto in = tape.leaf(std::move(images));
  return {in, apply_chain(arch.trunk, params, in, tape)};
}

/// Classifier logits node [B,C].
template <class T>
typename BasicTape<T>::Node classifier_logits(const ArchitectureSpec& arch,
                                              const BasicParamSet<T>& params,
                                              typename BasicTape<T>::Node features,
                                              BasicTape<T>& tape) {
  return apply_layer(arch.head(kHeadCat, arch.num_classes), params, features, tape);
}

/// The federated model M: trunk + category head.
class SharedClassifier {
 public:
  SharedClassifier() = default;
  SharedClassifier(ArchPtr arch, ParamSet params)
      : arch_(std::move(arch)), params_(std::move(params)) {}

  const ArchitectureSpec& arch() const { return *arch_; }
  const ArchPtr& arch_ptr() const { return arch_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }

  Tensor logits(const Tensor& images) const {
    Tape tape;
    const auto pass = run_trunk(*arch_, params_, images, tape);
    return tape.value(classifier_logits(*arch_, params_, pass.features, tape));
  }

  /// Probability rows [B,C].
  Tensor classify(const Tensor& images) const {
    Tape tape;
    const auto pass = run_trunk(*arch_, params_, images, tape);
    const auto z = classifier_logits(*arch_, params_, pass.features, tape);
    return tape.value(apply_layer(layer::activation(LayerKind::softmax), params_, z, tape));
  }

  std::vector<int> predict(const Tensor& images) const {
    const Tensor p = logits(images);
    const std::size_t k = p.dim(1);
    std::vector<int> out(p.dim(0));
    for (std::size_t r = 0; r < out.size(); ++r) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (p[r * k + j] > p[r * k + best]) best = j;
      out[r] = int(best);
    }
    return out;
  }

 private:
  ArchPtr arch_;
  ParamSet params_;
};

struct DiscriminatorOutput {
  Tensor real;  // [B]
  Tensor cat;   // [B,C]
  Tensor id;    // [B]
};

/// Tape nodes of one discriminator pass, logits per head.
template <class T>
struct BasicDiscriminatorPass {
  typename BasicTape<T>::Node input, features, real, cat, id;
};

/// D: the classifier trunk with real/category/identity heads.
class MultiTaskDiscriminator {
 public:
  MultiTaskDiscriminator() = default;
  MultiTaskDiscriminator(ArchPtr arch, ParamSet params)
      : arch_(std::move(arch)), params_(std::move(params)) {}

  const ArchitectureSpec& arch() const { return *arch_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }

  BasicDiscriminatorPass<float> forward(const Tensor& images, Tape& tape) const {
    const auto pass = run_trunk(*arch_, params_, images, tape);
    BasicDiscriminatorPass<float> out{};
    out.input = pass.input;
    out.features = pass.features;
    out.real = apply_layer(arch_->head(kHeadReal, 1), params_, pass.features, tape);
    out.cat = classifier_logits(*arch_, params_, pass.features, tape);
    out.id = apply_layer(arch_->head(kHeadId, 1), params_, pass.features, tape);
    return out;
  }

  DiscriminatorOutput discriminate(const Tensor& images) const {
    Tape tape;
    const auto pass = forward(images, tape);
    const auto sig = layer::activation(LayerKind::sigmoid);
    const auto soft = layer::activation(LayerKind::softmax);
    DiscriminatorOutput out;
    const std::size_t b = images.dim(0);
    out.real = tape.value(apply_layer(sig, params_, pass.real, tape)).reshaped({b});
    out.cat = tape.value(apply_layer(soft, params_, pass.cat, tape));
    out.id = tape.value(apply_layer(sig, params_, pass.id, tape)).reshaped({b});
    return out;
  }

 private:
  ArchPtr arch_;
  ParamSet params_;
};

/// Tape nodes of one generator pass.
template <class T>
struct BasicGeneratorPass {
  typename BasicTape<T>::Node input, images;
};

/// G: (noise, category, identity) -> image in [-1,1].
class Generator {
 public:
  Generator() = default;
  Generator(ArchPtr arch, ParamSet params, ParamSet running)
      : arch_(std::move(arch)), params_(std::move(params)), running_(std::move(running)) {}

  const ArchitectureSpec& arch() const { return *arch_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }
  const ParamSet& running_stats() const { return running_; }
  ParamSet& running_stats() { return running_; }

  /// Packs noise rows [B,noise] with labels into embedding input rows.
  Tensor pack_input(const Tensor& noise, const std::vector<int>& cats,
                    const std::vector<int>& ids) const {
    const std::size_t b = noise.dim(0), n = std::size_t(arch_->noise_length);
    if (noise.rank() != 2 || noise.dim(1) != n) {
      throw ShapeError("noise " + shape_str(noise.shape()) + " expects length " +
                       std::to_string(n));
    }
    if (cats.size() != b || ids.size() != b) throw ShapeError("label count != batch");
    Tensor in({b, n + 2});
    for (std::size_t r = 0; r < b; ++r) {
      if (cats[r] < 0 || cats[r] >= arch_->num_classes) {
        throw std::out_of_range("category label " + std::to_string(cats[r]) + " out of range");
      }
      if (ids[r] != 0 && ids[r] != 1) {
        throw std::out_of_range("identity label must be 0 or 1");
      }
      for (std::size_t i = 0; i < n; ++i) in[r * (n + 2) + i] = noise[r * n + i];
      in[r * (n + 2) + n] = float(cats[r]);
      in[r * (n + 2) + n + 1] = float(ids[r]);
    }
    return in;
  }

  /// Training-mode pass: batch statistics, running averages updated.
  BasicGeneratorPass<float> forward(const Tensor& packed, Tape& tape, bool update_running) {
    const auto in = tape.leaf(packed);
    ForwardOptions opts{true, update_running ? &running_ : nullptr};
    return {in, apply_chain(arch_->generator, params_, in, tape, opts)};
  }

  /// Inference pass using running batchnorm statistics.
  Tensor generate(const Tensor& noise, const std::vector<int>& cats,
                  const std::vector<int>& ids) const {
    Tape tape;
    const auto in = tape.leaf(pack_input(noise, cats, ids));
    ParamSet running = running_;
    ForwardOptions opts{false, &running};
    return tape.value(apply_chain(arch_->generator, params_, in, tape, opts));
  }

  Tensor generate(const Tensor& z, int cat, int id) const {
    const std::size_t b = z.rank() == 1 ? 1 : z.dim(0);
    const Tensor noise = z.rank() == 1 ? z.reshaped({1, z.size()}) : z;
    return generate(noise, std::vector<int>(b, cat), std::vector<int>(b, id));
  }

  Tensor sample_noise(std::size_t batch, Rng& rng) const {
    Tensor z({batch, std::size_t(arch_->noise_length)});
    for (auto& v : z.storage()) v = gaussian(rng);
    return z;
  }

 private:
  ArchPtr arch_;
  ParamSet params_;
  ParamSet running_;
};

struct Models {
  SharedClassifier classifier;
  MultiTaskDiscriminator discriminator;
  Generator generator;
};

/// Seeded initialization of M, D and G. Classifier and discriminator share
/// trunk and category-head values because each layer is seeded by its name.
inline Models build_models(const ArchitectureSpec& spec, std::uint64_t seed) {
  spec.validate();
  auto arch = std::make_shared<const ArchitectureSpec>(spec);
  ParamSet trunk;
  for (const auto& l : spec.trunk) init_layer(l, seed, trunk, nullptr);
  init_layer(spec.head(kHeadCat, spec.num_classes), seed, trunk, nullptr);
  ParamSet disc = trunk;
  init_layer(spec.head(kHeadReal, 1), seed, disc, nullptr);
  init_layer(spec.head(kHeadId, 1), seed, disc, nullptr);
  ParamSet gen, running;
  for (const auto& l : spec.generator) init_layer(l, seed, gen, &running);
  return {SharedClassifier(arch, std::move(trunk)), MultiTaskDiscriminator(arch, std::move(disc)),
          Generator(arch, std::move(gen), std::move(running))};
}

inline bool is_shared_name(const std::string& name) {
  return name.rfind(kTrunkPrefix, 0) == 0 || name.rfind(std::string(kHeadCat) + ".", 0) == 0;
}

/// Replaces D's trunk and category head with `source` (a classifier-shaped
/// ParamSet); real and identity heads are kept.
inline MultiTaskDiscriminator overwrite_trunk(const MultiTaskDiscriminator& d,
                                              const ParamSet& source) {
  MultiTaskDiscriminator out = d;
  for (auto& [name, t] : out.params()) {
    if (!is_shared_name(name)) continue;
    if (!source.contains(name)) {
      throw ShapeError("overwrite source lacks '" + name + "'");
    }
    const auto& s = source.at(name);
    if (s.shape() != t.shape()) throw ShapeError("overwrite shape mismatch on '" + name + "'");
    t = s;
  }
  return out;
}

}  // namespace mgan
