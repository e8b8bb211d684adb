#include <gtest/gtest.h>

#include <cmath>

#include "mgan/inversion.hpp"
#include "test_util.hpp"

namespace mgan {
namespace {

using testing::random_tensor;

/// Flattened side x side input -> FC(hidden) -> sigmoid -> FC(C).
SharedClassifier tiny_classifier(int side, int hidden, int classes, std::uint64_t seed) {
  auto arch = std::make_shared<ArchitectureSpec>();
  arch->height = arch->width = side;
  arch->num_classes = classes;
  arch->trunk = {layer::fc("trunk.fc0", side * side, hidden),
                 layer::activation(LayerKind::sigmoid)};
  ParamSet p;
  for (const auto& l : arch->trunk) init_layer(l, seed, p, nullptr);
  init_layer(arch->head(kHeadCat, classes), seed, p, nullptr);
  return SharedClassifier(arch, std::move(p));
}

ClientDataset client_of(const LabeledDataset& d, const std::vector<std::size_t>& idx) {
  const auto s = d.subset(idx);
  return {0, s.images, s.labels, false};
}

ClientUpdate single_step(const SharedClassifier& m, const ClientDataset& c, float lr) {
  Rng rng(0);
  return local_train(m, c, 1, int(c.size()), SgdConfig{lr}, rng);
}

TEST(InferLabels, SingleClass) {
  const auto d = synth_dataset(SynthKind::bars, 5, 6, 16, 1);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.labels[i] == 3) idx.push_back(i);
  const auto m = build_models(presets::small(5), 2).classifier;
  const auto u = single_step(m, client_of(d, idx), 0.05f);
  EXPECT_EQ(infer_client_labels(u, 3), (std::vector<int>{3}));
}

TEST(InferLabels, ThreeEqualClasses) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto d = synth_dataset(SynthKind::bars, 10, 4, 16, seed);
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (d.labels[i] == 1 || d.labels[i] == 4 || d.labels[i] == 7) idx.push_back(i);
    const auto m = build_models(presets::small(10), seed).classifier;
    const auto u = single_step(m, client_of(d, idx), 0.05f);
    EXPECT_EQ(infer_client_labels(u, 3), (std::vector<int>{1, 4, 7}));
  }
}

TEST(InferLabels, ZeroUpdateAndMissingBias) {
  const auto m = build_models(presets::small(4), 1).classifier;
  ClientUpdate zero{0, 0, m.params().zeros_like()};
  EXPECT_TRUE(infer_client_labels(zero, 3).empty());
  ClientUpdate bad{0, 0, ParamSet{}};
  EXPECT_THROW(infer_client_labels(bad, 3), ShapeError);
}

TEST(AssignLabels, EvenSplitLowClassesFirst) {
  EXPECT_EQ(assign_labels({7, 1, 4}, 5), (std::vector<int>{1, 1, 4, 4, 7}));
  EXPECT_EQ(assign_labels({2}, 3), (std::vector<int>{2, 2, 2}));
}

struct MatchSetup {
  LabeledDataset d = synth_dataset(SynthKind::bars, 4, 2, 16, 5);
  SharedClassifier m = build_models(presets::small(4), 3).classifier;
  ClientDataset c = client_of(d, {0, 1, 2, 3, 4});
  float lr = 0.05f;
  ClientUpdate u = single_step(m, c, lr);
};

TEST(GradientMatch, TrueBatchGivesZero) {
  MatchSetup s;
  const auto r = gradient_match_loss(s.c.samples, s.c.labels, s.u, s.m, s.lr);
  EXPECT_LT(r.loss, 1e-5);
  EXPECT_GT(squared_norm(s.u.delta), 1e-4);
}

TEST(GradientMatch, ZeroGammaGivesUpdateNorm) {
  MatchSetup s;
  Rng rng(1);
  for (int i = 0; i < 3; ++i) {
    const Tensor x = random_tensor<float>(s.c.samples.shape(), rng);
    const auto r = gradient_match_loss(x, s.c.labels, s.u, s.m, 0.0);
    EXPECT_NEAR(r.loss, squared_norm(s.u.delta), 1e-9);
    for (float g : r.grad.storage()) EXPECT_EQ(g, 0.0f);
  }
}

TEST(GradientMatch, RandomBatchesAreWorse) {
  MatchSetup s;
  const double at_truth = gradient_match_loss(s.c.samples, s.c.labels, s.u, s.m, s.lr).loss;
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const Tensor x = random_tensor<float>(s.c.samples.shape(), rng);
    EXPECT_GT(gradient_match_loss(x, s.c.labels, s.u, s.m, s.lr).loss, at_truth);
  }
}

TEST(GradientMatch, SecondOrderGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto d = synth_dataset(SynthKind::bars, 3, 1, 8, seed);
    auto spec = presets::small(3, 8);
    const auto m = build_models(spec, seed).classifier;
    const ClientDataset c = client_of(d, {0, 1});
    const auto u = single_step(m, c, 0.1f);
    Rng rng(seed + 10);
    const Tensor x = random_tensor<float>(c.samples.shape(), rng);
    const double gamma = 0.07;  // deliberately off, so the residual is non-zero
    const auto fast = gradient_match_loss(x, c.labels, u, m, gamma);

    const auto theta64 = cast_params<double>(m.params());
    const auto u64 = cast_params<double>(u.delta);
    const auto fd = testing::fd_tensor(
        [&](const BasicTensor<double>& xx) {
          const auto g = classifier_gradient(m.arch(), theta64, xx, c.labels);
          double v = 0;
          for (const auto& [n, t] : u64)
            for (std::size_t i = 0; i < t.size(); ++i) v += std::pow(t[i] + gamma * g.params.at(n)[i], 2);
          return v;
        },
        cast_tensor<double>(x), 1e-4);
    EXPECT_LE(testing::relative_error(fast.grad, testing::to_float(fd)), 1e-3) << seed;

    // the double instantiation of the same routine is tighter still
    const auto exact = gradient_match_loss<double>(cast_tensor<double>(x), c.labels, u64, m.arch(),
                                                   theta64, gamma);
    EXPECT_LE(testing::relative_error(exact.grad, fd), 1e-5) << seed;
  }
}

TEST(TotalVariation, ConstantIsZero) {
  const auto r = tv_loss(Tensor({2, 1, 5, 5}, 0.3f), 1.25);
  EXPECT_EQ(r.loss, 0.0);
  for (float g : r.grad.storage()) EXPECT_EQ(g, 0.0f);
}

TEST(TotalVariation, HandFixture) {
  const Tensor x({1, 1, 2, 2}, std::vector<float>{0, 1, 0, 1});
  EXPECT_DOUBLE_EQ(tv_loss(x, 1.0).loss, 2.0);
}

TEST(TotalVariation, GradientMatchesFiniteDifferences) {
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto x = random_tensor<double>({2, 1, 4, 5}, rng);
    for (double beta : {1.0, 1.25, 2.0}) {
      const auto r = tv_loss(x, beta);
      const auto fd = testing::fd_tensor(
          [&](const BasicTensor<double>& p) { return tv_loss(p, beta).loss; }, x, 1e-3);
      EXPECT_LE(testing::relative_error(r.grad, fd), 1e-4) << seed << " " << beta;
      EXPECT_GT(r.loss, 0.0);
    }
  }
}

TEST(TotalVariation, RejectsTinyImages) {
  EXPECT_THROW(tv_loss(Tensor({1, 1, 1, 4}), 1.0), ShapeError);
}

TEST(Representatives, SingleSampleRecovery) {
  const int side = 8;
  const auto d = synth_dataset(SynthKind::bars, 3, 2, side, 4);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto m = tiny_classifier(side, 16, 3, seed);
    const ClientDataset c = client_of(d, {std::size_t(seed)});
    const float lr = 0.1f;
    const auto u = single_step(m, c, lr);

    // analytic oracle: each first-layer row of the weight delta is the bias
    // delta times the input
    const Tensor& dw = u.delta.at("trunk.fc0.weight");
    const Tensor& db = u.delta.at("trunk.fc0.bias");
    std::size_t row = 0;
    for (std::size_t i = 1; i < db.size(); ++i)
      if (std::abs(db[i]) > std::abs(db[row])) row = i;
    double ratio_err = 0;
    for (int p = 0; p < side * side; ++p)
      ratio_err = std::max(ratio_err, std::abs(double(dw[row * 64 + p] / db[row]) - c.samples[p]));
    EXPECT_LT(ratio_err, 1e-3);

    InversionConfig cfg;
    cfg.gamma = lr;
    cfg.lambda = 0;
    cfg.representatives = 1;
    cfg.classes_per_client = 1;
    cfg.lbfgs.max_iterations = 500;
    cfg.lbfgs.f_rel_tolerance = 0;
    cfg.lbfgs.grad_tolerance = 1e-12;
    Rng rng(seed);
    const auto rep = compute_representatives(u, m, cfg, rng);
    EXPECT_EQ(rep.labels, c.labels);
    double mse = 0;
    for (int p = 0; p < side * side; ++p) mse += std::pow(rep.images[p] - c.samples[p], 2);
    mse /= side * side;
    EXPECT_LT(mse, 0.02) << "seed " << seed;
    EXPECT_LE(rep.residual, rep.initial_residual);

    // the reconstruction's own first-layer ratio reproduces the observed one
    const auto again = single_step(m, ClientDataset{0, rep.images, rep.labels, false}, lr);
    const Tensor& rw = again.delta.at("trunk.fc0.weight");
    const Tensor& rb = again.delta.at("trunk.fc0.bias");
    double induced = 0;
    for (int p = 0; p < side * side; ++p)
      induced = std::max(induced, std::abs(double(rw[row * 64 + p] / rb[row]) -
                                           double(dw[row * 64 + p] / db[row])));
    EXPECT_LT(induced, 1e-3) << "seed " << seed;
  }
}

TEST(Representatives, ZeroUpdateGivesSmoothLowResidual) {
  const auto m = build_models(presets::small(4), 1).classifier;
  ClientUpdate zero{2, 0, m.params().zeros_like()};
  InversionConfig cfg;
  cfg.gamma = 0.05;
  cfg.representatives = 2;
  cfg.lambda = 0.01;
  cfg.lbfgs.max_iterations = 200;
  cfg.lbfgs.f_rel_tolerance = 0;
  Rng rng(3);
  const auto rep = compute_representatives(zero, m, cfg, rng);
  EXPECT_EQ(rep.client_id, 2);
  // an unsaturated softmax keeps mean(p - y) away from zero, so the floor is
  // positive; the residual must still fall well below the noise start
  EXPECT_LT(rep.residual, 0.25 * rep.initial_residual);
  Rng noise_rng(3);
  Tensor noise(rep.images.shape());
  for (auto& v : noise.storage()) v = uniform(noise_rng, -1, 1);
  EXPECT_LT(tv_loss(rep.images, cfg.beta).loss, 0.05 * tv_loss(noise, cfg.beta).loss);
}

TEST(Representatives, ZeroUpdateOnConfidentModelHasNearZeroResidual) {
  auto m = build_models(presets::small(4), 1).classifier;
  m.params().at("head_cat.bias")[0] = 25.0f;
  ClientUpdate zero{0, 0, m.params().zeros_like()};
  InversionConfig cfg;
  cfg.gamma = 0.05;
  cfg.representatives = 2;
  Rng rng(4);
  const auto rep = compute_representatives(zero, m, cfg, rng);
  EXPECT_EQ(rep.labels, (std::vector<int>{0, 0}));
  EXPECT_LT(rep.residual, 1e-6);
}

TEST(Representatives, RespectsBoxAndImproves) {
  MatchSetup s;
  InversionConfig cfg;
  cfg.gamma = s.lr;
  cfg.representatives = 4;
  cfg.lower = -0.5f;
  cfg.upper = 0.5f;
  Rng rng(7);
  const auto rep = compute_representatives(s.u, s.m, cfg, rng);
  for (float v : rep.images.storage()) {
    EXPECT_GE(v, -0.5f);
    EXPECT_LE(v, 0.5f);
  }
  EXPECT_LE(rep.residual, rep.initial_residual);
  EXPECT_EQ(rep.labels.size(), 4u);
  for (int l : rep.labels) EXPECT_TRUE(l >= 0 && l < 4);
}

}  // namespace
}  // namespace mgan
