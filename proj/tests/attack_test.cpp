#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "mgan/attack.hpp"
#include "mgan/serialize.hpp"
#include "test_util.hpp"

namespace mgan {
namespace {

using testing::random_tensor;
namespace fs = std::filesystem;

/// side x side input -> FC(hidden) -> sigmoid, with all three heads.
struct TinyD {
  ArchPtr arch;
  ParamSet params;
};

TinyD tiny_discriminator(int side, int hidden, int classes, std::uint64_t seed) {
  auto arch = std::make_shared<ArchitectureSpec>();
  arch->height = arch->width = side;
  arch->num_classes = classes;
  arch->trunk = {layer::fc("trunk.fc0", side * side, hidden),
                 layer::activation(LayerKind::sigmoid)};
  ParamSet p;
  for (const auto& l : arch->trunk) init_layer(l, seed, p, nullptr);
  for (const auto& l : {arch->head(kHeadCat, classes), arch->head(kHeadReal, 1),
                        arch->head(kHeadId, 1)})
    init_layer(l, seed, p, nullptr);
  return {arch, std::move(p)};
}

/// Random heads so the gradients are not dominated by zero biases.
ParamSet perturbed(const ParamSet& p, Rng& rng) {
  ParamSet out = p;
  for (auto& [name, t] : out)
    for (auto& v : t.storage()) v += uniform(rng, -0.5f, 0.5f);
  return out;
}

using HeadFn = std::function<BasicHeadLoss<double>(const BasicParamSet<double>&,
                                                   const BasicTensor<double>&,
                                                   const BasicTensor<double>&)>;

/// Checks the parameter and both input gradients of a binary head objective,
/// whose gradients are of -value.
void check_binary(const HeadFn& f, const BasicParamSet<double>& d, const BasicTensor<double>& a,
                  const BasicTensor<double>& b, std::uint64_t seed) {
  const auto r = f(d, a, b);
  const auto fp = finite_diff_grad<double>(
      [&](const BasicParamSet<double>& p) { return -f(p, a, b).value; }, d, 1e-6);
  EXPECT_LE(testing::relative_error(r.params, fp), 1e-4) << seed;
  const auto fa = testing::fd_tensor([&](const BasicTensor<double>& x) { return -f(d, x, b).value; },
                                     a, 1e-6);
  EXPECT_LE(testing::relative_error(r.first_input, fa), 1e-4) << seed;
  const auto fb = testing::fd_tensor([&](const BasicTensor<double>& x) { return -f(d, a, x).value; },
                                     b, 1e-6);
  EXPECT_LE(testing::relative_error(r.second_input, fb), 1e-4) << seed;
}

struct GanFixture {
  ArchitectureSpec spec = presets::small(3, 8);
  Models models = build_models(spec, 5);
  AttackConfig cfg;
  AttackState state() const { return make_attack_state(models.discriminator, models.generator, cfg); }
};

}  // namespace

TEST(AttackLosses, RealGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto t = tiny_discriminator(4, 6, 3, seed);
    const auto d = cast_params<double>(perturbed(t.params, rng));
    const auto aux = random_tensor<double>({3, 1, 4, 4}, rng);
    const auto fake = random_tensor<double>({2, 1, 4, 4}, rng);
    check_binary([&](const auto& p, const auto& a, const auto& b) { return loss_real(*t.arch, p, a, b); },
                 d, aux, fake, seed);
  }
}

TEST(AttackLosses, IdGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 100);
    const auto t = tiny_discriminator(4, 6, 3, seed);
    const auto d = cast_params<double>(perturbed(t.params, rng));
    const auto victim = random_tensor<double>({2, 1, 4, 4}, rng);
    const auto others = random_tensor<double>({4, 1, 4, 4}, rng);
    check_binary([&](const auto& p, const auto& a, const auto& b) { return loss_id(*t.arch, p, a, b); },
                 d, victim, others, seed);
  }
}

TEST(AttackLosses, CatGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 200);
    const auto t = tiny_discriminator(4, 6, 3, seed);
    const auto d = cast_params<double>(perturbed(t.params, rng));
    const auto fake = random_tensor<double>({3, 1, 4, 4}, rng);
    const std::vector<int> labels = {int(seed % 3), 2, 0};
    const auto r = loss_cat(*t.arch, d, fake, labels);
    const auto fp = finite_diff_grad<double>(
        [&](const BasicParamSet<double>& p) { return loss_cat(*t.arch, p, fake, labels).value; }, d, 1e-6);
    EXPECT_LE(testing::relative_error(r.params, fp), 1e-4) << seed;
    const auto fx = testing::fd_tensor(
        [&](const BasicTensor<double>& x) { return loss_cat(*t.arch, d, x, labels).value; }, fake, 1e-6);
    EXPECT_LE(testing::relative_error(r.first_input, fx), 1e-4) << seed;
  }
}

TEST(AttackLosses, GradientsOnConvDiscriminator) {
  // float path on the conv preset, compared against its double instantiation
  const auto spec = presets::small(3, 8);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto m = build_models(spec, seed);
    Rng rng(seed);
    const Tensor a = random_tensor<float>({2, 1, 8, 8}, rng);
    const Tensor b = random_tensor<float>({2, 1, 8, 8}, rng);
    const auto f = loss_real(spec, m.discriminator.params(), a, b);
    const auto d = loss_real(spec, cast_params<double>(m.discriminator.params()), cast_tensor<double>(a),
                             cast_tensor<double>(b));
    EXPECT_NEAR(f.value, d.value, 1e-5);
    EXPECT_LE(testing::relative_error(cast_params<double>(f.params), d.params), 1e-4);
  }
}

TEST(AttackLosses, UntrainedClosedForms) {
  auto t = tiny_discriminator(4, 6, 10, 1);
  for (const char* head : {kHeadReal, kHeadId, kHeadCat}) {
    t.params.at(std::string(head) + ".weight").fill(0.0f);
    t.params.at(std::string(head) + ".bias").fill(0.0f);
  }
  Rng rng(3);
  const Tensor a = random_tensor<float>({5, 1, 4, 4}, rng);
  const Tensor b = random_tensor<float>({3, 1, 4, 4}, rng);
  EXPECT_NEAR(loss_real(*t.arch, t.params, a, b).value, 2 * std::log(0.5), 1e-6);
  EXPECT_NEAR(loss_id(*t.arch, t.params, a, b).value, 2 * std::log(0.5), 1e-6);
  EXPECT_NEAR(loss_cat(*t.arch, t.params, a, {0, 1, 2, 3, 9}).value, std::log(10.0), 1e-6);
}

TEST(AttackLosses, PerfectDiscriminatorApproachesZero) {
  // a bias large enough to saturate: the clamp keeps the value finite
  auto t = tiny_discriminator(4, 6, 3, 1);
  t.params.at(std::string(kHeadReal) + ".weight").fill(0.0f);
  Rng rng(3);
  const Tensor a = random_tensor<float>({2, 1, 4, 4}, rng);
  t.params.at(std::string(kHeadReal) + ".bias").fill(40.0f);
  const auto hi = loss_real(*t.arch, t.params, a, a);
  EXPECT_TRUE(std::isfinite(hi.value));
  EXPECT_NEAR(hi.value, std::log(1e-7) + std::log(1 - 1e-7), 1e-6);

  // one-hot-correct category head
  auto& cb = t.params.at(std::string(kHeadCat) + ".bias");
  t.params.at(std::string(kHeadCat) + ".weight").fill(0.0f);
  cb.fill(0.0f);
  cb[1] = 30.0f;
  const auto c = loss_cat(*t.arch, t.params, a, {1, 1});
  EXPECT_GE(c.value, 0.0);
  EXPECT_LT(c.value, 1e-9);
}

TEST(AttackLosses, Errors) {
  const auto t = tiny_discriminator(4, 6, 3, 1);
  const Tensor a({2, 1, 4, 4});
  EXPECT_THROW(loss_cat(*t.arch, t.params, a, {0, 3}), std::out_of_range);
  EXPECT_THROW(loss_id(*t.arch, t.params, Tensor({0, 1, 4, 4}), a), std::invalid_argument);
  EXPECT_THROW(loss_real(*t.arch, t.params, a, Tensor({0, 1, 4, 4})), std::invalid_argument);
}

TEST(AttackSchedule, EpochsGrowAndCap) {
  AttackConfig cfg;
  EXPECT_EQ(d_epochs(0, cfg), 1);
  EXPECT_EQ(d_epochs(9, cfg), 1);
  EXPECT_EQ(d_epochs(10, cfg), 2);
  EXPECT_EQ(d_epochs(39, cfg), 4);
  EXPECT_EQ(d_epochs(45, cfg), 5);
  EXPECT_EQ(d_epochs(1000, cfg), 5);
}

TEST(AttackConfig, Validation) {
  AttackConfig cfg;
  EXPECT_NO_THROW(cfg.validate(10));
  cfg.victim = 10;
  EXPECT_THROW(cfg.validate(10), std::invalid_argument);
  cfg.victim = -1;
  EXPECT_THROW(cfg.validate(10), std::invalid_argument);
  cfg = {};
  cfg.threshold = 0.0;
  EXPECT_THROW(cfg.validate(10), std::invalid_argument);
  cfg.threshold = 1.0;
  EXPECT_NO_THROW(cfg.validate(10));
  EXPECT_EQ(parse_attack_mode("active"), AttackMode::active);
  EXPECT_THROW(parse_attack_mode("loud"), std::invalid_argument);
}

TEST(GanSteps, DiscriminatorStepTouchesOnlyD) {
  GanFixture f;
  auto st = f.state();
  const auto g0 = st.g.params();
  const auto run0 = st.g.running_stats();
  const auto d0 = st.d.params();
  Rng rng(1);
  const Tensor real = random_tensor<float>({4, 1, 8, 8}, rng);
  const Tensor v = random_tensor<float>({2, 1, 8, 8}, rng);
  const Tensor o = random_tensor<float>({3, 1, 8, 8}, rng);
  discriminator_step(st, real, &v, &o, f.cfg, rng);
  EXPECT_EQ(st.g.params(), g0);
  EXPECT_EQ(st.g.running_stats(), run0);
  EXPECT_EQ(st.adam_g.step, 0);
  EXPECT_NE(st.d.params(), d0);
}

TEST(GanSteps, GeneratorStepTouchesOnlyG) {
  GanFixture f;
  auto st = f.state();
  const auto g0 = st.g.params();
  const auto d0 = st.d.params();
  Rng rng(2);
  for (bool use_id : {true, false}) {
    const auto gg = generator_step(st, 4, use_id, f.cfg, rng);
    EXPECT_TRUE(std::isfinite(gg.l_cat));
    EXPECT_TRUE(std::isfinite(gg.l_real));
  }
  EXPECT_EQ(st.d.params(), d0);
  EXPECT_EQ(st.adam_d.step, 0);
  EXPECT_NE(st.g.params(), g0);
}

TEST(GanSteps, ZeroWeightIdMatchesActiveGradient) {
  GanFixture f;
  Rng rng(7);
  Generator g = f.models.generator;
  auto batch = sample_generator_batch(g, 6, true, rng);
  const auto passive = generator_gradients(f.models.discriminator, g, batch, 0.0, true, false);
  const auto active = generator_gradients(f.models.discriminator, g, batch, 1.0, false, false);
  EXPECT_EQ(passive.params, active.params);
  const auto weighted = generator_gradients(f.models.discriminator, g, batch, 1.0, true, false);
  EXPECT_NE(weighted.params, active.params);
}

TEST(GanSteps, GeneratorGradientMatchesFiniteDifferences) {
  // directional derivative of the generator objective along a random direction
  GanFixture f;
  Rng rng(11);
  Generator g = f.models.generator;
  const auto batch = sample_generator_batch(g, 4, true, rng);
  const auto objective = [&](const ParamSet& p) {
    Generator h = g;
    h.params() = p;
    const auto r = generator_gradients(f.models.discriminator, h, batch, 1.0, true, false);
    return r.l_cat - r.l_real - r.l_id;
  };
  const auto an = generator_gradients(f.models.discriminator, g, batch, 1.0, true, false);
  ParamSet dir = g.params().zeros_like();
  for (auto& [n, t] : dir)
    for (auto& v : t.storage()) v = uniform(rng, -1.0f, 1.0f);
  double lin = 0.0;
  for (const auto& [n, t] : dir)
    for (std::size_t i = 0; i < t.size(); ++i) lin += double(t[i]) * an.params.at(n)[i];
  const float h = 1e-3f;
  const double fd = (objective(axpy(g.params(), dir, h)) - objective(axpy(g.params(), dir, -h))) / (2 * h);
  EXPECT_NEAR(fd, lin, 0.05 * std::abs(lin) + 1e-4);
}

TEST(Sharpness, ConstantAndCheckerboard) {
  EXPECT_EQ(sharpness(Tensor({2, 1, 5, 5}, 0.7f)), 0.0);
  Tensor c({1, 1, 4, 4});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) c[i * 4 + j] = (i + j) % 2 ? 1.0f : -1.0f;
  EXPECT_DOUBLE_EQ(sharpness(c), 8.0);
  EXPECT_THROW(sharpness(Tensor({1, 1, 2, 5})), ShapeError);
}

TEST(MiBaseline, ZeroStepsReturnsNoise) {
  GanFixture f;
  Rng rng(4);
  MiConfig cfg;
  cfg.steps = 0;
  const Tensor x = mi_attack_baseline(f.models.classifier, 1, cfg, rng, 3);
  EXPECT_EQ(x.shape(), (Shape{3, 1, 8, 8}));
  for (float v : x.storage()) EXPECT_LE(std::abs(v), cfg.init_amplitude);
  EXPECT_GT(testing::norm(x), 0.0);
  EXPECT_THROW(mi_attack_baseline(f.models.classifier, 3, cfg, rng), std::out_of_range);
}

TEST(MiBaseline, ReachesHighConfidence) {
  GanFixture f;
  SharedClassifier m = f.models.classifier;
  const auto d = synth_dataset(SynthKind::bars, 3, 30, 8, 1);
  const ClientDataset c{0, d.images, d.labels, false};
  Rng rng(5);
  for (int e = 0; e < 40; ++e) m.params() = axpy(m.params(), local_train(m, c, 1, 10, {0.05f}, rng).delta);
  MiConfig cfg;
  for (int target = 0; target < 3; ++target) {
    const Tensor x = mi_attack_baseline(m, target, cfg, rng, 2);
    for (float v : x.storage()) {
      EXPECT_GE(v, -1.0f);
      EXPECT_LE(v, 1.0f);
    }
    const Tensor p = m.classify(x);
    for (std::size_t r = 0; r < 2; ++r) EXPECT_GT(p[r * 3 + std::size_t(target)], 0.99f) << target;
  }
}

namespace {

struct FedFixture {
  ArchitectureSpec spec = presets::small(4, 8);
  LabeledDataset train = synth_dataset(SynthKind::bars, 4, 40, 8, 1);
  LabeledDataset test = synth_dataset(SynthKind::bars, 4, 10, 8, 2);
  Models models = build_models(spec, 3);
  std::vector<ClientDataset> clients = partition_non_iid(train, 3, 2, 20, 4);
  FedConfig cfg;
  FedFixture() {
    cfg.num_clients = 3;
    cfg.rounds = 2;
    cfg.batch_size = 10;
    cfg.sgd.learning_rate = 0.05f;
    cfg.seed = 9;
  }
  InversionConfig inversion() const {
    InversionConfig inv;
    inv.gamma = default_inversion_gamma(cfg, 20);
    inv.representatives = 2;
    inv.classes_per_client = 2;
    inv.lbfgs.max_iterations = 5;
    return inv;
  }
  AttackConfig attack(AttackMode mode) const {
    AttackConfig a;
    a.mode = mode;
    a.victim = 1;
    a.batch_size = 10;
    a.stop_samples = 8;
    a.stop_on_convergence = false;
    return a;
  }
};

std::vector<std::uint8_t> checkpoints(const fs::path& dir, int rounds) {
  std::vector<std::uint8_t> all;
  for (int r = 0; r <= rounds; ++r) {
    const auto b = read_file_bytes((dir / checkpoint_name("model", r)).string());
    all.insert(all.end(), b.begin(), b.end());
  }
  return all;
}

}  // namespace

TEST(PassiveAttack, DoesNotChangeTrajectory) {
  FedFixture f;
  const auto base = fs::temp_directory_path() / "mgan_attack_nonint";
  fs::remove_all(base);
  FedRunOptions plain;
  plain.output.checkpoint_dir = (base / "plain").string();
  run_federated(f.cfg, f.models.classifier, f.clients, f.test, plain);

  const auto acfg = f.attack(AttackMode::passive);
  MganObserver obs(make_attack_state(f.models.discriminator, f.models.generator, acfg), acfg,
                   f.inversion(), f.test.images, 1);
  std::vector<AttackRoundReport> reps;
  obs.on_round([&](const AttackRoundReport& r, const AttackState&) { reps.push_back(r); });
  FedRunOptions watched;
  watched.observer = &obs;
  watched.output.checkpoint_dir = (base / "watched").string();
  run_federated(f.cfg, f.models.classifier, f.clients, f.test, watched);

  EXPECT_EQ(checkpoints(base / "plain", 2), checkpoints(base / "watched", 2));
  ASSERT_EQ(reps.size(), 2u);
  for (const auto& r : reps) {
    EXPECT_EQ(r.representatives.size(), 3u);
    EXPECT_EQ(r.d_steps, r.d_epochs * 4);  // 40 aux images in batches of 10
    EXPECT_EQ(r.g_steps, r.d_epochs);
    for (const auto& l : r.losses) {
      EXPECT_TRUE(std::isfinite(l.l_real) && std::isfinite(l.l_cat));
      ASSERT_TRUE(l.l_id.has_value());
      EXPECT_TRUE(std::isfinite(*l.l_id));
    }
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);
  }
  EXPECT_EQ(obs.state().round, 2);
}

TEST(PassiveAttack, RequiresGamma) {
  FedFixture f;
  auto acfg = f.attack(AttackMode::passive);
  auto inv = f.inversion();
  inv.gamma = 0;
  EXPECT_THROW(MganObserver(make_attack_state(f.models.discriminator, f.models.generator, acfg),
                            acfg, inv, f.test.images, 1),
               std::invalid_argument);
}

TEST(PassiveAttack, TrunkRefreshedFromVictimModel) {
  // with zero D learning rate the D trunk equals M_t + u_v after a round
  FedFixture f;
  auto acfg = f.attack(AttackMode::passive);
  acfg.d_learning_rate = 0.0f;
  auto st = make_attack_state(f.models.discriminator, f.models.generator, acfg);
  std::vector<ClientUpdate> ups;
  for (int k = 0; k < 3; ++k) {
    Rng rng = client_rng(f.cfg.seed, k, 0);
    ups.push_back(local_train(f.models.classifier, f.clients[std::size_t(k)], 1, 10, f.cfg.sgd, rng));
  }
  Rng rng(1);
  const auto heads = st.d.params().at(std::string(kHeadReal) + ".weight");
  passive_attack_round(st, f.models.classifier, ups, f.test.images, acfg, f.inversion(), rng);
  const auto expect = axpy(f.models.classifier.params(), ups[1].delta);
  for (const auto& [name, t] : expect) EXPECT_EQ(st.d.params().at(name), t) << name;
  EXPECT_EQ(st.d.params().at(std::string(kHeadReal) + ".weight"), heads);
}

TEST(ActiveAttack, IsolatesVictimAndDiverges) {
  FedFixture f;
  f.cfg.rounds = 4;
  const auto acfg = f.attack(AttackMode::active);
  MganObserver obs(make_attack_state(f.models.discriminator, f.models.generator, acfg), acfg,
                   f.inversion(), f.test.images, 1);
  std::vector<AttackRoundReport> reps;
  obs.on_round([&](const AttackRoundReport& r, const AttackState&) { reps.push_back(r); });
  FedRunOptions opts;
  opts.observer = &obs;
  const auto res = run_federated(f.cfg, f.models.classifier, f.clients, f.test, opts);

  const auto& dist = obs.iso_distance();
  ASSERT_EQ(dist.size(), 4u);
  EXPECT_EQ(dist[0], 0.0);
  for (std::size_t i = 2; i < dist.size(); ++i) EXPECT_GT(dist[i], dist[i - 1]) << i;
  for (const auto& r : reps) {
    EXPECT_TRUE(r.representatives.empty());
    for (const auto& l : r.losses) EXPECT_FALSE(l.l_id.has_value());
  }
  // the shared model aggregated only clients 0 and 2
  EXPECT_EQ(res.trace.size(), 5u);
}

TEST(ActiveAttack, MissingVictimUpdate) {
  FedFixture f;
  const auto acfg = f.attack(AttackMode::active);
  auto st = make_attack_state(f.models.discriminator, f.models.generator, acfg);
  Rng rng(1);
  EXPECT_THROW(active_attack_round(st, ClientUpdate{}, f.test.images, acfg, rng), std::logic_error);
}

TEST(GanClient, DisabledIsHonest) {
  FedFixture f;
  auto spec = presets::small(5, 8);  // one extra output for the fake class
  const auto m = build_models(spec, 3);
  GanClientConfig gc;
  gc.adversary = 0;
  gc.target_class = 0;
  gc.enabled = false;
  FedRunOptions adv;
  adv.custom_clients[0] = GanClientAdversary(m.generator, gc, f.cfg.local_epochs, f.cfg.batch_size, f.cfg.sgd);
  const auto a = run_federated(f.cfg, m.classifier, f.clients, f.test, adv);
  const auto b = run_federated(f.cfg, m.classifier, f.clients, f.test);
  EXPECT_EQ(a.model.params(), b.model.params());

  gc.enabled = true;
  gc.g_steps = 2;
  gc.inject = 10;
  FedRunOptions on;
  on.custom_clients[0] = GanClientAdversary(m.generator, gc, f.cfg.local_epochs, f.cfg.batch_size, f.cfg.sgd);
  const auto c = run_federated(f.cfg, m.classifier, f.clients, f.test, on);
  EXPECT_NE(c.model.params(), b.model.params());
}

}  // namespace mgan
