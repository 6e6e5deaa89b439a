#include <cmath>

#include "doctest.h"

#include "fp/generative.hpp"

using namespace fp;

namespace {

GenConfig tiny_gen() {
  GenConfig cfg;
  cfg.token_dim = 8;
  cfg.hidden = 32;
  cfg.blocks = 2;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.pos_embed_dim = 4;
  cfg.time_embed_dim = 16;
  cfg.mae_enc_blocks = 1;
  cfg.mae_dec_blocks = 1;
  return cfg;
}

// Synthetic latent dataset: smooth per-channel structure over a line of
// centres. Amplitude and phase vary per sample, so visible context is
// genuinely needed to reconstruct a masked token.
LatentSample synth_sample(int p, int d, double factor, double phase, Rng& rng,
                          int pos_embed_dim) {
  TokenField tf;
  tf.tokens = Tensor({p, d});
  for (int j = 0; j < p; ++j) {
    const double x = static_cast<double>(j) / p * 4.0;
    tf.centres.push_back({x, 0.1 * x, 0.0});
    tf.radii.push_back(0.3);
    tf.wall.push_back(0.2 + 0.1 * std::sin(x));
    for (int c = 0; c < d; ++c)
      tf.tokens.at(j, c) =
          factor * std::sin(0.5 * (c + 1) * x + phase + 0.3 * c) +
          0.05 * rng.normal();
  }
  Standardiser identity;
  identity.mean.assign(static_cast<std::size_t>(d), 0.0);
  identity.stddev.assign(static_cast<std::size_t>(d), 1.0);
  return prepare_latent_sample(tf, identity, pos_embed_dim);
}

std::vector<LatentSample> synth_dataset(int n, int p, int d, Rng& rng,
                                        int pos_embed_dim) {
  std::vector<LatentSample> out;
  for (int i = 0; i < n; ++i)
    out.push_back(synth_sample(p, d, 0.4 + 1.2 * rng.uniform(),
                               rng.uniform(0.0, 2.0 * M_PI), rng,
                               pos_embed_dim));
  return out;
}

struct GenFixture {
  FlowModel fm;
  MaeModel mae;
  std::vector<LatentSample> train, val;
  TrainResult fm_result, mae_result;
};

const GenFixture& trained_models() {
  static const GenFixture fixture = [] {
    GenFixture f;
    Rng rng(515);
    const GenConfig cfg = tiny_gen();
    f.train = synth_dataset(20, 24, cfg.token_dim, rng, cfg.pos_embed_dim);
    f.val = synth_dataset(12, 24, cfg.token_dim, rng, cfg.pos_embed_dim);

    f.fm = FlowModel::create(cfg, rng);
    f.fm.standardiser.mean.assign(8, 0.0);
    f.fm.standardiser.stddev.assign(8, 1.0);
    GenTrainConfig fm_cfg;
    fm_cfg.epochs = 100;  // 20 samples / batch 4 -> 500 steps
    fm_cfg.batch = 4;
    fm_cfg.lr = 3e-4;
    // EMA horizon sized to the toy step count.
    fm_cfg.ema_decay = 0.97;
    fm_cfg.ema_warmup = 50;
    f.fm_result = train_flow_model(f.fm, f.train, f.val, fm_cfg, rng);

    f.mae = MaeModel::create(cfg, rng);
    f.mae.standardiser = f.fm.standardiser;
    GenTrainConfig mae_cfg;
    mae_cfg.epochs = 60;
    mae_cfg.batch = 4;
    mae_cfg.lr = 1e-3;
    f.mae_result = train_mae_model(f.mae, f.train, f.val, mae_cfg, rng);
    return f;
  }();
  return fixture;
}

}  // namespace

TEST_CASE("interpolant endpoints are exact") {
  Rng rng(3);
  const Tensor z = Tensor::randn({5, 4}, rng);
  const Tensor eps = Tensor::randn({5, 4}, rng);
  CHECK(fm_interpolate(z, eps, 1.0).v == z.v);
  CHECK(fm_interpolate(z, eps, 0.0).v == eps.v);

  const Tensor two = Tensor::full({2, 2}, 2.0);
  const Tensor zero({2, 2});
  const Tensor mid = fm_interpolate(two, zero, 0.5);
  for (double x : mid.v) CHECK(x == doctest::Approx(1.0));

  CHECK_THROWS_AS(fm_interpolate(z, eps, -0.1), ConfigError);
  CHECK_THROWS_AS(fm_interpolate(z, eps, 1.1), ConfigError);
}

TEST_CASE("flow loss: an oracle that predicts z - eps scores zero") {
  Rng rng(7);
  const Tensor z = Tensor::randn({6, 4}, rng);
  const Tensor eps = Tensor::randn({6, 4}, rng);
  Tensor target = z;
  for (std::size_t i = 0; i < target.v.size(); ++i) target.v[i] -= eps.v[i];
  Tape t(true);
  const int loss = t.mse(t.constant(target), t.constant(target));
  CHECK(t.val(loss).v[0] == 0.0);
}

TEST_CASE("flow loss: the zero model scores ~2 on unit-variance data") {
  // A freshly initialised backbone outputs exactly zero, so its loss is a
  // Monte Carlo estimate of E[(z - eps)^2] = Var(z) + 1 = 2.
  Rng rng(11);
  const GenConfig cfg = tiny_gen();
  FlowModel model = FlowModel::create(cfg, rng);

  double acc = 0.0;
  int count = 0;
  const Tensor pos = position_features(
      {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}},
      {0.1, 0.2, 0.3, 0.4}, cfg.pos_embed_dim);
  for (int trial = 0; trial < 320; ++trial) {  // 320 * 32 elements = 10240 draws
    const Tensor z = Tensor::randn({4, 8}, rng);
    const Tensor eps = Tensor::randn({4, 8}, rng);
    const double time = rng.logit_normal();
    const Tensor pred = model.velocity(fm_interpolate(z, eps, time), time, pos);
    for (std::size_t i = 0; i < pred.v.size(); ++i) {
      const double d = pred.v[i] - (z.v[i] - eps.v[i]);
      acc += d * d;
      ++count;
    }
  }
  CHECK(acc / count == doctest::Approx(2.0).epsilon(0.05));
}

TEST_CASE("flow velocity: fresh model outputs exactly zero") {
  Rng rng(13);
  const GenConfig cfg = tiny_gen();
  const FlowModel model = FlowModel::create(cfg, rng);
  const Tensor z = Tensor::randn({5, 8}, rng);
  const Tensor pos = position_features({{0, 0, 0}, {1, 0, 0}, {2, 0, 0},
                                        {3, 0, 0}, {4, 0, 0}},
                                       {0.1, 0.1, 0.1, 0.1, 0.1},
                                       cfg.pos_embed_dim);
  const Tensor out = model.velocity(z, 0.3, pos);
  for (double x : out.v) CHECK(x == 0.0);
}

TEST_CASE("flow velocity: deterministic and permutation equivariant") {
  const auto& f = trained_models();
  const auto& sample = f.val.front();
  const Tensor a = f.fm.velocity(sample.tokens, 0.4, sample.pos_feat);
  const Tensor b = f.fm.velocity(sample.tokens, 0.4, sample.pos_feat);
  CHECK(a.v == b.v);

  // Permute tokens together with their positional context.
  const auto p = sample.tokens.rows();
  std::vector<int> perm(static_cast<std::size_t>(p));
  for (std::int64_t i = 0; i < p; ++i)
    perm[static_cast<std::size_t>(i)] = static_cast<int>((i * 7 + 3) % p);
  Tensor tok_p({p, sample.tokens.cols()}), pos_p({p, sample.pos_feat.cols()});
  for (std::int64_t i = 0; i < p; ++i) {
    std::copy(sample.tokens.row_ptr(perm[static_cast<std::size_t>(i)]),
              sample.tokens.row_ptr(perm[static_cast<std::size_t>(i)]) +
                  sample.tokens.cols(),
              tok_p.row_ptr(i));
    std::copy(sample.pos_feat.row_ptr(perm[static_cast<std::size_t>(i)]),
              sample.pos_feat.row_ptr(perm[static_cast<std::size_t>(i)]) +
                  sample.pos_feat.cols(),
              pos_p.row_ptr(i));
  }
  const Tensor out_p = f.fm.velocity(tok_p, 0.4, pos_p);
  for (std::int64_t i = 0; i < p; ++i)
    for (std::int64_t c = 0; c < a.cols(); ++c)
      CHECK(out_p.at(i, c) ==
            doctest::Approx(a.at(perm[static_cast<std::size_t>(i)], c)).epsilon(1e-10));
}

TEST_CASE("mae forward: empty mask is a no-op; counts match the mask") {
  Rng rng(17);
  const GenConfig cfg = tiny_gen();
  const MaeModel model = MaeModel::create(cfg, rng);

  // Empty mask: empty prediction set.
  {
    const Tensor tokens = Tensor::randn({6, 8}, rng);
    const Tensor pos = position_features({{0, 0, 0}, {1, 0, 0}, {2, 0, 0},
                                          {3, 0, 0}, {4, 0, 0}, {5, 0, 0}},
                                         {1, 1, 1, 1, 1, 1}, cfg.pos_embed_dim);
    const Tensor pred = model.predict(tokens, {0, 1, 2, 3, 4, 5}, {}, pos);
    CHECK(pred.rows() == 0);
  }

  // Half of 2500 tokens masked: exactly 1250 predictions.
  {
    const int p = 2500;
    GenConfig big = cfg;
    big.hidden = 16;
    big.mae_enc_blocks = 1;
    big.mae_dec_blocks = 1;
    Rng rng2(19);
    const MaeModel wide = MaeModel::create(big, rng2);
    Tensor tokens = Tensor::randn({p, 8}, rng2);
    std::vector<Vec3> centres(p);
    std::vector<double> wall(p, 0.5);
    for (int i = 0; i < p; ++i)
      centres[static_cast<std::size_t>(i)] = {static_cast<double>(i) * 0.01, 0, 0};
    const Tensor pos = position_features(centres, wall, big.pos_embed_dim);
    std::vector<int> visible, masked;
    for (int i = 0; i < p; ++i) (i % 2 ? masked : visible).push_back(i);
    const Tensor pred = wide.predict(tokens, visible, masked, pos);
    CHECK(pred.rows() == 1250);
    CHECK(pred.finite());
  }
}

TEST_CASE("mae forward: empty visible set is rejected") {
  Rng rng(23);
  const MaeModel model = MaeModel::create(tiny_gen(), rng);
  const Tensor tokens = Tensor::randn({4, 8}, rng);
  const Tensor pos = position_features({{0, 0, 0}, {1, 0, 0}, {2, 0, 0},
                                        {3, 0, 0}},
                                       {1, 1, 1, 1}, 4);
  CHECK_THROWS_AS(model.predict(tokens, {}, {0, 1, 2, 3}, pos), DataError);
}

TEST_CASE("mae loss: oracle zero, zero-predictor ~D, masked-only by design") {
  Rng rng(29);
  const Tensor truth = Tensor::randn({1000, 8}, rng);
  CHECK(mae_loss_value(truth, truth) == 0.0);

  const Tensor zeros({1000, 8});
  CHECK(mae_loss_value(zeros, truth) == doctest::Approx(8.0).epsilon(0.10));

  CHECK_THROWS_AS(mae_loss_value(Tensor({0, 8}), Tensor({0, 8})), ConfigError);

  // The loss reads only masked rows: corrupting a visible row of the full
  // prediction matrix cannot change it.
  Tensor full_pred = Tensor::randn({10, 8}, rng);
  const Tensor full_truth = Tensor::randn({10, 8}, rng);
  const std::vector<int> masked{1, 4, 7};
  auto select = [](const Tensor& m, const std::vector<int>& idx) {
    Tensor out({static_cast<std::int64_t>(idx.size()), m.cols()});
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy(m.row_ptr(idx[i]), m.row_ptr(idx[i]) + m.cols(),
                out.row_ptr(static_cast<std::int64_t>(i)));
    return out;
  };
  const double before =
      mae_loss_value(select(full_pred, masked), select(full_truth, masked));
  full_pred.at(0, 0) = 1e9;  // visible row
  const double after =
      mae_loss_value(select(full_pred, masked), select(full_truth, masked));
  CHECK(before == after);

  // Relabelling the masked set (order) leaves the loss unchanged.
  const std::vector<int> shuffled{7, 1, 4};
  CHECK(mae_loss_value(select(full_pred, shuffled), select(full_truth, shuffled)) ==
        doctest::Approx(before).epsilon(1e-12));
}

TEST_CASE("training: flow loss decreases over 500 steps (seed-fixed)") {
  const auto& f = trained_models();
  REQUIRE_FALSE(f.fm_result.aborted);
  REQUIRE(f.fm_result.log.size() >= 10);
  const double first = f.fm_result.log.front().train_loss;
  const double last = f.fm_result.log.back().train_loss;
  CHECK(last < first);
  CHECK(last < 0.75 * first);
}

TEST_CASE("training: mae loss decreases and best checkpoint is tracked") {
  const auto& f = trained_models();
  REQUIRE_FALSE(f.mae_result.aborted);
  CHECK(f.mae_result.log.back().train_loss < f.mae_result.log.front().train_loss);
  CHECK(f.mae_result.best_epoch >= 0);
  double best = 1e300;
  for (const auto& row : f.mae_result.log) best = std::min(best, row.val_loss);
  CHECK(f.mae_result.best_val == doctest::Approx(best));
}

TEST_CASE("training: fixed seed reproduces the loss curve bit-identically") {
  const GenConfig cfg = tiny_gen();
  auto run = [&] {
    Rng rng(31);
    auto train = synth_dataset(8, 16, cfg.token_dim, rng, cfg.pos_embed_dim);
    FlowModel model = FlowModel::create(cfg, rng);
    model.standardiser.mean.assign(8, 0.0);
    model.standardiser.stddev.assign(8, 1.0);
    GenTrainConfig tc;
    tc.epochs = 4;
    tc.batch = 4;
    TrainResult res = train_flow_model(model, train, {}, tc, rng);
    std::vector<double> losses;
    for (const auto& row : res.log) losses.push_back(row.train_loss);
    return losses;
  };
  CHECK(run() == run());
}

TEST_CASE("trained mae: masking more is harder on the same checkpoint") {
  const auto& f = trained_models();
  double heavy = 0.0, light = 0.0;
  for (std::uint64_t seed = 90; seed < 94; ++seed) {
    heavy += mae_validation_loss(f.mae, f.val, 0.9, seed);
    light += mae_validation_loss(f.mae, f.val, 0.1, seed);
  }
  CHECK(heavy > light);
}

TEST_CASE("trained flow: EMA weights validate no worse than 5% off raw") {
  const auto& f = trained_models();
  REQUIRE(f.fm.params.has_ema());
  const double raw = flow_validation_loss(f.fm, f.val, 1234);
  const FlowModel ema = f.fm.eval_copy();
  const double smoothed = flow_validation_loss(ema, f.val, 1234);
  CHECK(smoothed <= raw * 1.05);
}

TEST_CASE("standardiser: train-split statistics invert to 1e-10") {
  Rng rng(37);
  Tensor t1 = Tensor::randn({50, 8}, rng, 3.0);
  Tensor t2 = Tensor::randn({50, 8}, rng, 3.0);
  for (std::int64_t i = 0; i < t1.rows(); ++i) t1.at(i, 0) += 7.0;
  const Standardiser st = Standardiser::fit({&t1, &t2});
  const Tensor applied = st.apply(t1);
  const Tensor inverted = st.invert(applied);
  for (std::size_t i = 0; i < t1.v.size(); ++i)
    CHECK(std::abs(inverted.v[i] - t1.v[i]) < 1e-10);

  // Applied statistics are roughly centred/unit on the training split.
  double mean0 = 0.0;
  for (std::int64_t i = 0; i < applied.rows(); ++i) mean0 += applied.at(i, 0);
  CHECK(std::abs(mean0 / applied.rows()) < 1.5);
}

template <typename T>
constexpr bool carries_mass_flow = requires(T s) { s.mass_flow; };
template <typename T>
constexpr bool carries_inlet_profile = requires(T s) { s.inlet_profile; };
template <typename T>
constexpr bool carries_geometry = requires(T s) { s.tokens; s.pos_feat; };

TEST_CASE("generative inputs carry no boundary-condition channel") {
  // The latent sample is the complete model input: tokens plus geometry
  // features. There is no mass-flow or inlet-profile member to pass.
  static_assert(!carries_mass_flow<LatentSample>);
  static_assert(!carries_inlet_profile<LatentSample>);
  static_assert(carries_geometry<LatentSample>);
  // And the velocity model accepts exactly (state, time, geometry features).
  static_assert(std::is_invocable_r_v<Tensor, decltype(&FlowModel::velocity),
                                      const FlowModel&, const Tensor&, double,
                                      const Tensor&>);
  CHECK(true);
}
