#include "fp/tokeniser.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "fp/binio.hpp"
#include "fp/blocks.hpp"

namespace fp {

namespace {

constexpr char kMagic[4] = {'F', 'P', 'T', 'K'};
constexpr std::uint32_t kVersion = 1;

std::vector<std::int64_t> enc_widths(const TokeniserConfig& cfg) {
  std::vector<std::int64_t> w{cfg.encoder_input_dim()};
  for (int h : cfg.enc_hidden) w.push_back(h);
  w.push_back(cfg.token_dim);
  return w;
}

std::vector<std::int64_t> dec_widths(const TokeniserConfig& cfg) {
  std::vector<std::int64_t> w{cfg.decoder_input_dim()};
  for (int h : cfg.dec_hidden) w.push_back(h);
  w.push_back(3);
  return w;
}

}  // namespace

nlohmann::json TokeniserConfig::to_json() const {
  nlohmann::json j;
  j["centres"] = centres;
  j["neighbours"] = neighbours;
  j["token_dim"] = token_dim;
  j["enc_hidden"] = enc_hidden;
  j["dec_hidden"] = dec_hidden;
  j["pool_max"] = pool_max;
  j["use_wall_distance"] = use_wall_distance;
  j["use_local_pos_in_decoder"] = use_local_pos_in_decoder;
  j["normalise_neighbourhood"] = normalise_neighbourhood;
  j["fallback_k"] = fallback_k;
  j["fps_seed_index"] = fps_seed_index;
  return j;
}

TokeniserConfig TokeniserConfig::from_json(const nlohmann::json& j) {
  TokeniserConfig c;
  c.centres = j.at("centres");
  c.neighbours = j.at("neighbours");
  c.token_dim = j.at("token_dim");
  c.enc_hidden = j.at("enc_hidden").get<std::vector<int>>();
  c.dec_hidden = j.at("dec_hidden").get<std::vector<int>>();
  c.pool_max = j.at("pool_max");
  c.use_wall_distance = j.at("use_wall_distance");
  c.use_local_pos_in_decoder = j.at("use_local_pos_in_decoder");
  c.normalise_neighbourhood = j.at("normalise_neighbourhood");
  c.fallback_k = j.at("fallback_k");
  c.fps_seed_index = j.at("fps_seed_index");
  return c;
}

void TokenField::validate() const {
  if (centres.empty()) throw DataError("token field is empty");
  if (radii.size() != centres.size() || wall.size() != centres.size())
    throw DataError("token field lengths disagree");
  if (tokens.rank() != 2 ||
      tokens.rows() != static_cast<std::int64_t>(centres.size()))
    throw DataError("token matrix shape disagrees with centre count");
  if (!tokens.finite()) throw NumericError("token field holds non-finite values");
}

void write_token_field(const std::string& path, const TokenField& tf) {
  tf.validate();
  atomic_write_file(path, [&](std::ostream& os) {
    BinWriter w(os);
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    w.u32(kByteOrderMarker);
    const auto p = static_cast<std::uint64_t>(tf.size());
    w.u64(p);
    w.u64(static_cast<std::uint64_t>(tf.tokens.cols()));
    w.f32_array(&tf.centres[0][0], 3 * p);
    w.f32_array(tf.radii.data(), p);
    w.f32_array(tf.tokens.v.data(), tf.tokens.v.size());
    w.f32_array(tf.wall.data(), p);
  });
}

TokenField read_token_field(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open token field: " + path);
  BinReader r(is, path);
  r.expect_magic(kMagic, "FPTK token field");
  r.expect_version(kVersion);
  r.expect_byte_order();
  const std::uint64_t p = r.u64();
  const std::uint64_t d = r.u64();
  if (p == 0 || p > (1ULL << 30) || d == 0 || d > (1ULL << 20))
    throw DataError(path + ": header corrupt");
  TokenField tf;
  tf.centres.resize(p);
  tf.radii.resize(p);
  tf.wall.resize(p);
  tf.tokens = Tensor({static_cast<std::int64_t>(p), static_cast<std::int64_t>(d)});
  r.f32_array(&tf.centres[0][0], 3 * p);
  r.f32_array(tf.radii.data(), p);
  r.f32_array(tf.tokens.v.data(), tf.tokens.v.size());
  r.f32_array(tf.wall.data(), p);
  return tf;
}

Tokeniser Tokeniser::create(const TokeniserConfig& cfg, Rng& rng) {
  Tokeniser t;
  t.cfg = cfg;
  mlp_init(t.params, "enc", enc_widths(cfg), rng);
  layer_norm_init(t.params, "enc.ln", cfg.token_dim);
  mlp_init(t.params, "dec", dec_widths(cfg), rng);
  return t;
}

Tokeniser Tokeniser::from_bundle(ModelBundle bundle) {
  if (bundle.kind != "tokeniser")
    throw DataError("checkpoint kind is '" + bundle.kind + "', expected tokeniser");
  Tokeniser t;
  t.cfg = TokeniserConfig::from_json(bundle.config.at("tokeniser"));
  t.params = std::move(bundle.params);
  return t;
}

ModelBundle Tokeniser::to_bundle() const {
  ModelBundle b;
  b.kind = "tokeniser";
  b.config["tokeniser"] = cfg.to_json();
  b.params = params;
  return b;
}

Tokeniser::Plan Tokeniser::plan(const PointCloudField& cloud) const {
  cloud.validate();
  if (cfg.centres > static_cast<int>(cloud.size()))
    throw DataError("tokeniser: more centres than points");
  if (cfg.neighbours > static_cast<int>(cloud.size()))
    throw DataError("tokeniser: neighbourhood larger than cloud");
  Plan p;
  p.centre_indices =
      farthest_point_sampling(cloud.positions, cfg.centres, cfg.fps_seed_index);
  const SpatialIndex index(cloud.positions);
  p.neighbourhoods.reserve(p.centre_indices.size());
  for (int c : p.centre_indices)
    p.neighbourhoods.push_back(build_neighbourhood(
        cloud.positions, index, c, cfg.neighbours, cfg.normalise_neighbourhood));
  return p;
}

Tensor Tokeniser::member_features(const Neighbourhood& nb,
                                  const std::vector<Vec3>& velocities,
                                  const std::vector<double>& wall,
                                  const Mat3* rotation) const {
  const auto k = static_cast<std::int64_t>(nb.members.size());
  Tensor f({k, cfg.encoder_input_dim()});
  for (std::int64_t i = 0; i < k; ++i) {
    const auto mi = static_cast<std::size_t>(nb.members[static_cast<std::size_t>(i)]);
    Vec3 local = nb.local_coords[static_cast<std::size_t>(i)];
    Vec3 vel = velocities[mi];
    if (rotation) {
      local = mat3_apply(*rotation, local);
      vel = mat3_apply(*rotation, vel);
    }
    double* row = f.row_ptr(i);
    row[0] = local[0];
    row[1] = local[1];
    row[2] = local[2];
    int col = 3;
    if (cfg.use_wall_distance) row[col++] = wall[mi];
    row[col + 0] = vel[0];
    row[col + 1] = vel[1];
    row[col + 2] = vel[2];
  }
  return f;
}

Tensor Tokeniser::member_geo(const Neighbourhood& nb,
                             const std::vector<double>& wall,
                             const Mat3* rotation) const {
  const auto k = static_cast<std::int64_t>(nb.members.size());
  if (!cfg.use_local_pos_in_decoder) return Tensor({k, 0});
  Tensor geo({k, cfg.use_wall_distance ? 4 : 3});
  for (std::int64_t i = 0; i < k; ++i) {
    const auto mi = static_cast<std::size_t>(nb.members[static_cast<std::size_t>(i)]);
    Vec3 local = nb.local_coords[static_cast<std::size_t>(i)];
    if (rotation) local = mat3_apply(*rotation, local);
    double* row = geo.row_ptr(i);
    row[0] = local[0];
    row[1] = local[1];
    row[2] = local[2];
    if (cfg.use_wall_distance) row[3] = wall[mi];
  }
  return geo;
}

int Tokeniser::encode_on_tape(Tape& t, ParamNodes& pn, int features) const {
  const int n_layers = static_cast<int>(cfg.enc_hidden.size()) + 1;
  const int pointwise =
      mlp_forward(t, features, pn, "enc", n_layers, Activation::Relu);
  const int pooled = cfg.pool_max ? t.max_rows(pointwise) : t.mean_rows(pointwise);
  return layer_norm_affine(t, pooled, pn, "enc.ln");
}

int Tokeniser::decode_on_tape(Tape& t, ParamNodes& pn, int token,
                              const Tensor& geo) const {
  const std::int64_t k = geo.rows();
  int input = t.broadcast_row(token, k);
  if (geo.cols() > 0) input = t.concat_cols(input, t.constant(geo));
  const int n_layers = static_cast<int>(cfg.dec_hidden.size()) + 1;
  return mlp_forward(t, input, pn, "dec", n_layers, Activation::Relu);
}

TokenField Tokeniser::encode(const PointCloudField& cloud) const {
  return encode_with_plan(cloud, plan(cloud));
}

TokenField Tokeniser::encode_with_plan(const PointCloudField& cloud,
                                       const Plan& pl) const {
  TokenField tf;
  const auto p = pl.neighbourhoods.size();
  tf.centres.resize(p);
  tf.radii.resize(p);
  tf.wall.resize(p);
  tf.tokens = Tensor({static_cast<std::int64_t>(p), cfg.token_dim});

  Tape t(/*recording=*/false);
  ParamNodes pn(t, const_cast<ParameterSet&>(params));
  for (std::size_t j = 0; j < p; ++j) {
    const Neighbourhood& nb = pl.neighbourhoods[j];
    tf.centres[j] = nb.centre_pos;
    tf.radii[j] = nb.radius;
    tf.wall[j] = cloud.wall_distance[static_cast<std::size_t>(nb.centre_index)];
    const int features = t.constant(
        member_features(nb, cloud.velocities, cloud.wall_distance));
    const int token = encode_on_tape(t, pn, features);
    std::copy(t.val(token).v.begin(), t.val(token).v.end(),
              tf.tokens.row_ptr(static_cast<std::int64_t>(j)));
  }
  if (!tf.tokens.finite())
    throw NumericError("tokeniser encode produced non-finite tokens");
  return tf;
}

std::vector<Vec3> Tokeniser::decode(const TokenField& tf,
                                    const std::vector<Vec3>& positions,
                                    const std::vector<double>& wall_distance) const {
  tf.validate();
  if (positions.size() != wall_distance.size())
    throw DataError("decode: positions/wall lengths disagree");
  const SpatialIndex index(positions);
  const int k = std::min<int>(cfg.neighbours, static_cast<int>(positions.size()));

  struct Contribution {
    double centre_dist;
    Vec3 value;
  };
  std::vector<std::vector<Contribution>> cover(positions.size());

  Tape t(/*recording=*/false);
  ParamNodes pn(t, const_cast<ParameterSet&>(params));
  for (std::size_t j = 0; j < tf.size(); ++j) {
    // Rebuild the membership from the stored centre; normalise with the
    // stored radius so decode matches encode bit for bit on the same cloud.
    Neighbourhood nb;
    nb.centre_pos = tf.centres[j];
    nb.radius = tf.radii[j];
    nb.members = index.knn(nb.centre_pos, k);
    nb.local_coords.reserve(nb.members.size());
    const double scale = cfg.normalise_neighbourhood ? 1.0 / nb.radius : 1.0;
    for (int m : nb.members)
      nb.local_coords.push_back(
          scale * (positions[static_cast<std::size_t>(m)] - nb.centre_pos));

    Tensor token_row({1, cfg.token_dim});
    std::copy(tf.tokens.row_ptr(static_cast<std::int64_t>(j)),
              tf.tokens.row_ptr(static_cast<std::int64_t>(j)) + cfg.token_dim,
              token_row.v.begin());
    const int pred = decode_on_tape(t, pn, t.constant(std::move(token_row)),
                                    member_geo(nb, wall_distance));
    const Tensor& pv = t.val(pred);
    for (std::size_t i = 0; i < nb.members.size(); ++i) {
      const auto mi = static_cast<std::size_t>(nb.members[i]);
      const double d = std::sqrt(dist2(positions[mi], nb.centre_pos));
      cover[mi].push_back(
          {d, {pv.at(static_cast<std::int64_t>(i), 0),
               pv.at(static_cast<std::int64_t>(i), 1),
               pv.at(static_cast<std::int64_t>(i), 2)}});
    }
    if (t.size() > 4096) {
      t.clear();
      pn.reset();
    }
  }

  std::vector<Vec3> out(positions.size(), Vec3{0.0, 0.0, 0.0});
  std::vector<Vec3> covered_pos;
  std::vector<Vec3> covered_val;
  std::vector<int> uncovered;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const auto& contribs = cover[i];
    if (contribs.empty()) {
      uncovered.push_back(static_cast<int>(i));
      continue;
    }
    // Exact centre hit takes that neighbourhood's prediction verbatim.
    const Contribution* exact = nullptr;
    for (const auto& c : contribs)
      if (c.centre_dist == 0.0) {
        exact = &c;
        break;
      }
    if (exact) {
      out[i] = exact->value;
    } else {
      std::vector<double> dist(contribs.size());
      for (std::size_t c = 0; c < contribs.size(); ++c)
        dist[c] = contribs[c].centre_dist;
      const auto w = idw_weights(dist, 1);
      Vec3 acc{0.0, 0.0, 0.0};
      for (std::size_t c = 0; c < contribs.size(); ++c)
        acc = acc + w[c] * contribs[c].value;
      out[i] = acc;
    }
    covered_pos.push_back(positions[i]);
    covered_val.push_back(out[i]);
  }

  if (!uncovered.empty()) {
    if (covered_pos.empty())
      throw DataError("decode: no point is covered by any neighbourhood");
    std::vector<Vec3> queries;
    queries.reserve(uncovered.size());
    for (int i : uncovered) queries.push_back(positions[static_cast<std::size_t>(i)]);
    const int fk = std::min<int>(cfg.fallback_k,
                                 static_cast<int>(covered_pos.size()));
    const auto filled = idw_interpolate(covered_pos, covered_val, queries, fk, 1);
    for (std::size_t u = 0; u < uncovered.size(); ++u)
      out[static_cast<std::size_t>(uncovered[u])] = filled[u];
  }
  return out;
}

TrainResult train_tokeniser(Tokeniser& model,
                            const std::vector<const SampleRecord*>& train,
                            const std::vector<const SampleRecord*>& val,
                            const TokeniserTrainConfig& cfg, Rng& rng) {
  if (train.empty()) throw DataError("train_tokeniser: empty training set");

  // Geometry plans are rotation-invariant, so they are built once and only
  // local coordinates and velocities are rotated per epoch.
  std::vector<Tokeniser::Plan> train_plans, val_plans;
  train_plans.reserve(train.size());
  for (const auto* s : train) train_plans.push_back(model.plan(s->field));
  val_plans.reserve(val.size());
  for (const auto* s : val) val_plans.push_back(model.plan(s->field));

  std::vector<std::pair<int, int>> pairs;  // (sample, neighbourhood)
  for (std::size_t s = 0; s < train.size(); ++s)
    for (std::size_t j = 0; j < train_plans[s].neighbourhoods.size(); ++j)
      pairs.emplace_back(static_cast<int>(s), static_cast<int>(j));

  AdamConfig adam;
  adam.lr = cfg.lr;

  auto neighbourhood_loss = [&](Tape& t, ParamNodes& pn, const Tokeniser::Plan& pl,
                                const SampleRecord& rec, int j,
                                const Mat3* rot) {
    const Neighbourhood& nb = pl.neighbourhoods[static_cast<std::size_t>(j)];
    Tensor features = model.member_features(nb, rec.field.velocities,
                                            rec.field.wall_distance, rot);
    const auto k = static_cast<std::int64_t>(nb.members.size());
    Tensor target({k, 3});
    const int in_dim = model.cfg.encoder_input_dim();
    for (std::int64_t i = 0; i < k; ++i)
      for (int c = 0; c < 3; ++c)
        target.at(i, c) = features.at(i, in_dim - 3 + c);
    const int token = model.encode_on_tape(t, pn, t.constant(std::move(features)));
    const int pred = model.decode_on_tape(
        t, pn, token, model.member_geo(nb, rec.field.wall_distance, rot));
    return t.mse(pred, t.constant(std::move(target)));
  };

  auto eval_val = [&]() {
    double acc = 0.0;
    std::int64_t count = 0;
    Tape t(/*recording=*/false);
    ParamNodes pn(t, model.params);
    for (std::size_t s = 0; s < val.size(); ++s) {
      for (std::size_t j = 0; j < val_plans[s].neighbourhoods.size(); ++j) {
        const int loss = neighbourhood_loss(t, pn, val_plans[s], *val[s],
                                            static_cast<int>(j), nullptr);
        acc += t.val(loss).v[0];
        ++count;
        if (t.size() > 4096) {
          t.clear();
          pn.reset();
        }
      }
    }
    return count ? acc / static_cast<double>(count) : 0.0;
  };

  TrainResult result;
  std::vector<Tensor> best_values;
  double best_train = std::numeric_limits<double>::max();
  int stale_epochs = 0;
  double lr = cfg.lr;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Per-sample rotations for this epoch, applied to positions and
    // velocities together.
    std::vector<Mat3> rotations(train.size());
    for (auto& r : rotations)
      r = cfg.augment_rotations
              ? rng.rotation_matrix()
              : Mat3{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};

    const auto order = rng.permutation(static_cast<int>(pairs.size()));
    double epoch_loss = 0.0;
    std::int64_t steps = 0;
    adam.lr = lr;

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      Tape t(/*recording=*/true);
      ParamNodes pn(t, model.params);
      int total = -1;
      for (std::size_t b = start; b < end; ++b) {
        const auto [s, j] = pairs[static_cast<std::size_t>(order[b])];
        const int loss =
            neighbourhood_loss(t, pn, train_plans[static_cast<std::size_t>(s)],
                               *train[static_cast<std::size_t>(s)], j,
                               &rotations[static_cast<std::size_t>(s)]);
        total = total < 0 ? loss : t.add(total, loss);
      }
      const int mean_loss =
          t.scale(total, 1.0 / static_cast<double>(end - start));
      const double loss_value = t.val(mean_loss).v[0];
      if (!std::isfinite(loss_value)) {
        // Keep the last good checkpoint and stop.
        if (!best_values.empty())
          for (std::size_t p = 0; p < model.params.size(); ++p)
            model.params.entries()[p].value = best_values[p];
        result.aborted = true;
        return result;
      }
      model.params.zero_grad();
      t.backward(mean_loss);
      pn.accumulate_grads();
      adam_step(model.params, adam);
      epoch_loss += loss_value;
      ++steps;
    }
    epoch_loss /= static_cast<double>(steps);

    const double val_loss = val.empty() ? epoch_loss : eval_val();
    result.log.push_back({epoch, epoch_loss, val_loss, lr});

    if (result.best_epoch < 0 || val_loss < result.best_val) {
      result.best_val = val_loss;
      result.best_epoch = epoch;
      best_values.clear();
      for (const auto& e : model.params.entries()) best_values.push_back(e.value);
    }

    // Plateau schedule on the training loss.
    if (epoch_loss < best_train * (1.0 - 1e-4)) {
      best_train = epoch_loss;
      stale_epochs = 0;
    } else if (++stale_epochs > cfg.plateau_patience) {
      lr = std::max(cfg.min_lr, lr * cfg.plateau_factor);
      stale_epochs = 0;
    }
  }

  for (const auto& e : model.params.entries())
    result.final_values.push_back(e.value);
  if (!best_values.empty())
    for (std::size_t p = 0; p < model.params.size(); ++p)
      model.params.entries()[p].value = best_values[p];
  return result;
}

}  // namespace fp
