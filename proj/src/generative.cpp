#include "fp/generative.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fp {

nlohmann::json GenConfig::to_json() const {
  nlohmann::json j;
  j["token_dim"] = token_dim;
  j["hidden"] = hidden;
  j["blocks"] = blocks;
  j["heads"] = heads;
  j["mlp_ratio"] = mlp_ratio;
  j["pos_embed_dim"] = pos_embed_dim;
  j["time_embed_dim"] = time_embed_dim;
  j["mae_enc_blocks"] = mae_enc_blocks;
  j["mae_dec_blocks"] = mae_dec_blocks;
  return j;
}

GenConfig GenConfig::from_json(const nlohmann::json& j) {
  GenConfig c;
  c.token_dim = j.at("token_dim");
  c.hidden = j.at("hidden");
  c.blocks = j.at("blocks");
  c.heads = j.at("heads");
  c.mlp_ratio = j.at("mlp_ratio");
  c.pos_embed_dim = j.at("pos_embed_dim");
  c.time_embed_dim = j.at("time_embed_dim");
  c.mae_enc_blocks = j.at("mae_enc_blocks");
  c.mae_dec_blocks = j.at("mae_dec_blocks");
  return c;
}

Standardiser Standardiser::fit(const std::vector<const Tensor*>& train_tokens) {
  if (train_tokens.empty()) throw DataError("standardiser: empty training set");
  const std::int64_t d = train_tokens.front()->cols();
  Standardiser st;
  st.mean.assign(static_cast<std::size_t>(d), 0.0);
  st.stddev.assign(static_cast<std::size_t>(d), 0.0);
  std::int64_t n = 0;
  for (const Tensor* t : train_tokens) {
    if (t->cols() != d) throw ConfigError("standardiser: channel mismatch");
    for (std::int64_t i = 0; i < t->rows(); ++i)
      for (std::int64_t c = 0; c < d; ++c)
        st.mean[static_cast<std::size_t>(c)] += t->at(i, c);
    n += t->rows();
  }
  for (auto& m : st.mean) m /= static_cast<double>(n);
  for (const Tensor* t : train_tokens)
    for (std::int64_t i = 0; i < t->rows(); ++i)
      for (std::int64_t c = 0; c < d; ++c) {
        const double dv = t->at(i, c) - st.mean[static_cast<std::size_t>(c)];
        st.stddev[static_cast<std::size_t>(c)] += dv * dv;
      }
  for (auto& s : st.stddev) s = std::max(std::sqrt(s / static_cast<double>(n)), 1e-8);
  return st;
}

Tensor Standardiser::apply(const Tensor& tokens) const {
  Tensor out = tokens;
  const std::int64_t d = tokens.cols();
  for (std::int64_t i = 0; i < tokens.rows(); ++i)
    for (std::int64_t c = 0; c < d; ++c)
      out.at(i, c) = (out.at(i, c) - mean[static_cast<std::size_t>(c)]) /
                     stddev[static_cast<std::size_t>(c)];
  return out;
}

Tensor Standardiser::invert(const Tensor& tokens) const {
  Tensor out = tokens;
  const std::int64_t d = tokens.cols();
  for (std::int64_t i = 0; i < tokens.rows(); ++i)
    for (std::int64_t c = 0; c < d; ++c)
      out.at(i, c) = out.at(i, c) * stddev[static_cast<std::size_t>(c)] +
                     mean[static_cast<std::size_t>(c)];
  return out;
}

nlohmann::json Standardiser::to_json() const {
  return nlohmann::json{{"mean", mean}, {"stddev", stddev}};
}

Standardiser Standardiser::from_json(const nlohmann::json& j) {
  Standardiser st;
  st.mean = j.at("mean").get<std::vector<double>>();
  st.stddev = j.at("stddev").get<std::vector<double>>();
  return st;
}

Tensor fm_interpolate(const Tensor& tokens, const Tensor& noise, double t) {
  if (!tokens.same_shape(noise))
    throw ConfigError("fm_interpolate: token/noise shape mismatch");
  if (t < 0.0 || t > 1.0)
    throw ConfigError("fm_interpolate: time must lie in [0, 1]");
  Tensor out = tokens;
  for (std::size_t i = 0; i < out.v.size(); ++i)
    out.v[i] = (1.0 - t) * noise.v[i] + t * tokens.v[i];
  return out;
}

LatentSample prepare_latent_sample(const TokenField& tf, const Standardiser& st,
                                   int pos_embed_dim) {
  LatentSample s;
  s.tokens = st.apply(tf.tokens);
  s.pos_feat = position_features(tf.centres, tf.wall, pos_embed_dim);
  return s;
}

// ---------------------------------------------------------------------------
// FlowModel

FlowModel FlowModel::create(const GenConfig& cfg, Rng& rng) {
  FlowModel m;
  m.cfg = cfg;
  auto& ps = m.params;
  ps.add("in.w", he_init({cfg.token_dim, cfg.hidden}, cfg.token_dim, rng));
  ps.add("in.b", Tensor({1, cfg.hidden}));
  ps.add("pos.w", he_init({4 * cfg.pos_embed_dim, cfg.hidden},
                          4 * cfg.pos_embed_dim, rng));
  ps.add("pos.b", Tensor({1, cfg.hidden}));
  for (int b = 0; b < cfg.blocks; ++b)
    adaln_block_init(ps, "blk" + std::to_string(b), cfg.hidden,
                     cfg.time_embed_dim, cfg.heads, cfg.mlp_ratio, rng);
  adaln_head_init(ps, "head", cfg.hidden, cfg.time_embed_dim, cfg.token_dim, rng);
  return m;
}

FlowModel FlowModel::from_bundle(ModelBundle bundle) {
  if (bundle.kind != "fm")
    throw DataError("checkpoint kind is '" + bundle.kind + "', expected fm");
  FlowModel m;
  m.cfg = GenConfig::from_json(bundle.config.at("gen"));
  m.standardiser = Standardiser::from_json(bundle.config.at("standardiser"));
  m.params = std::move(bundle.params);
  return m;
}

ModelBundle FlowModel::to_bundle() const {
  ModelBundle b;
  b.kind = "fm";
  b.config["gen"] = cfg.to_json();
  b.config["standardiser"] = standardiser.to_json();
  b.params = params;
  return b;
}

int FlowModel::forward_on_tape(Tape& t, ParamNodes& pn, int z_t, double time,
                               const Tensor& pos_feat) const {
  const int pos = t.constant(pos_feat);
  int x = t.add_rowvec(t.matmul(z_t, pn("in.w")), pn("in.b"));
  x = t.add(x, t.add_rowvec(t.matmul(pos, pn("pos.w")), pn("pos.b")));
  const int cond =
      t.constant(sinusoidal_embed(time, cfg.time_embed_dim));
  for (int b = 0; b < cfg.blocks; ++b)
    x = adaln_block(t, x, cond, pn, "blk" + std::to_string(b), cfg.heads);
  return adaln_head(t, x, cond, pn, "head");
}

Tensor FlowModel::velocity(const Tensor& z_t, double time,
                           const Tensor& pos_feat) const {
  Tape t(/*recording=*/false);
  ParamNodes pn(t, const_cast<ParameterSet&>(params));
  const int out = forward_on_tape(t, pn, t.constant(z_t), time, pos_feat);
  return t.val(out);
}

FlowModel FlowModel::eval_copy() const {
  FlowModel m;
  m.cfg = cfg;
  m.standardiser = standardiser;
  m.params = params.with_ema_values();
  m.params.drop_ema();
  return m;
}

// ---------------------------------------------------------------------------
// MaeModel

MaeModel MaeModel::create(const GenConfig& cfg, Rng& rng) {
  MaeModel m;
  m.cfg = cfg;
  auto& ps = m.params;
  ps.add("in.w", he_init({cfg.token_dim, cfg.hidden}, cfg.token_dim, rng));
  ps.add("in.b", Tensor({1, cfg.hidden}));
  ps.add("pos.w", he_init({4 * cfg.pos_embed_dim, cfg.hidden},
                          4 * cfg.pos_embed_dim, rng));
  ps.add("pos.b", Tensor({1, cfg.hidden}));
  ps.add("mask_token", Tensor::randn({1, cfg.hidden}, rng, 0.02));
  for (int b = 0; b < cfg.mae_enc_blocks; ++b)
    plain_block_init(ps, "enc" + std::to_string(b), cfg.hidden, cfg.heads,
                     cfg.mlp_ratio, rng);
  for (int b = 0; b < cfg.mae_dec_blocks; ++b)
    plain_block_init(ps, "dec" + std::to_string(b), cfg.hidden, cfg.heads,
                     cfg.mlp_ratio, rng);
  layer_norm_init(ps, "out.ln", cfg.hidden);
  ps.add("out.w", he_init({cfg.hidden, cfg.token_dim}, cfg.hidden, rng));
  ps.add("out.b", Tensor({1, cfg.token_dim}));
  return m;
}

MaeModel MaeModel::from_bundle(ModelBundle bundle) {
  if (bundle.kind != "mae")
    throw DataError("checkpoint kind is '" + bundle.kind + "', expected mae");
  MaeModel m;
  m.cfg = GenConfig::from_json(bundle.config.at("gen"));
  m.standardiser = Standardiser::from_json(bundle.config.at("standardiser"));
  m.params = std::move(bundle.params);
  return m;
}

ModelBundle MaeModel::to_bundle() const {
  ModelBundle b;
  b.kind = "mae";
  b.config["gen"] = cfg.to_json();
  b.config["standardiser"] = standardiser.to_json();
  b.params = params;
  return b;
}

int MaeModel::forward_on_tape(Tape& t, ParamNodes& pn, int tokens,
                              const std::vector<int>& visible,
                              const std::vector<int>& masked,
                              const Tensor& pos_feat) const {
  if (visible.empty())
    throw DataError("mae: at least one visible token is required");
  const auto p = static_cast<std::int64_t>(visible.size() + masked.size());
  if (pos_feat.rows() != p)
    throw ConfigError("mae: position features disagree with token count");

  const int pos_all = t.constant(pos_feat);
  const int pos_proj =
      t.add_rowvec(t.matmul(pos_all, pn("pos.w")), pn("pos.b"));
  const int pos_vis = t.select_rows(pos_proj, visible);

  // Encoder over visible tokens only.
  int xe = t.add_rowvec(t.matmul(t.select_rows(tokens, visible), pn("in.w")),
                        pn("in.b"));
  xe = t.add(xe, pos_vis);
  for (int b = 0; b < cfg.mae_enc_blocks; ++b)
    xe = plain_block(t, xe, pn, "enc" + std::to_string(b), cfg.heads);

  // Decoder sequence: encoded tokens at visible slots, the learned mask
  // token at missing slots, positions everywhere.
  int xd = t.scatter_rows(xe, visible, p);
  if (!masked.empty()) {
    const int mask_rows = t.broadcast_row(
        pn("mask_token"), static_cast<std::int64_t>(masked.size()));
    xd = t.add(xd, t.scatter_rows(mask_rows, masked, p));
  }
  xd = t.add(xd, pos_proj);
  for (int b = 0; b < cfg.mae_dec_blocks; ++b)
    xd = plain_block(t, xd, pn, "dec" + std::to_string(b), cfg.heads);

  const int normed = layer_norm_affine(t, xd, pn, "out.ln");
  const int pred = t.add_rowvec(t.matmul(normed, pn("out.w")), pn("out.b"));
  return t.select_rows(pred, masked);
}

Tensor MaeModel::predict(const Tensor& tokens, const std::vector<int>& visible,
                         const std::vector<int>& masked,
                         const Tensor& pos_feat) const {
  if (masked.empty()) return Tensor({0, cfg.token_dim});
  Tape t(/*recording=*/false);
  ParamNodes pn(t, const_cast<ParameterSet&>(params));
  const int out =
      forward_on_tape(t, pn, t.constant(tokens), visible, masked, pos_feat);
  return t.val(out);
}

double mae_loss_value(const Tensor& predicted_masked, const Tensor& true_masked) {
  if (!predicted_masked.same_shape(true_masked))
    throw ConfigError("mae loss: shape mismatch");
  if (predicted_masked.rows() == 0)
    throw ConfigError("mae loss: empty mask is undefined");
  double s = 0.0;
  for (std::size_t i = 0; i < predicted_masked.v.size(); ++i) {
    const double d = predicted_masked.v[i] - true_masked.v[i];
    s += d * d;
  }
  return s / static_cast<double>(predicted_masked.rows());
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct BestTracker {
  double best = std::numeric_limits<double>::max();
  int epoch = -1;
  std::vector<Tensor> values;
  std::vector<Tensor> ema;

  void consider(ParameterSet& ps, double val_loss, int e) {
    if (val_loss >= best) return;
    best = val_loss;
    epoch = e;
    values.clear();
    for (const auto& entry : ps.entries()) values.push_back(entry.value);
    ema = ps.has_ema() ? ps.ema() : std::vector<Tensor>{};
  }

  void restore(ParameterSet& ps) const {
    if (epoch < 0) return;
    for (std::size_t p = 0; p < ps.size(); ++p)
      ps.entries()[p].value = values[p];
    if (!ema.empty()) {
      ps.init_ema();
      ps.ema_mutable() = ema;
    }
  }
};

}  // namespace

double flow_validation_loss(const FlowModel& model,
                            const std::vector<LatentSample>& val,
                            std::uint64_t seed) {
  if (val.empty()) return 0.0;
  Rng rng(seed);
  double acc = 0.0;
  for (const auto& s : val) {
    const double time = rng.logit_normal();
    const Tensor noise = Tensor::randn(s.tokens.shape, rng);
    const Tensor z_t = fm_interpolate(s.tokens, noise, time);
    const Tensor pred = model.velocity(z_t, time, s.pos_feat);
    double sq = 0.0;
    for (std::size_t i = 0; i < pred.v.size(); ++i) {
      const double d = pred.v[i] - (s.tokens.v[i] - noise.v[i]);
      sq += d * d;
    }
    acc += sq / static_cast<double>(pred.numel());
  }
  return acc / static_cast<double>(val.size());
}

double mae_validation_loss(const MaeModel& model,
                           const std::vector<LatentSample>& val,
                           double mask_ratio, std::uint64_t seed) {
  if (val.empty()) return 0.0;
  Rng rng(seed);
  double acc = 0.0;
  for (const auto& s : val) {
    const auto p = static_cast<int>(s.tokens.rows());
    const int n_masked = std::clamp(
        static_cast<int>(std::lround(mask_ratio * p)), 1, p - 1);
    auto masked = rng.sample_without_replacement(p, n_masked);
    std::sort(masked.begin(), masked.end());
    std::vector<std::uint8_t> is_masked(static_cast<std::size_t>(p), 0);
    for (int m : masked) is_masked[static_cast<std::size_t>(m)] = 1;
    std::vector<int> visible;
    for (int i = 0; i < p; ++i)
      if (!is_masked[static_cast<std::size_t>(i)]) visible.push_back(i);

    const Tensor pred = model.predict(s.tokens, visible, masked, s.pos_feat);
    Tensor truth({static_cast<std::int64_t>(masked.size()), s.tokens.cols()});
    for (std::size_t i = 0; i < masked.size(); ++i)
      std::copy(s.tokens.row_ptr(masked[i]),
                s.tokens.row_ptr(masked[i]) + s.tokens.cols(),
                truth.row_ptr(static_cast<std::int64_t>(i)));
    acc += mae_loss_value(pred, truth);
  }
  return acc / static_cast<double>(val.size());
}

TrainResult train_flow_model(FlowModel& model,
                             const std::vector<LatentSample>& train,
                             const std::vector<LatentSample>& val,
                             const GenTrainConfig& cfg, Rng& rng) {
  if (train.empty()) throw DataError("train_flow_model: empty training set");
  AdamConfig adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;
  adam.clip_norm = cfg.clip_norm;

  TrainResult result;
  BestTracker best;
  double initial_loss = -1.0;
  const std::uint64_t val_seed = rng.next_u64();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = rng.permutation(static_cast<int>(train.size()));
    double epoch_loss = 0.0;
    std::int64_t steps = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      Tape t(/*recording=*/true);
      ParamNodes pn(t, model.params);
      int total = -1;
      for (std::size_t b = start; b < end; ++b) {
        const auto& s = train[static_cast<std::size_t>(order[b])];
        const double time = rng.logit_normal();
        const Tensor noise = Tensor::randn(s.tokens.shape, rng);
        const int z_t = t.constant(fm_interpolate(s.tokens, noise, time));
        const int pred = model.forward_on_tape(t, pn, z_t, time, s.pos_feat);
        Tensor target = s.tokens;
        for (std::size_t i = 0; i < target.v.size(); ++i)
          target.v[i] -= noise.v[i];
        const int loss = t.mse(pred, t.constant(std::move(target)));
        total = total < 0 ? loss : t.add(total, loss);
      }
      const int mean_loss = t.scale(total, 1.0 / static_cast<double>(end - start));
      const double loss_value = t.val(mean_loss).v[0];
      if (!std::isfinite(loss_value) ||
          (initial_loss > 0.0 && loss_value > cfg.divergence_factor * initial_loss)) {
        best.restore(model.params);
        result.aborted = true;
        return result;
      }
      if (initial_loss < 0.0) initial_loss = loss_value;
      model.params.zero_grad();
      t.backward(mean_loss);
      pn.accumulate_grads();
      if (adam_step(model.params, adam)) {
        if (model.params.step() == cfg.ema_warmup)
          model.params.init_ema();
        else if (model.params.step() > cfg.ema_warmup && model.params.has_ema())
          model.params.ema_update(cfg.ema_decay);
      }
      epoch_loss += loss_value;
      ++steps;
    }
    epoch_loss /= static_cast<double>(steps);
    const double val_loss =
        val.empty() ? epoch_loss : flow_validation_loss(model, val, val_seed);
    result.log.push_back({epoch, epoch_loss, val_loss, adam.lr});
    best.consider(model.params, val_loss, epoch);
  }
  for (const auto& e : model.params.entries())
    result.final_values.push_back(e.value);
  best.restore(model.params);
  result.best_epoch = best.epoch;
  result.best_val = best.best;
  return result;
}

TrainResult train_mae_model(MaeModel& model,
                            const std::vector<LatentSample>& train,
                            const std::vector<LatentSample>& val,
                            const GenTrainConfig& cfg, Rng& rng) {
  if (train.empty()) throw DataError("train_mae_model: empty training set");
  AdamConfig adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;
  adam.clip_norm = cfg.clip_norm;

  TrainResult result;
  BestTracker best;
  double initial_loss = -1.0;
  const std::uint64_t val_seed = rng.next_u64();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = rng.permutation(static_cast<int>(train.size()));
    double epoch_loss = 0.0;
    std::int64_t steps = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      // Fresh mask ratio per batch.
      const double ratio = rng.uniform(cfg.mask_ratio_lo, cfg.mask_ratio_hi);
      Tape t(/*recording=*/true);
      ParamNodes pn(t, model.params);
      int total = -1;
      for (std::size_t b = start; b < end; ++b) {
        const auto& s = train[static_cast<std::size_t>(order[b])];
        const auto p = static_cast<int>(s.tokens.rows());
        const int n_masked =
            std::clamp(static_cast<int>(std::lround(ratio * p)), 1, p - 1);
        auto masked = rng.sample_without_replacement(p, n_masked);
        std::sort(masked.begin(), masked.end());
        std::vector<std::uint8_t> is_masked(static_cast<std::size_t>(p), 0);
        for (int m : masked) is_masked[static_cast<std::size_t>(m)] = 1;
        std::vector<int> visible;
        for (int i = 0; i < p; ++i)
          if (!is_masked[static_cast<std::size_t>(i)]) visible.push_back(i);

        const int tokens = t.constant(s.tokens);
        const int pred =
            model.forward_on_tape(t, pn, tokens, visible, masked, s.pos_feat);
        const int truth = t.select_rows(tokens, masked);
        // mse * D = mean over masked tokens of the channel-sum error.
        const int loss =
            t.scale(t.mse(pred, truth), static_cast<double>(s.tokens.cols()));
        total = total < 0 ? loss : t.add(total, loss);
      }
      const int mean_loss = t.scale(total, 1.0 / static_cast<double>(end - start));
      const double loss_value = t.val(mean_loss).v[0];
      if (!std::isfinite(loss_value) ||
          (initial_loss > 0.0 && loss_value > cfg.divergence_factor * initial_loss)) {
        best.restore(model.params);
        result.aborted = true;
        return result;
      }
      if (initial_loss < 0.0) initial_loss = loss_value;
      model.params.zero_grad();
      t.backward(mean_loss);
      pn.accumulate_grads();
      adam_step(model.params, adam);
      epoch_loss += loss_value;
      ++steps;
    }
    epoch_loss /= static_cast<double>(steps);
    const double val_loss =
        val.empty() ? epoch_loss
                    : mae_validation_loss(model, val, 0.5, val_seed);
    result.log.push_back({epoch, epoch_loss, val_loss, adam.lr});
    best.consider(model.params, val_loss, epoch);
  }
  for (const auto& e : model.params.entries())
    result.final_values.push_back(e.value);
  best.restore(model.params);
  result.best_epoch = best.epoch;
  result.best_val = best.best;
  return result;
}

}  // namespace fp
