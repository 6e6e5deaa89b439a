#pragma once

#include <vector>

#include "fp/blocks.hpp"
#include "fp/checkpoint.hpp"
#include "fp/tokeniser.hpp"

namespace fp {

struct GenConfig {
  int token_dim = 256;
  int hidden = 512;
  int blocks = 8;         // depth of the flow backbone
  int heads = 8;
  int mlp_ratio = 4;
  int pos_embed_dim = 16;   // sinusoidal dims per geometry channel
  int time_embed_dim = 64;  // conditioning vector width
  int mae_enc_blocks = 4;
  int mae_dec_blocks = 4;

  nlohmann::json to_json() const;
  static GenConfig from_json(const nlohmann::json& j);
};

// Per-channel standardisation of tokens, fitted on the training split only.
struct Standardiser {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Standardiser fit(const std::vector<const Tensor*>& train_tokens);
  Tensor apply(const Tensor& tokens) const;
  Tensor invert(const Tensor& tokens) const;

  nlohmann::json to_json() const;
  static Standardiser from_json(const nlohmann::json& j);
};

// One sample prepared for the generative stage: standardised tokens plus
// sinusoidal features of centre positions and wall distances. The models
// accept nothing else; boundary-condition labels have no input channel.
struct LatentSample {
  Tensor tokens;    // [P, D], standardised
  Tensor pos_feat;  // [P, 4 * pos_embed_dim]
};

Tensor fm_interpolate(const Tensor& tokens, const Tensor& noise, double t);

// DiT-style velocity model over token fields: adaLN-Zero conditioning on
// the interpolation time, additive embeddings for geometry.
class FlowModel {
 public:
  GenConfig cfg;
  ParameterSet params;
  Standardiser standardiser;

  static FlowModel create(const GenConfig& cfg, Rng& rng);
  static FlowModel from_bundle(ModelBundle bundle);
  ModelBundle to_bundle() const;

  int forward_on_tape(Tape& t, ParamNodes& pn, int z_t, double time,
                      const Tensor& pos_feat) const;
  // Inference forward on this instance's parameters.
  Tensor velocity(const Tensor& z_t, double time, const Tensor& pos_feat) const;
  // Copy with EMA weights materialised (when present) for inference.
  FlowModel eval_copy() const;
};

// Transformer masked autoencoder over token fields. The encoder sees only
// visible tokens; the decoder fills the gaps with a learned mask token.
class MaeModel {
 public:
  GenConfig cfg;
  ParameterSet params;
  Standardiser standardiser;

  static MaeModel create(const GenConfig& cfg, Rng& rng);
  static MaeModel from_bundle(ModelBundle bundle);
  ModelBundle to_bundle() const;

  // Predictions for the masked rows only: [|masked|, D].
  int forward_on_tape(Tape& t, ParamNodes& pn, int tokens,
                      const std::vector<int>& visible,
                      const std::vector<int>& masked,
                      const Tensor& pos_feat) const;
  Tensor predict(const Tensor& tokens, const std::vector<int>& visible,
                 const std::vector<int>& masked, const Tensor& pos_feat) const;
};

// Mean over masked tokens of the squared channel-sum error; rejects an
// empty mask.
double mae_loss_value(const Tensor& predicted_masked, const Tensor& true_masked);

struct GenTrainConfig {
  int epochs = 50;
  int batch = 8;  // flow default; the MAE default is 24
  double lr = 1e-4;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double ema_decay = 0.9999;
  int ema_warmup = 1000;
  double mask_ratio_lo = 0.1;
  double mask_ratio_hi = 0.9;
  double divergence_factor = 1e3;  // abort when loss exceeds this x initial
};

TrainResult train_flow_model(FlowModel& model,
                             const std::vector<LatentSample>& train,
                             const std::vector<LatentSample>& val,
                             const GenTrainConfig& cfg, Rng& rng);

TrainResult train_mae_model(MaeModel& model,
                            const std::vector<LatentSample>& train,
                            const std::vector<LatentSample>& val,
                            const GenTrainConfig& cfg, Rng& rng);

// Deterministic validation losses (fresh seeded draws, fixed across epochs).
double flow_validation_loss(const FlowModel& model,
                            const std::vector<LatentSample>& val,
                            std::uint64_t seed);
double mae_validation_loss(const MaeModel& model,
                           const std::vector<LatentSample>& val,
                           double mask_ratio, std::uint64_t seed);

LatentSample prepare_latent_sample(const TokenField& tf,
                                   const Standardiser& st, int pos_embed_dim);

}  // namespace fp
