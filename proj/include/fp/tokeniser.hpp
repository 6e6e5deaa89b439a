#pragma once

#include <string>
#include <vector>

#include "fp/checkpoint.hpp"
#include "fp/data.hpp"
#include "fp/pointcloud.hpp"
#include "fp/tape.hpp"

namespace fp {

struct TokeniserConfig {
  int centres = 2500;        // tokens per sample
  int neighbours = 512;      // points per neighbourhood
  int token_dim = 256;
  std::vector<int> enc_hidden{64, 128};
  std::vector<int> dec_hidden{128, 64};
  bool pool_max = true;               // false: mean pooling
  bool use_wall_distance = true;      // feed wall distance to encoder+decoder
  bool use_local_pos_in_decoder = true;  // geometric descriptor before decode
  bool normalise_neighbourhood = true;   // local coords divided by the radius
  int fallback_k = 8;        // neighbours for the uncovered-point fill
  int fps_seed_index = 0;

  int encoder_input_dim() const { return use_wall_distance ? 7 : 6; }
  int decoder_input_dim() const {
    if (!use_local_pos_in_decoder) return token_dim;
    return token_dim + (use_wall_distance ? 4 : 3);
  }

  nlohmann::json to_json() const;
  static TokeniserConfig from_json(const nlohmann::json& j);
};

// Latent representation of one sample: P ball centres with one token each.
struct TokenField {
  std::vector<Vec3> centres;
  std::vector<double> radii;
  std::vector<double> wall;  // wall distance of each centre point
  Tensor tokens;             // [P, token_dim]

  std::size_t size() const { return centres.size(); }
  void validate() const;
};

// Token-field file: magic "FPTK", version u32, byte-order marker u32,
// P u64, D u64, then centres, radii, tokens and centre wall distances as
// little-endian f32.
void write_token_field(const std::string& path, const TokenField& tf);
TokenField read_token_field(const std::string& path);

class Tokeniser {
 public:
  TokeniserConfig cfg;
  ParameterSet params;

  static Tokeniser create(const TokeniserConfig& cfg, Rng& rng);
  static Tokeniser from_bundle(ModelBundle bundle);
  ModelBundle to_bundle() const;

  // FPS centres + K-NN memberships for one cloud; reusable across encodes
  // of the same geometry.
  struct Plan {
    std::vector<int> centre_indices;
    std::vector<Neighbourhood> neighbourhoods;
  };
  Plan plan(const PointCloudField& cloud) const;

  TokenField encode(const PointCloudField& cloud) const;
  TokenField encode_with_plan(const PointCloudField& cloud,
                              const Plan& plan) const;

  // Reconstruct velocities at every target point. Memberships are rebuilt
  // from the token centres over the target positions; overlapping
  // predictions blend by inverse distance to the centres, and points in no
  // neighbourhood are filled from the nearest predicted points.
  std::vector<Vec3> decode(const TokenField& tf,
                           const std::vector<Vec3>& positions,
                           const std::vector<double>& wall_distance) const;

  // --- tape-level pieces shared by training and the physics projection ---
  // features: [K, encoder_input_dim] rows of [local pos, (wall), velocity].
  int encode_on_tape(Tape& t, ParamNodes& pn, int features) const;
  // geo: [K, decoder extra dims] (may be 0 columns when disabled).
  int decode_on_tape(Tape& t, ParamNodes& pn, int token, const Tensor& geo) const;

  Tensor member_features(const Neighbourhood& nb,
                         const std::vector<Vec3>& velocities,
                         const std::vector<double>& wall,
                         const Mat3* rotation = nullptr) const;
  Tensor member_geo(const Neighbourhood& nb, const std::vector<double>& wall,
                    const Mat3* rotation = nullptr) const;
};

struct TokeniserTrainConfig {
  double lr = 1.6e-4;
  int batch = 64;  // neighbourhoods per step
  int epochs = 30;
  double plateau_factor = 0.5;
  int plateau_patience = 3;
  double min_lr = 1e-6;
  bool augment_rotations = true;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  int best_epoch = -1;
  double best_val = 0.0;
  bool aborted = false;
  // Final-epoch parameter values; the model itself ends on the best
  // validation checkpoint.
  std::vector<Tensor> final_values;
};

TrainResult train_tokeniser(Tokeniser& model,
                            const std::vector<const SampleRecord*>& train,
                            const std::vector<const SampleRecord*>& val,
                            const TokeniserTrainConfig& cfg, Rng& rng);

}  // namespace fp
