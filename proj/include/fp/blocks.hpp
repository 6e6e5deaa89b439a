#pragma once

#include <string>
#include <vector>

#include "fp/params.hpp"
#include "fp/tape.hpp"

namespace fp {

enum class Activation { Relu, Silu, Gelu };

int apply_activation(Tape& t, int x, Activation act);

// Sinusoidal features: interleaved sin/cos at geometric frequencies,
// base^(-2i/dim). dim must be even. x = 0 maps to (0, 1, 0, 1, ...).
Tensor sinusoidal_embed(double x, int dim, double base = 10000.0);

// Per-channel embedding concatenated over channels: [1, channels * dim].
Tensor sinusoidal_embed_multi(const std::vector<double>& xs, int dim,
                              double base = 10000.0);

// Token-position features for the generative models: positions (3 channels)
// plus wall distance (1 channel), each sinusoidally embedded -> [P, 4*dim].
Tensor position_features(const std::vector<std::array<double, 3>>& centres,
                         const std::vector<double>& wall, int dim,
                         double base = 10000.0);

// --- MLP: named linear stack, activation between layers ---
// Parameters: <prefix>.l<i>.w / .b. Hidden layers use He init.
void mlp_init(ParameterSet& ps, const std::string& prefix,
              const std::vector<std::int64_t>& widths, Rng& rng,
              bool zero_final = false);

// y = L_n(act(... act(L_1 x))). No trailing activation unless requested.
int mlp_forward(Tape& t, int x, ParamNodes& pn, const std::string& prefix,
                int n_layers, Activation act, bool activate_output = false);

// --- layer norm with learnable gain/bias over the last axis ---
void layer_norm_init(ParameterSet& ps, const std::string& prefix,
                     std::int64_t dim);
int layer_norm_affine(Tape& t, int x, ParamNodes& pn,
                      const std::string& prefix, double eps = 1e-5);

// --- multi-head self-attention ---
// Parameters: <prefix>.wq/.bq/.wk/.bk/.wv/.bv/.wo/.bo. Model dim must be
// divisible by the head count.
void attention_init(ParameterSet& ps, const std::string& prefix,
                    std::int64_t dim, int heads, Rng& rng);
int multihead_attention(Tape& t, int q, int k, int v, ParamNodes& pn,
                        const std::string& prefix, int heads);
int self_attention(Tape& t, int x, ParamNodes& pn, const std::string& prefix,
                   int heads);

// --- transformer blocks ---
// Plain pre-LN block (used by the masked autoencoder).
void plain_block_init(ParameterSet& ps, const std::string& prefix,
                      std::int64_t dim, int heads, int mlp_ratio, Rng& rng);
int plain_block(Tape& t, int x, ParamNodes& pn, const std::string& prefix,
                int heads);

// adaLN-Zero block: scale/shift/gate come from a 2-layer MLP on the
// conditioning vector; the final modulation layer is zero-initialised so a
// fresh block is the identity.
void adaln_block_init(ParameterSet& ps, const std::string& prefix,
                      std::int64_t dim, std::int64_t cond_dim, int heads,
                      int mlp_ratio, Rng& rng);
int adaln_block(Tape& t, int x, int cond, ParamNodes& pn,
                const std::string& prefix, int heads);

// Modulated output head: LN -> (1+scale, shift) from cond -> zero-init linear.
void adaln_head_init(ParameterSet& ps, const std::string& prefix,
                     std::int64_t dim, std::int64_t cond_dim,
                     std::int64_t out_dim, Rng& rng);
int adaln_head(Tape& t, int x, int cond, ParamNodes& pn,
               const std::string& prefix);

}  // namespace fp
