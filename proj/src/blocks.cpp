#include "fp/blocks.hpp"

#include <array>
#include <cmath>

#include "fp/errors.hpp"

namespace fp {

int apply_activation(Tape& t, int x, Activation act) {
  switch (act) {
    case Activation::Relu: return t.relu(x);
    case Activation::Silu: return t.silu(x);
    case Activation::Gelu: return t.gelu(x);
  }
  throw ConfigError("unknown activation");
}

Tensor sinusoidal_embed(double x, int dim, double base) {
  if (dim <= 0 || dim % 2 != 0)
    throw ConfigError("sinusoidal_embed: dim must be positive and even");
  Tensor out({1, dim});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq =
        std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
    out.v[static_cast<std::size_t>(2 * i)] = std::sin(x * freq);
    out.v[static_cast<std::size_t>(2 * i + 1)] = std::cos(x * freq);
  }
  return out;
}

Tensor sinusoidal_embed_multi(const std::vector<double>& xs, int dim,
                              double base) {
  Tensor out({1, static_cast<std::int64_t>(xs.size()) * dim});
  for (std::size_t c = 0; c < xs.size(); ++c) {
    const Tensor e = sinusoidal_embed(xs[c], dim, base);
    std::copy(e.v.begin(), e.v.end(),
              out.v.begin() + static_cast<std::ptrdiff_t>(c) * dim);
  }
  return out;
}

Tensor position_features(const std::vector<std::array<double, 3>>& centres,
                         const std::vector<double>& wall, int dim,
                         double base) {
  if (centres.size() != wall.size())
    throw ConfigError("position_features: centre/wall length mismatch");
  const auto p = static_cast<std::int64_t>(centres.size());
  Tensor out({p, 4 * dim});
  for (std::int64_t i = 0; i < p; ++i) {
    const auto& c = centres[static_cast<std::size_t>(i)];
    const Tensor e = sinusoidal_embed_multi(
        {c[0], c[1], c[2], wall[static_cast<std::size_t>(i)]}, dim, base);
    std::copy(e.v.begin(), e.v.end(), out.row_ptr(i));
  }
  return out;
}

void mlp_init(ParameterSet& ps, const std::string& prefix,
              const std::vector<std::int64_t>& widths, Rng& rng,
              bool zero_final) {
  if (widths.size() < 2) throw ConfigError("mlp_init: need at least 2 widths");
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::string layer = prefix + ".l" + std::to_string(l);
    const bool final_layer = (l + 2 == widths.size());
    Tensor w = (zero_final && final_layer)
                   ? Tensor({widths[l], widths[l + 1]})
                   : he_init({widths[l], widths[l + 1]}, widths[l], rng);
    ps.add(layer + ".w", std::move(w));
    ps.add(layer + ".b", Tensor({1, widths[l + 1]}));
  }
}

int mlp_forward(Tape& t, int x, ParamNodes& pn, const std::string& prefix,
                int n_layers, Activation act, bool activate_output) {
  int h = x;
  for (int l = 0; l < n_layers; ++l) {
    const std::string layer = prefix + ".l" + std::to_string(l);
    h = t.add_rowvec(t.matmul(h, pn(layer + ".w")), pn(layer + ".b"));
    if (l + 1 < n_layers || activate_output) h = apply_activation(t, h, act);
  }
  return h;
}

void layer_norm_init(ParameterSet& ps, const std::string& prefix,
                     std::int64_t dim) {
  ps.add(prefix + ".g", Tensor::full({1, dim}, 1.0));
  ps.add(prefix + ".b", Tensor({1, dim}));
}

int layer_norm_affine(Tape& t, int x, ParamNodes& pn,
                      const std::string& prefix, double eps) {
  const int normed = t.layer_norm_rows(x, eps);
  return t.add_rowvec(t.mul_rowvec(normed, pn(prefix + ".g")),
                      pn(prefix + ".b"));
}

namespace {

Tensor proj_init(std::int64_t in, std::int64_t out, Rng& rng) {
  return Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
}

}  // namespace

void attention_init(ParameterSet& ps, const std::string& prefix,
                    std::int64_t dim, int heads, Rng& rng) {
  if (heads <= 0 || dim % heads != 0)
    throw ConfigError("attention: model dim not divisible by head count");
  for (const char* name : {"wq", "wk", "wv", "wo"})
    ps.add(prefix + "." + name, proj_init(dim, dim, rng));
  for (const char* name : {"bq", "bk", "bv", "bo"})
    ps.add(prefix + "." + name, Tensor({1, dim}));
}

int multihead_attention(Tape& t, int q_in, int k_in, int v_in, ParamNodes& pn,
                        const std::string& prefix, int heads) {
  const std::int64_t dim = t.val(q_in).cols();
  if (heads <= 0 || dim % heads != 0)
    throw ConfigError("attention: model dim not divisible by head count");
  const std::int64_t dh = dim / heads;

  const int q = t.add_rowvec(t.matmul(q_in, pn(prefix + ".wq")), pn(prefix + ".bq"));
  const int k = t.add_rowvec(t.matmul(k_in, pn(prefix + ".wk")), pn(prefix + ".bk"));
  const int v = t.add_rowvec(t.matmul(v_in, pn(prefix + ".wv")), pn(prefix + ".bv"));

  int concat = -1;
  for (int h = 0; h < heads; ++h) {
    const std::int64_t start = h * dh;
    const int qh = t.slice_cols(q, start, dh);
    const int kh = t.slice_cols(k, start, dh);
    const int vh = t.slice_cols(v, start, dh);
    const int scores =
        t.scale(t.matmul(qh, t.transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
    const int weights = t.softmax_rows(scores);
    const int oh = t.matmul(weights, vh);
    concat = (concat < 0) ? oh : t.concat_cols(concat, oh);
  }
  return t.add_rowvec(t.matmul(concat, pn(prefix + ".wo")), pn(prefix + ".bo"));
}

int self_attention(Tape& t, int x, ParamNodes& pn, const std::string& prefix,
                   int heads) {
  return multihead_attention(t, x, x, x, pn, prefix, heads);
}

void plain_block_init(ParameterSet& ps, const std::string& prefix,
                      std::int64_t dim, int heads, int mlp_ratio, Rng& rng) {
  layer_norm_init(ps, prefix + ".ln1", dim);
  attention_init(ps, prefix + ".attn", dim, heads, rng);
  layer_norm_init(ps, prefix + ".ln2", dim);
  mlp_init(ps, prefix + ".mlp", {dim, dim * mlp_ratio, dim}, rng);
}

int plain_block(Tape& t, int x, ParamNodes& pn, const std::string& prefix,
                int heads) {
  const int h1 = layer_norm_affine(t, x, pn, prefix + ".ln1");
  int out = t.add(x, self_attention(t, h1, pn, prefix + ".attn", heads));
  const int h2 = layer_norm_affine(t, out, pn, prefix + ".ln2");
  return t.add(out, mlp_forward(t, h2, pn, prefix + ".mlp", 2, Activation::Gelu));
}

void adaln_block_init(ParameterSet& ps, const std::string& prefix,
                      std::int64_t dim, std::int64_t cond_dim, int heads,
                      int mlp_ratio, Rng& rng) {
  // 2-layer modulation MLP; zero final layer makes the block start as
  // identity (scales, shifts and gates all zero).
  mlp_init(ps, prefix + ".mod", {cond_dim, dim, 6 * dim}, rng,
           /*zero_final=*/true);
  attention_init(ps, prefix + ".attn", dim, heads, rng);
  mlp_init(ps, prefix + ".mlp", {dim, dim * mlp_ratio, dim}, rng);
}

namespace {

// h * (1 + scale) + shift, all row-broadcast.
int modulate(Tape& t, int h, int scale_vec, int shift_vec) {
  const std::int64_t dim = t.val(h).cols();
  const int ones = t.constant(Tensor::full({1, dim}, 1.0));
  return t.add_rowvec(t.mul_rowvec(h, t.add(ones, scale_vec)), shift_vec);
}

}  // namespace

int adaln_block(Tape& t, int x, int cond, ParamNodes& pn,
                const std::string& prefix, int heads) {
  const std::int64_t dim = t.val(x).cols();
  const int mod =
      mlp_forward(t, cond, pn, prefix + ".mod", 2, Activation::Silu);
  const int s1 = t.slice_cols(mod, 0, dim);
  const int h1 = t.slice_cols(mod, dim, dim);
  const int g1 = t.slice_cols(mod, 2 * dim, dim);
  const int s2 = t.slice_cols(mod, 3 * dim, dim);
  const int h2 = t.slice_cols(mod, 4 * dim, dim);
  const int g2 = t.slice_cols(mod, 5 * dim, dim);

  int out = x;
  {
    const int n = modulate(t, t.layer_norm_rows(out), s1, h1);
    const int a = self_attention(t, n, pn, prefix + ".attn", heads);
    out = t.add(out, t.mul_rowvec(a, g1));
  }
  {
    const int n = modulate(t, t.layer_norm_rows(out), s2, h2);
    const int m = mlp_forward(t, n, pn, prefix + ".mlp", 2, Activation::Gelu);
    out = t.add(out, t.mul_rowvec(m, g2));
  }
  return out;
}

void adaln_head_init(ParameterSet& ps, const std::string& prefix,
                     std::int64_t dim, std::int64_t cond_dim,
                     std::int64_t out_dim, Rng& rng) {
  mlp_init(ps, prefix + ".mod", {cond_dim, dim, 2 * dim}, rng,
           /*zero_final=*/true);
  // Zero-init output projection: a fresh model predicts exactly zero.
  ps.add(prefix + ".w", Tensor({dim, out_dim}));
  ps.add(prefix + ".b", Tensor({1, out_dim}));
}

int adaln_head(Tape& t, int x, int cond, ParamNodes& pn,
               const std::string& prefix) {
  const std::int64_t dim = t.val(x).cols();
  const int mod =
      mlp_forward(t, cond, pn, prefix + ".mod", 2, Activation::Silu);
  const int s = t.slice_cols(mod, 0, dim);
  const int h = t.slice_cols(mod, dim, dim);
  const int n = modulate(t, t.layer_norm_rows(x), s, h);
  return t.add_rowvec(t.matmul(n, pn(prefix + ".w")), pn(prefix + ".b"));
}

}  // namespace fp
