#include "fp/inpaint.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fp {

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Mae: return "mae";
    case Strategy::MaeIterative: return "mae_iterative";
    case Strategy::FmEuler: return "fm_euler";
    case Strategy::FmEulerZero: return "fm_euler_zero";
    case Strategy::FmPhysics: return "fm_physics";
    case Strategy::FmSoft: return "fm_soft";
    case Strategy::FmIterative: return "fm_iterative";
    case Strategy::FmInitMae: return "fm_init_mae";
    case Strategy::BaselineMean: return "baseline_mean";
    case Strategy::BaselineInterp: return "baseline_interp";
  }
  throw ConfigError("unknown strategy");
}

Strategy strategy_from_name(const std::string& name) {
  for (Strategy s : all_strategies())
    if (strategy_name(s) == name) return s;
  throw ConfigError("unknown inpainting strategy: " + name);
}

const std::vector<Strategy>& all_strategies() {
  static const std::vector<Strategy> all{
      Strategy::Mae,          Strategy::MaeIterative, Strategy::FmEuler,
      Strategy::FmEulerZero,  Strategy::FmPhysics,    Strategy::FmSoft,
      Strategy::FmIterative,  Strategy::FmInitMae,    Strategy::BaselineMean,
      Strategy::BaselineInterp};
  return all;
}

bool strategy_needs_fm(Strategy s) {
  switch (s) {
    case Strategy::FmEuler:
    case Strategy::FmEulerZero:
    case Strategy::FmPhysics:
    case Strategy::FmSoft:
    case Strategy::FmIterative:
    case Strategy::FmInitMae: return true;
    default: return false;
  }
}

bool strategy_needs_mae(Strategy s) {
  return s == Strategy::Mae || s == Strategy::MaeIterative ||
         s == Strategy::FmInitMae;
}

void InpaintTask::validate() const {
  field.validate();
  const auto p = field.size();
  if (known.empty()) throw DataError("inpaint: the known set must not be empty");
  std::vector<std::uint8_t> seen(p, 0);
  for (int i : known) {
    if (i < 0 || static_cast<std::size_t>(i) >= p || seen[static_cast<std::size_t>(i)])
      throw DataError("inpaint: known set is not a valid partition");
    seen[static_cast<std::size_t>(i)] = 1;
  }
  for (int i : unknown) {
    if (i < 0 || static_cast<std::size_t>(i) >= p || seen[static_cast<std::size_t>(i)])
      throw DataError("inpaint: unknown set overlaps or is out of range");
    seen[static_cast<std::size_t>(i)] = 1;
  }
  for (auto s : seen)
    if (!s) throw DataError("inpaint: known and unknown sets must cover all tokens");
  if (positions.size() != wall.size() ||
      positions.size() != known_velocities.size() ||
      positions.size() != point_in_mask.size())
    throw DataError("inpaint: world-space arrays disagree in length");
}

std::vector<std::vector<int>> partition_shells(const TokenField& field,
                                               const std::vector<int>& known,
                                               const std::vector<int>& unknown,
                                               int steps) {
  std::vector<std::pair<double, int>> by_dist;
  by_dist.reserve(unknown.size());
  for (int u : unknown) {
    double best = std::numeric_limits<double>::max();
    for (int k : known)
      best = std::min(best, dist2(field.centres[static_cast<std::size_t>(u)],
                                  field.centres[static_cast<std::size_t>(k)]));
    by_dist.emplace_back(best, u);
  }
  std::sort(by_dist.begin(), by_dist.end());

  const int n = static_cast<int>(by_dist.size());
  const int shells = std::max(1, std::min(steps, n));
  std::vector<std::vector<int>> out(static_cast<std::size_t>(shells));
  const int base = n / shells;
  const int extra = n % shells;
  int cursor = 0;
  for (int s = 0; s < shells; ++s) {
    const int size = base + (s < extra ? 1 : 0);
    for (int i = 0; i < size; ++i)
      out[static_cast<std::size_t>(s)].push_back(by_dist[static_cast<std::size_t>(cursor++)].second);
  }
  return out;
}

namespace {

std::vector<int> nearest_centre_per_point(const std::vector<Vec3>& centres,
                                          const std::vector<Vec3>& positions) {
  const SpatialIndex index(centres);
  std::vector<int> out(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i)
    out[i] = index.knn(positions[i], 1)[0];
  return out;
}

std::uint64_t hash_indices(const std::vector<int>& idx) {
  std::uint64_t h = 1469598103934665603ULL;
  for (int i : idx) {
    for (int b = 0; b < 4; ++b) {
      h ^= (static_cast<std::uint32_t>(i) >> (8 * b)) & 0xFF;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace

MaskSpec build_sweep_mask(const TokenField& field,
                          const std::vector<Vec3>& positions, double fraction,
                          const Vec3& inlet, const Vec3& outlet) {
  if (fraction < 0.0 || fraction >= 1.0)
    throw ConfigError("mask fraction must lie in [0, 1)");
  const auto p = static_cast<int>(field.size());
  const int n_unknown =
      std::min(p - 1, static_cast<int>(std::lround(fraction * p)));

  // Known tokens grow outward from the ports, so sparse context means
  // "inlet and outlet only".
  std::vector<std::pair<double, int>> port_dist;
  port_dist.reserve(static_cast<std::size_t>(p));
  for (int j = 0; j < p; ++j) {
    const double d = std::min(dist2(field.centres[static_cast<std::size_t>(j)], inlet),
                              dist2(field.centres[static_cast<std::size_t>(j)], outlet));
    port_dist.emplace_back(d, j);
  }
  std::sort(port_dist.begin(), port_dist.end());

  MaskSpec mask;
  const int n_known = p - n_unknown;
  for (int i = 0; i < p; ++i) {
    const int j = port_dist[static_cast<std::size_t>(i)].second;
    (i < n_known ? mask.known : mask.unknown).push_back(j);
  }
  std::sort(mask.known.begin(), mask.known.end());
  std::sort(mask.unknown.begin(), mask.unknown.end());

  std::vector<std::uint8_t> token_masked(static_cast<std::size_t>(p), 0);
  for (int u : mask.unknown) token_masked[static_cast<std::size_t>(u)] = 1;
  const auto nearest = nearest_centre_per_point(field.centres, positions);
  mask.point_in_mask.resize(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i)
    mask.point_in_mask[i] = token_masked[static_cast<std::size_t>(nearest[i])];
  mask.hash = hash_indices(mask.unknown);
  return mask;
}

MaskSpec build_edit_mask(const TokenField& field,
                         const std::vector<Vec3>& positions,
                         const std::vector<std::uint8_t>& edit_region,
                         int neighbours) {
  if (edit_region.size() != positions.size())
    throw ConfigError("edit mask: region length mismatch");
  const SpatialIndex index(positions);
  const int k = std::min<int>(neighbours, static_cast<int>(positions.size()));
  MaskSpec mask;
  for (std::size_t j = 0; j < field.size(); ++j) {
    bool touches = false;
    for (int m : index.knn(field.centres[j], k))
      if (edit_region[static_cast<std::size_t>(m)]) {
        touches = true;
        break;
      }
    (touches ? mask.unknown : mask.known).push_back(static_cast<int>(j));
  }
  if (mask.known.empty())
    throw DataError("edit mask: edit region covers every token");
  mask.point_in_mask = edit_region;
  mask.hash = hash_indices(mask.unknown);
  return mask;
}

// ---------------------------------------------------------------------------

namespace {

struct Workspace {
  const InpaintTask& task;
  const InpaintBundles& bundles;
  int p;
  int d;
  Tensor tokens_std;     // input tokens standardised; unknown rows zeroed
  Tensor pos_feat;
  Rng rng;
  nlohmann::json diagnostics;

  Workspace(const InpaintTask& t, const InpaintBundles& b, int token_dim,
            const Standardiser& st, int pos_embed_dim)
      : task(t),
        bundles(b),
        p(static_cast<int>(t.field.size())),
        d(token_dim),
        rng(t.opts.seed) {
    tokens_std = st.apply(t.field.tokens);
    for (int u : t.unknown)
      std::fill(tokens_std.row_ptr(u), tokens_std.row_ptr(u) + d, 0.0);
    pos_feat = position_features(t.field.centres, t.field.wall, pos_embed_dim);
  }

  Tensor noise(bool force_zero) {
    if (task.opts.zero_noise || force_zero) return Tensor({p, d});
    return Tensor::randn({static_cast<std::int64_t>(p), static_cast<std::int64_t>(d)}, rng);
  }
};

// Completed = exact input rows on the known set, inverse-standardised
// predictions elsewhere. This is the single path that enforces the
// bit-exactness contract.
InpaintResult finalise_tokens(const InpaintTask& task, const Tokeniser& tok,
                              const Standardiser& st, const Tensor& state_std,
                              nlohmann::json diagnostics) {
  InpaintResult res;
  res.completed = task.field;
  const Tensor unstd = st.invert(state_std);
  for (int u : task.unknown)
    std::copy(unstd.row_ptr(u), unstd.row_ptr(u) + unstd.cols(),
              res.completed.tokens.row_ptr(u));
  for (int k : task.known)
    std::copy(task.field.tokens.row_ptr(k),
              task.field.tokens.row_ptr(k) + task.field.tokens.cols(),
              res.completed.tokens.row_ptr(k));
  res.velocities = tok.decode(res.completed, task.positions, task.wall);
  res.diagnostics = std::move(diagnostics);
  return res;
}

std::vector<int> complement(int p, const std::vector<std::uint8_t>& member) {
  std::vector<int> out;
  for (int i = 0; i < p; ++i)
    if (!member[static_cast<std::size_t>(i)]) out.push_back(i);
  return out;
}

// --- MAE strategies ---

Tensor mae_fill(Workspace& ws, const Tensor& state_std,
                const std::vector<int>& visible,
                const std::vector<int>& masked) {
  return ws.bundles.mae->predict(state_std, visible, masked, ws.pos_feat);
}

Tensor run_mae(Workspace& ws) {
  Tensor state = ws.tokens_std;
  const Tensor pred = mae_fill(ws, state, ws.task.known, ws.task.unknown);
  for (std::size_t i = 0; i < ws.task.unknown.size(); ++i)
    std::copy(pred.row_ptr(static_cast<std::int64_t>(i)),
              pred.row_ptr(static_cast<std::int64_t>(i)) + ws.d,
              state.row_ptr(ws.task.unknown[i]));
  return state;
}

Tensor run_mae_iterative(Workspace& ws) {
  const auto shells = partition_shells(ws.task.field, ws.task.known,
                                       ws.task.unknown, ws.task.opts.iterative_steps);
  Tensor state = ws.tokens_std;
  std::vector<int> visible = ws.task.known;
  std::vector<int> remaining = ws.task.unknown;
  for (const auto& shell : shells) {
    std::sort(visible.begin(), visible.end());
    std::sort(remaining.begin(), remaining.end());
    const Tensor pred = mae_fill(ws, state, visible, remaining);
    // Commit only the nearest shell, then promote it to the known side.
    std::vector<std::uint8_t> in_shell(static_cast<std::size_t>(ws.p), 0);
    for (int u : shell) in_shell[static_cast<std::size_t>(u)] = 1;
    for (std::size_t i = 0; i < remaining.size(); ++i) {
      const int u = remaining[i];
      if (!in_shell[static_cast<std::size_t>(u)]) continue;
      std::copy(pred.row_ptr(static_cast<std::int64_t>(i)),
                pred.row_ptr(static_cast<std::int64_t>(i)) + ws.d,
                state.row_ptr(u));
    }
    for (int u : shell) visible.push_back(u);
    std::vector<int> next;
    for (int u : remaining)
      if (!in_shell[static_cast<std::size_t>(u)]) next.push_back(u);
    remaining = std::move(next);
  }
  return state;
}

// --- FM machinery ---

struct PhysicsProjector;

struct FmRunConfig {
  double t0 = 0.0;
  int steps = 20;
  bool fresh_known_noise = false;  // redraw the known-path noise per step
  PhysicsProjector* projector = nullptr;
};

// Trace of the estimated Jacobian per stencil query; linear in the
// velocities, which makes the penalty quadratic.
std::vector<double> divergence_traces(const JacobianStencil& stencil,
                                      const std::vector<Vec3>& vel) {
  std::vector<double> tr(stencil.queries.size(), 0.0);
  const int k = stencil.k;
  for (std::size_t qi = 0; qi < stencil.queries.size(); ++qi) {
    if (stencil.degenerate[qi]) continue;
    const int q = stencil.queries[qi];
    const auto& ids = stencil.neighbours[qi];
    const auto& g = stencil.lsq_rows[qi];
    double s = 0.0;
    for (int c = 0; c < 3; ++c)
      for (int j = 0; j < k; ++j)
        s += g[static_cast<std::size_t>(c * k + j)] *
             (vel[static_cast<std::size_t>(ids[static_cast<std::size_t>(j)])][static_cast<std::size_t>(c)] -
              vel[static_cast<std::size_t>(q)][static_cast<std::size_t>(c)]);
    tr[qi] = s;
  }
  return tr;
}

double divergence_penalty_of(const JacobianStencil& stencil,
                             const std::vector<double>& tr) {
  double s = 0.0;
  std::int64_t n = 0;
  for (std::size_t qi = 0; qi < tr.size(); ++qi) {
    if (stencil.degenerate[qi]) continue;
    s += tr[qi] * tr[qi];
    ++n;
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

std::vector<Vec3> divergence_penalty_gradient(const JacobianStencil& stencil,
                                              const std::vector<double>& tr,
                                              std::size_t n_points) {
  std::vector<Vec3> grad(n_points, Vec3{0.0, 0.0, 0.0});
  const int k = stencil.k;
  std::int64_t n = 0;
  for (std::size_t qi = 0; qi < tr.size(); ++qi)
    if (!stencil.degenerate[qi]) ++n;
  const double c0 = n ? 2.0 / static_cast<double>(n) : 0.0;
  for (std::size_t qi = 0; qi < tr.size(); ++qi) {
    if (stencil.degenerate[qi]) continue;
    const int q = stencil.queries[qi];
    const auto& ids = stencil.neighbours[qi];
    const auto& g = stencil.lsq_rows[qi];
    const double w = c0 * tr[qi];
    for (int c = 0; c < 3; ++c) {
      double col_sum = 0.0;
      for (int j = 0; j < k; ++j) {
        const double gj = g[static_cast<std::size_t>(c * k + j)];
        grad[static_cast<std::size_t>(ids[static_cast<std::size_t>(j)])][static_cast<std::size_t>(c)] += w * gj;
        col_sum += gj;
      }
      grad[static_cast<std::size_t>(q)][static_cast<std::size_t>(c)] -= w * col_sum;
    }
  }
  return grad;
}

// Physics side constraint: a few line-search gradient steps on the mean
// squared local divergence of the decoded field, then re-encode.
struct PhysicsProjector {
  Workspace& ws;
  const Tokeniser& tok;
  JacobianStencil stencil;
  std::vector<Neighbourhood> memberships;  // rebuilt around token centres
  std::vector<double> penalty_trace;
  int warnings = 0;

  PhysicsProjector(Workspace& ws_in, const Tokeniser& tok_in)
      : ws(ws_in), tok(tok_in) {
    Rng stencil_rng(ws.task.opts.seed ^ 0x9E3779B97F4A7C15ULL);
    stencil = build_jacobian_stencil(ws.task.positions, ws.task.opts.penalty_knn,
                                     50000, stencil_rng);
    const SpatialIndex index(ws.task.positions);
    const int k = std::min<int>(tok.cfg.neighbours,
                                static_cast<int>(ws.task.positions.size()));
    memberships.reserve(ws.task.field.size());
    for (std::size_t j = 0; j < ws.task.field.size(); ++j) {
      Neighbourhood nb;
      nb.centre_pos = ws.task.field.centres[j];
      nb.radius = ws.task.field.radii[j];
      nb.members = index.knn(nb.centre_pos, k);
      const double scale =
          tok.cfg.normalise_neighbourhood ? 1.0 / nb.radius : 1.0;
      nb.local_coords.reserve(nb.members.size());
      for (int m : nb.members)
        nb.local_coords.push_back(
            scale * (ws.task.positions[static_cast<std::size_t>(m)] - nb.centre_pos));
      memberships.push_back(std::move(nb));
    }
  }

  Tensor encode_field(const std::vector<Vec3>& vel) const {
    Tensor out({static_cast<std::int64_t>(memberships.size()), tok.cfg.token_dim});
    Tape t(/*recording=*/false);
    ParamNodes pn(t, const_cast<ParameterSet&>(tok.params));
    for (std::size_t j = 0; j < memberships.size(); ++j) {
      const int features = t.constant(
          tok.member_features(memberships[j], vel, ws.task.wall));
      const int token = tok.encode_on_tape(t, pn, features);
      std::copy(t.val(token).v.begin(), t.val(token).v.end(),
                out.row_ptr(static_cast<std::int64_t>(j)));
      if (t.size() > 4096) {
        t.clear();
        pn.reset();
      }
    }
    return out;
  }

  // Project the t=1 extrapolation in world space; returns the projected
  // standardised tokens, or the input when the penalty would increase.
  Tensor project(const Tensor& z1_std) {
    const Standardiser& st = ws.bundles.fm->standardiser;
    TokenField tf = ws.task.field;
    tf.tokens = st.invert(z1_std);
    const auto decoded = tok.decode(tf, ws.task.positions, ws.task.wall);
    auto result = divergence_penalty_descent(stencil, decoded,
                                             ws.task.opts.penalty_steps,
                                             ws.task.opts.penalty_lr);
    for (double p : result.trace) penalty_trace.push_back(p);
    if (result.penalty_after > result.penalty_before) {
      ++warnings;
      return z1_std;
    }
    return st.apply(encode_field(result.velocities));
  }
};

// Euler integration of the learned velocity with explicit boundary pinning.
// Known tokens ride the interpolant path of a fixed noise draw and land on
// their encoded values at t = 1.
Tensor run_fm(Workspace& ws, Tensor state, const FmRunConfig& run,
              const std::vector<int>& known, const std::vector<int>& unknown) {
  const FlowModel& fm = *ws.bundles.fm;
  Tensor known_noise = ws.noise(false);
  const double dt = (1.0 - run.t0) / static_cast<double>(run.steps);

  auto pin_known = [&](double time) {
    for (int k : known) {
      const double* zk = ws.tokens_std.row_ptr(k);
      const double* nk = known_noise.row_ptr(k);
      double* row = state.row_ptr(k);
      if (ws.task.opts.hard_pin) {
        std::copy(zk, zk + ws.d, row);
      } else {
        for (int c = 0; c < ws.d; ++c)
          row[c] = (1.0 - time) * nk[c] + time * zk[c];
      }
    }
  };

  for (int step = 0; step < run.steps; ++step) {
    const double time = run.t0 + dt * static_cast<double>(step);
    if (run.fresh_known_noise && step > 0) known_noise = ws.noise(false);
    pin_known(time);

    const Tensor vel = fm.velocity(state, time, ws.pos_feat);
    if (!vel.finite())
      throw NumericError("fm integration diverged at step " +
                         std::to_string(step));

    const bool project = run.projector != nullptr &&
                         (step % std::max(1, ws.task.opts.penalty_every) == 0);
    if (project) {
      // Extrapolate to t=1, project in world space, then step toward the
      // corrected endpoint; with no projection this is plain Euler.
      Tensor z1 = state;
      for (std::size_t i = 0; i < z1.v.size(); ++i)
        z1.v[i] += (1.0 - time) * vel.v[i];
      const Tensor z1p = run.projector->project(z1);
      const double c = dt / (1.0 - time);
      for (int u : unknown) {
        double* row = state.row_ptr(u);
        const double* target = z1p.row_ptr(u);
        for (int cix = 0; cix < ws.d; ++cix)
          row[cix] += c * (target[cix] - row[cix]);
      }
    } else {
      for (int u : unknown) {
        double* row = state.row_ptr(u);
        const double* vrow = vel.row_ptr(u);
        for (int c = 0; c < ws.d; ++c) row[c] += dt * vrow[c];
      }
    }
  }
  // t = 1: exact landing.
  for (int k : known)
    std::copy(ws.tokens_std.row_ptr(k), ws.tokens_std.row_ptr(k) + ws.d,
              state.row_ptr(k));
  if (!state.finite()) throw NumericError("fm integration produced non-finite state");
  return state;
}

Tensor fm_initial_state(Workspace& ws, bool zero_init) {
  Tensor state = ws.tokens_std;
  const Tensor eps = ws.noise(zero_init);
  for (int u : ws.task.unknown)
    std::copy(eps.row_ptr(u), eps.row_ptr(u) + ws.d, state.row_ptr(u));
  return state;
}

Tensor run_fm_iterative(Workspace& ws) {
  const auto shells = partition_shells(ws.task.field, ws.task.known,
                                       ws.task.unknown, ws.task.opts.iterative_steps);
  Tensor committed = ws.tokens_std;
  std::vector<int> known = ws.task.known;
  std::vector<int> remaining = ws.task.unknown;
  for (const auto& shell : shells) {
    std::sort(known.begin(), known.end());
    std::sort(remaining.begin(), remaining.end());
    // Full integration for the remaining set, with committed shells pinned
    // as known context.
    Workspace sub = ws;  // shares task/bundles; reuses options
    sub.tokens_std = committed;
    Tensor state = committed;
    const Tensor eps = sub.noise(false);
    for (int u : remaining)
      std::copy(eps.row_ptr(u), eps.row_ptr(u) + ws.d, state.row_ptr(u));
    FmRunConfig run;
    run.steps = ws.task.opts.fm_steps;
    state = run_fm(sub, std::move(state), run, known, remaining);

    std::vector<std::uint8_t> in_shell(static_cast<std::size_t>(ws.p), 0);
    for (int u : shell) in_shell[static_cast<std::size_t>(u)] = 1;
    for (int u : shell) {
      std::copy(state.row_ptr(u), state.row_ptr(u) + ws.d, committed.row_ptr(u));
      known.push_back(u);
    }
    std::vector<int> next;
    for (int u : remaining)
      if (!in_shell[static_cast<std::size_t>(u)]) next.push_back(u);
    remaining = std::move(next);
    ws.rng = sub.rng;  // keep the draw sequence moving forward
  }
  return committed;
}

Tensor run_fm_init_mae(Workspace& ws) {
  const Tensor mae_pred = mae_fill(ws, ws.tokens_std, ws.task.known,
                                   ws.task.unknown);
  const double t0 = ws.task.opts.t_start;
  if (t0 < 0.0 || t0 > 1.0)
    throw ConfigError("fm_init_mae: t_start must lie in [0, 1]");

  Tensor state = ws.tokens_std;
  const Tensor eps = ws.noise(false);
  for (std::size_t i = 0; i < ws.task.unknown.size(); ++i) {
    const int u = ws.task.unknown[i];
    double* row = state.row_ptr(u);
    const double* mp = mae_pred.row_ptr(static_cast<std::int64_t>(i));
    const double* ep = eps.row_ptr(u);
    for (int c = 0; c < ws.d; ++c)
      row[c] = (1.0 - t0) * ep[c] + t0 * mp[c];
  }
  FmRunConfig run;
  run.t0 = t0;
  run.steps = std::max(
      1, static_cast<int>(std::lround(ws.task.opts.fm_steps * (1.0 - t0))));
  return run_fm(ws, std::move(state), run, ws.task.known, ws.task.unknown);
}

// --- world-space baselines ---

InpaintResult run_baseline(Workspace& ws, bool use_interp) {
  const InpaintTask& task = ws.task;
  std::vector<Vec3> known_pos;
  std::vector<Vec3> known_val;
  for (std::size_t i = 0; i < task.positions.size(); ++i)
    if (!task.point_in_mask[i]) {
      known_pos.push_back(task.positions[i]);
      known_val.push_back(task.known_velocities[i]);
    }
  if (known_pos.empty())
    throw DataError("baseline: no known-region points available");

  std::vector<Vec3> field = task.known_velocities;
  std::vector<Vec3> queries;
  std::vector<int> query_idx;
  for (std::size_t i = 0; i < task.positions.size(); ++i)
    if (task.point_in_mask[i]) {
      queries.push_back(task.positions[i]);
      query_idx.push_back(static_cast<int>(i));
    }

  if (use_interp) {
    const int k = std::min<int>(8, static_cast<int>(known_pos.size()));
    const auto filled = idw_interpolate(known_pos, known_val, queries, k, 1);
    for (std::size_t q = 0; q < queries.size(); ++q)
      field[static_cast<std::size_t>(query_idx[q])] = filled[q];
  } else {
    Vec3 mean{0.0, 0.0, 0.0};
    for (const auto& v : known_val) mean = mean + v;
    mean = (1.0 / static_cast<double>(known_val.size())) * mean;
    for (int qi : query_idx) field[static_cast<std::size_t>(qi)] = mean;
  }

  // Tokens for the unknown set are encoded from the assembled field so the
  // result still carries a complete TokenField.
  InpaintResult res;
  res.completed = task.field;
  {
    const Tokeniser& tok = *ws.bundles.tokeniser;
    const SpatialIndex index(task.positions);
    const int k = std::min<int>(tok.cfg.neighbours,
                                static_cast<int>(task.positions.size()));
    Tape t(/*recording=*/false);
    ParamNodes pn(t, const_cast<ParameterSet&>(tok.params));
    for (int u : task.unknown) {
      Neighbourhood nb;
      nb.centre_pos = task.field.centres[static_cast<std::size_t>(u)];
      nb.radius = task.field.radii[static_cast<std::size_t>(u)];
      nb.members = index.knn(nb.centre_pos, k);
      const double scale =
          tok.cfg.normalise_neighbourhood ? 1.0 / nb.radius : 1.0;
      for (int m : nb.members)
        nb.local_coords.push_back(
            scale * (task.positions[static_cast<std::size_t>(m)] - nb.centre_pos));
      const int features =
          t.constant(tok.member_features(nb, field, task.wall));
      const int token = tok.encode_on_tape(t, pn, features);
      std::copy(t.val(token).v.begin(), t.val(token).v.end(),
                res.completed.tokens.row_ptr(u));
      if (t.size() > 4096) {
        t.clear();
        pn.reset();
      }
    }
  }
  for (int k : task.known)
    std::copy(task.field.tokens.row_ptr(k),
              task.field.tokens.row_ptr(k) + task.field.tokens.cols(),
              res.completed.tokens.row_ptr(k));
  res.velocities = std::move(field);
  res.diagnostics["strategy"] = strategy_name(task.opts.strategy);
  return res;
}

}  // namespace

PenaltyDescentResult divergence_penalty_descent(const JacobianStencil& stencil,
                                                std::vector<Vec3> velocities,
                                                int steps, double lr) {
  PenaltyDescentResult out;
  auto tr = divergence_traces(stencil, velocities);
  out.penalty_before = divergence_penalty_of(stencil, tr);
  for (int step = 0; step < steps; ++step) {
    const auto grad =
        divergence_penalty_gradient(stencil, tr, velocities.size());
    const auto tr_g = divergence_traces(stencil, grad);
    double num = 0.0, den = 0.0;
    for (std::size_t qi = 0; qi < tr.size(); ++qi) {
      if (stencil.degenerate[qi]) continue;
      num += tr[qi] * tr_g[qi];
      den += tr_g[qi] * tr_g[qi];
    }
    if (den <= 0.0) break;
    const double alpha = lr * num / den;
    for (std::size_t i = 0; i < velocities.size(); ++i)
      velocities[i] = velocities[i] - alpha * grad[i];
    tr = divergence_traces(stencil, velocities);
    out.trace.push_back(divergence_penalty_of(stencil, tr));
  }
  out.penalty_after = divergence_penalty_of(stencil, tr);
  out.velocities = std::move(velocities);
  return out;
}

InpaintResult inpaint(const InpaintTask& task, const InpaintBundles& bundles) {
  task.validate();
  if (bundles.tokeniser == nullptr)
    throw ConfigError("inpaint: tokeniser bundle is required");
  const Strategy strategy = task.opts.strategy;
  if (strategy_needs_fm(strategy) && bundles.fm == nullptr)
    throw ConfigError("inpaint: strategy requires the flow-matching bundle");
  if (strategy_needs_mae(strategy) && bundles.mae == nullptr)
    throw ConfigError("inpaint: strategy requires the masked-autoencoder bundle");

  // The strategy's primary bundle supplies the token statistics; baselines
  // run in world space and use an identity transform.
  const int token_dim = static_cast<int>(task.field.tokens.cols());
  Standardiser identity;
  identity.mean.assign(static_cast<std::size_t>(token_dim), 0.0);
  identity.stddev.assign(static_cast<std::size_t>(token_dim), 1.0);
  const Standardiser& st_used =
      strategy_needs_fm(strategy)    ? bundles.fm->standardiser
      : strategy_needs_mae(strategy) ? bundles.mae->standardiser
                                     : identity;
  const int pos_dim = bundles.fm   ? bundles.fm->cfg.pos_embed_dim
                      : bundles.mae ? bundles.mae->cfg.pos_embed_dim
                                    : 8;

  Workspace ws(task, bundles, token_dim, st_used, pos_dim);
  ws.diagnostics["strategy"] = strategy_name(strategy);
  ws.diagnostics["seed"] = task.opts.seed;

  // No-op contract: nothing to inpaint.
  if (task.unknown.empty()) {
    InpaintResult res;
    res.completed = task.field;
    res.velocities =
        bundles.tokeniser->decode(res.completed, task.positions, task.wall);
    res.diagnostics = ws.diagnostics;
    return res;
  }

  switch (strategy) {
    case Strategy::BaselineMean:
      return run_baseline(ws, /*use_interp=*/false);
    case Strategy::BaselineInterp:
      return run_baseline(ws, /*use_interp=*/true);
    case Strategy::Mae:
      return finalise_tokens(task, *bundles.tokeniser, st_used, run_mae(ws),
                             ws.diagnostics);
    case Strategy::MaeIterative:
      return finalise_tokens(task, *bundles.tokeniser, st_used,
                             run_mae_iterative(ws), ws.diagnostics);
    case Strategy::FmEuler: {
      FmRunConfig run;
      run.steps = task.opts.fm_steps;
      Tensor state = run_fm(ws, fm_initial_state(ws, false), run, task.known,
                            task.unknown);
      ws.diagnostics["steps"] = run.steps;
      return finalise_tokens(task, *bundles.tokeniser, st_used, state,
                             ws.diagnostics);
    }
    case Strategy::FmEulerZero: {
      FmRunConfig run;
      run.steps = task.opts.fm_steps;
      InpaintTask zero_task = task;
      zero_task.opts.zero_noise = true;
      Workspace zws(zero_task, bundles, token_dim, st_used, pos_dim);
      Tensor state = run_fm(zws, fm_initial_state(zws, true), run, task.known,
                            task.unknown);
      ws.diagnostics["steps"] = run.steps;
      return finalise_tokens(task, *bundles.tokeniser, st_used, state,
                             ws.diagnostics);
    }
    case Strategy::FmSoft: {
      FmRunConfig run;
      run.steps = task.opts.fm_steps;
      run.fresh_known_noise = true;
      Tensor state = run_fm(ws, fm_initial_state(ws, false), run, task.known,
                            task.unknown);
      ws.diagnostics["steps"] = run.steps;
      return finalise_tokens(task, *bundles.tokeniser, st_used, state,
                             ws.diagnostics);
    }
    case Strategy::FmPhysics: {
      PhysicsProjector projector(ws, *bundles.tokeniser);
      FmRunConfig run;
      run.steps = task.opts.fm_steps;
      run.projector = &projector;
      Tensor state = run_fm(ws, fm_initial_state(ws, false), run, task.known,
                            task.unknown);
      ws.diagnostics["steps"] = run.steps;
      ws.diagnostics["penalty_trace"] = projector.penalty_trace;
      ws.diagnostics["projection_warnings"] = projector.warnings;
      return finalise_tokens(task, *bundles.tokeniser, st_used, state,
                             ws.diagnostics);
    }
    case Strategy::FmIterative: {
      Tensor state = run_fm_iterative(ws);
      return finalise_tokens(task, *bundles.tokeniser, st_used, state,
                             ws.diagnostics);
    }
    case Strategy::FmInitMae: {
      Tensor state = run_fm_init_mae(ws);
      ws.diagnostics["t_start"] = task.opts.t_start;
      return finalise_tokens(task, *bundles.tokeniser, st_used, state,
                             ws.diagnostics);
    }
    default:
      throw ConfigError("unhandled strategy");
  }
}

}  // namespace fp
