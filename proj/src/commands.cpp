#include "fp/commands.hpp"

#include <algorithm>
#include <atomic>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <thread>

#include "fp/binio.hpp"
#include "fp/data.hpp"
#include "fp/inpaint.hpp"

namespace fp {

namespace fs = std::filesystem;

namespace {

void parallel_for(std::int64_t n, int workers,
                  const std::function<void(std::int64_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::int64_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  const int count = static_cast<int>(std::min<std::int64_t>(workers, n));
  for (int w = 0; w < count; ++w)
    pool.emplace_back([&] {
      for (;;) {
        const std::int64_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", x);
  return buf;
}

void write_text_file(const std::string& path, const std::string& text) {
  atomic_write_file(path, [&](std::ostream& os) { os << text; });
}

void record_run_config(const RunConfig& cfg, const std::string& out_dir) {
  write_text_file(out_dir + "/config.txt", cfg.serialise());
}

std::uint64_t seed_of(const RunConfig& cfg) {
  return static_cast<std::uint64_t>(cfg.get_int("seed", 1));
}

std::string out_dir_of(const RunConfig& cfg) {
  std::string out = cfg.get_str("out", "");
  if (out.empty()) throw ConfigError("missing output directory (out)");
  const std::string root = cfg.get_str("out_root", "");
  if (!root.empty() && !fs::path(out).is_absolute())
    out = (fs::path(root) / out).string();
  return out;
}

struct DatasetIndex {
  struct Entry {
    std::int64_t id = 0;
    std::string file;
    double mass_flow = 0.0;
    std::string split;
  };
  struct PairEntry {
    std::int64_t id = 0;
    std::string source;
    std::string target;
  };
  std::string dir;
  std::vector<Entry> samples;
  std::vector<PairEntry> pairs;

  static DatasetIndex load(const std::string& dir) {
    std::ifstream is(dir + "/manifest.json");
    if (!is) throw DataError("missing dataset manifest in " + dir);
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError(dir + "/manifest.json: invalid JSON: " + e.what());
    }
    DatasetIndex idx;
    idx.dir = dir;
    for (const auto& row : j.at("samples")) {
      Entry e;
      e.id = row.at("sample_id");
      e.file = row.at("file");
      e.mass_flow = row.at("mass_flow");
      e.split = row.at("split");
      idx.samples.push_back(std::move(e));
    }
    if (j.contains("edit_pairs"))
      for (const auto& row : j.at("edit_pairs")) {
        PairEntry p;
        p.id = row.at("pair_id");
        p.source = row.at("source");
        p.target = row.at("target");
        idx.pairs.push_back(std::move(p));
      }
    return idx;
  }

  std::vector<Entry> with_split(const std::string& split) const {
    std::vector<Entry> out;
    for (const auto& e : samples)
      if (e.split == split) out.push_back(e);
    return out;
  }
};

TubeSpec random_tube_spec(const RunConfig& cfg, Rng& rng,
                          const std::vector<double>& flows) {
  TubeSpec spec;
  const double r_lo = cfg.get_double("data.radius_lo", 0.6);
  const double r_hi = cfg.get_double("data.radius_hi", 1.4);
  spec.radius = rng.uniform(r_lo, r_hi);
  spec.length = cfg.get_double("data.length_factor", 8.0) * spec.radius;
  const double curve_frac = cfg.get_double("data.curvature_frac", 0.35);
  spec.curvature = rng.uniform(-curve_frac, curve_frac) * M_PI / spec.length;
  spec.n_points = cfg.get_int("data.points", 2000);
  spec.wall_fraction = cfg.get_double("data.wall_fraction", 0.15);
  spec.mass_flow =
      flows[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(flows.size())))];
  spec.density = cfg.get_double("data.density", 1.0);
  spec.orientation = rng.rotation_matrix();
  return spec;
}

std::string sample_file_name(std::int64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "samples/s%05" PRId64 ".fpfd", id);
  return buf;
}

TokeniserConfig tokeniser_config_from(const RunConfig& cfg) {
  TokeniserConfig tc;
  tc.centres = static_cast<int>(cfg.get_int("tok.centres", 2500));
  tc.neighbours = static_cast<int>(cfg.get_int("tok.neighbours", 512));
  tc.token_dim = static_cast<int>(cfg.get_int("tok.token_dim", 256));
  tc.enc_hidden = cfg.get_ints("tok.enc_hidden", {64, 128});
  tc.dec_hidden = cfg.get_ints("tok.dec_hidden", {128, 64});
  const std::string pool = cfg.get_str("tok.pool", "max");
  if (pool != "max" && pool != "mean")
    throw ConfigError("tok.pool must be max or mean");
  tc.pool_max = pool == "max";
  tc.use_wall_distance = cfg.get_bool("tok.use_wall_distance", true);
  tc.use_local_pos_in_decoder = cfg.get_bool("tok.use_local_pos_in_decoder", true);
  tc.normalise_neighbourhood = cfg.get_bool("tok.normalise_neighbourhood", true);
  tc.fallback_k = static_cast<int>(cfg.get_int("tok.fallback_k", 8));
  tc.fps_seed_index = static_cast<int>(cfg.get_int("tok.fps_seed_index", 0));
  return tc;
}

GenConfig gen_config_from(const RunConfig& cfg, int token_dim) {
  GenConfig gc;
  gc.token_dim = token_dim;
  gc.hidden = static_cast<int>(cfg.get_int("gen.hidden", 512));
  gc.blocks = static_cast<int>(cfg.get_int("gen.blocks", 8));
  gc.heads = static_cast<int>(cfg.get_int("gen.heads", 8));
  gc.mlp_ratio = static_cast<int>(cfg.get_int("gen.mlp_ratio", 4));
  gc.pos_embed_dim = static_cast<int>(cfg.get_int("gen.pos_embed_dim", 16));
  gc.time_embed_dim = static_cast<int>(cfg.get_int("gen.time_embed_dim", 64));
  gc.mae_enc_blocks = static_cast<int>(cfg.get_int("gen.mae_enc_blocks", 4));
  gc.mae_dec_blocks = static_cast<int>(cfg.get_int("gen.mae_dec_blocks", 4));
  return gc;
}

void write_train_log(const std::string& path, const TrainResult& result) {
  std::string text = "# fp-train-log v1\nepoch,train_loss,val_loss,lr\n";
  for (const auto& row : result.log) {
    text += std::to_string(row.epoch) + "," + format_double(row.train_loss) +
            "," + format_double(row.val_loss) + "," + format_double(row.lr) +
            "\n";
  }
  write_text_file(path, text);
}

// Ports for mask anchoring; falls back to approximate diameter endpoints.
std::pair<Vec3, Vec3> mask_anchors(const SampleRecord& rec) {
  if (rec.inlet && rec.outlet) return {*rec.inlet, *rec.outlet};
  const auto& pos = rec.field.positions;
  const auto far1 = farthest_point_sampling(pos, 2, 0)[1];
  const auto far2 = farthest_point_sampling(pos, 2, far1)[1];
  return {pos[static_cast<std::size_t>(far1)], pos[static_cast<std::size_t>(far2)]};
}

struct LoadedBundles {
  std::unique_ptr<Tokeniser> tokeniser;
  std::unique_ptr<FlowModel> fm;
  std::unique_ptr<MaeModel> mae;
  InpaintBundles view() const {
    return InpaintBundles{tokeniser.get(), fm.get(), mae.get()};
  }
};

LoadedBundles load_bundles(const RunConfig& cfg,
                           const std::vector<Strategy>& strategies) {
  LoadedBundles b;
  const std::string tok_path = cfg.get_str("ckpt.tokeniser", "");
  if (tok_path.empty()) throw ConfigError("missing checkpoint path ckpt.tokeniser");
  b.tokeniser = std::make_unique<Tokeniser>(
      Tokeniser::from_bundle(read_checkpoint(tok_path)));
  const bool needs_fm = std::any_of(strategies.begin(), strategies.end(),
                                    strategy_needs_fm);
  const bool needs_mae = std::any_of(strategies.begin(), strategies.end(),
                                     strategy_needs_mae);
  if (needs_fm) {
    const std::string path = cfg.get_str("ckpt.fm", "");
    if (path.empty())
      throw ConfigError("selected strategies need ckpt.fm");
    // EMA weights are the inference weights when present.
    b.fm = std::make_unique<FlowModel>(
        FlowModel::from_bundle(read_checkpoint(path)).eval_copy());
  }
  if (needs_mae) {
    const std::string path = cfg.get_str("ckpt.mae", "");
    if (path.empty())
      throw ConfigError("selected strategies need ckpt.mae");
    b.mae = std::make_unique<MaeModel>(
        MaeModel::from_bundle(read_checkpoint(path)));
  }
  return b;
}

InpaintOptions inpaint_options_from(const RunConfig& cfg) {
  InpaintOptions o;
  o.fm_steps = static_cast<int>(cfg.get_int("inpaint.fm_steps", 20));
  o.iterative_steps = static_cast<int>(cfg.get_int("inpaint.iterative_steps", 5));
  o.penalty_steps = static_cast<int>(cfg.get_int("inpaint.penalty_steps", 5));
  o.penalty_lr = cfg.get_double("inpaint.penalty_lr", 1.0);
  o.penalty_every = static_cast<int>(cfg.get_int("inpaint.penalty_every", 1));
  o.penalty_knn = static_cast<int>(cfg.get_int("inpaint.penalty_knn", 10));
  o.t_start = cfg.get_double("inpaint.t_start", 0.7);
  o.hard_pin = cfg.get_bool("inpaint.hard_pin", false);
  return o;
}

std::vector<Strategy> strategies_from(const RunConfig& cfg) {
  const auto names = cfg.get_strs("inpaint.strategies", {"all"});
  if (names.size() == 1 && names[0] == "all") return all_strategies();
  std::vector<Strategy> out;
  for (const auto& n : names) out.push_back(strategy_from_name(n));
  return out;
}

}  // namespace

int resolved_workers(const RunConfig& cfg) {
  if (cfg.get_bool("deterministic", false)) return 1;
  const auto configured = cfg.get_int("workers", 0);
  if (configured > 0) return static_cast<int>(configured);
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// ---------------------------------------------------------------------------
// gen-data

void cmd_gen_data(const RunConfig& cfg) {
  const std::string out = out_dir_of(cfg);
  if (fs::exists(out) && !fs::is_empty(out) && !cfg.get_bool("force", false))
    throw DataError("output directory exists and is not empty (use --force): " + out);
  fs::create_directories(out + "/samples");

  const auto seed = seed_of(cfg);
  const Rng master(seed);
  const auto n = cfg.get_int("data.n_samples", 100);
  const auto flows = cfg.get_doubles("data.flows", {2.0, 2.5, 3.0, 3.5});
  if (flows.empty()) throw ConfigError("data.flows must not be empty");

  std::vector<SampleRecord> records(static_cast<std::size_t>(n));
  parallel_for(n, resolved_workers(cfg), [&](std::int64_t i) {
    Rng rng = master.child(static_cast<std::uint64_t>(i));
    const TubeSpec spec = random_tube_spec(cfg, rng, flows);
    records[static_cast<std::size_t>(i)] = generate_tube_flow(spec, rng);
    records[static_cast<std::size_t>(i)].sample_id = i + 1;
  });

  if (cfg.get_bool("data.flow_holdout", false)) {
    split_by_flow(records, cfg.get_doubles("data.train_flows", {2.0, 2.5, 3.0, 3.5}),
                  cfg.get_doubles("data.test_flows", {1.0, 1.5, 3.75, 4.0}),
                  cfg.get_double("data.split_val", 0.1));
  } else {
    split_sequential(records, cfg.get_double("data.split_test", 0.2),
                     cfg.get_double("data.split_val", 0.1),
                     cfg.get_double("data.split_train", 0.7));
  }

  parallel_for(n, resolved_workers(cfg), [&](std::int64_t i) {
    write_sample(out + "/" + sample_file_name(i + 1),
                 records[static_cast<std::size_t>(i)]);
  });

  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["seed"] = seed;
  manifest["samples"] = nlohmann::json::array();
  for (std::int64_t i = 0; i < n; ++i)
    manifest["samples"].push_back(manifest_entry(
        records[static_cast<std::size_t>(i)], sample_file_name(i + 1)));

  const auto n_pairs = cfg.get_int("data.edit_pairs", 0);
  if (n_pairs > 0) {
    fs::create_directories(out + "/pairs");
    manifest["edit_pairs"] = nlohmann::json::array();
    std::vector<EditPair> pairs(static_cast<std::size_t>(n_pairs));
    parallel_for(n_pairs, resolved_workers(cfg), [&](std::int64_t i) {
      Rng rng = master.child(0x70000000ULL + static_cast<std::uint64_t>(i));
      TubeSpec spec = random_tube_spec(cfg, rng, flows);
      spec.bulge_centre = rng.uniform(0.35, 0.65);
      spec.bulge_halfwidth = cfg.get_double("data.edit_bulge_width", 0.12);
      const double amp = cfg.get_double("data.edit_bulge_amp", 0.45);
      pairs[static_cast<std::size_t>(i)] =
          generate_edit_pair(spec, amp, rng,
                             cfg.get_double("data.edit_dilation", 0.05));
      auto& pair = pairs[static_cast<std::size_t>(i)];
      pair.source.sample_id = 10000 + i + 1;
      pair.target.sample_id = 20000 + i + 1;
      pair.source.split = pair.target.split = "test";
      char src[64], tgt[64];
      std::snprintf(src, sizeof(src), "pairs/e%04" PRId64 "_source.fpfd", i + 1);
      std::snprintf(tgt, sizeof(tgt), "pairs/e%04" PRId64 "_target.fpfd", i + 1);
      write_sample(out + "/" + src, pair.source);
      write_sample(out + "/" + tgt, pair.target);
    });
    for (std::int64_t i = 0; i < n_pairs; ++i) {
      char src[64], tgt[64];
      std::snprintf(src, sizeof(src), "pairs/e%04" PRId64 "_source.fpfd", i + 1);
      std::snprintf(tgt, sizeof(tgt), "pairs/e%04" PRId64 "_target.fpfd", i + 1);
      nlohmann::json row;
      row["pair_id"] = i + 1;
      row["source"] = src;
      row["target"] = tgt;
      manifest["edit_pairs"].push_back(row);
    }
  }

  write_text_file(out + "/manifest.json", manifest.dump(2) + "\n");
  record_run_config(cfg, out);
}

// ---------------------------------------------------------------------------
// train

namespace {

std::vector<SampleRecord> load_split(const DatasetIndex& idx,
                                     const std::string& split) {
  std::vector<SampleRecord> out;
  for (const auto& e : idx.with_split(split))
    out.push_back(read_sample(idx.dir + "/" + e.file));
  if (out.empty()) throw DataError("dataset has no '" + split + "' samples");
  return out;
}

void write_model_checkpoints(const std::string& out, const ModelBundle& best,
                             const TrainResult& result,
                             ParameterSet last_params) {
  write_checkpoint(out + "/checkpoint_best.fpnn", best);
  ModelBundle last = best;
  last.params = std::move(last_params);
  write_checkpoint(out + "/checkpoint_last.fpnn", last);
  write_train_log(out + "/log.csv", result);
}

}  // namespace

void cmd_train(const RunConfig& cfg, const std::string& kind) {
  const std::string out = out_dir_of(cfg);
  fs::create_directories(out);
  const std::string data_dir = cfg.get_str("data", "");
  if (data_dir.empty()) throw ConfigError("missing dataset directory (data)");
  const DatasetIndex idx = DatasetIndex::load(data_dir);
  Rng rng(seed_of(cfg));

  auto train_records = load_split(idx, "train");
  auto val_records = load_split(idx, "val");

  if (kind == "tokeniser") {
    Tokeniser model = Tokeniser::create(tokeniser_config_from(cfg), rng);
    TokeniserTrainConfig tc;
    tc.lr = cfg.get_double("tok.lr", 1.6e-4);
    tc.batch = static_cast<int>(cfg.get_int("tok.batch", 64));
    tc.epochs = static_cast<int>(cfg.get_int("tok.epochs", 30));
    tc.plateau_factor = cfg.get_double("tok.plateau_factor", 0.5);
    tc.plateau_patience = static_cast<int>(cfg.get_int("tok.plateau_patience", 3));
    tc.augment_rotations = cfg.get_bool("tok.augment", true);

    std::vector<const SampleRecord*> train_ptrs, val_ptrs;
    for (const auto& r : train_records) train_ptrs.push_back(&r);
    for (const auto& r : val_records) val_ptrs.push_back(&r);

    const TrainResult result = train_tokeniser(model, train_ptrs, val_ptrs, tc, rng);
    if (result.aborted)
      throw NumericError("tokeniser training aborted on non-finite loss");
    ParameterSet last = model.params;
    if (!result.final_values.empty())
      for (std::size_t p = 0; p < last.size(); ++p)
        last.entries()[p].value = result.final_values[p];
    write_model_checkpoints(out, model.to_bundle(), result, std::move(last));
    record_run_config(cfg, out);
    return;
  }

  if (kind != "fm" && kind != "mae")
    throw ConfigError("train kind must be tokeniser, fm or mae");

  const std::string tok_path = cfg.get_str("ckpt.tokeniser", "");
  if (tok_path.empty())
    throw ConfigError("training " + kind + " needs ckpt.tokeniser");
  const Tokeniser tokeniser =
      Tokeniser::from_bundle(read_checkpoint(tok_path));

  // Tokens are produced once by the frozen tokeniser: centring, a small
  // translation draw for training samples, then encode.
  const double tsigma = cfg.get_double("data.translation_sigma", 0.05);
  auto tokenise = [&](std::vector<SampleRecord>& records, bool train_split) {
    std::vector<TokenField> out(records.size());
    parallel_for(static_cast<std::int64_t>(records.size()),
                 resolved_workers(cfg), [&](std::int64_t i) {
                   auto& rec = records[static_cast<std::size_t>(i)];
                   centre_of_mass_centring(rec);
                   if (train_split && tsigma > 0.0) {
                     Rng trng = rng.child(0x51000000ULL + static_cast<std::uint64_t>(i));
                     const Vec3 shift{trng.normal(0.0, tsigma),
                                      trng.normal(0.0, tsigma),
                                      trng.normal(0.0, tsigma)};
                     for (auto& p : rec.field.positions) p = p + shift;
                   }
                   out[static_cast<std::size_t>(i)] = tokeniser.encode(rec.field);
                 });
    return out;
  };
  const auto train_tokens = tokenise(train_records, true);
  const auto val_tokens = tokenise(val_records, false);

  std::vector<const Tensor*> train_token_ptrs;
  for (const auto& tf : train_tokens) train_token_ptrs.push_back(&tf.tokens);
  const Standardiser st = Standardiser::fit(train_token_ptrs);

  const GenConfig gc = gen_config_from(cfg, tokeniser.cfg.token_dim);
  std::vector<LatentSample> train_latent, val_latent;
  for (const auto& tf : train_tokens)
    train_latent.push_back(prepare_latent_sample(tf, st, gc.pos_embed_dim));
  for (const auto& tf : val_tokens)
    val_latent.push_back(prepare_latent_sample(tf, st, gc.pos_embed_dim));

  GenTrainConfig gt;
  gt.weight_decay = cfg.get_double("gen.weight_decay", 0.01);
  gt.clip_norm = cfg.get_double("gen.clip", 1.0);
  if (kind == "fm") {
    gt.lr = cfg.get_double("fm.lr", 1e-4);
    gt.batch = static_cast<int>(cfg.get_int("fm.batch", 8));
    gt.epochs = static_cast<int>(cfg.get_int("fm.epochs", 50));
    gt.ema_decay = cfg.get_double("fm.ema_decay", 0.9999);
    gt.ema_warmup = static_cast<int>(cfg.get_int("fm.ema_warmup", 1000));
    FlowModel model = FlowModel::create(gc, rng);
    model.standardiser = st;
    const TrainResult result = train_flow_model(model, train_latent, val_latent, gt, rng);
    if (result.aborted)
      throw NumericError("flow training aborted (divergence or non-finite loss)");
    ParameterSet last = model.params;
    if (!result.final_values.empty())
      for (std::size_t p = 0; p < last.size(); ++p)
        last.entries()[p].value = result.final_values[p];
    write_model_checkpoints(out, model.to_bundle(), result, std::move(last));
  } else {
    gt.lr = cfg.get_double("mae.lr", 4e-4);
    gt.batch = static_cast<int>(cfg.get_int("mae.batch", 24));
    gt.epochs = static_cast<int>(cfg.get_int("mae.epochs", 50));
    gt.mask_ratio_lo = cfg.get_double("mae.mask_lo", 0.1);
    gt.mask_ratio_hi = cfg.get_double("mae.mask_hi", 0.9);
    MaeModel model = MaeModel::create(gc, rng);
    model.standardiser = st;
    const TrainResult result = train_mae_model(model, train_latent, val_latent, gt, rng);
    if (result.aborted)
      throw NumericError("mae training aborted (divergence or non-finite loss)");
    ParameterSet last = model.params;
    if (!result.final_values.empty())
      for (std::size_t p = 0; p < last.size(); ++p)
        last.entries()[p].value = result.final_values[p];
    write_model_checkpoints(out, model.to_bundle(), result, std::move(last));
  }
  record_run_config(cfg, out);
}

// ---------------------------------------------------------------------------
// inpaint

namespace {

struct PredictionRow {
  nlohmann::json index_entry;
  std::string diagnostics_line;
};

std::string fraction_tag(double fraction) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "f%03d",
                static_cast<int>(std::lround(fraction * 100)));
  return buf;
}

}  // namespace

void cmd_inpaint(const RunConfig& cfg) {
  const std::string out = out_dir_of(cfg);
  fs::create_directories(out + "/fields");
  fs::create_directories(out + "/masks");
  const std::string data_dir = cfg.get_str("data", "");
  if (data_dir.empty()) throw ConfigError("missing dataset directory (data)");
  const DatasetIndex idx = DatasetIndex::load(data_dir);

  const auto strategies = strategies_from(cfg);
  const LoadedBundles bundles = load_bundles(cfg, strategies);
  const Tokeniser& tokeniser = *bundles.tokeniser;
  const InpaintOptions base_opts = inpaint_options_from(cfg);
  const auto seed = seed_of(cfg);
  const Rng master(seed);
  const std::string mode = cfg.get_str("mode", "sweep");

  std::vector<PredictionRow> rows;
  std::mutex rows_mutex;
  auto push_row = [&](nlohmann::json entry, const nlohmann::json& diag) {
    std::lock_guard<std::mutex> lock(rows_mutex);
    rows.push_back({std::move(entry), diag.dump()});
  };

  if (mode == "sweep") {
    auto test_entries = idx.with_split("test");
    const auto cap = cfg.get_int("inpaint.max_samples", 20);
    if (static_cast<std::int64_t>(test_entries.size()) > cap)
      test_entries.resize(static_cast<std::size_t>(cap));
    if (test_entries.empty()) throw DataError("no test samples to inpaint");
    const auto fractions = cfg.get_doubles(
        "inpaint.fractions", {0.05, 0.25, 0.5, 0.75, 0.9, 0.99});

    parallel_for(static_cast<std::int64_t>(test_entries.size()),
                 resolved_workers(cfg), [&](std::int64_t ti) {
      const auto& entry = test_entries[static_cast<std::size_t>(ti)];
      SampleRecord rec = read_sample(data_dir + "/" + entry.file);
      centre_of_mass_centring(rec);
      const TokenField truth = tokeniser.encode(rec.field);
      const auto anchors = mask_anchors(rec);

      for (std::size_t fi = 0; fi < fractions.size(); ++fi) {
        const double fraction = fractions[fi];
        const MaskSpec mask = build_sweep_mask(truth, rec.field.positions,
                                               fraction, anchors.first,
                                               anchors.second);
        char mask_name[64];
        std::snprintf(mask_name, sizeof(mask_name), "masks/s%05" PRId64 "_%s.json",
                      entry.id, fraction_tag(fraction).c_str());
        {
          nlohmann::json mj;
          mj["sample_id"] = entry.id;
          mj["mask_fraction"] = fraction;
          mj["known"] = mask.known;
          mj["unknown"] = mask.unknown;
          std::vector<int> pts;
          for (std::size_t i = 0; i < mask.point_in_mask.size(); ++i)
            if (mask.point_in_mask[i]) pts.push_back(static_cast<int>(i));
          mj["points_in_mask"] = pts;
          char hex[32];
          std::snprintf(hex, sizeof(hex), "%016llx",
                        static_cast<unsigned long long>(mask.hash));
          mj["mask_hash"] = hex;
          write_text_file(out + "/" + mask_name, mj.dump() + "\n");
        }

        InpaintTask task;
        task.field = truth;
        for (int u : mask.unknown)
          std::fill(task.field.tokens.row_ptr(u),
                    task.field.tokens.row_ptr(u) + task.field.tokens.cols(), 0.0);
        task.known = mask.known;
        task.unknown = mask.unknown;
        task.positions = rec.field.positions;
        task.wall = rec.field.wall_distance;
        task.known_velocities = rec.field.velocities;
        for (std::size_t i = 0; i < mask.point_in_mask.size(); ++i)
          if (mask.point_in_mask[i])
            task.known_velocities[i] = Vec3{0.0, 0.0, 0.0};
        task.point_in_mask = mask.point_in_mask;
        task.opts = base_opts;
        task.opts.seed = master.child(static_cast<std::uint64_t>(entry.id) * 131 +
                                      static_cast<std::uint64_t>(fi)).next_u64();

        for (Strategy strategy : strategies) {
          InpaintTask run_task = task;
          run_task.opts.strategy = strategy;
          const InpaintResult result = inpaint(run_task, bundles.view());

          SampleRecord out_rec;
          out_rec.sample_id = entry.id;
          out_rec.mass_flow = entry.mass_flow;
          out_rec.field.positions = rec.field.positions;
          out_rec.field.velocities = result.velocities;
          out_rec.field.wall_distance = rec.field.wall_distance;
          out_rec.geometry_hash = geometry_hash(out_rec.field);
          char field_name[96];
          std::snprintf(field_name, sizeof(field_name),
                        "fields/s%05" PRId64 "_%s_%s.fpfd", entry.id,
                        strategy_name(strategy).c_str(),
                        fraction_tag(fraction).c_str());
          write_sample(out + "/" + field_name, out_rec);

          nlohmann::json ie;
          ie["mode"] = "sweep";
          ie["sample_id"] = entry.id;
          ie["strategy"] = strategy_name(strategy);
          ie["mask_fraction"] = fraction;
          ie["pred"] = field_name;
          ie["ref"] = entry.file;
          ie["mask"] = mask_name;
          nlohmann::json diag = result.diagnostics;
          diag["sample_id"] = entry.id;
          diag["mask_fraction"] = fraction;
          char hex[32];
          std::snprintf(hex, sizeof(hex), "%016llx",
                        static_cast<unsigned long long>(mask.hash));
          diag["mask_hash"] = hex;
          push_row(std::move(ie), diag);
        }
      }
    });
  } else if (mode == "edit") {
    if (idx.pairs.empty()) throw DataError("dataset carries no edit pairs");
    auto pairs = idx.pairs;
    const auto cap = cfg.get_int("inpaint.max_samples", 20);
    if (static_cast<std::int64_t>(pairs.size()) > cap)
      pairs.resize(static_cast<std::size_t>(cap));

    parallel_for(static_cast<std::int64_t>(pairs.size()),
                 resolved_workers(cfg), [&](std::int64_t pi) {
      const auto& pair = pairs[static_cast<std::size_t>(pi)];
      SampleRecord source = read_sample(data_dir + "/" + pair.source);
      SampleRecord target = read_sample(data_dir + "/" + pair.target);
      if (source.edit_region.empty())
        throw DataError(pair.source + ": edit pair lacks an edit region");
      // One shared centring: the target geometry is the inference domain.
      Vec3 com{0.0, 0.0, 0.0};
      for (const auto& p : target.field.positions) com = com + p;
      com = (1.0 / static_cast<double>(target.field.size())) * com;
      for (auto& p : target.field.positions) p = p - com;
      for (auto& p : source.field.positions) p = p - com;

      // Encode on the target geometry with source velocities; edited points
      // carry no information and are zeroed.
      PointCloudField context = target.field;
      context.velocities = source.field.velocities;
      for (std::size_t i = 0; i < context.size(); ++i)
        if (source.edit_region[i]) context.velocities[i] = Vec3{0.0, 0.0, 0.0};

      const TokenField encoded = tokeniser.encode(context);
      const MaskSpec mask = build_edit_mask(encoded, target.field.positions,
                                            source.edit_region,
                                            tokeniser.cfg.neighbours);

      char mask_name[64];
      std::snprintf(mask_name, sizeof(mask_name), "masks/e%04" PRId64 "_edit.json",
                    pair.id);
      {
        nlohmann::json mj;
        mj["pair_id"] = pair.id;
        mj["known"] = mask.known;
        mj["unknown"] = mask.unknown;
        std::vector<int> pts;
        for (std::size_t i = 0; i < mask.point_in_mask.size(); ++i)
          if (mask.point_in_mask[i]) pts.push_back(static_cast<int>(i));
        mj["points_in_mask"] = pts;
        char hex[32];
        std::snprintf(hex, sizeof(hex), "%016llx",
                      static_cast<unsigned long long>(mask.hash));
        mj["mask_hash"] = hex;
        write_text_file(out + "/" + mask_name, mj.dump() + "\n");
      }

      InpaintTask task;
      task.field = encoded;
      for (int u : mask.unknown)
        std::fill(task.field.tokens.row_ptr(u),
                  task.field.tokens.row_ptr(u) + task.field.tokens.cols(), 0.0);
      task.known = mask.known;
      task.unknown = mask.unknown;
      task.positions = target.field.positions;
      task.wall = target.field.wall_distance;
      task.known_velocities = context.velocities;
      task.point_in_mask = mask.point_in_mask;
      task.opts = base_opts;
      task.opts.seed =
          master.child(0x0E000000ULL + static_cast<std::uint64_t>(pair.id)).next_u64();

      for (Strategy strategy : strategies) {
        InpaintTask run_task = task;
        run_task.opts.strategy = strategy;
        const InpaintResult result = inpaint(run_task, bundles.view());

        // Unedited points reuse the source simulation verbatim; only the
        // edited region takes reconstructed values.
        SampleRecord out_rec;
        out_rec.sample_id = pair.id;
        out_rec.field.positions = target.field.positions;
        out_rec.field.wall_distance = target.field.wall_distance;
        out_rec.field.velocities = source.field.velocities;
        for (std::size_t i = 0; i < out_rec.field.size(); ++i)
          if (mask.point_in_mask[i])
            out_rec.field.velocities[i] = result.velocities[i];
        out_rec.geometry_hash = geometry_hash(out_rec.field);

        char field_name[96];
        std::snprintf(field_name, sizeof(field_name),
                      "fields/e%04" PRId64 "_%s_edit.fpfd", pair.id,
                      strategy_name(strategy).c_str());
        write_sample(out + "/" + field_name, out_rec);

        nlohmann::json ie;
        ie["mode"] = "edit";
        ie["sample_id"] = pair.id;
        ie["strategy"] = strategy_name(strategy);
        ie["mask_fraction"] =
            static_cast<double>(mask.unknown.size()) /
            static_cast<double>(encoded.size());
        ie["pred"] = field_name;
        ie["ref"] = pair.target;
        ie["mask"] = mask_name;
        nlohmann::json diag = result.diagnostics;
        diag["pair_id"] = pair.id;
        push_row(std::move(ie), diag);
      }
    });
  } else {
    throw ConfigError("mode must be sweep or edit");
  }

  // Deterministic ordering regardless of worker interleaving.
  std::sort(rows.begin(), rows.end(), [](const PredictionRow& a,
                                         const PredictionRow& b) {
    return a.index_entry["pred"].get<std::string>() <
           b.index_entry["pred"].get<std::string>();
  });
  nlohmann::json index;
  index["version"] = 1;
  index["seed"] = seed;
  index["entries"] = nlohmann::json::array();
  std::string diag_text;
  for (const auto& row : rows) {
    index["entries"].push_back(row.index_entry);
    diag_text += row.diagnostics_line + "\n";
  }
  write_text_file(out + "/predictions.json", index.dump(2) + "\n");
  write_text_file(out + "/diagnostics.jsonl", diag_text);
  record_run_config(cfg, out);
}

// ---------------------------------------------------------------------------
// eval

namespace {

struct EvalRow {
  std::int64_t sample_id = 0;
  std::string strategy;
  double mask_fraction = 0.0;
  std::string region;
  std::string mode;
  MetricReport metrics;
};

struct GroupStats {
  std::vector<double> nmse, cos, div, vort;
};

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

double stderr_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  // Sample standard deviation over sqrt(n).
  return std::sqrt(s / static_cast<double>(xs.size() - 1)) /
         std::sqrt(static_cast<double>(xs.size()));
}

}  // namespace

void cmd_eval(const RunConfig& cfg) {
  const std::string out = out_dir_of(cfg);
  fs::create_directories(out);
  const std::string data_dir = cfg.get_str("data", "");
  const std::string pred_dir = cfg.get_str("pred", "");
  if (data_dir.empty() || pred_dir.empty())
    throw ConfigError("eval needs data and pred directories");

  std::ifstream is(pred_dir + "/predictions.json");
  if (!is) throw DataError("missing predictions.json in " + pred_dir);
  nlohmann::json index;
  try {
    is >> index;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(pred_dir + "/predictions.json: invalid JSON: " + e.what());
  }

  // Group prediction entries by reference so each geometry builds one
  // Jacobian stencil shared by every strategy and region.
  std::map<std::string, std::vector<nlohmann::json>> by_ref;
  for (const auto& e : index.at("entries"))
    by_ref[e.at("ref").get<std::string>()].push_back(e);
  std::vector<std::pair<std::string, std::vector<nlohmann::json>>> groups(
      by_ref.begin(), by_ref.end());

  const int jac_k = static_cast<int>(cfg.get_int("eval.knn", 10));
  const auto max_q = cfg.get_int("eval.max_queries", 50000);
  const double exclude = cfg.get_double("eval.exclude_fraction", 0.10);
  const auto seed = seed_of(cfg);

  std::vector<std::vector<EvalRow>> group_rows(groups.size());
  parallel_for(static_cast<std::int64_t>(groups.size()), resolved_workers(cfg),
               [&](std::int64_t gi) {
    const auto& [ref_file, entries] = groups[static_cast<std::size_t>(gi)];
    const SampleRecord ref = read_sample(data_dir + "/" + ref_file);

    JacobianStencil stencil;
    {
      Rng rng(seed ^ static_cast<std::uint64_t>(ref.sample_id));
      stencil = build_jacobian_stencil(ref.field.positions, jac_k, max_q, rng);
    }
    const JacobianField jac_ref =
        jacobians_on_stencil(stencil, ref.field.velocities);

    for (const auto& e : entries) {
      const SampleRecord pred = read_sample(pred_dir + "/" + e.at("pred").get<std::string>());
      if (pred.field.size() != ref.field.size())
        throw DataError("prediction/reference point counts disagree for " +
                        ref_file);
      RegionMask mask_region;
      {
        std::ifstream ms(pred_dir + "/" + e.at("mask").get<std::string>());
        if (!ms) throw DataError("missing mask file for " + ref_file);
        nlohmann::json mj;
        ms >> mj;
        mask_region.assign(ref.field.size(), 0);
        for (const auto& i : mj.at("points_in_mask"))
          mask_region[i.get<std::size_t>()] = 1;
      }
      const JacobianField jac_pred =
          jacobians_on_stencil(stencil, pred.field.velocities);

      const RegionMask empty_region;
      for (const std::string region : {"full", "mask"}) {
        const RegionMask& rm = region == "full" ? empty_region : mask_region;
        EvalRow row;
        row.sample_id = e.at("sample_id");
        row.strategy = e.at("strategy");
        row.mask_fraction = e.at("mask_fraction");
        row.mode = e.at("mode");
        row.region = region;
        row.metrics.nmse = nmse(pred.field.velocities, ref.field.velocities, rm);
        row.metrics.cos_sim = cosine_similarity(pred.field.velocities,
                                                ref.field.velocities, rm, exclude);
        row.metrics.divergence = divergence_score(jac_pred, rm);
        row.metrics.vorticity = vorticity_score(jac_pred, jac_ref, rm);
        group_rows[static_cast<std::size_t>(gi)].push_back(std::move(row));
      }
    }
  });

  std::vector<EvalRow> rows;
  for (auto& g : group_rows)
    for (auto& r : g) rows.push_back(std::move(r));
  std::sort(rows.begin(), rows.end(), [](const EvalRow& a, const EvalRow& b) {
    if (a.mode != b.mode) return a.mode < b.mode;
    if (a.sample_id != b.sample_id) return a.sample_id < b.sample_id;
    if (a.strategy != b.strategy) return a.strategy < b.strategy;
    if (a.mask_fraction != b.mask_fraction) return a.mask_fraction < b.mask_fraction;
    return a.region < b.region;
  });

  std::string csv = "# fp-results v1\n";
  csv += "sample_id,strategy,mask_fraction,region,nmse,cos_sim,divergence,vorticity\n";
  for (const auto& r : rows) {
    csv += std::to_string(r.sample_id) + "," + r.strategy + "," +
           format_double(r.mask_fraction) + "," + r.region + "," +
           format_double(r.metrics.nmse) + "," + format_double(r.metrics.cos_sim) +
           "," + format_double(r.metrics.divergence) + "," +
           format_double(r.metrics.vorticity) + "\n";
  }
  write_text_file(out + "/results.csv", csv);

  // Aggregates: mean and standard error across samples per group.
  std::map<std::string, GroupStats> agg;
  std::map<std::string, nlohmann::json> agg_meta;
  for (const auto& r : rows) {
    const std::string key = r.mode + "|" + r.strategy + "|" +
                            format_double(r.mask_fraction) + "|" + r.region;
    auto& g = agg[key];
    g.nmse.push_back(r.metrics.nmse);
    g.cos.push_back(r.metrics.cos_sim);
    g.div.push_back(r.metrics.divergence);
    g.vort.push_back(r.metrics.vorticity);
    if (!agg_meta.count(key)) {
      nlohmann::json m;
      m["mode"] = r.mode;
      m["strategy"] = r.strategy;
      m["mask_fraction"] = r.mask_fraction;
      m["region"] = r.region;
      agg_meta[key] = m;
    }
  }
  nlohmann::json report;
  report["version"] = 1;
  report["groups"] = nlohmann::json::array();
  for (const auto& [key, g] : agg) {
    nlohmann::json row = agg_meta[key];
    row["n"] = g.nmse.size();
    row["nmse_mean"] = mean_of(g.nmse);
    row["nmse_stderr"] = stderr_of(g.nmse);
    row["cos_sim_mean"] = mean_of(g.cos);
    row["cos_sim_stderr"] = stderr_of(g.cos);
    row["divergence_mean"] = mean_of(g.div);
    row["divergence_stderr"] = stderr_of(g.div);
    row["vorticity_mean"] = mean_of(g.vort);
    row["vorticity_stderr"] = stderr_of(g.vort);
    report["groups"].push_back(row);
  }
  write_text_file(out + "/report.json", report.dump(2) + "\n");
  record_run_config(cfg, out);
}

}  // namespace fp
