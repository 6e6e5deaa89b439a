#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fp/commands.hpp"
#include "fp/errors.hpp"

namespace {

struct CommonFlags {
  std::string preset = "ref";
  std::string config_file;
  std::vector<std::string> overrides;
  std::string out;
  std::string data;
  std::string pred;
  std::string tokeniser_ckpt;
  std::string fm_ckpt;
  std::string mae_ckpt;
  std::int64_t seed = -1;
  int workers = 0;
  bool deterministic = false;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--preset", f.preset, "Built-in preset: ref, desk or tiny");
  cmd->add_option("--config", f.config_file, "Key = value config file");
  cmd->add_option("--set", f.overrides, "Override a config key (key=value)");
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_option("--seed", f.seed, "Global seed");
  cmd->add_option("--workers", f.workers, "Worker thread count");
  cmd->add_flag("--deterministic", f.deterministic,
                "Single-threaded bit-stable mode");
}

fp::RunConfig build_config(const CommonFlags& f) {
  fp::RunConfig cfg = fp::preset_config(f.preset);
  if (!f.config_file.empty()) cfg.load_file(f.config_file);
  cfg.apply_environment();
  for (const auto& kv : f.overrides) cfg.apply_override(kv);
  if (f.seed >= 0) cfg.set("seed", std::to_string(f.seed));
  if (f.workers > 0) cfg.set("workers", std::to_string(f.workers));
  if (f.deterministic) cfg.set("deterministic", "1");
  if (f.force) cfg.set("force", "1");
  if (!f.out.empty()) cfg.set("out", f.out);
  if (!f.data.empty()) cfg.set("data", f.data);
  if (!f.pred.empty()) cfg.set("pred", f.pred);
  if (!f.tokeniser_ckpt.empty()) cfg.set("ckpt.tokeniser", f.tokeniser_ckpt);
  if (!f.fm_ckpt.empty()) cfg.set("ckpt.fm", f.fm_ckpt);
  if (!f.mae_ckpt.empty()) cfg.set("ckpt.mae", f.mae_ckpt);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent flow-field inpainting pipeline"};
  app.require_subcommand(1);

  CommonFlags gen_flags, train_flags, inpaint_flags, eval_flags;
  std::string train_kind;
  std::string inpaint_mode = "sweep";
  std::string strategies, fractions;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  add_common(gen, gen_flags);
  gen->add_flag("--force", gen_flags.force, "Overwrite a non-empty directory");

  auto* train = app.add_subcommand("train", "Train a model");
  add_common(train, train_flags);
  train->add_option("kind", train_kind, "tokeniser, fm or mae")->required();
  train->add_option("--data", train_flags.data, "Dataset directory")->required();
  train->add_option("--tokeniser", train_flags.tokeniser_ckpt,
                    "Tokeniser checkpoint (fm/mae training)");

  auto* inp = app.add_subcommand("inpaint", "Run inpainting strategies");
  add_common(inp, inpaint_flags);
  inp->add_option("--data", inpaint_flags.data, "Dataset directory")->required();
  inp->add_option("--tokeniser", inpaint_flags.tokeniser_ckpt,
                  "Tokeniser checkpoint")->required();
  inp->add_option("--fm", inpaint_flags.fm_ckpt, "Flow-matching checkpoint");
  inp->add_option("--mae", inpaint_flags.mae_ckpt, "Masked-autoencoder checkpoint");
  inp->add_option("--mode", inpaint_mode, "sweep or edit");
  inp->add_option("--strategies", strategies,
                  "Comma list of strategies, or 'all'");
  inp->add_option("--fractions", fractions, "Comma list of mask fractions");

  auto* eval = app.add_subcommand("eval", "Evaluate predictions");
  add_common(eval, eval_flags);
  eval->add_option("--data", eval_flags.data, "Reference dataset directory")
      ->required();
  eval->add_option("--pred", eval_flags.pred, "Prediction directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      fp::cmd_gen_data(build_config(gen_flags));
    } else if (train->parsed()) {
      fp::cmd_train(build_config(train_flags), train_kind);
    } else if (inp->parsed()) {
      fp::RunConfig cfg = build_config(inpaint_flags);
      cfg.set("mode", inpaint_mode);
      if (!strategies.empty()) cfg.set("inpaint.strategies", strategies);
      if (!fractions.empty()) cfg.set("inpaint.fractions", fractions);
      fp::cmd_inpaint(cfg);
    } else if (eval->parsed()) {
      fp::cmd_eval(build_config(eval_flags));
    }
  } catch (const fp::ConfigError& e) {
    std::fprintf(stderr, "error (usage): %s\n", e.what());
    return 1;
  } catch (const fp::DataError& e) {
    std::fprintf(stderr, "error (data): %s\n", e.what());
    return 2;
  } catch (const fp::NumericError& e) {
    std::fprintf(stderr, "error (numeric): %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
