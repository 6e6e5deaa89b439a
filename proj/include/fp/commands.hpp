#pragma once

#include <string>

#include "fp/config.hpp"

namespace fp {

// Batch pipeline commands. Paths and options arrive through the config
// (keys: out, data, pred, ckpt.tokeniser, ckpt.fm, ckpt.mae, mode, force,
// deterministic, workers, seed). Each command records its merged config and
// seed in the output directory.
void cmd_gen_data(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg, const std::string& kind);
void cmd_inpaint(const RunConfig& cfg);
void cmd_eval(const RunConfig& cfg);

// Worker count: explicit config wins, else the hardware concurrency;
// deterministic mode forces 1.
int resolved_workers(const RunConfig& cfg);

}  // namespace fp
