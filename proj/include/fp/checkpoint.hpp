#pragma once

#include <string>

#include "fp/params.hpp"

#include "json.hpp"

namespace fp {

// A trained model: parameter set plus the config it was built from. The
// config JSON carries kind ("tokeniser" | "fm" | "mae"), dimensions and,
// for generative models, the token standardisation statistics.
struct ModelBundle {
  std::string kind;
  nlohmann::json config;
  ParameterSet params;
};

// Checkpoint layout: magic "FPNN", version u32, byte-order marker u32,
// config JSON blob, optimiser step u64, then named tensor sections
// ("params" plus parallel "opt_m"/"opt_v"/"ema" sections). Tensor payloads
// are little-endian f32.
void write_checkpoint(const std::string& path, const ModelBundle& bundle);
ModelBundle read_checkpoint(const std::string& path);

}  // namespace fp
