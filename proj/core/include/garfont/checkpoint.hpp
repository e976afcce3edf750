#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "garfont/nn.hpp"

namespace garfont::ckpt {

// Checkpoint directory layout:
//   weights.bin    flat little-endian float32 tensors (params, then Adam
//                  moments as opt.m/<name> and opt.v/<name>)
//   manifest.json  tensor names/shapes/offsets, config hash, rng state, step
//
// Saving snaps in-memory doubles to their float32 values first, so a run that
// keeps training after a save follows the same trajectory as a run that
// reloads the file: resume is bit-exact.

struct CheckpointMeta {
  int version = 1;
  int64_t step = 0;
  int64_t opt_step = 0;
  std::string rng_state;
  std::string config_hash;
  nlohmann::json extra;
};

void save_checkpoint(const std::string& dir, nn::ParamStore& params,
                     nn::Adam* opt, const CheckpointMeta& meta);

// Fills an already-constructed store (names and shapes must match the file).
CheckpointMeta load_checkpoint(const std::string& dir, nn::ParamStore& params,
                               nn::Adam* opt);

// Reads manifest metadata without touching weights.
CheckpointMeta peek_checkpoint(const std::string& dir);

bool checkpoint_exists(const std::string& dir);

// Content hash of the weight file (artifact identity for the run ledger).
std::string checkpoint_weights_hash(const std::string& dir);

}  // namespace garfont::ckpt
