#pragma once

// Checkpoint directory: manifest.json plus tensors.bin, a contiguous
// little-endian float32 payload.
//
//   manifest.json  {format_version, config_hash, meta,
//                   entries: [{name, shape, dtype, byte_offset, byte_len}]}

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "mvcond/optim.hpp"
#include "mvcond/tensor.hpp"
#include "mvcond/training.hpp"

namespace mvcond {

inline constexpr int kCheckpointFormat = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::string config_hash;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
// Validates the whole manifest against the payload size before decoding any
// tensor; throws IoError on malformed or tampered files.
Checkpoint load_checkpoint(const std::filesystem::path& dir);
void validate_manifest(const nlohmann::json& manifest, uint64_t payload_bytes);

// Model parameters, plus Adam moments and counters when `opt` is given.
Checkpoint capture(const Model& model, const OptimizerState* opt, const std::string& config_hash,
                   nlohmann::json meta = nlohmann::json::object());
// Loads every model parameter; throws ContractError on a missing or misshapen entry.
void restore_model(Model& model, const Checkpoint& ckpt);
// Loads only parameters whose names start with `prefix`; returns how many.
int restore_prefix(Model& model, const Checkpoint& ckpt, const std::string& prefix);
OptimizerState restore_optimizer(const Checkpoint& ckpt);

}  // namespace mvcond
