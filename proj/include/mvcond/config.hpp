#pragma once

// Run configuration: a JSON document checked against the published schema
// (schemas/run_config.schema.json, compiled into the library) and then
// against the semantic rules of each module.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "mvcond/scenes.hpp"
#include "mvcond/training.hpp"

namespace mvcond {

const nlohmann::json& run_config_schema();
const nlohmann::json& eval_report_schema();

// Subset of JSON Schema: type, properties, required, additionalProperties
// (false), items, minItems, minimum, maximum, exclusiveMinimum, enum.
// Throws ConfigError naming the offending JSON pointer.
void validate_schema(const nlohmann::json& doc, const nlohmann::json& schema);

struct DataConfig {
  int scenes = 8;
  int views = 8;
  int resolution = 64;
  uint64_t seed = 0;
  std::vector<double> elevations_deg{0.0, 15.0, 30.0};
};

struct EvalConfig {
  std::vector<int> view_counts{2, 4, 6};
  std::vector<double> elevations_deg{0.0, 15.0, 30.0};
  int scenes = 20;
  uint64_t seed = 1000;
  std::string sampler = "ddim";
  int sampling_steps = 20;
  bool synthesize = true;
};

struct RunConfig {
  DataConfig data;
  ModelConfig model;  // image_res follows data.resolution
  int max_inputs = 6;
  TrainConfig train;
  int checkpoint_every = 0;
  EvalConfig eval;

  static RunConfig from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;
  void validate() const;

  DatasetOptions dataset_options(int threads = 1) const;
  // Held-out scenes rendered from eval.seed with the eval elevations.
  DatasetOptions eval_dataset_options(int threads = 1) const;
  // Model settings with the view-conditioning ablation applied.
  ModelConfig model_config() const;
  SynthOptions synth_options(uint64_t seed) const;

  // Hash of everything that shapes a training run except its length.
  std::string config_hash() const;
  // Hash of the architecture only (parameter names and shapes).
  std::string model_hash() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

std::string fnv1a_hex(const std::string& text);

}  // namespace mvcond
