#include "mvcond/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "mvcond/errors.hpp"

namespace mvcond {

using nlohmann::json;

namespace {

bool type_matches(const json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "integer") return v.is_number_integer() || (v.is_number_float() && v.get<double>() == static_cast<double>(static_cast<int64_t>(v.get<double>())));
  if (type == "number") return v.is_number();
  if (type == "null") return v.is_null();
  return false;
}

void check(const json& doc, const json& schema, const std::string& path) {
  const std::string where = path.empty() ? "/" : path;
  if (schema.contains("type")) {
    const json& t = schema["type"];
    bool ok = false;
    if (t.is_string()) {
      ok = type_matches(doc, t.get<std::string>());
    } else {
      for (const auto& one : t) ok = ok || type_matches(doc, one.get<std::string>());
    }
    if (!ok) throw ConfigError("config " + where + ": expected type " + t.dump() + ", got " + doc.dump());
  }
  if (schema.contains("enum")) {
    bool found = false;
    for (const auto& e : schema["enum"]) found = found || e == doc;
    if (!found) throw ConfigError("config " + where + ": value " + doc.dump() + " not in " + schema["enum"].dump());
  }
  if (doc.is_number()) {
    const double v = doc.get<double>();
    if (schema.contains("minimum") && v < schema["minimum"].get<double>()) {
      throw ConfigError("config " + where + ": " + doc.dump() + " is below the minimum " + schema["minimum"].dump());
    }
    if (schema.contains("maximum") && v > schema["maximum"].get<double>()) {
      throw ConfigError("config " + where + ": " + doc.dump() + " is above the maximum " + schema["maximum"].dump());
    }
    if (schema.contains("exclusiveMinimum") && v <= schema["exclusiveMinimum"].get<double>()) {
      throw ConfigError("config " + where + ": " + doc.dump() + " must exceed " + schema["exclusiveMinimum"].dump());
    }
  }
  if (doc.is_object()) {
    const json props = schema.value("properties", json::object());
    if (schema.contains("required")) {
      for (const auto& r : schema["required"]) {
        if (!doc.contains(r.get<std::string>())) throw ConfigError("config " + where + ": missing key " + r.dump());
      }
    }
    for (const auto& [key, value] : doc.items()) {
      if (props.contains(key)) {
        check(value, props[key], path + "/" + key);
      } else if (schema.contains("additionalProperties") && schema["additionalProperties"] == false) {
        throw ConfigError("config " + where + ": unknown key \"" + key + "\"");
      }
    }
  }
  if (doc.is_array()) {
    if (schema.contains("minItems") && doc.size() < schema["minItems"].get<size_t>()) {
      throw ConfigError("config " + where + ": needs at least " + schema["minItems"].dump() + " items");
    }
    if (schema.contains("items")) {
      for (size_t i = 0; i < doc.size(); ++i) check(doc[i], schema["items"], path + "/" + std::to_string(i));
    }
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj[key].get<T>();
}

}  // namespace

void validate_schema(const json& doc, const json& schema) { check(doc, schema, ""); }

std::string fnv1a_hex(const std::string& text) {
  uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunConfig RunConfig::from_json(const json& doc) {
  validate_schema(doc, run_config_schema());
  RunConfig c;
  const json empty = json::object();
  const json& d = doc.contains("data") ? doc["data"] : empty;
  read(d, "scenes", c.data.scenes);
  read(d, "views", c.data.views);
  read(d, "resolution", c.data.resolution);
  read(d, "seed", c.data.seed);
  read(d, "elevations_deg", c.data.elevations_deg);

  const json& m = doc.contains("model") ? doc["model"] : empty;
  c.model.image_res = c.data.resolution;
  c.model.triplane_res = c.data.resolution / 4;
  read(m, "latent_res", c.model.latent_res);
  read(m, "triplane_res", c.model.triplane_res);
  read(m, "feature_dim", c.model.feature_dim);
  read(m, "window", c.model.window);
  read(m, "shift", c.model.shift);
  read(m, "latent_dim", c.model.latent_dim);
  read(m, "token_dim", c.model.token_dim);
  read(m, "blocks", c.model.blocks);
  read(m, "channels", c.model.channels);
  read(m, "timesteps", c.model.timesteps);
  read(m, "samples_per_ray", c.model.samples_per_ray);
  read(m, "max_inputs", c.max_inputs);

  const json& t = doc.contains("train") ? doc["train"] : empty;
  read(t, "stage", c.train.stage);
  read(t, "steps", c.train.steps);
  read(t, "batch", c.train.batch);
  read(t, "lr", c.train.lr);
  read(t, "lambda_lift", c.train.lambda_lift);
  read(t, "freeze_base", c.train.freeze_base);
  read(t, "continue_lifting", c.train.continue_lifting);
  read(t, "seed", c.train.seed);
  read(t, "base_steps", c.train.base_steps);
  read(t, "base_lr", c.train.base_lr);
  read(t, "checkpoint_every", c.checkpoint_every);
  if (t.contains("ablations")) {
    const json& a = t["ablations"];
    read(a, "no_recon_loss", c.train.ablations.no_recon_loss);
    read(a, "no_view_conditioning", c.train.ablations.no_view_conditioning);
    read(a, "trainable_unet", c.train.ablations.trainable_unet);
  }

  const json& e = doc.contains("eval") ? doc["eval"] : empty;
  read(e, "view_counts", c.eval.view_counts);
  read(e, "elevations_deg", c.eval.elevations_deg);
  read(e, "scenes", c.eval.scenes);
  read(e, "seed", c.eval.seed);
  read(e, "sampler", c.eval.sampler);
  read(e, "sampling_steps", c.eval.sampling_steps);
  read(e, "synthesize", c.eval.synthesize);
  c.validate();
  return c;
}

json RunConfig::to_json() const {
  return json{
      {"data",
       {{"scenes", data.scenes},
        {"views", data.views},
        {"resolution", data.resolution},
        {"seed", data.seed},
        {"elevations_deg", data.elevations_deg}}},
      {"model",
       {{"latent_res", model.latent_res},
        {"triplane_res", model.triplane_res},
        {"feature_dim", model.feature_dim},
        {"window", model.window},
        {"shift", model.shift},
        {"latent_dim", model.latent_dim},
        {"token_dim", model.token_dim},
        {"blocks", model.blocks},
        {"channels", model.channels},
        {"timesteps", model.timesteps},
        {"samples_per_ray", model.samples_per_ray},
        {"max_inputs", max_inputs}}},
      {"train",
       {{"stage", train.stage},
        {"steps", train.steps},
        {"batch", train.batch},
        {"lr", train.lr},
        {"lambda_lift", train.lambda_lift},
        {"freeze_base", train.freeze_base},
        {"continue_lifting", train.continue_lifting},
        {"ablations",
         {{"no_recon_loss", train.ablations.no_recon_loss},
          {"no_view_conditioning", train.ablations.no_view_conditioning},
          {"trainable_unet", train.ablations.trainable_unet}}},
        {"seed", train.seed},
        {"base_steps", train.base_steps},
        {"base_lr", train.base_lr},
        {"checkpoint_every", checkpoint_every}}},
      {"eval",
       {{"view_counts", eval.view_counts},
        {"elevations_deg", eval.elevations_deg},
        {"scenes", eval.scenes},
        {"seed", eval.seed},
        {"sampler", eval.sampler},
        {"sampling_steps", eval.sampling_steps},
        {"synthesize", eval.synthesize}}},
  };
}

void RunConfig::validate() const {
  try {
    validate_options(dataset_options());
    validate_options(eval_dataset_options());
  } catch (const ContractError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (data.views % 2 != 0) throw ConfigError("data.views must be even so every view has an opposing view");
  if (data.views < 4) throw ConfigError("data.views must be >= 4");
  model_config().validate();
  train.validate();
  if (max_inputs < 1 || max_inputs >= data.views) {
    throw ConfigError("model.max_inputs must lie in [1, data.views - 1]");
  }
  for (int n : eval.view_counts) {
    if (n < 2 || n > max_inputs) {
      throw ConfigError("eval.view_counts entries must lie in [2, max_inputs], got " + std::to_string(n));
    }
  }
}

DatasetOptions RunConfig::dataset_options(int threads) const {
  DatasetOptions o;
  o.num_scenes = data.scenes;
  o.n_views = data.views;
  o.resolution = data.resolution;
  o.seed = data.seed;
  o.elevations_deg = data.elevations_deg;
  o.threads = threads;
  return o;
}

DatasetOptions RunConfig::eval_dataset_options(int threads) const {
  DatasetOptions o = dataset_options(threads);
  o.num_scenes = eval.scenes;
  o.seed = eval.seed;
  o.elevations_deg = eval.elevations_deg;
  return o;
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m = model;
  m.image_res = data.resolution;
  m.view_conditioning = !train.ablations.no_view_conditioning;
  return m;
}

SynthOptions RunConfig::synth_options(uint64_t seed) const {
  SynthOptions s;
  s.sampler = eval.sampler == "ddpm" ? Sampler::kDdpm : Sampler::kDdim;
  s.steps = eval.sampling_steps;
  s.seed = seed;
  return s;
}

std::string RunConfig::config_hash() const {
  json j = to_json();
  j.erase("eval");
  j["train"].erase("steps");
  j["train"].erase("checkpoint_every");
  return fnv1a_hex(j.dump());
}

std::string RunConfig::model_hash() const {
  json j = to_json()["model"];
  j.erase("max_inputs");
  j["resolution"] = data.resolution;
  j["view_conditioning"] = !train.ablations.no_view_conditioning;
  return fnv1a_hex(j.dump());
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return RunConfig::from_json(doc);
}

}  // namespace mvcond
