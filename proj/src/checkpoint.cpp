#include "mvcond/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "mvcond/errors.hpp"

namespace mvcond {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

namespace {

constexpr const char* kManifest = "manifest.json";
constexpr const char* kPayload = "tensors.bin";
constexpr const char* kMomentM = "opt.m/";
constexpr const char* kMomentV = "opt.v/";

}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
  std::filesystem::create_directories(dir);
  json entries = json::array();
  std::vector<float> payload;
  for (const auto& t : ckpt.tensors) {
    if (static_cast<int64_t>(t.values.size()) != numel_of(t.shape)) {
      throw ContractError("checkpoint tensor " + t.name + " has " + std::to_string(t.values.size()) +
                          " values for shape " + shape_str(t.shape));
    }
    entries.push_back({{"name", t.name},
                       {"shape", t.shape},
                       {"dtype", "f32"},
                       {"byte_offset", payload.size() * sizeof(float)},
                       {"byte_len", t.values.size() * sizeof(float)}});
    for (double v : t.values) payload.push_back(static_cast<float>(v));
  }
  const json manifest{{"format_version", kCheckpointFormat},
                      {"config_hash", ckpt.config_hash},
                      {"meta", ckpt.meta},
                      {"entries", entries}};
  {
    std::ofstream out(dir / kPayload, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / kPayload).string());
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (!out) throw IoError("short write to " + (dir / kPayload).string());
  }
  std::ofstream out(dir / kManifest, std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / kManifest).string());
  out << manifest.dump(1) << "\n";
}

void validate_manifest(const json& manifest, uint64_t payload_bytes) {
  auto bad = [](const std::string& why) { throw IoError("checkpoint manifest: " + why); };
  if (!manifest.is_object()) bad("not an object");
  if (manifest.value("format_version", -1) != kCheckpointFormat) bad("unsupported format_version");
  if (!manifest.contains("config_hash") || !manifest["config_hash"].is_string()) bad("missing config_hash");
  if (!manifest.contains("entries") || !manifest["entries"].is_array()) bad("missing entries");
  std::vector<std::pair<uint64_t, uint64_t>> spans;
  std::vector<std::string> names;
  for (const auto& e : manifest["entries"]) {
    if (!e.is_object() || !e.contains("name") || !e["name"].is_string()) bad("entry without a name");
    const std::string name = e["name"].get<std::string>();
    if (e.value("dtype", std::string()) != "f32") bad("entry " + name + " has unsupported dtype");
    if (!e.contains("shape") || !e["shape"].is_array()) bad("entry " + name + " has no shape");
    uint64_t count = 1;
    for (const auto& d : e["shape"]) {
      if (!d.is_number_integer() || d.get<int64_t>() < 0) bad("entry " + name + " has a negative dimension");
      count *= d.get<uint64_t>();
    }
    if (!e.contains("byte_offset") || !e["byte_offset"].is_number_unsigned() || !e.contains("byte_len") ||
        !e["byte_len"].is_number_unsigned()) {
      bad("entry " + name + " needs unsigned byte_offset and byte_len");
    }
    const uint64_t off = e["byte_offset"].get<uint64_t>(), len = e["byte_len"].get<uint64_t>();
    if (len != count * sizeof(float)) bad("entry " + name + " byte_len does not match its shape");
    if (off % sizeof(float) != 0) bad("entry " + name + " is misaligned");
    if (off > payload_bytes || len > payload_bytes - off) bad("entry " + name + " lies outside the payload");
    if (std::find(names.begin(), names.end(), name) != names.end()) bad("duplicate entry " + name);
    names.push_back(name);
    spans.emplace_back(off, len);
  }
  std::sort(spans.begin(), spans.end());
  for (size_t i = 1; i < spans.size(); ++i) {
    if (spans[i - 1].first + spans[i - 1].second > spans[i].first) bad("entries overlap");
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream min(dir / kManifest);
  if (!min) throw IoError("cannot read checkpoint manifest in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(min);
  } catch (const json::parse_error& e) {
    throw IoError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  std::ifstream pin(dir / kPayload, std::ios::binary);
  if (!pin) throw IoError("cannot read checkpoint payload in " + dir.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(pin)), std::istreambuf_iterator<char>());
  validate_manifest(manifest, bytes.size());

  Checkpoint ckpt;
  ckpt.config_hash = manifest["config_hash"].get<std::string>();
  ckpt.meta = manifest.value("meta", json::object());
  for (const auto& e : manifest["entries"]) {
    NamedTensor t;
    t.name = e["name"].get<std::string>();
    t.shape = e["shape"].get<Shape>();
    const uint64_t off = e["byte_offset"].get<uint64_t>();
    const size_t n = e["byte_len"].get<size_t>() / sizeof(float);
    t.values.resize(n);
    for (size_t i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, bytes.data() + off + i * sizeof(float), sizeof(float));
      t.values[i] = f;
    }
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

Checkpoint capture(const Model& model, const OptimizerState* opt, const std::string& config_hash, json meta) {
  Checkpoint c;
  c.config_hash = config_hash;
  c.meta = std::move(meta);
  for (const auto& p : model.store().parameters()) {
    c.tensors.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  }
  if (opt) {
    c.meta["optimizer"] = {{"step", opt->step}, {"lr", opt->lr}, {"beta1", opt->beta1}, {"beta2", opt->beta2}, {"eps", opt->eps}};
    for (const auto& [name, mom] : opt->moments) {
      const Shape s{static_cast<int64_t>(mom.m.size())};
      c.tensors.push_back({kMomentM + name, s, mom.m});
      c.tensors.push_back({kMomentV + name, s, mom.v});
    }
  }
  return c;
}

int restore_prefix(Model& model, const Checkpoint& ckpt, const std::string& prefix) {
  int n = 0;
  for (const auto& p : model.store().parameters_with_prefix(prefix)) {
    const NamedTensor* t = ckpt.find(p.name);
    if (!t) throw ContractError("checkpoint has no tensor " + p.name);
    if (t->shape != p.tensor.shape()) {
      throw ContractError("checkpoint tensor " + p.name + " has shape " + shape_str(t->shape) + ", model expects " +
                          shape_str(p.tensor.shape()));
    }
    auto dst = model.store().get(p.name).mutable_data();
    std::copy(t->values.begin(), t->values.end(), dst.begin());
    ++n;
  }
  return n;
}

void restore_model(Model& model, const Checkpoint& ckpt) { restore_prefix(model, ckpt, ""); }

OptimizerState restore_optimizer(const Checkpoint& ckpt) {
  OptimizerState s;
  if (!ckpt.meta.contains("optimizer")) throw ContractError("checkpoint carries no optimizer state");
  const json& o = ckpt.meta["optimizer"];
  s.step = o.at("step").get<int64_t>();
  s.lr = o.at("lr").get<double>();
  s.beta1 = o.at("beta1").get<double>();
  s.beta2 = o.at("beta2").get<double>();
  s.eps = o.at("eps").get<double>();
  const std::string m = kMomentM;
  for (const auto& t : ckpt.tensors) {
    if (t.name.rfind(m, 0) != 0) continue;
    const std::string name = t.name.substr(m.size());
    const NamedTensor* v = ckpt.find(kMomentV + name);
    if (!v) throw ContractError("checkpoint lacks the second moment of " + name);
    s.moments[name] = {t.values, v->values};
  }
  return s;
}

}  // namespace mvcond
