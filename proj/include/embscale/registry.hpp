#pragma once

// Architecture descriptors: JSON (de)serialization and the bundled registry.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "embscale/costmodel.hpp"

namespace embscale {

using json = nlohmann::json;

inline json arch_to_json(const ModelArch& a) {
  json j = {{"name", a.name},
            {"n_layers", a.n_layers},
            {"d_model", a.d_model},
            {"d_ff", a.d_ff},
            {"n_heads", a.n_heads},
            {"vocab_size", a.vocab_size},
            {"max_seq_len", a.max_seq_len},
            {"tie_embeddings", a.tie_embeddings}};
  const ModelArch d;
  if (a.n_kv_heads != d.n_kv_heads) j["n_kv_heads"] = a.n_kv_heads;
  if (a.fused_qkv != d.fused_qkv) j["fused_qkv"] = a.fused_qkv;
  if (a.gated_mlp != d.gated_mlp) j["gated_mlp"] = a.gated_mlp;
  if (a.linear_bias != d.linear_bias) j["linear_bias"] = a.linear_bias;
  if (a.norm_bias != d.norm_bias) j["norm_bias"] = a.norm_bias;
  if (a.learned_positions != d.learned_positions) j["learned_positions"] = a.learned_positions;
  return j;
}

inline ModelArch arch_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("architecture descriptor must be a JSON object");
  ModelArch a;
  auto req = [&](const char* key) -> const json& {
    if (!j.contains(key)) throw ValidationError(std::string("architecture descriptor lacks '") + key + "'");
    return j.at(key);
  };
  try {
    a.name = req("name").get<std::string>();
    a.n_layers = req("n_layers").get<ParamCount>();
    a.d_model = req("d_model").get<ParamCount>();
    a.d_ff = req("d_ff").get<ParamCount>();
    a.n_heads = req("n_heads").get<ParamCount>();
    a.vocab_size = req("vocab_size").get<ParamCount>();
    a.max_seq_len = j.value("max_seq_len", ParamCount{0});
    a.tie_embeddings = j.value("tie_embeddings", false);
    a.n_kv_heads = j.value("n_kv_heads", a.n_kv_heads);
    a.fused_qkv = j.value("fused_qkv", a.fused_qkv);
    a.gated_mlp = j.value("gated_mlp", a.gated_mlp);
    a.linear_bias = j.value("linear_bias", a.linear_bias);
    a.norm_bias = j.value("norm_bias", a.norm_bias);
    a.learned_positions = j.value("learned_positions", a.learned_positions);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("architecture descriptor: ") + e.what());
  }
  validate(a);
  return a;
}

namespace detail {

inline ModelArch neox(const char* name, ParamCount layers, ParamCount d, ParamCount heads) {
  ModelArch a;
  a.name = name;
  a.n_layers = layers;
  a.d_model = d;
  a.d_ff = 4 * d;
  a.n_heads = heads;
  a.vocab_size = 50304;
  a.max_seq_len = 2048;
  a.tie_embeddings = false;
  return a;
}

}  // namespace detail

// The eight Pythia checkpoints and a Gemma-2B-class model, ascending by size.
inline std::vector<ModelArch> default_registry() {
  std::vector<ModelArch> r = {
      detail::neox("pythia-14m", 6, 128, 4),     detail::neox("pythia-31m", 6, 256, 8),
      detail::neox("pythia-70m", 6, 512, 8),     detail::neox("pythia-160m", 12, 768, 12),
      detail::neox("pythia-410m", 24, 1024, 16), detail::neox("pythia-1b", 16, 2048, 8),
      detail::neox("pythia-1.4b", 24, 2048, 16), detail::neox("pythia-2.8b", 32, 2560, 32),
  };
  ModelArch g;
  g.name = "gemma-2b";
  g.n_layers = 18;
  g.d_model = 2048;
  g.d_ff = 16384;
  g.n_heads = 8;
  g.n_kv_heads = 1;
  g.vocab_size = 256000;
  g.max_seq_len = 8192;
  g.tie_embeddings = true;
  g.fused_qkv = false;
  g.gated_mlp = true;
  g.linear_bias = false;
  g.norm_bias = false;
  r.push_back(g);
  return r;
}

// The Pythia subset, which is the default planning registry.
inline std::vector<ModelArch> pythia_registry() {
  auto r = default_registry();
  r.erase(std::remove_if(r.begin(), r.end(),
                         [](const ModelArch& a) { return a.name.rfind("pythia-", 0) != 0; }),
          r.end());
  return r;
}

inline std::string normalize_model_name(std::string name) {
  if (auto slash = name.rfind('/'); slash != std::string::npos) name = name.substr(slash + 1);
  std::transform(name.begin(), name.end(), name.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  constexpr std::string_view kDeduped = "-deduped";
  if (name.size() > kDeduped.size() &&
      name.compare(name.size() - kDeduped.size(), kDeduped.size(), kDeduped) == 0) {
    name.resize(name.size() - kDeduped.size());
  }
  return name;
}

inline const ModelArch* find_arch(const std::vector<ModelArch>& registry, const std::string& name) {
  const std::string key = normalize_model_name(name);
  for (const auto& a : registry) {
    if (normalize_model_name(a.name) == key) return &a;
  }
  return nullptr;
}

// Accepts either a JSON array of descriptors or {"models": [...]}.
inline std::vector<ModelArch> registry_from_json(const json& j) {
  const json& list = j.is_object() && j.contains("models") ? j.at("models") : j;
  if (!list.is_array()) throw ValidationError("registry must be a JSON array of descriptors");
  std::vector<ModelArch> r;
  for (const auto& e : list) r.push_back(arch_from_json(e));
  return r;
}

inline json registry_to_json(const std::vector<ModelArch>& r) {
  json list = json::array();
  for (const auto& a : r) list.push_back(arch_to_json(a));
  return json{{"models", list}};
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError("'" + path + "' is not valid JSON: " + e.what(), e.byte);
  }
}

inline std::vector<ModelArch> load_registry(const std::string& path) {
  return registry_from_json(read_json_file(path));
}

// Resolves `name_or_path` against the registry first, then as a descriptor file.
inline ModelArch resolve_arch(const std::string& name_or_path,
                              const std::vector<ModelArch>& registry = default_registry()) {
  if (const ModelArch* a = find_arch(registry, name_or_path)) return *a;
  std::ifstream probe(name_or_path);
  if (!probe) {
    throw ValidationError("unknown architecture '" + name_or_path +
                          "' (not in registry and not a readable file)");
  }
  return arch_from_json(read_json_file(name_or_path));
}

}  // namespace embscale
