#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "blockrec/model.hpp"

namespace blockrec {

// Checkpoints are a pair of files: <stem>.json describes the configuration
// and maps each parameter name to its shape, dtype and byte offset;
// <stem>.bin is one raw little-endian array blob in manifest order.

inline nlohmann::json config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["vocab_size"] = c.vocab_size;
  j["dim"] = c.dim;
  j["num_layers"] = c.num_layers;
  j["heads"] = c.heads;
  j["head_dim"] = c.head_dim;
  j["mlp_hidden"] = c.mlp_hidden;
  j["window"] = c.window;
  j["segment"] = c.segment;
  j["num_states"] = c.num_states;
  j["recurrent_layers"] = c.recurrent_layers;
  j["gate_type"] = to_string(c.gate_type);
  j["gate_config"] = to_string(c.gate_config);
  j["feedback"] = c.feedback;
  j["dropout"] = c.dropout;
  j["num_buckets"] = c.num_buckets;
  j["max_distance"] = c.max_distance;
  j["share_relpos"] = c.share_relpos;
  j["preset"] = c.preset;
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<i64>();
  c.dim = j.at("dim").get<i64>();
  c.num_layers = j.at("num_layers").get<i64>();
  c.heads = j.at("heads").get<i64>();
  c.head_dim = j.at("head_dim").get<i64>();
  c.mlp_hidden = j.at("mlp_hidden").get<i64>();
  c.window = j.at("window").get<i64>();
  c.segment = j.at("segment").get<i64>();
  c.num_states = j.at("num_states").get<i64>();
  c.recurrent_layers = j.at("recurrent_layers").get<std::vector<i64>>();
  const std::string gt = j.at("gate_type").get<std::string>();
  if (gt != "fixed" && gt != "lstm") throw ConfigError("unknown gate_type: " + gt);
  c.gate_type = gt == "fixed" ? GateType::kFixed : GateType::kLstm;
  const std::string gc = j.at("gate_config").get<std::string>();
  if (gc == "dual")
    c.gate_config = GateConfig::kDual;
  else if (gc == "single")
    c.gate_config = GateConfig::kSingle;
  else if (gc == "skip")
    c.gate_config = GateConfig::kSkip;
  else
    throw ConfigError("unknown gate_config: " + gc);
  c.feedback = j.at("feedback").get<bool>();
  c.dropout = j.at("dropout").get<double>();
  c.num_buckets = j.at("num_buckets").get<i64>();
  c.max_distance = j.at("max_distance").get<i64>();
  c.share_relpos = j.at("share_relpos").get<bool>();
  c.preset = j.value("preset", std::string());
  return c;
}

namespace detail {

template <typename Real>
const char* dtype_name() {
  return sizeof(Real) == 4 ? "f32" : "f64";
}

}  // namespace detail

template <typename Real>
void save_checkpoint(ModelParams<Real>& m, const std::string& stem) {
  nlohmann::json manifest;
  manifest["format"] = "blockrec-checkpoint-v1";
  manifest["config"] = config_to_json(m.config);

  std::ofstream blob(stem + ".bin", std::ios::binary | std::ios::trunc);
  if (!blob) throw ConfigError("cannot write " + stem + ".bin");
  nlohmann::json params = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (auto& [name, slot] : collect_params(m)) {
    const Tensor<Real>& t = (*slot)->value;
    nlohmann::json p;
    p["name"] = name;
    p["shape"] = t.shape;
    p["dtype"] = detail::dtype_name<Real>();
    p["offset_bytes"] = offset;
    params.push_back(std::move(p));
    blob.write(reinterpret_cast<const char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(Real)));
    offset += t.data.size() * sizeof(Real);
  }
  manifest["params"] = std::move(params);
  manifest["total_bytes"] = offset;

  std::ofstream mf(stem + ".json", std::ios::trunc);
  if (!mf) throw ConfigError("cannot write " + stem + ".json");
  mf << manifest.dump(2) << "\n";
}

// Rebuilds the model from the manifest config and fills every parameter from
// the blob. The stored dtype may differ from Real; values are converted.
template <typename Real>
ModelParams<Real> load_checkpoint(const std::string& stem) {
  std::ifstream mf(stem + ".json");
  if (!mf) throw ConfigError("cannot read " + stem + ".json");
  nlohmann::json manifest;
  mf >> manifest;
  if (manifest.value("format", "") != "blockrec-checkpoint-v1")
    throw ConfigError("not a blockrec checkpoint: " + stem + ".json");
  ModelConfig config = config_from_json(manifest.at("config"));

  Rng rng(0);  // structure only; every value is overwritten below
  ModelParams<Real> m = init_model<Real>(config, rng);

  std::ifstream blob(stem + ".bin", std::ios::binary);
  if (!blob) throw ConfigError("cannot read " + stem + ".bin");

  auto slots = collect_params(m);
  const auto& params = manifest.at("params");
  if (params.size() != slots.size())
    throw ConfigError("checkpoint parameter count mismatch for " + stem);
  for (size_t i = 0; i < slots.size(); ++i) {
    const auto& p = params[i];
    if (p.at("name").get<std::string>() != slots[i].first)
      throw ConfigError("checkpoint parameter order mismatch at " + slots[i].first);
    Tensor<Real>& t = (*slots[i].second)->value;
    if (p.at("shape").get<Shape>() != t.shape)
      throw ConfigError("checkpoint shape mismatch at " + slots[i].first);
    blob.seekg(static_cast<std::streamoff>(p.at("offset_bytes").get<std::uint64_t>()));
    const std::string dtype = p.at("dtype").get<std::string>();
    if (dtype == detail::dtype_name<Real>()) {
      blob.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(Real)));
    } else if (dtype == "f32") {
      std::vector<float> buf(t.data.size());
      blob.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
      for (size_t k = 0; k < buf.size(); ++k) t.data[k] = static_cast<Real>(buf[k]);
    } else if (dtype == "f64") {
      std::vector<double> buf(t.data.size());
      blob.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(double)));
      for (size_t k = 0; k < buf.size(); ++k) t.data[k] = static_cast<Real>(buf[k]);
    } else {
      throw ConfigError("unknown dtype in checkpoint: " + dtype);
    }
    if (!blob) throw ConfigError("checkpoint blob truncated at " + slots[i].first);
  }
  return m;
}

}  // namespace blockrec
