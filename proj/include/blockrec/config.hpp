#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "blockrec/checkpoint.hpp"
#include "blockrec/optim.hpp"

namespace blockrec {

struct RunConfig {
  ModelConfig model;
  ScheduleConfig schedule;
  std::string train_data;   // directory of documents, or one concatenated file
  std::string eval_data;
  std::string separator;    // non-empty: treat data paths as concatenated files
  bool shuffle = true;
  std::uint64_t seed = 0;
  i64 steps = 1000;
  i64 batch = 1;
  i64 checkpoint_every = 0;  // 0: only the final checkpoint
  i64 log_every = 50;
  std::string out_dir = "out";
  std::string precision = "f32";  // f32 for training runs, f64 for verification

  void validate() const {
    model.validate();
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (precision != "f32" && precision != "f64")
      throw ConfigError("precision must be f32 or f64, got " + precision);
    if (schedule.warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
    if (schedule.kind == ScheduleConfig::Kind::kCosine &&
        schedule.min_rate > schedule.max_rate)
      throw ConfigError("cosine schedule: min_rate exceeds max_rate");
  }
};

// ---- presets -------------------------------------------------------------------

namespace detail {

inline ModelConfig paper_base() {
  ModelConfig c;
  c.vocab_size = 32000;
  c.dim = 1024;
  c.num_layers = 12;
  c.heads = 8;
  c.head_dim = 128;
  c.mlp_hidden = 4096;
  c.window = 512;
  c.segment = 4096;
  c.num_states = 512;
  c.recurrent_layers = {10};
  c.dropout = 0.05;
  return c;
}

inline ModelConfig tiny_base() {
  ModelConfig c;
  c.vocab_size = kByteVocab;
  c.dim = 128;
  c.num_layers = 4;
  c.heads = 4;
  c.head_dim = 32;
  c.mlp_hidden = 512;
  c.window = 32;
  c.segment = 256;
  c.num_states = 32;
  c.recurrent_layers = {3};
  c.dropout = 0.05;
  return c;
}

inline bool parse_gate(const std::string& gate, const std::string& config, ModelConfig& c) {
  if (gate == "fixed")
    c.gate_type = GateType::kFixed;
  else if (gate == "lstm")
    c.gate_type = GateType::kLstm;
  else
    return false;
  if (config == "dual")
    c.gate_config = GateConfig::kDual;
  else if (config == "single")
    c.gate_config = GateConfig::kSingle;
  else if (config == "skip")
    c.gate_config = GateConfig::kSkip;
  else
    return false;
  return true;
}

}  // namespace detail

inline std::vector<std::string> preset_names() {
  std::vector<std::string> names{"xl", "slide12", "slide13", "tiny", "tiny-xl", "tiny-slide4",
                                 "tiny-slide5"};
  for (const char* gate : {"lstm", "fixed"})
    for (const char* cfg : {"dual", "single", "skip"}) {
      names.push_back(std::string("rec-") + gate + "-" + cfg);
      names.push_back(std::string("feedback-") + gate + "-" + cfg);
    }
  return names;
}

// Preset model shapes. The paper-scale presets mirror the baseline taxonomy;
// the tiny presets are the desk-scale equivalents used by the test suites.
inline ModelConfig preset_model(const std::string& name) {
  ModelConfig c;
  if (name == "xl") {
    c = detail::paper_base();
    c.segment = c.window;  // one block per segment, cache only
    c.recurrent_layers = {};
  } else if (name == "slide12") {
    c = detail::paper_base();
    c.recurrent_layers = {};
  } else if (name == "slide13") {
    c = detail::paper_base();
    c.num_layers = 13;
    c.recurrent_layers = {};
  } else if (name == "tiny") {
    c = detail::tiny_base();
  } else if (name == "tiny-xl") {
    c = detail::tiny_base();
    c.segment = c.window;
    c.recurrent_layers = {};
  } else if (name == "tiny-slide4") {
    c = detail::tiny_base();
    c.recurrent_layers = {};
  } else if (name == "tiny-slide5") {
    c = detail::tiny_base();
    c.num_layers = 5;
    c.recurrent_layers = {};
  } else {
    bool feedback = false;
    std::string rest = name;
    if (rest.rfind("feedback-", 0) == 0) {
      feedback = true;
      rest = rest.substr(9);
    } else if (rest.rfind("rec-", 0) == 0) {
      rest = rest.substr(4);
    } else {
      rest.clear();
    }
    const auto dash = rest.find('-');
    bool ok = !rest.empty() && dash != std::string::npos;
    if (ok) {
      c = detail::paper_base();
      c.feedback = feedback;
      ok = detail::parse_gate(rest.substr(0, dash), rest.substr(dash + 1), c);
    }
    if (!ok) {
      std::string known;
      for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
      throw ConfigError("unknown preset '" + name + "'; valid presets: " + known);
    }
  }
  c.preset = name;
  return c;
}

// ---- JSON config files ------------------------------------------------------------

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known,
                                const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void apply_model_json(const nlohmann::json& j, ModelConfig& c) {
  reject_unknown_keys(j,
                      {"vocab_size", "dim", "num_layers", "heads", "head_dim", "mlp_hidden",
                       "window", "segment", "num_states", "recurrent_layers", "gate_type",
                       "gate_config", "feedback", "dropout", "num_buckets", "max_distance",
                       "share_relpos"},
                      "model");
  maybe(j, "vocab_size", c.vocab_size);
  maybe(j, "dim", c.dim);
  maybe(j, "num_layers", c.num_layers);
  maybe(j, "heads", c.heads);
  maybe(j, "head_dim", c.head_dim);
  maybe(j, "mlp_hidden", c.mlp_hidden);
  maybe(j, "window", c.window);
  maybe(j, "segment", c.segment);
  maybe(j, "num_states", c.num_states);
  maybe(j, "recurrent_layers", c.recurrent_layers);
  if (j.contains("gate_type")) {
    const std::string g = j.at("gate_type").get<std::string>();
    if (g == "fixed")
      c.gate_type = GateType::kFixed;
    else if (g == "lstm")
      c.gate_type = GateType::kLstm;
    else
      throw ConfigError("unknown gate_type: " + g);
  }
  if (j.contains("gate_config")) {
    const std::string g = j.at("gate_config").get<std::string>();
    if (g == "dual")
      c.gate_config = GateConfig::kDual;
    else if (g == "single")
      c.gate_config = GateConfig::kSingle;
    else if (g == "skip")
      c.gate_config = GateConfig::kSkip;
    else
      throw ConfigError("unknown gate_config: " + g);
  }
  maybe(j, "feedback", c.feedback);
  maybe(j, "dropout", c.dropout);
  maybe(j, "num_buckets", c.num_buckets);
  maybe(j, "max_distance", c.max_distance);
  maybe(j, "share_relpos", c.share_relpos);
}

inline void apply_schedule_json(const nlohmann::json& j, ScheduleConfig& s) {
  reject_unknown_keys(
      j, {"kind", "base_rate", "max_rate", "min_rate", "warmup_steps", "total_steps"},
      "schedule");
  if (j.contains("kind")) {
    const std::string k = j.at("kind").get<std::string>();
    if (k == "inverse_sqrt")
      s.kind = ScheduleConfig::Kind::kInverseSqrt;
    else if (k == "cosine")
      s.kind = ScheduleConfig::Kind::kCosine;
    else
      throw ConfigError("unknown schedule kind: " + k);
  }
  maybe(j, "base_rate", s.base_rate);
  maybe(j, "max_rate", s.max_rate);
  maybe(j, "min_rate", s.min_rate);
  maybe(j, "warmup_steps", s.warmup_steps);
  maybe(j, "total_steps", s.total_steps);
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"preset", "model", "schedule", "data", "run"}, "config root");
  RunConfig rc;
  if (j.contains("preset")) rc.model = preset_model(j.at("preset").get<std::string>());
  if (j.contains("model")) detail::apply_model_json(j.at("model"), rc.model);
  if (j.contains("schedule")) detail::apply_schedule_json(j.at("schedule"), rc.schedule);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown_keys(d, {"train", "eval", "separator", "shuffle"}, "data");
    detail::maybe(d, "train", rc.train_data);
    detail::maybe(d, "eval", rc.eval_data);
    detail::maybe(d, "separator", rc.separator);
    detail::maybe(d, "shuffle", rc.shuffle);
  }
  if (j.contains("run")) {
    const auto& r = j.at("run");
    detail::reject_unknown_keys(
        r, {"seed", "steps", "batch", "checkpoint_every", "log_every", "out_dir", "precision"},
        "run");
    detail::maybe(r, "seed", rc.seed);
    detail::maybe(r, "steps", rc.steps);
    detail::maybe(r, "batch", rc.batch);
    detail::maybe(r, "checkpoint_every", rc.checkpoint_every);
    detail::maybe(r, "log_every", rc.log_every);
    detail::maybe(r, "out_dir", rc.out_dir);
    detail::maybe(r, "precision", rc.precision);
  }
  rc.validate();
  return rc;
}

inline nlohmann::json run_config_to_json(const RunConfig& rc) {
  nlohmann::json j;
  j["model"] = config_to_json(rc.model);
  j["schedule"] = {
      {"kind", rc.schedule.kind == ScheduleConfig::Kind::kInverseSqrt ? "inverse_sqrt" : "cosine"},
      {"base_rate", rc.schedule.base_rate},
      {"max_rate", rc.schedule.max_rate},
      {"min_rate", rc.schedule.min_rate},
      {"warmup_steps", rc.schedule.warmup_steps},
      {"total_steps", rc.schedule.total_steps}};
  j["data"] = {{"train", rc.train_data},
               {"eval", rc.eval_data},
               {"separator", rc.separator},
               {"shuffle", rc.shuffle}};
  j["run"] = {{"seed", rc.seed},           {"steps", rc.steps},
              {"batch", rc.batch},         {"checkpoint_every", rc.checkpoint_every},
              {"log_every", rc.log_every}, {"out_dir", rc.out_dir},
              {"precision", rc.precision}};
  return j;
}

namespace detail {

// checkpoint.hpp serializes ModelConfig without the "preset" note; configs
// round-trip through the full model block, so drop unknown-but-harmless keys.
inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config file not found: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return j;
}

}  // namespace detail

inline RunConfig parse_config(const std::string& path) {
  return run_config_from_json(detail::load_json_file(path));
}

// Applies one `key=value` override onto a config JSON tree using dotted
// paths (model.window=64, run.steps=100, preset=tiny).
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like key=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(value);
  } catch (const nlohmann::json::exception&) {
    parsed = value;  // bare strings are allowed unquoted
  }

  nlohmann::json* node = &j;
  size_t start = 0;
  while (true) {
    const size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw ConfigError("bad override path '" + path + "'");
    if (dot == std::string::npos) {
      (*node)[key] = parsed;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

}  // namespace blockrec
