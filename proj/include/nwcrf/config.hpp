#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nwcrf/depth_net.hpp"

namespace nwcrf {

// Flat `key = value` configuration lines, `#` comments, dotted keys.

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::pair<std::string, std::string>> parse_kv_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream is(text);
  std::string line;
  int64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected `key = value`, got `" +
                        line + "`");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

inline std::vector<std::pair<std::string, std::string>> parse_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_kv_text(buf.str());
}

namespace detail {

inline int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("key `" + key + "`: expected integer, got `" + v + "`");
  }
}

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("key `" + key + "`: expected unsigned integer, got `" + v + "`");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("key `" + key + "`: expected number, got `" + v + "`");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("key `" + key + "`: expected true/false, got `" + v + "`");
}

inline std::vector<int64_t> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int64_t> out;
  std::istringstream is(v);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(parse_int(key, trim(item)));
  if (out.empty()) throw ConfigError("key `" + key + "`: empty list");
  return out;
}

template <size_t N>
std::array<int64_t, N> parse_int_array(const std::string& key, const std::string& v) {
  std::vector<int64_t> list = parse_int_list(key, v);
  if (list.size() != N)
    throw ConfigError("key `" + key + "`: expected " + std::to_string(N) + " values, got " +
                      std::to_string(list.size()));
  std::array<int64_t, N> out{};
  std::copy(list.begin(), list.end(), out.begin());
  return out;
}

inline std::string join(const std::vector<int64_t>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

}  // namespace detail

// Applies one model.* key; returns false if the key is not a model key.
inline bool apply_model_kv(ModelConfig& cfg, const std::string& key, const std::string& value) {
  using namespace detail;
  if (key == "model.levels") cfg.levels = parse_int(key, value);
  else if (key == "model.window_size") cfg.window = parse_int(key, value);
  else if (key == "model.heads") cfg.heads = parse_int_array<4>(key, value);
  else if (key == "model.head_dim") cfg.head_dim = parse_int(key, value);
  else if (key == "model.encoder_widths") cfg.encoder_widths = parse_int_array<4>(key, value);
  else if (key == "model.ppm_scales") cfg.ppm_scales = parse_int_list(key, value);
  else if (key == "model.max_depth") cfg.max_depth = parse_double(key, value);
  else if (key == "model.seed") cfg.seed = parse_u64(key, value);
  else if (key == "model.scale_logits") cfg.scale_logits = parse_bool(key, value);
  else if (key == "model.norm_features") cfg.norm_features = parse_bool(key, value);
  else if (key == "model.ppm_clamp") cfg.ppm_clamp = parse_bool(key, value);
  else if (key == "model.decoder") {
    if (value == "crf") cfg.decoder = ModelConfig::Decoder::NeuralCrf;
    else if (value == "conv") cfg.decoder = ModelConfig::Decoder::ConvBaseline;
    else throw ConfigError("key `model.decoder`: expected crf or conv, got `" + value + "`");
  } else return false;
  return true;
}

inline std::vector<std::pair<std::string, std::string>> model_config_kv(const ModelConfig& cfg) {
  using detail::join;
  std::vector<std::pair<std::string, std::string>> kv;
  kv.emplace_back("model.levels", std::to_string(cfg.levels));
  kv.emplace_back("model.window_size", std::to_string(cfg.window));
  kv.emplace_back("model.heads", join({cfg.heads.begin(), cfg.heads.end()}));
  kv.emplace_back("model.head_dim", std::to_string(cfg.head_dim));
  kv.emplace_back("model.encoder_widths",
                  join({cfg.encoder_widths.begin(), cfg.encoder_widths.end()}));
  kv.emplace_back("model.ppm_scales", join(cfg.ppm_scales));
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", cfg.max_depth);
  kv.emplace_back("model.max_depth", buf);
  kv.emplace_back("model.seed", std::to_string(cfg.seed));
  kv.emplace_back("model.scale_logits", cfg.scale_logits ? "true" : "false");
  kv.emplace_back("model.norm_features", cfg.norm_features ? "true" : "false");
  kv.emplace_back("model.ppm_clamp", cfg.ppm_clamp ? "true" : "false");
  kv.emplace_back("model.decoder",
                  cfg.decoder == ModelConfig::Decoder::NeuralCrf ? "crf" : "conv");
  return kv;
}

struct TrainConfig {
  int64_t steps = 2000;
  int64_t batch_size = 4;
  int64_t eval_every = 250;
  double lr_start = 1e-4;
  double lr_end = 1e-5;

  void validate() const {
    if (steps < 0) throw ConfigError("train.steps must be >= 0");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (eval_every < 1) throw ConfigError("train.eval_every must be >= 1");
    if (lr_start <= 0.0 || lr_end <= 0.0) throw ConfigError("learning rates must be positive");
  }
};

struct DataConfig {
  int64_t image_size = 64;
  int64_t train_count = 200;
  int64_t val_count = 50;

  void validate() const {
    if (image_size < 32 || image_size % 32 != 0)
      throw ConfigError("data.image_size must be a positive multiple of 32");
    if (train_count < 1 || val_count < 1) throw ConfigError("dataset counts must be >= 1");
  }
};

// Complete run configuration: model + training + data + evaluation cap.
struct TrainSetup {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  double eval_cap = 10.0;

  void validate() const {
    model.validate();
    train.validate();
    data.validate();
    if (eval_cap <= 0.0) throw ConfigError("eval.cap must be positive");
  }
};

// Unknown keys are rejected, not ignored.
inline void apply_setup_kv(TrainSetup& setup, const std::string& key, const std::string& value) {
  using namespace detail;
  if (apply_model_kv(setup.model, key, value)) return;
  if (key == "train.steps") setup.train.steps = parse_int(key, value);
  else if (key == "train.batch_size") setup.train.batch_size = parse_int(key, value);
  else if (key == "train.eval_every") setup.train.eval_every = parse_int(key, value);
  else if (key == "train.lr_start") setup.train.lr_start = parse_double(key, value);
  else if (key == "train.lr_end") setup.train.lr_end = parse_double(key, value);
  else if (key == "data.image_size") setup.data.image_size = parse_int(key, value);
  else if (key == "data.train_count") setup.data.train_count = parse_int(key, value);
  else if (key == "data.val_count") setup.data.val_count = parse_int(key, value);
  else if (key == "eval.cap") setup.eval_cap = parse_double(key, value);
  else throw ConfigError("unknown config key `" + key + "`");
}

inline TrainSetup setup_from_kv(const std::vector<std::pair<std::string, std::string>>& kv) {
  TrainSetup setup;
  for (const auto& [k, v] : kv) apply_setup_kv(setup, k, v);
  return setup;
}

}  // namespace nwcrf
