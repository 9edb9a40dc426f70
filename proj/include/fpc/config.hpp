// Line-based `key = value` configuration files. One file can carry model
// and training keys together; backbone stage tables live in their own files
// referenced by the `backbone` key.
#pragma once

#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fpc/archive.hpp"  // parse_stage / format_stage
#include "fpc/model.hpp"
#include "fpc/train.hpp"

namespace fpc {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  std::size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

// `key = value` with '#' comments; keys may repeat (backbone stages do).
inline KeyValues parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw usage_error("cannot open config file '" + path + "'");
  KeyValues kv;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw usage_error("config '" + path + "' line " + std::to_string(line_no) +
                        ": expected 'key = value'");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw usage_error("config '" + path + "' line " + std::to_string(line_no) +
                        ": empty key");
    kv.emplace_back(key, value);
  }
  return kv;
}

namespace detail {

inline int levenshtein(const std::string& a, const std::string& b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw usage_error("config key '" + key + "': expected a boolean, got '" + v + "'");
}

inline int parse_int(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    int r = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return r;
  } catch (const std::exception&) {
    throw usage_error("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

inline double parse_double(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    double r = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return r;
  } catch (const std::exception&) {
    throw usage_error("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

}  // namespace detail

inline const std::vector<std::string>& model_config_keys() {
  static const std::vector<std::string> keys{
      "backbone", "attention", "mha_heads", "mlp_hidden",
      "num_classes", "dropout_p", "dropout_layers", "freeze_prefix"};
  return keys;
}

inline const std::vector<std::string>& train_config_keys() {
  static const std::vector<std::string> keys{
      "epochs", "batch_size", "learning_rate", "adam_beta1", "adam_beta2", "adam_eps",
      "rotation_degrees", "zoom_factor", "resize_jitter", "flip_horizontal",
      "flip_vertical", "seed", "train_fraction"};
  return keys;
}

inline std::string valid_keys_message() {
  std::ostringstream os;
  os << "valid keys:";
  for (const auto& k : model_config_keys()) os << ' ' << k;
  for (const auto& k : train_config_keys()) os << ' ' << k;
  return os.str();
}

// Applies model and train keys from one file; unknown keys name the nearest
// valid key and list all of them.
inline void apply_config(const KeyValues& kv, ModelConfig& mc, TrainConfig& tc) {
  for (const auto& [key, value] : kv) {
    if (key == "backbone") mc.backbone = value;
    else if (key == "attention") mc.attention = attention_from_name(value);
    else if (key == "mha_heads") mc.mha_heads = detail::parse_int(value, key);
    else if (key == "mlp_hidden") {
      const std::size_t comma = value.find(',');
      if (comma == std::string::npos)
        throw usage_error("config key 'mlp_hidden': expected two widths like '256,128'");
      mc.mlp_h1 = detail::parse_int(trim(value.substr(0, comma)), key);
      mc.mlp_h2 = detail::parse_int(trim(value.substr(comma + 1)), key);
    } else if (key == "num_classes") mc.num_classes = detail::parse_int(value, key);
    else if (key == "dropout_p") mc.dropout_p = detail::parse_double(value, key);
    else if (key == "dropout_layers") mc.dropout_layers = detail::parse_int(value, key);
    else if (key == "freeze_prefix") mc.freeze_prefix = detail::parse_int(value, key);
    else if (key == "epochs") tc.epochs = detail::parse_int(value, key);
    else if (key == "batch_size") tc.batch_size = detail::parse_int(value, key);
    else if (key == "learning_rate") tc.learning_rate = detail::parse_double(value, key);
    else if (key == "adam_beta1") tc.adam_beta1 = detail::parse_double(value, key);
    else if (key == "adam_beta2") tc.adam_beta2 = detail::parse_double(value, key);
    else if (key == "adam_eps") tc.adam_eps = detail::parse_double(value, key);
    else if (key == "rotation_degrees") tc.rotation_degrees = detail::parse_double(value, key);
    else if (key == "zoom_factor") tc.zoom_factor = detail::parse_double(value, key);
    else if (key == "resize_jitter") tc.resize_jitter = detail::parse_double(value, key);
    else if (key == "flip_horizontal") tc.flip_horizontal = detail::parse_bool(value, key);
    else if (key == "flip_vertical") tc.flip_vertical = detail::parse_bool(value, key);
    else if (key == "seed") tc.seed = static_cast<std::uint64_t>(detail::parse_int(value, key));
    else if (key == "train_fraction") tc.train_fraction = detail::parse_double(value, key);
    else {
      std::string best;
      int best_d = 1 << 20;
      for (const auto& cand : model_config_keys()) {
        const int d = detail::levenshtein(key, cand);
        if (d < best_d) best_d = d, best = cand;
      }
      for (const auto& cand : train_config_keys()) {
        const int d = detail::levenshtein(key, cand);
        if (d < best_d) best_d = d, best = cand;
      }
      std::string msg = "unknown config key '" + key + "'";
      if (best_d <= 3) msg += "; did you mean '" + best + "'?";
      throw usage_error(msg + " (" + valid_keys_message() + ")");
    }
  }
}

// Backbone files: name, in_channels, stem_channels, head_channels,
// input_resolution, and repeated `stage = kind,e,c,r,s,k,se` lines.
inline BackboneConfig load_backbone_config(const std::string& path) {
  const KeyValues kv = parse_config_file(path);
  BackboneConfig bc;
  bc.stages.clear();
  for (const auto& [key, value] : kv) {
    if (key == "name") bc.name = value;
    else if (key == "in_channels") bc.in_channels = detail::parse_int(value, key);
    else if (key == "stem_channels") bc.stem_channels = detail::parse_int(value, key);
    else if (key == "head_channels") bc.head_channels = detail::parse_int(value, key);
    else if (key == "input_resolution") bc.input_resolution = detail::parse_int(value, key);
    else if (key == "stage") bc.stages.push_back(parse_stage(value, "backbone '" + path + "'"));
    else throw usage_error("backbone config '" + path + "': unknown key '" + key +
                           "' (valid: name in_channels stem_channels head_channels "
                           "input_resolution stage)");
  }
  bc.validate();
  return bc;
}

// "micro" (builtin) or a path to a backbone file.
inline BackboneConfig resolve_backbone(const std::string& name_or_path) {
  if (name_or_path == "micro") return micro_backbone();
  return load_backbone_config(name_or_path);
}

}  // namespace fpc
