#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "depthcrf/errors.hpp"

namespace depthcrf {

/// All architecture hyperparameters and ablation switches, loadable from a
/// flat key=value text file. Unknown keys are rejected.
struct ModelConfig {
  // architecture
  int window_size = 7;
  int base_width = 32;
  std::vector<int> depths{2, 2, 2, 2};
  std::vector<int> heads{1, 2, 4, 8};
  double mlp_ratio = 4.0;
  // ablation switches
  bool ha_enabled = true;
  bool hp_enabled = true;
  bool fc_enabled = true;
  bool msf_enabled = true;  // HPF multi-scale branch
  bool baf_enabled = true;  // HPF biaxial branch
  // adapter
  double adapter_ratio = 0.25;
  double adapter_lambda_init = 0.01;
  // fusion
  std::vector<int> hpf_scales{1, 2, 3};
  // depth range
  double max_depth = 10.0;
  double min_depth = 1e-3;
  // loss
  double loss_lambda = 0.85;
  double loss_alpha = 10.0;
  // schedule
  double lr_start = 2e-5;
  double lr_end = 1e-5;
  int batch_size = 4;
  int epochs = 30;
  // seeds
  std::uint64_t seed = 42;         // parameter init
  std::uint64_t data_seed = 1234;  // synthetic scenes
  std::uint64_t shuffle_seed = 7;  // epoch shuffling / augmentation
  // data
  int train_resolution = 64;
  int eval_resolution = 96;
  int train_scenes = 32;
  int eval_scenes = 8;
  double scene_near = 0.5;
  double scene_far = 10.0;
  int scene_rects = 4;
  int scene_spheres = 2;
  double texture_strength = 0.7;
  bool augment_hflip = false;
  // metric crop x0,y0,x1,y1 (empty = full image); reserved for real data
  std::vector<int> eval_crop;

  int stage_width(int stage) const { return base_width << stage; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
    if (window_size < 1) fail("window_size must be >= 1");
    if (base_width < 1) fail("base_width must be >= 1");
    if (depths.size() != 4 || heads.size() != 4) fail("depths and heads must list 4 stages");
    for (int d : depths)
      if (d < 1) fail("stage depths must be >= 1");
    for (int s = 0; s < 4; ++s) {
      if (heads[s] < 1) fail("head counts must be >= 1");
      if (stage_width(s) % heads[s]) fail("stage width not divisible by head count");
    }
    if (mlp_ratio <= 0) fail("mlp_ratio must be positive");
    if (adapter_ratio <= 0 || adapter_ratio > 1) fail("adapter_ratio must be in (0,1]");
    if (hpf_scales.empty()) fail("hpf_scales must not be empty");
    for (std::size_t i = 0; i < hpf_scales.size(); ++i) {
      if (hpf_scales[i] < 1) fail("hpf scales must be >= 1");
      if (i && hpf_scales[i] <= hpf_scales[i - 1]) fail("hpf scales must be strictly increasing");
    }
    if (min_depth <= 0 || max_depth <= min_depth) fail("need 0 < min_depth < max_depth");
    if (loss_lambda < 0 || loss_lambda > 1) fail("loss_lambda must be in [0,1]");
    if (loss_alpha <= 0) fail("loss_alpha must be positive");
    if (lr_start <= 0 || lr_end <= 0) fail("learning rates must be positive");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (epochs < 1) fail("epochs must be >= 1");
    if (train_resolution % 32 || eval_resolution % 32)
      fail("resolutions must be divisible by 32");
    if (train_scenes < 1 || eval_scenes < 1) fail("scene counts must be >= 1");
    if (scene_near <= 0 || scene_far <= scene_near) fail("need 0 < near < far");
    if (texture_strength < 0 || texture_strength > 1) fail("texture_strength must be in [0,1]");
    if (!eval_crop.empty() && eval_crop.size() != 4) fail("eval_crop needs x0,y0,x1,y1");
  }

  /// Canonical serialization; parse(serialize()) round-trips exactly.
  std::string serialize() const;
  static ModelConfig parse(const std::string& text);
  static ModelConfig load(const std::string& path);
};

namespace detail {

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<int> split_ints(const std::string& s, const std::string& key) {
  std::vector<int> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t pos;
      out.push_back(std::stoi(tok, &pos));
      if (pos != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ConfigError("config: bad integer '" + tok + "' for key " + key);
    }
  }
  return out;
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

inline std::string ModelConfig::serialize() const {
  std::ostringstream os;
  os << "window_size=" << window_size << "\n";
  os << "base_width=" << base_width << "\n";
  os << "depths=" << detail::join_ints(depths) << "\n";
  os << "heads=" << detail::join_ints(heads) << "\n";
  os << "mlp_ratio=" << detail::fmt_double(mlp_ratio) << "\n";
  os << "ha_enabled=" << (ha_enabled ? "true" : "false") << "\n";
  os << "hp_enabled=" << (hp_enabled ? "true" : "false") << "\n";
  os << "fc_enabled=" << (fc_enabled ? "true" : "false") << "\n";
  os << "msf_enabled=" << (msf_enabled ? "true" : "false") << "\n";
  os << "baf_enabled=" << (baf_enabled ? "true" : "false") << "\n";
  os << "adapter_ratio=" << detail::fmt_double(adapter_ratio) << "\n";
  os << "adapter_lambda_init=" << detail::fmt_double(adapter_lambda_init) << "\n";
  os << "hpf_scales=" << detail::join_ints(hpf_scales) << "\n";
  os << "max_depth=" << detail::fmt_double(max_depth) << "\n";
  os << "min_depth=" << detail::fmt_double(min_depth) << "\n";
  os << "loss_lambda=" << detail::fmt_double(loss_lambda) << "\n";
  os << "loss_alpha=" << detail::fmt_double(loss_alpha) << "\n";
  os << "lr_start=" << detail::fmt_double(lr_start) << "\n";
  os << "lr_end=" << detail::fmt_double(lr_end) << "\n";
  os << "batch_size=" << batch_size << "\n";
  os << "epochs=" << epochs << "\n";
  os << "seed=" << seed << "\n";
  os << "data_seed=" << data_seed << "\n";
  os << "shuffle_seed=" << shuffle_seed << "\n";
  os << "train_resolution=" << train_resolution << "\n";
  os << "eval_resolution=" << eval_resolution << "\n";
  os << "train_scenes=" << train_scenes << "\n";
  os << "eval_scenes=" << eval_scenes << "\n";
  os << "scene_near=" << detail::fmt_double(scene_near) << "\n";
  os << "scene_far=" << detail::fmt_double(scene_far) << "\n";
  os << "scene_rects=" << scene_rects << "\n";
  os << "scene_spheres=" << scene_spheres << "\n";
  os << "texture_strength=" << detail::fmt_double(texture_strength) << "\n";
  os << "augment_hflip=" << (augment_hflip ? "true" : "false") << "\n";
  os << "eval_crop=" << detail::join_ints(eval_crop) << "\n";
  return os.str();
}

inline ModelConfig ModelConfig::parse(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  auto as_int = [](const std::string& v, const std::string& key) {
    try {
      std::size_t pos;
      int r = std::stoi(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return r;
    } catch (const std::exception&) {
      throw ConfigError("config: bad integer '" + v + "' for key " + key);
    }
  };
  auto as_u64 = [](const std::string& v, const std::string& key) -> std::uint64_t {
    try {
      std::size_t pos;
      auto r = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return r;
    } catch (const std::exception&) {
      throw ConfigError("config: bad integer '" + v + "' for key " + key);
    }
  };
  auto as_double = [](const std::string& v, const std::string& key) {
    try {
      std::size_t pos;
      double r = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return r;
    } catch (const std::exception&) {
      throw ConfigError("config: bad number '" + v + "' for key " + key);
    }
  };
  auto as_bool = [](const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: bad boolean '" + v + "' for key " + key);
  };
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto l = line.find_first_not_of(" \t\r");
    if (l == std::string::npos) continue;
    auto r = line.find_last_not_of(" \t\r");
    line = line.substr(l, r - l + 1);
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " is not key=value");
    std::string key = line.substr(0, eq);
    std::string val = line.substr(eq + 1);
    while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
    while (!val.empty() && (val.front() == ' ' || val.front() == '\t')) val.erase(0, 1);

    if (key == "window_size") cfg.window_size = as_int(val, key);
    else if (key == "base_width") cfg.base_width = as_int(val, key);
    else if (key == "depths") cfg.depths = detail::split_ints(val, key);
    else if (key == "heads") cfg.heads = detail::split_ints(val, key);
    else if (key == "mlp_ratio") cfg.mlp_ratio = as_double(val, key);
    else if (key == "ha_enabled") cfg.ha_enabled = as_bool(val, key);
    else if (key == "hp_enabled") cfg.hp_enabled = as_bool(val, key);
    else if (key == "fc_enabled") cfg.fc_enabled = as_bool(val, key);
    else if (key == "msf_enabled") cfg.msf_enabled = as_bool(val, key);
    else if (key == "baf_enabled") cfg.baf_enabled = as_bool(val, key);
    else if (key == "adapter_ratio") cfg.adapter_ratio = as_double(val, key);
    else if (key == "adapter_lambda_init") cfg.adapter_lambda_init = as_double(val, key);
    else if (key == "hpf_scales") cfg.hpf_scales = detail::split_ints(val, key);
    else if (key == "max_depth") cfg.max_depth = as_double(val, key);
    else if (key == "min_depth") cfg.min_depth = as_double(val, key);
    else if (key == "loss_lambda") cfg.loss_lambda = as_double(val, key);
    else if (key == "loss_alpha") cfg.loss_alpha = as_double(val, key);
    else if (key == "lr_start") cfg.lr_start = as_double(val, key);
    else if (key == "lr_end") cfg.lr_end = as_double(val, key);
    else if (key == "batch_size") cfg.batch_size = as_int(val, key);
    else if (key == "epochs") cfg.epochs = as_int(val, key);
    else if (key == "seed") cfg.seed = as_u64(val, key);
    else if (key == "data_seed") cfg.data_seed = as_u64(val, key);
    else if (key == "shuffle_seed") cfg.shuffle_seed = as_u64(val, key);
    else if (key == "train_resolution") cfg.train_resolution = as_int(val, key);
    else if (key == "eval_resolution") cfg.eval_resolution = as_int(val, key);
    else if (key == "train_scenes") cfg.train_scenes = as_int(val, key);
    else if (key == "eval_scenes") cfg.eval_scenes = as_int(val, key);
    else if (key == "scene_near") cfg.scene_near = as_double(val, key);
    else if (key == "scene_far") cfg.scene_far = as_double(val, key);
    else if (key == "scene_rects") cfg.scene_rects = as_int(val, key);
    else if (key == "scene_spheres") cfg.scene_spheres = as_int(val, key);
    else if (key == "texture_strength") cfg.texture_strength = as_double(val, key);
    else if (key == "augment_hflip") cfg.augment_hflip = as_bool(val, key);
    else if (key == "eval_crop") cfg.eval_crop = detail::split_ints(val, key);
    else throw ConfigError("config: unknown key '" + key + "' on line " + std::to_string(lineno));
  }
  cfg.validate();
  return cfg;
}

inline ModelConfig ModelConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

}  // namespace depthcrf
