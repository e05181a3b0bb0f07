#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "iesrgs/densify.hpp"
#include "iesrgs/io.hpp"
#include "iesrgs/losses.hpp"
#include "iesrgs/optimizer.hpp"

namespace iesrgs {

/// Everything a training stage needs besides its data.
struct TrainConfig {
  std::size_t iterations{30000};  // 0 leaves the initialization untouched
  std::size_t mv_views{3};
  std::uint64_t seed{0};
  int scale{4};  // super-resolution factor

  double position_lr_init{1.6e-4};
  double position_lr_final{1.6e-6};
  LearningRates lr;  // lr.position is overwritten by the schedule each step
  AdamSettings adam;

  bool densify{true};
  std::size_t densify_from{500};
  std::size_t densify_until{15000};
  std::size_t densify_interval{100};
  DensifySettings densify_settings;

  bool smoothing{true};
  SamplingSettings sampling;
  ProjectionSettings projection;
  Vec3 background{0, 0, 0};

  std::size_t eval_interval{0};  // holdout PSNR every N steps; 0 = final step only
  LossConfig loss;

  void validate() const {
    if (mv_views < 1) throw ConfigError("mv_views must be >= 1");
    if (scale < 1) throw ConfigError("scale must be >= 1");
    if (!(position_lr_init > 0 && position_lr_final > 0)) throw ConfigError("position learning rates must be > 0");
    if (densify_interval < 1) throw ConfigError("densify_interval must be >= 1");
    if (!(sampling.k >= 0)) throw ConfigError("smoothing_k must be >= 0");
    if (!(projection.dilation >= 0)) throw ConfigError("dilation must be >= 0");
    if (!(projection.near_plane > 0)) throw ConfigError("near_plane must be > 0");
    loss.validate();
  }
};

namespace detail {

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::logic_error&) {
  }
  throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
}

inline long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used == v.size()) return i;
  } catch (const std::logic_error&) {
  }
  throw ConfigError("'" + key + "' expects an integer, got '" + v + "'");
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  const long long i = parse_int(key, v);
  if (i < 0) throw ConfigError("'" + key + "' must be non-negative");
  return static_cast<std::size_t>(i);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("'" + key + "' expects true/false, got '" + v + "'");
}

inline std::string fmt(double v) { return format_double(v); }

template <typename E>
E parse_enum(const std::string& key, const std::string& v, const std::vector<std::pair<std::string, E>>& names) {
  for (const auto& [name, e] : names)
    if (name == v) return e;
  std::string allowed;
  for (const auto& [name, e] : names) allowed += (allowed.empty() ? "" : "|") + name;
  throw ConfigError("'" + key + "' expects one of " + allowed + ", got '" + v + "'");
}

template <typename E>
std::string enum_name(E e, const std::vector<std::pair<std::string, E>>& names) {
  for (const auto& [name, x] : names)
    if (x == e) return name;
  return "?";
}

inline const std::vector<std::pair<std::string, TextureMode>> kTextureModes = {
    {"fused", TextureMode::Fused},
    {"external-only", TextureMode::ExternalOnly},
    {"internal-only", TextureMode::InternalOnly},
    {"sum", TextureMode::Sum}};
inline const std::vector<std::pair<std::string, PearsonMode>> kPearsonModes = {{"global", PearsonMode::Global},
                                                                               {"patch", PearsonMode::Patch}};
inline const std::vector<std::pair<std::string, MaskedSsimMode>> kMaskedSsimModes = {
    {"substitute", MaskedSsimMode::Substitute}, {"multiply-map", MaskedSsimMode::MultiplyMap}};

struct ConfigField {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

// clang-format off
#define IESRGS_DOUBLE(key, member) {key, {[](TrainConfig& c, const std::string& v) { c.member = parse_double(key, v); }, [](const TrainConfig& c) { return fmt(c.member); }}}
#define IESRGS_COUNT(key, member) {key, {[](TrainConfig& c, const std::string& v) { c.member = parse_count(key, v); }, [](const TrainConfig& c) { return std::to_string(c.member); }}}
#define IESRGS_BOOL(key, member) {key, {[](TrainConfig& c, const std::string& v) { c.member = parse_bool(key, v); }, [](const TrainConfig& c) { return std::string(c.member ? "true" : "false"); }}}
#define IESRGS_ENUM(key, member, table) {key, {[](TrainConfig& c, const std::string& v) { c.member = parse_enum(key, v, table); }, [](const TrainConfig& c) { return enum_name(c.member, table); }}}
// clang-format on

inline const std::map<std::string, ConfigField>& config_fields() {
  static const std::map<std::string, ConfigField> fields = {
      IESRGS_COUNT("iterations", iterations),
      IESRGS_COUNT("mv_views", mv_views),
      IESRGS_COUNT("seed", seed),
      {"scale",
       {[](TrainConfig& c, const std::string& v) { c.scale = static_cast<int>(parse_int("scale", v)); },
        [](const TrainConfig& c) { return std::to_string(c.scale); }}},
      IESRGS_DOUBLE("position_lr_init", position_lr_init),
      IESRGS_DOUBLE("position_lr_final", position_lr_final),
      IESRGS_DOUBLE("scale_lr", lr.scale),
      IESRGS_DOUBLE("rotation_lr", lr.rotation),
      IESRGS_DOUBLE("color_lr", lr.color),
      IESRGS_DOUBLE("opacity_lr", lr.opacity),
      IESRGS_DOUBLE("adam_beta1", adam.beta1),
      IESRGS_DOUBLE("adam_beta2", adam.beta2),
      IESRGS_DOUBLE("adam_epsilon", adam.epsilon),
      IESRGS_BOOL("densify", densify),
      IESRGS_COUNT("densify_from", densify_from),
      IESRGS_COUNT("densify_until", densify_until),
      IESRGS_COUNT("densify_interval", densify_interval),
      IESRGS_DOUBLE("densify_grad_threshold", densify_settings.grad_threshold),
      IESRGS_DOUBLE("percent_dense", densify_settings.percent_dense),
      IESRGS_DOUBLE("prune_opacity", densify_settings.prune_opacity),
      IESRGS_COUNT("max_gaussians", densify_settings.max_gaussians),
      IESRGS_BOOL("smoothing", smoothing),
      IESRGS_DOUBLE("smoothing_k", sampling.k),
      IESRGS_DOUBLE("smoothing_fallback", sampling.fallback_sigma),
      IESRGS_DOUBLE("dilation", projection.dilation),
      IESRGS_DOUBLE("near_plane", projection.near_plane),
      IESRGS_DOUBLE("background_r", background.x),
      IESRGS_DOUBLE("background_g", background.y),
      IESRGS_DOUBLE("background_b", background.z),
      IESRGS_COUNT("eval_interval", eval_interval),
      IESRGS_DOUBLE("lambda_ds", loss.lambda_ds),
      IESRGS_DOUBLE("lambda_i", loss.lambda_i),
      IESRGS_DOUBLE("lambda_e", loss.lambda_e),
      IESRGS_DOUBLE("threshold", loss.threshold),
      IESRGS_DOUBLE("epsilon", loss.epsilon),
      IESRGS_DOUBLE("min_coverage", loss.min_coverage),
      {"ssim_window",
       {[](TrainConfig& c, const std::string& v) { c.loss.ssim.window = static_cast<int>(parse_int("ssim_window", v)); },
        [](const TrainConfig& c) { return std::to_string(c.loss.ssim.window); }}},
      IESRGS_DOUBLE("ssim_sigma", loss.ssim.sigma),
      {"patch_size",
       {[](TrainConfig& c, const std::string& v) { c.loss.patch_size = static_cast<int>(parse_int("patch_size", v)); },
        [](const TrainConfig& c) { return std::to_string(c.loss.patch_size); }}},
      IESRGS_ENUM("texture_mode", loss.texture_mode, kTextureModes),
      IESRGS_ENUM("pearson_mode", loss.pearson_mode, kPearsonModes),
      IESRGS_ENUM("masked_ssim", loss.masked_ssim, kMaskedSsimModes),
  };
  return fields;
}

#undef IESRGS_DOUBLE
#undef IESRGS_COUNT
#undef IESRGS_BOOL
#undef IESRGS_ENUM

}  // namespace detail

/// Sets one field by name (underscores or dashes accepted).
inline void set_config_value(TrainConfig& cfg, std::string key, const std::string& value) {
  for (auto& ch : key)
    if (ch == '-') ch = '_';
  const auto& fields = detail::config_fields();
  const auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown configuration key '" + key + "'");
  it->second.set(cfg, value);
}

struct ConfigEntry {
  std::string key;
  std::string value;
  std::string where;  // "file:line", for error messages
};

/// Reads a flat `key = value` file; `#` starts a comment.
inline std::vector<ConfigEntry> read_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  const auto trim = [](const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  std::vector<ConfigEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    out.push_back({trim(line.substr(0, eq)), trim(line.substr(eq + 1)), where});
  }
  return out;
}

inline void apply_config_entry(TrainConfig& cfg, const ConfigEntry& e) {
  try {
    set_config_value(cfg, e.key, e.value);
  } catch (const ConfigError& err) {
    throw ConfigError(e.where + ": " + err.what());
  }
}

/// Applies every entry of a config file.
inline void apply_config_file(TrainConfig& cfg, const std::filesystem::path& path) {
  for (const auto& e : read_config_file(path)) apply_config_entry(cfg, e);
}

/// All fields in `key = value` form; reading this back reproduces `cfg`.
inline std::string dump_config(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [key, field] : detail::config_fields()) out += key + " = " + field.get(cfg) + "\n";
  return out;
}

}  // namespace iesrgs
