#pragma once

#include <array>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "seqmix/mask.hpp"
#include "seqmix/ops.hpp"

namespace seqmix {

enum class ScoreOrder { linear, squared, exponential };
enum class QkActivation { none, relu, silu };
enum class NormKind { output_rmsnorm, softmax_norm };

// One point in the ablation space. Every named preset is a VariantConfig.
struct VariantConfig {
  ScoreOrder order = ScoreOrder::linear;
  QkActivation qk_activation = QkActivation::none;
  DecayKind amask = DecayKind::none;
  std::size_t conv_window = 1;
  ConvActivation conv_activation = ConvActivation::none;
  NormKind norm = NormKind::output_rmsnorm;
  bool discretize_values = false;
  bool d_residual = false;
  bool z_gate = false;
  bool scale_qk = false;

  bool operator==(const VariantConfig&) const = default;

  bool uses_dt() const { return discretize_values || amask == DecayKind::original; }
  bool normalized() const { return norm == NormKind::softmax_norm; }

  void validate() const {
    if (conv_window < 1 || conv_window > 4)
      throw ConfigError("conv_window must be in [1,4], got " + std::to_string(conv_window));
    if (norm == NormKind::softmax_norm && order == ScoreOrder::linear &&
        qk_activation != QkActivation::relu)
      throw ConfigError(
          "softmax_norm requires a non-negative score image: use order squared/exponential or "
          "qk_activation relu with linear order");
  }
};

inline const char* to_string(ScoreOrder o) {
  switch (o) {
    case ScoreOrder::linear: return "linear";
    case ScoreOrder::squared: return "squared";
    case ScoreOrder::exponential: return "exponential";
  }
  return "?";
}
inline const char* to_string(QkActivation a) {
  switch (a) {
    case QkActivation::none: return "none";
    case QkActivation::relu: return "relu";
    case QkActivation::silu: return "silu";
  }
  return "?";
}
inline const char* to_string(DecayKind k) {
  switch (k) {
    case DecayKind::none: return "none";
    case DecayKind::original: return "original";
    case DecayKind::softplus: return "softplus";
  }
  return "?";
}
inline const char* to_string(ConvActivation a) {
  return a == ConvActivation::silu ? "silu" : "none";
}
inline const char* to_string(NormKind n) {
  return n == NormKind::softmax_norm ? "softmax_norm" : "output_rmsnorm";
}

inline constexpr std::array<std::string_view, 6> kPresetNames = {
    "linear", "mamba2", "mamba2s", "twomamba", "twomamba_e", "softmax"};

inline std::string preset_list() {
  std::string s;
  for (auto n : kPresetNames) {
    if (!s.empty()) s += ", ";
    s += n;
  }
  return s;
}

inline VariantConfig preset(std::string_view name) {
  VariantConfig c;
  if (name == "linear") {
    c.order = ScoreOrder::linear;
    c.qk_activation = QkActivation::relu;
    c.norm = NormKind::softmax_norm;
  } else if (name == "mamba2") {
    c.order = ScoreOrder::linear;
    c.amask = DecayKind::original;
    c.conv_window = 4;
    c.conv_activation = ConvActivation::silu;
    c.norm = NormKind::output_rmsnorm;
    c.discretize_values = true;
    c.d_residual = true;
    c.z_gate = true;
  } else if (name == "mamba2s") {
    c.order = ScoreOrder::linear;
    c.amask = DecayKind::softplus;
    c.conv_window = 2;
    c.norm = NormKind::output_rmsnorm;
    c.discretize_values = true;
  } else if (name == "twomamba") {
    c.order = ScoreOrder::squared;
    c.amask = DecayKind::softplus;
    c.conv_window = 2;
    c.norm = NormKind::softmax_norm;
  } else if (name == "twomamba_e") {
    c = preset("twomamba");
    c.order = ScoreOrder::exponential;
  } else if (name == "softmax") {
    c.order = ScoreOrder::exponential;
    c.norm = NormKind::softmax_norm;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "'; valid presets: " +
                      preset_list());
  }
  return c;
}

// Flat key=value form, used for run snapshots and config files.
inline std::map<std::string, std::string> to_kv(const VariantConfig& c) {
  return {{"order", to_string(c.order)},
          {"qk_activation", to_string(c.qk_activation)},
          {"amask", to_string(c.amask)},
          {"conv_window", std::to_string(c.conv_window)},
          {"conv_activation", to_string(c.conv_activation)},
          {"norm", to_string(c.norm)},
          {"discretize_values", c.discretize_values ? "1" : "0"},
          {"d_residual", c.d_residual ? "1" : "0"},
          {"z_gate", c.z_gate ? "1" : "0"},
          {"scale_qk", c.scale_qk ? "1" : "0"}};
}

namespace detail {
template <typename E, std::size_t M>
E parse_enum(const std::string& key, const std::string& v,
             const std::array<std::pair<const char*, E>, M>& table) {
  for (auto& [name, e] : table)
    if (v == name) return e;
  std::string valid;
  for (auto& [name, e] : table) valid += std::string(valid.empty() ? "" : ", ") + name;
  throw ConfigError("invalid value '" + v + "' for " + key + "; valid: " + valid);
}
inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw ConfigError("invalid boolean '" + v + "' for " + key);
}
}  // namespace detail

// Applies overrides on top of a base config; unknown keys are an error.
inline VariantConfig apply_kv(VariantConfig c, const std::map<std::string, std::string>& kv) {
  using detail::parse_bool;
  using detail::parse_enum;
  for (const auto& [k, v] : kv) {
    if (k == "order")
      c.order = parse_enum<ScoreOrder, 3>(k, v, {{{"linear", ScoreOrder::linear},
                                                  {"squared", ScoreOrder::squared},
                                                  {"exponential", ScoreOrder::exponential}}});
    else if (k == "qk_activation")
      c.qk_activation = parse_enum<QkActivation, 3>(k, v, {{{"none", QkActivation::none},
                                                           {"relu", QkActivation::relu},
                                                           {"silu", QkActivation::silu}}});
    else if (k == "amask")
      c.amask = parse_enum<DecayKind, 3>(k, v, {{{"none", DecayKind::none},
                                                {"original", DecayKind::original},
                                                {"softplus", DecayKind::softplus}}});
    else if (k == "conv_window")
      c.conv_window = static_cast<std::size_t>(std::stoul(v));
    else if (k == "conv_activation")
      c.conv_activation = parse_enum<ConvActivation, 2>(
          k, v, {{{"none", ConvActivation::none}, {"silu", ConvActivation::silu}}});
    else if (k == "norm")
      c.norm = parse_enum<NormKind, 2>(k, v, {{{"output_rmsnorm", NormKind::output_rmsnorm},
                                              {"softmax_norm", NormKind::softmax_norm}}});
    else if (k == "discretize_values")
      c.discretize_values = parse_bool(k, v);
    else if (k == "d_residual")
      c.d_residual = parse_bool(k, v);
    else if (k == "z_gate")
      c.z_gate = parse_bool(k, v);
    else if (k == "scale_qk")
      c.scale_qk = parse_bool(k, v);
    else
      throw ConfigError("unknown variant key '" + k + "'");
  }
  c.validate();
  return c;
}

inline std::string describe(const VariantConfig& c) {
  std::ostringstream os;
  bool first = true;
  for (const auto& [k, v] : to_kv(c)) {
    os << (first ? "" : " ") << k << '=' << v;
    first = false;
  }
  return os.str();
}

}  // namespace seqmix
