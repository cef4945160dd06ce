#pragma once

// Line-oriented `key = value` run configuration. Blank lines and lines
// starting with '#' are ignored; unknown keys are errors.

#include <charconv>
#include <cstdio>
#include <functional>
#include <istream>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "atcon/pipeline.hpp"

namespace atcon {

inline std::string to_string(ConfidenceMode m) { return m == ConfidenceMode::raw ? "raw" : "normalized"; }
inline std::string to_string(WeightTarget t) { return t == WeightTarget::logits ? "logits" : "probabilities"; }
inline std::string to_string(KlMode m) { return m == KlMode::distributions ? "distributions" : "literal"; }

class ConfigError : public Error {
public:
  using Error::Error;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T out{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  return out;
}

template <class E>
E parse_choice(const std::string& key, const std::string& text, std::initializer_list<E> choices) {
  for (auto c : choices)
    if (to_string(c) == text) return c;
  throw ConfigError("config key '" + key + "': invalid value '" + text + "'");
}

struct ConfigKey {
  std::string name;
  std::string doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
ConfigKey size_key(std::string name, std::string doc, T RunConfig::* group, std::size_t T::* field) {
  return {name, std::move(doc), [group, field](const RunConfig& c) { return std::to_string(c.*group.*field); },
          [name, group, field](RunConfig& c, const std::string& v) {
            c.*group.*field = parse_number<std::size_t>(name, v);
          }};
}

template <class T>
ConfigKey double_key(std::string name, std::string doc, T RunConfig::* group, double T::* field) {
  return {name, std::move(doc), [group, field](const RunConfig& c) { return format_double(c.*group.*field); },
          [name, group, field](RunConfig& c, const std::string& v) { c.*group.*field = parse_number<double>(name, v); }};
}

template <class T>
ConfigKey top_key(std::string name, std::string doc, T RunConfig::* field) {
  return {name, std::move(doc),
          [field](const RunConfig& c) {
            if constexpr (std::is_same_v<T, double>) return format_double(c.*field);
            else return std::to_string(c.*field);
          },
          [name, field](RunConfig& c, const std::string& v) { c.*field = parse_number<T>(name, v); }};
}

inline std::string bool_text(bool b) { return b ? "true" : "false"; }

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back({"seed", "base seed for data, initialization and training streams (42)",
                 [](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, const std::string& v) {
                   c.seed = parse_number<std::uint64_t>("seed", v);
                   c.data.seed = c.seed;
                 }});
    k.push_back(size_key("classes", "number of classes C (8)", &RunConfig::data, &DomainSpec::classes));
    k.push_back(size_key("videos_per_class", "videos per class per domain (200)", &RunConfig::data,
                         &DomainSpec::videos_per_class));
    k.push_back(size_key("frames", "frames per video k (5)", &RunConfig::data, &DomainSpec::frames));
    k.push_back(size_key("frame_dim", "per-frame feature size d_in (32)", &RunConfig::data, &DomainSpec::frame_dim));
    k.push_back(double_key("shift_severity", "target shift severity in [0, 1] (0.7)", &RunConfig::data,
                           &DomainSpec::shift_severity));
    k.push_back(double_key("noise_std", "frame noise standard deviation (0.1)", &RunConfig::data, &DomainSpec::noise_std));

    k.push_back(size_key("d_enc", "frame encoding size (64)", &RunConfig::model, &ModelConfig::d_enc));
    k.push_back(size_key("d", "local temporal feature size (64)", &RunConfig::model, &ModelConfig::d));
    k.push_back(size_key("d_b", "bottleneck size (64)", &RunConfig::model, &ModelConfig::d_b));
    k.push_back(size_key("clips_per_scale", "maximum clips sampled per scale (3)", &RunConfig::model, &ModelConfig::M_max));
    k.push_back(size_key("encoder_hidden", "frame encoder hidden width (64)", &RunConfig::model,
                         &ModelConfig::encoder_hidden));
    k.push_back(size_key("relation_hidden", "relation MLP hidden width (128)", &RunConfig::model,
                         &ModelConfig::relation_hidden));

    k.push_back(double_key("lambda", "off-diagonal weight of feature consistency (0.005)", &RunConfig::loss,
                           &LossWeights::lambda));
    k.push_back(double_key("alpha_local", "local prediction consistency weight (1)", &RunConfig::loss,
                           &LossWeights::alpha_local));
    k.push_back(double_key("alpha_overall", "overall prediction consistency weight (1)", &RunConfig::loss,
                           &LossWeights::alpha_overall));
    k.push_back(double_key("beta_fc", "feature consistency weight (1)", &RunConfig::loss, &LossWeights::beta_fc));
    k.push_back(double_key("beta_pc", "prediction consistency weight (1)", &RunConfig::loss, &LossWeights::beta_pc));
    k.push_back(double_key("beta_tc", "temporal consistency weight (1)", &RunConfig::loss, &LossWeights::beta_tc));
    k.push_back(double_key("beta_im", "information maximization weight (1)", &RunConfig::loss, &LossWeights::beta_im));
    k.push_back(double_key("beta_ce", "pseudo-label cross-entropy weight (1)", &RunConfig::loss, &LossWeights::beta_ce));
    k.push_back(double_key("eps_norm", "feature standardization epsilon (1e-05)", &RunConfig::loss,
                           &LossWeights::eps_norm));
    k.push_back(double_key("eps_smooth", "source label smoothing (0.1)", &RunConfig::loss, &LossWeights::eps_smooth));

    k.push_back(double_key("lr_source", "source learning rate (0.01)", &RunConfig::optimizer, &OptimizerConfig::lr_source));
    k.push_back(double_key("lr_adapt", "adaptation learning rate (0.001)", &RunConfig::optimizer,
                           &OptimizerConfig::lr_adapt));
    k.push_back(double_key("momentum", "SGD momentum (0.9)", &RunConfig::optimizer, &OptimizerConfig::momentum));
    k.push_back(double_key("weight_decay", "SGD weight decay (0.001)", &RunConfig::optimizer,
                           &OptimizerConfig::weight_decay));

    k.push_back(top_key("epochs_source", "source training epochs (30)", &RunConfig::epochs_source));
    k.push_back(top_key("epochs_adapt", "adaptation epochs (15)", &RunConfig::epochs_adapt));
    k.push_back(top_key("batch_size", "mini-batch size (32)", &RunConfig::batch_size));
    k.push_back(top_key("pl_rounds", "centroid refresh rounds per pseudo-labeling (1)", &RunConfig::pl_rounds));
    k.push_back(top_key("threads", "ablation worker threads, 0 = all cores (0)", &RunConfig::threads));

    k.push_back({"variant", "adaptation objective (full)", [](const RunConfig& c) { return to_string(c.variant); },
                 [](RunConfig& c, const std::string& v) {
                   try {
                     c.variant = variant_from_string(v);
                   } catch (const Error&) {
                     throw ConfigError("config key 'variant': invalid value '" + v + "'");
                   }
                 }});
    k.push_back({"freeze_scope", "head_all | last_layer_only (head_all)",
                 [](const RunConfig& c) { return to_string(c.freeze_scope); },
                 [](RunConfig& c, const std::string& v) {
                   c.freeze_scope = parse_choice("freeze_scope", v, {FreezeScope::head_all, FreezeScope::last_layer_only});
                 }});
    k.push_back({"confidence", "raw | normalized (normalized)", [](const RunConfig& c) { return to_string(c.confidence); },
                 [](RunConfig& c, const std::string& v) {
                   c.confidence = parse_choice("confidence", v, {ConfidenceMode::raw, ConfidenceMode::normalized});
                 }});
    k.push_back({"weight_target", "logits | probabilities (logits)",
                 [](const RunConfig& c) { return to_string(c.weight_target); },
                 [](RunConfig& c, const std::string& v) {
                   c.weight_target = parse_choice("weight_target", v, {WeightTarget::logits, WeightTarget::probabilities});
                 }});
    k.push_back({"kl_mode", "distributions | literal (distributions)",
                 [](const RunConfig& c) { return to_string(c.kl_mode); },
                 [](RunConfig& c, const std::string& v) {
                   c.kl_mode = parse_choice("kl_mode", v, {KlMode::distributions, KlMode::literal});
                 }});
    k.push_back({"overall_pc_weighted", "overall prediction consistency on the weighted feature (true)",
                 [](const RunConfig& c) { return bool_text(c.overall_pc_weighted); },
                 [](RunConfig& c, const std::string& v) {
                   if (v != "true" && v != "false")
                     throw ConfigError("config key 'overall_pc_weighted': invalid value '" + v + "'");
                   c.overall_pc_weighted = v == "true";
                 }});
    return k;
  }();
  return keys;
}

}  // namespace detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys())
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

// "key=value" or "key = value".
inline void apply_assignment(RunConfig& cfg, const std::string& line, const std::string& where) {
  const auto eq = line.find('=');
  if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
  const auto key = detail::trim(std::string_view(line).substr(0, eq));
  const auto value = detail::trim(std::string_view(line).substr(eq + 1));
  if (key.empty()) throw ConfigError(where + ": empty key");
  try {
    set_config_value(cfg, key, value);
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

inline void apply_config(RunConfig& cfg, std::istream& in, const std::string& name) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    apply_assignment(cfg, t, name + ":" + std::to_string(lineno));
  }
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  apply_config(cfg, in, "config");
  cfg.validate();
  return cfg;
}

inline std::string emit_config(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& k : detail::config_keys()) os << k.name << " = " << k.get(cfg) << '\n';
  return os.str();
}

// Documented defaults, one commented line per key.
inline std::string config_reference() {
  const RunConfig defaults;
  std::ostringstream os;
  for (const auto& k : detail::config_keys()) os << "# " << k.doc << '\n' << k.name << " = " << k.get(defaults) << '\n';
  return os.str();
}

}  // namespace atcon
