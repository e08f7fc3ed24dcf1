#pragma once

// Run configuration. Every field has a dotted key; values come from, in
// increasing priority: built-in defaults, the dataset profile, a key = value
// config file, and command-line overrides.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "fsqat/classifier.hpp"
#include "fsqat/localize.hpp"
#include "fsqat/synthetic.hpp"

namespace fsqat {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct QATConfig {
  std::size_t heads = 4;
  std::size_t latent_dim = 256;
  double dropout = 0.1;
  double residual_init = 0.1;
};

struct RunConfig {
  std::string profile = "synthetic";
  std::string data_dir;
  std::size_t snippets = 100;
  std::size_t k_shot = 5;
  std::size_t epochs = 50;
  std::size_t episodes_per_epoch = 200;
  std::size_t val_episodes = 200;
  std::uint64_t val_seed = 7;
  double meta_lr = 0.004;
  double tau = 10.0;
  std::uint64_t seed = 0;
  std::size_t tasks = 5000;
  bool qva = true;
  bool augment = true;  // signed channel permutation per training episode
  AdaptConfig adapt;
  EvalConfig eval;
  QATConfig qat;
  SyntheticConfig synth;

  void validate() const;
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto t = trim(text);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size()) throw ConfigError("config: cannot parse '" + text + "' for key '" + key + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  const auto t = trim(text);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError("config: cannot parse '" + text + "' as boolean for key '" + key + "'");
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline std::map<std::string, Field> field_table() {
  std::map<std::string, Field> f;
  auto size_field = [](auto accessor) {
    return Field{[accessor](const RunConfig& c) { return std::to_string(accessor(const_cast<RunConfig&>(c))); },
                 [accessor](RunConfig& c, const std::string& v) {
                   accessor(c) = parse_number<std::remove_reference_t<decltype(accessor(c))>>("", v);
                 }};
  };
  auto double_field = [](auto accessor) {
    return Field{[accessor](const RunConfig& c) { return format_double(accessor(const_cast<RunConfig&>(c))); },
                 [accessor](RunConfig& c, const std::string& v) { accessor(c) = parse_number<double>("", v); }};
  };
  auto string_field = [](auto accessor) {
    return Field{[accessor](const RunConfig& c) { return accessor(const_cast<RunConfig&>(c)); },
                 [accessor](RunConfig& c, const std::string& v) { accessor(c) = trim(v); }};
  };

  f["profile"] = string_field([](RunConfig& c) -> std::string& { return c.profile; });
  f["data_dir"] = string_field([](RunConfig& c) -> std::string& { return c.data_dir; });
  f["snippets"] = size_field([](RunConfig& c) -> std::size_t& { return c.snippets; });
  f["k_shot"] = size_field([](RunConfig& c) -> std::size_t& { return c.k_shot; });
  f["epochs"] = size_field([](RunConfig& c) -> std::size_t& { return c.epochs; });
  f["episodes_per_epoch"] = size_field([](RunConfig& c) -> std::size_t& { return c.episodes_per_epoch; });
  f["val_episodes"] = size_field([](RunConfig& c) -> std::size_t& { return c.val_episodes; });
  f["val_seed"] = size_field([](RunConfig& c) -> std::uint64_t& { return c.val_seed; });
  f["meta_lr"] = double_field([](RunConfig& c) -> double& { return c.meta_lr; });
  f["tau"] = double_field([](RunConfig& c) -> double& { return c.tau; });
  f["seed"] = size_field([](RunConfig& c) -> std::uint64_t& { return c.seed; });
  f["tasks"] = size_field([](RunConfig& c) -> std::size_t& { return c.tasks; });
  f["augment"] = Field{[](const RunConfig& c) { return std::string(c.augment ? "true" : "false"); },
                       [](RunConfig& c, const std::string& v) { c.augment = parse_bool("augment", v); }};
  f["qva"] = Field{[](const RunConfig& c) { return std::string(c.qva ? "true" : "false"); },
                   [](RunConfig& c, const std::string& v) { c.qva = parse_bool("qva", v); }};
  f["setting"] = Field{[](const RunConfig& c) { return std::string(to_string(c.adapt.setting)); },
                       [](RunConfig& c, const std::string& v) { c.adapt.setting = parse_setting(trim(v)); }};
  f["inner.iterations"] = Field{[](const RunConfig& c) { return std::to_string(c.adapt.iterations); },
                                [](RunConfig& c, const std::string& v) { c.adapt.iterations = parse_number<int>("inner.iterations", v); }};
  f["inner.lr"] = double_field([](RunConfig& c) -> double& { return c.adapt.learning_rate; });
  f["inner.epsilon"] = double_field([](RunConfig& c) -> double& { return c.adapt.epsilon; });
  f["qat.heads"] = size_field([](RunConfig& c) -> std::size_t& { return c.qat.heads; });
  f["qat.dim"] = size_field([](RunConfig& c) -> std::size_t& { return c.qat.latent_dim; });
  f["qat.dropout"] = double_field([](RunConfig& c) -> double& { return c.qat.dropout; });
  f["qat.residual_init"] = double_field([](RunConfig& c) -> double& { return c.qat.residual_init; });
  f["eval.snippet_threshold"] = double_field([](RunConfig& c) -> double& { return c.eval.snippet_threshold; });
  f["eval.nms_threshold"] = double_field([](RunConfig& c) -> double& { return c.eval.nms_threshold; });
  f["eval.nms_sigma"] = double_field([](RunConfig& c) -> double& { return c.eval.nms_sigma; });
  f["eval.top_n"] = size_field([](RunConfig& c) -> std::size_t& { return c.eval.top_n; });
  f["eval.tiou_grid"] = Field{[](const RunConfig& c) {
                                std::string s;
                                for (std::size_t i = 0; i < c.eval.tiou_grid.size(); ++i) s += (i ? "," : "") + format_double(c.eval.tiou_grid[i]);
                                return s;
                              },
                              [](RunConfig& c, const std::string& v) {
                                c.eval.tiou_grid.clear();
                                std::stringstream ss(v);
                                std::string item;
                                while (std::getline(ss, item, ',')) c.eval.tiou_grid.push_back(parse_number<double>("eval.tiou_grid", item));
                              }};
  f["synth.domain"] = string_field([](RunConfig& c) -> std::string& { return c.synth.domain; });
  f["synth.dim"] = size_field([](RunConfig& c) -> std::size_t& { return c.synth.dim; });
  f["synth.classes"] = size_field([](RunConfig& c) -> std::size_t& { return c.synth.num_classes; });
  f["synth.videos_per_class"] = size_field([](RunConfig& c) -> std::size_t& { return c.synth.videos_per_class; });
  f["synth.fg_noise"] = double_field([](RunConfig& c) -> double& { return c.synth.fg_noise; });
  f["synth.bg_noise"] = double_field([](RunConfig& c) -> double& { return c.synth.bg_noise; });
  f["synth.bg_components"] = size_field([](RunConfig& c) -> std::size_t& { return c.synth.bg_components; });
  f["synth.bg_offset"] = double_field([](RunConfig& c) -> double& { return c.synth.bg_offset; });
  f["synth.jitter_deg"] = double_field([](RunConfig& c) -> double& { return c.synth.jitter_deg; });
  f["synth.scale_jitter"] = double_field([](RunConfig& c) -> double& { return c.synth.scale_jitter; });
  f["synth.context_shift"] = double_field([](RunConfig& c) -> double& { return c.synth.context_shift; });
  f["synth.min_segments"] = size_field([](RunConfig& c) -> std::size_t& { return c.synth.min_segments; });
  f["synth.max_segments"] = size_field([](RunConfig& c) -> std::size_t& { return c.synth.max_segments; });
  f["synth.min_segment_frac"] = double_field([](RunConfig& c) -> double& { return c.synth.min_segment_frac; });
  f["synth.max_segment_frac"] = double_field([](RunConfig& c) -> double& { return c.synth.max_segment_frac; });
  f["synth.min_duration"] = double_field([](RunConfig& c) -> double& { return c.synth.min_duration; });
  f["synth.max_duration"] = double_field([](RunConfig& c) -> double& { return c.synth.max_duration; });
  f["synth.seed"] = size_field([](RunConfig& c) -> std::uint64_t& { return c.synth.seed; });
  return f;
}

inline const std::map<std::string, Field>& fields() {
  static const auto table = field_table();
  return table;
}

}  // namespace detail

/// Structural constants per dataset profile.
inline void apply_profile(RunConfig& c, const std::string& profile) {
  c.profile = profile;
  if (profile == "activitynet-like" || profile == "synthetic" || profile == "synthetic-shifted") {
    c.snippets = 100;
    c.eval.nms_threshold = 0.7;
    c.eval.top_n = 100;
  } else if (profile == "thumos-like") {
    c.snippets = 256;
    c.eval.nms_threshold = 0.6;
    c.eval.top_n = 200;
  } else {
    throw ConfigError("unknown profile '" + profile + "' (expected synthetic | synthetic-shifted | activitynet-like | thumos-like)");
  }
  c.synth.domain = profile;
  c.synth.num_snippets = c.snippets;
  // benchmark-like profiles use single-instance videos
  if (profile == "activitynet-like" || profile == "thumos-like") c.synth.min_segments = c.synth.max_segments = 1;
  if (profile == "synthetic-shifted") {
    c.synth.context_shift = 1.8;
    c.synth.bg_noise = 0.45;
  }
}

inline void set_value(RunConfig& c, const std::string& key, const std::string& value) {
  const auto& f = detail::fields();
  auto it = f.find(key);
  if (it == f.end()) throw ConfigError("config: unknown key '" + key + "'");
  try {
    it->second.set(c, value);
  } catch (const ConfigError&) {
    throw ConfigError("config: cannot parse '" + value + "' for key '" + key + "'");
  } catch (const std::invalid_argument& e) {
    throw ConfigError("config: key '" + key + "': " + e.what());
  }
}

inline std::string get_value(const RunConfig& c, const std::string& key) {
  const auto& f = detail::fields();
  auto it = f.find(key);
  if (it == f.end()) throw ConfigError("config: unknown key '" + key + "'");
  return it->second.get(c);
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> k;
  for (const auto& [name, _] : detail::fields()) k.push_back(name);
  return k;
}

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Parses `key = value` lines; '#' starts a comment.
inline KeyValues parse_key_values(std::istream& is, const std::string& where = "config") {
  KeyValues out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ":" + std::to_string(n) + ": expected 'key = value'");
    out.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return out;
}

inline KeyValues read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open '" + path + "'");
  return parse_key_values(is, path);
}

/// defaults -> profile -> file -> overrides. The profile is taken from the
/// highest-priority source that names one.
inline RunConfig resolve_config(const KeyValues& file, const KeyValues& overrides) {
  std::string profile = "synthetic";
  for (const auto* src : {&file, &overrides})
    for (const auto& [k, v] : *src)
      if (k == "profile") profile = v;
  RunConfig c;
  apply_profile(c, profile);
  for (const auto* src : {&file, &overrides})
    for (const auto& [k, v] : *src)
      if (k != "profile") set_value(c, k, v);
  c.synth.num_snippets = c.snippets;
  c.validate();
  return c;
}

/// Every effective value, one `key = value` per line, sorted by key.
inline std::string echo_config(const RunConfig& c) {
  std::string out;
  for (const auto& [k, f] : detail::fields()) out += k + " = " + f.get(c) + "\n";
  return out;
}

inline void RunConfig::validate() const {
  if (k_shot == 0) throw ConfigError("config: k_shot must be positive");
  if (snippets == 0) throw ConfigError("config: snippets must be positive");
  if (!(tau > 0.0)) throw ConfigError("config: tau must be positive");
  if (meta_lr < 0.0) throw ConfigError("config: meta_lr must be >= 0");
  if (qat.heads == 0 || qat.latent_dim % qat.heads != 0) throw ConfigError("config: qat.dim must be divisible by qat.heads");
  if (qat.dropout < 0.0 || qat.dropout >= 1.0) throw ConfigError("config: qat.dropout must lie in [0,1)");
  try {
    adapt.validate();
    eval.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

}  // namespace fsqat
