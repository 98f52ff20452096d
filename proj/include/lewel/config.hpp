#pragma once

// Run configuration. Config files use a small TOML subset: `[section]`
// headers, `key = value` pairs, `#` comments. Values are quoted strings,
// integers, floats, or true/false. Keys are addressed by dotted path
// (`train.beta`), which is also the `--set key=value` override syntax.
// Resolution order is defaults <- file <- overrides; unknown keys are
// rejected so typos fail loudly. The resolved config serializes to a
// canonical text form that parses back to an identical config — run
// snapshots and checkpoint headers embed that text.

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lewel/align.hpp"
#include "lewel/common.hpp"
#include "lewel/dataset.hpp"

namespace lewel {

struct ConfigMap {
  std::vector<std::pair<std::string, std::string>> entries;  // insertion-ordered, unique keys

  const std::string* get(const std::string& key) const {
    for (const auto& [k, v] : entries)
      if (k == key) return &v;
    return nullptr;
  }

  // Overrides replace; duplicates within one file are caught at parse time.
  void set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : entries)
      if (k == key) {
        v = value;
        return;
      }
    entries.emplace_back(key, value);
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Strip an end-of-line comment, respecting quoted strings.
inline std::string strip_comment(const std::string& line) {
  bool in_quotes = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_quotes = !in_quotes;
    if (line[i] == '#' && !in_quotes) return line.substr(0, i);
  }
  return line;
}

inline bool valid_key(const std::string& key) {
  if (key.empty() || key.front() == '.' || key.back() == '.') return false;
  for (char c : key)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '.') return false;
  return key.find("..") == std::string::npos;
}

// Unquote a value token: `"text"` with \" \\ \n \t escapes, or a bare scalar.
inline std::string parse_value(const std::string& token, const std::string& where) {
  if (token.empty()) throw ConfigError(cat(where, ": missing value"));
  if (token.front() != '"') {
    if (token.find(' ') != std::string::npos || token.find('"') != std::string::npos)
      throw ConfigError(cat(where, ": bare values cannot contain spaces or quotes: ", token));
    return token;
  }
  if (token.size() < 2 || token.back() != '"')
    throw ConfigError(cat(where, ": unterminated string: ", token));
  std::string out;
  for (std::size_t i = 1; i + 1 < token.size(); ++i) {
    char c = token[i];
    if (c == '"') throw ConfigError(cat(where, ": stray quote inside string: ", token));
    if (c == '\\') {
      if (i + 2 >= token.size()) throw ConfigError(cat(where, ": dangling escape: ", token));
      char e = token[++i];
      c = e == 'n' ? '\n' : e == 't' ? '\t' : e == '"' ? '"' : e == '\\' ? '\\' : '\0';
      if (c == '\0') throw ConfigError(cat(where, ": unknown escape \\", std::string(1, e)));
    }
    out.push_back(c);
  }
  return out;
}

inline std::string fmt_double(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);  // shortest round-trip form
  return std::string(buf, p);
}

inline std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    if (c == '\n') { out += "\\n"; continue; }
    if (c == '\t') { out += "\\t"; continue; }
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

}  // namespace detail

inline ConfigMap parse_config_text(const std::string& text, const std::string& origin = "<config>") {
  ConfigMap map;
  std::string prefix;
  std::size_t lineno = 0;
  std::istringstream in(text);
  std::string raw;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string where = cat(origin, ":", lineno);
    const std::string line = detail::trim(detail::strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(cat(where, ": unterminated section header"));
      prefix = detail::trim(line.substr(1, line.size() - 2));
      if (!detail::valid_key(prefix)) throw ConfigError(cat(where, ": bad section name [", prefix, "]"));
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(cat(where, ": expected key = value"));
    const std::string key = detail::trim(line.substr(0, eq));
    if (!detail::valid_key(key)) throw ConfigError(cat(where, ": bad key \"", key, "\""));
    const std::string full = prefix.empty() ? key : cat(prefix, ".", key);
    if (map.get(full) != nullptr) throw ConfigError(cat(where, ": duplicate key ", full));
    map.entries.emplace_back(full, detail::parse_value(detail::trim(line.substr(eq + 1)), where));
  }
  return map;
}

inline ConfigMap parse_config_file(const std::string& path) {
  const auto bytes = detail::read_file_bytes(path);
  return parse_config_text(std::string(bytes.begin(), bytes.end()), path);
}

// `--set train.beta=0.7`: everything after the first '=' is the value, taken
// verbatim (shell users shouldn't need nested quoting for plain strings).
inline void apply_override(ConfigMap& map, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError(cat("override must look like key=value, got: ", assignment));
  const std::string key = detail::trim(assignment.substr(0, eq));
  if (!detail::valid_key(key)) throw ConfigError(cat("override: bad key \"", key, "\""));
  std::string value = assignment.substr(eq + 1);
  if (!value.empty() && value.front() == '"')
    value = detail::parse_value(detail::trim(value), cat("override ", key));
  map.set(key, value);
}

struct TrainConfig {
  Variant variant = Variant::LewelB;
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  double lr0 = 0.2;            // default depends on variant
  double weight_decay = 1e-6;  // default depends on variant
  double beta = 0.5;
  double tau = 0.2;
  std::uint64_t seed = 1;
  std::size_t save_every = 0;         // epochs between mid-run snapshots; 0 = final only
  double momentum_base = 0.98;        // fixed rate (lewel_m) or cosine start (lewel_b)
  std::size_t queue_capacity = 4096;  // contrastive negatives (lewel_m)
  bool wd_exempt_bias_bn = true;      // skip weight decay on biases and BN affine params

  HeadConfig head;          // d/c/h/D/hidden and map source
  SyntheticSpec data;       // generated corpus geometry
  std::string data_path;    // nonempty: read a written corpus instead of generating

  std::size_t probe_epochs = 30;
  double probe_lr0 = 0.4;
  std::size_t probe_batch_size = 128;

  void validate() const {
    if (epochs == 0) throw ConfigError("train.epochs must be >= 1");
    if (batch_size < 2) throw ConfigError(cat("train.batch_size must be >= 2, got ", batch_size));
    if (lr0 <= 0.0) throw ConfigError(cat("train.lr0 must be positive, got ", lr0));
    if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
    if (beta < 0.0 || beta > 1.0) throw ConfigError(cat("train.beta must be in [0,1], got ", beta));
    if (tau <= 0.0) throw ConfigError(cat("train.tau must be positive, got ", tau));
    if (momentum_base <= 0.0 || momentum_base > 1.0)
      throw ConfigError(cat("train.momentum_base must be in (0,1], got ", momentum_base));
    if (variant == Variant::LewelM && queue_capacity < batch_size)
      throw ConfigError(cat("train.queue_capacity (", queue_capacity,
                            ") must be >= train.batch_size (", batch_size, ")"));
    head.validate();
    data.validate();
    if (probe_epochs == 0) throw ConfigError("probe.epochs must be >= 1");
    if (probe_lr0 <= 0.0) throw ConfigError("probe.lr0 must be positive");
    if (probe_batch_size < 2) throw ConfigError("probe.batch_size must be >= 2");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline const char* map_source_name(MapSource s) {
  switch (s) {
    case MapSource::Learned: return "learned";
    case MapSource::Uniform: return "uniform";
    case MapSource::Random: return "random";
  }
  throw ConfigError("unreachable map source");
}

namespace detail {

// Tracks which keys were consumed so leftovers can be reported as typos.
class ConfigReader {
 public:
  explicit ConfigReader(const ConfigMap& map) : map_(map), used_(map.entries.size(), false) {}

  std::optional<std::string> raw(const std::string& key) {
    for (std::size_t i = 0; i < map_.entries.size(); ++i)
      if (map_.entries[i].first == key) {
        used_[i] = true;
        return map_.entries[i].second;
      }
    return std::nullopt;
  }

  std::string str(const std::string& key, const std::string& def) {
    return raw(key).value_or(def);
  }

  std::size_t size(const std::string& key, std::size_t def) {
    const auto v = raw(key);
    if (!v) return def;
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || p != v->data() + v->size())
      throw ConfigError(cat(key, ": expected a nonnegative integer, got \"", *v, "\""));
    return static_cast<std::size_t>(out);
  }

  double f64(const std::string& key, double def) {
    const auto v = raw(key);
    if (!v) return def;
    // strtod instead of from_chars: accepted float spellings match strtod,
    // and to_chars output is always in its range.
    char* end = nullptr;
    const double out = std::strtod(v->c_str(), &end);
    if (v->empty() || end != v->c_str() + v->size())
      throw ConfigError(cat(key, ": expected a number, got \"", *v, "\""));
    if (!std::isfinite(out)) throw ConfigError(cat(key, ": must be finite, got \"", *v, "\""));
    return out;
  }

  bool boolean(const std::string& key, bool def) {
    const auto v = raw(key);
    if (!v) return def;
    if (*v == "true") return true;
    if (*v == "false") return false;
    throw ConfigError(cat(key, ": expected true or false, got \"", *v, "\""));
  }

  void finish() const {
    for (std::size_t i = 0; i < map_.entries.size(); ++i)
      if (!used_[i]) throw ConfigError(cat("unknown config key: ", map_.entries[i].first));
  }

 private:
  const ConfigMap& map_;
  std::vector<bool> used_;
};

}  // namespace detail

inline TrainConfig resolve_train_config(const ConfigMap& map) {
  detail::ConfigReader r(map);
  TrainConfig cfg;

  const std::string variant = r.str("train.variant", "lewel_b");
  if (variant == "lewel_b") {
    cfg.variant = Variant::LewelB;
    cfg.lr0 = 0.2;
    cfg.weight_decay = 1e-6;
    cfg.momentum_base = 0.98;
    cfg.wd_exempt_bias_bn = true;
  } else if (variant == "lewel_m") {
    cfg.variant = Variant::LewelM;
    cfg.lr0 = 0.06;
    cfg.weight_decay = 1e-4;
    cfg.momentum_base = 0.999;
    cfg.wd_exempt_bias_bn = false;
  } else {
    throw ConfigError(cat("train.variant: expected lewel_b or lewel_m, got \"", variant, "\""));
  }

  cfg.epochs = r.size("train.epochs", cfg.epochs);
  cfg.batch_size = r.size("train.batch_size", cfg.batch_size);
  cfg.lr0 = r.f64("train.lr0", cfg.lr0);
  cfg.weight_decay = r.f64("train.weight_decay", cfg.weight_decay);
  cfg.beta = r.f64("train.beta", cfg.beta);
  cfg.tau = r.f64("train.tau", cfg.tau);
  cfg.seed = r.size("train.seed", static_cast<std::size_t>(cfg.seed));
  cfg.save_every = r.size("train.save_every", cfg.save_every);
  cfg.momentum_base = r.f64("train.momentum_base", cfg.momentum_base);
  cfg.queue_capacity = r.size("train.queue_capacity", cfg.queue_capacity);
  cfg.wd_exempt_bias_bn = r.boolean("train.wd_exempt_bias_bn", cfg.wd_exempt_bias_bn);

  cfg.head.variant = cfg.variant;
  cfg.head.embed_dim = r.size("head.d", cfg.head.embed_dim);
  cfg.head.aligned_dim = r.size("head.c", cfg.head.aligned_dim);
  cfg.head.groups = r.size("head.h", cfg.head.groups);
  cfg.head.encoder_dim = r.size("head.D", cfg.head.encoder_dim);
  cfg.head.hidden = r.size("head.hidden", cfg.head.hidden);
  const std::string source = r.str("head.map_source", "learned");
  if (source == "learned") cfg.head.map_source = MapSource::Learned;
  else if (source == "uniform") cfg.head.map_source = MapSource::Uniform;
  else if (source == "random") cfg.head.map_source = MapSource::Random;
  else throw ConfigError(cat("head.map_source: expected learned/uniform/random, got \"", source, "\""));

  cfg.data.num_classes = r.size("data.classes", cfg.data.num_classes);
  cfg.data.canvas = r.size("data.image_size", cfg.data.canvas);
  cfg.data.train_size = r.size("data.train_size", cfg.data.train_size);
  cfg.data.test_size = r.size("data.test_size", cfg.data.test_size);
  cfg.data.clutter_count = r.size("data.clutter_count", cfg.data.clutter_count);
  cfg.data.clutter_intensity = r.f64("data.clutter_intensity", cfg.data.clutter_intensity);
  cfg.data.seed = r.size("data.seed", static_cast<std::size_t>(cfg.data.seed));
  cfg.data_path = r.str("data.path", cfg.data_path);

  cfg.probe_epochs = r.size("probe.epochs", cfg.probe_epochs);
  cfg.probe_lr0 = r.f64("probe.lr0", cfg.probe_lr0);
  cfg.probe_batch_size = r.size("probe.batch_size", cfg.probe_batch_size);

  r.finish();
  cfg.validate();
  return cfg;
}

inline TrainConfig resolve_train_config(const ConfigMap& file_map,
                                        const std::vector<std::string>& overrides) {
  ConfigMap merged = file_map;
  for (const auto& assignment : overrides) apply_override(merged, assignment);
  return resolve_train_config(merged);
}

// Canonical snapshot: fixed key order, shortest round-trip floats. Parsing
// this text back yields an identical TrainConfig, so the text doubles as the
// config fingerprint for logs and checkpoints.
inline std::string canonical_config_text(const TrainConfig& cfg) {
  using detail::fmt_double;
  std::ostringstream out;
  out << "[train]\n";
  out << "variant = \"" << variant_name(cfg.variant) << "\"\n";
  out << "epochs = " << cfg.epochs << "\n";
  out << "batch_size = " << cfg.batch_size << "\n";
  out << "lr0 = " << fmt_double(cfg.lr0) << "\n";
  out << "weight_decay = " << fmt_double(cfg.weight_decay) << "\n";
  out << "beta = " << fmt_double(cfg.beta) << "\n";
  out << "tau = " << fmt_double(cfg.tau) << "\n";
  out << "seed = " << cfg.seed << "\n";
  out << "save_every = " << cfg.save_every << "\n";
  out << "momentum_base = " << fmt_double(cfg.momentum_base) << "\n";
  out << "queue_capacity = " << cfg.queue_capacity << "\n";
  out << "wd_exempt_bias_bn = " << (cfg.wd_exempt_bias_bn ? "true" : "false") << "\n";
  out << "\n[head]\n";
  out << "d = " << cfg.head.embed_dim << "\n";
  out << "c = " << cfg.head.aligned_dim << "\n";
  out << "h = " << cfg.head.groups << "\n";
  out << "D = " << cfg.head.encoder_dim << "\n";
  out << "hidden = " << cfg.head.hidden << "\n";
  out << "map_source = \"" << map_source_name(cfg.head.map_source) << "\"\n";
  out << "\n[data]\n";
  out << "classes = " << cfg.data.num_classes << "\n";
  out << "image_size = " << cfg.data.canvas << "\n";
  out << "train_size = " << cfg.data.train_size << "\n";
  out << "test_size = " << cfg.data.test_size << "\n";
  out << "clutter_count = " << cfg.data.clutter_count << "\n";
  out << "clutter_intensity = " << fmt_double(cfg.data.clutter_intensity) << "\n";
  out << "seed = " << cfg.data.seed << "\n";
  out << "path = " << detail::quoted(cfg.data_path) << "\n";
  out << "\n[probe]\n";
  out << "epochs = " << cfg.probe_epochs << "\n";
  out << "lr0 = " << fmt_double(cfg.probe_lr0) << "\n";
  out << "batch_size = " << cfg.probe_batch_size << "\n";
  return out.str();
}

inline std::uint64_t config_fingerprint(const TrainConfig& cfg) {
  return hash_str(canonical_config_text(cfg));
}

}  // namespace lewel
