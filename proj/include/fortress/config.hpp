#pragma once

// Run configuration: model, training and synthesis sections in one JSON
// document, with dotted-path overrides such as "train.lr_max=3e-4".

#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

#include "fortress/dataio/synth.hpp"
#include "fortress/model.hpp"
#include "fortress/training.hpp"

namespace fortress {

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  detail::read_strict(j, "synth", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "n_samples") v.get_to(c.n_samples);
    else if (k == "size") v.get_to(c.size);
    else if (k == "num_classes") v.get_to(c.num_classes);
    else if (k == "seed") v.get_to(c.seed);
    else if (k == "density_min") v.get_to(c.density_min);
    else if (k == "density_max") v.get_to(c.density_max);
    else if (k == "val_fraction") v.get_to(c.val_fraction);
    else if (k == "test_fraction") v.get_to(c.test_fraction);
    else return false;
    return true;
  });
}

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SynthConfig synth;

  void validate() const {
    model.validate();
    train.validate();
    synth.validate();
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"model", c.model}, {"train", c.train}, {"synth", c.synth}};
}

/// Sections may be omitted (defaults apply); keys inside them are strict.
inline void from_json(const nlohmann::json& j, RunConfig& c) {
  detail::read_strict(j, "config", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "model") from_json(v, c.model);
    else if (k == "train") from_json(v, c.train);
    else if (k == "synth") from_json(v, c.synth);
    else return false;
    return true;
  });
}

inline RunConfig parse_run_config(const std::string& text, const std::string& what = "config") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(what + ": " + e.what());
  }
  RunConfig c;
  from_json(j, c);
  c.validate();
  return c;
}

/// "default" (or an empty path) yields the built-in defaults.
inline RunConfig load_run_config(const std::string& path) {
  if (path.empty() || path == "default") return RunConfig{};
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path);
}

namespace detail {

inline std::string json_category(const nlohmann::json& v) {
  if (v.is_boolean()) return "boolean";
  if (v.is_number()) return "number";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  if (v.is_object()) return "object";
  return "null";
}

}  // namespace detail

/// Applies one "section.key[.key]=value" override. The path must name an
/// existing field; the value is read as JSON, falling back to a bare string.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);

  nlohmann::json doc = cfg;
  nlohmann::json* node = &doc;
  std::istringstream parts(path);
  std::string key;
  while (std::getline(parts, key, '.')) {
    if (!node->is_object() || !node->contains(key)) throw ConfigError("unknown config key " + path);
    node = &(*node)[key];
  }
  if (node == &doc) throw ConfigError("unknown config key " + path);

  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  if (detail::json_category(value) != detail::json_category(*node)) {
    throw ConfigError("override " + path + " expects a " + detail::json_category(*node) + ", got '" + text + "'");
  }
  if (node->is_number_unsigned() && !value.is_number_unsigned()) {
    throw ConfigError("override " + path + " expects a non-negative integer, got '" + text + "'");
  }
  if (node->is_number_integer() && value.is_number_float()) {
    throw ConfigError("override " + path + " expects an integer, got '" + text + "'");
  }
  *node = value;
  RunConfig next;
  from_json(doc, next);
  next.validate();
  cfg = next;
}

}  // namespace fortress
