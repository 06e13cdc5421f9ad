#pragma once

// Engine configuration file (JSON).
//
// {
//   "vocabulary": "vocab.txt",                       // optional; bytes when absent
//   "providers": [
//     {"name": "M", "kind": "ngram", "corpus": "corpus.txt", "format": "ids", "order": 2, "alpha": 1.0, "cost": 1.0},
//     {"name": "T", "kind": "tabular", "default": [0.5, 0.5], "entries": [{"context": [0], "probs": [0.9, 0.1]}],
//      "key_length": 3, "cost": 1.0},
//     {"name": "R", "kind": "remote", "endpoint": "http://127.0.0.1:8080", "model": "R", "timeout_ms": 2000,
//      "retries": 2, "max_context": null}
//   ],
//   "classifiers": [
//     {"name": "C", "kind": "token_set", "targets": [3, 4], "words": [], "weight": 1.0, "bias": 0.0, "window": 0}
//   ],
//   "defaults": {"seed": 0, "top_k": null, "temperature": 1.0, "classifier_top_k": 100, "mode": "raw",
//                "floor": -10000.0, "s_max": 64, "max_tokens": 32, "calibration_tokens": 16}
// }
//
// Relative paths resolve against the config file's directory.

#include "modarith/formula.hpp"
#include "modarith/remote.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <set>

namespace modarith {

struct ComponentSpec {
  std::string name;
  std::string kind;
  nlohmann::json params;  // every parameter, defaults filled in
};

struct ConfigDefaults {
  std::uint64_t seed = 0;
  std::optional<std::size_t> top_k;
  double temperature = 1.0;
  std::size_t classifier_top_k = kDefaultClassifierTopK;
  NormalizationMode mode = NormalizationMode::Raw;
  double floor = kDefaultFloor;
  std::size_t s_max = 64;
  std::size_t max_tokens = 32;
  std::size_t calibration_tokens = 16;

  SamplingPolicy policy() const { return {top_k, temperature}; }
};

struct EngineConfig {
  std::optional<std::string> vocabulary;
  std::vector<ComponentSpec> providers;
  std::vector<ComponentSpec> classifiers;
  ConfigDefaults defaults;
  std::filesystem::path base_dir = ".";
};

namespace detail {

[[noreturn]] inline void config_error(const std::string& where, const std::string& what) {
  throw Error(ErrorCode::ConfigError, where + ": " + what);
}

// Copies `in` into a normalized object: known keys only, defaults for missing ones.
inline nlohmann::json normalize_params(const nlohmann::json& in, const std::string& where, const nlohmann::json& defaults,
                                       const std::set<std::string>& required) {
  if (!in.is_object()) config_error(where, "expected an object");
  nlohmann::json out = defaults;
  for (const std::string& key : required) {
    if (!in.contains(key)) config_error(where, "missing '" + key + "'");
  }
  for (const auto& [key, value] : in.items()) {
    if (key == "name" || key == "kind") continue;
    if (!defaults.contains(key) && !required.count(key)) config_error(where, "unknown key '" + key + "'");
    if (defaults.contains(key) && !defaults[key].is_null() && value.type() != defaults[key].type()) {
      const bool numeric = defaults[key].is_number() && value.is_number();
      if (!numeric) config_error(where, "'" + key + "' has the wrong type");
    }
    out[key] = value;
  }
  return out;
}

inline ComponentSpec component(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object() || !j.contains("name") || !j["name"].is_string()) config_error(where, "entries need a string 'name'");
  if (!j.contains("kind") || !j["kind"].is_string()) config_error(where, "entries need a string 'kind'");
  ComponentSpec spec{j["name"].get<std::string>(), j["kind"].get<std::string>(), {}};
  const std::string at = where + " '" + spec.name + "'";
  if (spec.kind == "ngram") {
    spec.params = normalize_params(j, at, {{"format", "ids"}, {"order", 2}, {"alpha", 1.0}, {"cost", 1.0}}, {"corpus"});
    if (!spec.params["corpus"].is_string()) config_error(at, "'corpus' must be a path");
    if (spec.params["format"] != "ids" && spec.params["format"] != "text") config_error(at, "'format' must be \"ids\" or \"text\"");
  } else if (spec.kind == "tabular") {
    spec.params = normalize_params(j, at, {{"entries", nlohmann::json::array()}, {"key_length", 3}, {"cost", 1.0}}, {"default"});
  } else if (spec.kind == "remote") {
    spec.params = normalize_params(j, at, {{"model", spec.name}, {"timeout_ms", 2000}, {"retries", 2}, {"max_context", nullptr}},
                                   {"endpoint"});
  } else if (spec.kind == "token_set") {
    spec.params = normalize_params(
        j, at, {{"targets", nlohmann::json::array()}, {"words", nlohmann::json::array()}, {"weight", 1.0}, {"bias", 0.0}, {"window", 0}}, {});
  } else {
    config_error(at, "unknown kind '" + spec.kind + "'");
  }
  return spec;
}

}  // namespace detail

inline EngineConfig parse_config(const nlohmann::json& j, std::filesystem::path base_dir = ".") {
  if (!j.is_object()) detail::config_error("config", "expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key != "vocabulary" && key != "providers" && key != "classifiers" && key != "defaults") {
      detail::config_error("config", "unknown key '" + key + "'");
    }
  }
  EngineConfig cfg;
  cfg.base_dir = std::move(base_dir);
  if (j.contains("vocabulary") && !j["vocabulary"].is_null()) {
    if (!j["vocabulary"].is_string()) detail::config_error("vocabulary", "expected a path");
    cfg.vocabulary = j["vocabulary"].get<std::string>();
  }
  std::set<std::string> names;
  const auto section = [&](const char* key, std::vector<ComponentSpec>& out, bool classifiers) {
    if (!j.contains(key)) return;
    if (!j[key].is_array()) detail::config_error(key, "expected an array");
    for (const auto& item : j[key]) {
      ComponentSpec spec = detail::component(item, classifiers ? "classifier" : "provider");
      if ((spec.kind == "token_set") != classifiers) detail::config_error(key, "kind '" + spec.kind + "' does not belong here");
      if (!names.insert(spec.name).second) detail::config_error(key, "duplicate name '" + spec.name + "'");
      out.push_back(std::move(spec));
    }
  };
  section("providers", cfg.providers, false);
  section("classifiers", cfg.classifiers, true);

  if (j.contains("defaults")) {
    const nlohmann::json d = detail::normalize_params(j["defaults"], "defaults",
                                                      {{"seed", 0},
                                                       {"top_k", nullptr},
                                                       {"temperature", 1.0},
                                                       {"classifier_top_k", kDefaultClassifierTopK},
                                                       {"mode", "raw"},
                                                       {"floor", kDefaultFloor},
                                                       {"s_max", 64},
                                                       {"max_tokens", 32},
                                                       {"calibration_tokens", 16}},
                                                      {});
    try {
      cfg.defaults.seed = d["seed"].get<std::uint64_t>();
      if (!d["top_k"].is_null()) cfg.defaults.top_k = d["top_k"].get<std::size_t>();
      cfg.defaults.temperature = d["temperature"].get<double>();
      cfg.defaults.classifier_top_k = d["classifier_top_k"].get<std::size_t>();
      cfg.defaults.mode = parse_mode(d["mode"].get<std::string>());
      cfg.defaults.floor = d["floor"].get<double>();
      cfg.defaults.s_max = d["s_max"].get<std::size_t>();
      cfg.defaults.max_tokens = d["max_tokens"].get<std::size_t>();
      cfg.defaults.calibration_tokens = d["calibration_tokens"].get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      detail::config_error("defaults", e.what());
    } catch (const Error& e) {
      detail::config_error("defaults", e.detail());
    }
    if (cfg.defaults.s_max < 1 || cfg.defaults.max_tokens < 1 || cfg.defaults.classifier_top_k < 1) {
      detail::config_error("defaults", "s_max, max_tokens and classifier_top_k must be at least 1");
    }
    if (!(cfg.defaults.temperature > 0.0)) detail::config_error("defaults", "temperature must be positive");
    if (cfg.defaults.top_k && *cfg.defaults.top_k == 0) detail::config_error("defaults", "top_k must be at least 1");
  }
  return cfg;
}

inline nlohmann::json to_json(const EngineConfig& cfg) {
  nlohmann::json j;
  j["vocabulary"] = cfg.vocabulary ? nlohmann::json(*cfg.vocabulary) : nlohmann::json(nullptr);
  const auto list = [](const std::vector<ComponentSpec>& specs) {
    nlohmann::json out = nlohmann::json::array();
    for (const ComponentSpec& s : specs) {
      nlohmann::json item = s.params;
      item["name"] = s.name;
      item["kind"] = s.kind;
      out.push_back(std::move(item));
    }
    return out;
  };
  j["providers"] = list(cfg.providers);
  j["classifiers"] = list(cfg.classifiers);
  const ConfigDefaults& d = cfg.defaults;
  j["defaults"] = {{"seed", d.seed},
                   {"top_k", d.top_k ? nlohmann::json(*d.top_k) : nlohmann::json(nullptr)},
                   {"temperature", d.temperature},
                   {"classifier_top_k", d.classifier_top_k},
                   {"mode", std::string(to_string(d.mode))},
                   {"floor", d.floor},
                   {"s_max", d.s_max},
                   {"max_tokens", d.max_tokens},
                   {"calibration_tokens", d.calibration_tokens}};
  return j;
}

inline EngineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ConfigError, "cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, path.string() + ": " + e.what());
  }
  return parse_config(j, path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

struct Engine {
  Vocabulary vocabulary;
  Registry registry;
  EngineConfig config;
};

namespace detail {

inline std::vector<double> probability_vector(const nlohmann::json& j, std::size_t n, const std::string& where) {
  if (!j.is_array() || j.size() != n) config_error(where, "expected " + std::to_string(n) + " probabilities");
  std::vector<double> p;
  for (const auto& v : j) {
    if (!v.is_number()) config_error(where, "probabilities must be numbers");
    p.push_back(v.get<double>());
  }
  return p;
}

inline std::filesystem::path resolve(const EngineConfig& cfg, const std::string& path) {
  const std::filesystem::path p(path);
  return p.is_absolute() ? p : cfg.base_dir / p;
}

}  // namespace detail

inline Engine build_engine(const EngineConfig& cfg) {
  Vocabulary vocab = cfg.vocabulary ? Vocabulary::load(detail::resolve(cfg, *cfg.vocabulary)) : Vocabulary::bytes();
  Registry registry(vocab.size(), cfg.defaults.floor);
  registry.set_classifier_top_k(cfg.defaults.classifier_top_k);
  const std::size_t n = vocab.size();

  for (const ComponentSpec& s : cfg.providers) {
    const nlohmann::json& p = s.params;
    const std::string at = "provider '" + s.name + "'";
    try {
      if (s.kind == "ngram") {
        const auto path = detail::resolve(cfg, p["corpus"].get<std::string>());
        std::vector<Context> corpus;
        if (p["format"] == "text") {
          std::ifstream in(path);
          if (!in) detail::config_error(at, "cannot open corpus " + path.string());
          std::string line;
          while (std::getline(in, line)) {
            Context seq = vocab.encode(line);
            if (!seq.empty()) corpus.push_back(std::move(seq));
          }
        } else {
          corpus = load_corpus(path);
        }
        registry.add(train_ngram(s.name, corpus, n, p["order"].get<std::size_t>(), p["alpha"].get<double>(), p["cost"].get<double>()));
      } else if (s.kind == "tabular") {
        auto fallback = LogDistribution::from_probabilities(detail::probability_vector(p["default"], n, at), cfg.defaults.floor);
        auto table = std::make_shared<TabularProvider>(s.name, fallback, p["key_length"].get<std::size_t>(), p["cost"].get<double>());
        for (const auto& e : p["entries"]) {
          table->set(e.at("context").get<Context>(),
                     LogDistribution::from_probabilities(detail::probability_vector(e.at("probs"), n, at), cfg.defaults.floor));
        }
        registry.add(table);
      } else if (s.kind == "remote") {
        RemoteOptions o;
        o.endpoint = p["endpoint"].get<std::string>();
        o.model = p["model"].get<std::string>();
        o.timeout = std::chrono::milliseconds(p["timeout_ms"].get<long long>());
        o.retries = p["retries"].get<std::size_t>();
        if (!p["max_context"].is_null()) o.max_context = p["max_context"].get<std::size_t>();
        o.floor = cfg.defaults.floor;
        registry.add(std::make_shared<RemoteProvider>(s.name, n, o));
      }
    } catch (const nlohmann::json::exception& e) {
      detail::config_error(at, e.what());
    }
  }

  for (const ComponentSpec& s : cfg.classifiers) {
    const nlohmann::json& p = s.params;
    const std::string at = "classifier '" + s.name + "'";
    std::vector<TokenId> targets;
    try {
      for (const auto& t : p["targets"]) {
        const auto id = t.get<long long>();
        if (id < 0 || static_cast<std::size_t>(id) >= n) detail::config_error(at, "target id outside the vocabulary");
        targets.push_back(static_cast<TokenId>(id));
      }
      for (const auto& w : p["words"]) {
        const auto id = vocab.find(w.get<std::string>());
        if (!id) detail::config_error(at, "word '" + w.get<std::string>() + "' is not in the vocabulary");
        targets.push_back(*id);
      }
      registry.add(std::make_shared<TokenSetClassifier>(s.name, targets, p["weight"].get<double>(), p["bias"].get<double>(),
                                                        p["window"].get<std::size_t>()));
    } catch (const nlohmann::json::exception& e) {
      detail::config_error(at, e.what());
    }
  }
  return {std::move(vocab), std::move(registry), cfg};
}

}  // namespace modarith
