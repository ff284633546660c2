#include "lnfmm/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "lnfmm/errors.hpp"

namespace lnfmm {

using nlohmann::json;

namespace {

using Setter = std::function<void(const json&, const std::string& field)>;
using Section = std::map<std::string, Setter>;

Setter bind(std::size_t& ref) {
  return [&ref](const json& v, const std::string& field) {
    if (!v.is_number_unsigned()) throw ConfigError(field, "expected a non-negative integer");
    ref = v.get<std::size_t>();
  };
}

Setter bind(std::uint64_t& ref, int) {
  return [&ref](const json& v, const std::string& field) {
    if (!v.is_number_unsigned()) throw ConfigError(field, "expected a non-negative integer");
    ref = v.get<std::uint64_t>();
  };
}

Setter bind(double& ref) {
  return [&ref](const json& v, const std::string& field) {
    if (!v.is_number()) throw ConfigError(field, "expected a number");
    ref = v.get<double>();
  };
}

Setter bind(bool& ref) {
  return [&ref](const json& v, const std::string& field) {
    if (!v.is_boolean()) throw ConfigError(field, "expected true or false");
    ref = v.get<bool>();
  };
}

Setter bind(model::ReconNorm& ref) {
  return [&ref](const json& v, const std::string& field) {
    if (v == "l2") ref = model::ReconNorm::kL2;
    else if (v == "l1") ref = model::ReconNorm::kL1;
    else throw ConfigError(field, "expected \"l1\" or \"l2\"");
  };
}

Setter bind(std::vector<std::size_t>& ref) {
  return [&ref](const json& v, const std::string& field) {
    if (!v.is_array()) throw ConfigError(field, "expected an array of non-negative integers");
    std::vector<std::size_t> out;
    for (const auto& e : v) {
      if (!e.is_number_unsigned()) throw ConfigError(field, "expected an array of non-negative integers");
      out.push_back(e.get<std::size_t>());
    }
    ref = std::move(out);
  };
}

std::map<std::string, Section> schema(RunConfig& c) {
  auto& d = c.data;
  auto& m = c.model;
  auto& o = c.objective;
  auto& t = c.train;
  auto& e = c.eval;
  return {
      {"data",
       {{"n_classes", bind(d.n_classes)},
        {"n_v_styles", bind(d.n_v_styles)},
        {"n_t_phrasings", bind(d.n_t_phrasings)},
        {"n_synonyms", bind(d.n_synonyms)},
        {"sigma", bind(d.sigma)},
        {"radius", bind(d.radius)},
        {"vocab", bind(d.vocab)},
        {"length", bind(d.length)},
        {"n_train", bind(d.n_train)},
        {"n_test", bind(d.n_test)},
        {"pairing_fraction", bind(d.pairing_fraction)}}},
      {"model",
       {{"shared_dim", bind(m.shared_dim)},
        {"zv_dim", bind(m.zv_dim)},
        {"zt_dim", bind(m.zt_dim)},
        {"hidden", bind(m.hidden)},
        {"embed_dim", bind(m.embed_dim)},
        {"coupling_hidden", bind(m.coupling_hidden)},
        {"v_prior_blocks", bind(m.v_prior_blocks)},
        {"t_prior_blocks", bind(m.t_prior_blocks)},
        {"bridge_blocks", bind(m.bridge_blocks)},
        {"logvar_min", bind(m.logvar_min)},
        {"logvar_max", bind(m.logvar_max)},
        {"recon_norm", bind(m.recon_norm)}}},
      {"objective",
       {{"lambda1", bind(o.lambda1)},
        {"lambda2", bind(o.lambda2)},
        {"lambda3", bind(o.lambda3)},
        {"lambda4", bind(o.lambda4)},
        {"lambda5", bind(o.lambda5)},
        {"lambda_align", bind(o.lambda_align)},
        {"beta", bind(o.beta)},
        {"symmetric", bind(o.symmetric)},
        {"cross_shared", bind(o.cross_shared)},
        {"detach_unpaired_shared", bind(o.detach_unpaired_shared)},
        {"anneal_steps", bind(o.anneal_steps)}}},
      {"train",
       {{"epochs", bind(t.epochs)},
        {"batch_size", bind(t.batch_size)},
        {"lr", bind(t.lr)},
        {"clip_norm", bind(t.clip_norm)}}},
      {"eval",
       {{"ks", bind(e.ks)},
        {"coverage_samples", bind(e.coverage_samples)},
        {"diversity_samples", bind(e.diversity_samples)},
        {"max_items", bind(e.max_items)},
        {"threads", bind(e.threads)},
        {"run_ivom", bind(e.run_ivom)},
        {"ivom_steps", bind(e.ivom.steps)},
        {"ivom_lr", bind(e.ivom.lr)},
        {"ivom_restarts", bind(e.ivom.restarts)},
        {"ivom_divergence_window", bind(e.ivom.divergence_window)},
        {"greedy", bind(e.sampling.greedy)},
        {"temperature", bind(e.sampling.temperature)}}},
  };
}

void set_field(RunConfig& config, const std::string& section, const std::string& key, const json& value) {
  if (section.empty() && key == "seed") {
    bind(config.seed, 0)(value, "seed");
    return;
  }
  const std::string field = section.empty() ? key : section + "." + key;
  auto sections = schema(config);
  const auto s = sections.find(section);
  if (s == sections.end()) throw ConfigError(field, "unknown key");
  const auto k = s->second.find(key);
  if (k == s->second.end()) throw ConfigError(field, "unknown key");
  k->second(value, field);
}

}  // namespace

void RunConfig::resolve() {
  data.seed = seed;
  data.validate();
  model.vocab = data.vocab;
  model.seq_len = data.length;
  model.validate();
  objective.validate();
  if (train.batch_size == 0) throw ConfigError("train.batch_size", "must be positive");
  if (!(train.lr > 0.0)) throw ConfigError("train.lr", "must be positive");
  if (!(train.clip_norm >= 0.0)) throw ConfigError("train.clip_norm", "must be >= 0");
  if (eval.ks.empty()) throw ConfigError("eval.ks", "needs at least one k");
  for (std::size_t k : eval.ks)
    if (k == 0) throw ConfigError("eval.ks", "every k must be >= 1");
  if (eval.diversity_samples < 2) throw ConfigError("eval.diversity_samples", "must be at least 2");
  if (eval.coverage_samples == 0) throw ConfigError("eval.coverage_samples", "must be positive");
  if (eval.threads == 0) throw ConfigError("eval.threads", "must be positive");
  if (eval.ivom.restarts == 0) throw ConfigError("eval.ivom_restarts", "must be positive");
  if (!(eval.sampling.temperature > 0.0)) throw ConfigError("eval.temperature", "must be positive");
}

json to_json(const RunConfig& c) {
  const auto& d = c.data;
  const auto& m = c.model;
  const auto& o = c.objective;
  const auto& t = c.train;
  const auto& e = c.eval;
  json j;
  j["seed"] = c.seed;
  j["data"] = {{"n_classes", d.n_classes},     {"n_v_styles", d.n_v_styles}, {"n_t_phrasings", d.n_t_phrasings},
               {"n_synonyms", d.n_synonyms},   {"sigma", d.sigma},           {"radius", d.radius},
               {"vocab", d.vocab},             {"length", d.length},         {"n_train", d.n_train},
               {"n_test", d.n_test},           {"pairing_fraction", d.pairing_fraction}};
  j["model"] = {{"shared_dim", m.shared_dim},
                {"zv_dim", m.zv_dim},
                {"zt_dim", m.zt_dim},
                {"hidden", m.hidden},
                {"embed_dim", m.embed_dim},
                {"coupling_hidden", m.coupling_hidden},
                {"v_prior_blocks", m.v_prior_blocks},
                {"t_prior_blocks", m.t_prior_blocks},
                {"bridge_blocks", m.bridge_blocks},
                {"logvar_min", m.logvar_min},
                {"logvar_max", m.logvar_max},
                {"recon_norm", m.recon_norm == model::ReconNorm::kL2 ? "l2" : "l1"}};
  j["objective"] = {{"lambda1", o.lambda1},       {"lambda2", o.lambda2},
                    {"lambda3", o.lambda3},       {"lambda4", o.lambda4},
                    {"lambda5", o.lambda5},       {"lambda_align", o.lambda_align},
                    {"beta", o.beta},             {"symmetric", o.symmetric},
                    {"cross_shared", o.cross_shared}, {"detach_unpaired_shared", o.detach_unpaired_shared},
                    {"anneal_steps", o.anneal_steps}};
  j["train"] = {{"epochs", t.epochs}, {"batch_size", t.batch_size}, {"lr", t.lr}, {"clip_norm", t.clip_norm}};
  j["eval"] = {{"ks", e.ks},
               {"coverage_samples", e.coverage_samples},
               {"diversity_samples", e.diversity_samples},
               {"max_items", e.max_items},
               {"threads", e.threads},
               {"run_ivom", e.run_ivom},
               {"ivom_steps", e.ivom.steps},
               {"ivom_lr", e.ivom.lr},
               {"ivom_restarts", e.ivom.restarts},
               {"ivom_divergence_window", e.ivom.divergence_window},
               {"greedy", e.sampling.greedy},
               {"temperature", e.sampling.temperature}};
  return j;
}

RunConfig from_json(const json& doc, RunConfig base) {
  if (!doc.is_object()) throw ConfigError("config", "top level must be an object");
  for (const auto& [section, body] : doc.items()) {
    if (section == "seed") {
      set_field(base, "", "seed", body);
      continue;
    }
    if (!schema(base).contains(section)) throw ConfigError(section, "unknown section");
    if (!body.is_object()) throw ConfigError(section, "expected an object");
    for (const auto& [key, value] : body.items()) set_field(base, section, key, value);
  }
  return base;
}

RunConfig load_config(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open config file");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path + ": " + std::string(e.what()));
  }
  return from_json(doc, std::move(base));
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like section.key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  const auto dot = path.find('.');
  if (dot == std::string::npos) set_field(config, "", path, value);
  else set_field(config, path.substr(0, dot), path.substr(dot + 1), value);
}

std::string config_hash(const RunConfig& config) {
  const std::string text = to_json(config).dump();
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

json artifact_header(const RunConfig& config, const std::string& kind) {
  return {{"kind", kind},
          {"tool_version", kToolVersion},
          {"config_hash", config_hash(config)},
          {"seed", config.seed},
          {"config", to_json(config)}};
}

}  // namespace lnfmm
