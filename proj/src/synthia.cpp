#include "lnfmm/synthia.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include <json.hpp>

#include "lnfmm/errors.hpp"
#include "lnfmm/rng.hpp"

namespace lnfmm::synthia {

using nlohmann::json;

void GeneratorConfig::validate() const {
  if (n_classes == 0) throw ConfigError("data.n_classes", "must be positive");
  if (n_v_styles == 0) throw ConfigError("data.n_v_styles", "must be positive");
  if (n_t_phrasings == 0) throw ConfigError("data.n_t_phrasings", "must be positive");
  if (n_synonyms == 0) throw ConfigError("data.n_synonyms", "must be positive");
  if (!(sigma > 0.0)) throw ConfigError("data.sigma", "must be positive");
  if (!(radius > 0.0)) throw ConfigError("data.radius", "must be positive");
  if (length < 2) throw ConfigError("data.length", "must be at least 2");
  if (!(pairing_fraction >= 0.0 && pairing_fraction <= 1.0))
    throw ConfigError("data.pairing_fraction", "must lie in [0, 1]");
  if (n_test == 0) throw ConfigError("data.n_test", "must be positive");

  const std::size_t modes = n_classes * n_v_styles;
  if (modes > 1) {
    const double gap = 2.0 * radius * std::sin(std::numbers::pi / static_cast<double>(modes));
    if (gap < 6.0 * sigma)
      throw ConfigError("data.n_v_styles", "n_classes * n_v_styles = " + std::to_string(modes) +
                                               " puts adjacent centers " + std::to_string(gap) +
                                               " apart, below 6 sigma");
  }
  const std::size_t needed_vocab = n_classes * n_synonyms + (length - 2);
  if (vocab < needed_vocab)
    throw ConfigError("data.vocab", "needs at least " + std::to_string(needed_vocab) + " tokens");
  if (n_classes * n_t_phrasings > length * (length - 1) / 2)
    throw ConfigError("data.n_t_phrasings", "more templates than distinct noun slot pairs");
}

Generator::Generator(GeneratorConfig config) : config_(config) {
  config_.validate();
  std::vector<std::array<std::size_t, 2>> pairs;
  for (std::size_t i = 0; i < config_.length; ++i)
    for (std::size_t j = i + 1; j < config_.length; ++j) pairs.push_back({i, j});
  slots_.assign(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(config_.n_classes * config_.n_t_phrasings));
}

void Generator::check_class(std::size_t cls) const {
  if (cls >= config_.n_classes)
    throw ContractError("unknown class " + std::to_string(cls) + " (n_classes = " +
                        std::to_string(config_.n_classes) + ")");
}

Point Generator::center(std::size_t cls, std::size_t style) const {
  check_class(cls);
  if (style >= config_.n_v_styles) throw ContractError("unknown style " + std::to_string(style));
  const double k = static_cast<double>(cls * config_.n_v_styles + style);
  const double angle = 2.0 * std::numbers::pi * k / static_cast<double>(config_.n_classes * config_.n_v_styles);
  return {config_.radius * std::cos(angle), config_.radius * std::sin(angle)};
}

Tokens Generator::realize(std::size_t cls, std::size_t phrasing, std::size_t syn_a, std::size_t syn_b) const {
  check_class(cls);
  if (phrasing >= config_.n_t_phrasings) throw ContractError("unknown phrasing " + std::to_string(phrasing));
  const auto slot = slots_[cls * config_.n_t_phrasings + phrasing];
  const std::size_t function_base = config_.n_classes * config_.n_synonyms;
  Tokens seq(config_.length);
  std::size_t next_function = function_base;
  for (std::size_t i = 0; i < config_.length; ++i) {
    if (i == slot[0])
      seq[i] = cls * config_.n_synonyms + syn_a;
    else if (i == slot[1])
      seq[i] = cls * config_.n_synonyms + syn_b;
    else
      seq[i] = next_function++;
  }
  return seq;
}

Tokens Generator::canonical_template(std::size_t cls, std::size_t phrasing) const {
  return realize(cls, phrasing, 0, 0);
}

TruthModes Generator::truth_modes(std::size_t cls) const {
  check_class(cls);
  TruthModes modes;
  for (std::size_t s = 0; s < config_.n_v_styles; ++s) modes.centers.push_back(center(cls, s));
  for (std::size_t p = 0; p < config_.n_t_phrasings; ++p) modes.phrasings.push_back(canonical_template(cls, p));
  return modes;
}

Tokens Generator::canonicalize(const Tokens& seq) const {
  Tokens out = seq;
  const std::size_t nouns = config_.n_classes * config_.n_synonyms;
  for (auto& t : out)
    if (t < nouns) t -= t % config_.n_synonyms;
  return out;
}

TokenClass Generator::classify_tokens(const Tokens& seq) const {
  const Tokens canon = canonicalize(seq);
  TokenClass best;
  std::size_t best_d = std::numeric_limits<std::size_t>::max(), second_d = best_d;
  for (std::size_t c = 0; c < config_.n_classes; ++c)
    for (std::size_t p = 0; p < config_.n_t_phrasings; ++p) {
      const Tokens tmpl = canonical_template(c, p);
      std::size_t d = std::max(tmpl.size(), canon.size()) - std::min(tmpl.size(), canon.size());
      for (std::size_t i = 0; i < std::min(tmpl.size(), canon.size()); ++i) d += tmpl[i] != canon[i];
      if (d < best_d) {
        second_d = best_d;
        best_d = d;
        best.cls = c;
        best.phrasing = p;
      } else if (d < second_d) {
        second_d = d;
      }
    }
  best.distance = best_d;
  best.unambiguous = best_d < second_d;
  return best;
}

std::pair<std::size_t, std::size_t> Generator::classify_point(const Point& x) const {
  std::pair<std::size_t, std::size_t> best{0, 0};
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < config_.n_classes; ++c)
    for (std::size_t s = 0; s < config_.n_v_styles; ++s) {
      const Point m = center(c, s);
      const double d = std::hypot(x[0] - m[0], x[1] - m[1]);
      if (d < best_d) {
        best_d = d;
        best = {c, s};
      }
    }
  return best;
}

namespace {

Split generate_split(const Generator& gen, std::size_t n, std::size_t n_paired, Rng& rng) {
  const GeneratorConfig& cfg = gen.config();
  std::vector<bool> paired(n, false);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  for (std::size_t i = 0; i < n_paired; ++i) paired[order[i]] = true;

  Split split;
  split.records.reserve(n);
  split.truth.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Truth t;
    t.v_class = rng.index(cfg.n_classes);
    t.v_style = rng.index(cfg.n_v_styles);
    t.t_class = paired[i] ? t.v_class : rng.index(cfg.n_classes);
    t.t_phrasing = rng.index(cfg.n_t_phrasings);
    const std::size_t syn_a = rng.index(cfg.n_synonyms);
    const std::size_t syn_b = rng.index(cfg.n_synonyms);
    Record r;
    const Point m = gen.center(t.v_class, t.v_style);
    r.x_v = {m[0] + cfg.sigma * rng.normal(), m[1] + cfg.sigma * rng.normal()};
    r.x_t = gen.realize(t.t_class, t.t_phrasing, syn_a, syn_b);
    r.paired = paired[i];
    split.records.push_back(std::move(r));
    split.truth.push_back(t);
  }
  return split;
}

}  // namespace

Dataset Generator::generate() const {
  Rng train_rng = Rng::split(config_.seed, 1);
  Rng test_rng = Rng::split(config_.seed, 2);
  // The small slack keeps products like 0.3 * 2000 from rounding below an integer.
  const auto n_paired = static_cast<std::size_t>(
      std::floor(config_.pairing_fraction * static_cast<double>(config_.n_train) + 1e-9));
  Dataset data;
  data.train = generate_split(*this, config_.n_train, n_paired, train_rng);
  data.test = generate_split(*this, config_.n_test, config_.n_test, test_rng);
  return data;
}

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  return out;
}

}  // namespace

void write_records(const std::string& path, const Split& split, const std::string& header_json) {
  std::ofstream out = open_out(path);
  out << header_json << '\n';
  for (const Record& r : split.records) {
    const json j = {{"x_v", {r.x_v[0], r.x_v[1]}}, {"x_t", r.x_t}, {"paired", r.paired}};
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

void write_truth(const std::string& path, const Dataset& data, const std::string& header_json) {
  std::ofstream out = open_out(path);
  out << header_json << '\n';
  for (const auto& [name, split] : {std::pair<const char*, const Split*>{"train", &data.train}, {"test", &data.test}}) {
    for (std::size_t i = 0; i < split->truth.size(); ++i) {
      const Truth& t = split->truth[i];
      const json j = {{"split", name},        {"index", i},           {"v_class", t.v_class},
                      {"v_style", t.v_style}, {"t_class", t.t_class}, {"t_phrasing", t.t_phrasing}};
      out << j.dump() << '\n';
    }
  }
  if (!out) throw IoError("write failed: " + path);
}

namespace {

template <typename F>
void for_each_line(const std::string& path, F&& fn) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (j.contains("header")) continue;
    try {
      fn(j);
    } catch (const json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

}  // namespace

Split read_records(const std::string& path) {
  Split split;
  for_each_line(path, [&](const json& j) {
    Record r;
    const auto xv = j.at("x_v").get<std::vector<double>>();
    if (xv.size() != 2) throw FormatError(path + ": x_v must have 2 entries");
    r.x_v = {xv[0], xv[1]};
    r.x_t = j.at("x_t").get<Tokens>();
    r.paired = j.at("paired").get<bool>();
    split.records.push_back(std::move(r));
  });
  return split;
}

void read_truth(const std::string& path, Dataset& data) {
  data.train.truth.assign(data.train.records.size(), Truth{});
  data.test.truth.assign(data.test.records.size(), Truth{});
  for_each_line(path, [&](const json& j) {
    Split& split = j.at("split").get<std::string>() == "train" ? data.train : data.test;
    const auto index = j.at("index").get<std::size_t>();
    if (index >= split.truth.size()) throw FormatError(path + ": truth index out of range");
    Truth& t = split.truth[index];
    t.v_class = j.at("v_class").get<std::size_t>();
    t.v_style = j.at("v_style").get<std::size_t>();
    t.t_class = j.at("t_class").get<std::size_t>();
    t.t_phrasing = j.at("t_phrasing").get<std::size_t>();
  });
}

}  // namespace lnfmm::synthia
