#include "lnfmm/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "lnfmm/errors.hpp"

namespace lnfmm::checkpoint {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'L', 'N', 'F', 'M', 'M', 'C', 'K', 'P'};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw FormatError(path + ": truncated checkpoint");
  return v;
}

void put_matrix(std::ostream& out, const Matrix& m) {
  out.write(reinterpret_cast<const char*>(m.data().data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

Matrix get_matrix(std::istream& in, std::size_t rows, std::size_t cols, const std::string& path) {
  Matrix m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data().data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!in) throw FormatError(path + ": truncated tensor data");
  return m;
}

json shape_entry(const std::string& name, const Matrix& m) {
  return {{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}};
}

}  // namespace

Checkpoint capture(const RunConfig& config, const model::LnfmmModel& model, train::Trainer* trainer,
                   double best_objective) {
  Checkpoint c;
  c.config = config;
  c.config_hash = config_hash(config);
  c.priors_initialized = model.priors_initialized();
  c.best_objective = best_objective;
  for (const auto& p : model.params().all()) c.params.emplace(p.name, p.var.value());
  if (trainer) {
    c.step = trainer->step();
    c.epoch = trainer->epoch();
    c.rng_state = trainer->rng().state();
    c.adam_steps = trainer->optimizer().step_count();
    c.moments = trainer->optimizer().moments();
  }
  return c;
}

void write(const std::string& path, const Checkpoint& c) {
  json index = json::array();
  for (const auto& [name, m] : c.params) index.push_back(shape_entry(name, m));
  json moments = json::array();
  for (const auto& [name, m] : c.moments) moments.push_back(shape_entry(name, m.first));
  const json header = {{"format_version", kFormatVersion},
                       {"tool_version", kToolVersion},
                       {"config", to_json(c.config)},
                       {"config_hash", c.config_hash},
                       {"seed", c.config.seed},
                       {"step", c.step},
                       {"epoch", c.epoch},
                       {"rng_state", c.rng_state},
                       {"priors_initialized", c.priors_initialized},
                       {"best_objective", c.best_objective},
                       {"adam_steps", c.adam_steps},
                       {"tensors", index},
                       {"moments", moments}};
  const std::string text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(tmp + ": cannot open for writing");
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kFormatVersion);
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, m] : c.params) put_matrix(out, m);
    for (const auto& [name, m] : c.moments) {
      put_matrix(out, m.first);
      put_matrix(out, m.second);
    }
    out.flush();
    if (!out) throw IoError(tmp + ": write failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(path + ": " + ec.message());
}

Checkpoint read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open checkpoint");
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw FormatError(path + ": not a checkpoint file");
  const auto version = get<std::uint32_t>(in, path);
  if (version != kFormatVersion)
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  const auto len = get<std::uint64_t>(in, path);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw FormatError(path + ": truncated header");

  Checkpoint c;
  try {
    const json h = json::parse(text);
    c.config = from_json(h.at("config"));
    c.config_hash = h.at("config_hash").get<std::string>();
    c.step = h.at("step").get<std::size_t>();
    c.epoch = h.at("epoch").get<std::size_t>();
    c.rng_state = h.at("rng_state").get<std::string>();
    c.priors_initialized = h.at("priors_initialized").get<bool>();
    c.best_objective = h.at("best_objective").get<double>();
    c.adam_steps = h.at("adam_steps").get<std::uint64_t>();
    for (const auto& t : h.at("tensors"))
      c.params.emplace(t.at("name").get<std::string>(),
                       get_matrix(in, t.at("rows").get<std::size_t>(), t.at("cols").get<std::size_t>(), path));
    for (const auto& t : h.at("moments")) {
      const auto rows = t.at("rows").get<std::size_t>(), cols = t.at("cols").get<std::size_t>();
      Adam::Moments m;
      m.first = get_matrix(in, rows, cols, path);
      m.second = get_matrix(in, rows, cols, path);
      c.moments.emplace(t.at("name").get<std::string>(), std::move(m));
    }
  } catch (const json::exception& e) {
    throw FormatError(path + ": bad header: " + e.what());
  }
  if (config_hash(c.config) != c.config_hash) throw FormatError(path + ": config hash mismatch");
  return c;
}

std::unique_ptr<model::LnfmmModel> restore_model(const Checkpoint& c) {
  RunConfig cfg = c.config;
  cfg.resolve();
  auto m = std::make_unique<model::LnfmmModel>(cfg.model, cfg.seed);
  auto& params = m->params().all();
  if (params.size() != c.params.size())
    throw FormatError("checkpoint holds " + std::to_string(c.params.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  for (auto& p : params) {
    const auto it = c.params.find(p.name);
    if (it == c.params.end()) throw FormatError("checkpoint is missing tensor " + p.name);
    if (it->second.shape() != p.var.value().shape()) throw FormatError("checkpoint tensor " + p.name + " has the wrong shape");
    p.var.mutable_value() = it->second;
  }
  if (c.priors_initialized) m->mark_priors_initialized();
  return m;
}

void restore_trainer(const Checkpoint& c, train::Trainer& trainer) {
  trainer.optimizer().restore(c.adam_steps, c.moments);
  trainer.set_progress(c.step, c.epoch);
  if (!c.rng_state.empty()) trainer.rng().restore(c.rng_state);
}

}  // namespace lnfmm::checkpoint
