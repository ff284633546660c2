// lnfmm: generate data, train, sample, evaluate and export latents.
//
// Every command takes --config (JSON), --seed and --out, plus repeatable
// --set section.key=value overrides. Precedence: flag > file > default.
// Failures print one line, "error: code=<code> message=<text>", and exit 1.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "lnfmm/checkpoint.hpp"
#include "lnfmm/config.hpp"
#include "lnfmm/errors.hpp"
#include "lnfmm/eval.hpp"
#include "lnfmm/synthia.hpp"
#include "lnfmm/train.hpp"

namespace fs = std::filesystem;
using namespace lnfmm;
using nlohmann::json;

namespace {

// Sampling streams sit apart from the data, training and eval streams.
constexpr std::uint64_t kSampleStreamBase = 1u << 30;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
  cmd->add_option("--config", c.config_path, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "seed for every stochastic step");
  cmd->add_option("--set", c.overrides, "override, section.key=value (repeatable)");
  cmd->add_option("--out", c.out, "output path")->required(out_required);
}

RunConfig resolve(const Common& c, RunConfig base = {}) {
  RunConfig cfg = c.config_path.empty() ? base : load_config(c.config_path, base);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  if (c.seed) cfg.seed = *c.seed;
  cfg.resolve();
  return cfg;
}

// For commands that load a checkpoint, only the eval section and the seed may
// change; the model and data sections are fixed by the checkpoint.
RunConfig resolve_for_checkpoint(const Common& c, const RunConfig& stored) {
  RunConfig cfg = stored;
  if (!c.config_path.empty()) {
    const RunConfig file = load_config(c.config_path);
    cfg.eval = file.eval;
    cfg.seed = file.seed;
  }
  for (const auto& o : c.overrides) {
    if (o.rfind("eval.", 0) != 0 && o.rfind("seed=", 0) != 0)
      throw ConfigError(o.substr(0, o.find('=')), "only eval.* and seed can be overridden for a trained model");
    apply_override(cfg, o);
  }
  if (c.seed) cfg.seed = *c.seed;
  cfg.resolve();
  return cfg;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir + ": " + ec.message());
}

std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::trunc) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) ensure_dir(parent.string());
  std::ofstream out(path, mode);
  if (!out) throw IoError(path + ": cannot open for writing");
  return out;
}

std::string header_line(const RunConfig& cfg, const std::string& kind) {
  return json{{"header", artifact_header(cfg, kind)}}.dump();
}

// Reads the header line of a dataset file and returns its config.
RunConfig dataset_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open");
  std::string line;
  std::getline(in, line);
  const json doc = json::parse(line, nullptr, false);
  if (doc.is_discarded() || !doc.contains("header")) throw FormatError(path + ": missing header line");
  return from_json(doc["header"].at("config"));
}

synthia::Dataset load_dataset(const std::string& dir, bool with_truth) {
  synthia::Dataset data;
  data.train = synthia::read_records(dir + "/train.jsonl");
  data.test = synthia::read_records(dir + "/test.jsonl");
  if (with_truth) synthia::read_truth(dir + "/truth.jsonl", data);
  return data;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---- gen-data ----

int cmd_gen_data(const Common& c) {
  const RunConfig cfg = resolve(c);
  const synthia::Generator gen(cfg.data);
  const synthia::Dataset data = gen.generate();
  ensure_dir(c.out);
  synthia::write_records(c.out + "/train.jsonl", data.train, header_line(cfg, "train_records"));
  synthia::write_records(c.out + "/test.jsonl", data.test, header_line(cfg, "test_records"));
  synthia::write_truth(c.out + "/truth.jsonl", data, header_line(cfg, "truth"));
  return 0;
}

// ---- train ----

struct TrainArgs {
  std::string data_dir;
  std::string resume;
};

void write_log_row(std::ostream& out, const char* kind, std::size_t epoch, std::size_t step,
                   const model::TermReport& r) {
  out << kind << ',' << epoch << ',' << step << ',' << fmt(r.shared) << ',' << fmt(r.kl_t) << ',' << fmt(r.kl_v)
      << ',' << fmt(r.recon_t) << ',' << fmt(r.recon_v) << ',' << fmt(r.align) << ',' << fmt(r.total) << '\n';
}

bool finite_report(const model::TermReport& r) {
  for (double v : {r.shared, r.kl_t, r.kl_v, r.recon_t, r.recon_v, r.align, r.total})
    if (!std::isfinite(v)) return false;
  return true;
}

int cmd_train(const Common& c, const TrainArgs& a) {
  // The dataset's own header fixes the data section.
  const RunConfig data_cfg = dataset_config(a.data_dir + "/train.jsonl");
  std::optional<checkpoint::Checkpoint> resumed;
  RunConfig cfg;
  if (!a.resume.empty()) {
    resumed = checkpoint::read(a.resume);
    // Model, objective and data stay as stored; the train section may change.
    cfg = resumed->config;
    cfg.train = resolve(c, resumed->config).train;
  } else {
    RunConfig base;
    base.data = data_cfg.data;
    cfg = resolve(c, base);
    cfg.data = data_cfg.data;
    cfg.data.seed = cfg.seed;
  }
  cfg.resolve();

  const synthia::Dataset data = load_dataset(a.data_dir, false);
  std::unique_ptr<model::LnfmmModel> model =
      resumed ? checkpoint::restore_model(*resumed) : std::make_unique<model::LnfmmModel>(cfg.model, cfg.seed);
  train::Trainer trainer(*model, cfg.objective, cfg.train, cfg.seed);
  double best = std::numeric_limits<double>::infinity();
  if (resumed) {
    checkpoint::restore_trainer(*resumed, trainer);
    best = resumed->best_objective;
  }

  ensure_dir(c.out);
  const std::string log_path = c.out + "/loss_log.csv";
  const bool append = resumed && fs::exists(log_path);
  std::ofstream log = open_out(log_path, append ? std::ios::app : std::ios::trunc);
  if (!append) {
    log << "# " << artifact_header(cfg, "loss_log").dump() << '\n';
    log << "kind,epoch,step,shared,kl_t,kl_v,recon_t,recon_v,align,total\n";
  }

  const std::string final_path = c.out + "/final.ckpt";
  const std::string best_path = c.out + "/best.ckpt";
  while (trainer.epoch() < cfg.train.epochs) {
    train::EpochRecord rec;
    try {
      rec = trainer.run_epoch(data.train.records, [&](const train::StepRecord& s) {
        write_log_row(log, "step", s.epoch, s.step, s.report);
        if (!finite_report(s.report)) throw NonFiniteError("objective", "training step " + std::to_string(s.step));
      });
    } catch (const NonFiniteError&) {
      log.flush();
      throw;  // final.ckpt still holds the last completed epoch
    }
    write_log_row(log, "epoch", rec.epoch, trainer.step(), rec.mean);
    log.flush();
    if (rec.mean.total < best) {
      best = rec.mean.total;
      checkpoint::write(best_path, checkpoint::capture(cfg, *model, &trainer, best));
    }
    checkpoint::write(final_path, checkpoint::capture(cfg, *model, &trainer, best));
    std::fprintf(stderr, "epoch %zu total %.6f\n", rec.epoch, rec.mean.total);
  }
  if (!fs::exists(final_path)) checkpoint::write(final_path, checkpoint::capture(cfg, *model, &trainer, best));
  return 0;
}

// ---- sample ----

struct SampleArgs {
  std::string checkpoint;
  std::string direction;
  std::string input;
  std::size_t n = 5;
};

int cmd_sample(const Common& c, const SampleArgs& a) {
  const checkpoint::Checkpoint ckpt = checkpoint::read(a.checkpoint);
  const RunConfig cfg = resolve_for_checkpoint(c, ckpt.config);
  const auto model = checkpoint::restore_model(ckpt);
  const synthia::Split inputs = synthia::read_records(a.input);
  if (a.n == 0) throw ConfigError("n", "must be positive");

  std::ofstream out = open_out(c.out);
  json h = artifact_header(cfg, "samples");
  h["checkpoint_config_hash"] = ckpt.config_hash;
  h["direction"] = a.direction;
  h["n"] = a.n;
  out << json{{"header", h}}.dump() << '\n';
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Rng rng = Rng::split(cfg.seed, kSampleStreamBase + i);
    if (a.direction == "t-given-v") {
      const auto s = model->sample_t_given_v(inputs.records[i].x_v, a.n, rng, cfg.eval.sampling);
      for (std::size_t j = 0; j < s.size(); ++j) out << json{{"input", i}, {"sample", j}, {"x_t", s[j]}}.dump() << '\n';
    } else {
      const auto s = model->sample_v_given_t(inputs.records[i].x_t, a.n, rng);
      for (std::size_t j = 0; j < s.size(); ++j)
        out << json{{"input", i}, {"sample", j}, {"x_v", {s[j][0], s[j][1]}}}.dump() << '\n';
    }
  }
  return 0;
}

// ---- eval ----

struct EvalArgs {
  std::string checkpoint;
  std::string data_dir;
};

int cmd_eval(const Common& c, const EvalArgs& a) {
  const checkpoint::Checkpoint ckpt = checkpoint::read(a.checkpoint);
  const RunConfig cfg = resolve_for_checkpoint(c, ckpt.config);
  const auto model = checkpoint::restore_model(ckpt);
  const RunConfig data_cfg = dataset_config(a.data_dir + "/test.jsonl");
  const synthia::Generator gen(data_cfg.data);
  const synthia::Dataset data = load_dataset(a.data_dir, true);

  json report = eval::evaluate(*model, gen, data.test, cfg.eval, cfg.seed);
  json h = artifact_header(cfg, "eval_report");
  h["checkpoint_config_hash"] = ckpt.config_hash;
  h["checkpoint_step"] = ckpt.step;
  report["header"] = h;
  std::ofstream out = open_out(c.out);
  out << report.dump(2) << '\n';
  return 0;
}

// ---- export-latents ----

struct ExportArgs {
  std::string checkpoint;
  std::string data_dir;
  std::string split = "test";
  std::string domain = "v";
};

int cmd_export(const Common& c, const ExportArgs& a) {
  const checkpoint::Checkpoint ckpt = checkpoint::read(a.checkpoint);
  const RunConfig cfg = resolve_for_checkpoint(c, ckpt.config);
  const auto model = checkpoint::restore_model(ckpt);
  const bool with_truth = fs::exists(a.data_dir + "/truth.jsonl");
  const synthia::Dataset data = load_dataset(a.data_dir, with_truth);
  const synthia::Split& split = a.split == "train" ? data.train : data.test;
  if (split.size() == 0) throw ContractError("export-latents: empty split");

  model::Partition part;
  {
    ad::NoGradGuard guard;
    if (a.domain == "v") {
      Matrix xv(split.size(), 2);
      for (std::size_t i = 0; i < split.size(); ++i) {
        xv(i, 0) = split.records[i].x_v[0];
        xv(i, 1) = split.records[i].x_v[1];
      }
      part = model->encode_v(xv, nullptr);
    } else {
      std::vector<synthia::Tokens> xt;
      for (const auto& r : split.records) xt.push_back(r.x_t);
      part = model->encode_t(xt, nullptr);
    }
  }
  const Matrix& zs = part.z_s.value();
  const Matrix& zp = part.z_prime.value();

  std::ofstream out = open_out(c.out);
  json h = artifact_header(cfg, "latents");
  h["checkpoint_config_hash"] = ckpt.config_hash;
  h["split"] = a.split;
  h["domain"] = a.domain;
  out << "# " << h.dump() << '\n';
  for (std::size_t j = 0; j < zs.cols(); ++j) out << "zs" << j << ',';
  for (std::size_t j = 0; j < zp.cols(); ++j) out << "zp" << j << ',';
  out << "class\n";
  for (std::size_t i = 0; i < zs.rows(); ++i) {
    for (std::size_t j = 0; j < zs.cols(); ++j) out << fmt(zs(i, j)) << ',';
    for (std::size_t j = 0; j < zp.cols(); ++j) out << fmt(zp(i, j)) << ',';
    if (with_truth) out << (a.domain == "v" ? split.truth[i].v_class : split.truth[i].t_class);
    else out << -1;
    out << '\n';
  }
  return 0;
}

std::string one_line(std::string s) {
  for (char& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-flow many-to-many model over a synthetic two-domain benchmark"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  Common common;
  auto* gen = app.add_subcommand("gen-data", "generate the train/test split and its eval truth");
  add_common(gen, common);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "train a model; writes loss_log.csv, final.ckpt and best.ckpt");
  add_common(train, common);
  train->add_option("--data", train_args.data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--resume", train_args.resume, "checkpoint to continue from")->check(CLI::ExistingFile);

  SampleArgs sample_args;
  auto* sample = app.add_subcommand("sample", "draw conditional samples for every input record");
  add_common(sample, common);
  sample->add_option("--checkpoint", sample_args.checkpoint)->required()->check(CLI::ExistingFile);
  sample->add_option("--direction", sample_args.direction)
      ->required()
      ->check(CLI::IsMember({"t-given-v", "v-given-t"}));
  sample->add_option("--input", sample_args.input, "records file")->required()->check(CLI::ExistingFile);
  sample->add_option("-n,--n", sample_args.n, "samples per input");

  EvalArgs eval_args;
  auto* ev = app.add_subcommand("eval", "write the metric report for the test split");
  add_common(ev, common);
  ev->add_option("--checkpoint", eval_args.checkpoint)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", eval_args.data_dir)->required()->check(CLI::ExistingDirectory);

  ExportArgs export_args;
  auto* ex = app.add_subcommand("export-latents", "write per-record z_s, z' and class as CSV");
  add_common(ex, common);
  ex->add_option("--checkpoint", export_args.checkpoint)->required()->check(CLI::ExistingFile);
  ex->add_option("--data", export_args.data_dir)->required()->check(CLI::ExistingDirectory);
  ex->add_option("--split", export_args.split)->check(CLI::IsMember({"train", "test"}));
  ex->add_option("--domain", export_args.domain)->check(CLI::IsMember({"v", "t"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: code=usage message=" << one_line(e.what()) << '\n';
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(common);
    if (*train) return cmd_train(common, train_args);
    if (*sample) return cmd_sample(common, sample_args);
    if (*ev) return cmd_eval(common, eval_args);
    if (*ex) return cmd_export(common, export_args);
  } catch (const Error& e) {
    std::cerr << "error: code=" << e.code() << " message=" << one_line(e.what()) << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: code=internal message=" << one_line(e.what()) << '\n';
    return 1;
  }
  return 1;
}
