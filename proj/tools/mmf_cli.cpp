// Command-line front end: cohort synthesis, training, evaluation and
// inference over checkpoint files.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mmf/mmf.hpp"

namespace {

using nlohmann::json;
using namespace mmf;

struct Globals {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string manifest_dir;
};

struct Paths {
  std::string config, data, out, init, ckpt, report, record;
  std::size_t samples = 32;
};

std::string cohort_file(const std::string& dir) { return (std::filesystem::path(dir) / "cohort.mfck").string(); }

void write_json(const std::string& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

RunManifest open_manifest(const Globals& g, const std::string& command, const json& config) {
  if (g.manifest_dir.empty()) return {};
  return RunManifest(g.manifest_dir, command, config, g.seed);
}

EventSink sink_for(RunManifest& m) {
  if (!m.active()) return {};
  return [&m](const json& e) { m.event(e); };
}

// Checkpoints carry their run configuration; fall back to defaults for the
// evaluation settings when it is absent.
EvalConfig eval_config_of(const LoadedCheckpoint& ck) {
  RunConfig rc;
  if (ck.meta.contains("run")) rc = config_io::parse_config(ck.meta.at("run"));
  return rc.eval;
}

std::vector<PatientRecord> split_part(const Cohort& c, bool test) {
  const Split s = split_indices(c.records.size(), c.config.seed);
  return select(c.records, test ? s.test : s.train);
}

int cmd_synth(const Globals& g, const Paths& p) {
  const RunConfig rc = config_io::load_config(p.config);
  RunManifest m = open_manifest(g, "synth", config_io::to_json(rc));
  m.input(p.config);
  const Cohort cohort = generate_cohort(rc.cohort);
  write_cohort(p.out, cohort);
  m.artifact(cohort_file(p.out));
  m.summary({{"records", cohort.records.size()}});
  return 0;
}

int cmd_pretrain(const Globals& g, const Paths& p) {
  const RunConfig rc = config_io::load_config(p.config);
  if (rc.model.variant != ModelVariant::kFusion) throw ConfigError("model.variant: pretraining needs \"fusion\"");
  RunManifest m = open_manifest(g, "pretrain", config_io::to_json(rc));
  m.input(p.config);
  m.input(cohort_file(p.data));
  const Cohort cohort = read_cohort(p.data);
  const std::vector<PatientRecord> train = split_part(cohort, false);
  TrainedModel tm;
  tm.standardizer = Standardizer::fit(train, rc.model.dims);
  tm.model = init_model(rc.model, mix_seed(g.seed, 1));
  const auto history = pretrain(tm.model, preprocess_all(train, tm.standardizer), rc.pretrain, mix_seed(g.seed, 3),
                                sink_for(m));
  save_checkpoint(p.out, tm, config_io::to_json(rc));
  m.artifact(p.out);
  m.summary(history.empty() ? json::object()
                            : json{{"loss", history.back().total},
                                   {"loss_mask", history.back().reconstruction},
                                   {"loss_contrast", history.back().contrastive}});
  return 0;
}

int cmd_finetune(const Globals& g, const Paths& p) {
  const RunConfig rc = config_io::load_config(p.config);
  RunManifest m = open_manifest(g, "finetune", config_io::to_json(rc));
  m.input(p.config);
  m.input(cohort_file(p.data));
  const Cohort cohort = read_cohort(p.data);
  const std::vector<PatientRecord> train = split_part(cohort, false);
  std::optional<LoadedCheckpoint> init;
  if (!p.init.empty()) {
    m.input(p.init);
    init = load_checkpoint(p.init);
    if (!(init->trained.model.config == rc.model)) {
      throw ConfigError("model: configuration differs from the --init checkpoint");
    }
  }
  const TrainedModel tm = train_model(rc.model, train, rc.finetune, g.seed, init ? &init->trained.standardizer : nullptr,
                                      init ? &init->trained.model : nullptr, sink_for(m));
  save_checkpoint(p.out, tm, config_io::to_json(rc));
  m.artifact(p.out);
  m.summary({{"train_records", train.size()}});
  return 0;
}

int cmd_eval(const Globals& g, const Paths& p) {
  const LoadedCheckpoint ck = load_checkpoint(p.ckpt);
  RunManifest m = open_manifest(g, "eval", ck.meta);
  m.input(p.ckpt);
  m.input(cohort_file(p.data));
  const Cohort cohort = read_cohort(p.data);
  EvalReport rep = eval_model(ck.trained, split_part(cohort, true), eval_config_of(ck));
  rep.seed = g.seed;
  const json out = to_json(rep);
  write_json(p.report, out);
  m.artifact(p.report);
  m.summary(out.at("macro"));
  return 0;
}

int cmd_ablate(const Globals& g, const Paths& p) {
  const LoadedCheckpoint ck = load_checkpoint(p.ckpt);
  RunManifest m = open_manifest(g, "ablate", ck.meta);
  m.input(p.ckpt);
  m.input(cohort_file(p.data));
  const Cohort cohort = read_cohort(p.data);
  json subsets = json::array();
  for (EvalReport& r : ablate_modalities(ck.trained, split_part(cohort, true), eval_config_of(ck), g.threads)) {
    r.seed = g.seed;
    subsets.push_back(to_json(r));
  }
  write_json(p.report, {{"subsets", subsets}});
  m.artifact(p.report);
  m.summary({{"subsets", subsets.size()}});
  return 0;
}

int cmd_baselines(const Globals& g, const Paths& p) {
  const RunConfig rc = config_io::load_config(p.config);
  RunManifest m = open_manifest(g, "baselines", config_io::to_json(rc));
  m.input(p.config);
  m.input(cohort_file(p.data));
  const Cohort cohort = read_cohort(p.data);
  json reports = json::array(), summary = json::object();
  for (const EvalReport& r : run_baselines(cohort.records, cohort.config.seed, rc, g.seed, g.threads)) {
    reports.push_back(to_json(r));
    summary[r.variant] = r.macro.auroc;
  }
  write_json(p.report, {{"reports", reports}});
  m.artifact(p.report);
  m.summary({{"macro_auroc", summary}});
  return 0;
}

json attribution_json(const std::array<double, kNumModalities>& e) {
  json j;
  for (Modality m : kAllModalities) j[modality_name(m)] = e[index_of(m)];
  return j;
}

int cmd_predict(const Globals& g, const Paths& p) {
  const LoadedCheckpoint ck = load_checkpoint(p.ckpt);
  RunManifest m = open_manifest(g, "predict", ck.meta);
  m.input(p.ckpt);
  m.input(p.record);
  const PatientRecord r = read_record(p.record);
  validate_record(r, ck.trained.model.config.dims, ck.trained.model.config.num_classes);
  const Tensor probs = predict(ck.trained, r);
  const Uncertainty u = estimate_uncertainty(ck.trained, r, p.samples, g.seed);
  json out = {{"probs", probs.values()},
              {"uncertainty", {{"mean", u.mean.values()}, {"std", u.std.values()}, {"entropy", u.entropy}}}};
  if (ck.trained.model.config.variant == ModelVariant::kFusion)
    out["explanation"] = attribution_json(explain(ck.trained, r).attribution);
  write_json(p.out, out);
  m.artifact(p.out);
  m.summary({{"probs", probs.values()}});
  return 0;
}

int cmd_explain(const Globals& g, const Paths& p) {
  const LoadedCheckpoint ck = load_checkpoint(p.ckpt);
  RunManifest m = open_manifest(g, "explain", ck.meta);
  m.input(p.ckpt);
  m.input(p.record);
  const PatientRecord r = read_record(p.record);
  validate_record(r, ck.trained.model.config.dims, ck.trained.model.config.num_classes);
  const Explanation ex = explain(ck.trained, r);
  json layers = json::array();
  for (const auto& layer : ex.trace.weights) {
    json heads = json::array();
    for (const Tensor& w : layer) {
      json rows = json::array();
      for (std::size_t i = 0; i < w.rows(); ++i) rows.push_back(std::vector<double>(w.row(i).begin(), w.row(i).end()));
      heads.push_back(rows);
    }
    layers.push_back(heads);
  }
  json tags = json::array();
  for (int t : ex.trace.token_modality) tags.push_back(t == kFuseToken ? "fuse" : modality_name(static_cast<Modality>(t)));
  write_json(p.out, {{"attribution", attribution_json(ex.attribution)},
                     {"trace", {{"token_modality", tags}, {"weights", layers}}}});
  m.artifact(p.out);
  m.summary({{"attribution", attribution_json(ex.attribution)}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal fusion models on synthetic patient cohorts"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  Paths p;
  app.add_option("--seed", g.seed, "Seed for initialisation, training and sampling");
  app.add_option("--threads", g.threads, "Parallel independent runs (ablate, baselines)")->check(CLI::PositiveNumber);
  app.add_option("--manifest", g.manifest_dir, "Directory for the NDJSON run manifest");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort and its ground truth");
  synth->add_option("--config", p.config)->required();
  synth->add_option("--out", p.out, "Output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "Self-supervised pretraining");
  pre->add_option("--config", p.config)->required();
  pre->add_option("--data", p.data, "Cohort directory")->required();
  pre->add_option("--out", p.out, "Checkpoint path")->required();

  auto* fine = app.add_subcommand("finetune", "Supervised fine-tuning");
  fine->add_option("--config", p.config)->required();
  fine->add_option("--data", p.data, "Cohort directory")->required();
  fine->add_option("--init", p.init, "Checkpoint to start from");
  fine->add_option("--out", p.out, "Checkpoint path")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval->add_option("--ckpt", p.ckpt)->required();
  eval->add_option("--data", p.data)->required();
  eval->add_option("--report", p.report)->required();

  auto* ablate = app.add_subcommand("ablate", "Evaluate all 15 modality subsets");
  ablate->add_option("--ckpt", p.ckpt)->required();
  ablate->add_option("--data", p.data)->required();
  ablate->add_option("--report", p.report)->required();

  auto* base = app.add_subcommand("baselines", "Train and compare unimodal, concat and fusion models");
  base->add_option("--config", p.config)->required();
  base->add_option("--data", p.data)->required();
  base->add_option("--report", p.report)->required();

  auto* pred = app.add_subcommand("predict", "Probabilities, uncertainty and attribution for one record");
  pred->add_option("--ckpt", p.ckpt)->required();
  pred->add_option("--record", p.record)->required();
  pred->add_option("--out", p.out)->required();
  pred->add_option("--samples", p.samples, "MC-dropout samples")->check(CLI::PositiveNumber);

  auto* expl = app.add_subcommand("explain", "Modality attribution and the full attention trace");
  expl->add_option("--ckpt", p.ckpt)->required();
  expl->add_option("--record", p.record)->required();
  expl->add_option("--out", p.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "config: usage: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*synth) return cmd_synth(g, p);
    if (*pre) return cmd_pretrain(g, p);
    if (*fine) return cmd_finetune(g, p);
    if (*eval) return cmd_eval(g, p);
    if (*ablate) return cmd_ablate(g, p);
    if (*base) return cmd_baselines(g, p);
    if (*pred) return cmd_predict(g, p);
    if (*expl) return cmd_explain(g, p);
  } catch (const mmf::Error& e) {
    std::cerr << mmf::category_name(e.category()) << ": " << e.what() << '\n';
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data: json: " << e.what() << '\n';
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io: filesystem: " << e.what() << '\n';
    return 5;
  }
  return 0;
}
