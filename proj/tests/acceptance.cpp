// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only when
// every selected criterion passes. Criterion numbers given as arguments select
// a subset.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include "gradient_cases.hpp"
#include "metric_oracles.hpp"
#include "support.hpp"

namespace mmf {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Clock {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

std::size_t worker_count() { return std::max(1u, std::thread::hardware_concurrency()); }

std::vector<double> class_scores(const std::vector<Tensor>& rows, std::size_t c) {
  std::vector<double> out;
  for (const Tensor& t : rows) out.push_back(t[c]);
  return out;
}

std::vector<double> class_labels(std::span<const PatientRecord> records, std::size_t c) {
  std::vector<double> out;
  for (const PatientRecord& r : records) out.push_back((*r.label)[c]);
  return out;
}

// 1. Every op and the composite objective against central differences.
Outcome gradient_oracle() {
  constexpr double kTol = 1e-5;
  const Clock clock;
  double worst = 0.0;
  std::string where;
  const auto cases = testing::op_cases();
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const testing::GradCheck r = testing::check_op(cases[i], 100 + i);
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      where = cases[i].name;
    }
  }
  double composite = 0.0;
  for (HeadKind head : {HeadKind::kMultiLabel, HeadKind::kSoftmax})
    composite = std::max(composite, testing::composite_check(head).max_rel_error);
  const double secs = clock.seconds();
  return {worst < kTol && composite < kTol && secs < 120.0,
          std::to_string(cases.size()) + " ops max rel err " + sci(worst) + " (" + where + "), composite " +
              sci(composite) + ", " + fmt(secs, 1) + " s"};
}

struct Fused {
  Tensor fused;
  FusionTrace trace;
};

Fused fuse_record(const Model& model, const PatientRecord& r, FusionPath path) {
  Tape t;
  Rng rng(0);
  Graph g(t, model, rng, false);
  ForwardResult f = forward(g, r, nullptr, path);
  return {f.fusion->fused.value(), f.fusion->trace};
}

// 2. Attention rows are distributions; masked keys get exactly zero.
Outcome attention_invariants() {
  ModelConfig config;
  Rng data(2);
  Model model = init_model(config, 0);
  double worst_row = 0.0;
  std::size_t masked_nonzero = 0, masked_seen = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    if (trial % 100 == 0) model = init_model(config, 1000 + trial);
    PatientRecord r = testing::random_record(config.dims, data);
    r.mask = ModalityMask::from_bits(1 + static_cast<unsigned>(data.uniform_int(15)));
    const Fused f = fuse_record(model, r, FusionPath::kKeyMask);
    for (const auto& layer : f.trace.weights) {
      for (const Tensor& w : layer) {
        for (std::size_t row = 0; row < w.rows(); ++row) {
          double s = 0.0;
          for (std::size_t k = 0; k < w.cols(); ++k) {
            const int tag = f.trace.token_modality[k];
            if (tag != kFuseToken && !r.mask.has(static_cast<Modality>(tag))) {
              ++masked_seen;
              masked_nonzero += w.at(row, k) != 0.0;
            }
            s += w.at(row, k);
          }
          worst_row = std::max(worst_row, std::abs(s - 1.0));
        }
      }
    }
  }
  return {worst_row <= 1e-9 && masked_nonzero == 0,
          "max |row sum - 1| " + sci(worst_row) + ", " + std::to_string(masked_nonzero) + " of " +
              std::to_string(masked_seen) + " masked weights nonzero"};
}

// 3. Key-masking path equals physically removing the absent blocks.
Outcome masking_equals_removal() {
  ModelConfig config;
  const Model model = init_model(config, 3);
  Rng data(3);
  double worst = 0.0;
  for (int rec = 0; rec < 50; ++rec) {
    const PatientRecord full = testing::random_record(config.dims, data);
    for (unsigned bits = 1; bits < 16; ++bits) {
      const PatientRecord masked = full.restricted(ModalityMask::from_bits(bits));
      const Tensor a = fuse_record(model, masked, FusionPath::kKeyMask).fused;
      const Tensor b = fuse_record(model, masked.stripped(), FusionPath::kRemove).fused;
      worst = std::max(worst, max_abs_diff(a, b));
    }
  }
  return {worst <= 1e-12, "750 record/subset pairs, max |diff| " + sci(worst)};
}

// 4. Token-block insertion order does not move the fused embedding.
Outcome order_invariance() {
  ModelConfig config;
  const Model model = init_model(config, 4);
  Rng data(4);
  double worst = 0.0;
  std::size_t checked = 0;
  for (int rec = 0; rec < 20; ++rec) {
    PatientRecord r = testing::random_record(config.dims, data);
    r.mask = rec < 10 ? ModalityMask::all() : ModalityMask::from_bits(1 + static_cast<unsigned>(data.uniform_int(15)));
    Tape t;
    Rng rng(0);
    Graph g(t, model, rng, false);
    const std::vector<EncoderOutput> encs = encoders::encode_all(g, r);
    const Tensor base = fusion::fuse(g, encs, r.mask).fused.value();
    std::vector<std::size_t> order(encs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    while (std::next_permutation(order.begin(), order.end())) {
      std::vector<EncoderOutput> permuted;
      for (std::size_t i : order) permuted.push_back(encs[i]);
      worst = std::max(worst, max_abs_diff(base, fusion::fuse(g, permuted, r.mask).fused.value()));
      ++checked;
    }
  }
  return {worst <= 1e-12, std::to_string(checked) + " permutations, max |diff| " + sci(worst)};
}

// 5. Fine-tuning memorises 64 records within 500 steps.
Outcome overfit() {
  const Clock clock;
  CohortConfig cc = testing::small_cohort(64, 5, 0.1);
  const Cohort c = generate_cohort(cc);
  ModelConfig mc;
  mc.dims = cc.dims;
  FinetuneConfig fc;
  fc.max_steps = 500;
  fc.epochs = 1000;
  const TrainedModel tm = train_model(mc, c.records, fc, 3);
  const std::vector<PatientRecord> prepared = preprocess_all(c.records, tm.standardizer);
  const double loss = objectives::supervised_loss(tm.model, prepared, 0, false, false).total;
  std::array<double, 2> acc{};
  for (const PatientRecord& r : c.records) {
    const Tensor p = predict(tm, r);
    for (std::size_t k = 0; k < 2; ++k) acc[k] += ((p[k] >= 0.5) == ((*r.label)[k] == 1.0)) / 64.0;
  }
  const double secs = clock.seconds();
  return {loss < 0.05 && acc[0] >= 0.99 && acc[1] >= 0.99 && secs < 300.0,
          "loss " + sci(loss) + ", accuracy y1 " + fmt(acc[0], 3) + " y2 " + fmt(acc[1], 3) + ", " + fmt(secs, 1) + " s"};
}

// 6. Fusion solves the XOR label that no single modality can.
Outcome cross_modal_separation() {
  RunConfig rc;
  rc.cohort.num_records = 2000;
  rc.cohort.seed = 1;
  rc.cohort.noise = 0.1;
  rc.model.dims = rc.cohort.dims;
  rc.finetune.epochs = 15;
  const Cohort cohort = generate_cohort(rc.cohort);
  const Split split = split_indices(cohort.records.size(), rc.cohort.seed);
  const std::vector<PatientRecord> test = select(cohort.records, split.test);
  const std::vector<double> y1 = class_labels(test, 0);

  bool pass = true;
  std::ostringstream d;
  d << "bayes single-modality y1";
  for (Modality m : kAllModalities) {
    std::vector<Tensor> scores;
    for (const PatientRecord& r : test) scores.push_back(bayes_oracle_score(r.restricted(ModalityMask::only(m)), rc.cohort));
    const double a = metrics::auroc(class_scores(scores, 0), y1);
    pass = pass && a >= 0.48 && a <= 0.52;
    d << " " << modality_name(m) << "=" << fmt(a, 3);
  }
  std::vector<Tensor> full;
  for (const PatientRecord& r : test) full.push_back(bayes_oracle_score(r, rc.cohort));
  d << " (all " << fmt(metrics::auroc(class_scores(full, 0), y1), 3) << ");";

  const std::vector<EvalReport> reps = run_baselines(cohort.records, rc.cohort.seed, rc, 7, worker_count());
  for (const EvalReport& r : reps) {
    const double a1 = r.per_class[0].auroc, a2 = r.per_class[1].auroc;
    d << " " << r.variant << " y1=" << fmt(a1, 3) << " y2=" << fmt(a2, 3);
    if (r.variant == "fusion") {
      pass = pass && a1 >= 0.90;
    } else if (r.variant.rfind("unimodal_", 0) == 0) {
      pass = pass && a1 >= 0.45 && a1 <= 0.60;
    }
    // y2 = f_a AND s > 1 is only fully learnable where f_a is visible.
    if (r.variant == "unimodal_ehr" || r.variant == "unimodal_gen" || r.variant == "concat") pass = pass && a2 > 0.80;
  }
  return {pass, d.str()};
}

// 7. Dropping one modality keeps y1; dropping a factor group erases it.
Outcome missing_modality_robustness() {
  CohortConfig cc = testing::small_cohort(2000, 1, 0.1);
  const Cohort cohort = generate_cohort(cc);
  const Split split = split_indices(cohort.records.size(), cc.seed);
  ModelConfig mc;
  mc.dims = cc.dims;
  FinetuneConfig fc;
  fc.epochs = 20;
  fc.modality_dropout = 0.3;
  const TrainedModel tm = train_model(mc, select(cohort.records, split.train), fc, 7);
  CohortConfig held_out = cc;
  held_out.seed = 2;
  const Cohort fresh = generate_cohort(held_out);
  const std::vector<EvalReport> reps = ablate_modalities(tm, fresh.records, EvalConfig{}, worker_count());
  const std::vector<EvalReport> in_split =
      ablate_modalities(tm, select(cohort.records, split.test), EvalConfig{}, worker_count());

  bool pass = true;
  std::ostringstream d;
  d << "held-out N=2000:";
  for (const EvalReport& r : reps) {
    const double a = r.per_class[0].auroc;
    const unsigned bits = r.subset.to_bits();
    const bool one_dropped = r.subset.count() == 3;
    const bool group_dropped = bits == 0b1010 || bits == 0b0101;  // {img, sens} or {ehr, gen} left
    if (one_dropped) pass = pass && a >= 0.80;
    if (group_dropped) pass = pass && std::abs(a - 0.5) <= 0.05;
    if (one_dropped || group_dropped) d << " " << r.subset.to_string() << "=" << fmt(a, 3);
  }
  d << "; test split:";
  for (const EvalReport& r : in_split) {
    const unsigned bits = r.subset.to_bits();
    if (r.subset.count() == 3 || bits == 0b1010 || bits == 0b0101)
      d << " " << r.subset.to_string() << "=" << fmt(r.per_class[0].auroc, 3);
  }
  return {pass, d.str()};
}

// 8. Pretrained initialisation beats scratch with 128 labels.
Outcome pretraining_transfer() {
  RunConfig rc;
  rc.cohort.num_records = 2000;
  rc.model.dims = rc.cohort.dims;
  rc.pretrain.steps = 300;
  rc.finetune.epochs = 30;
  const Cohort cohort = generate_cohort(rc.cohort);
  const Split split = split_indices(cohort.records.size(), rc.cohort.seed);
  const std::vector<PatientRecord> train = select(cohort.records, split.train);
  TrainedModel pre;
  pre.standardizer = Standardizer::fit(train, rc.model.dims);
  pre.model = init_model(rc.model, 11);
  pretrain(pre.model, preprocess_all(train, pre.standardizer), rc.pretrain, 12);
  const TransferReport t = transfer_experiment(pre, cohort.records, rc.cohort.seed, rc, {1, 2, 3, 4, 5}, worker_count());
  return {t.pretrained_mean >= t.scratch_mean, "pretrained " + fmt(t.pretrained_mean) + " vs scratch " +
                                                   fmt(t.scratch_mean) + ", margin " + fmt(t.margin) +
                                                   (t.margin >= 0.02 ? "" : " (below the expected +0.02)")};
}

// 9. Metrics equal brute-force oracles exactly.
Outcome metric_oracles() {
  Rng rng(9);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(99);
    const bool ties = rng.bernoulli(0.5);
    std::vector<double> s, y;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = rng.uniform();
      s.push_back(ties ? std::round(v * 10.0) / 10.0 : v);
      y.push_back(rng.bernoulli(0.4) ? 1.0 : 0.0);
    }
    y[0] = 1.0;
    y[1] = 0.0;
    mismatches += metrics::auroc(s, y) != testing::auroc_all_pairs(s, y);
    mismatches += metrics::auprc(s, y) != testing::auprc_threshold_sweep(s, y);
    mismatches += metrics::ece(s, y) != testing::ece_direct(s, y, 10);
  }
  return {mismatches == 0, "300 comparisons, " + std::to_string(mismatches) + " mismatches"};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MMF_CLI_PATH) + " " + args + " > /dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// 10. Reloaded checkpoints predict bitwise alike; full CLI runs are repeatable.
Outcome persistence_determinism() {
  const fs::path root = fs::temp_directory_path() / "mmf_acceptance_10";
  fs::remove_all(root);
  fs::create_directories(root);

  RunConfig rc;
  rc.cohort.num_records = 300;
  rc.model.dims = rc.cohort.dims;
  rc.pretrain.steps = 10;
  rc.finetune.epochs = 2;
  const Cohort cohort = generate_cohort(rc.cohort);
  const TrainedModel tm = train_model(rc.model, cohort.records, rc.finetune, 10);
  save_checkpoint((root / "direct.mfck").string(), tm);
  const LoadedCheckpoint back = load_checkpoint((root / "direct.mfck").string());
  std::size_t differing = 0;
  for (const PatientRecord& r : cohort.records) differing += !bitwise_equal(predict(tm, r), predict(back.trained, r));

  std::ofstream((root / "config.json").string()) << config_io::to_json(rc).dump(2);
  const std::string cfg = "--config " + (root / "config.json").string();
  bool ran = true;
  for (const std::string run : {"a", "b"}) {
    const fs::path dir = root / run;
    const std::string data = (dir / "cohort").string(), pre = (dir / "pre.mfck").string(),
                      ft = (dir / "ft.mfck").string(), report = (dir / "eval.json").string();
    ran = ran && run_cli("--seed 10 synth " + cfg + " --out " + data) == 0;
    ran = ran && run_cli("--seed 10 pretrain " + cfg + " --data " + data + " --out " + pre) == 0;
    ran = ran && run_cli("--seed 10 finetune " + cfg + " --data " + data + " --init " + pre + " --out " + ft) == 0;
    ran = ran && run_cli("--seed 10 eval --ckpt " + ft + " --data " + data + " --report " + report) == 0;
  }
  const bool same_report = ran && slurp((root / "a/eval.json").string()) == slurp((root / "b/eval.json").string());
  const bool same_ckpt = ran && slurp((root / "a/ft.mfck").string()) == slurp((root / "b/ft.mfck").string());
  fs::remove_all(root);
  return {differing == 0 && ran && same_report && same_ckpt,
          std::to_string(differing) + " of " + std::to_string(cohort.records.size()) +
              " reloaded predictions differ; CLI runs " + (ran ? "ok" : "failed") + ", reports " +
              (same_report ? "identical" : "differ") + ", checkpoints " + (same_ckpt ? "identical" : "differ")};
}

// 11. MC-dropout spread is zero without dropout and positive with it.
Outcome uncertainty_sanity() {
  CohortConfig cc = testing::small_cohort(400, 3, 0.1);
  const Cohort cohort = generate_cohort(cc);
  const Split split = split_indices(cohort.records.size(), cc.seed);
  ModelConfig mc;
  mc.dims = cc.dims;
  FinetuneConfig fc;
  fc.epochs = 5;
  TrainedModel tm = train_model(mc, select(cohort.records, split.train), fc, 11);
  const std::vector<PatientRecord> test = select(cohort.records, split.test);

  tm.model.config.dropout = 0.0;
  std::size_t nonzero_at_zero = 0;
  for (const PatientRecord& r : test) {
    const Uncertainty u = estimate_uncertainty(tm, r, 8, 1);
    for (double s : u.std.data()) nonzero_at_zero += s != 0.0;
  }

  tm.model.config.dropout = 0.3;
  std::size_t positive = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const Tensor std = estimate_uncertainty(tm, test[i], 256, 100 + i).std;
    positive += std::all_of(std.data().begin(), std.data().end(), [](double s) { return s > 0.0; });
  }
  const double frac = static_cast<double>(positive) / static_cast<double>(test.size());
  return {nonzero_at_zero == 0 && frac >= 0.95, "rate 0: " + std::to_string(nonzero_at_zero) +
                                                    " nonzero std values; rate 0.3, S=256: " + fmt(frac, 3) + " of " +
                                                    std::to_string(test.size()) + " records with positive std"};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace
}  // namespace mmf

int main(int argc, char** argv) {
  using namespace mmf;
  const std::vector<Criterion> all = {
      {1, "gradient oracle", gradient_oracle},
      {2, "attention invariants", attention_invariants},
      {3, "masking equals removal", masking_equals_removal},
      {4, "order invariance", order_invariance},
      {5, "overfit", overfit},
      {6, "cross-modal separation", cross_modal_separation},
      {7, "missing-modality robustness", missing_modality_robustness},
      {8, "pretraining transfer", pretraining_transfer},
      {9, "metric oracles", metric_oracles},
      {10, "persistence and determinism", persistence_determinism},
      {11, "uncertainty sanity", uncertainty_sanity},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const Criterion& c : all) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const Clock clock;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << c.id << " " << c.name << ": " << o.detail << " ["
              << fmt(clock.seconds(), 1) << " s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
