#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mmf/error.hpp"

namespace mmf {

enum class Modality : std::size_t { kEhr = 0, kImg = 1, kGen = 2, kSens = 3 };

inline constexpr std::size_t kNumModalities = 4;
inline constexpr std::array<Modality, kNumModalities> kAllModalities = {
    Modality::kEhr, Modality::kImg, Modality::kGen, Modality::kSens};

inline std::size_t index_of(Modality m) { return static_cast<std::size_t>(m); }

inline const char* modality_name(Modality m) {
  static constexpr const char* kNames[] = {"ehr", "img", "gen", "sens"};
  return kNames[index_of(m)];
}

inline Modality modality_from_name(const std::string& name) {
  for (Modality m : kAllModalities)
    if (name == modality_name(m)) return m;
  throw ConfigError("unknown modality '" + name + "'");
}

// Raw input geometry shared by the cohort generator and the encoders.
struct InputDims {
  std::size_t ehr_visits = 16;  // T
  std::size_t d_ehr = 12;
  std::size_t img_height = 16;
  std::size_t img_width = 16;
  std::size_t img_channels = 1;
  std::size_t gen_loci = 64;  // L_gen
  std::size_t d_gen = 1;
  std::size_t sens_steps = 96;  // T_s
  std::size_t d_sens = 3;

  bool operator==(const InputDims&) const = default;
};

struct EncoderConfig {
  std::size_t ehr_blocks = 2;
  std::size_t img_blocks = 2;
  std::size_t patch_size = 8;
  std::size_t max_visits = 64;
  std::vector<std::size_t> gen_channels = {16, 32};
  std::size_t gen_kernel = 5;
  std::size_t gen_max_tokens = 16;
  std::size_t sens_channels = 16;
  std::size_t sens_kernel = 3;
  std::vector<std::size_t> sens_dilations = {1, 2, 4};
  std::size_t sens_max_tokens = 24;

  bool operator==(const EncoderConfig&) const = default;
};

enum class HeadKind { kMultiLabel, kSoftmax };

// kFusion is the full model; kUnimodal and kConcat are the comparison
// baselines (single encoder + linear head, and concatenated summaries + linear
// head without attention fusion).
enum class ModelVariant { kFusion, kUnimodal, kConcat };

struct ModelConfig {
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t ff_width = 64;
  double dropout = 0.1;
  double layer_norm_eps = 1e-5;
  std::size_t fusion_layers = 2;
  std::size_t num_classes = 2;  // K
  HeadKind head = HeadKind::kMultiLabel;
  ModelVariant variant = ModelVariant::kFusion;
  Modality unimodal = Modality::kEhr;
  std::size_t decoder_hidden = 32;
  InputDims dims;
  EncoderConfig encoders;

  bool operator==(const ModelConfig&) const = default;

  void validate() const {
    if (d_model < 2) throw ConfigError("model.d_model must be at least 2");
    if (n_heads == 0 || d_model % n_heads != 0) {
      throw ConfigError("model.n_heads: d_model (" + std::to_string(d_model) +
                        ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
    }
    if (fusion_layers < 1) throw ConfigError("model.fusion_layers must be at least 1");
    if (num_classes < 1) throw ConfigError("model.num_classes must be at least 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout must lie in [0, 1)");
    if (ff_width < 1 || decoder_hidden < 1) throw ConfigError("model widths must be positive");
    if (encoders.patch_size == 0 || dims.img_height % encoders.patch_size != 0 ||
        dims.img_width % encoders.patch_size != 0) {
      throw ConfigError("model.encoders.patch_size must divide image height and width");
    }
    if (encoders.gen_channels.empty()) throw ConfigError("model.encoders.gen_channels must be non-empty");
    if (encoders.sens_dilations.empty()) throw ConfigError("model.encoders.sens_dilations must be non-empty");
    if (encoders.gen_max_tokens == 0 || encoders.sens_max_tokens == 0) {
      throw ConfigError("model.encoders token budgets must be positive");
    }
    if (dims.ehr_visits > encoders.max_visits) throw ConfigError("model.dims.ehr_visits exceeds max_visits");
    if (dims.gen_loci < encoders.gen_kernel) throw ConfigError("model.dims.gen_loci shorter than gen_kernel");
    if (dims.sens_steps < 8) throw ConfigError("model.dims.sens_steps must be at least 8");
  }
};

struct PretrainConfig {
  double mask_ratio = 0.25;  // rho
  double alpha = 0.5;        // contrastive weight
  double temperature = 0.1;  // tau
  std::size_t batch_size = 32;
  std::size_t steps = 200;
  double learning_rate = 1e-3;

  bool operator==(const PretrainConfig&) const = default;

  void validate() const {
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("pretrain.mask_ratio must lie in (0, 1)");
    if (!(alpha >= 0.0)) throw ConfigError("pretrain.alpha must be non-negative");
    if (!(temperature > 0.0)) throw ConfigError("pretrain.temperature must be positive");
    if (batch_size < 1) throw ConfigError("pretrain.batch_size must be positive");
    if (!(learning_rate >= 0.0)) throw ConfigError("pretrain.learning_rate must be non-negative");
  }
};

struct FinetuneConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double modality_dropout = 0.0;  // p_md
  std::size_t max_steps = 0;      // 0 = no cap

  bool operator==(const FinetuneConfig&) const = default;

  void validate() const {
    if (batch_size < 1) throw ConfigError("finetune.batch_size must be positive");
    if (!(learning_rate >= 0.0)) throw ConfigError("finetune.learning_rate must be non-negative");
    if (!(modality_dropout >= 0.0 && modality_dropout <= 1.0)) {
      throw ConfigError("finetune.modality_dropout must lie in [0, 1]");
    }
  }
};

struct CohortConfig {
  std::size_t num_records = 2000;  // N
  std::uint64_t seed = 1;
  double noise = 0.1;  // sigma
  std::array<double, kNumModalities> missing_rates = {0.0, 0.0, 0.0, 0.0};
  InputDims dims;
  std::size_t num_classes = 2;

  bool operator==(const CohortConfig&) const = default;

  void validate() const {
    if (num_records < 1) throw ConfigError("cohort.num_records must be positive");
    if (!(noise >= 0.0)) throw ConfigError("cohort.noise must be non-negative");
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      if (!(missing_rates[m] >= 0.0 && missing_rates[m] < 1.0)) {
        throw ConfigError(std::string("cohort.missing_rates.") + modality_name(static_cast<Modality>(m)) +
                          " must lie in [0, 1)");
      }
    }
    if (num_classes != 2) throw ConfigError("cohort.num_classes must be 2");
    if (dims.ehr_visits < 2 || dims.d_ehr < 1) throw ConfigError("cohort.dims: ehr needs >= 2 visits and >= 1 feature");
    if (dims.img_width < 4 || dims.img_height < 1 || dims.img_channels < 1) {
      throw ConfigError("cohort.dims: image too small");
    }
    if (dims.gen_loci < 10 || dims.d_gen < 1) throw ConfigError("cohort.dims: gen_loci must be at least 10");
    if (dims.sens_steps < 8 || dims.d_sens < 1) throw ConfigError("cohort.dims: sens_steps must be at least 8");
  }
};

struct EvalConfig {
  std::size_t calibration_bins = 10;
  double threshold = 0.5;
  std::size_t uncertainty_samples = 32;
  std::size_t transfer_labeled = 128;
  std::size_t transfer_seeds = 5;

  bool operator==(const EvalConfig&) const = default;

  void validate() const {
    if (calibration_bins < 1) throw ConfigError("eval.calibration_bins must be positive");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("eval.threshold must lie in (0, 1)");
    if (uncertainty_samples < 1) throw ConfigError("eval.uncertainty_samples must be positive");
    if (transfer_labeled < 2 || transfer_seeds < 1) throw ConfigError("eval.transfer sizes must be positive");
  }
};

// One document with all sections.
struct RunConfig {
  ModelConfig model;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  CohortConfig cohort;
  EvalConfig eval;

  bool operator==(const RunConfig&) const = default;

  void validate() const {
    model.validate();
    pretrain.validate();
    finetune.validate();
    cohort.validate();
    eval.validate();
    if (!(model.dims == cohort.dims)) throw ConfigError("model.dims must match cohort.dims");
    if (model.num_classes != cohort.num_classes) throw ConfigError("model.num_classes must match cohort.num_classes");
  }
};

}  // namespace mmf
