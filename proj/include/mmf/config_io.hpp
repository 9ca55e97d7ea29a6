#pragma once

#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "mmf/config.hpp"
#include "mmf/error.hpp"

namespace mmf::config_io {

using nlohmann::json;

namespace detail {

// Integers built in code are signed; those parsed from text are unsigned.
inline bool non_negative_integer(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

// Reads fields of one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  void get(const std::string& key, std::size_t& out) {
    if (const json* v = take(key)) {
      if (!non_negative_integer(*v)) throw ConfigError(at(key) + ": expected a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void get(const std::string& key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) throw ConfigError(at(key) + ": expected a number");
      out = v->get<double>();
    }
  }
  void get(const std::string& key, std::vector<std::size_t>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) throw ConfigError(at(key) + ": expected an array of integers");
      out.clear();
      for (const json& e : *v) {
        if (!non_negative_integer(e)) throw ConfigError(at(key) + ": expected an array of non-negative integers");
        out.push_back(e.get<std::size_t>());
      }
    }
  }
  void get(const std::string& key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) throw ConfigError(at(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }
  // Nested object, or nullptr when absent.
  const json* object(const std::string& key) { return take(key); }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(at(it.key()) + ": unknown key");
  }

 private:
  const json* take(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline json to_json(const InputDims& d) {
  return {{"ehr_visits", d.ehr_visits}, {"d_ehr", d.d_ehr},         {"img_height", d.img_height},
          {"img_width", d.img_width},   {"img_channels", d.img_channels}, {"gen_loci", d.gen_loci},
          {"d_gen", d.d_gen},           {"sens_steps", d.sens_steps}, {"d_sens", d.d_sens}};
}

inline void read(const json& j, const std::string& path, InputDims& d) {
  detail::Section s(j, path);
  s.get("ehr_visits", d.ehr_visits);
  s.get("d_ehr", d.d_ehr);
  s.get("img_height", d.img_height);
  s.get("img_width", d.img_width);
  s.get("img_channels", d.img_channels);
  s.get("gen_loci", d.gen_loci);
  s.get("d_gen", d.d_gen);
  s.get("sens_steps", d.sens_steps);
  s.get("d_sens", d.d_sens);
  s.finish();
}

inline json to_json(const EncoderConfig& e) {
  return {{"ehr_blocks", e.ehr_blocks},         {"img_blocks", e.img_blocks},
          {"patch_size", e.patch_size},         {"max_visits", e.max_visits},
          {"gen_channels", e.gen_channels},     {"gen_kernel", e.gen_kernel},
          {"gen_max_tokens", e.gen_max_tokens}, {"sens_channels", e.sens_channels},
          {"sens_kernel", e.sens_kernel},       {"sens_dilations", e.sens_dilations},
          {"sens_max_tokens", e.sens_max_tokens}};
}

inline void read(const json& j, const std::string& path, EncoderConfig& e) {
  detail::Section s(j, path);
  s.get("ehr_blocks", e.ehr_blocks);
  s.get("img_blocks", e.img_blocks);
  s.get("patch_size", e.patch_size);
  s.get("max_visits", e.max_visits);
  s.get("gen_channels", e.gen_channels);
  s.get("gen_kernel", e.gen_kernel);
  s.get("gen_max_tokens", e.gen_max_tokens);
  s.get("sens_channels", e.sens_channels);
  s.get("sens_kernel", e.sens_kernel);
  s.get("sens_dilations", e.sens_dilations);
  s.get("sens_max_tokens", e.sens_max_tokens);
  s.finish();
}

inline std::string head_name(HeadKind h) { return h == HeadKind::kMultiLabel ? "multilabel" : "softmax"; }

inline std::string variant_key(ModelVariant v) {
  switch (v) {
    case ModelVariant::kFusion: return "fusion";
    case ModelVariant::kUnimodal: return "unimodal";
    case ModelVariant::kConcat: return "concat";
  }
  return "fusion";
}

inline json to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},
          {"n_heads", c.n_heads},
          {"ff_width", c.ff_width},
          {"dropout", c.dropout},
          {"layer_norm_eps", c.layer_norm_eps},
          {"fusion_layers", c.fusion_layers},
          {"num_classes", c.num_classes},
          {"head", head_name(c.head)},
          {"variant", variant_key(c.variant)},
          {"unimodal", modality_name(c.unimodal)},
          {"decoder_hidden", c.decoder_hidden},
          {"dims", to_json(c.dims)},
          {"encoders", to_json(c.encoders)}};
}

inline void read(const json& j, const std::string& path, ModelConfig& c) {
  detail::Section s(j, path);
  s.get("d_model", c.d_model);
  s.get("n_heads", c.n_heads);
  s.get("ff_width", c.ff_width);
  s.get("dropout", c.dropout);
  s.get("layer_norm_eps", c.layer_norm_eps);
  s.get("fusion_layers", c.fusion_layers);
  s.get("num_classes", c.num_classes);
  std::string head = head_name(c.head), variant = variant_key(c.variant), uni = modality_name(c.unimodal);
  s.get("head", head);
  s.get("variant", variant);
  s.get("unimodal", uni);
  if (head == "multilabel") c.head = HeadKind::kMultiLabel;
  else if (head == "softmax") c.head = HeadKind::kSoftmax;
  else throw ConfigError(s.at("head") + ": expected \"multilabel\" or \"softmax\"");
  if (variant == "fusion") c.variant = ModelVariant::kFusion;
  else if (variant == "unimodal") c.variant = ModelVariant::kUnimodal;
  else if (variant == "concat") c.variant = ModelVariant::kConcat;
  else throw ConfigError(s.at("variant") + ": expected \"fusion\", \"unimodal\" or \"concat\"");
  try {
    c.unimodal = modality_from_name(uni);
  } catch (const Error&) {
    throw ConfigError(s.at("unimodal") + ": unknown modality '" + uni + "'");
  }
  s.get("decoder_hidden", c.decoder_hidden);
  if (const json* d = s.object("dims")) read(*d, s.at("dims"), c.dims);
  if (const json* e = s.object("encoders")) read(*e, s.at("encoders"), c.encoders);
  s.finish();
}

inline json to_json(const PretrainConfig& c) {
  return {{"mask_ratio", c.mask_ratio}, {"alpha", c.alpha}, {"temperature", c.temperature},
          {"batch_size", c.batch_size}, {"steps", c.steps}, {"learning_rate", c.learning_rate}};
}

inline void read(const json& j, const std::string& path, PretrainConfig& c) {
  detail::Section s(j, path);
  s.get("mask_ratio", c.mask_ratio);
  s.get("alpha", c.alpha);
  s.get("temperature", c.temperature);
  s.get("batch_size", c.batch_size);
  s.get("steps", c.steps);
  s.get("learning_rate", c.learning_rate);
  s.finish();
}

inline json to_json(const FinetuneConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"modality_dropout", c.modality_dropout},
          {"max_steps", c.max_steps}};
}

inline void read(const json& j, const std::string& path, FinetuneConfig& c) {
  detail::Section s(j, path);
  s.get("epochs", c.epochs);
  s.get("batch_size", c.batch_size);
  s.get("learning_rate", c.learning_rate);
  s.get("modality_dropout", c.modality_dropout);
  s.get("max_steps", c.max_steps);
  s.finish();
}

inline json to_json(const CohortConfig& c) {
  json rates;
  for (Modality m : kAllModalities) rates[modality_name(m)] = c.missing_rates[index_of(m)];
  return {{"num_records", c.num_records}, {"seed", c.seed},         {"noise", c.noise},
          {"missing_rates", rates},       {"dims", to_json(c.dims)}, {"num_classes", c.num_classes}};
}

inline void read(const json& j, const std::string& path, CohortConfig& c) {
  detail::Section s(j, path);
  s.get("num_records", c.num_records);
  std::size_t seed = c.seed;
  s.get("seed", seed);
  c.seed = seed;
  s.get("noise", c.noise);
  if (const json* r = s.object("missing_rates")) {
    detail::Section rs(*r, s.at("missing_rates"));
    for (Modality m : kAllModalities) rs.get(modality_name(m), c.missing_rates[index_of(m)]);
    rs.finish();
  }
  if (const json* d = s.object("dims")) read(*d, s.at("dims"), c.dims);
  s.get("num_classes", c.num_classes);
  s.finish();
}

inline json to_json(const EvalConfig& c) {
  return {{"calibration_bins", c.calibration_bins},
          {"threshold", c.threshold},
          {"uncertainty_samples", c.uncertainty_samples},
          {"transfer_labeled", c.transfer_labeled},
          {"transfer_seeds", c.transfer_seeds}};
}

inline void read(const json& j, const std::string& path, EvalConfig& c) {
  detail::Section s(j, path);
  s.get("calibration_bins", c.calibration_bins);
  s.get("threshold", c.threshold);
  s.get("uncertainty_samples", c.uncertainty_samples);
  s.get("transfer_labeled", c.transfer_labeled);
  s.get("transfer_seeds", c.transfer_seeds);
  s.finish();
}

inline json to_json(const RunConfig& c) {
  return {{"model", to_json(c.model)},
          {"pretrain", to_json(c.pretrain)},
          {"finetune", to_json(c.finetune)},
          {"cohort", to_json(c.cohort)},
          {"eval", to_json(c.eval)}};
}

// Fills a RunConfig from defaults plus the document. When the model section
// gives no dims, it takes the cohort's. Validates the result.
inline RunConfig parse_config(const json& j) {
  RunConfig c;
  detail::Section s(j, "");
  const json* model = s.object("model");
  if (const json* p = s.object("pretrain")) read(*p, "pretrain", c.pretrain);
  if (const json* f = s.object("finetune")) read(*f, "finetune", c.finetune);
  if (const json* co = s.object("cohort")) read(*co, "cohort", c.cohort);
  if (const json* e = s.object("eval")) read(*e, "eval", c.eval);
  c.model.dims = c.cohort.dims;
  c.model.num_classes = c.cohort.num_classes;
  if (model) read(*model, "model", c.model);
  s.finish();
  c.validate();
  return c;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline RunConfig load_config(const std::string& path) { return parse_config(read_json_file(path)); }

}  // namespace mmf::config_io
