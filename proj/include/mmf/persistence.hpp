#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "mmf/config_io.hpp"
#include "mmf/container.hpp"
#include "mmf/pipeline.hpp"
#include "mmf/synthcohort.hpp"

namespace mmf {

namespace persistence_detail {

inline std::map<std::string, const Tensor*> index_entries(const Container& c, const std::string& path) {
  std::map<std::string, const Tensor*> by_name;
  for (const NamedTensor& e : c.entries)
    if (!by_name.emplace(e.name, &e.value).second) throw DataError("'" + path + "' repeats entry '" + e.name + "'");
  return by_name;
}

inline const Tensor& need(const std::map<std::string, const Tensor*>& by_name, const std::string& name,
                          const std::string& path) {
  auto it = by_name.find(name);
  if (it == by_name.end()) throw DataError("'" + path + "' has no entry '" + name + "'");
  return *it->second;
}

inline nlohmann::json parse_blob(const std::string& blob, const std::string& path) {
  try {
    return nlohmann::json::parse(blob);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("'" + path + "' carries an unreadable JSON blob: " + e.what());
  }
}

inline Tensor mask_tensor(const ModalityMask& m) {
  Tensor t({kNumModalities});
  for (Modality k : kAllModalities) t[index_of(k)] = m.has(k) ? 1.0 : 0.0;
  return t;
}

inline ModalityMask mask_from(const Tensor& t, const std::string& path) {
  if (t.size() != kNumModalities) throw DataError("'" + path + "' mask entry must have 4 values");
  ModalityMask m;
  for (Modality k : kAllModalities) m.set(k, t[index_of(k)] != 0.0);
  return m;
}

// Entries "<prefix>mask", "<prefix><modality>" and "<prefix>label".
inline void append_record(Container& c, const PatientRecord& r, const std::string& prefix) {
  c.entries.push_back({prefix + "mask", mask_tensor(r.mask)});
  for (Modality m : kAllModalities)
    if (r.inputs[index_of(m)]) c.entries.push_back({prefix + modality_name(m), *r.inputs[index_of(m)]});
  if (r.label) c.entries.push_back({prefix + "label", *r.label});
}

inline PatientRecord extract_record(const std::map<std::string, const Tensor*>& by_name, const std::string& prefix,
                                    const std::string& path) {
  PatientRecord r;
  r.mask = mask_from(need(by_name, prefix + "mask", path), path);
  for (Modality m : kAllModalities) {
    auto it = by_name.find(prefix + modality_name(m));
    if (it != by_name.end()) r.inputs[index_of(m)] = *it->second;
  }
  if (auto it = by_name.find(prefix + "label"); it != by_name.end()) r.label = *it->second;
  return r;
}

}  // namespace persistence_detail

// Parameters as "param/<name>", standardizer statistics as
// "std/<modality>/offset|scale", configuration in the JSON blob.
inline void save_checkpoint(const std::string& path, const TrainedModel& tm, const nlohmann::json& extra = {}) {
  Container c;
  for (std::size_t i = 0; i < tm.model.params.size(); ++i)
    c.entries.push_back({"param/" + tm.model.params.name(i), tm.model.params.value(i)});
  for (Modality m : kAllModalities) {
    c.entries.push_back({std::string("std/") + modality_name(m) + "/offset", tm.standardizer.offset[index_of(m)]});
    c.entries.push_back({std::string("std/") + modality_name(m) + "/scale", tm.standardizer.scale[index_of(m)]});
  }
  nlohmann::json meta = {{"format_version", kContainerVersion}, {"model", config_io::to_json(tm.model.config)}};
  if (!extra.is_null()) meta["run"] = extra;
  c.json = meta.dump();
  write_container(path, c);
}

struct LoadedCheckpoint {
  TrainedModel trained;
  nlohmann::json meta;
};

// Rebuilds the parameter store from the stored configuration and fills every
// tensor; a missing, extra or reshaped parameter is a data error.
inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  using namespace persistence_detail;
  const Container c = read_container(path);
  LoadedCheckpoint out;
  out.meta = parse_blob(c.json, path);
  if (!out.meta.contains("model")) throw DataError("'" + path + "' has no model configuration");
  ModelConfig mc;
  config_io::read(out.meta.at("model"), "model", mc);
  mc.validate();
  const auto by_name = index_entries(c, path);
  out.trained.model = init_model(mc, 0);
  ParamStore& store = out.trained.model.params;
  std::size_t params_seen = 0;
  for (const NamedTensor& e : c.entries)
    if (e.name.rfind("param/", 0) == 0) ++params_seen;
  if (params_seen != store.size()) {
    throw DataError("'" + path + "' holds " + std::to_string(params_seen) + " parameters, the model has " +
                    std::to_string(store.size()));
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Tensor& t = need(by_name, "param/" + store.name(i), path);
    if (!t.same_shape(store.value(i))) {
      throw DataError("'" + path + "' parameter '" + store.name(i) + "' has shape " + shape_str(t.shape()) +
                      ", expected " + shape_str(store.value(i).shape()));
    }
    store.value(i) = t;
  }
  for (Modality m : kAllModalities) {
    const std::string pre = std::string("std/") + modality_name(m) + "/";
    out.trained.standardizer.offset[index_of(m)] = need(by_name, pre + "offset", path);
    out.trained.standardizer.scale[index_of(m)] = need(by_name, pre + "scale", path);
  }
  return out;
}

inline void write_record(const std::string& path, const PatientRecord& r) {
  Container c;
  persistence_detail::append_record(c, r, "");
  c.json = nlohmann::json{{"kind", "record"}}.dump();
  write_container(path, c);
}

inline PatientRecord read_record(const std::string& path) {
  const Container c = read_container(path);
  return persistence_detail::extract_record(persistence_detail::index_entries(c, path), "", path);
}

inline nlohmann::json ground_truth_json(const Cohort& cohort) {
  nlohmann::json rows = nlohmann::json::array();
  for (const GroundTruth& g : cohort.truth)
    rows.push_back({{"f_a", g.f_a ? 1 : 0}, {"f_b", g.f_b ? 1 : 0}, {"severity", g.severity},
                    {"y1", g.y1() ? 1 : 0}, {"y2", g.y2() ? 1 : 0}});
  return rows;
}

// DIR/cohort.mfck (records as "<index>/<field>") and DIR/ground_truth.json.
inline void write_cohort(const std::string& dir, const Cohort& cohort) {
  std::filesystem::create_directories(dir);
  Container c;
  for (std::size_t i = 0; i < cohort.records.size(); ++i)
    persistence_detail::append_record(c, cohort.records[i], std::to_string(i) + "/");
  c.json = nlohmann::json{{"kind", "cohort"}, {"records", cohort.records.size()},
                          {"cohort", config_io::to_json(cohort.config)}}
               .dump();
  write_container((std::filesystem::path(dir) / "cohort.mfck").string(), c);
  write_file_atomic((std::filesystem::path(dir) / "ground_truth.json").string(), ground_truth_json(cohort).dump(1) + "\n");
}

inline Cohort read_cohort(const std::string& dir) {
  const std::string path = (std::filesystem::path(dir) / "cohort.mfck").string();
  const Container c = read_container(path);
  const nlohmann::json meta = persistence_detail::parse_blob(c.json, path);
  if (meta.value("kind", "") != "cohort") throw DataError("'" + path + "' is not a cohort file");
  Cohort cohort;
  config_io::read(meta.at("cohort"), "cohort", cohort.config);
  const auto by_name = persistence_detail::index_entries(c, path);
  const std::size_t n = meta.at("records").get<std::size_t>();
  for (std::size_t i = 0; i < n; ++i)
    cohort.records.push_back(persistence_detail::extract_record(by_name, std::to_string(i) + "/", path));
  const std::string gt_path = (std::filesystem::path(dir) / "ground_truth.json").string();
  if (std::filesystem::exists(gt_path)) {
    for (const auto& row : persistence_detail::parse_blob(read_file(gt_path), gt_path)) {
      GroundTruth g;
      g.f_a = row.at("f_a").get<int>() != 0;
      g.f_b = row.at("f_b").get<int>() != 0;
      g.severity = row.at("severity").get<double>();
      cohort.truth.push_back(g);
    }
  }
  return cohort;
}

}  // namespace mmf
