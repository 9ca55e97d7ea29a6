#pragma once

#include <array>
#include <optional>
#include <string>

#include "mmf/config.hpp"
#include "mmf/error.hpp"
#include "mmf/tensor.hpp"

namespace mmf {

// Availability bits, one per modality (the mask M).
class ModalityMask {
 public:
  ModalityMask() = default;
  ModalityMask(bool ehr, bool img, bool gen, bool sens) : bits_{ehr, img, gen, sens} {}

  static ModalityMask all() { return {true, true, true, true}; }
  static ModalityMask only(Modality m) {
    ModalityMask mask;
    mask.set(m, true);
    return mask;
  }
  // Bit i of `code` is modality i (ehr = bit 0).
  static ModalityMask from_bits(unsigned code) {
    return {(code & 1u) != 0, (code & 2u) != 0, (code & 4u) != 0, (code & 8u) != 0};
  }

  bool has(Modality m) const { return bits_[index_of(m)]; }
  void set(Modality m, bool on) { bits_[index_of(m)] = on; }
  std::size_t count() const {
    std::size_t n = 0;
    for (bool b : bits_) n += b;
    return n;
  }
  bool any() const { return count() > 0; }
  unsigned to_bits() const {
    unsigned c = 0;
    for (std::size_t i = 0; i < kNumModalities; ++i) c |= bits_[i] ? (1u << i) : 0u;
    return c;
  }

  ModalityMask operator&(const ModalityMask& o) const { return from_bits(to_bits() & o.to_bits()); }
  bool operator==(const ModalityMask&) const = default;

  std::string to_string() const {
    std::string s;
    for (Modality m : kAllModalities) {
      if (!has(m)) continue;
      if (!s.empty()) s += '+';
      s += modality_name(m);
    }
    return s.empty() ? "none" : s;
  }

 private:
  std::array<bool, kNumModalities> bits_{};
};

// One patient: up to four modality tensors, the availability mask and an
// optional K-dimensional binary label.
struct PatientRecord {
  std::array<std::optional<Tensor>, kNumModalities> inputs;
  ModalityMask mask;
  std::optional<Tensor> label;

  const Tensor& input(Modality m) const {
    const auto& t = inputs[index_of(m)];
    if (!t) throw DataError(std::string("record has no ") + modality_name(m) + " tensor");
    return *t;
  }
  bool present(Modality m) const { return mask.has(m); }

  // Same record with mask bits cleared for modalities outside `keep`.
  PatientRecord restricted(const ModalityMask& keep) const {
    PatientRecord r = *this;
    r.mask = mask & keep;
    return r;
  }

  // Same record with masked-out tensors physically removed.
  PatientRecord stripped() const {
    PatientRecord r = *this;
    for (Modality m : kAllModalities)
      if (!mask.has(m)) r.inputs[index_of(m)].reset();
    return r;
  }
};

inline Shape expected_shape(Modality m, const InputDims& d) {
  switch (m) {
    case Modality::kEhr: return {d.ehr_visits, d.d_ehr};
    case Modality::kImg: return {d.img_height, d.img_width, d.img_channels};
    case Modality::kGen: return {d.gen_loci, d.d_gen};
    case Modality::kSens: return {d.sens_steps, d.d_sens};
  }
  return {};
}

// Checks the record invariants. Feature widths must match `dims`; sequence
// lengths may vary for ehr/gen/sens.
inline void validate_record(const PatientRecord& r, const InputDims& dims, std::size_t num_classes) {
  if (!r.mask.any()) throw EmptyRecordError("record has no modality present");
  for (Modality m : kAllModalities) {
    if (!r.mask.has(m)) continue;
    const auto& t = r.inputs[index_of(m)];
    if (!t) throw DataError(std::string("mask marks ") + modality_name(m) + " present but tensor is missing");
    const Shape want = expected_shape(m, dims);
    const Shape& got = t->shape();
    const bool ok = m == Modality::kImg ? got == want
                                        : got.size() == 2 && got[1] == want[1];
    if (!ok) {
      throw DimensionError(std::string(modality_name(m)) + " tensor " + shape_str(got) +
                           " does not match expected " + shape_str(want));
    }
  }
  if (r.label) {
    if (r.label->size() != num_classes) {
      throw DataError("label has length " + std::to_string(r.label->size()) + ", expected " +
                      std::to_string(num_classes));
    }
    for (double v : r.label->data())
      if (v != 0.0 && v != 1.0) throw DataError("label entries must be 0 or 1");
  }
}

}  // namespace mmf
