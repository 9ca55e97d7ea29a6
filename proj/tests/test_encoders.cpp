#include <gtest/gtest.h>

#include "support.hpp"

namespace mmf {
namespace {

using testing::random_tensor;

struct Encoded {
  Tensor raw;
  Tensor shared;
  Tensor summary;
};

Encoded run(const Model& model, Modality m, const Tensor& x, bool training = false, std::uint64_t seed = 0) {
  Tape t;
  Rng rng(seed);
  Graph g(t, model, rng, training);
  EncoderOutput e = encoders::encode(g, m, x);
  return {e.raw_tokens.value(), e.shared_tokens.value(), e.summary.value()};
}

class EncoderTest : public ::testing::Test {
 protected:
  ModelConfig config;
  Model model = init_model(config, 3);
  Rng data{4};

  Tensor input(Modality m) { return random_tensor(expected_shape(m, config.dims), data, -1.0, 1.0); }
};

TEST_F(EncoderTest, TokenCountsForDefaultDims) {
  EXPECT_EQ(run(model, Modality::kEhr, random_tensor({1, 12}, data)).raw.dim(0), 1u);
  EXPECT_EQ(run(model, Modality::kImg, input(Modality::kImg)).raw.dim(0), 4u);
  EXPECT_EQ(run(model, Modality::kGen, input(Modality::kGen)).raw.dim(0), 16u);
  EXPECT_EQ(run(model, Modality::kSens, input(Modality::kSens)).raw.dim(0), 24u);
}

TEST_F(EncoderTest, ShapeContractsOverRandomLengths) {
  for (int trial = 0; trial < 12; ++trial) {
    const Modality m = kAllModalities[trial % 4];
    Shape shape = expected_shape(m, config.dims);
    switch (m) {
      case Modality::kEhr: shape[0] = 1 + data.uniform_int(config.encoders.max_visits); break;
      case Modality::kImg:
        shape[0] = 8 * (1 + data.uniform_int(3));
        shape[1] = 8 * (1 + data.uniform_int(3));
        break;
      case Modality::kGen: shape[0] = 5 + data.uniform_int(100); break;
      case Modality::kSens: shape[0] = 8 + data.uniform_int(150); break;
    }
    ModelConfig c = config;
    c.dims.gen_loci = m == Modality::kGen ? shape[0] : c.dims.gen_loci;
    c.dims.sens_steps = m == Modality::kSens ? shape[0] : c.dims.sens_steps;
    const Model mdl = init_model(c, 5);
    const Encoded e = run(mdl, m, random_tensor(shape, data));
    const std::size_t n = encoders::token_count(m, shape, c);
    ASSERT_GT(n, 0u);
    EXPECT_EQ(e.raw.dim(0), n) << modality_name(m) << " " << shape_str(shape);
    EXPECT_EQ(e.shared.shape(), (Shape{n, c.d_model}));
    if (m == Modality::kGen) { EXPECT_LE(n, c.encoders.gen_max_tokens); }
    if (m == Modality::kSens) { EXPECT_LE(n, c.encoders.sens_max_tokens); }
    for (std::size_t k = 0; k < c.d_model; ++k) {
      double s = 0.0;
      for (std::size_t r = 0; r < n; ++r) s += e.shared.at(r, k);
      EXPECT_NEAR(e.summary[k], s / static_cast<double>(n), 1e-12);
    }
  }
}

TEST_F(EncoderTest, InputErrors) {
  EXPECT_THROW(run(model, Modality::kEhr, Tensor()), EmptyModalityError);
  try {
    run(model, Modality::kImg, Tensor({15, 16, 1}));
    FAIL();
  } catch (const PatchingError& e) {
    EXPECT_NE(std::string(e.what()).find("p=8"), std::string::npos) << e.what();
  }
  EXPECT_THROW(run(model, Modality::kGen, Tensor({4, 1})), DimensionError);
  EXPECT_THROW(run(model, Modality::kSens, Tensor({7, 3})), DimensionError);
  PatientRecord empty;
  Tape t;
  Rng rng(0);
  Graph g(t, model, rng, false);
  EXPECT_THROW(encoders::encode_all(g, empty), EmptyRecordError);
}

TEST_F(EncoderTest, SwappingVisitsChangesOutput) {
  const Tensor x = random_tensor({4, 12}, data);
  Tensor swapped = x;
  for (std::size_t k = 0; k < 12; ++k) std::swap(swapped[k], swapped[12 + k]);
  const Encoded a = run(model, Modality::kEhr, x);
  const Encoded b = run(model, Modality::kEhr, swapped);
  EXPECT_GT(max_abs_diff(a.summary, b.summary), 0.0);
}

TEST_F(EncoderTest, SameSeedIsBitwiseDeterministic) {
  for (Modality m : kAllModalities) {
    const Tensor x = input(m);
    const Encoded a = run(model, m, x, true, 17);
    const Encoded b = run(model, m, x, true, 17);
    EXPECT_TRUE(bitwise_equal(a.shared, b.shared)) << modality_name(m);
  }
}

TEST_F(EncoderTest, MirroringImageChangesOutput) {
  const Tensor x = input(Modality::kImg);
  Tensor mirrored = x;
  const std::size_t h = config.dims.img_height, w = config.dims.img_width;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) mirrored[r * w + c] = x[r * w + (w - 1 - c)];
  EXPECT_GT(max_abs_diff(run(model, Modality::kImg, x).shared, run(model, Modality::kImg, mirrored).shared), 0.0);
}

// With an all-zero input the first weight matrix multiplies zeros, so the
// output depends only on biases and positional terms.
TEST_F(EncoderTest, ZeroInputIgnoresFirstWeights) {
  const std::pair<Modality, std::string> first[] = {{Modality::kEhr, "enc.ehr.embed.w"},
                                                    {Modality::kImg, "enc.img.embed.w"},
                                                    {Modality::kGen, "enc.gen.conv0.w"},
                                                    {Modality::kSens, "enc.sens.conv0.w"}};
  for (const auto& [m, name] : first) {
    const Tensor zero(expected_shape(m, config.dims), 0.0);
    const Encoded before = run(model, m, zero);
    Model other = model;
    for (double& v : other.params.value(other.params.index(name)).data()) v = data.uniform(-1.0, 1.0);
    const Encoded after = run(other, m, zero);
    EXPECT_TRUE(bitwise_equal(before.shared, after.shared)) << modality_name(m);
  }
}

// Receptive field of each output token on the input rows, propagated through
// "same"-padded convolutions and stride-2 average pooling.
struct Interval {
  long lo, hi;
};

std::vector<Interval> gen_receptive_fields(const ModelConfig& c) {
  const std::size_t stages = encoders::gen_stages(c);
  const std::size_t convs = std::max<std::size_t>(1, stages);
  const long half = static_cast<long>(c.encoders.gen_kernel - 1) / 2;
  std::vector<Interval> field(c.dims.gen_loci);
  for (std::size_t i = 0; i < field.size(); ++i) field[i] = {long(i), long(i)};
  for (std::size_t s = 0; s < convs; ++s) {
    std::vector<Interval> conv(field.size());
    for (long i = 0; i < long(field.size()); ++i) {
      const long a = std::max(0L, i - half), b = std::min(long(field.size()) - 1, i + half);
      conv[i] = {field[a].lo, field[b].hi};
    }
    field = conv;
    if (s < stages) {
      std::vector<Interval> pooled((field.size() + 1) / 2);
      for (std::size_t j = 0; j < pooled.size(); ++j)
        pooled[j] = {field[2 * j].lo, field[std::min(2 * j + 1, field.size() - 1)].hi};
      field = pooled;
    }
  }
  return field;
}

TEST_F(EncoderTest, GenomicTokensAreLocal) {
  const Tensor x = input(Modality::kGen);
  Tensor perturbed = x;
  perturbed[0] += 0.75;
  const Encoded a = run(model, Modality::kGen, x);
  const Encoded b = run(model, Modality::kGen, perturbed);
  const std::vector<Interval> fields = gen_receptive_fields(config);
  ASSERT_EQ(fields.size(), a.shared.dim(0));
  std::size_t untouched = 0;
  for (std::size_t j = 0; j < fields.size(); ++j) {
    const bool sees_locus0 = fields[j].lo <= 0;
    bool same = true;
    for (std::size_t k = 0; k < config.d_model; ++k) same = same && a.shared.at(j, k) == b.shared.at(j, k);
    if (sees_locus0) {
      EXPECT_FALSE(same) << "token " << j;
    } else {
      EXPECT_TRUE(same) << "token " << j;
      ++untouched;
    }
  }
  EXPECT_GT(untouched, 10u);
}

TEST_F(EncoderTest, ConstantSignalGivesEqualInteriorTokens) {
  Tensor x(expected_shape(Modality::kSens, config.dims));
  for (std::size_t r = 0; r < x.dim(0); ++r)
    for (std::size_t k = 0; k < x.dim(1); ++k) x[r * x.dim(1) + k] = 0.3 + 0.2 * static_cast<double>(k);
  const Encoded e = run(model, Modality::kSens, x);
  // Rows within `halo` of either end see zero padding.
  std::size_t halo = 0;
  for (std::size_t d : config.encoders.sens_dilations) halo += d * (config.encoders.sens_kernel - 1) / 2;
  const std::size_t per = encoders::rows_per_token(Modality::kSens, config);
  const std::size_t len = x.dim(0);
  std::vector<std::size_t> interior;
  for (std::size_t j = 0; j < e.shared.dim(0); ++j)
    if (j * per >= halo && (j + 1) * per + halo <= len) interior.push_back(j);
  ASSERT_GE(interior.size(), 10u);
  for (std::size_t j : interior)
    for (std::size_t k = 0; k < config.d_model; ++k) EXPECT_NEAR(e.shared.at(j, k), e.shared.at(interior[0], k), 1e-9);
}

TEST_F(EncoderTest, EncodeAllFollowsMaskInCanonicalOrder) {
  PatientRecord r = testing::random_record(config.dims, data);
  Tape t;
  Rng rng(0);
  Graph g(t, model, rng, false);
  r.mask = ModalityMask::only(Modality::kEhr);
  const auto one = encoders::encode_all(g, r);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].modality, Modality::kEhr);
  r.mask = ModalityMask::all();
  const auto all = encoders::encode_all(g, r);
  ASSERT_EQ(all.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(all[i].modality, kAllModalities[i]);
}

TEST_F(EncoderTest, OutputIndependentOfOtherModalities) {
  const PatientRecord full = testing::random_record(config.dims, data);
  auto encode_subset = [&](const ModalityMask& mask) {
    Tape t;
    Rng rng(0);
    Graph g(t, model, rng, false);
    std::vector<std::pair<Modality, Tensor>> out;
    for (const EncoderOutput& e : encoders::encode_all(g, full.restricted(mask)))
      out.emplace_back(e.modality, e.shared_tokens.value());
    return out;
  };
  const auto all = encode_subset(ModalityMask::all());
  for (unsigned bits = 1; bits < 16; ++bits) {
    for (const auto& [m, tokens] : encode_subset(ModalityMask::from_bits(bits)))
      EXPECT_TRUE(bitwise_equal(tokens, all[index_of(m)].second)) << modality_name(m) << " in " << bits;
  }
}

TEST_F(EncoderTest, ModalityEmbeddingDistinguishesModalities) {
  Tape t;
  Rng rng(0);
  Graph g(t, model, rng, false);
  Var raw = t.constant(random_tensor({3, config.d_model}, data));
  const Tensor a = encoders::to_shared(g, Modality::kEhr, raw).value();
  const Tensor b = encoders::to_shared(g, Modality::kImg, raw).value();
  EXPECT_GT(max_abs_diff(a, b), 0.0);
}

TEST(EncoderConfigTest, HeadCountMustDivideWidth) {
  ModelConfig c;
  c.n_heads = 5;
  EXPECT_THROW(c.validate(), ConfigError);
}

}  // namespace
}  // namespace mmf
