// Finite-difference oracle for every differentiable operation and for the
// full composite training loss.

#include <gtest/gtest.h>

#include "gradient_cases.hpp"

namespace mmf {
namespace {

using testing::composite_check;
using testing::op_cases;
using testing::random_tensor;
using testing::weighted_sum;

constexpr double kOpTol = 1e-6;
constexpr double kModelTol = 1e-5;

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const testing::OpCase c = op_cases()[GetParam()];
  const testing::GradCheck r = testing::check_op(c, 100 + GetParam());
  EXPECT_LT(r.max_rel_error, kOpTol) << c.name << " worst at " << r.worst;
  EXPECT_GT(r.checked, 0u);
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range<std::size_t>(0, op_cases().size()),
                         [](const auto& info) { return op_cases()[info.param].name; });

TEST(Backward, SumGivesOnes) {
  Tape t;
  Var x = t.leaf(Tensor::matrix({{1, 2}, {3, 4}}));
  t.backward(ops::sum(x));
  for (double g : x.grad()->data()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, ZeroTimesAnythingGivesZeroGrads) {
  Tape t;
  Var x = t.leaf(Tensor::vector({0.3, -1.2, 2.0}));
  t.backward(ops::scale(ops::sum(ops::gelu(x)), 0.0));
  for (double g : x.grad()->data()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, RepeatedUseAccumulates) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1.5, -2.0}));
  t.backward(ops::sum(ops::add(ops::add(x, x), x)));
  for (double g : x.grad()->data()) EXPECT_EQ(g, 3.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(t.backward(ops::scale(x, 2.0)), ContractError);
}

TEST(Backward, TapeIsTopologicallyOrdered) {
  Tape t;
  Var a = t.leaf(Tensor::vector({1.0}));
  Var b = ops::scale(a, 2.0);
  Var c = ops::mul(b, a);
  EXPECT_LT(a.id(), b.id());
  EXPECT_LT(b.id(), c.id());
}

TEST(Backward, MultiSeedEqualsSumOfSingleSeeds) {
  Rng rng(5);
  const Tensor x0 = random_tensor({3, 3}, rng);
  auto build = [&](Tape& t, Var& x, Var& p, Var& q) {
    x = t.leaf(x0);
    p = ops::sum(ops::square(x));
    q = ops::sum(ops::gelu(x));
  };
  Tape both;
  Var x, p, q;
  build(both, x, p, q);
  std::vector<std::pair<Var, Tensor>> seeds = {{p, Tensor::scalar(0.25)}, {q, Tensor::scalar(-1.5)}};
  both.backward(seeds);
  Tape single;
  Var x2, p2, q2;
  build(single, x2, p2, q2);
  single.backward(ops::add(ops::scale(p2, 0.25), ops::scale(q2, -1.5)));
  EXPECT_LT(max_abs_diff(*x.grad(), *x2.grad()), 1e-14);
}

TEST(CompositeGradient, MultiLabelHeadMatchesFiniteDifferences) {
  ObjectiveValue v;
  const testing::GradCheck r = composite_check(HeadKind::kMultiLabel, &v);
  EXPECT_GT(v.reconstruction, 0.0);
  EXPECT_GT(v.contrastive, 0.0);
  EXPECT_GT(v.task, 0.0);
  EXPECT_LT(r.max_rel_error, kModelTol) << "worst at " << r.worst;
}

TEST(CompositeGradient, SoftmaxHeadMatchesFiniteDifferences) {
  const testing::GradCheck r = composite_check(HeadKind::kSoftmax);
  EXPECT_LT(r.max_rel_error, kModelTol) << "worst at " << r.worst;
}

TEST(CompositeGradient, BaselineVariantsMatchFiniteDifferences) {
  for (ModelVariant v : {ModelVariant::kUnimodal, ModelVariant::kConcat}) {
    ModelConfig c = testing::micro_config();
    c.variant = v;
    c.unimodal = Modality::kSens;
    Model model = init_model(c, 31);
    Rng rng(32);
    std::vector<PatientRecord> batch = {testing::random_record(c.dims, rng), testing::random_record(c.dims, rng)};
    batch[1].mask.set(Modality::kImg, false);
    const ObjectiveValue val = objectives::supervised_loss(model, batch, 33, true, true);
    const testing::GradCheck r = testing::check_params(
        model, val.grads, [&] { return objectives::supervised_loss(model, batch, 33, true, false).total; });
    EXPECT_LT(r.max_rel_error, kModelTol) << "worst at " << r.worst;
  }
}

TEST(FusionLayerGradient, MatchesFiniteDifferences) {
  ModelConfig c = testing::micro_config();
  c.dropout = 0.0;
  Model model = init_model(c, 41);
  Rng data(42);
  const Tensor tokens = random_tensor({5, c.d_model}, data);
  const std::vector<std::uint8_t> keys = {1, 1, 0, 1, 1};
  auto run = [&](Tape& t) {
    Rng rng(0);
    Graph g(t, model, rng, false);
    return weighted_sum(t, fusion::fusion_layer(g, t.leaf(tokens, false), keys, 0, nullptr), 43);
  };
  Tape tape;
  tape.backward(run(tape));
  const Gradients grads = tape.param_grads(model.params);
  const testing::GradCheck r = testing::check_params(model, grads, [&] {
    Tape t;
    return run(t).value().item();
  });
  EXPECT_LT(r.max_rel_error, kModelTol) << "worst at " << r.worst;
}

}  // namespace
}  // namespace mmf
