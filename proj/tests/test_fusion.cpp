#include "docfuse/fusion.hpp"

#include <gtest/gtest.h>

#include "docfuse/grad_check.hpp"

using namespace docfuse;

namespace {

FusionParams<double> unit_params_1d(double eps) {
  FusionParams<double> p;
  p.V = make_tensor<double>({1, 1}, std::vector<double>{1.0});
  p.R = make_tensor<double>({1, 1}, std::vector<double>{1.0});
  p.O = make_tensor<double>({1, 1}, std::vector<double>{1.0});
  p.w = make_tensor<double>({1}, std::vector<double>{1.0});
  p.dropout_rate = 0.0;
  p.eps = eps;
  return p;
}

TEST(Fusion, HandTraceBothOnes) {
  // t=i=1: t'=i'=1 under vanishing eps; V(1+1)=2; 2+2*1=4; O*4=4; +t = 5.
  auto p = unit_params_1d(1e-18);
  Tape<double> tape;
  auto t = make_tensor<double>({1, 1, 1}, std::vector<double>{1.0});
  auto i = make_tensor<double>({1, 1, 1}, std::vector<double>{1.0});
  auto y = fuse(tape, t, i, p, false, nullptr);
  EXPECT_NEAR(y->data[0], 5.0, 1e-9);
}

TEST(Fusion, HandTraceImageZero) {
  // i=0 stays 0 through the norm; V*1=1; 1+1*1=2; +t = 3.
  auto p = unit_params_1d(1e-18);
  Tape<double> tape;
  auto t = make_tensor<double>({1, 1, 1}, std::vector<double>{1.0});
  auto i = make_tensor<double>({1, 1, 1}, std::vector<double>{0.0});
  auto y = fuse(tape, t, i, p, false, nullptr);
  EXPECT_NEAR(y->data[0], 3.0, 1e-9);
}

TEST(Fusion, ZeroOIsIdentity) {
  Rng rng(3);
  auto p = FusionParams<double>::init(6, rng, 0.0);
  std::fill(p.O->data.begin(), p.O->data.end(), 0.0);
  auto t = randn_tensor<double>({2, 5, 6}, rng);
  auto i = randn_tensor<double>({2, 5, 6}, rng);
  Tape<double> tape;
  auto y = fuse(tape, t, i, p, false, nullptr);
  ASSERT_EQ(y->shape, t->shape);
  for (int64_t k = 0; k < y->size(); ++k) EXPECT_EQ(y->data[k], t->data[k]);
}

TEST(Fusion, OutputShapeMatchesInput) {
  Rng rng(4);
  auto p = FusionParams<double>::init(4, rng, 0.0);
  Tape<double> tape;
  auto t0 = make_tensor<double>({2, 0, 4});
  auto i0 = make_tensor<double>({2, 0, 4});
  auto y0 = fuse(tape, t0, i0, p, false, nullptr);
  EXPECT_EQ(y0->shape, (Shape{2, 0, 4}));
  auto t = randn_tensor<double>({3, 7, 4}, rng);
  auto i = randn_tensor<double>({3, 7, 4}, rng);
  auto y = fuse(tape, t, i, p, false, nullptr);
  EXPECT_EQ(y->shape, t->shape);
}

TEST(Fusion, ShapeMismatchThrows) {
  Rng rng(5);
  auto p = FusionParams<double>::init(4, rng, 0.0);
  Tape<double> tape;
  auto t = make_tensor<double>({1, 3, 4});
  auto i = make_tensor<double>({1, 2, 4});
  EXPECT_THROW(fuse(tape, t, i, p, false, nullptr), DimensionError);
  auto i8 = make_tensor<double>({1, 3, 8});
  EXPECT_THROW(fuse(tape, t, i8, p, false, nullptr), DimensionError);
}

TEST(Fusion, DeterministicWithoutDropout) {
  Rng rng(6);
  auto p = FusionParams<double>::init(5, rng, 0.0);
  auto t = randn_tensor<double>({1, 4, 5}, rng);
  auto i = randn_tensor<double>({1, 4, 5}, rng);
  Tape<double> ta, tb;
  auto ya = fuse(ta, t, i, p, false, nullptr);
  auto yb = fuse(tb, t, i, p, false, nullptr);
  EXPECT_EQ(ya->data, yb->data);
}

TEST(Fusion, BitReproducibleWithSeededDropout) {
  Rng init_rng(7);
  auto p = FusionParams<double>::init(5, init_rng, 0.3);
  auto t = randn_tensor<double>({2, 4, 5}, init_rng);
  auto i = randn_tensor<double>({2, 4, 5}, init_rng);
  Tape<double> ta, tb;
  Rng ra(99), rb(99);
  auto ya = fuse(ta, t, i, p, true, &ra);
  auto yb = fuse(tb, t, i, p, true, &rb);
  EXPECT_EQ(ya->data, yb->data);
  Tape<double> tc;
  Rng rc(100);
  auto yc = fuse(tc, t, i, p, true, &rc);
  EXPECT_NE(ya->data, yc->data);
}

TEST(Fusion, GradMatchesFiniteDifferences) {
  Rng rng(8);
  auto p = FusionParams<double>::init(4, rng, 0.0);
  auto t = randn_tensor<double>({1, 3, 4}, rng);
  auto i = randn_tensor<double>({1, 3, 4}, rng);
  auto fn = [&](Tape<double>& tape) {
    auto y = fuse(tape, t, i, p, false, nullptr);
    return mean_all(tape, mul(tape, y, y));
  };
  auto res = grad_check<double>(fn, {p.V, p.R, p.O, p.w}, 1e-5);
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

TEST(Fusion, GradFlowsToInputs) {
  Rng rng(9);
  auto p = FusionParams<double>::init(3, rng, 0.0);
  auto t = randn_tensor<double>({1, 2, 3}, rng, 1.0, true);
  auto i = randn_tensor<double>({1, 2, 3}, rng, 1.0, true);
  auto fn = [&](Tape<double>& tape) {
    auto y = fuse(tape, t, i, p, false, nullptr);
    return mean_all(tape, mul(tape, y, y));
  };
  auto res = grad_check<double>(fn, {t, i}, 1e-5);
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

TEST(Fusion, ValidatesParams) {
  Rng rng(10);
  auto p = FusionParams<double>::init(4, rng, 0.0);
  p.R = make_tensor<double>({4, 3});
  Tape<double> tape;
  auto t = make_tensor<double>({1, 2, 4});
  EXPECT_THROW(fuse(tape, t, t, p, false, nullptr), DimensionError);
  auto q = FusionParams<double>::init(4, rng, 0.0);
  q.dropout_rate = 1.0;
  EXPECT_THROW(fuse(tape, t, t, q, false, nullptr), ConfigError);
}

}  // namespace
