#include "docfuse/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace docfuse;

namespace {

using T = Tensor<double>;
using P = TensorPtr<double>;

P tensor2(Shape s, std::vector<double> v, bool rg = false) {
  return make_tensor<double>(std::move(s), std::move(v), rg);
}

TEST(Tensor, ShapeDataInvariant) {
  auto t = make_tensor<double>({2, 3});
  EXPECT_EQ(t->size(), 6);
  EXPECT_THROW(tensor2({2, 3}, {1.0, 2.0}), DimensionError);
}

TEST(Tensor, AddZeros) {
  Tape<double> tape;
  auto a = make_tensor<double>({3});
  auto b = make_tensor<double>({3});
  auto c = add(tape, a, b);
  for (double v : c->data) EXPECT_EQ(v, 0.0);
}

TEST(Tensor, AddBroadcastLeading) {
  Tape<double> tape;
  auto a = tensor2({2, 2}, {1, 2, 3, 4});
  auto b = tensor2({2}, {10, 20});
  auto c = add(tape, a, b);
  EXPECT_EQ(c->data, (std::vector<double>{11, 22, 13, 24}));
  auto d = add(tape, b, a);  // symmetric
  EXPECT_EQ(d->data, c->data);
}

TEST(Tensor, AddShapeMismatchThrows) {
  Tape<double> tape;
  auto a = make_tensor<double>({2, 3});
  auto b = make_tensor<double>({2, 2});
  EXPECT_THROW(add(tape, a, b), DimensionError);
}

TEST(Tensor, MatmulIdentity) {
  Tape<double> tape;
  auto a = tensor2({2, 2}, {1, 2, 3, 4});
  auto eye = tensor2({2, 2}, {1, 0, 0, 1});
  auto c = matmul(tape, a, eye);
  EXPECT_EQ(c->data, a->data);
}

TEST(Tensor, MatmulHandValue) {
  Tape<double> tape;
  auto a = tensor2({1, 2}, {1, 2});
  auto b = tensor2({2, 1}, {3, 4});
  auto c = matmul(tape, a, b);
  ASSERT_EQ(c->shape, (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(c->data[0], 11.0);
}

TEST(Tensor, MatmulBatchedAndSharedRhs) {
  Tape<double> tape;
  auto a = tensor2({2, 1, 2}, {1, 2, 3, 4});
  auto b3 = tensor2({2, 2, 1}, {1, 1, 1, 1});
  auto c = matmul(tape, a, b3);
  EXPECT_EQ(c->data, (std::vector<double>{3, 7}));
  auto b2 = tensor2({2, 1}, {10, 1});
  auto d = matmul(tape, a, b2);
  EXPECT_EQ(d->data, (std::vector<double>{12, 34}));
}

TEST(Tensor, MatmulInnerDimMismatchThrows) {
  Tape<double> tape;
  auto a = make_tensor<double>({2, 3});
  auto b = make_tensor<double>({2, 2});
  try {
    matmul(tape, a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[2,2]"), std::string::npos);
  }
}

TEST(Tensor, SoftmaxSymmetry) {
  Tape<double> tape;
  auto a = tensor2({2}, {1, 1});
  auto s = softmax(tape, a, 0);
  EXPECT_DOUBLE_EQ(s->data[0], 0.5);
  EXPECT_DOUBLE_EQ(s->data[1], 0.5);
  auto b = tensor2({4}, {0, 0, 0, 0});
  auto s4 = softmax(tape, b, 0);
  for (double v : s4->data) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Tensor, SoftmaxQuarterThreeQuarters) {
  Tape<double> tape;
  auto a = tensor2({2}, {0.0, std::log(3.0)});
  auto s = softmax(tape, a, 0);
  EXPECT_NEAR(s->data[0], 0.25, 1e-15);
  EXPECT_NEAR(s->data[1], 0.75, 1e-15);
}

TEST(Tensor, SoftmaxSumsToOne) {
  Rng rng(7);
  Tape<double> tape;
  auto a = randn_tensor<double>({3, 5, 4}, rng, 3.0);
  for (int axis = 0; axis < 3; ++axis) {
    auto s = softmax(tape, a, axis);
    auto total = sum_axis(tape, s, axis);
    for (double v : total->data) EXPECT_NEAR(v, 1.0, 1e-12);
    for (double v : s->data) EXPECT_GE(v, 0.0);
  }
}

TEST(Tensor, SoftmaxEmptyAxisThrows) {
  Tape<double> tape;
  auto a = make_tensor<double>({2, 0});
  EXPECT_THROW(softmax(tape, a, 1), DimensionError);
}

TEST(Tensor, SoftmaxStableAtLargeLogits) {
  Tape<double> tape;
  auto a = tensor2({2}, {1000.0, 1000.0});
  auto s = softmax(tape, a, 0);
  EXPECT_DOUBLE_EQ(s->data[0], 0.5);
}

TEST(Tensor, RmsNormUnit) {
  Tape<double> tape;
  auto x = tensor2({4}, {1, 1, 1, 1});
  auto w = tensor2({4}, {1, 1, 1, 1});
  auto y = rms_norm(tape, x, w, 1e-6);
  for (double v : y->data) EXPECT_NEAR(v, 1.0, 1e-6);
}

TEST(Tensor, RmsNormZeroVector) {
  Tape<double> tape;
  auto x = tensor2({4}, {0, 0, 0, 0});
  auto w = tensor2({4}, {1, 1, 1, 1});
  auto y = rms_norm(tape, x, w, 1e-6);
  for (double v : y->data) EXPECT_EQ(v, 0.0);
}

TEST(Tensor, RmsNormHandValue) {
  // x=[3,4]: mean(x^2)=12.5, rsqrt(12.5)=0.2828427...; eps tiny so the
  // reference values hold to 1e-6.
  Tape<double> tape;
  auto x = tensor2({2}, {3, 4});
  auto w = tensor2({2}, {1, 1});
  auto y = rms_norm(tape, x, w, 1e-18);
  EXPECT_NEAR(y->data[0], 0.848528, 1e-6);
  EXPECT_NEAR(y->data[1], 1.131371, 1e-6);
}

TEST(Tensor, RmsNormScaleCovariantInW) {
  Rng rng(11);
  Tape<double> tape;
  auto x = randn_tensor<double>({3, 8}, rng);
  auto w = randn_tensor<double>({8}, rng);
  auto w2 = make_tensor<double>({8});
  for (int i = 0; i < 8; ++i) w2->data[i] = 2.0 * w->data[i];
  auto y1 = rms_norm(tape, x, w, 1e-6);
  auto y2 = rms_norm(tape, x, w2, 1e-6);
  for (int64_t i = 0; i < y1->size(); ++i) EXPECT_EQ(y2->data[i], 2.0 * y1->data[i]);
}

TEST(Tensor, RmsNormOutputRmsNearOne) {
  Rng rng(3);
  Tape<double> tape;
  auto x = randn_tensor<double>({5, 16}, rng, 2.0);
  auto w = full_like_value<double>({16}, 1.0);
  auto y = rms_norm(tape, x, w, 1e-6);
  for (int r = 0; r < 5; ++r) {
    double ms = 0;
    for (int i = 0; i < 16; ++i) ms += y->data[r * 16 + i] * y->data[r * 16 + i];
    EXPECT_NEAR(std::sqrt(ms / 16.0), 1.0, 1e-4);
  }
}

TEST(Tensor, NonFiniteRaises) {
  Tape<double> tape;
  auto a = tensor2({1}, {1e308});
  auto b = tensor2({1}, {1e308});
  EXPECT_THROW(add(tape, a, b), NumericError);
}

TEST(Tensor, DropoutIdentityWhenOff) {
  Tape<double> tape;
  Rng rng(1);
  auto a = tensor2({4}, {1, 2, 3, 4});
  auto y = dropout(tape, a, 0.5, false, &rng);
  EXPECT_EQ(y.get(), a.get());
  auto z = dropout<double>(tape, a, 0.0, true, &rng);
  EXPECT_EQ(z.get(), a.get());
}

TEST(Tensor, DropoutMasksAndScales) {
  Tape<double> tape;
  Rng rng(5);
  auto a = full_like_value<double>({10000}, 1.0);
  auto y = dropout(tape, a, 0.25, true, &rng);
  int64_t kept = 0;
  for (double v : y->data) {
    if (v != 0.0) {
      EXPECT_NEAR(v, 1.0 / 0.75, 1e-12);
      ++kept;
    }
  }
  EXPECT_NEAR(static_cast<double>(kept) / 10000.0, 0.75, 0.02);
}

TEST(Tensor, SliceConcatRoundTrip) {
  Tape<double> tape;
  auto a = tensor2({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto left = slice(tape, a, 1, 0, 2);
  auto right = slice(tape, a, 1, 2, 4);
  auto back = concat(tape, {left, right}, 1);
  EXPECT_EQ(back->data, a->data);
  EXPECT_THROW(slice(tape, a, 1, 3, 9), DimensionError);
}

TEST(Tensor, StackAddsAxis) {
  Tape<double> tape;
  auto a = tensor2({2}, {1, 2});
  auto b = tensor2({2}, {3, 4});
  auto s = stack(tape, {a, b}, 0);
  EXPECT_EQ(s->shape, (Shape{2, 2}));
  EXPECT_EQ(s->data, (std::vector<double>{1, 2, 3, 4}));
}

TEST(Tensor, TransposeRoundTrip) {
  Tape<double> tape;
  auto a = tensor2({2, 3}, {1, 2, 3, 4, 5, 6});
  auto t = transpose(tape, a, {1, 0});
  EXPECT_EQ(t->shape, (Shape{3, 2}));
  EXPECT_EQ(t->data, (std::vector<double>{1, 4, 2, 5, 3, 6}));
  auto rt = transpose(tape, t, {1, 0});
  EXPECT_EQ(rt->data, a->data);
}

TEST(Tensor, EmbeddingLookupGathersRows) {
  Tape<double> tape;
  auto table = tensor2({3, 2}, {0, 1, 10, 11, 20, 21});
  auto e = embedding_lookup(tape, table, {2, 0, 2});
  EXPECT_EQ(e->data, (std::vector<double>{20, 21, 0, 1, 20, 21}));
  EXPECT_THROW(embedding_lookup(tape, table, {3}), ValidationError);
}

TEST(Tensor, CrossEntropyUniformIsLogVocab) {
  Tape<double> tape;
  auto logits = make_tensor<double>({2, 4});
  auto loss = cross_entropy(tape, logits, {1, 3}, true);
  EXPECT_NEAR(loss->data[0], std::log(4.0), 1e-12);
  auto total = cross_entropy(tape, logits, {1, 3}, false);
  EXPECT_NEAR(total->data[0], 2.0 * std::log(4.0), 1e-12);
}

TEST(Tensor, TapeSecondBackwardRejected) {
  Tape<double> tape;
  auto a = tensor2({1}, {2.0}, true);
  auto loss = mul(tape, a, a);
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(a->grad[0], 4.0);
  EXPECT_THROW(tape.backward(loss), ValidationError);
  tape.reset();
  a->zero_grad();
  auto loss2 = mul(tape, a, a);
  tape.backward(loss2);
  EXPECT_DOUBLE_EQ(a->grad[0], 4.0);
}

TEST(Tensor, BackwardNeedsScalar) {
  Tape<double> tape;
  auto a = tensor2({2}, {1, 2}, true);
  auto y = add(tape, a, a);
  EXPECT_THROW(tape.backward(y), DimensionError);
}

TEST(Tensor, MeanAllBackwardUniform) {
  Tape<double> tape;
  auto a = tensor2({4}, {1, 2, 3, 4}, true);
  auto m = mean_all(tape, a);
  EXPECT_DOUBLE_EQ(m->data[0], 2.5);
  tape.backward(m);
  for (double g : a->grad) EXPECT_DOUBLE_EQ(g, 0.25);
}

TEST(Tensor, Conv2dIdentityKernel) {
  Tape<double> tape;
  auto x = tensor2({2, 2, 1}, {1, 2, 3, 4});
  auto k = tensor2({1, 1, 1, 1}, {1});
  auto y = conv2d(tape, x, k, 1, 0);
  EXPECT_EQ(y->shape, (Shape{2, 2, 1}));
  EXPECT_EQ(y->data, x->data);
}

TEST(Tensor, Conv2dStridedShape) {
  Tape<double> tape;
  auto x = make_tensor<double>({8, 8, 3});
  auto k = make_tensor<double>({3, 3, 3, 4});
  auto y = conv2d(tape, x, k, 2, 1);
  EXPECT_EQ(y->shape, (Shape{4, 4, 4}));
}

TEST(Tensor, SparseRowMixBlends) {
  Tape<double> tape;
  auto x = tensor2({2, 2}, {0, 0, 4, 8});
  std::vector<std::vector<std::pair<int64_t, double>>> mixes{
      {{0, 0.25}, {1, 0.75}}};
  auto y = sparse_row_mix(tape, x, mixes);
  EXPECT_EQ(y->shape, (Shape{1, 2}));
  EXPECT_DOUBLE_EQ(y->data[0], 3.0);
  EXPECT_DOUBLE_EQ(y->data[1], 6.0);
}

TEST(Tensor, BiasGatherPerHead) {
  Tape<double> tape;
  auto table = tensor2({2, 3}, {0, 1, 2, 10, 11, 12});
  auto y = bias_gather(tape, table, {2, 0, 1, 1}, 2, 2);
  EXPECT_EQ(y->shape, (Shape{2, 2, 2}));
  EXPECT_EQ(y->data, (std::vector<double>{2, 0, 1, 1, 12, 10, 11, 11}));
}

TEST(Tensor, ReshapePreservesCount) {
  Tape<double> tape;
  auto a = tensor2({2, 3}, {1, 2, 3, 4, 5, 6});
  auto r = reshape(tape, a, {3, 2});
  EXPECT_EQ(r->data, a->data);
  EXPECT_THROW(reshape(tape, a, {4, 2}), DimensionError);
}

TEST(Tensor, Float32StorageWithDoubleNormMath) {
  // The norm statistics run at 64-bit even for 32-bit storage.
  Tape<float> tape;
  auto x = make_tensor<float>({2}, {3.0f, 4.0f});
  auto w = make_tensor<float>({2}, {1.0f, 1.0f});
  auto y = rms_norm(tape, x, w, 1e-18);
  EXPECT_NEAR(y->data[0], 0.848528f, 1e-5f);
  EXPECT_NEAR(y->data[1], 1.131371f, 1e-5f);
}

}  // namespace
