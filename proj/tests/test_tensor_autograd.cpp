#include <gtest/gtest.h>

#include "support.hpp"

using namespace fxq;

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), ShapeError);
  Tensor<float> t({2, 3}, std::vector<float>(6, 1.0f));
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
}

TEST(Tensor, CheckedRejectsNonFinite) {
  EXPECT_THROW(Tensor<double>::checked({2}, {1.0, NAN}), DomainError);
  EXPECT_THROW(Tensor<double>::checked({1}, {INFINITY}), DomainError);
  EXPECT_NO_THROW(Tensor<double>::checked({2}, {1.0, 2.0}));
}

TEST(Tensor, NchwIndexing) {
  Tensor<int> t({2, 3, 4, 5});
  t.at(1, 2, 3, 4) = 7;
  EXPECT_EQ(t[t.size() - 1], 7);
  t.at(0, 1, 0, 0) = 3;
  EXPECT_EQ(t[20], 3);
}

TEST(Tensor, ReshapeCastCompare) {
  Tensor<double> t({2, 2}, {1.5, 2.5, -1, 0});
  const auto r = t.reshaped({4});
  EXPECT_EQ(r.shape(), (Shape{4}));
  EXPECT_THROW(t.reshaped({3}), ShapeError);
  EXPECT_EQ(t.cast<float>()[0], 1.5f);
  EXPECT_EQ(max_abs_diff(t, t), 0.0);
  EXPECT_EQ(shape_string({1, 64, 200}), "[1, 64, 200]");
}

TEST(Backward, SumOfProductGivesInput) {
  auto x = Var<double>::constant(Tensor<double>({3}, {1, -2, 5}));
  auto w = Var<double>::parameter(Tensor<double>({3}, {0.1, 0.2, 0.3}));
  backward(sum(mul(w, x)));
  EXPECT_EQ(w.grad(), x.value());
}

TEST(Backward, NonScalarLossIsContractError) {
  auto w = Var<double>::parameter(Tensor<double>({3}));
  EXPECT_THROW(backward(mul(w, w)), ContractError);
}

TEST(Backward, SecondCallIsAnError) {
  auto w = Var<double>::parameter(Tensor<double>({2}, {1, 2}));
  auto loss = sum(mul(w, w));
  backward(loss);
  EXPECT_THROW(backward(loss), ContractError);
  // A freshly built graph may run again.
  w.zero_grad();
  EXPECT_NO_THROW(backward(sum(mul(w, w))));
  EXPECT_EQ(w.grad()[1], 4.0);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  auto w = Var<double>::parameter(Tensor<double>({1}, {3}));
  auto a = mul(w, w);
  backward(weighted_sum(sum(a), 1.0, sum(a), 2.0));
  EXPECT_DOUBLE_EQ(w.grad()[0], 3 * 2 * 3.0);
}

TEST(Backward, ConstantsGetNoGradient) {
  auto c = Var<double>::constant(Tensor<double>({2}, {1, 2}));
  auto w = Var<double>::parameter(Tensor<double>({2}, {1, 1}));
  backward(sum(mul(c, w)));
  EXPECT_FALSE(c.has_grad());
}

TEST(Backward, DeepChainDoesNotOverflowStack) {
  auto w = Var<double>::parameter(Tensor<double>({1}, {1}));
  Var<double> x = w;
  for (int i = 0; i < 50000; ++i) x = weighted_sum(x, 1.0, x, 0.0);
  backward(x);
  EXPECT_EQ(w.grad()[0], 1.0);
}
