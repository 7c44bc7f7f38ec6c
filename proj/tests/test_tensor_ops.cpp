// SPDX-FileCopyrightText: © 2026 DFF-Adapter contributors
//
// SPDX-License-Identifier: Apache-2.0

#include "test_support.hpp"

namespace dff {
namespace {

using test::expect_gradients_match;
using test::random_tensor;

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  EXPECT_THROW(Tensor::zeros({2, 0}), DimensionError);
  EXPECT_THROW(Tensor::vector({1, 2}).item(), ContractError);
}

TEST(Tensor, HandlesShareStorageAndCloneDoesNot) {
  Tensor a = Tensor::vector({1, 2, 3});
  Tensor b = a;
  b.mutable_values()[0] = 9;
  EXPECT_EQ(a[0], 9);
  Tensor c = a.clone();
  c.mutable_values()[1] = 7;
  EXPECT_EQ(a[1], 2);
}

TEST(Tape, InferenceModeRecordsNothing) {
  Pcg32 rng(1);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  Tape t(Tape::Mode::kInference);
  matmul(t, a, b);
  EXPECT_EQ(t.size(), 0u);
}

TEST(Tape, ConstantsAreNotRecorded) {
  Pcg32 rng(2);
  Tensor a = random_tensor({3, 4}, rng, 1.0, false), b = random_tensor({4, 2}, rng, 1.0, false);
  Tape t;
  matmul(t, a, b);
  EXPECT_EQ(t.size(), 0u);
}

TEST(Tape, BackwardContracts) {
  Pcg32 rng(3);
  Tensor a = random_tensor({2, 2}, rng);
  Tape t;
  Tensor y = scale(t, a, 2.0);
  EXPECT_THROW(t.backward(y), ContractError);
  Tensor s = sum(t, y);
  t.backward(s);
  EXPECT_THROW(t.backward(s), ContractError);
  for (double g : a.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Tape, BackwardSeedScalesGradients) {
  Tensor a = Tensor::vector({1, 2}, true);
  Tape t;
  t.backward(sum(t, a), 3.5);
  EXPECT_EQ(a.grad()[0], 3.5);
  EXPECT_EQ(a.grad()[1], 3.5);
}

TEST(Tape, GradientsAccumulateAcrossTapes) {
  Tensor a = Tensor::vector({1, 2}, true);
  for (int i = 0; i < 2; ++i) {
    Tape t;
    t.backward(sum(t, a));
  }
  EXPECT_EQ(a.grad()[0], 2.0);
}

TEST(Matmul, MatchesNaiveTripleLoop) {
  Pcg32 rng(4);
  const std::size_t m = 7, k = 13, n = 5;
  Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
  Tape t(Tape::Mode::kInference);
  Tensor c = matmul(t, a, b);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      EXPECT_NEAR(c[i * n + j], s, 1e-12);
    }
  }
  EXPECT_THROW(matmul(t, a, a), DimensionError);
}

TEST(Linear, AddsBiasPerRow) {
  Tensor x = Tensor::matrix(2, 2, {1, 2, 3, 4});
  Tensor w = Tensor::identity(2);
  Tensor b = Tensor::vector({10, 20});
  Tape t(Tape::Mode::kInference);
  Tensor y = linear(t, x, w, b);
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{11, 22, 13, 24}));
}

TEST(Gradients, Matmul) {
  Pcg32 rng(10);
  Tensor a = random_tensor({4, 3}, rng), b = random_tensor({3, 5}, rng);
  expect_gradients_match([&](Tape& t) { return matmul(t, a, b); }, {a, b}, 1);
}

TEST(Gradients, Linear) {
  Pcg32 rng(11);
  Tensor x = random_tensor({4, 3}, rng), w = random_tensor({3, 5}, rng), b = random_tensor({5}, rng);
  expect_gradients_match([&](Tape& t) { return linear(t, x, w, b); }, {x, w, b}, 2);
}

TEST(Gradients, ElementwiseOps) {
  Pcg32 rng(12);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), s = random_tensor({3}, rng);
  expect_gradients_match([&](Tape& t) { return add(t, a, b); }, {a, b}, 3);
  expect_gradients_match([&](Tape& t) { return mul(t, a, b); }, {a, b}, 4);
  expect_gradients_match([&](Tape& t) { return scale(t, a, -1.7); }, {a}, 5);
  expect_gradients_match([&](Tape& t) { return mul_scalar(t, a, s, 2); }, {a, s}, 6);
  expect_gradients_match([&](Tape& t) { return reshape(t, a, {2, 6}); }, {a}, 7);
  expect_gradients_match([&](Tape& t) { return sum(t, a); }, {a}, 8);
}

TEST(Gradients, Softmax) {
  Pcg32 rng(13);
  Tensor a = random_tensor({3, 5}, rng), v = random_tensor({6}, rng);
  expect_gradients_match([&](Tape& t) { return softmax(t, a, 1); }, {a}, 9);
  expect_gradients_match([&](Tape& t) { return softmax(t, a, 0); }, {a}, 10);
  expect_gradients_match([&](Tape& t) { return softmax(t, v, 0); }, {v}, 11);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Pcg32 rng(14);
  Tensor a = random_tensor({4, 6}, rng, 3.0, false);
  Tensor shifted = a.clone();
  for (double& x : shifted.mutable_values()) x += 100.0;
  Tape t(Tape::Mode::kInference);
  Tensor p = softmax(t, a, 1), q = softmax(t, shifted, 1);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 6; ++c) s += p[r * 6 + c];
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
  EXPECT_LT(test::max_abs_diff(p.values(), q.values()), 1e-14);
}

TEST(Gradients, LayerNorm) {
  Pcg32 rng(15);
  Tensor x = random_tensor({3, 6}, rng), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
  expect_gradients_match([&](Tape& t) { return layer_norm(t, x, g, b); }, {x, g, b}, 12);
}

TEST(LayerNorm, NormalizesRows) {
  Pcg32 rng(16);
  Tensor x = random_tensor({2, 8}, rng, 5.0, false);
  Tape t(Tape::Mode::kInference);
  Tensor y = layer_norm(t, x, Tensor::full({8}, 1.0), Tensor::zeros({8}), 1e-12);
  for (std::size_t r = 0; r < 2; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 8; ++c) m += y[r * 8 + c];
    m /= 8;
    for (std::size_t c = 0; c < 8; ++c) v += (y[r * 8 + c] - m) * (y[r * 8 + c] - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 8, 1.0, 1e-9);
  }
}

TEST(Gradients, Gelu) {
  Pcg32 rng(17);
  Tensor x = random_tensor({4, 5}, rng, 2.0);
  expect_gradients_match([&](Tape& t) { return gelu(t, x); }, {x}, 13);
}

TEST(Gelu, MatchesTanhFormula) {
  Tensor x = Tensor::vector({-3.0, -0.5, 0.0, 0.7, 2.5});
  Tape t(Tape::Mode::kInference);
  Tensor y = gelu(t, x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    const double ref = 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
    EXPECT_NEAR(y[i], ref, 1e-15);
  }
}

TEST(Gradients, SlicingAndGathering) {
  Pcg32 rng(18);
  Tensor x = random_tensor({3, 8}, rng), y = random_tensor({3, 2}, rng);
  expect_gradients_match([&](Tape& t) { return slice_columns(t, x, 2, 6); }, {x}, 14);
  expect_gradients_match(
      [&](Tape& t) {
        auto parts = channel_split(t, x, 4);
        return concat_columns(t, {parts[3], parts[0], y});
      },
      {x, y}, 15);
  expect_gradients_match([&](Tape& t) { return gather(t, x, {5, 1, 5, 23}); }, {x}, 16);
  expect_gradients_match([&](Tape& t) { return gather_rows(t, x, {2, 0, 2}); }, {x}, 17);
}

TEST(ChannelSplit, RejectsIndivisibleWidth) {
  Tensor x = Tensor::zeros({2, 6});
  Tape t;
  EXPECT_THROW(channel_split(t, x, 4), ConfigError);
  EXPECT_THROW(slice_columns(t, x, 4, 7), DimensionError);
}

// Naive per-head attention, written independently of the Eigen kernel.
Tensor reference_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch, std::size_t tokens,
                           std::size_t heads) {
  const std::size_t d = q.dim(1), dh = d / heads;
  std::vector<double> out(q.size(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < tokens; ++i) {
        std::vector<double> s(tokens);
        double mx = -1e300;
        for (std::size_t j = 0; j < tokens; ++j) {
          double dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += q[(b * tokens + i) * d + h * dh + c] * k[(b * tokens + j) * d + h * dh + c];
          s[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (double& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j < tokens; ++j)
          for (std::size_t c = 0; c < dh; ++c) out[(b * tokens + i) * d + h * dh + c] += s[j] / z * v[(b * tokens + j) * d + h * dh + c];
      }
    }
  }
  return Tensor(q.shape(), std::move(out));
}

TEST(Attention, MatchesReference) {
  Pcg32 rng(19);
  const std::size_t batch = 2, tokens = 5, d = 12, heads = 3;
  Tensor q = random_tensor({batch * tokens, d}, rng), k = random_tensor({batch * tokens, d}, rng),
         v = random_tensor({batch * tokens, d}, rng);
  Tape t(Tape::Mode::kInference);
  Tensor a = attention(t, q, k, v, batch, tokens, heads);
  Tensor r = reference_attention(q, k, v, batch, tokens, heads);
  EXPECT_LT(test::max_abs_diff(a.values(), r.values()), 1e-12);
}

TEST(Gradients, Attention) {
  Pcg32 rng(20);
  const std::size_t batch = 2, tokens = 4, d = 6, heads = 2;
  Tensor q = random_tensor({batch * tokens, d}, rng), k = random_tensor({batch * tokens, d}, rng),
         v = random_tensor({batch * tokens, d}, rng);
  expect_gradients_match([&](Tape& t) { return attention(t, q, k, v, batch, tokens, heads); }, {q, k, v}, 18);
}

TEST(Gradients, LowRankAndExpertWeight) {
  Pcg32 rng(21);
  Tensor x = random_tensor({5, 4}, rng), down = random_tensor({4, 2}, rng), up = random_tensor({2, 4}, rng);
  expect_gradients_match([&](Tape& t) { return low_rank_product(t, x, down, up); }, {x, down, up}, 19);
  expect_gradients_match([&](Tape& t) { return expert_weight(t, down, up); }, {down, up}, 20);
}

TEST(ExpertWeight, ForwardIsProduct) {
  Tensor down = Tensor::matrix(2, 1, {1, 1}), up = Tensor::matrix(1, 2, {1, 1});
  Tensor x = Tensor::matrix(1, 2, {1, 2});
  Tape t(Tape::Mode::kInference);
  Tensor y = matmul(t, x, expert_weight(t, down, up));
  EXPECT_EQ(y[0], 3.0);
  EXPECT_EQ(y[1], 3.0);
}

TEST(Gradients, BlockDiagMatmul) {
  Pcg32 rng(22);
  Tensor x = random_tensor({5, 6}, rng), b0 = random_tensor({2, 2}, rng), b2 = random_tensor({2, 2}, rng);
  expect_gradients_match([&](Tape& t) { return block_diag_matmul(t, x, {b0, Tensor(), b2}); }, {x, b0, b2}, 21);
}

TEST(BlockDiagMatmul, MatchesDenseProduct) {
  Pcg32 rng(23);
  Tensor x = random_tensor({3, 6}, rng, 1.0, false);
  std::vector<Tensor> blocks{random_tensor({2, 2}, rng, 1.0, false), Tensor(), random_tensor({2, 2}, rng, 1.0, false)};
  std::vector<double> dense(36, 0.0);
  for (std::size_t k = 0; k < 3; ++k) {
    if (!blocks[k].defined()) continue;
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) dense[(2 * k + i) * 6 + 2 * k + j] = blocks[k][i * 2 + j];
  }
  Tape t(Tape::Mode::kInference);
  Tensor y = block_diag_matmul(t, x, blocks);
  Tensor ref = matmul(t, x, Tensor({6, 6}, dense));
  EXPECT_LT(test::max_abs_diff(y.values(), ref.values()), 1e-14);
}

TEST(Gradients, Losses) {
  Pcg32 rng(24);
  Tensor z = random_tensor({6, 1}, rng, 3.0), zc = random_tensor({6, 5}, rng, 2.0);
  const std::vector<int> y{0, 1, 1, 0, 1, 0}, c{0, 4, 2, 2, 1, 3};
  expect_gradients_match([&](Tape& t) { return bce_with_logits(t, z, y); }, {z}, 22);
  expect_gradients_match([&](Tape& t) { return cross_entropy(t, zc, c); }, {zc}, 23);
}

TEST(Losses, ClosedFormsAtZeroLogits) {
  Tape t(Tape::Mode::kInference);
  const std::vector<int> y{0, 1}, c{0, 3};
  EXPECT_NEAR(bce_with_logits(t, Tensor::zeros({2, 1}), y).item(), std::log(2.0), 1e-15);
  EXPECT_NEAR(cross_entropy(t, Tensor::zeros({2, 5}), c).item(), std::log(5.0), 1e-15);
}

TEST(Losses, StableAtExtremeLogits) {
  Tape t(Tape::Mode::kInference);
  const std::vector<int> y{1, 0};
  const double l = bce_with_logits(t, Tensor::vector({800.0, -800.0}), y).item();
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, 0.0, 1e-300);
  const std::vector<int> c{0};
  EXPECT_NEAR(cross_entropy(t, Tensor::matrix(1, 2, {0.0, 1000.0}), c).item(), 1000.0, 1e-9);
}

TEST(Losses, RejectInvalidLabels) {
  Tape t;
  const std::vector<int> bad{2}, neg{-1};
  EXPECT_THROW(bce_with_logits(t, Tensor::vector({0.0}), bad), LabelError);
  EXPECT_THROW(cross_entropy(t, Tensor::zeros({1, 3}), neg), LabelError);
}

TEST(FiniteDiffCheck, PassesOnCorrectRuleAndReportsEveryCoordinate) {
  Pcg32 rng(25);
  std::vector<Tensor> params{random_tensor({3, 2}, rng), random_tensor({2, 3}, rng)};
  Tensor x = random_tensor({4, 3}, rng, 1.0, false);
  auto loss = [&](Tape& t) { return sum(t, gelu(t, matmul(t, x, expert_weight(t, params[0], params[1])))); };
  GradCheckReport r = finite_diff_check(loss, params, 1e-5, 1e-4);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
  EXPECT_EQ(r.coordinates.size(), 12u);
}

TEST(FiniteDiffCheck, CatchesSignFlippedBackward) {
  Pcg32 rng(26);
  std::vector<Tensor> params{random_tensor({3, 2}, rng), random_tensor({2, 3}, rng)};
  Tensor x = random_tensor({4, 3}, rng, 1.0, false);
  auto loss = [&](Tape& t) { return sum(t, gelu(t, matmul(t, x, expert_weight(t, params[0], params[1], true)))); };
  GradCheckReport r = finite_diff_check(loss, params, 1e-5, 1e-4, {{0, 1}, {1, 4}});
  EXPECT_FALSE(r.passed);
  EXPECT_EQ(r.coordinates.size(), 2u);
  EXPECT_NEAR(r.coordinates[0].analytic, -r.coordinates[0].numeric, 1e-6);
}

TEST(Ops, OutputsFiniteOnFiniteInputs) {
  Pcg32 rng(27);
  Tensor x = random_tensor({4, 8}, rng, 50.0, false);
  Tape t(Tape::Mode::kInference);
  for (const Tensor& y : {gelu(t, x), softmax(t, x, 1), layer_norm(t, x, Tensor::full({8}, 1.0), Tensor::zeros({8})),
                          attention(t, x, x, x, 1, 4, 2)}) {
    for (double v : y.values()) EXPECT_TRUE(std::isfinite(v));
  }
}

}  // namespace
}  // namespace dff
