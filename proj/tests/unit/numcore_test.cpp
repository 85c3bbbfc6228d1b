#include <cmath>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "codis/numcore/gradcheck.hpp"
#include "codis/numcore/ops.hpp"

using namespace codis;

namespace {

Tensor leaf(Shape shape, std::vector<double> values) { return Tensor::from(std::move(shape), std::move(values), true); }

Tensor random_leaf(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = scale * rng.normal();
  return leaf(std::move(shape), std::move(v));
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto x = Tensor::from({2, 2}, {0.3, -1.2, 4.0, 2.5});
  auto y = ops::matmul(eye, x);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Matmul, HandArithmetic) {
  auto y = ops::matmul(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2, 1}, {1, 1}));
  ASSERT_EQ(y.shape(), (Shape{2, 1}));
  EXPECT_EQ(y[0], 3.0);
  EXPECT_EQ(y[1], 7.0);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  auto b = random_leaf({3, 4}, rng);
  auto r = gradient_check([&](const Tensor& a) { return ops::sum(ops::matmul(a, b)); }, random_leaf({2, 3}, rng));
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST(MaskedSoftmax, EqualScoresAreUniform) {
  for (double c : {-50.0, 0.0, 3.0, 700.0}) {
    auto p = ops::masked_softmax(Tensor::from({3}, {c, c, c}), {1, 1, 1});
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p[i], 1.0 / 3.0, 1e-15);
  }
}

TEST(MaskedSoftmax, TwoEntryOracle) {
  auto p = ops::masked_softmax(Tensor::from({2}, {1.0, 2.0}), {1, 1});
  EXPECT_NEAR(p[0], 0.2689414213699951, 1e-12);
  EXPECT_NEAR(p[1], 0.7310585786300049, 1e-12);
}

TEST(MaskedSoftmax, MaskedEntryIsExactlyZero) {
  auto scores = leaf({3}, {5.0, 9.0, 2.0});
  auto p = ops::masked_softmax(scores, {1, 0, 1});
  const double s3 = 1.0 / (1.0 + std::exp(-3.0));
  EXPECT_NEAR(p[0], s3, 1e-12);
  EXPECT_EQ(p[1], 0.0);
  EXPECT_NEAR(p[2], 1.0 - s3, 1e-12);
  backward(ops::sum(ops::mul(p, Tensor::from({3}, {1.0, 2.0, 3.0}))));
  EXPECT_EQ(scores.grad()[1], 0.0);
}

TEST(MaskedSoftmax, AllZeroMaskThrows) {
  EXPECT_THROW(ops::masked_softmax(Tensor::from({2}, {1.0, 2.0}), {0, 0}), std::invalid_argument);
}

TEST(Swish, Oracles) {
  auto y = ops::swish(Tensor::from({3}, {0.0, 1.0, 20.0}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 0.7310585786300049, 1e-12);
  EXPECT_LT(std::abs(y[2] - 20.0), 1e-6);
}

TEST(Swish, GradientMatchesFiniteDifferences) {
  Rng rng(2);
  auto r = gradient_check([](const Tensor& x) { return ops::sum(ops::swish(x)); }, random_leaf({7}, rng, 2.0));
  EXPECT_LT(r.max_rel_error, 1e-7);
}

TEST(GradReverse, ForwardIdentityBackwardNegated) {
  for (double lambda : {0.0, 0.5, 1.0}) {
    auto x = leaf({3}, {1.0, -2.0, 3.5});
    auto y = ops::grad_reverse(x, lambda);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(y[i], x[i]);
    const std::vector<double> g{0.25, -4.0, 1.5};
    backward(ops::sum(ops::mul(y, Tensor::from({3}, g))));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad_or_zeros()[i], -lambda * g[i]);
  }
}

TEST(StopGradient, BlocksOnlyTheStoppedBranch) {
  auto x = leaf({3}, {1.0, 2.0, 3.0});
  auto y = ops::stop_gradient(x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(y[i], x[i]);
  backward(ops::sum(ops::add(x, ops::stop_gradient(x))));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  auto z = leaf({2}, {1.0, 2.0});
  auto only = ops::sum(ops::stop_gradient(z));
  if (only.requires_grad()) backward(only);
  for (double g : z.grad_or_zeros()) EXPECT_EQ(g, 0.0);
}

TEST(KlCategorical, Oracles) {
  EXPECT_NEAR(ops::kl_categorical(Tensor::from({2}, {0.3, 0.7}), Tensor::from({2}, {0.3, 0.7})).item(), 0.0, 1e-15);
  EXPECT_NEAR(ops::kl_categorical(Tensor::from({2}, {0.5, 0.5}), Tensor::from({2}, {0.25, 0.75})).item(),
              0.5 * std::log(2.0) + 0.5 * std::log(0.5 / 0.75), 1e-12);
  EXPECT_NEAR(ops::kl_categorical(Tensor::from({2}, {1.0, 0.0}), Tensor::from({2}, {0.5, 0.5})).item(),
              std::log(2.0), 1e-10);
}

TEST(KlCategorical, RejectsNonSimplexInput) {
  EXPECT_THROW(ops::kl_categorical(Tensor::from({2}, {0.5, 0.6}), Tensor::from({2}, {0.5, 0.5})),
               std::invalid_argument);
}

TEST(KlDiagGaussian, Oracles) {
  EXPECT_EQ(ops::kl_diag_gaussian_to_std(Tensor::from({1}, {0.0}), Tensor::from({1}, {0.0})).item(), 0.0);
  EXPECT_NEAR(ops::kl_diag_gaussian_to_std(Tensor::from({1}, {1.0}), Tensor::from({1}, {0.0})).item(), 0.5, 1e-15);
  EXPECT_NEAR(ops::kl_diag_gaussian_to_std(Tensor::from({1}, {0.0}), Tensor::from({1}, {std::log(4.0)})).item(),
              0.5 * (4.0 - 1.0 - std::log(4.0)), 1e-12);
}

TEST(Reparameterize, ZeroNoiseReturnsMean) {
  Rng rng(3);
  auto mu = Tensor::from({3}, {0.1, -0.2, 0.3});
  auto z = ops::reparameterize(mu, Tensor::from({3}, {1.0, 2.0, -1.0}), rng, true);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(z[i], mu[i]);
}

TEST(Reparameterize, MonteCarloMoments) {
  Rng rng(4);
  const std::size_t n = 100000;
  auto z1 = ops::reparameterize(Tensor::full({n}, 1.0), Tensor::zeros({n}), rng);
  auto v = z1.values();
  EXPECT_NEAR(std::accumulate(v.begin(), v.end(), 0.0) / n, 1.0, 0.02);
  auto z2 = ops::reparameterize(Tensor::zeros({n}), Tensor::full({n}, std::log(4.0)), rng);
  double ss = 0.0;
  for (double x : z2.values()) ss += x * x;
  EXPECT_NEAR(ss / n, 4.0, 0.1);
}

TEST(Reparameterize, GradientReachesMeanAndLogVariance) {
  Rng rng(5);
  auto mu = random_leaf({4}, rng);
  auto lv = random_leaf({4}, rng, 0.5);
  const std::uint64_t seed = 99;
  auto r = gradient_check_all(
      [&] {
        Rng draw(seed);
        return ops::sum(ops::mul(ops::reparameterize(mu, lv, draw), ops::reparameterize(mu, lv, draw)));
      },
      {mu, lv});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(GradientCheck, SquaredSumOracle) {
  auto r = gradient_check([](const Tensor& x) { return ops::sum(ops::mul(x, x)); }, leaf({3}, {1, 2, 3}));
  EXPECT_EQ(r.analytic, (std::vector<double>{2, 4, 6}));
  EXPECT_LT(r.max_rel_error, 1e-7);
}

TEST(GradientCheck, ConstantFunctionHasZeroError) {
  auto r = gradient_check([](const Tensor&) { return Tensor::scalar(3.0); }, leaf({3}, {1, 2, 3}));
  EXPECT_EQ(r.max_rel_error, 0.0);
  for (double g : r.analytic) EXPECT_EQ(g, 0.0);
}

TEST(GradientCheck, SwishSoftmaxLayerNormChain) {
  Rng rng(6);
  auto gain = random_leaf({5}, rng);
  auto bias = random_leaf({5}, rng);
  auto weights = Tensor::from({5}, {0.3, -1.0, 2.0, 0.5, 1.5});
  auto r = gradient_check(
      [&](const Tensor& x) {
        auto y = ops::softmax(ops::swish(ops::layer_norm(x, gain, bias)));
        return ops::sum(ops::scale_rows(ops::mul(y, ops::reshape(ops::concat_rows({weights, weights}), {2, 5})),
                                        Tensor::from({2}, {1.0, -0.5})));
      },
      random_leaf({2, 5}, rng));
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Dropout, IdentityAtEvalAndInvertedScalingInTraining) {
  Rng rng(7);
  auto x = Tensor::full({1000}, 1.0);
  auto eval = ops::dropout(x, 0.5, rng, false);
  for (double v : eval.values()) EXPECT_EQ(v, 1.0);
  auto train = ops::dropout(x, 0.5, rng, true);
  for (double v : train.values()) EXPECT_TRUE(v == 0.0 || v == 2.0);
}

TEST(Gather, BackwardScatterAddsRepeatedIds) {
  auto table = leaf({3, 2}, {1, 2, 3, 4, 5, 6});
  const std::vector<std::size_t> ids{2, 0, 2};
  auto rows = ops::gather_rows(table, ids);
  EXPECT_EQ(rows.at(0, 0), 5.0);
  EXPECT_EQ(rows.at(1, 1), 2.0);
  backward(ops::sum(rows));
  EXPECT_EQ(table.grad_or_zeros(), (std::vector<double>{1, 1, 0, 0, 2, 2}));
}

TEST(Tape, BackwardVisitsSharedNodeOnce) {
  auto x = leaf({1}, {3.0});
  auto y = ops::mul(x, x);
  auto z = ops::add(y, y);
  backward(ops::sum(z));
  EXPECT_EQ(x.grad()[0], 12.0);
  const auto order = tape_order(ops::sum(ops::add(y, y)));
  std::set<detail::Node*> unique(order.begin(), order.end());
  EXPECT_EQ(unique.size(), order.size());
}

TEST(NoGrad, RecordsNoGraph) {
  auto x = leaf({2}, {1.0, 2.0});
  NoGradGuard guard;
  auto y = ops::mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(DebugChecks, NonFiniteOutputThrows) {
  set_debug_checks(true);
  EXPECT_THROW(ops::exp(Tensor::from({1}, {1e6})), NonFiniteError);
  set_debug_checks(false);
}

TEST(EveryOp, GradientCheck) {
  Rng rng(8);
  auto a = random_leaf({3, 4}, rng);
  auto b = random_leaf({3, 4}, rng);
  auto w = random_leaf({4, 2}, rng);
  auto bias = random_leaf({2}, rng);
  auto pos = Tensor::from({3, 4}, {0.2, 0.3, 0.1, 0.4, 0.25, 0.25, 0.25, 0.25, 0.7, 0.1, 0.1, 0.1});
  auto check = [&](const char* name, const std::function<Tensor()>& f, std::vector<Tensor> leaves) {
    auto r = gradient_check_all(f, leaves);
    EXPECT_LT(r.max_rel_error, 1e-6) << name;
  };
  check("add", [&] { return ops::sum(ops::mul(ops::add(a, b), ops::sub(a, b))); }, {a, b});
  check("scale", [&] { return ops::sum(ops::mul(ops::scale(a, -1.5), a)); }, {a});
  check("linear", [&] { return ops::sum(ops::sigmoid(ops::linear(a, w, bias))); }, {a, w, bias});
  check("matmul_nt", [&] { return ops::sum(ops::relu(ops::matmul_nt(a, b))); }, {a, b});
  check("row_dot", [&] { return ops::sum(ops::exp(ops::scale(ops::row_dot(a, b), 0.3))); }, {a, b});
  check("mean_rows", [&] { return ops::sum(ops::mul(ops::mean_rows(a), ops::mean_rows(b))); }, {a, b});
  check("concat", [&] { return ops::sum(ops::swish(ops::concat_cols({a, ops::slice_cols(b, 1, 3)}))); }, {a, b});
  check("slice_rows", [&] { return ops::mean(ops::mul(ops::slice_rows(a, 1, 3), ops::slice_rows(b, 0, 2))); }, {a, b});
  check("log_softmax", [&] { return ops::sum(ops::mul(ops::log_softmax(a), b)); }, {a, b});
  check("log_clamped", [&] { return ops::sum(ops::log_clamped(ops::sigmoid(a))); }, {a});
  check("masked_softmax",
        [&] { return ops::sum(ops::mul(ops::masked_softmax(a, {1, 0, 1, 1}), b)); }, {a, b});
  check("kl_categorical", [&] { return ops::sum(ops::kl_categorical(pos, ops::softmax(a))); }, {a});
  check("kl_gaussian", [&] { return ops::sum(ops::kl_diag_gaussian_to_std(a, ops::scale(b, 0.3))); }, {a, b});
  check("bce",
        [&] {
          std::vector<double> target{0.0, 0.5, 1.0};
          return ops::sum(ops::binary_cross_entropy(ops::sigmoid(ops::slice_cols(a, 0, 1)), target));
        },
        {a});
  check("router_scores",
        [&] {
          auto ctx = ops::reshape(ops::concat_cols({ops::reshape(a, {1, 12}), ops::reshape(b, {1, 12})}), {2, 12});
          auto e = ops::reshape(ops::slice_rows(b, 0, 3), {4, 3});
          return ops::sum(ops::mul(ops::router_scores(e, ctx), ops::router_scores(e, ctx)));
        },
        {a, b});
  check("layer_norm", [&] { return ops::sum(ops::mul(ops::layer_norm(a, ops::reshape(ops::slice_rows(b, 0, 1), {4}), ops::reshape(ops::slice_rows(b, 1, 2), {4})), b)); },
        {a, b});
}

TEST(EveryOp, AttentionAndPrefixMeanGradients) {
  Rng rng(9);
  const std::size_t batch = 2, steps = 3, width = 4;
  auto q = random_leaf({batch * steps, width}, rng);
  auto k = random_leaf({batch * steps, width}, rng);
  auto v = random_leaf({batch * steps, width}, rng);
  const ops::Mask valid{0, 1, 1, 1, 1, 1};
  auto weights = random_leaf({batch * steps, width}, rng);
  auto r = gradient_check_all(
      [&] { return ops::sum(ops::mul(ops::causal_attention(q, k, v, batch, steps, 2, valid), weights)); }, {q, k, v});
  EXPECT_LT(r.max_rel_error, 1e-6);
  auto p = gradient_check_all(
      [&] { return ops::sum(ops::mul(ops::causal_prefix_mean(q, batch, steps, valid), weights)); }, {q});
  EXPECT_LT(p.max_rel_error, 1e-6);
}

TEST(EveryOp, InfoNceRowsGradient) {
  Rng rng(10);
  auto queries = random_leaf({2, 3}, rng);
  auto table = random_leaf({5, 3}, rng);
  const std::vector<std::size_t> candidates{1, 2, 3, 4, 1, 2};
  auto r = gradient_check_all([&] { return ops::sum(ops::info_nce_rows(queries, table, candidates, 3, 0.75)); },
                              {queries, table});
  EXPECT_LT(r.max_rel_error, 1e-6);
}
