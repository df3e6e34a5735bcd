#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "fixtures.hpp"
#include "txnf/objective.hpp"
#include "txnf/ops.hpp"

namespace txnf {
namespace {

using testing::max_fd_error;

Mat<double> random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double sd = 1.0) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * sd;
  return m;
}

// InfoNCE evaluated one position at a time from plain vectors.
double brute_infonce(const Mat<double>& H, const Mat<double>& E, const std::vector<std::int32_t>& y,
                     const std::vector<std::uint8_t>& mask, int B, int T, const std::vector<std::int32_t>& negs,
                     int i, int t) {
  auto dot = [&](int row, int e) {
    double s = 0;
    for (Eigen::Index k = 0; k < H.cols(); ++k) s += H(row, k) * E(e, k);
    return s;
  };
  const int row = i * T + t;
  std::vector<double> cand;
  for (int l = 0; l < B; ++l) {
    if (mask[static_cast<std::size_t>(l * T + t)]) cand.push_back(dot(row, y[static_cast<std::size_t>(l * T + t)]));
  }
  for (int n : negs) cand.push_back(dot(row, n));
  double mx = cand[0];
  for (double c : cand) mx = std::max(mx, c);
  double sum = 0;
  for (double c : cand) sum += std::exp(c - mx);
  return mx + std::log(sum) - dot(row, y[static_cast<std::size_t>(row)]);
}

TEST(NllNormal, ZeroResidualUnitSigma) { EXPECT_NEAR(nll_normal(2.5, 1.0, 2.5), 0.918938533204673, 1e-12); }

TEST(NllNormal, UnitResidual) { EXPECT_NEAR(nll_normal(0.0, 1.0, 1.0), 1.418938533204673, 1e-12); }

TEST(NllNormal, GradientMatchesDifferences) {
  EXPECT_DOUBLE_EQ(nll_normal_grad(0.0, 1.0, 1.0).dmu, -1.0);
  const double h = 1e-6;
  for (auto [mu, s, y] : {std::tuple{0.3, 0.7, -1.2}, std::tuple{-2.0, 2.5, 4.0}}) {
    const auto g = nll_normal_grad(mu, s, y);
    EXPECT_NEAR(g.dmu, (nll_normal(mu + h, s, y) - nll_normal(mu - h, s, y)) / (2 * h), 1e-6);
    EXPECT_NEAR(g.dsigma, (nll_normal(mu, s + h, y) - nll_normal(mu, s - h, y)) / (2 * h), 1e-6);
  }
}

TEST(NllNormal, RejectsNonPositiveSigma) { EXPECT_THROW(nll_normal(0.0, 0.0, 1.0), Error); }

TEST(CrossEntropy, UniformLogits) {
  const std::vector<double> z(4, 0.0);
  for (int y = 0; y < 4; ++y) EXPECT_NEAR(cross_entropy<double>(z, y), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, ConfidentCorrect) {
  const std::vector<double> z{10, 0, 0};
  EXPECT_NEAR(cross_entropy<double>(z, 0), -std::log(1.0 / (1.0 + 2.0 * std::exp(-10.0))), 1e-15);
  EXPECT_NEAR(cross_entropy<double>(z, 0), 9.0799e-5, 1e-8);
}

TEST(CrossEntropy, ShiftInvariant) {
  const std::vector<double> z{0.3, -1.2, 2.0, 0.5};
  std::vector<double> s = z;
  for (double& v : s) v += 123.0;
  EXPECT_NEAR(cross_entropy<double>(z, 2), cross_entropy<double>(s, 2), 1e-10);
}

TEST(SharedNegatives, SinglePositiveIsZero) {
  Rng rng(1);
  const Mat<double> H = random_mat(1, 3, rng), E = random_mat(5, 3, rng);
  const std::vector<std::int32_t> y{2};
  const std::vector<std::uint8_t> m{1};
  EXPECT_DOUBLE_EQ(loss_hcat_shared<double>(H, E, y, m, 1, 1, 0, 3)(0, 0), 0.0);
}

TEST(SharedNegatives, EqualDotsGiveLn2) {
  Mat<double> H(1, 2), E(2, 2);
  H << 1, 0;
  E << 0.5, 1, 0.5, -1;  // both rows have dot 0.5 with H
  SharedNegativeLoss<double> k;
  const std::vector<std::int32_t> y{0};
  const std::vector<std::uint8_t> m{1};
  EXPECT_NEAR(k.forward(H, E, y, m, 1, 1, {1})(0, 0), std::log(2.0), 1e-12);
}

TEST(SharedNegatives, MatchesBruteForce) {
  Rng rng(11);
  const int B = 2, T = 2;
  const Mat<double> H = random_mat(B * T, 3, rng), E = random_mat(6, 3, rng, 0.5);
  const std::vector<std::int32_t> y{1, 4, 3, 0};
  const std::vector<std::uint8_t> m{1, 1, 1, 1};
  const std::vector<std::int32_t> negs{5, 2, 2, 0};
  SharedNegativeLoss<double> k;
  const Mat<double> out = k.forward(H, E, y, m, B, T, negs);
  for (int i = 0; i < B; ++i) {
    for (int t = 0; t < T; ++t) {
      EXPECT_NEAR(out(i, t), brute_infonce(H, E, y, m, B, T, negs, i, t), 1e-6);
      EXPECT_GE(out(i, t), 0.0);
    }
  }
}

TEST(SharedNegatives, MaskedPositionsDropOut) {
  Rng rng(12);
  const int B = 3, T = 2;
  const Mat<double> H = random_mat(B * T, 4, rng);
  const Mat<double> E = random_mat(9, 4, rng);
  const std::vector<std::int32_t> y{1, 4, 3, 0, 8, 8};
  const std::vector<std::uint8_t> m{1, 1, 1, 0, 1, 1};
  const std::vector<std::int32_t> negs{5, 2};
  SharedNegativeLoss<double> k;
  const Mat<double> out = k.forward(H, E, y, m, B, T, negs);
  EXPECT_EQ(out(1, 1), 0.0);
  for (int i = 0; i < B; ++i) {
    for (int t = 0; t < T; ++t) {
      if (m[static_cast<std::size_t>(i * T + t)]) EXPECT_NEAR(out(i, t), brute_infonce(H, E, y, m, B, T, negs, i, t), 1e-9);
    }
  }
  // Gradient reaching the masked row of H, or the masked positive row of E, is exactly zero.
  Mat<double> dH = Mat<double>::Zero(H.rows(), H.cols()), dE = Mat<double>::Zero(E.rows(), E.cols());
  k.backward(Mat<double>::Ones(B, T), H, E, &dH, &dE);
  EXPECT_TRUE(dH.row(3).isZero(0.0));
  EXPECT_TRUE(dE.row(0).isZero(0.0));  // label 0 only occurs at the masked position
}

TEST(SharedNegatives, DeterministicForSeed) {
  Rng rng(13);
  const Mat<double> H = random_mat(8, 4, rng), E = random_mat(50, 4, rng);
  std::vector<std::int32_t> y(8);
  for (auto& v : y) v = static_cast<std::int32_t>(rng.uniform_int(50));
  const std::vector<std::uint8_t> m(8, 1);
  const Mat<double> a = loss_hcat_shared<double>(H, E, y, m, 2, 4, 16, 99);
  const Mat<double> b = loss_hcat_shared<double>(H, E, y, m, 2, 4, 16, 99);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == loss_hcat_shared<double>(H, E, y, m, 2, 4, 16, 100));
}

TEST(SharedNegatives, UniqueFullVocabularyEqualsFullSoftmax) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const auto C = static_cast<Eigen::Index>(2 + rng.uniform_int(511));
    const auto T = static_cast<int>(1 + rng.uniform_int(3));
    const Mat<double> H = random_mat(T, 8, rng), E = random_mat(C, 8, rng);
    std::vector<std::int32_t> y(static_cast<std::size_t>(T));
    for (auto& v : y) v = static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(C)));
    const std::vector<std::uint8_t> m(static_cast<std::size_t>(T), 1);
    std::vector<std::int32_t> all(static_cast<std::size_t>(C));
    std::iota(all.begin(), all.end(), 0);
    SharedNegativeLoss<double> k;
    const Mat<double> shared = k.forward(H, E, y, m, 1, T, all, true);
    const Mat<double> full = loss_hcat_exhaustive<double>(H, E, y, m, 1, T);
    for (int t = 0; t < T; ++t) EXPECT_NEAR(shared(0, t), full(0, t), 1e-6);
  }
}

TEST(IndependentNegatives, NoNegativesIsZero) {
  Rng rng(3);
  const Mat<double> H = random_mat(6, 3, rng), E = random_mat(9, 3, rng);
  const std::vector<std::int32_t> y{1, 2, 3, 4, 5, 6};
  const std::vector<std::uint8_t> m(6, 1);
  EXPECT_TRUE(loss_hcat_independent<double>(H, E, y, m, 2, 3, 0, 5).isZero(0.0));
}

TEST(IndependentNegatives, MatchesBruteForce) {
  Rng rng(4), draw(77);
  const int B = 2, T = 3, n = 5;
  const Mat<double> H = random_mat(B * T, 4, rng), E = random_mat(30, 4, rng);
  const std::vector<std::int32_t> y{1, 2, 3, 4, 5, 6};
  const std::vector<std::uint8_t> m{1, 1, 0, 1, 1, 1};
  IndependentNegativeLoss<double> k;
  const Mat<double> out = k.forward(H, E, y, m, B, T, n, draw);
  const auto& negs = k.negatives();
  for (int r = 0; r < B * T; ++r) {
    if (!m[static_cast<std::size_t>(r)]) {
      EXPECT_EQ(out(r / T, r % T), 0.0);
      continue;
    }
    std::vector<double> cand{H.row(r).dot(E.row(y[static_cast<std::size_t>(r)]))};
    for (int j = 0; j < n; ++j) cand.push_back(H.row(r).dot(E.row(negs[static_cast<std::size_t>(r * n + j)])));
    EXPECT_EQ(cand.size(), static_cast<std::size_t>(n + 1));
    double s = 0;
    for (double c : cand) s += std::exp(c);
    EXPECT_NEAR(out(r / T, r % T), std::log(s) - cand[0], 1e-9);
  }
}

TEST(Exhaustive, EqualsCrossEntropyOfLogits) {
  Rng rng(5);
  const Mat<double> H = random_mat(4, 6, rng), E = random_mat(12, 6, rng);
  const std::vector<std::int32_t> y{0, 11, 5, 5};
  const std::vector<std::uint8_t> m(4, 1);
  const Mat<double> out = loss_hcat_exhaustive<double>(H, E, y, m, 2, 2);
  const Mat<double> Z = H * E.transpose();
  for (int r = 0; r < 4; ++r) {
    std::vector<double> z(Z.row(r).data(), Z.row(r).data() + Z.cols());
    EXPECT_NEAR(out(r / 2, r % 2), cross_entropy<double>(z, y[static_cast<std::size_t>(r)]), 1e-12);
  }
}

TEST(Exhaustive, MonotoneInPositiveDot) {
  Rng rng(6);
  Mat<double> H = random_mat(1, 4, rng), E = random_mat(10, 4, rng);
  const std::vector<std::int32_t> y{3};
  const std::vector<std::uint8_t> m{1};
  double prev = loss_hcat_exhaustive<double>(H, E, y, m, 1, 1)(0, 0);
  for (int step = 0; step < 5; ++step) {
    E.row(3) += 0.2 * H.row(0);  // raises only the positive dot
    const double now = loss_hcat_exhaustive<double>(H, E, y, m, 1, 1)(0, 0);
    EXPECT_LT(now, prev);
    prev = now;
  }
}

TEST(Exhaustive, RefusesHugeVocabulary) {
  const Mat<double> H = Mat<double>::Zero(1, 1), E = Mat<double>::Zero(kExhaustiveCardinalityLimit + 1, 1);
  const std::vector<std::int32_t> y{0};
  const std::vector<std::uint8_t> m{1};
  EXPECT_THROW(loss_hcat_exhaustive<double>(H, E, y, m, 1, 1), Error);
}

// Finite-difference checks of every high-cardinality kernel, through the graph op.
class HcatGradient : public ::testing::TestWithParam<NegativeStrategy> {};

TEST_P(HcatGradient, MatchesCentralDifferences) {
  Rng rng(31);
  const int B = 3, T = 2;
  Mat<double> H = random_mat(B * T, 4, rng), E = random_mat(15, 4, rng);
  const std::vector<std::int32_t> y{1, 4, 3, 0, 8, 8};
  const std::vector<std::uint8_t> m{1, 1, 1, 0, 1, 1};
  NegativeSamplingPlan plan{GetParam(), GetParam() == NegativeStrategy::kShared ? 6 : 3, 0};
  auto value = [&](Mat<double>* dH, Mat<double>* dE) {
    Graph<double> g;
    Parameter<double> ph{"h", H, Mat<double>::Zero(H.rows(), H.cols())};
    Parameter<double> pe{"e", E, Mat<double>::Zero(E.rows(), E.cols())};
    Rng draw(5);
    Var out = hcat_loss(g, g.param(ph), g.param(pe), y, m, B, T, plan, draw);
    if (dH) {
      g.backward(out);
      *dH = ph.grad;
      *dE = pe.grad;
    }
    return g.value(out)(0, 0);
  };
  Mat<double> dH, dE;
  value(&dH, &dE);
  EXPECT_LE(max_fd_error(H, dH, [&] { return value(nullptr, nullptr); }), 1e-3);
  EXPECT_LE(max_fd_error(E, dE, [&] { return value(nullptr, nullptr); }), 1e-3);
}

INSTANTIATE_TEST_SUITE_P(Strategies, HcatGradient,
                         ::testing::Values(NegativeStrategy::kShared, NegativeStrategy::kIndependent,
                                           NegativeStrategy::kExhaustive),
                         [](const auto& info) { return to_string(info.param); });

TEST(GraphLosses, NllAndCrossEntropyGradients) {
  Rng rng(41);
  Mat<double> mu = random_mat(5, 2, rng), raw = random_mat(5, 2, rng), Z = random_mat(5, 4, rng);
  const std::vector<double> y{0.1, -0.3, 1.2, 0.7, 2.0};
  const std::vector<std::int32_t> labels{0, 3, 2, 2, 1};
  const std::vector<std::uint8_t> m{1, 0, 1, 1, 1};
  auto value = [&](std::vector<Mat<double>>* grads) {
    Graph<double> g;
    Parameter<double> pm{"mu", mu, Mat<double>::Zero(5, 2)}, pr{"raw", raw, Mat<double>::Zero(5, 2)},
        pz{"z", Z, Mat<double>::Zero(5, 4)};
    Var sigma = ops::softplus(g, g.param(pr), 1e-4);
    Var a = nll_loss(g, g.param(pm), sigma, 1, y, m);
    Var b = softmax_ce_loss(g, g.param(pz), labels, m);
    Var out = ops::weighted_sum(g, {a, b}, {1.0, 0.7});
    if (grads) {
      g.backward(out);
      *grads = {pm.grad, pr.grad, pz.grad};
    }
    return g.value(out)(0, 0);
  };
  std::vector<Mat<double>> grads;
  value(&grads);
  auto f = [&] { return value(nullptr); };
  EXPECT_LE(max_fd_error(mu, grads[0], f), 1e-3);
  EXPECT_LE(max_fd_error(raw, grads[1], f), 1e-3);
  EXPECT_LE(max_fd_error(Z, grads[2], f), 1e-3);
  EXPECT_TRUE(grads[0].row(1).isZero(0.0));
  EXPECT_TRUE(grads[2].row(1).isZero(0.0));
}

TEST(Aggregate, HandComputedCase) {
  const std::vector<double> losses{0.5, 2.0};
  EXPECT_NEAR(aggregate(1.0, losses, Aggregation::kTreasure).value, 1.75, 1e-9);
}

TEST(Aggregate, AllEqualDoublesPivot) {
  const std::vector<double> losses{1.3, 1.3, 1.3};
  EXPECT_NEAR(aggregate(1.3, losses, Aggregation::kTreasure).value, 2.6, 1e-12);
}

TEST(Aggregate, WeightsAreDetachedRatios) {
  const std::vector<double> losses{0.5, 2.0, 0.0};
  const auto w = aggregate(1.0, losses, Aggregation::kTreasure);
  EXPECT_DOUBLE_EQ(w.pivot_weight, 1.0);
  EXPECT_DOUBLE_EQ(w.weights[0], 1.0 / 3);        // over-performing: gradient of L_i/|L|
  EXPECT_DOUBLE_EQ(w.weights[1], 0.5 / 3);        // scaled by L̂_abn / L̂_i
  EXPECT_DOUBLE_EQ(w.weights[2], 0.0);
  EXPECT_GE(w.value, 1.0);
}

TEST(Aggregate, BaselineModes) {
  const std::vector<double> losses{0.5, 2.0};
  EXPECT_NEAR(aggregate(1.0, losses, Aggregation::kSimple).value, 3.5, 1e-12);
  EXPECT_NEAR(aggregate(1.0, losses, Aggregation::kEqual).value, 3.0, 1e-12);
  const std::vector<double> negative{-0.5};
  EXPECT_NEAR(aggregate(2.0, negative, Aggregation::kEqual).value, 0.0, 1e-12);
  EXPECT_THROW(aggregation_from("median"), ValidationError);
}

// Gradient of the aggregate w.r.t. a parameter that only feeds an
// over-performing task equals the gradient of L_i / |𝐋|.
TEST(Aggregate, OverPerformingTaskGradient) {
  Mat<double> x(1, 1);
  x << 0.3;
  auto total = [&](double* grad) {
    Graph<double> g;
    Parameter<double> px{"x", x, Mat<double>::Zero(1, 1)};
    Parameter<double> pp{"pivot", Mat<double>::Constant(1, 1, 2.0), Mat<double>::Zero(1, 1)};
    Parameter<double> po{"other", Mat<double>::Constant(1, 1, 5.0), Mat<double>::Zero(1, 1)};
    Var li = ops::matmul(g, g.param(px), g.param(px));  // L_i = x²
    const std::vector<double> others{g.value(li)(0, 0), 5.0};
    const auto w = aggregate(2.0, others, Aggregation::kTreasure);
    Var out = ops::weighted_sum(g, {g.param(pp), li, g.param(po)}, {w.pivot_weight, w.weights[0], w.weights[1]});
    if (grad) {
      g.backward(out);
      *grad = px.grad(0, 0);
    }
    return g.value(out)(0, 0);
  };
  double grad = 0;
  total(&grad);
  EXPECT_NEAR(grad, 2 * 0.3 / 2.0, 1e-12);
  const double h = 1e-6;
  x(0, 0) = 0.3 + h;
  const double up = total(nullptr);
  x(0, 0) = 0.3 - h;
  const double down = total(nullptr);
  EXPECT_NEAR((up - down) / (2 * h), grad, 1e-6);
}

TEST(Footprint, IndependentDwarfsSharedAtReferenceShape) {
  const auto s = hcat_footprint(NegativeStrategy::kShared, 32, 64, 64, 1024);
  const auto i = hcat_footprint(NegativeStrategy::kIndependent, 32, 64, 64, 1024);
  EXPECT_GE(static_cast<double>(i.forward) / static_cast<double>(s.forward), 50.0);
  EXPECT_NEAR(static_cast<double>(s.forward), 2.36e6, 0.05e6);
}

TEST(Footprint, CounterMatchesClosedForm) {
  Rng rng(8);
  const int B = 4, T = 3, d = 5, n = 7;
  const Mat<double> H = random_mat(B * T, d, rng), E = random_mat(40, d, rng);
  std::vector<std::int32_t> y(B * T);
  for (auto& v : y) v = static_cast<std::int32_t>(rng.uniform_int(40));
  const std::vector<std::uint8_t> m(B * T, 1);
  Mat<double> dH = Mat<double>::Zero(B * T, d), dE = Mat<double>::Zero(40, d);
  {
    MemoryCounter mem;
    mem.reset();
    SharedNegativeLoss<double> k;
    k.forward(H, E, y, m, B, T, sample_negatives(40, n, rng), false, &mem);
    k.backward(Mat<double>::Ones(B, T), H, E, &dH, &dE, &mem);
    const auto f = hcat_footprint(NegativeStrategy::kShared, B, T, d, n);
    EXPECT_EQ(mem.forward_elements, f.forward);
    EXPECT_EQ(mem.backward_elements, f.backward);
  }
  {
    MemoryCounter mem;
    mem.reset();
    IndependentNegativeLoss<double> k;
    k.forward(H, E, y, m, B, T, n, rng, &mem);
    k.backward(Mat<double>::Ones(B, T), H, E, &dH, &dE, &mem);
    const auto f = hcat_footprint(NegativeStrategy::kIndependent, B, T, d, n);
    EXPECT_EQ(mem.forward_elements, f.forward);
    EXPECT_EQ(mem.backward_elements, f.backward);
  }
}

}  // namespace
}  // namespace txnf
