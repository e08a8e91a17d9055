#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <numbers>

#include "mstdiff/numerics/dft.hpp"
#include "mstdiff/numerics/grad_check.hpp"
#include "mstdiff/numerics/linalg.hpp"
#include "mstdiff/numerics/rng.hpp"
#include "support/oracles.hpp"

using namespace mstdiff;

namespace {

Tensor<double> random_matrix(std::size_t r, std::size_t c, Rng& rng, double sd = 1.0) {
  Tensor<double> m({r, c});
  for (auto& v : m.data()) v = sd * rng.normal();
  return m;
}

Tensor<double> random_symmetric(std::size_t n, Rng& rng) {
  auto a = random_matrix(n, n, rng);
  Tensor<double> s({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) s(i, j) = 0.5 * (a(i, j) + a(j, i));
  return s;
}

Tensor<double> random_rate(std::size_t n, Rng& rng) {
  Tensor<double> r({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) r(i, j) = r(j, i) = rng.uniform() < 0.5 ? rng.uniform() : 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) s += r(i, j);
    r(i, i) = -s;
  }
  return r;
}

}  // namespace

TEST(Tensor, RejectsZeroDimension) { EXPECT_THROW(Tensor<double>({3, 0}), ShapeError); }

TEST(Tensor, ShapeProductMatchesData) {
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  Tensor<double> t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
}

TEST(Matmul, IdentityIsNeutral) {
  Rng rng(1);
  auto m = random_matrix(3, 3, rng);
  EXPECT_EQ(matmul(Tensor<double>::identity(3), m), m);
}

TEST(Matmul, HandExample) {
  auto a = Tensor<double>::matrix({{1, 2}, {3, 4}});
  auto b = Tensor<double>::matrix({{0}, {1}});
  EXPECT_EQ(matmul(a, b), Tensor<double>::matrix({{2}, {4}}));
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(2);
  auto a = random_matrix(5, 7, rng);
  auto b = random_matrix(7, 3, rng);
  EXPECT_LT(max_abs_diff(matmul(a, b), oracle::triple_loop_matmul(a, b)), 1e-12);
}

TEST(Matmul, DimensionMismatchThrows) {
  EXPECT_THROW(matmul(Tensor<double>({2, 3}), Tensor<double>({2, 3})), ShapeError);
}

TEST(SymExpm, ZeroTimeIsIdentity) {
  Rng rng(3);
  EXPECT_LT(max_abs_diff(sym_expm(random_symmetric(5, rng), 0.0), Tensor<double>::identity(5)), 1e-12);
}

TEST(SymExpm, TwoStateChainClosedForm) {
  auto r = Tensor<double>::matrix({{-1, 1}, {1, -1}});
  const auto q = sym_expm(r, 0.5);
  const double a = 0.5 * (1 + std::exp(-1.0)), b = 0.5 * (1 - std::exp(-1.0));
  EXPECT_NEAR(q(0, 0), a, 1e-12);
  EXPECT_NEAR(q(0, 1), b, 1e-12);
  EXPECT_NEAR(q(1, 0), b, 1e-12);
  EXPECT_NEAR(q(0, 0), 0.683940, 1e-6);
  EXPECT_NEAR(q(0, 1), 0.316060, 1e-6);
}

TEST(SymExpm, MatchesTaylorSeries) {
  Rng rng(4);
  auto r = random_symmetric(6, rng);
  EXPECT_LT(max_abs_diff(sym_expm(r, 0.3), oracle::taylor_expm(r, 0.3)), 1e-8);
}

TEST(SymExpm, AsymmetricInputThrows) {
  EXPECT_THROW(sym_expm(Tensor<double>::matrix({{0, 1}, {0, 0}}), 1.0), ContractError);
}

TEST(SymExpm, SemigroupProperty) {
  Rng rng(5);
  auto r = random_rate(7, rng);
  const auto lhs = matmul(sym_expm(r, 0.4), sym_expm(r, 1.1));
  EXPECT_LT(max_abs_diff(lhs, sym_expm(r, 1.5)), 1e-8);
}

TEST(SymExpm, RowsSumToOneForRateMatrices) {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    auto r = random_rate(8, rng);
    for (double t : {0.0, 0.01, 1.0, 10.0, 100.0}) {
      const auto q = sym_expm(r, t);
      for (std::size_t i = 0; i < 8; ++i) {
        double s = 0.0;
        for (auto v : q.row(i)) s += v;
        EXPECT_NEAR(s, 1.0, 1e-9);
      }
    }
  }
}

TEST(SymEig, ReconstructsAndIsOrthogonal) {
  Rng rng(7);
  auto a = random_symmetric(6, rng);
  auto e = sym_eig(a);
  Tensor<double> lam({6, 6});
  for (std::size_t i = 0; i < 6; ++i) lam(i, i) = e.eigenvalues[i];
  const auto rec = matmul(matmul(e.eigenvectors, lam), transpose(e.eigenvectors));
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (rec[i] - a[i]) * (rec[i] - a[i]);
    den += a[i] * a[i];
  }
  EXPECT_LT(std::sqrt(num / den), 1e-8);
  EXPECT_LT(max_abs_diff(matmul(transpose(e.eigenvectors), e.eigenvectors), Tensor<double>::identity(6)), 1e-8);
}

TEST(Dft, ConstantSeriesIsDcOnly) {
  std::vector<double> x(8, 2.5);
  const auto s = dft(x);
  EXPECT_NEAR(s[0].real(), 20.0, 1e-12);
  for (std::size_t k = 1; k < 8; ++k) EXPECT_LT(std::abs(s[k]), 1e-12);
}

TEST(Dft, PureCosine) {
  std::vector<double> x(8);
  for (std::size_t t = 0; t < 8; ++t) x[t] = std::cos(2 * std::numbers::pi * t / 8.0);
  const auto s = dft(x);
  for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(std::abs(s[k]), (k == 1 || k == 7) ? 4.0 : 0.0, 1e-12);
}

TEST(Dft, RoundTripAndNaiveOracle) {
  Rng rng(8);
  std::vector<double> x(336);
  for (auto& v : x) v = rng.normal();
  const auto s = dft(x);
  const auto ref = oracle::naive_dft(x);
  for (std::size_t k = 0; k < x.size(); ++k) EXPECT_LT(std::abs(s[k] - ref[k]), 1e-9);
  const auto back = idft(s);
  for (std::size_t t = 0; t < x.size(); ++t) EXPECT_NEAR(back[t].real(), x[t], 1e-10);
}

TEST(Rng, SameSeedSameSequence) {
  Rng a(42), b(42);
  const std::vector<double> w{0.1, 0.5, 0.4};
  for (int i = 0; i < 1000; ++i) {
    const double x = a.normal(), y = b.normal();
    EXPECT_EQ(std::memcmp(&x, &y, sizeof x), 0);
    EXPECT_EQ(a.categorical(std::span<const double>(w)), b.categorical(std::span<const double>(w)));
  }
}

TEST(Rng, ForkIsDeterministicAndDistinct) {
  Rng a(9);
  auto f1 = a.fork(3), f2 = a.fork(3), f3 = a.fork(4);
  EXPECT_EQ(f1.next_u64(), f2.next_u64());
  EXPECT_NE(a.fork(3).next_u64(), f3.next_u64());
}

TEST(GradCheck, Quadratic) {
  Rng rng(10);
  auto theta = random_matrix(4, 3, rng);
  const double err = grad_check(
      [](ad::Tape<double>&, ad::Var<double> x) { return ad::scale(ad::sum_squares(x), 0.5); }, theta);
  EXPECT_LT(err, 1e-9);
  ad::Tape<double> tape;
  auto x = tape.leaf(theta);
  tape.backward(ad::scale(ad::sum_squares(x), 0.5));
  EXPECT_LT(max_abs_diff(tape.grad(x), theta), 1e-12);
}

TEST(GradCheck, SoftmaxCrossEntropyOneLayer) {
  Rng rng(11);
  ParamSet<double> p;
  p.add("w", random_matrix(5, 4, rng));
  p.add("b", random_matrix(1, 4, rng).reshaped({4}));
  const auto x = random_matrix(6, 5, rng);
  const std::vector<std::size_t> labels{0, 1, 2, 3, 1, 0};
  auto f = [&](ad::Tape<double>& t, const std::vector<ad::Var<double>>& v) {
    return ad::cross_entropy(ad::linear(t.constant(x), v[0], v[1]), labels);
  };
  EXPECT_LT(grad_check(f, p, 1e-4).max_rel_error, 1e-5);
}

TEST(GradCheck, NonFiniteThrows) {
  Tensor<double> theta({2}, std::numeric_limits<double>::infinity());
  EXPECT_THROW(grad_check([](ad::Tape<double>&, ad::Var<double> x) { return ad::sum(x); }, theta), NumericError);
}

// Every primitive used by the denoiser, checked in isolation.
class OpGradient : public ::testing::Test {
 protected:
  Rng rng{12};
  Tensor<double> rand(std::size_t r, std::size_t c, double sd = 1.0) { return random_matrix(r, c, rng, sd); }
  // Weighted sum against a fixed random projection so every output entry
  // carries a distinct gradient.
  ad::Var<double> project(ad::Tape<double>& t, ad::Var<double> y) {
    Rng local(99);
    Tensor<double> w(y.shape());
    for (auto& v : w.data()) v = local.normal();
    return ad::sum(ad::mul(y, t.constant(w)));
  }
  template <class F>
  double check(F f, std::vector<Tensor<double>> inputs) {
    ParamSet<double> p;
    for (std::size_t i = 0; i < inputs.size(); ++i) p.add("x" + std::to_string(i), inputs[i]);
    return grad_check([&](ad::Tape<double>& t, const std::vector<ad::Var<double>>& v) { return project(t, f(t, v)); },
                      p)
        .max_rel_error;
  }
};

TEST_F(OpGradient, Elementwise) {
  using V = std::vector<ad::Var<double>>;
  EXPECT_LT(check([](auto&, const V& v) { return ad::add(v[0], v[1]); }, {rand(3, 4), rand(3, 4)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::sub(v[0], v[1]); }, {rand(3, 4), rand(3, 4)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::mul(v[0], v[1]); }, {rand(3, 4), rand(3, 4)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::scale(v[0], 2.5); }, {rand(3, 4)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::sigmoid(v[0]); }, {rand(3, 4)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::gelu(v[0]); }, {rand(3, 4)}), 1e-5);
  // Keep ReLU inputs away from the kink.
  auto x = rand(3, 4);
  for (auto& v : x.data()) v += v > 0 ? 0.1 : -0.1;
  EXPECT_LT(check([](auto&, const V& v) { return ad::relu(v[0]); }, {x}), 1e-5);
}

TEST_F(OpGradient, BroadcastAndResampling) {
  using V = std::vector<ad::Var<double>>;
  EXPECT_LT(check([](auto&, const V& v) { return ad::add_row(v[0], v[1]); }, {rand(3, 4), rand(1, 4)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::tile_rows(v[0], 3); }, {rand(2, 4)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::repeat_rows(v[0], 2); }, {rand(3, 4)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::avgpool_rows(v[0], 2); }, {rand(6, 4)}), 1e-5);
}

TEST_F(OpGradient, LinearMaps) {
  using V = std::vector<ad::Var<double>>;
  EXPECT_LT(check([](auto&, const V& v) { return ad::matmul(v[0], v[1]); }, {rand(3, 4), rand(4, 2)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::linear(v[0], v[1], v[2]); },
                  {rand(3, 4), rand(4, 2), rand(1, 2).reshaped({2})}),
            1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::transpose(v[0]); }, {rand(3, 4)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::contract_mid(v[0], v[1]); }, {rand(3, 6), rand(3, 2)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::conv1d_same(v[0], v[1], v[2], 4, 3); },
                  {rand(8, 2), rand(6, 3), rand(1, 3).reshaped({3})}),
            1e-5);
}

TEST_F(OpGradient, Normalisation) {
  using V = std::vector<ad::Var<double>>;
  EXPECT_LT(check([](auto&, const V& v) { return ad::softmax_rows(v[0]); }, {rand(3, 5)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::log_softmax_rows(v[0]); }, {rand(3, 5)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::layer_norm(v[0], v[1], v[2]); },
                  {rand(3, 6), rand(1, 6).reshaped({6}), rand(1, 6).reshaped({6})}),
            1e-5);
}

TEST_F(OpGradient, Indexing) {
  using V = std::vector<ad::Var<double>>;
  EXPECT_LT(check([](auto&, const V& v) { return ad::gather_rows(v[0], {2, 0, 2, 1}); }, {rand(3, 4)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::reshape(v[0], {4, 3}); }, {rand(3, 4)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::slice_rows(v[0], 1, 2); }, {rand(4, 3)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::slice_cols(v[0], 1, 2); }, {rand(4, 3)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::concat_cols<double>({v[0], v[1]}); }, {rand(3, 2), rand(3, 4)}),
            1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::concat_rows<double>({v[0], v[1]}); }, {rand(2, 3), rand(4, 3)}),
            1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::interleave_segments<double>({v[0], v[1]}, 2); },
                  {rand(2, 3), rand(4, 3)}),
            1e-5);
}

TEST_F(OpGradient, Reductions) {
  using V = std::vector<ad::Var<double>>;
  EXPECT_LT(check([](auto&, const V& v) { return ad::sum(v[0]); }, {rand(3, 4)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::mean(v[0]); }, {rand(3, 4)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::sum_squares(v[0]); }, {rand(3, 4)}), 1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::mse(v[0], v[1]); }, {rand(3, 4), rand(3, 4)}), 1e-5);
}

TEST_F(OpGradient, Losses) {
  using V = std::vector<ad::Var<double>>;
  EXPECT_LT(check([](auto&, const V& v) { return ad::cross_entropy(v[0], {0, 3, 1}); }, {rand(3, 4)}), 1e-5);
  Tensor<double> q({3, 4});
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) q(r, c) = (r + c + 1) / 10.0;
  EXPECT_LT(check([&](auto&, const V& v) { return ad::kl_rows(q, ad::softmax_rows(v[0])); }, {rand(3, 4)}), 1e-5);
  Tensor<double> target({3, 4});
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = (i % 3 == 0) ? 1.0 : 0.0;
  EXPECT_LT(check([&](auto&, const V& v) { return ad::bce_with_logits(v[0], target); }, {rand(3, 4)}), 1e-5);
}

TEST_F(OpGradient, RowwiseVecmatAndAttention) {
  using V = std::vector<ad::Var<double>>;
  auto mats_mut = std::make_shared<Tensor<double>>(Shape{2, 3, 3});
  for (auto& v : mats_mut->data()) v = rng.uniform();
  std::shared_ptr<const Tensor<double>> mats = mats_mut;
  EXPECT_LT(check([&](auto&, const V& v) { return ad::rowwise_vecmat(ad::softmax_rows(v[0]), mats, std::vector<std::size_t>{1, 0, 1, 1}); },
                  {rand(4, 3)}),
            1e-5);
  EXPECT_LT(check([](auto&, const V& v) { return ad::attention(v[0], v[1], v[2], 2, 2); },
                  {rand(6, 4), rand(4, 4), rand(4, 4)}),
            1e-5);
}

TEST(Adam, ClipsAndRejectsNonFinite) {
  ParamSet<double> p;
  p.add("x", Tensor<double>({3}, 1.0));
  Adam<double> opt({.lr = 0.1, .clip_norm = 1.0});
  const double norm = opt.step(p, {Tensor<double>({3}, 10.0)});
  EXPECT_NEAR(norm, std::sqrt(300.0), 1e-9);
  EXPECT_LT(p[0][0], 1.0);
  EXPECT_THROW(opt.step(p, {Tensor<double>({3}, std::nan(""))}), NumericError);
}
