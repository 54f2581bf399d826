#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "cfl/dfiv.hpp"
#include "cfl/errors.hpp"
#include "cfl/head.hpp"
#include "test_util.hpp"

using cfl::Matrix;

namespace {

// [x; x_i x_j (i <= j); 1]: the structural function is exactly linear in these.
Matrix quadratic_features(const Matrix& x) {
  const std::size_t d = x.rows(), n = x.cols();
  Matrix f(d + d * (d + 1) / 2 + 1, n);
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t r = 0;
    for (std::size_t i = 0; i < d; ++i) f(r++, j) = x(i, j);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = a; b < d; ++b) f(r++, j) = x(a, j) * x(b, j);
    f(r, j) = 1.0;
  }
  return f;
}

double plain_regression_test_mse(const cfl::IvDataset& d) {
  const Matrix w = cfl::ridge_solution(d.stage2_y, quadratic_features(d.stage2_x), 1e-6);
  return cfl::mse(cfl::matmul(w, quadratic_features(d.test_x)), d.test_f);
}

cfl::DfivConfig tiny_config() {
  cfl::DfivConfig c;
  c.hidden_x = {8};
  c.features_x = 4;
  c.hidden_z = {8};
  c.features_z = 5;
  c.reg12 = 0.3;
  c.iterations = 5;
  c.t1 = 3;
  c.t2 = 2;
  c.batch1 = 32;
  c.batch2 = 32;
  c.lr1 = c.lr2 = 1e-2;
  c.seed = 4;
  return c;
}

}  // namespace

TEST(IvData, StructuralFunctionValues) {
  // v^T x = 1 gives (1 - 1.6) / 2.2
  Matrix x(5, 2);
  x(0, 0) = 1.0 / 0.6;
  EXPECT_NEAR(cfl::iv_structural(x)(0, 0), -0.6 / 2.2, 1e-15);
  EXPECT_NEAR(cfl::iv_structural(x)(0, 1), -1.6 / 2.2, 1e-15);
  const Matrix g = cfl::iv_treatment_mean(Matrix{{1.0}, {2.0}, {-1.0}});
  EXPECT_NEAR(g(0, 0), 1.0, 0);
  EXPECT_NEAR(g(3, 0), std::tanh(2.0), 1e-15);
  EXPECT_NEAR(g(4, 0), -1.0, 1e-15);
}

TEST(IvData, ShapesAndDeterminism) {
  auto a = cfl::generate_iv_data(100, 80, 50, 2.0, 0.1, 3);
  auto b = cfl::generate_iv_data(100, 80, 50, 2.0, 0.1, 3);
  EXPECT_EQ(a.stage1_x.rows(), cfl::kIvTreatmentDim);
  EXPECT_EQ(a.stage1_z.rows(), cfl::kIvInstrumentDim);
  EXPECT_EQ(a.stage1_x.cols(), 100u);
  EXPECT_EQ(a.stage2_y.cols(), 80u);
  EXPECT_EQ(a.val_x.cols(), 50u);
  EXPECT_EQ(a.test_f.cols(), 50u);
  EXPECT_EQ(a.stage2_y, b.stage2_y);
  EXPECT_EQ(a.test_x, b.test_x);
  EXPECT_EQ(a.test_f, cfl::iv_structural(a.test_x));
  for (double z : a.stage1_z.data()) {
    EXPECT_GE(z, -2.0);
    EXPECT_LE(z, 2.0);
  }
}

TEST(IvData, UnconfoundedRegressionRecoversStructuralFunction) {
  auto d = cfl::generate_iv_data(100, 2000, 1000, 0.0, 0.1, 1);
  EXPECT_LT(plain_regression_test_mse(d), 0.02);
}

TEST(IvData, ConfoundingBiasesPlainRegression) {
  auto clean = cfl::generate_iv_data(100, 2000, 1000, 0.0, 0.1, 1);
  auto conf = cfl::generate_iv_data(100, 2000, 1000, 2.0, 0.1, 1);
  EXPECT_GT(plain_regression_test_mse(conf), 0.1 + 5.0 * plain_regression_test_mse(clean));
}

TEST(IvData, BundleFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "cfl_iv_bundle";
  std::filesystem::remove_all(dir);
  cfl::write_iv_bundle(dir, cfl::generate_iv_data(10, 10, 5, 2.0, 0.1, 0));
  for (const char* f : {"stage1.csv", "stage2.csv", "val.csv", "test.csv", "meta.csv"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  std::filesystem::remove_all(dir);
}

TEST(DfivConfig, Validation) {
  cfl::DfivConfig c;
  EXPECT_NO_THROW(c.validate());
  c.reg12 = 0.0;
  EXPECT_THROW(c.validate(), cfl::ConfigError);
  c.reg12 = 1e-4;
  c.t1 = 0;
  EXPECT_THROW(c.validate(), cfl::ConfigError);
  EXPECT_EQ(cfl::parse_dfiv_head("ridge"), cfl::DfivHeadKind::ridge);
  EXPECT_THROW(cfl::parse_dfiv_head("lasso"), cfl::ConfigError);
}

TEST(Dfiv, Stage2GradientMatchesFiniteDifferences) {
  auto d = cfl::generate_iv_data(40, 30, 10, 2.0, 0.1, 1);
  for (auto kind : {cfl::DfivHeadKind::proximal, cfl::DfivHeadKind::ridge}) {
    auto c = tiny_config();
    c.head = kind;
    auto st = cfl::init_dfiv(c);
    std::mt19937_64 rng(3);
    st.W = cfl::testing::randn(st.W.rows(), st.W.cols(), rng);
    st.w = cfl::testing::randn(1, st.w.cols(), rng);
    const Matrix phi1 = cfl::augment_features(cfl::features(st.instrument, d.stage1_z), true);
    const Matrix phi2 = cfl::augment_features(cfl::features(st.instrument, d.stage2_z), true);
    const auto analytic = cfl::stage2_gradient(st, d.stage1_x, phi1, phi2, d.stage2_y).flatten();
    const double strength = kind == cfl::DfivHeadKind::proximal ? c.reg12 : c.reg1;
    auto loss = [&](const std::vector<double>& p) {
      auto probe = st.treatment;
      probe.set_parameters(p);
      const Matrix psi1 = cfl::features(probe, d.stage1_x);
      const Matrix w_star = kind == cfl::DfivHeadKind::proximal
                                ? cfl::proximal_solution(psi1, phi1, st.W, strength)
                                : cfl::ridge_solution(psi1, phi1, strength);
      const Matrix u = cfl::augment_features(cfl::matmul(w_star, phi2), true);
      return cfl::squared_norm(cfl::sub(cfl::matmul(st.w, u), d.stage2_y));
    };
    EXPECT_LT(cfl::testing::max_rel_err(analytic, cfl::testing::numeric_grad(loss, st.treatment.parameters())),
              1e-6);
  }
}

TEST(Dfiv, HeadUpdatesAreExactMinimizers) {
  auto d = cfl::generate_iv_data(200, 200, 50, 2.0, 0.1, 2);
  auto r = cfl::dfiv_train(tiny_config(), d);
  ASSERT_FALSE(r.diverged) << r.diagnostic;
  EXPECT_LE(r.diagnostics.max_stage1_head_grad, 1e-8);
  EXPECT_LE(r.diagnostics.max_stage2_head_grad, 1e-8);
  EXPECT_EQ(r.record.rows().size(), 5u);
  EXPECT_EQ(r.state.t1, 15);
  EXPECT_EQ(r.state.t2, 10);
}

TEST(Dfiv, FullBatchSingleSweepIsDeterministic) {
  auto d = cfl::generate_iv_data(60, 60, 20, 2.0, 0.1, 5);
  auto c = tiny_config();
  c.t1 = c.t2 = 1;
  c.batch1 = c.batch2 = 0;
  c.reg12 = 1e-4;
  c.iterations = 1;
  auto a = cfl::dfiv_train(c, d);
  auto b = cfl::dfiv_train(c, d);
  ASSERT_FALSE(a.diverged);
  EXPECT_EQ(a.state.treatment, b.state.treatment);
  EXPECT_EQ(a.state.instrument, b.state.instrument);
  EXPECT_EQ(a.state.w, b.state.w);
  EXPECT_EQ(a.state.W, b.state.W);
  std::ostringstream sa, sb;
  cfl::write_csv(sa, a.record);
  cfl::write_csv(sb, b.record);
  EXPECT_EQ(sa.str(), sb.str());
}

TEST(Dfiv, HugeRegularizersFreezeHeadsButNotBackbones) {
  auto d = cfl::generate_iv_data(100, 100, 20, 2.0, 0.1, 6);
  auto c = tiny_config();
  c.reg1 = c.reg2 = 1e12;
  auto st = cfl::init_dfiv(c);
  std::mt19937_64 rng(7);
  st.W = cfl::testing::randn(st.W.rows(), st.W.cols(), rng);
  st.w = cfl::testing::randn(1, st.w.cols(), rng);
  const auto before = st;
  auto r = cfl::dfiv_train_from(st, d);
  ASSERT_FALSE(r.diverged);
  EXPECT_LE(cfl::frobenius_norm(cfl::sub(r.state.W, before.W)), 1e-6 * cfl::frobenius_norm(before.W));
  EXPECT_LE(cfl::frobenius_norm(cfl::sub(r.state.w, before.w)), 1e-6 * cfl::frobenius_norm(before.w));
  EXPECT_NE(r.state.treatment, before.treatment);
  EXPECT_NE(r.state.instrument, before.instrument);
}

TEST(Dfiv, UntrainedCurrentHeadScoresSecondMomentOfTarget) {
  auto d = cfl::generate_iv_data(100, 100, 2000, 2.0, 0.1, 8);
  auto st = cfl::init_dfiv(tiny_config());
  double mean = 0, second = 0;
  for (double f : d.test_f.data()) mean += f, second += f * f;
  mean /= 2000.0;
  second /= 2000.0;
  const double var = second - mean * mean;
  const double m = cfl::dfiv_evaluate(st, d, cfl::DfivEvalMode::current);
  EXPECT_NEAR(m, second, 1e-12);
  EXPECT_NEAR(m, var, 0.1 * var);
}

TEST(Dfiv, EvaluationModesAgreeOnHeadsAndDiffer) {
  auto d = cfl::generate_iv_data(200, 200, 100, 2.0, 0.1, 9);
  auto c = tiny_config();
  c.iterations = 20;
  auto r = cfl::dfiv_train(c, d, [&](const cfl::DfivState& s) {
    return cfl::dfiv_evaluate(s, d, cfl::DfivEvalMode::current, true);
  });
  ASSERT_FALSE(r.diverged);
  const double cur = cfl::dfiv_evaluate(r.state, d, cfl::DfivEvalMode::current);
  const double re = cfl::dfiv_evaluate(r.state, d, cfl::DfivEvalMode::reestimate);
  EXPECT_TRUE(std::isfinite(cur));
  EXPECT_TRUE(std::isfinite(re));
  EXPECT_NEAR(cfl::mse(cfl::dfiv_predict(r.state, d.test_x, r.state.w), d.test_f), cur, 1e-15);
  EXPECT_FALSE(std::isnan(r.record.last_eval()));
}
