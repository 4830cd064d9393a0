#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "embscale/scalinglaw.hpp"
#include "embscale/synth.hpp"
#include "fixtures.hpp"

using namespace embscale;

namespace {

std::vector<FitPoint> chinchilla_grid(const ChinchillaParams& p) {
  std::vector<FitPoint> pts;
  for (double n : {1e7, 3e7, 1e8, 3e8, 1e9, 3e9})
    for (double d : {1e8, 1e9, 1e10, 1e11}) pts.push_back({1.0, n, d, predict_chinchilla(p, n, d)});
  return pts;
}

}  // namespace

TEST(PredictChinchilla, Substitution) {
  EXPECT_DOUBLE_EQ(predict_chinchilla({1, 1, 1, 1, 1}, 2, 4), 1.75);
  EXPECT_DOUBLE_EQ(predict_chinchilla({1.3, 0, 0, 0.4, 0.6}, 17, 1e9), 1.3);
  EXPECT_NEAR(predict_chinchilla({0.7, 5, 9, 0.5, 0.5}, 1e30, 1e30), 0.7, 1e-9);
  EXPECT_THROW(predict_chinchilla({1, 1, 1, 1, 1}, 0, 4), DomainError);
  EXPECT_THROW(predict_chinchilla({1, 1, 1, 1, 1}, 2, -4), DomainError);
}

TEST(PredictModified, HandEvaluatedPoint) {
  const ModifiedParams p{0.2, 1, 0, 0.5, 2, 1, 1, 0.5};
  EXPECT_NEAR(predict_modified(p, 0.5, 1e4, std::exp(2.0)), 0.2 + 2.0 / 100.0 + 2.0 / std::numbers::e, 1e-12);
  EXPECT_NEAR(predict_modified(p, 0.5, 1e4, std::exp(2.0)), 0.955759, 1e-6);
}

TEST(PredictModified, FullTrainingDropsSparsityTerm) {
  const auto p = fixtures::modified_truth();
  const double n = 3e8, d = 2e9;
  const double expected = p.irreducible_loss + (p.a_d * std::log(d) + p.b_d) * std::pow(n, -p.alpha) +
                          p.c_s * std::pow(d, -p.beta);
  EXPECT_DOUBLE_EQ(predict_modified(p, 1.0, n, d), expected);
}

TEST(PredictModified, CollapsesToChinchilla) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0), ln(2.0, 25.0);
  for (int i = 0; i < 50; ++i) {
    const ModifiedParams m{0.3, 0.0, 40.0 * u(rng), 0.1 + u(rng), 0.0, 0.5 + u(rng), 30.0 * u(rng), 0.1 + u(rng)};
    const ChinchillaParams c{m.irreducible_loss, m.b_d, m.c_s, m.alpha, m.beta};
    const double n = std::exp(ln(rng)), d = std::exp(ln(rng)), s = u(rng);
    EXPECT_NEAR(predict_modified(m, s, n, d), predict_chinchilla(c, n, d), 1e-12);
  }
}

TEST(PredictModified, DomainErrors) {
  const auto p = fixtures::modified_truth();
  EXPECT_THROW(predict_modified(p, 1.5, 1e6, 1e6), DomainError);
  EXPECT_THROW(predict_modified(p, -0.1, 1e6, 1e6), DomainError);
  EXPECT_THROW(predict_modified(p, 0.5, 0.0, 1e6), DomainError);
  EXPECT_THROW(predict_modified(p, 0.5, 1e6, 1.0), DomainError);
  EXPECT_NO_THROW(predict_modified(p, 0.0, 1e6, 1.0001));
}

TEST(PredictModified, MonotoneInNAndD) {
  const auto p = fixtures::modified_truth();
  for (double s : {0.0, 0.05, 0.4, 1.0}) {
    for (double ln = 14.0; ln < 22.0; ln += 0.5) {
      for (double ld = 12.0; ld < 25.0; ld += 0.5) {
        ASSERT_GT(p.a_d * ld + p.b_d, 0.0);
        const double n = std::exp(ln), d = std::exp(ld);
        const double here = predict_modified(p, s, n, d);
        EXPECT_LE(predict_modified(p, s, n * 1.01, d), here);
        EXPECT_LE(predict_modified(p, s, n, d * 1.01), here);
      }
    }
  }
}

TEST(Objective, HuberLargeDeltaIsHalfSquaredError) {
  const auto truth = fixtures::chinchilla_truth();
  auto pts = chinchilla_grid(truth);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z(0.0, 0.05);
  for (auto& p : pts) p.loss *= std::exp(z(rng));
  double half_sq = 0.0;
  for (const auto& p : pts) {
    const double r = std::log(p.loss) - std::log(predict_chinchilla(truth, p.n, p.d));
    half_sq += 0.5 * r * r;
  }
  const double h = fit_objective(truth, pts, 1e6, ResidualSpace::log);
  EXPECT_NEAR(h, half_sq, 1e-6 * half_sq);
}

TEST(Objective, AnalyticGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const auto g = generate(fixtures::recovery_spec(0.01));
  const auto pts = fit_points(g.runs.records);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (Formula f : {Formula::chinchilla, Formula::modified}) {
    const detail::NormalizedModel model(f, 3e8, 1e9, ResidualSpace::log, 0.001);
    const auto prep = model.prepare(pts);
    const std::size_t dim = model.dim();
    for (int trial = 0, drawn = 0; trial < 50 && drawn < 10000; ++drawn) {
      std::vector<double> th(dim);
      if (f == Formula::chinchilla) {
        th = {std::log(0.3) + 0.3 * u(rng), u(rng), u(rng), std::log(0.3) + 0.5 * u(rng), std::log(0.3) + 0.5 * u(rng)};
      } else {
        th = {std::log(0.3) + 0.3 * u(rng), 0.05 * u(rng), 1.0 + 0.3 * u(rng), std::log(0.3) + 0.5 * u(rng),
              u(rng),                       0.5 * u(rng),  1.0 + 0.3 * u(rng), std::log(0.3) + 0.5 * u(rng)};
      }
      std::vector<double> grad(dim), scratch(dim);
      const double base = model.objective(th, prep, grad);
      if (!std::isfinite(base)) continue;  // outside the log-residual domain; redraw
      ++trial;
      double gnorm = 0.0;
      for (double v : grad) gnorm = std::max(gnorm, std::abs(v));
      for (std::size_t k = 0; k < dim; ++k) {
        const double h = 1e-6 * std::max(1.0, std::abs(th[k]));
        auto tp = th, tm = th;
        tp[k] += h;
        tm[k] -= h;
        const double fd = (model.objective(tp, prep, scratch) - model.objective(tm, prep, scratch)) / (2.0 * h);
        EXPECT_NEAR(grad[k], fd, 1e-5 * std::max(std::abs(fd), 1e-3 * gnorm))
            << to_string(f) << " trial " << trial << " coef " << k;
      }
    }
  }
}

TEST(Fit, ChinchillaNoiselessRecovery) {
  const auto truth = fixtures::chinchilla_truth();
  const auto pts = chinchilla_grid(truth);
  const auto rep = fit_points_report(pts, {}, Formula::chinchilla, FitConfig{});
  for (const auto& p : pts) {
    EXPECT_LT(std::abs(predict(rep.params, 1.0, p.n, p.d) - p.loss) / p.loss, 1e-3);
  }
  EXPECT_EQ(rep.starts_tried, 3u * 3u * 3u * 4u * 4u);
  EXPECT_TRUE(rep.converged);
}

TEST(Fit, ModifiedNoisyHoldout) {
  const auto g = generate(fixtures::recovery_spec(0.01));
  ASSERT_EQ(g.runs.records.size(), 200u);
  const auto rep = fit(g.runs.records, Formula::modified);
  EXPECT_EQ(rep.n_test, 25u);
  EXPECT_EQ(rep.n_train, 175u);
  ASSERT_TRUE(rep.test_rmse_log.has_value());
  EXPECT_LT(*rep.test_rmse_log, 0.02);
}

TEST(Fit, ModifiedNoisyFitPredictsNoiselessGrid) {
  const auto noisy = generate(fixtures::recovery_spec(0.01));
  const auto clean = generate(fixtures::recovery_spec(0.0));
  const auto rep = fit(noisy.runs.records, Formula::modified);
  double worst = 0.0;
  for (const auto& r : clean.runs.records) {
    const double pred = predict(rep.params, r.trainable_fraction, static_cast<double>(r.n_nonembed), r.tokens);
    worst = std::max(worst, std::abs(pred - r.final_loss) / r.final_loss);
  }
  EXPECT_LT(worst, 0.02);
}

TEST(Fit, ModifiedNoiselessRecovery) {
  const auto g = generate(fixtures::recovery_spec(0.0));
  const auto rep = fit(g.runs.records, Formula::modified);
  const auto got = coefficient_values(rep.params);
  const auto want = coefficient_values(fixtures::modified_truth());
  for (std::size_t k = 0; k < got.size(); ++k) EXPECT_NEAR(got[k], want[k], 1e-3 * std::abs(want[k])) << k;
}

TEST(Fit, ConstantLoss) {
  std::vector<FitPoint> pts;
  for (double n : {1e7, 1e8, 1e9})
    for (double d : {1e8, 1e9, 1e10, 1e11}) pts.push_back({1.0, n, d, 2.0});
  const auto rep = fit_points_report(pts, {}, Formula::chinchilla, FitConfig{});
  const auto& c = std::get<ChinchillaParams>(rep.params);
  EXPECT_NEAR(c.irreducible_loss, 2.0, 2e-3);
  EXPECT_LT(rep.train_objective, 1e-8);
  for (const auto& p : pts) EXPECT_NEAR(predict(rep.params, 1.0, p.n, p.d), 2.0, 1e-4);
}

TEST(Fit, ReportedObjectiveIsReevaluatedAndBeatsEveryStart) {
  const auto g = generate(fixtures::recovery_spec(0.02, 11));
  const auto pts = fit_points(g.runs.records);
  for (Formula f : {Formula::chinchilla, Formula::modified}) {
    FitConfig cfg;
    const auto rep = fit_points_report(pts, {}, f, cfg);
    EXPECT_NEAR(fit_objective(rep.params, pts, cfg.huber_delta, cfg.residual_space), rep.train_objective, 1e-10);
    for (const auto& init : init_grid_params(pts, f, cfg)) {
      const double v = fit_objective(init, pts, cfg.huber_delta, cfg.residual_space);
      if (std::isfinite(v)) {
        EXPECT_LE(rep.train_objective, v * (1.0 + 1e-12));
      }
    }
  }
}

TEST(Fit, DeterministicAcrossCallsAndThreadCounts) {
  const auto g = generate(fixtures::recovery_spec(0.01, 3));
  FitConfig one;
  one.threads = 1;
  FitConfig four;
  four.threads = 4;
  const auto a = report_to_json(fit(g.runs.records, Formula::modified, one)).dump();
  const auto b = report_to_json(fit(g.runs.records, Formula::modified, one)).dump();
  const auto c = report_to_json(fit(g.runs.records, Formula::modified, four)).dump();
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
}

TEST(Fit, LinearResidualSpace) {
  const auto truth = fixtures::chinchilla_truth();
  const auto pts = chinchilla_grid(truth);
  FitConfig cfg;
  cfg.residual_space = ResidualSpace::linear;
  const auto rep = fit_points_report(pts, {}, Formula::chinchilla, cfg);
  for (const auto& p : pts) EXPECT_LT(std::abs(predict(rep.params, 1.0, p.n, p.d) - p.loss) / p.loss, 1e-3);
}

TEST(Fit, Errors) {
  const auto pts = chinchilla_grid(fixtures::chinchilla_truth());
  EXPECT_THROW(fit_points_report(std::span(pts).first(6), {}, Formula::chinchilla, FitConfig{}), InsufficientDataError);
  FitConfig bad;
  bad.huber_delta = 0.0;
  EXPECT_THROW(fit_points_report(pts, {}, Formula::chinchilla, bad), ValidationError);

  // Every start predicts negative losses, so the log objective is undefined everywhere.
  FitConfig hopeless;
  hopeless.init_grid = {{"a_d", {0.0}}, {"b_d", {-1e6}}, {"a_s", {0.0}}, {"c_s", {-1e6}}};
  try {
    fit_points_report(pts, {}, Formula::modified, hopeless);
    FAIL();
  } catch (const FitFailure& e) {
    EXPECT_NE(std::string(e.what()).find("inits tried"), std::string::npos);
  }

  auto g = generate(fixtures::recovery_spec(0.0));
  g.runs.records[0].data_measure = DataMeasure::steps;
  EXPECT_THROW(fit(g.runs.records, Formula::modified), ValidationError);
}

TEST(Fit, ParamsJsonRoundTrip) {
  const ScalingParams m = fixtures::modified_truth();
  nlohmann::json doc = {{"formula", "modified"}, {"coefficients", params_to_json(m)}};
  EXPECT_EQ(std::get<ModifiedParams>(scaling_params_from_json(doc)), std::get<ModifiedParams>(m));
  doc["coefficients"]["beta"] = -1.0;
  EXPECT_THROW(scaling_params_from_json(doc), ValidationError);
  EXPECT_THROW(scaling_params_from_json(nlohmann::json{{"formula", "cubic"}, {"coefficients", {}}}), ValidationError);
}
