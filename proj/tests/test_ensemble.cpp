#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "dare/datagen.hpp"
#include "dare/ensemble.hpp"
#include "dare/errors.hpp"
#include "dare/metrics.hpp"
#include "test_util.hpp"

namespace dare {
namespace {

// Member whose output is the constant `out` for every input.
MlpNetwork constant_member(const std::vector<double>& out, OutputActivation act = OutputActivation::linear) {
  ActivationSpec spec;
  spec.output = act;
  auto net = init_network({1, static_cast<int>(out.size())}, spec, 0);
  net.weights[0].setZero();
  for (std::size_t k = 0; k < out.size(); ++k) net.biases[0](static_cast<Eigen::Index>(k)) = out[k];
  return net;
}

Ensemble make_ensemble(std::vector<MlpNetwork> members, LossKind kind) {
  Ensemble e;
  e.loss_kind = kind;
  for (std::size_t m = 0; m < members.size(); ++m) e.member_seeds.push_back(m);
  e.members = std::move(members);
  return e;
}

const Matrix kOnePoint = Matrix::Zero(1, 1);

double raw_for_variance(double var) { return std::log(std::expm1(var - kVarianceFloor)); }

TEST(TrainEnsemble, MemberCountsAndDistinctSeeds) {
  const auto d = two_moons(20, 0.1, 1);
  TrainConfig cfg;
  cfg.max_epochs = 2;
  cfg.batch_size = 10;
  cfg.seed = 40;
  NetworkSpec spec;
  spec.hidden = {4};
  for (int m : {1, 5, 20}) {
    const auto r = train_ensemble({d.x, d.y}, {d.x, d.y}, cfg, spec, m, 2);
    ASSERT_EQ(r.ensemble.size(), static_cast<std::size_t>(m));
    EXPECT_NO_THROW(r.ensemble.validate());
    EXPECT_EQ(r.ensemble.member_seeds.front(), 40u);
    if (m > 1) EXPECT_FALSE(r.ensemble.members[0].weights[0] == r.ensemble.members[1].weights[0]);
  }
  EXPECT_THROW(train_ensemble({d.x, d.y}, {d.x, d.y}, cfg, spec, 0), ConfigError);
}

TEST(TrainEnsemble, WorkerCountDoesNotChangeResults) {
  const auto d = two_moons(20, 0.1, 2);
  TrainConfig cfg;
  cfg.max_epochs = 3;
  cfg.batch_size = 5;
  cfg.tau = 0.05;
  NetworkSpec spec;
  spec.hidden = {6, 6};
  const auto a = train_ensemble({d.x, d.y}, {d.x, d.y}, cfg, spec, 4, 1);
  const auto b = train_ensemble({d.x, d.y}, {d.x, d.y}, cfg, spec, 4, 3);
  for (std::size_t m = 0; m < 4; ++m)
    for (std::size_t l = 0; l < a.ensemble.members[m].depth(); ++l)
      EXPECT_TRUE(a.ensemble.members[m].weights[l] == b.ensemble.members[m].weights[l]);
}

TEST(TrainEnsemble, SingleMemberHasZeroVarianceTerm) {
  const auto e = make_ensemble({constant_member({0.3})}, LossKind::mse);
  EXPECT_NEAR(binary_uncertainty_score(e, kOnePoint)(0), 0.09, 1e-15);
}

TEST(EnsembleValidate, RejectsDuplicateSeedsAndShapes) {
  auto e = make_ensemble({constant_member({0.0}), constant_member({1.0})}, LossKind::mse);
  e.member_seeds = {3, 3};
  EXPECT_THROW(e.validate(), ConfigError);
  e.member_seeds = {3, 4};
  e.members[1] = constant_member({0.0, 1.0});
  EXPECT_THROW(e.validate(), ShapeError);
}

TEST(PredictRegression, IdenticalMembers) {
  const double raw = 0.7;
  const auto e = make_ensemble({constant_member({1.5, raw}), constant_member({1.5, raw})}, LossKind::gaussian_nll);
  const auto p = predict_regression(e, kOnePoint);
  EXPECT_DOUBLE_EQ(p.mean(0, 0), 1.5);
  EXPECT_NEAR(p.variance(0, 0), variance_from_raw(raw), 1e-15);
}

TEST(PredictRegression, MixtureMoments) {
  const double r1 = raw_for_variance(1.0);
  const auto e = make_ensemble({constant_member({0.0, r1}), constant_member({2.0, r1})}, LossKind::gaussian_nll);
  const auto p = predict_regression(e, kOnePoint);
  EXPECT_NEAR(p.mean(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(p.variance(0, 0), 2.0, 1e-12);
}

TEST(PredictRegression, MatchesMonteCarloMixture) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<MlpNetwork> members;
  std::vector<double> mus, vars;
  for (int m = 0; m < 4; ++m) {
    const double mu = 2.0 * u(rng), raw = u(rng);
    members.push_back(constant_member({mu, raw}));
    mus.push_back(mu);
    vars.push_back(variance_from_raw(raw));
  }
  const auto p = predict_regression(make_ensemble(members, LossKind::gaussian_nll), kOnePoint);
  std::uniform_int_distribution<int> pick(0, 3);
  double s = 0.0, ss = 0.0;
  const int n = 1000000;
  for (int i = 0; i < n; ++i) {
    const int m = pick(rng);
    const double y = mus[static_cast<std::size_t>(m)] + std::sqrt(vars[static_cast<std::size_t>(m)]) * z(rng);
    s += y;
    ss += y * y;
  }
  const double mean = s / n, var = ss / n - mean * mean;
  EXPECT_NEAR(p.mean(0, 0), mean, 0.02 * std::max(1.0, std::abs(mean)));
  EXPECT_NEAR(p.variance(0, 0), var, 0.02 * var);
}

TEST(PredictRegression, MseMembersHaveSpreadOnly) {
  const auto e = make_ensemble({constant_member({1.0}), constant_member({3.0})}, LossKind::mse);
  const auto p = predict_regression(e, kOnePoint);
  EXPECT_DOUBLE_EQ(p.mean(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(p.variance(0, 0), 1.0);
  EXPECT_THROW(predict_regression(make_ensemble({constant_member({1.0, 0.0})}, LossKind::classification_mse), kOnePoint),
               ConfigError);
}

TEST(OodScoreClassification, Examples) {
  auto single = make_ensemble({constant_member({2.0, 0.0})}, LossKind::classification_mse);
  EXPECT_EQ(ood_score_classification(single, kOnePoint)(0), 0.0);
  auto agree = make_ensemble({constant_member({2.0, 0.0}), constant_member({2.0, 0.0})}, LossKind::classification_mse);
  EXPECT_EQ(ood_score_classification(agree, kOnePoint)(0), 0.0);
  auto split = make_ensemble({constant_member({2.0, 0.0}), constant_member({0.0, 2.0})}, LossKind::classification_mse);
  EXPECT_DOUBLE_EQ(ood_score_classification(split, kOnePoint)(0), 2.0);
}

TEST(OodScoreClassification, RequiresClassificationMse) {
  auto e = make_ensemble({constant_member({2.0, 0.0})}, LossKind::mse);
  EXPECT_THROW(ood_score_classification(e, kOnePoint), ConfigError);
}

TEST(EntropyScore, UniformOneHotAndGeneric) {
  // Softmax of equal logits is uniform.
  auto uniform = make_ensemble({constant_member({0.0, 0.0, 0.0}, OutputActivation::softmax)},
                               LossKind::softmax_cross_entropy);
  EXPECT_NEAR(entropy_score_softmax(uniform, kOnePoint)(0), std::log(3.0), 1e-12);
  auto sharp = make_ensemble({constant_member({800.0, 0.0}, OutputActivation::softmax)}, LossKind::softmax_cross_entropy);
  EXPECT_NEAR(entropy_score_softmax(sharp, kOnePoint)(0), 0.0, 1e-12);
  auto mix = make_ensemble({constant_member({1.0, 0.0}, OutputActivation::softmax),
                            constant_member({0.0, 2.0}, OutputActivation::softmax)},
                           LossKind::softmax_cross_entropy);
  const double p1 = 0.5 * (std::exp(1.0) / (std::exp(1.0) + 1.0) + 1.0 / (1.0 + std::exp(2.0)));
  const double want = -(p1 * std::log(p1) + (1 - p1) * std::log(1 - p1));
  EXPECT_NEAR(entropy_score_softmax(mix, kOnePoint)(0), want, 1e-12);
}

TEST(BinaryScore, Examples) {
  EXPECT_EQ(binary_uncertainty_score(make_ensemble({constant_member({1.0}), constant_member({1.0})}, LossKind::mse),
                                     kOnePoint)(0),
            0.0);
  EXPECT_DOUBLE_EQ(
      binary_uncertainty_score(make_ensemble({constant_member({0.5}), constant_member({0.5})}, LossKind::mse), kOnePoint)(0),
      0.25);
  EXPECT_DOUBLE_EQ(
      binary_uncertainty_score(make_ensemble({constant_member({0.0}), constant_member({1.0})}, LossKind::mse), kOnePoint)(0),
      0.25);
}

TEST(PredictClasses, ThresholdAndArgmax) {
  Matrix x(1, 1);
  x(0, 0) = 0.0;
  EXPECT_EQ(predict_classes(make_ensemble({constant_member({0.7})}, LossKind::mse), x)[0], 1);
  EXPECT_EQ(predict_classes(make_ensemble({constant_member({0.2})}, LossKind::mse), x)[0], 0);
  EXPECT_EQ(predict_classes(make_ensemble({constant_member({0.0, 1.0, 3.0})}, LossKind::classification_mse), x)[0], 2);
}

TEST(InternalAnalysis, ZeroNetworkHasZeroVarianceBeyondInput) {
  auto net = init_network({2, 5, 4, 1}, {}, 0);
  for (auto& w : net.weights) w.setZero();
  std::mt19937_64 rng(4);
  const Matrix x = testing::random_matrix(30, 2, rng);
  const auto a = internal_analysis(net, x);
  ASSERT_EQ(a.layers.size(), 3u);
  for (std::size_t l = 1; l < a.layers.size(); ++l) EXPECT_EQ(a.layers[l].variance.maxCoeff(), 0.0);
}

TEST(InternalAnalysis, StandardizedInputsHaveUnitVariance) {
  std::mt19937_64 rng(5);
  Matrix x = testing::random_matrix(200, 3, rng, 4.0);
  x = Standardizer::fit(x).transform(x);
  const auto a = internal_analysis(init_network({3, 4, 1}, {}, 1), x);
  for (Eigen::Index k = 0; k < 3; ++k) EXPECT_NEAR(a.layers[0].variance(k), 1.0, 1e-10);
}

TEST(InternalAnalysis, SortedByVarianceWithProbesAndCsv) {
  std::mt19937_64 rng(6);
  const auto net = init_network({2, 6, 1}, {}, 2);
  const Matrix x = testing::random_matrix(50, 2, rng);
  const Matrix probes = testing::random_matrix(3, 2, rng);
  const auto a = internal_analysis(net, x, probes);
  const auto& s = a.layers[1];
  for (Eigen::Index r = 1; r < s.variance.size(); ++r) EXPECT_GE(s.variance(r - 1), s.variance(r));
  EXPECT_EQ(s.probe_activations.rows(), 3);
  const int k = s.order[0];
  EXPECT_DOUBLE_EQ(s.mean_abs_weight(0), net.weights[1].row(k).cwiseAbs().mean());
  std::ostringstream os;
  a.write_layer_csv(1, os);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "rank,component,train_variance,mean_abs_weight,probe_0,probe_1,probe_2");
}

TEST(EnsembleJson, RoundTrip) {
  const auto d = two_moons(10, 0.1, 7);
  TrainConfig cfg;
  cfg.max_epochs = 1;
  cfg.tau = 0.5;
  NetworkSpec spec;
  spec.hidden = {3};
  const auto r = train_ensemble({d.x, d.y}, {d.x, d.y}, cfg, spec, 2);
  const auto back = ensemble_from_json(nlohmann::json::parse(ensemble_to_json(r.ensemble).dump()));
  EXPECT_EQ(back.member_seeds, r.ensemble.member_seeds);
  EXPECT_EQ(back.loss_kind, r.ensemble.loss_kind);
  EXPECT_EQ(back.member_config.tau, 0.5);
  EXPECT_TRUE(binary_uncertainty_score(back, d.x) == binary_uncertainty_score(r.ensemble, d.x));
}

}  // namespace
}  // namespace dare
