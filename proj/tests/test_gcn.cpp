/*
 * Copyright (c) 2026, The gftgcn Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "gftgcn/gcn.hpp"
#include "gftgcn/gradcheck.hpp"

#include <gtest/gtest.h>

#include <sstream>

namespace gftgcn {
namespace {

GcnConfig small_config() {
  GcnConfig c;
  c.k = 3;
  c.n = 4;
  c.hidden = 5;
  c.d = 6;
  c.epochs = 5;
  c.batch_size = 4;
  return c;
}

Matrix random_features(int k, int n, SplitMix64& rng) {
  Matrix f(k, n);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = rng.normal();
  return f;
}

TEST(Propagation, PathOfThreeClosedForm) {
  // Degrees with self-loops are 2, 3, 2.
  Matrix p = path_propagation(3);
  EXPECT_NEAR(p(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(p(1, 1), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(p(0, 1), 1.0 / std::sqrt(6.0), 1e-15);
  EXPECT_EQ(p(0, 2), 0.0);
  EXPECT_TRUE(p.isApprox(p.transpose()));
}

TEST(Propagation, SpectrumInsideUnitInterval) {
  for (int k : {1, 2, 5, 10, 25}) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(path_propagation(k));
    EXPECT_LE(es.eigenvalues().maxCoeff(), 1.0 + 1e-12);
    EXPECT_GT(es.eigenvalues().minCoeff(), -1.0);
  }
  EXPECT_THROW(path_propagation(0), PreconditionError);
}

TEST(Xavier, RespectsLimit) {
  SplitMix64 rng(1);
  Matrix w = xavier_uniform(10, 30, rng);
  const double limit = std::sqrt(6.0 / 40.0);
  EXPECT_LE(w.cwiseAbs().maxCoeff(), limit);
  EXPECT_NEAR(w.mean(), 0.0, 0.05);
}

TEST(GcnForward, RowsAreUnitNorm) {
  GcnModel m = make_gcn(small_config());
  SplitMix64 rng(2);
  std::vector<Matrix> f;
  for (int i = 0; i < 5; ++i) f.push_back(random_features(3, 4, rng));
  std::vector<const Matrix*> ptrs;
  for (const auto& x : f) ptrs.push_back(&x);
  Matrix z = gcn_forward(m, ptrs).value();
  ASSERT_EQ(z.rows(), 5);
  ASSERT_EQ(z.cols(), 6);
  for (Eigen::Index r = 0; r < z.rows(); ++r) EXPECT_NEAR(z.row(r).norm(), 1.0, 1e-12);
}

TEST(GcnForward, BatchMatchesSingle) {
  GcnModel m = make_gcn(small_config());
  SplitMix64 rng(3);
  Matrix a = random_features(3, 4, rng);
  Matrix b = random_features(3, 4, rng);
  Matrix batch = gcn_forward(m, {&a, &b}).value();
  EXPECT_TRUE(batch.row(1).transpose().isApprox(gcn_embed(m, b), 1e-14));
}

TEST(GcnForward, ZeroInputFallsBackToFirstAxis) {
  GcnModel m = make_gcn(small_config());
  Vector z = gcn_embed(m, Matrix::Zero(3, 4));
  Vector e1 = Vector::Zero(6);
  e1(0) = 1.0;
  EXPECT_EQ(z, e1);
}

TEST(GcnForward, ShapeMismatchThrows) {
  GcnModel m = make_gcn(small_config());
  EXPECT_THROW(gcn_embed(m, Matrix::Zero(4, 4)), ShapeError);
  EXPECT_THROW(gcn_forward(m, {}), PreconditionError);
}

Vector unit(std::initializer_list<double> v) {
  Vector x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double e : v) x(i++) = e;
  return x.normalized();
}

double loss_for(const Vector& a, const Vector& b, int label, double margin = 0.5) {
  return contrastive_loss(ad::constant(a.transpose()), ad::constant(b.transpose()), Vector::Constant(1, label), margin)
      .scalar();
}

TEST(ContrastiveLoss, WorkedExamples) {
  const Vector x = unit({1, 0});
  EXPECT_NEAR(loss_for(x, x, 1), 0.0, 1e-15);
  // Cosine 0.5 at margin 0.5 sits on the hinge boundary.
  EXPECT_NEAR(loss_for(x, unit({0.5, std::sqrt(0.75)}), 0), 0.0, 1e-15);
  // Cosine 0.8: hinge 0.8 - 0.5 = 0.3.
  EXPECT_NEAR(loss_for(x, unit({0.8, 0.6}), 0), 0.3, 1e-12);
  // Genuine at cosine 0.2 costs 0.8.
  EXPECT_NEAR(loss_for(x, unit({0.2, std::sqrt(0.96)}), 1), 0.8, 1e-12);
  // Orthogonal impostor costs nothing.
  EXPECT_NEAR(loss_for(x, unit({0, 1}), 0), 0.0, 1e-15);
}

TEST(ContrastiveLoss, AveragesOverBatch) {
  Matrix a(2, 2);
  a << 1, 0, 1, 0;
  Matrix b(2, 2);
  b << 0.8, 0.6, 0.2, std::sqrt(0.96);
  Vector y(2);
  y << 0, 1;
  EXPECT_NEAR(contrastive_loss(ad::constant(a), ad::constant(b), y, 0.5).scalar(), (0.3 + 0.8) / 2.0, 1e-12);
  EXPECT_THROW(contrastive_loss(ad::constant(a), ad::constant(b), Vector::Ones(3), 0.5), ShapeError);
}

/// Smallest distance of any ReLU or hinge argument from its kink.
double kink_margin(const GcnModel& m, const std::vector<Matrix>& f, const std::vector<LabeledPair>& pairs) {
  double margin = std::numeric_limits<double>::infinity();
  std::vector<Vector> z;
  for (const auto& x : f) {
    Matrix h = x;
    for (int l = 0; l < m.config.layers; ++l) {
      Matrix pre = m.propagation * h * m.weights[static_cast<std::size_t>(l)].value();
      margin = std::min(margin, pre.cwiseAbs().minCoeff());
      h = pre.cwiseMax(0.0);
    }
    z.push_back((h.colwise().mean() * m.weights.back().value()).transpose().normalized());
  }
  for (const auto& p : pairs) {
    if (!p.label) margin = std::min(margin, std::abs(z[p.a].dot(z[p.b]) - (1.0 - m.config.margin)));
  }
  return margin;
}

TEST(GcnGradient, PairLossMatchesFiniteDifferences) {
  SplitMix64 rng(4);
  int checked = 0;
  while (checked < 20) {
    GcnConfig c = small_config();
    c.layers = 1 + static_cast<int>(rng.below(3));
    c.seed = rng.next();
    GcnModel m = make_gcn(c);
    std::vector<Matrix> f;
    for (int i = 0; i < 4; ++i) f.push_back(random_features(3, 4, rng));
    std::vector<LabeledPair> pairs{{0, 1, 1}, {2, 3, 0}, {0, 2, 0}, {1, 3, 1}};
    // The derivative is undefined at a kink; such draws are replaced.
    if (kink_margin(m, f, pairs) < 1e-4) continue;
    std::vector<Matrix> weights;
    for (const auto& w : m.weights) weights.push_back(w.value());
    const double err = ad::gradient_error(
        [&](const std::vector<ad::Tensor>& leaves) {
          GcnModel probe = m;
          probe.weights = leaves;
          ad::Tensor loss;
          gcn_pair_loss(probe, f, pairs, &loss);
          return loss;
        },
        weights);
    EXPECT_LT(err, 1e-4) << "config " << checked;
    ++checked;
  }
}

TEST(GcnTraining, ZeroLearningRateLeavesWeights) {
  GcnConfig c = small_config();
  c.learning_rate = 0.0;
  GcnModel m = make_gcn(c);
  const Matrix before = m.weights[0].value();
  SplitMix64 rng(5);
  std::vector<Matrix> f{random_features(3, 4, rng), random_features(3, 4, rng)};
  train_gcn(m, f, {{0, 1, 0}});
  EXPECT_EQ(m.weights[0].value(), before);
}

struct TwoSubjects {
  std::vector<Matrix> features;
  std::vector<LabeledPair> pairs;
};

TwoSubjects two_subjects(std::uint64_t seed) {
  SplitMix64 rng(seed);
  const Matrix base_a = random_features(3, 4, rng);
  const Matrix base_b = random_features(3, 4, rng);
  TwoSubjects t;
  for (int i = 0; i < 6; ++i) t.features.push_back((i < 3 ? base_a : base_b) + 0.05 * random_features(3, 4, rng));
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = i + 1; j < 6; ++j) t.pairs.push_back({i, j, (i < 3) == (j < 3) ? 1 : 0});
  return t;
}

TEST(GcnTraining, SeparatesTwoSubjects) {
  TwoSubjects t = two_subjects(6);
  GcnConfig c = small_config();
  c.epochs = 200;
  c.learning_rate = 1e-2;
  GcnModel m = make_gcn(c);
  auto history = train_gcn(m, t.features, t.pairs);
  EXPECT_LT(history.back(), history.front());
  double genuine = 1.0;
  double impostor = -1.0;
  for (const auto& p : t.pairs) {
    const double s = cosine_similarity(gcn_embed(m, t.features[p.a]), gcn_embed(m, t.features[p.b]));
    if (p.label) genuine = std::min(genuine, s);
    else impostor = std::max(impostor, s);
  }
  EXPECT_GT(genuine, impostor);
  EXPECT_LT(impostor, 0.5 + 1e-3);
}

TEST(GcnTraining, SeededRunsAreIdentical) {
  TwoSubjects t = two_subjects(7);
  GcnModel a = make_gcn(small_config());
  GcnModel b = make_gcn(small_config());
  train_gcn(a, t.features, t.pairs);
  train_gcn(b, t.features, t.pairs);
  for (std::size_t i = 0; i < a.weights.size(); ++i) EXPECT_EQ(a.weights[i].value(), b.weights[i].value());
  EXPECT_THROW(train_gcn(a, t.features, {}), PreconditionError);
}

TEST(GcnCheckpoint, RoundTripIsBitExact) {
  GcnModel m = make_gcn(small_config());
  m.config_hash = 0x1234ABCDULL;
  std::stringstream buf;
  write_gcn(buf, m);
  GcnModel r = read_gcn(buf);
  EXPECT_EQ(r.config_hash, m.config_hash);
  EXPECT_EQ(r.config.k, 3);
  EXPECT_EQ(r.config.d, 6);
  ASSERT_EQ(r.weights.size(), m.weights.size());
  for (std::size_t i = 0; i < m.weights.size(); ++i) EXPECT_EQ(r.weights[i].value(), m.weights[i].value());
}

TEST(GcnCheckpoint, RejectsCorruptInput) {
  std::stringstream bad("XXXX");
  EXPECT_THROW(read_gcn(bad), ParseError);
  std::stringstream buf;
  write_gcn(buf, make_gcn(small_config()));
  std::string bytes = buf.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_gcn(truncated), ParseError);
}

TEST(GcnConfigJson, RoundTrip) {
  GcnConfig c = small_config();
  c.margin = 0.3;
  nlohmann::json j = c;
  GcnConfig r = j.get<GcnConfig>();
  EXPECT_EQ(r.k, c.k);
  EXPECT_EQ(r.hidden, c.hidden);
  EXPECT_EQ(r.margin, 0.3);
  GcnConfig partial = nlohmann::json{{"epochs", 3}}.get<GcnConfig>();
  EXPECT_EQ(partial.epochs, 3);
  EXPECT_EQ(partial.d, 64);
}

}  // namespace
}  // namespace gftgcn
