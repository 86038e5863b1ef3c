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

#include "gftgcn/gradcheck.hpp"
#include "gftgcn/protect.hpp"

#include <gtest/gtest.h>

namespace gftgcn {
namespace {

/// Two unit rows with cosine exactly c.
Matrix pair_with_cosine(double c) {
  Matrix m = Matrix::Zero(2, 3);
  m(0, 0) = 1.0;
  m(1, 0) = c;
  m(1, 1) = std::sqrt(1.0 - c * c);
  return m;
}

ProtectLossWeights weights() { return {}; }

TEST(Masks, PartitionOrderedPairs) {
  SplitMix64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto n = 2 + rng.below(8);
    std::vector<std::string> subjects;
    std::vector<std::uint64_t> keys;
    for (std::uint64_t i = 0; i < n; ++i) {
      subjects.push_back("s" + std::to_string(rng.below(3)));
      keys.push_back(rng.below(3));
    }
    const auto m = make_masks(subjects, keys);
    const Matrix total = m.gen + m.imp + m.diff + m.mis;
    const auto sz = static_cast<Eigen::Index>(n);
    EXPECT_EQ(total, Matrix::Ones(sz, sz) - Matrix::Identity(sz, sz));
    for (Eigen::Index i = 0; i < sz; ++i) {
      for (Eigen::Index j = 0; j < sz; ++j) {
        if (i == j) continue;
        const auto a = static_cast<std::size_t>(i);
        const auto b = static_cast<std::size_t>(j);
        EXPECT_EQ(m.gen(i, j), subjects[a] == subjects[b] && keys[a] == keys[b] ? 1.0 : 0.0);
        EXPECT_EQ(m.imp(i, j), subjects[a] != subjects[b] && keys[a] == keys[b] ? 1.0 : 0.0);
        EXPECT_EQ(m.diff(i, j), subjects[a] == subjects[b] && keys[a] != keys[b] ? 1.0 : 0.0);
      }
    }
  }
  EXPECT_THROW(make_masks({"a"}, {1, 2}), ShapeError);
}

TEST(Discriminability, IdentityOnGenuinePairsIsZero) {
  const Matrix z = pair_with_cosine(0.8);
  const auto loss = protection_loss(z, ad::constant(z), make_masks({"a", "a"}, {1, 1}), weights());
  EXPECT_NEAR(loss.disc.scalar(), 0.0, 1e-15);
}

TEST(Discriminability, ImpostorTermIsSquaredSimilarity) {
  const auto masks = make_masks({"a", "b"}, {1, 1});
  EXPECT_NEAR(protection_loss(pair_with_cosine(0.9), ad::constant(pair_with_cosine(0.0)), masks, weights()).disc.scalar(),
              0.0, 1e-15);
  EXPECT_NEAR(protection_loss(pair_with_cosine(0.9), ad::constant(pair_with_cosine(0.5)), masks, weights()).disc.scalar(),
              0.25, 1e-12);
}

TEST(Contrastive, GenuineAtOneIsZero) {
  const Matrix zt = pair_with_cosine(1.0);
  EXPECT_NEAR(protection_loss(zt, ad::constant(zt), make_masks({"a", "a"}, {1, 1}), weights()).contr.scalar(), 0.0,
              1e-15);
}

TEST(Contrastive, ImpostorHingeArithmetic) {
  const auto w = weights();
  const auto masks = make_masks({"a", "b"}, {1, 1});
  const Matrix z = pair_with_cosine(0.1);
  EXPECT_NEAR(protection_loss(z, ad::constant(pair_with_cosine(w.margin)), masks, w).contr.scalar(), 0.0, 1e-12);
  EXPECT_NEAR(protection_loss(z, ad::constant(pair_with_cosine(w.margin + 0.3)), masks, w).contr.scalar(), 0.3, 1e-12);
}

TEST(Unlinkability, PairwiseExamples) {
  const Matrix id = pair_with_cosine(1.0);
  EXPECT_NEAR(loss_unlinkability(id.row(0).transpose(), id.row(1).transpose()), 1.0, 1e-12);
  const Matrix orth = pair_with_cosine(0.0);
  EXPECT_NEAR(loss_unlinkability(orth.row(0).transpose(), orth.row(1).transpose()), 0.0, 1e-15);
  const Matrix neg = pair_with_cosine(-0.4);
  EXPECT_NEAR(loss_unlinkability(neg.row(0).transpose(), neg.row(1).transpose()), 0.4, 1e-12);
}

TEST(KeyDiversity, PairwiseExamples) {
  const auto k1 = KeyMaterial::from_seed(1);
  const auto k2 = KeyMaterial::from_seed(2);
  const Matrix m = pair_with_cosine(0.7);
  EXPECT_EQ(loss_key_diversity(m.row(0).transpose(), m.row(1).transpose(), k1, k1), 0.0);
  EXPECT_NEAR(loss_key_diversity(m.row(0).transpose(), m.row(1).transpose(), k1, k2), 0.7, 1e-12);
  const Matrix orth = pair_with_cosine(0.0);
  EXPECT_NEAR(loss_key_diversity(orth.row(0).transpose(), orth.row(1).transpose(), k1, k2), 0.0, 1e-15);
}

TEST(TotalLoss, ZeroComponentsGiveZero) {
  const Matrix z = pair_with_cosine(1.0);
  const auto loss = protection_loss(z, ad::constant(z), make_masks({"a", "a"}, {1, 1}), weights());
  EXPECT_NEAR(loss.total.scalar(), 0.0, 1e-15);
}

TEST(TotalLoss, ZeroWeightsDropUnlinkTerms) {
  SplitMix64 rng(3);
  Matrix z(6, 5);
  Matrix zt(6, 5);
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    z.data()[i] = rng.normal();
    zt.data()[i] = rng.normal();
  }
  z.rowwise().normalize();
  const auto masks = make_masks({"a", "a", "b", "b", "a", "b"}, {1, 2, 1, 2, 1, 1});
  ProtectLossWeights w;
  w.lambda_u = 0.0;
  w.lambda_d = 0.0;
  const auto loss = protection_loss(z, ad::constant(zt), masks, w);
  EXPECT_NEAR(loss.total.scalar(), loss.disc.scalar() + loss.contr.scalar(), 1e-14);
  const auto full = protection_loss(z, ad::constant(zt), masks, weights());
  EXPECT_GT(full.unlink.scalar(), 0.0);
  EXPECT_NEAR(full.total.scalar(),
              full.disc.scalar() + full.contr.scalar() + 0.5 * full.unlink.scalar() + 0.25 * full.diverse.scalar(), 1e-14);
}

TEST(TotalLoss, EmptyMasksAreFiniteAndReported) {
  const Matrix z = Matrix::Identity(1, 3);
  const auto loss = protection_loss(z, ad::constant(z), make_masks({"a"}, {1}), weights());
  EXPECT_EQ(loss.total.scalar(), 0.0);
  EXPECT_EQ(loss.empty_masks.size(), 4u);
  const auto partial = protection_loss(pair_with_cosine(0.3), ad::constant(pair_with_cosine(0.2)),
                                       make_masks({"a", "b"}, {1, 2}), weights());
  EXPECT_TRUE(std::isfinite(partial.total.scalar()));
  EXPECT_EQ(partial.empty_masks, (std::vector<std::string>{"gen", "imp", "diff"}));
}

/// Smallest distance of any |.| or hinge argument in the loss from its kink.
double loss_kink_margin(const Matrix& zt, const PairMasks& m, double margin) {
  const Matrix n = zt.rowwise().normalized();
  const Matrix s = n * n.transpose();
  double out = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      if (i == j) continue;
      if (m.diff(i, j) > 0.0) out = std::min(out, std::abs(s(i, j)));
      if (m.imp(i, j) + m.diff(i, j) + m.mis(i, j) > 0.0) out = std::min(out, std::abs(s(i, j) - margin));
    }
  }
  return out;
}

TEST(TotalLoss, GradientMatchesFiniteDifferences) {
  SplitMix64 rng(21);
  int checked = 0;
  while (checked < 20) {
    PhiConfig pc{.d = 5, .hidden = 6, .seed = rng.next()};
    PhiNetwork phi = make_phi(pc);
    const auto schedule = NoiseSchedule::linear(1 + static_cast<int>(rng.below(4)), 0.01, 0.2);
    ProtectBatch batch;
    batch.z.resize(6, pc.d);
    for (Eigen::Index i = 0; i < batch.z.size(); ++i) batch.z.data()[i] = rng.normal();
    batch.z.rowwise().normalize();
    const std::vector<KeyMaterial> keys{KeyMaterial::from_seed(rng.next()), KeyMaterial::from_seed(rng.next())};
    batch.subjects = {"a", "a", "b", "b", "a", "b"};
    batch.keys = {keys[0], keys[1], keys[0], keys[1], keys[0], keys[0]};
    const ProtectLossWeights w;
    const auto masks = make_masks(batch.subjects, {keys[0].key_id(), keys[1].key_id(), keys[0].key_id(),
                                                   keys[1].key_id(), keys[0].key_id(), keys[0].key_id()});
    const Matrix zt = diffuse_rows(batch.z, batch.keys, schedule, phi);
    // The derivative is undefined at a kink; such draws are replaced.
    if (loss_kink_margin(zt, masks, w.margin) < 1e-4) continue;
    std::vector<Matrix> params;
    for (const auto& p : phi.params) params.push_back(p.value());
    const double err = ad::gradient_error(
        [&](const std::vector<ad::Tensor>& leaves) {
          PhiNetwork probe = phi;
          probe.params = leaves;
          return protect_batch_loss(probe, batch, schedule, w).total;
        },
        params);
    EXPECT_LT(err, 1e-4) << "config " << checked;
    ++checked;
  }
}

TEST(Batches, SharedKeysPopulateEveryMaskClass) {
  std::vector<EmbeddedScan> scans;
  SplitMix64 rng(4);
  for (int s = 0; s < 5; ++s) {
    for (int k = 0; k < 3; ++k) scans.push_back({Vector::Unit(4, static_cast<Eigen::Index>(k)), "s" + std::to_string(s)});
  }
  ProtectTrainConfig cfg;
  cfg.subjects_per_batch = 4;
  cfg.keys_per_batch = 2;
  const auto b = sample_protect_batch(scans, cfg, rng);
  EXPECT_EQ(b.z.rows(), cfg.subjects_per_batch * cfg.scans_per_subject * cfg.keys_per_batch);
  std::vector<std::uint64_t> ids;
  for (const auto& k : b.keys) ids.push_back(k.key_id());
  const auto m = make_masks(b.subjects, ids);
  EXPECT_GT(m.gen.sum(), 0.0);
  EXPECT_GT(m.imp.sum(), 0.0);
  EXPECT_GT(m.diff.sum(), 0.0);
  EXPECT_GT(m.mis.sum(), 0.0);
}

/// Toy embeddings: subject centres on the sphere plus small per-scan jitter.
std::vector<EmbeddedScan> toy_scans(int subjects, int scans, Eigen::Index d, std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<EmbeddedScan> out;
  for (int s = 0; s < subjects; ++s) {
    Vector centre(d);
    for (Eigen::Index i = 0; i < d; ++i) centre(i) = rng.normal();
    centre.normalize();
    for (int k = 0; k < scans; ++k) {
      Vector z = centre;
      for (Eigen::Index i = 0; i < d; ++i) z(i) += 0.03 * rng.normal();
      out.push_back({z.normalized(), "s" + std::to_string(seed) + "_" + std::to_string(s)});
    }
  }
  return out;
}

/// Mean |cos| between same-subject templates under two different keys.
double mean_unlinkability(const PhiNetwork& phi, const std::vector<EmbeddedScan>& scans, const NoiseSchedule& schedule) {
  double total = 0.0;
  for (std::size_t i = 0; i < scans.size(); ++i) {
    const auto k1 = KeyMaterial::from_seed(derive_seed(50, scans[i].subject));
    const auto k2 = KeyMaterial::from_seed(derive_seed(51, scans[i].subject));
    total += std::abs(cosine_similarity(diffuse(scans[i].z, k1, schedule, phi).z_t, diffuse(scans[i].z, k2, schedule, phi).z_t));
  }
  return total / static_cast<double>(scans.size());
}

TEST(TrainProtect, ToyCorpusLowersValidationLinkability) {
  const auto train = toy_scans(4, 4, 64, 1);
  const auto val = toy_scans(4, 4, 64, 2);
  PhiNetwork phi = make_phi({});
  const auto schedule = NoiseSchedule::linear(50);
  const double before = mean_unlinkability(phi, val, schedule);
  ProtectTrainConfig cfg;
  cfg.epochs = 200;
  cfg.subjects_per_batch = 4;
  cfg.keys_per_batch = 4;
  cfg.batches_per_epoch = 1;
  const auto history = train_protect(phi, train, schedule, cfg);
  ASSERT_EQ(history.total.size(), 200u);
  EXPECT_LT(mean_unlinkability(phi, val, schedule), before);
}

/// Mean total loss over fixed held-out batches.
double held_out_loss(const PhiNetwork& phi, const std::vector<EmbeddedScan>& scans, const NoiseSchedule& schedule,
                     const ProtectTrainConfig& cfg) {
  SplitMix64 rng(60);
  double total = 0.0;
  for (int i = 0; i < 8; ++i) total += protect_batch_loss(phi, sample_protect_batch(scans, cfg, rng), schedule, cfg.weights).total.scalar();
  return total / 8.0;
}

TEST(TrainProtect, ToyCorpusLowersHeldOutLoss) {
  const auto train = toy_scans(4, 4, 64, 1);
  const auto val = toy_scans(4, 4, 64, 2);
  PhiNetwork phi = make_phi({});
  const auto schedule = NoiseSchedule::linear(50);
  ProtectTrainConfig cfg;
  cfg.epochs = 100;
  cfg.subjects_per_batch = 4;
  cfg.keys_per_batch = 2;
  cfg.batches_per_epoch = 1;
  const double before = held_out_loss(phi, val, schedule, cfg);
  const auto history = train_protect(phi, train, schedule, cfg);
  ASSERT_EQ(history.total.size(), 100u);
  auto window = [&](std::size_t from) {
    double sum = 0.0;
    for (std::size_t i = from; i < from + 20; ++i) sum += history.total[i];
    return sum / 20.0;
  };
  EXPECT_LT(window(80), window(0));
  EXPECT_LT(held_out_loss(phi, val, schedule, cfg), before);
}

TEST(TrainProtect, ZeroEpochsKeepsInitialisation) {
  const auto train = toy_scans(2, 2, 8, 3);
  PhiNetwork phi = make_phi({.d = 8, .hidden = 8});
  const PhiNetwork init = make_phi({.d = 8, .hidden = 8});
  ProtectTrainConfig cfg;
  cfg.epochs = 0;
  const auto schedule = NoiseSchedule::linear(10);
  EXPECT_TRUE(train_protect(phi, train, schedule, cfg).total.empty());
  for (std::size_t i = 0; i < phi.params.size(); ++i) EXPECT_EQ(phi.params[i].value(), init.params[i].value());
  const auto t = diffuse(train[0].z, KeyMaterial::from_seed(1), schedule, phi);
  EXPECT_TRUE(t.z_t.allFinite());
}

TEST(TrainProtect, SeededRunsAreIdentical) {
  const auto train = toy_scans(3, 2, 8, 4);
  ProtectTrainConfig cfg;
  cfg.epochs = 5;
  const auto schedule = NoiseSchedule::linear(10);
  PhiNetwork a = make_phi({.d = 8, .hidden = 8});
  PhiNetwork b = make_phi({.d = 8, .hidden = 8});
  train_protect(a, train, schedule, cfg);
  train_protect(b, train, schedule, cfg);
  for (std::size_t i = 0; i < a.params.size(); ++i) EXPECT_EQ(a.params[i].value(), b.params[i].value());
  EXPECT_NE(a.params[4].value(), make_phi({.d = 8, .hidden = 8}).params[4].value());
}

TEST(TrainProtect, NeedsTwoSubjects) {
  PhiNetwork phi = make_phi({.d = 8, .hidden = 8});
  EXPECT_THROW(train_protect(phi, toy_scans(1, 3, 8, 5), NoiseSchedule::linear(5), {}), PreconditionError);
}

TEST(TrainProtect, ConfigJsonRoundTrip) {
  ProtectTrainConfig cfg;
  cfg.epochs = 17;
  cfg.weights.lambda_u = 0.9;
  nlohmann::json j = cfg;
  const auto back = j.get<ProtectTrainConfig>();
  EXPECT_EQ(back.epochs, 17);
  EXPECT_EQ(back.weights.lambda_u, 0.9);
  EXPECT_EQ(back.keys_per_batch, cfg.keys_per_batch);
}

}  // namespace
}  // namespace gftgcn
