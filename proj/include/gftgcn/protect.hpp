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

// Composite protection objective and the training loop for phi.

#pragma once

#include "gftgcn/diffusion.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <set>

namespace gftgcn {

/// Partition of ordered pairs (i != j) by subject and key equality.
struct PairMasks {
  Matrix gen;   // same subject, same key
  Matrix imp;   // different subject, same key
  Matrix diff;  // same subject, different key
  Matrix mis;   // different subject, different key
};

inline PairMasks make_masks(const std::vector<std::string>& subjects, const std::vector<std::uint64_t>& key_ids) {
  if (subjects.size() != key_ids.size()) throw ShapeError("make_masks: subject and key lists differ in length");
  const auto n = static_cast<Eigen::Index>(subjects.size());
  PairMasks m{Matrix::Zero(n, n), Matrix::Zero(n, n), Matrix::Zero(n, n), Matrix::Zero(n, n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const bool subject = subjects[static_cast<std::size_t>(i)] == subjects[static_cast<std::size_t>(j)];
      const bool key = key_ids[static_cast<std::size_t>(i)] == key_ids[static_cast<std::size_t>(j)];
      (subject ? (key ? m.gen : m.diff) : (key ? m.imp : m.mis))(i, j) = 1.0;
    }
  }
  return m;
}

struct ProtectLossWeights {
  double lambda_imp = 1.0;
  double lambda_diff = 0.5;
  double beta_imp = 1.0;
  double beta_other = 0.5;
  double lambda_u = 0.5;
  double lambda_d = 0.25;
  double margin = 0.5;
};

inline void to_json(nlohmann::json& j, const ProtectLossWeights& v) {
  j = nlohmann::json{{"lambda_imp", v.lambda_imp},
           {"lambda_diff", v.lambda_diff},
           {"beta_imp", v.beta_imp},
           {"beta_other", v.beta_other},
           {"lambda_u", v.lambda_u},
           {"lambda_d", v.lambda_d},
           {"margin", v.margin}};
}

inline void from_json(const nlohmann::json& j, ProtectLossWeights& v) {
  json_field(j, "lambda_imp", v.lambda_imp);
  json_field(j, "lambda_diff", v.lambda_diff);
  json_field(j, "beta_imp", v.beta_imp);
  json_field(j, "beta_other", v.beta_other);
  json_field(j, "lambda_u", v.lambda_u);
  json_field(j, "lambda_d", v.lambda_d);
  json_field(j, "margin", v.margin);
}

struct ProtectLoss {
  ad::Tensor disc;
  ad::Tensor contr;
  ad::Tensor unlink;
  ad::Tensor diverse;
  ad::Tensor total;
  std::vector<std::string> empty_masks;
};

/// Composite protection loss over a batch. z holds the original embeddings, zt the protected rows.
inline ProtectLoss protection_loss(const Matrix& z, const ad::Tensor& zt, const PairMasks& masks,
                                   const ProtectLossWeights& w) {
  ProtectLoss out;
  for (auto [name, m] : {std::pair{"gen", &masks.gen}, {"imp", &masks.imp}, {"diff", &masks.diff}, {"mis", &masks.mis}}) {
    if (m->sum() == 0.0) out.empty_masks.emplace_back(name);
  }
  const ad::Tensor zc = ad::constant(z);
  const ad::Tensor s_orig = ad::cosine_matrix(zc, zc);
  const ad::Tensor s = ad::cosine_matrix(zt, zt);
  const ad::Tensor s_sq = ad::square(s);
  const ad::Tensor s_abs = ad::abs(s);
  const ad::Tensor hinge = ad::relu(ad::add_scalar(s, -w.margin));

  out.disc = ad::add(ad::add(ad::masked_mean(ad::square(ad::sub(s_orig, s)), masks.gen),
                             ad::scale(ad::masked_mean(s_sq, masks.imp), w.lambda_imp)),
                     ad::scale(ad::masked_mean(s_sq, masks.diff), w.lambda_diff));
  out.contr = ad::add(ad::add(ad::masked_mean(ad::add_scalar(ad::scale(s, -1.0), 1.0), masks.gen),
                              ad::scale(ad::masked_mean(hinge, masks.imp), w.beta_imp)),
                      ad::scale(ad::masked_mean(hinge, masks.diff + masks.mis), w.beta_other));
  out.unlink = ad::masked_mean(s_abs, masks.diff);
  // Diversity averages over all same-subject pairs, contributing 0 where keys match.
  const double same_subject = masks.gen.sum() + masks.diff.sum();
  out.diverse = same_subject == 0.0 ? ad::constant(Matrix::Zero(1, 1))
                                    : ad::scale(ad::masked_mean(s_abs, masks.diff), masks.diff.sum() / same_subject);
  out.total = ad::add(ad::add(out.disc, out.contr),
                      ad::add(ad::scale(out.unlink, w.lambda_u), ad::scale(out.diverse, w.lambda_d)));
  return out;
}

/// Unlinkability penalty for one pair: |cos|.
inline double loss_unlinkability(const Vector& zt1, const Vector& zt2) { return std::abs(cosine_similarity(zt1, zt2)); }

/// Key-diversity penalty for one pair: |cos| under different keys, else 0.
inline double loss_key_diversity(const Vector& zt1, const Vector& zt2, const KeyMaterial& k1, const KeyMaterial& k2) {
  return k1 == k2 ? 0.0 : std::abs(cosine_similarity(zt1, zt2));
}

struct ProtectTrainConfig {
  int epochs = 200;
  int batches_per_epoch = 8;
  int subjects_per_batch = 8;
  int scans_per_subject = 2;
  int keys_per_batch = 6;
  double learning_rate = 3e-4;
  bool cosine_decay = true;  // lr follows half a cosine from learning_rate to 0
  std::uint64_t seed = 3;
  ProtectLossWeights weights;
};

inline void to_json(nlohmann::json& j, const ProtectTrainConfig& v) {
  j = nlohmann::json{{"epochs", v.epochs},
           {"batches_per_epoch", v.batches_per_epoch},
           {"subjects_per_batch", v.subjects_per_batch},
           {"scans_per_subject", v.scans_per_subject},
           {"keys_per_batch", v.keys_per_batch},
           {"learning_rate", v.learning_rate},
           {"cosine_decay", v.cosine_decay},
           {"seed", v.seed},
           {"weights", v.weights}};
}

inline void from_json(const nlohmann::json& j, ProtectTrainConfig& v) {
  json_field(j, "epochs", v.epochs);
  json_field(j, "batches_per_epoch", v.batches_per_epoch);
  json_field(j, "subjects_per_batch", v.subjects_per_batch);
  json_field(j, "scans_per_subject", v.scans_per_subject);
  json_field(j, "keys_per_batch", v.keys_per_batch);
  json_field(j, "learning_rate", v.learning_rate);
  json_field(j, "cosine_decay", v.cosine_decay);
  json_field(j, "seed", v.seed);
  json_field(j, "weights", v.weights);
}

struct EmbeddedScan {
  Vector z;
  std::string subject;
};

struct ProtectBatch {
  Matrix z;
  std::vector<KeyMaterial> keys;
  std::vector<std::string> subjects;
};

/// Draws subjects and scans, then pairs every drawn scan with every batch key.
/// Keys are shared across the batch's subjects so that all four mask classes
/// are populated.
inline ProtectBatch sample_protect_batch(const std::vector<EmbeddedScan>& scans, const ProtectTrainConfig& cfg,
                                         SplitMix64& rng) {
  std::map<std::string, std::vector<std::size_t>> by_subject;
  for (std::size_t i = 0; i < scans.size(); ++i) by_subject[scans[i].subject].push_back(i);
  std::vector<std::string> subjects;
  for (const auto& [s, _] : by_subject) subjects.push_back(s);
  seeded_shuffle(subjects, rng);
  subjects.resize(std::min<std::size_t>(subjects.size(), static_cast<std::size_t>(cfg.subjects_per_batch)));
  std::vector<KeyMaterial> keys;
  for (int k = 0; k < cfg.keys_per_batch; ++k) keys.push_back(KeyMaterial::from_seed(rng.next()));
  std::vector<std::size_t> picked;
  for (const auto& s : subjects) {
    auto idx = by_subject[s];
    seeded_shuffle(idx, rng);
    idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(cfg.scans_per_subject)));
    picked.insert(picked.end(), idx.begin(), idx.end());
  }
  ProtectBatch b;
  b.z.resize(static_cast<Eigen::Index>(picked.size() * keys.size()), scans.front().z.size());
  Eigen::Index row = 0;
  for (const auto& key : keys) {
    for (auto i : picked) {
      b.z.row(row++) = scans[i].z.transpose();
      b.keys.push_back(key);
      b.subjects.push_back(scans[i].subject);
    }
  }
  return b;
}

inline ProtectLoss protect_batch_loss(const PhiNetwork& phi, const ProtectBatch& batch, const NoiseSchedule& schedule,
                                      const ProtectLossWeights& w) {
  std::vector<std::uint64_t> ids;
  for (const auto& k : batch.keys) ids.push_back(k.key_id());
  auto streams = key_streams(batch.keys, schedule.steps(), phi.config.d);
  ad::Tensor zt = diffuse_batch(ad::constant(batch.z), streams, schedule, phi_function(phi));
  return protection_loss(batch.z, zt, make_masks(batch.subjects, ids), w);
}

struct ProtectHistory {
  std::vector<double> total;
  std::vector<double> disc;
  std::vector<double> contr;
  std::vector<double> unlink;
};

/// Optimises phi in place. The GCN is not involved: embeddings are inputs.
inline ProtectHistory train_protect(PhiNetwork& phi, const std::vector<EmbeddedScan>& scans,
                                    const NoiseSchedule& schedule, const ProtectTrainConfig& cfg) {
  std::set<std::string> distinct;
  for (const auto& s : scans) distinct.insert(s.subject);
  if (distinct.size() < 2) throw PreconditionError("train_protect needs at least two subjects");
  ad::Adam adam(phi.params, {.learning_rate = cfg.learning_rate});
  SplitMix64 rng(derive_seed(cfg.seed, "protect-batches"));
  ProtectHistory history;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    double disc = 0.0;
    double contr = 0.0;
    double unlink = 0.0;
    if (cfg.cosine_decay) {
      adam.config().learning_rate =
          cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / static_cast<double>(cfg.epochs)));
    }
    for (int b = 0; b < cfg.batches_per_epoch; ++b) {
      ProtectBatch batch = sample_protect_batch(scans, cfg, rng);
      ProtectLoss loss = protect_batch_loss(phi, batch, schedule, cfg.weights);
      const double value = loss.total.scalar();
      if (!std::isfinite(value)) {
        throw NumericError("protection training diverged at epoch " + std::to_string(epoch));
      }
      adam.zero_grad();
      loss.total.backward();
      adam.step();
      total += value;
      disc += loss.disc.scalar();
      contr += loss.contr.scalar();
      unlink += loss.unlink.scalar();
    }
    const double n = std::max(1, cfg.batches_per_epoch);
    history.total.push_back(total / n);
    history.disc.push_back(disc / n);
    history.contr.push_back(contr / n);
    history.unlink.push_back(unlink / n);
  }
  adam.zero_grad();
  return history;
}

}  // namespace gftgcn
