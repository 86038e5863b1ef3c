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

// Pre-image attack: maximise cos(Z_T, oracle(Z')) over the l2 ball by
// projected Adam ascent, with seeded restarts.

#pragma once

#include "gftgcn/diffusion.hpp"

#include <optional>

namespace gftgcn {

struct AttackConfig {
  int iterations = 500;
  double step = 0.01;
  double radius = 1.0;
  int restarts = 4;
  std::vector<double> thresholds{0.5, 0.75};
  bool use_key = true;
  std::uint64_t seed = 11;
};

inline void to_json(nlohmann::json& j, const AttackConfig& v) {
  j = nlohmann::json{{"iterations", v.iterations}, {"step", v.step},       {"radius", v.radius},
                     {"restarts", v.restarts},     {"thresholds", v.thresholds}, {"use_key", v.use_key},
                     {"seed", v.seed}};
}

inline void from_json(const nlohmann::json& j, AttackConfig& v) {
  json_field(j, "iterations", v.iterations);
  json_field(j, "step", v.step);
  json_field(j, "radius", v.radius);
  json_field(j, "restarts", v.restarts);
  json_field(j, "thresholds", v.thresholds);
  json_field(j, "use_key", v.use_key);
  json_field(j, "seed", v.seed);
}

inline void validate(const AttackConfig& c) {
  if (c.iterations < 0) throw PreconditionError("attack iterations must be non-negative");
  if (!(c.radius > 0.0)) throw PreconditionError("attack radius must be positive");
  if (c.restarts < 1) throw PreconditionError("attack needs at least one restart");
  if (!(c.step > 0.0)) throw PreconditionError("attack step must be positive");
  for (double t : c.thresholds) {
    if (!(t >= -1.0 && t <= 1.0)) throw PreconditionError("attack threshold outside [-1, 1]");
  }
}

/// Differentiable map from candidate rows Z' to protected rows.
using AttackOracle = std::function<ad::Tensor(const ad::Tensor& candidates)>;

inline AttackOracle identity_oracle() {
  return [](const ad::Tensor& z) { return z; };
}

/// The protection pipeline as the attacker evaluates it. Row r of the
/// candidate batch is diffused under row_keys[r]; phi and schedule must
/// outlive the oracle.
inline AttackOracle protection_oracle(const PhiNetwork& phi, const NoiseSchedule& schedule,
                                      std::vector<KeyMaterial> row_keys) {
  auto streams = std::make_shared<KeyStreams>(key_streams(row_keys, schedule.steps(), phi.config.d));
  return [&phi, &schedule, streams](const ad::Tensor& z) {
    if (z.rows() != streams->embedding.rows()) throw ShapeError("attack oracle: batch differs from its key list");
    return diffuse_batch(z, *streams, schedule, phi_function(phi));
  };
}

struct AttackResult {
  Vector z_prime;
  double best_similarity = -1.0;
  std::vector<double> restart_best;
};

inline Matrix random_in_ball(Eigen::Index rows, Eigen::Index d, double radius, SplitMix64& rng) {
  Matrix z(rows, d);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < d; ++c) z(r, c) = rng.normal();
    const double scale = radius * std::pow(rng.uniform_open_low(), 1.0 / static_cast<double>(d));
    z.row(r) *= scale / z.row(r).norm();
  }
  return z;
}

/// Attacks several targets at once. The oracle receives targets.size() *
/// restarts rows, target-major: row t * restarts + r. Restarts are
/// independent because Adam updates are elementwise.
inline std::vector<AttackResult> csa_attack_batch(const std::vector<Vector>& targets, const AttackOracle& oracle,
                                                  const AttackConfig& cfg, std::uint64_t first_index = 0) {
  validate(cfg);
  if (targets.empty()) return {};
  const Eigen::Index d = targets.front().size();
  const Eigen::Index restarts = cfg.restarts;
  const Eigen::Index rows = static_cast<Eigen::Index>(targets.size()) * restarts;
  Matrix init(rows, d);
  Matrix target_rows(rows, d);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const Vector& target = targets[t];
    const double n = target.norm();
    if (target.size() != d) throw ShapeError("attack targets differ in dimension");
    if (!(n > 0.0) || !target.allFinite()) throw PreconditionError("attack target must be finite and non-zero");
    SplitMix64 rng(derive_seed(cfg.seed, "attack-init", first_index + t));
    const auto base = static_cast<Eigen::Index>(t) * restarts;
    init.middleRows(base, restarts) = random_in_ball(restarts, d, cfg.radius, rng);
    for (Eigen::Index r = 0; r < restarts; ++r) target_rows.row(base + r) = target.transpose() / n;
  }
  ad::Tensor z = ad::parameter(init);
  ad::Adam adam({z}, {.learning_rate = cfg.step});
  const ad::Tensor goal = ad::constant(target_rows);

  std::vector<double> best(static_cast<std::size_t>(rows), -std::numeric_limits<double>::infinity());
  Matrix best_z = init;
  std::vector<bool> alive(static_cast<std::size_t>(rows), true);
  for (int it = 0; it <= cfg.iterations; ++it) {
    ad::Tensor sims = ad::row_dot(ad::row_normalize(oracle(z)), goal);
    for (Eigen::Index r = 0; r < rows; ++r) {
      const auto i = static_cast<std::size_t>(r);
      if (!alive[i]) continue;
      const double s = sims.value()(r, 0);
      if (!std::isfinite(s)) {
        warn("attack restart " + std::to_string(r) + " aborted on a non-finite objective");
        alive[i] = false;
        continue;
      }
      if (s > best[i]) {
        best[i] = s;
        best_z.row(r) = z.value().row(r);
      }
    }
    if (it == cfg.iterations) break;
    adam.zero_grad();
    ad::scale(ad::sum(sims), -1.0).backward();
    adam.step();
    Matrix& v = z.mutable_value();
    for (Eigen::Index r = 0; r < rows; ++r) {
      if (!alive[static_cast<std::size_t>(r)] || !v.row(r).allFinite()) {
        v.row(r) = init.row(r);
        continue;
      }
      const double n = v.row(r).norm();
      if (n > cfg.radius) v.row(r) *= cfg.radius / n;
    }
  }
  std::vector<AttackResult> out(targets.size());
  for (std::size_t t = 0; t < targets.size(); ++t) {
    auto& res = out[t];
    const std::size_t base = t * static_cast<std::size_t>(restarts);
    res.restart_best.assign(best.begin() + static_cast<std::ptrdiff_t>(base),
                            best.begin() + static_cast<std::ptrdiff_t>(base + static_cast<std::size_t>(restarts)));
    std::size_t arg = 0;
    for (std::size_t i = 1; i < res.restart_best.size(); ++i) {
      if (res.restart_best[i] > res.restart_best[arg]) arg = i;
    }
    if (!std::isfinite(res.restart_best[arg])) throw NumericError("every attack restart diverged");
    res.best_similarity = res.restart_best[arg];
    res.z_prime = best_z.row(static_cast<Eigen::Index>(base + arg)).transpose();
  }
  return out;
}

/// Single-target form; the oracle receives cfg.restarts rows.
inline AttackResult csa_attack(const Vector& target, const AttackOracle& oracle, const AttackConfig& cfg,
                               std::uint64_t target_index = 0) {
  return csa_attack_batch({target}, oracle, cfg, target_index).front();
}

struct SarPoint {
  double threshold = 0.0;
  double sar = 0.0;
};

struct AttackReport {
  std::vector<double> best_similarity;
  std::vector<SarPoint> sar;
  double sar_50 = 0.0;
  double sar_75 = 0.0;
  std::optional<double> threshold_best;
  std::optional<double> sar_best;
};

inline double success_rate(const std::vector<double>& best, double threshold) {
  if (best.empty()) return 0.0;
  std::size_t hits = 0;
  for (double s : best) hits += s > threshold ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(best.size());
}

inline AttackReport sar_report(const std::vector<double>& best, const std::vector<double>& thresholds = {0.5, 0.75},
                               std::optional<double> threshold_best = std::nullopt) {
  AttackReport r;
  r.best_similarity = best;
  std::vector<double> ts = thresholds;
  if (threshold_best) ts.push_back(*threshold_best);
  std::sort(ts.begin(), ts.end());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  for (double t : ts) r.sar.push_back({t, success_rate(best, t)});
  r.sar_50 = success_rate(best, 0.5);
  r.sar_75 = success_rate(best, 0.75);
  r.threshold_best = threshold_best;
  if (threshold_best) r.sar_best = success_rate(best, *threshold_best);
  return r;
}

inline void to_json(nlohmann::json& j, const AttackReport& r) {
  j = nlohmann::json{{"targets", r.best_similarity.size()},
                     {"best_similarity", r.best_similarity},
                     {"sar_50", r.sar_50},
                     {"sar_75", r.sar_75}};
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& p : r.sar) curve.push_back({{"threshold", p.threshold}, {"sar", p.sar}});
  j["sar"] = curve;
  if (r.threshold_best) j["threshold_best"] = *r.threshold_best;
  if (r.sar_best) j["sar_best"] = *r.sar_best;
}

}  // namespace gftgcn
