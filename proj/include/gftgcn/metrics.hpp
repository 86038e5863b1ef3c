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

// Verification metrics: EER, best-F1 threshold, ROC/PR curves, distance
// histograms, key-conditioned correlation, histogram entropy and MI, and the
// closed-form entropy/accuracy trade-off.

#pragma once

#include "gftgcn/common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <vector>

namespace gftgcn {

struct ScoreSet {
  std::vector<double> genuine;
  std::vector<double> impostor;
};

inline void validate_scores(const ScoreSet& s) {
  if (s.genuine.empty() || s.impostor.empty()) throw PreconditionError("score set needs genuine and impostor scores");
  for (const auto* list : {&s.genuine, &s.impostor}) {
    for (double v : *list) {
      if (!std::isfinite(v) || v < -1.0 - 1e-9 || v > 1.0 + 1e-9) {
        throw PreconditionError("similarity score outside [-1, 1]: " + std::to_string(v));
      }
    }
  }
}

struct MatchResult {
  bool match = false;
  double similarity = 0.0;
};

/// Match iff S > theta (strict).
inline MatchResult match(const Vector& query, const Vector& enrolled, double threshold) {
  if (query.size() != enrolled.size()) throw ShapeError("match: template dimensions differ");
  const double s = cosine_similarity(query, enrolled);
  return {s > threshold, s};
}

namespace detail {

inline std::vector<double> sorted_union(const ScoreSet& s) {
  std::vector<double> all = s.genuine;
  all.insert(all.end(), s.impostor.begin(), s.impostor.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  return all;
}

/// Fraction of values strictly above each threshold; thresholds ascending.
inline std::vector<double> fraction_above(std::vector<double> values, const std::vector<double>& thresholds) {
  std::sort(values.begin(), values.end());
  std::vector<double> out;
  out.reserve(thresholds.size());
  for (double t : thresholds) {
    const auto above = values.end() - std::upper_bound(values.begin(), values.end(), t);
    out.push_back(static_cast<double>(above) / static_cast<double>(values.size()));
  }
  return out;
}

}  // namespace detail

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
};

/// FAR(t) = P(impostor > t), FRR(t) = P(genuine <= t), swept over the score
/// union preceded by -inf; linear interpolation at the crossing.
inline EerResult compute_eer(const ScoreSet& scores) {
  validate_scores(scores);
  std::vector<double> thresholds = detail::sorted_union(scores);
  thresholds.insert(thresholds.begin(), -std::numeric_limits<double>::infinity());
  const auto far = detail::fraction_above(scores.impostor, thresholds);
  auto frr = detail::fraction_above(scores.genuine, thresholds);
  for (auto& v : frr) v = 1.0 - v;
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (far[i] > frr[i]) continue;
    if (far[i] == frr[i] || i == 0) return {far[i], thresholds[i]};
    const double d0 = far[i - 1] - frr[i - 1];
    const double d1 = far[i] - frr[i];
    const double t = d0 / (d0 - d1);
    const double eer = far[i - 1] + t * (far[i] - far[i - 1]);
    const double lo = std::isfinite(thresholds[i - 1]) ? thresholds[i - 1] : thresholds[i];
    return {eer, lo + t * (thresholds[i] - lo)};
  }
  // FAR reaches 0 at the largest score, so the loop always returns.
  return {far.back(), thresholds.back()};
}

struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;
};

inline ConfusionCounts confusion_at(const ScoreSet& s, double threshold) {
  ConfusionCounts c;
  for (double g : s.genuine) (g > threshold ? c.tp : c.fn) += 1;
  for (double i : s.impostor) (i > threshold ? c.fp : c.tn) += 1;
  return c;
}

inline double f1_score(const ConfusionCounts& c) {
  const double denom = 2.0 * static_cast<double>(c.tp) + static_cast<double>(c.fp + c.fn);
  return denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(c.tp) / denom;
}

struct F1Result {
  double threshold = 0.0;
  double f1 = 0.0;
};

/// Genuine pairs are positives. Ties go to the largest threshold.
inline F1Result best_f1(const ScoreSet& scores) {
  validate_scores(scores);
  F1Result best{-std::numeric_limits<double>::infinity(), -1.0};
  for (double t : detail::sorted_union(scores)) {
    const double f1 = f1_score(confusion_at(scores, t));
    if (f1 >= best.f1) best = {t, f1};
  }
  return best;
}

struct CurvePoint {
  double x = 0.0;
  double y = 0.0;
  double threshold = 0.0;
};

/// (FPR, TPR) from the strictest threshold down to the most permissive.
inline std::vector<CurvePoint> roc_curve(const ScoreSet& scores) {
  validate_scores(scores);
  auto thresholds = detail::sorted_union(scores);
  std::reverse(thresholds.begin(), thresholds.end());
  std::vector<CurvePoint> out{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
  for (double t : thresholds) {
    auto c = confusion_at(scores, t);
    out.push_back({static_cast<double>(c.fp) / static_cast<double>(scores.impostor.size()),
                   static_cast<double>(c.tp) / static_cast<double>(scores.genuine.size()), t});
  }
  out.push_back({1.0, 1.0, -std::numeric_limits<double>::infinity()});
  return out;
}

/// (recall, precision) at every threshold with at least one accepted pair.
inline std::vector<CurvePoint> pr_curve(const ScoreSet& scores) {
  validate_scores(scores);
  auto thresholds = detail::sorted_union(scores);
  thresholds.insert(thresholds.begin(), -std::numeric_limits<double>::infinity());
  std::vector<CurvePoint> out;
  for (double t : thresholds) {
    auto c = confusion_at(scores, t);
    if (c.tp + c.fp == 0) continue;
    out.push_back({static_cast<double>(c.tp) / static_cast<double>(scores.genuine.size()),
                   static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp), t});
  }
  return out;
}

struct Histogram {
  double lo = 0.0;
  double hi = 2.0;
  std::vector<std::size_t> counts;
};

inline Histogram histogram(const std::vector<double>& values, double lo, double hi, int bins) {
  if (bins < 1 || !(hi > lo)) throw PreconditionError("histogram needs bins >= 1 and hi > lo");
  Histogram h{lo, hi, std::vector<std::size_t>(static_cast<std::size_t>(bins), 0)};
  for (double v : values) {
    auto b = static_cast<long>(std::floor((v - lo) / (hi - lo) * bins));
    b = std::clamp(b, 0L, static_cast<long>(bins) - 1);
    ++h.counts[static_cast<std::size_t>(b)];
  }
  return h;
}

struct DistanceDistributions {
  Histogram intra;
  Histogram inter;
  double intra_mean = 0.0;
  double inter_mean = 0.0;
  double gap = 0.0;
};

/// Cosine distance 1 - S, 50 bins over [0, 2].
inline DistanceDistributions distance_distributions(const ScoreSet& scores) {
  validate_scores(scores);
  std::vector<double> intra;
  std::vector<double> inter;
  for (double s : scores.genuine) intra.push_back(1.0 - s);
  for (double s : scores.impostor) inter.push_back(1.0 - s);
  DistanceDistributions d;
  d.intra = histogram(intra, 0.0, 2.0, 50);
  d.inter = histogram(inter, 0.0, 2.0, 50);
  for (double v : intra) d.intra_mean += v / static_cast<double>(intra.size());
  for (double v : inter) d.inter_mean += v / static_cast<double>(inter.size());
  d.gap = d.inter_mean - d.intra_mean;
  return d;
}

/// Pearson correlation across coordinates of two templates.
inline double pearson(const Vector& a, const Vector& b) {
  if (a.size() != b.size() || a.size() < 2) throw ShapeError("pearson: need equal lengths >= 2");
  const Vector ca = a.array() - a.mean();
  const Vector cb = b.array() - b.mean();
  const double denom = std::sqrt(ca.squaredNorm() * cb.squaredNorm());
  if (denom == 0.0) throw NumericError("pearson: constant template");
  return ca.dot(cb) / denom;
}

struct TemplateSample {
  Vector z;
  std::string subject;
  std::uint64_t key_id = 0;
};

struct CorrelationCell {
  double mean = 0.0;
  double mean_abs = 0.0;
  double mean_cos_abs = 0.0;
  std::size_t count = 0;
};

/// Cells in order: same subject/same key, same subject/different key,
/// different subject/same key, different subject/different key. Unordered
/// pairs of distinct samples only.
struct KeyCorrelation {
  CorrelationCell same_subject_same_key;
  CorrelationCell same_subject_diff_key;
  CorrelationCell diff_subject_same_key;
  CorrelationCell diff_subject_diff_key;
};

inline KeyCorrelation key_correlation_matrix(const std::vector<TemplateSample>& samples) {
  KeyCorrelation out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (std::size_t j = i + 1; j < samples.size(); ++j) {
      const bool same_subject = samples[i].subject == samples[j].subject;
      const bool same_key = samples[i].key_id == samples[j].key_id;
      CorrelationCell& cell = same_subject ? (same_key ? out.same_subject_same_key : out.same_subject_diff_key)
                                           : (same_key ? out.diff_subject_same_key : out.diff_subject_diff_key);
      const double r = pearson(samples[i].z, samples[j].z);
      cell.mean += r;
      cell.mean_abs += std::abs(r);
      cell.mean_cos_abs += std::abs(cosine_similarity(samples[i].z, samples[j].z));
      ++cell.count;
    }
  }
  for (auto* cell : {&out.same_subject_same_key, &out.same_subject_diff_key, &out.diff_subject_same_key,
                     &out.diff_subject_diff_key}) {
    if (cell->count == 0) continue;
    const auto n = static_cast<double>(cell->count);
    cell->mean /= n;
    cell->mean_abs /= n;
    cell->mean_cos_abs /= n;
  }
  return out;
}

struct EntropyReport {
  double h_z = 0.0;
  double h_zt = 0.0;
  double mi = 0.0;
  double info_loss = 0.0;
  double info_preservation = 0.0;
  int bins = 32;
  std::string estimator = "per-dimension fixed-bin histogram, bits";
};

namespace detail {

inline std::vector<int> bin_column(const Matrix& m, Eigen::Index col, int bins) {
  const double lo = m.col(col).minCoeff();
  const double hi = m.col(col).maxCoeff();
  std::vector<int> out(static_cast<std::size_t>(m.rows()), 0);
  if (!(hi > lo)) return out;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto b = static_cast<int>(std::floor((m(r, col) - lo) / (hi - lo) * bins));
    out[static_cast<std::size_t>(r)] = std::clamp(b, 0, bins - 1);
  }
  return out;
}

inline double entropy_bits(const std::vector<double>& counts, double total) {
  double h = 0.0;
  for (double c : counts) {
    if (c > 0.0) h -= (c / total) * std::log2(c / total);
  }
  return h;
}

}  // namespace detail

/// Rows are samples. Bins span each dimension's observed range.
inline EntropyReport entropy_mi_report(const Matrix& z, const Matrix& zt, int bins = 32) {
  if (z.rows() != zt.rows() || z.cols() != zt.cols()) throw ShapeError("entropy report: Z and Z_T shapes differ");
  if (z.rows() == 0 || z.cols() == 0) throw PreconditionError("entropy report: empty sample set");
  if (z.rows() < bins) {
    warn("entropy report: " + std::to_string(z.rows()) + " samples for " + std::to_string(bins) +
         " bins; widening bins to the sample count");
    bins = static_cast<int>(z.rows());
  }
  EntropyReport r;
  r.bins = bins;
  const auto total = static_cast<double>(z.rows());
  const auto ub = static_cast<std::size_t>(bins);
  for (Eigen::Index c = 0; c < z.cols(); ++c) {
    const auto bz = detail::bin_column(z, c, bins);
    const auto bt = detail::bin_column(zt, c, bins);
    std::vector<double> pz(ub, 0.0);
    std::vector<double> pt(ub, 0.0);
    std::vector<double> joint(ub * ub, 0.0);
    for (std::size_t i = 0; i < bz.size(); ++i) {
      pz[static_cast<std::size_t>(bz[i])] += 1.0;
      pt[static_cast<std::size_t>(bt[i])] += 1.0;
      joint[static_cast<std::size_t>(bz[i]) * ub + static_cast<std::size_t>(bt[i])] += 1.0;
    }
    const double hz = detail::entropy_bits(pz, total);
    const double ht = detail::entropy_bits(pt, total);
    const double hj = detail::entropy_bits(joint, total);
    r.h_z += hz;
    r.h_zt += ht;
    r.mi += hz + ht - hj;
  }
  const auto dims = static_cast<double>(z.cols());
  r.h_z /= dims;
  r.h_zt /= dims;
  r.mi /= dims;
  r.info_loss = r.h_z - r.mi;
  r.info_preservation = r.h_z > 0.0 ? r.mi / r.h_z : 0.0;
  return r;
}

struct TradeoffParams {
  double c = 0.05;
  double big_c = 1.0;
  double a = 0.2;
  double alpha = 0.1;
  double n = 10000.0;
};

struct TradeoffPoint {
  int k = 0;
  int t = 0;
  double delta_h = 0.0;
  double delta_eer = 0.0;
};

/// dH = K/2 ln(1 + cT) + C ln(N/K);  dEER = A exp(-alpha K / (1 + cT)).
inline TradeoffPoint tradeoff_model(int k, int t, const TradeoffParams& p) {
  if (k <= 0 || t < 0 || p.n <= 0.0) throw PreconditionError("trade-off model needs K > 0, T >= 0, N > 0");
  const double noise = 1.0 + p.c * t;
  return {k, t, 0.5 * k * std::log(noise) + p.big_c * std::log(p.n / k), p.a * std::exp(-p.alpha * k / noise)};
}

inline std::vector<TradeoffPoint> tradeoff_grid(const std::vector<int>& ks, const std::vector<int>& ts,
                                                const TradeoffParams& p) {
  std::vector<TradeoffPoint> out;
  for (int k : ks)
    for (int t : ts) out.push_back(tradeoff_model(k, t, p));
  return out;
}

struct EvalReport {
  EerResult eer;
  F1Result f1;
  std::vector<CurvePoint> roc;
  std::vector<CurvePoint> pr;
  DistanceDistributions distances;
  std::optional<KeyCorrelation> correlation;
  std::optional<EntropyReport> entropy;
  std::size_t genuine_count = 0;
  std::size_t impostor_count = 0;
};

inline EvalReport evaluate_scores(const ScoreSet& scores) {
  EvalReport r;
  r.eer = compute_eer(scores);
  r.f1 = best_f1(scores);
  r.roc = roc_curve(scores);
  r.pr = pr_curve(scores);
  r.distances = distance_distributions(scores);
  r.genuine_count = scores.genuine.size();
  r.impostor_count = scores.impostor.size();
  return r;
}

inline nlohmann::json curve_json(const std::vector<CurvePoint>& pts) {
  auto arr = nlohmann::json::array();
  for (const auto& p : pts) {
    nlohmann::json t = std::isfinite(p.threshold) ? nlohmann::json(p.threshold) : nlohmann::json(nullptr);
    arr.push_back({p.x, p.y, t});
  }
  return arr;
}

inline nlohmann::json cell_json(const CorrelationCell& c) {
  return {{"mean_corr", c.mean}, {"mean_abs_corr", c.mean_abs}, {"mean_abs_cos", c.mean_cos_abs}, {"pairs", c.count}};
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["eer"] = r.eer.eer;
  j["eer_threshold"] = r.eer.threshold;
  j["best_threshold"] = r.f1.threshold;
  j["f1_at_best_threshold"] = r.f1.f1;
  j["genuine_pairs"] = r.genuine_count;
  j["impostor_pairs"] = r.impostor_count;
  j["roc"] = curve_json(r.roc);
  j["pr"] = curve_json(r.pr);
  j["distances"] = {{"intra_mean", r.distances.intra_mean},
                    {"inter_mean", r.distances.inter_mean},
                    {"gap", r.distances.gap},
                    {"intra_hist", r.distances.intra.counts},
                    {"inter_hist", r.distances.inter.counts},
                    {"range", {r.distances.intra.lo, r.distances.intra.hi}}};
  if (r.correlation) {
    j["key_correlation"] = {{"same_subject_same_key", cell_json(r.correlation->same_subject_same_key)},
                            {"same_subject_diff_key", cell_json(r.correlation->same_subject_diff_key)},
                            {"diff_subject_same_key", cell_json(r.correlation->diff_subject_same_key)},
                            {"diff_subject_diff_key", cell_json(r.correlation->diff_subject_diff_key)}};
  }
  if (r.entropy) {
    j["entropy"] = {{"h_z", r.entropy->h_z},
                    {"h_zt", r.entropy->h_zt},
                    {"mi", r.entropy->mi},
                    {"info_loss", r.entropy->info_loss},
                    {"info_preservation", r.entropy->info_preservation},
                    {"bins", r.entropy->bins},
                    {"estimator", r.entropy->estimator}};
  }
  return j;
}

inline void write_curve_csv(std::ostream& out, const std::vector<CurvePoint>& pts, const char* x, const char* y) {
  out << x << ',' << y << ",threshold\n";
  for (const auto& p : pts) out << p.x << ',' << p.y << ',' << p.threshold << '\n';
}

inline void write_histogram_csv(std::ostream& out, const DistanceDistributions& d) {
  out << "bin_lo,bin_hi,intra,inter\n";
  const double width = (d.intra.hi - d.intra.lo) / static_cast<double>(d.intra.counts.size());
  for (std::size_t b = 0; b < d.intra.counts.size(); ++b) {
    out << d.intra.lo + width * static_cast<double>(b) << ',' << d.intra.lo + width * static_cast<double>(b + 1)
        << ',' << d.intra.counts[b] << ',' << d.inter.counts[b] << '\n';
  }
}

}  // namespace gftgcn
