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

// Graph convolution over truncated spectral coefficients. The K rows of F_low
// are nodes of a path graph ordered by frequency.

#pragma once

#include "gftgcn/autodiff.hpp"
#include "gftgcn/binary_io.hpp"
#include "gftgcn/common.hpp"

#include "gftgcn/json_util.hpp"

#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

namespace gftgcn {

struct GcnConfig {
  int k = 10;
  int n = 10;
  int layers = 2;
  int hidden = 32;
  int d = 64;
  double margin = 0.5;
  double learning_rate = 1e-3;
  int batch_size = 32;
  int epochs = 10;
  std::uint64_t seed = 1;
};

inline void to_json(nlohmann::json& j, const GcnConfig& v) {
  j = nlohmann::json{{"k", v.k},
           {"n", v.n},
           {"layers", v.layers},
           {"hidden", v.hidden},
           {"d", v.d},
           {"margin", v.margin},
           {"learning_rate", v.learning_rate},
           {"batch_size", v.batch_size},
           {"epochs", v.epochs},
           {"seed", v.seed}};
}

inline void from_json(const nlohmann::json& j, GcnConfig& v) {
  json_field(j, "k", v.k);
  json_field(j, "n", v.n);
  json_field(j, "layers", v.layers);
  json_field(j, "hidden", v.hidden);
  json_field(j, "d", v.d);
  json_field(j, "margin", v.margin);
  json_field(j, "learning_rate", v.learning_rate);
  json_field(j, "batch_size", v.batch_size);
  json_field(j, "epochs", v.epochs);
  json_field(j, "seed", v.seed);
}

/// Renormalised propagation matrix D^-1/2 (A + I) D^-1/2 of the path graph on k nodes.
inline Matrix path_propagation(int k) {
  if (k < 1) throw PreconditionError("propagation matrix needs k >= 1");
  Matrix a = Matrix::Identity(k, k);
  for (int i = 0; i + 1 < k; ++i) a(i, i + 1) = a(i + 1, i) = 1.0;
  Vector dinv = a.rowwise().sum().cwiseSqrt().cwiseInverse();
  return dinv.asDiagonal() * a * dinv.asDiagonal();
}

inline Matrix xavier_uniform(Eigen::Index fan_in, Eigen::Index fan_out, SplitMix64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix w(fan_in, fan_out);
  for (Eigen::Index j = 0; j < fan_out; ++j)
    for (Eigen::Index i = 0; i < fan_in; ++i) w(i, j) = (2.0 * rng.uniform() - 1.0) * limit;
  return w;
}

struct GcnModel {
  GcnConfig config;
  Matrix propagation;
  std::vector<ad::Tensor> weights;  // W^(1..L) then W_out
  std::uint64_t config_hash = 0;

  std::vector<ad::Tensor> parameters() const { return weights; }
};

inline GcnModel make_gcn(const GcnConfig& config) {
  if (config.k < 1 || config.n < 1 || config.layers < 1 || config.hidden < 1 || config.d < 1) {
    throw PreconditionError("GCN dimensions must be positive");
  }
  GcnModel model;
  model.config = config;
  model.propagation = path_propagation(config.k);
  SplitMix64 rng(derive_seed(config.seed, "gcn-init"));
  for (int l = 0; l < config.layers; ++l) {
    const int fan_in = l == 0 ? config.n : config.hidden;
    model.weights.push_back(ad::parameter(xavier_uniform(fan_in, config.hidden, rng)));
  }
  model.weights.push_back(ad::parameter(xavier_uniform(config.hidden, config.d, rng)));
  return model;
}

/// Batched forward pass. Returns a B x d matrix of unit-norm rows.
inline ad::Tensor gcn_forward(const GcnModel& model, const std::vector<const Matrix*>& features) {
  const int k = model.config.k;
  const int n = model.config.n;
  if (features.empty()) throw PreconditionError("gcn_forward: empty batch");
  Matrix stacked(static_cast<Eigen::Index>(features.size()) * k, n);
  for (std::size_t b = 0; b < features.size(); ++b) {
    const Matrix& f = *features[b];
    if (f.rows() != k || f.cols() != n) {
      throw ShapeError("gcn_forward: F_low is " + std::to_string(f.rows()) + "x" + std::to_string(f.cols()) +
                       ", model expects " + std::to_string(k) + "x" + std::to_string(n));
    }
    stacked.middleRows(static_cast<Eigen::Index>(b) * k, k) = f;
  }
  ad::Tensor h = ad::constant(std::move(stacked));
  for (int l = 0; l < model.config.layers; ++l) {
    h = ad::relu(ad::block_left_multiply(model.propagation, ad::matmul(h, model.weights[static_cast<std::size_t>(l)])));
  }
  ad::Tensor pooled = ad::block_mean_rows(h, k);
  return ad::row_normalize(ad::matmul(pooled, model.weights.back()));
}

inline Vector gcn_embed(const GcnModel& model, const Matrix& f_low) {
  ad::Tensor z = gcn_forward(model, {&f_low});
  return z.value().row(0).transpose();
}

/// Contrastive loss with S the cosine similarity of unit rows: y(1-S) + (1-y) max(0, m - (1-S)).
inline ad::Tensor contrastive_loss(const ad::Tensor& za, const ad::Tensor& zb, const Vector& labels, double margin) {
  if (za.rows() == 0) throw PreconditionError("contrastive loss over an empty batch");
  if (labels.size() != za.rows()) throw ShapeError("contrastive loss: label count differs from batch");
  ad::Tensor s = ad::row_dot(za, zb);
  Matrix y = labels;
  Matrix not_y = (1.0 - labels.array()).matrix();
  ad::Tensor match = ad::hadamard(ad::constant(y), ad::add_scalar(ad::scale(s, -1.0), 1.0));
  ad::Tensor hinge = ad::hadamard(ad::constant(not_y), ad::relu(ad::add_scalar(s, margin - 1.0)));
  return ad::mean(ad::add(match, hinge));
}

struct LabeledPair {
  std::size_t a = 0;
  std::size_t b = 0;
  int label = 0;
};

inline double gcn_pair_loss(const GcnModel& model, const std::vector<Matrix>& features,
                            const std::vector<LabeledPair>& pairs, ad::Tensor* out = nullptr) {
  std::vector<const Matrix*> batch;
  Vector labels(static_cast<Eigen::Index>(pairs.size()));
  for (const auto& p : pairs) batch.push_back(&features.at(p.a));
  for (const auto& p : pairs) batch.push_back(&features.at(p.b));
  for (std::size_t i = 0; i < pairs.size(); ++i) labels(static_cast<Eigen::Index>(i)) = pairs[i].label;
  ad::Tensor z = gcn_forward(model, batch);
  std::vector<Eigen::Index> ia(pairs.size());
  std::vector<Eigen::Index> ib(pairs.size());
  std::iota(ia.begin(), ia.end(), 0);
  std::iota(ib.begin(), ib.end(), static_cast<Eigen::Index>(pairs.size()));
  ad::Tensor loss = contrastive_loss(ad::gather_rows(z, ia), ad::gather_rows(z, ib), labels, model.config.margin);
  if (out) *out = loss;
  return loss.scalar();
}

template <typename T>
void seeded_shuffle(std::vector<T>& items, SplitMix64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng.below(i)]);
}

/// Trains in place; returns the mean loss of every epoch.
inline std::vector<double> train_gcn(GcnModel& model, const std::vector<Matrix>& features,
                                     std::vector<LabeledPair> pairs) {
  if (pairs.empty()) throw PreconditionError("train_gcn: no training pairs");
  const auto& cfg = model.config;
  ad::Adam adam(model.parameters(), {.learning_rate = cfg.learning_rate});
  SplitMix64 rng(derive_seed(cfg.seed, "gcn-shuffle"));
  std::vector<double> history;
  const auto batch = static_cast<std::size_t>(std::max(1, cfg.batch_size));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    seeded_shuffle(pairs, rng);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0; start < pairs.size(); start += batch) {
      std::vector<LabeledPair> chunk(pairs.begin() + static_cast<std::ptrdiff_t>(start),
                                     pairs.begin() + static_cast<std::ptrdiff_t>(std::min(pairs.size(), start + batch)));
      ad::Tensor loss;
      const double value = gcn_pair_loss(model, features, chunk, &loss);
      if (!std::isfinite(value)) {
        throw NumericError("GCN training diverged at epoch " + std::to_string(epoch) + ": loss " + std::to_string(value));
      }
      adam.zero_grad();
      loss.backward();
      adam.step();
      total += value * static_cast<double>(chunk.size());
      count += chunk.size();
    }
    history.push_back(total / static_cast<double>(count));
  }
  adam.zero_grad();
  return history;
}

inline constexpr std::string_view kGcnMagic = "GCNW";
inline constexpr std::uint32_t kGcnVersion = 1;

inline void write_gcn(std::ostream& out, const GcnModel& model) {
  const auto& c = model.config;
  binio::write_magic(out, kGcnMagic);
  binio::write_u32(out, kGcnVersion);
  for (int v : {c.k, c.n, c.layers, c.hidden, c.d}) binio::write_u32(out, static_cast<std::uint32_t>(v));
  binio::write_u64(out, model.config_hash);
  for (const auto& w : model.weights) binio::write_block(out, w.value());
}

inline GcnModel read_gcn(std::istream& in) {
  binio::expect_magic(in, kGcnMagic);
  const auto version = binio::read_u32(in);
  if (version != kGcnVersion) throw ParseError("unsupported GCN checkpoint version " + std::to_string(version));
  GcnConfig c;
  c.k = static_cast<int>(binio::read_u32(in));
  c.n = static_cast<int>(binio::read_u32(in));
  c.layers = static_cast<int>(binio::read_u32(in));
  c.hidden = static_cast<int>(binio::read_u32(in));
  c.d = static_cast<int>(binio::read_u32(in));
  GcnModel model = make_gcn(c);
  model.config_hash = binio::read_u64(in);
  for (auto& w : model.weights) w.mutable_value() = binio::read_block(in, w.rows(), w.cols());
  return model;
}

inline void save_gcn(const std::filesystem::path& path, const GcnModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write_gcn(out, model);
}

inline GcnModel load_gcn(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  return read_gcn(in);
}

}  // namespace gftgcn
