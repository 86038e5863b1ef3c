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

// Key-conditioned forward diffusion:
//   Z_t = sqrt(1 - b_t) Z_{t-1} + sqrt(b_t) eps_t(k) + (1 - b_t) phi(Z_{t-1}, k)

#pragma once

#include "gftgcn/autodiff.hpp"
#include "gftgcn/binary_io.hpp"
#include "gftgcn/gcn.hpp"
#include "gftgcn/keys.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <functional>

namespace gftgcn {

struct NoiseSchedule {
  std::vector<double> beta;

  int steps() const { return static_cast<int>(beta.size()); }

  static NoiseSchedule linear(int t, double beta_first = 1e-4, double beta_last = 0.02) {
    if (t < 1) throw PreconditionError("schedule needs T >= 1");
    if (!(beta_first > 0.0 && beta_last < 1.0 && beta_first <= beta_last)) {
      throw PreconditionError("schedule endpoints must satisfy 0 < first <= last < 1");
    }
    NoiseSchedule s;
    for (int i = 0; i < t; ++i) {
      const double frac = t == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(t - 1);
      s.beta.push_back(beta_first + frac * (beta_last - beta_first));
    }
    return s;
  }

  /// Custom schedules may use 0 (the identity limit) but not 1.
  void validate() const {
    if (beta.empty()) throw PreconditionError("empty noise schedule");
    for (double b : beta) {
      if (!(b >= 0.0 && b < 1.0)) throw PreconditionError("schedule value outside [0, 1): " + std::to_string(b));
    }
  }
};

struct PhiConfig {
  int d = 64;
  int hidden = 128;
  std::uint64_t seed = 2;
  double input_gain = 1.0;   // scales the initial weights reading Z
  double output_gain = 1.0;  // scales the initial output layer
};

inline void to_json(nlohmann::json& j, const PhiConfig& v) {
  j = nlohmann::json{{"d", v.d},
           {"hidden", v.hidden},
           {"seed", v.seed},
           {"input_gain", v.input_gain},
           {"output_gain", v.output_gain}};
}

inline void from_json(const nlohmann::json& j, PhiConfig& v) {
  json_field(j, "d", v.d);
  json_field(j, "hidden", v.hidden);
  json_field(j, "seed", v.seed);
  json_field(j, "input_gain", v.input_gain);
  json_field(j, "output_gain", v.output_gain);
}

/// (d + 32) -> hidden (tanh) -> hidden (tanh) -> d (linear).
struct PhiNetwork {
  PhiConfig config;
  std::vector<ad::Tensor> params;  // W1, b1, W2, b2, W3, b3
  std::uint64_t config_hash = 0;
};

inline PhiNetwork make_phi(const PhiConfig& config) {
  if (config.d < 1 || config.hidden < 1) throw PreconditionError("phi dimensions must be positive");
  PhiNetwork phi;
  phi.config = config;
  SplitMix64 rng(derive_seed(config.seed, "phi-init"));
  const int in = config.d + kKeyEmbeddingDim;
  Matrix w1 = xavier_uniform(in, config.hidden, rng);
  w1.topRows(config.d) *= config.input_gain;
  phi.params.push_back(ad::parameter(std::move(w1)));
  phi.params.push_back(ad::parameter(Matrix::Zero(1, config.hidden)));
  phi.params.push_back(ad::parameter(xavier_uniform(config.hidden, config.hidden, rng)));
  phi.params.push_back(ad::parameter(Matrix::Zero(1, config.hidden)));
  phi.params.push_back(ad::parameter(xavier_uniform(config.hidden, config.d, rng) * config.output_gain));
  phi.params.push_back(ad::parameter(Matrix::Zero(1, config.d)));
  return phi;
}

/// Rows of z are states, rows of key_embedding the matching key embeddings.
inline ad::Tensor phi_forward(const PhiNetwork& phi, const ad::Tensor& z, const ad::Tensor& key_embedding) {
  const auto& p = phi.params;
  ad::Tensor h = ad::tanh(ad::add_row(ad::matmul(ad::concat_cols(z, key_embedding), p[0]), p[1]));
  h = ad::tanh(ad::add_row(ad::matmul(h, p[2]), p[3]));
  return ad::add_row(ad::matmul(h, p[4]), p[5]);
}

/// Signature of the transformation used by the update; the default is phi.
using PhiFunction = std::function<ad::Tensor(const ad::Tensor& z, const ad::Tensor& key_embedding)>;

inline PhiFunction phi_function(const PhiNetwork& phi) {
  return [&phi](const ad::Tensor& z, const ad::Tensor& k) { return phi_forward(phi, z, k); };
}

/// Key material prepared once per batch: embeddings and every step's noise.
struct KeyStreams {
  ad::Tensor embedding;            // B x 32
  std::vector<Matrix> noise;       // T matrices of B x d
};

inline KeyStreams key_streams(const std::vector<KeyMaterial>& keys, int steps, int d) {
  KeyStreams s;
  Matrix emb(static_cast<Eigen::Index>(keys.size()), kKeyEmbeddingDim);
  for (std::size_t i = 0; i < keys.size(); ++i) emb.row(static_cast<Eigen::Index>(i)) = key_embed(keys[i]).transpose();
  s.embedding = ad::constant(std::move(emb));
  for (int t = 1; t <= steps; ++t) {
    Matrix eps(static_cast<Eigen::Index>(keys.size()), d);
    for (std::size_t i = 0; i < keys.size(); ++i) eps.row(static_cast<Eigen::Index>(i)) = keyed_noise(keys[i], t, d).transpose();
    s.noise.push_back(std::move(eps));
  }
  return s;
}

/// Batched, differentiable forward process. z0 rows are starting states.
inline ad::Tensor diffuse_batch(const ad::Tensor& z0, const KeyStreams& streams, const NoiseSchedule& schedule,
                                const PhiFunction& phi) {
  schedule.validate();
  if (static_cast<int>(streams.noise.size()) != schedule.steps()) throw ShapeError("key streams do not match schedule");
  ad::Tensor z = z0;
  for (int t = 0; t < schedule.steps(); ++t) {
    const double b = schedule.beta[static_cast<std::size_t>(t)];
    ad::Tensor next = ad::add(ad::scale(z, std::sqrt(1.0 - b)), ad::constant(std::sqrt(b) * streams.noise[static_cast<std::size_t>(t)]));
    z = ad::add(next, ad::scale(phi(z, streams.embedding), 1.0 - b));
  }
  return z;
}

struct TemplateParams {
  int k = 10;
  int t = 50;
  int d = 64;
  bool operator==(const TemplateParams&) const = default;
};

struct ProtectedTemplate {
  Vector z_t;
  TemplateParams params;
  std::uint64_t key_id = 0;
  std::uint64_t config_hash = 0;
};

/// Diffuses every row of z (unit-norm embeddings) under the matching key.
inline Matrix diffuse_rows(const Matrix& z, const std::vector<KeyMaterial>& keys, const NoiseSchedule& schedule,
                           const PhiNetwork& phi) {
  if (static_cast<std::size_t>(z.rows()) != keys.size()) throw ShapeError("diffuse: one key per row required");
  if (z.cols() != phi.config.d) throw ShapeError("diffuse: embedding dimension differs from phi");
  Matrix out = diffuse_batch(ad::constant(z), key_streams(keys, schedule.steps(), phi.config.d), schedule,
                             [&phi](const ad::Tensor& s, const ad::Tensor& k) {
                               // Values only: strip parameters from the graph.
                               const auto& p = phi.params;
                               Matrix in(s.rows(), s.cols() + k.cols());
                               in << s.value(), k.value();
                               Matrix h = ((in * p[0].value()).rowwise() + p[1].value().row(0)).array().tanh();
                               h = ((h * p[2].value()).rowwise() + p[3].value().row(0)).array().tanh();
                               return ad::constant((h * p[4].value()).rowwise() + p[5].value().row(0));
                             })
                   .value();
  if (!out.allFinite()) throw NumericError("diffusion produced a non-finite state");
  return out;
}

inline ProtectedTemplate diffuse(const Vector& z, const KeyMaterial& key, const NoiseSchedule& schedule,
                                 const PhiNetwork& phi, int spectral_k = 10) {
  if (std::abs(z.norm() - 1.0) > 1e-6) throw PreconditionError("diffuse expects a unit-norm embedding");
  Matrix out = diffuse_rows(z.transpose(), {key}, schedule, phi);
  return {out.row(0).transpose(), {spectral_k, schedule.steps(), phi.config.d}, key.key_id(), phi.config_hash};
}

inline constexpr int kTemplateVersion = 1;

inline nlohmann::json to_json(const ProtectedTemplate& t) {
  std::vector<double> z(t.z_t.data(), t.z_t.data() + t.z_t.size());
  return {{"version", kTemplateVersion}, {"K", t.params.k},           {"T", t.params.t},
          {"d", t.params.d},             {"key_id", to_hex(t.key_id)}, {"z_T", z},
          {"config_hash", to_hex(t.config_hash)}};
}

inline ProtectedTemplate template_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != kTemplateVersion) throw ParseError("unsupported template version");
    ProtectedTemplate t;
    t.params = {j.at("K").get<int>(), j.at("T").get<int>(), j.at("d").get<int>()};
    t.key_id = parse_hex_u64(j.at("key_id").get<std::string>());
    auto z = j.at("z_T").get<std::vector<double>>();
    if (static_cast<int>(z.size()) != t.params.d) throw ParseError("template z_T length differs from d");
    t.z_t = Eigen::Map<Vector>(z.data(), static_cast<Eigen::Index>(z.size()));
    if (!t.z_t.allFinite()) throw ParseError("template contains non-finite values");
    if (j.contains("config_hash")) t.config_hash = parse_hex_u64(j.at("config_hash").get<std::string>());
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed template: ") + e.what());
  }
}

inline constexpr std::string_view kPhiMagic = "PHIW";
inline constexpr std::uint32_t kPhiVersion = 1;

inline void write_phi(std::ostream& out, const PhiNetwork& phi) {
  binio::write_magic(out, kPhiMagic);
  binio::write_u32(out, kPhiVersion);
  binio::write_u32(out, static_cast<std::uint32_t>(phi.config.d));
  binio::write_u32(out, static_cast<std::uint32_t>(kKeyEmbeddingDim));
  binio::write_u32(out, static_cast<std::uint32_t>(phi.config.hidden));
  binio::write_u64(out, phi.config_hash);
  for (const auto& p : phi.params) binio::write_block(out, p.value());
}

inline PhiNetwork read_phi(std::istream& in) {
  binio::expect_magic(in, kPhiMagic);
  if (binio::read_u32(in) != kPhiVersion) throw ParseError("unsupported phi checkpoint version");
  PhiConfig c;
  c.d = static_cast<int>(binio::read_u32(in));
  if (binio::read_u32(in) != static_cast<std::uint32_t>(kKeyEmbeddingDim)) throw ParseError("phi key width mismatch");
  c.hidden = static_cast<int>(binio::read_u32(in));
  PhiNetwork phi = make_phi(c);
  phi.config_hash = binio::read_u64(in);
  for (auto& p : phi.params) p.mutable_value() = binio::read_block(in, p.rows(), p.cols());
  return phi;
}

inline void save_phi(const std::filesystem::path& path, const PhiNetwork& phi) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write_phi(out, phi);
}

inline PhiNetwork load_phi(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  return read_phi(in);
}

}  // namespace gftgcn
