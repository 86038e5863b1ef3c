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

// Deterministic synthetic identity corpus, subject-disjoint splits and
// balanced verification pairs.
//
// Every subject is an icosphere deformed radially by a low-frequency field
// (identity), and every scan adds a mid-frequency field (expression) plus
// Gaussian vertex jitter. The deformation bases are eigenvectors of the sphere
// graph's normalized Laplacian, so identity lives in the spectral band the
// truncated transform keeps.

#pragma once

#include "gftgcn/common.hpp"
#include "gftgcn/mesh.hpp"
#include "gftgcn/spectral.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

namespace gftgcn {

struct CorpusSpec {
  int subject_count = 20;
  int scans_per_subject = 8;
  int vertex_count = 642;
  std::uint64_t master_seed = 7;
  double identity_amplitude = 0.12;
  double expression_amplitude = 0.08;
  double noise_amplitude = 0.002;
};

inline void to_json(nlohmann::json& j, const CorpusSpec& s) {
  j = nlohmann::json{{"subject_count", s.subject_count},
                     {"scans_per_subject", s.scans_per_subject},
                     {"vertex_count", s.vertex_count},
                     {"master_seed", s.master_seed},
                     {"identity_amplitude", s.identity_amplitude},
                     {"expression_amplitude", s.expression_amplitude},
                     {"noise_amplitude", s.noise_amplitude}};
}

inline void from_json(const nlohmann::json& j, CorpusSpec& s) {
  s.subject_count = j.at("subject_count").get<int>();
  s.scans_per_subject = j.at("scans_per_subject").get<int>();
  s.vertex_count = j.at("vertex_count").get<int>();
  s.master_seed = j.at("master_seed").get<std::uint64_t>();
  s.identity_amplitude = j.at("identity_amplitude").get<double>();
  s.expression_amplitude = j.at("expression_amplitude").get<double>();
  s.noise_amplitude = j.at("noise_amplitude").get<double>();
}

inline constexpr int kIdentityModes = 8;     // eigenvectors 1..8
inline constexpr int kExpressionModes = 12;  // eigenvectors 9..20

/// Subdivision level for an icosphere with `vertex_count` vertices (10*4^s+2).
inline int icosphere_level(int vertex_count) {
  int count = 12;
  for (int level = 0; level <= 8; ++level) {
    if (count == vertex_count) return level;
    count = 4 * count - 6;  // V' = V + E and E = 3V - 6 on a closed triangulated sphere
  }
  throw PreconditionError("vertex_count " + std::to_string(vertex_count) +
                          " is not an icosphere size (12, 42, 162, 642, 2562, ...)");
}

/// Unit icosphere; faces are counter-clockwise seen from outside.
inline Mesh icosphere(int level) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  Mesh mesh;
  for (const auto& v : std::vector<Vec3>{{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                                         {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}}) {
    mesh.vertices.push_back(v.normalized());
  }
  mesh.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
                {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
                {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (int l = 0; l < level; ++l) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      const int idx = static_cast<int>(mesh.vertices.size());
      mesh.vertices.push_back(
          (mesh.vertices[static_cast<std::size_t>(a)] + mesh.vertices[static_cast<std::size_t>(b)]).normalized());
      midpoint.emplace(key, idx);
      return idx;
    };
    std::vector<Face> next;
    next.reserve(mesh.faces.size() * 4);
    for (const auto& f : mesh.faces) {
      const int a = mid(f[0], f[1]);
      const int b = mid(f[1], f[2]);
      const int c = mid(f[2], f[0]);
      next.push_back({f[0], a, c});
      next.push_back({f[1], b, a});
      next.push_back({f[2], c, b});
      next.push_back({a, b, c});
    }
    mesh.faces = std::move(next);
  }
  return mesh;
}

/// Rejects invalid specs; returns human-readable warnings for odd-but-legal ones.
inline std::vector<std::string> validate_corpus_spec(const CorpusSpec& spec) {
  if (spec.subject_count <= 0) throw PreconditionError("subject_count must be positive");
  if (spec.scans_per_subject <= 0) throw PreconditionError("scans_per_subject must be positive");
  if (spec.identity_amplitude < 0 || spec.expression_amplitude < 0 || spec.noise_amplitude < 0) {
    throw PreconditionError("amplitudes must be nonnegative");
  }
  const int level = icosphere_level(spec.vertex_count);
  if (level < 1) throw PreconditionError("vertex_count must be at least 42 to host 21 deformation modes");
  std::vector<std::string> warnings;
  const bool all_zero = spec.identity_amplitude == 0 && spec.expression_amplitude == 0 && spec.noise_amplitude == 0;
  if (!all_zero && !(spec.identity_amplitude > spec.expression_amplitude &&
                     spec.expression_amplitude > spec.noise_amplitude)) {
    warnings.emplace_back("amplitudes are not ordered identity > expression > noise");
  }
  return warnings;
}

inline std::string subject_label(int subject) { return std::to_string(subject); }
inline std::string scan_label(int scan) { return std::to_string(scan); }

/// subject_count x scans_per_subject meshes, subject-major, sharing one face list.
inline std::vector<Mesh> generate_corpus(const CorpusSpec& spec) {
  for (const auto& w : validate_corpus_spec(spec)) warn(w);
  const Mesh sphere = icosphere(icosphere_level(spec.vertex_count));
  const int modes = 1 + kIdentityModes + kExpressionModes;
  const SpectralBasis basis = smallest_eigenpairs(normalized_laplacian(build_graph(sphere)), modes);
  // Scale eigenvectors to unit RMS so amplitudes read as radial RMS displacement.
  const Matrix unit_rms = basis.eigenvectors * std::sqrt(static_cast<double>(spec.vertex_count));
  const double id_scale = spec.identity_amplitude / std::sqrt(static_cast<double>(kIdentityModes));
  const double ex_scale = spec.expression_amplitude / std::sqrt(static_cast<double>(kExpressionModes));

  std::vector<Mesh> corpus;
  corpus.reserve(static_cast<std::size_t>(spec.subject_count * spec.scans_per_subject));
  for (int s = 0; s < spec.subject_count; ++s) {
    SplitMix64 id_rng(derive_seed(spec.master_seed, "identity", static_cast<std::uint64_t>(s)));
    Vector identity = Vector::Zero(spec.vertex_count);
    for (int m = 0; m < kIdentityModes; ++m) identity += id_rng.normal() * unit_rms.col(1 + m);
    for (int c = 0; c < spec.scans_per_subject; ++c) {
      SplitMix64 scan_rng(
          derive_seed(spec.master_seed, "scan", static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(c)));
      Vector expression = Vector::Zero(spec.vertex_count);
      for (int m = 0; m < kExpressionModes; ++m) {
        expression += scan_rng.normal() * unit_rms.col(1 + kIdentityModes + m);
      }
      Mesh mesh;
      mesh.faces = sphere.faces;
      mesh.subject_id = subject_label(s);
      mesh.scan_id = scan_label(c);
      mesh.vertices.resize(sphere.vertices.size());
      for (std::size_t v = 0; v < sphere.vertices.size(); ++v) {
        const auto vi = static_cast<Eigen::Index>(v);
        const double radius =
            std::max(0.1, 1.0 + id_scale * identity(vi) + ex_scale * expression(vi));
        Vec3 p = radius * sphere.vertices[v];
        for (int axis = 0; axis < 3; ++axis) p(axis) += spec.noise_amplitude * scan_rng.normal();
        mesh.vertices[v] = p;
      }
      corpus.push_back(std::move(mesh));
    }
  }
  return corpus;
}

/// Writes `s<subject>_<scan>.obj` per scan and a manifest.json.
inline void write_corpus(const std::vector<Mesh>& corpus, const CorpusSpec& spec, const std::filesystem::path& dir,
                         const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  nlohmann::json scans = nlohmann::json::array();
  for (const auto& mesh : corpus) {
    const std::string name = "s" + mesh.subject_id + "_" + mesh.scan_id + ".obj";
    std::ofstream out(dir / name);
    if (!out) throw Error("cannot write " + (dir / name).string());
    write_obj(mesh, out);
    scans.push_back({{"file", name}, {"subject_id", mesh.subject_id}, {"scan_id", mesh.scan_id}});
  }
  nlohmann::json manifest = extra;
  manifest["corpus_spec"] = spec;
  manifest["scans"] = scans;
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

/// Reads a corpus directory written by write_corpus.
inline std::vector<Mesh> read_corpus(const std::filesystem::path& dir, nlohmann::json* manifest_out = nullptr) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ParseError("missing manifest.json in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(in);
  std::vector<Mesh> corpus;
  for (const auto& entry : manifest.at("scans")) {
    Mesh mesh = load_mesh(dir / entry.at("file").get<std::string>());
    mesh.subject_id = entry.at("subject_id").get<std::string>();
    mesh.scan_id = entry.at("scan_id").get<std::string>();
    corpus.push_back(std::move(mesh));
  }
  if (manifest_out != nullptr) *manifest_out = std::move(manifest);
  return corpus;
}

// ---------------------------------------------------------------------------

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

inline void to_json(nlohmann::json& j, const DatasetSplit& s) {
  j = nlohmann::json{{"train", s.train}, {"val", s.val}, {"test", s.test}};
}
inline void from_json(const nlohmann::json& j, DatasetSplit& s) {
  s.train = j.at("train").get<std::vector<std::string>>();
  s.val = j.at("val").get<std::vector<std::string>>();
  s.test = j.at("test").get<std::vector<std::string>>();
}

/// Seeded 70/15/15 split by subject; validation and test get floor(15%),
/// everything left over goes to train.
inline DatasetSplit split_subjects(std::vector<std::string> subjects, std::uint64_t seed) {
  std::sort(subjects.begin(), subjects.end());
  subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
  SplitMix64 rng(derive_seed(seed, "split"));
  for (std::size_t i = subjects.size(); i > 1; --i) std::swap(subjects[i - 1], subjects[rng.below(i)]);
  const std::size_t n = subjects.size();
  const std::size_t n_val = n * 15 / 100;
  const std::size_t n_test = n * 15 / 100;
  DatasetSplit split;
  split.val.assign(subjects.begin(), subjects.begin() + static_cast<long>(n_val));
  split.test.assign(subjects.begin() + static_cast<long>(n_val), subjects.begin() + static_cast<long>(n_val + n_test));
  split.train.assign(subjects.begin() + static_cast<long>(n_val + n_test), subjects.end());
  return split;
}

inline std::vector<std::string> subjects_of(const std::vector<Mesh>& corpus) {
  std::vector<std::string> ids;
  for (const auto& m : corpus) ids.push_back(m.subject_id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

/// A verification pair of corpus indices; label 1 = same subject.
struct ScanPair {
  std::size_t a = 0;
  std::size_t b = 0;
  int label = 0;

  bool operator==(const ScanPair&) const = default;
};

inline void to_json(nlohmann::json& j, const ScanPair& p) { j = nlohmann::json{p.a, p.b, p.label}; }
inline void from_json(const nlohmann::json& j, ScanPair& p) {
  p.a = j.at(0).get<std::size_t>();
  p.b = j.at(1).get<std::size_t>();
  p.label = j.at(2).get<int>();
}

/// Balanced pairs over `subject_ids`, given each scan's subject label.
/// Per subject: every ordered same-subject pair as a match, and the same number
/// of mismatches drawn round-robin over the other subjects of the split.
inline std::vector<ScanPair> make_pairs(const std::vector<std::string>& scan_subjects,
                                        const std::vector<std::string>& subject_ids, std::uint64_t seed) {
  std::vector<std::string> subjects = subject_ids;
  std::sort(subjects.begin(), subjects.end());
  subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
  if (subjects.size() < 2) throw PreconditionError("pair generation needs at least 2 subjects in the split");
  std::map<std::string, std::vector<std::size_t>> scans;
  for (const auto& s : subjects) scans[s];
  for (std::size_t i = 0; i < scan_subjects.size(); ++i) {
    auto it = scans.find(scan_subjects[i]);
    if (it != scans.end()) it->second.push_back(i);
  }
  for (const auto& [s, idx] : scans) {
    if (idx.empty()) throw PreconditionError("subject " + s + " has no scans in the corpus");
  }

  std::vector<ScanPair> pairs;
  for (std::size_t si = 0; si < subjects.size(); ++si) {
    const auto& own = scans[subjects[si]];
    std::size_t match_count = 0;
    for (auto a : own)
      for (auto b : own)
        if (a != b) {
          pairs.push_back({a, b, 1});
          ++match_count;
        }
    SplitMix64 rng(derive_seed(seed, "mismatch", si));
    const std::size_t others = subjects.size() - 1;
    const std::size_t offset = rng.below(others);
    for (std::size_t r = 0; r < match_count; ++r) {
      std::size_t oi = (offset + r) % others;
      if (oi >= si) ++oi;  // skip self
      const auto& other = scans[subjects[oi]];
      pairs.push_back({own[r % own.size()], other[rng.below(other.size())], 0});
    }
  }
  return pairs;
}

inline std::vector<ScanPair> make_pairs(const std::vector<Mesh>& corpus, const std::vector<std::string>& subject_ids,
                                        std::uint64_t seed) {
  std::vector<std::string> labels;
  labels.reserve(corpus.size());
  for (const auto& m : corpus) labels.push_back(m.subject_id);
  return make_pairs(labels, subject_ids, seed);
}

}  // namespace gftgcn
