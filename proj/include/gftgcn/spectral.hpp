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

// Graph construction over mesh faces, the normalized Laplacian, its smallest
// eigenpairs, and the graph Fourier transform with low-frequency truncation.

#pragma once

#include "gftgcn/binary_io.hpp"
#include "gftgcn/common.hpp"
#include "gftgcn/mesh.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <filesystem>
#include <fstream>
#include <optional>
#include <queue>
#include <thread>

namespace gftgcn {

using SparseMatrix = Eigen::SparseMatrix<double>;

/// Undirected 0/1 adjacency with per-vertex degrees.
struct MeshGraph {
  SparseMatrix adjacency;
  std::vector<int> degrees;

  int vertex_count() const { return static_cast<int>(degrees.size()); }
  std::size_t edge_count() const { return static_cast<std::size_t>(adjacency.nonZeros()) / 2; }
};

/// Ascending eigenvalues with matching orthonormal eigenvector columns.
struct SpectralBasis {
  Vector eigenvalues;
  Matrix eigenvectors;  // |V| x K

  int k() const { return static_cast<int>(eigenvalues.size()); }
  int vertex_count() const { return static_cast<int>(eigenvectors.rows()); }
};

inline bool is_connected(const SparseMatrix& adjacency) {
  const auto n = adjacency.rows();
  if (n == 0) return false;
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  std::queue<Eigen::Index> frontier;
  frontier.push(0);
  seen[0] = true;
  Eigen::Index visited = 1;
  while (!frontier.empty()) {
    auto v = frontier.front();
    frontier.pop();
    for (SparseMatrix::InnerIterator it(adjacency, v); it; ++it) {
      auto u = it.row();
      if (!seen[static_cast<std::size_t>(u)]) {
        seen[static_cast<std::size_t>(u)] = true;
        ++visited;
        frontier.push(u);
      }
    }
  }
  return visited == n;
}

/// Edge (i, j) exists iff i and j share a face. Rejects disconnected meshes.
inline MeshGraph build_graph(const Mesh& mesh) {
  validate_topology(mesh);
  const auto n = static_cast<Eigen::Index>(mesh.vertices.size());
  std::vector<Eigen::Triplet<double>> triplets;
  auto edges = mesh_edges(mesh);
  triplets.reserve(edges.size() * 2);
  std::vector<int> degrees(static_cast<std::size_t>(n), 0);
  for (auto [a, b] : edges) {
    triplets.emplace_back(a, b, 1.0);
    triplets.emplace_back(b, a, 1.0);
    ++degrees[static_cast<std::size_t>(a)];
    ++degrees[static_cast<std::size_t>(b)];
  }
  MeshGraph graph;
  graph.adjacency.resize(n, n);
  graph.adjacency.setFromTriplets(triplets.begin(), triplets.end());
  graph.degrees = std::move(degrees);
  if (!is_connected(graph.adjacency)) throw TopologyError("mesh graph is disconnected");
  return graph;
}

/// Graph from an explicit undirected edge list (no connectivity check).
inline MeshGraph make_graph(int vertex_count, const std::vector<std::pair<int, int>>& edges) {
  std::vector<Eigen::Triplet<double>> triplets;
  MeshGraph graph;
  graph.degrees.assign(static_cast<std::size_t>(vertex_count), 0);
  for (auto [a, b] : edges) {
    if (a == b || a < 0 || b < 0 || a >= vertex_count || b >= vertex_count) {
      throw TopologyError("invalid edge (" + std::to_string(a) + "," + std::to_string(b) + ")");
    }
    triplets.emplace_back(a, b, 1.0);
    triplets.emplace_back(b, a, 1.0);
    ++graph.degrees[static_cast<std::size_t>(a)];
    ++graph.degrees[static_cast<std::size_t>(b)];
  }
  graph.adjacency.resize(vertex_count, vertex_count);
  graph.adjacency.setFromTriplets(triplets.begin(), triplets.end());
  return graph;
}

/// L = I - D^{-1/2} A D^{-1/2}.
inline SparseMatrix normalized_laplacian(const MeshGraph& graph) {
  const auto n = graph.vertex_count();
  Vector inv_sqrt_deg(n);
  for (int i = 0; i < n; ++i) {
    if (graph.degrees[static_cast<std::size_t>(i)] <= 0) {
      throw PreconditionError("vertex " + std::to_string(i) + " has zero degree");
    }
    inv_sqrt_deg(i) = 1.0 / std::sqrt(static_cast<double>(graph.degrees[static_cast<std::size_t>(i)]));
  }
  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(static_cast<std::size_t>(graph.adjacency.nonZeros() + n));
  for (int i = 0; i < n; ++i) triplets.emplace_back(i, i, 1.0);
  for (int k = 0; k < graph.adjacency.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(graph.adjacency, k); it; ++it) {
      triplets.emplace_back(it.row(), it.col(), -it.value() * inv_sqrt_deg(it.row()) * inv_sqrt_deg(it.col()));
    }
  }
  SparseMatrix lap(n, n);
  lap.setFromTriplets(triplets.begin(), triplets.end());
  return lap;
}

/// Flips each column so its largest-magnitude entry is positive; ties go to
/// the lowest index.
inline void fix_eigenvector_signs(Matrix& vectors) {
  for (Eigen::Index c = 0; c < vectors.cols(); ++c) {
    const double max_abs = vectors.col(c).cwiseAbs().maxCoeff();
    const double tie_tol = 1e-12 * std::max(1.0, max_abs);
    Eigen::Index pick = 0;
    for (Eigen::Index r = 0; r < vectors.rows(); ++r) {
      if (std::abs(vectors(r, c)) >= max_abs - tie_tol) {
        pick = r;
        break;
      }
    }
    if (vectors(pick, c) < 0.0) vectors.col(c) *= -1.0;
  }
}

struct EigenOptions {
  int dense_limit = 2000;      // |V| at or below uses the dense solver
  double tolerance = 1e-8;     // Lanczos convergence tolerance on eigen-residuals
  int iteration_factor = 50;   // total Lanczos steps capped at factor * K
  double shift = -1e-4;        // shift-invert pole; must be below the spectrum
  std::uint64_t seed = 0x5EC7A1;
};

namespace detail {

/// Shift-invert Lanczos with full reorthogonalization and locking restarts.
/// Each run starts from a fresh random vector orthogonal to the locked set, so
/// additional copies of repeated eigenvalues are recovered by later runs.
inline std::pair<Vector, Matrix> lanczos_smallest(const SparseMatrix& lap, int k, const EigenOptions& opt) {
  const Eigen::Index n = lap.rows();
  SparseMatrix shifted = lap;
  for (Eigen::Index i = 0; i < n; ++i) shifted.coeffRef(i, i) -= opt.shift;
  Eigen::SimplicialLDLT<SparseMatrix> factor(shifted);
  if (factor.info() != Eigen::Success) throw ConvergenceError("shift-invert factorization failed");

  const long step_cap = static_cast<long>(opt.iteration_factor) * k;
  long steps_used = 0;
  SplitMix64 rng(opt.seed);
  std::vector<Vector> locked;
  std::vector<double> locked_lambda;

  auto orthogonalize = [&](Vector& w, const std::vector<Vector>& basis) {
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& q : basis) w -= q.dot(w) * q;
  };

  auto kth_smallest_locked = [&]() {
    std::vector<double> sorted = locked_lambda;
    std::sort(sorted.begin(), sorted.end());
    return sorted[static_cast<std::size_t>(k - 1)];
  };

  while (true) {
    const Eigen::Index free_dim = n - static_cast<Eigen::Index>(locked.size());
    if (free_dim <= 0) break;
    const bool verifying = static_cast<int>(locked.size()) >= k;
    const int want = verifying ? 1 : k - static_cast<int>(locked.size());

    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.normal();
    orthogonalize(v, locked);
    v.normalize();

    std::vector<Vector> basis{v};
    std::vector<double> alpha;
    std::vector<double> beta;
    Vector ritz_theta;
    Matrix ritz_s;
    std::vector<int> converged;
    bool invariant = false;

    while (true) {
      if (steps_used >= step_cap) {
        throw ConvergenceError("Lanczos exceeded iteration cap of " + std::to_string(step_cap) + " steps");
      }
      ++steps_used;
      const Vector& vj = basis.back();
      Vector w = factor.solve(vj);
      const double a = vj.dot(w);
      alpha.push_back(a);
      orthogonalize(w, basis);
      orthogonalize(w, locked);
      const double b = w.norm();
      const auto m = static_cast<Eigen::Index>(alpha.size());

      Matrix tri = Matrix::Zero(m, m);
      for (Eigen::Index i = 0; i < m; ++i) {
        tri(i, i) = alpha[static_cast<std::size_t>(i)];
        if (i + 1 < m) tri(i, i + 1) = tri(i + 1, i) = beta[static_cast<std::size_t>(i)];
      }
      Eigen::SelfAdjointEigenSolver<Matrix> tri_eig(tri);
      ritz_theta = tri_eig.eigenvalues();  // ascending; largest theta = smallest lambda
      ritz_s = tri_eig.eigenvectors();

      invariant = b < 1e-12 * std::max(1.0, std::abs(a)) || m >= free_dim;
      converged.clear();
      for (Eigen::Index i = m - 1; i >= 0 && static_cast<int>(converged.size()) < want; --i) {
        const double theta = ritz_theta(i);
        if (theta <= 0.0) break;
        const double resid = (2.0 - opt.shift) * std::abs(b * ritz_s(m - 1, i)) / theta;
        if (invariant || resid <= opt.tolerance) converged.push_back(static_cast<int>(i));
        else break;
      }
      if (static_cast<int>(converged.size()) >= want || invariant) break;
      beta.push_back(b);
      basis.push_back(w / b);
    }

    const auto m = static_cast<Eigen::Index>(alpha.size());
    Matrix q(n, m);
    for (Eigen::Index j = 0; j < m; ++j) q.col(j) = basis[static_cast<std::size_t>(j)];
    bool added = false;
    for (int idx : converged) {
      Vector y = q * ritz_s.col(idx);
      orthogonalize(y, locked);
      const double norm = y.norm();
      if (norm < 1e-8) continue;
      y /= norm;
      const double lambda = y.dot(lap * y);
      if (verifying && lambda >= kth_smallest_locked() - 1e-10) continue;
      locked.push_back(y);
      locked_lambda.push_back(lambda);
      added = true;
    }
    if (verifying && !added) break;
    if (!added && !verifying) throw ConvergenceError("Lanczos run produced no converged Ritz pair");
  }

  // Rayleigh-Ritz on the locked subspace to order and polish the pairs.
  const auto m = static_cast<Eigen::Index>(locked.size());
  Matrix q(n, m);
  for (Eigen::Index j = 0; j < m; ++j) q.col(j) = locked[static_cast<std::size_t>(j)];
  Matrix projected = q.transpose() * (lap * q);
  projected = 0.5 * (projected + projected.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> rr(projected);
  Matrix vectors = q * rr.eigenvectors().leftCols(k);
  Vector values = rr.eigenvalues().head(k);
  return {values, vectors};
}

}  // namespace detail

/// Smallest K eigenpairs of a normalized Laplacian, ascending, sign-fixed.
inline SpectralBasis smallest_eigenpairs(const SparseMatrix& lap, int k, const EigenOptions& opt = {}) {
  const auto n = lap.rows();
  if (k < 1 || k > n) {
    throw PreconditionError("requested K=" + std::to_string(k) + " eigenpairs of a " + std::to_string(n) +
                            "-vertex graph");
  }
  SpectralBasis basis;
  if (n <= opt.dense_limit) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig{Matrix(lap)};
    if (eig.info() != Eigen::Success) throw ConvergenceError("dense eigensolver failed");
    basis.eigenvalues = eig.eigenvalues().head(k);
    basis.eigenvectors = eig.eigenvectors().leftCols(k);
  } else {
    auto [values, vectors] = detail::lanczos_smallest(lap, k, opt);
    basis.eigenvalues = std::move(values);
    basis.eigenvectors = std::move(vectors);
  }
  fix_eigenvector_signs(basis.eigenvectors);
  for (int i = 0; i < k; ++i) {
    const double resid = (lap * basis.eigenvectors.col(i) - basis.eigenvalues(i) * basis.eigenvectors.col(i)).norm();
    if (resid > 1e-6) {
      throw ConvergenceError("eigenpair " + std::to_string(i) + " residual " + std::to_string(resid) + " above 1e-6");
    }
  }
  return basis;
}

/// Graph Fourier transform restricted to the basis: F = U^T f.
inline Matrix gft(const SpectralBasis& basis, const Matrix& signal) {
  if (signal.rows() != basis.eigenvectors.rows()) {
    throw ShapeError("signal has " + std::to_string(signal.rows()) + " rows, basis has " +
                     std::to_string(basis.eigenvectors.rows()) + " vertices");
  }
  return basis.eigenvectors.transpose() * signal;
}

/// Inverse transform from the truncated coefficients: f_hat = U F_low.
inline Matrix lowpass_reconstruct(const SpectralBasis& basis, const Matrix& coefficients) {
  if (coefficients.rows() != basis.eigenvectors.cols()) {
    throw ShapeError("coefficient matrix has " + std::to_string(coefficients.rows()) + " rows, basis has K=" +
                     std::to_string(basis.eigenvectors.cols()));
  }
  return basis.eigenvectors * coefficients;
}

// ---------------------------------------------------------------------------
// Basis cache. Layout: "GFTB" | u32 version | u64 |V| | u64 K | K eigenvalues |
// |V|*K eigenvector entries column-major; all little-endian float64.

inline constexpr std::uint32_t kBasisCacheVersion = 1;

/// Hash of everything the Laplacian depends on: vertex count and face list.
inline std::uint64_t topology_hash(const Mesh& mesh) {
  std::uint64_t h = fnv1a64_u64(mesh.vertices.size(), 0xCBF29CE484222325ULL);
  for (const auto& f : mesh.faces)
    for (int v : f) h = fnv1a64_u64(static_cast<std::uint64_t>(v), h);
  return h;
}

inline void write_basis(std::ostream& out, const SpectralBasis& basis) {
  binio::write_magic(out, "GFTB");
  binio::write_u32(out, kBasisCacheVersion);
  binio::write_u64(out, static_cast<std::uint64_t>(basis.vertex_count()));
  binio::write_u64(out, static_cast<std::uint64_t>(basis.k()));
  for (int i = 0; i < basis.k(); ++i) binio::write_f64(out, basis.eigenvalues(i));
  for (Eigen::Index c = 0; c < basis.eigenvectors.cols(); ++c)
    for (Eigen::Index r = 0; r < basis.eigenvectors.rows(); ++r) binio::write_f64(out, basis.eigenvectors(r, c));
}

inline SpectralBasis read_basis(std::istream& in) {
  binio::expect_magic(in, "GFTB");
  if (binio::read_u32(in) != kBasisCacheVersion) throw ParseError("unsupported basis cache version");
  const auto n = static_cast<Eigen::Index>(binio::read_u64(in));
  const auto k = static_cast<Eigen::Index>(binio::read_u64(in));
  SpectralBasis basis;
  basis.eigenvalues.resize(k);
  for (Eigen::Index i = 0; i < k; ++i) basis.eigenvalues(i) = binio::read_f64(in);
  basis.eigenvectors.resize(n, k);
  for (Eigen::Index c = 0; c < k; ++c)
    for (Eigen::Index r = 0; r < n; ++r) basis.eigenvectors(r, c) = binio::read_f64(in);
  return basis;
}

/// File-backed cache of bases keyed by topology hash and K.
class BasisCache {
 public:
  explicit BasisCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

  std::filesystem::path path_for(std::uint64_t key, int k) const {
    return dir_ / (to_hex(key) + "_k" + std::to_string(k) + ".basis");
  }

  std::optional<SpectralBasis> load(std::uint64_t key, int k) const {
    std::ifstream in(path_for(key, k), std::ios::binary);
    if (!in) return std::nullopt;
    return read_basis(in);
  }

  void store(std::uint64_t key, const SpectralBasis& basis) const {
    std::filesystem::create_directories(dir_);
    const auto final_path = path_for(key, basis.k());
    const auto tmp = final_path.string() + "." +
                     std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())) + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw Error("cannot write basis cache " + tmp);
      write_basis(out, basis);
    }
    std::filesystem::rename(tmp, final_path);
  }

 private:
  std::filesystem::path dir_;
};

/// Basis for a mesh, consulting the cache when one is provided.
inline SpectralBasis mesh_basis(const Mesh& mesh, int k, const BasisCache* cache = nullptr,
                                const EigenOptions& opt = {}) {
  const auto key = topology_hash(mesh);
  if (cache != nullptr) {
    if (auto hit = cache->load(key, k)) return *hit;
  }
  auto basis = smallest_eigenpairs(normalized_laplacian(build_graph(mesh)), k, opt);
  if (cache != nullptr) cache->store(key, basis);
  return basis;
}

}  // namespace gftgcn
