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

// Per-vertex geometric descriptors: coordinates, normals, mean dihedral angle,
// Gaussian curvature, mean curvature and mixed Voronoi area.

#pragma once

#include "gftgcn/common.hpp"
#include "gftgcn/mesh.hpp"

#include <array>
#include <map>
#include <ostream>

namespace gftgcn {

inline constexpr int kDescriptorCount = 10;
inline constexpr std::array<const char*, kDescriptorCount> kDescriptorNames = {
    "x", "y", "z", "nx", "ny", "nz", "mean_dihedral", "gaussian_curv", "mean_curv", "vertex_area"};

namespace detail {

inline Vec3 face_normal_unnormalized(const Mesh& mesh, const Face& f) {
  const Vec3& a = mesh.vertices[static_cast<std::size_t>(f[0])];
  const Vec3& b = mesh.vertices[static_cast<std::size_t>(f[1])];
  const Vec3& c = mesh.vertices[static_cast<std::size_t>(f[2])];
  return (b - a).cross(c - a);
}

/// Interior angle at corner `k` of face `f`.
inline double corner_angle(const Mesh& mesh, const Face& f, int k) {
  const Vec3& p = mesh.vertices[static_cast<std::size_t>(f[k])];
  const Vec3 u = mesh.vertices[static_cast<std::size_t>(f[(k + 1) % 3])] - p;
  const Vec3 v = mesh.vertices[static_cast<std::size_t>(f[(k + 2) % 3])] - p;
  return std::atan2(u.cross(v).norm(), u.dot(v));
}

inline double cot_of(const Vec3& u, const Vec3& v) {
  const double s = u.cross(v).norm();
  return s > 0.0 ? u.dot(v) / s : 0.0;
}

}  // namespace detail

/// Area-weighted average of incident face normals, unit length.
inline Matrix vertex_normals(const Mesh& mesh) {
  const auto n = static_cast<Eigen::Index>(mesh.vertices.size());
  Matrix normals = Matrix::Zero(n, 3);
  std::vector<int> incident(static_cast<std::size_t>(n), 0);
  for (const auto& f : mesh.faces) {
    // |cross| is twice the face area, so summing raw cross products area-weights.
    const Vec3 fn = detail::face_normal_unnormalized(mesh, f);
    for (int v : f) {
      normals.row(v) += fn.transpose();
      ++incident[static_cast<std::size_t>(v)];
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (incident[static_cast<std::size_t>(i)] == 0) {
      throw TopologyError("vertex " + std::to_string(i) + " has no incident face");
    }
    const double len = normals.row(i).norm();
    if (!(len > 0.0)) throw NumericError("vertex " + std::to_string(i) + " has a zero normal sum");
    normals.row(i) /= len;
  }
  return normals;
}

/// Per-vertex mean over incident interior edges of the angle between the two
/// adjacent face normals. Vertices touching no interior edge get 0.
inline Vector dihedral_angles(const Mesh& mesh) {
  std::map<std::pair<int, int>, std::vector<std::size_t>> edge_faces;
  for (std::size_t fi = 0; fi < mesh.faces.size(); ++fi) {
    const auto& f = mesh.faces[fi];
    for (int k = 0; k < 3; ++k) {
      int a = f[k];
      int b = f[(k + 1) % 3];
      if (a > b) std::swap(a, b);
      edge_faces[{a, b}].push_back(fi);
    }
  }
  const auto n = static_cast<Eigen::Index>(mesh.vertices.size());
  Vector sum = Vector::Zero(n);
  Vector count = Vector::Zero(n);
  for (const auto& [edge, faces] : edge_faces) {
    if (faces.size() != 2) continue;  // boundary or non-manifold
    Vec3 n1 = detail::face_normal_unnormalized(mesh, mesh.faces[faces[0]]);
    Vec3 n2 = detail::face_normal_unnormalized(mesh, mesh.faces[faces[1]]);
    const double l1 = n1.norm();
    const double l2 = n2.norm();
    if (l1 == 0.0 || l2 == 0.0) continue;
    const double angle = std::acos(std::clamp(n1.dot(n2) / (l1 * l2), -1.0, 1.0));
    for (int v : {edge.first, edge.second}) {
      sum(v) += angle;
      count(v) += 1.0;
    }
  }
  Vector out = Vector::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i)
    if (count(i) > 0) out(i) = sum(i) / count(i);
  return out;
}

/// 2*pi minus the sum of incident corner angles.
inline Vector angle_deficits(const Mesh& mesh) {
  const auto n = static_cast<Eigen::Index>(mesh.vertices.size());
  Vector deficit = Vector::Constant(n, 2.0 * std::numbers::pi);
  for (const auto& f : mesh.faces)
    for (int k = 0; k < 3; ++k) deficit(f[k]) -= detail::corner_angle(mesh, f, k);
  return deficit;
}

/// Mixed Voronoi area per vertex: Voronoi region for non-obtuse triangles,
/// half / quarter of the triangle area otherwise.
inline Vector mixed_vertex_areas(const Mesh& mesh) {
  const auto n = static_cast<Eigen::Index>(mesh.vertices.size());
  Vector area = Vector::Zero(n);
  for (const auto& f : mesh.faces) {
    std::array<Vec3, 3> p;
    for (int k = 0; k < 3; ++k) p[static_cast<std::size_t>(k)] = mesh.vertices[static_cast<std::size_t>(f[k])];
    const double tri_area = 0.5 * (p[1] - p[0]).cross(p[2] - p[0]).norm();
    std::array<double, 3> angle{};
    for (int k = 0; k < 3; ++k) angle[static_cast<std::size_t>(k)] = detail::corner_angle(mesh, f, k);
    const int obtuse = angle[0] > std::numbers::pi / 2 ? 0 : angle[1] > std::numbers::pi / 2 ? 1
                     : angle[2] > std::numbers::pi / 2 ? 2 : -1;
    for (int k = 0; k < 3; ++k) {
      const auto i = static_cast<std::size_t>(k);
      const auto j = static_cast<std::size_t>((k + 1) % 3);
      const auto l = static_cast<std::size_t>((k + 2) % 3);
      double a = 0.0;
      if (obtuse < 0) {
        // Edge (i,j) is opposite corner l; edge (i,l) opposite corner j.
        const double cot_l = detail::cot_of(p[i] - p[l], p[j] - p[l]);
        const double cot_j = detail::cot_of(p[i] - p[j], p[l] - p[j]);
        a = ((p[j] - p[i]).squaredNorm() * cot_l + (p[l] - p[i]).squaredNorm() * cot_j) / 8.0;
      } else if (obtuse == k) {
        a = tri_area / 2.0;
      } else {
        a = tri_area / 4.0;
      }
      area(f[k]) += a;
    }
  }
  return area;
}

/// Angle deficit divided by mixed vertex area.
inline Vector gaussian_curvature(const Mesh& mesh) {
  const Vector deficit = angle_deficits(mesh);
  const Vector area = mixed_vertex_areas(mesh);
  Vector k(deficit.size());
  for (Eigen::Index i = 0; i < k.size(); ++i) k(i) = area(i) > 0.0 ? deficit(i) / area(i) : 0.0;
  return k;
}

/// Unsigned mean curvature, half the norm of the cotangent Laplace-Beltrami
/// of the position.
inline Vector mean_curvature(const Mesh& mesh) {
  const auto n = static_cast<Eigen::Index>(mesh.vertices.size());
  Matrix lap = Matrix::Zero(n, 3);
  for (const auto& f : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      const int i = f[k];
      const int j = f[(k + 1) % 3];
      const int o = f[(k + 2) % 3];
      const Vec3& pi = mesh.vertices[static_cast<std::size_t>(i)];
      const Vec3& pj = mesh.vertices[static_cast<std::size_t>(j)];
      const Vec3& po = mesh.vertices[static_cast<std::size_t>(o)];
      const double w = detail::cot_of(pi - po, pj - po);
      const Vec3 diff = pi - pj;
      lap.row(i) += w * diff.transpose();
      lap.row(j) -= w * diff.transpose();
    }
  }
  const Vector area = mixed_vertex_areas(mesh);
  Vector h(n);
  for (Eigen::Index i = 0; i < n; ++i) h(i) = area(i) > 0.0 ? lap.row(i).norm() / (4.0 * area(i)) : 0.0;
  return h;
}

inline void standardize_column(Matrix& m, Eigen::Index col) {
  const double mean = m.col(col).mean();
  m.col(col).array() -= mean;
  const double sd = std::sqrt(m.col(col).squaredNorm() / static_cast<double>(m.rows()));
  if (sd > 1e-12) m.col(col) /= sd;
  else m.col(col).setZero();
}

/// |V| x 10 descriptor matrix in kDescriptorNames order. Scalar columns 6..9
/// are standardized per mesh; coordinates and normals are left raw.
inline Matrix assemble_descriptors(const Mesh& mesh) {
  const auto n = static_cast<Eigen::Index>(mesh.vertices.size());
  Matrix f(n, kDescriptorCount);
  for (Eigen::Index i = 0; i < n; ++i) f.row(i).head<3>() = mesh.vertices[static_cast<std::size_t>(i)].transpose();
  f.middleCols(3, 3) = vertex_normals(mesh);
  f.col(6) = dihedral_angles(mesh);
  f.col(7) = gaussian_curvature(mesh);
  f.col(8) = mean_curvature(mesh);
  f.col(9) = mixed_vertex_areas(mesh);
  if (!f.allFinite()) throw NumericError("non-finite descriptor value");
  for (Eigen::Index c = 6; c < kDescriptorCount; ++c) standardize_column(f, c);
  return f;
}

inline void write_descriptor_csv(const Matrix& descriptors, std::ostream& out) {
  for (int c = 0; c < kDescriptorCount; ++c) out << (c ? "," : "") << kDescriptorNames[static_cast<std::size_t>(c)];
  out << '\n';
  char buf[32];
  for (Eigen::Index r = 0; r < descriptors.rows(); ++r) {
    for (Eigen::Index c = 0; c < descriptors.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", descriptors(r, c));
      out << (c ? "," : "") << buf;
    }
    out << '\n';
  }
}

}  // namespace gftgcn
