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

// Small hand-built meshes shared by the unit tests.

#pragma once

#include "gftgcn/mesh.hpp"

#include <filesystem>
#include <random>

namespace gftgcn::fixtures {

inline Mesh triangle() {
  Mesh m;
  m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  m.faces = {{0, 1, 2}};
  return m;
}

/// Two triangles sharing edge (1,2).
inline Mesh two_triangles() {
  Mesh m;
  m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0}};
  m.faces = {{0, 1, 2}, {1, 3, 2}};
  return m;
}

/// Two faces folded at a right angle along the shared edge (0,1).
inline Mesh folded_pair() {
  Mesh m;
  m.vertices = {{0, 0, 0}, {1, 0, 0}, {0.5, 1, 0}, {0.5, 0, 1}};
  m.faces = {{0, 1, 2}, {1, 0, 3}};
  return m;
}

inline Mesh disjoint_triangles() {
  Mesh m;
  m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {5, 0, 0}, {6, 0, 0}, {5, 1, 0}};
  m.faces = {{0, 1, 2}, {3, 4, 5}};
  return m;
}

inline Mesh tetrahedron() {
  Mesh m;
  m.vertices = {{1, 1, 1}, {1, -1, -1}, {-1, 1, -1}, {-1, -1, 1}};
  m.faces = {{0, 1, 2}, {0, 3, 1}, {0, 2, 3}, {1, 3, 2}};
  return m;
}

/// Unit cube [0,1]^3, outward-oriented, with every face diagonal chosen to
/// avoid the corners (0,0,0) = vertex 0 and (1,1,1) = vertex 7.
inline Mesh cube(Vec3 center = Vec3(0.5, 0.5, 0.5), double side = 1.0) {
  Mesh m;
  for (int i = 0; i < 8; ++i) {
    const Vec3 unit((i >> 0) & 1, (i >> 1) & 1, (i >> 2) & 1);
    m.vertices.push_back(center + side * (unit - Vec3(0.5, 0.5, 0.5)));
  }
  // Vertex index = x + 2y + 4z.
  m.faces = {
      // z = 0 (normal -z): corners 0,1,3,2; diagonal 1-2
      {0, 2, 1}, {1, 2, 3},
      // z = 1 (normal +z): corners 4,5,7,6; diagonal 5-6
      {4, 5, 6}, {5, 7, 6},
      // y = 0 (normal -y): corners 0,1,5,4; diagonal 1-4
      {0, 1, 4}, {1, 5, 4},
      // y = 1 (normal +y): corners 2,3,7,6; diagonal 3-6
      {2, 6, 3}, {3, 6, 7},
      // x = 0 (normal -x): corners 0,2,6,4; diagonal 2-4
      {0, 4, 2}, {2, 4, 6},
      // x = 1 (normal +x): corners 1,3,7,5; diagonal 3-5
      {1, 3, 5}, {3, 7, 5},
  };
  return m;
}

/// Flat (n+1)x(n+1) grid in the z = 0 plane, counter-clockwise faces.
inline Mesh flat_grid(int n) {
  Mesh m;
  for (int j = 0; j <= n; ++j)
    for (int i = 0; i <= n; ++i) m.vertices.emplace_back(i, j, 0.0);
  auto id = [n](int i, int j) { return j * (n + 1) + i; };
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      m.faces.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1)});
      m.faces.push_back({id(i, j), id(i + 1, j + 1), id(i, j + 1)});
    }
  }
  return m;
}

inline Eigen::Matrix3d random_rotation(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Eigen::Quaterniond q(g(rng), g(rng), g(rng), g(rng));
  q.normalize();
  return q.toRotationMatrix();
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("gftgcn_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace gftgcn::fixtures
