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

#pragma once

#include "gftgcn/common.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <utility>
#include <vector>

namespace gftgcn {

using Vec3 = Eigen::Vector3d;
using Face = std::array<int, 3>;

/// One facial scan: vertex positions plus triangle list.
struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;
  std::string subject_id;
  std::string scan_id;

  std::size_t vertex_count() const { return vertices.size(); }
  std::size_t face_count() const { return faces.size(); }
};

enum class MeshFormat { obj, ply };

inline MeshFormat format_from_path(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".obj") return MeshFormat::obj;
  if (ext == ".ply") return MeshFormat::ply;
  throw ParseError("unknown mesh extension '" + ext + "' (expected .obj or .ply)");
}

/// Throws TopologyError on out-of-range or degenerate faces.
inline void validate_topology(const Mesh& mesh) {
  const auto n = static_cast<int>(mesh.vertices.size());
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& face = mesh.faces[f];
    for (int idx : face) {
      if (idx < 0 || idx >= n) {
        throw TopologyError("face " + std::to_string(f) + " references vertex " + std::to_string(idx) +
                            " but mesh has " + std::to_string(n) + " vertices");
      }
    }
    if (face[0] == face[1] || face[1] == face[2] || face[0] == face[2]) {
      throw TopologyError("face " + std::to_string(f) + " is degenerate (repeated vertex index)");
    }
  }
}

/// Sorted, de-duplicated undirected edges (i < j) implied by the faces.
inline std::vector<std::pair<int, int>> mesh_edges(const Mesh& mesh) {
  std::vector<std::pair<int, int>> edges;
  edges.reserve(mesh.faces.size() * 3);
  for (const auto& f : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      int a = f[k];
      int b = f[(k + 1) % 3];
      if (a > b) std::swap(a, b);
      edges.emplace_back(a, b);
    }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

namespace detail {

inline double parse_double(std::string_view token, std::size_t line_no) {
  double value = 0.0;
  auto res = std::from_chars(token.data(), token.data() + token.size(), value);
  if (res.ec != std::errc() || res.ptr != token.data() + token.size()) {
    throw ParseError("line " + std::to_string(line_no) + ": bad number '" + std::string(token) + "'");
  }
  return value;
}

inline long parse_long(std::string_view token, std::size_t line_no) {
  long value = 0;
  auto res = std::from_chars(token.data(), token.data() + token.size(), value);
  if (res.ec != std::errc() || res.ptr != token.data() + token.size()) {
    throw ParseError("line " + std::to_string(line_no) + ": bad integer '" + std::string(token) + "'");
  }
  return value;
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

/// Fan-triangulates a polygon.
inline void push_polygon(Mesh& mesh, const std::vector<int>& poly, std::size_t line_no) {
  if (poly.size() < 3) {
    throw ParseError("line " + std::to_string(line_no) + ": face with fewer than 3 vertices");
  }
  for (std::size_t k = 1; k + 1 < poly.size(); ++k) mesh.faces.push_back({poly[0], poly[k], poly[k + 1]});
}

}  // namespace detail

/// ASCII Wavefront OBJ: `v x y z` and `f a b c ...` (1-based; `a/t/n` accepted).
inline Mesh parse_obj(std::istream& in) {
  Mesh mesh;
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::pair<std::vector<long>, std::size_t>> raw_faces;
  while (std::getline(in, line)) {
    ++line_no;
    auto tokens = detail::split_ws(line);
    if (tokens.empty() || tokens[0].front() == '#') continue;
    if (tokens[0] == "v") {
      if (tokens.size() < 4) throw ParseError("line " + std::to_string(line_no) + ": vertex needs 3 coordinates");
      mesh.vertices.emplace_back(detail::parse_double(tokens[1], line_no), detail::parse_double(tokens[2], line_no),
                                 detail::parse_double(tokens[3], line_no));
    } else if (tokens[0] == "f") {
      std::vector<long> idx;
      for (std::size_t k = 1; k < tokens.size(); ++k) {
        auto tok = tokens[k];
        tok = tok.substr(0, tok.find('/'));
        idx.push_back(detail::parse_long(tok, line_no));
      }
      raw_faces.emplace_back(std::move(idx), line_no);
    }
  }
  const auto n = static_cast<long>(mesh.vertices.size());
  for (const auto& [idx, ln] : raw_faces) {
    std::vector<int> poly;
    for (long i : idx) {
      // Negative indices are relative to the end of the vertex list.
      long zero_based = i > 0 ? i - 1 : (i < 0 ? n + i : -1);
      if (zero_based < 0 || zero_based >= n) {
        throw TopologyError("line " + std::to_string(ln) + ": face index " + std::to_string(i) +
                            " out of range for " + std::to_string(n) + " vertices");
      }
      poly.push_back(static_cast<int>(zero_based));
    }
    detail::push_polygon(mesh, poly, ln);
  }
  validate_topology(mesh);
  return mesh;
}

/// ASCII PLY with `element vertex` (x y z first) and `element face` (vertex_indices list).
inline Mesh parse_ply(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&]() -> bool {
    if (!std::getline(in, line)) return false;
    ++line_no;
    return true;
  };
  if (!next_line() || detail::split_ws(line) != std::vector<std::string_view>{"ply"}) {
    throw ParseError("missing 'ply' magic line");
  }
  struct Element {
    std::string name;
    long count = 0;
    std::vector<std::string> properties;
    bool list = false;
  };
  std::vector<Element> elements;
  bool ascii = false;
  while (true) {
    if (!next_line()) throw ParseError("unterminated PLY header");
    auto tokens = detail::split_ws(line);
    if (tokens.empty()) continue;
    if (tokens[0] == "end_header") break;
    if (tokens[0] == "format") {
      if (tokens.size() < 2 || tokens[1] != "ascii") throw ParseError("only ASCII PLY is supported");
      ascii = true;
    } else if (tokens[0] == "element") {
      if (tokens.size() != 3) throw ParseError("line " + std::to_string(line_no) + ": malformed element");
      elements.push_back({std::string(tokens[1]), detail::parse_long(tokens[2], line_no), {}, false});
    } else if (tokens[0] == "property") {
      if (elements.empty()) throw ParseError("property before element");
      if (tokens.size() >= 2 && tokens[1] == "list") {
        elements.back().list = true;
        elements.back().properties.emplace_back(tokens.back());
      } else if (tokens.size() == 3) {
        elements.back().properties.emplace_back(tokens[2]);
      } else {
        throw ParseError("line " + std::to_string(line_no) + ": malformed property");
      }
    }
  }
  if (!ascii) throw ParseError("PLY header lacks 'format ascii'");

  Mesh mesh;
  std::vector<std::pair<std::vector<long>, std::size_t>> raw_faces;
  for (const auto& el : elements) {
    for (long r = 0; r < el.count; ++r) {
      if (!next_line()) throw ParseError("PLY body truncated in element '" + el.name + "'");
      auto tokens = detail::split_ws(line);
      if (el.name == "vertex") {
        std::array<double, 3> xyz{};
        std::array<bool, 3> seen{};
        if (tokens.size() < el.properties.size()) throw ParseError("line " + std::to_string(line_no) + ": short vertex row");
        for (std::size_t p = 0; p < el.properties.size(); ++p) {
          const auto& name = el.properties[p];
          int axis = name == "x" ? 0 : name == "y" ? 1 : name == "z" ? 2 : -1;
          if (axis >= 0) {
            xyz[static_cast<std::size_t>(axis)] = detail::parse_double(tokens[p], line_no);
            seen[static_cast<std::size_t>(axis)] = true;
          }
        }
        if (!(seen[0] && seen[1] && seen[2])) throw ParseError("PLY vertex element lacks x/y/z");
        mesh.vertices.emplace_back(xyz[0], xyz[1], xyz[2]);
      } else if (el.name == "face") {
        if (tokens.empty()) throw ParseError("line " + std::to_string(line_no) + ": empty face row");
        const long count = detail::parse_long(tokens[0], line_no);
        if (count < 0 || static_cast<std::size_t>(count) + 1 > tokens.size()) {
          throw ParseError("line " + std::to_string(line_no) + ": face list shorter than its count");
        }
        std::vector<long> idx;
        for (long k = 0; k < count; ++k) idx.push_back(detail::parse_long(tokens[static_cast<std::size_t>(k + 1)], line_no));
        raw_faces.emplace_back(std::move(idx), line_no);
      }
    }
  }
  const auto n = static_cast<long>(mesh.vertices.size());
  for (const auto& [idx, ln] : raw_faces) {
    std::vector<int> poly;
    for (long i : idx) {
      if (i < 0 || i >= n) {
        throw TopologyError("line " + std::to_string(ln) + ": face index " + std::to_string(i) +
                            " out of range for " + std::to_string(n) + " vertices");
      }
      poly.push_back(static_cast<int>(i));
    }
    detail::push_polygon(mesh, poly, ln);
  }
  validate_topology(mesh);
  return mesh;
}

inline Mesh load_mesh(const std::filesystem::path& path, MeshFormat format) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open mesh file " + path.string());
  Mesh mesh = format == MeshFormat::obj ? parse_obj(in) : parse_ply(in);
  mesh.scan_id = path.stem().string();
  return mesh;
}

inline Mesh load_mesh(const std::filesystem::path& path) { return load_mesh(path, format_from_path(path)); }

inline void write_obj(const Mesh& mesh, std::ostream& out) {
  char buf[96];
  for (const auto& v : mesh.vertices) {
    std::snprintf(buf, sizeof buf, "v %.17g %.17g %.17g\n", v.x(), v.y(), v.z());
    out << buf;
  }
  for (const auto& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

inline Vec3 centroid(const Mesh& mesh) {
  Vec3 c = Vec3::Zero();
  for (const auto& v : mesh.vertices) c += v;
  return c / static_cast<double>(mesh.vertices.size());
}

/// Centers the mesh at the origin and scales it so the farthest vertex has norm 1.
inline Mesh normalize_mesh(const Mesh& mesh) {
  if (mesh.vertices.empty()) throw PreconditionError("cannot normalize an empty mesh");
  Mesh out = mesh;
  const Vec3 c = centroid(mesh);
  double max_norm = 0.0;
  for (auto& v : out.vertices) {
    v -= c;
    max_norm = std::max(max_norm, v.norm());
  }
  if (!(max_norm > 0.0)) throw PreconditionError("zero-extent mesh: all vertices coincide");
  for (auto& v : out.vertices) v /= max_norm;
  return out;
}

/// Connected components of the face graph; returns a component label per vertex
/// and the number of components. Vertices in no face form their own component.
inline std::pair<std::vector<int>, int> connected_components(const Mesh& mesh) {
  const auto n = mesh.vertices.size();
  std::vector<int> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      auto& p = parent[static_cast<std::size_t>(x)];
      p = parent[static_cast<std::size_t>(p)];
      x = p;
    }
    return x;
  };
  for (const auto& f : mesh.faces) {
    for (int k = 1; k < 3; ++k) {
      int a = find(f[0]);
      int b = find(f[k]);
      if (a != b) parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
    }
  }
  std::vector<int> label(n, -1);
  std::vector<int> root_label(n, -1);
  int count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    int r = find(static_cast<int>(i));
    auto& rl = root_label[static_cast<std::size_t>(r)];
    if (rl < 0) rl = count++;
    label[i] = rl;
  }
  return {label, count};
}

/// Keeps only the vertices flagged in `keep` and faces whose corners are all
/// kept, then compacts indices.
inline Mesh filter_vertices(const Mesh& mesh, const std::vector<bool>& keep) {
  Mesh out;
  out.subject_id = mesh.subject_id;
  out.scan_id = mesh.scan_id;
  std::vector<int> remap(mesh.vertices.size(), -1);
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    if (keep[i]) {
      remap[i] = static_cast<int>(out.vertices.size());
      out.vertices.push_back(mesh.vertices[i]);
    }
  }
  for (const auto& f : mesh.faces) {
    Face g{remap[static_cast<std::size_t>(f[0])], remap[static_cast<std::size_t>(f[1])],
           remap[static_cast<std::size_t>(f[2])]};
    if (g[0] >= 0 && g[1] >= 0 && g[2] >= 0) out.faces.push_back(g);
  }
  return out;
}

/// Retains the connected component with the most vertices (lowest label on ties)
/// and drops vertices that belong to no face.
inline Mesh largest_component(const Mesh& mesh) {
  auto [label, count] = connected_components(mesh);
  std::vector<int> sizes(static_cast<std::size_t>(count), 0);
  std::vector<bool> in_face(mesh.vertices.size(), false);
  for (const auto& f : mesh.faces)
    for (int v : f) in_face[static_cast<std::size_t>(v)] = true;
  for (std::size_t i = 0; i < label.size(); ++i)
    if (in_face[i]) ++sizes[static_cast<std::size_t>(label[i])];
  const int best = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  std::vector<bool> keep(mesh.vertices.size());
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = in_face[i] && label[i] == best;
  return filter_vertices(mesh, keep);
}

/// Radius crop for captured scans: keep vertices within `factor` x the median
/// centroid distance, then the largest connected component.
inline Mesh crop_face(const Mesh& mesh, double factor = 1.2) {
  if (mesh.vertices.empty()) throw PreconditionError("cannot crop an empty mesh");
  const Vec3 c = centroid(mesh);
  std::vector<double> dist(mesh.vertices.size());
  for (std::size_t i = 0; i < dist.size(); ++i) dist[i] = (mesh.vertices[i] - c).norm();
  std::vector<double> sorted = dist;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(sorted.size() / 2), sorted.end());
  const double radius = factor * sorted[sorted.size() / 2];
  std::vector<bool> keep(dist.size());
  for (std::size_t i = 0; i < dist.size(); ++i) keep[i] = dist[i] <= radius;
  Mesh cropped = largest_component(filter_vertices(mesh, keep));
  if (cropped.faces.empty()) throw TopologyError("crop removed every face");
  return cropped;
}

}  // namespace gftgcn
