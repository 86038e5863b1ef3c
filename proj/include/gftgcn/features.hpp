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

#include "gftgcn/geometry.hpp"
#include "gftgcn/spectral.hpp"

namespace gftgcn {

struct ExtractOptions {
  int k = 10;
  bool crop = false;  // captured scans only; synthetic meshes are already clean
  EigenOptions eigen;
};

/// F_low: the first K spectral coefficients of the K x 10 descriptor signal.
inline Matrix extract_features(const Mesh& raw, const ExtractOptions& opt = {}, const BasisCache* cache = nullptr) {
  Mesh mesh = normalize_mesh(opt.crop ? crop_face(raw) : raw);
  const SpectralBasis basis = mesh_basis(mesh, opt.k, cache, opt.eigen);
  return gft(basis, assemble_descriptors(mesh));
}

/// Flattened F_low mean-pooled to d values: consecutive chunks of the
/// row-major K*10 vector are averaged, then the result is L2-normalised.
inline Vector pool_flat_features(const Matrix& f_low, int d) {
  const Eigen::Index total = f_low.size();
  if (d < 1) throw PreconditionError("pool target dimension must be positive");
  Vector flat(total);
  for (Eigen::Index r = 0, i = 0; r < f_low.rows(); ++r)
    for (Eigen::Index c = 0; c < f_low.cols(); ++c) flat(i++) = f_low(r, c);
  Vector out = Vector::Zero(d);
  for (int j = 0; j < d; ++j) {
    const Eigen::Index lo = total * j / d;
    Eigen::Index hi = total * (j + 1) / d;
    if (hi <= lo) hi = std::min(total, lo + 1);
    out(j) = flat.segment(lo, hi - lo).mean();
  }
  const double n = out.norm();
  if (n == 0.0) {
    warn("pooled feature vector has zero norm; substituting e_1");
    out.setZero();
    out(0) = 1.0;
    return out;
  }
  return out / n;
}

}  // namespace gftgcn
