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

// Central finite-difference check of reverse-mode gradients.

#pragma once

#include "gftgcn/autodiff.hpp"

namespace gftgcn::ad {

/// Builds a scalar from the given leaves. Called repeatedly with perturbed values.
using ScalarFunction = std::function<Tensor(const std::vector<Tensor>& leaves)>;

/// Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||, floor),
/// maximised over leaves.
inline double gradient_error(const ScalarFunction& f, const std::vector<Matrix>& inputs, double h = 1e-5,
                             double floor = 1e-8) {
  std::vector<Tensor> leaves;
  for (const auto& m : inputs) leaves.push_back(parameter(m));
  Tensor out = f(leaves);
  if (out.value().size() != 1) throw ShapeError("gradient_error needs a scalar function");
  out.backward();
  double worst = 0.0;
  for (std::size_t l = 0; l < inputs.size(); ++l) {
    Matrix analytic = leaves[l].grad();
    if (analytic.size() == 0) analytic = Matrix::Zero(inputs[l].rows(), inputs[l].cols());
    Matrix numeric(inputs[l].rows(), inputs[l].cols());
    for (Eigen::Index i = 0; i < inputs[l].size(); ++i) {
      std::vector<Tensor> plus;
      std::vector<Tensor> minus;
      for (std::size_t m = 0; m < inputs.size(); ++m) {
        Matrix p = inputs[m];
        Matrix q = inputs[m];
        if (m == l) {
          p.data()[i] += h;
          q.data()[i] -= h;
        }
        plus.push_back(constant(std::move(p)));
        minus.push_back(constant(std::move(q)));
      }
      numeric.data()[i] = (f(plus).scalar() - f(minus).scalar()) / (2.0 * h);
    }
    const double scale = std::max({analytic.norm(), numeric.norm(), floor});
    worst = std::max(worst, (analytic - numeric).norm() / scale);
  }
  return worst;
}

/// Reduces a tensor to a scalar through fixed random weights so every output
/// entry contributes a distinct coefficient.
inline Tensor weighted_sum(const Tensor& t, const Matrix& weights) { return sum(hadamard(t, constant(weights))); }

}  // namespace gftgcn::ad
