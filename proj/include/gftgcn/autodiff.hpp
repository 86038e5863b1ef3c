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

// Reverse-mode differentiation over dense matrices. Only the operations the
// GCN, the diffusion network and the protection losses need are provided.

#pragma once

#include "gftgcn/common.hpp"

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

namespace gftgcn::ad {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g) {
    if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
    grad += g;
  }
};

/// Handle to a node in the computation graph. Copies share the node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const {
    if (node_->value.size() != 1) throw ShapeError("scalar() on a non-scalar tensor");
    return node_->value(0, 0);
  }
  void zero_grad() { node_->grad.resize(0, 0); }
  const std::shared_ptr<Node>& node() const { return node_; }

  /// Backpropagates from this scalar into every reachable leaf.
  void backward() const {
    if (node_->value.size() != 1) throw ShapeError("backward() requires a scalar output");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->accumulate(Matrix::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward && n->grad.size() != 0) n->backward(*n);
    }
  }

 private:
  std::shared_ptr<Node> node_;
};

inline Tensor constant(Matrix value) { return Tensor(std::move(value), false); }
inline Tensor parameter(Matrix value) { return Tensor(std::move(value), true); }

namespace detail {

inline Tensor make_result(Matrix value, std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
  Tensor out(std::move(value));
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& n = *out.node();
  n.requires_grad = true;
  for (const auto& in : inputs) n.parents.push_back(in.node());
  n.backward = std::move(backward);
  return out;
}

inline void push(const std::shared_ptr<Node>& target, const Matrix& g) {
  if (target->requires_grad) target->accumulate(g);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  auto pa = a.node();
  auto pb = b.node();
  return detail::make_result(a.value() * b.value(), {a, b}, [pa, pb](Node& n) {
    if (pa->requires_grad) pa->accumulate(n.grad * pb->value.transpose());
    if (pb->requires_grad) pb->accumulate(pa->value.transpose() * n.grad);
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  auto pa = a.node();
  auto pb = b.node();
  return detail::make_result(a.value() + b.value(), {a, b}, [pa, pb](Node& n) {
    detail::push(pa, n.grad);
    detail::push(pb, n.grad);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  auto pa = a.node();
  auto pb = b.node();
  return detail::make_result(a.value() - b.value(), {a, b}, [pa, pb](Node& n) {
    detail::push(pa, n.grad);
    detail::push(pb, -n.grad);
  });
}

/// Adds a 1 x c row to every row of an r x c matrix.
inline Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias must be 1 x cols");
  auto pa = a.node();
  auto pr = row.node();
  Matrix v = a.value().rowwise() + row.value().row(0);
  return detail::make_result(std::move(v), {a, row}, [pa, pr](Node& n) {
    detail::push(pa, n.grad);
    if (pr->requires_grad) pr->accumulate(n.grad.colwise().sum());
  });
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "hadamard");
  auto pa = a.node();
  auto pb = b.node();
  return detail::make_result(a.value().cwiseProduct(b.value()), {a, b}, [pa, pb](Node& n) {
    if (pa->requires_grad) pa->accumulate(n.grad.cwiseProduct(pb->value));
    if (pb->requires_grad) pb->accumulate(n.grad.cwiseProduct(pa->value));
  });
}

inline Tensor scale(const Tensor& a, double s) {
  auto pa = a.node();
  return detail::make_result(a.value() * s, {a}, [pa, s](Node& n) { detail::push(pa, n.grad * s); });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  auto pa = a.node();
  Matrix v = a.value().array() + s;
  return detail::make_result(std::move(v), {a}, [pa](Node& n) { detail::push(pa, n.grad); });
}

inline Tensor relu(const Tensor& a) {
  auto pa = a.node();
  Matrix v = a.value().cwiseMax(0.0);
  return detail::make_result(std::move(v), {a}, [pa](Node& n) {
    if (pa->requires_grad) pa->accumulate((pa->value.array() > 0.0).cast<double>().matrix().cwiseProduct(n.grad));
  });
}

inline Tensor tanh(const Tensor& a) {
  auto pa = a.node();
  Matrix v = a.value().array().tanh().matrix();
  return detail::make_result(v, {a}, [pa, v](Node& n) {
    if (pa->requires_grad) pa->accumulate(((1.0 - v.array().square()) * n.grad.array()).matrix());
  });
}

/// Elementwise |x|; the subgradient at 0 is taken as 0.
inline Tensor abs(const Tensor& a) {
  auto pa = a.node();
  return detail::make_result(a.value().cwiseAbs(), {a}, [pa](Node& n) {
    if (pa->requires_grad) pa->accumulate((pa->value.array().sign() * n.grad.array()).matrix());
  });
}

inline Tensor square(const Tensor& a) {
  auto pa = a.node();
  return detail::make_result(a.value().cwiseAbs2(), {a}, [pa](Node& n) {
    if (pa->requires_grad) pa->accumulate((2.0 * pa->value.array() * n.grad.array()).matrix());
  });
}

inline Tensor sum(const Tensor& a) {
  auto pa = a.node();
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return detail::make_result(std::move(v), {a}, [pa](Node& n) {
    if (pa->requires_grad) pa->accumulate(Matrix::Constant(pa->value.rows(), pa->value.cols(), n.grad(0, 0)));
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.value().size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

/// Sum of mask-selected entries divided by the mask sum. An empty mask yields
/// a constant 0 with no gradient.
inline Tensor masked_mean(const Tensor& a, const Matrix& mask) {
  if (mask.rows() != a.rows() || mask.cols() != a.cols()) throw ShapeError("masked_mean: mask shape");
  const double total = mask.sum();
  if (total == 0.0) return constant(Matrix::Zero(1, 1));
  auto pa = a.node();
  Matrix v(1, 1);
  v(0, 0) = a.value().cwiseProduct(mask).sum() / total;
  return detail::make_result(std::move(v), {a}, [pa, mask, total](Node& n) {
    if (pa->requires_grad) pa->accumulate(mask * (n.grad(0, 0) / total));
  });
}

/// Row-wise L2 normalisation. Rows of zero norm map to e_1 (no gradient).
inline Tensor row_normalize(const Tensor& a) {
  auto pa = a.node();
  const Eigen::Index r = a.rows();
  Vector norms = a.value().rowwise().norm();
  Matrix v(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < r; ++i) {
    if (norms(i) != 0.0) {
      v.row(i) = a.value().row(i) / norms(i);
    } else {
      warn("zero-norm row in normalisation; substituting e_1");
      v.row(i).setZero();
      v(i, 0) = 1.0;
    }
  }
  return detail::make_result(v, {a}, [pa, v, norms](Node& n) {
    if (!pa->requires_grad) return;
    Matrix g = Matrix::Zero(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      if (norms(i) == 0.0) continue;
      const double proj = v.row(i).dot(n.grad.row(i));
      g.row(i) = (n.grad.row(i) - proj * v.row(i)) / norms(i);
    }
    pa->accumulate(g);
  });
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) throw ShapeError("concat_cols: row counts differ");
  auto pa = a.node();
  auto pb = b.node();
  Matrix v(a.rows(), a.cols() + b.cols());
  v << a.value(), b.value();
  const Eigen::Index ca = a.cols();
  return detail::make_result(std::move(v), {a, b}, [pa, pb, ca](Node& n) {
    if (pa->requires_grad) pa->accumulate(n.grad.leftCols(ca));
    if (pb->requires_grad) pb->accumulate(n.grad.rightCols(n.grad.cols() - ca));
  });
}

/// Applies a fixed k x k matrix to each consecutive k-row block of x.
inline Tensor block_left_multiply(const Matrix& prop, const Tensor& x) {
  const Eigen::Index k = prop.rows();
  if (prop.cols() != k || x.rows() % k != 0) throw ShapeError("block_left_multiply: block size mismatch");
  auto px = x.node();
  const Eigen::Index blocks = x.rows() / k;
  Matrix v(x.rows(), x.cols());
  for (Eigen::Index b = 0; b < blocks; ++b) v.middleRows(b * k, k).noalias() = prop * x.value().middleRows(b * k, k);
  return detail::make_result(std::move(v), {x}, [px, prop, k, blocks](Node& n) {
    if (!px->requires_grad) return;
    Matrix g(n.grad.rows(), n.grad.cols());
    for (Eigen::Index b = 0; b < blocks; ++b) g.middleRows(b * k, k).noalias() = prop.transpose() * n.grad.middleRows(b * k, k);
    px->accumulate(g);
  });
}

/// Mean of each consecutive k-row block: (B*k) x c -> B x c.
inline Tensor block_mean_rows(const Tensor& x, Eigen::Index k) {
  if (k <= 0 || x.rows() % k != 0) throw ShapeError("block_mean_rows: block size mismatch");
  auto px = x.node();
  const Eigen::Index blocks = x.rows() / k;
  Matrix v(blocks, x.cols());
  for (Eigen::Index b = 0; b < blocks; ++b) v.row(b) = x.value().middleRows(b * k, k).colwise().mean();
  return detail::make_result(std::move(v), {x}, [px, k, blocks](Node& n) {
    if (!px->requires_grad) return;
    Matrix g(px->value.rows(), px->value.cols());
    for (Eigen::Index b = 0; b < blocks; ++b)
      g.middleRows(b * k, k) = n.grad.row(b).replicate(k, 1) / static_cast<double>(k);
    px->accumulate(g);
  });
}

inline Tensor transpose(const Tensor& a) {
  auto pa = a.node();
  Matrix v = a.value().transpose();
  return detail::make_result(std::move(v), {a}, [pa](Node& n) { detail::push(pa, n.grad.transpose()); });
}

/// Cosine similarity between every row of a and every row of b.
inline Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
  Tensor na = row_normalize(a);
  Tensor nb = a.node() == b.node() ? na : row_normalize(b);
  return matmul(na, transpose(nb));
}

/// Row-wise dot products of two equally shaped matrices: r x c -> r x 1.
inline Tensor row_dot(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "row_dot");
  auto pa = a.node();
  auto pb = b.node();
  Matrix v = a.value().cwiseProduct(b.value()).rowwise().sum();
  return detail::make_result(std::move(v), {a, b}, [pa, pb](Node& n) {
    if (pa->requires_grad) pa->accumulate(pb->value.array().colwise() * n.grad.col(0).array());
    if (pb->requires_grad) pb->accumulate(pa->value.array().colwise() * n.grad.col(0).array());
  });
}

/// Rows selected by index (with repetition allowed).
inline Tensor gather_rows(const Tensor& a, const std::vector<Eigen::Index>& idx) {
  auto pa = a.node();
  Matrix v(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
    v.row(static_cast<Eigen::Index>(i)) = a.value().row(idx[i]);
  }
  return detail::make_result(std::move(v), {a}, [pa, idx](Node& n) {
    if (!pa->requires_grad) return;
    Matrix g = Matrix::Zero(pa->value.rows(), pa->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    pa->accumulate(g);
  });
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam over a fixed list of parameter tensors.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config = {}) : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
      m_.push_back(Matrix::Zero(p.rows(), p.cols()));
      v_.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const Matrix& g = params_[i].grad();
      if (g.size() == 0) continue;
      m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
      v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseAbs2();
      Matrix update = (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.epsilon);
      params_[i].mutable_value() -= config_.learning_rate * update;
    }
  }

  AdamConfig& config() { return config_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long t_ = 0;
};

}  // namespace gftgcn::ad
