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

#include "gftgcn/gradcheck.hpp"

#include <gtest/gtest.h>

namespace gftgcn {
namespace {

using ad::Tensor;

constexpr int kConfigs = 20;
constexpr double kTol = 1e-4;

/// Entries uniform in [-1, 1] with |x| >= 0.05, away from relu/abs kinks.
Matrix random_matrix(Eigen::Index r, Eigen::Index c, SplitMix64& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double u = 0.05 + 0.95 * rng.uniform();
    m.data()[i] = rng.uniform() < 0.5 ? -u : u;
  }
  return m;
}

Eigen::Index dim(SplitMix64& rng) { return 1 + static_cast<Eigen::Index>(rng.below(5)); }

struct Case {
  std::vector<Matrix> inputs;
  ad::ScalarFunction f;
};

/// Runs kConfigs random configurations of an op and reports the worst error.
void check(const std::string& name, const std::function<Case(SplitMix64&)>& make) {
  SplitMix64 rng(derive_seed(17, name));
  double worst = 0.0;
  for (int i = 0; i < kConfigs; ++i) {
    Case c = make(rng);
    worst = std::max(worst, ad::gradient_error(c.f, c.inputs));
  }
  EXPECT_LT(worst, kTol) << name;
}

/// Unary op applied to an r x c input, reduced through random weights.
void check_unary(const std::string& name, const std::function<Tensor(const Tensor&)>& op) {
  check(name, [&](SplitMix64& rng) {
    const auto r = dim(rng);
    const auto c = dim(rng);
    Matrix probe = random_matrix(r, c, rng);
    Tensor shape_probe = op(ad::constant(probe));
    Matrix w = random_matrix(shape_probe.rows(), shape_probe.cols(), rng);
    return Case{{probe}, [op, w](const std::vector<Tensor>& x) { return ad::weighted_sum(op(x[0]), w); }};
  });
}

TEST(Autodiff, Matmul) {
  check("matmul", [](SplitMix64& rng) {
    const auto n = dim(rng), k = dim(rng), m = dim(rng);
    Matrix w = random_matrix(n, m, rng);
    return Case{{random_matrix(n, k, rng), random_matrix(k, m, rng)},
                [w](const std::vector<Tensor>& x) { return ad::weighted_sum(ad::matmul(x[0], x[1]), w); }};
  });
}

TEST(Autodiff, AddSubHadamard) {
  for (const char* name : {"add", "sub", "hadamard"}) {
    const std::string op = name;
    check(op, [op](SplitMix64& rng) {
      const auto r = dim(rng), c = dim(rng);
      Matrix w = random_matrix(r, c, rng);
      return Case{{random_matrix(r, c, rng), random_matrix(r, c, rng)}, [op, w](const std::vector<Tensor>& x) {
                    Tensor y = op == "add" ? ad::add(x[0], x[1]) : op == "sub" ? ad::sub(x[0], x[1]) : ad::hadamard(x[0], x[1]);
                    return ad::weighted_sum(y, w);
                  }};
    });
  }
}

TEST(Autodiff, AddRow) {
  check("add_row", [](SplitMix64& rng) {
    const auto r = dim(rng), c = dim(rng);
    Matrix w = random_matrix(r, c, rng);
    return Case{{random_matrix(r, c, rng), random_matrix(1, c, rng)},
                [w](const std::vector<Tensor>& x) { return ad::weighted_sum(ad::add_row(x[0], x[1]), w); }};
  });
}

TEST(Autodiff, ElementwiseOps) {
  check_unary("scale", [](const Tensor& t) { return ad::scale(t, -1.7); });
  check_unary("add_scalar", [](const Tensor& t) { return ad::add_scalar(t, 0.3); });
  check_unary("relu", [](const Tensor& t) { return ad::relu(t); });
  check_unary("tanh", [](const Tensor& t) { return ad::tanh(ad::scale(t, 2.0)); });
  check_unary("abs", [](const Tensor& t) { return ad::abs(t); });
  check_unary("square", [](const Tensor& t) { return ad::square(t); });
}

TEST(Autodiff, Reductions) {
  check_unary("sum", [](const Tensor& t) { return ad::sum(t); });
  check_unary("mean", [](const Tensor& t) { return ad::mean(t); });
  check("masked_mean", [](SplitMix64& rng) {
    const auto r = dim(rng) + 1, c = dim(rng) + 1;
    Matrix mask = Matrix::Zero(r, c);
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    mask(0, 0) = 1.0;
    return Case{{random_matrix(r, c, rng)},
                [mask](const std::vector<Tensor>& x) { return ad::masked_mean(ad::square(x[0]), mask); }};
  });
}

TEST(Autodiff, RowOps) {
  check_unary("row_normalize", [](const Tensor& t) { return ad::row_normalize(t); });
  check_unary("transpose", [](const Tensor& t) { return ad::transpose(t); });
  check("concat_cols", [](SplitMix64& rng) {
    const auto r = dim(rng), a = dim(rng), b = dim(rng);
    Matrix w = random_matrix(r, a + b, rng);
    return Case{{random_matrix(r, a, rng), random_matrix(r, b, rng)},
                [w](const std::vector<Tensor>& x) { return ad::weighted_sum(ad::concat_cols(x[0], x[1]), w); }};
  });
  check("row_dot", [](SplitMix64& rng) {
    const auto r = dim(rng), c = dim(rng);
    Matrix w = random_matrix(r, 1, rng);
    return Case{{random_matrix(r, c, rng), random_matrix(r, c, rng)},
                [w](const std::vector<Tensor>& x) { return ad::weighted_sum(ad::row_dot(x[0], x[1]), w); }};
  });
  check("cosine_matrix", [](SplitMix64& rng) {
    const auto ra = dim(rng), rb = dim(rng), c = dim(rng) + 1;
    Matrix w = random_matrix(ra, rb, rng);
    return Case{{random_matrix(ra, c, rng), random_matrix(rb, c, rng)},
                [w](const std::vector<Tensor>& x) { return ad::weighted_sum(ad::cosine_matrix(x[0], x[1]), w); }};
  });
  check("cosine_matrix_self", [](SplitMix64& rng) {
    const auto r = dim(rng) + 1, c = dim(rng) + 1;
    Matrix w = random_matrix(r, r, rng);
    return Case{{random_matrix(r, c, rng)},
                [w](const std::vector<Tensor>& x) { return ad::weighted_sum(ad::cosine_matrix(x[0], x[0]), w); }};
  });
  check("gather_rows", [](SplitMix64& rng) {
    const auto r = dim(rng), c = dim(rng);
    std::vector<Eigen::Index> idx;
    for (int i = 0; i < 6; ++i) idx.push_back(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(r))));
    Matrix w = random_matrix(6, c, rng);
    return Case{{random_matrix(r, c, rng)},
                [idx, w](const std::vector<Tensor>& x) { return ad::weighted_sum(ad::gather_rows(x[0], idx), w); }};
  });
}

TEST(Autodiff, BlockOps) {
  check("block_left_multiply", [](SplitMix64& rng) {
    const auto k = dim(rng), blocks = dim(rng), c = dim(rng);
    Matrix prop = random_matrix(k, k, rng);
    Matrix w = random_matrix(k * blocks, c, rng);
    return Case{{random_matrix(k * blocks, c, rng)},
                [prop, w](const std::vector<Tensor>& x) { return ad::weighted_sum(ad::block_left_multiply(prop, x[0]), w); }};
  });
  check("block_mean_rows", [](SplitMix64& rng) {
    const auto k = dim(rng), blocks = dim(rng), c = dim(rng);
    Matrix w = random_matrix(blocks, c, rng);
    return Case{{random_matrix(k * blocks, c, rng)},
                [k, w](const std::vector<Tensor>& x) { return ad::weighted_sum(ad::block_mean_rows(x[0], k), w); }};
  });
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  // f(x) = sum(x * x + x) uses x along three paths.
  Tensor x = ad::parameter(Matrix::Constant(2, 2, 3.0));
  ad::sum(ad::add(ad::hadamard(x, x), x)).backward();
  EXPECT_TRUE(x.grad().isApprox(Matrix::Constant(2, 2, 7.0)));
}

TEST(Autodiff, ConstantsReceiveNoGradient) {
  Tensor c = ad::constant(Matrix::Ones(2, 2));
  Tensor p = ad::parameter(Matrix::Ones(2, 2));
  ad::sum(ad::hadamard(c, p)).backward();
  EXPECT_EQ(c.grad().size(), 0);
  EXPECT_TRUE(p.grad().isApprox(Matrix::Ones(2, 2)));
}

TEST(Autodiff, EmptyMaskIsConstantZero) {
  Tensor p = ad::parameter(Matrix::Ones(2, 2));
  Tensor m = ad::masked_mean(p, Matrix::Zero(2, 2));
  EXPECT_EQ(m.scalar(), 0.0);
  EXPECT_FALSE(m.requires_grad());
}

TEST(Autodiff, ZeroRowNormalisesToFirstAxis) {
  Matrix a = Matrix::Zero(1, 3);
  Tensor n = ad::row_normalize(ad::constant(a));
  EXPECT_EQ(n.value()(0, 0), 1.0);
  EXPECT_EQ(n.value().norm(), 1.0);
}

TEST(Autodiff, BackwardRequiresScalar) {
  Tensor p = ad::parameter(Matrix::Ones(2, 2));
  EXPECT_THROW(p.backward(), ShapeError);
  EXPECT_THROW(ad::matmul(p, ad::constant(Matrix::Ones(3, 1))), ShapeError);
}

TEST(Adam, MinimisesQuadratic) {
  Tensor x = ad::parameter(Matrix::Constant(1, 3, 5.0));
  ad::Adam adam({x}, {.learning_rate = 0.1});
  for (int i = 0; i < 500; ++i) {
    adam.zero_grad();
    ad::sum(ad::square(ad::add_scalar(x, -1.0))).backward();
    adam.step();
  }
  EXPECT_NEAR(x.value()(0, 0), 1.0, 1e-3);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor x = ad::parameter(Matrix::Constant(1, 2, 0.0));
  ad::Adam adam({x}, {.learning_rate = 0.01});
  ad::weighted_sum(x, (Matrix(1, 2) << 4.0, -0.5).finished()).backward();
  adam.step();
  EXPECT_NEAR(x.value()(0, 0), -0.01, 1e-9);
  EXPECT_NEAR(x.value()(0, 1), 0.01, 1e-9);
}

TEST(Adam, ZeroLearningRateLeavesParameters) {
  Tensor x = ad::parameter(Matrix::Constant(2, 2, 0.7));
  ad::Adam adam({x}, {.learning_rate = 0.0});
  ad::sum(ad::square(x)).backward();
  adam.step();
  EXPECT_TRUE(x.value().isApprox(Matrix::Constant(2, 2, 0.7)));
}

}  // namespace
}  // namespace gftgcn
