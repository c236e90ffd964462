// Copyright 2026 The svlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "svlab/errors.h"
#include "svlab/tensor.h"
#include "tests/gradcheck.h"

namespace svlab {
namespace {

using testing::grad_check;
using testing::random_tensor;

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Weighted sum so every output entry carries a distinct gradient.
Tensor weighted_sum(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

TEST(Elementwise, AddMatchesArithmetic) {
  Tensor a({2}, {1, 2});
  Tensor b({2}, {3, 4});
  EXPECT_EQ(values(add(a, b)), (std::vector<double>{4, 6}));
}

TEST(Elementwise, MulByOneIsIdentityWithUnitGradient) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({3, 4}, rng);
  x.set_requires_grad(true);
  Tape tape;
  Tensor y = mul(x, 1.0);
  EXPECT_EQ(values(y), values(x));
  tape.backward(sum(y));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Elementwise, BroadcastGradientSumsOverExpandedAxis) {
  std::mt19937_64 rng(2);
  Tensor a = random_tensor({2, 3, 1}, rng);
  Tensor b = random_tensor({3, 4}, rng);
  Tensor w = random_tensor({2, 3, 4}, rng);
  Tensor out = add(a, b);
  EXPECT_EQ(out.shape(), (Shape{2, 3, 4}));
  auto report = grad_check([&] { return weighted_sum(add(a, b), w); }, {a, b});
  EXPECT_LT(report.max_rel_error, 1e-6);
  // d/db of sum(w * (a + b)) is w summed over axis 0.
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_NEAR(b.grad()[i * 4 + j], w.at({0, i, j}) + w.at({1, i, j}), 1e-12);
    }
  }
}

TEST(Elementwise, IncompatibleShapesThrow) {
  EXPECT_THROW(add(Tensor({2, 3}), Tensor({4})), ShapeError);
  EXPECT_THROW(mul(Tensor({2, 3}), Tensor({3, 2})), ShapeError);
}

TEST(Elementwise, BroadcastGradientConservation) {
  // The gradient mass landing on a broadcast operand equals the mass on its
  // explicitly expanded copy.
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor small = random_tensor({3, 1}, rng);
    Tensor big = random_tensor({2, 3, 5}, rng);
    Tensor w = random_tensor({2, 3, 5}, rng);
    Tensor expanded = mul(small, Tensor::ones({2, 3, 5})).clone();
    small.set_requires_grad(true);
    expanded.set_requires_grad(true);
    {
      Tape tape;
      tape.backward(weighted_sum(mul(big, small), w));
    }
    {
      Tape tape;
      tape.backward(weighted_sum(mul(big, expanded), w));
    }
    double s1 = 0, s2 = 0;
    for (double g : small.grad()) s1 += g;
    for (double g : expanded.grad()) s2 += g;
    EXPECT_NEAR(s1, s2, 1e-12);
  }
}

TEST(Matmul, IdentityAndHandProduct) {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(values(matmul(eye, m)), values(m));
  Tensor v({2, 1}, {5, 6});
  EXPECT_EQ(values(matmul(m, v)), (std::vector<double>{17, 39}));
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  Tensor a = random_tensor({3, 5}, rng);
  Tensor b = random_tensor({5, 2}, rng);
  auto report = grad_check([&] { return sum(matmul(a, b)); }, {a, b});
  EXPECT_LE(report.max_rel_error, 1e-6);
}

TEST(Matmul, DimensionMismatchThrows) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
}

// Naive nested-loop 1D convolution used as an oracle.
std::vector<double> naive_conv1d(const Tensor& x, const Tensor& w, std::size_t dilation) {
  const std::size_t cin = x.dim(0), t = x.dim(1), cout = w.dim(0), k = w.dim(2);
  const long pad = static_cast<long>(dilation * (k - 1) / 2);
  std::vector<double> out(cout * t, 0.0);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t j = 0; j < k; ++j) {
          const long src = static_cast<long>(i) + static_cast<long>(j * dilation) - pad;
          if (src >= 0 && src < static_cast<long>(t)) out[o * t + i] += w.at({o, c, j}) * x.at({c, static_cast<std::size_t>(src)});
        }
  return out;
}

TEST(Conv1d, CenterImpulseKernelIsIdentity) {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({3, 7}, rng);
  Tensor w({3, 3, 3}, 0.0);
  for (std::size_t c = 0; c < 3; ++c) w.mutable_data()[(c * 3 + c) * 3 + 1] = 1.0;
  EXPECT_EQ(values(conv1d(x, w, Tensor(), 1)), values(x));
}

TEST(Conv1d, OnesKernelZeroPadded) {
  Tensor x({1, 3}, {1, 2, 3});
  Tensor w({1, 1, 3}, {1, 1, 1});
  EXPECT_EQ(values(conv1d(x, w, Tensor(), 1)), (std::vector<double>{3, 6, 5}));
}

TEST(Conv1d, DilationMatchesNaiveOracle) {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({2, 5}, rng);
  Tensor w = random_tensor({3, 2, 3}, rng);
  auto got = values(conv1d(x, w, Tensor(), 2));
  auto want = naive_conv1d(x, w, 2);
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Conv1d, EvenKernelRejected) {
  EXPECT_THROW(conv1d(Tensor({1, 4}), Tensor({1, 1, 2}), Tensor(), 1), ConfigError);
}

TEST(Conv1d, BatchedGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({2, 3, 6}, rng);
  Tensor w = random_tensor({4, 3, 3}, rng);
  Tensor b = random_tensor({4}, rng);
  Tensor wout = random_tensor({2, 4, 6}, rng);
  auto report = grad_check([&] { return weighted_sum(conv1d(x, w, b, 2), wout); }, {x, w, b});
  EXPECT_LE(report.max_rel_error, 1e-6);
  Tensor w1 = random_tensor({4, 3, 1}, rng);
  report = grad_check([&] { return weighted_sum(conv1d(x, w1, b, 1), wout); }, {x, w1, b});
  EXPECT_LE(report.max_rel_error, 1e-6);
}

std::vector<double> naive_conv2d(const Tensor& x, const Tensor& w, Stride2d s) {
  const std::size_t cin = x.dim(0), f = x.dim(1), t = x.dim(2);
  const std::size_t cout = w.dim(0), kf = w.dim(2), kt = w.dim(3);
  const std::size_t fo = (f + s.freq - 1) / s.freq, to = (t + s.time - 1) / s.time;
  std::vector<double> out(cout * fo * to, 0.0);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t i = 0; i < fo; ++i)
      for (std::size_t j = 0; j < to; ++j)
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t a = 0; a < kf; ++a)
            for (std::size_t b = 0; b < kt; ++b) {
              const long fi = static_cast<long>(i * s.freq + a) - static_cast<long>(kf / 2);
              const long ti = static_cast<long>(j * s.time + b) - static_cast<long>(kt / 2);
              if (fi < 0 || ti < 0 || fi >= static_cast<long>(f) || ti >= static_cast<long>(t)) continue;
              out[(o * fo + i) * to + j] +=
                  w.at({o, c, a, b}) * x.at({c, static_cast<std::size_t>(fi), static_cast<std::size_t>(ti)});
            }
  return out;
}

TEST(Conv2d, PointwiseUnitKernelIsIdentity) {
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({1, 4, 5}, rng);
  EXPECT_EQ(values(conv2d(x, Tensor({1, 1, 1, 1}, 1.0), Tensor())), values(x));
}

TEST(Conv2d, FrequencyStrideHalvesEighty) {
  Tensor y = conv2d(Tensor({1, 80, 7}, 1.0), Tensor({2, 1, 3, 3}, 0.1), Tensor(), {2, 1});
  EXPECT_EQ(y.shape(), (Shape{2, 40, 7}));
}

TEST(Conv2d, OnesKernelOnOnesInput) {
  Tensor y = conv2d(Tensor({1, 3, 3}, 1.0), Tensor({1, 1, 3, 3}, 1.0), Tensor());
  EXPECT_EQ(y.at({0, 1, 1}), 9.0);
  EXPECT_EQ(y.at({0, 0, 0}), 4.0);
  EXPECT_EQ(y.at({0, 2, 2}), 4.0);
  EXPECT_EQ(y.at({0, 0, 2}), 4.0);
  EXPECT_EQ(y.at({0, 0, 1}), 6.0);
}

TEST(Conv2d, StridedMatchesNaiveOracle) {
  std::mt19937_64 rng(9);
  Tensor x = random_tensor({2, 7, 6}, rng);
  Tensor w = random_tensor({3, 2, 3, 5}, rng);
  for (Stride2d s : {Stride2d{1, 1}, Stride2d{2, 1}, Stride2d{2, 2}, Stride2d{3, 2}}) {
    auto got = values(conv2d(x, w, Tensor(), s));
    auto want = naive_conv2d(x, w, s);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Conv2d, EvenKernelRejected) {
  EXPECT_THROW(conv2d(Tensor({1, 4, 4}), Tensor({1, 1, 2, 3}), Tensor()), ConfigError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  Tensor x = random_tensor({2, 2, 5, 4}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  Tensor b = random_tensor({3}, rng);
  Tensor wout = random_tensor({2, 3, 3, 4}, rng);
  auto report = grad_check([&] { return weighted_sum(conv2d(x, w, b, {2, 1}), wout); }, {x, w, b});
  EXPECT_LE(report.max_rel_error, 1e-6);
}

TEST(Activations, KnownValues) {
  EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  Tensor sm = softmax(Tensor({5}, 3.7), 0);
  for (double v : sm.data()) EXPECT_NEAR(v, 0.2, 1e-15);
  EXPECT_EQ(relu(Tensor({2}, {-1.0, 2.0})).data()[0], 0.0);
}

TEST(Activations, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({4, 6}, rng, -5, 5);
  Tensor y = softmax(x, 1);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 6; ++c) s += y.at({r, c});
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
}

TEST(Activations, BackwardMatchesFiniteDifferencesAtRandomPoints) {
  std::mt19937_64 rng(12);
  // 100 points per activation, resampled away from the ReLU kink.
  auto points = [&](double lo, double hi) {
    Tensor t = random_tensor({100}, rng, lo, hi);
    for (double& v : t.mutable_data()) {
      while (std::abs(v) < 1e-3) v = std::uniform_real_distribution<double>(lo, hi)(rng);
    }
    return t;
  };
  Tensor w = random_tensor({100}, rng);
  const std::vector<std::pair<const char*, std::function<Tensor(const Tensor&)>>> acts = {
      {"relu", [](const Tensor& x) { return relu(x); }},
      {"sigmoid", [](const Tensor& x) { return sigmoid(x); }},
      {"tanh", [](const Tensor& x) { return tanh(x); }},
      {"exp", [](const Tensor& x) { return exp(x); }},
      {"square", [](const Tensor& x) { return square(x); }},
      {"softmax", [](const Tensor& x) { return softmax(reshape(x, {10, 10}), 1); }},
      {"log_softmax", [](const Tensor& x) { return log_softmax(reshape(x, {10, 10}), 0); }},
  };
  for (const auto& [name, fn] : acts) {
    Tensor x = points(-3, 3);
    auto report = grad_check([&] { return sum(mul(reshape(fn(x), {100}), w)); }, {x});
    EXPECT_LE(report.max_rel_error, 1e-6) << name;
  }
  Tensor pos = points(0.05, 4);
  EXPECT_LE(grad_check([&] { return sum(mul(log(pos), w)); }, {pos}).max_rel_error, 1e-6);
  EXPECT_LE(grad_check([&] { return sum(mul(sqrt(pos), w)); }, {pos}).max_rel_error, 1e-6);
}

TEST(Activations, LogAndSqrtDomain) {
  EXPECT_THROW(log(Tensor({2}, {1.0, -0.5})), DomainError);
  EXPECT_THROW(sqrt(Tensor({1}, {-1e-3})), DomainError);
  EXPECT_NEAR(log(Tensor::scalar(0.0)).item(), std::log(1e-10), 1e-12);
  EXPECT_NEAR(sqrt(Tensor::scalar(0.0)).item(), 1e-5, 1e-18);
}

TEST(Reductions, MeanVarianceMaxAndShapes) {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(values(mean(x, {1})), (std::vector<double>{2, 5}));
  EXPECT_EQ(mean(x, {0}, true).shape(), (Shape{1, 3}));
  EXPECT_NEAR(variance(x, {1}).data()[0], 2.0 / 3.0, 1e-15);
  EXPECT_EQ(sum(x).item(), 21.0);
  Tensor tie({1, 3}, {2, 5, 5});
  tie.set_requires_grad(true);
  Tape tape;
  Tensor m = max(tie, 1);
  EXPECT_EQ(m.item(), 5.0);
  tape.backward(sum(m));
  EXPECT_EQ(values(tie.grad_tensor()), (std::vector<double>{0, 1, 0}));
}

TEST(Reductions, ComposedGradients) {
  std::mt19937_64 rng(13);
  Tensor x = random_tensor({3, 4, 5}, rng);
  Tensor w = random_tensor({4}, rng);
  auto report = grad_check(
      [&] {
        Tensor v = variance(x, {0, 2});
        Tensor m = mean(x, {0, 2});
        return sum(mul(add(v, m), w));
      },
      {x});
  EXPECT_LE(report.max_rel_error, 1e-6);
}

TEST(Shapes, ConcatSliceReshapeRoundTrip) {
  std::mt19937_64 rng(14);
  Tensor a = random_tensor({2, 3, 4}, rng);
  Tensor b = random_tensor({2, 2, 4}, rng);
  Tensor c = concat({a, b}, 1);
  EXPECT_EQ(c.shape(), (Shape{2, 5, 4}));
  EXPECT_EQ(values(slice(c, 1, 0, 3)), values(a));
  EXPECT_EQ(values(slice(c, 1, 3, 2)), values(b));
  EXPECT_THROW(slice(c, 1, 4, 2), ShapeError);
  EXPECT_THROW(reshape(c, {3, 3}), ShapeError);
  Tensor w = random_tensor({5, 4}, rng);
  auto report = grad_check(
      [&] { return sum(mul(reshape(concat({slice(a, 2, 1, 2), slice(b, 2, 0, 2)}, 1), {5, 4}), w)); },
      {a, b});
  EXPECT_LE(report.max_rel_error, 1e-6);
}

TEST(Loss, CrossEntropyMatchesScalarFormula) {
  Tensor logits({2, 3}, {1.0, 2.0, 0.5, -1.0, 0.0, 3.0});
  std::vector<std::size_t> labels{1, 0};
  double expect = 0.0;
  expect += -(2.0 - std::log(std::exp(1.0) + std::exp(2.0) + std::exp(0.5)));
  expect += -(-1.0 - std::log(std::exp(-1.0) + std::exp(0.0) + std::exp(3.0)));
  EXPECT_NEAR(cross_entropy(logits, labels).item(), expect / 2.0, 1e-14);
  std::vector<std::size_t> bad{3, 0};
  EXPECT_THROW(cross_entropy(logits, bad), DataError);
  auto report = grad_check([&] { return cross_entropy(logits, labels); }, {logits});
  EXPECT_LE(report.max_rel_error, 1e-6);
}

TEST(BatchNorm, TrainingNormalizesPerChannel) {
  std::mt19937_64 rng(15);
  Tensor x = random_tensor({4, 3, 10}, rng, -2, 5);
  Tensor gamma = Tensor::ones({3}), beta = Tensor::zeros({3});
  Tensor rm = Tensor::zeros({3}), rv = Tensor::ones({3});
  Tensor y = batchnorm(x, gamma, beta, rm, rv, true);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t t = 0; t < 10; ++t) m += y.at({b, c, t});
    m /= 40;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t t = 0; t < 10; ++t) v += std::pow(y.at({b, c, t}) - m, 2);
    v /= 40;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);
    EXPECT_NE(rm.data()[c], 0.0);  // running stats moved by momentum 0.1
  }
  // Eval mode with identity running stats leaves input untouched up to eps.
  Tensor rm0 = Tensor::zeros({3}), rv1 = Tensor::ones({3});
  Tensor z = batchnorm(x, gamma, beta, rm0, rv1, false);
  EXPECT_NEAR(z.data()[0], x.data()[0] / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(BatchNorm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(16);
  Tensor x = random_tensor({3, 2, 4}, rng);
  Tensor gamma = random_tensor({2}, rng, 0.5, 1.5), beta = random_tensor({2}, rng);
  Tensor rm = Tensor::zeros({2}), rv = Tensor::ones({2});
  Tensor w = random_tensor({3, 2, 4}, rng);
  for (bool training : {true, false}) {
    auto report = grad_check(
        [&] { return sum(mul(batchnorm(x, gamma, beta, rm, rv, training), w)); }, {x, gamma, beta});
    EXPECT_LE(report.max_rel_error, 1e-6) << "training=" << training;
  }
}

TEST(Backward, SumAndSquare) {
  std::mt19937_64 rng(17);
  Tensor x = random_tensor({2, 3}, rng);
  x.set_requires_grad(true);
  {
    Tape tape;
    tape.backward(sum(x));
  }
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  x.zero_grad();
  {
    Tape tape;
    tape.backward(sum(mul(x, x)));
  }
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(x.grad()[i], 2.0 * x.data()[i]);
}

TEST(Backward, RejectsNonScalarAndUnrecordedLoss) {
  Tensor x({3}, 1.0);
  x.set_requires_grad(true);
  Tape tape;
  EXPECT_THROW(tape.backward(mul(x, 2.0)), UsageError);
  EXPECT_THROW(tape.backward(Tensor::scalar(1.0)), UsageError);
}

TEST(Backward, EveryParticipatingTensorGetsGradient) {
  Tensor x({2}, {1.0, 2.0});
  Tensor unused({2}, {3.0, 4.0});
  x.set_requires_grad(true);
  unused.set_requires_grad(true);
  Tape tape;
  Tensor side = mul(unused, 2.0);  // recorded but not part of the loss
  Tensor loss = sum(mul(x, 3.0));
  tape.backward(loss);
  EXPECT_TRUE(side.has_grad());
  EXPECT_TRUE(unused.has_grad());
  EXPECT_EQ(unused.grad()[0], 0.0);
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Backward, NoTapeOrGuardMeansNoRecording) {
  Tensor x({2}, 1.0);
  x.set_requires_grad(true);
  Tensor y = mul(x, 2.0);
  EXPECT_FALSE(y.requires_grad());
  Tape tape;
  {
    NoGradGuard guard;
    EXPECT_FALSE(mul(x, 2.0).requires_grad());
  }
  EXPECT_TRUE(mul(x, 2.0).requires_grad());
}

// conv -> BN -> ReLU -> squeeze-excitation, assembled from raw ops.
TEST(Backward, CompositeBlockMatchesFiniteDifferences) {
  std::mt19937_64 rng(18);
  Tensor x = random_tensor({2, 3, 8}, rng);
  Tensor w = random_tensor({4, 3, 3}, rng);
  Tensor gamma = random_tensor({4}, rng, 0.5, 1.5), beta = random_tensor({4}, rng);
  Tensor rm = Tensor::zeros({4}), rv = Tensor::ones({4});
  Tensor w1 = random_tensor({2, 4}, rng), b1 = random_tensor({2}, rng);
  Tensor w2 = random_tensor({4, 2}, rng), b2 = random_tensor({4}, rng);
  Tensor wout = random_tensor({2, 4, 8}, rng);
  auto f = [&] {
    Tensor h = relu(batchnorm(conv1d(x, w, Tensor(), 1), gamma, beta, rm, rv, true));
    Tensor z = mean(h, {2});
    Tensor e = relu(add(matmul(z, transpose(w1)), b1));
    Tensor s = sigmoid(add(matmul(e, transpose(w2)), b2));
    return sum(mul(mul(h, reshape(s, {2, 4, 1})), wout));
  };
  auto report = grad_check(f, {x, w, gamma, beta, w1, b1, w2, b2});
  EXPECT_LE(report.max_rel_error, 1e-4);
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalResults) {
  auto run = [] {
    std::mt19937_64 rng(19);
    Tensor x = random_tensor({2, 3, 9}, rng);
    Tensor w = random_tensor({5, 3, 3}, rng);
    w.set_requires_grad(true);
    Tape tape;
    Tensor y = tanh(conv1d(x, w, Tensor(), 2));
    tape.backward(sum(square(y)));
    std::vector<double> out = values(y);
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace svlab
