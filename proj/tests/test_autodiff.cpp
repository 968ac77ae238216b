#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rankmask/autodiff.hpp"
#include "rankmask/error.hpp"
#include "support.hpp"

using namespace rankmask;
using namespace rankmask::ad;
using rankmask::testing::random_tensor;
using rankmask::testing::relative_error;

namespace {

Tensor forward(const std::function<Var(Graph&)>& build) {
  Graph g;
  return build(g).value();
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Graph g;
  Var a = g.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  Var b = g.constant(Tensor({2, 2}, {3, 4, 5, 6}));
  EXPECT_EQ(matmul(a, b).value(), Tensor({2, 2}, {3, 4, 5, 6}));
}

TEST(Matmul, RowTimesColumn) {
  Graph g;
  Var out = matmul(g.constant(Tensor({1, 2}, {1, 2})), g.constant(Tensor({2, 1}, {3, 4})));
  EXPECT_EQ(out.value(), Tensor({1, 1}, {11}));
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(3);
  const Tensor a = random_tensor({4, 3}, rng), b = random_tensor({3, 2}, rng);
  Graph g;
  const Tensor got = matmul(g.constant(a), g.constant(b)).value();
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < 3; ++p) acc += a.at(i, p) * b.at(p, j);
      EXPECT_NEAR(got.at(i, j), acc, 1e-14);
    }
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph g;
  Var a = g.constant(Tensor({2, 3}));
  Var b = g.constant(Tensor({4, 2}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(shape_string({2, 3})), std::string::npos) << msg;
    EXPECT_NE(msg.find(shape_string({4, 2})), std::string::npos) << msg;
  }
}

TEST(Softmax, UniformOnEqualInputs) {
  const Tensor p = forward([](Graph& g) { return softmax_rows(g.constant(Tensor({3}, {0, 0, 0}))); });
  for (double v : p.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, ClosedForm) {
  const Tensor p = forward([](Graph& g) { return softmax_rows(g.constant(Tensor({3}, {std::log(2.0), 0, 0}))); });
  EXPECT_NEAR(p[0], 0.5, 1e-15);
  EXPECT_NEAR(p[1], 0.25, 1e-15);
  EXPECT_NEAR(p[2], 0.25, 1e-15);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  const Tensor p = forward([](Graph& g) { return softmax_rows(g.constant(Tensor({2}, {1000, 0}))); });
  EXPECT_TRUE(p.all_finite());
  EXPECT_NEAR(p[0], 1.0, 1e-15);
  EXPECT_NEAR(p[1], 0.0, 1e-15);
}

TEST(Softmax, EmptyLastAxisIsDimensionError) {
  Graph g;
  EXPECT_THROW(softmax_rows(g.constant(Tensor({2, 0}))), DimensionError);
}

TEST(Softmax, RowsSumToOneAndIgnoreShifts) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const Tensor x = random_tensor({4, 7}, rng, -30.0, 30.0);
    Tensor shifted = x;
    for (std::size_t r = 0; r < 4; ++r) {
      const double c = 50.0 * (rng.uniform() - 0.5);
      for (std::size_t j = 0; j < 7; ++j) shifted.at(r, j) += c;
    }
    Graph g;
    const Tensor p = softmax_rows(g.constant(x)).value();
    const Tensor q = softmax_rows(g.constant(shifted)).value();
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_GE(p.at(r, j), 0.0);
        total += p.at(r, j);
        EXPECT_NEAR(p.at(r, j), q.at(r, j), 1e-12);
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(NllLoss, ConfidentCorrectClassIsNearZero) {
  Graph g;
  const std::vector<std::size_t> label{0};
  Var lp = log_softmax_rows(g.constant(Tensor({3}, {60, 0, 0})));
  EXPECT_LE(nll_loss(lp, label).value().item(), 1e-9);
}

TEST(NllLoss, UniformGivesLogC) {
  for (std::size_t c : {2u, 5u, 8u}) {
    Graph g;
    const std::vector<std::size_t> label{c - 1};
    Var lp = g.constant(Tensor({c}, -std::log(static_cast<double>(c))));
    EXPECT_NEAR(nll_loss(lp, label).value().item(), std::log(static_cast<double>(c)), 1e-12);
  }
}

TEST(NllLoss, MatchesDirectIndexing) {
  Rng rng(11);
  const Tensor x = random_tensor({5, 6}, rng);
  const std::vector<std::size_t> labels{0, 3, 5, 2, 2};
  Graph g;
  Var lp = log_softmax_rows(g.constant(x));
  double expected = 0.0;
  for (std::size_t r = 0; r < 5; ++r) {
    double z = 0.0;
    for (std::size_t j = 0; j < 6; ++j) z += std::exp(x.at(r, j));
    expected += -std::log(std::exp(x.at(r, labels[r])) / z);
  }
  EXPECT_NEAR(nll_loss(lp, labels).value().item(), expected / 5.0, 1e-12);
}

TEST(NllLoss, LabelOutOfRangeIsIndexError) {
  Graph g;
  const std::vector<std::size_t> label{3};
  EXPECT_THROW(nll_loss(g.constant(Tensor({3}, -std::log(3.0))), label), IndexError);
}

TEST(NllLoss, RejectsInputThatIsNotALogDistribution) {
  Graph g;
  const std::vector<std::size_t> label{0};
  EXPECT_THROW(nll_loss(g.constant(Tensor({3}, {0.0, 0.0, 0.0})), label), ContractError);
}

TEST(Backward, SumGivesOnes) {
  Graph g;
  Var x = g.leaf(Tensor({2, 3, 2}, 0.7));
  g.backward(sum(x));
  EXPECT_EQ(g.grad(x), Tensor({2, 3, 2}, 1.0));
}

TEST(Backward, SquareOfThree) {
  Graph g;
  Var x = g.leaf(Tensor::scalar(3.0));
  g.backward(mul(x, x));
  EXPECT_EQ(g.grad(x).item(), 6.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  Graph g;
  Var x = g.leaf(Tensor({2}, {1, 2}));
  EXPECT_THROW(g.backward(scale(x, 2.0)), ContractError);
}

TEST(Backward, UnreachableNodeHasZeroGradient) {
  Graph g;
  Var x = g.leaf(Tensor({2}, {1, 2}));
  Var y = g.leaf(Tensor({2}, {3, 4}));
  g.backward(sum(x));
  EXPECT_EQ(g.grad(y), Tensor({2}, 0.0));
}

TEST(Backward, EveryReachableNodeGetsGradientOfItsShape) {
  Graph g;
  Var x = g.leaf(Tensor({2, 3}, 0.5));
  Var w = g.leaf(Tensor({3, 4}, 0.25));
  Var h = tanh(matmul(x, w));
  Var loss = mean(h);
  g.backward(loss);
  for (Var v : {x, w, h, loss}) EXPECT_EQ(g.grad(v).shape(), v.shape());
}

TEST(FiniteDifference, SumOfSquares) {
  const Tensor fd = finite_difference_grad(
      [](const Tensor& x) {
        double s = 0.0;
        for (double v : x.values()) s += v * v;
        return s;
      },
      Tensor({2}, {1, 2}));
  EXPECT_NEAR(fd[0], 2.0, 1e-6);
  EXPECT_NEAR(fd[1], 4.0, 1e-6);
}

TEST(FiniteDifference, ConstantFunctionHasZeroGradient) {
  const Tensor fd = finite_difference_grad([](const Tensor&) { return 4.2; }, Tensor({3}, {1, 2, 3}));
  EXPECT_EQ(fd, Tensor({3}, 0.0));
}

namespace {

struct OpCase {
  std::string name;
  std::vector<Shape> inputs;
  std::function<Var(Graph&, const std::vector<Var>&)> build;
};

std::vector<OpCase> op_cases() {
  static const std::vector<std::size_t> rows{2, 0, 2, 5};
  static const std::vector<std::size_t> labels{1, 0, 4};
  static const std::vector<std::size_t> zeroed{0, 2};
  return {
      {"matmul", {{3, 4}, {4, 2}}, [](Graph&, const std::vector<Var>& v) { return matmul(v[0], v[1]); }},
      {"bmm", {{2, 3, 4}, {2, 4, 3}}, [](Graph&, const std::vector<Var>& v) { return bmm(v[0], v[1]); }},
      {"add", {{3, 4}, {3, 4}}, [](Graph&, const std::vector<Var>& v) { return add(v[0], v[1]); }},
      {"add_broadcast", {{2, 3, 4}, {3, 1}}, [](Graph&, const std::vector<Var>& v) { return add(v[0], v[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](Graph&, const std::vector<Var>& v) { return mul(v[0], v[1]); }},
      {"mul_broadcast", {{2, 3, 4}, {4}}, [](Graph&, const std::vector<Var>& v) { return mul(v[0], v[1]); }},
      {"mul_middle", {{2, 3, 4}, {2, 1, 4}}, [](Graph&, const std::vector<Var>& v) { return mul(v[0], v[1]); }},
      {"scale", {{5}}, [](Graph&, const std::vector<Var>& v) { return scale(v[0], -1.7); }},
      {"tanh", {{3, 3}}, [](Graph&, const std::vector<Var>& v) { return tanh(v[0]); }},
      {"sum", {{2, 3}}, [](Graph&, const std::vector<Var>& v) { return sum(v[0]); }},
      {"mean", {{2, 3}}, [](Graph&, const std::vector<Var>& v) { return mean(v[0]); }},
      {"softmax_rows", {{3, 5}}, [](Graph&, const std::vector<Var>& v) { return softmax_rows(v[0]); }},
      {"log_softmax_rows", {{3, 5}}, [](Graph&, const std::vector<Var>& v) { return log_softmax_rows(v[0]); }},
      {"nll_loss", {{3, 5}}, [](Graph&, const std::vector<Var>& v) { return nll_loss(log_softmax_rows(v[0]), labels); }},
      {"gather_rows", {{6, 3}}, [](Graph&, const std::vector<Var>& v) { return gather_rows(v[0], rows); }},
      {"reshape", {{2, 6}}, [](Graph&, const std::vector<Var>& v) { return reshape(v[0], {3, 4}); }},
      {"concat", {{2, 3}, {2, 2}},
       [](Graph&, const std::vector<Var>& v) {
         const std::vector<Var> parts{v[0], v[1]};
         return concat(parts, 1);
       }},
      {"zero_mask", {{2, 4, 3}}, [](Graph&, const std::vector<Var>& v) { return zero_mask(v[0], 1, zeroed); }},
      {"select_row", {{3, 4}}, [](Graph&, const std::vector<Var>& v) { return select_row(v[0], 1); }},
  };
}

// Projects an op output onto fixed random weights so every output entry
// contributes to the scalar under test.
double projected(const OpCase& op, const std::vector<Tensor>& inputs, const Tensor& weights) {
  Graph g;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(g.constant(t));
  return sum(mul(op.build(g, vars), g.constant(weights))).value().item();
}

}  // namespace

TEST(GradientCheck, EveryOpMatchesCentralDifferencesOverManySeeds) {
  for (const OpCase& op : op_cases()) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(seed, 1);
      std::vector<Tensor> inputs;
      for (const Shape& s : op.inputs) inputs.push_back(random_tensor(s, rng));

      Graph g;
      std::vector<Var> vars;
      for (const Tensor& t : inputs) vars.push_back(g.leaf(t));
      Var out = op.build(g, vars);
      const Tensor weights = random_tensor(out.shape(), rng);
      g.backward(sum(mul(out, g.constant(weights))));

      for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor fd = finite_difference_grad(
            [&](const Tensor& x) {
              std::vector<Tensor> moved = inputs;
              moved[i] = x;
              return projected(op, moved, weights);
            },
            inputs[i], 1e-5);
        ASSERT_LT(relative_error(g.grad(vars[i]), fd), 1e-4) << op.name << " input " << i << " seed " << seed;
      }
    }
  }
}

TEST(Determinism, ForwardAndBackwardAreBitIdentical) {
  auto once = [] {
    Rng rng(99);
    Graph g;
    Var x = g.leaf(random_tensor({4, 6}, rng));
    Var w = g.leaf(random_tensor({6, 3}, rng));
    const std::vector<std::size_t> labels{0, 1, 2, 1};
    Var loss = nll_loss(log_softmax_rows(tanh(matmul(x, w))), labels);
    g.backward(loss);
    return std::vector<Tensor>{loss.value(), g.grad(x), g.grad(w)};
  };
  EXPECT_EQ(once(), once());
}

TEST(Forward, FiniteInputsGiveFiniteOutputs) {
  Rng rng(5);
  Graph g;
  Var x = g.constant(random_tensor({3, 8}, rng, -500.0, 500.0));
  EXPECT_TRUE(softmax_rows(x).value().all_finite());
  EXPECT_TRUE(log_softmax_rows(x).value().all_finite());
  EXPECT_TRUE(tanh(x).value().all_finite());
}
