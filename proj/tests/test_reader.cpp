#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "rankmask/bilevel.hpp"
#include "rankmask/error.hpp"
#include "rankmask/passage_mask.hpp"
#include "rankmask/reader.hpp"
#include "support.hpp"

using namespace rankmask;
using rankmask::testing::relative_error;
using rankmask::testing::tiny_task;

namespace {

ReaderConfig small_reader(bool rank_aware = false) {
  return ReaderConfig{.width = 8, .depth = 2, .rank_aware = rank_aware};
}

ad::Tensor encoded(std::span<const Example> batch, const ReaderParams& params) {
  ad::Graph g;
  return encode(batch, bind(g, params, false)).values.value();
}

ad::Tensor log_probs(std::span<const Example> batch, const ReaderParams& params, const HiddenTransform& t = {}) {
  ad::Graph g;
  const ReaderVars vars = bind(g, params, false);
  HiddenStates h = encode(batch, vars);
  if (t) h = t(h);
  return predict(h, vars).value();
}

// Values of one slot of one example from a [B, P+1, len, d] tensor.
std::vector<double> slot_values(const ad::Tensor& h, std::size_t example, std::size_t slot) {
  const std::size_t slots = h.dim(1), block = h.dim(2) * h.dim(3);
  const auto begin = h.values().begin() + static_cast<std::ptrdiff_t>((example * slots + slot) * block);
  return {begin, begin + static_cast<std::ptrdiff_t>(block)};
}

}  // namespace

TEST(Encode, OutputShape) {
  const TaskConfig c = tiny_task();
  const Dataset d = generate(c);
  const ReaderParams p = ReaderParams::init(small_reader(), c.vocab, c.classes, 1);
  const ad::Tensor h = encoded(std::span(d.train).first(3), p);
  EXPECT_EQ(h.shape(), (ad::Shape{3, c.passages + 1, c.passage_len, 8}));
}

TEST(Encode, CommutesWithPassagePermutation) {
  const TaskConfig c = tiny_task();
  const Dataset d = generate(c);
  const ReaderParams p = ReaderParams::init(small_reader(), c.vocab, c.classes, 2);
  for (std::size_t e = 0; e < 10; ++e) {
    Example swapped = d.train[e];
    std::swap(swapped.passages[0], swapped.passages[3]);
    const ad::Tensor a = encoded(std::span(&d.train[e], 1), p);
    const ad::Tensor b = encoded(std::span(&swapped, 1), p);
    EXPECT_EQ(slot_values(a, 0, 1), slot_values(b, 0, 4));
    EXPECT_EQ(slot_values(a, 0, 4), slot_values(b, 0, 1));
    EXPECT_EQ(slot_values(a, 0, 2), slot_values(b, 0, 2));
    EXPECT_EQ(slot_values(a, 0, 0), slot_values(b, 0, 0));
  }
}

TEST(Encode, IdenticalPassagesEncodeIdentically) {
  const TaskConfig c = tiny_task();
  Example ex = generate(c).train[0];
  ex.passages[2] = ex.passages[1];
  ReaderParams p = ReaderParams::init(small_reader(), c.vocab, c.classes, 3);
  p.get("embed").fill(0.0);
  const ad::Tensor h = encoded(std::span(&ex, 1), p);
  EXPECT_EQ(slot_values(h, 0, 1), slot_values(h, 0, 2));
  // With zero embeddings every passage reduces to the same bias-only state.
  EXPECT_EQ(slot_values(h, 0, 1), slot_values(h, 0, 5));
}

TEST(Encode, TokenOutsideVocabularyIsIndexError) {
  const TaskConfig c = tiny_task();
  Example ex = generate(c).train[0];
  ex.passages[0][1] = static_cast<Token>(c.vocab);
  const ReaderParams p = ReaderParams::init(small_reader(), c.vocab, c.classes, 1);
  EXPECT_THROW(encoded(std::span(&ex, 1), p), IndexError);
}

TEST(Predict, RowsAreLogDistributions) {
  const TaskConfig c = tiny_task();
  const Dataset d = generate(c);
  for (bool rank_aware : {false, true}) {
    const ReaderParams p = ReaderParams::init(small_reader(rank_aware), c.vocab, c.classes, 4);
    const ad::Tensor lp = log_probs(d.train, p);
    for (std::size_t r = 0; r < lp.dim(0); ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < lp.dim(1); ++j) total += std::exp(lp.at(r, j));
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST(Predict, ZeroedPassagesMakePredictionIndependentOfContent) {
  const TaskConfig c = tiny_task();
  const Dataset d = generate(c);
  Example a = d.train[0];
  Example b = d.train[1];
  b.question = a.question;
  ASSERT_NE(a.passages, b.passages);
  const MaskCandidate all{{1, 2, 3, 4, 5}};
  const HiddenTransform zero_all = [&](const HiddenStates& h) { return apply_candidate(h, all); };
  for (bool rank_aware : {false, true}) {
    const ReaderParams p = ReaderParams::init(small_reader(rank_aware), c.vocab, c.classes, 5);
    EXPECT_EQ(log_probs(std::span(&a, 1), p, zero_all), log_probs(std::span(&b, 1), p, zero_all));
  }
}

TEST(Predict, RankAgnosticPoolingIgnoresPassageOrder) {
  const TaskConfig c = tiny_task();
  const Dataset d = generate(c);
  const ReaderParams p = ReaderParams::init(small_reader(false), c.vocab, c.classes, 6);
  Example ex = d.train[2];
  const ad::Tensor before = log_probs(std::span(&ex, 1), p);
  std::swap(ex.passages[0], ex.passages[4]);
  const ad::Tensor after = log_probs(std::span(&ex, 1), p);
  EXPECT_LT(rankmask::testing::max_abs_diff(before, after), 1e-12);
}

TEST(Loss, GradientThroughZeroedPassageIsZero) {
  const TaskConfig c = tiny_task();
  const Dataset d = generate(c);
  const auto batch = std::span(d.train).first(2);
  const ReaderParams p = ReaderParams::init(small_reader(true), c.vocab, c.classes, 7);
  const MaskCandidate masked{{2}};

  ad::Graph g0;
  const ad::Tensor h0 = encode(batch, bind(g0, p, false)).values.value();

  auto loss_at = [&](const ad::Tensor& h) {
    ad::Graph g;
    const ReaderVars vars = bind(g, p, false);
    return loss(batch, apply_candidate(HiddenStates{g.constant(h)}, masked), vars).value().item();
  };
  ad::Graph g;
  const ReaderVars vars = bind(g, p, false);
  const ad::Var leaf = g.leaf(h0);
  g.backward(loss(batch, apply_candidate(HiddenStates{leaf}, masked), vars));
  const ad::Tensor grad = g.grad(leaf);
  const ad::Tensor fd = ad::finite_difference_grad(loss_at, h0);
  EXPECT_LT(relative_error(grad, fd), 1e-4);
  for (std::size_t e = 0; e < 2; ++e) {
    for (double v : slot_values(grad, e, 2)) EXPECT_EQ(v, 0.0);
    for (double v : slot_values(fd, e, 2)) EXPECT_EQ(v, 0.0);
  }
}

TEST(Loss, ParameterGradientsMatchFiniteDifferences) {
  TaskConfig c = tiny_task();
  const Dataset d = generate(c);
  const auto batch = std::span(d.train).first(2);
  const ReaderParams p = ReaderParams::init(ReaderConfig{.width = 4, .depth = 2, .rank_aware = true}, c.vocab,
                                            c.classes, 8);
  ad::Graph g;
  const ReaderVars vars = bind(g, p, true);
  g.backward(loss(batch, encode(batch, vars), vars));
  for (std::size_t i = 0; i < p.tensors().size(); ++i) {
    const ad::Tensor fd = ad::finite_difference_grad(
        [&](const ad::Tensor& x) {
          ReaderParams q = p;
          q.tensors()[i] = x;
          ad::Graph g2;
          const ReaderVars v2 = bind(g2, q, false);
          return loss(batch, encode(batch, v2), v2).value().item();
        },
        p.tensors()[i]);
    EXPECT_LT(relative_error(g.grad(vars.all[i]), fd), 1e-4) << p.names()[i];
  }
}

TEST(Loss, MatchesNllOfPrediction) {
  const TaskConfig c = tiny_task();
  const Dataset d = generate(c);
  const auto batch = std::span(d.train).first(5);
  const ReaderParams p = ReaderParams::init(small_reader(), c.vocab, c.classes, 9);
  const ad::Tensor lp = log_probs(batch, p);
  double expected = 0.0;
  for (std::size_t i = 0; i < 5; ++i) expected -= lp.at(i, batch[i].label);
  ad::Graph g;
  const ReaderVars vars = bind(g, p, false);
  EXPECT_NEAR(loss(batch, encode(batch, vars), vars).value().item(), expected / 5.0, 1e-12);
}

TEST(Evaluate, UntrainedBinaryReaderIsAtChance) {
  TaskConfig c;
  c.classes = 2;
  c.test_size = 2000;
  c.train_size = c.val_size = 1;
  const Dataset d = generate(c);
  const ReaderParams p = ReaderParams::init(ReaderConfig{}, c.vocab, c.classes, 10);
  const double sigma = std::sqrt(0.25 / 2000.0);
  EXPECT_NEAR(evaluate(d.test, p), 0.5, 3.0 * sigma);
}

TEST(Evaluate, ZeroingAllPassagesLeavesOnlyChance) {
  TaskConfig c;
  c.keyed_evidence = false;
  c.rank_bias = 2.0;
  c.rank_head = 4;
  c.question_len = 4;
  c.evidence_markers = 32;
  c.classes = 4;
  c.train_size = 600;
  c.val_size = 100;
  c.test_size = 2000;
  const Dataset d = generate(c);
  TrainOptions options;
  options.eval_every = 1000;
  const RunResult r = run(d, ReaderParams::init(ReaderConfig{.rank_aware = true}, c.vocab, c.classes, 11),
                          MaskParams::zeros(1, 6), default_space(c.passages),
                          Schedules::constant(0.5, 0.05, 0.9, 10, 150), options);
  ASSERT_GT(evaluate(d.test, r.params), 0.5);
  std::vector<std::size_t> all(c.passages);
  for (std::size_t i = 0; i < c.passages; ++i) all[i] = i + 1;
  const MaskCandidate everything{all};
  const double acc = evaluate(d.test, r.params, [&](const HiddenStates& h) { return apply_candidate(h, everything); });
  const double sigma = std::sqrt(0.25 * 0.75 / 2000.0);
  EXPECT_NEAR(acc, 0.25, 3.0 * sigma);
}

TEST(Evaluate, EmptySplitIsContractError) {
  const TaskConfig c = tiny_task();
  const ReaderParams p = ReaderParams::init(small_reader(), c.vocab, c.classes, 1);
  EXPECT_THROW(evaluate(std::span<const Example>{}, p), ContractError);
}

TEST(Evaluate, IsAPureFunction) {
  const TaskConfig c = tiny_task();
  const Dataset d = generate(c);
  const ReaderParams p = ReaderParams::init(small_reader(true), c.vocab, c.classes, 12);
  const Score a = score(d.test, p), b = score(d.test, p);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.loss, b.loss);
}

TEST(Training, FullBatchDescentDecreasesLossMonotonically) {
  TaskConfig c = tiny_task();
  const Dataset d = generate(c);
  const auto batch = std::span(d.train).first(10);
  ReaderParams p = ReaderParams::init(small_reader(), c.vocab, c.classes, 13);
  double previous = INFINITY;
  for (int step = 0; step < 50; ++step) {
    ad::Graph g;
    const ReaderVars vars = bind(g, p, true);
    const ad::Var l = loss(batch, encode(batch, vars), vars);
    g.backward(l);
    EXPECT_LT(l.value().item(), previous) << "step " << step;
    previous = l.value().item();
    for (std::size_t i = 0; i < p.tensors().size(); ++i) {
      const ad::Tensor grad = g.grad(vars.all[i]);
      for (std::size_t k = 0; k < grad.size(); ++k) p.tensors()[i][k] -= 0.05 * grad[k];
    }
  }
}

TEST(Params, CountDependsOnlyOnShapes) {
  const ReaderParams a = ReaderParams::init(small_reader(), 40, 4, 1);
  const ReaderParams b = ReaderParams::init(small_reader(), 40, 4, 2);
  EXPECT_EQ(a.parameter_count(), b.parameter_count());
  EXPECT_NE(a, b);
  const std::size_t d = 8;
  EXPECT_EQ(a.parameter_count(), 40 * d + 3 * d * d + d + d * d + d + d * d + d + d + d * 4 + 4);
  EXPECT_EQ(ReaderParams::init(small_reader(true), 40, 4, 1).parameter_count(), a.parameter_count() + d * d);
}

TEST(Params, InitIsBoundedBySqrtWidth) {
  const ReaderParams p = ReaderParams::init(ReaderConfig{.embed_scale = 1.0}, 50, 3, 4);
  for (const ad::Tensor& t : p.tensors()) {
    for (double v : t.values()) EXPECT_LE(std::abs(v), 1.0 / std::sqrt(32.0));
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Checkpoint ckpt{ReaderParams::init(small_reader(true), 40, 4, 14), ad::Tensor({1, 3}, {0.1, -2.5e-7, 3.0}),
                  {{1, 2}, {3}, {}}};
  std::ostringstream out;
  save_checkpoint(ckpt, out);
  std::istringstream in(out.str());
  const Checkpoint back = load_checkpoint(in);
  EXPECT_EQ(back, ckpt);
}

TEST(Checkpoint, RejectsWrongLayout) {
  Checkpoint ckpt{ReaderParams::init(small_reader(), 40, 4, 14), {}, {}};
  std::ostringstream out;
  save_checkpoint(ckpt, out);
  std::string text = out.str();
  const auto pos = text.find("depth=2");
  text.replace(pos, 7, "depth=1");
  std::istringstream in(text);
  EXPECT_THROW(load_checkpoint(in), IoError);
}
