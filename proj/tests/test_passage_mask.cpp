#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "rankmask/error.hpp"
#include "rankmask/passage_mask.hpp"
#include "support.hpp"

using namespace rankmask;
using rankmask::testing::random_tensor;
using rankmask::testing::relative_error;

namespace {

// [B, P+1, len, d] with P = 4.
ad::Tensor random_hidden(std::uint64_t seed, std::size_t batch = 2) {
  Rng rng(seed);
  return random_tensor({batch, 5, 3, 2}, rng);
}

ad::Tensor apply(const ad::Tensor& h, const MaskCandidate& o, bool rescale = false) {
  ad::Graph g;
  return apply_candidate(HiddenStates{g.constant(h)}, o, rescale).values.value();
}

ad::Tensor mix(const ad::Tensor& h, const ad::Tensor& w, const CandidateSpace& space, std::size_t s = 0) {
  ad::Graph g;
  return relaxed_mix(HiddenStates{g.constant(h)}, g.constant(w), space, s).values.value();
}

// Entry (e, slot, i) of a [B, P+1, len, d] tensor, i indexing len*d.
double at(const ad::Tensor& h, std::size_t e, std::size_t slot, std::size_t i) {
  const std::size_t block = h.dim(2) * h.dim(3);
  return h[(e * h.dim(1) + slot) * block + i];
}

}  // namespace

TEST(DefaultSpace, HoldsTheSixPairsOfTheTopFourInOrder) {
  const CandidateSpace space = default_space(10);
  ASSERT_EQ(space.size(), 6u);
  const std::vector<std::vector<std::size_t>> expected{{1, 2}, {1, 3}, {1, 4}, {2, 3}, {2, 4}, {3, 4}};
  EXPECT_EQ(space.positions(), expected);
  EXPECT_EQ(space[1].positions, (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(space[1].label(), "(1,3)");
}

TEST(DefaultSpace, EveryTopRankAppearsInThreeCandidates) {
  const CandidateSpace space = default_space(4);
  for (std::size_t r = 1; r <= 4; ++r) {
    std::size_t n = 0;
    for (const MaskCandidate& c : space.candidates()) n += std::count(c.positions.begin(), c.positions.end(), r);
    EXPECT_EQ(n, 3u);
  }
}

TEST(DefaultSpace, NeedsFourPassages) { EXPECT_THROW(default_space(3), ConfigError); }

TEST(SubsetSpace, PowerSetOrderedBySizeThenLexicographically) {
  const CandidateSpace space = subset_space(3, 0, 3, 5);
  const std::vector<std::vector<std::size_t>> expected{{}, {1}, {2}, {3}, {1, 2}, {1, 3}, {2, 3}, {1, 2, 3}};
  EXPECT_EQ(space.positions(), expected);
  EXPECT_EQ(subset_space(4, 0, 4, 10).size(), 16u);
  EXPECT_EQ(subset_space(6, 2, 2, 10).size(), 15u);
}

TEST(CandidateSpace, RejectsInvalidCandidates) {
  EXPECT_THROW(CandidateSpace(std::vector<MaskCandidate>{}), ConfigError);
  EXPECT_THROW(CandidateSpace({MaskCandidate{{0}}}), ConfigError);
  EXPECT_THROW(CandidateSpace({MaskCandidate{{3, 1}}}), ConfigError);
  EXPECT_THROW(CandidateSpace({MaskCandidate{{2, 2}}}), ConfigError);
  EXPECT_THROW(CandidateSpace({MaskCandidate{{1}}, MaskCandidate{{1}}}), ConfigError);
}

TEST(MaskParams, NeedFewerSelectionsThanCandidates) {
  EXPECT_NO_THROW(MaskParams::zeros(1, 6));
  EXPECT_THROW(MaskParams::zeros(6, 6), ConfigError);
  EXPECT_THROW(MaskParams::zeros(0, 6), ConfigError);
}

TEST(ApplyCandidate, EmptyCandidateIsIdentity) {
  const ad::Tensor h = random_hidden(1);
  EXPECT_EQ(apply(h, MaskCandidate{}), h);
  EXPECT_EQ(apply(h, MaskCandidate{}, true), h);
}

TEST(ApplyCandidate, ZeroesListedPassagesOnly) {
  const ad::Tensor h = random_hidden(2);
  const ad::Tensor out = apply(h, MaskCandidate{{1, 3}});
  for (std::size_t e = 0; e < 2; ++e) {
    for (std::size_t i = 0; i < 6; ++i) {
      EXPECT_EQ(at(out, e, 1, i), 0.0);
      EXPECT_EQ(at(out, e, 3, i), 0.0);
      for (std::size_t slot : {0u, 2u, 4u}) EXPECT_EQ(at(out, e, slot, i), at(h, e, slot, i));
    }
  }
}

TEST(ApplyCandidate, RescaleDoublesSurvivorsWhenHalfAreMasked) {
  const ad::Tensor h = random_hidden(3);
  const ad::Tensor out = apply(h, MaskCandidate{{1, 3}}, true);
  for (std::size_t e = 0; e < 2; ++e) {
    for (std::size_t i = 0; i < 6; ++i) {
      EXPECT_EQ(at(out, e, 0, i), at(h, e, 0, i));
      EXPECT_EQ(at(out, e, 1, i), 0.0);
      EXPECT_EQ(at(out, e, 2, i), 2.0 * at(h, e, 2, i));
      EXPECT_EQ(at(out, e, 4, i), 2.0 * at(h, e, 4, i));
    }
  }
}

TEST(ApplyCandidate, OutOfRangePositionIsIndexError) {
  const ad::Tensor h = random_hidden(4);
  EXPECT_THROW(apply(h, MaskCandidate{{5}}), IndexError);
  EXPECT_THROW(apply(h, MaskCandidate{{0}}), IndexError);
}

TEST(ApplyCandidate, IsIdempotent) {
  const ad::Tensor h = random_hidden(5);
  const CandidateSpace space = default_space(4);
  for (const MaskCandidate& o : space.candidates()) EXPECT_EQ(apply(apply(h, o), o), apply(h, o));
}

TEST(RelaxedMix, UniformLogitsGiveTheMeanOfMaskedVariants) {
  const ad::Tensor h = random_hidden(6);
  const CandidateSpace space = default_space(4);
  const ad::Tensor out = mix(h, ad::Tensor({1, 6}, 0.0), space);
  ad::Tensor mean(h.shape(), 0.0);
  for (const MaskCandidate& o : space.candidates()) {
    const ad::Tensor v = apply(h, o);
    for (std::size_t i = 0; i < v.size(); ++i) mean[i] += v[i] / 6.0;
  }
  EXPECT_LT(rankmask::testing::max_abs_diff(out, mean), 1e-15);
}

TEST(RelaxedMix, SaturatedLogitSelectsOneCandidate) {
  const ad::Tensor h = random_hidden(7);
  const CandidateSpace space = default_space(4);
  const ad::Tensor out = mix(h, ad::Tensor({1, 6}, {40, 0, 0, 0, 0, 0}), space);
  EXPECT_LT(rankmask::testing::max_abs_diff(out, apply(h, space[0])), 1e-6);
}

TEST(RelaxedMix, TwoCandidatesGiveTheConvexCombination) {
  const ad::Tensor h = random_hidden(8);
  const CandidateSpace space({MaskCandidate{{1}}, MaskCandidate{{2, 4}}});
  const double w0 = 0.3, w1 = -1.1;
  const double lambda = std::exp(w0) / (std::exp(w0) + std::exp(w1));
  const ad::Tensor out = mix(h, ad::Tensor({1, 2}, {w0, w1}), space);
  const ad::Tensor v1 = apply(h, space[0]), v2 = apply(h, space[1]);
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(out[i], lambda * v1[i] + (1.0 - lambda) * v2[i], 1e-15);
}

TEST(RelaxedMix, SelectionOutOfRangeIsIndexError) {
  const ad::Tensor h = random_hidden(9);
  EXPECT_THROW(mix(h, ad::Tensor({2, 6}, 0.0), default_space(4), 2), IndexError);
}

TEST(RelaxedMix, StaysInsideTheConvexHullOfVariants) {
  const CandidateSpace space = default_space(4);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed, 5);
    const ad::Tensor h = random_hidden(seed);
    const ad::Tensor out = mix(h, random_tensor({1, 6}, rng, -5.0, 5.0), space);
    std::vector<ad::Tensor> variants;
    for (const MaskCandidate& o : space.candidates()) variants.push_back(apply(h, o));
    for (std::size_t i = 0; i < h.size(); ++i) {
      double lo = variants[0][i], hi = variants[0][i];
      for (const ad::Tensor& v : variants) {
        lo = std::min(lo, v[i]);
        hi = std::max(hi, v[i]);
      }
      EXPECT_GE(out[i], lo - 1e-15);
      EXPECT_LE(out[i], hi + 1e-15);
    }
  }
}

TEST(RelaxedMix, LogitGradientMatchesFiniteDifferences) {
  const CandidateSpace space = default_space(4);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed, 6);
    const ad::Tensor h = random_hidden(seed);
    const ad::Tensor w = random_tensor({2, 6}, rng);
    const ad::Tensor target = random_tensor(h.shape(), rng);
    const std::size_t s = seed % 2;
    auto f = [&](const ad::Tensor& logits) {
      ad::Graph g;
      const ad::Var out = relaxed_mix(HiddenStates{g.constant(h)}, g.constant(logits), space, s).values;
      return ad::sum(ad::tanh(ad::mul(out, g.constant(target)))).value().item();
    };
    ad::Graph g;
    const ad::Var wl = g.leaf(w);
    const ad::Var hl = g.leaf(h);
    const ad::Var out = relaxed_mix(HiddenStates{hl}, wl, space, s).values;
    g.backward(ad::sum(ad::tanh(ad::mul(out, g.constant(target)))));
    EXPECT_LT(relative_error(g.grad(wl), ad::finite_difference_grad(f, w)), 1e-4) << "seed " << seed;
    const ad::Tensor gw = g.grad(wl);
    for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(gw.at(1 - s, c), 0.0);
  }
}

TEST(SampleCandidate, FrequenciesFollowTheSoftmax) {
  MaskParams w = MaskParams::zeros(2, 4);
  const std::vector<double> row{0.5, -1.0, 1.5, 0.0};
  for (std::size_t o = 0; o < 4; ++o) w.logits.at(1, o) = row[o];
  double z = 0.0;
  for (double x : row) z += std::exp(x);
  Rng rng(12);
  const std::size_t n = 40000;
  std::vector<std::size_t> count(4, 0);
  for (std::size_t i = 0; i < n; ++i) ++count[sample_candidate(w, 1, rng)];
  for (std::size_t o = 0; o < 4; ++o) {
    const double p = std::exp(row[o]) / z;
    EXPECT_NEAR(static_cast<double>(count[o]), n * p, 3.0 * std::sqrt(n * p * (1.0 - p))) << o;
  }
}

TEST(SampleCandidate, SaturatedRowAlwaysPicksItsArgmax) {
  MaskParams w = MaskParams::zeros(1, 6);
  w.logits.at(0, 3) = 60.0;
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(sample_candidate(w, 0, rng), 3u);
  EXPECT_THROW(sample_candidate(w, 1, rng), IndexError);
}

TEST(Discretize, PicksTheArgmax) {
  const MaskParams w{ad::Tensor({1, 6}, {0.1, 2.0, -1, 0, 0, 0})};
  EXPECT_EQ(discretize_indices(w), std::vector<std::size_t>{1});
  EXPECT_EQ(discretize(w, default_space(4)).front(), (MaskCandidate{{1, 3}}));
}

TEST(Discretize, TiesGoToTheLowestIndex) {
  EXPECT_EQ(discretize_indices(MaskParams{ad::Tensor({1, 6}, 0.5)}), std::vector<std::size_t>{0});
  EXPECT_EQ(discretize_indices(MaskParams{ad::Tensor({1, 4}, {0, 3, 1, 3})}), std::vector<std::size_t>{1});
}

TEST(Discretize, InvariantToShiftsAndMonotoneMaps) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed, 7);
    const MaskParams w{random_tensor({3, 6}, rng)};
    const auto base = discretize_indices(w);
    MaskParams shifted = w, cubed = w, squashed = w;
    for (std::size_t s = 0; s < 3; ++s) {
      const double c = 10.0 * rng.uniform() - 5.0;
      for (std::size_t j = 0; j < 6; ++j) {
        shifted.logits.at(s, j) += c;
        cubed.logits.at(s, j) = std::pow(w.logits.at(s, j), 3.0);
        squashed.logits.at(s, j) = std::atan(w.logits.at(s, j));
      }
    }
    EXPECT_EQ(discretize_indices(shifted), base);
    EXPECT_EQ(discretize_indices(cubed), base);
    EXPECT_EQ(discretize_indices(squashed), base);
  }
}

namespace {

using RandomMask = HiddenStates (*)(const HiddenStates&, double, Rng&);

ad::Tensor random_mask(RandomMask fn, const ad::Tensor& h, double p, Rng& rng) {
  ad::Graph g;
  return fn(HiddenStates{g.constant(h)}, p, rng).values.value();
}

void expect_identity_at_zero(RandomMask fn) {
  Rng rng(1);
  const ad::Tensor h = random_hidden(10);
  EXPECT_EQ(random_mask(fn, h, 0.0, rng), h);
}

void expect_survivors_doubled(RandomMask fn) {
  Rng rng(2);
  const ad::Tensor h = random_hidden(11);
  const ad::Tensor out = random_mask(fn, h, 0.5, rng);
  std::size_t dropped = 0;
  for (std::size_t e = 0; e < 2; ++e) {
    for (std::size_t i = 0; i < 6; ++i) {
      EXPECT_EQ(at(out, e, 0, i), at(h, e, 0, i));
      for (std::size_t slot = 1; slot < 5; ++slot) {
        const double v = at(out, e, slot, i);
        if (v == 0.0) ++dropped;
        else EXPECT_EQ(v, 2.0 * at(h, e, slot, i));
      }
    }
  }
  EXPECT_GT(dropped, 0u);
}

// Sample mean of each entry over many draws stays within 3 sigma of h, where
// sigma is the per-draw spread |h| sqrt(p / (1 - p)).
void expect_unbiased(RandomMask fn) {
  const double p = 0.3;
  const std::size_t draws = 100000;
  Rng rng(3);
  const ad::Tensor h = random_hidden(12, 1);
  ad::Tensor total(h.shape(), 0.0);
  for (std::size_t k = 0; k < draws; ++k) {
    const ad::Tensor out = random_mask(fn, h, p, rng);
    for (std::size_t i = 0; i < h.size(); ++i) total[i] += out[i];
  }
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double sigma = std::abs(h[i]) * std::sqrt(p / (1.0 - p)) / std::sqrt(static_cast<double>(draws));
    EXPECT_NEAR(total[i] / static_cast<double>(draws), h[i], 3.0 * sigma + 1e-12) << "entry " << i;
  }
}

void expect_rate_checked(RandomMask fn) {
  Rng rng(4);
  const ad::Tensor h = random_hidden(13);
  EXPECT_THROW(random_mask(fn, h, 1.0, rng), ConfigError);
  EXPECT_THROW(random_mask(fn, h, -0.1, rng), ConfigError);
}

}  // namespace

TEST(VanillaMask, IdentityAtZeroRate) { expect_identity_at_zero(vanilla_mask); }
TEST(VanillaMask, SurvivorsScaledByTwoAtHalfRate) { expect_survivors_doubled(vanilla_mask); }
TEST(VanillaMask, PreservesExpectation) { expect_unbiased(vanilla_mask); }
TEST(VanillaMask, RateMustBeBelowOne) { expect_rate_checked(vanilla_mask); }

TEST(VanillaMask, DropsWholePassages) {
  Rng rng(5);
  const ad::Tensor h = random_hidden(14);
  const ad::Tensor out = random_mask(vanilla_mask, h, 0.5, rng);
  for (std::size_t e = 0; e < 2; ++e) {
    for (std::size_t slot = 1; slot < 5; ++slot) {
      const bool zero = at(out, e, slot, 0) == 0.0;
      for (std::size_t i = 1; i < 6; ++i) EXPECT_EQ(at(out, e, slot, i) == 0.0, zero);
    }
  }
}

TEST(DimensionDropout, IdentityAtZeroRate) { expect_identity_at_zero(dimension_dropout); }
TEST(DimensionDropout, SurvivorsScaledByTwoAtHalfRate) { expect_survivors_doubled(dimension_dropout); }
TEST(DimensionDropout, PreservesExpectation) { expect_unbiased(dimension_dropout); }
TEST(DimensionDropout, RateMustBeBelowOne) { expect_rate_checked(dimension_dropout); }
