#include "rankmask/passage_mask.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "rankmask/error.hpp"

namespace rankmask {

using ad::Shape;
using ad::Tensor;
using ad::Var;

namespace {

void check_rate(double p) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("mask_rate", "must be in [0, 1)");
}

std::size_t passages_of(const HiddenStates& h) { return h.slots() - 1; }

}  // namespace

std::string MaskCandidate::label() const {
  std::string out = "(";
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(positions[i]);
  }
  return out + ")";
}

CandidateSpace::CandidateSpace(std::vector<MaskCandidate> candidates) : candidates_(std::move(candidates)) {
  if (candidates_.empty()) throw ConfigError("candidates", "space must hold at least one candidate");
  std::set<std::vector<std::size_t>> seen;
  for (const MaskCandidate& c : candidates_) {
    for (std::size_t i = 0; i < c.positions.size(); ++i) {
      if (c.positions[i] == 0) throw ConfigError("candidates", "positions are 1-based");
      if (i && c.positions[i] <= c.positions[i - 1]) {
        throw ConfigError("candidates", "positions must be sorted and distinct in " + c.label());
      }
    }
    if (!seen.insert(c.positions).second) throw ConfigError("candidates", "duplicate candidate " + c.label());
  }
}

std::size_t CandidateSpace::max_position() const {
  std::size_t m = 0;
  for (const MaskCandidate& c : candidates_) {
    if (!c.positions.empty()) m = std::max(m, c.positions.back());
  }
  return m;
}

std::vector<std::vector<std::size_t>> CandidateSpace::positions() const {
  std::vector<std::vector<std::size_t>> out;
  for (const MaskCandidate& c : candidates_) out.push_back(c.positions);
  return out;
}

CandidateSpace default_space(std::size_t passages) {
  if (passages < 4) throw ConfigError("passages", "the default mask space needs at least 4 passages");
  return subset_space(4, 2, 2, passages);
}

CandidateSpace subset_space(std::size_t top, std::size_t min_size, std::size_t max_size, std::size_t passages) {
  if (top > passages) throw ConfigError("passages", "candidate ranks exceed the passage count");
  if (top > 20) throw ConfigError("top", "at most 20 ranks");
  if (min_size > max_size) throw ConfigError("min_size", "exceeds max_size");
  std::vector<MaskCandidate> out;
  for (std::size_t k = min_size; k <= std::min(max_size, top); ++k) {
    // Lexicographic k-combinations of 1..top.
    std::vector<std::size_t> pick(k);
    for (std::size_t i = 0; i < k; ++i) pick[i] = i + 1;
    while (true) {
      out.push_back(MaskCandidate{pick});
      std::size_t i = k;
      while (i > 0 && pick[i - 1] == top - k + i) --i;
      if (i == 0) break;
      ++pick[i - 1];
      for (std::size_t j = i; j < k; ++j) pick[j] = pick[j - 1] + 1;
    }
  }
  return CandidateSpace(std::move(out));
}

MaskParams MaskParams::zeros(std::size_t selections, std::size_t candidates) {
  if (selections < 1 || selections >= candidates) {
    throw ConfigError("selections", "need 1 <= S < N, got S=" + std::to_string(selections) +
                                        " N=" + std::to_string(candidates));
  }
  return MaskParams{Tensor(Shape{selections, candidates}, 0.0)};
}

std::vector<double> candidate_keep(const MaskCandidate& o, std::size_t passages, bool rescale) {
  std::vector<double> keep(passages + 1, 1.0);
  for (std::size_t pos : o.positions) {
    if (pos == 0 || pos > passages) {
      throw IndexError("mask position " + std::to_string(pos) + " outside ranks 1.." + std::to_string(passages));
    }
    keep[pos] = 0.0;
  }
  if (rescale && !o.positions.empty()) {
    if (o.positions.size() >= passages) throw ContractError("cannot rescale when every passage is masked");
    const double factor = static_cast<double>(passages) / static_cast<double>(passages - o.positions.size());
    for (std::size_t r = 1; r <= passages; ++r) keep[r] *= factor;
  }
  return keep;
}

HiddenStates apply_candidate(const HiddenStates& h, const MaskCandidate& o, bool rescale) {
  const std::size_t passages = passages_of(h);
  const std::vector<double> keep = candidate_keep(o, passages, rescale);
  if (!rescale || o.positions.empty()) return HiddenStates{ad::zero_mask(h.values, 1, o.positions)};
  ad::Graph& g = h.values.graph();
  const Var factors = g.constant(Tensor(Shape{passages + 1, 1, 1}, keep));
  return HiddenStates{ad::mul(h.values, factors)};
}

HiddenStates relaxed_mix(const HiddenStates& h, Var w, const CandidateSpace& space, std::size_t s, bool rescale) {
  const Shape& ws = w.shape();
  if (ws.size() != 2 || ws[1] != space.size()) {
    throw DimensionError("relaxed_mix: logits " + ad::shape_string(ws) + " do not match " +
                         std::to_string(space.size()) + " candidates");
  }
  if (s >= ws[0]) throw IndexError("relaxed_mix: selection " + std::to_string(s) + " out of range");
  const std::size_t passages = passages_of(h);
  Tensor keep(Shape{space.size(), passages + 1}, 0.0);
  for (std::size_t c = 0; c < space.size(); ++c) {
    const std::vector<double> row = candidate_keep(space[c], passages, rescale);
    std::copy(row.begin(), row.end(), keep.data().begin() + static_cast<std::ptrdiff_t>(c * (passages + 1)));
  }
  ad::Graph& g = h.values.graph();
  const Var weights = ad::softmax_rows(ad::select_row(w, s));
  const Var factors = ad::reshape(ad::matmul(weights, g.constant(std::move(keep))), Shape{passages + 1, 1, 1});
  return HiddenStates{ad::mul(h.values, factors)};
}

std::size_t sample_candidate(const MaskParams& w, std::size_t s, Rng& rng) {
  const std::size_t n = w.candidates();
  if (s >= w.selections()) throw IndexError("sample_candidate: selection " + std::to_string(s) + " out of range");
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t o = 0; o < n; ++o) top = std::max(top, w.logits.at(s, o));
  std::vector<double> cumulative(n);
  double total = 0.0;
  for (std::size_t o = 0; o < n; ++o) cumulative[o] = total += std::exp(w.logits.at(s, o) - top);
  const double x = rng.uniform() * total;
  for (std::size_t o = 0; o + 1 < n; ++o) {
    if (x < cumulative[o]) return o;
  }
  return n - 1;
}

std::vector<std::size_t> discretize_indices(const MaskParams& w) {
  const std::size_t rows = w.selections(), cols = w.candidates();
  std::vector<std::size_t> out(rows, 0);
  for (std::size_t s = 0; s < rows; ++s) {
    for (std::size_t c = 1; c < cols; ++c) {
      if (w.logits.at(s, c) > w.logits.at(s, out[s])) out[s] = c;
    }
  }
  return out;
}

std::vector<MaskCandidate> discretize(const MaskParams& w, const CandidateSpace& space) {
  if (w.candidates() != space.size()) throw DimensionError("discretize: logits do not match the candidate space");
  std::vector<MaskCandidate> out;
  for (std::size_t idx : discretize_indices(w)) out.push_back(space[idx]);
  return out;
}

HiddenStates vanilla_mask(const HiddenStates& h, double p, Rng& rng) {
  check_rate(p);
  const std::size_t b = h.batch(), slots = h.slots();
  const double survive = 1.0 / (1.0 - p);
  Tensor factors(Shape{b, slots, 1, 1}, 1.0);
  for (std::size_t e = 0; e < b; ++e) {
    for (std::size_t r = 1; r < slots; ++r) factors[e * slots + r] = rng.bernoulli(p) ? 0.0 : survive;
  }
  return HiddenStates{ad::mul(h.values, h.values.graph().constant(std::move(factors)))};
}

HiddenStates dimension_dropout(const HiddenStates& h, double p, Rng& rng) {
  check_rate(p);
  const std::size_t b = h.batch(), slots = h.slots(), per_slot = h.length() * h.width();
  const double survive = 1.0 / (1.0 - p);
  Tensor factors(h.values.shape(), 1.0);
  auto f = factors.data();
  for (std::size_t e = 0; e < b; ++e) {
    for (std::size_t r = 1; r < slots; ++r) {
      const std::size_t base = (e * slots + r) * per_slot;
      for (std::size_t i = 0; i < per_slot; ++i) f[base + i] = rng.bernoulli(p) ? 0.0 : survive;
    }
  }
  return HiddenStates{ad::mul(h.values, h.values.graph().constant(std::move(factors)))};
}

}  // namespace rankmask
