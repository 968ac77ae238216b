#pragma once

// Passage masks over encoded hidden states: the discrete candidate space, hard
// and softmax-relaxed application, discretisation, and the two random-mask
// baselines (per-passage mask and per-entry dropout).

#include <cstddef>
#include <string>
#include <vector>

#include "rankmask/autodiff.hpp"
#include "rankmask/reader.hpp"
#include "rankmask/rng.hpp"

namespace rankmask {

/// Rank positions (1-based, sorted, distinct) whose passage states are zeroed.
struct MaskCandidate {
  std::vector<std::size_t> positions;

  std::string label() const;  // e.g. "(1,3)"; "()" when empty
  friend bool operator==(const MaskCandidate&, const MaskCandidate&) = default;
};

/// Ordered candidate list; the order fixes the columns of the mask logits.
class CandidateSpace {
 public:
  CandidateSpace() = default;
  explicit CandidateSpace(std::vector<MaskCandidate> candidates);

  std::size_t size() const noexcept { return candidates_.size(); }
  const MaskCandidate& operator[](std::size_t i) const { return candidates_.at(i); }
  const std::vector<MaskCandidate>& candidates() const noexcept { return candidates_; }
  /// Largest masked rank.
  std::size_t max_position() const;

  std::vector<std::vector<std::size_t>> positions() const;

 private:
  std::vector<MaskCandidate> candidates_;
};

/// {(1,2),(1,3),(1,4),(2,3),(2,4),(3,4)}. Throws ConfigError when passages < 4.
CandidateSpace default_space(std::size_t passages);

/// Every subset of ranks 1..top whose size lies in [min_size, max_size],
/// ordered by size, then lexicographically.
CandidateSpace subset_space(std::size_t top, std::size_t min_size, std::size_t max_size, std::size_t passages);

/// Selection logits w with shape [S x N].
struct MaskParams {
  ad::Tensor logits;

  /// Zero logits (uniform softmax). Requires 1 <= S < N.
  static MaskParams zeros(std::size_t selections, std::size_t candidates);

  std::size_t selections() const { return logits.dim(0); }
  std::size_t candidates() const { return logits.dim(1); }

  friend bool operator==(const MaskParams&, const MaskParams&) = default;
};

/// Zeroes the listed passages. With `rescale`, surviving passages are
/// multiplied by P / (P - |o|); the question slot is never touched.
HiddenStates apply_candidate(const HiddenStates& h, const MaskCandidate& o, bool rescale = false);

/// Per-slot multipliers of a candidate, [P+1].
std::vector<double> candidate_keep(const MaskCandidate& o, std::size_t passages, bool rescale);

/// sum_o softmax(w_s)_o * apply_candidate(h, o). `w` must live on h's graph.
HiddenStates relaxed_mix(const HiddenStates& h, ad::Var w, const CandidateSpace& space, std::size_t s,
                         bool rescale = false);

/// Candidate index drawn from softmax(w_s).
std::size_t sample_candidate(const MaskParams& w, std::size_t s, Rng& rng);

/// Argmax candidate index of each row of w; ties go to the lowest index.
std::vector<std::size_t> discretize_indices(const MaskParams& w);
std::vector<MaskCandidate> discretize(const MaskParams& w, const CandidateSpace& space);

/// Zeroes each passage independently with probability p and scales the
/// survivors by 1/(1-p). Throws ConfigError unless 0 <= p < 1.
HiddenStates vanilla_mask(const HiddenStates& h, double p, Rng& rng);

/// Same scheme applied to every scalar entry of the passage states.
HiddenStates dimension_dropout(const HiddenStates& h, double p, Rng& rng);

}  // namespace rankmask
