#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "rankmask/autodiff.hpp"
#include "rankmask/rng.hpp"
#include "rankmask/taskgen.hpp"

namespace rankmask::testing {

inline ad::Tensor random_tensor(ad::Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  ad::Tensor t(std::move(shape), 0.0);
  for (double& v : t.data()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

/// ||a - b|| / max(||a||, ||b||), with a floor so that two near-zero
/// gradients compare as equal.
inline double relative_error(const ad::Tensor& a, const ad::Tensor& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-8});
}

inline double max_abs_diff(const ad::Tensor& a, const ad::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Small task that keeps reader tests fast.
inline TaskConfig tiny_task(std::uint64_t seed = 7) {
  TaskConfig c;
  c.passages = 5;
  c.passage_len = 6;
  c.question_len = 3;
  c.classes = 4;
  c.evidence_markers = 4;
  c.vocab = 40;
  c.train_size = 60;
  c.val_size = 30;
  c.test_size = 30;
  c.seed = seed;
  return c;
}

}  // namespace rankmask::testing
