#pragma once

// Single-loop bi-level training: gradient descent on the reader parameters θ
// with the training loss, interleaved every u steps with a descent step on the
// mask logits w driven by a momentum-recursive estimate of the validation
// gradient.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "rankmask/passage_mask.hpp"
#include "rankmask/reader.hpp"
#include "rankmask/rng.hpp"
#include "rankmask/taskgen.hpp"

namespace rankmask {

enum class MaskMode { none, vanilla, dimension_dropout, pm, pm_random_candidate, fixed_candidate };

std::string_view mask_mode_name(MaskMode mode);
MaskMode parse_mask_mode(std::string_view name);

struct Schedules {
  using Sequence = std::function<double(std::size_t)>;

  Sequence alpha;  // inner learning rate
  Sequence beta;   // outer learning rate
  Sequence eta;    // estimator mixing weight, in [0, 1]
  std::size_t u = 10;
  std::size_t total_steps = 1000;

  static Schedules constant(double alpha, double beta, double eta, std::size_t u, std::size_t total_steps);

  /// Checks u and the values at step t; throws ConfigError.
  void check(std::size_t t) const;
};

struct TrainOptions {
  MaskMode mode = MaskMode::none;
  std::size_t batch_size = 20;
  std::size_t val_batch_size = 100;  // 0 means the whole validation split
  std::size_t eval_every = 100;
  double mask_rate = 0.5;            // vanilla and dimension_dropout
  std::size_t fixed_candidate = 0;   // fixed_candidate mode
  bool rescale = false;              // rescale survivors of PM candidates
  // pm: train θ on one candidate drawn from softmax(w_s) instead of the
  // relaxed mixture. The outer gradient always goes through the relaxation.
  bool sample_inner = false;
  double clip_norm = 0.0;            // global gradient norm cap; 0 disables
  bool mask_at_selection = false;    // apply discretize(w) when scoring checkpoints
  std::uint64_t seed = 1;
};

struct BilevelState {
  BilevelState(std::uint64_t seed, const MaskParams& w);

  std::size_t t = 0;
  ad::Tensor grad_g;
  bool has_grad_g = false;
  std::optional<ReaderParams> theta_prev;
  Rng batch_rng;
  Rng s_rng;
  Rng mask_rng;
  Rng val_rng;  // validation mini-batches only
};

struct InnerResult {
  double loss = 0.0;
  std::size_t s = 0;
  std::optional<std::size_t> candidate;
};

/// One descent step on the mean training loss of `batch`, with the mask of
/// `options.mode` applied to the hidden states. w is held constant.
InnerResult inner_step(ReaderParams& params, const MaskParams& w, std::span<const Example> batch,
                       const Schedules& schedules, BilevelState& state, const CandidateSpace& space,
                       const TrainOptions& options);

/// grad_t = η ∇g(θ_t, w_t) + (1-η)(grad_{t-1} + ∇g(θ_t, w_t) - ∇g(θ_{t-1}, w_t)),
/// stored into state.grad_g.
const ad::Tensor& estimator_update(BilevelState& state, const ad::Tensor& grad_now, const ad::Tensor& grad_prev_theta,
                                   double eta);

struct ValidationGradient {
  ad::Tensor grad;
  double loss = 0.0;
};

/// ∂g/∂w at fixed θ: mean validation loss through relaxed_mix with selection s.
ValidationGradient validation_gradient(const ReaderParams& params, const MaskParams& w,
                                       std::span<const Example> val_batch, const CandidateSpace& space, std::size_t s,
                                       bool rescale = false);

struct OuterResult {
  double val_loss = 0.0;
  std::size_t s = 0;
  bool bootstrap = false;
};

/// Both gradients use `val_batch` and one sampled s. With no `params_prev`
/// (or no earlier estimate) the estimator bootstraps to ∇g(θ_t, w_t). Then
/// w ← w − β_t grad_g and the θ snapshot is refreshed.
OuterResult outer_step(MaskParams& w, BilevelState& state, const Schedules& schedules,
                       std::span<const Example> val_batch, const ReaderParams& params_now,
                       const ReaderParams* params_prev, const CandidateSpace& space, const TrainOptions& options);

struct StepRecord {
  std::size_t step = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::optional<double> val_accuracy;
  std::size_t s = 0;
  std::optional<std::size_t> candidate;
  bool outer = false;
  bool best = false;
};

struct RunResult {
  ReaderParams params;  // best checkpoint by validation accuracy
  MaskParams w;         // logits at that checkpoint
  MaskParams final_w;
  std::vector<StepRecord> steps;
  double best_val_accuracy = -1.0;
  std::size_t best_step = 0;
  std::size_t outer_updates = 0;
  AccessAudit audit;
  double seconds = 0.0;  // wall clock; never written into deterministic reports
};

/// Transform applying every discretised candidate of w as a hard mask.
HiddenTransform discretized_transform(const MaskParams& w, const CandidateSpace& space);

/// Runs schedules.total_steps inner steps, with an outer step whenever
/// mode is pm and t % u == u - 1. When `log` is given, one JSON record per
/// step is written to it.
RunResult run(const Dataset& dataset, ReaderParams params, MaskParams w, const CandidateSpace& space,
              const Schedules& schedules, const TrainOptions& options, std::ostream* log = nullptr);

}  // namespace rankmask
