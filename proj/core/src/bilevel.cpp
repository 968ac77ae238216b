#include "rankmask/bilevel.hpp"

#include <chrono>
#include <cmath>
#include <ostream>

#include <nlohmann/json.hpp>

#include "rankmask/error.hpp"

namespace rankmask {

using ad::Graph;
using ad::Tensor;
using ad::Var;

namespace {

enum Stream : std::uint64_t { batch_stream = 21, s_stream = 22, mask_stream = 23, val_stream = 24 };

std::vector<Example> sample_batch(std::span<const Example> split, std::size_t size, Rng& rng) {
  if (split.empty()) throw ContractError("cannot sample from an empty split");
  std::vector<Example> out;
  out.reserve(size);
  for (std::size_t i = 0; i < size; ++i) out.push_back(split[rng.below(split.size())]);
  return out;
}

void clip_gradients(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads) {
    for (double v : g.data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double factor = max_norm / norm;
  for (Tensor& g : grads) {
    for (double& v : g.data()) v *= factor;
  }
}

nlohmann::json step_json(const StepRecord& r, const MaskParams& w) {
  nlohmann::json j;
  j["step"] = r.step;
  j["train_loss"] = r.train_loss;
  j["val_loss"] = r.val_loss ? nlohmann::json(*r.val_loss) : nlohmann::json(nullptr);
  j["val_accuracy"] = r.val_accuracy ? nlohmann::json(*r.val_accuracy) : nlohmann::json(nullptr);
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t s = 0; s < w.selections(); ++s) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t c = 0; c < w.candidates(); ++c) row.push_back(w.logits.at(s, c));
    rows.push_back(std::move(row));
  }
  j["w"] = std::move(rows);
  j["s"] = r.s;
  j["candidate"] = r.candidate ? nlohmann::json(*r.candidate) : nlohmann::json(nullptr);
  nlohmann::json events = nlohmann::json::array();
  if (r.outer) events.push_back("outer");
  if (r.val_accuracy) events.push_back("eval");
  if (r.best) events.push_back("best");
  j["events"] = std::move(events);
  return j;
}

}  // namespace

std::string_view mask_mode_name(MaskMode mode) {
  switch (mode) {
    case MaskMode::none: return "none";
    case MaskMode::vanilla: return "vanilla";
    case MaskMode::dimension_dropout: return "dimension_dropout";
    case MaskMode::pm: return "pm";
    case MaskMode::pm_random_candidate: return "pm_random_candidate";
    case MaskMode::fixed_candidate: return "fixed_candidate";
  }
  return "unknown";
}

MaskMode parse_mask_mode(std::string_view name) {
  for (MaskMode m : {MaskMode::none, MaskMode::vanilla, MaskMode::dimension_dropout, MaskMode::pm,
                     MaskMode::pm_random_candidate, MaskMode::fixed_candidate}) {
    if (mask_mode_name(m) == name) return m;
  }
  throw ConfigError("mode", "unknown mask mode '" + std::string(name) + "'");
}

Schedules Schedules::constant(double alpha, double beta, double eta, std::size_t u, std::size_t total_steps) {
  Schedules s;
  s.alpha = [alpha](std::size_t) { return alpha; };
  s.beta = [beta](std::size_t) { return beta; };
  s.eta = [eta](std::size_t) { return eta; };
  s.u = u;
  s.total_steps = total_steps;
  return s;
}

void Schedules::check(std::size_t t) const {
  if (u == 0) throw ConfigError("u", "must be positive");
  if (!alpha || !beta || !eta) throw ConfigError("schedules", "every sequence must be set");
  const double a = alpha(t), b = beta(t), e = eta(t);
  if (!std::isfinite(a) || a < 0.0) throw ConfigError("alpha", "must be finite and non-negative");
  if (!std::isfinite(b) || b < 0.0) throw ConfigError("beta", "must be finite and non-negative");
  if (!(e >= 0.0 && e <= 1.0)) throw ConfigError("eta", "must be in [0, 1]");
}

BilevelState::BilevelState(std::uint64_t seed, const MaskParams& w)
    : grad_g(w.logits.shape(), 0.0),
      batch_rng(seed, batch_stream),
      s_rng(seed, s_stream),
      mask_rng(seed, mask_stream),
      val_rng(seed, val_stream) {}

InnerResult inner_step(ReaderParams& params, const MaskParams& w, std::span<const Example> batch,
                       const Schedules& schedules, BilevelState& state, const CandidateSpace& space,
                       const TrainOptions& options) {
  schedules.check(state.t);
  InnerResult result;
  Graph g;
  const ReaderVars vars = bind(g, params, true);
  HiddenStates h = encode(batch, vars);
  switch (options.mode) {
    case MaskMode::none: break;
    case MaskMode::pm:
      result.s = state.s_rng.below(w.selections());
      if (options.sample_inner) {
        result.candidate = sample_candidate(w, result.s, state.s_rng);
        h = apply_candidate(h, space[*result.candidate], options.rescale);
      } else {
        h = relaxed_mix(h, g.constant(w.logits), space, result.s, options.rescale);
      }
      break;
    case MaskMode::pm_random_candidate:
      result.candidate = state.s_rng.below(space.size());
      h = apply_candidate(h, space[*result.candidate], options.rescale);
      break;
    case MaskMode::fixed_candidate:
      if (options.fixed_candidate >= space.size()) throw ConfigError("fixed_candidate", "outside the candidate space");
      result.candidate = options.fixed_candidate;
      h = apply_candidate(h, space[options.fixed_candidate], options.rescale);
      break;
    case MaskMode::vanilla: h = vanilla_mask(h, options.mask_rate, state.mask_rng); break;
    case MaskMode::dimension_dropout: h = dimension_dropout(h, options.mask_rate, state.mask_rng); break;
  }
  const Var l = loss(batch, h, vars);
  g.backward(l);
  result.loss = l.value().item();
  std::vector<Tensor> grads;
  grads.reserve(vars.all.size());
  for (const Var& v : vars.all) grads.push_back(g.grad(v));
  if (options.clip_norm > 0.0) clip_gradients(grads, options.clip_norm);
  const double alpha = schedules.alpha(state.t);
  auto& tensors = params.tensors();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto p = tensors[i].data();
    const auto d = grads[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) p[k] -= alpha * d[k];
  }
  return result;
}

const Tensor& estimator_update(BilevelState& state, const Tensor& grad_now, const Tensor& grad_prev_theta, double eta) {
  if (grad_now.shape() != state.grad_g.shape() || grad_prev_theta.shape() != state.grad_g.shape()) {
    throw ContractError("estimator_update: gradient shapes " + ad::shape_string(grad_now.shape()) + " and " +
                        ad::shape_string(grad_prev_theta.shape()) + " do not match the estimate " +
                        ad::shape_string(state.grad_g.shape()));
  }
  auto out = state.grad_g.data();
  const auto now = grad_now.data();
  const auto prev = grad_prev_theta.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = eta * now[i] + (1.0 - eta) * (out[i] + now[i] - prev[i]);
  }
  state.has_grad_g = true;
  return state.grad_g;
}

ValidationGradient validation_gradient(const ReaderParams& params, const MaskParams& w,
                                       std::span<const Example> val_batch, const CandidateSpace& space, std::size_t s,
                                       bool rescale) {
  Graph g;
  const ReaderVars vars = bind(g, params, false);
  const Var wv = g.leaf(w.logits);
  const HiddenStates h = relaxed_mix(encode(val_batch, vars), wv, space, s, rescale);
  const Var l = loss(val_batch, h, vars);
  g.backward(l);
  return ValidationGradient{g.grad(wv), l.value().item()};
}

OuterResult outer_step(MaskParams& w, BilevelState& state, const Schedules& schedules,
                       std::span<const Example> val_batch, const ReaderParams& params_now,
                       const ReaderParams* params_prev, const CandidateSpace& space, const TrainOptions& options) {
  schedules.check(state.t);
  OuterResult result;
  result.s = state.s_rng.below(w.selections());
  const ValidationGradient now = validation_gradient(params_now, w, val_batch, space, result.s, options.rescale);
  result.val_loss = now.loss;
  if (!state.has_grad_g || params_prev == nullptr) {
    state.grad_g = now.grad;
    state.has_grad_g = true;
    result.bootstrap = true;
  } else {
    const ValidationGradient prev = validation_gradient(*params_prev, w, val_batch, space, result.s, options.rescale);
    estimator_update(state, now.grad, prev.grad, schedules.eta(state.t));
  }
  const double beta = schedules.beta(state.t);
  auto logits = w.logits.data();
  const auto grad = state.grad_g.data();
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] -= beta * grad[i];
  state.theta_prev = params_now;
  return result;
}

HiddenTransform discretized_transform(const MaskParams& w, const CandidateSpace& space) {
  const std::vector<MaskCandidate> picks = discretize(w, space);
  return [picks](const HiddenStates& h) {
    HiddenStates out = h;
    for (const MaskCandidate& c : picks) out = apply_candidate(out, c, false);
    return out;
  };
}

RunResult run(const Dataset& dataset, ReaderParams params, MaskParams w, const CandidateSpace& space,
              const Schedules& schedules, const TrainOptions& options, std::ostream* log) {
  if (options.batch_size == 0) throw ConfigError("batch_size", "must be positive");
  if (options.eval_every == 0) throw ConfigError("eval_every", "must be positive");
  if (space.max_position() > dataset.config.passages) {
    throw ConfigError("candidates", "candidate ranks exceed the passage count");
  }
  const auto start = std::chrono::steady_clock::now();
  RunResult result;
  BilevelState state(options.seed, w);
  result.params = params;
  result.w = w;

  for (std::size_t t = 0; t < schedules.total_steps; ++t) {
    state.t = t;
    StepRecord rec;
    rec.step = t;
    {
      const auto train = dataset.read(Split::train, Phase::inner, result.audit);
      const std::vector<Example> batch = sample_batch(train, options.batch_size, state.batch_rng);
      const InnerResult inner = inner_step(params, w, batch, schedules, state, space, options);
      rec.train_loss = inner.loss;
      rec.s = inner.s;
      rec.candidate = inner.candidate;
    }
    if (options.mode == MaskMode::pm && t % schedules.u == schedules.u - 1) {
      const auto val = dataset.read(Split::val, Phase::outer, result.audit);
      const std::vector<Example> batch =
          options.val_batch_size == 0 ? std::vector<Example>(val.begin(), val.end())
                                      : sample_batch(val, options.val_batch_size, state.val_rng);
      const ReaderParams* prev = state.theta_prev ? &*state.theta_prev : nullptr;
      const OuterResult outer = outer_step(w, state, schedules, batch, params, prev, space, options);
      rec.val_loss = outer.val_loss;
      rec.outer = true;
      ++result.outer_updates;
    }
    if ((t + 1) % options.eval_every == 0 || t + 1 == schedules.total_steps) {
      const auto val = dataset.read(Split::val, Phase::selection, result.audit);
      const HiddenTransform mask =
          options.mask_at_selection && options.mode == MaskMode::pm ? discretized_transform(w, space) : HiddenTransform{};
      const Score sc = score(val, params, mask);
      rec.val_accuracy = sc.accuracy;
      if (!rec.val_loss) rec.val_loss = sc.loss;
      if (sc.accuracy > result.best_val_accuracy) {
        result.best_val_accuracy = sc.accuracy;
        result.best_step = t;
        result.params = params;
        result.w = w;
        rec.best = true;
      }
    }
    if (log) *log << step_json(rec, w).dump() << '\n';
    result.steps.push_back(std::move(rec));
  }
  result.final_w = w;
  if (schedules.total_steps == 0) {
    result.params = params;
    result.w = w;
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace rankmask
