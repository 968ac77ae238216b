#include "rankmask/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <istream>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "rankmask/error.hpp"
#include "rankmask/rng.hpp"
#include "rankmask/text.hpp"

namespace rankmask {

namespace {

constexpr MaskMode kCompareModes[] = {MaskMode::none, MaskMode::dimension_dropout, MaskMode::vanilla,
                                      MaskMode::pm_random_candidate, MaskMode::pm};

constexpr std::uint64_t kPermuteStream = 31;

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_std(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double sq = 0.0;
  for (double x : v) sq += (x - m) * (x - m);
  return std::sqrt(sq / static_cast<double>(v.size() - 1));
}

std::vector<std::string> seed_columns(const std::vector<std::uint64_t>& seeds) {
  std::vector<std::string> cols{"mean"};
  for (auto s : seeds) cols.push_back("seed_" + std::to_string(s));
  return cols;
}

ReportRow seed_row(std::string label, const std::vector<double>& values, const std::vector<std::string>& ids) {
  ReportRow r{std::move(label), {mean_of(values)}, {"-"}};
  r.values.insert(r.values.end(), values.begin(), values.end());
  r.run_ids.insert(r.run_ids.end(), ids.begin(), ids.end());
  return r;
}

ReportRow claim_row(std::string label, std::size_t successes, std::size_t trials) {
  return ReportRow{std::move(label),
                   {static_cast<double>(successes), static_cast<double>(trials), sign_test_p(successes, trials)},
                   {"-", "-", "-"}};
}

ReportTable claims_table() { return ReportTable{"claims", {"successes", "trials", "p_value"}, {}}; }

/// Collects what every analysis reports regardless of its tables.
class ReportBuilder {
 public:
  ReportBuilder(Lab& lab, std::string analysis) : lab_(lab) {
    report_.analysis = std::move(analysis);
    report_.config_hash = config_hash(lab.config());
    report_.seeds = lab.config().seeds;
    report_.config = config_entries(lab.config());
  }

  const TrainedRun& use(const RunSpec& spec) {
    const TrainedRun& r = lab_.run(spec);
    if (used_.insert(r.id).second) audit_.merge(r.result.audit);
    return r;
  }

  AccessAudit& audit() { return audit_; }
  Report& report() { return report_; }

  Report finish() {
    for (const auto& [key, n] : audit_.reads()) {
      report_.audit_reads[std::string(phase_name(key.first)) + "/" + std::string(split_name(key.second))] = n;
    }
    report_.audit_passed = audit_.passed();
    return std::move(report_);
  }

 private:
  Lab& lab_;
  Report report_;
  AccessAudit audit_;
  std::set<std::string> used_;
};

/// Applies the inference-time mask of a pm run when the config asks for it.
HiddenTransform with_inference_mask(const Lab& lab, const TrainedRun& run, HiddenTransform extra) {
  if (!lab.config().eval_mask || run.spec.mode != MaskMode::pm) return extra;
  const CandidateSpace& space = run.spec.large_space ? lab.large_space() : lab.space();
  HiddenTransform base = discretized_transform(run.result.w, space);
  if (!extra) return base;
  return [base, extra](const HiddenStates& h) { return extra(base(h)); };
}

double test_accuracy(const Lab& lab, const TrainedRun& run, std::span<const Example> split,
                     HiddenTransform extra = {}) {
  return evaluate(split, run.result.params, with_inference_mask(lab, run, std::move(extra)));
}

std::vector<std::size_t> top_ranks(std::size_t k) {
  std::vector<std::size_t> out(k);
  std::iota(out.begin(), out.end(), std::size_t{1});
  return out;
}


}  // namespace

// ---------------------------------------------------------------- config

Schedules ExperimentConfig::schedules() const { return Schedules::constant(alpha, beta, eta, u, total_steps); }

void ExperimentConfig::validate() const {
  TaskConfig t = task;
  t.validate();
  reader.validate();
  if (train.batch_size == 0) throw ConfigError("train.batch_size", "must be positive");
  if (train.eval_every == 0) throw ConfigError("train.eval_every", "must be positive");
  if (!(train.mask_rate >= 0.0 && train.mask_rate < 1.0)) throw ConfigError("train.mask_rate", "must be in [0, 1)");
  if (!(train.clip_norm >= 0.0)) throw ConfigError("train.clip_norm", "must be non-negative");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("schedule.alpha", "must be positive");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("schedule.beta", "must be non-negative");
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("schedule.eta", "must be in [0, 1]");
  if (u == 0) throw ConfigError("schedule.u", "must be positive");
  if (total_steps == 0) throw ConfigError("schedule.total_steps", "must be positive");
  const CandidateSpace main = parse_space(space, task.passages);
  parse_space(large_space, task.passages);
  // A single-candidate space is allowed for the oracle; learning w needs S < N.
  if (selections < 1 || (main.size() > 1 && selections >= main.size())) {
    throw ConfigError("mask.selections", "need 1 <= S < N");
  }
  if (train.fixed_candidate >= main.size()) throw ConfigError("train.fixed_candidate", "outside the candidate space");
  if (variance_window < 2 || variance_window > total_steps) {
    throw ConfigError("analysis.variance_window", "must be in [2, total_steps]");
  }
  if (threads == 0) throw ConfigError("analysis.threads", "must be positive");
  if (seeds.empty()) throw ConfigError("seeds", "need at least one seed");
}

CandidateSpace parse_space(std::string_view spec, std::size_t passages) {
  if (spec.find('+') != std::string_view::npos) {
    std::vector<MaskCandidate> all;
    for (std::string_view part : text::split(spec, '+')) {
      const CandidateSpace piece = parse_space(text::trim(part), passages);
      all.insert(all.end(), piece.candidates().begin(), piece.candidates().end());
    }
    return CandidateSpace(std::move(all));
  }
  if (spec == "default") return default_space(passages);
  if (spec.starts_with("subsets:")) {
    const auto parts = text::split(spec.substr(8), ':');
    if (parts.size() == 3) {
      return subset_space(text::parse_u64(parts[0], "space"), text::parse_u64(parts[1], "space"),
                          text::parse_u64(parts[2], "space"), passages);
    }
  }
  throw ConfigError("mask.space",
                    "expected 'default', 'subsets:TOP:MIN:MAX' or a '+' union of those, got '" + std::string(spec) + "'");
}

void set_config_entry(ExperimentConfig& c, std::string_view key, std::string_view value) {
  value = text::trim(value);
  auto size = [&](std::size_t& dst) { dst = text::parse_u64(value, key); };
  auto real = [&](double& dst) { dst = text::parse_double(value, key); };
  auto flag = [&](bool& dst) { dst = text::parse_bool(value, key); };
  try {
    if (key == "schema_version") {
      if (text::parse_u64(value, key) != static_cast<std::uint64_t>(kConfigSchemaVersion)) {
        throw ConfigError("schema_version", "unsupported version '" + std::string(value) + "', expected " +
                                                std::to_string(kConfigSchemaVersion));
      }
    } else if (key == "task.seed") {
      throw ConfigError("task.seed", "dataset seeds come from 'seeds'");
    } else if (key.starts_with("task.")) {
      if (!set_task_config_entry(c.task, key.substr(5), value)) {
        throw ConfigError(std::string(key), "unknown key");
      }
    } else if (key == "reader.width") size(c.reader.width);
    else if (key == "reader.depth") size(c.reader.depth);
    else if (key == "reader.rank_aware") flag(c.reader.rank_aware);
    else if (key == "reader.attention_temperature") real(c.reader.attention_temperature);
    else if (key == "reader.embed_scale") real(c.reader.embed_scale);
    else if (key == "train.mode") c.train.mode = parse_mask_mode(value);
    else if (key == "train.batch_size") size(c.train.batch_size);
    else if (key == "train.val_batch_size") size(c.train.val_batch_size);
    else if (key == "train.eval_every") size(c.train.eval_every);
    else if (key == "train.mask_rate") real(c.train.mask_rate);
    else if (key == "train.fixed_candidate") size(c.train.fixed_candidate);
    else if (key == "train.rescale") flag(c.train.rescale);
    else if (key == "train.sample_inner") flag(c.train.sample_inner);
    else if (key == "train.clip_norm") real(c.train.clip_norm);
    else if (key == "train.mask_at_selection") flag(c.train.mask_at_selection);
    else if (key == "schedule.alpha") real(c.alpha);
    else if (key == "schedule.beta") c.beta = text::parse_double(value, key);
    else if (key == "schedule.eta") real(c.eta);
    else if (key == "schedule.u") size(c.u);
    else if (key == "schedule.total_steps") size(c.total_steps);
    else if (key == "mask.selections") size(c.selections);
    else if (key == "mask.space") c.space = std::string(value);
    else if (key == "mask.large_space") c.large_space = std::string(value);
    else if (key == "mask.eval_mask") flag(c.eval_mask);
    else if (key == "analysis.test_shift") {
      c.test_shift = parse_position_mode(value);
      if (c.test_shift == PositionMode::biased) throw ConfigError("analysis.test_shift", "must be uniform or tail-only");
    } else if (key == "analysis.variance_window") size(c.variance_window);
    else if (key == "analysis.threads") size(c.threads);
    else if (key == "seeds") {
      c.seeds.clear();
      for (std::string_view s : text::split(value, ',')) c.seeds.push_back(text::parse_u64(s, key));
      std::vector<std::uint64_t> sorted = c.seeds;
      std::sort(sorted.begin(), sorted.end());
      if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) throw ConfigError("seeds", "duplicate seed");
    } else {
      throw ConfigError(std::string(key), "unknown key");
    }
  } catch (const ConfigError& e) {
    if (e.field() == key) throw;
    throw ConfigError(std::string(key), e.what());
  }
}

ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig c;
  bool versioned = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view view = line;
    if (const auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
    view = text::trim(view);
    if (view.empty()) continue;
    const auto eq = view.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(lineno), "expected 'key = value'");
    }
    const auto key = text::trim(view.substr(0, eq));
    set_config_entry(c, key, view.substr(eq + 1));
    versioned = versioned || key == "schema_version";
  }
  if (!versioned) throw ConfigError("schema_version", "missing; this build reads version " +
                                                          std::to_string(kConfigSchemaVersion));
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  return parse_config(in);
}

std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& c) {
  std::vector<std::pair<std::string, std::string>> out;
  out.emplace_back("schema_version", std::to_string(kConfigSchemaVersion));
  for (auto& [k, v] : task_config_entries(c.task)) {
    if (k != "seed") out.emplace_back("task." + k, v);
  }
  auto b = [](bool x) { return std::string(x ? "true" : "false"); };
  const auto d = text::format_double;
  out.emplace_back("reader.width", std::to_string(c.reader.width));
  out.emplace_back("reader.depth", std::to_string(c.reader.depth));
  out.emplace_back("reader.rank_aware", b(c.reader.rank_aware));
  out.emplace_back("reader.attention_temperature", d(c.reader.attention_temperature));
  out.emplace_back("reader.embed_scale", d(c.reader.embed_scale));
  out.emplace_back("train.mode", std::string(mask_mode_name(c.train.mode)));
  out.emplace_back("train.batch_size", std::to_string(c.train.batch_size));
  out.emplace_back("train.val_batch_size", std::to_string(c.train.val_batch_size));
  out.emplace_back("train.eval_every", std::to_string(c.train.eval_every));
  out.emplace_back("train.mask_rate", d(c.train.mask_rate));
  out.emplace_back("train.fixed_candidate", std::to_string(c.train.fixed_candidate));
  out.emplace_back("train.rescale", b(c.train.rescale));
  out.emplace_back("train.sample_inner", b(c.train.sample_inner));
  out.emplace_back("train.clip_norm", d(c.train.clip_norm));
  out.emplace_back("train.mask_at_selection", b(c.train.mask_at_selection));
  out.emplace_back("schedule.alpha", d(c.alpha));
  out.emplace_back("schedule.beta", d(c.beta));
  out.emplace_back("schedule.eta", d(c.eta));
  out.emplace_back("schedule.u", std::to_string(c.u));
  out.emplace_back("schedule.total_steps", std::to_string(c.total_steps));
  out.emplace_back("mask.selections", std::to_string(c.selections));
  out.emplace_back("mask.space", c.space);
  out.emplace_back("mask.large_space", c.large_space);
  out.emplace_back("mask.eval_mask", b(c.eval_mask));
  out.emplace_back("analysis.test_shift", std::string(position_mode_name(c.test_shift)));
  out.emplace_back("analysis.variance_window", std::to_string(c.variance_window));
  std::string seeds;
  for (std::size_t i = 0; i < c.seeds.size(); ++i) seeds += (i ? "," : "") + std::to_string(c.seeds[i]);
  out.emplace_back("seeds", seeds);
  return out;
}

std::string render_config(const ExperimentConfig& config) {
  std::string out;
  for (const auto& [k, v] : config_entries(config)) out += k + " = " + v + "\n";
  return out;
}

std::uint64_t config_hash(const ExperimentConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : render_config(config)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------- runs

std::string RunSpec::id() const {
  std::string out = "s" + std::to_string(seed) + "-" + std::string(mask_mode_name(mode));
  if (mode == MaskMode::fixed_candidate) out += "-c" + std::to_string(fixed_candidate);
  if (large_space) out += "-large";
  return out;
}

Lab::Lab(ExperimentConfig config) : config_(std::move(config)) {
  config_.validate();
  space_ = parse_space(config_.space, config_.task.passages);
  large_space_ = parse_space(config_.large_space, config_.task.passages);
}

void Lab::set_log_dir(std::filesystem::path dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  log_dir_ = std::move(dir);
}

const Dataset& Lab::dataset(std::uint64_t seed) {
  std::lock_guard lock(mutex_);
  auto& slot = datasets_[seed];
  if (!slot) {
    TaskConfig t = config_.task;
    t.seed = seed;
    slot = std::make_unique<Dataset>(generate(t));
  }
  return *slot;
}

const Dataset& Lab::shifted(std::uint64_t seed) {
  const Dataset& base = dataset(seed);
  std::lock_guard lock(mutex_);
  auto& slot = shifted_[seed];
  if (!slot) slot = std::make_unique<Dataset>(shift_test_distribution(base, config_.test_shift));
  return *slot;
}

std::span<const Example> Lab::test_split(const Dataset& d, AccessAudit& audit) const {
  return d.read(Split::test, Phase::evaluation, audit);
}

TrainedRun Lab::train(const RunSpec& spec, const Dataset& d) const {
  const CandidateSpace& space = spec.large_space ? large_space_ : space_;
  ReaderParams params = ReaderParams::init(config_.reader, d.config.vocab, d.config.classes, spec.seed);
  const bool learns_w = spec.mode == MaskMode::pm;
  MaskParams w = learns_w ? MaskParams::zeros(config_.selections, space.size())
                          : MaskParams{ad::Tensor(ad::Shape{config_.selections, space.size()}, 0.0)};
  TrainOptions options = config_.train;
  options.mode = spec.mode;
  options.fixed_candidate = spec.fixed_candidate;
  options.seed = spec.seed;
  TrainedRun out;
  out.spec = spec;
  out.id = spec.id();
  out.parameter_count = params.parameter_count() + (learns_w ? w.logits.size() : 0);
  std::ofstream log;
  if (log_dir_) {
    log.open(*log_dir_ / (out.id + ".log"), std::ios::binary);
    if (!log) throw IoError("cannot write run log for " + out.id);
  }
  out.result = rankmask::run(d, std::move(params), std::move(w), space, config_.schedules(), options,
                             log_dir_ ? &log : nullptr);
  return out;
}

void Lab::prefetch(const std::vector<RunSpec>& specs) {
  std::vector<RunSpec> missing;
  {
    std::lock_guard lock(mutex_);
    for (const RunSpec& s : specs) {
      if (!runs_.count(s) && std::find(missing.begin(), missing.end(), s) == missing.end()) missing.push_back(s);
    }
  }
  if (missing.empty()) return;
  std::vector<const Dataset*> data;
  for (const RunSpec& s : missing) data.push_back(&dataset(s.seed));

  std::vector<std::unique_ptr<TrainedRun>> done(missing.size());
  std::vector<std::exception_ptr> errors(missing.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < missing.size(); i = next++) {
      try {
        done[i] = std::make_unique<TrainedRun>(train(missing[i], *data[i]));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::min(config_.threads, missing.size());
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::lock_guard lock(mutex_);
  for (std::size_t i = 0; i < missing.size(); ++i) runs_[missing[i]] = std::move(done[i]);
}

const TrainedRun& Lab::run(const RunSpec& spec) {
  prefetch({spec});
  std::lock_guard lock(mutex_);
  return *runs_.at(spec);
}

// ---------------------------------------------------------------- helpers

double sign_test_p(std::size_t successes, std::size_t trials) {
  if (successes > trials) throw ContractError("sign_test_p: successes exceed trials");
  double p = 0.0;
  for (std::size_t k = successes; k <= trials; ++k) {
    p += std::exp(std::lgamma(trials + 1.0) - std::lgamma(k + 1.0) - std::lgamma(trials - k + 1.0) -
                  static_cast<double>(trials) * std::log(2.0));
  }
  return std::min(1.0, p);
}

std::vector<Example> permute_top(std::span<const Example> split, std::size_t k, std::uint64_t seed) {
  std::vector<Example> out(split.begin(), split.end());
  Rng rng(seed, kPermuteStream);
  for (Example& ex : out) {
    const std::size_t n = std::min(k, ex.passages.size());
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    std::vector<std::vector<Token>> moved(n);
    std::size_t evidence = ex.evidence_position;
    for (std::size_t i = 0; i < n; ++i) {
      moved[i] = ex.passages[order[i]];
      if (order[i] == ex.evidence_position) evidence = i;
    }
    for (std::size_t i = 0; i < n; ++i) ex.passages[i] = std::move(moved[i]);
    ex.evidence_position = evidence;
  }
  return out;
}

std::vector<Example> remove_rank(std::span<const Example> split, std::size_t rank) {
  std::vector<Example> out(split.begin(), split.end());
  for (Example& ex : out) {
    if (rank == 0 || rank > ex.passages.size()) throw IndexError("remove_rank: rank out of range");
    const std::size_t idx = rank - 1;
    ex.passages.erase(ex.passages.begin() + static_cast<std::ptrdiff_t>(idx));
    // Evidence removed with its passage is marked past the end.
    if (ex.evidence_position == idx) ex.evidence_position = ex.passages.size();
    else if (ex.evidence_position > idx) --ex.evidence_position;
  }
  return out;
}

HiddenTransform mask_ranks(std::vector<std::size_t> ranks) {
  MaskCandidate c{std::move(ranks)};
  return [c](const HiddenStates& h) { return apply_candidate(h, c, false); };
}

// ---------------------------------------------------------------- analyses

const std::vector<std::string>& analysis_names() {
  static const std::vector<std::string> names{"train",  "mask-position", "permute-remove", "compare",
                                              "oracle", "loss-variance", "efficiency"};
  return names;
}

std::vector<RunSpec> analysis_runs(const Lab& lab, std::string_view name) {
  const ExperimentConfig& c = lab.config();
  std::vector<RunSpec> out;
  for (std::uint64_t seed : c.seeds) {
    if (name == "train") {
      out.push_back({seed, c.train.mode, c.train.fixed_candidate, false});
    } else if (name == "mask-position" || name == "permute-remove") {
      out.push_back({seed, MaskMode::none, 0, false});
    } else if (name == "compare" || name == "efficiency") {
      for (MaskMode m : kCompareModes) out.push_back({seed, m, 0, false});
    } else if (name == "oracle") {
      for (std::size_t i = 0; i < lab.space().size(); ++i) out.push_back({seed, MaskMode::fixed_candidate, i, false});
      if (c.selections < lab.space().size()) out.push_back({seed, MaskMode::pm, 0, false});
    } else if (name == "loss-variance") {
      out.push_back({seed, MaskMode::pm_random_candidate, 0, false});
      out.push_back({seed, MaskMode::pm_random_candidate, 0, true});
      out.push_back({seed, MaskMode::none, 0, false});
    } else {
      throw ConfigError("analysis", "unknown analysis '" + std::string(name) + "'");
    }
  }
  return out;
}

Report run_train_analysis(Lab& lab) {
  ReportBuilder rb(lab, "train");
  const auto& c = lab.config();
  lab.prefetch(analysis_runs(lab, "train"));
  ReportTable t{"train",
                {"best_val_accuracy", "best_step", "test_accuracy", "shifted_test_accuracy", "parameters"},
                {}};
  for (const RunSpec& spec : analysis_runs(lab, "train")) {
    const TrainedRun& run = rb.use(spec);
    const double test = test_accuracy(lab, run, lab.test_split(lab.dataset(spec.seed), rb.audit()));
    const double shifted = test_accuracy(lab, run, lab.test_split(lab.shifted(spec.seed), rb.audit()));
    t.rows.push_back(ReportRow{"seed_" + std::to_string(spec.seed),
                               {run.result.best_val_accuracy, static_cast<double>(run.result.best_step), test, shifted,
                                static_cast<double>(run.parameter_count)},
                               std::vector<std::string>(5, run.id)});
  }
  rb.report().tables.push_back(std::move(t));
  rb.report().metadata["mode"] = std::string(mask_mode_name(c.train.mode));
  return rb.finish();
}

Report run_mask_position_analysis(Lab& lab) {
  const auto& c = lab.config();
  if (c.task.passages < 5) throw ConfigError("task.passages", "mask-position analysis needs at least 5 passages");
  ReportBuilder rb(lab, "mask-position");
  lab.prefetch(analysis_runs(lab, "mask-position"));
  const std::vector<std::pair<std::string, std::vector<std::size_t>>> conditions{
      {"none", {}},         {"mask_1", {1}}, {"mask_2", {2}}, {"mask_3", {3}},
      {"mask_4", {4}},      {"mask_5", {5}}, {"mask_top5", top_ranks(5)}};
  std::vector<std::vector<double>> acc(conditions.size());
  std::vector<std::string> ids;
  for (std::uint64_t seed : c.seeds) {
    const TrainedRun& run = rb.use({seed, MaskMode::none, 0, false});
    ids.push_back(run.id);
    const auto test = lab.test_split(lab.dataset(seed), rb.audit());
    for (std::size_t k = 0; k < conditions.size(); ++k) {
      const auto& ranks = conditions[k].second;
      acc[k].push_back(test_accuracy(lab, run, test, ranks.empty() ? HiddenTransform{} : mask_ranks(ranks)));
    }
  }
  ReportTable t{"mask_position", seed_columns(c.seeds), {}};
  for (std::size_t k = 0; k < conditions.size(); ++k) t.rows.push_back(seed_row(conditions[k].first, acc[k], ids));
  std::size_t ordered = 0, dropped = 0;
  for (std::size_t i = 0; i < c.seeds.size(); ++i) {
    ordered += acc[0][i] > acc[1][i] && acc[1][i] > acc[6][i];
    dropped += acc[0][i] - acc[1][i] >= 0.10;
  }
  ReportTable claims = claims_table();
  claims.rows.push_back(claim_row("none>mask_1>mask_top5", ordered, c.seeds.size()));
  claims.rows.push_back(claim_row("none-mask_1>=0.10", dropped, c.seeds.size()));
  rb.report().tables.push_back(std::move(t));
  rb.report().tables.push_back(std::move(claims));
  return rb.finish();
}

Report run_permute_remove_analysis(Lab& lab) {
  const auto& c = lab.config();
  if (c.task.passages < 5) throw ConfigError("task.passages", "permute-remove analysis needs at least 5 passages");
  ReportBuilder rb(lab, "permute-remove");
  lab.prefetch(analysis_runs(lab, "permute-remove"));
  const std::vector<std::string> labels{"none", "permute_top3", "permute_top5", "remove_1", "remove_2", "remove_3"};
  std::vector<std::vector<double>> acc(labels.size());
  std::vector<std::string> ids;
  for (std::uint64_t seed : c.seeds) {
    const TrainedRun& run = rb.use({seed, MaskMode::none, 0, false});
    ids.push_back(run.id);
    const auto test = lab.test_split(lab.dataset(seed), rb.audit());
    acc[0].push_back(test_accuracy(lab, run, test));
    acc[1].push_back(test_accuracy(lab, run, permute_top(test, 3, seed)));
    acc[2].push_back(test_accuracy(lab, run, permute_top(test, 5, seed)));
    for (std::size_t r = 1; r <= 3; ++r) acc[2 + r].push_back(test_accuracy(lab, run, remove_rank(test, r)));
  }
  ReportTable t{"permute_remove", seed_columns(c.seeds), {}};
  for (std::size_t k = 0; k < labels.size(); ++k) t.rows.push_back(seed_row(labels[k], acc[k], ids));
  std::size_t remove_order = 0;
  for (std::size_t i = 0; i < c.seeds.size(); ++i) remove_order += acc[3][i] < acc[5][i];
  ReportTable claims = claims_table();
  claims.rows.push_back(claim_row("remove_1<remove_3", remove_order, c.seeds.size()));
  rb.report().tables.push_back(std::move(t));
  rb.report().tables.push_back(std::move(claims));
  return rb.finish();
}

Report run_method_comparison(Lab& lab) {
  const auto& c = lab.config();
  ReportBuilder rb(lab, "compare");
  lab.prefetch(analysis_runs(lab, "compare"));
  constexpr std::size_t modes = std::size(kCompareModes);
  std::vector<std::vector<double>> shifted(modes), biased(modes), drop1(modes), drop5(modes), shifted_drop1(modes);
  std::vector<std::vector<std::string>> ids(modes);
  ReportTable logits{"pm_logits", {}, {}};
  for (std::size_t s = 0; s < c.selections; ++s) {
    for (const MaskCandidate& cand : lab.space().candidates()) {
      logits.columns.push_back(c.selections == 1 ? cand.label() : "s" + std::to_string(s) + ":" + cand.label());
    }
  }
  for (std::uint64_t seed : c.seeds) {
    const auto biased_test = lab.test_split(lab.dataset(seed), rb.audit());
    const auto shifted_test = lab.test_split(lab.shifted(seed), rb.audit());
    for (std::size_t m = 0; m < modes; ++m) {
      const TrainedRun& run = rb.use({seed, kCompareModes[m], 0, false});
      ids[m].push_back(run.id);
      shifted[m].push_back(test_accuracy(lab, run, shifted_test));
      const double plain = test_accuracy(lab, run, biased_test);
      biased[m].push_back(plain);
      drop1[m].push_back(plain - test_accuracy(lab, run, biased_test, mask_ranks({1})));
      drop5[m].push_back(plain - test_accuracy(lab, run, biased_test, mask_ranks(top_ranks(5))));
      shifted_drop1[m].push_back(shifted[m].back() - test_accuracy(lab, run, shifted_test, mask_ranks({1})));
      if (kCompareModes[m] == MaskMode::pm) {
        const auto values = run.result.w.logits.values();
        logits.rows.push_back(ReportRow{"seed_" + std::to_string(seed), values,
                                        std::vector<std::string>(values.size(), run.id)});
      }
    }
  }
  auto table = [&](std::string name, const std::vector<std::vector<double>>& data) {
    ReportTable t{std::move(name), seed_columns(c.seeds), {}};
    for (std::size_t m = 0; m < modes; ++m) {
      t.rows.push_back(seed_row(std::string(mask_mode_name(kCompareModes[m])), data[m], ids[m]));
    }
    return t;
  };
  // Row indices into kCompareModes.
  constexpr std::size_t none = 0, dropout = 1, vanilla = 2, random = 3, pm = 4;
  const std::size_t n = c.seeds.size();
  std::size_t pm_beats_base = 0, pm_smaller_drop = 0, pm_ge_vanilla = 0, pm_ge_dropout = 0;
  for (std::size_t i = 0; i < n; ++i) {
    pm_beats_base += shifted[pm][i] > shifted[none][i];
    pm_smaller_drop += shifted_drop1[pm][i] < shifted_drop1[none][i];
    pm_ge_vanilla += shifted[pm][i] >= shifted[vanilla][i];
    pm_ge_dropout += shifted[pm][i] >= shifted[dropout][i];
  }
  const double base_mean = mean_of(shifted[none]);
  const double margin = mean_of(shifted[pm]) - base_mean;
  ReportTable claims = claims_table();
  claims.rows.push_back(claim_row("pm>none shifted", pm_beats_base, n));
  claims.rows.push_back(claim_row("pm shifted drop_1<none shifted drop_1", pm_smaller_drop, n));
  claims.rows.push_back(claim_row("pm>=vanilla shifted", pm_ge_vanilla, n));
  claims.rows.push_back(claim_row("pm>=dimension_dropout shifted", pm_ge_dropout, n));
  claims.rows.push_back(claim_row("mean none<=pm_random_candidate<=pm",
                                  base_mean <= mean_of(shifted[random]) && mean_of(shifted[random]) <= base_mean + margin,
                                  1));
  claims.rows.push_back(claim_row("|vanilla-none|<pm-none", std::abs(mean_of(shifted[vanilla]) - base_mean) < margin, 1));
  claims.rows.push_back(
      claim_row("|dimension_dropout-none|<pm-none", std::abs(mean_of(shifted[dropout]) - base_mean) < margin, 1));

  rb.report().tables.push_back(table("shifted_accuracy", shifted));
  rb.report().tables.push_back(table("biased_accuracy", biased));
  rb.report().tables.push_back(table("mask1_degradation", drop1));
  rb.report().tables.push_back(table("top5_degradation", drop5));
  rb.report().tables.push_back(table("shifted_mask1_degradation", shifted_drop1));
  rb.report().tables.push_back(std::move(logits));
  rb.report().tables.push_back(std::move(claims));
  rb.report().metadata["test_shift"] = std::string(position_mode_name(c.test_shift));
  return rb.finish();
}

Report run_grid_search_oracle(Lab& lab) {
  const auto& c = lab.config();
  ReportBuilder rb(lab, "oracle");
  lab.prefetch(analysis_runs(lab, "oracle"));
  const CandidateSpace& space = lab.space();
  const std::size_t n_cand = space.size();
  std::vector<std::vector<double>> acc(n_cand), loss(n_cand), rank(n_cand);
  std::vector<std::vector<std::string>> ids(n_cand);
  ReportTable choice{"pm_choice", {"candidate", "oracle_rank", "top2"}, {}};
  std::size_t hits = 0;
  for (std::uint64_t seed : c.seeds) {
    const Dataset& d = lab.dataset(seed);
    std::vector<std::size_t> order(n_cand);
    std::vector<Score> scores;
    for (std::size_t k = 0; k < n_cand; ++k) {
      const TrainedRun& run = rb.use({seed, MaskMode::fixed_candidate, k, false});
      const Score sc = score(d.read(Split::val, Phase::selection, rb.audit()), run.result.params);
      scores.push_back(sc);
      acc[k].push_back(sc.accuracy);
      loss[k].push_back(sc.loss);
      ids[k].push_back(run.id);
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (scores[a].accuracy != scores[b].accuracy) return scores[a].accuracy > scores[b].accuracy;
      return scores[a].loss < scores[b].loss;
    });
    std::vector<std::size_t> rank_of(n_cand);
    for (std::size_t r = 0; r < n_cand; ++r) rank_of[order[r]] = r + 1;
    for (std::size_t k = 0; k < n_cand; ++k) rank[k].push_back(static_cast<double>(rank_of[k]));

    if (c.selections >= n_cand) continue;
    const TrainedRun& pm_run = rb.use({seed, MaskMode::pm, 0, false});
    const std::size_t picked = discretize_indices(pm_run.result.w).front();
    const bool top2 = rank_of[picked] <= 2;
    hits += top2;
    choice.rows.push_back(ReportRow{"seed_" + std::to_string(seed),
                                    {static_cast<double>(picked), static_cast<double>(rank_of[picked]),
                                     top2 ? 1.0 : 0.0},
                                    {pm_run.id, "-", "-"}});
  }
  auto table = [&](std::string name, const std::vector<std::vector<double>>& data) {
    ReportTable t{std::move(name), seed_columns(c.seeds), {}};
    for (std::size_t k = 0; k < n_cand; ++k) t.rows.push_back(seed_row(space[k].label(), data[k], ids[k]));
    return t;
  };
  rb.report().tables.push_back(table("oracle_val_accuracy", acc));
  rb.report().tables.push_back(table("oracle_val_loss", loss));
  rb.report().tables.push_back(table("oracle_rank", rank));
  if (!choice.rows.empty()) {
    ReportTable claims = claims_table();
    claims.rows.push_back(claim_row("pm choice in oracle top-2", hits, c.seeds.size()));
    rb.report().tables.push_back(std::move(choice));
    rb.report().tables.push_back(std::move(claims));
  }
  return rb.finish();
}

Report measure_loss_variance(Lab& lab) {
  const auto& c = lab.config();
  ReportBuilder rb(lab, "loss-variance");
  lab.prefetch(analysis_runs(lab, "loss-variance"));
  const std::string small_label = "space_" + std::to_string(lab.space().size());
  const std::string large_label = "space_" + std::to_string(lab.large_space().size()) + "_large";
  std::vector<double> small, large, none;
  std::vector<std::string> small_ids, large_ids, none_ids;
  auto window_std = [&](const TrainedRun& run) {
    std::vector<double> losses;
    for (const StepRecord& r : run.result.steps) losses.push_back(r.train_loss);
    const std::size_t w = std::min(c.variance_window, losses.size());
    return sample_std(std::span<const double>(losses).last(w));
  };
  std::size_t fewer_wins = 0;
  for (std::uint64_t seed : c.seeds) {
    const TrainedRun& a = rb.use({seed, MaskMode::pm_random_candidate, 0, false});
    const TrainedRun& b = rb.use({seed, MaskMode::pm_random_candidate, 0, true});
    const TrainedRun& z = rb.use({seed, MaskMode::none, 0, false});
    small.push_back(window_std(a));
    large.push_back(window_std(b));
    none.push_back(window_std(z));
    small_ids.push_back(a.id);
    large_ids.push_back(b.id);
    none_ids.push_back(z.id);
    fewer_wins += small.back() < large.back();
  }
  ReportTable t{"loss_std", seed_columns(c.seeds), {}};
  t.rows.push_back(seed_row(small_label, small, small_ids));
  t.rows.push_back(seed_row(large_label, large, large_ids));
  t.rows.push_back(seed_row("none", none, none_ids));
  ReportTable claims = claims_table();
  claims.rows.push_back(claim_row(small_label + "<" + large_label, fewer_wins, c.seeds.size()));
  rb.report().tables.push_back(std::move(t));
  rb.report().tables.push_back(std::move(claims));
  rb.report().metadata["variance_window"] = std::to_string(c.variance_window);
  return rb.finish();
}

Report run_efficiency(Lab& lab) {
  const auto& c = lab.config();
  ReportBuilder rb(lab, "efficiency");
  lab.prefetch(analysis_runs(lab, "efficiency"));
  ReportTable t{"efficiency", {"parameters", "extra_parameters", "outer_updates"}, {}};
  const std::uint64_t seed = c.seeds.front();
  const std::size_t base = rb.use({seed, MaskMode::none, 0, false}).parameter_count;
  for (MaskMode m : kCompareModes) {
    const TrainedRun& run = rb.use({seed, m, 0, false});
    t.rows.push_back(ReportRow{std::string(mask_mode_name(m)),
                               {static_cast<double>(run.parameter_count),
                                static_cast<double>(run.parameter_count) - static_cast<double>(base),
                                static_cast<double>(run.result.outer_updates)},
                               {run.id, run.id, run.id}});
  }
  for (std::size_t i = 1; i < c.seeds.size(); ++i) {
    for (MaskMode m : kCompareModes) rb.use({c.seeds[i], m, 0, false});
  }
  rb.report().tables.push_back(std::move(t));
  rb.report().metadata["timing"] = "timing.csv";
  return rb.finish();
}

Report run_analysis(Lab& lab, std::string_view name) {
  if (name == "train") return run_train_analysis(lab);
  if (name == "mask-position") return run_mask_position_analysis(lab);
  if (name == "permute-remove") return run_permute_remove_analysis(lab);
  if (name == "compare") return run_method_comparison(lab);
  if (name == "oracle") return run_grid_search_oracle(lab);
  if (name == "loss-variance") return measure_loss_variance(lab);
  if (name == "efficiency") return run_efficiency(lab);
  throw ConfigError("analysis", "unknown analysis '" + std::string(name) + "'");
}

std::string render_timing(Lab& lab, const std::vector<RunSpec>& specs) {
  std::string out = "run_id,steps,seconds,seconds_per_step,parameters\n";
  for (const RunSpec& spec : specs) {
    const TrainedRun& run = lab.run(spec);
    const double steps = static_cast<double>(run.result.steps.size());
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%zu,%.6f,%.6f,%zu\n", run.id.c_str(), run.result.steps.size(),
                  run.result.seconds, steps > 0 ? run.result.seconds / steps : 0.0, run.parameter_count);
    out += buf;
  }
  return out;
}

}  // namespace rankmask
