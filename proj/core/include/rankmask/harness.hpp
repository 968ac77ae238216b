#pragma once

// Experiment driver: configuration, cached replicate runs, and the analyses
// built on them.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "rankmask/bilevel.hpp"
#include "rankmask/passage_mask.hpp"
#include "rankmask/reader.hpp"
#include "rankmask/report.hpp"
#include "rankmask/taskgen.hpp"

namespace rankmask {

inline constexpr int kConfigSchemaVersion = 1;

struct ExperimentConfig {
  TaskConfig task;  // task.seed is replaced by each replicate seed
  ReaderConfig reader{.rank_aware = true};
  TrainOptions train{.mask_rate = 0.1, .sample_inner = true};
  double alpha = 0.5;
  double beta = 1.0;
  double eta = 0.9;
  std::size_t u = 10;
  std::size_t total_steps = 1000;
  std::size_t selections = 1;               // S
  std::string space = "default";            // see parse_space
  std::string large_space = "subsets:5:2:2+subsets:6:1:1";
  bool eval_mask = false;                   // apply discretize(w) at test time for pm runs
  PositionMode test_shift = PositionMode::tail_only;
  std::size_t variance_window = 300;
  std::size_t threads = 1;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

  Schedules schedules() const;
  void validate() const;
};

/// Parses "key = value" lines; '#' starts a comment. The file must declare
/// schema_version. Unknown keys are a ConfigError.
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Applies one "key=value" override.
void set_config_entry(ExperimentConfig& config, std::string_view key, std::string_view value);
/// Canonical key-value echo, fixed order.
std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& config);
std::string render_config(const ExperimentConfig& config);
/// FNV-1a over the canonical echo.
std::uint64_t config_hash(const ExperimentConfig& config);

/// "default", "subsets:TOP:MIN:MAX", or a '+'-joined union of those in order.
CandidateSpace parse_space(std::string_view spec, std::size_t passages);

/// Which training run a replicate needs.
struct RunSpec {
  std::uint64_t seed = 1;
  MaskMode mode = MaskMode::none;
  std::size_t fixed_candidate = 0;
  bool large_space = false;

  std::string id() const;
  auto operator<=>(const RunSpec&) const = default;
};

struct TrainedRun {
  RunSpec spec;
  std::string id;
  RunResult result;
  std::size_t parameter_count = 0;  // θ plus mask logits when the mode learns them
};

/// Owns datasets and trained runs for one ExperimentConfig. Runs are trained
/// once and reused by every analysis; prefetch trains missing runs on up to
/// config.threads threads.
class Lab {
 public:
  explicit Lab(ExperimentConfig config);

  const ExperimentConfig& config() const noexcept { return config_; }
  const CandidateSpace& space() const noexcept { return space_; }
  const CandidateSpace& large_space() const noexcept { return large_space_; }

  /// Writes runs/<id>.log for every run trained from now on.
  void set_log_dir(std::filesystem::path dir);

  const Dataset& dataset(std::uint64_t seed);
  const Dataset& shifted(std::uint64_t seed);

  void prefetch(const std::vector<RunSpec>& specs);
  const TrainedRun& run(const RunSpec& spec);

  /// Audited test-split read for evaluation.
  std::span<const Example> test_split(const Dataset& d, AccessAudit& audit) const;

 private:
  TrainedRun train(const RunSpec& spec, const Dataset& d) const;

  ExperimentConfig config_;
  CandidateSpace space_;
  CandidateSpace large_space_;
  std::optional<std::filesystem::path> log_dir_;
  std::mutex mutex_;
  std::map<std::uint64_t, std::unique_ptr<Dataset>> datasets_;
  std::map<std::uint64_t, std::unique_ptr<Dataset>> shifted_;
  std::map<RunSpec, std::unique_ptr<TrainedRun>> runs_;
};

/// One-sided sign test: P(X >= successes) for X ~ Binomial(trials, 1/2).
double sign_test_p(std::size_t successes, std::size_t trials);

// Evaluation-time transforms of a split.
std::vector<Example> permute_top(std::span<const Example> split, std::size_t k, std::uint64_t seed);
std::vector<Example> remove_rank(std::span<const Example> split, std::size_t rank);
HiddenTransform mask_ranks(std::vector<std::size_t> ranks);

Report run_train_analysis(Lab& lab);
Report run_mask_position_analysis(Lab& lab);
Report run_permute_remove_analysis(Lab& lab);
Report run_method_comparison(Lab& lab);
Report run_grid_search_oracle(Lab& lab);
Report measure_loss_variance(Lab& lab);
Report run_efficiency(Lab& lab);

/// Analysis names accepted by run_analysis.
const std::vector<std::string>& analysis_names();
Report run_analysis(Lab& lab, std::string_view name);
/// Training runs an analysis depends on.
std::vector<RunSpec> analysis_runs(const Lab& lab, std::string_view name);

/// Per-run timing lines (run id, steps, seconds); kept out of the report so
/// reports stay byte-identical across runs.
std::string render_timing(Lab& lab, const std::vector<RunSpec>& specs);

}  // namespace rankmask
