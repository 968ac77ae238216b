#pragma once

// Synthetic ranked-retrieval classification tasks.
//
// Each example is a question plus P passages in rank order. One passage holds
// the evidence bigram (evidence marker, label token); other passages may hold
// a decoy bigram (decoy marker, random label token). With keyed evidence the
// question names one evidence marker as its topic, and decoys use the other
// evidence markers, so a reader has to match passage against question. During
// training the evidence sits mostly in the top ranks, which is what a reader
// can overfit.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rankmask {

using Token = std::uint32_t;

// Reserved tokens.
inline constexpr Token kPad = 0;
inline constexpr Token kQuestionMarker = 1;
inline constexpr Token kTitleMarker = 2;
inline constexpr Token kContextMarker = 3;

/// Where evidence may be placed when a split is generated or shifted.
enum class PositionMode { biased, uniform, tail_only };

std::string_view position_mode_name(PositionMode mode);
PositionMode parse_position_mode(std::string_view name);

struct TaskConfig {
  std::size_t passages = 10;       // P
  std::size_t passage_len = 8;     // len; the question slot is padded to it
  std::size_t question_len = 2;    // L_q, including the question marker
  std::size_t classes = 8;         // C
  std::size_t vocab = 168;
  double rank_bias = 0.5;
  // The bias profile decays over ranks 1..head+1 and is flat beyond;
  // 0 means a plain geometric profile over all ranks.
  std::size_t rank_head = 0;
  std::size_t evidence_markers = 8;
  double decoy_rate = 0.4;
  bool keyed_evidence = true;
  PositionMode val_positions = PositionMode::tail_only;
  std::size_t train_size = 2000;
  std::size_t val_size = 500;
  std::size_t test_size = 500;
  std::uint64_t seed = 1;

  /// Throws ConfigError naming the first offending field.
  void validate() const;

  friend bool operator==(const TaskConfig&, const TaskConfig&) = default;
};

/// Key-value form of a TaskConfig, in a fixed order. Doubles are written in
/// shortest round-trip form.
std::vector<std::pair<std::string, std::string>> task_config_entries(const TaskConfig& config);
/// Returns false for an unknown key; throws ConfigError for a bad value.
bool set_task_config_entry(TaskConfig& config, std::string_view key, std::string_view value);

/// Token bands derived from a TaskConfig.
struct Vocabulary {
  Token label_begin;
  Token evidence_begin;
  Token decoy_begin;
  Token question_begin;
  std::size_t question_count;
  Token filler_begin;
  std::size_t filler_count;

  static Vocabulary layout(const TaskConfig& config);
  bool is_evidence_marker(Token t, std::size_t markers) const {
    return t >= evidence_begin && t < evidence_begin + markers;
  }
};

struct Example {
  std::vector<Token> question;               // padded to passage_len
  std::vector<std::vector<Token>> passages;  // rank order, index 0 = rank 1
  std::size_t label = 0;
  std::size_t evidence_position = 0;         // 0-based rank index

  friend bool operator==(const Example&, const Example&) = default;
};

enum class Split { train, val, test };
std::string_view split_name(Split split);

/// Who is reading a split. Training phases may only touch their own split.
enum class Phase { inner, outer, selection, evaluation };
std::string_view phase_name(Phase phase);

/// Records every split read by phase and rejects reads that would leak
/// validation or test data into training.
class AccessAudit {
 public:
  static bool allowed(Phase phase, Split split);

  /// Throws AuditError for a forbidden read.
  void record(Phase phase, Split split);

  std::size_t count(Phase phase, Split split) const;
  const std::map<std::pair<Phase, Split>, std::size_t>& reads() const noexcept { return reads_; }
  void merge(const AccessAudit& other);
  bool passed() const noexcept { return violations_ == 0; }

 private:
  std::map<std::pair<Phase, Split>, std::size_t> reads_;
  std::size_t violations_ = 0;
};

struct Dataset {
  TaskConfig config;
  std::vector<Example> train;
  std::vector<Example> val;
  std::vector<Example> test;

  /// Audited access to a split.
  std::span<const Example> read(Split split, Phase phase, AccessAudit& audit) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Probability of each rank holding the evidence under `mode`.
std::vector<double> position_distribution(const TaskConfig& config, PositionMode mode);

Dataset generate(const TaskConfig& config);

/// Moves each test example's evidence passage to a freshly drawn rank.
/// Train and val are copied unchanged.
Dataset shift_test_distribution(const Dataset& d, PositionMode mode);
Dataset shift_test_distribution(const Dataset& d, std::string_view mode);

/// Reads the label off the evidence bigram (with keyed evidence, the one whose
/// marker is the question's topic); the upper bound for any reader. Returns
/// classes when no evidence is found.
std::size_t decode_label(const Example& example, const TaskConfig& config);

void save_dataset(const Dataset& d, std::ostream& out);
Dataset load_dataset(std::istream& in);
void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace rankmask
