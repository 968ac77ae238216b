#include "rankmask/taskgen.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "rankmask/error.hpp"
#include "rankmask/rng.hpp"
#include "rankmask/text.hpp"

namespace rankmask {

namespace {

constexpr std::string_view kDatasetMagic = "rankmask-dataset 1";

enum Stream : std::uint64_t { train_stream = 1, val_stream = 2, test_stream = 3, shift_stream = 4 };

std::size_t sample_index(Rng& rng, std::span<const double> probs) {
  const double u = rng.uniform();
  double cum = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    cum += probs[i];
    last = i;
    if (u < cum) return i;
  }
  return last;
}

Example make_example(Rng& rng, const TaskConfig& c, const Vocabulary& v, std::span<const double> probs) {
  Example ex;
  ex.label = rng.below(c.classes);
  ex.evidence_position = sample_index(rng, probs);
  ex.question.assign(c.passage_len, kPad);
  ex.question[0] = kQuestionMarker;
  for (std::size_t i = 1; i < c.question_len; ++i) {
    ex.question[i] = v.question_begin + static_cast<Token>(rng.below(v.question_count));
  }
  const std::size_t topic = rng.below(c.evidence_markers);
  if (c.keyed_evidence) ex.question[1] = v.evidence_begin + static_cast<Token>(topic);
  ex.passages.resize(c.passages);
  for (std::size_t r = 0; r < c.passages; ++r) {
    auto& t = ex.passages[r];
    t.resize(c.passage_len);
    t[0] = kTitleMarker;
    t[1] = v.filler_begin + static_cast<Token>(rng.below(v.filler_count));
    t[2] = kContextMarker;
    for (std::size_t i = 3; i < c.passage_len; ++i) {
      t[i] = v.filler_begin + static_cast<Token>(rng.below(v.filler_count));
    }
    const std::size_t pos = 3 + rng.below(c.passage_len - 4);
    if (r == ex.evidence_position) {
      t[pos] = v.evidence_begin + static_cast<Token>(c.keyed_evidence ? topic : rng.below(c.evidence_markers));
      t[pos + 1] = v.label_begin + static_cast<Token>(ex.label);
    } else if (rng.bernoulli(c.decoy_rate)) {
      if (c.keyed_evidence) {
        const std::size_t other = (topic + 1 + rng.below(c.evidence_markers - 1)) % c.evidence_markers;
        t[pos] = v.evidence_begin + static_cast<Token>(other);
      } else {
        t[pos] = v.decoy_begin + static_cast<Token>(rng.below(c.evidence_markers));
      }
      t[pos + 1] = v.label_begin + static_cast<Token>(rng.below(c.classes));
    }
  }
  return ex;
}

std::vector<Example> make_split(Rng rng, std::size_t n, const TaskConfig& c, PositionMode mode) {
  const Vocabulary v = Vocabulary::layout(c);
  const std::vector<double> probs = position_distribution(c, mode);
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_example(rng, c, v, probs));
  return out;
}

std::string join_tokens(std::span<const Token> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(tokens[i]);
  }
  return out;
}

std::vector<Token> parse_tokens(std::string_view field, std::size_t expected, std::size_t vocab) {
  std::vector<Token> out;
  for (std::string_view part : text::split(field, ',')) {
    const std::uint64_t t = text::parse_u64(part, "token");
    if (t >= vocab) throw IndexError("dataset token " + std::to_string(t) + " outside vocabulary");
    out.push_back(static_cast<Token>(t));
  }
  if (out.size() != expected) {
    throw IoError("dataset record has " + std::to_string(out.size()) + " tokens, expected " +
                  std::to_string(expected));
  }
  return out;
}

}  // namespace

std::string_view position_mode_name(PositionMode mode) {
  switch (mode) {
    case PositionMode::biased: return "biased";
    case PositionMode::uniform: return "uniform";
    case PositionMode::tail_only: return "tail-only";
  }
  return "unknown";
}

PositionMode parse_position_mode(std::string_view name) {
  if (name == "biased") return PositionMode::biased;
  if (name == "uniform") return PositionMode::uniform;
  if (name == "tail-only") return PositionMode::tail_only;
  throw ConfigError("mode", "unknown position mode '" + std::string(name) + "'");
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "unknown";
}

std::string_view phase_name(Phase phase) {
  switch (phase) {
    case Phase::inner: return "inner";
    case Phase::outer: return "outer";
    case Phase::selection: return "selection";
    case Phase::evaluation: return "evaluation";
  }
  return "unknown";
}

void TaskConfig::validate() const {
  auto need = [](bool ok, const char* field, const std::string& msg) {
    if (!ok) throw ConfigError(field, msg);
  };
  need(passages >= 5, "passages", "must be at least 5");
  need(passage_len >= 5, "passage_len", "must be at least 5");
  need(question_len >= 1 && question_len <= passage_len, "question_len", "must be in [1, passage_len]");
  need(classes >= 2, "classes", "must be at least 2");
  need(evidence_markers >= (keyed_evidence ? 2u : 1u), "evidence_markers",
       keyed_evidence ? "keyed evidence needs at least 2" : "must be at least 1");
  need(!keyed_evidence || question_len >= 2, "question_len", "keyed evidence needs room for the topic");
  need(std::isfinite(rank_bias) && rank_bias >= 0.0, "rank_bias", "must be finite and non-negative");
  need(decoy_rate >= 0.0 && decoy_rate <= 1.0, "decoy_rate", "must be in [0, 1]");
  need(train_size >= 1, "train_size", "must be at least 1");
  need(val_size >= 1, "val_size", "must be at least 1");
  need(test_size >= 1, "test_size", "must be at least 1");
  const std::size_t reserved = 4 + classes + 2 * evidence_markers;
  need(vocab >= reserved + 2, "vocab", "must be at least " + std::to_string(reserved + 2));
}

std::vector<std::pair<std::string, std::string>> task_config_entries(const TaskConfig& c) {
  return {
      {"passages", std::to_string(c.passages)},
      {"passage_len", std::to_string(c.passage_len)},
      {"question_len", std::to_string(c.question_len)},
      {"classes", std::to_string(c.classes)},
      {"vocab", std::to_string(c.vocab)},
      {"rank_bias", text::format_double(c.rank_bias)},
      {"rank_head", std::to_string(c.rank_head)},
      {"evidence_markers", std::to_string(c.evidence_markers)},
      {"decoy_rate", text::format_double(c.decoy_rate)},
      {"keyed_evidence", c.keyed_evidence ? "true" : "false"},
      {"val_positions", std::string(position_mode_name(c.val_positions))},
      {"train_size", std::to_string(c.train_size)},
      {"val_size", std::to_string(c.val_size)},
      {"test_size", std::to_string(c.test_size)},
      {"seed", std::to_string(c.seed)},
  };
}

bool set_task_config_entry(TaskConfig& c, std::string_view key, std::string_view value) {
  auto size = [&](std::size_t& dst) { dst = text::parse_u64(value, key); };
  if (key == "passages") size(c.passages);
  else if (key == "passage_len") size(c.passage_len);
  else if (key == "question_len") size(c.question_len);
  else if (key == "classes") size(c.classes);
  else if (key == "vocab") size(c.vocab);
  else if (key == "rank_bias") c.rank_bias = text::parse_double(value, key);
  else if (key == "rank_head") size(c.rank_head);
  else if (key == "evidence_markers") size(c.evidence_markers);
  else if (key == "decoy_rate") c.decoy_rate = text::parse_double(value, key);
  else if (key == "keyed_evidence") c.keyed_evidence = text::parse_bool(value, key);
  else if (key == "val_positions") {
    try {
      c.val_positions = parse_position_mode(text::trim(value));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(key), e.what());
    }
  } else if (key == "train_size") size(c.train_size);
  else if (key == "val_size") size(c.val_size);
  else if (key == "test_size") size(c.test_size);
  else if (key == "seed") c.seed = text::parse_u64(value, key);
  else return false;
  return true;
}

Vocabulary Vocabulary::layout(const TaskConfig& c) {
  Vocabulary v{};
  v.label_begin = 4;
  v.evidence_begin = v.label_begin + static_cast<Token>(c.classes);
  v.decoy_begin = v.evidence_begin + static_cast<Token>(c.evidence_markers);
  v.question_begin = v.decoy_begin + static_cast<Token>(c.evidence_markers);
  const std::size_t rest = c.vocab - v.question_begin;
  v.question_count = std::max<std::size_t>(1, rest / 4);
  v.filler_begin = v.question_begin + static_cast<Token>(v.question_count);
  v.filler_count = c.vocab - v.filler_begin;
  return v;
}

bool AccessAudit::allowed(Phase phase, Split split) {
  switch (phase) {
    case Phase::inner: return split == Split::train;
    case Phase::outer:
    case Phase::selection: return split == Split::val;
    case Phase::evaluation: return true;
  }
  return false;
}

void AccessAudit::record(Phase phase, Split split) {
  ++reads_[{phase, split}];
  if (!allowed(phase, split)) {
    ++violations_;
    throw AuditError(std::string(phase_name(phase)) + " phase may not read the " + std::string(split_name(split)) +
                     " split");
  }
}

std::size_t AccessAudit::count(Phase phase, Split split) const {
  auto it = reads_.find({phase, split});
  return it == reads_.end() ? 0 : it->second;
}

void AccessAudit::merge(const AccessAudit& other) {
  for (const auto& [key, n] : other.reads_) reads_[key] += n;
  violations_ += other.violations_;
}

std::span<const Example> Dataset::read(Split split, Phase phase, AccessAudit& audit) const {
  audit.record(phase, split);
  switch (split) {
    case Split::train: return train;
    case Split::val: return val;
    case Split::test: return test;
  }
  return {};
}

std::vector<double> position_distribution(const TaskConfig& c, PositionMode mode) {
  std::vector<double> p(c.passages, 0.0);
  switch (mode) {
    case PositionMode::biased: {
      double z = 0.0;
      for (std::size_t r = 0; r < c.passages; ++r) {
        const std::size_t depth = c.rank_head == 0 ? r : std::min(r, c.rank_head);
        p[r] = std::exp(-c.rank_bias * static_cast<double>(depth));
        z += p[r];
      }
      for (double& x : p) x /= z;
      break;
    }
    case PositionMode::uniform:
      for (double& x : p) x = 1.0 / static_cast<double>(c.passages);
      break;
    case PositionMode::tail_only:
      for (std::size_t r = 4; r < c.passages; ++r) p[r] = 1.0 / static_cast<double>(c.passages - 4);
      break;
  }
  return p;
}

Dataset generate(const TaskConfig& config) {
  config.validate();
  Dataset d;
  d.config = config;
  d.train = make_split(Rng(config.seed, train_stream), config.train_size, config, PositionMode::biased);
  d.val = make_split(Rng(config.seed, val_stream), config.val_size, config, config.val_positions);
  d.test = make_split(Rng(config.seed, test_stream), config.test_size, config, PositionMode::biased);
  return d;
}

Dataset shift_test_distribution(const Dataset& d, PositionMode mode) {
  Dataset out = d;
  const std::vector<double> probs = position_distribution(d.config, mode);
  Rng rng(d.config.seed, shift_stream);
  for (Example& ex : out.test) {
    const std::size_t to = sample_index(rng, probs);
    std::swap(ex.passages[ex.evidence_position], ex.passages[to]);
    ex.evidence_position = to;
  }
  return out;
}

Dataset shift_test_distribution(const Dataset& d, std::string_view mode) {
  return shift_test_distribution(d, parse_position_mode(mode));
}

std::size_t decode_label(const Example& example, const TaskConfig& config) {
  const Vocabulary v = Vocabulary::layout(config);
  for (const auto& passage : example.passages) {
    for (std::size_t i = 0; i + 1 < passage.size(); ++i) {
      const bool key = config.keyed_evidence ? passage[i] == example.question.at(1)
                                             : v.is_evidence_marker(passage[i], config.evidence_markers);
      if (key) {
        const Token next = passage[i + 1];
        if (next >= v.label_begin && next < v.label_begin + config.classes) return next - v.label_begin;
      }
    }
  }
  return config.classes;
}

void save_dataset(const Dataset& d, std::ostream& out) {
  out << kDatasetMagic << '\n' << "config";
  for (const auto& [k, v] : task_config_entries(d.config)) out << ' ' << k << '=' << v;
  out << '\n';
  auto write = [&](std::string_view name, const std::vector<Example>& split) {
    for (const Example& ex : split) {
      out << name << ' ' << ex.label << ' ' << ex.evidence_position << ' ' << join_tokens(ex.question);
      for (const auto& p : ex.passages) out << ' ' << join_tokens(p);
      out << '\n';
    }
  };
  write("train", d.train);
  write("val", d.val);
  write("test", d.test);
  if (!out) throw IoError("failed writing dataset");
}

Dataset load_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kDatasetMagic) throw IoError("not a dataset file (bad header)");
  if (!std::getline(in, line) || !line.starts_with("config")) throw IoError("dataset file lacks a config line");
  Dataset d;
  for (std::string_view entry : text::split(std::string_view(line).substr(6), ' ')) {
    if (entry.empty()) continue;
    const auto eq = entry.find('=');
    if (eq == std::string_view::npos) throw IoError("malformed config entry '" + std::string(entry) + "'");
    if (!set_task_config_entry(d.config, entry.substr(0, eq), entry.substr(eq + 1))) {
      throw IoError("unknown config key '" + std::string(entry.substr(0, eq)) + "'");
    }
  }
  d.config.validate();
  const TaskConfig& c = d.config;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = text::split(line, ' ');
    if (fields.size() != 4 + c.passages) throw IoError("dataset record has wrong field count");
    Example ex;
    ex.label = text::parse_u64(fields[1], "label");
    ex.evidence_position = text::parse_u64(fields[2], "evidence_position");
    if (ex.label >= c.classes || ex.evidence_position >= c.passages) throw IoError("dataset record out of range");
    ex.question = parse_tokens(fields[3], c.passage_len, c.vocab);
    for (std::size_t r = 0; r < c.passages; ++r) ex.passages.push_back(parse_tokens(fields[4 + r], c.passage_len, c.vocab));
    if (fields[0] == "train") d.train.push_back(std::move(ex));
    else if (fields[0] == "val") d.val.push_back(std::move(ex));
    else if (fields[0] == "test") d.test.push_back(std::move(ex));
    else throw IoError("unknown split '" + std::string(fields[0]) + "'");
  }
  if (d.train.size() != c.train_size || d.val.size() != c.val_size || d.test.size() != c.test_size) {
    throw IoError("dataset split sizes do not match its config");
  }
  return d;
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  save_dataset(d, out);
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return load_dataset(in);
}

}  // namespace rankmask
