#pragma once

// Toy fusion reader. Every slot (the question, then each passage in rank
// order) is encoded independently, mixing in a question summary both additively
// and through a product with the previous-token features; a single
// additive-attention pool over all (slot, position) pairs feeds a linear
// classifier.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rankmask/autodiff.hpp"
#include "rankmask/taskgen.hpp"

namespace rankmask {

struct ReaderConfig {
  std::size_t width = 32;  // d
  std::size_t depth = 2;   // 1 or 2 encoder layers; the second is residual
  // Adds a learned projection of a sinusoidal slot code to the attention
  // scores, letting pooling prefer some ranks over others.
  bool rank_aware = false;
  double attention_temperature = 4.0;
  double embed_scale = 2.0;  // multiplies the uniform init of the embedding table

  void validate() const;
  friend bool operator==(const ReaderConfig&, const ReaderConfig&) = default;
};

/// θ as an ordered list of named tensors.
class ReaderParams {
 public:
  ReaderParams() = default;

  /// Uniform init in [-1/sqrt(d), 1/sqrt(d)] from `seed`.
  static ReaderParams init(const ReaderConfig& config, std::size_t vocab, std::size_t classes, std::uint64_t seed);

  const ReaderConfig& config() const noexcept { return config_; }
  std::size_t vocab() const noexcept { return vocab_; }
  std::size_t classes() const noexcept { return classes_; }

  const std::vector<std::string>& names() const noexcept { return names_; }
  std::vector<ad::Tensor>& tensors() noexcept { return tensors_; }
  const std::vector<ad::Tensor>& tensors() const noexcept { return tensors_; }
  ad::Tensor& get(std::string_view name);
  const ad::Tensor& get(std::string_view name) const;
  bool has(std::string_view name) const;

  std::size_t parameter_count() const;

  friend bool operator==(const ReaderParams&, const ReaderParams&) = default;

 private:
  friend struct CheckpointIo;
  ReaderConfig config_;
  std::size_t vocab_ = 0;
  std::size_t classes_ = 0;
  std::vector<std::string> names_;
  std::vector<ad::Tensor> tensors_;
};

/// ReaderParams placed on a graph, in the order of ReaderParams::names().
struct ReaderVars {
  const ReaderParams* params = nullptr;
  std::vector<ad::Var> all;

  ad::Var operator[](std::string_view name) const;
};

/// Leaves when `trainable`, constants otherwise.
ReaderVars bind(ad::Graph& graph, const ReaderParams& params, bool trainable);

/// Encoded slots with shape [batch, P+1, len, d]; slot i >= 1 is rank i.
struct HiddenStates {
  ad::Var values;

  std::size_t batch() const { return values.shape()[0]; }
  std::size_t slots() const { return values.shape()[1]; }
  std::size_t length() const { return values.shape()[2]; }
  std::size_t width() const { return values.shape()[3]; }
};

/// All examples must share the passage count and length.
HiddenStates encode(std::span<const Example> batch, const ReaderVars& vars);
/// [batch x C] log-probabilities.
ad::Var predict(const HiddenStates& h, const ReaderVars& vars);
ad::Var loss(std::span<const Example> batch, const HiddenStates& h, const ReaderVars& vars);

using HiddenTransform = std::function<HiddenStates(const HiddenStates&)>;

struct Score {
  double accuracy = 0.0;
  double loss = 0.0;
};

/// Accuracy and mean loss with `transform` applied to the hidden states
/// before predict. Throws ContractError on an empty split.
Score score(std::span<const Example> split, const ReaderParams& params, const HiddenTransform& transform = {});
double evaluate(std::span<const Example> split, const ReaderParams& params, const HiddenTransform& transform = {});

/// Sinusoidal code of each slot, [slots x width].
ad::Tensor slot_codes(std::size_t slots, std::size_t width);

struct Checkpoint {
  ReaderParams params;
  std::optional<ad::Tensor> mask_logits;
  std::vector<std::vector<std::size_t>> candidates;  // 1-based rank positions per candidate

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

void save_checkpoint(const Checkpoint& ckpt, std::ostream& out);
Checkpoint load_checkpoint(std::istream& in);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace rankmask
