#include "rankmask/reader.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "rankmask/error.hpp"
#include "rankmask/rng.hpp"
#include "rankmask/text.hpp"

namespace rankmask {

using ad::Graph;
using ad::Shape;
using ad::Tensor;
using ad::Var;

namespace {

constexpr std::string_view kCheckpointMagic = "rankmask-checkpoint 1";
constexpr std::size_t kEvalChunk = 125;

}  // namespace

void ReaderConfig::validate() const {
  if (width < 2 || width % 2 != 0) throw ConfigError("width", "must be an even number >= 2");
  if (depth != 1 && depth != 2) throw ConfigError("depth", "must be 1 or 2");
  if (!std::isfinite(attention_temperature) || attention_temperature <= 0.0) {
    throw ConfigError("attention_temperature", "must be positive");
  }
  if (!std::isfinite(embed_scale) || embed_scale <= 0.0) throw ConfigError("embed_scale", "must be positive");
}

ReaderParams ReaderParams::init(const ReaderConfig& config, std::size_t vocab, std::size_t classes,
                                std::uint64_t seed) {
  config.validate();
  if (vocab == 0) throw ConfigError("vocab", "must be positive");
  if (classes < 2) throw ConfigError("classes", "must be at least 2");
  ReaderParams p;
  p.config_ = config;
  p.vocab_ = vocab;
  p.classes_ = classes;
  const std::size_t d = config.width;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  Rng rng(seed, 11);
  auto add = [&](std::string name, Shape shape, double scale = 1.0) {
    Tensor t(std::move(shape), 0.0);
    for (double& v : t.data()) v = (2.0 * rng.uniform() - 1.0) * bound * scale;
    p.names_.push_back(std::move(name));
    p.tensors_.push_back(std::move(t));
  };
  add("embed", {vocab, d}, config.embed_scale);
  add("enc_token", {d, d});
  add("enc_prev", {d, d});
  add("enc_question", {d, d});
  add("enc_bias", {d});
  if (config.depth == 2) {
    add("enc2_weight", {d, d});
    add("enc2_bias", {d});
  }
  add("att_weight", {d, d});
  add("att_bias", {d});
  add("att_vector", {d, 1});
  if (config.rank_aware) add("att_rank", {d, d});
  add("cls_weight", {d, classes});
  add("cls_bias", {classes});
  return p;
}

bool ReaderParams::has(std::string_view name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

Tensor& ReaderParams::get(std::string_view name) {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw IndexError("no reader tensor named '" + std::string(name) + "'");
  return tensors_[static_cast<std::size_t>(it - names_.begin())];
}

const Tensor& ReaderParams::get(std::string_view name) const {
  return const_cast<ReaderParams*>(this)->get(name);
}

std::size_t ReaderParams::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors_) n += t.size();
  return n;
}

Var ReaderVars::operator[](std::string_view name) const {
  const auto& names = params->names();
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw IndexError("no reader tensor named '" + std::string(name) + "'");
  return all[static_cast<std::size_t>(it - names.begin())];
}

ReaderVars bind(Graph& graph, const ReaderParams& params, bool trainable) {
  ReaderVars vars;
  vars.params = &params;
  for (const Tensor& t : params.tensors()) vars.all.push_back(trainable ? graph.leaf(t) : graph.constant(t));
  return vars;
}

Tensor slot_codes(std::size_t slots, std::size_t width) {
  Tensor pe(Shape{slots, width}, 0.0);
  for (std::size_t r = 0; r < slots; ++r) {
    for (std::size_t k = 0; k < width / 2; ++k) {
      const double f = std::pow(10.0, -2.0 * static_cast<double>(k) / static_cast<double>(width));
      pe.at(r, 2 * k) = std::sin(static_cast<double>(r) * f);
      pe.at(r, 2 * k + 1) = std::cos(static_cast<double>(r) * f);
    }
  }
  return pe;
}

HiddenStates encode(std::span<const Example> batch, const ReaderVars& vars) {
  if (batch.empty()) throw ContractError("encode: empty batch");
  const ReaderParams& params = *vars.params;
  const std::size_t d = params.config().width;
  const std::size_t passages = batch[0].passages.size();
  const std::size_t len = batch[0].question.size();
  const std::size_t slots = passages + 1;
  const std::size_t b = batch.size();
  if (passages == 0 || len == 0) throw DimensionError("encode: example has no passages or tokens");

  std::vector<std::size_t> tokens;
  std::vector<std::size_t> prev;
  std::vector<std::size_t> owner;
  tokens.reserve(b * slots * len);
  auto push_slot = [&](const std::vector<Token>& slot, std::size_t ex) {
    if (slot.size() != len) throw DimensionError("encode: slot length differs within batch");
    for (std::size_t i = 0; i < len; ++i) {
      if (slot[i] >= params.vocab()) {
        throw IndexError("encode: token " + std::to_string(slot[i]) + " outside vocabulary of " +
                         std::to_string(params.vocab()));
      }
      tokens.push_back(slot[i]);
      prev.push_back(i == 0 ? kPad : slot[i - 1]);
      owner.push_back(ex);
    }
  };
  Tensor question_mean(Shape{b, b * len}, 0.0);
  std::vector<std::size_t> question_tokens;
  for (std::size_t e = 0; e < b; ++e) {
    const Example& ex = batch[e];
    if (ex.passages.size() != passages) throw DimensionError("encode: passage count differs within batch");
    push_slot(ex.question, e);
    for (const auto& p : ex.passages) push_slot(p, e);
    std::size_t real = 0;
    for (Token t : ex.question) real += t != kPad;
    for (std::size_t i = 0; i < len; ++i) {
      question_tokens.push_back(ex.question[i]);
      if (ex.question[i] != kPad) question_mean.at(e, e * len + i) = 1.0 / static_cast<double>(real);
    }
  }

  Graph& g = vars.all.front().graph();
  const Var embed = vars["embed"];
  const Var token_table = ad::matmul(embed, vars["enc_token"]);
  const Var prev_table = ad::matmul(embed, vars["enc_prev"]);
  const Var question_ctx =
      ad::matmul(ad::matmul(g.constant(std::move(question_mean)), ad::gather_rows(embed, question_tokens)),
                 vars["enc_question"]);
  const Var prev_part = ad::gather_rows(prev_table, prev);
  const Var question_part = ad::gather_rows(question_ctx, owner);
  Var pre = ad::add(ad::gather_rows(token_table, tokens), prev_part);
  pre = ad::add(pre, question_part);
  // Lets a position respond to "the previous token matches the question".
  pre = ad::add(pre, ad::mul(prev_part, question_part));
  pre = ad::add(pre, vars["enc_bias"]);
  Var h = ad::tanh(pre);
  if (params.config().depth == 2) {
    h = ad::add(h, ad::tanh(ad::add(ad::matmul(h, vars["enc2_weight"]), vars["enc2_bias"])));
  }
  return HiddenStates{ad::reshape(h, Shape{b, slots, len, d})};
}

Var predict(const HiddenStates& h, const ReaderVars& vars) {
  const ReaderParams& params = *vars.params;
  const std::size_t b = h.batch(), slots = h.slots(), len = h.length(), d = h.width();
  if (d != params.config().width) throw DimensionError("predict: hidden width does not match parameters");
  const std::size_t rows = b * slots * len;
  Graph& g = h.values.graph();
  const Var flat = ad::reshape(h.values, Shape{rows, d});
  Var z = ad::add(ad::matmul(flat, vars["att_weight"]), vars["att_bias"]);
  if (params.config().rank_aware) {
    const Var rank_term = ad::matmul(g.constant(slot_codes(slots, d)), vars["att_rank"]);
    std::vector<std::size_t> slot_of(rows);
    for (std::size_t i = 0; i < rows; ++i) slot_of[i] = (i / len) % slots;
    z = ad::add(z, ad::gather_rows(rank_term, slot_of));
  }
  const Var scores = ad::scale(ad::matmul(ad::tanh(z), vars["att_vector"]), params.config().attention_temperature);
  const Var weights = ad::softmax_rows(ad::reshape(scores, Shape{b, slots * len}));
  const Var pooled = ad::bmm(ad::reshape(weights, Shape{b, 1, slots * len}),
                             ad::reshape(h.values, Shape{b, slots * len, d}));
  const Var logits = ad::add(ad::matmul(ad::reshape(pooled, Shape{b, d}), vars["cls_weight"]), vars["cls_bias"]);
  return ad::log_softmax_rows(logits);
}

Var loss(std::span<const Example> batch, const HiddenStates& h, const ReaderVars& vars) {
  std::vector<std::size_t> labels;
  labels.reserve(batch.size());
  for (const Example& ex : batch) labels.push_back(ex.label);
  return ad::nll_loss(predict(h, vars), labels);
}

Score score(std::span<const Example> split, const ReaderParams& params, const HiddenTransform& transform) {
  if (split.empty()) throw ContractError("evaluate: empty split");
  std::size_t correct = 0;
  double total_loss = 0.0;
  for (std::size_t start = 0; start < split.size(); start += kEvalChunk) {
    const auto chunk = split.subspan(start, std::min(kEvalChunk, split.size() - start));
    Graph g;
    const ReaderVars vars = bind(g, params, false);
    HiddenStates h = encode(chunk, vars);
    if (transform) h = transform(h);
    const Var lp = predict(h, vars);
    const Tensor& v = lp.value();
    const std::size_t classes = v.dim(1);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const auto row = v.data().subspan(i * classes, classes);
      const std::size_t guess = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += guess == chunk[i].label;
      total_loss -= row[chunk[i].label];
    }
  }
  const double n = static_cast<double>(split.size());
  return Score{static_cast<double>(correct) / n, total_loss / n};
}

double evaluate(std::span<const Example> split, const ReaderParams& params, const HiddenTransform& transform) {
  return score(split, params, transform).accuracy;
}

struct CheckpointIo {
  static void write_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
    out << "tensor " << name << ' ';
    for (std::size_t i = 0; i < t.rank(); ++i) out << (i ? "," : "") << t.shape()[i];
    if (t.rank() == 0) out << "scalar";
    for (double v : t.data()) out << ' ' << text::format_double(v);
    out << '\n';
  }

  static std::pair<std::string, Tensor> read_tensor(std::string_view line) {
    const auto fields = text::split(line, ' ');
    if (fields.size() < 3 || fields[0] != "tensor") throw IoError("malformed tensor record");
    Shape shape;
    if (fields[2] != "scalar") {
      for (std::string_view dim : text::split(fields[2], ',')) shape.push_back(text::parse_u64(dim, "shape"));
    }
    std::vector<double> data;
    for (std::size_t i = 3; i < fields.size(); ++i) data.push_back(text::parse_double(fields[i], "value"));
    if (data.size() != ad::shape_size(shape)) throw IoError("tensor record length does not match its shape");
    return {std::string(fields[1]), Tensor(std::move(shape), std::move(data))};
  }

  static void save(const Checkpoint& ckpt, std::ostream& out) {
    const ReaderParams& p = ckpt.params;
    const ReaderConfig& c = p.config_;
    out << kCheckpointMagic << '\n';
    out << "reader width=" << c.width << " depth=" << c.depth << " rank_aware=" << (c.rank_aware ? "true" : "false")
        << " attention_temperature=" << text::format_double(c.attention_temperature)
        << " embed_scale=" << text::format_double(c.embed_scale) << " vocab=" << p.vocab_
        << " classes=" << p.classes_ << '\n';
    for (std::size_t i = 0; i < p.names_.size(); ++i) write_tensor(out, p.names_[i], p.tensors_[i]);
    if (ckpt.mask_logits) write_tensor(out, "mask_logits", *ckpt.mask_logits);
    if (!ckpt.candidates.empty()) {
      out << "candidates";
      for (const auto& cand : ckpt.candidates) {
        out << ' ';
        if (cand.empty()) out << '-';
        for (std::size_t i = 0; i < cand.size(); ++i) out << (i ? "," : "") << cand[i];
      }
      out << '\n';
    }
    if (!out) throw IoError("failed writing checkpoint");
  }

  static Checkpoint load(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kCheckpointMagic) throw IoError("not a checkpoint file (bad header)");
    if (!std::getline(in, line) || !line.starts_with("reader ")) throw IoError("checkpoint lacks a reader line");
    Checkpoint ckpt;
    ReaderParams& p = ckpt.params;
    for (std::string_view entry : text::split(std::string_view(line).substr(7), ' ')) {
      const auto eq = entry.find('=');
      if (eq == std::string_view::npos) throw IoError("malformed reader entry");
      const auto key = entry.substr(0, eq);
      const auto value = entry.substr(eq + 1);
      if (key == "width") p.config_.width = text::parse_u64(value, key);
      else if (key == "depth") p.config_.depth = text::parse_u64(value, key);
      else if (key == "rank_aware") p.config_.rank_aware = text::parse_bool(value, key);
      else if (key == "attention_temperature") p.config_.attention_temperature = text::parse_double(value, key);
      else if (key == "embed_scale") p.config_.embed_scale = text::parse_double(value, key);
      else if (key == "vocab") p.vocab_ = text::parse_u64(value, key);
      else if (key == "classes") p.classes_ = text::parse_u64(value, key);
      else throw IoError("unknown reader entry '" + std::string(key) + "'");
    }
    p.config_.validate();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (line.starts_with("tensor ")) {
        auto [name, t] = read_tensor(line);
        if (name == "mask_logits") {
          ckpt.mask_logits = std::move(t);
        } else {
          p.names_.push_back(std::move(name));
          p.tensors_.push_back(std::move(t));
        }
      } else if (line.starts_with("candidates")) {
        for (std::string_view cand : text::split(std::string_view(line).substr(10), ' ')) {
          if (cand.empty()) continue;
          std::vector<std::size_t> positions;
          if (cand != "-") {
            for (std::string_view pos : text::split(cand, ',')) positions.push_back(text::parse_u64(pos, "candidate"));
          }
          ckpt.candidates.push_back(std::move(positions));
        }
      } else {
        throw IoError("unknown checkpoint record");
      }
    }
    const ReaderParams fresh = ReaderParams::init(p.config_, p.vocab_, p.classes_, 0);
    if (fresh.names_ != p.names_) throw IoError("checkpoint tensors do not match the reader layout");
    for (std::size_t i = 0; i < p.tensors_.size(); ++i) {
      if (p.tensors_[i].shape() != fresh.tensors_[i].shape()) {
        throw IoError("checkpoint tensor '" + p.names_[i] + "' has the wrong shape");
      }
    }
    return ckpt;
  }
};

void save_checkpoint(const Checkpoint& ckpt, std::ostream& out) { CheckpointIo::save(ckpt, out); }
Checkpoint load_checkpoint(std::istream& in) { return CheckpointIo::load(in); }

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  save_checkpoint(ckpt, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return load_checkpoint(in);
}

}  // namespace rankmask
