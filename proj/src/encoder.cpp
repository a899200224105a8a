#include "diner/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>

#include "diner/error.hpp"

namespace diner::encoder {

using numeric::Parameter;
using numeric::Tensor;

// ---- Vocab ---------------------------------------------------------------------

Vocab::Vocab() : tokens_{"[PAD]", "[UNK]", "[CLS]", "[SEP]"} {
  for (std::size_t i = 0; i < tokens_.size(); ++i) ids_[tokens_[i]] = static_cast<int>(i);
}

Vocab Vocab::build(const corpus::Corpus& train) {
  std::set<std::string> seen;
  for (const auto& inst : train) {
    seen.insert(inst.review.begin(), inst.review.end());
    seen.insert(inst.aspect_term.begin(), inst.aspect_term.end());
  }
  return from_tokens({seen.begin(), seen.end()});
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  Vocab v;
  for (const auto& t : tokens) {
    if (v.ids_.contains(t)) continue;
    v.ids_[t] = static_cast<int>(v.tokens_.size());
    v.tokens_.push_back(t);
  }
  return v;
}

int Vocab::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

std::vector<int> tokenize(const corpus::Tokens& text, const Vocab& vocab) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (const auto& t : text) ids.push_back(vocab.id(t));
  return ids;
}

// ---- config ----------------------------------------------------------------------

std::string_view to_string(Pooling pooling) { return pooling == Pooling::Cls ? "cls" : "mean"; }

Pooling parse_pooling(std::string_view text) {
  if (text == "cls" || text == "CLS") return Pooling::Cls;
  if (text == "mean" || text == "Mean") return Pooling::Mean;
  throw ConfigError("encoder.pooling must be cls or mean, got '" + std::string(text) + "'");
}

std::string_view to_string(Branch branch) {
  switch (branch) {
    case Branch::Fused: return "fused";
    case Branch::AspectOnly: return "aspect";
    case Branch::ReviewOnly: return "review";
  }
  return "fused";
}

void EncoderConfig::validate() const {
  if (d == 0 || n_heads == 0 || d % n_heads != 0) {
    throw ConfigError("encoder.d (" + std::to_string(d) + ") must be divisible by encoder.n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (n_layers == 0) throw ConfigError("encoder.n_layers must be positive");
  if (lower_tap_layer < 1 || lower_tap_layer > n_layers) {
    throw ConfigError("encoder.lower_tap_layer must lie in [1, encoder.n_layers]");
  }
  if (max_len < 4) throw ConfigError("encoder.max_len must be at least 4");
}

EncoderInput build_input(const corpus::Instance& instance, Branch branch, const Vocab& vocab,
                         std::size_t max_len) {
  EncoderInput in;
  const auto review = tokenize(instance.review, vocab);
  const auto aspect = tokenize(instance.aspect_term, vocab);
  auto clipped = [&](std::size_t reserved) {
    const std::size_t room = max_len > reserved ? max_len - reserved : 0;
    if (review.size() > room) in.truncated = true;
    return std::vector<int>(review.begin(),
                            review.begin() + static_cast<long>(std::min(room, review.size())));
  };
  in.ids.push_back(Vocab::kCls);
  switch (branch) {
    case Branch::Fused: {
      const auto r = clipped(3 + aspect.size());
      in.ids.insert(in.ids.end(), r.begin(), r.end());
      in.ids.push_back(Vocab::kSep);
      in.ids.insert(in.ids.end(), aspect.begin(), aspect.end());
      break;
    }
    case Branch::AspectOnly:
      in.ids.insert(in.ids.end(), aspect.begin(), aspect.end());
      break;
    case Branch::ReviewOnly: {
      const auto r = clipped(2);
      in.ids.insert(in.ids.end(), r.begin(), r.end());
      break;
    }
  }
  in.ids.push_back(Vocab::kSep);
  return in;
}

// ---- TransformerEncoder --------------------------------------------------------------

Tensor uniform_init(numeric::Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = uniform(rng, -0.05, 0.05);
  return t;
}

TransformerEncoder::TransformerEncoder(std::string prefix, const EncoderConfig& config,
                                       ParameterStore& store, Rng& init_rng)
    : prefix_(std::move(prefix)), config_(config) {
  config_.validate();
  const std::size_t d = config_.d, f = config_.ffn();
  auto weight = [&](const std::string& name, numeric::Shape shape) {
    store.add(prefix_ + "." + name, uniform_init(std::move(shape), init_rng));
  };
  auto bias = [&](const std::string& name, std::size_t n) {
    store.add(prefix_ + "." + name, Tensor({n}), /*decay=*/false);
  };
  auto gain = [&](const std::string& name, std::size_t n) {
    store.add(prefix_ + "." + name, Tensor({n}, 1.0), /*decay=*/false);
  };
  weight("pos", {config_.max_len, d});
  for (std::size_t l = 1; l <= config_.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    gain(p + "ln1.g", d);
    bias(p + "ln1.b", d);
    for (const char* m : {"q", "k", "v", "o"}) {
      weight(p + "attn." + m + ".w", {d, d});
      bias(p + "attn." + m + ".b", d);
    }
    gain(p + "ln2.g", d);
    bias(p + "ln2.b", d);
    weight(p + "ff1.w", {f, d});
    bias(p + "ff1.b", f);
    weight(p + "ff2.w", {d, f});
    bias(p + "ff2.b", d);
  }
  gain("final.g", d);
  bias("final.b", d);
  bind(store);
}

TransformerEncoder::TransformerEncoder(std::string prefix, const EncoderConfig& config,
                                       ParameterStore& store)
    : prefix_(std::move(prefix)), config_(config) {
  config_.validate();
  bind(store);
}

void TransformerEncoder::bind(ParameterStore& store) {
  auto get = [&](const std::string& name) { return &store.get(prefix_ + "." + name); };
  pos_ = get("pos");
  layers_.clear();
  for (std::size_t l = 1; l <= config_.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    layers_.push_back(Layer{get(p + "ln1.g"), get(p + "ln1.b"), get(p + "attn.q.w"),
                            get(p + "attn.q.b"), get(p + "attn.k.w"), get(p + "attn.k.b"),
                            get(p + "attn.v.w"), get(p + "attn.v.b"), get(p + "attn.o.w"),
                            get(p + "attn.o.b"), get(p + "ln2.g"), get(p + "ln2.b"),
                            get(p + "ff1.w"), get(p + "ff1.b"), get(p + "ff2.w"),
                            get(p + "ff2.b")});
  }
  final_g_ = get("final.g");
  final_b_ = get("final.b");
}

namespace {

Var linear(Tape& tape, Var x, Parameter* w, Parameter* b) {
  return numeric::add_row(numeric::matmul_nt(x, tape.parameter(*w)), tape.parameter(*b));
}

}  // namespace

BranchEncoding TransformerEncoder::forward(Tape& tape, Var token_table, std::span<const int> ids,
                                           const ForwardOptions& options) const {
  using namespace numeric;
  const std::size_t n = ids.size();
  if (n == 0) throw ShapeError(prefix_ + ": empty input sequence");
  if (n > config_.max_len) {
    throw ShapeError(prefix_ + ": sequence length " + std::to_string(n) + " exceeds max_len " +
                     std::to_string(config_.max_len));
  }
  const std::size_t d = config_.d;
  const std::size_t heads = config_.n_heads;
  const std::size_t dh = d / heads;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // std::vector<bool> has no contiguous storage, so the mask lives in a plain array.
  std::unique_ptr<bool[]> mask(new bool[n]);
  bool any_pad = false;
  for (std::size_t i = 0; i < n; ++i) {
    mask[i] = ids[i] != Vocab::kPad;
    any_pad = any_pad || !mask[i];
  }

  const double p = options.train ? options.dropout : 0.0;
  if (p > 0.0 && options.rng == nullptr) throw Error(prefix_ + ": dropout requires an rng");
  auto drop = [&](Var v) { return p > 0.0 ? dropout(v, p, *options.rng) : v; };

  const std::span<const bool> key_mask =
      any_pad ? std::span<const bool>(mask.get(), n) : std::span<const bool>();

  auto pool = [&](Var h) {
    if (config_.pooling == Pooling::Cls) return row(h, 0);
    return mean_rows_masked(h, std::span<const bool>(mask.get(), n));
  };

  Var h = add(embedding(token_table, ids), slice_rows(tape.parameter(*pos_), 0, n));
  h = drop(h);
  BranchEncoding out{};
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& L = layers_[l];
    {
      const Var x = layer_norm(h, tape.parameter(*L.ln1_g), tape.parameter(*L.ln1_b));
      const Var q = linear(tape, x, L.q_w, L.q_b);
      const Var k = linear(tape, x, L.k_w, L.k_b);
      const Var v = linear(tape, x, L.v_w, L.v_b);
      std::vector<Var> head_out;
      head_out.reserve(heads);
      for (std::size_t hd = 0; hd < heads; ++hd) {
        const std::size_t b = hd * dh, e = b + dh;
        const Var scores = scale(matmul_nt(slice_cols(q, b, e), slice_cols(k, b, e)), attn_scale);
        const Var probs = softmax_rows(scores, key_mask);
        head_out.push_back(matmul(probs, slice_cols(v, b, e)));
      }
      const Var attn = linear(tape, concat_cols(head_out), L.o_w, L.o_b);
      h = add(h, drop(attn));
    }
    {
      const Var x = layer_norm(h, tape.parameter(*L.ln2_g), tape.parameter(*L.ln2_b));
      const Var ff = linear(tape, gelu(linear(tape, x, L.ff1_w, L.ff1_b)), L.ff2_w, L.ff2_b);
      h = add(h, drop(ff));
    }
    if (l + 1 == config_.lower_tap_layer) out.lower_feature = pool(h);
  }
  h = layer_norm(h, tape.parameter(*final_g_), tape.parameter(*final_b_));
  out.pooled = pool(h);
  return out;
}

}  // namespace diner::encoder
