#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "diner/corpus.hpp"
#include "diner/numeric.hpp"
#include "json.hpp"

namespace diner::encoder {

using numeric::ParameterStore;
using numeric::Tape;
using numeric::Var;

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;

  Vocab();
  // Review and aspect tokens of the training split, sorted, after the reserved ids.
  static Vocab build(const corpus::Corpus& train);
  static Vocab from_tokens(const std::vector<std::string>& tokens);

  int id(std::string_view token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// OOV tokens map to Vocab::kUnk.
std::vector<int> tokenize(const corpus::Tokens& text, const Vocab& vocab);

enum class Pooling { Cls, Mean };
enum class Branch { Fused, AspectOnly, ReviewOnly };

std::string_view to_string(Pooling pooling);
Pooling parse_pooling(std::string_view text);
std::string_view to_string(Branch branch);

struct EncoderConfig {
  std::size_t d = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ffn_width = 0;  // 0 means 2 * d
  Pooling pooling = Pooling::Cls;
  std::size_t lower_tap_layer = 1;
  std::size_t max_len = 64;

  std::size_t ffn() const { return ffn_width == 0 ? 2 * d : ffn_width; }
  void validate() const;
};

struct EncoderInput {
  std::vector<int> ids;
  bool truncated = false;
};

// Fused: CLS review SEP aspect SEP. AspectOnly: CLS aspect SEP. ReviewOnly: CLS review SEP.
// Over-long inputs lose review tokens from the end; the aspect is never cut.
EncoderInput build_input(const corpus::Instance& instance, Branch branch, const Vocab& vocab,
                         std::size_t max_len);

struct ForwardOptions {
  bool train = false;
  double dropout = 0.0;
  Rng* rng = nullptr;  // required when train && dropout > 0
};

struct BranchEncoding {
  Var pooled;
  Var lower_feature;  // pooled residual stream after layer lower_tap_layer
};

// Pre-LN transformer encoder over a shared token table. Parameters live in the
// store under `prefix` ("<prefix>.pos", "<prefix>.layer1.attn.q.w", ...).
class TransformerEncoder {
 public:
  TransformerEncoder(std::string prefix, const EncoderConfig& config, ParameterStore& store,
                     Rng& init_rng);
  // Rebinds to parameters already present in `store` (checkpoint restore).
  TransformerEncoder(std::string prefix, const EncoderConfig& config, ParameterStore& store);

  // PAD ids are excluded from attention keys and from mean pooling.
  BranchEncoding forward(Tape& tape, Var token_table, std::span<const int> ids,
                         const ForwardOptions& options) const;

  const std::string& prefix() const { return prefix_; }

 private:
  void bind(ParameterStore& store);

  struct Layer {
    numeric::Parameter *ln1_g, *ln1_b, *q_w, *q_b, *k_w, *k_b, *v_w, *v_b, *o_w, *o_b;
    numeric::Parameter *ln2_g, *ln2_b, *ff1_w, *ff1_b, *ff2_w, *ff2_b;
  };

  std::string prefix_;
  EncoderConfig config_;
  numeric::Parameter* pos_ = nullptr;
  numeric::Parameter* final_g_ = nullptr;
  numeric::Parameter* final_b_ = nullptr;
  std::vector<Layer> layers_;
};

// Uniform(-0.05, 0.05) initialiser shared by every weight matrix and embedding.
numeric::Tensor uniform_init(numeric::Shape shape, Rng& rng);

}  // namespace diner::encoder
