#pragma once

#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include "diner/causal.hpp"
#include "diner/corpus.hpp"
#include "diner/encoder.hpp"
#include "diner/numeric.hpp"

namespace diner::model {

using numeric::ParameterStore;
using numeric::Tape;
using numeric::Tensor;
using numeric::Var;

// Diner: three branches fused and debiased. Vanilla: the fused branch alone.
// AspectProbe / ReviewProbe: one single-input branch with a linear head.
enum class Variant { Diner, Vanilla, AspectProbe, ReviewProbe };
enum class VoidPolicy { Zero, Learned };

std::string_view to_string(Variant variant);
Variant parse_variant(std::string_view text);
std::string_view to_string(VoidPolicy policy);
VoidPolicy parse_void_policy(std::string_view text);

struct ModelConfig {
  Variant variant = Variant::Diner;
  encoder::EncoderConfig encoder;
  causal::ReviewHeadHyper review_head;
  causal::FusionStrategy fusion = causal::FusionStrategy::SumTanh;
  VoidPolicy voids = VoidPolicy::Zero;
  // Subtract the projected context once a confounder dictionary exists.
  bool use_tde = true;

  void validate() const;
};

// Branch logits recorded on a tape. Members that the variant lacks stay unset.
struct TapeOutputs {
  std::optional<Var> zeta_a;
  std::optional<Var> zeta_r;  // debiased when TDE is active, plain normalized otherwise
  std::optional<Var> zeta_k;
  std::optional<Var> void_a;
  std::optional<Var> void_r;
  std::optional<Var> void_k;
  std::optional<Var> lower_feature;  // review branch only
};

class DinerModel {
 public:
  // Fresh parameters drawn from `init_rng`.
  DinerModel(ModelConfig config, encoder::Vocab vocab, Rng& init_rng);
  // Adopts parameters restored from a checkpoint; names and shapes must match.
  DinerModel(ModelConfig config, encoder::Vocab vocab, ParameterStore params);

  DinerModel(const DinerModel&) = delete;
  DinerModel& operator=(const DinerModel&) = delete;
  DinerModel(DinerModel&&) = default;
  DinerModel& operator=(DinerModel&&) = default;

  TapeOutputs forward(Tape& tape, const corpus::Instance& instance,
                      const encoder::ForwardOptions& options) const;

  // Logits of the single scoring head for Vanilla and probe variants.
  Var single_logits(const TapeOutputs& outputs) const;

  // Inference-mode branch outputs (no dropout). For single-branch variants the
  // scoring head sits in zeta_k and the other branches are zero.
  causal::BranchOutputs outputs(const corpus::Instance& instance) const;
  // Layer-tap pooled feature of the review branch, inference mode.
  Tensor lower_feature(const corpus::Instance& instance) const;

  void set_dictionary(causal::ConfounderDictionary dictionary);
  void clear_dictionary() { dictionary_.reset(); }
  const std::optional<causal::ConfounderDictionary>& dictionary() const { return dictionary_; }
  bool tde_active() const { return config_.use_tde && dictionary_.has_value(); }

  bool has_branch(encoder::Branch branch) const;
  bool is_single_branch() const { return config_.variant != Variant::Diner; }
  // Fusion used at inference; single-branch variants score with their head alone.
  causal::FusionStrategy scoring_fusion() const {
    return is_single_branch() ? causal::FusionStrategy::SumVanilla : config_.fusion;
  }

  const ModelConfig& config() const { return config_; }
  const encoder::Vocab& vocab() const { return vocab_; }
  ParameterStore& params() { return *params_; }
  const ParameterStore& params() const { return *params_; }

 private:
  void register_parameters(Rng& init_rng);
  void bind();
  Var linear_head(Tape& tape, Var x, std::string_view prefix) const;

  ModelConfig config_;
  encoder::Vocab vocab_;
  std::unique_ptr<ParameterStore> params_;
  std::optional<encoder::TransformerEncoder> fused_;
  std::optional<encoder::TransformerEncoder> aspect_;
  std::optional<encoder::TransformerEncoder> review_;
  std::optional<causal::ConfounderDictionary> dictionary_;
};

}  // namespace diner::model
