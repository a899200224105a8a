#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "diner/corpus.hpp"
#include "diner/numeric.hpp"
#include "json.hpp"

// Confounder dictionary, backdoor-adjusted review logits, branch fusion and
// counterfactual inference over the aspect / review / fused branches.
namespace diner::causal {

using numeric::Tape;
using numeric::Tensor;
using numeric::Var;

// ---- confounder dictionary ----------------------------------------------------

// One context prototype per aspect term: the mean lower-layer review feature of
// every training review mentioning that aspect. Immutable once built.
class ConfounderDictionary {
 public:
  ConfounderDictionary() = default;
  ConfounderDictionary(std::vector<std::string> aspects, Tensor prototypes,
                       std::vector<std::size_t> member_counts, std::size_t snapshot_epoch);

  const std::vector<std::string>& aspects() const { return aspects_; }
  const Tensor& prototypes() const { return prototypes_; }  // [N, d]
  const std::vector<std::size_t>& member_counts() const { return member_counts_; }
  std::size_t snapshot_epoch() const { return snapshot_epoch_; }
  std::size_t size() const { return aspects_.size(); }
  std::size_t dim() const { return prototypes_.cols(); }

  nlohmann::json metadata() const;

 private:
  std::vector<std::string> aspects_;
  Tensor prototypes_;
  std::vector<std::size_t> member_counts_;
  std::size_t snapshot_epoch_ = 0;
};

using FeatureFn = std::function<Tensor(const corpus::Instance&)>;

// Each distinct review contributes once to every aspect it mentions. When
// `aspect_vocabulary` is non-empty it fixes the candidate set and order;
// candidates without members are dropped. Throws on an empty training split.
ConfounderDictionary build_confounder_dictionary(const corpus::Corpus& train,
                                                 const FeatureFn& lower_feature,
                                                 std::size_t snapshot_epoch,
                                                 const std::vector<std::string>& aspect_vocabulary = {});

// C = sum_n softmax_n(r . u_n / sqrt(d)) u_n
Var context_feature(Var r, const ConfounderDictionary& dict);
// Softmax weights P(u_n | r) alone.
Var context_weights(Var r, const ConfounderDictionary& dict);
// r_c = W_c concat(r, C), W_c of shape [d, 2d].
Var context_projection(Var r, Var context, Var w_c);

// ---- review branch ----------------------------------------------------------------

struct ReviewHeadHyper {
  std::size_t groups = 4;
  double tau = 16.0;
  double eps = 1e-5;

  void validate(std::size_t d) const;
};

// Per class l: (tau/K) sum_k w_l^k . r^k / ((|w_l^k| + eps) |r^k|).
Var normalized_group_logits(Var r, Var weight, const ReviewHeadHyper& hyper);
// Per class l: (tau/K) sum_k w_l^k / (|w_l^k| + eps) . (r^k/|r^k| - r_c^k/|r_c^k|).
Var debiased_review_logits(Var r, Var r_c, Var weight, const ReviewHeadHyper& hyper);

// Value-level view of the review head for direct evaluation.
struct ReviewBranchParams {
  Tensor weight;              // [classes, d]
  Tensor context_projection;  // [d, 2d]
  ReviewHeadHyper hyper;

  void validate() const;
};

Tensor normalized_group_logits(const Tensor& r, const ReviewBranchParams& params);
Tensor debiased_review_logits(const Tensor& r, const Tensor& r_c, const ReviewBranchParams& params);
Tensor context_feature(const Tensor& r, const ConfounderDictionary& dict);
Tensor context_projection(const Tensor& r, const Tensor& context, const Tensor& w_c);

// ---- fusion and counterfactual inference -------------------------------------------

enum class FusionStrategy { SumVanilla, SumSigmoid, SumTanh, MulVanilla, MulSigmoid, MulTanh };
inline constexpr FusionStrategy kAllStrategies[] = {
    FusionStrategy::SumVanilla, FusionStrategy::SumSigmoid, FusionStrategy::SumTanh,
    FusionStrategy::MulVanilla, FusionStrategy::MulSigmoid, FusionStrategy::MulTanh};

std::string_view to_string(FusionStrategy strategy);
FusionStrategy parse_fusion(std::string_view text);
bool is_sum_family(FusionStrategy strategy);

// Elementwise fusion of aspect, debiased review and fused logits.
Var fuse(Var zeta_a, Var zeta_r, Var zeta_k, FusionStrategy strategy);
Tensor fuse(const Tensor& zeta_a, const Tensor& zeta_r, const Tensor& zeta_k,
            FusionStrategy strategy);

struct BranchOutputs {
  Tensor zeta_a;
  Tensor zeta_r;  // debiased review logits
  Tensor zeta_k;
  Tensor void_a;  // reference values used when a variable is set void
  Tensor void_r;
  Tensor void_k;

  // Zero voids of matching width.
  static BranchOutputs with_zero_voids(Tensor zeta_a, Tensor zeta_r, Tensor zeta_k);
};

// fuse(a, r*, k*) - fuse(a*, r*, k*)
Tensor nde_aspect(const BranchOutputs& outputs, FusionStrategy strategy);

struct CausalEffects {
  Tensor te;
  Tensor nde_a;
  Tensor nde_r;
  Tensor tie;  // te - nde_r - nde_a, interaction effect taken as 0
};

CausalEffects causal_effects(const BranchOutputs& outputs, FusionStrategy strategy);

enum class InferenceMode { Tie, Te, Literal4Term };
std::string_view to_string(InferenceMode mode);
InferenceMode parse_mode(std::string_view text);

struct Inference {
  Tensor scores;
  std::size_t predicted = 0;
};

// Lowest index wins ties.
std::size_t argmax(std::span<const double> scores);

// Tie: fuse(a, r', k) - nde_aspect. Te: fuse(a, r', k). Literal4Term:
// L(a,r',k) - L(a*,r',k*) - L(a,r*,k*) + L(a*,r*,k*).
Inference tie_inference(const BranchOutputs& outputs, FusionStrategy strategy, InferenceMode mode);

}  // namespace diner::causal
