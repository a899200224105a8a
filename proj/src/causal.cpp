#include "diner/causal.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "diner/error.hpp"

namespace diner::causal {

using namespace numeric;

// ---- confounder dictionary ------------------------------------------------------

ConfounderDictionary::ConfounderDictionary(std::vector<std::string> aspects, Tensor prototypes,
                                           std::vector<std::size_t> member_counts,
                                           std::size_t snapshot_epoch)
    : aspects_(std::move(aspects)),
      prototypes_(std::move(prototypes)),
      member_counts_(std::move(member_counts)),
      snapshot_epoch_(snapshot_epoch) {
  if (aspects_.empty()) throw Error("confounder dictionary needs at least one aspect");
  if (prototypes_.rank() != 2 || prototypes_.rows() != aspects_.size() ||
      member_counts_.size() != aspects_.size()) {
    throw ShapeError("confounder dictionary: prototype shape " +
                     shape_string(prototypes_.shape()) + " does not match " +
                     std::to_string(aspects_.size()) + " aspects");
  }
}

nlohmann::json ConfounderDictionary::metadata() const {
  return {{"aspects", aspects_},
          {"member_counts", member_counts_},
          {"snapshot_epoch", snapshot_epoch_},
          {"dim", dim()}};
}

ConfounderDictionary build_confounder_dictionary(const corpus::Corpus& train,
                                                 const FeatureFn& lower_feature,
                                                 std::size_t snapshot_epoch,
                                                 const std::vector<std::string>& aspect_vocabulary) {
  if (train.empty()) throw Error("confounder dictionary: empty training split");
  std::map<std::string, std::vector<double>> sums;
  std::map<std::string, std::size_t> counts;
  std::vector<std::string> order;
  std::set<std::string> seen_reviews;
  std::size_t d = 0;
  for (const auto& inst : train) {
    if (!seen_reviews.insert(corpus::join(inst.review)).second) continue;
    std::set<std::string> mentioned;
    for (const auto& m : inst.all_aspects) mentioned.insert(corpus::join(m.term));
    if (mentioned.empty()) continue;
    const Tensor feature = lower_feature(inst);
    if (d == 0) d = feature.size();
    if (feature.size() != d) throw ShapeError("confounder dictionary: inconsistent feature width");
    for (const auto& term : mentioned) {
      auto [it, inserted] = sums.try_emplace(term, std::vector<double>(d, 0.0));
      if (inserted) order.push_back(term);
      for (std::size_t j = 0; j < d; ++j) it->second[j] += feature[j];
      ++counts[term];
    }
  }
  if (!aspect_vocabulary.empty()) order = aspect_vocabulary;
  std::vector<std::string> aspects;
  std::vector<double> values;
  std::vector<std::size_t> member_counts;
  for (const auto& term : order) {
    auto it = sums.find(term);
    if (it == sums.end()) continue;
    const double n = static_cast<double>(counts.at(term));
    aspects.push_back(term);
    member_counts.push_back(counts.at(term));
    for (double v : it->second) values.push_back(v / n);
  }
  if (aspects.empty()) throw Error("confounder dictionary: no aspect has any member");
  const std::size_t rows = aspects.size();
  return ConfounderDictionary(std::move(aspects), Tensor::matrix(rows, d, std::move(values)),
                              std::move(member_counts), snapshot_epoch);
}

Var context_weights(Var r, const ConfounderDictionary& dict) {
  Tape& tape = *r.tape;
  if (r.value().size() != dict.dim()) {
    throw ShapeError("context_feature: feature " + shape_string(r.shape()) +
                     " does not match prototypes " + shape_string(dict.prototypes().shape()));
  }
  const Var u = tape.constant(dict.prototypes());
  const double s = 1.0 / std::sqrt(static_cast<double>(dict.dim()));
  return softmax_rows(scale(matmul_nt(r, u), s));
}

Var context_feature(Var r, const ConfounderDictionary& dict) {
  const Var w = context_weights(r, dict);
  const Var u = r.tape->constant(dict.prototypes());
  // [N] viewed as a single row times [N, d].
  return matmul(w, u);
}

Var context_projection(Var r, Var context, Var w_c) {
  const std::size_t d = r.value().size();
  if (context.value().size() != d || w_c.value().rank() != 2 || w_c.value().rows() != d ||
      w_c.value().cols() != 2 * d) {
    throw ShapeError("context_projection: r " + shape_string(r.shape()) + ", C " +
                     shape_string(context.shape()) + ", W_c " + shape_string(w_c.shape()));
  }
  return matmul_nt(concat_cols(r, context), w_c);
}

// ---- review head ------------------------------------------------------------------

void ReviewHeadHyper::validate(std::size_t d) const {
  if (groups == 0 || d % groups != 0) {
    throw ConfigError("causal.groups (" + std::to_string(groups) + ") must divide d (" +
                      std::to_string(d) + ")");
  }
  if (!(tau > 0.0)) throw ConfigError("causal.tau must be positive");
  if (!(eps >= 0.0)) throw ConfigError("causal.eps must be non-negative");
}

namespace {

// Rows of `w` divided by max(|row| + eps, floor).
Var normalize_weight_rows(Var w, double eps) {
  return div_rows(w, clamp_min(add_scalar(l2norm_rows(w), eps), kNormFloor));
}

Var unit(Var v) { return div_rows(v, clamp_min(l2norm_rows(v), kNormFloor)); }

void check_head_shapes(Var r, Var weight, const ReviewHeadHyper& hyper) {
  const std::size_t d = r.value().size();
  if (weight.value().rank() != 2 || weight.value().cols() != d) {
    throw ShapeError("review head: feature " + shape_string(r.shape()) + " vs weight " +
                     shape_string(weight.shape()));
  }
  hyper.validate(d);
}

}  // namespace

Var normalized_group_logits(Var r, Var weight, const ReviewHeadHyper& hyper) {
  check_head_shapes(r, weight, hyper);
  const std::size_t g = r.value().size() / hyper.groups;
  std::vector<Var> terms;
  terms.reserve(hyper.groups);
  for (std::size_t k = 0; k < hyper.groups; ++k) {
    const Var wk = normalize_weight_rows(slice_cols(weight, k * g, (k + 1) * g), hyper.eps);
    const Var rk = unit(slice_cols(r, k * g, (k + 1) * g));
    terms.push_back(matmul_nt(rk, wk));
  }
  return scale(add_n(terms), hyper.tau / static_cast<double>(hyper.groups));
}

Var debiased_review_logits(Var r, Var r_c, Var weight, const ReviewHeadHyper& hyper) {
  check_head_shapes(r, weight, hyper);
  if (r_c.value().size() != r.value().size()) {
    throw ShapeError("debiased_review_logits: r " + shape_string(r.shape()) + " vs r_c " +
                     shape_string(r_c.shape()));
  }
  const std::size_t g = r.value().size() / hyper.groups;
  std::vector<Var> terms;
  terms.reserve(hyper.groups);
  for (std::size_t k = 0; k < hyper.groups; ++k) {
    const Var wk = normalize_weight_rows(slice_cols(weight, k * g, (k + 1) * g), hyper.eps);
    const Var diff = sub(unit(slice_cols(r, k * g, (k + 1) * g)),
                         unit(slice_cols(r_c, k * g, (k + 1) * g)));
    terms.push_back(matmul_nt(diff, wk));
  }
  return scale(add_n(terms), hyper.tau / static_cast<double>(hyper.groups));
}

void ReviewBranchParams::validate() const {
  hyper.validate(weight.cols());
  const std::size_t d = weight.cols();
  if (context_projection.size() != 0 &&
      (context_projection.rows() != d || context_projection.cols() != 2 * d)) {
    throw ShapeError("review head: W_c must be [d, 2d], got " +
                     shape_string(context_projection.shape()));
  }
}

Tensor normalized_group_logits(const Tensor& r, const ReviewBranchParams& params) {
  params.validate();
  Tape tape;
  return normalized_group_logits(tape.constant(r), tape.constant(params.weight), params.hyper)
      .value();
}

Tensor debiased_review_logits(const Tensor& r, const Tensor& r_c, const ReviewBranchParams& params) {
  params.validate();
  Tape tape;
  return debiased_review_logits(tape.constant(r), tape.constant(r_c), tape.constant(params.weight),
                                params.hyper)
      .value();
}

Tensor context_feature(const Tensor& r, const ConfounderDictionary& dict) {
  Tape tape;
  return context_feature(tape.constant(r), dict).value();
}

Tensor context_projection(const Tensor& r, const Tensor& context, const Tensor& w_c) {
  Tape tape;
  return context_projection(tape.constant(r), tape.constant(context), tape.constant(w_c)).value();
}

// ---- fusion -------------------------------------------------------------------------

std::string_view to_string(FusionStrategy strategy) {
  switch (strategy) {
    case FusionStrategy::SumVanilla: return "SUM-Vanilla";
    case FusionStrategy::SumSigmoid: return "SUM-sigmoid";
    case FusionStrategy::SumTanh: return "SUM-tanh";
    case FusionStrategy::MulVanilla: return "MUL-Vanilla";
    case FusionStrategy::MulSigmoid: return "MUL-sigmoid";
    case FusionStrategy::MulTanh: return "MUL-tanh";
  }
  return "SUM-tanh";
}

FusionStrategy parse_fusion(std::string_view text) {
  std::string t(text);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  std::replace(t.begin(), t.end(), '_', '-');
  for (FusionStrategy s : kAllStrategies) {
    std::string name(to_string(s));
    std::transform(name.begin(), name.end(), name.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    if (name == t) return s;
  }
  throw ConfigError("unknown fusion strategy '" + std::string(text) + "'");
}

bool is_sum_family(FusionStrategy strategy) {
  return strategy == FusionStrategy::SumVanilla || strategy == FusionStrategy::SumSigmoid ||
         strategy == FusionStrategy::SumTanh;
}

Var fuse(Var a, Var r, Var k, FusionStrategy strategy) {
  if (a.shape() != r.shape() || a.shape() != k.shape()) {
    throw ShapeError("fuse: logits " + shape_string(a.shape()) + ", " + shape_string(r.shape()) +
                     ", " + shape_string(k.shape()));
  }
  auto sum3 = [](Var x, Var y, Var z) {
    const Var terms[] = {z, x, y};
    return add_n(terms);
  };
  switch (strategy) {
    case FusionStrategy::SumVanilla: return sum3(a, r, k);
    case FusionStrategy::SumSigmoid: return sum3(sigmoid(a), sigmoid(r), k);
    case FusionStrategy::SumTanh: return sum3(numeric::tanh(a), numeric::tanh(r), k);
    case FusionStrategy::MulVanilla: return mul(mul(a, r), k);
    case FusionStrategy::MulSigmoid: return mul(mul(k, sigmoid(a)), sigmoid(r));
    case FusionStrategy::MulTanh: return mul(mul(k, numeric::tanh(a)), numeric::tanh(r));
  }
  throw ConfigError("unhandled fusion strategy");
}

Tensor fuse(const Tensor& a, const Tensor& r, const Tensor& k, FusionStrategy strategy) {
  Tape tape;
  return fuse(tape.constant(a), tape.constant(r), tape.constant(k), strategy).value();
}

BranchOutputs BranchOutputs::with_zero_voids(Tensor zeta_a, Tensor zeta_r, Tensor zeta_k) {
  BranchOutputs out;
  const Shape shape = zeta_k.shape();
  out.zeta_a = std::move(zeta_a);
  out.zeta_r = std::move(zeta_r);
  out.zeta_k = std::move(zeta_k);
  out.void_a = Tensor(shape);
  out.void_r = Tensor(shape);
  out.void_k = Tensor(shape);
  return out;
}

namespace {

Tensor minus(Tensor a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("effect arithmetic: shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] -= b[i];
  return a;
}

}  // namespace

Tensor nde_aspect(const BranchOutputs& o, FusionStrategy strategy) {
  return minus(fuse(o.zeta_a, o.void_r, o.void_k, strategy),
               fuse(o.void_a, o.void_r, o.void_k, strategy));
}

CausalEffects causal_effects(const BranchOutputs& o, FusionStrategy strategy) {
  const Tensor reference = fuse(o.void_a, o.void_r, o.void_k, strategy);
  CausalEffects e;
  e.te = minus(fuse(o.zeta_a, o.zeta_r, o.zeta_k, strategy), reference);
  e.nde_a = minus(fuse(o.zeta_a, o.void_r, o.void_k, strategy), reference);
  e.nde_r = minus(fuse(o.void_a, o.zeta_r, o.void_k, strategy), reference);
  e.tie = minus(minus(e.te, e.nde_r), e.nde_a);
  return e;
}

std::string_view to_string(InferenceMode mode) {
  switch (mode) {
    case InferenceMode::Tie: return "tie";
    case InferenceMode::Te: return "te";
    case InferenceMode::Literal4Term: return "literal";
  }
  return "tie";
}

InferenceMode parse_mode(std::string_view text) {
  if (text == "tie" || text == "TIE") return InferenceMode::Tie;
  if (text == "te" || text == "TE") return InferenceMode::Te;
  if (text == "literal" || text == "literal4term" || text == "Literal4Term") {
    return InferenceMode::Literal4Term;
  }
  throw ConfigError("inference mode must be tie, te or literal, got '" + std::string(text) + "'");
}

std::size_t argmax(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

Inference tie_inference(const BranchOutputs& o, FusionStrategy strategy, InferenceMode mode) {
  Inference out;
  const Tensor total = fuse(o.zeta_a, o.zeta_r, o.zeta_k, strategy);
  switch (mode) {
    case InferenceMode::Te:
      out.scores = total;
      break;
    case InferenceMode::Tie:
      out.scores = minus(total, nde_aspect(o, strategy));
      break;
    case InferenceMode::Literal4Term: {
      Tensor s = minus(total, fuse(o.void_a, o.zeta_r, o.void_k, strategy));
      s = minus(std::move(s), fuse(o.zeta_a, o.void_r, o.void_k, strategy));
      const Tensor ref = fuse(o.void_a, o.void_r, o.void_k, strategy);
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += ref[i];
      out.scores = std::move(s);
      break;
    }
  }
  out.predicted = argmax(out.scores.values());
  return out;
}

}  // namespace diner::causal
