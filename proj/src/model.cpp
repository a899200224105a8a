#include "diner/model.hpp"

#include <set>

#include "diner/error.hpp"

namespace diner::model {

using encoder::Branch;
using encoder::build_input;

std::string_view to_string(Variant variant) {
  switch (variant) {
    case Variant::Diner: return "diner";
    case Variant::Vanilla: return "vanilla";
    case Variant::AspectProbe: return "aspect-probe";
    case Variant::ReviewProbe: return "review-probe";
  }
  return "diner";
}

Variant parse_variant(std::string_view text) {
  for (Variant v : {Variant::Diner, Variant::Vanilla, Variant::AspectProbe, Variant::ReviewProbe}) {
    if (text == to_string(v)) return v;
  }
  throw ConfigError("model.variant must be diner, vanilla, aspect-probe or review-probe, got '" +
                    std::string(text) + "'");
}

std::string_view to_string(VoidPolicy policy) {
  return policy == VoidPolicy::Zero ? "zero" : "learned";
}

VoidPolicy parse_void_policy(std::string_view text) {
  if (text == "zero") return VoidPolicy::Zero;
  if (text == "learned") return VoidPolicy::Learned;
  throw ConfigError("causal.voids must be zero or learned, got '" + std::string(text) + "'");
}

void ModelConfig::validate() const {
  encoder.validate();
  review_head.validate(encoder.d);
}

// ---- construction ------------------------------------------------------------------

DinerModel::DinerModel(ModelConfig config, encoder::Vocab vocab, Rng& init_rng)
    : config_(std::move(config)),
      vocab_(std::move(vocab)),
      params_(std::make_unique<ParameterStore>()) {
  config_.validate();
  register_parameters(init_rng);
  bind();
}

DinerModel::DinerModel(ModelConfig config, encoder::Vocab vocab, ParameterStore params)
    : config_(std::move(config)),
      vocab_(std::move(vocab)),
      params_(std::make_unique<ParameterStore>(std::move(params))) {
  config_.validate();
  // Registering into a scratch store yields the expected names and shapes.
  ParameterStore expected;
  {
    Rng scratch(0);
    std::swap(expected, *params_);
    register_parameters(scratch);
    std::swap(expected, *params_);
  }
  if (expected.size() != params_->size()) {
    throw Error("checkpoint has " + std::to_string(params_->size()) + " parameters, model expects " +
                std::to_string(expected.size()));
  }
  for (const auto* p : expected.all()) {
    if (!params_->contains(p->name)) throw Error("checkpoint lacks parameter " + p->name);
    auto& got = params_->get(p->name);
    if (got.value.shape() != p->value.shape()) {
      throw ShapeError("checkpoint parameter " + p->name + " has shape " +
                       numeric::shape_string(got.value.shape()) + ", model expects " +
                       numeric::shape_string(p->value.shape()));
    }
    got.decay = p->decay;
  }
  bind();
}

bool DinerModel::has_branch(Branch branch) const {
  switch (config_.variant) {
    case Variant::Diner: return true;
    case Variant::Vanilla: return branch == Branch::Fused;
    case Variant::AspectProbe: return branch == Branch::AspectOnly;
    case Variant::ReviewProbe: return branch == Branch::ReviewOnly;
  }
  return false;
}

void DinerModel::register_parameters(Rng& rng) {
  ParameterStore& store = *params_;
  const std::size_t d = config_.encoder.d;
  const std::size_t c = corpus::kNumLabels;
  store.add("embed.tokens", encoder::uniform_init({vocab_.size(), d}, rng));
  auto head = [&](const std::string& name) {
    store.add(name + ".w", encoder::uniform_init({c, d}, rng));
    store.add(name + ".b", Tensor({c}), /*decay=*/false);
  };
  if (has_branch(Branch::Fused)) {
    encoder::TransformerEncoder("fused", config_.encoder, store, rng);
    head("head.fused");
  }
  if (has_branch(Branch::AspectOnly)) {
    encoder::TransformerEncoder("aspect", config_.encoder, store, rng);
    head("head.aspect");
  }
  if (has_branch(Branch::ReviewOnly)) {
    encoder::TransformerEncoder("review", config_.encoder, store, rng);
    if (config_.variant == Variant::Diner) {
      store.add("head.review.w", encoder::uniform_init({c, d}, rng));
      store.add("head.review.context", encoder::uniform_init({d, 2 * d}, rng));
    } else {
      head("head.review_plain");
    }
  }
  if (config_.variant == Variant::Diner && config_.voids == VoidPolicy::Learned) {
    for (const char* v : {"void.a", "void.r", "void.k"}) store.add(v, Tensor({c}), false);
  }
}

void DinerModel::bind() {
  if (has_branch(Branch::Fused)) fused_.emplace("fused", config_.encoder, *params_);
  if (has_branch(Branch::AspectOnly)) aspect_.emplace("aspect", config_.encoder, *params_);
  if (has_branch(Branch::ReviewOnly)) review_.emplace("review", config_.encoder, *params_);
  if (params_->get("embed.tokens").value.rows() != vocab_.size()) {
    throw ShapeError("token table has " +
                     std::to_string(params_->get("embed.tokens").value.rows()) +
                     " rows but the vocabulary has " + std::to_string(vocab_.size()) + " tokens");
  }
}

void DinerModel::set_dictionary(causal::ConfounderDictionary dictionary) {
  if (dictionary.dim() != config_.encoder.d) {
    throw ShapeError("confounder dictionary width " + std::to_string(dictionary.dim()) +
                     " does not match encoder.d " + std::to_string(config_.encoder.d));
  }
  dictionary_ = std::move(dictionary);
}

// ---- forward -----------------------------------------------------------------------

Var DinerModel::linear_head(Tape& tape, Var x, std::string_view prefix) const {
  const std::string p(prefix);
  return numeric::add(numeric::matmul_nt(x, tape.parameter(params_->get(p + ".w"))),
                      tape.parameter(params_->get(p + ".b")));
}

TapeOutputs DinerModel::forward(Tape& tape, const corpus::Instance& instance,
                                const encoder::ForwardOptions& options) const {
  const std::size_t max_len = config_.encoder.max_len;
  const Var table = tape.parameter(params_->get("embed.tokens"));
  TapeOutputs out;
  if (fused_) {
    const auto in = build_input(instance, Branch::Fused, vocab_, max_len);
    const auto enc = fused_->forward(tape, table, in.ids, options);
    out.zeta_k = linear_head(tape, enc.pooled, "head.fused");
  }
  if (aspect_) {
    const auto in = build_input(instance, Branch::AspectOnly, vocab_, max_len);
    const auto enc = aspect_->forward(tape, table, in.ids, options);
    out.zeta_a = linear_head(tape, enc.pooled, "head.aspect");
  }
  if (review_) {
    const auto in = build_input(instance, Branch::ReviewOnly, vocab_, max_len);
    const auto enc = review_->forward(tape, table, in.ids, options);
    out.lower_feature = enc.lower_feature;
    if (config_.variant == Variant::Diner) {
      const Var w = tape.parameter(params_->get("head.review.w"));
      if (tde_active()) {
        const Var context = causal::context_feature(enc.lower_feature, *dictionary_);
        const Var r_c = causal::context_projection(
            enc.pooled, context, tape.parameter(params_->get("head.review.context")));
        out.zeta_r = causal::debiased_review_logits(enc.pooled, r_c, w, config_.review_head);
      } else {
        out.zeta_r = causal::normalized_group_logits(enc.pooled, w, config_.review_head);
      }
    } else {
      out.zeta_r = linear_head(tape, enc.pooled, "head.review_plain");
    }
  }
  if (config_.variant == Variant::Diner && config_.voids == VoidPolicy::Learned) {
    out.void_a = tape.parameter(params_->get("void.a"));
    out.void_r = tape.parameter(params_->get("void.r"));
    out.void_k = tape.parameter(params_->get("void.k"));
  }
  return out;
}

Var DinerModel::single_logits(const TapeOutputs& outputs) const {
  switch (config_.variant) {
    case Variant::Vanilla: return *outputs.zeta_k;
    case Variant::AspectProbe: return *outputs.zeta_a;
    case Variant::ReviewProbe: return *outputs.zeta_r;
    case Variant::Diner: break;
  }
  throw Error("single_logits: the diner variant has no single scoring head");
}

causal::BranchOutputs DinerModel::outputs(const corpus::Instance& instance) const {
  Tape tape;
  const TapeOutputs t = forward(tape, instance, {});
  if (is_single_branch()) {
    const Tensor logits = single_logits(t).value();
    const Tensor zero(logits.shape());
    return causal::BranchOutputs::with_zero_voids(zero, zero, logits);
  }
  auto out = causal::BranchOutputs::with_zero_voids(t.zeta_a->value(), t.zeta_r->value(),
                                                    t.zeta_k->value());
  if (t.void_a) {
    out.void_a = t.void_a->value();
    out.void_r = t.void_r->value();
    out.void_k = t.void_k->value();
  }
  return out;
}

Tensor DinerModel::lower_feature(const corpus::Instance& instance) const {
  if (!review_) throw Error("lower_feature: model has no review branch");
  Tape tape;
  const Var table = tape.parameter(params_->get("embed.tokens"));
  const auto in = build_input(instance, Branch::ReviewOnly, vocab_, config_.encoder.max_len);
  return review_->forward(tape, table, in.ids, {}).lower_feature.value();
}

}  // namespace diner::model
