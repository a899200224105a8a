#include <cmath>
#include <filesystem>

#include "diner/error.hpp"
#include "diner/training.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace diner;
using namespace diner::training;
using causal::BranchOutputs;
using causal::FusionStrategy;
using numeric::Tensor;

namespace {

model::ModelConfig tiny_model(model::Variant variant = model::Variant::Diner) {
  model::ModelConfig c;
  c.variant = variant;
  c.encoder.d = 8;
  c.encoder.n_layers = 1;
  c.encoder.n_heads = 2;
  c.encoder.max_len = 24;
  c.review_head.groups = 2;
  return c;
}

TrainingConfig quick(std::size_t epochs = 2) {
  TrainingConfig c;
  c.epochs = epochs;
  c.batch = 8;
  c.self_check = false;
  return c;
}

corpus::Corpus small_corpus(std::size_t sources = 30, std::uint64_t seed = 2) {
  corpus::BiasConfig bc;
  bc.n_sources = sources;
  bc.seed = seed;
  return corpus::generate_synthetic_corpus(bc).train;
}

// Label decided by a single sentiment word; no other token is shared across classes.
corpus::Corpus separable_corpus() {
  const std::vector<std::pair<std::string, corpus::Label>> rows{
      {"good", corpus::Label::Positive}, {"bad", corpus::Label::Negative},
      {"okay", corpus::Label::Neutral}};
  const std::vector<std::string> nouns{"pizza", "pasta", "wine", "bread"};
  corpus::Corpus out;
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& [adj, label] = rows[i % 3];
    corpus::Instance inst;
    inst.id = inst.source_id = "t" + std::to_string(i);
    inst.review = {"the", nouns[i % 4], "was", adj};
    inst.aspect_term = {nouns[i % 4]};
    inst.aspect_span = {1, 2};
    inst.label = label;
    inst.all_aspects = {{inst.aspect_term, inst.aspect_span, label}};
    inst.validate();
    out.push_back(inst);
  }
  return out;
}

double train_accuracy(const model::DinerModel& m, const corpus::Corpus& data, causal::InferenceMode mode) {
  std::size_t ok = 0;
  for (const auto& inst : data) {
    const auto r = causal::tie_inference(m.outputs(inst), m.scoring_fusion(), mode);
    ok += r.predicted == corpus::label_index(inst.label);
  }
  return static_cast<double>(ok) / static_cast<double>(data.size());
}

}  // namespace

// ---- objective ------------------------------------------------------------------

TEST_CASE("uniform branch distributions give 2.8 ln 3") {
  const auto o = BranchOutputs::with_zero_voids(Tensor({3}), Tensor({3}), Tensor({3}));
  const auto v = multi_task_loss(o, corpus::Label::Neutral, 0.8, 1.0, FusionStrategy::SumTanh);
  CHECK(v.total == doctest::Approx(2.8 * std::log(3.0)).epsilon(1e-12));
  CHECK(v.total == doctest::Approx(3.07611).epsilon(1e-5));
  CHECK(v.l_k == doctest::Approx(std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("loss weights act linearly") {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const auto o = BranchOutputs::with_zero_voids(test_support::random_tensor(rng, {3}, -2, 2),
                                                  test_support::random_tensor(rng, {3}, -2, 2),
                                                  test_support::random_tensor(rng, {3}, -2, 2));
    const auto zero = multi_task_loss(o, corpus::Label::Positive, 0.0, 0.0, FusionStrategy::SumTanh);
    CHECK(zero.total == zero.l_k);
    const auto one = multi_task_loss(o, corpus::Label::Positive, 0.7, 1.3, FusionStrategy::SumTanh);
    const auto two = multi_task_loss(o, corpus::Label::Positive, 1.4, 1.3, FusionStrategy::SumTanh);
    const double a1 = one.total - one.l_k - 1.3 * one.l_r;
    const double a2 = two.total - two.l_k - 1.3 * two.l_r;
    CHECK(a2 == doctest::Approx(2 * a1).epsilon(1e-12));
    CHECK(one.total == doctest::Approx(one.l_k + 0.7 * one.l_a + 1.3 * one.l_r).epsilon(1e-14));
  }
}

TEST_CASE("loss of a Var triple matches the value form and rejects bad labels") {
  numeric::Tape tape;
  const Var a = tape.constant(Tensor::vector({0.3, -1, 2}));
  const Var r = tape.constant(Tensor::vector({0, 0.5, -0.5}));
  const Var k = tape.constant(Tensor::vector({1, 1, 0}));
  const auto parts = multi_task_loss(a, r, k, 2, 0.8, 1.0, FusionStrategy::MulSigmoid);
  const auto v = multi_task_loss(BranchOutputs::with_zero_voids(a.value(), r.value(), k.value()),
                                 corpus::Label::Neutral, 0.8, 1.0, FusionStrategy::MulSigmoid);
  CHECK(parts.total.value().item() == v.total);
  CHECK_THROWS(multi_task_loss(a, r, k, 3, 0.8, 1.0, FusionStrategy::SumTanh));
}

TEST_CASE("full training loss gradient agrees with finite differences") {
  const auto train = small_corpus(10);
  for (auto voids : {model::VoidPolicy::Zero, model::VoidPolicy::Learned}) {
    auto mc = tiny_model();
    mc.voids = voids;
    Rng rng(3);
    model::DinerModel m(mc, encoder::Vocab::build(train), rng);
    m.set_dictionary(snapshot_dictionary(m, train, 0));
    const corpus::Instance* batch[] = {&train[0], &train[1]};
    numeric::GradientCheckOptions options;
    options.max_coordinates = 200;
    options.seed = 9;
    const auto result = check_loss_gradient(m, batch, quick(), options);
    INFO(result.worst_parameter, " ", result.max_relative_error);
    CHECK(result.passed);
    CHECK(result.checked == 200);
  }
}

// ---- optimizer --------------------------------------------------------------------

TEST_CASE("weight decay skips biases and layer-norm parameters") {
  numeric::ParameterStore store;
  auto& w = store.add("w", Tensor::vector({2.0, -1.0}));
  auto& b = store.add("b", Tensor::vector({2.0, -1.0}), false);
  TrainingConfig c;
  c.lr = 0.1;
  c.weight_decay = 0.5;
  AdamW opt(store, c);
  store.zero_grad();  // frozen zero gradient isolates the decay term
  opt.step();
  CHECK(w.value[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0).epsilon(1e-15));
  CHECK(w.value[1] == doctest::Approx(-1.0 + 0.1 * 0.5 * 1.0).epsilon(1e-15));
  CHECK(b.value == Tensor::vector({2.0, -1.0}));

  // With a constant gradient the first bias-corrected step is lr * g / (|g| + eps).
  store.zero_grad();
  b.grad = Tensor::vector({4.0, -0.5});
  AdamW fresh(store, c);
  fresh.step();
  CHECK(b.value[0] == doctest::Approx(2.0 - 0.1 * 4.0 / (4.0 + 1e-8)).epsilon(1e-14));
  CHECK(b.value[1] == doctest::Approx(-1.0 + 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
}

TEST_CASE("model parameters carry the intended decay flags") {
  Rng rng(1);
  model::DinerModel m(tiny_model(), encoder::Vocab::build(small_corpus(5)), rng);
  std::size_t decayed = 0;
  for (const auto* p : m.params().all()) {
    const bool exempt = p->name.ends_with(".b") || p->name.ends_with(".g");
    CHECK_MESSAGE(p->decay == !exempt, p->name);
    decayed += p->decay;
  }
  CHECK(decayed > 0);
}

// ---- training loop ------------------------------------------------------------------

TEST_CASE("training is deterministic under a seed") {
  const auto train = small_corpus();
  const auto a = training::train(train, tiny_model(), quick(3));
  const auto b = training::train(train, tiny_model(), quick(3));
  REQUIRE(a.log.size() == 3);
  CHECK(std::abs(a.log.back().loss - b.log.back().loss) <= 1e-9);
  for (std::size_t i = 0; i < a.model.params().size(); ++i) {
    CHECK(a.model.params().all()[i]->value == b.model.params().all()[i]->value);
  }
  auto other = quick(3);
  other.seed = 14;
  CHECK(training::train(train, tiny_model(), other).log.back().loss != a.log.back().loss);
}

TEST_CASE("zero epochs returns the initial weights without a dictionary") {
  const auto train = small_corpus();
  const auto result = training::train(train, tiny_model(), quick(0));
  CHECK(result.log.empty());
  CHECK_FALSE(result.model.dictionary().has_value());
  Rng init = substream(quick().seed, "init");
  model::DinerModel fresh(tiny_model(), encoder::Vocab::build(train), init);
  for (std::size_t i = 0; i < fresh.params().size(); ++i) {
    CHECK(fresh.params().all()[i]->value == result.model.params().all()[i]->value);
  }
}

TEST_CASE("dictionary is built after the snapshot epoch and TDE switches on") {
  const auto train = small_corpus();
  auto c = quick(3);
  c.snapshot_epoch = 2;
  const auto result = training::train(train, tiny_model(), c);
  REQUIRE(result.model.dictionary().has_value());
  CHECK(result.model.dictionary()->snapshot_epoch() == 2);
  CHECK_FALSE(result.log[0].tde_active);
  CHECK_FALSE(result.log[1].tde_active);
  CHECK(result.log[2].tde_active);

  c.refresh_interval = 1;
  const auto refreshed = training::train(train, tiny_model(), c);
  CHECK(refreshed.model.dictionary()->snapshot_epoch() == 3);

  const auto vanilla = training::train(train, tiny_model(model::Variant::Vanilla), c);
  CHECK_FALSE(vanilla.model.dictionary().has_value());
}

TEST_CASE("startup self-check runs and passes") {
  auto c = quick(1);
  c.self_check = true;
  const auto result = training::train(small_corpus(), tiny_model(), c);
  REQUIRE(result.self_check.has_value());
  CHECK(result.self_check->passed);
  CHECK(result.self_check->checked == c.self_check_coordinates);
}

TEST_CASE("separable toy corpus is fitted exactly") {
  const auto data = separable_corpus();
  auto mc = tiny_model();
  mc.encoder.d = 16;
  mc.encoder.n_heads = 2;
  auto c = quick(30);
  c.batch = 4;
  c.lr = 3e-3;
  c.dropout = 0.0;
  const auto result = training::train(data, mc, c);
  CHECK(train_accuracy(result.model, data, causal::InferenceMode::Te) == 1.0);
  CHECK(result.log.back().loss < result.log.front().loss);
}

TEST_CASE("non-finite loss aborts naming the batch") {
  auto c = quick(3);
  c.lr = 1e300;
  try {
    (void)training::train(small_corpus(), tiny_model(), c);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    const std::string what = e.what();
    CHECK(what.find("epoch ") != std::string::npos);
    CHECK(what.find("batch ") != std::string::npos);
  }
}

TEST_CASE("training config validation and JSON round trip") {
  TrainingConfig c;
  c.alpha = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.batch = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.lr = 0.02;
  c.refresh_interval = 2;
  const auto back = training_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK_THROWS_AS(training::train({}, tiny_model(), quick()), Error);
}

// ---- checkpoint ----------------------------------------------------------------------

TEST_CASE("checkpoint round trips bit-exactly") {
  const auto train = small_corpus();
  auto mc = tiny_model();
  mc.voids = model::VoidPolicy::Learned;
  const auto result = training::train(train, mc, quick(2));
  const Checkpoint cp = Checkpoint::capture(result.model, quick(2), result.log);
  const auto dir = test_support::temp_dir("checkpoint");
  cp.save(dir);
  CHECK(std::filesystem::file_size(dir / "params.bin") ==
        4 * (cp.params.scalar_count() + cp.dictionary->prototypes().size()));
  const Checkpoint back = Checkpoint::load(dir);

  REQUIRE(back.params.size() == cp.params.size());
  for (std::size_t i = 0; i < cp.params.size(); ++i) {
    const auto* a = cp.params.all()[i];
    const auto* b = back.params.all()[i];
    CHECK(a->name == b->name);
    CHECK(a->value == b->value);
    CHECK(a->decay == b->decay);
  }
  CHECK(back.vocab == cp.vocab);
  CHECK(back.dictionary->prototypes() == cp.dictionary->prototypes());
  CHECK(back.dictionary->aspects() == cp.dictionary->aspects());
  CHECK(back.log.size() == 2);
  CHECK(to_json(back.model_config) == to_json(cp.model_config));

  // Restored models score identically and saving again reproduces the bytes.
  const auto m1 = cp.restore();
  const auto m2 = back.restore();
  for (std::size_t i = 0; i < 10; ++i) CHECK(m1.outputs(train[i]).zeta_k == m2.outputs(train[i]).zeta_k);
  const auto dir2 = test_support::temp_dir("checkpoint2");
  back.save(dir2);
  CHECK(test_support::slurp(dir / "params.bin") == test_support::slurp(dir2 / "params.bin"));
  CHECK(test_support::slurp(dir / "manifest.json") == test_support::slurp(dir2 / "manifest.json"));

  // Quantization to 32 bits stays close to the trained weights.
  double worst = 0.0;
  for (std::size_t i = 0; i < cp.params.size(); ++i) {
    worst = std::max(worst, test_support::max_abs_diff(cp.params.all()[i]->value,
                                                       result.model.params().all()[i]->value));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto dir = test_support::temp_dir("bad-checkpoint");
  CHECK_THROWS(Checkpoint::load(dir));
  const auto result = training::train(small_corpus(), tiny_model(), quick(1));
  Checkpoint::capture(result.model, quick(1), result.log).save(dir);
  std::filesystem::resize_file(dir / "params.bin", 12);
  CHECK_THROWS_AS(Checkpoint::load(dir), ParseError);
  {
    std::ofstream out(dir / "manifest.json");
    out << "{not json";
  }
  CHECK_THROWS_AS(Checkpoint::load(dir), ParseError);
}
