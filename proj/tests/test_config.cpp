#include <set>
#include <sstream>

#include "diner/config.hpp"
#include "diner/error.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace diner;
using namespace diner::config;

TEST_CASE("defaults are valid and every listed key reads back its default") {
  const RunConfig c;
  CHECK_NOTHROW(c.validate());
  std::set<std::string> seen;
  for (const auto& k : keys()) {
    CHECK(seen.insert(k.key).second);
    CHECK_MESSAGE(c.get(k.key) == k.default_value, k.key);
  }
  CHECK(c.entries().size() == keys().size());
}

TEST_CASE("set and get round trip typed values") {
  RunConfig c;
  c.set("train.epochs", "7");
  c.set("causal.fusion", "mul_tanh");
  c.set("causal.tde", "false");
  c.set("encoder.pooling", "mean");
  c.set("model.variant", "vanilla");
  CHECK(c.train.epochs == 7);
  CHECK(c.model.fusion == causal::FusionStrategy::MulTanh);
  CHECK_FALSE(c.model.use_tde);
  CHECK(c.model.encoder.pooling == encoder::Pooling::Mean);
  CHECK(c.get("causal.fusion") == "MUL-tanh");
  CHECK(c.get("model.variant") == "vanilla");
}

TEST_CASE("unknown keys and malformed values name the key") {
  RunConfig c;
  CHECK_THROWS_WITH_AS(c.set("train.epoch", "3"), doctest::Contains("train.epoch"), ConfigError);
  CHECK_THROWS_WITH_AS(c.set("train.epochs", "many"), doctest::Contains("train.epochs"), ConfigError);
  CHECK_THROWS_WITH_AS(c.set("train.lr", "1e-3x"), doctest::Contains("train.lr"), ConfigError);
  CHECK_THROWS_WITH_AS(c.set("causal.tde", "maybe"), doctest::Contains("causal.tde"), ConfigError);
  CHECK_THROWS_AS(c.get("nope"), ConfigError);
}

TEST_CASE("validation catches cross-field violations") {
  RunConfig c;
  c.set("encoder.n_heads", "3");
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.set("causal.groups", "5");
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.train.epochs = 0;
  c.train.snapshot_epoch = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_WITH_AS(c.set("eval.mode", "sometimes"), doctest::Contains("eval.mode"), ConfigError);
}

TEST_CASE("config text is parsed with comments and reports the line") {
  RunConfig c;
  std::istringstream in("# comment\n\ntrain.epochs = 3   # trailing\nrun.seed=99\n");
  apply_text(c, in, "cfg");
  CHECK(c.train.epochs == 3);
  CHECK(c.seed == 99);
  CHECK(c.training_config().seed == 99);
  CHECK(c.bias_config().seed == 99);

  std::istringstream bad("train.epochs = 3\nno equals sign\n");
  CHECK_THROWS_WITH_AS(apply_text(c, bad, "cfg"), doctest::Contains("cfg:2"), ConfigError);
  std::istringstream unknown("foo.bar = 1\n");
  CHECK_THROWS_WITH_AS(apply_text(c, unknown, "cfg"), doctest::Contains("foo.bar"), ConfigError);
}

TEST_CASE("config files load from disk") {
  const auto dir = test_support::temp_dir("config");
  {
    std::ofstream out(dir / "run.cfg");
    out << "train.batch = 5\ncausal.tau = 4\n";
  }
  RunConfig c;
  apply_file(c, dir / "run.cfg");
  CHECK(c.train.batch == 5);
  CHECK(c.model.review_head.tau == 4.0);
  CHECK_THROWS_AS(apply_file(c, dir / "missing.cfg"), ConfigError);
}

TEST_CASE("environment variables use the double-underscore convention") {
  std::string a = "DINER_TRAIN__EPOCHS=4", b = "DINER_CAUSAL__FUSION=SUM-sigmoid",
              unrelated = "DINER_HOME=/tmp", other = "PATH=/bin";
  char* env[] = {a.data(), b.data(), unrelated.data(), other.data(), nullptr};
  RunConfig c;
  apply_environment(c, env);
  CHECK(c.train.epochs == 4);
  CHECK(c.model.fusion == causal::FusionStrategy::SumSigmoid);

  std::string bad = "DINER_TRAIN__EPOCHZ=4";
  char* env2[] = {bad.data(), nullptr};
  CHECK_THROWS_WITH_AS(apply_environment(c, env2), doctest::Contains("train.epochz"), ConfigError);
  CHECK_NOTHROW(apply_environment(c, nullptr));
}

TEST_CASE("JSON echo carries every key") {
  RunConfig c;
  c.set("train.alpha", "0.5");
  const auto j = c.to_json();
  CHECK(j.size() == keys().size());
  CHECK(j.at("train.alpha") == "0.5");
}

TEST_CASE("reference page lists every key") {
  const std::string page = reference_page();
  for (const auto& k : keys()) CHECK(page.find("`" + k.key + "`") != std::string::npos);
  // Every table row has exactly four unescaped separators.
  std::istringstream lines(page);
  std::string line;
  while (std::getline(lines, line)) {
    if (!line.starts_with("| `")) continue;
    std::size_t bars = 0;
    for (std::size_t i = 0; i < line.size(); ++i) bars += line[i] == '|' && (i == 0 || line[i - 1] != '\\');
    CHECK_MESSAGE(bars == 4, line);
  }
}
