#include <filesystem>
#include <fstream>
#include <sstream>

#include "diner/cli.hpp"
#include "doctest.h"
#include "json.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using test_support::slurp;

namespace {

struct Result {
  int status = 0;
  std::string out, err;
};

// Small corpus and model so a full train/eval cycle takes well under a second.
const std::vector<std::string> kSmall{
    "--set", "corpus.n_sources=60", "--set", "encoder.d=8",        "--set", "encoder.n_layers=1",
    "--set", "encoder.n_heads=2",   "--set", "causal.groups=2",    "--set", "train.epochs=2",
    "--set", "train.batch=16"};

Result run(std::vector<std::string> args, bool small = true, char** env = nullptr) {
  args.insert(args.begin(), "diner");
  if (small && args.size() > 1) args.insert(args.end(), kSmall.begin(), kSmall.end());
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Result r;
  r.status = diner::cli::run(static_cast<int>(argv.size()), argv.data(), out, err, env);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::vector<nlohmann::json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  std::vector<nlohmann::json> rows;
  std::string line;
  while (std::getline(in, line)) rows.push_back(nlohmann::json::parse(line));
  return rows;
}

std::string dir_text(const fs::path& dir) {
  std::string all;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) all += f.filename().string() + "\n" + slurp(f);
  return all;
}

}  // namespace

TEST_CASE("gen-corpus is deterministic and writes every split") {
  const auto root = test_support::temp_dir("cli-gen");
  REQUIRE(run({"gen-corpus", "--out", (root / "a").string(), "--seed", "5"}).status == 0);
  REQUIRE(run({"gen-corpus", "--out", (root / "b").string(), "--seed", "5"}).status == 0);
  REQUIRE(run({"gen-corpus", "--out", (root / "c").string(), "--seed", "6"}).status == 0);
  for (const char* f : {"train.jsonl", "dev.jsonl", "test.jsonl", "anti.jsonl", "provenance.json"}) {
    CHECK(fs::exists(root / "a" / f));
    CHECK(slurp(root / "a" / f) == slurp(root / "b" / f));
  }
  CHECK(slurp(root / "a" / "train.jsonl") != slurp(root / "c" / "train.jsonl"));
  const auto prov = nlohmann::json::parse(slurp(root / "a" / "provenance.json"));
  CHECK(prov.at("config").at("run.seed") == "5");
}

TEST_CASE("train then eval: TE and TIE differ by the aspect direct effect") {
  const auto root = test_support::temp_dir("cli-eval");
  const std::string data = (root / "data").string(), ck = (root / "ck").string();
  REQUIRE(run({"gen-corpus", "--out", data}).status == 0);
  const auto trained = run({"train", "--data", data, "--out", ck});
  INFO(trained.err);
  REQUIRE(trained.status == 0);
  const auto manifest = nlohmann::json::parse(slurp(root / "ck" / "manifest.json"));
  CHECK(manifest.at("provenance").at("config").at("train.epochs") == "2");

  const auto te = run({"eval", "--checkpoint", ck, "--data", data, "--mode", "te", "--out",
                       (root / "te").string()});
  const auto tie = run({"eval", "--checkpoint", ck, "--data", data, "--mode", "tie", "--out",
                        (root / "tie").string()});
  REQUIRE(te.status == 0);
  REQUIRE(tie.status == 0);
  const auto a = read_jsonl(root / "te" / "predictions-test-te.jsonl");
  const auto b = read_jsonl(root / "tie" / "predictions-test-tie.jsonl");
  REQUIRE(a.size() == b.size());
  REQUIRE_FALSE(a.empty());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i]["id"] == b[i]["id"]);
    for (std::size_t c = 0; c < 3; ++c) {
      const double diff = a[i]["scores"][c].get<double>() - b[i]["scores"][c].get<double>();
      CHECK(diff == doctest::Approx(a[i]["nde_a"][c].get<double>()).epsilon(1e-12));
    }
  }
  const auto metrics = nlohmann::json::parse(slurp(root / "tie" / "metrics.json"));
  CHECK(metrics.at("provenance").at("config").at("run.seed") == "13");
  CHECK(metrics.at("reports").size() == 2);
  CHECK(fs::exists(root / "tie" / "metrics.csv"));
}

TEST_CASE("re-running a command reproduces its artifacts bit-exactly") {
  const auto root = test_support::temp_dir("cli-repro");
  const std::string data = (root / "data").string();
  REQUIRE(run({"gen-corpus", "--out", data}).status == 0);
  for (const char* name : {"ck1", "ck2"}) {
    REQUIRE(run({"train", "--data", data, "--out", (root / name).string()}).status == 0);
  }
  CHECK(dir_text(root / "ck1") == dir_text(root / "ck2"));
  for (const char* name : {"ev1", "ev2"}) {
    REQUIRE(run({"eval", "--checkpoint", (root / "ck1").string(), "--data", data, "--out",
                 (root / name).string()})
                .status == 0);
  }
  CHECK(dir_text(root / "ev1") == dir_text(root / "ev2"));
}

TEST_CASE("probe, ablate-fusion and analyze-bias write their reports") {
  const auto root = test_support::temp_dir("cli-misc");
  const std::string data = (root / "data").string();
  REQUIRE(run({"gen-corpus", "--out", data}).status == 0);

  REQUIRE(run({"probe", "--branch", "aspect", "--data", data, "--out", (root / "p").string()}).status == 0);
  CHECK(fs::exists(root / "p" / "probe-aspect.json"));
  CHECK(fs::exists(root / "p" / "probe-aspect.csv"));

  const auto ab = run({"ablate-fusion", "--data", data, "--seeds", "1", "--out", (root / "ab").string(),
                       "--set", "train.epochs=1"});
  INFO(ab.err);
  REQUIRE(ab.status == 0);
  std::istringstream csv(slurp(root / "ab" / "ablation.csv"));
  std::string line;
  std::size_t rows = 0;
  std::getline(csv, line);
  CHECK(line.rfind("fusion,family,seeds,accuracy,macro_f1,ars", 0) == 0);
  while (std::getline(csv, line)) rows += !line.empty();
  CHECK(rows == 6);

  const auto bias = run({"analyze-bias", "--input", (root / "data" / "train.jsonl").string(), "--out",
                         (root / "bias.json").string()});
  REQUIRE(bias.status == 0);
  const auto report = nlohmann::json::parse(slurp(root / "bias.json"));
  CHECK(report.contains("single_polarity_fraction"));
}

TEST_CASE("errors map to exit codes with diagnostics naming the key") {
  const auto unknown = run({"gen-corpus", "--set", "foo.bar=1"});
  CHECK(unknown.status == 2);
  CHECK(unknown.err.find("foo.bar") != std::string::npos);

  CHECK(run({"no-such-command"}, false).status == 1);
  CHECK(run({"train", "--bogus-flag"}, false).status == 1);

  const auto root = test_support::temp_dir("cli-errors");
  const auto missing = run({"train", "--train", (root / "absent.jsonl").string(), "--out",
                            (root / "ck").string()});
  CHECK(missing.status == 2);
  CHECK_FALSE(missing.err.empty());

  const auto bad_mode = run({"eval", "--checkpoint", (root / "ck").string(), "--mode", "sideways"});
  CHECK(bad_mode.status != 0);
}

TEST_CASE("precedence: flag over environment over file over default") {
  const auto root = test_support::temp_dir("cli-precedence");
  {
    std::ofstream cfg(root / "run.cfg");
    cfg << "run.seed = 3\ncorpus.n_sources = 40\n";
  }
  std::string e1 = "DINER_RUN__SEED=4";
  char* env[] = {e1.data(), nullptr};
  auto seed_of = [&](const fs::path& dir) {
    return nlohmann::json::parse(slurp(dir / "provenance.json")).at("config").at("run.seed");
  };
  REQUIRE(run({"gen-corpus", "--out", (root / "f").string(), "--config", (root / "run.cfg").string()},
              false)
              .status == 0);
  CHECK(seed_of(root / "f") == "3");
  REQUIRE(run({"gen-corpus", "--out", (root / "e").string(), "--config", (root / "run.cfg").string()},
              false, env)
              .status == 0);
  CHECK(seed_of(root / "e") == "4");
  REQUIRE(run({"gen-corpus", "--out", (root / "c").string(), "--config", (root / "run.cfg").string(),
               "--seed", "5"},
              false, env)
              .status == 0);
  CHECK(seed_of(root / "c") == "5");
}

TEST_CASE("config-ref prints the reference page") {
  const auto r = run({"config-ref"}, false);
  CHECK(r.status == 0);
  CHECK(r.out.find("`train.epochs`") != std::string::npos);
}
