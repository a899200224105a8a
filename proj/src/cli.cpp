#include "diner/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "diner/config.hpp"
#include "diner/corpus.hpp"
#include "diner/error.hpp"
#include "diner/evaluation.hpp"
#include "diner/training.hpp"

namespace diner::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& common) {
  cmd->add_option("--config", common.config_file, "Config file of 'key = value' lines");
  cmd->add_option("--set", common.sets, "Override a key: --set train.epochs=5 (repeatable)");
  cmd->add_option("--seed", common.seed, "Shortcut for --set run.seed=N");
}

config::RunConfig resolve(const Common& common, char** environment) {
  config::RunConfig cfg;
  if (!common.config_file.empty()) config::apply_file(cfg, common.config_file);
  config::apply_environment(cfg, environment);
  for (const auto& s : common.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  if (common.seed) cfg.seed = *common.seed;
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << content;
    if (!out) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json provenance(std::string_view command, const config::RunConfig& cfg) {
  return {{"command", command}, {"seed", cfg.seed}, {"config", cfg.to_json()}};
}

corpus::Format format_for(const fs::path& path, const std::string& format) {
  if (!format.empty()) return corpus::parse_format(format);
  return path.extension() == ".txt" ? corpus::Format::ArtsTxt : corpus::Format::Jsonl;
}

corpus::Corpus load(const fs::path& path, const std::string& format) {
  if (!fs::exists(path)) throw Error("no such file: " + path.string());
  return corpus::load_dataset(path, format_for(path, format)).instances;
}

// Named evaluation splits: explicit files, else test.jsonl and anti.jsonl of the data dir.
std::vector<std::pair<std::string, corpus::Corpus>> eval_splits(const std::vector<std::string>& files,
                                                                const fs::path& data_dir,
                                                                const std::string& format) {
  std::vector<std::pair<std::string, corpus::Corpus>> splits;
  if (!files.empty()) {
    for (const auto& f : files) splits.emplace_back(fs::path(f).stem().string(), load(f, format));
    return splits;
  }
  splits.emplace_back("test", load(data_dir / "test.jsonl", format));
  if (fs::exists(data_dir / "anti.jsonl")) {
    splits.emplace_back("anti", load(data_dir / "anti.jsonl", format));
  }
  return splits;
}

std::string pct(double v) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2) << v;
  return out.str();
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// ---- commands ------------------------------------------------------------------------

void gen_corpus(const config::RunConfig& cfg, const fs::path& out_dir, std::ostream& out) {
  const auto bias = cfg.bias_config();
  const auto sc = corpus::generate_synthetic_corpus(bias);
  json artifacts = json::object();
  auto save = [&](const std::string& name, const corpus::Corpus& c) {
    corpus::save_jsonl(out_dir / (name + ".jsonl"), c);
    json counts = json::object();
    for (const auto& [s, n] : corpus::count_subsets(c)) counts[std::string(corpus::to_string(s))] = n;
    artifacts[name + ".jsonl"] = {{"instances", c.size()}, {"subsets", counts}};
    out << name << ".jsonl: " << c.size() << " instances\n";
  };
  fs::create_directories(out_dir);
  save("train", sc.train);
  save("dev", sc.dev);
  save("test", sc.test);
  save("anti", sc.anti_biased);
  json preferred = json::object();
  for (const auto& [noun, label] : sc.preferred) preferred[noun] = corpus::to_string(label);
  json prov = provenance("gen-corpus", cfg);
  prov["artifacts"] = artifacts;
  prov["preferred_polarity"] = preferred;
  write_json(out_dir / "provenance.json", prov);
}

void train_cmd(const config::RunConfig& cfg, const fs::path& train_file, const std::string& format,
               const fs::path& out_dir, std::ostream& out, std::ostream& err) {
  const auto train = load(train_file, format);
  Stopwatch clock;
  auto result = training::train(train, cfg.model_config(), cfg.training_config());
  if (result.self_check) {
    err << "gradient self-check: max relative error " << result.self_check->max_relative_error
        << " over " << result.self_check->checked << " coordinates\n";
  }
  for (const auto& e : result.log) {
    out << "epoch " << e.epoch << " loss " << e.loss << (e.tde_active ? " (tde)" : "") << "\n";
  }
  auto ck = training::Checkpoint::capture(result.model, cfg.training_config(), result.log);
  ck.provenance = provenance("train", cfg);
  ck.provenance["train_file"] = train_file.string();
  ck.provenance["n_train"] = train.size();
  ck.save(out_dir);
  err << "trained in " << pct(clock.seconds()) << " s; checkpoint at " << out_dir.string() << "\n";
}

void eval_cmd(const config::RunConfig& cfg, const fs::path& checkpoint,
              const std::vector<std::pair<std::string, corpus::Corpus>>& splits,
              const std::string& mode, const fs::path& out_dir, std::ostream& out) {
  const auto ck = training::Checkpoint::load(checkpoint);
  const auto model = ck.restore();
  for (const auto& [name, data] : splits) {
    evaluation::check_vocabulary(model.vocab(), data, cfg.max_oov_rate);
  }
  std::optional<causal::InferenceMode> m;
  if (mode != "both") m = causal::parse_mode(mode);
  std::vector<causal::InferenceMode> modes =
      m ? std::vector{*m} : std::vector{causal::InferenceMode::Te, causal::InferenceMode::Tie};

  std::vector<evaluation::MetricsReport> reports;
  fs::create_directories(out_dir);
  for (const auto& [name, data] : splits) {
    for (auto mm : modes) {
      const auto preds = evaluation::predict(model, data, mm);
      auto report = evaluation::summarize(preds, name, std::string(causal::to_string(mm)));
      report.config = cfg.to_json();
      std::string lines;
      for (const auto& p : preds) {
        const json row = {{"id", p.id},
                          {"source_id", p.source_id},
                          {"subset", corpus::to_string(p.subset)},
                          {"gold", corpus::to_string(p.gold)},
                          {"predicted", corpus::to_string(p.predicted)},
                          {"scores", std::vector<double>(p.scores.values().begin(), p.scores.values().end())},
                          {"nde_a", std::vector<double>(p.nde_a.values().begin(), p.nde_a.values().end())}};
        lines += row.dump() + "\n";
      }
      write_text(out_dir / ("predictions-" + name + "-" + report.mode + ".jsonl"), lines);
      out << name << " [" << report.mode << "] acc " << pct(report.accuracy) << "  macro-F1 "
          << pct(report.macro_f1) << "  ARS " << (report.ars ? pct(*report.ars) : "n/a");
      for (const auto& [s, sm] : report.per_subset) {
        out << "  " << corpus::to_string(s) << " " << pct(sm.accuracy);
      }
      out << "\n";
      reports.push_back(std::move(report));
    }
  }
  json prov = provenance("eval", cfg);
  prov["checkpoint"] = checkpoint.string();
  prov["checkpoint_provenance"] = ck.provenance;
  json reports_json = json::array();
  for (const auto& r : reports) reports_json.push_back(r.to_json());
  write_json(out_dir / "metrics.json", {{"reports", reports_json}, {"provenance", prov}});
  write_text(out_dir / "metrics.csv", evaluation::to_csv(reports));
  write_json(out_dir / "provenance.json", prov);
}

void probe_cmd(const config::RunConfig& cfg, const std::string& branch_name,
               const fs::path& train_file, const std::string& format,
               const std::vector<std::pair<std::string, corpus::Corpus>>& splits,
               const fs::path& out_dir, std::ostream& out) {
  encoder::Branch branch;
  if (branch_name == "aspect") {
    branch = encoder::Branch::AspectOnly;
  } else if (branch_name == "review") {
    branch = encoder::Branch::ReviewOnly;
  } else {
    throw ConfigError("--branch must be aspect or review, got '" + branch_name + "'");
  }
  const auto train = load(train_file, format);
  const auto result = evaluation::probe(train, splits, branch, cfg.model_config(), cfg.training_config());
  for (const auto& r : result.rows) {
    out << r.split << " " << r.subset << " n=" << r.n << " acc " << pct(r.accuracy) << "\n";
  }
  json j = result.to_json();
  j["provenance"] = provenance("probe", cfg);
  write_json(out_dir / ("probe-" + branch_name + ".json"), j);
  write_text(out_dir / ("probe-" + branch_name + ".csv"), result.to_csv());
  write_json(out_dir / "provenance.json", j["provenance"]);
}

void ablate_fusion(const config::RunConfig& cfg, const fs::path& train_file, const std::string& format,
                   const std::vector<std::pair<std::string, corpus::Corpus>>& splits,
                   std::size_t seeds, const fs::path& out_dir, std::ostream& out) {
  if (seeds == 0) throw ConfigError("--seeds must be positive");
  const auto train = load(train_file, format);
  const auto& test = splits.front();
  std::ostringstream runs, table;
  runs << "fusion,seed,split,mode,accuracy,macro_f1,ars\n";
  table << "fusion,family,seeds,accuracy,macro_f1,ars\n";
  for (auto strategy : causal::kAllStrategies) {
    double acc = 0.0, f1 = 0.0, ars = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) {
      auto model_cfg = cfg.model_config();
      model_cfg.fusion = strategy;
      auto train_cfg = cfg.training_config();
      train_cfg.seed = cfg.seed + s;
      const auto trained = training::train(train, model_cfg, train_cfg);
      for (const auto& [name, data] : splits) {
        const auto preds = evaluation::predict(trained.model, data, causal::InferenceMode::Tie);
        const auto r = evaluation::summarize(preds, name, "tie");
        runs << causal::to_string(strategy) << "," << train_cfg.seed << "," << name << ",tie,"
             << r.accuracy << "," << r.macro_f1 << "," << (r.ars ? std::to_string(*r.ars) : "") << "\n";
        if (name == test.first) {
          acc += r.accuracy;
          f1 += r.macro_f1;
          ars += r.ars.value_or(0.0);
        }
      }
    }
    const double n = static_cast<double>(seeds);
    table << causal::to_string(strategy) << ","
          << (causal::is_sum_family(strategy) ? "SUM" : "MUL") << "," << seeds << "," << acc / n
          << "," << f1 / n << "," << ars / n << "\n";
    out << causal::to_string(strategy) << ": " << test.first << " acc " << pct(acc / n) << "\n";
  }
  write_text(out_dir / "ablation.csv", table.str());
  write_text(out_dir / "ablation_runs.csv", runs.str());
  json prov = provenance("ablate-fusion", cfg);
  prov["seeds"] = seeds;
  write_json(out_dir / "provenance.json", prov);
}

void analyze_bias_cmd(const config::RunConfig& cfg, const std::vector<std::string>& inputs,
                      const std::string& format, const std::string& out_file, std::ostream& out) {
  corpus::Corpus all;
  for (const auto& f : inputs) {
    auto part = load(f, format);
    all.insert(all.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  const auto report = corpus::analyze_bias(all);
  out << "instances " << report.n_instances << ", aspect terms " << report.n_aspect_terms
      << "\nsingle-polarity fraction " << pct(100.0 * report.single_polarity_fraction)
      << "%\nall-same fraction " << pct(100.0 * report.all_same_fraction) << "%\n";
  if (!out_file.empty()) {
    json j = report.to_json();
    j["inputs"] = inputs;
    j["provenance"] = provenance("analyze-bias", cfg);
    write_json(out_file, j);
  }
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err, char** environment) {
  CLI::App app{"Multi-variable causal debiasing for aspect-based sentiment analysis"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "diner 1.0");

  Common common;
  std::string data_dir, out_dir, format, checkpoint, mode = "", branch = "aspect", out_file;
  std::string train_file;
  std::vector<std::string> test_files, inputs;
  std::size_t seeds = 3;

  auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic biased corpus as JSONL splits");
  gen->add_option("--out", out_dir, "Output directory (default io.data_dir)");

  auto* tr = app.add_subcommand("train", "Train a model and write a checkpoint");
  tr->add_option("--data", data_dir, "Directory holding train.jsonl (default io.data_dir)");
  tr->add_option("--train", train_file, "Training file (overrides --data)");
  tr->add_option("--out", out_dir, "Checkpoint directory (default io.checkpoint_dir)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint directory (default io.checkpoint_dir)");
  ev->add_option("--data", data_dir, "Directory holding test.jsonl / anti.jsonl");
  ev->add_option("--test", test_files, "Evaluation file (repeatable; overrides --data)");
  ev->add_option("--mode", mode, "tie | te | literal | both (default eval.mode)");
  ev->add_option("--out", out_dir, "Report directory (default io.out_dir)");

  auto* pr = app.add_subcommand("probe", "Train and evaluate a single-branch probing model");
  pr->add_option("--branch", branch, "aspect | review");
  pr->add_option("--data", data_dir, "Directory holding train/test/anti JSONL");
  pr->add_option("--out", out_dir, "Report directory (default io.out_dir)");

  auto* ab = app.add_subcommand("ablate-fusion", "Train and evaluate all six fusion strategies");
  ab->add_option("--data", data_dir, "Directory holding train/test/anti JSONL");
  ab->add_option("--seeds", seeds, "Training seeds per strategy (run.seed, run.seed+1, ...)");
  ab->add_option("--out", out_dir, "Report directory (default io.out_dir)");

  auto* an = app.add_subcommand("analyze-bias", "Aspect-polarity bias statistics of a corpus");
  an->add_option("--input", inputs, "Dataset file (repeatable; combined)")->required();
  an->add_option("--out", out_file, "Write the report as JSON");

  auto* ref = app.add_subcommand("config-ref", "Print the configuration reference page");
  ref->add_option("--out", out_file, "Write to a file instead of stdout");

  for (auto* cmd : {gen, tr, ev, pr, ab, an, ref}) add_common(cmd, common);
  for (auto* cmd : {tr, ev, pr, ab, an}) {
    cmd->add_option("--format", format, "Dataset format: jsonl | arts (default by extension)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Help and version requests exit 0; every other parse failure is a usage error.
    const int status = app.exit(e, out, err);
    return status == 0 ? 0 : 1;
  }

  try {
    const auto cfg = resolve(common, environment);
    const fs::path data = data_dir.empty() ? fs::path(cfg.data_dir) : fs::path(data_dir);
    const fs::path train_path = train_file.empty() ? data / "train.jsonl" : fs::path(train_file);
    if (*gen) {
      gen_corpus(cfg, out_dir.empty() ? cfg.data_dir : out_dir, out);
    } else if (*tr) {
      train_cmd(cfg, train_path, format, out_dir.empty() ? cfg.checkpoint_dir : out_dir, out, err);
    } else if (*ev) {
      eval_cmd(cfg, checkpoint.empty() ? cfg.checkpoint_dir : checkpoint,
               eval_splits(test_files, data, format), mode.empty() ? cfg.eval_mode : mode,
               out_dir.empty() ? cfg.out_dir : out_dir, out);
    } else if (*pr) {
      probe_cmd(cfg, branch, train_path, format, eval_splits({}, data, format),
                out_dir.empty() ? cfg.out_dir : out_dir, out);
    } else if (*ab) {
      ablate_fusion(cfg, train_path, format, eval_splits({}, data, format), seeds,
                    out_dir.empty() ? cfg.out_dir : out_dir, out);
    } else if (*an) {
      analyze_bias_cmd(cfg, inputs, format, out_file, out);
    } else if (*ref) {
      if (out_file.empty()) {
        out << config::reference_page();
      } else {
        write_text(out_file, config::reference_page());
      }
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace diner::cli
