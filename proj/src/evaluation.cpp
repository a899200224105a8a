#include "diner/evaluation.hpp"

#include <array>
#include <iomanip>
#include <sstream>

#include "diner/error.hpp"

namespace diner::evaluation {

using corpus::Subset;
using nlohmann::json;

Scores accuracy_f1(std::span<const Prediction> preds) {
  if (preds.empty()) throw Error("accuracy_f1: no predictions");
  constexpr std::size_t C = corpus::kNumLabels;
  std::array<std::array<std::size_t, C>, C> confusion{};  // [gold][predicted]
  std::size_t correct = 0;
  for (const auto& p : preds) {
    ++confusion[corpus::label_index(p.gold)][corpus::label_index(p.predicted)];
    correct += p.correct();
  }
  double f1_sum = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    std::size_t gold = 0, predicted = 0;
    for (std::size_t k = 0; k < C; ++k) {
      gold += confusion[c][k];
      predicted += confusion[k][c];
    }
    const double tp = static_cast<double>(confusion[c][c]);
    // F1 = 2TP / (gold + predicted); zero when the class never appears.
    if (gold + predicted > 0) f1_sum += 2.0 * tp / static_cast<double>(gold + predicted);
  }
  return {100.0 * static_cast<double>(correct) / static_cast<double>(preds.size()),
          100.0 * f1_sum / static_cast<double>(C)};
}

double ars(std::span<const Prediction> preds) {
  if (preds.empty()) throw Error("ars: no predictions");
  struct Group {
    bool has_original = false;
    bool all_correct = true;
  };
  std::map<std::string, Group> groups;
  for (const auto& p : preds) {
    Group& g = groups[p.source_id];
    g.has_original = g.has_original || (p.subset == Subset::Original && p.id == p.source_id);
    g.all_correct = g.all_correct && p.correct();
  }
  std::size_t ok = 0;
  for (const auto& [source, g] : groups) {
    if (!g.has_original) throw Error("ars: source group '" + source + "' has no Original instance");
    ok += g.all_correct;
  }
  return 100.0 * static_cast<double>(ok) / static_cast<double>(groups.size());
}

std::vector<Prediction> predict(const model::DinerModel& model, const corpus::Corpus& data,
                                causal::InferenceMode mode) {
  std::vector<Prediction> preds;
  preds.reserve(data.size());
  const auto strategy = model.scoring_fusion();
  for (const auto& inst : data) {
    const auto outputs = model.outputs(inst);
    const auto inference = causal::tie_inference(outputs, strategy, mode);
    Prediction p;
    p.id = inst.id;
    p.source_id = inst.source_id;
    p.subset = inst.subset;
    p.gold = inst.label;
    p.predicted = corpus::label_from_index(inference.predicted);
    p.scores = inference.scores;
    p.nde_a = causal::nde_aspect(outputs, strategy);
    preds.push_back(std::move(p));
  }
  return preds;
}

double oov_rate(const encoder::Vocab& vocab, const corpus::Corpus& data) {
  std::size_t total = 0, unknown = 0;
  for (const auto& inst : data) {
    for (const auto* tokens : {&inst.review, &inst.aspect_term}) {
      for (const auto& t : *tokens) {
        ++total;
        unknown += vocab.id(t) == encoder::Vocab::kUnk;
      }
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(unknown) / static_cast<double>(total);
}

void check_vocabulary(const encoder::Vocab& vocab, const corpus::Corpus& data, double max_rate) {
  const double rate = oov_rate(vocab, data);
  if (rate > max_rate) {
    std::ostringstream msg;
    msg << "vocabulary mismatch: " << std::fixed << std::setprecision(1) << 100.0 * rate
        << "% of tokens are unknown to the checkpoint (eval.max_oov_rate = " << max_rate << ")";
    throw Error(msg.str());
  }
}

MetricsReport summarize(std::span<const Prediction> preds, std::string split, std::string mode) {
  MetricsReport r;
  r.split = std::move(split);
  r.mode = std::move(mode);
  const Scores overall = accuracy_f1(preds);
  r.n_instances = preds.size();
  r.accuracy = overall.accuracy;
  r.macro_f1 = overall.macro_f1;
  std::map<std::string, int> sources;
  for (const auto& p : preds) sources[p.source_id];
  r.n_groups = sources.size();
  try {
    r.ars = ars(preds);
  } catch (const Error&) {
    r.ars.reset();
  }
  for (Subset s : corpus::kAllSubsets) {
    std::vector<Prediction> part;
    for (const auto& p : preds)
      if (p.subset == s) part.push_back(p);
    if (part.empty()) continue;
    const Scores sc = accuracy_f1(part);
    r.per_subset[s] = {part.size(), sc.accuracy, sc.macro_f1};
  }
  return r;
}

json MetricsReport::to_json() const {
  json subsets = json::object();
  for (const auto& [s, m] : per_subset) {
    subsets[std::string(corpus::to_string(s))] = {
        {"n", m.n}, {"accuracy", m.accuracy}, {"macro_f1", m.macro_f1}};
  }
  return {{"split", split},
          {"mode", mode},
          {"n_instances", n_instances},
          {"n_groups", n_groups},
          {"accuracy", accuracy},
          {"macro_f1", macro_f1},
          {"ars", ars ? json(*ars) : json(nullptr)},
          {"per_subset", subsets},
          {"config", config}};
}

std::vector<MetricsReport> evaluate(const model::DinerModel& model,
                                    const std::vector<std::pair<std::string, corpus::Corpus>>& splits,
                                    std::optional<causal::InferenceMode> mode) {
  std::vector<causal::InferenceMode> modes;
  if (mode) {
    modes.push_back(*mode);
  } else {
    modes = {causal::InferenceMode::Te, causal::InferenceMode::Tie};
  }
  std::vector<MetricsReport> reports;
  for (const auto& [name, data] : splits) {
    for (auto m : modes) {
      const auto preds = predict(model, data, m);
      reports.push_back(summarize(preds, name, std::string(causal::to_string(m))));
    }
  }
  return reports;
}

namespace {

std::string number(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

}  // namespace

std::string to_csv(std::span<const MetricsReport> reports) {
  std::ostringstream out;
  out << "mode,split,metric,subset,value,n\n";
  for (const auto& r : reports) {
    const std::string prefix = r.mode + "," + r.split + ",";
    out << prefix << "accuracy,all," << number(r.accuracy) << "," << r.n_instances << "\n";
    out << prefix << "macro_f1,all," << number(r.macro_f1) << "," << r.n_instances << "\n";
    if (r.ars) out << prefix << "ars,all," << number(*r.ars) << "," << r.n_groups << "\n";
    for (const auto& [s, m] : r.per_subset) {
      const std::string subset(corpus::to_string(s));
      out << prefix << "accuracy," << subset << "," << number(m.accuracy) << "," << m.n << "\n";
      out << prefix << "macro_f1," << subset << "," << number(m.macro_f1) << "," << m.n << "\n";
    }
  }
  return out.str();
}

// ---- probing ------------------------------------------------------------------------

json ProbeResult::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"split", r.split}, {"subset", r.subset}, {"n", r.n}, {"accuracy", r.accuracy}});
  }
  json log_json = json::array();
  for (const auto& e : log) log_json.push_back(training::to_json(e));
  return {{"branch", encoder::to_string(branch)}, {"rows", rows_json}, {"log", log_json}};
}

std::string ProbeResult::to_csv() const {
  std::ostringstream out;
  out << "branch,split,subset,accuracy,n\n";
  for (const auto& r : rows) {
    out << encoder::to_string(branch) << "," << r.split << "," << r.subset << ","
        << number(r.accuracy) << "," << r.n << "\n";
  }
  return out.str();
}

double ProbeResult::accuracy(std::string_view split, std::string_view subset) const {
  for (const auto& r : rows)
    if (r.split == split && r.subset == subset) return r.accuracy;
  throw Error("probe result has no row for " + std::string(split) + "/" + std::string(subset));
}

ProbeResult probe(const corpus::Corpus& train,
                  const std::vector<std::pair<std::string, corpus::Corpus>>& splits,
                  encoder::Branch branch, model::ModelConfig model_config,
                  const training::TrainingConfig& config) {
  switch (branch) {
    case encoder::Branch::AspectOnly: model_config.variant = model::Variant::AspectProbe; break;
    case encoder::Branch::ReviewOnly: model_config.variant = model::Variant::ReviewProbe; break;
    case encoder::Branch::Fused: throw ConfigError("probe branch must be aspect or review");
  }
  auto trained = training::train(train, model_config, config);
  ProbeResult result;
  result.branch = branch;
  result.log = std::move(trained.log);
  for (const auto& [name, data] : splits) {
    const auto preds = predict(trained.model, data, causal::InferenceMode::Te);
    result.rows.push_back({name, "all", preds.size(), accuracy_f1(preds).accuracy});
    for (Subset s : corpus::kAllSubsets) {
      std::vector<Prediction> part;
      for (const auto& p : preds)
        if (p.subset == s) part.push_back(p);
      if (part.empty()) continue;
      result.rows.push_back(
          {name, std::string(corpus::to_string(s)), part.size(), accuracy_f1(part).accuracy});
    }
  }
  return result;
}

}  // namespace diner::evaluation
