#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diner/causal.hpp"
#include "diner/corpus.hpp"
#include "diner/model.hpp"
#include "diner/training.hpp"
#include "json.hpp"

namespace diner::evaluation {

struct Prediction {
  std::string id;
  std::string source_id;
  corpus::Subset subset = corpus::Subset::Original;
  corpus::Label gold = corpus::Label::Neutral;
  corpus::Label predicted = corpus::Label::Neutral;
  numeric::Tensor scores;
  numeric::Tensor nde_a;  // aspect-only effect under the model's fusion

  bool correct() const { return gold == predicted; }
};

struct Scores {
  double accuracy = 0.0;  // percent
  double macro_f1 = 0.0;  // percent; every class counts, absent ones with F1 = 0
};

// Throws on empty input.
Scores accuracy_f1(std::span<const Prediction> preds);
// Percent of source groups whose every member is correct. Throws when a group
// has no Original member.
double ars(std::span<const Prediction> preds);

std::vector<Prediction> predict(const model::DinerModel& model, const corpus::Corpus& data,
                                causal::InferenceMode mode);

// Share of review and aspect tokens unknown to `vocab`.
double oov_rate(const encoder::Vocab& vocab, const corpus::Corpus& data);
// Throws when oov_rate exceeds `max_rate`: the data does not match the checkpoint.
void check_vocabulary(const encoder::Vocab& vocab, const corpus::Corpus& data, double max_rate);

struct SubsetMetrics {
  std::size_t n = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

struct MetricsReport {
  std::string split;
  std::string mode;
  std::size_t n_instances = 0;
  std::size_t n_groups = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::optional<double> ars;  // absent when a group lacks its Original
  std::map<corpus::Subset, SubsetMetrics> per_subset;
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json to_json() const;
};

MetricsReport summarize(std::span<const Prediction> preds, std::string split, std::string mode);

// One report per (split, mode). Without an explicit mode both TE and TIE are emitted.
std::vector<MetricsReport> evaluate(const model::DinerModel& model,
                                    const std::vector<std::pair<std::string, corpus::Corpus>>& splits,
                                    std::optional<causal::InferenceMode> mode = std::nullopt);

// Header "mode,split,metric,subset,value,n"; subset "all" for overall rows.
std::string to_csv(std::span<const MetricsReport> reports);

// ---- probing ------------------------------------------------------------------------

struct ProbeRow {
  std::string split;
  std::string subset;
  std::size_t n = 0;
  double accuracy = 0.0;
};

struct ProbeResult {
  encoder::Branch branch = encoder::Branch::AspectOnly;
  std::vector<ProbeRow> rows;
  std::vector<training::EpochLog> log;

  nlohmann::json to_json() const;
  std::string to_csv() const;
  // Accuracy of the named split's row for `subset` ("all" for the whole split).
  double accuracy(std::string_view split, std::string_view subset) const;
};

// Trains a single-branch classifier (that branch's encoder + linear head) on
// `train` and reports accuracy per split and per subset.
ProbeResult probe(const corpus::Corpus& train,
                  const std::vector<std::pair<std::string, corpus::Corpus>>& splits,
                  encoder::Branch branch, model::ModelConfig model_config,
                  const training::TrainingConfig& config);

}  // namespace diner::evaluation
