#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "diner/corpus.hpp"
#include "diner/model.hpp"
#include "diner/training.hpp"
#include "json.hpp"

namespace diner::config {

// Every tunable of a run, addressed by dotted keys ("train.epochs").
struct RunConfig {
  std::uint64_t seed = 13;
  corpus::BiasConfig corpus;
  std::string lexicon_path;  // empty: built-in lexicon
  model::ModelConfig model;
  training::TrainingConfig train;
  std::string eval_mode = "both";  // tie | te | literal | both
  double max_oov_rate = 0.5;
  std::string data_dir = "data";
  std::string checkpoint_dir = "checkpoint";
  std::string out_dir = "out";

  // Throws ConfigError naming the key for an unknown key or a malformed value.
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;

  // Flat key/value view in reference-page order.
  std::vector<std::pair<std::string, std::string>> entries() const;
  nlohmann::json to_json() const;

  // Per-component views with the run seed and lexicon applied.
  corpus::BiasConfig bias_config() const;
  model::ModelConfig model_config() const { return model; }
  training::TrainingConfig training_config() const;

  void validate() const;
};

struct KeyInfo {
  std::string key;
  std::string default_value;
  std::string description;
};
const std::vector<KeyInfo>& keys();

// "key = value" lines; '#' starts a comment; blank lines ignored.
void apply_file(RunConfig& config, const std::filesystem::path& path);
void apply_text(RunConfig& config, std::istream& in, std::string_view origin);
// Variables named DINER_<SECTION>__<NAME> (double underscore for the dot),
// case-insensitive, e.g. DINER_TRAIN__EPOCHS=5.
void apply_environment(RunConfig& config, char** environ_ptr);
inline constexpr std::string_view kEnvPrefix = "DINER_";

// Markdown table of every key with its default and meaning.
std::string reference_page();

}  // namespace diner::config
