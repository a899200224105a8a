#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace diner::corpus {

using Tokens = std::vector<std::string>;

// Class indices are fixed: Positive = 0, Negative = 1, Neutral = 2.
enum class Label { Positive = 0, Negative = 1, Neutral = 2 };
inline constexpr std::size_t kNumLabels = 3;

enum class Subset { Original, RevTgt, RevNon, AddDiff };
inline constexpr std::array<Subset, 4> kAllSubsets = {Subset::Original, Subset::RevTgt,
                                                       Subset::RevNon, Subset::AddDiff};

std::string_view to_string(Label label);
std::string_view to_string(Subset subset);
Label parse_label(std::string_view text);
Subset parse_subset(std::string_view text);
std::size_t label_index(Label label);
Label label_from_index(std::size_t index);
// Positive <-> Negative; Neutral is returned unchanged.
Label flip(Label label);

// Half-open token range [begin, end).
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool operator==(const Span&) const = default;
};

struct AspectMention {
  Tokens term;
  Span span;
  Label label = Label::Neutral;
  bool operator==(const AspectMention&) const = default;
};

struct Instance {
  std::string id;
  std::string source_id;
  Subset subset = Subset::Original;
  Tokens review;
  Tokens aspect_term;
  Span aspect_span;
  Label label = Label::Neutral;
  std::vector<AspectMention> all_aspects;

  // Throws ParseError describing the first violated invariant.
  void validate() const;
  bool operator==(const Instance&) const = default;
};

using Corpus = std::vector<Instance>;

std::string join(const Tokens& tokens, std::string_view sep = " ");

// Lowercases and splits on whitespace; punctuation becomes its own token.
Tokens tokenize_text(std::string_view text);

// ---- lexicon ------------------------------------------------------------------

struct AspectNoun {
  std::string word;
  std::string domain;
};

struct SentimentLexicon {
  std::vector<std::string> positive;
  std::vector<std::string> negative;
  std::vector<std::string> neutral;
  std::map<std::string, std::string> antonyms;  // both directions present
  std::vector<AspectNoun> aspects;

  std::optional<Label> polarity_of(std::string_view word) const;
  std::optional<std::string> antonym(std::string_view word) const;
  bool is_aspect(std::string_view word) const;
  // Adjectives of the given polarity that have an antonym.
  std::vector<std::string> reversible(Label polarity) const;
  // Copy with only the listed aspect nouns, in the given order.
  SentimentLexicon with_aspects(const std::vector<std::string>& words) const;

  // Throws ConfigError on a non-involutive antonym map or an adjective listed twice.
  void validate() const;

  static SentimentLexicon builtin();
  static SentimentLexicon from_json(const nlohmann::json& j);
  static SentimentLexicon load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

// ---- dataset I/O ----------------------------------------------------------------

enum class Format { Jsonl, ArtsTxt };
Format parse_format(std::string_view text);

nlohmann::json to_json(const Instance& instance);
// `line` is only used for error messages.
Instance instance_from_json(const nlohmann::json& j, std::size_t line = 0);

using SubsetCounts = std::map<Subset, std::size_t>;
SubsetCounts count_subsets(const Corpus& corpus);

struct LoadedDataset {
  Corpus instances;  // grouped by source_id, groups in order of first appearance
  SubsetCounts counts;
};

LoadedDataset parse_jsonl(std::istream& in);
// Three-line blocks: sentence with "$T$" placeholder, aspect term, polarity
// (-1/0/1 or a label word). An optional "# id=.. source=.. subset=.." line may
// precede a block. Entries sharing a sentence are merged into all_aspects.
LoadedDataset parse_arts_txt(std::istream& in);
LoadedDataset load_dataset(const std::filesystem::path& path, Format format);

void write_jsonl(std::ostream& out, const Corpus& corpus);
void save_jsonl(const std::filesystem::path& path, const Corpus& corpus);

// Stable reorder so that instances sharing a source_id are contiguous.
Corpus group_by_source(Corpus corpus);

// ---- synthetic corpus --------------------------------------------------------------

struct BiasConfig {
  std::size_t n_sources = 2000;
  std::size_t n_aspects = 12;
  std::size_t aspects_per_review = 2;
  double p_aspect_label = 0.9;
  double p_context_agree = 0.9;
  double train_fraction = 0.7;
  double dev_fraction = 0.1;
  SentimentLexicon lexicon = SentimentLexicon::builtin();
  std::uint64_t seed = 13;

  void validate() const;
};

struct SyntheticCorpus {
  Corpus train;
  Corpus dev;
  // Originals plus their RevTgt / RevNon / AddDiff variants.
  Corpus test;
  // Originals drawn with every aspect's preferred polarity inverted and the
  // context agreement probability replaced by 1 - p_context_agree.
  Corpus anti_biased;
  // Preferred polarity of each active aspect noun.
  std::map<std::string, Label> preferred;
};

SyntheticCorpus generate_synthetic_corpus(const BiasConfig& config);

// ---- adversarial transformations ------------------------------------------------------

Instance rev_tgt(const Instance& instance, const SentimentLexicon& lexicon);
Instance rev_non(const Instance& instance, const SentimentLexicon& lexicon);
Instance add_diff(const Instance& instance, const SentimentLexicon& lexicon, std::size_t k);

// ---- bias statistics ------------------------------------------------------------------

struct BiasReport {
  double single_polarity_fraction = 0.0;
  double all_same_fraction = 0.0;
  std::size_t n_instances = 0;
  std::size_t n_aspect_terms = 0;
  // Target-occurrence label counts per aspect term, indexed by label_index().
  std::map<std::string, std::array<std::size_t, kNumLabels>> histograms;

  nlohmann::json to_json() const;
};

BiasReport analyze_bias(const Corpus& corpus);

}  // namespace diner::corpus
