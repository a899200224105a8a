#include "diner/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "diner/error.hpp"
#include "diner/random.hpp"

namespace diner::corpus {

using nlohmann::json;

// ---- enums ---------------------------------------------------------------------

std::string_view to_string(Label label) {
  switch (label) {
    case Label::Positive: return "positive";
    case Label::Negative: return "negative";
    case Label::Neutral: return "neutral";
  }
  return "neutral";
}

std::string_view to_string(Subset subset) {
  switch (subset) {
    case Subset::Original: return "Original";
    case Subset::RevTgt: return "RevTgt";
    case Subset::RevNon: return "RevNon";
    case Subset::AddDiff: return "AddDiff";
  }
  return "Original";
}

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

Label parse_label(std::string_view text) {
  const std::string t = lower(text);
  if (t == "positive" || t == "1" || t == "pos") return Label::Positive;
  if (t == "negative" || t == "-1" || t == "neg") return Label::Negative;
  if (t == "neutral" || t == "0" || t == "neu") return Label::Neutral;
  throw ParseError("unknown label '" + std::string(text) + "'");
}

Subset parse_subset(std::string_view text) {
  const std::string t = lower(text);
  if (t == "original") return Subset::Original;
  if (t == "revtgt") return Subset::RevTgt;
  if (t == "revnon") return Subset::RevNon;
  if (t == "adddiff") return Subset::AddDiff;
  throw ParseError("unknown subset '" + std::string(text) + "'");
}

std::size_t label_index(Label label) { return static_cast<std::size_t>(label); }

Label label_from_index(std::size_t index) {
  if (index >= kNumLabels) throw Error("label index out of range: " + std::to_string(index));
  return static_cast<Label>(index);
}

Label flip(Label label) {
  if (label == Label::Positive) return Label::Negative;
  if (label == Label::Negative) return Label::Positive;
  return label;
}

std::string join(const Tokens& tokens, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += sep;
    out += tokens[i];
  }
  return out;
}

Tokens tokenize_text(std::string_view text) {
  Tokens out;
  std::string current;
  auto flush = [&]() {
    if (!current.empty()) out.push_back(std::exchange(current, {}));
  };
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c) && raw != '\'' && raw != '-' && raw != '$') {
      flush();
      out.emplace_back(1, raw);
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

// ---- Instance --------------------------------------------------------------------

namespace {

bool span_matches(const Tokens& review, Span span, const Tokens& term) {
  if (span.begin >= span.end || span.end > review.size()) return false;
  if (span.end - span.begin != term.size()) return false;
  return std::equal(term.begin(), term.end(), review.begin() + static_cast<long>(span.begin));
}

}  // namespace

void Instance::validate() const {
  auto fail = [this](const std::string& why) { throw ParseError("instance " + id + ": " + why); };
  if (id.empty()) fail("empty id");
  if (!span_matches(review, aspect_span, aspect_term)) {
    fail("aspect_span [" + std::to_string(aspect_span.begin) + "," +
         std::to_string(aspect_span.end) + ") out of bounds or not equal to aspect_term");
  }
  bool target_listed = false;
  for (const auto& m : all_aspects) {
    if (!span_matches(review, m.span, m.term)) fail("all_aspects entry '" + join(m.term) + "' has a bad span");
    target_listed = target_listed || (m.term == aspect_term && m.label == label);
  }
  if (!target_listed) fail("(aspect_term, label) missing from all_aspects");
  if ((subset == Subset::Original) != (source_id == id)) {
    fail("subset Original must coincide with source_id == id");
  }
}

// ---- lexicon --------------------------------------------------------------------

std::optional<Label> SentimentLexicon::polarity_of(std::string_view word) const {
  auto has = [word](const std::vector<std::string>& list) {
    return std::find(list.begin(), list.end(), word) != list.end();
  };
  if (has(positive)) return Label::Positive;
  if (has(negative)) return Label::Negative;
  if (has(neutral)) return Label::Neutral;
  return std::nullopt;
}

std::optional<std::string> SentimentLexicon::antonym(std::string_view word) const {
  auto it = antonyms.find(std::string(word));
  if (it == antonyms.end()) return std::nullopt;
  return it->second;
}

bool SentimentLexicon::is_aspect(std::string_view word) const {
  return std::any_of(aspects.begin(), aspects.end(),
                     [word](const AspectNoun& a) { return a.word == word; });
}

std::vector<std::string> SentimentLexicon::reversible(Label polarity) const {
  const auto& list = polarity == Label::Positive ? positive
                     : polarity == Label::Negative ? negative
                                                   : neutral;
  std::vector<std::string> out;
  for (const auto& w : list)
    if (antonyms.contains(w)) out.push_back(w);
  return out;
}

SentimentLexicon SentimentLexicon::with_aspects(const std::vector<std::string>& words) const {
  SentimentLexicon out = *this;
  out.aspects.clear();
  for (const auto& w : words) {
    auto it = std::find_if(aspects.begin(), aspects.end(),
                           [&w](const AspectNoun& a) { return a.word == w; });
    out.aspects.push_back(it != aspects.end() ? *it : AspectNoun{w, ""});
  }
  return out;
}

void SentimentLexicon::validate() const {
  std::set<std::string> seen;
  for (const auto* list : {&positive, &negative, &neutral}) {
    for (const auto& w : *list) {
      if (!seen.insert(w).second) throw ConfigError("lexicon: adjective '" + w + "' listed twice");
    }
  }
  for (const auto& [w, a] : antonyms) {
    auto back = antonyms.find(a);
    if (back == antonyms.end() || back->second != w) {
      throw ConfigError("lexicon: antonym map is not an involution at '" + w + "'");
    }
    const auto pw = polarity_of(w);
    const auto pa = polarity_of(a);
    if (!pw || !pa || *pw == Label::Neutral || *pa != flip(*pw)) {
      throw ConfigError("lexicon: antonym pair '" + w + "'/'" + a +
                        "' must join a positive and a negative adjective");
    }
  }
}

SentimentLexicon SentimentLexicon::builtin() {
  SentimentLexicon lex;
  const std::vector<std::pair<std::string, std::string>> pairs = {
      {"tasty", "terrible"},    {"crispy", "soggy"},      {"fresh", "stale"},
      {"friendly", "rude"},     {"attentive", "heedless"}, {"great", "awful"},
      {"delicious", "bland"},   {"cozy", "cramped"},      {"fast", "slow"},
      {"clean", "dirty"},       {"helpful", "unhelpful"}, {"excellent", "poor"},
      {"quiet", "noisy"},       {"finest", "poorest"},    {"generous", "stingy"},
      {"bright", "dim"},        {"elegant", "tacky"},     {"perfect", "mediocre"},
  };
  for (const auto& [p, n] : pairs) {
    lex.positive.push_back(p);
    lex.negative.push_back(n);
    lex.antonyms[p] = n;
    lex.antonyms[n] = p;
  }
  lex.neutral = {"average", "ordinary", "standard", "typical"};
  for (const char* w : {"burgers", "fries", "service", "staff", "pizza", "pasta", "wine",
                        "dessert", "atmosphere", "music", "waiters", "decor", "prices",
                        "portions", "menu", "bread", "coffee", "sushi", "steak", "salad"}) {
    lex.aspects.push_back({w, "restaurant"});
  }
  for (const char* w : {"screen", "keyboard", "battery", "trackpad", "speakers", "charger",
                        "display", "processor", "memory", "camera"}) {
    lex.aspects.push_back({w, "laptop"});
  }
  return lex;
}

SentimentLexicon SentimentLexicon::from_json(const json& j) {
  SentimentLexicon lex;
  try {
    lex.positive = j.at("positive").get<std::vector<std::string>>();
    lex.negative = j.at("negative").get<std::vector<std::string>>();
    if (j.contains("neutral")) lex.neutral = j.at("neutral").get<std::vector<std::string>>();
    for (const auto& [w, a] : j.at("antonyms").items()) {
      lex.antonyms[w] = a.get<std::string>();
      lex.antonyms.try_emplace(a.get<std::string>(), w);
    }
    for (const auto& a : j.at("aspects")) {
      if (a.is_string()) {
        lex.aspects.push_back({a.get<std::string>(), ""});
      } else {
        lex.aspects.push_back({a.at("word").get<std::string>(), a.value("domain", "")});
      }
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("lexicon: ") + e.what());
  }
  lex.validate();
  return lex;
}

SentimentLexicon SentimentLexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open lexicon file " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ParseError("lexicon " + path.string() + ": " + e.what());
  }
}

json SentimentLexicon::to_json() const {
  json aspects_json = json::array();
  for (const auto& a : aspects) aspects_json.push_back({{"word", a.word}, {"domain", a.domain}});
  return {{"positive", positive},
          {"negative", negative},
          {"neutral", neutral},
          {"antonyms", antonyms},
          {"aspects", aspects_json}};
}

// ---- JSONL ------------------------------------------------------------------------

Format parse_format(std::string_view text) {
  const std::string t = lower(text);
  if (t == "jsonl") return Format::Jsonl;
  if (t == "arts-txt" || t == "arts_txt" || t == "txt") return Format::ArtsTxt;
  throw ConfigError("unknown dataset format '" + std::string(text) + "'");
}

json to_json(const Instance& instance) {
  json all = json::array();
  for (const auto& m : instance.all_aspects) {
    all.push_back({{"term", m.term},
                   {"span", {m.span.begin, m.span.end}},
                   {"label", to_string(m.label)}});
  }
  return {{"id", instance.id},
          {"source_id", instance.source_id},
          {"subset", to_string(instance.subset)},
          {"review", instance.review},
          {"aspect_term", instance.aspect_term},
          {"aspect_span", {instance.aspect_span.begin, instance.aspect_span.end}},
          {"label", to_string(instance.label)},
          {"all_aspects", all}};
}

namespace {

Span span_from_json(const json& j) {
  if (!j.is_array() || j.size() != 2) throw ParseError("span must be [start, end]");
  return Span{j[0].get<std::size_t>(), j[1].get<std::size_t>()};
}

}  // namespace

Instance instance_from_json(const json& j, std::size_t line) {
  const std::string where = line ? "line " + std::to_string(line) + ": " : std::string();
  Instance inst;
  try {
    inst.id = j.at("id").get<std::string>();
    inst.source_id = j.at("source_id").get<std::string>();
    inst.subset = parse_subset(j.at("subset").get<std::string>());
    inst.review = j.at("review").get<Tokens>();
    inst.aspect_term = j.at("aspect_term").get<Tokens>();
    inst.aspect_span = span_from_json(j.at("aspect_span"));
    inst.label = parse_label(j.at("label").get<std::string>());
    for (const auto& m : j.at("all_aspects")) {
      inst.all_aspects.push_back(AspectMention{m.at("term").get<Tokens>(),
                                               span_from_json(m.at("span")),
                                               parse_label(m.at("label").get<std::string>())});
    }
    inst.validate();
  } catch (const json::exception& e) {
    throw ParseError(where + "schema violation: " + e.what());
  } catch (const ParseError& e) {
    throw ParseError(where + e.what());
  }
  return inst;
}

SubsetCounts count_subsets(const Corpus& corpus) {
  SubsetCounts counts;
  for (Subset s : kAllSubsets) counts[s] = 0;
  for (const auto& inst : corpus) ++counts[inst.subset];
  return counts;
}

Corpus group_by_source(Corpus corpus) {
  std::unordered_map<std::string, std::size_t> first_seen;
  for (const auto& inst : corpus) first_seen.try_emplace(inst.source_id, first_seen.size());
  std::stable_sort(corpus.begin(), corpus.end(), [&](const Instance& a, const Instance& b) {
    return first_seen.at(a.source_id) < first_seen.at(b.source_id);
  });
  return corpus;
}

namespace {

LoadedDataset finish(Corpus corpus) {
  if (corpus.empty()) throw ParseError("no instances");
  LoadedDataset out;
  out.instances = group_by_source(std::move(corpus));
  out.counts = count_subsets(out.instances);
  return out;
}

}  // namespace

LoadedDataset parse_jsonl(std::istream& in) {
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) {
      continue;
    }
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
    corpus.push_back(instance_from_json(j, line_no));
  }
  return finish(std::move(corpus));
}

LoadedDataset parse_arts_txt(std::istream& in) {
  Corpus corpus;
  std::vector<std::string> block;
  std::map<std::string, std::string> meta;
  std::string line;
  std::size_t line_no = 0;
  std::size_t block_start = 0;

  auto emit = [&]() {
    const std::string& sentence = block[0];
    const auto marker = sentence.find("$T$");
    if (marker == std::string::npos) {
      throw ParseError("line " + std::to_string(block_start) + ": sentence lacks $T$ placeholder");
    }
    Instance inst;
    const Tokens left = tokenize_text(sentence.substr(0, marker));
    const Tokens right = tokenize_text(sentence.substr(marker + 3));
    inst.aspect_term = tokenize_text(block[1]);
    if (inst.aspect_term.empty()) {
      throw ParseError("line " + std::to_string(block_start + 1) + ": empty aspect term");
    }
    inst.review = left;
    inst.review.insert(inst.review.end(), inst.aspect_term.begin(), inst.aspect_term.end());
    inst.review.insert(inst.review.end(), right.begin(), right.end());
    inst.aspect_span = Span{left.size(), left.size() + inst.aspect_term.size()};
    try {
      inst.label = parse_label(block[2]);
    } catch (const ParseError& e) {
      throw ParseError("line " + std::to_string(block_start + 2) + ": " + e.what());
    }
    inst.id = meta.contains("id") ? meta["id"] : "arts-" + std::to_string(corpus.size());
    inst.source_id = meta.contains("source") ? meta["source"] : inst.id;
    inst.subset = meta.contains("subset") ? parse_subset(meta["subset"]) : Subset::Original;
    inst.all_aspects = {AspectMention{inst.aspect_term, inst.aspect_span, inst.label}};
    corpus.push_back(std::move(inst));
    block.clear();
    meta.clear();
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (block.empty() && line.starts_with('#')) {
      std::istringstream fields(line.substr(1));
      std::string kv;
      while (fields >> kv) {
        const auto eq = kv.find('=');
        if (eq != std::string::npos) meta[kv.substr(0, eq)] = kv.substr(eq + 1);
      }
      continue;
    }
    if (block.empty() && line.find_first_not_of(" \t") == std::string::npos) continue;
    if (block.empty()) block_start = line_no;
    block.push_back(line);
    if (block.size() == 3) emit();
  }
  if (!block.empty()) {
    throw ParseError("line " + std::to_string(line_no) + ": truncated three-line block");
  }

  // Entries that share a sentence describe the same review; pool their mentions.
  std::map<std::string, std::vector<AspectMention>> by_sentence;
  for (const auto& inst : corpus) {
    auto& mentions = by_sentence[join(inst.review)];
    if (std::find(mentions.begin(), mentions.end(), inst.all_aspects[0]) == mentions.end()) {
      mentions.push_back(inst.all_aspects[0]);
    }
  }
  for (auto& inst : corpus) {
    inst.all_aspects = by_sentence[join(inst.review)];
    std::sort(inst.all_aspects.begin(), inst.all_aspects.end(),
              [](const AspectMention& a, const AspectMention& b) {
                return a.span.begin < b.span.begin;
              });
    inst.validate();
  }
  return finish(std::move(corpus));
}

LoadedDataset load_dataset(const std::filesystem::path& path, Format format) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset " + path.string());
  try {
    return format == Format::Jsonl ? parse_jsonl(in) : parse_arts_txt(in);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_jsonl(std::ostream& out, const Corpus& corpus) {
  for (const auto& inst : corpus) out << to_json(inst).dump() << '\n';
}

void save_jsonl(const std::filesystem::path& path, const Corpus& corpus) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + tmp.string());
    write_jsonl(out, corpus);
  }
  std::filesystem::rename(tmp, path);
}

// ---- transformations ------------------------------------------------------------

namespace {

bool is_delimiter(std::string_view tok) {
  return tok == "," || tok == "." || tok == "!" || tok == "?" || tok == ";" || tok == "and" ||
         tok == "but";
}

// Position of the sentiment adjective attached to a mention: nearest lexicon
// adjective inside the same clause, searching leftwards first.
std::optional<std::size_t> find_adjective(const Tokens& review, Span span,
                                          const SentimentLexicon& lex) {
  for (std::size_t i = span.begin; i-- > 0;) {
    if (is_delimiter(review[i])) break;
    if (lex.polarity_of(review[i])) return i;
  }
  for (std::size_t i = span.end; i < review.size(); ++i) {
    if (is_delimiter(review[i])) break;
    if (lex.polarity_of(review[i])) return i;
  }
  return std::nullopt;
}

// Connective before each clause becomes "but" when its polarity differs from
// the preceding clause and "and" when it agrees. Other tokens are untouched.
void rewrite_connectives(Instance& inst, const SentimentLexicon& lex) {
  std::vector<const AspectMention*> order;
  for (const auto& m : inst.all_aspects) order.push_back(&m);
  std::sort(order.begin(), order.end(), [](const AspectMention* a, const AspectMention* b) {
    return a->span.begin < b->span.begin;
  });
  for (std::size_t k = 1; k < order.size(); ++k) {
    std::size_t clause_start = order[k]->span.begin;
    if (auto adj = find_adjective(inst.review, order[k]->span, lex); adj && *adj < clause_start) {
      clause_start = *adj;
    }
    if (clause_start == 0) continue;
    std::string& conn = inst.review[clause_start - 1];
    if (conn != "and" && conn != "but") continue;
    conn = order[k]->label == order[k - 1]->label ? "and" : "but";
  }
}

AspectMention* find_mention(Instance& inst, Span span) {
  for (auto& m : inst.all_aspects)
    if (m.span == span) return &m;
  return nullptr;
}

}  // namespace

Instance rev_tgt(const Instance& instance, const SentimentLexicon& lexicon) {
  if (instance.label == Label::Neutral) {
    throw TransformError("rev_tgt: neutral target '" + join(instance.aspect_term) +
                         "' has no antonym semantics");
  }
  Instance out = instance;
  const auto adj = find_adjective(out.review, out.aspect_span, lexicon);
  if (!adj) throw TransformError("rev_tgt: no lexicon adjective attached to the target");
  const auto ant = lexicon.antonym(out.review[*adj]);
  if (!ant) throw TransformError("rev_tgt: adjective '" + out.review[*adj] + "' has no antonym");
  out.review[*adj] = *ant;
  out.label = flip(out.label);
  if (AspectMention* m = find_mention(out, out.aspect_span)) m->label = out.label;
  rewrite_connectives(out, lexicon);
  out.id = instance.id + "/revtgt";
  out.subset = Subset::RevTgt;
  return out;
}

Instance rev_non(const Instance& instance, const SentimentLexicon& lexicon) {
  Instance out = instance;
  std::size_t non_targets = 0;
  std::size_t flipped = 0;
  for (auto& m : out.all_aspects) {
    if (m.span == out.aspect_span) continue;
    ++non_targets;
    if (m.label == Label::Neutral) continue;
    const auto adj = find_adjective(out.review, m.span, lexicon);
    if (!adj) continue;
    const auto ant = lexicon.antonym(out.review[*adj]);
    if (!ant) continue;
    out.review[*adj] = *ant;
    m.label = flip(m.label);
    ++flipped;
  }
  if (non_targets == 0) throw TransformError("rev_non: instance has no non-target aspect");
  if (flipped == 0) throw TransformError("rev_non: no non-target adjective is reversible");
  rewrite_connectives(out, lexicon);
  out.id = instance.id + "/revnon";
  out.subset = Subset::RevNon;
  return out;
}

Instance add_diff(const Instance& instance, const SentimentLexicon& lexicon, std::size_t k) {
  if (k == 0) throw TransformError("add_diff: k must be at least 1");
  std::vector<std::string> unused;
  for (const auto& a : lexicon.aspects) {
    if (std::find(instance.review.begin(), instance.review.end(), a.word) == instance.review.end()) {
      unused.push_back(a.word);
    }
  }
  if (unused.size() < k) {
    throw TransformError("add_diff: need " + std::to_string(k) + " unused aspect nouns, lexicon has " +
                         std::to_string(unused.size()));
  }
  const Label polarity = instance.label == Label::Negative ? Label::Positive : Label::Negative;
  std::vector<std::string> adjectives = lexicon.reversible(polarity);
  if (adjectives.empty()) {
    adjectives = polarity == Label::Positive ? lexicon.positive : lexicon.negative;
  }
  if (adjectives.empty()) throw TransformError("add_diff: lexicon has no adjective of the opposite polarity");

  Instance out = instance;
  while (!out.review.empty() &&
         (out.review.back() == "." || out.review.back() == "!" || out.review.back() == "?")) {
    out.review.pop_back();
  }
  const std::size_t start = fnv1a(instance.id) % unused.size();
  for (std::size_t i = 0; i < k; ++i) {
    const std::string& noun = unused[(start + i) % unused.size()];
    const std::string& adj = adjectives[fnv1a(instance.id + "|" + noun) % adjectives.size()];
    if (i == 0) {
      out.review.push_back(",");
      out.review.push_back("but");
    } else {
      out.review.push_back("and");
    }
    out.review.push_back(adj);
    out.review.push_back(noun);
    out.all_aspects.push_back(
        AspectMention{{noun}, Span{out.review.size() - 1, out.review.size()}, polarity});
  }
  out.review.push_back("ever");
  out.review.push_back("!");
  out.id = instance.id + "/adddiff";
  out.subset = Subset::AddDiff;
  return out;
}

// ---- synthetic corpus -------------------------------------------------------------

void BiasConfig::validate() const {
  auto prob = [](double p, const char* key) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(key) + " must lie in [0,1]");
  };
  prob(p_aspect_label, "corpus.p_aspect_label");
  prob(p_context_agree, "corpus.p_context_agree");
  prob(train_fraction, "corpus.train_fraction");
  prob(dev_fraction, "corpus.dev_fraction");
  if (train_fraction + dev_fraction > 1.0) {
    throw ConfigError("corpus.train_fraction + corpus.dev_fraction must not exceed 1");
  }
  if (aspects_per_review < 2) throw ConfigError("corpus.aspects_per_review must be at least 2");
  if (aspects_per_review > n_aspects) {
    throw ConfigError("corpus.aspects_per_review (" + std::to_string(aspects_per_review) +
                      ") exceeds corpus.n_aspects (" + std::to_string(n_aspects) + ")");
  }
  if (n_aspects > lexicon.aspects.size()) {
    throw ConfigError("corpus.n_aspects exceeds the lexicon's " +
                      std::to_string(lexicon.aspects.size()) + " aspect nouns");
  }
  if (n_sources == 0) throw ConfigError("corpus.n_sources must be positive");
  lexicon.validate();
  if (lexicon.reversible(Label::Positive).empty() || lexicon.reversible(Label::Negative).empty()) {
    throw ConfigError("lexicon needs reversible adjectives of both polarities");
  }
}

namespace {

struct Generator {
  const BiasConfig& config;
  std::vector<std::string> active;
  std::map<std::string, Label> preferred;
  std::vector<std::string> pos_adj;
  std::vector<std::string> neg_adj;
  Rng rng;

  Instance make(const std::string& id, bool inverted) {
    std::vector<std::size_t> pool(active.size());
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    const std::size_t n = config.aspects_per_review;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + uniform_index(rng, pool.size() - i);
      std::swap(pool[i], pool[j]);
    }
    const std::size_t target = uniform_index(rng, n);

    const std::string& target_noun = active[pool[target]];
    Label pref = preferred.at(target_noun);
    if (inverted) pref = flip(pref);
    const Label target_label = bernoulli(rng, config.p_aspect_label) ? pref : flip(pref);
    const double agree = inverted ? 1.0 - config.p_context_agree : config.p_context_agree;

    Instance inst;
    inst.id = id;
    inst.source_id = id;
    inst.subset = Subset::Original;
    for (std::size_t c = 0; c < n; ++c) {
      const Label label =
          c == target ? target_label : (bernoulli(rng, agree) ? target_label : flip(target_label));
      const auto& adjs = label == Label::Positive ? pos_adj : neg_adj;
      const std::string& adj = adjs[uniform_index(rng, adjs.size())];
      if (c > 0) {
        inst.review.push_back(",");
        inst.review.push_back(label == inst.all_aspects.back().label ? "and" : "but");
      }
      inst.review.push_back(adj);
      inst.review.push_back(active[pool[c]]);
      const Span span{inst.review.size() - 1, inst.review.size()};
      inst.all_aspects.push_back(AspectMention{{active[pool[c]]}, span, label});
      if (c == target) {
        inst.aspect_term = {active[pool[c]]};
        inst.aspect_span = span;
        inst.label = label;
      }
    }
    inst.review.push_back(".");
    return inst;
  }
};

std::string numbered(std::string_view prefix, std::size_t i) {
  std::string digits = std::to_string(i);
  if (digits.size() < 5) digits.insert(0, 5 - digits.size(), '0');
  return std::string(prefix) + "-" + digits;
}

}  // namespace

SyntheticCorpus generate_synthetic_corpus(const BiasConfig& config) {
  config.validate();
  Generator gen{config, {}, {}, config.lexicon.reversible(Label::Positive),
                config.lexicon.reversible(Label::Negative), substream(config.seed, "corpus")};
  for (std::size_t i = 0; i < config.n_aspects; ++i) gen.active.push_back(config.lexicon.aspects[i].word);

  // Half of the active aspects prefer each polarity.
  std::vector<std::size_t> order(gen.active.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order.begin(), order.end(), gen.rng);
  for (std::size_t r = 0; r < order.size(); ++r) {
    gen.preferred[gen.active[order[r]]] = r < (order.size() + 1) / 2 ? Label::Positive : Label::Negative;
  }

  const auto n_train = static_cast<std::size_t>(config.train_fraction * static_cast<double>(config.n_sources));
  const auto n_dev = static_cast<std::size_t>(config.dev_fraction * static_cast<double>(config.n_sources));
  const SentimentLexicon active_lexicon = config.lexicon.with_aspects(gen.active);

  SyntheticCorpus out;
  out.preferred = gen.preferred;
  for (std::size_t i = 0; i < config.n_sources; ++i) {
    if (i < n_train) {
      out.train.push_back(gen.make(numbered("train", i), false));
    } else if (i < n_train + n_dev) {
      out.dev.push_back(gen.make(numbered("dev", i - n_train), false));
    } else {
      const Instance original = gen.make(numbered("test", i - n_train - n_dev), false);
      out.test.push_back(original);
      out.test.push_back(rev_tgt(original, active_lexicon));
      out.test.push_back(rev_non(original, active_lexicon));
      if (config.aspects_per_review < config.n_aspects) {
        out.test.push_back(add_diff(original, active_lexicon, 1));
      }
    }
  }
  const std::size_t n_test = config.n_sources - std::min(config.n_sources, n_train + n_dev);
  for (std::size_t i = 0; i < n_test; ++i) out.anti_biased.push_back(gen.make(numbered("anti", i), true));
  return out;
}

// ---- bias statistics ---------------------------------------------------------------

BiasReport analyze_bias(const Corpus& corpus) {
  if (corpus.empty()) throw Error("analyze_bias: empty corpus");
  BiasReport report;
  report.n_instances = corpus.size();
  std::size_t all_same = 0;
  for (const auto& inst : corpus) {
    ++report.histograms[join(inst.aspect_term)][label_index(inst.label)];
    const bool same = std::all_of(inst.all_aspects.begin(), inst.all_aspects.end(),
                                  [&](const AspectMention& m) { return m.label == inst.label; });
    if (same) ++all_same;
  }
  std::size_t single = 0;
  for (const auto& [term, hist] : report.histograms) {
    const auto kinds = std::count_if(hist.begin(), hist.end(), [](std::size_t c) { return c > 0; });
    if (kinds == 1) ++single;
  }
  report.n_aspect_terms = report.histograms.size();
  report.single_polarity_fraction =
      static_cast<double>(single) / static_cast<double>(report.n_aspect_terms);
  report.all_same_fraction = static_cast<double>(all_same) / static_cast<double>(corpus.size());
  return report;
}

json BiasReport::to_json() const {
  json hist = json::object();
  for (const auto& [term, counts] : histograms) {
    hist[term] = {{"positive", counts[0]}, {"negative", counts[1]}, {"neutral", counts[2]}};
  }
  return {{"single_polarity_fraction", single_polarity_fraction},
          {"all_same_fraction", all_same_fraction},
          {"n_instances", n_instances},
          {"n_aspect_terms", n_aspect_terms},
          {"histograms", hist}};
}

}  // namespace diner::corpus
