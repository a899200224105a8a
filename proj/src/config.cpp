#include "diner/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "diner/error.hpp"

namespace diner::config {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view want) {
  throw ConfigError(std::string(key) + ": expected " + std::string(want) + ", got '" +
                    std::string(value) + "'");
}

template <typename T>
T parse_number(std::string_view key, std::string_view value, std::string_view want) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end || value.empty()) bad_value(key, value, want);
  return out;
}

std::size_t parse_count(std::string_view key, std::string_view v) {
  return parse_number<std::size_t>(key, v, "a non-negative integer");
}
double parse_real(std::string_view key, std::string_view v) {
  return parse_number<double>(key, v, "a real number");
}
bool parse_flag(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "true or false");
}

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}
std::string fmt(std::size_t v) { return std::to_string(v); }
std::string fmt(std::uint64_t v, int) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

// Wraps a parser so that library ConfigErrors are re-labelled with the key.
template <typename F>
auto keyed(std::string_view key, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.rfind(std::string(key) + ":", 0) == 0) throw;
    throw ConfigError(std::string(key) + ": " + msg);
  }
}

struct Entry {
  std::string key;
  std::string description;
  std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define COUNT(field) \
  [](RunConfig& c, std::string_view k, std::string_view v) { c.field = parse_count(k, v); }, \
      [](const RunConfig& c) { return fmt(static_cast<std::size_t>(c.field)); }
#define REAL(field) \
  [](RunConfig& c, std::string_view k, std::string_view v) { c.field = parse_real(k, v); }, \
      [](const RunConfig& c) { return fmt(static_cast<double>(c.field)); }
#define FLAG(field) \
  [](RunConfig& c, std::string_view k, std::string_view v) { c.field = parse_flag(k, v); }, \
      [](const RunConfig& c) { return fmt(static_cast<bool>(c.field)); }
#define TEXT(field) \
  [](RunConfig& c, std::string_view, std::string_view v) { c.field = std::string(v); }, \
      [](const RunConfig& c) { return c.field; }

const std::vector<Entry>& table() {
  static const std::vector<Entry> entries = {
      {"run.seed", "Run seed; split into corpus / init / dropout / shuffle substreams.",
       [](RunConfig& c, std::string_view k, std::string_view v) {
         c.seed = parse_number<std::uint64_t>(k, v, "an unsigned integer");
       },
       [](const RunConfig& c) { return fmt(c.seed, 0); }},
      {"corpus.n_sources", "Original instances generated (train + dev + test).", COUNT(corpus.n_sources)},
      {"corpus.n_aspects", "Active aspect nouns drawn from the lexicon.", COUNT(corpus.n_aspects)},
      {"corpus.aspects_per_review", "Aspects mentioned per review (>= 2).",
       COUNT(corpus.aspects_per_review)},
      {"corpus.p_aspect_label", "Probability the target carries its aspect's preferred polarity.",
       REAL(corpus.p_aspect_label)},
      {"corpus.p_context_agree", "Probability each non-target aspect agrees with the target.",
       REAL(corpus.p_context_agree)},
      {"corpus.train_fraction", "Share of sources in the training split.", REAL(corpus.train_fraction)},
      {"corpus.dev_fraction", "Share of sources in the dev split; the rest is test.",
       REAL(corpus.dev_fraction)},
      {"corpus.lexicon", "Lexicon JSON file; empty uses the built-in lexicon.", TEXT(lexicon_path)},
      {"model.variant", "diner | vanilla | aspect-probe | review-probe.",
       [](RunConfig& c, std::string_view k, std::string_view v) {
         c.model.variant = keyed(k, [&] { return model::parse_variant(v); });
       },
       [](const RunConfig& c) { return std::string(model::to_string(c.model.variant)); }},
      {"encoder.d", "Feature width.", COUNT(model.encoder.d)},
      {"encoder.n_layers", "Transformer layers per branch encoder.", COUNT(model.encoder.n_layers)},
      {"encoder.n_heads", "Attention heads; must divide encoder.d.", COUNT(model.encoder.n_heads)},
      {"encoder.ffn_width", "Feed-forward width; 0 means 2 * encoder.d.", COUNT(model.encoder.ffn_width)},
      {"encoder.pooling", "cls | mean.",
       [](RunConfig& c, std::string_view k, std::string_view v) {
         c.model.encoder.pooling = keyed(k, [&] { return encoder::parse_pooling(v); });
       },
       [](const RunConfig& c) { return std::string(encoder::to_string(c.model.encoder.pooling)); }},
      {"encoder.lower_tap_layer", "Layer whose pooled output feeds the confounder dictionary.",
       COUNT(model.encoder.lower_tap_layer)},
      {"encoder.max_len", "Maximum input length; longer reviews are truncated.",
       COUNT(model.encoder.max_len)},
      {"causal.groups", "Groups K of the normalized review head; must divide encoder.d.",
       COUNT(model.review_head.groups)},
      {"causal.tau", "Scale of the normalized review head.", REAL(model.review_head.tau)},
      {"causal.eps", "Weight-norm guard of the normalized review head.", REAL(model.review_head.eps)},
      {"causal.fusion", "SUM-Vanilla | SUM-sigmoid | SUM-tanh | MUL-Vanilla | MUL-sigmoid | MUL-tanh.",
       [](RunConfig& c, std::string_view k, std::string_view v) {
         c.model.fusion = keyed(k, [&] { return causal::parse_fusion(v); });
       },
       [](const RunConfig& c) { return std::string(causal::to_string(c.model.fusion)); }},
      {"causal.voids", "Counterfactual reference values: zero | learned.",
       [](RunConfig& c, std::string_view k, std::string_view v) {
         c.model.voids = keyed(k, [&] { return model::parse_void_policy(v); });
       },
       [](const RunConfig& c) { return std::string(model::to_string(c.model.voids)); }},
      {"causal.tde", "Subtract the projected context once the dictionary exists.",
       FLAG(model.use_tde)},
      {"train.alpha", "Weight of the aspect-branch loss.", REAL(train.alpha)},
      {"train.beta", "Weight of the review-branch loss.", REAL(train.beta)},
      {"train.lr", "AdamW learning rate.", REAL(train.lr)},
      {"train.weight_decay", "Decoupled weight decay (not applied to biases or norms).",
       REAL(train.weight_decay)},
      {"train.adam_beta1", "AdamW first-moment decay.", REAL(train.adam_beta1)},
      {"train.adam_beta2", "AdamW second-moment decay.", REAL(train.adam_beta2)},
      {"train.adam_eps", "AdamW denominator guard.", REAL(train.adam_eps)},
      {"train.batch", "Mini-batch size; the last batch may be smaller.", COUNT(train.batch)},
      {"train.epochs", "Training epochs; 0 saves the initial weights.", COUNT(train.epochs)},
      {"train.dropout", "Dropout probability during training.", REAL(train.dropout)},
      {"train.snapshot_epoch", "Epoch after which the confounder dictionary is built.",
       COUNT(train.snapshot_epoch)},
      {"train.refresh_interval", "Rebuild the dictionary every N epochs; 0 keeps it frozen.",
       COUNT(train.refresh_interval)},
      {"train.self_check", "Finite-difference check of the loss gradient before training.",
       FLAG(train.self_check)},
      {"train.self_check_coordinates", "Parameter coordinates sampled by the self-check.",
       COUNT(train.self_check_coordinates)},
      {"train.self_check_tol", "Relative-error tolerance of the self-check.", REAL(train.self_check_tol)},
      {"eval.mode", "tie | te | literal | both.",
       [](RunConfig& c, std::string_view k, std::string_view v) {
         if (v != "both") keyed(k, [&] { return causal::parse_mode(v); });
         c.eval_mode = std::string(v);
       },
       [](const RunConfig& c) { return c.eval_mode; }},
      {"eval.max_oov_rate", "Largest tolerated share of unknown tokens in evaluation data.",
       REAL(max_oov_rate)},
      {"io.data_dir", "Directory of corpus JSONL splits.", TEXT(data_dir)},
      {"io.checkpoint_dir", "Checkpoint directory.", TEXT(checkpoint_dir)},
      {"io.out_dir", "Directory for reports.", TEXT(out_dir)},
  };
  return entries;
}

#undef COUNT
#undef REAL
#undef FLAG
#undef TEXT

const Entry& find(std::string_view key) {
  for (const auto& e : table())
    if (e.key == key) return e;
  throw ConfigError("unknown configuration key '" + std::string(key) + "'");
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  const Entry& e = find(key);
  e.set(*this, key, trim(value));
}

std::string RunConfig::get(std::string_view key) const { return find(key).get(*this); }

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : table()) out.emplace_back(e.key, e.get(*this));
  return out;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : entries()) j[k] = v;
  return j;
}

corpus::BiasConfig RunConfig::bias_config() const {
  corpus::BiasConfig b = corpus;
  b.seed = seed;
  if (!lexicon_path.empty()) b.lexicon = corpus::SentimentLexicon::load(lexicon_path);
  return b;
}

training::TrainingConfig RunConfig::training_config() const {
  training::TrainingConfig t = train;
  t.seed = seed;
  return t;
}

void RunConfig::validate() const {
  corpus.validate();
  if (corpus.train_fraction + corpus.dev_fraction > 1.0) {
    throw ConfigError("corpus.train_fraction + corpus.dev_fraction must not exceed 1");
  }
  model.validate();
  train.validate();
  if (!(max_oov_rate >= 0.0 && max_oov_rate <= 1.0)) {
    throw ConfigError("eval.max_oov_rate must lie in [0, 1]");
  }
}

const std::vector<KeyInfo>& keys() {
  static const std::vector<KeyInfo> info = [] {
    std::vector<KeyInfo> out;
    const RunConfig defaults;
    for (const auto& e : table()) out.push_back({e.key, e.get(defaults), e.description});
    return out;
  }();
  return info;
}

void apply_text(RunConfig& config, std::istream& in, std::string_view origin) {
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string text = trim(line);
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(number) +
                        ": expected 'key = value', got '" + text + "'");
    }
    try {
      config.set(trim(std::string_view(text).substr(0, eq)), std::string_view(text).substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(number) + ": " + e.what());
    }
  }
}

void apply_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  apply_text(config, in, path.string());
}

void apply_environment(RunConfig& config, char** env) {
  if (env == nullptr) return;
  std::vector<std::pair<std::string, std::string>> found;
  for (char** e = env; *e != nullptr; ++e) {
    const std::string_view entry(*e);
    if (entry.rfind(kEnvPrefix, 0) != 0) continue;
    const auto eq = entry.find('=');
    if (eq == std::string_view::npos) continue;
    std::string name(entry.substr(kEnvPrefix.size(), eq - kEnvPrefix.size()));
    // Only DINER_<SECTION>__<NAME> variables are configuration; others are left alone.
    const auto sep = name.find("__");
    if (sep == std::string::npos) continue;
    name.replace(sep, 2, ".");
    std::transform(name.begin(), name.end(), name.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    found.emplace_back(name, std::string(entry.substr(eq + 1)));
  }
  // Sorted so the outcome never depends on environment order.
  std::sort(found.begin(), found.end());
  for (const auto& [key, value] : found) {
    try {
      config.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("environment: ") + e.what());
    }
  }
}

std::string reference_page() {
  std::ostringstream out;
  out << "# Configuration reference\n\n"
      << "Keys are set, in increasing precedence, by defaults, a config file (`--config`),\n"
      << "environment variables `DINER_<SECTION>__<NAME>` (e.g. `DINER_TRAIN__EPOCHS=5`),\n"
      << "and command-line flags (`--set key=value`). Unknown keys are rejected.\n\n"
      << "| key | default | meaning |\n|---|---|---|\n";
  for (const auto& k : keys()) {
    // Pipes inside a cell would split it.
    std::string meaning;
    for (char c : k.description) {
      if (c == '|') meaning += '\\';
      meaning += c;
    }
    const std::string shown = k.default_value.empty() ? "*(empty)*" : "`" + k.default_value + "`";
    out << "| `" << k.key << "` | " << shown << " | " << meaning << " |\n";
  }
  return out.str();
}

}  // namespace diner::config
