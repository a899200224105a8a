#include "diner/training.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "diner/error.hpp"

namespace diner::training {

using corpus::Instance;
using nlohmann::json;
using numeric::Parameter;
using numeric::ParameterStore;
using numeric::Tape;
using numeric::Tensor;

void TrainingConfig::validate() const {
  if (!(alpha >= 0.0)) throw ConfigError("train.alpha must be non-negative");
  if (!(beta >= 0.0)) throw ConfigError("train.beta must be non-negative");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be non-negative");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("train.adam_beta1 and train.adam_beta2 must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
  if (batch == 0) throw ConfigError("train.batch must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("train.dropout must lie in [0, 1)");
  if (snapshot_epoch == 0) throw ConfigError("train.snapshot_epoch must be at least 1");
  // epochs == 0 is the degenerate "initial weights" run.
  if (epochs != 0 && epochs < snapshot_epoch) {
    throw ConfigError("train.epochs (" + std::to_string(epochs) +
                      ") must be at least train.snapshot_epoch (" + std::to_string(snapshot_epoch) +
                      ")");
  }
}

json to_json(const TrainingConfig& c) {
  return {{"alpha", c.alpha},
          {"beta", c.beta},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"batch", c.batch},
          {"epochs", c.epochs},
          {"dropout", c.dropout},
          {"seed", c.seed},
          {"snapshot_epoch", c.snapshot_epoch},
          {"refresh_interval", c.refresh_interval},
          {"self_check", c.self_check},
          {"self_check_coordinates", c.self_check_coordinates},
          {"self_check_tol", c.self_check_tol}};
}

TrainingConfig training_config_from_json(const json& j) {
  TrainingConfig c;
  c.alpha = j.at("alpha");
  c.beta = j.at("beta");
  c.lr = j.at("lr");
  c.weight_decay = j.at("weight_decay");
  c.adam_beta1 = j.at("adam_beta1");
  c.adam_beta2 = j.at("adam_beta2");
  c.adam_eps = j.at("adam_eps");
  c.batch = j.at("batch");
  c.epochs = j.at("epochs");
  c.dropout = j.at("dropout");
  c.seed = j.at("seed");
  c.snapshot_epoch = j.at("snapshot_epoch");
  c.refresh_interval = j.at("refresh_interval");
  c.self_check = j.at("self_check");
  c.self_check_coordinates = j.at("self_check_coordinates");
  c.self_check_tol = j.at("self_check_tol");
  return c;
}

json to_json(const model::ModelConfig& c) {
  return {{"variant", model::to_string(c.variant)},
          {"d", c.encoder.d},
          {"n_layers", c.encoder.n_layers},
          {"n_heads", c.encoder.n_heads},
          {"ffn_width", c.encoder.ffn_width},
          {"pooling", encoder::to_string(c.encoder.pooling)},
          {"lower_tap_layer", c.encoder.lower_tap_layer},
          {"max_len", c.encoder.max_len},
          {"groups", c.review_head.groups},
          {"tau", c.review_head.tau},
          {"eps", c.review_head.eps},
          {"fusion", causal::to_string(c.fusion)},
          {"voids", model::to_string(c.voids)},
          {"use_tde", c.use_tde}};
}

model::ModelConfig model_config_from_json(const json& j) {
  model::ModelConfig c;
  c.variant = model::parse_variant(j.at("variant").get<std::string>());
  c.encoder.d = j.at("d");
  c.encoder.n_layers = j.at("n_layers");
  c.encoder.n_heads = j.at("n_heads");
  c.encoder.ffn_width = j.at("ffn_width");
  c.encoder.pooling = encoder::parse_pooling(j.at("pooling").get<std::string>());
  c.encoder.lower_tap_layer = j.at("lower_tap_layer");
  c.encoder.max_len = j.at("max_len");
  c.review_head.groups = j.at("groups");
  c.review_head.tau = j.at("tau");
  c.review_head.eps = j.at("eps");
  c.fusion = causal::parse_fusion(j.at("fusion").get<std::string>());
  c.voids = model::parse_void_policy(j.at("voids").get<std::string>());
  c.use_tde = j.at("use_tde");
  return c;
}

// ---- objective ---------------------------------------------------------------------

LossParts multi_task_loss(Var zeta_a, Var zeta_r, Var zeta_k, std::size_t label, double alpha,
                          double beta, causal::FusionStrategy strategy) {
  using namespace numeric;
  LossParts parts;
  parts.l_k = cross_entropy(causal::fuse(zeta_a, zeta_r, zeta_k, strategy), label);
  parts.l_a = cross_entropy(zeta_a, label);
  parts.l_r = cross_entropy(zeta_r, label);
  const Var terms[] = {parts.l_k, scale(parts.l_a, alpha), scale(parts.l_r, beta)};
  parts.total = add_n(terms);
  return parts;
}

LossValues multi_task_loss(const causal::BranchOutputs& o, corpus::Label label, double alpha,
                           double beta, causal::FusionStrategy strategy) {
  Tape tape;
  const auto parts = multi_task_loss(tape.constant(o.zeta_a), tape.constant(o.zeta_r),
                                     tape.constant(o.zeta_k), corpus::label_index(label), alpha,
                                     beta, strategy);
  return {parts.total.value().item(), parts.l_k.value().item(), parts.l_a.value().item(),
          parts.l_r.value().item()};
}

LossParts instance_loss(const model::DinerModel& model, const model::TapeOutputs& outputs,
                        corpus::Label label, const TrainingConfig& config) {
  const std::size_t y = corpus::label_index(label);
  if (model.is_single_branch()) {
    const Var ce = numeric::cross_entropy(model.single_logits(outputs), y);
    Tape& tape = *ce.tape;
    const Var zero = tape.constant(Tensor::scalar(0.0));
    return {ce, ce, zero, zero};
  }
  const auto strategy = model.config().fusion;
  LossParts parts = multi_task_loss(*outputs.zeta_a, *outputs.zeta_r, *outputs.zeta_k, y,
                                    config.alpha, config.beta, strategy);
  if (outputs.void_a) {
    const Var void_ce = numeric::cross_entropy(
        causal::fuse(*outputs.void_a, *outputs.void_r, *outputs.void_k, strategy), y);
    parts.total = numeric::add(parts.total, void_ce);
  }
  return parts;
}

LossParts batch_loss(const model::DinerModel& model, Tape& tape,
                     std::span<const Instance* const> batch, const TrainingConfig& config,
                     const encoder::ForwardOptions& options) {
  if (batch.empty()) throw Error("batch_loss: empty batch");
  std::vector<Var> total, l_k, l_a, l_r;
  for (const Instance* inst : batch) {
    const auto outputs = model.forward(tape, *inst, options);
    const auto parts = instance_loss(model, outputs, inst->label, config);
    total.push_back(parts.total);
    l_k.push_back(parts.l_k);
    l_a.push_back(parts.l_a);
    l_r.push_back(parts.l_r);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  auto mean = [inv](const std::vector<Var>& v) { return numeric::scale(numeric::add_n(v), inv); };
  return {mean(total), mean(l_k), mean(l_a), mean(l_r)};
}

// ---- optimizer ---------------------------------------------------------------------

AdamW::AdamW(ParameterStore& params, const TrainingConfig& config)
    : params_(params.all()),
      lr_(config.lr),
      wd_(config.weight_decay),
      b1_(config.adam_beta1),
      b2_(config.adam_beta2),
      eps_(config.adam_eps) {
  for (const Parameter* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void AdamW::step() {
  ++steps_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (p.grad.size() != p.value.size()) continue;  // never touched by a loss
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    const double decay = p.decay ? wd_ : 0.0;
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      m[j] = b1_ * m[j] + (1.0 - b1_) * g;
      v[j] = b2_ * v[j] + (1.0 - b2_) * g * g;
      const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      p.value[j] -= lr_ * (update + decay * p.value[j]);
    }
  }
}

// ---- training loop -----------------------------------------------------------------

json to_json(const EpochLog& log) {
  return {{"epoch", log.epoch},     {"loss", log.loss},       {"l_k", log.l_k},
          {"l_a", log.l_a},         {"l_r", log.l_r},         {"batches", log.batches},
          {"tde_active", log.tde_active}};
}

EpochLog epoch_log_from_json(const json& j) {
  EpochLog log;
  log.epoch = j.at("epoch");
  log.loss = j.at("loss");
  log.l_k = j.at("l_k");
  log.l_a = j.at("l_a");
  log.l_r = j.at("l_r");
  log.batches = j.at("batches");
  log.tde_active = j.at("tde_active");
  return log;
}

causal::ConfounderDictionary snapshot_dictionary(const model::DinerModel& model,
                                                 const corpus::Corpus& train, std::size_t epoch) {
  return causal::build_confounder_dictionary(
      train, [&model](const Instance& inst) { return model.lower_feature(inst); }, epoch);
}

numeric::GradientCheckResult check_loss_gradient(model::DinerModel& model,
                                                 std::span<const Instance* const> batch,
                                                 const TrainingConfig& config,
                                                 const numeric::GradientCheckOptions& options) {
  const auto params = model.params().all();
  auto build = [&](Tape& tape) { return batch_loss(model, tape, batch, config, {}).total; };
  const auto result = numeric::gradient_check(build, params, options);
  model.params().zero_grad();
  return result;
}

namespace {

std::string describe_batch(std::size_t epoch, std::size_t index,
                           std::span<const Instance* const> batch) {
  std::string ids;
  for (std::size_t i = 0; i < batch.size() && i < 4; ++i) ids += (i ? ", " : "") + batch[i]->id;
  if (batch.size() > 4) ids += ", ...";
  return "epoch " + std::to_string(epoch) + " batch " + std::to_string(index) + " [" + ids + "]";
}

}  // namespace

TrainResult train(const corpus::Corpus& train, const model::ModelConfig& model_config,
                  const TrainingConfig& config) {
  config.validate();
  model_config.validate();
  if (train.empty()) throw Error("train: empty training split");

  Rng init_rng = substream(config.seed, "init");
  Rng dropout_rng = substream(config.seed, "dropout");
  Rng shuffle_rng = substream(config.seed, "shuffle");
  TrainResult result{model::DinerModel(model_config, encoder::Vocab::build(train), init_rng), {}, {}};
  model::DinerModel& model = result.model;
  const bool wants_dictionary = model_config.variant == model::Variant::Diner;

  if (config.self_check && config.epochs > 0) {
    std::vector<const Instance*> tiny;
    for (std::size_t i = 0; i < train.size() && i < 3; ++i) tiny.push_back(&train[i]);
    // Exercise the context-subtraction path too, with a throwaway dictionary.
    if (wants_dictionary && model_config.use_tde) {
      model.set_dictionary(snapshot_dictionary(model, train, 0));
    }
    numeric::GradientCheckOptions options;
    options.tol = config.self_check_tol;
    options.max_coordinates = config.self_check_coordinates;
    options.seed = config.seed;
    result.self_check = check_loss_gradient(model, tiny, config, options);
    model.clear_dictionary();
    if (!result.self_check->passed) {
      throw NumericError("startup gradient check failed: relative error " +
                         std::to_string(result.self_check->max_relative_error) + " at " +
                         result.self_check->worst_parameter + "[" +
                         std::to_string(result.self_check->worst_index) + "]");
    }
  }

  AdamW optimizer(model.params(), config);
  std::vector<const Instance*> order;
  for (const auto& inst : train) order.push_back(&inst);
  const encoder::ForwardOptions options{true, config.dropout, &dropout_rng};

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    diner::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochLog log;
    log.epoch = epoch;
    log.tde_active = model.tde_active();
    for (std::size_t start = 0, b = 0; start < order.size(); start += config.batch, ++b) {
      const std::size_t end = std::min(order.size(), start + config.batch);
      const std::span<const Instance* const> batch(order.data() + start, end - start);
      model.params().zero_grad();
      try {
        Tape tape;
        const LossParts parts = batch_loss(model, tape, batch, config, options);
        const double n = static_cast<double>(batch.size());
        log.loss += parts.total.value().item() * n;
        log.l_k += parts.l_k.value().item() * n;
        log.l_a += parts.l_a.value().item() * n;
        log.l_r += parts.l_r.value().item() * n;
        tape.backward(parts.total);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (" + describe_batch(epoch, b, batch) + ")");
      }
      optimizer.step();
      ++log.batches;
    }
    const double n = static_cast<double>(order.size());
    log.loss /= n;
    log.l_k /= n;
    log.l_a /= n;
    log.l_r /= n;
    if (!std::isfinite(log.loss)) {
      throw NumericError("mean training loss is not finite in epoch " + std::to_string(epoch));
    }
    result.log.push_back(log);

    if (wants_dictionary) {
      const bool snapshot = epoch == config.snapshot_epoch;
      const bool refresh = config.refresh_interval > 0 && epoch > config.snapshot_epoch &&
                           (epoch - config.snapshot_epoch) % config.refresh_interval == 0;
      if (snapshot || refresh) model.set_dictionary(snapshot_dictionary(model, train, epoch));
    }
  }
  model.params().zero_grad();
  return result;
}

// ---- checkpoint --------------------------------------------------------------------

namespace {

double to_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

Tensor quantized(const Tensor& t) {
  Tensor q = t;
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = to_f32(q[i]);
  return q;
}

void append_f32(std::string& blob, const Tensor& t) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(t[i]));
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    char bytes[4];
    std::memcpy(bytes, &bits, 4);
    blob.append(bytes, 4);
  }
}

Tensor read_f32(const std::string& blob, std::size_t offset, const numeric::Shape& shape,
                const std::string& what) {
  Tensor t(shape);
  if (offset + 4 * t.size() > blob.size()) {
    throw ParseError("checkpoint blob too short for " + what);
  }
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, blob.data() + offset + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    t[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  t.check_finite("checkpoint " + what);
  return t;
}

void write_atomically(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ParameterStore clone(const ParameterStore& store) {
  ParameterStore out;
  for (const Parameter* p : store.all()) out.add(p->name, p->value, p->decay);
  return out;
}

}  // namespace

Checkpoint Checkpoint::capture(const model::DinerModel& model, const TrainingConfig& config,
                               std::vector<EpochLog> log) {
  Checkpoint ck;
  ck.model_config = model.config();
  ck.training_config = config;
  ck.vocab = model.vocab();
  for (const Parameter* p : model.params().all()) ck.params.add(p->name, quantized(p->value), p->decay);
  if (model.dictionary()) {
    const auto& d = *model.dictionary();
    ck.dictionary = causal::ConfounderDictionary(d.aspects(), quantized(d.prototypes()),
                                                 d.member_counts(), d.snapshot_epoch());
  }
  ck.log = std::move(log);
  return ck;
}

model::DinerModel Checkpoint::restore() const {
  model::DinerModel model(model_config, vocab, clone(params));
  if (dictionary) model.set_dictionary(*dictionary);
  return model;
}

void Checkpoint::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::string blob;
  json params_json = json::array();
  for (const Parameter* p : params.all()) {
    params_json.push_back({{"name", p->name},
                           {"shape", p->value.shape()},
                           {"offset", blob.size()},
                           {"decay", p->decay}});
    append_f32(blob, p->value);
  }
  json dict_json = nullptr;
  if (dictionary) {
    dict_json = dictionary->metadata();
    dict_json["offset"] = blob.size();
    append_f32(blob, dictionary->prototypes());
  }
  json log_json = json::array();
  for (const auto& e : log) log_json.push_back(to_json(e));
  const json manifest = {{"format", "diner-checkpoint"},
                         {"version", 1},
                         {"dtype", "float32"},
                         {"byte_order", "little"},
                         {"blob", "params.bin"},
                         {"blob_bytes", blob.size()},
                         {"model", to_json(model_config)},
                         {"training", to_json(training_config)},
                         {"vocab", vocab.tokens()},
                         {"parameters", params_json},
                         {"dictionary", dict_json},
                         {"log", log_json},
                         {"provenance", provenance}};
  // Blob first: a manifest on disk always describes a complete blob.
  write_atomically(dir / "params.bin", blob);
  write_atomically(dir / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint Checkpoint::load(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::parse_error& e) {
    throw ParseError("checkpoint manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  try {
    if (manifest.at("format") != "diner-checkpoint" || manifest.at("dtype") != "float32") {
      throw ParseError("not a float32 diner checkpoint: " + dir.string());
    }
    const std::string blob = read_file(dir / manifest.at("blob").get<std::string>());
    if (blob.size() != manifest.at("blob_bytes").get<std::size_t>()) {
      throw ParseError("checkpoint blob size does not match its manifest");
    }
    Checkpoint ck;
    ck.model_config = model_config_from_json(manifest.at("model"));
    ck.training_config = training_config_from_json(manifest.at("training"));
    ck.vocab = encoder::Vocab::from_tokens(manifest.at("vocab").get<std::vector<std::string>>());
    for (const auto& p : manifest.at("parameters")) {
      const std::string name = p.at("name");
      ck.params.add(name, read_f32(blob, p.at("offset"), p.at("shape"), name), p.at("decay"));
    }
    const auto& d = manifest.at("dictionary");
    if (!d.is_null()) {
      const auto aspects = d.at("aspects").get<std::vector<std::string>>();
      const numeric::Shape shape{aspects.size(), d.at("dim").get<std::size_t>()};
      ck.dictionary = causal::ConfounderDictionary(
          aspects, read_f32(blob, d.at("offset"), shape, "prototypes"),
          d.at("member_counts").get<std::vector<std::size_t>>(), d.at("snapshot_epoch"));
    }
    for (const auto& e : manifest.at("log")) ck.log.push_back(epoch_log_from_json(e));
    ck.provenance = manifest.at("provenance");
    return ck;
  } catch (const json::exception& e) {
    throw ParseError("checkpoint manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
}

}  // namespace diner::training
