#include "p3t/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "p3t/io.hpp"

namespace p3t::train {

namespace {

using ad::Tensor;

constexpr char kCheckpointMagic[] = "P3TC";
constexpr std::uint32_t kCheckpointVersion = 1;

// Seed tags.
constexpr std::uint64_t kOrderTag = 0x6f72646572ULL;
constexpr std::uint64_t kTrainTargetTag = 0x7467ULL;
constexpr std::uint64_t kEvalTargetTag = 0x6576ULL;
constexpr std::uint64_t kPrompterTag = 0x7072ULL;
constexpr std::uint64_t kContextTag = 0x6374ULL;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a finite number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

std::vector<double> row_of(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

std::uint64_t content_key(const geom::PointCloud& pc) {
  io::Fnv1a h;
  for (const auto& p : pc.points)
    for (double x : p) h.update_f64(x);
  return h.digest();
}

// Runs fn(i) for i in [0, n) on up to thread_count() workers. Results must
// be written to per-index slots so the caller can reduce in index order.
template <class Fn>
void parallel_for(std::size_t n, Fn fn) {
  const std::size_t workers = std::min(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double stddev_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

// ---- configuration ------------------------------------------------------

void set_config_value(TrainConfig& c, const std::string& key, const std::string& v) {
  if (key == "epochs") c.epochs = parse_size(key, v);
  else if (key == "batch_size") c.batch_size = parse_size(key, v);
  else if (key == "learning_rate") c.learning_rate = parse_double(key, v);
  else if (key == "seed") c.seed = parse_size(key, v);
  else if (key == "alpha") c.alpha = parse_double(key, v);
  else if (key == "strategy") c.strategy = prompt::parse_strategy(v);
  else if (key == "context_length") c.context_length = parse_size(key, v);
  else if (key == "context_noise") c.context_noise = parse_double(key, v);
  else if (key == "beta") c.beta = parse_double(key, v);
  else if (key == "gamma") c.gamma = parse_double(key, v);
  else if (key == "lambda") c.lambda = parse_double(key, v);
  else if (key == "tau") c.tau = parse_double(key, v);
  else if (key == "patches") c.patches = parse_size(key, v);
  else if (key == "patch_points") c.patch_points = parse_size(key, v);
  else if (key == "points") c.points = parse_size(key, v);
  else if (key == "graph_k") c.graph_k = parse_size(key, v);
  else if (key == "refine_m") c.refine_m = parse_size(key, v);
  else if (key == "offset_dim") c.offset_dim = parse_size(key, v);
  else if (key == "prompt_encoder") c.prompt_encoder = prompt::parse_encoder_arch(v);
  else if (key == "offset_generator") c.offset_generator = prompt::parse_offset_arch(v);
  else if (key == "point_prompter") c.point_prompter = parse_bool(key, v);
  else if (key == "text_prompter") c.text_prompter = parse_bool(key, v);
  else if (key == "pretrain_epochs") c.pretrain_epochs = parse_size(key, v);
  else if (key == "pretrain_learning_rate") c.pretrain_learning_rate = parse_double(key, v);
  else if (key == "train_data") c.train_data = v;
  else if (key == "test_data") c.test_data = v;
  else if (key == "model") c.model = v;
  else if (key == "checkpoint") c.checkpoint = v;
  else throw ConfigError("unknown config key '" + key + "'");
}

void validate(const TrainConfig& c) {
  require(c.batch_size >= 1, "batch_size must be at least 1");
  require(c.learning_rate > 0.0, "learning_rate must be positive");
  require(c.alpha > 0.0 && c.alpha <= 1.0, "alpha must lie in (0, 1], got " + fmt(c.alpha));
  require(c.context_length >= 1, "context_length must be at least 1");
  require(c.context_noise >= 0.0, "context_noise must be non-negative");
  require(c.beta >= 0.0, "beta must be non-negative");
  require(c.gamma >= 0.0, "gamma must be non-negative");
  require(c.lambda >= 0.0, "lambda must be non-negative");
  require(c.tau > 0.0, "tau must be positive");
  require(c.points >= data::kMinPoints, "points must be at least 32");
  require(c.patches >= 2 && c.patches <= c.points, "patches must lie in [2, points]");
  require(c.patch_points >= 1 && c.patch_points <= c.points, "patch_points must lie in [1, points]");
  require(c.graph_k >= 1 && c.graph_k < c.patches, "graph_k must lie in [1, patches)");
  require(c.refine_m >= 1 && c.refine_m <= c.patches, "refine_m must lie in [1, patches]");
  require(c.offset_dim >= 1, "offset_dim must be at least 1");
  require(c.pretrain_learning_rate > 0.0, "pretrain_learning_rate must be positive");
}

TrainConfig parse_config(const std::string& text, const std::string& source) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + "missing key");
    try {
      set_config_value(cfg, key, value);
    } catch (const geom::ArgumentError& e) {
      throw ConfigError(where + e.what());
    }
    if (key == "alpha") {
      try {
        prompt::target_count(cfg.alpha, std::max<std::size_t>(cfg.patches, 1));
      } catch (const geom::ArgumentError&) {
        throw ConfigError(where + "alpha must lie in (0, 1], got " + value);
      }
    }
  }
  try {
    validate(cfg);
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& path) {
  return parse_config(io::read_file(path), path.string());
}

std::string to_text(const TrainConfig& c) {
  std::ostringstream s;
  s << "epochs = " << c.epochs << '\n'
    << "batch_size = " << c.batch_size << '\n'
    << "learning_rate = " << fmt(c.learning_rate) << '\n'
    << "seed = " << c.seed << '\n'
    << "alpha = " << fmt(c.alpha) << '\n'
    << "strategy = " << prompt::to_string(c.strategy) << '\n'
    << "context_length = " << c.context_length << '\n'
    << "context_noise = " << fmt(c.context_noise) << '\n'
    << "beta = " << fmt(c.beta) << '\n'
    << "gamma = " << fmt(c.gamma) << '\n'
    << "lambda = " << fmt(c.lambda) << '\n'
    << "tau = " << fmt(c.tau) << '\n'
    << "patches = " << c.patches << '\n'
    << "patch_points = " << c.patch_points << '\n'
    << "points = " << c.points << '\n'
    << "graph_k = " << c.graph_k << '\n'
    << "refine_m = " << c.refine_m << '\n'
    << "offset_dim = " << c.offset_dim << '\n'
    << "prompt_encoder = " << prompt::to_string(c.prompt_encoder) << '\n'
    << "offset_generator = " << prompt::to_string(c.offset_generator) << '\n'
    << "point_prompter = " << (c.point_prompter ? "true" : "false") << '\n'
    << "text_prompter = " << (c.text_prompter ? "true" : "false") << '\n'
    << "pretrain_epochs = " << c.pretrain_epochs << '\n'
    << "pretrain_learning_rate = " << fmt(c.pretrain_learning_rate) << '\n'
    << "train_data = " << c.train_data << '\n'
    << "test_data = " << c.test_data << '\n'
    << "model = " << c.model << '\n'
    << "checkpoint = " << c.checkpoint << '\n';
  return s.str();
}

std::string config_reference() {
  return R"(Config file keys (flat `key = value`, `#` comments):
  epochs                  4            >= 0
  batch_size              16           >= 1
  learning_rate           0.001        > 0
  seed                    0            unsigned integer
  alpha                   0.5          (0, 1]  prompt ratio
  strategy                vulnerable   vulnerable | critical | random
  context_length          4            >= 1    M
  context_noise           0.0001       >= 0
  beta                    1            >= 0    prototype weight
  gamma                   0.1          >= 0    geometric weight
  lambda                  1            >= 0    consistency weight
  tau                     0.07         > 0     temperature (pretraining)
  patches                 16           [2, points]
  patch_points            16           [1, points]
  points                  256          >= 32
  graph_k                 4            [1, patches)
  refine_m                4            [1, patches]
  offset_dim              64           >= 1
  prompt_encoder          edgeconv3    edgeconv1 | edgeconv3 | transformer1
  offset_generator        edgeconv1    mlp1 | edgeconv1 | edgeconv3
  point_prompter          true         true | false
  text_prompter           true         true | false
  pretrain_epochs         25           >= 0
  pretrain_learning_rate  0.002        > 0
  train_data, test_data   manifest CSV paths (default <data>/train.csv, <data>/test.csv)
  model                   frozen model file (.p3tw)
  checkpoint              checkpoint path to resume from
)";
}

std::size_t thread_count() {
  const char* env = std::getenv("P3T_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  std::size_t n = 0;
  const std::string s(env);
  auto res = std::from_chars(s.data(), s.data() + s.size(), n);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || n == 0) {
    throw geom::ArgumentError("P3T_THREADS must be a positive integer, got '" + s + "'");
  }
  return n;
}

// ---- data preparation ---------------------------------------------------

Prepared Prepared::subset(std::span<const std::size_t> rows) const {
  Prepared out;
  out.categories = categories;
  for (auto r : rows) {
    out.features.push_back(features.at(r));
    out.soft.push_back(soft.at(r));
    out.labels.push_back(labels.at(r));
    out.keys.push_back(keys.at(r));
  }
  return out;
}

Prepared prepare(const enc::FrozenModel& model, std::span<const geom::PointCloud> clouds,
                 const std::vector<std::string>& categories, std::size_t n, std::size_t k) {
  for (const auto& c : categories) model.category_token(c);
  Prepared out;
  out.categories = categories;
  out.features.resize(clouds.size());
  out.soft.resize(clouds.size());
  out.labels.resize(clouds.size());
  out.keys.resize(clouds.size());
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    if (!clouds[i].label || *clouds[i].label < 0 || static_cast<std::size_t>(*clouds[i].label) >= categories.size()) {
      throw geom::ArgumentError("cloud " + std::to_string(i) + " has no valid label");
    }
    out.labels[i] = static_cast<std::size_t>(*clouds[i].label);
    out.keys[i] = content_key(clouds[i]);
  }
  parallel_for(clouds.size(), [&](std::size_t i) {
    ad::NoGradGuard guard;
    out.features[i] = prompt::extract_features(clouds[i], model, n, k);
    out.soft[i] = loss::soft_thresholds(out.features[i].patches, out.features[i].thresholds.global_centroid);
  });
  return out;
}

double zero_shot_accuracy(const enc::FrozenModel& model, const Prepared& data) {
  if (data.size() == 0) return 0.0;
  ad::NoGradGuard guard;
  text::HandcraftedCache w(model, data.categories);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Tensor logits = enc::similarity_logits(data.features[i].embedding, w.embeddings(), model.tau());
    if (argmax(logits.data()) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::string MetricsRecord::to_json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["ce"] = loss.ce;
  j["proto"] = loss.proto;
  j["reg"] = loss.reg;
  j["con"] = loss.con;
  j["total"] = loss.total;
  j["train_accuracy"] = train_accuracy;
  j["test_accuracy"] = test_accuracy;
  j["violation"] = violation;
  j["learnable_params"] = learnable_params;
  return j.dump();
}

// ---- trainer ------------------------------------------------------------

enc::ModelConfig model_config(const TrainConfig& cfg, std::vector<std::string> categories) {
  enc::ModelConfig m;
  m.tau = cfg.tau;
  m.categories = std::move(categories);
  return m;
}

enc::FrozenModel pretrain_model(const TrainConfig& cfg, std::span<const geom::PointCloud> clouds,
                                std::vector<std::string> categories, bool verbose) {
  enc::PretrainOptions o;
  o.epochs = cfg.pretrain_epochs;
  o.batch_size = cfg.batch_size;
  o.learning_rate = cfg.pretrain_learning_rate;
  o.patches = cfg.patches;
  o.patch_points = cfg.patch_points;
  o.seed = cfg.seed;
  o.verbose = verbose;
  return enc::pretrain_align(model_config(cfg, std::move(categories)), clouds, o);
}

prompt::PrompterConfig prompter_config(const TrainConfig& cfg, const enc::ModelConfig& model) {
  prompt::PrompterConfig p;
  p.feature_dim = model.width;
  p.offset_dim = cfg.offset_dim;
  p.offset_hidden = cfg.offset_dim;
  p.patch_points = cfg.patch_points;
  p.graph_k = cfg.graph_k;
  p.refine_m = cfg.refine_m;
  p.encoder = cfg.prompt_encoder;
  p.offset = cfg.offset_generator;
  p.transformer_heads = model.heads;
  return p;
}

namespace {

loss::PrototypeBank bank_for(const Prepared& train) {
  std::vector<Tensor> z;
  z.reserve(train.size());
  for (const auto& f : train.features) z.push_back(f.embedding);
  return loss::compute_prototypes(z, train.labels, train.categories);
}

}  // namespace

Trainer::Trainer(TrainConfig cfg, const enc::FrozenModel& model, Prepared train, Prepared test)
    : cfg_(std::move(cfg)),
      model_(&model),
      train_(std::move(train)),
      test_(std::move(test)),
      bank_(bank_for(train_)),
      handcrafted_(model, train_.categories),
      prompter_(prompter_config(cfg_, model.config()), derive_seed(cfg_.seed, kPrompterTag)),
      context_(model, cfg_.context_length, cfg_.context_noise, derive_seed(cfg_.seed, kContextTag)),
      adam_({cfg_.learning_rate, 0.9, 0.999, 1e-8}) {
  validate(cfg_);
  if (!model.frozen()) throw ad::ContractError("tuning requires a frozen model");
  if (cfg_.context_length + 3 > model.config().max_text_len) {
    throw ConfigError("context_length " + std::to_string(cfg_.context_length) + " exceeds the text encoder's " +
                      std::to_string(model.config().max_text_len - 3) + "-slot limit");
  }
  if (cfg_.point_prompter) {
    for (const auto& p : prompter_.store().params()) params_.push_back(p);
  }
  if (cfg_.text_prompter) {
    for (const auto& p : context_.store().params()) params_.push_back(p);
  }
}

std::vector<std::size_t> Trainer::targets_for(const prompt::FrozenFeatures& ff, std::uint64_t target_seed) const {
  Rng rng(target_seed);
  return prompt::select_targets(ff.scores, cfg_.alpha, cfg_.strategy, rng).indices;
}

Trainer::SampleOut Trainer::forward(const Prepared& data, std::size_t row, std::uint64_t target_seed) const {
  const auto& ff = data.features[row];
  if (!cfg_.point_prompter) return {ff.embedding, Tensor(), Tensor()};
  const auto targets = targets_for(ff, target_seed);
  auto r = prompt::prompted_forward(ff, *model_, prompter_, targets);
  SampleOut out;
  out.embedding = r.embedding;
  out.reg = loss::reg_loss(r.deformed_points, cfg_.patch_points, data.soft[row]);
  out.deformed = r.deformed_points;
  return out;
}

Tensor Trainer::text_embeddings(const std::vector<std::string>& categories) const {
  if (cfg_.text_prompter) return text::prompted_embeddings(*model_, categories, context_.matrix());
  if (categories == handcrafted_.categories()) return handcrafted_.embeddings();
  return text::HandcraftedCache(*model_, categories).embeddings();
}

loss::LossBreakdown Trainer::step(std::span<const std::size_t> rows) {
  const auto w = cfg_.weights();
  const bool learn = learnable_params() > 0;
  std::optional<ad::NoGradGuard> no_grad;
  if (!learn) no_grad.emplace();

  Tensor text = text_embeddings(train_.categories);
  loss::LossParts batch;
  if (cfg_.text_prompter) batch.con = loss::con_loss(handcrafted_.embeddings(), text);

  std::vector<Tensor> per_sample;
  loss::LossBreakdown sums;
  for (auto r : rows) {
    const std::size_t label = train_.labels[r];
    SampleOut so = forward(train_, r, derive_seed(cfg_.seed, kTrainTargetTag, epoch_, train_.keys[r]));
    loss::LossParts parts;
    parts.ce = loss::ce_from_logits(enc::similarity_logits(so.embedding, text, model_->tau()), label);
    parts.proto = loss::proto_loss(so.embedding, bank_, label);
    parts.reg = so.reg;
    per_sample.push_back(ad::reshape(loss::total_loss(parts, w), {1}));
    const auto b = loss::breakdown(parts, w);
    sums.ce += b.ce;
    sums.proto += b.proto;
    sums.reg += b.reg;
  }
  const double inv = 1.0 / static_cast<double>(rows.size());
  Tensor total = ad::scale(ad::sum(ad::concat_rows(per_sample)), inv);
  if (batch.con.defined() && w.lambda != 0.0) total = ad::add(total, ad::scale(batch.con, w.lambda));
  if (learn && total.requires_grad()) {
    total.backward();
    adam_.step(params_);
  }
  loss::LossBreakdown out;
  out.ce = sums.ce * inv;
  out.proto = sums.proto * inv;
  out.reg = sums.reg * inv;
  out.con = batch.con.defined() ? batch.con.item() : 0.0;
  out.total = out.ce + w.beta * out.proto + w.gamma * out.reg + w.lambda * out.con;
  return out;
}

MetricsRecord Trainer::run_epoch() {
  std::vector<std::size_t> order(train_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(cfg_.seed, kOrderTag, epoch_));
  rng.shuffle(order);
  loss::LossBreakdown acc;
  for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
    std::span<const std::size_t> rows(order.data() + start, end - start);
    loss::LossBreakdown b;
    try {
      b = step(rows);
    } catch (const ad::NumericError& e) {
      std::ostringstream msg;
      msg << e.what() << "\nnon-finite value in epoch " << epoch_ + 1 << ", batch rows:";
      for (auto r : rows) msg << ' ' << r << "(label " << train_.labels[r] << ")";
      throw ad::NumericError(msg.str());
    }
    const double wgt = static_cast<double>(rows.size());
    acc.ce += b.ce * wgt;
    acc.proto += b.proto * wgt;
    acc.reg += b.reg * wgt;
    acc.con += b.con * wgt;
  }
  ++epoch_;
  MetricsRecord rec = snapshot();
  const double n = static_cast<double>(std::max<std::size_t>(train_.size(), 1));
  const auto w = cfg_.weights();
  rec.loss.ce = acc.ce / n;
  rec.loss.proto = acc.proto / n;
  rec.loss.reg = acc.reg / n;
  rec.loss.con = acc.con / n;
  rec.loss.total = rec.loss.ce + w.beta * rec.loss.proto + w.gamma * rec.loss.reg + w.lambda * rec.loss.con;
  return rec;
}

MetricsRecord Trainer::snapshot() const {
  MetricsRecord rec;
  rec.epoch = epoch_;
  const EvalResult tr = evaluate(train_);
  rec.loss = tr.loss;
  rec.train_accuracy = tr.accuracy;
  rec.violation = tr.violation;
  rec.test_accuracy = test_.size() > 0 ? evaluate(test_).accuracy : 0.0;
  rec.learnable_params = learnable_params();
  return rec;
}

EvalResult Trainer::evaluate(const Prepared& data, bool keep_embeddings) const {
  EvalResult res;
  if (data.size() == 0) return res;
  ad::NoGradGuard guard;
  const Tensor text = text_embeddings(data.categories);
  const bool same_categories = data.categories == train_.categories;
  const auto w = cfg_.weights();

  struct Slot {
    std::size_t pred = 0;
    double ce = 0.0;
    double proto = 0.0;
    double reg = 0.0;
    double violation = 0.0;
    std::vector<double> z;
  };
  std::vector<Slot> slots(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    ad::NoGradGuard local;
    SampleOut so = forward(data, i, derive_seed(cfg_.seed, kEvalTargetTag, data.keys[i]));
    Tensor logits = enc::similarity_logits(so.embedding, text, model_->tau());
    Slot& s = slots[i];
    s.pred = argmax(logits.data());
    s.ce = loss::ce_from_logits(logits, data.labels[i]).item();
    if (same_categories) s.proto = loss::proto_loss(so.embedding, bank_, data.labels[i]).item();
    if (so.reg.defined()) {
      s.reg = so.reg.item();
      s.violation = loss::reg_violation(so.deformed.data(), cfg_.patch_points, data.features[i].thresholds);
    }
    if (keep_embeddings) s.z = row_of(so.embedding);
  });

  std::size_t correct = 0;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const Slot& s = slots[i];
    if (s.pred == data.labels[i]) ++correct;
    res.predictions.push_back(s.pred);
    res.loss.ce += s.ce;
    res.loss.proto += s.proto;
    res.loss.reg += s.reg;
    res.violation += s.violation;
    if (keep_embeddings) res.embeddings.push_back(s.z);
  }
  const double n = static_cast<double>(data.size());
  res.accuracy = static_cast<double>(correct) / n;
  res.loss.ce /= n;
  res.loss.proto /= n;
  res.loss.reg /= n;
  res.violation /= n;
  if (cfg_.text_prompter) {
    const Tensor w_hand = same_categories ? handcrafted_.embeddings()
                                          : text::HandcraftedCache(*model_, data.categories).embeddings();
    res.loss.con = loss::con_loss(w_hand, text).item();
  }
  res.loss.total = res.loss.ce + w.beta * res.loss.proto + w.gamma * res.loss.reg + w.lambda * res.loss.con;
  return res;
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  std::vector<io::Record> recs;
  auto add_params = [&](const nn::ParamStore& store, const std::string& prefix) {
    for (const auto& p : store.params()) {
      recs.push_back({prefix + p.name, p.tensor.shape(), row_of(p.tensor)});
    }
  };
  add_params(prompter_.store(), "prompter.");
  add_params(context_.store(), "context.");
  for (const auto& [name, m] : adam_.moments()) {
    recs.push_back({"adam.m." + name, {m.m.size()}, m.m});
    recs.push_back({"adam.v." + name, {m.v.size()}, m.v});
  }
  recs.push_back({"prototypes", bank_.prototypes.shape(), row_of(bank_.prototypes)});
  std::vector<double> counts(bank_.counts.begin(), bank_.counts.end());
  recs.push_back({"prototype_counts", {counts.size()}, counts});

  io::Writer w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.str(to_text(cfg_));
  std::string cats;
  for (const auto& c : train_.categories) cats += c + "\n";
  w.str(cats);
  w.u64(model_->weights_hash());
  w.u64(epoch_);
  w.u64(adam_.steps());
  io::write_records(w, recs);
  io::write_file_atomic(path, w.buffer());
}

TrainConfig checkpoint_config(const std::filesystem::path& path) {
  io::Reader r(io::read_file(path));
  if (r.bytes(4) != std::string_view(kCheckpointMagic, 4)) {
    throw io::FormatError(path.string() + ": not a P3TC checkpoint");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw io::FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  return parse_config(r.str(), path.string() + "#config");
}

std::unique_ptr<Trainer> Trainer::load_checkpoint(const std::filesystem::path& path, const enc::FrozenModel& model,
                                                  Prepared train, Prepared test) {
  io::Reader r(io::read_file(path));
  if (r.bytes(4) != std::string_view(kCheckpointMagic, 4)) {
    throw io::FormatError(path.string() + ": not a P3TC checkpoint");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw io::FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  TrainConfig cfg = parse_config(r.str(), path.string() + "#config");
  const std::string cats = r.str();
  const std::uint64_t frozen = r.u64();
  if (frozen != model.weights_hash()) {
    throw io::FormatError(path.string() + ": checkpoint was trained against a different frozen model (weights hash mismatch)");
  }
  const std::uint64_t epoch = r.u64();
  const std::uint64_t steps = r.u64();
  auto recs = io::read_records(r);
  std::vector<std::string> categories;
  std::istringstream cs(cats);
  for (std::string line; std::getline(cs, line);) categories.push_back(line);
  if (categories != train.categories) {
    throw io::FormatError(path.string() + ": checkpoint categories differ from the training data");
  }

  auto t = std::make_unique<Trainer>(cfg, model, std::move(train), std::move(test));
  std::map<std::string, const io::Record*> by_name;
  for (const auto& rec : recs) by_name[rec.name] = &rec;
  auto restore = [&](nn::ParamStore& store, const std::string& prefix) {
    for (auto& p : store.params()) {
      auto it = by_name.find(prefix + p.name);
      if (it == by_name.end()) throw io::FormatError(path.string() + ": missing " + prefix + p.name);
      if (it->second->shape != p.tensor.shape()) throw io::FormatError(path.string() + ": shape mismatch for " + p.name);
      std::copy(it->second->values.begin(), it->second->values.end(), p.tensor.mutable_data().begin());
    }
  };
  restore(t->prompter_.store(), "prompter.");
  restore(t->context_.store(), "context.");
  std::vector<std::pair<std::string, ad::Adam::Moments>> moments;
  for (const auto& rec : recs) {
    if (rec.name.rfind("adam.m.", 0) != 0) continue;
    const std::string name = rec.name.substr(7);
    auto v = by_name.find("adam.v." + name);
    if (v == by_name.end()) throw io::FormatError(path.string() + ": missing second moment for " + name);
    moments.push_back({name, {rec.values, v->second->values}});
  }
  t->adam_.restore(steps, std::move(moments));
  auto proto = by_name.find("prototypes");
  auto counts = by_name.find("prototype_counts");
  if (proto == by_name.end() || counts == by_name.end()) throw io::FormatError(path.string() + ": missing prototypes");
  t->bank_.prototypes = Tensor::from(proto->second->shape, proto->second->values);
  t->bank_.counts.assign(counts->second->values.begin(), counts->second->values.end());
  t->epoch_ = epoch;
  return t;
}

// ---- protocols ----------------------------------------------------------

TuneResult tune(Trainer& trainer, const enc::FrozenModel& model, const std::filesystem::path& out, bool verbose) {
  TuneResult res;
  res.zero_shot = zero_shot_accuracy(model, trainer.test_set());
  std::string metrics;
  std::string timing;
  const auto t0 = std::chrono::steady_clock::now();
  auto record = [&](MetricsRecord rec) {
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    metrics += rec.to_json() + "\n";
    timing += "{\"epoch\":" + std::to_string(rec.epoch) + ",\"wall_seconds\":" + fmt(rec.wall_seconds) + "}\n";
    if (verbose) {
      std::cerr << "epoch " << rec.epoch << " loss " << rec.loss.total << " train " << rec.train_accuracy << " test "
                << rec.test_accuracy << " (" << rec.wall_seconds << " s)\n";
    }
    res.metrics.push_back(rec);
  };
  if (trainer.epoch() == 0) record(trainer.snapshot());
  try {
    while (trainer.epoch() < trainer.config().epochs) record(trainer.run_epoch());
  } catch (const ad::NumericError& e) {
    if (!out.empty()) io::write_file_atomic(out / "nan_dump.txt", std::string(e.what()) + "\n");
    throw;
  }
  res.final_test = trainer.evaluate(trainer.test_set());
  if (!out.empty()) {
    io::write_file_atomic(out / "metrics.jsonl", metrics);
    io::write_file_atomic(out / "timing.jsonl", timing);
    io::write_file_atomic(out / "config.txt", to_text(trainer.config()));
    trainer.save_checkpoint(out / "checkpoint.p3tc");
  }
  return res;
}

std::vector<FewShotRow> few_shot_run(const TrainConfig& cfg, const enc::FrozenModel& model, const Prepared& train,
                                     const Prepared& test, std::span<const std::size_t> shots,
                                     std::span<const std::uint64_t> seeds) {
  std::vector<FewShotRow> rows;
  for (auto s : shots) {
    FewShotRow row;
    row.shots = s;
    for (auto seed : seeds) {
      data::Manifest m;
      for (std::size_t i = 0; i < train.size(); ++i) {
        m.entries.push_back({std::to_string(i), train.labels[i], train.categories[train.labels[i]]});
      }
      const data::Manifest sub = data::few_shot_sample(m, s, seed);
      std::vector<std::size_t> idx;
      for (const auto& e : sub.entries) idx.push_back(std::stoul(e.path));
      TrainConfig c = cfg;
      c.seed = seed;
      Trainer t(c, model, train.subset(idx), test);
      while (t.epoch() < c.epochs) t.run_epoch();
      row.accuracies.push_back(t.evaluate(test).accuracy);
    }
    row.mean = mean_of(row.accuracies);
    row.stddev = stddev_of(row.accuracies);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string few_shot_csv(std::span<const FewShotRow> rows) {
  std::string out = "shots,mean,stddev,runs\n";
  for (const auto& r : rows) {
    std::string runs;
    for (std::size_t i = 0; i < r.accuracies.size(); ++i) runs += (i ? ";" : "") + fmt(r.accuracies[i]);
    out += std::to_string(r.shots) + "," + fmt(r.mean) + "," + fmt(r.stddev) + "," + runs + "\n";
  }
  return out;
}

std::vector<CrossRow> cross_dataset_run(const TrainConfig& cfg, const enc::FrozenModel& model,
                                        const Prepared& source_train, const Prepared& source_test,
                                        std::span<const Prepared> targets, std::span<const double> lambdas,
                                        std::span<const std::uint64_t> seeds) {
  for (const auto& t : targets)
    for (const auto& c : t.categories) model.category_token(c);
  std::vector<CrossRow> rows;
  for (double lam : lambdas) {
    for (auto seed : seeds) {
      TrainConfig c = cfg;
      c.lambda = lam;
      c.seed = seed;
      Trainer t(c, model, source_train, source_test);
      while (t.epoch() < c.epochs) t.run_epoch();
      CrossRow row;
      row.lambda = lam;
      row.seed = seed;
      row.source = t.evaluate(source_test).accuracy;
      for (const auto& target : targets) row.targets.push_back(t.evaluate(target).accuracy);
      row.average = mean_of(row.targets);
      {
        ad::NoGradGuard ng;
        text::HandcraftedCache hand(model, source_train.categories);
        row.text_distance = loss::con_loss(hand.embeddings(), t.text_embeddings(source_train.categories)).item();
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::string cross_csv(std::span<const CrossRow> rows, std::span<const std::string> target_names) {
  std::string out = "lambda,seed,source";
  for (const auto& n : target_names) out += "," + n;
  out += ",avg,text_distance\n";
  for (const auto& r : rows) {
    out += fmt(r.lambda) + "," + std::to_string(r.seed) + "," + fmt(r.source);
    for (double a : r.targets) out += "," + fmt(a);
    out += "," + fmt(r.average) + "," + fmt(r.text_distance) + "\n";
  }
  return out;
}

std::vector<std::string> ablation_axes() { return {"strategy", "alpha", "prompters", "encoder", "offset", "loss"}; }

namespace {

struct AxisValue {
  std::string label;
  std::function<void(TrainConfig&)> apply;
};

std::vector<AxisValue> axis_values(const std::string& axis, const TrainConfig& base) {
  std::vector<AxisValue> v;
  if (axis == "strategy") {
    for (auto s : {prompt::Strategy::vulnerable, prompt::Strategy::critical, prompt::Strategy::random}) {
      v.push_back({prompt::to_string(s), [s](TrainConfig& c) { c.strategy = s; }});
    }
  } else if (axis == "alpha") {
    for (int i = 1; i <= 9; ++i) {
      const double a = i / 10.0;
      v.push_back({fmt(a), [a](TrainConfig& c) { c.alpha = a; }});
    }
  } else if (axis == "prompters") {
    for (int p : {0, 1})
      for (int t : {0, 1}) {
        const std::string label = std::string(p ? "point" : "-") + "+" + (t ? "text" : "-");
        v.push_back({label, [p, t](TrainConfig& c) {
                       c.point_prompter = p != 0;
                       c.text_prompter = t != 0;
                     }});
      }
  } else if (axis == "encoder") {
    for (auto a : {prompt::EncoderArch::edgeconv1, prompt::EncoderArch::edgeconv3, prompt::EncoderArch::transformer1}) {
      v.push_back({prompt::to_string(a), [a](TrainConfig& c) { c.prompt_encoder = a; }});
    }
  } else if (axis == "offset") {
    for (auto a : {prompt::OffsetArch::mlp1, prompt::OffsetArch::edgeconv1, prompt::OffsetArch::edgeconv3}) {
      v.push_back({prompt::to_string(a), [a](TrainConfig& c) { c.offset_generator = a; }});
    }
  } else if (axis == "loss") {
    const double b = base.beta, g = base.gamma, l = base.lambda;
    auto set = [](double bb, double gg, double ll) {
      return [=](TrainConfig& c) {
        c.beta = bb;
        c.gamma = gg;
        c.lambda = ll;
      };
    };
    v.push_back({"ce", set(0, 0, 0)});
    v.push_back({"ce+proto", set(b, 0, 0)});
    v.push_back({"ce+reg", set(0, g, 0)});
    v.push_back({"ce+con", set(0, 0, l)});
    v.push_back({"all", set(b, g, l)});
  } else {
    std::string known;
    for (const auto& a : ablation_axes()) known += (known.empty() ? "" : ", ") + a;
    throw geom::ArgumentError("unknown ablation axis '" + axis + "' (known: " + known + ")");
  }
  return v;
}

}  // namespace

std::string AblationTable::csv() const {
  std::string out;
  for (std::size_t i = 0; i < header.size(); ++i) out += (i ? "," : "") + header[i];
  out += "\n";
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) out += (i ? "," : "") + r[i];
    out += "\n";
  }
  return out;
}

AblationTable ablate(const TrainConfig& cfg, const enc::FrozenModel& model, const Prepared& train,
                     const Prepared& test, std::span<const std::string> axes) {
  if (axes.empty()) throw geom::ArgumentError("ablate: no axes given");
  std::vector<std::vector<AxisValue>> values;
  for (const auto& a : axes) values.push_back(axis_values(a, cfg));
  AblationTable table;
  table.header.assign(axes.begin(), axes.end());
  table.header.push_back("accuracy");
  table.header.push_back("#LP");
  std::vector<std::size_t> idx(axes.size(), 0);
  for (;;) {
    TrainConfig c = cfg;
    std::vector<std::string> row;
    for (std::size_t a = 0; a < axes.size(); ++a) {
      values[a][idx[a]].apply(c);
      row.push_back(values[a][idx[a]].label);
    }
    Trainer t(c, model, train, test);
    while (t.epoch() < c.epochs) t.run_epoch();
    row.push_back(fmt(t.evaluate(test).accuracy));
    row.push_back(std::to_string(t.learnable_params()));
    table.rows.push_back(std::move(row));
    std::size_t a = axes.size();
    while (a > 0) {
      --a;
      if (++idx[a] < values[a].size()) break;
      idx[a] = 0;
      if (a == 0) return table;
    }
  }
}

void export_embeddings(const Trainer& trainer, const Prepared& data, const std::filesystem::path& path,
                       bool with_unprompted) {
  const EvalResult r = trainer.evaluate(data, true);
  const std::size_t d = r.embeddings.empty() ? 0 : r.embeddings[0].size();
  std::string out = "label";
  for (std::size_t j = 0; j < d; ++j) out += ",dim_" + std::to_string(j);
  out += "\n";
  auto emit = [&](std::size_t label, std::span<const double> z) {
    out += std::to_string(label);
    for (double x : z) out += "," + fmt(x);
    out += "\n";
  };
  for (std::size_t i = 0; i < data.size(); ++i) emit(data.labels[i], r.embeddings[i]);
  if (with_unprompted) {
    for (std::size_t i = 0; i < data.size(); ++i) emit(data.labels[i], data.features[i].embedding.data());
  }
  io::write_file_atomic(path, out);
}

double intra_class_scatter(const EvalResult& r, std::span<const std::size_t> labels, std::size_t num_categories) {
  if (r.embeddings.empty()) return 0.0;
  const std::size_t d = r.embeddings[0].size();
  std::vector<std::vector<double>> means(num_categories, std::vector<double>(d, 0.0));
  std::vector<std::size_t> counts(num_categories, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) means[labels[i]][j] += r.embeddings[i][j];
    ++counts[labels[i]];
  }
  auto cosine = [](std::span<const double> a, std::span<const double> b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t j = 0; j < a.size(); ++j) {
      ab += a[j] * b[j];
      aa += a[j] * a[j];
      bb += b[j] * b[j];
    }
    return ab / std::sqrt(aa * bb);
  };
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) total += 1.0 - cosine(r.embeddings[i], means[labels[i]]);
  return total / static_cast<double>(labels.size());
}

}  // namespace p3t::train
