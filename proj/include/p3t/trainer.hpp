#pragma once

// Prompt tuning against a frozen dual encoder: configuration, the training
// loop, evaluation, checkpoints, and the experiment protocols built on them.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "p3t/encoders.hpp"
#include "p3t/losses.hpp"
#include "p3t/point_prompter.hpp"
#include "p3t/synthdata.hpp"
#include "p3t/text_prompter.hpp"

namespace p3t::train {

class ConfigError : public geom::ArgumentError {
 public:
  using geom::ArgumentError::ArgumentError;
};

struct TrainConfig {
  std::size_t epochs = 4;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;

  double alpha = 0.5;
  prompt::Strategy strategy = prompt::Strategy::vulnerable;
  std::size_t context_length = 4;  // M
  double context_noise = 1e-4;
  double beta = 1.0;
  double gamma = 0.1;
  double lambda = 1.0;
  double tau = 0.07;  // used when pretraining a model

  std::size_t patches = 16;       // n
  std::size_t patch_points = 16;  // k
  std::size_t points = 256;       // N
  std::size_t graph_k = 4;
  std::size_t refine_m = 4;
  std::size_t offset_dim = 64;    // d_o
  prompt::EncoderArch prompt_encoder = prompt::EncoderArch::edgeconv3;
  prompt::OffsetArch offset_generator = prompt::OffsetArch::edgeconv1;
  bool point_prompter = true;
  bool text_prompter = true;

  std::size_t pretrain_epochs = 25;
  double pretrain_learning_rate = 2e-3;

  std::string train_data;
  std::string test_data;
  std::string model;
  std::string checkpoint;

  loss::LossWeights weights() const { return {beta, gamma, lambda}; }
};

// Applies one `key = value` assignment; throws ConfigError on unknown keys
// or out-of-range values.
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);
// Validates cross-field ranges; throws ConfigError.
void validate(const TrainConfig& cfg);
TrainConfig parse_config(const std::string& text, const std::string& source = "<config>");
TrainConfig load_config(const std::filesystem::path& path);
// Every key with its resolved value; parse_config(to_text(c)) == c.
std::string to_text(const TrainConfig& cfg);
// Key, default and range for help output.
std::string config_reference();

// Worker count from P3T_THREADS (positive integer, default 1).
std::size_t thread_count();

// Frozen-encoder outputs for a set of clouds.
struct Prepared {
  std::vector<prompt::FrozenFeatures> features;
  std::vector<loss::SoftThresholds> soft;
  std::vector<std::size_t> labels;
  std::vector<std::uint64_t> keys;      // content hash, seeds per-sample randomness
  std::vector<std::string> categories;  // indexed by label

  std::size_t size() const { return labels.size(); }
  Prepared subset(std::span<const std::size_t> rows) const;
};

// Throws geom::ArgumentError if a category is missing from the model's
// text vocabulary.
Prepared prepare(const enc::FrozenModel& model, std::span<const geom::PointCloud> clouds,
                 const std::vector<std::string>& categories, std::size_t n, std::size_t k);

double zero_shot_accuracy(const enc::FrozenModel& model, const Prepared& data);

struct MetricsRecord {
  std::size_t epoch = 0;
  loss::LossBreakdown loss;   // means over the epoch's training samples
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  double violation = 0.0;     // exact threshold violation on the training set
  std::size_t learnable_params = 0;
  double wall_seconds = 0.0;

  std::string to_json() const;  // without wall time
};

struct EvalResult {
  double accuracy = 0.0;
  loss::LossBreakdown loss;
  double violation = 0.0;
  std::vector<std::size_t> predictions;
  std::vector<std::vector<double>> embeddings;  // prompted z̃ per sample when requested
};

class Trainer {
 public:
  // Prototypes are computed from `train` with the unprompted embeddings.
  Trainer(TrainConfig cfg, const enc::FrozenModel& model, Prepared train, Prepared test);
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const TrainConfig& config() const { return cfg_; }
  std::size_t epoch() const { return epoch_; }
  // Lets a resumed run train past the epoch count it was saved with.
  void set_epochs(std::size_t epochs) { cfg_.epochs = epochs; }
  std::size_t learnable_params() const { return ad::count_trainable(params_); }
  const loss::PrototypeBank& prototypes() const { return bank_; }
  const prompt::PointPrompter& prompter() const { return prompter_; }
  const text::ContextVectors& context() const { return context_; }
  const Prepared& train_set() const { return train_; }
  const Prepared& test_set() const { return test_; }
  std::span<ad::Parameter> parameters() { return params_; }

  // One optimisation step on the given training rows; returns the batch loss.
  loss::LossBreakdown step(std::span<const std::size_t> rows);
  // A full pass in the seed-determined order followed by evaluation.
  MetricsRecord run_epoch();
  // Metrics of the current parameters without training, labelled with the
  // current epoch.
  MetricsRecord snapshot() const;

  // Prompted classification; `categories` must all be in the model vocabulary.
  EvalResult evaluate(const Prepared& data, bool keep_embeddings = false) const;
  // (C × d_s) prompted text embeddings for the given categories.
  ad::Tensor text_embeddings(const std::vector<std::string>& categories) const;

  void save_checkpoint(const std::filesystem::path& path) const;
  // Refuses a checkpoint whose frozen-model hash differs from `model`.
  static std::unique_ptr<Trainer> load_checkpoint(const std::filesystem::path& path,
                                                  const enc::FrozenModel& model, Prepared train,
                                                  Prepared test);

 private:
  struct SampleOut {
    ad::Tensor embedding;
    ad::Tensor reg;
    ad::Tensor deformed;
  };
  SampleOut forward(const Prepared& data, std::size_t row, std::uint64_t target_seed) const;
  std::vector<std::size_t> targets_for(const prompt::FrozenFeatures& ff, std::uint64_t target_seed) const;

  TrainConfig cfg_;
  const enc::FrozenModel* model_;
  Prepared train_;
  Prepared test_;
  loss::PrototypeBank bank_;
  text::HandcraftedCache handcrafted_;
  prompt::PointPrompter prompter_;
  text::ContextVectors context_;
  std::vector<ad::Parameter> params_;
  ad::Adam adam_;
  std::size_t epoch_ = 0;
};

// The configuration stored in a checkpoint, without loading its tensors.
TrainConfig checkpoint_config(const std::filesystem::path& path);

prompt::PrompterConfig prompter_config(const TrainConfig& cfg, const enc::ModelConfig& model);

// Default-width dual encoder whose vocabulary holds `categories`.
enc::ModelConfig model_config(const TrainConfig& cfg, std::vector<std::string> categories);
// pretrain_epochs of contrastive alignment on `clouds`; the result is frozen.
enc::FrozenModel pretrain_model(const TrainConfig& cfg, std::span<const geom::PointCloud> clouds,
                                std::vector<std::string> categories, bool verbose = false);

// Trains for cfg.epochs, writing metrics.jsonl, timing.jsonl, config.txt and
// checkpoint.p3tc under `out` when it is non-empty.
struct TuneResult {
  std::vector<MetricsRecord> metrics;
  double zero_shot = 0.0;
  EvalResult final_test;
};
TuneResult tune(Trainer& trainer, const enc::FrozenModel& model, const std::filesystem::path& out,
                bool verbose = false);

struct FewShotRow {
  std::size_t shots = 0;
  std::vector<double> accuracies;  // one per seed
  double mean = 0.0;
  double stddev = 0.0;
};
std::vector<FewShotRow> few_shot_run(const TrainConfig& cfg, const enc::FrozenModel& model, const Prepared& train,
                                     const Prepared& test, std::span<const std::size_t> shots,
                                     std::span<const std::uint64_t> seeds);
std::string few_shot_csv(std::span<const FewShotRow> rows);

struct CrossRow {
  double lambda = 0.0;
  std::uint64_t seed = 0;
  double source = 0.0;
  std::vector<double> targets;
  double average = 0.0;
  double text_distance = 0.0;  // mean 1 − cos(w_c, w̃_c) after training
};
std::vector<CrossRow> cross_dataset_run(const TrainConfig& cfg, const enc::FrozenModel& model,
                                        const Prepared& source_train, const Prepared& source_test,
                                        std::span<const Prepared> targets, std::span<const double> lambdas,
                                        std::span<const std::uint64_t> seeds);
std::string cross_csv(std::span<const CrossRow> rows, std::span<const std::string> target_names);

// Known axes: strategy, alpha, prompters, encoder, offset, loss.
std::vector<std::string> ablation_axes();
struct AblationTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::string csv() const;
};
AblationTable ablate(const TrainConfig& cfg, const enc::FrozenModel& model, const Prepared& train,
                     const Prepared& test, std::span<const std::string> axes);

// label,dim_0..dim_{d_s-1}; prompted rows first, then unprompted rows when
// `with_unprompted` is set.
void export_embeddings(const Trainer& trainer, const Prepared& data, const std::filesystem::path& path,
                       bool with_unprompted);

// Mean over samples of 1 − cos(z̃, mean of its category's z̃).
double intra_class_scatter(const EvalResult& r, std::span<const std::size_t> labels, std::size_t num_categories);

}  // namespace p3t::train
