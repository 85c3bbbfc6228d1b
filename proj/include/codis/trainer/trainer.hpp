#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "codis/data/types.hpp"
#include "codis/eval/metrics.hpp"
#include "codis/model/checkpoint.hpp"
#include "codis/model/codis.hpp"
#include "codis/objectives/losses.hpp"

namespace codis::trainer {

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t max_epochs = 600;
  std::size_t warmup_epochs = 10;
  std::size_t patience = 60;
  double lr = 5e-4;
  double weight_decay = 0.0;
  double lr_decay_factor = 1.0;
  std::size_t decay_window = 30;
  std::size_t batch_size = 64;
  std::size_t seeds = 5;
  std::uint64_t seed = 1;
  double grl_ramp = 0.4;  // fraction of max_epochs for the 0 -> grl_max ramp
  double grl_max = 1.0;
  std::size_t pseudo_count = 16;  // V
  std::size_t negatives = 128;
  double clip_norm = 5.0;
  objectives::LossWeights weights;
  objectives::PriorMode prior_mode = objectives::PriorMode::Pooled;
  std::size_t threads = 1;  // concurrent seed runs
  eval::EvalOptions validation;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;
  std::size_t consecutive_skips = 0;

  void init(const model::ParameterStore& params);
};

/// Global L2 norm of all present gradients.
double grad_norm(const model::ParameterStore& params);
/// Scales gradients so the global norm is at most max_norm; returns the norm before clipping.
double clip_grad_norm(model::ParameterStore& params, double max_norm);

/// AdamW update. Tensors without any nonzero gradient keep their moments and
/// receive only the decoupled decay. Returns false (and changes nothing) when a
/// gradient is non-finite; throws DivergenceError after three skips in a row.
bool optimizer_step(model::ParameterStore& params, OptimizerState& state, double lr);

struct LrSchedule {
  double base = 5e-4;
  std::size_t warmup = 10;
  double decay_factor = 1.0;
  std::size_t window = 30;

  double factor = 1.0;
  std::size_t stale = 0;

  /// Learning rate for a 0-based epoch.
  double lr(std::size_t epoch) const;
  /// Records the validation outcome of an epoch; decays once every `window`
  /// consecutive epochs without improvement.
  void observe(bool improved);
};

/// Linear 0 -> peak over the first ramp * max_epochs epochs, then peak.
double grl_lambda(std::size_t epoch, std::size_t max_epochs, double ramp, double peak = 1.0);

struct EpochLog {
  std::size_t epoch = 0;
  objectives::LossReport loss;
  double lr = 0.0;
  double grl = 0.0;
  std::optional<double> val_mrr_a, val_mrr_b;
  double val_mrr = 0.0;
  bool improved = false;
  std::size_t skipped_steps = 0;
};

nlohmann::json to_json(const EpochLog& e);

struct TrainResult {
  std::unique_ptr<model::Codis> model;  // best-epoch parameters restored
  std::size_t best_epoch = 0;
  double best_val_mrr = 0.0;
  std::size_t epochs_run = 0;
  std::vector<EpochLog> log;
  OptimizerState optimizer;
  LrSchedule schedule;
  std::size_t since_improvement = 0;
};

/// Trains one run. `log_out`, when set, receives one JSON line per epoch.
TrainResult train(const model::ModelConfig& model_config, const TrainConfig& config, const data::Vocabulary& vocab,
                  const std::vector<data::SplitTriple>& splits, std::uint64_t seed, std::ostream* log_out = nullptr,
                  const model::Checkpoint* resume = nullptr);

/// Checkpoint of a trained run including optimizer moments.
model::Checkpoint make_training_checkpoint(const TrainResult& result, std::uint64_t seed, const TrainConfig& config);

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for one value
};

MetricSummary summarize(const std::vector<double>& values);

struct SeedRun {
  std::uint64_t seed = 0;
  eval::MetricsReport test;
  double best_val_mrr = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  std::vector<EpochLog> log;
  std::shared_ptr<model::Codis> model;
};

struct SeedAggregate {
  std::vector<SeedRun> runs;
  // summary[domain][metric name]
  std::map<std::string, std::map<std::string, MetricSummary>> summary;
};

/// "mean±std" with four decimals.
std::string format_summary(const MetricSummary& s);

/// Per-metric mean and sample std over per-seed reports.
std::map<std::string, std::map<std::string, MetricSummary>> aggregate_reports(
    const std::vector<eval::MetricsReport>& reports);

/// k independent train + test runs with seeds seed0 .. seed0 + k - 1, run on
/// up to config.threads threads.
SeedAggregate run_seeds(const model::ModelConfig& model_config, const TrainConfig& config,
                        const data::Vocabulary& vocab, const std::vector<data::SplitTriple>& splits,
                        const eval::EvalOptions& eval_options, std::size_t k,
                        const std::function<std::ostream*(std::uint64_t)>& log_for_seed = {});

}  // namespace codis::trainer
