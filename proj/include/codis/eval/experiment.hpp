#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "codis/data/pipeline.hpp"
#include "codis/data/synthetic.hpp"
#include "codis/eval/metrics.hpp"
#include "codis/trainer/trainer.hpp"

namespace codis::eval {

struct PreparedData {
  data::InteractionLog log;
  data::Vocabulary vocab;
  std::vector<data::UserId> users;
  std::vector<data::AlignedSequenceTriple> triples;
  std::vector<data::SplitTriple> splits;
};

/// preprocess -> vocabulary -> aligned triples -> leave-one-out split.
PreparedData prepare(const data::InteractionLog& raw, std::size_t max_len, const data::PreprocessOptions& options,
                     bool filter = true);

enum class AblationVariant { Full, NoAL, NoVD, NoALVD, NoCAR, NoEIS, Backbone };

AblationVariant variant_from_string(const std::string& s);
std::string to_string(AblationVariant v);
inline constexpr AblationVariant kAllVariants[] = {AblationVariant::Full,   AblationVariant::NoAL,
                                                   AblationVariant::NoVD,   AblationVariant::NoALVD,
                                                   AblationVariant::NoCAR,  AblationVariant::NoEIS,
                                                   AblationVariant::Backbone};

void apply_variant(AblationVariant v, model::ModelConfig& model, objectives::LossWeights& weights);

struct ExperimentConfig {
  std::string dataset;  // interaction file; empty selects the synthetic generator
  data::SyntheticSpec synthetic;
  data::PreprocessOptions preprocess;
  bool filter = true;
  model::ModelConfig model;
  trainer::TrainConfig train;
  AblationVariant variant = AblationVariant::Full;
  EvalOptions eval;
  double overlap_ratio = 0.0;
  std::string out_dir = "out";
};

ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);
/// FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const ExperimentConfig& c);

PreparedData load_data(const ExperimentConfig& c);

/// Hides one domain of the training inputs for floor(ratio * |U|) users;
/// targets are kept. Deterministic in `seed`.
std::vector<data::SplitTriple> mask_splits(const std::vector<data::SplitTriple>& splits,
                                           const data::Vocabulary& vocab, double ratio, std::uint64_t seed,
                                           std::size_t* masked = nullptr);

struct ExperimentResult {
  trainer::SeedAggregate seeds;
  MetricsReport popularity;
  nlohmann::json metrics;
};

/// Applies the variant, trains config.train.seeds runs, evaluates and (when
/// write_files) writes metrics.json, metrics.csv, per-seed logs and
/// checkpoints under config.out_dir.
ExperimentResult run_experiment(const ExperimentConfig& config, const PreparedData& data, bool write_files = true);
ExperimentResult run_experiment(const ExperimentConfig& config, bool write_files = true);

struct SweepRow {
  std::string key;    // sweep coordinate, e.g. "0.4"
  std::uint64_t seed = 0;
  MetricsReport report;
  std::size_t masked_users = 0;
};

/// One train + test per ratio; returns rows and writes sweep_overlap.csv.
std::vector<SweepRow> run_overlap_sweep(const ExperimentConfig& config, const std::vector<double>& ratios,
                                        bool write_files = true);

/// Noise-injected copies of the test inputs, k items each.
std::vector<data::SplitTriple> noisy_test_inputs(const std::vector<data::SplitTriple>& splits,
                                                 const data::Vocabulary& vocab, std::size_t k, std::uint64_t seed);

struct NoiseRow {
  std::size_t k = 0;  // 0 = clean
  MetricsReport report;
  // (clean - noisy) / clean per domain and metric; empty for k = 0.
  nlohmann::json degradation;
};

/// Trains once and evaluates the same model on clean and noisy test inputs;
/// writes sweep_noise.csv.
std::vector<NoiseRow> run_noise_sweep(const ExperimentConfig& config, const std::vector<std::size_t>& ks,
                                      bool write_files = true);

/// Varies the expert count N (R and K clipped to stay valid); writes sweep_experts.csv.
std::vector<SweepRow> run_expert_sweep(const ExperimentConfig& config, const std::vector<std::size_t>& counts,
                                       bool write_files = true);

/// Writes representations.csv (user, kind, vector) with the kinds F_sha,
/// F_spec_A, F_spec_B, E_M, E_A, E_B, and router.csv (user, sequence, t,
/// probabilities) for every real slot. Returns the number of representation rows.
std::size_t export_representations(const model::Codis& model, const std::vector<data::SplitTriple>& splits,
                                   const std::string& out_dir);

struct ProbeResult {
  double specific_accuracy = 0.0;  // F_spec_A vs F_spec_B
  double shared_accuracy = 0.0;    // F_sha at A queries vs B queries
  std::size_t train_size = 0;
  std::size_t test_size = 0;
};

/// Held-out accuracy of a logistic-regression probe.
double probe_accuracy(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                      std::uint64_t seed);

/// Domain probes on frozen representations at each domain's query slot.
ProbeResult domain_probe(const model::Codis& model, const std::vector<data::SplitTriple>& splits,
                         std::uint64_t seed);

}  // namespace codis::eval
