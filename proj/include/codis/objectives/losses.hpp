#pragma once

#include <array>
#include <vector>

#include <nlohmann/json.hpp>

#include "codis/data/types.hpp"
#include "codis/model/codis.hpp"

namespace codis::objectives {

struct LossWeights {
  double lambda1 = 0.3;  // context KL
  double lambda2 = 0.1;  // variational KL
  double lambda3 = 1.0;  // adversarial
  double tau = 0.75;

  void validate() const;
};

nlohmann::json to_json(const LossWeights& w);
LossWeights loss_weights_from_json(const nlohmann::json& j);

struct LossReport {
  double l_sha = 0.0;
  double l_a = 0.0;
  double l_b = 0.0;
  double l_c = 0.0;
  double l_var = 0.0;
  double l_adv = 0.0;
  double total = 0.0;

  LossReport& operator+=(const LossReport& o);
  LossReport scaled(double f) const;
};

nlohmann::json to_json(const LossReport& r);

/// -log softmax over {pos} U negs of the query scores, at temperature tau.
Tensor info_nce(const Tensor& query, const Tensor& positive, const std::vector<Tensor>& negatives, double tau);

/// Rows of a packed batch that predict a next item, with their candidate ids
/// (positive first, then same-domain negatives) and per-row weights that
/// average first within each sequence and then across sequences.
struct PredictionTargets {
  std::vector<std::size_t> rows;
  std::vector<data::ItemId> candidates;
  std::size_t per_row = 0;
  std::vector<double> weights;

  bool empty() const { return rows.empty(); }
};

/// Effective negative count so that every domain catalog can supply it.
std::size_t negatives_per_row(const data::Vocabulary& vocab, std::size_t requested);

/// Mixed-sequence targets: every real slot t whose next slot holds an item.
PredictionTargets shared_targets(const model::Batch& batch, const data::Vocabulary& vocab, std::size_t n_neg,
                                 Rng& rng);
/// Domain targets: X slots followed later by another X item; the positive is
/// the next X item.
PredictionTargets specific_targets(const model::Batch& batch, data::Domain domain, const data::Vocabulary& vocab,
                                   std::size_t n_neg, Rng& rng);

/// Weights 1/(count in sequence * sequences with a selected row) per selected row.
std::vector<double> sequence_mean_weights(const std::vector<std::size_t>& rows, std::size_t steps);

Tensor prediction_loss(const Tensor& queries, const Tensor& item_table, const PredictionTargets& targets,
                       double tau);
Tensor shared_loss(const Tensor& f_sha, const Tensor& item_table, const PredictionTargets& targets, double tau);
/// Query F_spec + stop_gradient(F_sha).
Tensor specific_loss(const Tensor& f_spec, const Tensor& f_sha, const Tensor& item_table,
                     const PredictionTargets& targets, double tau);

enum class PriorMode { Pooled, PerPosition };

/// Router prior per sequence kind, estimated from pseudo sequences without
/// gradient: {1 x N} when pooled, {T x N} per position.
struct ContextPrior {
  PriorMode mode = PriorMode::Pooled;
  std::array<Tensor, 3> prior;
};

ContextPrior estimate_context_prior(const model::Codis& model, const data::PseudoSequenceSet& pseudo,
                                    PriorMode mode = PriorMode::Pooled);

/// Sum over kinds of the sequence-mean over valid rows of KL(q_t || prior).
Tensor context_kl_loss(const std::array<model::RouterOutput, 3>& routing, const model::Batch& batch,
                       const ContextPrior& prior);

/// Sum over A and B of the mean over rows of KL(N(mu, exp(log_var)) || N(0, I)).
Tensor variational_kl_loss(const model::Latents& a, const model::Latents& b);

/// Soft-label BCE summed over the streams specific A (label 0), specific B
/// (label 1) and shared (label 0.5), each averaged over its rows. An empty
/// stream contributes zero.
Tensor adversarial_loss(const Tensor& p_spec_a, const Tensor& p_spec_b, const Tensor& p_sha);

/// Rows of t where mask != 0.
Tensor select_rows(const Tensor& t, const ops::Mask& mask);

struct LossTerms {
  Tensor l_sha, l_a, l_b, l_c, l_var, l_adv;
};

/// Weighted sum; undefined terms count as zero.
Tensor combine(const LossTerms& terms, const LossWeights& weights);
LossReport total_loss(const LossReport& components, const LossWeights& weights);

struct BatchLoss {
  Tensor total;
  LossTerms terms;
  LossReport report;
};

struct BatchLossOptions {
  LossWeights weights;
  double grl_lambda = 1.0;
  std::size_t n_neg = 128;
  bool training = true;
  bool zero_noise = false;
};

/// Forward pass plus all six objectives for one batch. `prior` may be null
/// when lambda1 is zero or the model has no router.
BatchLoss batch_loss(const model::Codis& model, const model::Batch& batch, const data::Vocabulary& vocab,
                     const ContextPrior* prior, const BatchLossOptions& options, Rng& rng);

}  // namespace codis::objectives
