#pragma once

#include <array>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "codis/data/types.hpp"
#include "codis/model/codis.hpp"

namespace codis::eval {

/// 1 + number of candidates scoring at least as high as the target, the
/// target itself excluded (ties count against the target).
std::size_t rank_of(std::span<const double> scores, std::size_t target_index);

/// Inner-product ranking of `target` among `candidates` (rows of `table`).
std::size_t rank_items(std::span<const double> query, const Tensor& table, std::span<const data::ItemId> candidates,
                       data::ItemId target);

double hr_at_k(std::size_t rank, std::size_t k);
double ndcg_at_k(std::size_t rank, std::size_t k);
double mrr(std::size_t rank);

struct DomainMetrics {
  double hr5 = 0.0, hr10 = 0.0, ndcg5 = 0.0, ndcg10 = 0.0, mrr = 0.0;
  std::size_t users = 0;

  void add(std::size_t rank);
  // Turns running sums into averages.
  void finish();
};

struct MetricsReport {
  // Absent when no user has a target in that domain.
  std::array<std::optional<DomainMetrics>, 2> domains;

  const std::optional<DomainMetrics>& of(data::Domain d) const { return domains[static_cast<std::size_t>(d)]; }
  /// Mean MRR over the domains that are present; 0 when none is.
  double aggregate_mrr() const;
};

nlohmann::json to_json(const DomainMetrics& m);
nlohmann::json to_json(const MetricsReport& r);

enum class EvalMode { FullCatalog, Sampled };
enum class QueryPosition { LastDomainSlot, LastSlot };

EvalMode eval_mode_from_string(const std::string& s);
std::string to_string(EvalMode m);

struct EvalOptions {
  EvalMode mode = EvalMode::FullCatalog;
  std::size_t sampled_negatives = 100;
  bool filter_history = true;  // full-catalog mode only
  bool validation = false;     // rank validation targets from the training input
  QueryPosition query = QueryPosition::LastDomainSlot;
  std::uint64_t seed = 0;      // sampled-mode candidate draws
  std::size_t batch_size = 256;
};

/// Fills `scores` (size L, PAD included) for one user and domain.
using Scorer = std::function<void(std::size_t split_index, data::Domain domain, std::vector<double>& scores)>;

/// Ranks every available target under the leave-one-out protocol with an
/// arbitrary scorer.
MetricsReport evaluate_scorer(const std::vector<data::SplitTriple>& splits, const data::Vocabulary& vocab,
                              const EvalOptions& options, const Scorer& scorer);

/// Row of the packed batch used as the query for domain d of one sequence.
std::size_t query_row(const data::AlignedSequenceTriple& triple, data::Domain d, QueryPosition position);

/// Inference queries F_spec^X + F_sha for every split and both domains,
/// each row h wide: result[d][i].
std::array<std::vector<std::vector<double>>, 2> compute_queries(const model::Codis& model,
                                                                const std::vector<data::SplitTriple>& splits,
                                                                const EvalOptions& options);

MetricsReport evaluate(const model::Codis& model, const std::vector<data::SplitTriple>& splits,
                       const data::Vocabulary& vocab, const EvalOptions& options);

/// Item counts over the training inputs, used as scores.
std::vector<double> popularity_scores(const std::vector<data::SplitTriple>& splits, const data::Vocabulary& vocab);
MetricsReport evaluate_popularity(const std::vector<data::SplitTriple>& splits, const data::Vocabulary& vocab,
                                  const EvalOptions& options);

}  // namespace codis::eval
