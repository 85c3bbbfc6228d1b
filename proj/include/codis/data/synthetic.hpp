#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <vector>

#include "codis/data/types.hpp"

namespace codis::data {

/// Parameters of the causal generator C -> (Z_sha, Z_A, Z_B) -> items.
struct SyntheticSpec {
  std::size_t n_users = 200;
  std::size_t n_items_a = 50;
  std::size_t n_items_b = 50;
  std::size_t n_contexts = 3;
  // Row-stochastic; empty means "sticky" (0.8 on the diagonal, rest uniform).
  std::vector<std::vector<double>> transition;
  std::size_t shared_dim = 4;
  std::size_t specific_dim_a = 4;
  std::size_t specific_dim_b = 4;
  std::size_t min_len = 10;
  std::size_t max_len = 20;
  double prob_domain_a = 0.5;
  // Scales every context effect (latent offsets and item affinities).
  double context_strength = 1.0;
  // Inverse temperature of the item softmax.
  double sharpness = 3.0;
  std::uint64_t seed = 0;

  void validate() const;
  std::vector<std::vector<double>> transition_matrix() const;
};

struct UserTruth {
  UserId user = 0;
  std::vector<std::size_t> contexts;  // one per step
  std::vector<Domain> domains;        // one per step
  std::vector<double> shared;         // base latent, shared_dim
  std::vector<double> specific_a;
  std::vector<double> specific_b;
};

struct GroundTruth {
  SyntheticSpec spec;
  std::vector<UserTruth> users;
  // Item factors indexed by raw item id - 1 (A items first, then B).
  std::vector<std::vector<double>> item_shared;
  std::vector<std::vector<double>> item_specific;
  std::vector<std::vector<double>> item_context;
  std::vector<std::vector<double>> context_shared;
  std::vector<std::vector<double>> context_specific_a;
  std::vector<std::vector<double>> context_specific_b;

  Domain domain_of(RawItemId item) const {
    return static_cast<std::size_t>(item) <= spec.n_items_a ? Domain::A : Domain::B;
  }
  /// Generator logit of `item` for user index `u` under context `c`.
  double utility(std::size_t u, RawItemId item, std::size_t c) const;
};

struct SyntheticDataset {
  InteractionLog log;
  GroundTruth truth;
};

/// Raw ids: A items are 1..n_items_a, B items follow.
SyntheticDataset synthesize_causal(const SyntheticSpec& spec);

nlohmann::json to_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GroundTruth& truth);

}  // namespace codis::data
