#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "codis/data/types.hpp"
#include "codis/model/parameters.hpp"
#include "codis/numcore/ops.hpp"

namespace codis::model {

enum class SequenceKind : std::uint8_t { A = 0, B = 1, M = 2 };
inline constexpr std::array<SequenceKind, 3> kAllKinds{SequenceKind::A, SequenceKind::B, SequenceKind::M};
inline std::size_t index_of(SequenceKind k) { return static_cast<std::size_t>(k); }
const char* kind_name(SequenceKind k);

enum class RouterInput { PerPosition, PrefixMean };

struct ModelConfig {
  std::size_t num_items = 0;  // L, PAD included
  std::size_t max_len = 20;   // T
  std::size_t hidden = 32;    // h
  std::size_t heads = 2;
  std::size_t ffn_mult = 4;
  std::size_t experts = 5;         // N
  std::size_t shared_experts = 2;  // R
  std::size_t top_k = 2;           // K
  std::size_t latent = 16;         // d
  double dropout = 0.1;
  double init_std = 0.02;
  bool normalize_shared_sum = false;
  RouterInput router_input = RouterInput::PerPosition;

  // Structural switches used by the ablation variants.
  bool use_router = true;        // off: uniform weights over unmasked experts
  bool expert_isolation = true;  // off: every expert active for every sequence
  bool use_variational = true;   // off: reconstructions are zero tensors
  bool use_discriminator = true;
  bool identity_fusion = false;  // f(x) = x

  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Sequences packed for one forward pass: `size` users, each with the three
/// views on `steps` slots, rows ordered (user, slot).
struct Batch {
  std::size_t size = 0;
  std::size_t steps = 0;
  std::array<std::vector<data::ItemId>, 3> items;  // indexed by SequenceKind
  std::array<ops::Mask, 3> valid;
  std::vector<data::Slot> flags;

  static Batch from(std::span<const data::AlignedSequenceTriple* const> triples);
  static Batch from(const std::vector<data::AlignedSequenceTriple>& triples);
  std::size_t rows() const { return size * steps; }
};

struct RouterOutput {
  Tensor scores;   // {rows x N}
  ops::Mask mask;  // rows*N entries
  Tensor weights;  // {rows x N}, rows on the simplex
};

struct Latents {
  Tensor mu;
  Tensor log_var;
  Tensor z;
};

struct RepresentationBundle {
  std::array<Tensor, 3> embeddings;
  std::array<RouterOutput, 3> routing;
  // expert_outputs[kind][n]; undefined when the expert had zero weight everywhere.
  std::array<std::vector<Tensor>, 3> expert_outputs;
  Tensor h_sha;
  std::array<Tensor, 3> h_spec;
  Latents latent_a;
  Latents latent_b;
  Tensor recon_a;
  Tensor recon_b;
  Tensor f_sha;
  Tensor f_spec_a;
  Tensor f_spec_b;

  const Tensor& f_spec(data::Domain d) const { return d == data::Domain::A ? f_spec_a : f_spec_b; }
};

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;       // required when training or sampling latents
  bool zero_noise = true;   // reparameterization noise forced to 0
};

enum class DiscriminatorInput { Shared, SpecificA, SpecificB };

struct ExpertParams {
  Tensor ln1_gain, ln1_bias, qkv_w, qkv_b, out_w, out_b;
  Tensor ln2_gain, ln2_bias, ffn1_w, ffn1_b, ffn2_w, ffn2_b;
};

struct MlpParams {
  Tensor w1, b1, w2, b2;
};

// Building blocks, exposed individually for testing.

/// item_table[id] + pos_table[t], then dropout when training.
Tensor embed(std::span<const data::ItemId> ids, std::size_t steps, const Tensor& item_table,
             const Tensor& pos_table, double dropout, Rng* rng, bool training);

/// Single pre-norm causal self-attention block over `batch` sequences.
Tensor expert_forward(const Tensor& x, const ExpertParams& p, std::size_t batch, std::size_t steps,
                      std::size_t heads, const ops::Mask& valid);

Tensor router_scores(const Tensor& embeddings, const Tensor& contexts);

/// Shared experts 0..R-1 always on; for A/B the top-K specific experts per
/// row (ties to the lower index); for M (or without isolation) every expert.
RouterOutput route(const Tensor& scores, SequenceKind kind, std::size_t shared, std::size_t top_k,
                   bool isolation = true);

/// Weighted expert sums. outputs[kind][n] may be undefined for experts with
/// zero weight.
void aggregate(const std::array<std::vector<Tensor>, 3>& outputs,
               const std::array<RouterOutput, 3>& routing, std::size_t shared, bool normalize_shared,
               Tensor& h_sha, std::array<Tensor, 3>& h_spec);

Tensor mlp(const Tensor& x, const MlpParams& p);

struct VariationalOutput {
  Latents a;
  Latents b;
  Tensor recon_a;
  Tensor recon_b;
};

VariationalOutput variational_disentangle(const Tensor& h_spec_m, const MlpParams& enc_a,
                                          const MlpParams& enc_b, const MlpParams& decoder,
                                          std::size_t latent, Rng* rng, bool zero_noise);

/// CoDiS forward model. Owns its parameters.
class Codis {
 public:
  Codis(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

  RepresentationBundle forward(const Batch& batch, const ForwardOptions& options) const;

  /// Router posterior of one sequence kind only (no experts run).
  RouterOutput route_only(const Batch& batch, SequenceKind kind) const;

  Tensor fuse(const Tensor& x) const;
  /// Domain probability per row; the shared input passes the gradient
  /// reversal layer with coefficient grl_lambda.
  Tensor discriminate(const Tensor& f, DiscriminatorInput kind, double grl_lambda) const;

  const Tensor& item_table() const { return params_.get("item_table"); }
  ExpertParams expert(std::size_t n) const;

 private:
  Tensor routing_input(const Tensor& embeddings, const Batch& batch, SequenceKind kind) const;
  RouterOutput route_kind(const Tensor& embeddings, const Batch& batch, SequenceKind kind) const;
  MlpParams mlp_params(const std::string& prefix) const;

  ModelConfig config_;
  ParameterStore params_;
};

}  // namespace codis::model
