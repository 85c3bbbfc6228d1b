#include "codis/model/codis.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace codis::model {

using data::ItemId;
using data::Slot;

const char* kind_name(SequenceKind k) {
  switch (k) {
    case SequenceKind::A: return "A";
    case SequenceKind::B: return "B";
    case SequenceKind::M: return "M";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (num_items < 2) throw std::invalid_argument("model: item space needs PAD plus at least one item");
  if (max_len == 0 || hidden == 0 || latent == 0) throw std::invalid_argument("model: dims must be positive");
  if (heads == 0 || hidden % heads != 0) throw std::invalid_argument("model: hidden must divide into heads");
  if (shared_experts < 1 || shared_experts >= experts) throw std::invalid_argument("model: need 1 <= R < N");
  if (top_k < 1 || top_k > experts - shared_experts) throw std::invalid_argument("model: need 1 <= K <= N - R");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("model: dropout must be in [0, 1)");
  if (use_discriminator && hidden < 2) throw std::invalid_argument("model: discriminator needs hidden >= 2");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"num_items", c.num_items},
          {"max_len", c.max_len},
          {"hidden", c.hidden},
          {"heads", c.heads},
          {"ffn_mult", c.ffn_mult},
          {"experts", c.experts},
          {"shared_experts", c.shared_experts},
          {"top_k", c.top_k},
          {"latent", c.latent},
          {"dropout", c.dropout},
          {"init_std", c.init_std},
          {"normalize_shared_sum", c.normalize_shared_sum},
          {"router_input", c.router_input == RouterInput::PerPosition ? "per_position" : "prefix_mean"},
          {"use_router", c.use_router},
          {"expert_isolation", c.expert_isolation},
          {"use_variational", c.use_variational},
          {"use_discriminator", c.use_discriminator},
          {"identity_fusion", c.identity_fusion}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.num_items = j.value("num_items", c.num_items);
  c.max_len = j.value("max_len", c.max_len);
  c.hidden = j.value("hidden", c.hidden);
  c.heads = j.value("heads", c.heads);
  c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
  c.experts = j.value("experts", c.experts);
  c.shared_experts = j.value("shared_experts", c.shared_experts);
  c.top_k = j.value("top_k", c.top_k);
  c.latent = j.value("latent", c.latent);
  c.dropout = j.value("dropout", c.dropout);
  c.init_std = j.value("init_std", c.init_std);
  c.normalize_shared_sum = j.value("normalize_shared_sum", c.normalize_shared_sum);
  const std::string input = j.value("router_input", std::string("per_position"));
  if (input == "per_position") {
    c.router_input = RouterInput::PerPosition;
  } else if (input == "prefix_mean") {
    c.router_input = RouterInput::PrefixMean;
  } else {
    throw std::invalid_argument("unknown router_input '" + input + "'");
  }
  c.use_router = j.value("use_router", c.use_router);
  c.expert_isolation = j.value("expert_isolation", c.expert_isolation);
  c.use_variational = j.value("use_variational", c.use_variational);
  c.use_discriminator = j.value("use_discriminator", c.use_discriminator);
  c.identity_fusion = j.value("identity_fusion", c.identity_fusion);
  return c;
}

Batch Batch::from(std::span<const data::AlignedSequenceTriple* const> triples) {
  Batch b;
  b.size = triples.size();
  b.steps = triples.empty() ? 0 : triples.front()->length();
  for (auto& v : b.items) v.reserve(b.rows());
  for (auto& v : b.valid) v.reserve(b.rows());
  b.flags.reserve(b.rows());
  for (const auto* t : triples) {
    if (t->length() != b.steps) throw std::invalid_argument("Batch: sequences differ in length");
    b.items[0].insert(b.items[0].end(), t->items_a.begin(), t->items_a.end());
    b.items[1].insert(b.items[1].end(), t->items_b.begin(), t->items_b.end());
    b.items[2].insert(b.items[2].end(), t->items_m.begin(), t->items_m.end());
    b.flags.insert(b.flags.end(), t->flags.begin(), t->flags.end());
  }
  for (std::size_t k = 0; k < 3; ++k) {
    for (ItemId id : b.items[k]) b.valid[k].push_back(id != data::kPad ? 1 : 0);
  }
  return b;
}

Batch Batch::from(const std::vector<data::AlignedSequenceTriple>& triples) {
  std::vector<const data::AlignedSequenceTriple*> ptrs;
  ptrs.reserve(triples.size());
  for (const auto& t : triples) ptrs.push_back(&t);
  return from(std::span<const data::AlignedSequenceTriple* const>(ptrs));
}

Tensor embed(std::span<const ItemId> ids, std::size_t steps, const Tensor& item_table,
             const Tensor& pos_table, double dropout, Rng* rng, bool training) {
  if (steps == 0 || ids.size() % steps != 0) throw DimensionError("embed: ids not a multiple of steps");
  if (steps > pos_table.rows()) throw DimensionError("embed: sequence longer than the position table");
  std::vector<std::size_t> positions(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = i % steps;
  Tensor e = ops::add(ops::gather_rows(item_table, ids), ops::gather_rows(pos_table, positions));
  if (training && dropout > 0.0) {
    if (!rng) throw std::invalid_argument("embed: dropout needs an rng");
    e = ops::dropout(e, dropout, *rng, true);
  }
  return e;
}

Tensor expert_forward(const Tensor& x, const ExpertParams& p, std::size_t batch, std::size_t steps,
                      std::size_t heads, const ops::Mask& valid) {
  const std::size_t h = x.cols();
  Tensor qkv = ops::linear(ops::layer_norm(x, p.ln1_gain, p.ln1_bias), p.qkv_w, p.qkv_b);
  Tensor attended = ops::causal_attention(ops::slice_cols(qkv, 0, h), ops::slice_cols(qkv, h, 2 * h),
                                          ops::slice_cols(qkv, 2 * h, 3 * h), batch, steps, heads, valid);
  Tensor x1 = ops::add(x, ops::linear(attended, p.out_w, p.out_b));
  Tensor inner = ops::relu(ops::linear(ops::layer_norm(x1, p.ln2_gain, p.ln2_bias), p.ffn1_w, p.ffn1_b));
  return ops::add(x1, ops::linear(inner, p.ffn2_w, p.ffn2_b));
}

Tensor router_scores(const Tensor& embeddings, const Tensor& contexts) {
  return ops::router_scores(embeddings, contexts);
}

RouterOutput route(const Tensor& scores, SequenceKind kind, std::size_t shared, std::size_t top_k,
                   bool isolation) {
  const std::size_t rows = scores.rows(), n = scores.cols();
  if (shared >= n || top_k < 1 || top_k > n - shared) {
    throw std::invalid_argument("route: need 1 <= K <= N - R");
  }
  RouterOutput out;
  out.scores = scores;
  out.mask.assign(rows * n, 1);
  if (kind != SequenceKind::M && isolation) {
    std::vector<std::size_t> order(n - shared);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* s = scores.values().data() + r * n;
      std::iota(order.begin(), order.end(), shared);
      std::stable_sort(order.begin(), order.end(), [s](std::size_t a, std::size_t b) { return s[a] > s[b]; });
      for (std::size_t i = top_k; i < order.size(); ++i) out.mask[r * n + order[i]] = 0;
    }
  }
  out.weights = ops::masked_softmax(scores, out.mask);
  return out;
}

void aggregate(const std::array<std::vector<Tensor>, 3>& outputs, const std::array<RouterOutput, 3>& routing,
               std::size_t shared, bool normalize_shared, Tensor& h_sha, std::array<Tensor, 3>& h_spec) {
  auto weighted = [&](std::size_t kind, std::size_t n) {
    return ops::scale_rows(outputs[kind][n], ops::slice_cols(routing[kind].weights, n, n + 1));
  };
  auto accumulate = [](Tensor& acc, const Tensor& term) { acc = acc.defined() ? ops::add(acc, term) : term; };
  h_sha = Tensor();
  for (std::size_t kind = 0; kind < 3; ++kind) {
    const std::size_t n_experts = outputs[kind].size();
    Tensor spec;
    for (std::size_t n = 0; n < n_experts; ++n) {
      if (!outputs[kind][n].defined()) continue;
      accumulate(n < shared ? h_sha : spec, weighted(kind, n));
    }
    if (!spec.defined()) {
      const Tensor& any = outputs[kind][0];
      spec = Tensor::zeros(any.shape());
    }
    h_spec[kind] = spec;
  }
  if (normalize_shared) h_sha = ops::scale(h_sha, 1.0 / 3.0);
}

Tensor mlp(const Tensor& x, const MlpParams& p) {
  return ops::linear(ops::relu(ops::linear(x, p.w1, p.b1)), p.w2, p.b2);
}

VariationalOutput variational_disentangle(const Tensor& h_spec_m, const MlpParams& enc_a, const MlpParams& enc_b,
                                          const MlpParams& decoder, std::size_t latent, Rng* rng,
                                          bool zero_noise) {
  if (!zero_noise && !rng) throw std::invalid_argument("variational_disentangle: sampling needs an rng");
  Rng unused(0);
  Rng& r = rng ? *rng : unused;
  VariationalOutput out;
  auto encode = [&](const MlpParams& enc, Latents& lat) {
    Tensor stats = mlp(h_spec_m, enc);
    lat.mu = ops::slice_cols(stats, 0, latent);
    lat.log_var = ops::slice_cols(stats, latent, 2 * latent);
    lat.z = ops::reparameterize(lat.mu, lat.log_var, r, zero_noise);
  };
  encode(enc_a, out.a);
  encode(enc_b, out.b);
  out.recon_a = mlp(out.a.z, decoder);
  out.recon_b = mlp(out.b.z, decoder);
  return out;
}

Codis::Codis(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t h = config_.hidden;
  const std::size_t inner = config_.ffn_mult * h;
  const double std = config_.init_std;
  params_.add_normal("item_table", "embedding", {config_.num_items, h}, std, rng);
  params_.add_normal("pos_table", "embedding", {config_.max_len, h}, std, rng);
  for (std::size_t n = 0; n < config_.experts; ++n) {
    const std::string p = "expert" + std::to_string(n) + ".";
    params_.add_constant(p + "ln1.gain", "experts", {h}, 1.0);
    params_.add_constant(p + "ln1.bias", "experts", {h}, 0.0);
    params_.add_normal(p + "qkv.w", "experts", {h, 3 * h}, std, rng);
    params_.add_constant(p + "qkv.b", "experts", {3 * h}, 0.0);
    params_.add_normal(p + "out.w", "experts", {h, h}, std, rng);
    params_.add_constant(p + "out.b", "experts", {h}, 0.0);
    params_.add_constant(p + "ln2.gain", "experts", {h}, 1.0);
    params_.add_constant(p + "ln2.bias", "experts", {h}, 0.0);
    params_.add_normal(p + "ffn1.w", "experts", {h, inner}, std, rng);
    params_.add_constant(p + "ffn1.b", "experts", {inner}, 0.0);
    params_.add_normal(p + "ffn2.w", "experts", {inner, h}, std, rng);
    params_.add_constant(p + "ffn2.b", "experts", {h}, 0.0);
  }
  if (config_.use_router) {
    params_.add_normal("contexts", "router", {config_.experts, h * (h + 1)}, std, rng);
  }
  auto add_mlp = [&](const std::string& prefix, const std::string& group, std::size_t in, std::size_t mid,
                     std::size_t out) {
    params_.add_normal(prefix + ".w1", group, {in, mid}, std, rng);
    params_.add_constant(prefix + ".b1", group, {mid}, 0.0);
    params_.add_normal(prefix + ".w2", group, {mid, out}, std, rng);
    params_.add_constant(prefix + ".b2", group, {out}, 0.0);
  };
  if (config_.use_variational) {
    add_mlp("vd.enc_a", "variational", h, h, 2 * config_.latent);
    add_mlp("vd.enc_b", "variational", h, h, 2 * config_.latent);
    add_mlp("vd.dec", "variational", config_.latent, h, h);
  }
  if (!config_.identity_fusion) add_mlp("fuse", "fusion", h, h, h);
  if (config_.use_discriminator) add_mlp("disc", "discriminator", h, h / 2, 1);
}

ExpertParams Codis::expert(std::size_t n) const {
  const std::string p = "expert" + std::to_string(n) + ".";
  return {params_.get(p + "ln1.gain"), params_.get(p + "ln1.bias"), params_.get(p + "qkv.w"),
          params_.get(p + "qkv.b"),    params_.get(p + "out.w"),    params_.get(p + "out.b"),
          params_.get(p + "ln2.gain"), params_.get(p + "ln2.bias"), params_.get(p + "ffn1.w"),
          params_.get(p + "ffn1.b"),   params_.get(p + "ffn2.w"),   params_.get(p + "ffn2.b")};
}

MlpParams Codis::mlp_params(const std::string& prefix) const {
  return {params_.get(prefix + ".w1"), params_.get(prefix + ".b1"), params_.get(prefix + ".w2"),
          params_.get(prefix + ".b2")};
}

Tensor Codis::routing_input(const Tensor& embeddings, const Batch& batch, SequenceKind kind) const {
  if (config_.router_input == RouterInput::PerPosition) return embeddings;
  return ops::causal_prefix_mean(embeddings, batch.size, batch.steps, batch.valid[index_of(kind)]);
}

RouterOutput Codis::route_kind(const Tensor& embeddings, const Batch& batch, SequenceKind kind) const {
  Tensor scores = config_.use_router
                      ? router_scores(routing_input(embeddings, batch, kind), params_.get("contexts"))
                      : Tensor::zeros({batch.rows(), config_.experts});
  return route(scores, kind, config_.shared_experts, config_.top_k, config_.expert_isolation);
}

RouterOutput Codis::route_only(const Batch& batch, SequenceKind kind) const {
  const auto k = index_of(kind);
  Tensor e = embed(batch.items[k], batch.steps, params_.get("item_table"), params_.get("pos_table"), 0.0,
                   nullptr, false);
  return route_kind(e, batch, kind);
}

RepresentationBundle Codis::forward(const Batch& batch, const ForwardOptions& options) const {
  if (batch.steps != config_.max_len) throw DimensionError("forward: batch length differs from max_len");
  if (options.training && config_.dropout > 0.0 && !options.rng) {
    throw std::invalid_argument("forward: training needs an rng");
  }
  RepresentationBundle out;
  const Tensor& items = params_.get("item_table");
  const Tensor& positions = params_.get("pos_table");
  for (SequenceKind kind : kAllKinds) {
    const auto k = index_of(kind);
    out.embeddings[k] = embed(batch.items[k], batch.steps, items, positions, config_.dropout, options.rng,
                              options.training);
    out.routing[k] = route_kind(out.embeddings[k], batch, kind);
    out.expert_outputs[k].assign(config_.experts, Tensor());
    const auto& mask = out.routing[k].mask;
    for (std::size_t n = 0; n < config_.experts; ++n) {
      bool active = false;
      for (std::size_t r = 0; r < batch.rows() && !active; ++r) active = mask[r * config_.experts + n] != 0;
      if (!active) continue;
      out.expert_outputs[k][n] = expert_forward(out.embeddings[k], expert(n), batch.size, batch.steps,
                                                config_.heads, batch.valid[k]);
    }
  }
  aggregate(out.expert_outputs, out.routing, config_.shared_experts, config_.normalize_shared_sum, out.h_sha,
            out.h_spec);
  const Tensor& h_spec_m = out.h_spec[index_of(SequenceKind::M)];
  if (config_.use_variational) {
    auto vd = variational_disentangle(h_spec_m, mlp_params("vd.enc_a"), mlp_params("vd.enc_b"),
                                      mlp_params("vd.dec"), config_.latent, options.rng, options.zero_noise);
    out.latent_a = vd.a;
    out.latent_b = vd.b;
    out.recon_a = vd.recon_a;
    out.recon_b = vd.recon_b;
  } else {
    out.recon_a = Tensor::zeros(h_spec_m.shape());
    out.recon_b = Tensor::zeros(h_spec_m.shape());
  }
  out.f_sha = fuse(out.h_sha);
  out.f_spec_a = fuse(ops::add(out.h_spec[index_of(SequenceKind::A)], out.recon_a));
  out.f_spec_b = fuse(ops::add(out.h_spec[index_of(SequenceKind::B)], out.recon_b));
  return out;
}

Tensor Codis::fuse(const Tensor& x) const {
  if (config_.identity_fusion) return x;
  return mlp(x, mlp_params("fuse"));
}

Tensor Codis::discriminate(const Tensor& f, DiscriminatorInput kind, double grl_lambda) const {
  if (!config_.use_discriminator) throw std::logic_error("discriminate: model built without a discriminator");
  Tensor input = kind == DiscriminatorInput::Shared ? ops::grad_reverse(f, grl_lambda) : f;
  return ops::sigmoid(mlp(input, mlp_params("disc")));
}

}  // namespace codis::model
