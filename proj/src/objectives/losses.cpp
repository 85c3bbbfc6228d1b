#include "codis/objectives/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "codis/data/pipeline.hpp"

namespace codis::objectives {

using data::Domain;
using data::ItemId;
using model::Batch;
using model::SequenceKind;

void LossWeights::validate() const {
  if (!(tau > 0.0)) throw std::invalid_argument("loss weights: tau must be positive");
  if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0) {
    throw std::invalid_argument("loss weights: lambdas must be nonnegative");
  }
}

nlohmann::json to_json(const LossWeights& w) {
  return {{"lambda1", w.lambda1}, {"lambda2", w.lambda2}, {"lambda3", w.lambda3}, {"tau", w.tau}};
}

LossWeights loss_weights_from_json(const nlohmann::json& j) {
  LossWeights w;
  w.lambda1 = j.value("lambda1", w.lambda1);
  w.lambda2 = j.value("lambda2", w.lambda2);
  w.lambda3 = j.value("lambda3", w.lambda3);
  w.tau = j.value("tau", w.tau);
  w.validate();
  return w;
}

LossReport& LossReport::operator+=(const LossReport& o) {
  l_sha += o.l_sha;
  l_a += o.l_a;
  l_b += o.l_b;
  l_c += o.l_c;
  l_var += o.l_var;
  l_adv += o.l_adv;
  total += o.total;
  return *this;
}

LossReport LossReport::scaled(double f) const {
  return {l_sha * f, l_a * f, l_b * f, l_c * f, l_var * f, l_adv * f, total * f};
}

nlohmann::json to_json(const LossReport& r) {
  return {{"l_sha", r.l_sha}, {"l_a", r.l_a},     {"l_b", r.l_b},        {"l_c", r.l_c},
          {"l_var", r.l_var}, {"l_adv", r.l_adv}, {"total", r.total}};
}

Tensor info_nce(const Tensor& query, const Tensor& positive, const std::vector<Tensor>& negatives, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("info_nce: temperature must be positive");
  const std::size_t h = query.size();
  std::vector<Tensor> rows{ops::reshape(positive, {1, h})};
  for (const auto& n : negatives) rows.push_back(ops::reshape(n, {1, h}));
  Tensor logits = ops::scale(ops::matmul_nt(ops::reshape(query, {1, h}), ops::concat_rows(rows)), 1.0 / tau);
  // -log_softmax(logits)[0]; log_softmax is max-shifted internally.
  return ops::scale(ops::sum(ops::slice_cols(ops::log_softmax(logits), 0, 1)), -1.0);
}

std::size_t negatives_per_row(const data::Vocabulary& vocab, std::size_t requested) {
  const std::size_t smallest = std::min(vocab.size(Domain::A), vocab.size(Domain::B));
  if (smallest < 1) throw std::invalid_argument("negatives: a domain catalog is empty");
  return std::min(requested, smallest - 1);
}

std::vector<double> sequence_mean_weights(const std::vector<std::size_t>& rows, std::size_t steps) {
  std::vector<double> w(rows.size(), 0.0);
  std::size_t sequences = 0;
  for (std::size_t i = 0; i < rows.size();) {
    std::size_t j = i;
    while (j < rows.size() && rows[j] / steps == rows[i] / steps) ++j;
    for (std::size_t k = i; k < j; ++k) w[k] = 1.0 / static_cast<double>(j - i);
    ++sequences;
    i = j;
  }
  for (double& v : w) v /= static_cast<double>(sequences);
  return w;
}

namespace {

struct Catalogs {
  std::vector<ItemId> a, b;
  explicit Catalogs(const data::Vocabulary& vocab) : a(vocab.catalog(Domain::A)), b(vocab.catalog(Domain::B)) {}
  const std::vector<ItemId>& of(Domain d) const { return d == Domain::A ? a : b; }
};

void append_candidates(PredictionTargets& out, ItemId positive, const std::vector<ItemId>& catalog,
                       std::size_t n_neg, Rng& rng) {
  out.candidates.push_back(positive);
  auto negs = data::sample_negatives(catalog, positive, n_neg, rng);
  out.candidates.insert(out.candidates.end(), negs.begin(), negs.end());
}

}  // namespace

PredictionTargets shared_targets(const Batch& batch, const data::Vocabulary& vocab, std::size_t n_neg, Rng& rng) {
  const Catalogs catalogs(vocab);
  const std::size_t negs = negatives_per_row(vocab, n_neg);
  PredictionTargets out;
  out.per_row = 1 + negs;
  const auto& items = batch.items[model::index_of(SequenceKind::M)];
  for (std::size_t b = 0; b < batch.size; ++b) {
    for (std::size_t t = 0; t + 1 < batch.steps; ++t) {
      const std::size_t r = b * batch.steps + t;
      if (items[r] == data::kPad || items[r + 1] == data::kPad) continue;
      out.rows.push_back(r);
      append_candidates(out, items[r + 1], catalogs.of(vocab.domain_of(items[r + 1])), negs, rng);
    }
  }
  out.weights = sequence_mean_weights(out.rows, batch.steps);
  return out;
}

PredictionTargets specific_targets(const Batch& batch, Domain domain, const data::Vocabulary& vocab,
                                   std::size_t n_neg, Rng& rng) {
  const Catalogs catalogs(vocab);
  const std::size_t negs = negatives_per_row(vocab, n_neg);
  PredictionTargets out;
  out.per_row = 1 + negs;
  const auto& items = batch.items[model::index_of(domain == Domain::A ? SequenceKind::A : SequenceKind::B)];
  std::vector<ItemId> next(batch.steps);
  for (std::size_t b = 0; b < batch.size; ++b) {
    ItemId upcoming = data::kPad;
    for (std::size_t t = batch.steps; t-- > 0;) {
      next[t] = upcoming;
      if (items[b * batch.steps + t] != data::kPad) upcoming = items[b * batch.steps + t];
    }
    for (std::size_t t = 0; t < batch.steps; ++t) {
      const std::size_t r = b * batch.steps + t;
      if (items[r] == data::kPad || next[t] == data::kPad) continue;
      out.rows.push_back(r);
      append_candidates(out, next[t], catalogs.of(domain), negs, rng);
    }
  }
  out.weights = sequence_mean_weights(out.rows, batch.steps);
  return out;
}

Tensor prediction_loss(const Tensor& queries, const Tensor& item_table, const PredictionTargets& targets,
                       double tau) {
  if (targets.empty()) return Tensor::scalar(0.0);
  Tensor losses = ops::info_nce_rows(ops::gather_rows(queries, targets.rows), item_table, targets.candidates,
                                     targets.per_row, tau);
  return ops::sum(ops::mul(losses, Tensor::from({targets.weights.size()}, targets.weights)));
}

Tensor shared_loss(const Tensor& f_sha, const Tensor& item_table, const PredictionTargets& targets, double tau) {
  return prediction_loss(f_sha, item_table, targets, tau);
}

Tensor specific_loss(const Tensor& f_spec, const Tensor& f_sha, const Tensor& item_table,
                     const PredictionTargets& targets, double tau) {
  return prediction_loss(ops::add(f_spec, ops::stop_gradient(f_sha)), item_table, targets, tau);
}

Tensor select_rows(const Tensor& t, const ops::Mask& mask) {
  if (mask.size() != t.rows()) throw DimensionError("select_rows: mask length differs from row count");
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < mask.size(); ++r) {
    if (mask[r]) rows.push_back(r);
  }
  if (rows.empty()) return Tensor();
  return ops::gather_rows(t, rows);
}

ContextPrior estimate_context_prior(const model::Codis& model, const data::PseudoSequenceSet& pseudo,
                                    PriorMode mode) {
  if (pseudo.sequences.empty()) throw std::invalid_argument("context prior: no pseudo sequences");
  NoGradGuard no_grad;
  const Batch batch = Batch::from(pseudo.sequences);
  const std::size_t n = model.config().experts, steps = batch.steps;
  ContextPrior out;
  out.mode = mode;
  for (SequenceKind kind : model::kAllKinds) {
    const std::size_t k = model::index_of(kind);
    const auto routing = model.route_only(batch, kind);
    const auto& w = routing.weights.values();
    const auto& valid = batch.valid[k];

    std::vector<double> pooled(n, 0.0);
    std::size_t contributing = 0;
    for (std::size_t b = 0; b < batch.size; ++b) {
      std::vector<double> acc(n, 0.0);
      std::size_t count = 0;
      for (std::size_t t = 0; t < steps; ++t) {
        const std::size_t r = b * steps + t;
        if (!valid[r]) continue;
        ++count;
        for (std::size_t c = 0; c < n; ++c) acc[c] += w[r * n + c];
      }
      if (count == 0) continue;
      ++contributing;
      for (std::size_t c = 0; c < n; ++c) pooled[c] += acc[c] / static_cast<double>(count);
    }
    if (contributing == 0) {
      // No pseudo sequence touches this kind: fall back to all rows.
      for (std::size_t r = 0; r < batch.rows(); ++r) {
        for (std::size_t c = 0; c < n; ++c) pooled[c] += w[r * n + c];
      }
      contributing = batch.rows();
    }
    for (double& v : pooled) v /= static_cast<double>(contributing);

    if (mode == PriorMode::Pooled) {
      out.prior[k] = Tensor::from({1, n}, pooled);
      continue;
    }
    std::vector<double> per(steps * n, 0.0);
    for (std::size_t t = 0; t < steps; ++t) {
      std::size_t count = 0;
      for (std::size_t b = 0; b < batch.size; ++b) {
        const std::size_t r = b * steps + t;
        if (!valid[r]) continue;
        ++count;
        for (std::size_t c = 0; c < n; ++c) per[t * n + c] += w[r * n + c];
      }
      for (std::size_t c = 0; c < n; ++c) {
        per[t * n + c] = count ? per[t * n + c] / static_cast<double>(count) : pooled[c];
      }
    }
    out.prior[k] = Tensor::from({steps, n}, per);
  }
  return out;
}

Tensor context_kl_loss(const std::array<model::RouterOutput, 3>& routing, const Batch& batch,
                       const ContextPrior& prior) {
  Tensor total = Tensor::scalar(0.0);
  for (SequenceKind kind : model::kAllKinds) {
    const std::size_t k = model::index_of(kind);
    std::vector<std::size_t> rows, steps_of;
    for (std::size_t r = 0; r < batch.rows(); ++r) {
      if (!batch.valid[k][r]) continue;
      rows.push_back(r);
      steps_of.push_back(r % batch.steps);
    }
    if (rows.empty()) continue;
    Tensor q = ops::gather_rows(routing[k].weights, rows);
    Tensor target = prior.mode == PriorMode::Pooled ? prior.prior[k] : ops::gather_rows(prior.prior[k], steps_of);
    total = ops::add(total, ops::mean(ops::kl_categorical(q, target)));
  }
  return total;
}

Tensor variational_kl_loss(const model::Latents& a, const model::Latents& b) {
  Tensor total = Tensor::scalar(0.0);
  for (const auto* lat : {&a, &b}) {
    if (!lat->mu.defined() || lat->mu.size() == 0) continue;
    total = ops::add(total, ops::mean(ops::kl_diag_gaussian_to_std(lat->mu, lat->log_var)));
  }
  return total;
}

Tensor adversarial_loss(const Tensor& p_spec_a, const Tensor& p_spec_b, const Tensor& p_sha) {
  Tensor total = Tensor::scalar(0.0);
  auto stream = [&](const Tensor& p, double label) {
    if (!p.defined() || p.size() == 0) return;
    std::vector<double> y(p.size(), label);
    total = ops::add(total, ops::mean(ops::binary_cross_entropy(p, y)));
  };
  stream(p_spec_a, 0.0);
  stream(p_spec_b, 1.0);
  stream(p_sha, 0.5);
  return total;
}

Tensor combine(const LossTerms& terms, const LossWeights& weights) {
  Tensor total = Tensor::scalar(0.0);
  auto term = [&](const Tensor& t, double w) {
    if (t.defined() && w != 0.0) total = ops::add(total, w == 1.0 ? t : ops::scale(t, w));
  };
  term(terms.l_sha, 1.0);
  term(terms.l_a, 1.0);
  term(terms.l_b, 1.0);
  term(terms.l_c, weights.lambda1);
  term(terms.l_var, weights.lambda2);
  term(terms.l_adv, weights.lambda3);
  return total;
}

LossReport total_loss(const LossReport& c, const LossWeights& w) {
  LossReport r = c;
  r.total = c.l_sha + c.l_a + c.l_b + w.lambda1 * c.l_c + w.lambda2 * c.l_var + w.lambda3 * c.l_adv;
  return r;
}

BatchLoss batch_loss(const model::Codis& model, const Batch& batch, const data::Vocabulary& vocab,
                     const ContextPrior* prior, const BatchLossOptions& options, Rng& rng) {
  const auto& cfg = model.config();
  const auto& w = options.weights;
  model::ForwardOptions fwd;
  fwd.training = options.training;
  fwd.rng = &rng;
  fwd.zero_noise = options.zero_noise;
  const auto bundle = model.forward(batch, fwd);
  const Tensor& table = model.item_table();

  BatchLoss out;
  auto& terms = out.terms;
  terms.l_sha = shared_loss(bundle.f_sha, table, shared_targets(batch, vocab, options.n_neg, rng), w.tau);
  terms.l_a = specific_loss(bundle.f_spec_a, bundle.f_sha, table,
                            specific_targets(batch, Domain::A, vocab, options.n_neg, rng), w.tau);
  terms.l_b = specific_loss(bundle.f_spec_b, bundle.f_sha, table,
                            specific_targets(batch, Domain::B, vocab, options.n_neg, rng), w.tau);

  if (prior && cfg.use_router && w.lambda1 > 0.0) {
    terms.l_c = context_kl_loss(bundle.routing, batch, *prior);
  }
  const auto& valid_m = batch.valid[model::index_of(SequenceKind::M)];
  if (cfg.use_variational && w.lambda2 > 0.0) {
    model::Latents a{select_rows(bundle.latent_a.mu, valid_m), select_rows(bundle.latent_a.log_var, valid_m), {}};
    model::Latents b{select_rows(bundle.latent_b.mu, valid_m), select_rows(bundle.latent_b.log_var, valid_m), {}};
    terms.l_var = variational_kl_loss(a, b);
  }
  if (cfg.use_discriminator && w.lambda3 > 0.0) {
    auto disc = [&](const Tensor& f, SequenceKind kind, model::DiscriminatorInput input) {
      Tensor rows = select_rows(f, batch.valid[model::index_of(kind)]);
      return rows.defined() ? model.discriminate(rows, input, options.grl_lambda) : Tensor();
    };
    terms.l_adv = adversarial_loss(disc(bundle.f_spec_a, SequenceKind::A, model::DiscriminatorInput::SpecificA),
                                   disc(bundle.f_spec_b, SequenceKind::B, model::DiscriminatorInput::SpecificB),
                                   disc(bundle.f_sha, SequenceKind::M, model::DiscriminatorInput::Shared));
  }
  out.total = combine(terms, w);

  auto value = [](const Tensor& t) { return t.defined() ? t.item() : 0.0; };
  out.report = total_loss({value(terms.l_sha), value(terms.l_a), value(terms.l_b), value(terms.l_c),
                           value(terms.l_var), value(terms.l_adv), 0.0},
                          w);
  return out;
}

}  // namespace codis::objectives
