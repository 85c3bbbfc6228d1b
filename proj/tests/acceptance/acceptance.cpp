// Acceptance runner: one PASS/FAIL/SKIP line per criterion. Exit status is
// nonzero when any criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "codis/data/perturb.hpp"
#include "codis/data/pipeline.hpp"
#include "codis/data/synthetic.hpp"
#include "codis/eval/experiment.hpp"
#include "codis/eval/metrics.hpp"
#include "codis/model/checkpoint.hpp"
#include "codis/numcore/gradcheck.hpp"
#include "codis/objectives/losses.hpp"
#include "codis/trainer/trainer.hpp"

using namespace codis;
using data::Domain;
using data::ItemId;

namespace {

enum class Outcome { Pass, Fail, Skip };

struct Verdict {
  Outcome outcome = Outcome::Pass;
  std::string detail;
};

// Collects failed expectations; the first few are kept as detail.
class Checker {
 public:
  void expect(bool ok, const std::string& what) {
    ++checks_;
    if (ok) return;
    ++failures_;
    if (failures_ <= 3) messages_ += (messages_.empty() ? "" : "; ") + what;
  }
  Verdict verdict(const std::string& summary) const {
    std::ostringstream os;
    os << summary << (summary.empty() ? "" : ", ") << checks_ << " checks";
    if (failures_ > 0) os << ", " << failures_ << " failed: " << messages_;
    return {failures_ == 0 ? Outcome::Pass : Outcome::Fail, os.str()};
  }

 private:
  std::size_t checks_ = 0;
  std::size_t failures_ = 0;
  std::string messages_;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

data::Vocabulary vocab_of(std::size_t na, std::size_t nb) {
  std::vector<data::RawItemId> a, b;
  for (std::size_t i = 1; i <= na; ++i) a.push_back(static_cast<data::RawItemId>(i));
  for (std::size_t i = 1; i <= nb; ++i) b.push_back(static_cast<data::RawItemId>(1000 + i));
  return data::Vocabulary(a, b);
}

Tensor random_leaf(Shape shape, Rng& rng, double scale = 1.0) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), true);
}

std::vector<data::AlignedSequenceTriple> random_triples(const data::Vocabulary& vocab, std::size_t count,
                                                        std::size_t steps, Rng& rng) {
  std::vector<data::AlignedSequenceTriple> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<ItemId> items;
    const std::size_t len = 2 + rng.index(steps - 1);
    for (std::size_t t = 0; t < len; ++t) items.push_back(1 + rng.index(vocab.size() - 1));
    out.push_back(data::make_triple(items, vocab, steps));
  }
  return out;
}

// Max over coordinates of |a - n| / max(|a|, |n|, floor), both sides below the
// floor counting as agreement. With floor 1e-8 this is the checker's own measure.
double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric, double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    if (std::abs(analytic[i]) < floor && std::abs(numeric[i]) < floor) continue;
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

// ---------------------------------------------------------------------------

Verdict gradients() {
  Checker c;
  Rng rng(101);
  double worst = 0.0;
  auto check = [&](const std::string& name, const std::function<Tensor()>& f, std::vector<Tensor> leaves) {
    const double err = gradient_check_all(f, std::move(leaves)).max_rel_error;
    worst = std::max(worst, err);
    c.expect(err < 1e-4, name + " rel err " + fmt(err));
  };
  auto a = random_leaf({3, 4}, rng);
  auto b = random_leaf({3, 4}, rng);
  auto w = random_leaf({4, 2}, rng);
  auto bias = random_leaf({2}, rng);
  auto rw = random_leaf({3}, rng);
  auto sq = random_leaf({4, 4}, rng);
  auto pos = Tensor::from({3, 4}, {0.2, 0.3, 0.1, 0.4, 0.25, 0.25, 0.25, 0.25, 0.7, 0.1, 0.1, 0.1});
  const std::vector<std::size_t> ids{2, 0, 2, 1};

  check("add/sub/mul", [&] { return ops::sum(ops::mul(ops::add(a, b), ops::sub(a, b))); }, {a, b});
  check("scale", [&] { return ops::sum(ops::mul(ops::scale(a, -1.5), a)); }, {a});
  check("add_bias", [&] { return ops::sum(ops::swish(ops::add_bias(ops::matmul(a, w), bias))); }, {a, w, bias});
  check("scale_rows", [&] { return ops::sum(ops::mul(ops::scale_rows(a, rw), b)); }, {a, b, rw});
  check("matmul", [&] { return ops::sum(ops::sigmoid(ops::matmul(a, sq))); }, {a, sq});
  check("matmul_nt", [&] { return ops::sum(ops::relu(ops::matmul_nt(a, b))); }, {a, b});
  check("linear", [&] { return ops::sum(ops::sigmoid(ops::linear(a, w, bias))); }, {a, w, bias});
  check("exp/mean", [&] { return ops::mean(ops::exp(ops::scale(a, 0.3))); }, {a});
  check("log_clamped", [&] { return ops::sum(ops::log_clamped(ops::sigmoid(a))); }, {a});
  check("row_dot", [&] { return ops::sum(ops::exp(ops::scale(ops::row_dot(a, b), 0.3))); }, {a, b});
  check("mean_rows", [&] { return ops::sum(ops::mul(ops::mean_rows(a), ops::mean_rows(b))); }, {a, b});
  check("reshape", [&] { return ops::sum(ops::mul(ops::reshape(a, {4, 3}), ops::reshape(b, {4, 3}))); }, {a, b});
  check("concat_cols", [&] { return ops::sum(ops::swish(ops::concat_cols({a, ops::slice_cols(b, 1, 3)}))); },
        {a, b});
  check("concat_rows", [&] { return ops::sum(ops::sigmoid(ops::concat_rows({a, ops::slice_rows(b, 1, 2)}))); },
        {a, b});
  check("slice_rows", [&] { return ops::mean(ops::mul(ops::slice_rows(a, 1, 3), ops::slice_rows(b, 0, 2))); },
        {a, b});
  check("gather_rows", [&] { return ops::sum(ops::swish(ops::gather_rows(a, ids))); }, {a});
  check("softmax", [&] { return ops::sum(ops::mul(ops::softmax(a), b)); }, {a, b});
  check("log_softmax", [&] { return ops::sum(ops::mul(ops::log_softmax(a), b)); }, {a, b});
  check("masked_softmax", [&] { return ops::sum(ops::mul(ops::masked_softmax(a, {1, 0, 1, 1}), b)); }, {a, b});
  check("layer_norm",
        [&] {
          auto gain = ops::reshape(ops::slice_rows(b, 0, 1), {4});
          auto shift = ops::reshape(ops::slice_rows(b, 1, 2), {4});
          return ops::sum(ops::mul(ops::layer_norm(a, gain, shift), b));
        },
        {a, b});
  check("dropout",
        [&] {
          Rng draw(5);
          return ops::sum(ops::mul(ops::dropout(a, 0.3, draw, true), b));
        },
        {a, b});
  for (double lambda : {0.5, 1.0}) {
    // Reversal scales the true derivative by -lambda.
    const auto r = gradient_check_all([&] { return ops::sum(ops::mul(ops::grad_reverse(a, lambda), b)); }, {a});
    std::vector<double> expected(r.numeric.size());
    for (std::size_t i = 0; i < expected.size(); ++i) expected[i] = -lambda * r.numeric[i];
    const double err = relative_error(r.analytic, expected);
    worst = std::max(worst, err);
    c.expect(err < 1e-4, "grad_reverse rel err " + fmt(err));
  }
  check("kl_categorical", [&] { return ops::sum(ops::kl_categorical(pos, ops::softmax(a))); }, {a});
  check("kl_gaussian", [&] { return ops::sum(ops::kl_diag_gaussian_to_std(a, ops::scale(b, 0.3))); }, {a, b});
  check("reparameterize",
        [&] {
          Rng draw(6);
          auto z = ops::reparameterize(a, ops::scale(b, 0.3), draw);
          return ops::sum(ops::mul(z, z));
        },
        {a, b});
  check("bce",
        [&] {
          const std::vector<double> target{0.0, 0.5, 1.0};
          return ops::sum(ops::binary_cross_entropy(ops::sigmoid(ops::slice_cols(a, 0, 1)), target));
        },
        {a});
  auto ctx = random_leaf({2, 12}, rng);
  auto e = random_leaf({4, 3}, rng);
  check("router_scores", [&] { return ops::sum(ops::swish(ops::router_scores(e, ctx))); }, {e, ctx});
  {
    const std::size_t batch = 2, steps = 3, width = 4;
    auto q = random_leaf({batch * steps, width}, rng);
    auto k = random_leaf({batch * steps, width}, rng);
    auto v = random_leaf({batch * steps, width}, rng);
    auto weights = random_leaf({batch * steps, width}, rng);
    const ops::Mask valid{0, 1, 1, 1, 1, 1};
    check("causal_attention",
          [&] { return ops::sum(ops::mul(ops::causal_attention(q, k, v, batch, steps, 2, valid), weights)); },
          {q, k, v});
    check("causal_prefix_mean",
          [&] { return ops::sum(ops::mul(ops::causal_prefix_mean(q, batch, steps, valid), weights)); }, {q});
  }
  {
    auto queries = random_leaf({2, 3}, rng);
    auto table = random_leaf({5, 3}, rng);
    const std::vector<std::size_t> candidates{1, 2, 3, 4, 1, 2};
    check("info_nce_rows", [&] { return ops::sum(ops::info_nce_rows(queries, table, candidates, 3, 0.75)); },
          {queries, table});
  }

  // The full forward graph and all six objectives, every parameter at once.
  const auto vocab = vocab_of(6, 6);
  model::ModelConfig cfg;
  cfg.num_items = vocab.size();
  cfg.max_len = 8;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.ffn_mult = 2;
  cfg.experts = 3;
  cfg.shared_experts = 1;
  cfg.top_k = 1;
  cfg.latent = 4;
  cfg.dropout = 0.0;
  cfg.init_std = 0.3;
  model::Codis model(cfg, 7);
  Rng data_rng(8);
  const auto triples = random_triples(vocab, 3, 8, data_rng);
  const auto batch = model::Batch::from(triples);
  Rng prior_rng(9);
  const auto prior =
      objectives::estimate_context_prior(model, data::generate_pseudo_sequences(triples, vocab, 4, prior_rng));
  std::vector<Tensor> leaves;
  for (const auto& entry : model.parameters().entries()) leaves.push_back(entry.tensor);
  // On an O(1) loss, central differences with a 1e-5 step carry roundoff of
  // about 1e-16 / 1e-5 = 1e-11 absolute, so gradients much below 1e-7 cannot be
  // resolved to 1e-4 relative. The whole-model checks therefore floor the
  // denominator at 1e-6 instead of 1e-8. A larger step is no remedy because
  // top-K routing is discontinuous in the router parameters.
  const double floor = 1e-6;
  double full = 0.0;
  auto record = [&](const std::string& name, double err) {
    full = std::max(full, err);
    c.expect(err < 1e-4, name + " rel err " + fmt(err));
  };

  // Every forward output under a fixed random projection, latent noise included.
  {
    model::ForwardOptions fo;
    fo.zero_noise = false;
    auto project = [](const Tensor& t, std::uint64_t seed) {
      Rng r(seed);
      auto w = Tensor::zeros(t.shape());
      for (double& v : w.mutable_values()) v = r.normal();
      return ops::sum(ops::mul(t, w));
    };
    const auto g = gradient_check_all(
        [&] {
          Rng draw(11);
          fo.rng = &draw;
          const auto b = model.forward(batch, fo);
          std::vector<Tensor> parts{project(b.f_sha, 1),
                                    project(b.f_spec_a, 2),
                                    project(b.f_spec_b, 3),
                                    project(b.recon_a, 4),
                                    project(b.latent_b.log_var, 5),
                                    project(model.discriminate(b.f_spec_a, model::DiscriminatorInput::SpecificA, 1.0), 6),
                                    project(model.discriminate(b.f_spec_b, model::DiscriminatorInput::SpecificB, 1.0), 7)};
          for (std::size_t k = 0; k < 3; ++k) parts.push_back(project(b.routing[k].weights, 8 + k));
          Tensor total = parts[0];
          for (std::size_t k = 1; k < parts.size(); ++k) total = ops::add(total, parts[k]);
          return total;
        },
        leaves);
    record("forward graph", relative_error(g.analytic, g.numeric, floor));
  }

  // All objectives except the two domain losses. The forward value does not
  // depend on the reversal coefficient while the analytic gradient is affine
  // in it, g(lambda) = D_rest - lambda * D_shared, so 2 g(0) - g(1) is the
  // plain derivative that finite differences see.
  objectives::BatchLossOptions options;
  options.n_neg = 3;
  options.training = false;
  options.zero_noise = false;
  auto run = [&](double lambda) {
    options.grl_lambda = lambda;
    return gradient_check_all(
        [&] {
          Rng draw(10);
          auto terms = objectives::batch_loss(model, batch, vocab, &prior, options, draw).terms;
          terms.l_a = Tensor();
          terms.l_b = Tensor();
          return objectives::combine(terms, options.weights);
        },
        leaves);
  };
  const auto g0 = run(0.0);
  const auto g1 = run(1.0);
  std::vector<double> unreversed(g0.analytic.size());
  bool reversed_somewhere = false;
  for (std::size_t i = 0; i < unreversed.size(); ++i) {
    unreversed[i] = 2.0 * g0.analytic[i] - g1.analytic[i];
    reversed_somewhere |= g0.analytic[i] != g1.analytic[i];
  }
  c.expect(reversed_somewhere, "reversal coefficient had no effect");
  record("shared, context, variational and adversarial objectives", relative_error(unreversed, g0.numeric, floor));

  // Domain losses with F_sha frozen at its current value, which is exactly
  // what the stop-gradient in their query asserts.
  Tensor f_sha;
  {
    NoGradGuard guard;
    Rng draw(12);
    model::ForwardOptions fo{false, &draw, false};
    f_sha = model.forward(batch, fo).f_sha.detach();
  }
  for (Domain d : {Domain::A, Domain::B}) {
    Rng target_rng(13);
    const auto targets = objectives::specific_targets(batch, d, vocab, 3, target_rng);
    if (targets.empty()) continue;
    const auto g = gradient_check_all(
        [&] {
          Rng draw(12);
          model::ForwardOptions fo{false, &draw, false};
          const auto b = model.forward(batch, fo);
          return objectives::specific_loss(b.f_spec(d), f_sha, model.item_table(), targets, 0.75);
        },
        leaves);
    record(std::string("L_") + data::domain_name(d), relative_error(g.analytic, g.numeric, floor));
  }
  worst = std::max(worst, full);
  return c.verdict("worst rel err " + fmt(worst) + ", full graph " + fmt(full) + " over " +
                   std::to_string(model.parameters().num_values()) + " parameters");
}

Verdict routing() {
  Checker c;
  Rng rng(202);
  const auto vocab = vocab_of(10, 10);
  model::ModelConfig cfg;
  cfg.num_items = vocab.size();
  cfg.max_len = 10;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.ffn_mult = 2;
  cfg.latent = 4;
  cfg.dropout = 0.0;
  cfg.init_std = 0.3;
  std::unique_ptr<model::Codis> model;
  for (int trial = 0; trial < 500; ++trial) {
    if (trial % 50 == 0) model = std::make_unique<model::Codis>(cfg, 1000 + trial);
    const std::size_t n = cfg.experts, active_domain = cfg.shared_experts + cfg.top_k;
    const auto batch = model::Batch::from(random_triples(vocab, 1 + rng.index(3), cfg.max_len, rng));
    const auto bundle = model->forward(batch, {});
    for (auto kind : model::kAllKinds) {
      const auto& w = bundle.routing[model::index_of(kind)].weights;
      const auto& mask = bundle.routing[model::index_of(kind)].mask;
      for (std::size_t r = 0; r < batch.rows(); ++r) {
        std::size_t on = 0;
        double total = 0.0;
        for (std::size_t e = 0; e < n; ++e) {
          on += mask[r * n + e] != 0;
          total += w.at(r, e);
          if (mask[r * n + e] == 0) c.expect(w.at(r, e) == 0.0, "masked weight nonzero");
          if (e < cfg.shared_experts) c.expect(mask[r * n + e] != 0, "shared expert off");
        }
        c.expect(std::abs(total - 1.0) < 1e-12, "weights off simplex");
        if (kind == model::SequenceKind::M) {
          c.expect(on <= n && on >= active_domain, "mixed active count");
        } else {
          c.expect(on == active_domain, "domain active count " + std::to_string(on));
        }
      }
    }

    // Score gradients through the routed weights vanish on masked entries.
    const std::size_t rows = 1 + rng.index(6);
    auto scores = random_leaf({rows, n}, rng);
    auto upstream = random_leaf({rows, n}, rng).detach();
    const auto kind = static_cast<model::SequenceKind>(rng.index(2));
    const auto routed = model::route(scores, kind, cfg.shared_experts, cfg.top_k);
    backward(ops::sum(ops::mul(routed.weights, upstream)));
    const auto g = scores.grad_or_zeros();
    for (std::size_t i = 0; i < rows * n; ++i) {
      if (routed.mask[i] == 0) {
        c.expect(g[i] == 0.0, "score gradient on masked entry");
        c.expect(routed.weights[i] == 0.0, "masked weight nonzero");
      }
    }
  }
  return c.verdict("500 inputs, N=" + std::to_string(cfg.experts) + " R=" + std::to_string(cfg.shared_experts) +
                   " K=" + std::to_string(cfg.top_k));
}

Verdict grl_and_stop_gradient() {
  Checker c;
  Rng rng(303);
  for (double lambda : {0.0, 0.5, 1.0}) {
    auto x = random_leaf({4, 3}, rng);
    auto up = random_leaf({4, 3}, rng).detach();
    auto y = ops::grad_reverse(x, lambda);
    backward(ops::sum(ops::mul(y, up)));
    for (std::size_t i = 0; i < 12; ++i) {
      c.expect(y[i] == x[i], "grl forward not identity");
      c.expect(x.grad_or_zeros()[i] == -lambda * up[i], "grl backward at lambda " + fmt(lambda));
    }
  }

  // Shared experts reach the domain losses only through F_sha, which the
  // domain query sees behind a stop-gradient.
  const auto vocab = vocab_of(8, 8);
  model::ModelConfig cfg;
  cfg.num_items = vocab.size();
  cfg.max_len = 8;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.ffn_mult = 2;
  cfg.latent = 4;
  cfg.dropout = 0.0;
  cfg.init_std = 0.3;
  std::size_t nonzero_elsewhere = 0;
  for (int trial = 0; trial < 5; ++trial) {
    model::Codis model(cfg, 40 + trial);
    const auto batch = model::Batch::from(random_triples(vocab, 4, cfg.max_len, rng));
    Rng draw(50 + trial);
    model::ForwardOptions fo;
    fo.rng = &draw;
    fo.zero_noise = false;
    const auto bundle = model.forward(batch, fo);
    for (Domain d : {Domain::A, Domain::B}) {
      Rng target_rng(60 + trial);
      const auto targets = objectives::specific_targets(batch, d, vocab, 3, target_rng);
      if (targets.empty()) continue;
      model.parameters().zero_grad();
      backward(objectives::specific_loss(bundle.f_spec(d), bundle.f_sha, model.item_table(), targets, 0.75));
      for (const auto& entry : model.parameters().entries()) {
        bool shared_only = false;
        for (std::size_t r = 0; r < cfg.shared_experts; ++r) {
          shared_only |= entry.name.rfind("expert" + std::to_string(r) + ".", 0) == 0;
        }
        const auto g = entry.tensor.grad_or_zeros();
        const bool any = std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; });
        if (shared_only) {
          c.expect(!any, "shared-only parameter " + entry.name + " has gradient from L_domain");
        } else {
          nonzero_elsewhere += any;
        }
      }
    }
  }
  c.expect(nonzero_elsewhere > 0, "domain loss produced no gradient at all");
  return c.verdict("lambda in {0, 0.5, 1}, shared experts isolated from L_A and L_B");
}

Verdict loss_oracles() {
  Checker c;
  Rng rng(404);
  std::size_t cases = 0;
  auto near = [&](double got, double want, const std::string& what) {
    ++cases;
    c.expect(std::abs(got - want) <= 1e-8 * std::max(1.0, std::abs(want)), what + " " + fmt(got, 12) + " vs " +
                                                                                  fmt(want, 12));
  };
  auto vec = [](std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor::from({n}, std::move(v));
  };

  near(objectives::info_nce(vec({1, 0}), vec({1, 0}), {vec({1, 0})}, 0.75).item(), std::log(2.0), "nce ln2");
  near(objectives::info_nce(vec({1}), vec({1}), {}, 0.75).item(), 0.0, "nce empty");
  for (int i = 0; i < 25; ++i) {
    const std::size_t dim = 1 + rng.index(5), negs = 1 + rng.index(6);
    const double tau = 0.25 + rng.uniform();
    auto draw = [&] {
      std::vector<double> v(dim);
      for (double& x : v) x = rng.normal();
      return v;
    };
    const auto q = draw(), p = draw();
    std::vector<std::vector<double>> cands{p};
    std::vector<Tensor> neg;
    for (std::size_t k = 0; k < negs; ++k) {
      cands.push_back(draw());
      neg.push_back(vec(cands.back()));
    }
    std::vector<double> s;
    for (const auto& cv : cands) s.push_back(std::inner_product(q.begin(), q.end(), cv.begin(), 0.0) / tau);
    double denom = 0.0;
    for (double x : s) denom += std::exp(x);
    near(objectives::info_nce(vec(q), vec(p), neg, tau).item(), std::log(denom) - s[0], "nce random");
  }

  for (int i = 0; i < 20; ++i) {
    const std::size_t n = 2 + rng.index(5);
    std::vector<double> p(n), q(n);
    double sp = 0.0, sq = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      sp += p[k] = 0.05 + rng.uniform();
      sq += q[k] = 0.05 + rng.uniform();
    }
    double kl = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      p[k] /= sp;
      q[k] /= sq;
    }
    for (std::size_t k = 0; k < n; ++k) kl += p[k] * std::log(p[k] / q[k]);
    near(ops::kl_categorical(vec(p), vec(q)).item(), kl, "kl_categorical");
  }
  near(ops::kl_categorical(vec({0.5, 0.5}), vec({0.5, 0.5})).item(), 0.0, "kl_categorical self");

  for (int i = 0; i < 20; ++i) {
    const std::size_t n = 1 + rng.index(5);
    std::vector<double> mu(n), lv(n);
    double kl = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      mu[k] = rng.normal();
      lv[k] = rng.normal();
      kl += 0.5 * (std::exp(lv[k]) + mu[k] * mu[k] - 1.0 - lv[k]);
    }
    near(ops::kl_diag_gaussian_to_std(vec(mu), vec(lv)).item(), kl, "kl_gaussian");
  }
  near(ops::kl_diag_gaussian_to_std(vec({1.0}), vec({0.0})).item(), 0.5, "kl_gaussian unit mean");

  for (int i = 0; i < 20; ++i) {
    const double p = 0.01 + 0.98 * rng.uniform();
    const double y = (i % 3) * 0.5;
    const double want = -(y * std::log(p) + (1 - y) * std::log(1 - p));
    near(ops::binary_cross_entropy(Tensor::from({1, 1}, {p}), std::vector<double>{y}).item(), want, "bce");
    auto empty = Tensor::zeros({0, 1});
    const auto one = Tensor::from({1, 1}, {p});
    const double adv = y == 0.0   ? objectives::adversarial_loss(one, empty, empty).item()
                       : y == 1.0 ? objectives::adversarial_loss(empty, one, empty).item()
                                  : objectives::adversarial_loss(empty, empty, one).item();
    near(adv, want, "adversarial soft label");
  }
  near(ops::binary_cross_entropy(Tensor::from({1, 1}, {0.5}), std::vector<double>{0.5}).item(), std::log(2.0),
       "bce ln2");

  // Two-point slope of the weighted total in each lambda.
  for (int i = 0; i < 5; ++i) {
    objectives::LossReport r;
    for (double* v : {&r.l_sha, &r.l_a, &r.l_b, &r.l_c, &r.l_var, &r.l_adv}) *v = 3.0 * rng.uniform();
    const objectives::LossWeights base{rng.uniform(), rng.uniform(), rng.uniform(), 0.75};
    const double expected_base = r.l_sha + r.l_a + r.l_b + base.lambda1 * r.l_c + base.lambda2 * r.l_var +
                                 base.lambda3 * r.l_adv;
    near(objectives::total_loss(r, base).total, expected_base, "total");
    for (int which = 0; which < 3; ++which) {
      auto w0 = base, w1 = base;
      const double h = 0.5 + rng.uniform();
      double* l0 = which == 0 ? &w0.lambda1 : which == 1 ? &w0.lambda2 : &w0.lambda3;
      double* l1 = which == 0 ? &w1.lambda1 : which == 1 ? &w1.lambda2 : &w1.lambda3;
      *l1 = *l0 + h;
      const double slope = (objectives::total_loss(r, w1).total - objectives::total_loss(r, w0).total) / h;
      const double want = which == 0 ? r.l_c : which == 1 ? r.l_var : r.l_adv;
      near(slope, want, "lambda" + std::to_string(which + 1) + " slope");
    }
  }
  return c.verdict(std::to_string(cases) + " oracle cases");
}

std::size_t sort_rank(const std::vector<double>& scores, std::size_t target) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  // Pessimistic: the target sorts after every candidate with an equal score.
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (scores[x] != scores[y]) return scores[x] > scores[y];
    return x != target && y == target;
  });
  return static_cast<std::size_t>(std::find(order.begin(), order.end(), target) - order.begin()) + 1;
}

Verdict metric_oracles() {
  Checker c;
  Rng rng(505);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t size = 1 + rng.index(50);
    const std::size_t dim = 1 + rng.index(3);
    // Small integer embeddings keep inner products exact and ties frequent.
    auto table = Tensor::zeros({size + 1, dim});
    for (double& v : table.mutable_values()) v = static_cast<double>(rng.index(5)) - 2.0;
    std::vector<double> q(dim);
    for (double& v : q) v = static_cast<double>(rng.index(5)) - 2.0;
    std::vector<ItemId> candidates(size);
    std::iota(candidates.begin(), candidates.end(), ItemId{1});
    rng.shuffle(candidates);
    const std::size_t target_pos = rng.index(size);
    std::vector<double> scores;
    for (ItemId id : candidates) {
      double s = 0.0;
      for (std::size_t k = 0; k < dim; ++k) s += q[k] * table.at(id, k);
      scores.push_back(s);
    }
    const std::size_t want = sort_rank(scores, target_pos);
    const std::size_t got = eval::rank_of(scores, target_pos);
    c.expect(got == want, "rank_of");
    c.expect(eval::rank_items(q, table, candidates, candidates[target_pos]) == want, "rank_items");
    for (std::size_t k : {5u, 10u}) {
      c.expect(eval::hr_at_k(want, k) == (want <= k ? 1.0 : 0.0), "hr");
      c.expect(eval::ndcg_at_k(want, k) == (want <= k ? 1.0 / std::log2(static_cast<double>(want) + 1.0) : 0.0),
               "ndcg");
    }
    c.expect(eval::mrr(want) == 1.0 / static_cast<double>(want), "mrr");
  }
  return c.verdict("1000 catalogs of size <= 50");
}

Verdict pipeline_conservation() {
  Checker c;
  Rng rng(606);
  std::size_t logs = 0, empty = 0, users = 0;
  for (int trial = 0; trial < 200; ++trial) {
    data::SyntheticSpec spec;
    spec.n_users = 5 + rng.index(30);
    spec.n_items_a = 5 + rng.index(20);
    spec.n_items_b = 5 + rng.index(20);
    spec.n_contexts = 1 + rng.index(4);
    spec.min_len = 2 + rng.index(10);
    spec.max_len = spec.min_len + rng.index(60);
    spec.prob_domain_a = 0.2 + 0.6 * rng.uniform();
    spec.seed = 10'000 + static_cast<std::uint64_t>(trial);
    const auto raw = data::synthesize_causal(spec).log;
    const data::PreprocessOptions options{1 + rng.index(3), 50};
    data::InteractionLog log;
    try {
      log = data::preprocess(raw, options);
    } catch (const std::invalid_argument&) {
      ++empty;
      continue;
    }
    ++logs;
    data::Vocabulary vocab(log);
    std::vector<data::UserId> ids;
    for (const auto& [u, h] : log.histories) ids.push_back(u);
    const std::size_t max_len = 50;
    const auto triples = data::build_aligned_sequences(log, vocab, max_len);
    for (const auto& t : triples) c.expect(data::validate_triple(t).empty(), data::validate_triple(t));
    const auto splits = data::leave_one_out_split(triples, ids, vocab);
    c.expect(splits.size() == ids.size(), "split count");
    for (const auto& s : splits) {
      ++users;
      c.expect(data::validate_triple(s.train).empty(), "train triple: " + data::validate_triple(s.train));
      c.expect(data::validate_triple(s.test_input).empty(), "test input: " + data::validate_triple(s.test_input));
      std::multiset<ItemId> expected, got;
      for (const auto& x : log.histories.at(s.user)) expected.insert(vocab.dense(x.item));
      for (ItemId id : data::real_items(s.train)) got.insert(id);
      for (const auto* t : {&s.valid_a, &s.valid_b, &s.test_a, &s.test_b}) {
        if (*t) got.insert((*t)->item);
      }
      c.expect(got == expected, "interaction multiset changed for user " + std::to_string(s.user));
      for (const auto& x : log.histories.at(s.user)) {
        c.expect(vocab.domain_of(vocab.dense(x.item)) == (x.domain), "item domain");
      }
    }
  }
  return c.verdict(std::to_string(logs) + " logs, " + std::to_string(users) + " users, " + std::to_string(empty) +
                   " logs emptied by filtering");
}

// ---------------------------------------------------------------------------

eval::ExperimentConfig smoke_config() {
  eval::ExperimentConfig c;
  c.synthetic.n_users = 200;
  c.synthetic.n_items_a = 50;
  c.synthetic.n_items_b = 50;
  c.synthetic.n_contexts = 3;
  c.synthetic.max_len = 20;
  c.synthetic.seed = 7;
  c.model.max_len = 20;
  c.model.hidden = 32;
  c.model.experts = 5;
  c.model.shared_experts = 2;
  c.model.top_k = 2;
  c.model.latent = 16;
  c.model.init_std = 0.1;
  c.train.max_epochs = 50;
  c.train.warmup_epochs = 5;
  c.train.patience = 1000;
  c.train.lr = 1e-2;
  c.train.batch_size = 32;
  c.train.grl_max = 0.1;
  c.train.seeds = 3;
  c.train.seed = 1;
  c.out_dir = "";
  return c;
}

struct SmokeRuns {
  eval::PreparedData data;
  eval::ExperimentResult full;
  double seconds = 0.0;
};

SmokeRuns& smoke_runs() {
  static SmokeRuns runs = [] {
    SmokeRuns r;
    const auto cfg = smoke_config();
    r.data = eval::load_data(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    r.full = eval::run_experiment(cfg, r.data, false);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
  }();
  return runs;
}

Verdict learning_smoke() {
  Checker c;
  auto& runs = smoke_runs();
  std::ostringstream os;
  for (const auto& run : runs.full.seeds.runs) {
    const double first = run.log.front().loss.total, last = run.log.back().loss.total;
    const double drop = 1.0 - last / first;
    c.expect(drop >= 0.5, "seed " + std::to_string(run.seed) + " loss drop " + fmt(drop));
    os << "seed " << run.seed << ": loss -" << fmt(100 * drop, 3) << "%";
    for (Domain d : {Domain::A, Domain::B}) {
      const double hr = run.test.of(d)->hr5, pop = runs.full.popularity.of(d)->hr5;
      c.expect(hr > pop, "seed " + std::to_string(run.seed) + " HR@5 " + data::domain_name(d) + " " + fmt(hr) +
                             " <= popularity " + fmt(pop));
      os << " HR@5 " << data::domain_name(d) << " " << fmt(hr, 3) << "/" << fmt(pop, 3);
    }
    os << "; ";
  }
  os << fmt(runs.seconds, 3) << " s for 3 seeds";
  return c.verdict(os.str());
}

Verdict disentanglement() {
  Checker c;
  auto& runs = smoke_runs();
  std::ostringstream os;
  for (const auto& run : runs.full.seeds.runs) {
    const auto probe = eval::domain_probe(*run.model, runs.data.splits, run.seed);
    c.expect(probe.specific_accuracy >= 0.9,
             "seed " + std::to_string(run.seed) + " specific probe " + fmt(probe.specific_accuracy));
    c.expect(probe.shared_accuracy <= 0.65,
             "seed " + std::to_string(run.seed) + " shared probe " + fmt(probe.shared_accuracy));
    os << "seed " << run.seed << ": spec " << fmt(probe.specific_accuracy, 3) << " sha "
       << fmt(probe.shared_accuracy, 3) << "; ";
  }
  return c.verdict(os.str() + "held-out users");
}

Verdict ablation_direction() {
  auto& runs = smoke_runs();
  auto cfg = smoke_config();
  cfg.variant = eval::AblationVariant::Backbone;
  const auto backbone = eval::run_experiment(cfg, runs.data, false);
  std::size_t wins = 0;
  std::ostringstream os;
  for (std::size_t i = 0; i < 3; ++i) {
    const double full = runs.full.seeds.runs[i].test.aggregate_mrr();
    const double back = backbone.seeds.runs[i].test.aggregate_mrr();
    wins += full >= back;
    os << "seed " << runs.full.seeds.runs[i].seed << ": full " << fmt(full) << " backbone " << fmt(back) << "; ";
  }
  os << wins << "/3 seeds full >= backbone";
  return {wins >= 2 ? Outcome::Pass : Outcome::Fail, os.str()};
}

// True when some suffix of `original` of length >= |noisy| - k is a
// subsequence of `noisy`.
bool keeps_original_order(const std::vector<ItemId>& original, const std::vector<ItemId>& noisy, std::size_t k) {
  for (std::size_t start = 0; start <= original.size(); ++start) {
    std::size_t j = 0;
    for (ItemId id : noisy) {
      if (start + j < original.size() && id == original[start + j]) ++j;
    }
    if (start + j == original.size()) return noisy.size() - j <= k;
  }
  return false;
}

Verdict robustness() {
  Checker c;
  data::SyntheticSpec spec;
  spec.n_users = 97;
  spec.seed = 3;
  const auto ds = data::synthesize_causal(spec);
  const auto prepared = eval::prepare(ds.log, 20, {1, 50});
  const std::size_t n_users = prepared.splits.size();
  for (double r : {0.0, 0.2, 0.4, 0.6, 0.8, 0.33}) {
    const auto want = static_cast<std::size_t>(std::floor(r * static_cast<double>(n_users)));
    std::size_t masked = 0, again = 0;
    const auto a = eval::mask_splits(prepared.splits, prepared.vocab, r, 11, &masked);
    const auto b = eval::mask_splits(prepared.splits, prepared.vocab, r, 11, &again);
    c.expect(masked == want, "split mask count at " + fmt(r));
    std::size_t changed = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      c.expect(a[i].train == b[i].train && a[i].test_input == b[i].test_input, "mask not deterministic");
      c.expect(a[i].test_a == prepared.splits[i].test_a && a[i].test_b == prepared.splits[i].test_b,
               "mask changed a target");
      changed += !(a[i].train == prepared.splits[i].train);
    }
    c.expect(changed == want, "users with altered inputs " + std::to_string(changed));

    Rng r1(12), r2(12);
    const auto chosen = data::choose_overlap_mask(prepared.users, r, r1);
    c.expect(chosen.size() == want, "log mask count");
    const auto masked_log = data::apply_mask(prepared.log, chosen);
    const auto masked_again = data::mask_overlap(prepared.log, r, r2);
    c.expect(masked_log.histories == masked_again.histories, "log mask not deterministic");
    for (const auto& m : chosen) {
      const auto& h = masked_log.histories.at(m.user);
      c.expect(std::none_of(h.begin(), h.end(), [&](const auto& x) { return x.domain == m.domain; }),
               "masked domain survived");
    }
  }

  for (std::size_t k : {1u, 2u, 3u}) {
    const auto noisy = eval::noisy_test_inputs(prepared.splits, prepared.vocab, k, 21);
    const auto again = eval::noisy_test_inputs(prepared.splits, prepared.vocab, k, 21);
    for (std::size_t i = 0; i < noisy.size(); ++i) {
      const auto& o = prepared.splits[i];
      const auto& n = noisy[i];
      c.expect(n.test_input == again[i].test_input, "noise not deterministic");
      c.expect(n.train == o.train, "noise touched training input");
      c.expect(n.valid_a == o.valid_a && n.valid_b == o.valid_b && n.test_a == o.test_a && n.test_b == o.test_b,
               "noise touched targets");
      c.expect(data::validate_triple(n.test_input).empty(), "noisy triple invalid");
      const auto before = data::real_items(o.test_input), after = data::real_items(n.test_input);
      c.expect(keeps_original_order(before, after, k), "original order not preserved");
      c.expect(after.size() == std::min(before.size() + k, o.test_input.length()), "noisy length");
    }
  }
  return c.verdict(std::to_string(n_users) + " users, ratios 0..0.8, k in {1, 2, 3}");
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Verdict determinism() {
  Checker c;
  auto cfg = smoke_config();
  cfg.train.max_epochs = 10;
  cfg.train.seeds = 1;
  const auto& data = smoke_runs().data;
  auto model_cfg = cfg.model;
  model_cfg.num_items = data.vocab.size();
  const auto dir = std::filesystem::temp_directory_path() / "codis_acceptance_determinism";
  std::filesystem::create_directories(dir);
  std::vector<std::string> logs, ckpts;
  for (int run = 0; run < 2; ++run) {
    std::ostringstream log;
    const auto result = trainer::train(model_cfg, cfg.train, data.vocab, data.splits, cfg.train.seed, &log);
    const auto path = dir / ("run" + std::to_string(run) + ".ckpt");
    auto ckp = trainer::make_training_checkpoint(result, cfg.train.seed, cfg.train);
    ckp.meta["experiment"] = eval::to_json(cfg);
    model::write_checkpoint(path.string(), ckp);
    logs.push_back(log.str());
    ckpts.push_back(file_bytes(path));
  }
  c.expect(!logs[0].empty() && logs[0] == logs[1], "logs differ");
  c.expect(!ckpts[0].empty() && ckpts[0] == ckpts[1], "checkpoint bytes differ");
  std::filesystem::remove_all(dir);
  return c.verdict(std::to_string(ckpts[0].size()) + " checkpoint bytes, " + std::to_string(logs[0].size()) +
                   " log bytes");
}

Verdict fk_counts() {
  const char* path = std::getenv("CODIS_FK_DATA");
  if (!path || !std::filesystem::exists(path)) {
    return {Outcome::Skip, "set CODIS_FK_DATA to the raw Food-Kitchen interaction file to run"};
  }
  Checker c;
  const auto raw = data::ingest_file(path);
  const auto log = data::preprocess(raw.log, {});
  std::size_t food_interactions = 0;
  std::set<data::RawItemId> food_items;
  for (const auto& [u, h] : log.histories) {
    for (const auto& x : h) {
      if (x.domain == Domain::A) {
        ++food_interactions;
        food_items.insert(x.item);
      }
    }
  }
  c.expect(log.histories.size() == 7144, "users " + std::to_string(log.histories.size()) + " vs 7144");
  c.expect(food_items.size() == 11837, "Food items " + std::to_string(food_items.size()) + " vs 11837");
  c.expect(food_interactions == 83663, "Food interactions " + std::to_string(food_interactions) + " vs 83663");
  return c.verdict("");
}

}  // namespace

// Optional arguments restrict the run to the listed criterion ids.
int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  struct Criterion {
    int id;
    const char* name;
    Verdict (*run)();
  };
  const Criterion criteria[] = {
      {1, "gradient correctness", gradients},
      {2, "routing contract", routing},
      {3, "GRL and stop-gradient contracts", grl_and_stop_gradient},
      {4, "loss oracles", loss_oracles},
      {5, "metric oracles", metric_oracles},
      {6, "pipeline conservation", pipeline_conservation},
      {7, "learning smoke test", learning_smoke},
      {8, "disentanglement probe", disentanglement},
      {9, "ablation direction", ablation_direction},
      {10, "robustness harness", robustness},
      {11, "determinism", determinism},
      {12, "FK preprocessing counts", fk_counts},
  };
  int failed = 0;
  for (const auto& criterion : criteria) {
    if (!only.empty() && !only.count(criterion.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criterion.run();
    } catch (const std::exception& e) {
      v = {Outcome::Fail, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const char* tag = v.outcome == Outcome::Pass ? "PASS" : v.outcome == Outcome::Fail ? "FAIL" : "SKIP";
    failed += v.outcome == Outcome::Fail;
    std::cout << "criterion " << criterion.id << " [" << criterion.name << "]: " << tag << " (" << v.detail << "; "
              << fmt(secs, 3) << " s)" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
