#include "codis/data/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "codis/numcore/rng.hpp"

namespace codis::data {

namespace {

std::vector<double> normal_vector(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b, double scale_b = 1.0,
           const std::vector<double>* offset = nullptr) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s += a[i] * (b[i] + (offset ? scale_b * (*offset)[i] : 0.0));
  }
  return s;
}

std::size_t sample_categorical(Rng& rng, const std::vector<double>& probs) {
  double u = rng.uniform();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (u < probs[i]) return i;
    u -= probs[i];
  }
  return probs.size() - 1;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (n_users == 0 || n_items_a == 0 || n_items_b == 0 || n_contexts == 0) {
    throw std::invalid_argument("synthetic spec: counts must be positive");
  }
  if (shared_dim == 0 || specific_dim_a == 0 || specific_dim_b == 0) {
    throw std::invalid_argument("synthetic spec: latent dims must be positive");
  }
  if (min_len == 0 || min_len > max_len) throw std::invalid_argument("synthetic spec: bad length range");
  if (prob_domain_a < 0.0 || prob_domain_a > 1.0) throw std::invalid_argument("synthetic spec: bad domain probability");
  for (const auto& row : transition_matrix()) {
    double total = 0.0;
    for (double p : row) {
      if (p < 0.0) throw std::invalid_argument("synthetic spec: negative transition probability");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("synthetic spec: transition row off the simplex");
  }
}

std::vector<std::vector<double>> SyntheticSpec::transition_matrix() const {
  if (!transition.empty()) {
    if (transition.size() != n_contexts) throw std::invalid_argument("synthetic spec: transition has wrong size");
    for (const auto& row : transition) {
      if (row.size() != n_contexts) throw std::invalid_argument("synthetic spec: transition has wrong size");
    }
    return transition;
  }
  std::vector<std::vector<double>> m(n_contexts, std::vector<double>(n_contexts));
  const double off = n_contexts > 1 ? 0.2 / static_cast<double>(n_contexts - 1) : 0.0;
  for (std::size_t i = 0; i < n_contexts; ++i) {
    for (std::size_t j = 0; j < n_contexts; ++j) m[i][j] = i == j ? (n_contexts > 1 ? 0.8 : 1.0) : off;
  }
  return m;
}

double GroundTruth::utility(std::size_t u, RawItemId item, std::size_t c) const {
  const auto& user = users.at(u);
  const std::size_t i = static_cast<std::size_t>(item) - 1;
  const Domain d = domain_of(item);
  const double s = spec.context_strength;
  const auto& spec_latent = d == Domain::A ? user.specific_a : user.specific_b;
  const auto& spec_offset = d == Domain::A ? context_specific_a[c] : context_specific_b[c];
  const double shared = dot(item_shared[i], user.shared, s, &context_shared[c]);
  const double specific = dot(item_specific[i], spec_latent, s, &spec_offset);
  const double norm = std::sqrt(static_cast<double>(item_shared[i].size() + item_specific[i].size()));
  return (shared + specific) / norm + s * item_context[i][c];
}

SyntheticDataset synthesize_causal(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const auto transition = spec.transition_matrix();
  SyntheticDataset out;
  GroundTruth& truth = out.truth;
  truth.spec = spec;
  const std::size_t n_items = spec.n_items_a + spec.n_items_b;
  for (std::size_t i = 0; i < n_items; ++i) {
    const bool is_a = i < spec.n_items_a;
    truth.item_shared.push_back(normal_vector(rng, spec.shared_dim));
    truth.item_specific.push_back(normal_vector(rng, is_a ? spec.specific_dim_a : spec.specific_dim_b));
    truth.item_context.push_back(normal_vector(rng, spec.n_contexts));
  }
  for (std::size_t c = 0; c < spec.n_contexts; ++c) {
    truth.context_shared.push_back(normal_vector(rng, spec.shared_dim));
    truth.context_specific_a.push_back(normal_vector(rng, spec.specific_dim_a));
    truth.context_specific_b.push_back(normal_vector(rng, spec.specific_dim_b));
  }
  const std::vector<double> uniform_start(spec.n_contexts, 1.0 / static_cast<double>(spec.n_contexts));
  std::vector<double> probs;
  for (std::size_t u = 0; u < spec.n_users; ++u) {
    UserTruth user;
    user.user = static_cast<UserId>(u + 1);
    user.shared = normal_vector(rng, spec.shared_dim);
    user.specific_a = normal_vector(rng, spec.specific_dim_a);
    user.specific_b = normal_vector(rng, spec.specific_dim_b);
    const std::size_t len = spec.min_len + rng.index(spec.max_len - spec.min_len + 1);
    std::size_t context = sample_categorical(rng, uniform_start);
    auto& history = out.log.histories[user.user];
    truth.users.push_back(user);
    for (std::size_t t = 0; t < len; ++t) {
      if (t > 0) context = sample_categorical(rng, transition[context]);
      const Domain d = rng.uniform() < spec.prob_domain_a ? Domain::A : Domain::B;
      const RawItemId first = d == Domain::A ? 1 : static_cast<RawItemId>(spec.n_items_a + 1);
      const std::size_t count = d == Domain::A ? spec.n_items_a : spec.n_items_b;
      probs.assign(count, 0.0);
      double mx = -1e300;
      for (std::size_t k = 0; k < count; ++k) {
        probs[k] = spec.sharpness * truth.utility(u, first + static_cast<RawItemId>(k), context);
        mx = std::max(mx, probs[k]);
      }
      double total = 0.0;
      for (double& p : probs) total += (p = std::exp(p - mx));
      for (double& p : probs) p /= total;
      const RawItemId item = first + static_cast<RawItemId>(sample_categorical(rng, probs));
      history.push_back({user.user, item, d, static_cast<std::int64_t>(t * 60)});
      truth.users.back().contexts.push_back(context);
      truth.users.back().domains.push_back(d);
    }
  }
  for (std::size_t i = 1; i <= spec.n_items_a; ++i) out.log.catalog_a.insert(static_cast<RawItemId>(i));
  for (std::size_t i = spec.n_items_a + 1; i <= n_items; ++i) out.log.catalog_b.insert(static_cast<RawItemId>(i));
  return out;
}

nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"n_users", s.n_users},
          {"n_items_a", s.n_items_a},
          {"n_items_b", s.n_items_b},
          {"n_contexts", s.n_contexts},
          {"transition", s.transition_matrix()},
          {"shared_dim", s.shared_dim},
          {"specific_dim_a", s.specific_dim_a},
          {"specific_dim_b", s.specific_dim_b},
          {"min_len", s.min_len},
          {"max_len", s.max_len},
          {"prob_domain_a", s.prob_domain_a},
          {"context_strength", s.context_strength},
          {"sharpness", s.sharpness},
          {"seed", s.seed}};
}

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.n_users = j.value("n_users", s.n_users);
  s.n_items_a = j.value("n_items_a", s.n_items_a);
  s.n_items_b = j.value("n_items_b", s.n_items_b);
  s.n_contexts = j.value("n_contexts", s.n_contexts);
  if (j.contains("transition")) s.transition = j.at("transition").get<std::vector<std::vector<double>>>();
  s.shared_dim = j.value("shared_dim", s.shared_dim);
  s.specific_dim_a = j.value("specific_dim_a", s.specific_dim_a);
  s.specific_dim_b = j.value("specific_dim_b", s.specific_dim_b);
  s.min_len = j.value("min_len", s.min_len);
  s.max_len = j.value("max_len", s.max_len);
  s.prob_domain_a = j.value("prob_domain_a", s.prob_domain_a);
  s.context_strength = j.value("context_strength", s.context_strength);
  s.sharpness = j.value("sharpness", s.sharpness);
  s.seed = j.value("seed", s.seed);
  s.validate();
  return s;
}

nlohmann::json to_json(const GroundTruth& truth) {
  nlohmann::json users = nlohmann::json::array();
  for (const auto& u : truth.users) {
    std::vector<std::string> domains;
    for (Domain d : u.domains) domains.emplace_back(domain_name(d));
    users.push_back({{"user", u.user},
                     {"contexts", u.contexts},
                     {"domains", domains},
                     {"z_shared", u.shared},
                     {"z_specific_a", u.specific_a},
                     {"z_specific_b", u.specific_b}});
  }
  return {{"spec", to_json(truth.spec)},
          {"users", users},
          {"item_shared", truth.item_shared},
          {"item_specific", truth.item_specific},
          {"item_context", truth.item_context},
          {"context_shared", truth.context_shared},
          {"context_specific_a", truth.context_specific_a},
          {"context_specific_b", truth.context_specific_b}};
}

}  // namespace codis::data
