#include "codis/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "codis/data/pipeline.hpp"

namespace codis::eval {

using data::Domain;
using data::ItemId;

std::size_t rank_of(std::span<const double> scores, std::size_t target_index) {
  if (target_index >= scores.size()) throw std::out_of_range("rank_of: target index outside the scores");
  const double s = scores[target_index];
  std::size_t rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i != target_index && scores[i] >= s) ++rank;
  }
  return rank;
}

std::size_t rank_items(std::span<const double> query, const Tensor& table, std::span<const ItemId> candidates,
                       ItemId target) {
  const std::size_t h = table.cols();
  if (query.size() != h) throw DimensionError("rank_items: query width differs from the table");
  auto it = std::find(candidates.begin(), candidates.end(), target);
  if (it == candidates.end()) throw std::invalid_argument("rank_items: target not among the candidates");
  std::vector<double> scores(candidates.size());
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    if (candidates[c] == data::kPad || candidates[c] >= table.rows()) {
      throw std::out_of_range("rank_items: candidate is PAD or outside the table");
    }
    const double* e = table.values().data() + candidates[c] * h;
    double dot = 0.0;
    for (std::size_t i = 0; i < h; ++i) dot += query[i] * e[i];
    scores[c] = dot;
  }
  return rank_of(scores, static_cast<std::size_t>(it - candidates.begin()));
}

double hr_at_k(std::size_t rank, std::size_t k) {
  if (rank < 1) throw std::invalid_argument("rank must be >= 1");
  return rank <= k ? 1.0 : 0.0;
}

double ndcg_at_k(std::size_t rank, std::size_t k) {
  if (rank < 1) throw std::invalid_argument("rank must be >= 1");
  return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

double mrr(std::size_t rank) {
  if (rank < 1) throw std::invalid_argument("rank must be >= 1");
  return 1.0 / static_cast<double>(rank);
}

void DomainMetrics::add(std::size_t rank) {
  hr5 += hr_at_k(rank, 5);
  hr10 += hr_at_k(rank, 10);
  ndcg5 += ndcg_at_k(rank, 5);
  ndcg10 += ndcg_at_k(rank, 10);
  mrr += eval::mrr(rank);
  ++users;
}

void DomainMetrics::finish() {
  if (users == 0) return;
  const double n = static_cast<double>(users);
  hr5 /= n;
  hr10 /= n;
  ndcg5 /= n;
  ndcg10 /= n;
  mrr /= n;
}

double MetricsReport::aggregate_mrr() const {
  double total = 0.0;
  std::size_t present = 0;
  for (const auto& d : domains) {
    if (!d) continue;
    total += d->mrr;
    ++present;
  }
  return present ? total / static_cast<double>(present) : 0.0;
}

nlohmann::json to_json(const DomainMetrics& m) {
  return {{"hr@5", m.hr5},   {"hr@10", m.hr10}, {"ndcg@5", m.ndcg5},
          {"ndcg@10", m.ndcg10}, {"mrr", m.mrr},   {"users", m.users}};
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  for (Domain d : {Domain::A, Domain::B}) {
    j[data::domain_name(d)] = r.of(d) ? to_json(*r.of(d)) : nlohmann::json(nullptr);
  }
  j["aggregate_mrr"] = r.aggregate_mrr();
  return j;
}

EvalMode eval_mode_from_string(const std::string& s) {
  if (s == "full" || s == "full-catalog") return EvalMode::FullCatalog;
  if (s == "sampled") return EvalMode::Sampled;
  throw std::invalid_argument("unknown eval mode '" + s + "' (expected full or sampled)");
}

std::string to_string(EvalMode m) { return m == EvalMode::FullCatalog ? "full" : "sampled"; }

MetricsReport evaluate_scorer(const std::vector<data::SplitTriple>& splits, const data::Vocabulary& vocab,
                              const EvalOptions& options, const Scorer& scorer) {
  std::array<DomainMetrics, 2> acc;
  std::vector<double> scores;
  for (Domain d : {Domain::A, Domain::B}) {
    const auto catalog = vocab.catalog(d);
    for (std::size_t i = 0; i < splits.size(); ++i) {
      const auto& split = splits[i];
      const auto& target = options.validation ? split.valid_target(d) : split.test_target(d);
      if (!target) continue;
      const ItemId item = target->item;
      if (vocab.domain_of(item) != d || item == data::kPad) {
        throw std::invalid_argument("evaluate: target item is not in its domain catalog");
      }
      std::vector<ItemId> candidates;
      if (options.mode == EvalMode::FullCatalog) {
        std::unordered_set<ItemId> seen;
        if (options.filter_history) {
          const auto& input = options.validation ? split.train : split.test_input;
          for (ItemId id : input.items(d)) {
            if (id != data::kPad && id != item) seen.insert(id);
          }
        }
        candidates.reserve(catalog.size());
        for (ItemId id : catalog) {
          if (!seen.count(id)) candidates.push_back(id);
        }
      } else {
        Rng rng(options.seed ^ (static_cast<std::uint64_t>(split.user) * 0x9e3779b97f4a7c15ULL) ^
                (static_cast<std::uint64_t>(d) + 1));
        const std::size_t n = std::min(options.sampled_negatives, catalog.size() - 1);
        candidates = data::sample_negatives(catalog, item, n, rng);
        candidates.insert(candidates.begin(), item);
      }
      scores.assign(vocab.size(), 0.0);
      scorer(i, d, scores);
      std::vector<double> cand_scores(candidates.size());
      std::size_t target_index = candidates.size();
      for (std::size_t c = 0; c < candidates.size(); ++c) {
        cand_scores[c] = scores[candidates[c]];
        if (candidates[c] == item) target_index = c;
      }
      if (target_index == candidates.size()) throw std::invalid_argument("evaluate: target missing from candidates");
      acc[static_cast<std::size_t>(d)].add(rank_of(cand_scores, target_index));
    }
  }
  MetricsReport report;
  for (std::size_t d = 0; d < 2; ++d) {
    if (acc[d].users == 0) continue;
    acc[d].finish();
    report.domains[d] = acc[d];
  }
  return report;
}

std::size_t query_row(const data::AlignedSequenceTriple& triple, Domain d, QueryPosition position) {
  const std::size_t last = triple.length() - 1;
  if (position == QueryPosition::LastSlot) return last;
  const auto& items = triple.items(d);
  for (std::size_t t = items.size(); t-- > 0;) {
    if (items[t] != data::kPad) return t;
  }
  return last;
}

std::array<std::vector<std::vector<double>>, 2> compute_queries(const model::Codis& model,
                                                                const std::vector<data::SplitTriple>& splits,
                                                                const EvalOptions& options) {
  NoGradGuard no_grad;
  std::array<std::vector<std::vector<double>>, 2> out;
  out[0].resize(splits.size());
  out[1].resize(splits.size());
  const std::size_t h = model.config().hidden;
  const std::size_t chunk = std::max<std::size_t>(1, options.batch_size);
  std::vector<const data::AlignedSequenceTriple*> inputs;
  for (std::size_t begin = 0; begin < splits.size(); begin += chunk) {
    const std::size_t end = std::min(splits.size(), begin + chunk);
    inputs.clear();
    for (std::size_t i = begin; i < end; ++i) {
      inputs.push_back(options.validation ? &splits[i].train : &splits[i].test_input);
    }
    const auto batch = model::Batch::from(std::span<const data::AlignedSequenceTriple* const>(inputs));
    const auto bundle = model.forward(batch, {});
    for (Domain d : {Domain::A, Domain::B}) {
      const auto& spec = bundle.f_spec(d).values();
      const auto& sha = bundle.f_sha.values();
      for (std::size_t i = begin; i < end; ++i) {
        const std::size_t row = (i - begin) * batch.steps + query_row(*inputs[i - begin], d, options.query);
        auto& q = out[static_cast<std::size_t>(d)][i];
        q.resize(h);
        for (std::size_t c = 0; c < h; ++c) q[c] = spec[row * h + c] + sha[row * h + c];
      }
    }
  }
  return out;
}

MetricsReport evaluate(const model::Codis& model, const std::vector<data::SplitTriple>& splits,
                       const data::Vocabulary& vocab, const EvalOptions& options) {
  if (model.config().num_items != vocab.size()) {
    throw std::invalid_argument("evaluate: model item table does not match the vocabulary");
  }
  const auto queries = compute_queries(model, splits, options);
  const Tensor& table = model.item_table();
  const std::size_t h = table.cols();
  return evaluate_scorer(splits, vocab, options, [&](std::size_t i, Domain d, std::vector<double>& scores) {
    const auto& q = queries[static_cast<std::size_t>(d)][i];
    const double* tv = table.values().data();
    for (std::size_t id = 1; id < scores.size(); ++id) {
      double dot = 0.0;
      for (std::size_t c = 0; c < h; ++c) dot += q[c] * tv[id * h + c];
      scores[id] = dot;
    }
  });
}

std::vector<double> popularity_scores(const std::vector<data::SplitTriple>& splits, const data::Vocabulary& vocab) {
  std::vector<double> counts(vocab.size(), 0.0);
  for (const auto& s : splits) {
    for (ItemId id : s.train.items_m) {
      if (id != data::kPad) counts[id] += 1.0;
    }
  }
  return counts;
}

MetricsReport evaluate_popularity(const std::vector<data::SplitTriple>& splits, const data::Vocabulary& vocab,
                                  const EvalOptions& options) {
  const auto counts = popularity_scores(splits, vocab);
  return evaluate_scorer(splits, vocab, options,
                         [&](std::size_t, Domain, std::vector<double>& scores) { scores = counts; });
}

}  // namespace codis::eval
