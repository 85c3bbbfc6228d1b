#include "codis/data/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "codis/data/pipeline.hpp"

namespace codis::data {

std::vector<MaskedUser> choose_overlap_mask(const std::vector<UserId>& users, double ratio, Rng& rng) {
  if (ratio < 0.0 || ratio > 1.0) throw std::invalid_argument("overlap ratio must be in [0, 1]");
  const auto count = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(users.size()) + 1e-9));
  std::vector<UserId> pool = users;
  std::vector<MaskedUser> mask;
  mask.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
    mask.push_back({pool[i], rng.uniform() < 0.5 ? Domain::A : Domain::B});
  }
  std::sort(mask.begin(), mask.end(), [](const MaskedUser& a, const MaskedUser& b) { return a.user < b.user; });
  return mask;
}

InteractionLog apply_mask(const InteractionLog& log, const std::vector<MaskedUser>& mask) {
  InteractionLog out = log;
  for (const auto& m : mask) {
    auto it = out.histories.find(m.user);
    if (it == out.histories.end()) continue;
    std::erase_if(it->second, [&](const Interaction& x) { return x.domain == m.domain; });
  }
  return out;
}

std::vector<SplitTriple> apply_mask(const std::vector<SplitTriple>& splits,
                                    const std::vector<MaskedUser>& mask, const Vocabulary& vocab) {
  std::map<UserId, Domain> masked;
  for (const auto& m : mask) masked[m.user] = m.domain;
  std::vector<SplitTriple> out = splits;
  for (auto& s : out) {
    auto it = masked.find(s.user);
    if (it == masked.end()) continue;
    const Domain d = it->second;
    const auto strip = [&](const AlignedSequenceTriple& t) {
      std::vector<ItemId> items;
      for (ItemId id : real_items(t)) {
        if (vocab.domain_of(id) != d) items.push_back(id);
      }
      return make_triple(items, vocab, t.length());
    };
    s.train = strip(s.train);
    s.test_input = strip(s.test_input);
  }
  return out;
}

InteractionLog mask_overlap(const InteractionLog& log, double ratio, Rng& rng) {
  std::vector<UserId> users;
  for (const auto& [u, _] : log.histories) users.push_back(u);
  return apply_mask(log, choose_overlap_mask(users, ratio, rng));
}

AlignedSequenceTriple inject_noise(const AlignedSequenceTriple& triple, std::size_t k,
                                   const Vocabulary& vocab, Rng& rng) {
  if (k < 1 || k > 3) throw std::invalid_argument("inject_noise: k must be 1, 2 or 3");
  auto items = real_items(triple);
  const auto cat_a = vocab.catalog(Domain::A);
  const auto cat_b = vocab.catalog(Domain::B);
  for (std::size_t i = 0; i < k; ++i) {
    const bool pick_a = rng.uniform() < 0.5;
    const auto& cat = pick_a ? cat_a : cat_b;
    const ItemId id = cat[rng.index(cat.size())];
    const std::size_t at = rng.index(items.size() + 1);
    items.insert(items.begin() + static_cast<std::ptrdiff_t>(at), id);
  }
  return make_triple(items, vocab, triple.length());
}

}  // namespace codis::data
