#pragma once

#include <vector>

#include "codis/data/types.hpp"
#include "codis/numcore/rng.hpp"

namespace codis::data {

struct MaskedUser {
  UserId user = 0;
  Domain domain = Domain::A;
};

/// Picks floor(ratio * |users|) distinct users and one domain for each.
std::vector<MaskedUser> choose_overlap_mask(const std::vector<UserId>& users, double ratio, Rng& rng);

/// Deletes every interaction of the masked domain for each masked user.
InteractionLog apply_mask(const InteractionLog& log, const std::vector<MaskedUser>& mask);

/// Same deletion on split data: the masked domain disappears from the
/// training timeline and the test input, targets stay untouched.
std::vector<SplitTriple> apply_mask(const std::vector<SplitTriple>& splits,
                                    const std::vector<MaskedUser>& mask, const Vocabulary& vocab);

InteractionLog mask_overlap(const InteractionLog& log, double ratio, Rng& rng);

/// Splices k random catalog items at uniform positions of the real prefix.
/// Each inserted item's domain is A or B with probability 1/2. The result is
/// truncated to the triple's length by dropping the oldest slots.
AlignedSequenceTriple inject_noise(const AlignedSequenceTriple& triple, std::size_t k,
                                   const Vocabulary& vocab, Rng& rng);

}  // namespace codis::data
