#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace codis::data {

enum class Domain : std::uint8_t { A = 0, B = 1 };

inline const char* domain_name(Domain d) { return d == Domain::A ? "A" : "B"; }
inline Domain other(Domain d) { return d == Domain::A ? Domain::B : Domain::A; }

using UserId = std::int64_t;
using RawItemId = std::int64_t;
// Dense item id in the unified space: 0 is PAD, then catalog A, then catalog B.
using ItemId = std::size_t;
inline constexpr ItemId kPad = 0;

struct Interaction {
  UserId user = 0;
  RawItemId item = 0;
  Domain domain = Domain::A;
  std::int64_t timestamp = 0;

  friend bool operator==(const Interaction&, const Interaction&) = default;
  friend auto operator<=>(const Interaction&, const Interaction&) = default;
};

struct InteractionLog {
  // Per-user history sorted by timestamp; ties keep ingestion order.
  std::map<UserId, std::vector<Interaction>> histories;
  std::set<RawItemId> catalog_a;
  std::set<RawItemId> catalog_b;

  std::size_t num_users() const { return histories.size(); }
  std::size_t num_interactions() const;
  std::size_t num_interactions(Domain d) const;
  const std::set<RawItemId>& catalog(Domain d) const {
    return d == Domain::A ? catalog_a : catalog_b;
  }
  std::set<RawItemId>& catalog(Domain d) { return d == Domain::A ? catalog_a : catalog_b; }
  // Drops catalog entries with no remaining interactions.
  void rebuild_catalogs();
};

/// Raw item id <-> dense id mapping. Dense ids: A items 1..|A| in ascending
/// raw order, then B items.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(const InteractionLog& log);
  Vocabulary(std::vector<RawItemId> items_a, std::vector<RawItemId> items_b);

  // L = |I^A| + |I^B| + 1
  std::size_t size() const { return raw_.size(); }
  std::size_t size(Domain d) const { return d == Domain::A ? num_a_ : size() - 1 - num_a_; }
  ItemId dense(RawItemId raw) const;
  RawItemId raw(ItemId id) const { return raw_.at(id); }
  Domain domain_of(ItemId id) const { return id <= num_a_ ? Domain::A : Domain::B; }
  bool contains(RawItemId raw) const { return index_.count(raw) != 0; }
  // Dense ids of one domain, ascending.
  std::vector<ItemId> catalog(Domain d) const;

 private:
  std::vector<RawItemId> raw_{0};
  std::map<RawItemId, ItemId> index_;
  std::size_t num_a_ = 0;
};

enum class Slot : std::uint8_t { Pad = 0, A = 1, B = 2 };

inline Slot slot_of(Domain d) { return d == Domain::A ? Slot::A : Slot::B; }

/// One user's merged timeline of length T plus the two single-domain views
/// on the same slots. Real items occupy the rightmost valid_len slots.
struct AlignedSequenceTriple {
  std::vector<ItemId> items_m;
  std::vector<ItemId> items_a;
  std::vector<ItemId> items_b;
  std::vector<Slot> flags;
  std::size_t valid_len = 0;

  std::size_t length() const { return items_m.size(); }
  const std::vector<ItemId>& items(Domain d) const { return d == Domain::A ? items_a : items_b; }
  std::size_t count(Domain d) const;

  friend bool operator==(const AlignedSequenceTriple&, const AlignedSequenceTriple&) = default;
};

struct Target {
  ItemId item = kPad;
  Domain domain = Domain::A;
  friend bool operator==(const Target&, const Target&) = default;
};

/// Leave-one-out split for one user. `train` is the input at validation time
/// and `test_input` (train plus the validation targets) the input at test time.
struct SplitTriple {
  UserId user = 0;
  AlignedSequenceTriple train;
  AlignedSequenceTriple test_input;
  std::optional<Target> valid_a, valid_b, test_a, test_b;

  const std::optional<Target>& valid_target(Domain d) const { return d == Domain::A ? valid_a : valid_b; }
  const std::optional<Target>& test_target(Domain d) const { return d == Domain::A ? test_a : test_b; }
};

struct PseudoSequenceSet {
  std::vector<AlignedSequenceTriple> sequences;
  std::size_t count() const { return sequences.size(); }
};

}  // namespace codis::data
