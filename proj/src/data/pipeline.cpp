#include "codis/data/pipeline.hpp"

#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <tuple>
#include <sstream>
#include <unordered_set>

namespace codis::data {

std::size_t InteractionLog::num_interactions() const {
  std::size_t n = 0;
  for (const auto& [_, h] : histories) n += h.size();
  return n;
}

std::size_t InteractionLog::num_interactions(Domain d) const {
  std::size_t n = 0;
  for (const auto& [_, h] : histories) {
    n += static_cast<std::size_t>(std::count_if(h.begin(), h.end(),
                                                [d](const Interaction& x) { return x.domain == d; }));
  }
  return n;
}

void InteractionLog::rebuild_catalogs() {
  catalog_a.clear();
  catalog_b.clear();
  for (const auto& [_, h] : histories) {
    for (const auto& x : h) catalog(x.domain).insert(x.item);
  }
}

Vocabulary::Vocabulary(const InteractionLog& log)
    : Vocabulary(std::vector<RawItemId>(log.catalog_a.begin(), log.catalog_a.end()),
                 std::vector<RawItemId>(log.catalog_b.begin(), log.catalog_b.end())) {}

Vocabulary::Vocabulary(std::vector<RawItemId> items_a, std::vector<RawItemId> items_b) {
  std::sort(items_a.begin(), items_a.end());
  std::sort(items_b.begin(), items_b.end());
  num_a_ = items_a.size();
  raw_.reserve(1 + items_a.size() + items_b.size());
  for (auto* items : {&items_a, &items_b}) {
    for (RawItemId r : *items) {
      if (!index_.emplace(r, raw_.size()).second) {
        throw std::invalid_argument("item " + std::to_string(r) + " listed in both catalogs");
      }
      raw_.push_back(r);
    }
  }
}

ItemId Vocabulary::dense(RawItemId raw) const {
  auto it = index_.find(raw);
  if (it == index_.end()) throw std::out_of_range("unknown item " + std::to_string(raw));
  return it->second;
}

std::vector<ItemId> Vocabulary::catalog(Domain d) const {
  std::vector<ItemId> ids;
  const ItemId first = d == Domain::A ? 1 : num_a_ + 1;
  const ItemId last = d == Domain::A ? num_a_ + 1 : raw_.size();
  for (ItemId i = first; i < last; ++i) ids.push_back(i);
  return ids;
}

std::size_t AlignedSequenceTriple::count(Domain d) const {
  const Slot s = slot_of(d);
  return static_cast<std::size_t>(std::count(flags.begin(), flags.end(), s));
}

namespace {

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

Domain parse_domain(std::string tag) {
  tag = trim(tag);
  if (tag == "A" || tag == "a") return Domain::A;
  if (tag == "B" || tag == "b") return Domain::B;
  throw std::invalid_argument("unknown domain tag '" + tag + "'");
}

std::int64_t parse_int(const std::string& field, const char* name) {
  const std::string s = trim(field);
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw std::invalid_argument(std::string("bad ") + name + " '" + s + "'");
  }
  return v;
}

Interaction parse_csv_row(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (fields.size() != 4) {
    throw std::invalid_argument("expected 4 fields, got " + std::to_string(fields.size()));
  }
  Interaction x;
  x.user = parse_int(fields[0], "user");
  x.item = parse_int(fields[1], "item");
  x.domain = parse_domain(fields[2]);
  x.timestamp = parse_int(fields[3], "timestamp");
  return x;
}

Interaction parse_json_row(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  Interaction x;
  x.user = j.at("user").get<std::int64_t>();
  x.item = j.at("item").get<std::int64_t>();
  x.domain = parse_domain(j.at("domain").get<std::string>());
  x.timestamp = j.at("timestamp").get<std::int64_t>();
  return x;
}

// Sorts, dedups and catalogs ingested rows. Rows are in ingestion order.
IngestResult assemble(std::vector<Interaction> rows, std::vector<RowError> errors,
                      std::vector<std::size_t> lines) {
  IngestResult result;
  result.rows_read = rows.size() + errors.size();
  std::map<RawItemId, Domain> item_domain;
  std::set<std::tuple<UserId, RawItemId, std::int64_t>> seen;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Interaction& x = rows[i];
    if (x.timestamp < 0) {
      errors.push_back({lines[i], "negative timestamp"});
      continue;
    }
    auto [it, inserted] = item_domain.emplace(x.item, x.domain);
    if (!inserted && it->second != x.domain) {
      errors.push_back({lines[i], "item " + std::to_string(x.item) + " appears in both domains"});
      continue;
    }
    if (!seen.emplace(x.user, x.item, x.timestamp).second) {
      ++result.duplicates;
      continue;
    }
    result.log.histories[x.user].push_back(x);
  }
  for (auto& [_, h] : result.log.histories) {
    std::stable_sort(h.begin(), h.end(), [](const Interaction& a, const Interaction& b) {
      return a.timestamp < b.timestamp;
    });
  }
  result.log.rebuild_catalogs();
  std::sort(errors.begin(), errors.end(),
            [](const RowError& a, const RowError& b) { return a.line < b.line; });
  if (result.rows_read > 0 && errors.size() * 100 > result.rows_read) {
    std::ostringstream msg;
    msg << errors.size() << " of " << result.rows_read << " rows malformed (limit 1%)";
    if (!errors.empty()) msg << "; first at line " << errors.front().line << ": " << errors.front().message;
    throw IngestError(msg.str(), std::move(errors));
  }
  result.errors = std::move(errors);
  return result;
}

bool looks_like_header(const std::string& line) {
  const std::string t = trim(line);
  return !t.empty() && !std::isdigit(static_cast<unsigned char>(t[0])) && t[0] != '-';
}

template <typename NextLine>
IngestResult ingest_lines(NextLine next_line, RecordFormat format) {
  std::vector<Interaction> rows;
  std::vector<std::size_t> lines;
  std::vector<RowError> errors;
  std::string line;
  std::size_t number = 0;
  while (next_line(line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (format == RecordFormat::Csv && number == 1 && looks_like_header(line)) continue;
    try {
      rows.push_back(format == RecordFormat::Csv ? parse_csv_row(line) : parse_json_row(line));
      lines.push_back(number);
    } catch (const std::exception& e) {
      errors.push_back({number, e.what()});
    }
  }
  return assemble(std::move(rows), std::move(errors), std::move(lines));
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

IngestResult ingest(std::istream& in, RecordFormat format) {
  return ingest_lines([&](std::string& line) { return static_cast<bool>(std::getline(in, line)); },
                      format);
}

IngestResult ingest(const std::vector<Interaction>& records) {
  std::vector<std::size_t> lines(records.size());
  for (std::size_t i = 0; i < lines.size(); ++i) lines[i] = i + 1;
  return assemble(records, {}, std::move(lines));
}

IngestResult ingest_file(const std::string& path) {
  const bool gz = ends_with(path, ".gz");
  const std::string base = gz ? path.substr(0, path.size() - 3) : path;
  const RecordFormat format =
      (ends_with(base, ".jsonl") || ends_with(base, ".json")) ? RecordFormat::JsonLines : RecordFormat::Csv;
  if (!gz) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return ingest(in, format);
  }
  gzFile file = gzopen(path.c_str(), "rb");
  if (!file) throw std::runtime_error("cannot open " + path);
  std::vector<char> buffer(1 << 16);
  auto next = [&](std::string& line) {
    line.clear();
    while (gzgets(file, buffer.data(), static_cast<int>(buffer.size()))) {
      line += buffer.data();
      if (!line.empty() && line.back() == '\n') {
        line.pop_back();
        return true;
      }
    }
    return !line.empty();
  };
  try {
    auto result = ingest_lines(next, format);
    gzclose(file);
    return result;
  } catch (...) {
    gzclose(file);
    throw;
  }
}

InteractionLog preprocess(const InteractionLog& log, const PreprocessOptions& options) {
  InteractionLog out = log;
  auto has_both = [](const std::vector<Interaction>& h) {
    bool a = false, b = false;
    for (const auto& x : h) (x.domain == Domain::A ? a : b) = true;
    return a && b;
  };
  auto drop_single_domain_users = [&] {
    std::size_t dropped = 0;
    for (auto it = out.histories.begin(); it != out.histories.end();) {
      if (has_both(it->second)) {
        ++it;
      } else {
        it = out.histories.erase(it);
        ++dropped;
      }
    }
    return dropped;
  };
  // Users and rare items are filtered jointly until neither rule removes anything.
  drop_single_domain_users();
  while (true) {
    std::map<RawItemId, std::size_t> counts;
    for (const auto& [_, h] : out.histories) {
      for (const auto& x : h) ++counts[x.item];
    }
    std::size_t removed = 0;
    for (auto& [_, h] : out.histories) {
      const auto before = h.size();
      std::erase_if(h, [&](const Interaction& x) { return counts[x.item] < options.min_item_count; });
      removed += before - h.size();
    }
    removed += drop_single_domain_users();
    if (removed == 0) break;
  }
  for (auto& [_, h] : out.histories) {
    if (h.size() > options.max_history) {
      h.erase(h.begin(), h.end() - static_cast<std::ptrdiff_t>(options.max_history));
    }
  }
  drop_single_domain_users();
  out.rebuild_catalogs();
  if (out.histories.empty()) throw EmptyDatasetError();
  return out;
}

AlignedSequenceTriple make_triple(const std::vector<ItemId>& items, const Vocabulary& vocab,
                                  std::size_t max_len) {
  AlignedSequenceTriple t;
  t.items_m.assign(max_len, kPad);
  t.items_a.assign(max_len, kPad);
  t.items_b.assign(max_len, kPad);
  t.flags.assign(max_len, Slot::Pad);
  const std::size_t n = std::min(items.size(), max_len);
  const std::size_t skip = items.size() - n;
  const std::size_t offset = max_len - n;
  for (std::size_t i = 0; i < n; ++i) {
    const ItemId id = items[skip + i];
    const Domain d = vocab.domain_of(id);
    t.items_m[offset + i] = id;
    t.flags[offset + i] = slot_of(d);
    (d == Domain::A ? t.items_a : t.items_b)[offset + i] = id;
  }
  t.valid_len = n;
  return t;
}

std::vector<ItemId> real_items(const AlignedSequenceTriple& triple) {
  std::vector<ItemId> out;
  for (ItemId id : triple.items_m) {
    if (id != kPad) out.push_back(id);
  }
  return out;
}

AlignedSequenceTriple align_one(const std::vector<Interaction>& history, const Vocabulary& vocab,
                                std::size_t max_len) {
  std::vector<ItemId> items;
  items.reserve(history.size());
  for (const auto& x : history) items.push_back(vocab.dense(x.item));
  return make_triple(items, vocab, max_len);
}

std::vector<AlignedSequenceTriple> build_aligned_sequences(const InteractionLog& log,
                                                           const Vocabulary& vocab,
                                                           std::size_t max_len) {
  std::vector<AlignedSequenceTriple> out;
  out.reserve(log.histories.size());
  for (const auto& [_, h] : log.histories) out.push_back(align_one(h, vocab, max_len));
  return out;
}

std::vector<SplitTriple> leave_one_out_split(const std::vector<AlignedSequenceTriple>& triples,
                                             const std::vector<UserId>& users,
                                             const Vocabulary& vocab) {
  if (users.size() != triples.size()) {
    throw std::invalid_argument("leave_one_out_split: users and triples differ in length");
  }
  std::vector<SplitTriple> out;
  out.reserve(triples.size());
  for (std::size_t u = 0; u < triples.size(); ++u) {
    const auto& triple = triples[u];
    const std::size_t max_len = triple.length();
    const auto items = real_items(triple);
    SplitTriple split;
    split.user = users[u];
    std::vector<bool> is_test(items.size(), false), is_valid(items.size(), false);
    for (Domain d : {Domain::A, Domain::B}) {
      std::vector<std::size_t> positions;
      for (std::size_t i = 0; i < items.size(); ++i) {
        if (vocab.domain_of(items[i]) == d) positions.push_back(i);
      }
      if (positions.size() < 3) continue;
      const std::size_t test_pos = positions.back();
      const std::size_t valid_pos = positions[positions.size() - 2];
      is_test[test_pos] = true;
      is_valid[valid_pos] = true;
      (d == Domain::A ? split.test_a : split.test_b) = Target{items[test_pos], d};
      (d == Domain::A ? split.valid_a : split.valid_b) = Target{items[valid_pos], d};
    }
    std::vector<ItemId> train, test_input;
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (!is_test[i]) test_input.push_back(items[i]);
      if (!is_test[i] && !is_valid[i]) train.push_back(items[i]);
    }
    split.train = make_triple(train, vocab, max_len);
    split.test_input = make_triple(test_input, vocab, max_len);
    out.push_back(std::move(split));
  }
  return out;
}

std::vector<ItemId> sample_negatives(const std::vector<ItemId>& catalog, ItemId positive,
                                     std::size_t n_neg, Rng& rng) {
  const bool contains = std::find(catalog.begin(), catalog.end(), positive) != catalog.end();
  const std::size_t available = catalog.size() - (contains ? 1 : 0);
  if (n_neg > available) {
    throw std::invalid_argument("sample_negatives: " + std::to_string(n_neg) +
                                " negatives requested from " + std::to_string(available) +
                                " candidates");
  }
  std::vector<ItemId> out;
  out.reserve(n_neg);
  if (n_neg * 4 < available) {
    std::unordered_set<ItemId> taken{positive};
    while (out.size() < n_neg) {
      const ItemId id = catalog[rng.index(catalog.size())];
      if (taken.insert(id).second) out.push_back(id);
    }
    return out;
  }
  // Dense case: partial Fisher-Yates over the complement.
  std::vector<ItemId> pool;
  pool.reserve(available);
  for (ItemId id : catalog) {
    if (id != positive) pool.push_back(id);
  }
  for (std::size_t i = 0; i < n_neg; ++i) {
    std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
    out.push_back(pool[i]);
  }
  return out;
}

PseudoSequenceSet generate_pseudo_sequences(const std::vector<AlignedSequenceTriple>& train,
                                            const Vocabulary& vocab, std::size_t count, Rng& rng) {
  if (count == 0) throw std::invalid_argument("generate_pseudo_sequences: V must be >= 1");
  if (train.empty()) throw EmptyDatasetError();
  std::vector<std::size_t> lengths;
  std::size_t slots = 0, a_slots = 0;
  for (const auto& t : train) {
    lengths.push_back(t.valid_len);
    slots += t.valid_len;
    a_slots += t.count(Domain::A);
  }
  const double a_share = slots ? static_cast<double>(a_slots) / static_cast<double>(slots) : 0.5;
  const auto cat_a = vocab.catalog(Domain::A);
  const auto cat_b = vocab.catalog(Domain::B);
  const std::size_t max_len = train.front().length();
  PseudoSequenceSet set;
  set.sequences.reserve(count);
  for (std::size_t j = 0; j < count; ++j) {
    const std::size_t len = lengths[rng.index(lengths.size())];
    std::vector<ItemId> items;
    items.reserve(len);
    for (std::size_t i = 0; i < len; ++i) {
      const bool pick_a = cat_b.empty() || (!cat_a.empty() && rng.uniform() < a_share);
      const auto& cat = pick_a ? cat_a : cat_b;
      items.push_back(cat[rng.index(cat.size())]);
    }
    set.sequences.push_back(make_triple(items, vocab, max_len));
  }
  return set;
}

std::string validate_triple(const AlignedSequenceTriple& t) {
  const std::size_t n = t.length();
  if (t.items_a.size() != n || t.items_b.size() != n || t.flags.size() != n) {
    return "views have different lengths";
  }
  std::size_t real = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool pad = t.items_m[i] == kPad;
    if (pad != (t.flags[i] == Slot::Pad)) return "flag/PAD mismatch at " + std::to_string(i);
    if ((t.items_a[i] != kPad) != (t.flags[i] == Slot::A)) return "A view mismatch at " + std::to_string(i);
    if ((t.items_b[i] != kPad) != (t.flags[i] == Slot::B)) return "B view mismatch at " + std::to_string(i);
    if (t.items_a[i] != kPad && t.items_a[i] != t.items_m[i]) return "A view item differs at " + std::to_string(i);
    if (t.items_b[i] != kPad && t.items_b[i] != t.items_m[i]) return "B view item differs at " + std::to_string(i);
    if (!pad) ++real;
    if (pad && real > 0) return "PAD after a real item at " + std::to_string(i);
  }
  if (real != t.valid_len) return "valid_len does not match real slot count";
  return {};
}

}  // namespace codis::data
