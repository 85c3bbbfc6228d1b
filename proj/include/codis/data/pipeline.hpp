#pragma once

#include <istream>
#include <stdexcept>
#include <string>
#include <vector>

#include "codis/data/types.hpp"
#include "codis/numcore/rng.hpp"

namespace codis::data {

struct RowError {
  std::size_t line = 0;
  std::string message;
};

/// Thrown when more than 1% of the input rows are malformed.
struct IngestError : std::runtime_error {
  IngestError(const std::string& what, std::vector<RowError> rows)
      : std::runtime_error(what), errors(std::move(rows)) {}
  std::vector<RowError> errors;
};

struct EmptyDatasetError : std::runtime_error {
  EmptyDatasetError() : std::runtime_error("empty dataset") {}
};

struct IngestResult {
  InteractionLog log;
  std::vector<RowError> errors;  // tolerated bad rows
  std::size_t rows_read = 0;
  std::size_t duplicates = 0;
};

enum class RecordFormat { Csv, JsonLines };

/// Reads `user,item,domain,timestamp` CSV (optional header) or JSON-lines
/// objects with the same keys. Domain tags are A/B (case-insensitive).
IngestResult ingest(std::istream& in, RecordFormat format);
IngestResult ingest(const std::vector<Interaction>& records);
/// Picks the format from the extension (.csv, .jsonl, .json, optionally .gz).
IngestResult ingest_file(const std::string& path);

struct PreprocessOptions {
  std::size_t min_item_count = 5;
  std::size_t max_history = 50;
};

InteractionLog preprocess(const InteractionLog& log, const PreprocessOptions& options = {});

std::vector<AlignedSequenceTriple> build_aligned_sequences(const InteractionLog& log,
                                                           const Vocabulary& vocab,
                                                           std::size_t max_len);
AlignedSequenceTriple align_one(const std::vector<Interaction>& history,
                                const Vocabulary& vocab, std::size_t max_len);
// Rebuilds a left-padded triple from a chronological list of dense ids.
AlignedSequenceTriple make_triple(const std::vector<ItemId>& items, const Vocabulary& vocab,
                                  std::size_t max_len);
std::vector<ItemId> real_items(const AlignedSequenceTriple& triple);

std::vector<SplitTriple> leave_one_out_split(const std::vector<AlignedSequenceTriple>& triples,
                                             const std::vector<UserId>& users,
                                             const Vocabulary& vocab);

/// n_neg distinct items drawn uniformly from `catalog` excluding `positive`.
std::vector<ItemId> sample_negatives(const std::vector<ItemId>& catalog, ItemId positive,
                                     std::size_t n_neg, Rng& rng);

PseudoSequenceSet generate_pseudo_sequences(const std::vector<AlignedSequenceTriple>& train,
                                            const Vocabulary& vocab, std::size_t count,
                                            Rng& rng);

// Checks the three triple invariants; returns an empty string when they hold.
std::string validate_triple(const AlignedSequenceTriple& triple);

}  // namespace codis::data
