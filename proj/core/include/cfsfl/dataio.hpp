#pragma once

// Interaction log ingestion, binarization/filtering, strong-generalization
// splits, synthetic data and the canonical dataset text format.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cfsfl/diffcore.hpp"

namespace cfsfl {

using ItemIndex = std::int32_t;
using ItemList = std::vector<ItemIndex>;

struct RawInteraction {
  std::string user_id;
  std::string item_id;
  double rating = 0.0;
  std::optional<std::int64_t> timestamp;
};

enum class InteractionFormat { csv_movielens };

struct LoadResult {
  std::vector<RawInteraction> records;
  std::size_t data_rows = 0;  // non-blank lines after the header
  std::size_t malformed_count = 0;
  bool had_header = false;
  std::vector<std::string> warnings;
};

/// Reads `userId,itemId,rating[,timestamp]` rows; a header line is detected
/// by a non-numeric rating column. Malformed rows are skipped and counted.
/// Throws IoError when the file cannot be read and FormatError when more
/// than 1% of data rows are malformed.
LoadResult load_interactions(const std::filesystem::path& path,
                             InteractionFormat format = InteractionFormat::csv_movielens);
LoadResult parse_interactions(std::istream& in);

/// Binary user x item matrix stored as one ascending index list per user.
struct InteractionMatrix {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::vector<ItemList> rows;
  // index -> original id; may be empty for synthetic data.
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;

  std::size_t nnz() const;
  // Throws ShapeError/DataError when an invariant is broken.
  void validate() const;
  bool operator==(const InteractionMatrix&) const = default;
};

struct PreprocessOptions {
  double rating_threshold = 4.0;
  std::size_t min_items_per_user = 5;
  std::size_t min_users_per_item = 0;
};

/// Keeps ratings >= threshold, then alternately drops sparse items and users
/// until neither filter removes anything. Surviving ids are indexed in sorted
/// id order (numeric ids compare numerically). Throws DataError when nothing
/// survives.
InteractionMatrix preprocess(const std::vector<RawInteraction>& raw, const PreprocessOptions& options = {});

struct HeldOutUser {
  std::string user_id;
  ItemList fold_in;
  ItemList held_out;
  bool operator==(const HeldOutUser&) const = default;
};

struct SplitSet {
  InteractionMatrix train;
  std::vector<HeldOutUser> validation;
  std::vector<HeldOutUser> test;
  // Held-out users discarded because fewer than two of their items survive
  // the train vocabulary restriction.
  std::size_t dropped_heldout = 0;
  bool operator==(const SplitSet&) const = default;
};

struct SplitOptions {
  std::size_t n_val_users = 0;
  std::size_t n_test_users = 0;
  double fold_in_fraction = 0.8;
  std::uint64_t seed = 0;
};

/// Disjoint train / validation / test users. Held-out users are drawn
/// uniformly among users with at least two items; each keeps
/// floor(fraction * n) items (clamped to [1, n-1]) as fold-in. The item
/// vocabulary is restricted to items seen in training. All randomness is
/// keyed on (seed, user index).
SplitSet split_strong_generalization(const InteractionMatrix& m, const SplitOptions& options);

/// Number of fold-in items for a row of `row_size` items.
std::size_t fold_in_count(std::size_t row_size, double fraction);

struct SyntheticOptions {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::size_t rank = 1;
  double avg_items_per_user = 2.0;
  std::uint64_t seed = 0;
};

/// Low-rank synthetic interactions: standard normal user/item factors give
/// affinity logits U V^T; each user draws its items without replacement with
/// probability proportional to softmax of its logits.
InteractionMatrix generate_synthetic(const SyntheticOptions& options);

/// Sampling core of generate_synthetic for given factors and per-user counts.
InteractionMatrix sample_from_factors(const Matrix& user_factors, const Matrix& item_factors,
                                      const std::vector<std::size_t>& items_per_user, std::uint64_t seed);

// Canonical text format: "cfsfl-data v1 <n_users> <n_items>" then one line of
// ascending space-separated item indices per user.
void write_dataset(std::ostream& out, const InteractionMatrix& m);
void write_dataset(const std::filesystem::path& path, const InteractionMatrix& m);
InteractionMatrix read_dataset(std::istream& in);
InteractionMatrix read_dataset(const std::filesystem::path& path);

// Held-out users: "cfsfl-heldout v1 <n_users> <n_items>" then per user
// "<fold-in indices> | <held-out indices>".
void write_heldout(std::ostream& out, const std::vector<HeldOutUser>& users, std::size_t n_items);
void write_heldout(const std::filesystem::path& path, const std::vector<HeldOutUser>& users, std::size_t n_items);
std::vector<HeldOutUser> read_heldout(std::istream& in, std::size_t* n_items = nullptr);
std::vector<HeldOutUser> read_heldout(const std::filesystem::path& path, std::size_t* n_items = nullptr);

}  // namespace cfsfl
