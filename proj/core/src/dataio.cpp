#include "cfsfl/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace cfsfl {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r' || s.front() == '\n')) {
    s.remove_prefix(1);
  }
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '\n')) {
    s.remove_suffix(1);
  }
  return s;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::optional<double> parse_double(std::string_view s) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) return std::nullopt;
  return v;
}

template <typename Int>
std::optional<Int> parse_int(std::string_view s) {
  Int v = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || s.empty()) return std::nullopt;
  return v;
}

std::optional<RawInteraction> parse_row(std::string_view line) {
  const auto fields = split_commas(line);
  if (fields.size() < 3 || fields.size() > 4) return std::nullopt;
  if (fields[0].empty() || fields[1].empty()) return std::nullopt;
  auto rating = parse_double(fields[2]);
  if (!rating) return std::nullopt;
  RawInteraction r{std::string(fields[0]), std::string(fields[1]), *rating, std::nullopt};
  if (fields.size() == 4 && !fields[3].empty()) {
    auto ts = parse_int<std::int64_t>(fields[3]);
    if (!ts) return std::nullopt;
    r.timestamp = *ts;
  }
  return r;
}

// Numeric ids order numerically and before non-numeric ids; the rest order
// lexicographically.
bool id_less(const std::string& a, const std::string& b) {
  const auto na = parse_int<std::uint64_t>(a);
  const auto nb = parse_int<std::uint64_t>(b);
  if (na && nb) return *na != *nb ? *na < *nb : a < b;
  if (na != std::nullopt || nb != std::nullopt) return na.has_value();
  return a < b;
}

}  // namespace

LoadResult parse_interactions(std::istream& in) {
  LoadResult result;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    const auto body = trim(line);
    if (body.empty()) continue;
    if (first) {
      first = false;
      const auto fields = split_commas(body);
      if (fields.size() >= 3 && !parse_double(fields[2])) {
        result.had_header = true;
        continue;
      }
    }
    ++result.data_rows;
    if (auto row = parse_row(body)) {
      result.records.push_back(std::move(*row));
    } else {
      ++result.malformed_count;
    }
  }
  if (result.data_rows == 0) result.warnings.emplace_back("no data rows");
  if (result.malformed_count > 0) {
    result.warnings.push_back(std::to_string(result.malformed_count) + " malformed row(s) skipped");
  }
  if (result.malformed_count * 100 > result.data_rows) {
    throw FormatError(std::to_string(result.malformed_count) + " of " + std::to_string(result.data_rows) +
                      " rows are malformed (more than 1%)");
  }
  return result;
}

LoadResult load_interactions(const std::filesystem::path& path, InteractionFormat format) {
  if (format != InteractionFormat::csv_movielens) throw ParameterError("unsupported interaction format");
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return parse_interactions(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

std::size_t InteractionMatrix::nnz() const {
  std::size_t n = 0;
  for (const auto& r : rows) n += r.size();
  return n;
}

void InteractionMatrix::validate() const {
  if (rows.size() != n_users) {
    throw ShapeError("matrix has " + std::to_string(rows.size()) + " rows for " + std::to_string(n_users) + " users");
  }
  if (!user_ids.empty() && user_ids.size() != n_users) throw ShapeError("user id map size mismatch");
  if (!item_ids.empty() && item_ids.size() != n_items) throw ShapeError("item id map size mismatch");
  for (std::size_t u = 0; u < rows.size(); ++u) {
    const auto& r = rows[u];
    for (std::size_t k = 0; k < r.size(); ++k) {
      if (r[k] < 0 || static_cast<std::size_t>(r[k]) >= n_items) {
        throw ShapeError("row " + std::to_string(u) + " has item index " + std::to_string(r[k]) + " outside [0, " +
                         std::to_string(n_items) + ")");
      }
      if (k > 0 && r[k] <= r[k - 1]) throw DataError("row " + std::to_string(u) + " is not strictly increasing");
    }
  }
}

InteractionMatrix preprocess(const std::vector<RawInteraction>& raw, const PreprocessOptions& options) {
  if (!(options.rating_threshold >= 0.0)) throw ParameterError("rating_threshold must be >= 0");

  std::unordered_map<std::string, std::uint32_t> user_lookup;
  std::unordered_map<std::string, std::uint32_t> item_lookup;
  std::vector<std::string> user_names;
  std::vector<std::string> item_names;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
  for (const auto& r : raw) {
    if (!(r.rating >= options.rating_threshold)) continue;
    auto [u, u_new] = user_lookup.try_emplace(r.user_id, static_cast<std::uint32_t>(user_names.size()));
    if (u_new) user_names.push_back(r.user_id);
    auto [i, i_new] = item_lookup.try_emplace(r.item_id, static_cast<std::uint32_t>(item_names.size()));
    if (i_new) item_names.push_back(r.item_id);
    pairs.emplace_back(u->second, i->second);
  }
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());

  std::vector<char> user_alive(user_names.size(), 1);
  std::vector<char> item_alive(item_names.size(), 1);
  for (bool changed = true; changed;) {
    changed = false;
    std::vector<std::size_t> item_count(item_names.size(), 0);
    for (auto [u, i] : pairs) {
      if (user_alive[u] && item_alive[i]) ++item_count[i];
    }
    for (std::size_t i = 0; i < item_names.size(); ++i) {
      if (item_alive[i] && item_count[i] < options.min_users_per_item) {
        item_alive[i] = 0;
        changed = true;
      }
    }
    std::vector<std::size_t> user_count(user_names.size(), 0);
    for (auto [u, i] : pairs) {
      if (user_alive[u] && item_alive[i]) ++user_count[u];
    }
    for (std::size_t u = 0; u < user_names.size(); ++u) {
      if (user_alive[u] && user_count[u] < options.min_items_per_user) {
        user_alive[u] = 0;
        changed = true;
      }
    }
  }

  // A user or item survives only if some live interaction references it.
  std::vector<char> user_used(user_names.size(), 0);
  std::vector<char> item_used(item_names.size(), 0);
  for (auto [u, i] : pairs) {
    if (user_alive[u] && item_alive[i]) user_used[u] = item_used[i] = 1;
  }

  auto dense_order = [](const std::vector<std::string>& names, const std::vector<char>& used) {
    std::vector<std::uint32_t> order;
    for (std::uint32_t k = 0; k < names.size(); ++k) {
      if (used[k]) order.push_back(k);
    }
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return id_less(names[a], names[b]); });
    return order;
  };
  const auto user_order = dense_order(user_names, user_used);
  const auto item_order = dense_order(item_names, item_used);
  if (user_order.empty() || item_order.empty()) throw DataError("no interactions survive preprocessing");

  std::vector<std::int64_t> user_index(user_names.size(), -1);
  std::vector<std::int64_t> item_index(item_names.size(), -1);
  InteractionMatrix m;
  m.n_users = user_order.size();
  m.n_items = item_order.size();
  m.rows.resize(m.n_users);
  for (std::size_t k = 0; k < user_order.size(); ++k) {
    user_index[user_order[k]] = static_cast<std::int64_t>(k);
    m.user_ids.push_back(user_names[user_order[k]]);
  }
  for (std::size_t k = 0; k < item_order.size(); ++k) {
    item_index[item_order[k]] = static_cast<std::int64_t>(k);
    m.item_ids.push_back(item_names[item_order[k]]);
  }
  for (auto [u, i] : pairs) {
    if (user_index[u] >= 0 && item_index[i] >= 0) {
      m.rows[static_cast<std::size_t>(user_index[u])].push_back(static_cast<ItemIndex>(item_index[i]));
    }
  }
  for (auto& r : m.rows) std::sort(r.begin(), r.end());
  return m;
}

// ---------------------------------------------------------------------------

std::size_t fold_in_count(std::size_t row_size, double fraction) {
  if (row_size < 2) return row_size;
  auto c = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(row_size) + 1e-9));
  return std::clamp<std::size_t>(c, 1, row_size - 1);
}

namespace {

constexpr std::uint64_t kSelectTag = 0x53454c;  // held-out user selection
constexpr std::uint64_t kFoldTag = 0x464f4c;    // per-user fold-in shuffle

template <typename T>
void shuffle_with(std::vector<T>& v, CounterRng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

}  // namespace

SplitSet split_strong_generalization(const InteractionMatrix& m, const SplitOptions& options) {
  if (!(options.fold_in_fraction > 0.0 && options.fold_in_fraction < 1.0)) {
    throw ParameterError("fold_in_fraction must lie in (0, 1)");
  }
  const std::size_t n_heldout = options.n_val_users + options.n_test_users;
  if (n_heldout >= m.n_users) {
    throw DataError("requested " + std::to_string(n_heldout) + " held-out users but only " +
                    std::to_string(m.n_users) + " users exist (training needs at least one)");
  }

  std::vector<std::pair<std::uint64_t, std::size_t>> eligible;
  for (std::size_t u = 0; u < m.n_users; ++u) {
    if (m.rows[u].size() >= 2) eligible.emplace_back(mix_key({options.seed, u, kSelectTag}), u);
  }
  if (eligible.size() < n_heldout) {
    throw DataError("only " + std::to_string(eligible.size()) + " users have two or more items; " +
                    std::to_string(n_heldout) + " held-out users requested");
  }
  std::sort(eligible.begin(), eligible.end());

  // 0 train, 1 validation, 2 test
  std::vector<int> role(m.n_users, 0);
  for (std::size_t k = 0; k < n_heldout; ++k) role[eligible[k].second] = k < options.n_val_users ? 1 : 2;

  std::vector<char> in_vocab(m.n_items, 0);
  for (std::size_t u = 0; u < m.n_users; ++u) {
    if (role[u] == 0) {
      for (auto i : m.rows[u]) in_vocab[static_cast<std::size_t>(i)] = 1;
    }
  }
  std::vector<ItemIndex> remap(m.n_items, -1);
  SplitSet out;
  for (std::size_t i = 0; i < m.n_items; ++i) {
    if (!in_vocab[i]) continue;
    remap[i] = static_cast<ItemIndex>(out.train.n_items++);
    if (!m.item_ids.empty()) out.train.item_ids.push_back(m.item_ids[i]);
  }
  if (out.train.n_items == 0) throw DataError("training users have no items");

  auto map_row = [&](const ItemList& row) {
    ItemList r;
    for (auto i : row) {
      if (remap[static_cast<std::size_t>(i)] >= 0) r.push_back(remap[static_cast<std::size_t>(i)]);
    }
    return r;
  };

  for (std::size_t u = 0; u < m.n_users; ++u) {
    const std::string uid = m.user_ids.empty() ? std::to_string(u) : m.user_ids[u];
    if (role[u] == 0) {
      out.train.rows.push_back(map_row(m.rows[u]));
      if (!m.user_ids.empty()) out.train.user_ids.push_back(uid);
      ++out.train.n_users;
      continue;
    }
    ItemList row = map_row(m.rows[u]);
    if (row.size() < 2) {
      ++out.dropped_heldout;
      continue;
    }
    CounterRng rng{options.seed, u, kFoldTag};
    shuffle_with(row, rng);
    const std::size_t c = fold_in_count(row.size(), options.fold_in_fraction);
    HeldOutUser h{uid, ItemList(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(c)),
                  ItemList(row.begin() + static_cast<std::ptrdiff_t>(c), row.end())};
    std::sort(h.fold_in.begin(), h.fold_in.end());
    std::sort(h.held_out.begin(), h.held_out.end());
    (role[u] == 1 ? out.validation : out.test).push_back(std::move(h));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {
constexpr std::uint64_t kUserFactorTag = 0x5546;
constexpr std::uint64_t kItemFactorTag = 0x4946;
constexpr std::uint64_t kCountTag = 0x434e54;
constexpr std::uint64_t kGumbelTag = 0x47554d;
}  // namespace

InteractionMatrix sample_from_factors(const Matrix& user_factors, const Matrix& item_factors,
                                      const std::vector<std::size_t>& items_per_user, std::uint64_t seed) {
  if (user_factors.cols() != item_factors.cols()) throw ShapeError("factor ranks differ");
  if (items_per_user.size() != static_cast<std::size_t>(user_factors.rows())) {
    throw ShapeError("one item count per user required");
  }
  const auto n_items = static_cast<std::size_t>(item_factors.rows());
  InteractionMatrix m;
  m.n_users = items_per_user.size();
  m.n_items = n_items;
  m.rows.resize(m.n_users);
  for (std::size_t u = 0; u < m.n_users; ++u) {
    if (items_per_user[u] > n_items) throw ParameterError("user item count exceeds the number of items");
    const Eigen::VectorXd logits = item_factors * user_factors.row(static_cast<Eigen::Index>(u)).transpose();
    // Gumbel top-k: the k largest perturbed logits are a draw without
    // replacement from softmax(logits).
    CounterRng rng{seed, u, kGumbelTag};
    std::vector<std::pair<double, ItemIndex>> keyed(n_items);
    for (std::size_t j = 0; j < n_items; ++j) {
      const double gumbel = -std::log(-std::log(rng.uniform_open()));
      keyed[j] = {logits(static_cast<Eigen::Index>(j)) + gumbel, static_cast<ItemIndex>(j)};
    }
    const auto k = static_cast<std::ptrdiff_t>(items_per_user[u]);
    std::partial_sort(keyed.begin(), keyed.begin() + k, keyed.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    auto& row = m.rows[u];
    for (std::ptrdiff_t t = 0; t < k; ++t) row.push_back(keyed[static_cast<std::size_t>(t)].second);
    std::sort(row.begin(), row.end());
  }
  m.user_ids.resize(m.n_users);
  m.item_ids.resize(m.n_items);
  for (std::size_t u = 0; u < m.n_users; ++u) m.user_ids[u] = std::to_string(u);
  for (std::size_t i = 0; i < m.n_items; ++i) m.item_ids[i] = std::to_string(i);
  return m;
}

InteractionMatrix generate_synthetic(const SyntheticOptions& o) {
  if (o.n_users == 0 || o.n_items == 0) throw ParameterError("synthetic data needs users and items");
  if (o.rank == 0 || o.rank > std::min(o.n_users, o.n_items)) {
    throw ParameterError("rank must lie in [1, min(n_users, n_items)]");
  }
  if (!(o.avg_items_per_user >= 2.0)) throw ParameterError("avg_items_per_user must be at least 2");
  if (o.avg_items_per_user > static_cast<double>(o.n_items)) {
    throw ParameterError("infeasible density: " + std::to_string(o.avg_items_per_user) + " items per user with only " +
                         std::to_string(o.n_items) + " items");
  }

  Matrix users(static_cast<Eigen::Index>(o.n_users), static_cast<Eigen::Index>(o.rank));
  Matrix items(static_cast<Eigen::Index>(o.n_items), static_cast<Eigen::Index>(o.rank));
  CounterRng user_rng{o.seed, kUserFactorTag};
  CounterRng item_rng{o.seed, kItemFactorTag};
  for (Eigen::Index k = 0; k < users.size(); ++k) users.data()[k] = user_rng.normal();
  for (Eigen::Index k = 0; k < items.size(); ++k) items.data()[k] = item_rng.normal();

  // Spread the exact interaction total over users; the remainder goes to a
  // seeded subset.
  const auto total = static_cast<std::size_t>(std::llround(o.avg_items_per_user * static_cast<double>(o.n_users)));
  std::vector<std::size_t> counts(o.n_users, total / o.n_users);
  std::vector<std::pair<std::uint64_t, std::size_t>> order;
  for (std::size_t u = 0; u < o.n_users; ++u) order.emplace_back(mix_key({o.seed, u, kCountTag}), u);
  std::sort(order.begin(), order.end());
  for (std::size_t k = 0; k < total % o.n_users; ++k) ++counts[order[k].second];

  return sample_from_factors(users, items, counts, o.seed);
}

// ---------------------------------------------------------------------------
// Text formats

namespace {

void write_items(std::ostream& out, const ItemList& items) {
  for (std::size_t k = 0; k < items.size(); ++k) {
    if (k) out << ' ';
    out << items[k];
  }
}

ItemList parse_items(std::string_view text, std::size_t n_items, std::size_t line_no) {
  ItemList items;
  std::istringstream is{std::string(text)};
  std::string tok;
  while (is >> tok) {
    auto v = parse_int<std::int64_t>(tok);
    if (!v || *v < 0 || static_cast<std::size_t>(*v) >= n_items) {
      throw FormatError("line " + std::to_string(line_no) + ": bad item index '" + tok + "'");
    }
    if (!items.empty() && *v <= items.back()) {
      throw FormatError("line " + std::to_string(line_no) + ": item indices must be strictly increasing");
    }
    items.push_back(static_cast<ItemIndex>(*v));
  }
  return items;
}

std::pair<std::size_t, std::size_t> read_header(std::istream& in, std::string_view magic) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty file, expected '" + std::string(magic) + "' header");
  std::istringstream is(line);
  std::string tag, version;
  std::size_t a = 0, b = 0;
  if (!(is >> tag >> version >> a >> b) || tag != magic) {
    throw FormatError("bad header '" + line + "', expected '" + std::string(magic) + " v1 ...'");
  }
  if (version != "v1") throw FormatError("unsupported " + std::string(magic) + " version " + version);
  return {a, b};
}

template <typename Fn>
void with_output(const std::filesystem::path& path, Fn&& fn) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  fn(out);
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

void write_dataset(std::ostream& out, const InteractionMatrix& m) {
  out << "cfsfl-data v1 " << m.n_users << ' ' << m.n_items << '\n';
  for (const auto& r : m.rows) {
    write_items(out, r);
    out << '\n';
  }
}

void write_dataset(const std::filesystem::path& path, const InteractionMatrix& m) {
  with_output(path, [&](std::ostream& out) { write_dataset(out, m); });
}

InteractionMatrix read_dataset(std::istream& in) {
  auto [n_users, n_items] = read_header(in, "cfsfl-data");
  InteractionMatrix m;
  m.n_users = n_users;
  m.n_items = n_items;
  m.rows.reserve(n_users);
  std::string line;
  for (std::size_t u = 0; u < n_users; ++u) {
    if (!std::getline(in, line)) {
      throw FormatError("expected " + std::to_string(n_users) + " user rows, found " + std::to_string(u));
    }
    m.rows.push_back(parse_items(line, n_items, u + 2));
  }
  return m;
}

InteractionMatrix read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  return read_dataset(in);
}

void write_heldout(std::ostream& out, const std::vector<HeldOutUser>& users, std::size_t n_items) {
  out << "cfsfl-heldout v1 " << users.size() << ' ' << n_items << '\n';
  for (const auto& u : users) {
    write_items(out, u.fold_in);
    out << " | ";
    write_items(out, u.held_out);
    out << '\n';
  }
}

void write_heldout(const std::filesystem::path& path, const std::vector<HeldOutUser>& users, std::size_t n_items) {
  with_output(path, [&](std::ostream& out) { write_heldout(out, users, n_items); });
}

std::vector<HeldOutUser> read_heldout(std::istream& in, std::size_t* n_items_out) {
  auto [n_users, n_items] = read_header(in, "cfsfl-heldout");
  if (n_items_out) *n_items_out = n_items;
  std::vector<HeldOutUser> users;
  users.reserve(n_users);
  std::string line;
  for (std::size_t u = 0; u < n_users; ++u) {
    if (!std::getline(in, line)) {
      throw FormatError("expected " + std::to_string(n_users) + " held-out rows, found " + std::to_string(u));
    }
    const auto bar = line.find('|');
    if (bar == std::string::npos) throw FormatError("line " + std::to_string(u + 2) + ": missing '|' separator");
    HeldOutUser h;
    h.user_id = std::to_string(u);
    h.fold_in = parse_items(std::string_view(line).substr(0, bar), n_items, u + 2);
    h.held_out = parse_items(std::string_view(line).substr(bar + 1), n_items, u + 2);
    users.push_back(std::move(h));
  }
  return users;
}

std::vector<HeldOutUser> read_heldout(const std::filesystem::path& path, std::size_t* n_items) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  return read_heldout(in, n_items);
}

}  // namespace cfsfl
