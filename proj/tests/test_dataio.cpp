#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "cfsfl/dataio.hpp"
#include "cfsfl/errors.hpp"
#include "cfsfl/random.hpp"
#include "support.hpp"

using namespace cfsfl;

namespace {

// Naive preprocessing: sets of surviving pairs, filters re-applied until
// nothing changes. Ids sort numerically when both parse, numbers first.
struct NaiveResult {
  std::vector<std::string> users, items;
  std::set<std::pair<std::string, std::string>> pairs;
};

bool numeric(const std::string& s) { return !s.empty() && std::all_of(s.begin(), s.end(), ::isdigit); }

bool naive_less(const std::string& a, const std::string& b) {
  if (numeric(a) && numeric(b)) {
    auto x = std::stoull(a), y = std::stoull(b);
    return x != y ? x < y : a < b;
  }
  if (numeric(a) != numeric(b)) return numeric(a);
  return a < b;
}

NaiveResult naive_preprocess(const std::vector<RawInteraction>& raw, const PreprocessOptions& o) {
  NaiveResult r;
  for (const auto& x : raw) {
    if (x.rating >= o.rating_threshold) r.pairs.insert({x.user_id, x.item_id});
  }
  for (;;) {
    std::map<std::string, std::size_t> per_user, per_item;
    for (const auto& [u, i] : r.pairs) ++per_user[u], ++per_item[i];
    auto before = r.pairs.size();
    std::erase_if(r.pairs, [&](const auto& p) { return per_item[p.second] < o.min_users_per_item; });
    per_user.clear();
    for (const auto& [u, i] : r.pairs) ++per_user[u];
    std::erase_if(r.pairs, [&](const auto& p) { return per_user[p.first] < o.min_items_per_user; });
    if (r.pairs.size() == before) break;
  }
  std::set<std::string> us, is;
  for (const auto& [u, i] : r.pairs) us.insert(u), is.insert(i);
  r.users.assign(us.begin(), us.end());
  r.items.assign(is.begin(), is.end());
  std::sort(r.users.begin(), r.users.end(), naive_less);
  std::sort(r.items.begin(), r.items.end(), naive_less);
  return r;
}

std::string id_for(std::uint64_t v, bool allow_alpha) {
  if (allow_alpha && v % 7 == 0) return "x" + std::to_string(v);
  return std::to_string(v);
}

}  // namespace

TEST_CASE("parse_interactions detects header and counts malformed rows") {
  std::istringstream with_header("userId,movieId,rating,timestamp\n1,10,4.5,100\n\n2,20,3,200\n");
  auto r = parse_interactions(with_header);
  CHECK(r.had_header);
  CHECK(r.data_rows == 2);
  REQUIRE(r.records.size() == 2);
  CHECK(r.records[0].user_id == "1");
  CHECK(r.records[0].item_id == "10");
  CHECK(r.records[0].rating == 4.5);
  CHECK(r.records[0].timestamp == 100);

  std::istringstream no_header("1,10,5\n2,20,1,7\n");
  r = parse_interactions(no_header);
  CHECK_FALSE(r.had_header);
  CHECK(r.records.size() == 2);
  CHECK_FALSE(r.records[0].timestamp.has_value());

  // 1 bad row out of 200 is tolerated (0.5%)...
  std::string body;
  for (int k = 0; k < 199; ++k) body += std::to_string(k) + ",1,4\n";
  body += "oops,1\n";
  std::istringstream tolerated(body);
  r = parse_interactions(tolerated);
  CHECK(r.malformed_count == 1);
  CHECK(r.records.size() == 199);
  CHECK_FALSE(r.warnings.empty());

  // ...2 out of 100 is not.
  body.clear();
  for (int k = 0; k < 98; ++k) body += std::to_string(k) + ",1,4\n";
  body += "a,b,c\n1,2,3,notatime\n";
  std::istringstream rejected(body);
  CHECK_THROWS_AS(parse_interactions(rejected), FormatError);
}

TEST_CASE("load_interactions reports missing files") {
  CHECK_THROWS_AS(load_interactions("/nonexistent/ratings.csv"), IoError);
}

TEST_CASE("preprocess matches a naive fixpoint filter") {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    CounterRng rng{seed, 0xDA7A};
    std::vector<RawInteraction> raw;
    const std::size_t n = 50 + rng.below(300);
    for (std::size_t k = 0; k < n; ++k) {
      raw.push_back({id_for(rng.below(30), true), id_for(rng.below(25) * 3 + 1, seed % 2 == 0),
                     static_cast<double>(rng.below(11)) / 2.0, std::nullopt});
    }
    PreprocessOptions o;
    o.rating_threshold = 2.5;
    o.min_items_per_user = 1 + rng.below(5);
    o.min_users_per_item = rng.below(4);
    const auto want = naive_preprocess(raw, o);
    if (want.pairs.empty()) {
      CHECK_THROWS_AS(preprocess(raw, o), DataError);
      continue;
    }
    const auto got = preprocess(raw, o);
    CAPTURE(seed);
    REQUIRE_NOTHROW(got.validate());
    CHECK(got.user_ids == want.users);
    CHECK(got.item_ids == want.items);
    std::set<std::pair<std::string, std::string>> got_pairs;
    for (std::size_t u = 0; u < got.n_users; ++u) {
      for (auto i : got.rows[u]) got_pairs.insert({got.user_ids[u], got.item_ids[static_cast<std::size_t>(i)]});
    }
    CHECK(got_pairs == want.pairs);
  }
}

TEST_CASE("preprocess orders ids numerically") {
  std::vector<RawInteraction> raw = {{"10", "b", 5, {}}, {"9", "a", 5, {}}, {"x", "100", 5, {}}, {"9", "20", 5, {}}};
  PreprocessOptions o;
  o.min_items_per_user = 1;
  const auto m = preprocess(raw, o);
  CHECK(m.user_ids == std::vector<std::string>{"9", "10", "x"});
  CHECK(m.item_ids == std::vector<std::string>{"20", "100", "a", "b"});
  CHECK(m.rows[0] == ItemList{0, 2});
}

TEST_CASE("split_strong_generalization invariants") {
  SyntheticOptions so;
  so.n_users = 300;
  so.n_items = 60;
  so.rank = 3;
  so.avg_items_per_user = 6;
  so.seed = 3;
  const auto m = generate_synthetic(so);
  SplitOptions o{40, 30, 0.8, 11};
  const auto s = split_strong_generalization(m, o);
  REQUIRE_NOTHROW(s.train.validate());
  CHECK(s.validation.size() + s.test.size() + s.dropped_heldout == 70);
  CHECK(s.train.n_users == 230);

  std::set<std::string> seen(s.train.user_ids.begin(), s.train.user_ids.end());
  CHECK(seen.size() == s.train.n_users);
  for (const auto* part : {&s.validation, &s.test}) {
    for (const auto& h : *part) {
      CHECK(seen.insert(h.user_id).second);  // disjoint users
      CHECK(!h.fold_in.empty());
      CHECK(!h.held_out.empty());
      CHECK(std::is_sorted(h.fold_in.begin(), h.fold_in.end()));
      ItemList both;
      std::set_intersection(h.fold_in.begin(), h.fold_in.end(), h.held_out.begin(), h.held_out.end(),
                            std::back_inserter(both));
      CHECK(both.empty());
      const auto n = h.fold_in.size() + h.held_out.size();
      CHECK(h.fold_in.size() == fold_in_count(n, 0.8));
      for (auto i : h.fold_in) CHECK(static_cast<std::size_t>(i) < s.train.n_items);
      for (auto i : h.held_out) CHECK(static_cast<std::size_t>(i) < s.train.n_items);

      // The union maps back to the user's original items inside the vocabulary.
      const auto u = static_cast<std::size_t>(std::stoul(h.user_id));
      std::set<std::string> original, recovered;
      std::set<std::string> vocab(s.train.item_ids.begin(), s.train.item_ids.end());
      for (auto i : m.rows[u]) {
        if (vocab.count(m.item_ids[static_cast<std::size_t>(i)])) original.insert(m.item_ids[static_cast<std::size_t>(i)]);
      }
      for (auto i : h.fold_in) recovered.insert(s.train.item_ids[static_cast<std::size_t>(i)]);
      for (auto i : h.held_out) recovered.insert(s.train.item_ids[static_cast<std::size_t>(i)]);
      CHECK(original == recovered);
    }
  }

  CHECK(split_strong_generalization(m, o) == s);
  o.seed = 12;
  CHECK_FALSE(split_strong_generalization(m, o) == s);
  CHECK_THROWS_AS(split_strong_generalization(m, {200, 100, 0.8, 0}), DataError);
  CHECK_THROWS_AS(split_strong_generalization(m, {1, 1, 1.0, 0}), ParameterError);
}

TEST_CASE("fold_in_count examples") {
  CHECK(fold_in_count(10, 0.8) == 8);
  CHECK(fold_in_count(5, 0.8) == 4);
  CHECK(fold_in_count(2, 0.8) == 1);
  CHECK(fold_in_count(2, 0.1) == 1);
  CHECK(fold_in_count(3, 0.99) == 2);
}

TEST_CASE("synthetic data shape and determinism") {
  SyntheticOptions o;
  o.n_users = 50;
  o.n_items = 30;
  o.rank = 4;
  o.avg_items_per_user = 5.5;
  o.seed = 9;
  const auto a = generate_synthetic(o);
  REQUIRE_NOTHROW(a.validate());
  CHECK(a.nnz() == 275);
  for (const auto& r : a.rows) CHECK((r.size() == 5 || r.size() == 6));
  CHECK(generate_synthetic(o) == a);
  o.seed = 10;
  CHECK_FALSE(generate_synthetic(o) == a);

  o.avg_items_per_user = 31;
  CHECK_THROWS_AS(generate_synthetic(o), ParameterError);
  o.avg_items_per_user = 5;
  o.rank = 31;
  CHECK_THROWS_AS(generate_synthetic(o), ParameterError);
}

TEST_CASE("sample_from_factors follows the softmax of the logits") {
  // Rank-1 factors with user factor 1 give logits equal to the item factors.
  const int M = 4;
  Matrix items(M, 1);
  for (int j = 0; j < M; ++j) items(j, 0) = std::log(static_cast<double>(j + 1));
  const std::size_t N = 20000;
  Matrix users = Matrix::Ones(static_cast<Eigen::Index>(N), 1);
  const auto m = sample_from_factors(users, items, std::vector<std::size_t>(N, 1), 5);
  std::vector<double> freq(M, 0.0);
  for (const auto& r : m.rows) freq[static_cast<std::size_t>(r[0])] += 1.0 / N;
  for (int j = 0; j < M; ++j) CHECK(freq[static_cast<std::size_t>(j)] == doctest::Approx((j + 1) / 10.0).epsilon(0.05));
}

TEST_CASE("dataset text format round trip and exact bytes") {
  InteractionMatrix m;
  m.n_users = 3;
  m.n_items = 5;
  m.rows = {{0, 3}, {}, {1, 2, 4}};
  std::ostringstream out;
  write_dataset(out, m);
  CHECK(out.str() == "cfsfl-data v1 3 5\n0 3\n\n1 2 4\n");
  std::istringstream in(out.str());
  CHECK(read_dataset(in) == m);

  for (const char* bad : {"", "cfsfl-data v2 1 2\n0\n", "nope v1 1 2\n0\n", "cfsfl-data v1 2 3\n0\n",
                          "cfsfl-data v1 1 3\n3\n", "cfsfl-data v1 1 3\n1 0\n", "cfsfl-data v1 1 3\n1 x\n"}) {
    CAPTURE(bad);
    std::istringstream b(bad);
    CHECK_THROWS_AS(read_dataset(b), FormatError);
  }
}

TEST_CASE("held-out text format round trip") {
  std::vector<HeldOutUser> users = {{"0", {1, 4}, {2}}, {"1", {0}, {3, 4}}};
  std::ostringstream out;
  write_heldout(out, users, 5);
  CHECK(out.str() == "cfsfl-heldout v1 2 5\n1 4 | 2\n0 | 3 4\n");
  std::istringstream in(out.str());
  std::size_t n_items = 0;
  const auto back = read_heldout(in, &n_items);
  CHECK(n_items == 5);
  REQUIRE(back.size() == 2);
  CHECK(back[0].fold_in == users[0].fold_in);
  CHECK(back[1].held_out == users[1].held_out);

  std::istringstream missing_bar("cfsfl-heldout v1 1 5\n1 2 3\n");
  CHECK_THROWS_AS(read_heldout(missing_bar), FormatError);
}

TEST_CASE("file round trip through the filesystem") {
  testing::TempDir dir("dataio");
  const auto m = testing::toy_rows(7, 9);
  InteractionMatrix im;
  im.n_users = 7;
  im.n_items = 9;
  im.rows = m;
  write_dataset(dir.path / "d.txt", im);
  CHECK(read_dataset(dir.path / "d.txt") == im);
  CHECK_THROWS_AS(read_dataset(dir.path / "missing.txt"), IoError);
}
