#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "cfsfl/diffcore.hpp"
#include "cfsfl/loop_engine.hpp"
#include "cfsfl/random.hpp"

namespace cfsfl::testing {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double scale = 1.0) {
  CounterRng rng{seed, 0x7e57};
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * (2.0 * rng.uniform() - 1.0);
  return m;
}

// Small dimensions keep finite differences fast and well conditioned.
inline ModelConfig toy_config(std::size_t n_items) {
  ModelConfig c = ModelConfig::for_items(n_items);
  c.recommender.hidden = 7;
  c.recommender.latent = 3;
  c.recommender.feedback_dim = 4;
  c.virtual_user.feedback_dim = 4;
  c.virtual_user.fusion_dim = 5;
  c.virtual_user.reward_hidden = 6;
  return c;
}

// Deterministic toy observations: user u holds items with (u + j) % 3 != 0.
inline std::vector<ItemList> toy_rows(std::size_t n_users, std::size_t n_items) {
  std::vector<ItemList> rows(n_users);
  for (std::size_t u = 0; u < n_users; ++u) {
    for (std::size_t j = 0; j < n_items; ++j) {
      if ((u + j) % 3 != 0) rows[u].push_back(static_cast<ItemIndex>(j));
    }
  }
  return rows;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("cfsfl_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

}  // namespace cfsfl::testing
