#pragma once

// The four verbs of the cfsfl tool. Each returns a process exit code:
// 0 success, 1 I/O failure, 2 bad data / config / vocabulary, 3 divergence.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cfsfl/checkpoint.hpp"
#include "cfsfl_cli/run_config.hpp"

namespace cfsfl::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitIo = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitDiverged = 3;

struct EvalRequest {
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> csv_out;  // default: <output.dir>/eval_<split>.csv
};

int cmd_prep(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_train(const RunConfig& config, const std::optional<std::filesystem::path>& resume, bool quiet,
              std::ostream& out, std::ostream& err);
int cmd_eval(const RunConfig& config, const EvalRequest& request, std::ostream& out, std::ostream& err);
int cmd_report(const std::filesystem::path& target, std::ostream& out, std::ostream& err);

/// Parses argv-style arguments (without the program name) and dispatches.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Prepared-dataset layout inside data.dir.
namespace files {
inline constexpr const char* dataset = "dataset.txt";
inline constexpr const char* train = "train.txt";
inline constexpr const char* validation = "validation.txt";
inline constexpr const char* test = "test.txt";
inline constexpr const char* item_ids = "item_ids.txt";
inline constexpr const char* train_metrics = "train_metrics.csv";
}  // namespace files

/// FNV-1a over the newline-joined item ids; ties a checkpoint to a vocabulary.
std::string item_fingerprint(const std::vector<std::string>& item_ids);

/// Checkpoint metadata written by cmd_train.
nlohmann::json checkpoint_metadata(const RunConfig& config, int completed_stage, std::size_t stage_epochs,
                                   std::size_t n_items, const std::string& fingerprint);

}  // namespace cfsfl::cli
