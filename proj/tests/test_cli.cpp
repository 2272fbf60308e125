#include <doctest.h>

#include <fstream>
#include <sstream>

#include "cfsfl/checkpoint.hpp"
#include "cfsfl/dataio.hpp"
#include "cfsfl/errors.hpp"
#include "cfsfl/loop_engine.hpp"
#include "cfsfl_cli/commands.hpp"
#include "cfsfl_cli/run_config.hpp"
#include "support.hpp"

using namespace cfsfl;
using namespace cfsfl::cli;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// A model small enough to train in well under a second.
std::vector<std::string> tiny_overrides(const fs::path& root) {
  return {"-s", "data.dir=" + (root / "data").string(),   "-s", "output.dir=" + (root / "run").string(),
          "-s", "synthetic.n_users=60",                    "-s", "synthetic.n_items=20",
          "-s", "synthetic.rank=2",                        "-s", "synthetic.avg_items_per_user=5",
          "-s", "split.n_val_users=10",                    "-s", "split.n_test_users=10",
          "-s", "model.hidden=8",                          "-s", "model.latent=4",
          "-s", "model.feedback_dim=4",                    "-s", "model.fusion_dim=4",
          "-s", "model.reward_hidden=4",                   "-s", "train.batch_size=16",
          "-s", "train.T=2",                               "-s", "seed=5"};
}

Outcome invoke_with(const std::string& verb, const fs::path& root, std::vector<std::string> extra = {}) {
  std::vector<std::string> args = {verb};
  for (auto& a : tiny_overrides(root)) args.push_back(a);
  for (auto& a : extra) args.push_back(a);
  return invoke(args);
}

}  // namespace

TEST_CASE("config rejects unknown keys and bad types") {
  CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json{{"train.TT", 3}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json{{"train.T", "3"}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json{{"train.T", -1}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json::array()), ConfigError);
  RunConfig c;
  CHECK_THROWS_AS(c.set("nope=1"), ConfigError);
  CHECK_THROWS_AS(c.set("train.T=x"), ConfigError);
  CHECK_THROWS_AS(c.set("train.validate=maybe"), ConfigError);
  CHECK_THROWS_AS(c.set("novalue"), ConfigError);
}

TEST_CASE("config overrides and json round trip") {
  RunConfig c = RunConfig::from_json(nlohmann::json{{"train.T", 3}, {"eval.k_list", {5, 10}}});
  CHECK(c.train_T == 3);
  CHECK(c.eval_k_list == std::vector<std::size_t>{5, 10});
  c.set("train.lr=0.01");
  c.set("eval.T_list=0,1,8");
  c.set("prep.synthetic=true");
  c.set("model.kind", "dae");
  CHECK(c.train_lr == 0.01);
  CHECK(c.eval_T_list == std::vector<std::size_t>{0, 1, 8});
  CHECK(c.prep_synthetic);
  const RunConfig back = RunConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(c.to_json().size() == RunConfig::keys().size());

  // Builders carry values through.
  CHECK(c.training_config().T == 3);
  CHECK(c.model_config(7).recommender.kind == RecommenderKind::dae);
  c.set("model.input_dropout_rate=1.5");
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("prep counts a fixture CSV exactly") {
  testing::TempDir dir("cli_prep");
  const auto r = invoke({"prep", CFSFL_TEST_DATA_DIR "/ratings_fixture.csv", "-o", (dir.path / "d").string(), "-s",
                      "prep.min_items_per_user=3", "-s", "split.n_val_users=1", "-s", "split.n_test_users=1"});
  INFO(r.err);
  REQUIRE(r.code == kExitOk);
  // Ratings >= 4 leave users 1-5 with 3, 2, 4, 3, 3 items; user 2 falls
  // below three and user 6 has nothing. Items 10..80 index as 0..7.
  CHECK(slurp(dir.path / "d" / files::dataset) == "cfsfl-data v1 4 8\n0 1 2\n1 2 3 4\n0 2 3\n5 6 7\n");
  const auto train = read_dataset(dir.path / "d" / files::train);
  const auto val = read_heldout(dir.path / "d" / files::validation);
  const auto test = read_heldout(dir.path / "d" / files::test);
  CHECK(train.n_users == 2);
  CHECK(val.size() + test.size() <= 2);
  CHECK(r.out.find("4") != std::string::npos);

  const auto report = invoke({"report", (dir.path / "d").string()});
  CHECK(report.code == kExitOk);
  CHECK(report.out.find("13") != std::string::npos);  // interactions
}

TEST_CASE("missing input exits 1 and names the path") {
  testing::TempDir dir("cli_missing");
  const auto r = invoke({"prep", "/no/such/ratings.csv", "-o", (dir.path / "d").string()});
  CHECK(r.code == kExitIo);
  CHECK(r.err.find("/no/such/ratings.csv") != std::string::npos);

  const auto t = invoke({"train", "-s", "data.dir=" + (dir.path / "nothing").string()});
  CHECK(t.code == kExitIo);
  CHECK(t.err.find("nothing") != std::string::npos);

  const auto c = invoke({"train", "-c", "/no/such/config.json"});
  CHECK(c.code == kExitIo);
  const auto k = invoke({"train", "-s", "bogus.key=1"});
  CHECK(k.code == kExitData);
  CHECK(k.err.find("bogus.key") != std::string::npos);
}

TEST_CASE("zero-epoch training emits only the final checkpoint") {
  testing::TempDir dir("cli_zero");
  REQUIRE(invoke_with("prep", dir.path, {"--synthetic"}).code == kExitOk);
  const auto r = invoke_with("train", dir.path,
                          {"-q", "-s", "train.stage1_epochs=0", "-s", "train.stage2_epochs=0", "-s",
                           "train.stage3_epochs=0"});
  INFO(r.err);
  REQUIRE(r.code == kExitOk);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir.path / "run")) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  CHECK(names == std::vector<std::string>{"final.cfsf", files::train_metrics});
  CHECK(slurp(dir.path / "run" / files::train_metrics) == "stage,epoch,metric,value\n");
}

TEST_CASE("training is reproducible and resume skips finished stages") {
  testing::TempDir dir("cli_train");
  REQUIRE(invoke_with("prep", dir.path, {"--synthetic"}).code == kExitOk);
  const std::vector<std::string> epochs = {"-q", "-s", "train.stage1_epochs=2", "-s", "train.stage2_epochs=1", "-s",
                                           "train.stage3_epochs=1"};
  auto r = invoke_with("train", dir.path, epochs);
  INFO(r.err);
  REQUIRE(r.code == kExitOk);
  const auto run_dir = dir.path / "run";
  for (const char* f : {"stage1.cfsf", "stage2.cfsf", "stage3.cfsf", "final.cfsf"}) CHECK(fs::exists(run_dir / f));
  const auto metrics = slurp(run_dir / files::train_metrics);
  const auto final_bytes = slurp(run_dir / "final.cfsf");

  REQUIRE(invoke_with("train", dir.path, epochs).code == kExitOk);
  CHECK(slurp(run_dir / files::train_metrics) == metrics);
  CHECK(slurp(run_dir / "final.cfsf") == final_bytes);

  // Resuming from the stage-1 checkpoint reruns stages 2 and 3 only.
  fs::copy_file(run_dir / "stage1.cfsf", dir.path / "s1.cfsf");
  fs::remove(run_dir / files::train_metrics);
  auto extra = epochs;
  extra.insert(extra.end(), {"--resume", (dir.path / "s1.cfsf").string()});
  r = invoke_with("train", dir.path, extra);
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("resuming after stage 1") != std::string::npos);
  CHECK(slurp(run_dir / "final.cfsf") == final_bytes);
  const auto resumed = slurp(run_dir / files::train_metrics);
  CHECK(resumed.find("\n1,") == std::string::npos);
  CHECK(resumed.find("\n2,1,") != std::string::npos);
  CHECK(resumed.find("\n3,1,") != std::string::npos);
  // Stages 2 and 3 of the resumed run log exactly what the full run logged.
  CHECK(metrics.find(resumed.substr(resumed.find('\n') + 1)) != std::string::npos);
}

TEST_CASE("eval: oracle checkpoint, vocabulary check, stable CSV") {
  testing::TempDir dir("cli_eval");
  const auto data = dir.path / "data";
  fs::create_directories(data);
  const std::vector<std::string> ids = {"a", "b", "c", "d", "e", "f"};
  {
    std::ofstream(data / files::item_ids) << "a\nb\nc\nd\ne\nf\n";
    InteractionMatrix train;
    train.n_users = 2;
    train.n_items = 6;
    train.rows = {{0, 1, 2}, {3, 4, 5}};
    write_dataset(data / files::train, train);
    write_dataset(data / files::dataset, train);
    const std::vector<HeldOutUser> test = {{"0", {0, 1}, {2, 3}}, {"1", {0}, {2, 3}}, {"2", {4, 5}, {2}}};
    write_heldout(data / files::test, test, 6);
    write_heldout(data / files::validation, test, 6);
  }

  RunConfig config;
  for (const char* kv : {"model.hidden=3", "model.latent=2", "model.feedback_dim=2", "model.fusion_dim=2",
                         "model.reward_hidden=2", "train.T=1"}) {
    config.set(kv);
  }
  // All weights zero and a decoder bias favouring items 2 and 3: every user's
  // held-out items rank first once fold-in items are excluded.
  auto model = make_model(config.model_config(6), 1);
  for (auto& [name, entry] : model.params) {
    for (double& v : entry.value.data()) v = 0.0;
  }
  model.params.at("theta.dec2.b")[2] = 5.0;
  model.params.at("theta.dec2.b")[3] = 4.0;
  const auto ckpt = dir.path / "oracle.cfsf";
  save_checkpoint(ckpt, {model.params, checkpoint_metadata(config, 3, 0, 6, item_fingerprint(ids)).dump()});

  const auto csv = dir.path / "eval.csv";
  auto r = invoke({"eval", ckpt.string(), "--data", data.string(), "--T", "0,1", "--k", "2,4", "--csv", csv.string()});
  INFO(r.err);
  REQUIRE(r.code == kExitOk);
  const auto text = slurp(csv);
  CHECK(text.rfind("split,metric,k,T,value,n_users\n", 0) == 0);
  CHECK(text.find("test,recall,2,0,1,3\n") != std::string::npos);
  CHECK(text.find("test,ndcg,4,1,1,3\n") != std::string::npos);
  std::size_t lines = 0;
  for (char ch : text) lines += ch == '\n';
  CHECK(lines == 1 + 2 * 2 * 2);

  REQUIRE(invoke({"eval", ckpt.string(), "--data", data.string(), "--T", "0,1", "--k", "2,4", "--csv", csv.string()})
              .code == kExitOk);
  CHECK(slurp(csv) == text);

  const auto rep = invoke({"report", csv.string()});
  CHECK(rep.code == kExitOk);

  // Same size, different ids.
  std::ofstream(data / files::item_ids) << "a\nb\nc\nd\ne\ng\n";
  r = invoke({"eval", ckpt.string(), "--data", data.string(), "--csv", csv.string()});
  CHECK(r.code == kExitData);
  CHECK(r.err.find("vocabulary") != std::string::npos);
  std::ofstream(data / files::item_ids) << "a\nb\nc\n";
  CHECK(invoke({"eval", ckpt.string(), "--data", data.string()}).code == kExitData);
}

TEST_CASE("fingerprint depends on ids and order") {
  CHECK(item_fingerprint({"a", "b"}) == item_fingerprint({"a", "b"}));
  CHECK(item_fingerprint({"a", "b"}) != item_fingerprint({"b", "a"}));
  CHECK(item_fingerprint({"ab"}) != item_fingerprint({"a", "b"}));
}
