#include "cfsfl_cli/commands.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "cfsfl/errors.hpp"
#include "cfsfl/evalkit.hpp"

namespace cfsfl::cli {

namespace fs = std::filesystem;

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// Lossless and locale-independent.
std::string exact(double v) { return fmt("%.17g", v); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

struct PreparedData {
  InteractionMatrix train;
  std::vector<std::string> item_ids;
  std::string fingerprint;
};

PreparedData load_prepared(const fs::path& dir) {
  PreparedData d;
  d.train = read_dataset(dir / files::train);
  d.item_ids = read_lines(dir / files::item_ids);
  if (d.item_ids.size() != d.train.n_items) {
    throw DataError(dir.string() + ": item_ids.txt lists " + std::to_string(d.item_ids.size()) +
                    " items but train.txt has " + std::to_string(d.train.n_items));
  }
  d.train.item_ids = d.item_ids;
  d.fingerprint = item_fingerprint(d.item_ids);
  return d;
}

std::vector<HeldOutUser> load_heldout(const fs::path& path, std::size_t n_items) {
  std::size_t m = 0;
  auto users = read_heldout(path, &m);
  if (m != n_items) {
    throw DataError(path.string() + " declares " + std::to_string(m) + " items but the training vocabulary has " +
                    std::to_string(n_items));
  }
  return users;
}

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const TrainingDiverged& e) {
    err << "error: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    // Format, data, config, parameter and shape problems.
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
}

void print_summary(std::ostream& out, const std::string& name, const InteractionMatrix& m, std::size_t n_val,
                   std::size_t n_test) {
  const double cells = static_cast<double>(m.n_users) * static_cast<double>(m.n_items);
  const double density = cells > 0 ? 100.0 * static_cast<double>(m.nnz()) / cells : 0.0;
  out << "dataset                 " << name << '\n'
      << "# of users              " << m.n_users << '\n'
      << "# of items              " << m.n_items << '\n'
      << "# of interactions       " << m.nnz() << '\n'
      << "# of held-out users     " << n_val + n_test << " (" << n_val << " validation, " << n_test << " test)\n"
      << "% of sparsity           " << fmt("%.2f", density) << "%\n";
}

// Checks a checkpoint against a model skeleton built from its own config.
ModelBundle model_from_checkpoint(const Checkpoint& ckpt, const RunConfig& config, std::size_t n_items) {
  ModelBundle model = make_model(config.model_config(n_items), config.seed);
  for (const auto& name : model.params.names()) {
    if (!ckpt.params.contains(name)) throw FormatError("checkpoint lacks tensor " + name);
    if (!ckpt.params.at(name).same_shape(model.params.at(name))) {
      throw FormatError("tensor " + name + " has shape " + shape_string(ckpt.params.at(name).dims()) +
                        ", expected " + shape_string(model.params.at(name).dims()) + " (vocabulary mismatch?)");
    }
  }
  if (ckpt.params.names() != model.params.names()) throw FormatError("checkpoint has unexpected extra tensors");
  model.params = ckpt.params;
  return model;
}

nlohmann::json parse_metadata(const Checkpoint& ckpt) {
  if (ckpt.metadata_json.empty()) return nlohmann::json::object();
  try {
    auto j = nlohmann::json::parse(ckpt.metadata_json);
    if (!j.is_object()) throw FormatError("checkpoint metadata is not a JSON object");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
}

void append_report_rows(std::ostream& csv, const LossReport& r) {
  auto row = [&](const char* metric, double v) {
    csv << r.stage << ',' << r.epoch << ',' << metric << ',' << exact(v) << '\n';
  };
  if (r.stage != 2) row("loss_rec", r.loss_rec);
  if (r.stage == 3) row("loss_collab", r.loss_collab);
  if (r.stage != 1) {
    row("loss_adv", r.loss_adv);
    row("mean_reward_expert", r.mean_reward_expert);
    row("mean_reward_policy", r.mean_reward_policy);
  }
  if (r.val_ndcg100) row("val_ndcg100", *r.val_ndcg100);
}

std::size_t stage_epochs(const TrainingConfig& t, int stage) {
  return stage == 1 ? t.stage1_epochs : stage == 2 ? t.stage2_epochs : t.stage3_epochs;
}

}  // namespace

std::string item_fingerprint(const std::vector<std::string>& item_ids) {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&](unsigned char c) {
    h ^= c;
    h *= 1099511628211ULL;
  };
  for (const auto& id : item_ids) {
    for (unsigned char c : id) feed(c);
    feed('\n');
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

nlohmann::json checkpoint_metadata(const RunConfig& config, int completed_stage, std::size_t epochs,
                                   std::size_t n_items, const std::string& fingerprint) {
  nlohmann::json j;
  j["completed_stage"] = completed_stage;
  j["stage_epochs"] = epochs;
  j["seed"] = config.seed;
  j["n_items"] = n_items;
  j["item_fingerprint"] = fingerprint;
  j["config"] = config.to_json();
  return j;
}

// ---------------------------------------------------------------------------

int cmd_prep(const RunConfig& config, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    config.validate();
    InteractionMatrix full;
    std::string name;
    if (config.prep_synthetic) {
      full = generate_synthetic(config.synthetic_options());
      name = "synthetic(rank " + std::to_string(config.synthetic_rank) + ")";
    } else {
      if (config.data_input.empty()) throw ConfigError("prep needs data.input (a CSV path) or prep.synthetic=true");
      const LoadResult loaded = load_interactions(config.data_input);
      for (const auto& w : loaded.warnings) err << "warning: " << w << '\n';
      full = preprocess(loaded.records, config.preprocess_options());
      name = fs::path(config.data_input).filename().string();
    }
    const SplitSet split = split_strong_generalization(full, config.split_options());

    const fs::path dir = config.data_dir;
    ensure_dir(dir);
    write_dataset(dir / files::dataset, full);
    write_dataset(dir / files::train, split.train);
    write_heldout(dir / files::validation, split.validation, split.train.n_items);
    write_heldout(dir / files::test, split.test, split.train.n_items);
    write_lines(dir / files::item_ids, split.train.item_ids);

    print_summary(out, name, full, split.validation.size(), split.test.size());
    out << "train users / items     " << split.train.n_users << " / " << split.train.n_items << '\n';
    if (split.dropped_heldout > 0) {
      out << "dropped held-out users  " << split.dropped_heldout << " (fewer than 2 items in train vocabulary)\n";
    }
    out << "seed                    " << config.seed << '\n'
        << "written to              " << dir.string() << '\n';
    return kExitOk;
  });
}

int cmd_train(const RunConfig& config, const std::optional<fs::path>& resume, bool quiet, std::ostream& out,
              std::ostream& err) {
  return guarded(err, [&] {
    config.validate();
    const fs::path data_dir = config.data_dir;
    const PreparedData data = load_prepared(data_dir);
    std::vector<HeldOutUser> validation;
    if (config.train_validate) validation = load_heldout(data_dir / files::validation, data.train.n_items);

    const TrainingConfig tcfg = config.training_config();
    ModelBundle model = make_model(config.model_config(data.train.n_items), config.seed);
    int first_stage = 1;
    if (resume) {
      const Checkpoint ckpt = load_checkpoint(*resume);
      const auto meta = parse_metadata(ckpt);
      if (meta.contains("item_fingerprint") && meta["item_fingerprint"] != data.fingerprint) {
        throw DataError("checkpoint " + resume->string() + " was trained on a different item vocabulary");
      }
      model = model_from_checkpoint(ckpt, config, data.train.n_items);
      first_stage = meta.value("completed_stage", 0) + 1;
      out << "resuming after stage " << first_stage - 1 << " from " << resume->string() << '\n';
    }

    const fs::path out_dir = config.output_dir;
    ensure_dir(out_dir);
    const fs::path csv_path = out_dir / files::train_metrics;
    const bool append = resume.has_value() && fs::exists(csv_path);
    std::ofstream csv(csv_path, std::ios::binary | (append ? std::ios::app : std::ios::trunc));
    if (!csv) throw IoError("cannot open " + csv_path.string() + " for writing");
    if (!append) csv << "stage,epoch,metric,value\n";

    TrainHooks hooks;
    hooks.on_epoch = [&](const LossReport& r) {
      append_report_rows(csv, r);
      csv.flush();
      if (!quiet) {
        err << "stage " << r.stage << " epoch " << r.epoch << '/' << stage_epochs(tcfg, r.stage);
        if (r.stage != 2) err << " loss_rec=" << fmt("%.4f", r.loss_rec);
        if (r.stage != 1) {
          err << " loss_adv=" << fmt("%.4f", r.loss_adv) << " r_expert=" << fmt("%.3f", r.mean_reward_expert)
              << " r_policy=" << fmt("%.3f", r.mean_reward_policy);
        }
        if (r.val_ndcg100) err << " val_ndcg@100=" << fmt("%.4f", *r.val_ndcg100);
        err << '\n';
      }
    };
    if (config.train_validate && !validation.empty()) {
      const std::size_t kList[] = {100};
      const EvaluationOptions opts{config.eval_batch_size, 0};
      hooks.validate = [&, kList, opts](const ModelBundle& m, int stage) {
        return evaluate_model(m, validation, stage == 1 ? 0 : tcfg.T, kList, opts).value(Metric::ndcg, 100);
      };
    }
    hooks.on_stage_end = [&](int stage, const ModelBundle& m) {
      const std::size_t epochs = stage_epochs(tcfg, stage);
      if (epochs == 0) return;
      const fs::path path = out_dir / ("stage" + std::to_string(stage) + ".cfsf");
      save_checkpoint(path, {m.params, checkpoint_metadata(config, stage, epochs, data.train.n_items,
                                                           data.fingerprint).dump()});
      out << "stage " << stage << " complete; checkpoint " << path.string() << '\n';
    };

    TrainResult result = train(tcfg, data.train, std::move(model), first_stage, hooks);
    const fs::path final_path = out_dir / "final.cfsf";
    save_checkpoint(final_path, {result.model.params, checkpoint_metadata(config, 3, tcfg.stage3_epochs,
                                                                          data.train.n_items, data.fingerprint)
                                                          .dump()});
    out << "final checkpoint " << final_path.string() << "\nmetrics " << csv_path.string() << "\nseed "
        << config.seed << '\n';
    return kExitOk;
  });
}

int cmd_eval(const RunConfig& base_config, const EvalRequest& request, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Checkpoint ckpt = load_checkpoint(request.checkpoint);
    const auto meta = parse_metadata(ckpt);
    // The checkpoint's own config fixes the architecture; paths, split and
    // evaluation settings come from the invocation.
    RunConfig config = meta.contains("config") ? RunConfig::from_json(meta["config"]) : base_config;
    config.data_dir = base_config.data_dir;
    config.output_dir = base_config.output_dir;
    config.eval_k_list = base_config.eval_k_list;
    config.eval_T_list = base_config.eval_T_list;
    config.eval_split = base_config.eval_split;
    config.eval_batch_size = base_config.eval_batch_size;
    config.validate();

    const fs::path data_dir = config.data_dir;
    const auto item_ids = read_lines(data_dir / files::item_ids);
    if (meta.contains("n_items") && meta["n_items"].get<std::size_t>() != item_ids.size()) {
      throw DataError("vocabulary mismatch: checkpoint has " + std::to_string(meta["n_items"].get<std::size_t>()) +
                      " items, dataset " + data_dir.string() + " has " + std::to_string(item_ids.size()));
    }
    if (meta.contains("item_fingerprint") && meta["item_fingerprint"] != item_fingerprint(item_ids)) {
      throw DataError("vocabulary mismatch: checkpoint item ids differ from " + (data_dir / files::item_ids).string());
    }
    const ModelBundle model = model_from_checkpoint(ckpt, config, item_ids.size());
    const auto split_file = config.eval_split == "test" ? files::test : files::validation;
    const auto users = load_heldout(data_dir / split_file, item_ids.size());

    std::vector<std::size_t> t_list = config.eval_T_list;
    if (t_list.empty()) t_list.push_back(config.train_T);
    const EvaluationOptions opts{config.eval_batch_size, 0};

    const fs::path csv_path =
        request.csv_out ? *request.csv_out : fs::path(config.output_dir) / ("eval_" + config.eval_split + ".csv");
    if (csv_path.has_parent_path()) ensure_dir(csv_path.parent_path());
    std::ostringstream csv;
    csv << "split,metric,k,T,value,n_users\n";

    out << "split=" << config.eval_split << " users=" << users.size() << " seed=" << config.seed << '\n';
    out << std::left << std::setw(4) << "T" << std::setw(8) << "metric";
    for (auto k : config.eval_k_list) out << std::setw(10) << ("@" + std::to_string(k));
    out << '\n';
    for (auto T : t_list) {
      const EvaluationResult res = evaluate_model(model, users, T, config.eval_k_list, opts);
      for (Metric metric : {Metric::recall, Metric::ndcg}) {
        out << std::setw(4) << T << std::setw(8) << to_string(metric);
        for (auto k : config.eval_k_list) out << std::setw(10) << fmt("%.4f", res.value(metric, k));
        out << '\n';
      }
      for (const auto& m : res.metrics) {
        csv << config.eval_split << ',' << to_string(m.metric) << ',' << m.k << ',' << T << ',' << exact(m.value)
            << ',' << m.n_users_evaluated << '\n';
      }
      if (res.skipped_users > 0) out << "(T=" << T << ": " << res.skipped_users << " users without held-out items)\n";
    }
    std::ofstream file(csv_path, std::ios::binary | std::ios::trunc);
    if (!file) throw IoError("cannot open " + csv_path.string() + " for writing");
    file << csv.str();
    if (!file) throw IoError("failed writing " + csv_path.string());
    out << "wrote " << csv_path.string() << '\n';
    return kExitOk;
  });
}

int cmd_report(const fs::path& target, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (fs::is_directory(target)) {
      const auto full = read_dataset(target / files::dataset);
      std::size_t n_val = 0, n_test = 0;
      if (fs::exists(target / files::validation)) n_val = read_heldout(target / files::validation).size();
      if (fs::exists(target / files::test)) n_test = read_heldout(target / files::test).size();
      print_summary(out, target.filename().string(), full, n_val, n_test);
      return kExitOk;
    }
    const auto lines = read_lines(target);
    if (lines.empty()) throw FormatError(target.string() + " is empty");
    auto split_csv = [](const std::string& line) {
      std::vector<std::string> f;
      std::stringstream ss(line);
      for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
      return f;
    };
    if (lines[0] == "split,metric,k,T,value,n_users") {
      // metric@k rows x T columns
      std::map<std::string, std::map<std::size_t, double>> table;
      std::vector<std::string> row_order;
      std::vector<std::size_t> ts;
      for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto f = split_csv(lines[i]);
        if (f.size() != 6) throw FormatError(target.string() + ":" + std::to_string(i + 1) + ": expected 6 fields");
        const std::string key = f[0] + " " + f[1] + "@" + f[2];
        const std::size_t T = std::stoul(f[3]);
        if (!table.contains(key)) row_order.push_back(key);
        table[key][T] = std::stod(f[4]);
        if (std::find(ts.begin(), ts.end(), T) == ts.end()) ts.push_back(T);
      }
      std::sort(ts.begin(), ts.end());
      out << std::left << std::setw(24) << "metric";
      for (auto T : ts) out << std::setw(10) << ("T=" + std::to_string(T));
      out << '\n';
      for (const auto& key : row_order) {
        out << std::setw(24) << key;
        for (auto T : ts) {
          const auto& row = table[key];
          out << std::setw(10) << (row.contains(T) ? fmt("%.4f", row.at(T)) : std::string("-"));
        }
        out << '\n';
      }
      return kExitOk;
    }
    if (lines[0] == "stage,epoch,metric,value") {
      struct Summary {
        std::size_t epochs = 0;
        std::map<std::string, double> first, last;
        double best_val = -1.0;
        std::size_t best_epoch = 0;
      };
      std::map<int, Summary> stages;
      for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto f = split_csv(lines[i]);
        if (f.size() != 4) throw FormatError(target.string() + ":" + std::to_string(i + 1) + ": expected 4 fields");
        auto& s = stages[std::stoi(f[0])];
        const std::size_t epoch = std::stoul(f[1]);
        const double v = std::stod(f[3]);
        s.epochs = std::max(s.epochs, epoch);
        if (!s.first.contains(f[2])) s.first[f[2]] = v;
        s.last[f[2]] = v;
        if (f[2] == "val_ndcg100" && v > s.best_val) {
          s.best_val = v;
          s.best_epoch = epoch;
        }
      }
      for (const auto& [stage, s] : stages) {
        out << "stage " << stage << ": " << s.epochs << " epochs\n";
        for (const auto& [metric, last] : s.last) {
          out << "  " << std::left << std::setw(20) << metric << fmt("%.4f", s.first.at(metric)) << " -> "
              << fmt("%.4f", last) << '\n';
        }
        if (s.best_val >= 0) out << "  best val_ndcg100     " << fmt("%.4f", s.best_val) << " (epoch " << s.best_epoch << ")\n";
      }
      return kExitOk;
    }
    throw FormatError(target.string() + ": unrecognized header '" + lines[0] + "'");
  });
}

// ---------------------------------------------------------------------------

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"cfsfl: collaborative filtering with a synthetic feedback loop"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  auto add_config_options = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "JSON config with flat dotted keys");
    cmd->add_option("-s,--set", overrides, "Override a config key, e.g. --set train.T=4")->allow_extra_args(false);
  };

  auto* prep = app.add_subcommand("prep", "Ingest interactions (or synthesize), filter, split, write dataset files");
  add_config_options(prep);
  std::string input;
  std::string data_dir;
  prep->add_option("input", input, "Interaction CSV (userId,itemId,rating[,timestamp])");
  prep->add_flag("--synthetic", "Generate low-rank synthetic data instead of reading a CSV");
  prep->add_option("-o,--out", data_dir, "Output directory (data.dir)");

  auto* train_cmd = app.add_subcommand("train", "Run the three training stages");
  add_config_options(train_cmd);
  std::string resume;
  bool quiet = false;
  train_cmd->add_option("--resume", resume, "Continue after the stage recorded in this checkpoint");
  train_cmd->add_flag("-q,--quiet", quiet, "No per-epoch progress on stderr");

  auto* eval_cmd = app.add_subcommand("eval", "Top-k metrics of a checkpoint on held-out users");
  add_config_options(eval_cmd);
  std::string checkpoint;
  std::string t_list;
  std::string k_list;
  std::string split_name;
  std::string csv_out;
  eval_cmd->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", data_dir, "Prepared dataset directory (data.dir)");
  eval_cmd->add_option("--T", t_list, "Comma-separated unroll lengths (eval.T_list)");
  eval_cmd->add_option("--k", k_list, "Comma-separated cutoffs (eval.k_list)");
  eval_cmd->add_option("--split", split_name, "test or validation (eval.split)");
  eval_cmd->add_option("--csv", csv_out, "Output CSV path");

  auto* report = app.add_subcommand("report", "Summarize a metrics CSV or a prepared dataset directory");
  std::string target;
  report->add_option("target", target, "metrics CSV or dataset directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitData;
  }

  if (report->parsed()) return cmd_report(target, out, err);

  RunConfig config;
  try {
    if (!config_path.empty()) config = RunConfig::load(config_path);
    for (const auto& o : overrides) config.set(o);
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }

  try {
    if (!data_dir.empty()) config.data_dir = data_dir;
    if (prep->parsed()) {
      if (!input.empty()) config.data_input = input;
      if (prep->count("--synthetic") > 0) config.prep_synthetic = true;
      return cmd_prep(config, out, err);
    }
    if (train_cmd->parsed()) {
      return cmd_train(config, resume.empty() ? std::nullopt : std::optional<fs::path>(resume), quiet, out, err);
    }
    if (!t_list.empty()) config.set("eval.T_list", t_list);
    if (!k_list.empty()) config.set("eval.k_list", k_list);
    if (!split_name.empty()) config.eval_split = split_name;
    EvalRequest req{checkpoint, csv_out.empty() ? std::nullopt : std::optional<fs::path>(csv_out)};
    return cmd_eval(config, req, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
}

}  // namespace cfsfl::cli
