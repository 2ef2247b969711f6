// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.


#pragma once

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "monalign/align.hpp"
#include "monalign/gradcheck.hpp"
#include "monalign/io.hpp"
#include "monalign/model.hpp"
#include "monalign/synth_data.hpp"
#include "monalign/train.hpp"

namespace monalign::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,       // bad flags, invalid configuration, malformed inputs
  kNumerical = 2,   // training diverged or a gradient check failed
  kIo = 3,
};

/// Parsed command line. Every hyperparameter default is the shipped
/// default; tests read them from a default-constructed instance.
struct CommandConfig {
  std::string command;

  std::filesystem::path out;
  std::filesystem::path data;
  std::filesystem::path alignment;
  std::uint64_t seed = 0;

  data::DatasetConfig dataset;

  double delta = 0.01;
  double lambda = 1e-5;
  double learning_rate = 1e-3;
  double anneal_factor = 0.3;
  int epochs = 300;

  std::vector<double> lambdas = train::default_lambda_grid();
  std::vector<std::uint64_t> seeds = {0};
  unsigned threads = 0;  // 0: one per hardware thread

  std::optional<std::string> corrupt_op;  // gradcheck fixture, hidden flag

  train::TrainConfig train_config() const {
    train::TrainConfig tc;
    tc.epochs = epochs;
    tc.learning_rate = learning_rate;
    tc.anneal_factor = anneal_factor;
    tc.align.delta = delta;
    tc.align.lambda = lambda;
    tc.seed = seed;
    return tc;
  }
};

class UsageError : public Error {
 public:
  using Error::Error;
};

/// Parses `args` (without the program name). Throws UsageError on unknown
/// flags, missing required flags, or malformed values; `--help` sets
/// `help_text` and returns an empty command.
inline CommandConfig parse_args(const std::vector<std::string>& args,
                                std::string* help_text = nullptr) {
  CommandConfig c;
  CLI::App app{"Monotonic alignment regularizer toolkit", "monalign"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--out", c.out, "Dataset JSON path")->required();
  gen->add_option("--seed", c.dataset.seed, "Random seed");
  gen->add_option("--vocab", c.dataset.vocab_size, "Vocabulary size K");
  gen->add_option("--frame-dim", c.dataset.frame_dim, "Frame dimension F");
  gen->add_option("--max-duration", c.dataset.max_duration, "Largest token duration");
  gen->add_option("--noise", c.dataset.noise_std, "Frame noise standard deviation");
  gen->add_option("--min-length", c.dataset.min_length, "Shortest token sequence");
  gen->add_option("--max-length", c.dataset.max_length, "Longest token sequence");
  gen->add_option("--n-train", c.dataset.n_train, "Training examples");
  gen->add_option("--n-val", c.dataset.n_val, "Validation examples");
  gen->add_option("--n-test", c.dataset.n_test, "Test examples");

  auto add_training = [&](CLI::App* sub) {
    sub->add_option("--data", c.data, "Dataset JSON path")->required();
    sub->add_option("--out", c.out, "Output directory")->required();
    sub->add_option("--delta", c.delta, "Margin amplification");
    sub->add_option("--epochs", c.epochs, "Training epochs");
    sub->add_option("--lr", c.learning_rate, "Adam learning rate");
    sub->add_option("--anneal", c.anneal_factor, "Learning-rate anneal factor");
  };
  auto* tr = app.add_subcommand("train", "Train one model");
  add_training(tr);
  tr->add_option("--lambda", c.lambda, "Alignment loss weight");
  tr->add_option("--seed", c.seed, "Random seed");

  auto* sw = app.add_subcommand("sweep", "Train one model per lambda and seed");
  add_training(sw);
  sw->add_option("--lambdas", c.lambdas, "Lambda grid")->delimiter(',');
  sw->add_option("--seeds", c.seeds, "Seeds")->delimiter(',');
  sw->add_option("--threads", c.threads, "Worker threads (0 = all cores)");

  auto* an = app.add_subcommand("analyze", "Report monotonicity of an alignment CSV");
  an->add_option("--alignment", c.alignment, "Alignment CSV path")->required();
  an->add_option("--delta", c.delta, "Margin amplification");

  auto* gc = app.add_subcommand("gradcheck", "Check every gradient by finite differences");
  gc->add_option("--seed", c.seed, "Random seed");
  gc->add_option("--corrupt-op", c.corrupt_op)->group("");

  std::vector<const char*> argv{"monalign"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    if (help_text) *help_text = app.help();
    return {};
  } catch (const CLI::ParseError& e) {
    throw UsageError(e.what());
  }
  c.command = app.get_subcommands().front()->get_name();
  return c;
}

namespace detail {

inline void require_file(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) {
    throw IoError("input file '" + path.string() + "' does not exist");
  }
}

inline void prepare_out_dir(const std::filesystem::path& dir) {
  if (std::filesystem::is_directory(dir)) return;
  io::require_parent_dir(dir);
  std::error_code ec;
  std::filesystem::create_directory(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

inline model::ModelConfig model_for(const data::Dataset& ds) {
  model::ModelConfig mc;
  mc.vocab_size = ds.table.vocab_size();
  mc.frame_dim = ds.table.frame_dim();
  return mc;
}

inline int gen_data(const CommandConfig& c, std::ostream& out) {
  c.dataset.validate();
  io::require_parent_dir(c.out);
  const auto ds = data::generate_dataset(c.dataset, c.out);
  out << "wrote " << c.out.string() << " (" << ds.train.size() << "/"
      << ds.val.size() << "/" << ds.test.size() << " examples)\n";
  return kOk;
}

inline int train_one(const CommandConfig& c, std::ostream& out, std::ostream& err) {
  const auto tc = c.train_config();
  tc.validate();
  require_file(c.data);
  prepare_out_dir(c.out);
  const auto ds = data::load_dataset(c.data);
  const auto log = train::train(ds, model_for(ds), tc);
  io::write_text_file(c.out / "train_log.csv", train::format_train_log(log));
  if (log.diverged()) {
    err << "training diverged at epoch " << *log.diverged_epoch << "\n";
    return kNumerical;
  }
  model::save_checkpoint(c.out / "checkpoint.json", log.params);
  const auto& last = log.records.back();
  out << "epochs " << log.records.size() << " val_lt " << io::format_real(last.val_lt)
      << " val_violation_rate " << io::format_real(last.val_violation_rate) << "\n";
  return kOk;
}

inline int sweep(const CommandConfig& c, std::ostream& out) {
  auto base = c.train_config();
  base.validate();
  require_file(c.data);
  prepare_out_dir(c.out);
  const auto ds = data::load_dataset(c.data);
  const unsigned threads =
      c.threads > 0 ? c.threads : std::max(1u, std::thread::hardware_concurrency());
  const auto report = train::sweep_lambda(ds, model_for(ds), base, c.lambdas,
                                          c.seeds, threads);
  io::write_text_file(c.out / "sweep.csv", train::format_sweep_report(report));
  io::write_text_file(c.out / "sweep_runs.csv", train::format_sweep_runs(report));
  out << train::format_sweep_report(report);
  return kOk;
}

inline int analyze(const CommandConfig& c, std::ostream& out) {
  if (!(c.delta >= 0.0)) throw ConfigError("delta must be >= 0");
  require_file(c.alignment);
  const auto a = read_alignment_csv(c.alignment);
  const auto r = monotonicity_report(a, c.delta);
  nlohmann::json j;
  j["n_inputs"] = a.n_inputs();
  j["n_frames"] = a.n_frames();
  j["delta"] = c.delta;
  j["loss"] = r.loss;
  j["violation_count"] = r.violation_count;
  j["violation_rate"] = r.violation_rate;
  j["max_violation"] = r.max_violation;
  j["centroid_range"] = {r.centroid_min, r.centroid_max};
  out << io::dump_json(j) << "\n";
  return kOk;
}

inline int gradcheck(const CommandConfig& c, std::ostream& out, std::ostream& err) {
  std::optional<ad::Op> corrupt;
  if (c.corrupt_op) {
    corrupt = check::op_from_name(*c.corrupt_op);
    if (!corrupt) throw ConfigError("unknown op '" + *c.corrupt_op + "'");
  }
  std::vector<std::string> failed;
  for (const auto& r : check::check_all(c.seed, corrupt)) {
    out << (r.passed() ? "PASS " : "FAIL ") << r.name << " [" << r.shape
        << "] max_rel_error " << io::format_real(r.max_rel_error) << " (< "
        << io::format_real(r.tolerance) << ")\n";
    if (!r.passed() &&
        std::find(failed.begin(), failed.end(), r.name) == failed.end()) {
      failed.push_back(r.name);
    }
  }
  if (failed.empty()) return kOk;
  err << "gradient check failed for:";
  for (const auto& f : failed) err << ' ' << f;
  err << "\n";
  return kNumerical;
}

}  // namespace detail

/// Runs a parsed command and maps library errors to exit codes.
inline int run(const CommandConfig& c, std::ostream& out, std::ostream& err) {
  try {
    if (c.command == "gen-data") return detail::gen_data(c, out);
    if (c.command == "train") return detail::train_one(c, out, err);
    if (c.command == "sweep") return detail::sweep(c, out);
    if (c.command == "analyze") return detail::analyze(c, out);
    if (c.command == "gradcheck") return detail::gradcheck(c, out, err);
    err << "unknown command '" << c.command << "'\n";
    return kUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << "\n";
    return kNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  }
}

/// parse_args followed by run.
inline int main_entry(const std::vector<std::string>& args, std::ostream& out,
                      std::ostream& err) {
  CommandConfig c;
  try {
    std::string help;
    c = parse_args(args, &help);
    if (c.command.empty()) {
      out << help;
      return kOk;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  }
  return run(c, out, err);
}

}  // namespace monalign::cli
