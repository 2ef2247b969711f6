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

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <exception>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "monalign/align.hpp"
#include "monalign/autodiff.hpp"
#include "monalign/error.hpp"
#include "monalign/io.hpp"
#include "monalign/model.hpp"
#include "monalign/synth_data.hpp"

namespace monalign::train {

struct TrainConfig {
  int epochs = 300;
  double learning_rate = 1e-3;
  double anneal_factor = 0.3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  AlignConfig align;
  std::uint64_t seed = 0;
  /// kExcised drops the alignment term from the graph (used to show that
  /// lambda = 0 is inert).
  model::AlignmentTerm alignment_term = model::AlignmentTerm::kInGraph;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (!(anneal_factor > 0.0)) throw ConfigError("anneal_factor must be > 0");
    align.validate();
  }
};

/// Learning rate for 1-based `epoch`: multiplied by anneal_factor once the
/// epoch passes ceil(E/3) and again past ceil(2E/3).
inline double learning_rate_at(const TrainConfig& config, int epoch) {
  const int e = config.epochs;
  const int first = (e + 2) / 3;
  const int second = (2 * e + 2) / 3;
  double lr = config.learning_rate;
  if (epoch > first) lr *= config.anneal_factor;
  if (epoch > second) lr *= config.anneal_factor;
  return lr;
}

struct EpochRecord {
  int epoch = 0;
  double train_lt = 0.0;
  double val_lt = 0.0;
  double train_la = 0.0;
  double val_la = 0.0;
  double val_violation_rate = 0.0;
  double centroid_corr = 0.0;
  double lr = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

struct TrainLog {
  std::vector<EpochRecord> records;
  model::ToyModelParams params;
  double lambda = 0.0;
  /// Epoch whose losses became non-finite; records stop before it.
  std::optional<int> diverged_epoch;

  bool diverged() const { return diverged_epoch.has_value(); }
  std::vector<double> column(double EpochRecord::*field) const {
    std::vector<double> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.*field);
    return out;
  }
};

/// Adam with bias correction.
class Adam {
 public:
  Adam(const model::ToyModelParams& params, double beta1, double beta2,
       double epsilon)
      : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
    params.visit([&](const char*, const ad::Tensor& t, bool) {
      first_.emplace_back(t.size(), 0.0);
      second_.emplace_back(t.size(), 0.0);
    });
  }

  void step(model::ToyModelParams& params, const std::vector<ad::Tensor>& grads,
            double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    std::size_t k = 0;
    params.visit([&](const char*, ad::Tensor& w, bool) {
      auto& m = first_[k];
      auto& v = second_[k];
      const auto g = grads[k].data();
      auto x = w.data();
      for (std::size_t i = 0; i < x.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        x[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + epsilon_);
      }
      ++k;
    });
  }

 private:
  double beta1_, beta2_, epsilon_;
  int t_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

/// Pearson correlation; 0 when either side is constant.
inline double pearson(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  if (x.size() != y.size() || x.size() < 2) return 0.0;
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sxy += (x[k] - mx) * (y[k] - my);
    sxx += (x[k] - mx) * (x[k] - mx);
    syy += (y[k] - my) * (y[k] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

struct Evaluation {
  double task_loss = 0.0;
  double align_loss = 0.0;
  double violation_rate = 0.0;
  double centroid_corr = 0.0;
};

/// Teacher-forced averages over `examples`. Centroid correlation averages
/// over examples whose gold centroids are not constant.
inline Evaluation evaluate(ad::Tape& tape, const model::ToyModelParams& params,
                           const std::vector<data::Example>& examples,
                           const AlignConfig& align) {
  Evaluation ev;
  if (examples.empty()) return ev;
  std::size_t corr_count = 0;
  for (const auto& ex : examples) {
    const auto r = model::forward_teacher_forced(tape, params, ex.tokens,
                                                 ex.frames, align);
    ev.task_loss += r.task_loss;
    ev.align_loss += r.align_loss;
    ev.violation_rate += monotonicity_report(r.alignment, align.delta).violation_rate;
    const auto gold = centroids(ex.gold_alignment).centroids;
    const auto got = centroids(r.alignment).centroids;
    const auto [lo, hi] = std::minmax_element(gold.begin(), gold.end());
    if (*lo != *hi) {
      ev.centroid_corr += pearson(got, gold);
      ++corr_count;
    }
  }
  const double n = static_cast<double>(examples.size());
  ev.task_loss /= n;
  ev.align_loss /= n;
  ev.violation_rate /= n;
  ev.centroid_corr = corr_count ? ev.centroid_corr / static_cast<double>(corr_count) : 0.0;
  return ev;
}

/// Seeded per-example Adam training with one validation pass per epoch.
/// Non-finite losses stop training and mark the log as diverged.
inline TrainLog train(const data::Dataset& dataset,
                      const model::ModelConfig& model_config,
                      const TrainConfig& config) {
  config.validate();
  model_config.validate();
  if (dataset.train.empty() || dataset.val.empty()) {
    throw ConfigError("train and val splits must be nonempty");
  }
  if (model_config.frame_dim != dataset.table.frame_dim() ||
      model_config.vocab_size != dataset.table.vocab_size()) {
    throw ConfigError("model config does not match dataset vocabulary/frame size");
  }
  auto init_rng = data::seeded_stream(config.seed, 100);
  auto order_rng = data::seeded_stream(config.seed, 101);
  TrainLog log;
  log.lambda = config.align.lambda;
  log.params = model::init_params(model_config, init_rng);
  Adam adam(log.params, config.beta1, config.beta2, config.epsilon);
  ad::Tape tape;
  std::vector<std::size_t> order(dataset.train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = learning_rate_at(config, epoch);
    std::shuffle(order.begin(), order.end(), order_rng);
    try {
      for (std::size_t idx : order) {
        const auto& ex = dataset.train[idx];
        auto g = model::loss_and_gradients(tape, log.params, ex.tokens, ex.frames,
                                           config.align, config.alignment_term);
        rec.train_lt += g.result.task_loss;
        rec.train_la += g.result.align_loss;
        for (const auto& t : g.params)
          for (double v : t.data())
            if (!std::isfinite(v)) throw NumericalError("non-finite gradient");
        adam.step(log.params, g.params, rec.lr);
      }
      const auto ev = evaluate(tape, log.params, dataset.val, config.align);
      rec.val_lt = ev.task_loss;
      rec.val_la = ev.align_loss;
      rec.val_violation_rate = ev.violation_rate;
      rec.centroid_corr = ev.centroid_corr;
    } catch (const NumericalError&) {
      log.diverged_epoch = epoch;
      return log;
    } catch (const InvalidAlignment&) {
      log.diverged_epoch = epoch;
      return log;
    }
    const double n = static_cast<double>(dataset.train.size());
    rec.train_lt /= n;
    rec.train_la /= n;
    if (!std::isfinite(rec.train_lt) || !std::isfinite(rec.train_la) ||
        !std::isfinite(rec.val_lt) || !std::isfinite(rec.val_la)) {
      log.diverged_epoch = epoch;
      return log;
    }
    log.records.push_back(rec);
  }
  return log;
}

/// Median; 0 for an empty input.
inline double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  return values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

/// Number of points above factor x the median of a centered window
/// (truncated at the edges).
inline int spike_count(std::span<const double> curve, int window = 11,
                       double factor = 1.5) {
  if (window < 1) throw ConfigError("spike window must be >= 1");
  const auto n = static_cast<std::ptrdiff_t>(curve.size());
  const std::ptrdiff_t half = window / 2;
  int spikes = 0;
  for (std::ptrdiff_t t = 0; t < n; ++t) {
    const auto lo = std::max<std::ptrdiff_t>(0, t - half);
    const auto hi = std::min<std::ptrdiff_t>(n, t + half + 1);
    const double m = median({curve.begin() + lo, curve.begin() + hi});
    if (curve[t] > factor * m) ++spikes;
  }
  return spikes;
}

/// Number of trailing epochs covered by `tail_fraction` of the log.
inline std::size_t tail_length(std::size_t epochs, double tail_fraction) {
  if (!(tail_fraction > 0.0) || tail_fraction > 1.0) {
    throw ConfigError("tail_fraction must lie in (0, 1]");
  }
  const auto tail = static_cast<std::size_t>(
      std::ceil(static_cast<double>(epochs) * tail_fraction - 1e-9));
  if (tail < 1) throw ConfigError("tail holds no epochs");
  return tail;
}

struct GapSummary {
  double mean_val_lt = 0.0;
  double mean_gap = 0.0;
};

/// Averages val L_T and (val L_T - train L_T) over the last tail_fraction
/// of epochs.
inline GapSummary generalization_gap(const TrainLog& log,
                                     double tail_fraction = 0.2) {
  const std::size_t tail = tail_length(log.records.size(), tail_fraction);
  GapSummary s;
  for (std::size_t k = log.records.size() - tail; k < log.records.size(); ++k) {
    s.mean_val_lt += log.records[k].val_lt;
    s.mean_gap += log.records[k].val_lt - log.records[k].train_lt;
  }
  s.mean_val_lt /= static_cast<double>(tail);
  s.mean_gap /= static_cast<double>(tail);
  return s;
}

inline constexpr double kMonotonicThreshold = 0.05;

/// First epoch whose val violation rate is <= tau; epochs + 1 when none is.
inline int first_monotonic_epoch(const TrainLog& log,
                                 double tau = kMonotonicThreshold,
                                 std::optional<int> budget = {}) {
  for (const auto& r : log.records) {
    if (r.val_violation_rate <= tau) return r.epoch;
  }
  return budget.value_or(static_cast<int>(log.records.size())) + 1;
}

struct PathEvents {
  bool repeat = false;
  bool skip = false;
};

/// Repeat: a consecutive centroid drop of more than 1 position. Skip: a
/// consecutive rise of more than max_duration + 1 positions.
inline PathEvents path_events(std::span<const double> centroid_path,
                              int max_duration) {
  PathEvents ev;
  for (std::size_t j = 1; j < centroid_path.size(); ++j) {
    const double step = centroid_path[j] - centroid_path[j - 1];
    if (step < -1.0) ev.repeat = true;
    if (step > static_cast<double>(max_duration) + 1.0) ev.skip = true;
  }
  return ev;
}

struct RobustnessScore {
  int repeat_events = 0;
  int skip_events = 0;
  double affected_example_fraction = 0.0;
};

/// Scores precomputed alignments, each event kind counted at most once per
/// example.
inline RobustnessScore score_alignments(const std::vector<AlignmentMatrix>& alignments,
                                        int max_duration) {
  RobustnessScore s;
  int affected = 0;
  for (const auto& a : alignments) {
    const auto ev = path_events(centroids(a).centroids, max_duration);
    s.repeat_events += ev.repeat;
    s.skip_events += ev.skip;
    affected += ev.repeat || ev.skip;
  }
  s.affected_example_fraction =
      alignments.empty() ? 0.0
                         : static_cast<double>(affected) /
                               static_cast<double>(alignments.size());
  return s;
}

/// Free-running decodes of every example with a ceil(1.5 d_max N) step
/// budget, scored for repeat and skip events.
inline RobustnessScore robustness_score(const model::ToyModelParams& params,
                                        const std::vector<data::Example>& examples,
                                        int max_duration) {
  ad::Tape tape;
  std::vector<AlignmentMatrix> alignments;
  alignments.reserve(examples.size());
  for (const auto& ex : examples) {
    const auto steps = model::free_running_budget(ex.n_inputs(), max_duration);
    alignments.push_back(
        model::decode_free_running(tape, params, ex.tokens, steps).alignment);
  }
  return score_alignments(alignments, max_duration);
}

inline const std::vector<double>& default_lambda_grid() {
  static const std::vector<double> grid{0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2};
  return grid;
}

struct SweepRun {
  double lambda = 0.0;
  std::uint64_t seed = 0;
  TrainLog log;
  double final_val_lt = 0.0;
  double mean_val_violation_rate = 0.0;  // last 20% of epochs
  double mean_val_lt = 0.0;              // last 20% of epochs
  double mean_gap = 0.0;
  int spike_count = 0;                   // on the val L_T curve
  int first_monotonic_epoch = 0;
  RobustnessScore robustness;
};

struct SweepRow {
  double lambda = 0.0;
  std::size_t seeds = 0;
  double final_val_lt = 0.0;
  double mean_val_violation_rate = 0.0;
  double mean_val_lt = 0.0;
  double mean_gap = 0.0;
  double spike_count = 0.0;
  double first_monotonic_epoch = 0.0;
  double affected_example_fraction = 0.0;
  bool diverged = false;
};

/// Rows are medians over the seeds that did not diverge.
struct SweepReport {
  std::vector<SweepRow> rows;
  std::vector<SweepRun> runs;
};

inline SweepRun summarize_run(double lambda, std::uint64_t seed, TrainLog log,
                              int epochs, const data::Dataset& dataset) {
  SweepRun run;
  run.lambda = lambda;
  run.seed = seed;
  run.first_monotonic_epoch = first_monotonic_epoch(log, kMonotonicThreshold, epochs);
  if (!log.diverged() && !log.records.empty()) {
    run.final_val_lt = log.records.back().val_lt;
    const std::size_t tail = tail_length(log.records.size(), 0.2);
    for (std::size_t k = log.records.size() - tail; k < log.records.size(); ++k)
      run.mean_val_violation_rate += log.records[k].val_violation_rate;
    run.mean_val_violation_rate /= static_cast<double>(tail);
    const auto gap = generalization_gap(log, 0.2);
    run.mean_val_lt = gap.mean_val_lt;
    run.mean_gap = gap.mean_gap;
    const auto curve = log.column(&EpochRecord::val_lt);
    if (curve.size() >= 11) run.spike_count = spike_count(curve);
    run.robustness = robustness_score(log.params, dataset.test,
                                      dataset.config.max_duration);
  }
  run.log = std::move(log);
  return run;
}

/// One independent run per (lambda, seed). Runs are spread over `threads`
/// workers; results are assembled in grid order regardless of completion
/// order.
inline SweepReport sweep_lambda(const data::Dataset& dataset,
                                const model::ModelConfig& model_config,
                                const TrainConfig& base,
                                const std::vector<double>& lambdas,
                                const std::vector<std::uint64_t>& seeds,
                                unsigned threads = 1) {
  if (lambdas.empty()) throw ConfigError("lambda grid is empty");
  if (seeds.empty()) throw ConfigError("seed list is empty");
  for (double l : lambdas) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("lambda must be >= 0");
  }
  const std::size_t total = lambdas.size() * seeds.size();
  std::vector<SweepRun> runs(total);
  std::vector<std::exception_ptr> errors(total);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k; (k = next.fetch_add(1)) < total;) {
      try {
        TrainConfig cfg = base;
        cfg.align.lambda = lambdas[k / seeds.size()];
        cfg.seed = seeds[k % seeds.size()];
        runs[k] = summarize_run(cfg.align.lambda, cfg.seed,
                                train(dataset, model_config, cfg), cfg.epochs,
                                dataset);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(total)));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  SweepReport report;
  for (std::size_t li = 0; li < lambdas.size(); ++li) {
    SweepRow row;
    row.lambda = lambdas[li];
    std::vector<double> fv, vr, mv, gp, sc, fm, af;
    for (std::size_t si = 0; si < seeds.size(); ++si) {
      const auto& run = runs[li * seeds.size() + si];
      fm.push_back(run.first_monotonic_epoch);
      if (run.log.diverged()) {
        row.diverged = true;
        continue;
      }
      ++row.seeds;
      fv.push_back(run.final_val_lt);
      vr.push_back(run.mean_val_violation_rate);
      mv.push_back(run.mean_val_lt);
      gp.push_back(run.mean_gap);
      sc.push_back(run.spike_count);
      af.push_back(run.robustness.affected_example_fraction);
    }
    row.final_val_lt = median(fv);
    row.mean_val_violation_rate = median(vr);
    row.mean_val_lt = median(mv);
    row.mean_gap = median(gp);
    row.spike_count = median(sc);
    row.first_monotonic_epoch = median(fm);
    row.affected_example_fraction = median(af);
    report.rows.push_back(row);
  }
  report.runs = std::move(runs);
  return report;
}

/// Nonzero-lambda row with the lowest median tail violation rate (first in
/// grid order on ties); nullopt when every nonzero row diverged.
inline std::optional<std::size_t> best_regularized_row(const SweepReport& report) {
  std::optional<std::size_t> best;
  for (std::size_t k = 0; k < report.rows.size(); ++k) {
    const auto& r = report.rows[k];
    if (r.lambda == 0.0 || r.seeds == 0) continue;
    if (!best || r.mean_val_violation_rate <
                     report.rows[*best].mean_val_violation_rate) {
      best = k;
    }
  }
  return best;
}

inline constexpr const char* kTrainLogHeader =
    "epoch,train_lt,val_lt,train_la,val_la,val_violation_rate,centroid_corr,lr";

inline std::string format_train_log(const TrainLog& log) {
  using io::format_real;
  std::string out = std::string(kTrainLogHeader) + "\n";
  for (const auto& r : log.records) {
    out += std::to_string(r.epoch) + "," + format_real(r.train_lt) + "," +
           format_real(r.val_lt) + "," + format_real(r.train_la) + "," +
           format_real(r.val_la) + "," + format_real(r.val_violation_rate) + "," +
           format_real(r.centroid_corr) + "," + format_real(r.lr) + "\n";
  }
  return out;
}

inline constexpr const char* kSweepHeader =
    "lambda,seeds,final_val_lt,mean_val_violation_rate,mean_val_lt,mean_gap,"
    "spike_count,first_monotonic_epoch,affected_example_fraction,diverged";

inline std::string format_sweep_report(const SweepReport& report) {
  using io::format_real;
  std::string out = std::string(kSweepHeader) + "\n";
  for (const auto& r : report.rows) {
    out += format_real(r.lambda) + "," + std::to_string(r.seeds) + "," +
           format_real(r.final_val_lt) + "," +
           format_real(r.mean_val_violation_rate) + "," +
           format_real(r.mean_val_lt) + "," + format_real(r.mean_gap) + "," +
           format_real(r.spike_count) + "," +
           format_real(r.first_monotonic_epoch) + "," +
           format_real(r.affected_example_fraction) + "," +
           (r.diverged ? "1" : "0") + "\n";
  }
  return out;
}

inline constexpr const char* kSweepRunsHeader =
    "lambda,seed,diverged_epoch,final_val_lt,mean_val_violation_rate,mean_val_lt,"
    "mean_gap,spike_count,first_monotonic_epoch,repeat_events,skip_events,"
    "affected_example_fraction";

inline std::string format_sweep_runs(const SweepReport& report) {
  using io::format_real;
  std::string out = std::string(kSweepRunsHeader) + "\n";
  for (const auto& r : report.runs) {
    out += format_real(r.lambda) + "," + std::to_string(r.seed) + "," +
           std::to_string(r.log.diverged_epoch.value_or(0)) + "," +
           format_real(r.final_val_lt) + "," +
           format_real(r.mean_val_violation_rate) + "," +
           format_real(r.mean_val_lt) + "," + format_real(r.mean_gap) + "," +
           std::to_string(r.spike_count) + "," +
           std::to_string(r.first_monotonic_epoch) + "," +
           std::to_string(r.robustness.repeat_events) + "," +
           std::to_string(r.robustness.skip_events) + "," +
           format_real(r.robustness.affected_example_fraction) + "\n";
  }
  return out;
}

}  // namespace monalign::train
