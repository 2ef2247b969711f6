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
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "monalign/autodiff.hpp"
#include "monalign/model.hpp"
#include "monalign/synth_data.hpp"

namespace monalign::check {

inline constexpr double kOpTolerance = 1e-5;
inline constexpr double kModelTolerance = 1e-4;
inline constexpr double kStep = 1e-5;

struct CheckResult {
  std::string name;  // op name, or "model" for the end-to-end check
  std::string shape;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_error < tolerance; }
};

namespace detail {

inline ad::Tensor random_tensor(std::size_t rows, std::size_t cols,
                                std::mt19937_64& rng, double lo = -1.0,
                                double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(rows * cols);
  for (double& x : v) x = u(rng);
  return ad::Tensor::matrix(rows, cols, std::move(v));
}

inline std::string shape_str(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

// Projects y onto a fixed random direction: sum(y * w). Keeps every output
// entry in play without making the reduction itself linear in a way that
// hides a wrong Jacobian (w varies per entry).
inline ad::Var probe(ad::Tape& tape, ad::Var y, const ad::Tensor& w) {
  return ad::sum(ad::multiply(y, tape.constant(w)));
}

inline CheckResult run(const char* name, std::string shape,
                       const ad::ScalarFn& f, const ad::Tensor& x,
                       std::optional<ad::Op> corrupt) {
  auto r = ad::finite_diff_check(f, x, kStep, corrupt);
  return {name, std::move(shape), r.max_rel_error, kOpTolerance};
}

// Logits whose softmax columns keep every hinge at least `margin` from its
// kink and leave at least one hinge active.
inline ad::Tensor kink_free_logits(std::size_t n, std::size_t m, double delta,
                                   std::mt19937_64& rng, double margin = 1e-3) {
  for (;;) {
    ad::Tensor logits = random_tensor(n, m, rng, -2.0, 2.0);
    std::vector<double> a(n * m);
    for (std::size_t j = 0; j < m; ++j) {
      double mx = -INFINITY, z = 0.0;
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, logits[i * m + j]);
      for (std::size_t i = 0; i < n; ++i) z += std::exp(logits[i * m + j] - mx);
      for (std::size_t i = 0; i < n; ++i) {
        a[i * m + j] = std::exp(logits[i * m + j] - mx) / z;
      }
    }
    const auto h = kernel::hinge_arguments(a, n, m, delta);
    bool active = false, clear = true;
    for (double v : h) {
      active = active || v > 0.0;
      clear = clear && std::abs(v) >= margin;
    }
    if (active && clear) return logits;
  }
}

}  // namespace detail

/// Finite-difference checks of every tape op on three shapes each. Binary
/// ops are checked with respect to each operand in turn.
inline std::vector<CheckResult> check_ops(std::uint64_t seed,
                                          std::optional<ad::Op> corrupt = {}) {
  using ad::Tape;
  using ad::Tensor;
  using ad::Var;
  using detail::probe;
  using detail::random_tensor;
  using detail::shape_str;
  auto rng = data::seeded_stream(seed, 200);
  std::vector<CheckResult> out;
  const std::size_t shapes[3][2] = {{1, 1}, {3, 4}, {5, 2}};

  for (const auto& s : shapes) {
    const std::size_t r = s[0], c = s[1];
    const std::string sh = shape_str(r, c);
    const Tensor w = random_tensor(r, c, rng);
    const Tensor other = random_tensor(r, c, rng);
    const Tensor row = random_tensor(1, c, rng);
    const Tensor x = random_tensor(r, c, rng);

    out.push_back(detail::run("add", sh, [&](Tape& t, Var v) {
      return probe(t, ad::add(v, t.constant(other)), w);
    }, x, corrupt));
    out.push_back(detail::run("add", sh + "+1x" + std::to_string(c) + " (broadcast row)",
                              [&](Tape& t, Var v) {
      return probe(t, ad::add(t.constant(other), v), w);
    }, row, corrupt));
    out.push_back(detail::run("subtract", sh + " (left)", [&](Tape& t, Var v) {
      return probe(t, ad::subtract(v, t.constant(other)), w);
    }, x, corrupt));
    out.push_back(detail::run("subtract", sh + " (right)", [&](Tape& t, Var v) {
      return probe(t, ad::subtract(t.constant(other), v), w);
    }, x, corrupt));
    out.push_back(detail::run("multiply", sh, [&](Tape& t, Var v) {
      return probe(t, ad::multiply(v, ad::tanh(v)), w);
    }, x, corrupt));
    out.push_back(detail::run("scale", sh, [&](Tape& t, Var v) {
      return probe(t, ad::scale(v, -1.7), w);
    }, x, corrupt));
    out.push_back(detail::run("transpose", sh, [&](Tape& t, Var v) {
      return ad::sum(ad::multiply(ad::transpose(v),
                                  t.constant(Tensor::matrix(c, r, [&] {
                                    std::vector<double> wt(r * c);
                                    for (std::size_t i = 0; i < r; ++i)
                                      for (std::size_t j = 0; j < c; ++j)
                                        wt[j * r + i] = w[i * c + j];
                                    return wt;
                                  }()))));
    }, x, corrupt));
    out.push_back(detail::run("tanh", sh, [&](Tape& t, Var v) {
      return probe(t, ad::tanh(v), w);
    }, x, corrupt));
    out.push_back(detail::run("sigmoid", sh, [&](Tape& t, Var v) {
      return probe(t, ad::sigmoid(v), w);
    }, x, corrupt));
    out.push_back(detail::run("column_softmax", sh, [&](Tape& t, Var v) {
      return probe(t, ad::column_softmax(v), w);
    }, x, corrupt));
    out.push_back(detail::run("sum", sh, [&](Tape&, Var v) {
      return ad::sum(ad::multiply(v, v));
    }, x, corrupt));
    out.push_back(detail::run("mse", sh, [&](Tape& t, Var v) {
      return ad::mse(v, t.constant(other));
    }, x, corrupt));
    const Tensor w_rows = random_tensor(r + 1, c, rng);
    const Tensor w_cols = random_tensor(r, 2 * c, rng);
    out.push_back(detail::run("concat", sh + " axis 0", [&](Tape& t, Var v) {
      return probe(t, ad::concat({t.constant(row), v}, 0), w_rows);
    }, x, corrupt));
    out.push_back(detail::run("concat", sh + " axis 1", [&](Tape& t, Var v) {
      return probe(t, ad::concat({v, t.constant(other)}, 1), w_cols);
    }, x, corrupt));
  }

  const std::size_t mm[3][3] = {{1, 1, 1}, {3, 4, 2}, {2, 5, 3}};
  for (const auto& s : mm) {
    const std::size_t n = s[0], k = s[1], p = s[2];
    const std::string sh = shape_str(n, k) + "*" + shape_str(k, p);
    const Tensor a = random_tensor(n, k, rng), b = random_tensor(k, p, rng);
    const Tensor w = random_tensor(n, p, rng);
    out.push_back(detail::run("matmul", sh + " (left)", [&](Tape& t, Var v) {
      return probe(t, ad::matmul(v, t.constant(b)), w);
    }, a, corrupt));
    out.push_back(detail::run("matmul", sh + " (right)", [&](Tape& t, Var v) {
      return probe(t, ad::matmul(t.constant(a), v), w);
    }, b, corrupt));
  }

  // (input length, filters, kernel width, padding)
  const std::size_t cv[3][4] = {{1, 1, 1, 0}, {6, 2, 3, 1}, {7, 3, 5, 2}};
  for (const auto& s : cv) {
    const std::size_t n = s[0], f = s[1], k = s[2], pad = s[3];
    const std::size_t out_len = n + 2 * pad - k + 1;
    const std::string sh = shape_str(n, 1) + " conv " + shape_str(f, k);
    const Tensor x = random_tensor(n, 1, rng), ker = random_tensor(f, k, rng);
    const Tensor w = random_tensor(out_len, f, rng);
    out.push_back(detail::run("conv1d", sh + " (input)", [&](Tape& t, Var v) {
      return probe(t, ad::conv1d(v, t.constant(ker), pad), w);
    }, x, corrupt));
    out.push_back(detail::run("conv1d", sh + " (kernels)", [&](Tape& t, Var v) {
      return probe(t, ad::conv1d(t.constant(x), v, pad), w);
    }, ker, corrupt));
  }

  const std::vector<std::vector<int>> id_sets = {{0}, {2, 0, 2, 1}, {4, 3, 3, 0, 1}};
  const std::size_t tables[3][2] = {{1, 1}, {3, 4}, {5, 2}};
  for (std::size_t q = 0; q < 3; ++q) {
    const auto& ids = id_sets[q];
    const std::size_t v_rows = tables[q][0], dim = tables[q][1];
    const Tensor table = random_tensor(v_rows, dim, rng);
    const Tensor w = random_tensor(ids.size(), dim, rng);
    out.push_back(detail::run("embedding", shape_str(v_rows, dim) + " table, " +
                                               std::to_string(ids.size()) + " ids",
                              [&](Tape& t, Var v) {
      return probe(t, ad::embedding(v, ids), w);
    }, table, corrupt));
  }

  const std::size_t al[3][2] = {{2, 3}, {4, 6}, {5, 7}};
  for (const auto& s : al) {
    const std::size_t n = s[0], m = s[1];
    const Tensor logits = detail::kink_free_logits(n, m, 0.01, rng);
    out.push_back(detail::run("alignment_loss", shape_str(n, m) + " softmax logits",
                              [&](Tape&, Var v) {
      return ad::alignment_loss(ad::column_softmax(v), 0.01);
    }, logits, corrupt));
  }
  return out;
}

struct ModelCheck {
  double max_rel_error = 0.0;
  std::string worst_parameter;
};

/// Central differences of L_R against backward for every model parameter on
/// one random (params, example) pair. All parameters are drawn from
/// U(-0.5, 0.5): the trained-init scale leaves some attention gradients near
/// 1e-8, where double-precision differencing noise alone exceeds 1e-4.
inline ModelCheck check_model_gradients(std::uint64_t seed, std::size_t n_tokens,
                                        const model::ModelConfig& mc,
                                        const AlignConfig& align,
                                        std::optional<ad::Op> corrupt = {}) {
  auto rng = data::seeded_stream(seed, 201);
  model::ToyModelParams params = model::zero_params(mc);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  params.visit([&](const char*, ad::Tensor& t, bool) {
    for (double& w : t.data()) w = u(rng);
  });
  std::uniform_int_distribution<int> tok(0, mc.vocab_size - 1);
  std::vector<int> tokens(n_tokens);
  for (int& t : tokens) t = tok(rng);
  const std::size_t m = 2 * n_tokens;
  const ad::Tensor target = detail::random_tensor(
      m, static_cast<std::size_t>(mc.frame_dim), rng);

  ad::Tape tape;
  tape.corrupt_backward(corrupt);
  const auto g = model::loss_and_gradients(tape, params, tokens, target, align);
  tape.corrupt_backward(std::nullopt);

  ModelCheck result;
  std::size_t k = 0;
  auto loss_at = [&] {
    return model::forward_teacher_forced(tape, params, tokens, target, align).total_loss;
  };
  params.visit([&](const char* name, ad::Tensor& t, bool) {
    const auto& analytic = g.params[k++];
    for (std::size_t e = 0; e < t.size(); ++e) {
      const double saved = t[e];
      t[e] = saved + kStep;
      const double up = loss_at();
      t[e] = saved - kStep;
      const double down = loss_at();
      t[e] = saved;
      const double num = (up - down) / (2.0 * kStep);
      const double a = analytic[e];
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-8});
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_parameter = name;
      }
    }
  });
  return result;
}

/// Every op check plus the end-to-end model check used by `gradcheck`.
inline std::vector<CheckResult> check_all(std::uint64_t seed,
                                          std::optional<ad::Op> corrupt = {}) {
  auto results = check_ops(seed, corrupt);
  AlignConfig align;
  align.lambda = 1e-3;
  const model::ModelConfig mc;
  for (std::size_t n : {3u, 4u, 5u}) {
    auto r = check_model_gradients(seed, n, mc, align, corrupt);
    results.push_back({"model", std::to_string(n) + " tokens, worst " + r.worst_parameter,
                       r.max_rel_error, kModelTolerance});
  }
  return results;
}

/// Maps a name accepted by op_name back to its tag.
inline std::optional<ad::Op> op_from_name(const std::string& name) {
  for (int k = 0; k <= static_cast<int>(ad::Op::kAlignmentLoss); ++k) {
    const auto op = static_cast<ad::Op>(k);
    if (name == ad::op_name(op)) return op;
  }
  return std::nullopt;
}

}  // namespace monalign::check
