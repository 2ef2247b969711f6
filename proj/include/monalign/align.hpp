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
#include <cstddef>
#include <filesystem>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "monalign/error.hpp"
#include "monalign/io.hpp"

namespace monalign {

/// Absolute tolerance on each column sum of an alignment matrix.
inline constexpr double kColumnSumTolerance = 1e-6;

/// Regularizer hyperparameters: margin scale and loss weight.
struct AlignConfig {
  double delta = 0.01;
  double lambda = 1e-5;

  void validate() const {
    if (!(delta >= 0.0) || !std::isfinite(delta)) {
      throw ConfigError("delta must be finite and >= 0");
    }
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
      throw ConfigError("lambda must be finite and >= 0");
    }
  }
};

/// Attention weights of N input positions over M output frames. Entry (i, j)
/// is the probability that frame j attends input position i, so every column
/// is a distribution. Storage is row-major N x M.
class AlignmentMatrix {
 public:
  /// Validates and takes ownership of row-major N x M values.
  AlignmentMatrix(std::size_t n_inputs, std::size_t n_frames,
                  std::vector<double> values)
      : n_inputs_(n_inputs), n_frames_(n_frames), values_(std::move(values)) {
    validate();
  }

  /// Builds the matrix from per-frame attention columns, each of length N.
  static AlignmentMatrix from_columns(
      const std::vector<std::vector<double>>& columns) {
    if (columns.empty()) throw InvalidAlignment("alignment has no frames");
    const std::size_t n = columns.front().size();
    std::vector<double> values(n * columns.size());
    for (std::size_t j = 0; j < columns.size(); ++j) {
      if (columns[j].size() != n) {
        throw InvalidAlignment("alignment columns have unequal lengths");
      }
      for (std::size_t i = 0; i < n; ++i) {
        values[i * columns.size() + j] = columns[j][i];
      }
    }
    return {n, columns.size(), std::move(values)};
  }

  std::size_t n_inputs() const { return n_inputs_; }
  std::size_t n_frames() const { return n_frames_; }
  double operator()(std::size_t i, std::size_t j) const {
    return values_[i * n_frames_ + j];
  }
  std::span<const double> values() const { return values_; }

 private:
  void validate() const {
    if (n_inputs_ < 1 || n_frames_ < 1) {
      throw InvalidAlignment("alignment must be at least 1x1");
    }
    if (values_.size() != n_inputs_ * n_frames_) {
      throw InvalidAlignment("alignment holds " +
                             std::to_string(values_.size()) +
                             " values, expected " +
                             std::to_string(n_inputs_ * n_frames_));
    }
    for (std::size_t j = 0; j < n_frames_; ++j) {
      double sum = 0.0;
      for (std::size_t i = 0; i < n_inputs_; ++i) {
        const double a = values_[i * n_frames_ + j];
        if (!std::isfinite(a) || a < 0.0) {
          throw InvalidAlignment("alignment entry (" + std::to_string(i) +
                                 ", " + std::to_string(j) +
                                 ") is negative or non-finite");
        }
        sum += a;
      }
      if (std::abs(sum - 1.0) > kColumnSumTolerance) {
        std::ostringstream msg;
        msg.precision(17);
        msg << "column " << j << " sums to " << sum
            << ", outside column-sum tolerance " << kColumnSumTolerance;
        throw InvalidAlignment(msg.str());
      }
    }
  }

  std::size_t n_inputs_;
  std::size_t n_frames_;
  std::vector<double> values_;
};

/// Mean attended position per frame, in 1-based input positions.
struct CentroidSeries {
  std::vector<double> centroids;
};

struct MonotonicityReport {
  double loss = 0.0;
  std::size_t violation_count = 0;
  double violation_rate = 0.0;
  double max_violation = 0.0;
  double centroid_min = 0.0;
  double centroid_max = 0.0;
};

/// Unvalidated kernels over a raw row-major N x M matrix. The checked
/// functions below route through these; gradient checks call them directly
/// because a perturbed matrix is no longer column-stochastic.
namespace kernel {

inline std::vector<double> centroids(std::span<const double> a, std::size_t n,
                                     std::size_t m) {
  std::vector<double> c(m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double position = static_cast<double>(i + 1);
    for (std::size_t j = 0; j < m; ++j) c[j] += a[i * m + j] * position;
  }
  return c;
}

/// Hinge arguments h_j = (c_j - c_{j+1} + delta * N / M) / N, j < M - 1.
inline std::vector<double> hinge_arguments(std::span<const double> a,
                                           std::size_t n, std::size_t m,
                                           double delta) {
  const auto c = centroids(a, n, m);
  const double nd = static_cast<double>(n);
  const double margin = delta * nd / static_cast<double>(m);
  std::vector<double> h(m > 0 ? m - 1 : 0);
  for (std::size_t j = 0; j + 1 < m; ++j) {
    h[j] = (c[j] - c[j + 1] + margin) / nd;
  }
  return h;
}

/// Sum of the positive hinge arguments. A run of consecutive active hinges
/// j..k telescopes to (c_j - c_{k+1} + (k - j + 1) delta N / M) / N, so the
/// centroids strictly inside a run never enter the sum.
inline double alignment_loss(std::span<const double> a, std::size_t n,
                             std::size_t m, double delta) {
  const auto c = centroids(a, n, m);
  const double nd = static_cast<double>(n);
  const double margin = delta * nd / static_cast<double>(m);
  double loss = 0.0;
  std::size_t j = 0;
  while (j + 1 < m) {
    if (!((c[j] - c[j + 1] + margin) / nd > 0.0)) {
      ++j;
      continue;
    }
    std::size_t k = j;
    while (k + 2 < m && (c[k + 1] - c[k + 2] + margin) / nd > 0.0) ++k;
    loss += (c[j] - c[k + 1] + static_cast<double>(k - j + 1) * margin) / nd;
    j = k + 1;
  }
  return loss;
}

inline std::vector<double> alignment_loss_grad(std::span<const double> a,
                                               std::size_t n, std::size_t m,
                                               double delta) {
  const auto h = hinge_arguments(a, n, m, delta);
  const double nd = static_cast<double>(n);
  std::vector<double> grad(n * m, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    // d c_j / d a_ij = i; c_j enters h_j with +1/N and h_{j-1} with -1/N.
    double coeff = 0.0;
    if (j + 1 < m && h[j] > 0.0) coeff += 1.0;
    if (j > 0 && h[j - 1] > 0.0) coeff -= 1.0;
    if (coeff == 0.0) continue;
    for (std::size_t i = 0; i < n; ++i) {
      grad[i * m + j] = coeff * static_cast<double>(i + 1) / nd;
    }
  }
  return grad;
}

}  // namespace kernel

inline CentroidSeries centroids(const AlignmentMatrix& a) {
  return {kernel::centroids(a.values(), a.n_inputs(), a.n_frames())};
}

/// Sum over consecutive frames of max{(c_j - c_{j+1} + delta N/M) / N, 0}.
/// Zero for a single frame.
inline double alignment_loss(const AlignmentMatrix& a, double delta) {
  if (!(delta >= 0.0)) throw ConfigError("delta must be >= 0");
  return kernel::alignment_loss(a.values(), a.n_inputs(), a.n_frames(), delta);
}

/// Subgradient of alignment_loss with respect to every entry, row-major
/// N x M. A hinge exactly at zero contributes nothing.
inline std::vector<double> alignment_loss_grad(const AlignmentMatrix& a,
                                               double delta) {
  if (!(delta >= 0.0)) throw ConfigError("delta must be >= 0");
  return kernel::alignment_loss_grad(a.values(), a.n_inputs(), a.n_frames(),
                                     delta);
}

inline MonotonicityReport monotonicity_report(const AlignmentMatrix& a,
                                              double delta) {
  if (!(delta >= 0.0)) throw ConfigError("delta must be >= 0");
  const std::size_t n = a.n_inputs();
  const std::size_t m = a.n_frames();
  const auto c = kernel::centroids(a.values(), n, m);
  MonotonicityReport report;
  report.loss = kernel::alignment_loss(a.values(), n, m, delta);
  for (double h : kernel::hinge_arguments(a.values(), n, m, delta)) {
    if (h > 0.0) {
      ++report.violation_count;
      report.max_violation = std::max(report.max_violation, h);
    }
  }
  report.violation_rate =
      m > 1 ? static_cast<double>(report.violation_count) /
                  static_cast<double>(m - 1)
            : 0.0;
  const auto [lo, hi] = std::minmax_element(c.begin(), c.end());
  report.centroid_min = *lo;
  report.centroid_max = *hi;
  return report;
}

/// Reads the CSV alignment format: a header line `N,M` followed by N rows of
/// M comma-separated values.
inline AlignmentMatrix parse_alignment_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  auto split = [](const std::string& row) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(row);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
  };
  auto to_real = [](const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      throw IoError("invalid number '" + s + "' in alignment CSV");
    }
    while (used < s.size() && std::isspace(static_cast<unsigned char>(s[used])))
      ++used;
    if (used != s.size()) {
      throw IoError("invalid number '" + s + "' in alignment CSV");
    }
    return v;
  };
  if (!std::getline(in, line)) throw IoError("alignment CSV is empty");
  const auto header = split(line);
  if (header.size() != 2) throw IoError("alignment CSV header must be N,M");
  const double nd = to_real(header[0]);
  const double md = to_real(header[1]);
  if (nd < 1 || md < 1 || nd != std::floor(nd) || md != std::floor(md)) {
    throw IoError("alignment CSV header must hold positive integers");
  }
  const auto n = static_cast<std::size_t>(nd);
  const auto m = static_cast<std::size_t>(md);
  std::vector<double> values;
  values.reserve(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(in, line)) {
      throw IoError("alignment CSV has " + std::to_string(i) +
                    " rows, expected " + std::to_string(n));
    }
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto cells = split(line);
    if (cells.size() != m) {
      throw IoError("alignment CSV row " + std::to_string(i + 1) + " has " +
                    std::to_string(cells.size()) + " values, expected " +
                    std::to_string(m));
    }
    for (const auto& cell : cells) values.push_back(to_real(cell));
  }
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") != std::string::npos) {
      throw IoError("alignment CSV has trailing rows");
    }
  }
  return {n, m, std::move(values)};
}

inline std::string format_alignment_csv(const AlignmentMatrix& a) {
  std::string out = std::to_string(a.n_inputs()) + "," +
                    std::to_string(a.n_frames()) + "\n";
  for (std::size_t i = 0; i < a.n_inputs(); ++i) {
    for (std::size_t j = 0; j < a.n_frames(); ++j) {
      if (j > 0) out += ',';
      out += io::format_real(a(i, j));
    }
    out += '\n';
  }
  return out;
}

inline AlignmentMatrix read_alignment_csv(const std::filesystem::path& path) {
  return parse_alignment_csv(io::read_text_file(path));
}

inline void write_alignment_csv(const std::filesystem::path& path,
                                const AlignmentMatrix& a) {
  io::write_text_file(path, format_alignment_csv(a));
}

}  // namespace monalign
