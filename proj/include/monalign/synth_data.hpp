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

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "monalign/align.hpp"
#include "monalign/autodiff.hpp"
#include "monalign/error.hpp"
#include "monalign/io.hpp"

namespace monalign::data {

/// Independent random stream `stream` derived from a user seed.
inline std::mt19937_64 seeded_stream(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu),
                    static_cast<std::uint32_t>(seed >> 32), stream};
  return std::mt19937_64(seq);
}

struct DatasetConfig {
  int vocab_size = 12;
  int frame_dim = 16;
  int max_duration = 4;
  double noise_std = 0.05;
  int min_length = 5;
  int max_length = 20;
  int n_train = 2000;
  int n_val = 200;
  int n_test = 200;
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (frame_dim < 2) throw ConfigError("frame_dim must be >= 2");
    if (max_duration < 1) throw ConfigError("max_duration must be >= 1");
    if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
    if (min_length < 1 || max_length < min_length) {
      throw ConfigError("token lengths need 1 <= min_length <= max_length");
    }
    if (n_train < 0 || n_val < 0 || n_test < 0) {
      throw ConfigError("split sizes must be >= 0");
    }
  }
};

/// Per-symbol duration (frames) and prototype frame vector.
struct SymbolTable {
  std::vector<int> durations;
  std::vector<std::vector<double>> prototypes;

  int vocab_size() const { return static_cast<int>(durations.size()); }
  int frame_dim() const {
    return prototypes.empty() ? 0 : static_cast<int>(prototypes[0].size());
  }
};

struct Example {
  std::vector<int> tokens;
  ad::Tensor frames;  // M x F
  AlignmentMatrix gold_alignment;

  std::size_t n_inputs() const { return tokens.size(); }
  std::size_t n_frames() const { return frames.rows(); }
};

struct Dataset {
  DatasetConfig config;
  SymbolTable table;
  std::vector<Example> train;
  std::vector<Example> val;
  std::vector<Example> test;
};

inline double min_pairwise_distance(
    const std::vector<std::vector<double>>& points) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < points.size(); ++a) {
    for (std::size_t b = a + 1; b < points.size(); ++b) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < points[a].size(); ++k) {
        const double d = points[a][k] - points[b][k];
        d2 += d * d;
      }
      best = std::min(best, std::sqrt(d2));
    }
  }
  return best;
}

inline constexpr double kMinPrototypeDistance = 0.5;

/// Samples durations uniformly in [1, max_duration] and standard-normal
/// prototypes, redrawing the prototypes until all pairs are further apart
/// than kMinPrototypeDistance.
inline SymbolTable build_symbol_table(const DatasetConfig& config,
                                      std::mt19937_64& rng) {
  config.validate();
  SymbolTable table;
  std::uniform_int_distribution<int> duration(1, config.max_duration);
  table.durations.resize(config.vocab_size);
  for (int& d : table.durations) d = duration(rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int attempt = 0; attempt < 100; ++attempt) {
    table.prototypes.assign(config.vocab_size,
                            std::vector<double>(config.frame_dim));
    for (auto& p : table.prototypes)
      for (double& v : p) v = normal(rng);
    if (min_pairwise_distance(table.prototypes) > kMinPrototypeDistance) {
      return table;
    }
  }
  throw ConfigError("could not draw distinct symbol prototypes in 100 attempts");
}

/// One-hot block alignment: frame j attends the token whose duration block
/// contains it.
inline AlignmentMatrix gold_alignment(const std::vector<int>& tokens,
                                      const SymbolTable& table) {
  std::size_t m = 0;
  for (int t : tokens) m += static_cast<std::size_t>(table.durations.at(t));
  std::vector<double> values(tokens.size() * m, 0.0);
  std::size_t j = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    for (int k = 0; k < table.durations[tokens[i]]; ++k, ++j) {
      values[i * m + j] = 1.0;
    }
  }
  return {tokens.size(), m, std::move(values)};
}

/// Builds an example from given tokens: each token contributes
/// duration(token) frames equal to its prototype plus Gaussian noise.
inline Example make_example(std::vector<int> tokens, const SymbolTable& table,
                            double noise_std, std::mt19937_64& rng) {
  if (tokens.empty()) throw ConfigError("example needs at least one token");
  const auto f = static_cast<std::size_t>(table.frame_dim());
  std::vector<double> frames;
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int t : tokens) {
    if (t < 0 || t >= table.vocab_size()) {
      throw ConfigError("token " + std::to_string(t) + " outside vocabulary");
    }
    for (int k = 0; k < table.durations[t]; ++k) {
      for (std::size_t d = 0; d < f; ++d) {
        frames.push_back(table.prototypes[t][d] + noise_std * noise(rng));
      }
    }
  }
  const std::size_t m = frames.size() / f;
  auto gold = gold_alignment(tokens, table);
  return {std::move(tokens), ad::Tensor::matrix(m, f, std::move(frames)),
          std::move(gold)};
}

inline Example generate_example(const SymbolTable& table, int length,
                                double noise_std, std::mt19937_64& rng) {
  if (length < 1) throw ConfigError("example length must be >= 1");
  std::uniform_int_distribution<int> symbol(0, table.vocab_size() - 1);
  std::vector<int> tokens(static_cast<std::size_t>(length));
  for (int& t : tokens) t = symbol(rng);
  return make_example(std::move(tokens), table, noise_std, rng);
}

/// Symbol table and the three splits, each from its own seed stream.
inline Dataset generate_dataset_in_memory(const DatasetConfig& config) {
  config.validate();
  Dataset ds;
  ds.config = config;
  auto table_rng = seeded_stream(config.seed, 0);
  ds.table = build_symbol_table(config, table_rng);
  auto fill = [&](std::vector<Example>& split, int count, std::uint32_t stream) {
    auto rng = seeded_stream(config.seed, stream);
    std::uniform_int_distribution<int> length(config.min_length,
                                              config.max_length);
    split.reserve(static_cast<std::size_t>(count));
    for (int k = 0; k < count; ++k) {
      const int len = length(rng);
      split.push_back(generate_example(ds.table, len, config.noise_std, rng));
    }
  };
  fill(ds.train, config.n_train, 1);
  fill(ds.val, config.n_val, 2);
  fill(ds.test, config.n_test, 3);
  return ds;
}

inline nlohmann::json to_json(const DatasetConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"frame_dim", c.frame_dim},
          {"max_duration", c.max_duration}, {"noise_std", c.noise_std},
          {"min_length", c.min_length}, {"max_length", c.max_length},
          {"n_train", c.n_train}, {"n_val", c.n_val},
          {"n_test", c.n_test}, {"seed", c.seed}};
}

inline DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  DatasetConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.frame_dim = j.at("frame_dim").get<int>();
  c.max_duration = j.at("max_duration").get<int>();
  c.noise_std = j.at("noise_std").get<double>();
  c.min_length = j.at("min_length").get<int>();
  c.max_length = j.at("max_length").get<int>();
  c.n_train = j.at("n_train").get<int>();
  c.n_val = j.at("n_val").get<int>();
  c.n_test = j.at("n_test").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline nlohmann::json to_json(const Dataset& ds) {
  using nlohmann::json;
  auto split = [](const std::vector<Example>& examples) {
    json arr = json::array();
    for (const auto& ex : examples) {
      json frames = json::array();
      for (std::size_t r = 0; r < ex.frames.rows(); ++r) {
        json row = json::array();
        for (std::size_t c = 0; c < ex.frames.cols(); ++c)
          row.push_back(ex.frames(r, c));
        frames.push_back(std::move(row));
      }
      arr.push_back({{"tokens", ex.tokens}, {"frames", std::move(frames)}});
    }
    return arr;
  };
  return {{"config", to_json(ds.config)},
          {"symbol_table",
           {{"durations", ds.table.durations},
            {"prototypes", ds.table.prototypes}}},
          {"splits",
           {{"train", split(ds.train)},
            {"val", split(ds.val)},
            {"test", split(ds.test)}}}};
}

/// Gold alignments are rebuilt from tokens and durations.
inline Dataset dataset_from_json(const nlohmann::json& j) {
  Dataset ds;
  try {
    ds.config = dataset_config_from_json(j.at("config"));
    ds.table.durations = j.at("symbol_table").at("durations").get<std::vector<int>>();
    ds.table.prototypes = j.at("symbol_table")
                              .at("prototypes")
                              .get<std::vector<std::vector<double>>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed dataset header: ") + e.what());
  }
  if (ds.table.durations.size() != ds.table.prototypes.size() ||
      ds.table.durations.empty()) {
    throw IoError("symbol table durations and prototypes disagree");
  }
  const auto f = static_cast<std::size_t>(ds.table.frame_dim());
  auto read_split = [&](const char* name, std::vector<Example>& out) {
    try {
      for (const auto& item : j.at("splits").at(name)) {
        auto tokens = item.at("tokens").get<std::vector<int>>();
        std::vector<double> frames;
        for (const auto& row : item.at("frames")) {
          if (row.size() != f) throw IoError("frame width mismatch");
          for (const auto& v : row) frames.push_back(v.get<double>());
        }
        const std::size_t m = frames.size() / f;
        auto gold = gold_alignment(tokens, ds.table);
        if (gold.n_frames() != m) {
          throw IoError("frame count disagrees with token durations");
        }
        out.push_back({std::move(tokens),
                       ad::Tensor::matrix(m, f, std::move(frames)),
                       std::move(gold)});
      }
    } catch (const nlohmann::json::exception& e) {
      throw IoError(std::string("malformed split '") + name + "': " + e.what());
    } catch (const std::out_of_range&) {
      throw IoError(std::string("token outside vocabulary in split '") + name + "'");
    }
  };
  read_split("train", ds.train);
  read_split("val", ds.val);
  read_split("test", ds.test);
  return ds;
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  io::write_text_file(path, io::dump_json(to_json(ds)) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  return dataset_from_json(io::read_json_file(path));
}

/// Generates the dataset for `config` and writes it to `path`.
inline Dataset generate_dataset(const DatasetConfig& config,
                                const std::filesystem::path& path) {
  io::require_parent_dir(path);
  Dataset ds = generate_dataset_in_memory(config);
  save_dataset(path, ds);
  return ds;
}

}  // namespace monalign::data
