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
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "monalign/align.hpp"
#include "monalign/autodiff.hpp"
#include "monalign/error.hpp"
#include "monalign/io.hpp"

namespace monalign::model {

struct ModelConfig {
  int vocab_size = 12;
  int frame_dim = 16;
  int embed_dim = 8;
  int encoder_dim = 16;
  int decoder_dim = 16;
  int attention_dim = 8;
  int location_kernel = 5;
  int location_filters = 4;

  void validate() const {
    for (int d : {vocab_size, frame_dim, embed_dim, encoder_dim, decoder_dim,
                  attention_dim, location_kernel, location_filters}) {
      if (d < 1) throw ConfigError("model dimensions must be >= 1");
    }
    if (location_kernel % 2 == 0) {
      throw ConfigError("location_kernel must be odd");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Learnable weights. Dense layers use the row-vector convention
/// y = x W + b, so a weight's row count is its fan-in.
struct ToyModelParams {
  ModelConfig config;
  ad::Tensor embedding;           // vocab x embed
  ad::Tensor encoder_weight;      // embed x encoder
  ad::Tensor encoder_bias;        // 1 x encoder
  ad::Tensor attention_query;     // decoder x attention   (W)
  ad::Tensor attention_key;       // encoder x attention   (V)
  ad::Tensor attention_location;  // filters x attention   (U)
  ad::Tensor attention_bias;      // 1 x attention
  ad::Tensor attention_score;     // attention x 1         (v)
  ad::Tensor location_kernels;    // filters x kernel
  ad::Tensor decoder_weight;      // (encoder + frame + decoder) x decoder
  ad::Tensor decoder_bias;        // 1 x decoder
  ad::Tensor output_weight;       // (decoder + encoder) x frame
  ad::Tensor output_bias;         // 1 x frame

  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const char*, const ad::Tensor& t, bool) { n += t.size(); });
    return n;
  }

  bool operator==(const ToyModelParams&) const = default;

 private:
  // f(name, tensor, is_bias)
  template <class Self, class F>
  static void visit_impl(Self& s, F& f) {
    f("embedding", s.embedding, false);
    f("encoder_weight", s.encoder_weight, false);
    f("encoder_bias", s.encoder_bias, true);
    f("attention_query", s.attention_query, false);
    f("attention_key", s.attention_key, false);
    f("attention_location", s.attention_location, false);
    f("attention_bias", s.attention_bias, true);
    f("attention_score", s.attention_score, false);
    f("location_kernels", s.location_kernels, false);
    f("decoder_weight", s.decoder_weight, false);
    f("decoder_bias", s.decoder_bias, true);
    f("output_weight", s.output_weight, false);
    f("output_bias", s.output_bias, true);
  }
};

/// All-zero parameters with the shapes implied by `config`.
inline ToyModelParams zero_params(const ModelConfig& config) {
  config.validate();
  auto z = [](int r, int c) {
    return ad::Tensor::zeros(
        {static_cast<std::size_t>(r), static_cast<std::size_t>(c)});
  };
  const ModelConfig& m = config;
  ToyModelParams p;
  p.config = config;
  p.embedding = z(m.vocab_size, m.embed_dim);
  p.encoder_weight = z(m.embed_dim, m.encoder_dim);
  p.encoder_bias = z(1, m.encoder_dim);
  p.attention_query = z(m.decoder_dim, m.attention_dim);
  p.attention_key = z(m.encoder_dim, m.attention_dim);
  p.attention_location = z(m.location_filters, m.attention_dim);
  p.attention_bias = z(1, m.attention_dim);
  p.attention_score = z(m.attention_dim, 1);
  p.location_kernels = z(m.location_filters, m.location_kernel);
  p.decoder_weight = z(m.encoder_dim + m.frame_dim + m.decoder_dim, m.decoder_dim);
  p.decoder_bias = z(1, m.decoder_dim);
  p.output_weight = z(m.decoder_dim + m.encoder_dim, m.frame_dim);
  p.output_bias = z(1, m.frame_dim);
  return p;
}

/// Weights ~ U(-s, s) with s = 1/sqrt(fan_in); biases zero. The embedding
/// table acts on one-hot inputs (fan-in = vocabulary size); location kernels
/// have fan-in equal to their width.
inline ToyModelParams init_params(const ModelConfig& config,
                                  std::mt19937_64& rng) {
  ToyModelParams p = zero_params(config);
  p.visit([&](const char*, ad::Tensor& t, bool is_bias) {
    if (is_bias) return;
    const double fan_in = static_cast<double>(t.rows());
    const double s = 1.0 / std::sqrt(fan_in);
    std::uniform_real_distribution<double> u(-s, s);
    for (double& w : t.data()) w = u(rng);
  });
  return p;
}

struct ForwardResult {
  ad::Tensor predicted_frames;  // M x F
  AlignmentMatrix alignment;    // N x M
  double task_loss = 0.0;
  double align_loss = 0.0;
  double total_loss = 0.0;
};

/// kExcised keeps the alignment penalty out of the recorded graph entirely;
/// it is still evaluated from the attention values for reporting.
enum class AlignmentTerm { kInGraph, kExcised };

/// Handles to one recorded decode.
struct Recording {
  std::vector<ad::Var> params;  // visit order
  std::vector<ad::Var> frames;  // 1 x F per step
  std::vector<ad::Var> attention;  // N x 1 per step
  ad::Var predicted;            // M x F
  ad::Var alignment;            // N x M
  ad::Var task_loss;
  ad::Var total_loss;
  double align_loss = 0.0;
  bool has_loss = false;
};

/// Records the encoder and `steps` decoder steps. With a target, step j
/// consumes target row j-1 as its previous frame (teacher forcing) and the
/// losses are recorded; without one it consumes its own previous prediction.
inline Recording record_decode(ad::Tape& tape, const ToyModelParams& params,
                               const std::vector<int>& tokens,
                               const ad::Tensor* target, std::size_t steps,
                               const AlignConfig& align,
                               AlignmentTerm term = AlignmentTerm::kInGraph) {
  using namespace ad;
  const ModelConfig& cfg = params.config;
  if (tokens.empty()) throw ShapeError("decode needs at least one token");
  if (steps < 1) throw ShapeError("decode needs at least one step");
  const auto frame_dim = static_cast<std::size_t>(cfg.frame_dim);
  if (target != nullptr) {
    if (target->cols() != frame_dim) {
      throw ShapeError("target frames have width " +
                       std::to_string(target->cols()) + " but model expects " +
                       std::to_string(frame_dim));
    }
    if (target->rows() != steps) throw ShapeError("target rows != steps");
  }
  Recording rec;
  params.visit([&](const char*, const Tensor& t, bool) {
    rec.params.push_back(tape.leaf(t));
  });
  const Var embed_table = rec.params[0], enc_w = rec.params[1],
            enc_b = rec.params[2], att_q = rec.params[3],
            att_k = rec.params[4], att_loc = rec.params[5],
            att_b = rec.params[6], att_v = rec.params[7],
            loc_kernels = rec.params[8], dec_w = rec.params[9],
            dec_b = rec.params[10], out_w = rec.params[11],
            out_b = rec.params[12];

  const std::size_t n = tokens.size();
  const Var keys = tanh(add(matmul(embedding(embed_table, tokens), enc_w), enc_b));
  const Var projected_keys = matmul(keys, att_k);

  std::vector<double> start(n, 0.0);
  start[0] = 1.0;
  Var prev_attention = tape.constant(n, 1, start);
  Var state = tape.constant(1, static_cast<std::size_t>(cfg.decoder_dim),
                        std::vector<double>(cfg.decoder_dim, 0.0));
  Var prev_frame = tape.constant(1, frame_dim, std::vector<double>(frame_dim, 0.0));
  const auto padding = static_cast<std::size_t>(cfg.location_kernel / 2);

  for (std::size_t j = 0; j < steps; ++j) {
    const Var location = matmul(conv1d(prev_attention, loc_kernels, padding), att_loc);
    const Var query = add(matmul(state, att_q), att_b);
    const Var energy = tanh(add(add(projected_keys, location), query));
    const Var weights = column_softmax(matmul(energy, att_v));
    const Var context = matmul(transpose(weights), keys);
    state = tanh(add(matmul(concat({context, prev_frame, state}, 1), dec_w), dec_b));
    const Var frame = add(matmul(concat({state, context}, 1), out_w), out_b);
    rec.attention.push_back(weights);
    rec.frames.push_back(frame);
    prev_attention = weights;
    if (target != nullptr) {
      prev_frame = tape.constant(1, frame_dim, target->data().subspan(j * frame_dim, frame_dim));
    } else {
      prev_frame = frame;
    }
  }
  rec.predicted = concat(rec.frames, 0);
  rec.alignment = concat(rec.attention, 1);
  if (target != nullptr) {
    rec.task_loss = mse(rec.predicted, tape.constant(*target));
    if (term == AlignmentTerm::kInGraph) {
      const Var penalty = ad::alignment_loss(rec.alignment, align.delta);
      rec.align_loss = tape.scalar(penalty);
      rec.total_loss = add(rec.task_loss, scale(penalty, align.lambda));
    } else {
      auto a = tape.value(rec.alignment);
      rec.align_loss = monalign::alignment_loss(
          AlignmentMatrix(n, steps, {a.begin(), a.end()}), align.delta);
      rec.total_loss = rec.task_loss;
    }
    rec.has_loss = true;
  }
  return rec;
}

inline ForwardResult result_of(const ad::Tape& tape, const Recording& rec) {
  auto a = tape.value(rec.alignment);
  ForwardResult r{tape.value_tensor(rec.predicted),
                  AlignmentMatrix(tape.rows(rec.alignment), tape.cols(rec.alignment),
                                  {a.begin(), a.end()})};
  if (rec.has_loss) {
    r.task_loss = tape.scalar(rec.task_loss);
    r.align_loss = rec.align_loss;
    r.total_loss = tape.scalar(rec.total_loss);
  }
  return r;
}

inline ForwardResult forward_teacher_forced(
    ad::Tape& tape, const ToyModelParams& params, const std::vector<int>& tokens,
    const ad::Tensor& target_frames, const AlignConfig& align,
    AlignmentTerm term = AlignmentTerm::kInGraph) {
  tape.clear();
  auto rec = record_decode(tape, params, tokens, &target_frames,
                           target_frames.rows(), align, term);
  return result_of(tape, rec);
}

/// Teacher-forced decode; L_R = L_T + lambda * L_A.
inline ForwardResult forward_teacher_forced(const ToyModelParams& params,
                                            const std::vector<int>& tokens,
                                            const ad::Tensor& target_frames,
                                            const AlignConfig& align) {
  ad::Tape tape;
  return forward_teacher_forced(tape, params, tokens, target_frames, align);
}

struct Gradients {
  ForwardResult result;
  std::vector<ad::Tensor> params;  // visit order
};

/// Teacher-forced forward plus d L_R / d params.
inline Gradients loss_and_gradients(ad::Tape& tape, const ToyModelParams& params,
                                    const std::vector<int>& tokens,
                                    const ad::Tensor& target_frames,
                                    const AlignConfig& align,
                                    AlignmentTerm term = AlignmentTerm::kInGraph) {
  tape.clear();
  auto rec = record_decode(tape, params, tokens, &target_frames,
                           target_frames.rows(), align, term);
  tape.backward(rec.total_loss);
  Gradients g{result_of(tape, rec), {}};
  g.params.reserve(rec.params.size());
  for (ad::Var v : rec.params) g.params.push_back(tape.grad_tensor(v));
  return g;
}

struct FreeRunResult {
  ad::Tensor predicted_frames;
  AlignmentMatrix alignment;
};

/// Decodes `max_steps` frames feeding back the model's own predictions.
inline FreeRunResult decode_free_running(ad::Tape& tape,
                                         const ToyModelParams& params,
                                         const std::vector<int>& tokens,
                                         std::size_t max_steps) {
  tape.clear();
  auto rec = record_decode(tape, params, tokens, nullptr, max_steps, AlignConfig{});
  auto r = result_of(tape, rec);
  return {std::move(r.predicted_frames), std::move(r.alignment)};
}

inline FreeRunResult decode_free_running(const ToyModelParams& params,
                                         const std::vector<int>& tokens,
                                         std::size_t max_steps) {
  ad::Tape tape;
  return decode_free_running(tape, params, tokens, max_steps);
}

/// Step budget ceil(1.5 * d_max * N) for free-running decodes.
inline std::size_t free_running_budget(std::size_t n_inputs, int max_duration) {
  return static_cast<std::size_t>(
      std::ceil(1.5 * static_cast<double>(max_duration) * static_cast<double>(n_inputs)));
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},       {"frame_dim", c.frame_dim},
          {"embed_dim", c.embed_dim},         {"encoder_dim", c.encoder_dim},
          {"decoder_dim", c.decoder_dim},     {"attention_dim", c.attention_dim},
          {"location_kernel", c.location_kernel},
          {"location_filters", c.location_filters}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.frame_dim = j.at("frame_dim").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.encoder_dim = j.at("encoder_dim").get<int>();
  c.decoder_dim = j.at("decoder_dim").get<int>();
  c.attention_dim = j.at("attention_dim").get<int>();
  c.location_kernel = j.at("location_kernel").get<int>();
  c.location_filters = j.at("location_filters").get<int>();
  c.validate();
  return c;
}

inline nlohmann::json checkpoint_json(const ToyModelParams& params) {
  nlohmann::json weights = nlohmann::json::object();
  params.visit([&](const char* name, const ad::Tensor& t, bool) {
    weights[name] = {{"shape", t.shape()},
                     {"values", std::vector<double>(t.data().begin(), t.data().end())}};
  });
  return {{"config", to_json(params.config)}, {"weights", std::move(weights)}};
}

/// Rebuilds parameters from a checkpoint, validating every weight's shape
/// against the shapes implied by the stored config.
inline ToyModelParams params_from_checkpoint(const nlohmann::json& j) {
  try {
    ToyModelParams p = zero_params(model_config_from_json(j.at("config")));
    const auto& weights = j.at("weights");
    p.visit([&](const char* name, ad::Tensor& t, bool) {
      const auto& w = weights.at(name);
      auto shape = w.at("shape").get<std::vector<std::size_t>>();
      auto values = w.at("values").get<std::vector<double>>();
      if (shape != t.shape()) {
        throw IoError(std::string("checkpoint weight '") + name +
                      "' has the wrong shape for its config");
      }
      t = ad::Tensor(std::move(shape), std::move(values));
    });
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed checkpoint: ") + e.what());
  } catch (const ShapeError& e) {
    throw IoError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path,
                            const ToyModelParams& params) {
  io::write_text_file(path, io::dump_json(checkpoint_json(params)) + "\n");
}

inline ToyModelParams load_checkpoint(const std::filesystem::path& path) {
  return params_from_checkpoint(io::read_json_file(path));
}

}  // namespace monalign::model
