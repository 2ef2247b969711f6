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


#include <gtest/gtest.h>

#include <filesystem>

#include "monalign/gradcheck.hpp"
#include "monalign/model.hpp"
#include "monalign/synth_data.hpp"

namespace {

namespace ad = monalign::ad;
namespace model = monalign::model;
namespace data = monalign::data;
using monalign::AlignConfig;

struct Fixture {
  model::ModelConfig config;
  model::ToyModelParams params;
  data::Dataset ds;
};

Fixture make_fixture(std::uint64_t seed) {
  data::DatasetConfig dc;
  dc.n_train = 4;
  dc.n_val = 4;
  dc.n_test = 4;
  dc.seed = seed;
  Fixture f{model::ModelConfig{}, {}, data::generate_dataset_in_memory(dc)};
  auto rng = data::seeded_stream(seed, 100);
  f.params = model::init_params(f.config, rng);
  return f;
}

TEST(InitParams, SeededBiasesZeroWeightsBounded) {
  model::ModelConfig c;
  auto r1 = data::seeded_stream(3, 100), r2 = data::seeded_stream(3, 100);
  const auto a = model::init_params(c, r1), b = model::init_params(c, r2);
  EXPECT_EQ(a, b);
  a.visit([](const char* name, const ad::Tensor& t, bool is_bias) {
    const double s = 1.0 / std::sqrt(static_cast<double>(t.rows()));
    for (double w : t.data()) {
      if (is_bias) {
        EXPECT_EQ(w, 0.0) << name;
      } else {
        EXPECT_LT(std::abs(w), 1.0) << name;
        EXPECT_LE(std::abs(w), s) << name;
      }
    }
  });
}

TEST(ModelConfig, RejectsEvenKernel) {
  model::ModelConfig c;
  c.location_kernel = 4;
  EXPECT_THROW(c.validate(), monalign::ConfigError);
  c.location_kernel = 5;
  c.decoder_dim = 0;
  EXPECT_THROW(c.validate(), monalign::ConfigError);
}

TEST(Forward, LambdaZeroTotalEqualsTaskLoss) {
  auto f = make_fixture(1);
  AlignConfig align{0.01, 0.0};
  const auto& ex = f.ds.train[0];
  const auto r = model::forward_teacher_forced(f.params, ex.tokens, ex.frames, align);
  EXPECT_EQ(r.total_loss, r.task_loss);
  EXPECT_GT(r.align_loss, 0.0);
}

TEST(Forward, DecompositionIsExact) {
  auto f = make_fixture(2);
  for (double lambda : {1e-5, 1e-3, 0.7}) {
    AlignConfig align{0.01, lambda};
    for (const auto& ex : f.ds.train) {
      const auto r = model::forward_teacher_forced(f.params, ex.tokens, ex.frames, align);
      EXPECT_EQ(r.total_loss - (r.task_loss + lambda * r.align_loss), 0.0);
      EXPECT_EQ(r.align_loss, monalign::alignment_loss(r.alignment, 0.01));
    }
  }
}

TEST(Forward, TaskLossIsFrameMse) {
  auto f = make_fixture(3);
  const auto& ex = f.ds.val[1];
  const auto r = model::forward_teacher_forced(f.params, ex.tokens, ex.frames, AlignConfig{});
  double s = 0.0;
  for (std::size_t k = 0; k < ex.frames.size(); ++k)
    s += std::pow(r.predicted_frames[k] - ex.frames[k], 2);
  EXPECT_NEAR(r.task_loss, s / static_cast<double>(ex.frames.size()), 1e-15);
}

TEST(Forward, AlignmentColumnsAreDistributions) {
  auto f = make_fixture(4);
  for (const auto& ex : f.ds.test) {
    const auto r = model::forward_teacher_forced(f.params, ex.tokens, ex.frames, AlignConfig{});
    ASSERT_EQ(r.alignment.n_inputs(), ex.n_inputs());
    ASSERT_EQ(r.alignment.n_frames(), ex.n_frames());
    for (std::size_t j = 0; j < ex.n_frames(); ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < ex.n_inputs(); ++i) s += r.alignment(i, j);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Forward, FrameWidthMismatchRejected) {
  auto f = make_fixture(5);
  const auto bad = ad::Tensor::zeros({3, 7});
  EXPECT_THROW(model::forward_teacher_forced(f.params, {0, 1}, bad, AlignConfig{}),
               monalign::ShapeError);
}

TEST(Gradients, EndToEndMatchesFiniteDifferences) {
  AlignConfig align{0.01, 1e-3};
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (std::size_t n : {3u, 4u}) {
      const auto r = monalign::check::check_model_gradients(seed, n, model::ModelConfig{}, align);
      EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed << " n " << n << " "
                                       << r.worst_parameter;
    }
  }
}

TEST(Gradients, ExcisedTermMatchesLambdaZero) {
  auto f = make_fixture(6);
  const auto& ex = f.ds.train[2];
  ad::Tape t1, t2;
  const auto a = model::loss_and_gradients(t1, f.params, ex.tokens, ex.frames,
                                           AlignConfig{0.01, 0.0});
  const auto b = model::loss_and_gradients(t2, f.params, ex.tokens, ex.frames,
                                           AlignConfig{0.01, 0.0},
                                           model::AlignmentTerm::kExcised);
  EXPECT_EQ(a.result.total_loss, b.result.total_loss);
  ASSERT_EQ(a.params.size(), b.params.size());
  for (std::size_t k = 0; k < a.params.size(); ++k) EXPECT_EQ(a.params[k], b.params[k]);
}

TEST(FreeRunning, StepBudgetAndColumns) {
  auto f = make_fixture(7);
  const auto& ex = f.ds.test[0];
  EXPECT_EQ(model::decode_free_running(f.params, ex.tokens, 1).alignment.n_frames(), 1u);
  const auto budget = model::free_running_budget(ex.n_inputs(), 4);
  EXPECT_EQ(budget, static_cast<std::size_t>(std::ceil(6.0 * static_cast<double>(ex.n_inputs()))));
  const auto r = model::decode_free_running(f.params, ex.tokens, budget);
  ASSERT_EQ(r.alignment.n_frames(), budget);
  ASSERT_EQ(r.predicted_frames.rows(), budget);
  for (std::size_t j = 0; j < budget; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < ex.n_inputs(); ++i) s += r.alignment(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(FreeRunning, AgreesWithTeacherForcingOnOwnPredictions) {
  auto f = make_fixture(8);
  for (const auto& ex : f.ds.val) {
    const auto fr = model::decode_free_running(f.params, ex.tokens, ex.n_frames());
    const auto tf = model::forward_teacher_forced(f.params, ex.tokens, fr.predicted_frames,
                                                  AlignConfig{});
    EXPECT_EQ(tf.predicted_frames, fr.predicted_frames);
    EXPECT_TRUE(std::equal(tf.alignment.values().begin(), tf.alignment.values().end(),
                           fr.alignment.values().begin()));
    EXPECT_EQ(tf.task_loss, 0.0);
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  auto f = make_fixture(9);
  const auto dir = std::filesystem::temp_directory_path() / "monalign_tests";
  std::filesystem::create_directories(dir);
  model::save_checkpoint(dir / "ck.json", f.params);
  EXPECT_EQ(model::load_checkpoint(dir / "ck.json"), f.params);
}

TEST(Checkpoint, ShapeMismatchRejected) {
  auto f = make_fixture(10);
  auto j = model::checkpoint_json(f.params);
  j["config"]["decoder_dim"] = 17;
  EXPECT_THROW(model::params_from_checkpoint(j), monalign::IoError);
  auto k = model::checkpoint_json(f.params);
  k["weights"].erase("output_bias");
  EXPECT_THROW(model::params_from_checkpoint(k), monalign::IoError);
}

}  // namespace
