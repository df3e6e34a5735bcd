#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fixtures.hpp"
#include "txnf/checkpoint.hpp"
#include "txnf/trainer.hpp"

namespace txnf {
namespace {

using testing::tiny_data;

ModelConfig small_model() {
  ModelConfig c;
  c.hidden_dim = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.input_layers = 1;
  c.ffn_multiplier = 2;
  c.numeric_width = 2;
  c.max_seq_len = 64;
  c.init_seed = 1;
  return c;
}

TrainConfig small_train(int epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 4;
  t.learning_rate = 3e-3;
  t.n_negative = 16;
  t.seed = 5;
  return t;
}

std::string tmp(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("txnf_trainer_" + name)).string();
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
  TrainConfig c = small_train(3);
  c.aggregation = Aggregation::kEqual;
  c.task = TaskMode::kMerchantOnly;
  EXPECT_EQ(TrainConfig::from_json(c.to_json()).to_json(), c.to_json());
  EXPECT_THROW(TrainConfig::from_json({{"learning_rate", -1.0}}), ValidationError);
  EXPECT_THROW(TrainConfig::from_json({{"lr", 1.0}}), ValidationError);
  try {
    TrainConfig::from_json({{"batch_size", 0}});
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.field(), "batch_size");
  }
}

TEST(Trainer, OneEpochCountsOneStepPerBatch) {
  const auto d = tiny_data(40, 40, 3);
  const std::vector<CardSequence> train_set(d.seqs.begin(), d.seqs.begin() + 40);
  TrainConfig t = small_train(1);
  t.batch_size = 4;  // 40 cards -> 10 batches
  const auto r = train(d.schema, train_set, train_set, small_model(), t);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.history[0].steps, 10);
  EXPECT_EQ(r.total_steps, 10);
}

TEST(Trainer, HistoryHasEveryAttributeEveryEpoch) {
  const auto d = tiny_data(16, 40, 4);
  const auto r = train(d.schema, d.seqs, d.seqs, small_model(), small_train(3));
  ASSERT_EQ(r.history.size(), 3u);
  for (const auto& e : r.history) {
    for (const auto& a : d.schema.attributes()) {
      if (a.has(kNextTarget) || a.has(kCurrentSignal)) {
        EXPECT_TRUE(e.train.count(a.name)) << a.name;
        EXPECT_TRUE(e.val.count(a.name)) << a.name;
      }
    }
  }
}

TEST(Trainer, BitReproducible) {
  const auto d = tiny_data(16, 40, 4);
  const auto a = train(d.schema, d.seqs, d.seqs, small_model(), small_train(2));
  const auto b = train(d.schema, d.seqs, d.seqs, small_model(), small_train(2));
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].to_json().dump(), b.history[i].to_json().dump());
  for (std::size_t i = 0; i < a.last.params.size(); ++i) EXPECT_TRUE(a.last.params[i].value == b.last.params[i].value);
}

TEST(Trainer, LossDecreasesOnHundredCards) {
  const auto d = tiny_data(100, 60, 8, 1024, 12.0);
  TrainConfig t = small_train(20);
  t.batch_size = 16;
  const auto r = train(d.schema, d.seqs, d.seqs, small_model(), t);
  EXPECT_LT(r.history.back().train.at("aggregate"), r.history.front().train.at("aggregate"));
}

TEST(Trainer, ResumeZeroEpochsIsNoOp) {
  const auto d = tiny_data(16, 40, 4);
  const auto r = train(d.schema, d.seqs, d.seqs, small_model(), small_train(1));
  const std::string path = tmp("last.ckpt");
  save_checkpoint(path, r.last);
  const auto again = resume(load_checkpoint(path), d.schema, d.seqs, d.seqs, small_train(1), 0);
  EXPECT_TRUE(again.history.empty());
  for (std::size_t i = 0; i < r.last.params.size(); ++i) {
    EXPECT_TRUE(again.last.params[i].value == r.last.params[i].value) << r.last.params[i].name;
  }
}

TEST(Trainer, TrainThenResumeEqualsLongerRun) {
  const auto d = tiny_data(16, 40, 4);
  const auto full = train(d.schema, d.seqs, d.seqs, small_model(), small_train(3));
  const auto head = train(d.schema, d.seqs, d.seqs, small_model(), small_train(2));
  const std::string path = tmp("resume.ckpt");
  save_checkpoint(path, head.last);
  const auto tail = resume(load_checkpoint(path), d.schema, d.seqs, d.seqs, small_train(3), 1);
  ASSERT_EQ(tail.history.size(), 1u);
  EXPECT_EQ(tail.history[0].to_json().dump(), full.history[2].to_json().dump());
  for (std::size_t i = 0; i < full.last.params.size(); ++i) {
    EXPECT_TRUE(tail.last.params[i].value == full.last.params[i].value) << full.last.params[i].name;
  }
}

TEST(Trainer, ResumeWithOtherSeedDiverges) {
  const auto d = tiny_data(16, 40, 4);
  const auto head = train(d.schema, d.seqs, d.seqs, small_model(), small_train(1));
  TrainConfig other = small_train(1);
  other.seed = 99;
  const auto a = resume(head.last, d.schema, d.seqs, d.seqs, small_train(1), 1);
  const auto b = resume(head.last, d.schema, d.seqs, d.seqs, other, 1);
  EXPECT_FALSE(a.last.params[0].value == b.last.params[0].value);
  EXPECT_TRUE(std::isfinite(b.history[0].val.at("aggregate")));
}

TEST(Trainer, ResumeRefusesForeignSchema) {
  const auto d = tiny_data(16, 40, 4);
  const auto other = tiny_data(16, 40, 5);
  const auto r = train(d.schema, d.seqs, d.seqs, small_model(), small_train(1));
  ASSERT_NE(d.schema.hash(), other.schema.hash());
  EXPECT_THROW(resume(r.last, other.schema, other.seqs, other.seqs, small_train(1), 1), SchemaMismatch);
}

TEST(Trainer, NonFiniteLossNamesAttribute) {
  const auto d = tiny_data(16, 40, 4);
  Model<float> m(d.schema, small_model());
  m.params().get("head.next.mu.w").value.setConstant(std::numeric_limits<float>::quiet_NaN());
  Checkpoint c = make_checkpoint(m);
  c.meta["trainer"] = {{"epochs_done", 0}, {"steps", 0}, {"best_selection", nullptr}, {"best_epoch", 0}};
  c.optimizer = AdamW(small_train(1)).state();
  c.flags |= Checkpoint::kOptimizerState;
  try {
    resume(c, d.schema, d.seqs, d.seqs, small_train(1), 1);
    FAIL() << "expected NonFiniteLoss";
  } catch (const NonFiniteLoss& e) {
    EXPECT_TRUE(e.attribute() == "amount" || e.attribute() == "gap_hours") << e.attribute();
  }
}

TEST(Trainer, SingleTaskModesLeaveOtherHeadsUntouched) {
  const auto d = tiny_data(16, 40, 4);
  for (TaskMode mode : {TaskMode::kAbnormalOnly, TaskMode::kMerchantOnly}) {
    TrainConfig t = small_train(1);
    t.task = mode;
    t.weight_decay = 0.0;  // decay alone would move every parameter
    const Model<float> init(d.schema, small_model());
    const auto r = train(d.schema, d.seqs, d.seqs, small_model(), t);
    const std::string other = mode == TaskMode::kAbnormalOnly ? "head.next.merchant.w" : "head.current.abnormal_flag.w";
    const std::string own = mode == TaskMode::kAbnormalOnly ? "head.current.abnormal_flag.w" : "head.next.merchant.w";
    EXPECT_TRUE(r.last.find(other)->value == init.params().get(other).value) << to_string(mode);
    EXPECT_TRUE(r.last.find("head.next.mu.w")->value == init.params().get("head.next.mu.w").value);
    EXPECT_FALSE(r.last.find(own)->value == init.params().get(own).value);
  }
}

TEST(Trainer, BestCheckpointTracksSelectionMetric) {
  const auto d = tiny_data(16, 40, 4);
  const auto r = train(d.schema, d.seqs, d.seqs, small_model(), small_train(4));
  double best = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  for (const auto& e : r.history) {
    EXPECT_EQ(e.selection, e.val.at("abnormal_flag"));
    const bool improves = e.selection < best;
    EXPECT_EQ(e.best, improves);
    if (improves) {
      best = e.selection;
      best_epoch = e.epoch;
    }
  }
  EXPECT_EQ(r.best.meta.at("trainer").at("best_epoch").get<int>(), best_epoch);
}

TEST(Checkpoint, RoundTripBitExact) {
  const auto d = tiny_data();
  const Model<float> m(d.schema, small_model());
  const std::string path = tmp("rt.ckpt");
  save_checkpoint(path, make_checkpoint(m));
  const Model<float> back = restore_model(load_checkpoint(path));
  for (std::size_t i = 0; i < m.params().size(); ++i) EXPECT_TRUE(back.params()[i].value == m.params()[i].value);
  EXPECT_EQ(back.config().to_json(), m.config().to_json());
}

TEST(Checkpoint, HalfPrecisionExport) {
  const auto d = tiny_data();
  const Model<float> m(d.schema, small_model());
  Checkpoint c = make_checkpoint(m);
  c.flags |= Checkpoint::kHalfPrecision;
  const std::string full = tmp("full.ckpt"), half = tmp("half.ckpt");
  save_checkpoint(full, make_checkpoint(m));
  save_checkpoint(half, c);
  EXPECT_LT(std::filesystem::file_size(half), std::filesystem::file_size(full));
  const Model<float> back = restore_model(load_checkpoint(half));
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto& a = m.params()[i].value;
    const auto& b = back.params()[i].value;
    EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-3f * std::max(1.0f, a.cwiseAbs().maxCoeff()));
  }
  EXPECT_EQ(float_to_half(1.0f), 0x3C00);
  EXPECT_EQ(half_to_float(0xC000), -2.0f);
}

TEST(Checkpoint, RejectsGarbage) {
  const std::string path = tmp("garbage.ckpt");
  {
    std::ofstream(path) << "not a checkpoint at all";
  }
  EXPECT_THROW(load_checkpoint(path), Error);
}

TEST(AdamW, MatchesReferenceUpdate) {
  ParamStore<float> ps;
  auto& p = ps.add("w", Mat<float>::Constant(1, 1, 1.0f));
  TrainConfig c;
  c.learning_rate = 0.1;
  c.weight_decay = 0.5;
  AdamW opt(c);
  double value = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 3; ++t) {
    const double g = 0.3 * t;
    p.grad(0, 0) = static_cast<float>(g);
    opt.step(ps);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    value *= 1 - 0.1 * 0.5;
    value -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(p.value(0, 0), value, 1e-5);
  }
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  ParamStore<float> ps;
  ps.add("a", Mat<float>::Zero(1, 2)).grad << 3, 0;
  ps.add("b", Mat<float>::Zero(1, 1)).grad << 4;
  EXPECT_NEAR(clip_grad_norm(ps, 1.0), 5.0, 1e-6);
  EXPECT_NEAR(ps[0].grad(0, 0), 0.6f, 1e-6);
  EXPECT_NEAR(ps[1].grad(0, 0), 0.8f, 1e-6);
}

}  // namespace
}  // namespace txnf
