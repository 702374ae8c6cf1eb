#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cfsp/accounting.hpp"
#include "cfsp/corpus.hpp"
#include "cfsp/recovery.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cfsp;
using cfsp::testing::random_tokens;
using cfsp::testing::tiny_config;

namespace {

std::vector<std::vector<std::uint32_t>> batch_of(std::size_t n, std::size_t len, std::size_t vocab, std::uint64_t seed) {
  std::vector<std::vector<std::uint32_t>> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_tokens(len, vocab, seed + i));
  return out;
}

template <Scalar T>
void randomize_up(AdapterSet<T>& set, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& blk : set.blocks) {
    for (auto& a : blk) {
      if (a) {
        for (auto& v : a->up.flat()) v = static_cast<T>(rng.normal(0.0, 0.1));
      }
    }
  }
}

}  // namespace

TEST(AllocateRanks, Examples) {
  EXPECT_EQ(allocate_ranks(std::vector<double>{0.5, 0.5, 0.5, 0.5}, 8).ranks, (std::vector<std::size_t>{8, 8, 8, 8}));
  EXPECT_EQ(allocate_ranks(std::vector<double>{0.45, 0.5, 0.55}, 8).ranks, (std::vector<std::size_t>{7, 8, 9}));
}

TEST(AllocateRanks, BudgetFloorAndMonotonicity) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> s(1 + rng.below(40));
    for (auto& v : s) v = rng.uniform(0.001, 0.999);
    const double r_bar = rng.uniform(1.0, 16.0);
    const auto a = allocate_ranks(s, r_bar);
    ASSERT_EQ(a.total(), static_cast<std::size_t>(std::llround(r_bar * static_cast<double>(s.size()))));
    for (std::size_t i = 0; i < s.size(); ++i) {
      ASSERT_GE(a.ranks[i], 1u);
      for (std::size_t j = 0; j < s.size(); ++j) {
        if (s[i] > s[j]) ASSERT_GE(a.ranks[i], a.ranks[j]);
      }
    }
  }
}

TEST(AllocateRanks, FloorTakesFromLargest) {
  // Raw ranks [0.06, 1.44, 1.5] integerize to [0, 1, 2]; the first block is
  // lifted to 1 at the expense of the largest.
  const auto a = allocate_ranks(std::vector<double>{0.01, 0.24, 0.25}, 1.0);
  EXPECT_EQ(a.total(), 3u);
  EXPECT_EQ(a.ranks, (std::vector<std::size_t>{1, 1, 1}));
  const auto no_floor = allocate_ranks(std::vector<double>{0.01, 0.24, 0.25}, 1.0, 0);
  EXPECT_EQ(no_floor.ranks, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_THROW((void)allocate_ranks(std::vector<double>{0.5}, 0.5), Error);
}

TEST(AttachAdapters, ZeroInitIsBitExact) {
  const auto m = make_random_model(tiny_config(), 2);
  const std::vector<std::size_t> ranks{3, 5};
  const auto targets = default_targets();
  const auto set = attach_adapters<float>(m.config, ranks, targets, 3);
  const auto tok = random_tokens(11, 32, 4);
  ForwardOptions<float> opt;
  opt.adapters = &set;
  EXPECT_EQ(forward_pass(m, tok, opt), forward_pass(m, tok));
}

TEST(AttachAdapters, ShapesScaleAndParameterCount) {
  const auto c = tiny_config(2, 16);
  const std::vector<std::size_t> ranks{2, 4};
  const auto targets = default_targets();
  const auto set = attach_adapters<float>(c, ranks, targets, 5);
  std::size_t expect = 0;
  for (std::size_t l = 0; l < 2; ++l) {
    for (Target t : targets) {
      const auto [in, out] = target_dims(c, l, t);
      const auto* a = set.find(l, t);
      ASSERT_NE(a, nullptr);
      EXPECT_EQ(a->down.rows(), ranks[l]);
      EXPECT_EQ(a->down.cols(), in);
      EXPECT_EQ(a->up.rows(), out);
      EXPECT_FLOAT_EQ(a->scale, 1.0f / static_cast<float>(ranks[l]));
      expect += ranks[l] * (in + out);
    }
    EXPECT_EQ(set.find(l, Target::k), nullptr);
    EXPECT_EQ(set.find(l, Target::o), nullptr);
  }
  EXPECT_EQ(set.parameter_count(), expect);
}

TEST(AttachAdapters, RankZeroLeavesBlockUntouched) {
  const auto c = tiny_config();
  const std::vector<std::size_t> ranks{0, 2};
  const auto targets = default_targets();
  const auto set = attach_adapters<float>(c, ranks, targets, 6);
  for (std::size_t t = 0; t < kTargetCount; ++t) EXPECT_FALSE(set.blocks[0][t].has_value());
  EXPECT_THROW((void)parse_target("ffn"), Error);
}

TEST(Gradient, MatchesFiniteDifferences) {
  const auto m = make_random_model<double>(tiny_config(2, 16), 7);
  const std::vector<std::size_t> ranks{2, 3};
  const auto targets = default_targets();
  auto set = attach_adapters<double>(m.config, ranks, targets, 8);
  randomize_up(set, 9);
  const auto batch = batch_of(2, 6, 32, 10);
  const auto lg = loss_and_grad(m, set, batch);
  EXPECT_NEAR(lg.loss, batch_loss(m, &set, batch), 1e-12);

  std::vector<Matrix<double>*> params, grads;
  for_each_adapter_matrix(set, [&](Matrix<double>& p) { params.push_back(&p); });
  auto g = lg.grad;
  for_each_adapter_matrix(g, [&](Matrix<double>& p) { grads.push_back(&p); });
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t k = 0; k < params[i]->size(); ++k) {
      const double fd = oracle::central_difference(
          [&] { return batch_loss(m, &set, batch); }, params[i]->flat()[k], 1e-2);
      worst = std::max(worst, oracle::relative_error(grads[i]->flat()[k], fd));
    }
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(Gradient, ThreadCountDoesNotChangeResult) {
  const auto m = make_random_model(tiny_config(), 11);
  auto set = attach_adapters<float>(m.config, std::vector<std::size_t>{2, 2}, default_targets(), 12);
  randomize_up(set, 13);
  const auto batch = batch_of(5, 8, 32, 14);
  const auto a = loss_and_grad(m, set, batch, 1);
  const auto b = loss_and_grad(m, set, batch, 3);
  EXPECT_EQ(a.loss, b.loss);
  for (std::size_t l = 0; l < 2; ++l) {
    for (Target t : default_targets()) {
      EXPECT_EQ(a.grad.find(l, t)->down, b.grad.find(l, t)->down);
      EXPECT_EQ(a.grad.find(l, t)->up, b.grad.find(l, t)->up);
    }
  }
}

TEST(Train, ZeroLearningRateKeepsAdaptersAndFlatLoss) {
  const auto m = make_random_model(tiny_config(), 15);
  const auto set = attach_adapters<float>(m.config, std::vector<std::size_t>{2, 2}, default_targets(), 16);
  const auto corpus = random_tokens(40, 32, 17);
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch_size = 1;
  cfg.seq_len = 40;  // the only window, so every step sees the same batch
  cfg.learning_rate = 0.0;
  const auto r = train(m, set, corpus, cfg);
  ASSERT_EQ(r.losses.size(), 5u);
  for (double l : r.losses) EXPECT_EQ(l, r.losses[0]);
  for (std::size_t l = 0; l < 2; ++l) {
    for (Target t : default_targets()) {
      EXPECT_EQ(r.adapters.find(l, t)->down, set.find(l, t)->down);
      EXPECT_EQ(r.adapters.find(l, t)->up, set.find(l, t)->up);
    }
  }
}

TEST(Train, LossDropsAndBaseUntouchedAndDeterministic) {
  const auto m = make_random_model(tiny_config(), 18);
  const auto before = m;
  const auto set = attach_adapters<float>(m.config, std::vector<std::size_t>{4, 4}, default_targets(), 19);
  const auto corpus = make_copy_corpus(32, 4000, 6, 8, 20).tokens;
  TrainConfig cfg;
  cfg.steps = 100;
  cfg.batch_size = 4;
  cfg.seq_len = 16;
  cfg.learning_rate = 3e-2;
  const auto a = train(m, set, corpus, cfg);
  const auto b = train(m, set, corpus, cfg);
  EXPECT_EQ(a.losses, b.losses);
  EXPECT_LT(a.losses.back(), 0.7 * a.losses.front());
  EXPECT_EQ(m, before);
}

TEST(Train, InvalidConfigAndNonFiniteLoss) {
  const auto m = make_random_model(tiny_config(), 21);
  const auto set = attach_adapters<float>(m.config, std::vector<std::size_t>{1, 1}, default_targets(), 22);
  const auto corpus = random_tokens(100, 32, 23);
  TrainConfig cfg;
  cfg.learning_rate = -1.0;
  EXPECT_THROW((void)train(m, set, corpus, cfg), Error);

  auto broken = m;
  broken.lm_head(0, 0) = std::numeric_limits<float>::infinity();
  cfg = TrainConfig{};
  cfg.steps = 3;
  cfg.seq_len = 8;
  try {
    (void)train(broken, set, corpus, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::non_finite);
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(Merge, ZeroAdaptersLeaveWeightsByteIdentical) {
  TempDir tmp;
  const auto m = make_random_model(tiny_config(), 24);
  AdaptedModel<float> am{m, attach_adapters<float>(m.config, std::vector<std::size_t>{2, 3}, default_targets(), 25)};
  const auto merged = merge_adapters(am);
  save_checkpoint(m, tmp.path() / "a");
  save_checkpoint(merged, tmp.path() / "b");
  EXPECT_EQ(read_file(tmp.path() / "a" / "weights.bin"), read_file(tmp.path() / "b" / "weights.bin"));
}

TEST(Merge, ForwardParityAndDoubleMergeRefused) {
  const auto m = make_random_model(tiny_config(2, 16), 26);
  auto set = attach_adapters<float>(m.config, std::vector<std::size_t>{3, 2}, default_targets(), 27);
  randomize_up(set, 28);
  for (auto& blk : set.blocks) {
    for (auto& a : blk) {
      if (a) {
        for (auto& v : a->down.flat()) v *= 10.0f;
      }
    }
  }
  AdaptedModel<float> am{m, set};
  const auto merged = merge_adapters(am);
  ForwardOptions<float> opt;
  opt.adapters = &set;
  for (int i = 0; i < 8; ++i) {
    const auto tok = random_tokens(12, 32, 29 + i);
    const auto a = forward_pass(m, tok, opt);
    const auto b = forward_pass(merged, tok);
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_LE(std::abs(a.flat()[k] - b.flat()[k]), 1e-5);
  }
  try {
    (void)merge_adapters(am);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::state);
  }
}

TEST(AdapterFiles, RoundTrip) {
  TempDir tmp;
  const auto c = tiny_config();
  const auto ranks = allocate_ranks(std::vector<double>{0.4, 0.6}, 3);
  auto set = attach_adapters<float>(c, ranks.ranks, default_targets(), 30);
  randomize_up(set, 31);
  save_adapters(set, ranks, tmp.path() / "ad");
  const auto back = load_adapters(tmp.path() / "ad");
  EXPECT_NO_THROW(validate_adapters(back, c));
  for (std::size_t l = 0; l < 2; ++l) {
    for (std::size_t t = 0; t < kTargetCount; ++t) {
      ASSERT_EQ(back.blocks[l][t].has_value(), set.blocks[l][t].has_value());
      if (!set.blocks[l][t]) continue;
      EXPECT_EQ(back.blocks[l][t]->down, set.blocks[l][t]->down);
      EXPECT_EQ(back.blocks[l][t]->up, set.blocks[l][t]->up);
      EXPECT_EQ(back.blocks[l][t]->scale, set.blocks[l][t]->scale);
    }
  }
  const auto manifest = read_json(tmp.path() / "ad" / "manifest.json");
  EXPECT_TRUE(manifest.dump().find("block1.gate.lora_up") != std::string::npos);
  EXPECT_THROW(validate_adapters(back, tiny_config(2, 8)), Error);
}

TEST(LossCsv, Format) {
  const std::vector<double> l{2.5, 1.25};
  EXPECT_EQ(loss_csv(l), "step,loss\n0,2.5\n1,1.25\n");
}
