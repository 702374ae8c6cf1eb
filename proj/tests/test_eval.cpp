#include <gtest/gtest.h>

#include <cmath>

#include "cfsp/corpus.hpp"
#include "cfsp/eval.hpp"
#include "test_util.hpp"

using namespace cfsp;
using cfsp::testing::random_tokens;
using cfsp::testing::tiny_config;

TEST(Perplexity, UniformLogitsGiveVocabSize) {
  const auto m = make_zero_model(toy_config());
  const auto corpus = random_tokens(300, 512, 1);
  EXPECT_NEAR(perplexity(m, corpus, 64), 512.0, 1e-3);
}

TEST(Perplexity, ConfidentCorrectLogitsApproachOne) {
  const std::vector<std::uint32_t> tok{3, 1, 4, 1, 5};
  MatrixD logits(5, 8);
  for (std::size_t t = 0; t + 1 < tok.size(); ++t) logits(t, tok[t + 1]) = 40.0;
  const auto nll = next_token_nll(logits, tok);
  EXPECT_EQ(nll.count, 4u);
  EXPECT_NEAR(std::exp(nll.sum / 4.0), 1.0, 1e-12);
}

TEST(Perplexity, AtLeastOneAndDeterministic) {
  const auto m = make_random_model(tiny_config(), 2);
  const auto corpus = random_tokens(200, 32, 3);
  const double a = perplexity(m, corpus, 16);
  EXPECT_GE(a, 1.0);
  EXPECT_EQ(a, perplexity(m, corpus, 16));
}

TEST(Perplexity, InputErrors) {
  const auto m = make_random_model(tiny_config(), 4);
  const std::vector<std::uint32_t> empty;
  const std::vector<std::uint32_t> short_corpus{1, 2, 3};
  for (const auto* c : {&empty, &short_corpus}) {
    try {
      (void)perplexity(m, *c, 16);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::input);
    }
  }
}

TEST(Latency, QuantilesAndValidation) {
  EXPECT_EQ(quantile({5, 1, 3}, 0.5), 3.0);
  EXPECT_DOUBLE_EQ(quantile({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}, 0.1), 2.0);
  EXPECT_DOUBLE_EQ(quantile({1, 2}, 0.5), 1.5);
  const auto m = make_random_model(tiny_config(), 5);
  EXPECT_THROW((void)benchmark_latency(m, 8, 2), Error);
  const auto s = benchmark_latency(m, 8, 5, 1);
  EXPECT_EQ(s.samples_ms.size(), 5u);
  EXPECT_LE(s.p10_ms, s.median_ms);
  EXPECT_LE(s.median_ms, s.p90_ms);
}

TEST(EfficiencyReport, DenseAgainstItself) {
  const auto m = make_random_model(tiny_config(), 6);
  ReportOptions opt;
  opt.seq_len = 16;
  opt.reps = 3;
  const auto rep = efficiency_report({{"dense", &m}, {"dense", &m}}, opt);
  ASSERT_EQ(rep.rows.size(), 2u);
  EXPECT_EQ(*rep.rows[0].speedup, 1.0);
  EXPECT_EQ(rep.rows[0].params, rep.rows[1].params);
  EXPECT_EQ(rep.rows[0].macs, rep.rows[1].macs);
  EXPECT_NE(rep.csv(false).find("1.000000"), std::string::npos);
}

TEST(EfficiencyReport, HalfRetentionMatchesPrediction) {
  const auto m = make_random_model(toy_config(), 7);
  auto plan = keep_all_plan(m.config);
  for (auto& b : plan.blocks) {
    b.kept.resize(b.dim_o / 2);
    b.dim_f = b.kept.size();
  }
  const auto p = apply_plan(m, plan);
  ReportOptions opt;
  opt.seq_len = 32;
  opt.reps = 0;
  const auto corpus = random_tokens(256, 512, 8);
  opt.corpus = corpus;
  const auto rep = efficiency_report({{"dense", &m}, {"pruned", &p}}, opt);
  auto predicted = m.config;
  for (auto& d : predicted.d_ff_per_block) d /= 2;
  const double ratio = static_cast<double>(rep.rows[1].params) / static_cast<double>(rep.rows[0].params);
  const double want = static_cast<double>(count_params(predicted).total) / static_cast<double>(count_params(m.config).total);
  EXPECT_NEAR(ratio, want, 1e-6);
  EXPECT_EQ(rep.rows[1].macs, count_macs(predicted, 32).total());
  EXPECT_LT(rep.rows[1].checkpoint_bytes, rep.rows[0].checkpoint_bytes);
  EXPECT_FALSE(rep.rows[0].latency.has_value());
  ASSERT_TRUE(rep.rows[1].perplexity.has_value());
  // Without latency the table is a pure function of its inputs.
  EXPECT_EQ(rep.csv(false), efficiency_report({{"dense", &m}, {"pruned", &p}}, opt).csv(false));
  EXPECT_NE(rep.text(false).find("pruned"), std::string::npos);
}

TEST(EfficiencyReport, RejectsVocabMismatch) {
  const auto a = make_random_model(tiny_config(), 9);
  auto c = tiny_config();
  c.vocab_size = 16;
  const auto b = make_random_model(c, 10);
  ReportOptions opt;
  opt.reps = 0;
  opt.seq_len = 8;
  EXPECT_THROW((void)efficiency_report({{"a", &a}, {"b", &b}}, opt), Error);
}

TEST(Variants, Parsing) {
  EXPECT_EQ(parse_variants("all").size(), 12u);
  EXPECT_EQ(parse_variants("table5").size(), 8u);
  const auto v = parse_variants("angular:cfsp,uniform:magnitude");
  ASSERT_EQ(v.size(), 2u);
  EXPECT_TRUE(v[0].ours());
  EXPECT_EQ(v[1].metric, CoarseMetric::uniform);
  EXPECT_THROW((void)parse_variants("angular"), Error);
  EXPECT_THROW((void)parse_variants("angular:sparsegpt"), Error);
}

TEST(Ablation, EveryVariantRunsAndPassesEquivalence) {
  const auto m = make_random_model(toy_config(), 11);
  const auto corpus = make_copy_corpus(512, 2048, 32, 8, 12).tokens;
  const auto calib = sample_calibration(corpus, 8, 64, 13);
  const auto summaries = collect_summaries(m, calib);
  AblationOptions opt;
  opt.prune.gamma = 0.5;
  opt.prune.multiple = 8;
  opt.corpus = corpus;
  const auto rep = ablation_run(m, summaries, parse_variants("all"), opt);
  ASSERT_EQ(rep.rows.size(), 12u);
  int ours = 0;
  for (const auto& r : rep.rows) {
    EXPECT_TRUE(r.equivalent) << r.variant.label() << " " << r.max_abs_diff;
    EXPECT_GE(r.perplexity, 1.0);
    if (r.variant.ours()) ++ours;
    if (r.variant.metric == CoarseMetric::uniform) {
      for (auto d : r.dim_f) EXPECT_EQ(d, r.dim_f.front());
    }
  }
  EXPECT_EQ(ours, 1);
  EXPECT_NE(rep.text().find("Ours"), std::string::npos);
  EXPECT_EQ(rep.plot_csv().substr(0, 12), "variant,ppl\n");
}

TEST(Tables, AlignedText) {
  const auto t = aligned_table({"a", "bb"}, {{"xyz", "1"}, {"q", "22"}});
  EXPECT_EQ(t, "a    bb\n-------\nxyz   1\nq    22\n");
  EXPECT_EQ(csv_text({"a", "b"}, {{"1", "2"}}), "a,b\n1,2\n");
}
