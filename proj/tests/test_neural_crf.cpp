#include <gtest/gtest.h>

#include <cmath>

#include "dense_attention_oracle.hpp"
#include "gradcheck.hpp"
#include "nwcrf/crf_classic.hpp"
#include "nwcrf/neural_crf.hpp"

using namespace nwcrf;
using nwcrf::testing::check_gradients;
using nwcrf::testing::dense_attention_reference;
using nwcrf::testing::random_tensor;

namespace {

CrfStageConfig small_cfg() {
  CrfStageConfig cfg;
  cfg.heads = 2;
  cfg.head_dim = 2;
  cfg.window = 2;
  cfg.feat_channels = 3;
  return cfg;
}

std::vector<int> full_segments(int64_t n2) { return std::vector<int>(static_cast<size_t>(n2), 0); }

}  // namespace

TEST(RelativeBias, ZeroTableGivesZeroMatrices) {
  CrfStageConfig cfg = small_cfg();
  Tape t;
  Var table = t.constant(Tensor({cfg.bias_rows(), cfg.heads}));
  auto mats = relative_bias_lookup(table, cfg.window);
  ASSERT_EQ(mats.size(), 2u);
  for (const Var& m : mats)
    for (int64_t i = 0; i < t.value(m).numel(); ++i) EXPECT_DOUBLE_EQ(t.value(m)[i], 0.0);
}

TEST(RelativeBias, DegenerateWindowReadsSingleEntry) {
  Tape t;
  Var table = t.constant(Tensor({1, 1}, {4.5}));
  auto mats = relative_bias_lookup(table, 1);
  ASSERT_EQ(mats.size(), 1u);
  EXPECT_DOUBLE_EQ(t.value(mats[0])[0], 4.5);
}

TEST(RelativeBias, EqualOffsetsShareTableRows) {
  Tape t;
  Rng rng(20);
  Var table = t.constant(random_tensor({9, 1}, rng));  // N = 2
  auto mats = relative_bias_lookup(table, 2);
  const Tensor& p = t.value(mats[0]);
  // offset (+1,+1): slot 0 -> slot 3; identical wherever the offset repeats
  EXPECT_DOUBLE_EQ(p.at(0, 3), t.value(table).at(2 * 3 + 2, 0));
  // offset (0,0) everywhere on the diagonal
  for (int64_t a = 0; a < 4; ++a)
    EXPECT_DOUBLE_EQ(p.at(a, a), t.value(table).at(1 * 3 + 1, 0));
}

TEST(RelativeBias, TableSizeMismatch) {
  Tape t;
  Var table = t.constant(Tensor({4, 1}));
  EXPECT_THROW(relative_bias_lookup(table, 2), ShapeError);
}

TEST(AttentionPairwise, ZeroWeightsGiveUniformAverage) {
  CrfStageConfig cfg = small_cfg();
  cfg.norm_features = true;
  Tape t;
  Rng rng(21);
  Var f = t.constant(random_tensor({4, 3}, rng));
  Tensor xv = random_tensor({4, 4}, rng);
  Var x = t.constant(xv);
  Var wq = t.constant(Tensor({3, 4}));
  Var wk = t.constant(Tensor({3, 4}));
  std::vector<Var> bias{t.constant(Tensor({4, 4})), t.constant(Tensor({4, 4}))};
  Var out = attention_pairwise(f, x, bias, full_segments(4), wq, wk, cfg);
  for (int64_t ch = 0; ch < 4; ++ch) {
    double mean = (xv.at(0, ch) + xv.at(1, ch) + xv.at(2, ch) + xv.at(3, ch)) / 4.0;
    for (int64_t i = 0; i < 4; ++i) EXPECT_NEAR(t.value(out).at(i, ch), mean, 1e-12);
  }
}

TEST(AttentionPairwise, SingleValidNodePassesItsSlice) {
  CrfStageConfig cfg = small_cfg();
  Tape t;
  Rng rng(22);
  Var f = t.constant(random_tensor({4, 3}, rng));
  Tensor xv = random_tensor({4, 4}, rng);
  Var x = t.constant(xv);
  Var wq = t.constant(random_tensor({3, 4}, rng));
  Var wk = t.constant(random_tensor({3, 4}, rng));
  std::vector<Var> bias{t.constant(random_tensor({4, 4}, rng)),
                        t.constant(random_tensor({4, 4}, rng))};
  std::vector<int> seg{-1, 0, -1, -1};  // one valid node in slot 1
  Var out = attention_pairwise(f, x, bias, seg, wq, wk, cfg);
  for (int64_t ch = 0; ch < 4; ++ch) EXPECT_NEAR(t.value(out).at(1, ch), xv.at(1, ch), 1e-12);
}

TEST(AttentionPairwise, TwoNodeClosedForm) {
  // logits row [0, ln 3] against prediction values [1, 5]: 0.25*1 + 0.75*5
  CrfStageConfig cfg;
  cfg.heads = 1;
  cfg.head_dim = 1;
  cfg.window = 2;
  cfg.feat_channels = 2;
  cfg.norm_features = false;
  Tape t;
  Var f = t.constant(Tensor({4, 2}));
  Var x = t.constant(Tensor({4, 1}, {1.0, 5.0, 0.0, 0.0}));
  Var wq = t.constant(Tensor({2, 1}));
  Var wk = t.constant(Tensor({2, 1}));
  Tensor table({9, 1});
  table.at(1 * 3 + 1, 0) = 0.0;           // offset (0,0)
  table.at(1 * 3 + 2, 0) = std::log(3.0);  // offset (0,+1)
  table.at(1 * 3 + 0, 0) = -std::log(3.0);
  auto bias = relative_bias_lookup(t.constant(table), 2);
  std::vector<int> seg{0, 0, -1, -1};
  Var out = attention_pairwise(f, x, bias, seg, wq, wk, cfg);
  EXPECT_NEAR(t.value(out).at(0, 0), 4.0, 1e-12);
}

TEST(AttentionPairwise, FullyMaskedWindowIsDegenerate) {
  CrfStageConfig cfg = small_cfg();
  Tape t;
  Rng rng(23);
  Var f = t.constant(random_tensor({4, 3}, rng));
  Var x = t.constant(random_tensor({4, 4}, rng));
  Var wq = t.constant(Tensor({3, 4}));
  Var wk = t.constant(Tensor({3, 4}));
  std::vector<Var> bias{t.constant(Tensor({4, 4})), t.constant(Tensor({4, 4}))};
  std::vector<int> seg{-1, -1, -1, -1};
  EXPECT_THROW(attention_pairwise(f, x, bias, seg, wq, wk, cfg), DegenerateError);
}

TEST(AttentionPairwise, RowsSumToOneOverValidNodes) {
  // with the prediction fixed at one on valid nodes and zero on padding, each
  // output equals the attention row sum: 1 iff weights stay on valid nodes
  CrfStageConfig cfg = small_cfg();
  cfg.window = 3;
  Tape t;
  Rng rng(24);
  Var f = t.constant(random_tensor({9, 3}, rng, -2.0, 2.0));
  Tensor xv({9, 4});
  std::vector<int> seg{0, 0, 1, 0, -1, 1, 1, 1, 0};  // mixed segments plus padding
  for (int64_t i = 0; i < 9; ++i)
    if (seg[static_cast<size_t>(i)] >= 0)
      for (int64_t ch = 0; ch < 4; ++ch) xv.at(i, ch) = 1.0;
  Var x = t.constant(xv);
  Var wq = t.constant(random_tensor({3, 4}, rng));
  Var wk = t.constant(random_tensor({3, 4}, rng));
  std::vector<Var> bias{t.constant(random_tensor({9, 9}, rng)),
                        t.constant(random_tensor({9, 9}, rng))};
  Var out = attention_pairwise(f, x, bias, seg, wq, wk, cfg);
  for (int64_t i = 0; i < 9; ++i) {
    if (seg[static_cast<size_t>(i)] < 0) continue;
    for (int64_t ch = 0; ch < 4; ++ch) EXPECT_NEAR(t.value(out).at(i, ch), 1.0, 1e-9);
  }
}

TEST(AttentionPairwise, PermutationCovariance) {
  CrfStageConfig cfg = small_cfg();
  Tape t;
  Rng rng(25);
  Tensor fv = random_tensor({4, 3}, rng), xv = random_tensor({4, 4}, rng);
  Tensor b0 = random_tensor({4, 4}, rng), b1 = random_tensor({4, 4}, rng);
  Tensor wq = random_tensor({3, 4}, rng), wk = random_tensor({3, 4}, rng);
  std::vector<int> seg{0, 0, 0, 0};
  std::vector<int64_t> perm{2, 0, 3, 1};

  Var base = attention_pairwise(t.constant(fv), t.constant(xv),
                                std::vector<Var>{t.constant(b0), t.constant(b1)}, seg,
                                t.constant(wq), t.constant(wk), cfg);

  auto permute_rows = [&](const Tensor& m) {
    Tensor out(m.extents());
    for (int64_t i = 0; i < 4; ++i)
      for (int64_t j = 0; j < m.extent(1); ++j) out.at(i, j) = m.at(perm[static_cast<size_t>(i)], j);
    return out;
  };
  auto permute_both = [&](const Tensor& m) {
    Tensor out(m.extents());
    for (int64_t i = 0; i < 4; ++i)
      for (int64_t j = 0; j < 4; ++j)
        out.at(i, j) = m.at(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
    return out;
  };
  Var permuted = attention_pairwise(
      t.constant(permute_rows(fv)), t.constant(permute_rows(xv)),
      std::vector<Var>{t.constant(permute_both(b0)), t.constant(permute_both(b1))}, seg,
      t.constant(wq), t.constant(wk), cfg);

  const Tensor& a = t.value(base);
  const Tensor& b = t.value(permuted);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t ch = 0; ch < 4; ++ch)
      EXPECT_NEAR(b.at(i, ch), a.at(perm[static_cast<size_t>(i)], ch), 1e-13);
}

TEST(AttentionStage, WholeWindowMatchesDenseReference) {
  // 8x8 grid, window 8: one window covers the graph; compare against the
  // independent all-pairs implementation
  CrfStageConfig cfg;
  cfg.heads = 2;
  cfg.head_dim = 3;
  cfg.window = 8;
  cfg.feat_channels = 5;
  Rng rng(26);
  Tensor f = random_tensor({8, 8, 5}, rng);
  Tensor x = random_tensor({8, 8, 6}, rng);
  CrfStageParams params = init_crf_stage(cfg, 42, "stage");
  params.bias_table = random_tensor({cfg.bias_rows(), cfg.heads}, rng, -0.5, 0.5);

  Tape t;
  CrfStageVars vars = lift(t, params);
  WindowPartition part = partition_windows(8, 8, 8, false);
  AttentionStats stats;
  Var out = attention_stage(t.constant(f), t.constant(x), part, vars, cfg, &stats);

  Tensor ref = dense_attention_reference(f.reshaped({64, 5}), x.reshaped({64, 6}),
                                         params.query_weight, params.key_weight,
                                         params.bias_table, 8, cfg);
  EXPECT_LT(max_abs_diff(t.value(out).reshaped({64, 6}), ref), 1e-10);
  EXPECT_EQ(stats.logit_entries, 64 * 64);
  EXPECT_EQ(stats.windows, 1);
}

TEST(AttentionStage, LogitCountMatchesEdgeAccounting) {
  CrfStageConfig cfg = small_cfg();
  Rng rng(27);
  Tensor f = random_tensor({4, 4, 3}, rng);
  Tensor x = random_tensor({4, 4, 4}, rng);
  CrfStageParams params = init_crf_stage(cfg, 7, "s");
  Tape t;
  CrfStageVars vars = lift(t, params);
  WindowPartition part = partition_windows(4, 4, 2, false);
  AttentionStats stats;
  attention_stage(t.constant(f), t.constant(x), part, vars, cfg, &stats);
  // k * N^4 = hw * N^2; pair messages excluding self match Eq-style counts
  EXPECT_EQ(stats.logit_entries, part.window_count * 16);
  EXPECT_EQ(stats.logit_entries, 16 * 4);
  EXPECT_EQ(stats.logit_entries - 16, count_pairwise_edges(4, 4, 2, false));
}

TEST(AttentionStage, LocalityWithinWindows) {
  CrfStageConfig cfg = small_cfg();
  Rng rng(28);
  Tensor f = random_tensor({4, 4, 3}, rng);
  Tensor x = random_tensor({4, 4, 4}, rng);
  CrfStageParams params = init_crf_stage(cfg, 8, "s");
  WindowPartition part = partition_windows(4, 4, 2, false);

  Tape t1;
  Var out1 = attention_stage(t1.constant(f), t1.constant(x), part, lift(t1, params), cfg);

  // perturb every node outside window (0,0) = nodes {(0,0),(0,1),(1,0),(1,1)}
  Tensor f2 = f, x2 = x;
  for (int64_t y = 0; y < 4; ++y)
    for (int64_t x0 = 0; x0 < 4; ++x0) {
      if (y < 2 && x0 < 2) continue;
      for (int64_t c = 0; c < 3; ++c) f2.at(y, x0, c) += rng.uniform(-3.0, 3.0);
      for (int64_t c = 0; c < 4; ++c) x2.at(y, x0, c) += rng.uniform(-3.0, 3.0);
    }
  Tape t2;
  Var out2 = attention_stage(t2.constant(f2), t2.constant(x2), part, lift(t2, params), cfg);

  for (int64_t y = 0; y < 2; ++y)
    for (int64_t x0 = 0; x0 < 2; ++x0)
      for (int64_t c = 0; c < 4; ++c)
        EXPECT_DOUBLE_EQ(t1.value(out1).at(y, x0, c), t2.value(out2).at(y, x0, c));
}

TEST(CrfBlock, AllZeroParamsGiveConstantOutput) {
  CrfStageConfig cfg = small_cfg();
  CrfBlockParams params;  // all zeros
  auto zero_stage = [&] {
    CrfStageParams s;
    s.query_weight = Tensor({3, 4});
    s.key_weight = Tensor({3, 4});
    s.bias_table = Tensor({9, 2});
    s.unary = ConvParams{Tensor({3, 3, 7, 4}), Tensor({4})};
    s.opt1 = LinearParams{Tensor({8, 16}), Tensor({16})};
    s.opt2 = LinearParams{Tensor({16, 4}), Tensor({4})};
    return s;
  };
  params.regular = zero_stage();
  params.shifted = zero_stage();
  params.shifted.opt2.bias = Tensor({4}, {1.0, -2.0, 0.5, 3.0});

  Rng rng(29);
  Tape t;
  Var out = crf_block_forward(t.constant(random_tensor({4, 4, 3}, rng)),
                              t.constant(random_tensor({4, 4, 4}, rng)), lift(t, params), cfg);
  for (int64_t y = 0; y < 4; ++y)
    for (int64_t x = 0; x < 4; ++x) {
      EXPECT_DOUBLE_EQ(t.value(out).at(y, x, 0), 1.0);
      EXPECT_DOUBLE_EQ(t.value(out).at(y, x, 1), -2.0);
      EXPECT_DOUBLE_EQ(t.value(out).at(y, x, 2), 0.5);
      EXPECT_DOUBLE_EQ(t.value(out).at(y, x, 3), 3.0);
    }
}

TEST(CrfStage, IdentityWiringPassesPairwiseThrough) {
  // optimization network wired to reproduce the pairwise slice (unary path
  // zeroed): stage output equals the attention message-passing result
  CrfStageConfig cfg = small_cfg();
  int64_t cx = cfg.pred_channels();
  CrfStageParams params = init_crf_stage(cfg, 30, "s");
  params.unary.kernel = Tensor({3, 3, 3 + cx, cx});
  params.unary.bias = Tensor({cx});
  params.opt1.weight = Tensor({2 * cx, cfg.mlp_ratio * cx});
  params.opt1.bias = Tensor({cfg.mlp_ratio * cx});
  params.opt2.weight = Tensor({cfg.mlp_ratio * cx, cx});
  params.opt2.bias = Tensor({cx});
  for (int64_t j = 0; j < cx; ++j) {
    params.opt1.weight.at(cx + j, j) = 1.0;  // pairwise slice of the energy stack
    params.opt1.bias[j] = 10.0;              // stay in the linear tail of gelu
    params.opt2.weight.at(j, j) = 1.0;
    params.opt2.bias[j] = -10.0;
  }

  Rng rng(31);
  Tensor f = random_tensor({4, 4, 3}, rng);
  Tensor x = random_tensor({4, 4, cx}, rng);
  WindowPartition part = partition_windows(4, 4, 2, false);
  Tape t;
  CrfStageVars vars = lift(t, params);
  Var staged = crf_stage_forward(t.constant(f), t.constant(x), part, vars, cfg);
  Var attended = attention_stage(t.constant(f), t.constant(x), part, vars, cfg);
  EXPECT_LT(max_abs_diff(t.value(staged), t.value(attended)), 1e-9);
}

TEST(CrfBlock, GradCheckEveryParameterTensor) {
  CrfStageConfig cfg = small_cfg();
  Rng rng(32);
  Tensor f = random_tensor({4, 4, 3}, rng);
  Tensor x = random_tensor({4, 4, 4}, rng);
  CrfBlockParams params = init_crf_block(cfg, 33, "block");
  params.regular.bias_table = random_tensor({9, 2}, rng, -0.3, 0.3);
  params.shifted.bias_table = random_tensor({9, 2}, rng, -0.3, 0.3);

  std::vector<Tensor> inputs;
  std::vector<std::string> names;
  visit_params(params, "block", [&](const std::string& name, Tensor& tensor) {
    names.push_back(name);
    inputs.push_back(tensor);
  });
  inputs.push_back(f);
  inputs.push_back(x);

  auto build = [&cfg](Tape& t, const std::vector<Var>& v) {
    CrfBlockVars vars;
    size_t i = 0;
    auto next = [&] { return v[i++]; };
    for (CrfStageVars* st : {&vars.regular, &vars.shifted}) {
      st->query_weight = next();
      st->key_weight = next();
      st->bias_table = next();
      st->unary = ConvVars{next(), next()};
      st->opt1 = LinearVars{next(), next()};
      st->opt2 = LinearVars{next(), next()};
    }
    Var ff = next();
    Var xx = next();
    Var out = crf_block_forward(ff, xx, vars, cfg);
    return sum(mul(out, out));
  };
  auto rep = check_gradients(build, inputs, 6, 400);
  EXPECT_LT(rep.max_rel_err, 1e-4) << "over " << rep.checked << " sampled elements";
}
