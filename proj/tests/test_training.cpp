#include <gtest/gtest.h>

#include <sstream>

#include "aanet.hpp"
#include "checks.hpp"
#include "oracles.hpp"

using namespace aanet;

namespace {

DatasetSplit micro(const std::string& name, std::size_t count, double noise, std::uint64_t seed = 1,
                   const std::string& family = {}, std::size_t vocab = 4) {
  MicroLanguageSpec s;
  s.name = name;
  s.family = family;
  s.vocab_size = vocab;
  s.noise_std = noise;
  return split_dataset(generate_micro_language(s, count, seed), seed);
}

TrainingConfig quick(std::size_t epochs, std::uint64_t seed = 1) {
  TrainingConfig c;
  c.epochs = epochs;
  c.pretrain_epochs = epochs;
  c.seed = seed;
  return c;
}

CRDModel model_for(const std::vector<std::string>& names, std::size_t vocab = 4, std::uint64_t seed = 1) {
  std::vector<Language> langs;
  for (const auto& n : names) langs.push_back(Language::with_tokens(n, vocab));
  return build_model(Preset::Small, PlacementSpec::defaults(Preset::Small), langs, seed);
}

}  // namespace

TEST(TraceNorm, MatchesGramEigenvalues) { EXPECT_LE(checks::trace_norm_vs_gram(100, 1), 1e-8); }

TEST(TraceNorm, IdentityIsExactlyItsSize) {
  for (std::size_t L = 1; L <= 5; ++L) EXPECT_EQ(trace_norm(Matrix::identity(L)), static_cast<double>(L));
}

TEST(TraceNorm, ZeroAndRankOne) {
  EXPECT_EQ(trace_norm(Matrix(3, 5)), 0.0);
  const Matrix r1{{1, 2}, {2, 4}};
  EXPECT_NEAR(trace_norm(r1), 5.0, 1e-12);
  EXPECT_THROW(trace_norm(Matrix{{std::nan(""), 1.0}}), Error);
}

TEST(TraceNormSubgradient, MatchesFiniteDifferences) { EXPECT_LE(checks::trace_norm_subgradient_fd(30, 2), 1e-5); }

TEST(TraceNormSubgradient, ZeroAtOriginAndBoundedOtherwise) {
  EXPECT_EQ(trace_norm_subgradient(Matrix(2, 3)), Matrix(2, 3));
  const Matrix g = trace_norm_subgradient(Matrix{{1, 2, 0}, {2, 4, 0}});
  const Svd s = svd_small(g);
  EXPECT_NEAR(s.singular_values[0], 1.0, 1e-12);
  EXPECT_NEAR(s.singular_values[1], 0.0, 1e-12);
}

TEST(Relatedness, StackedRowsFollowRegistrationOrder) {
  CRDModel m = model_for({"a", "b", "c"});
  m.slots[3].for_language("b").lambda.fill(0.25);
  const Matrix s = stacked_lambda(m, 3);
  ASSERT_EQ(s.rows(), 3u);
  ASSERT_EQ(s.cols(), 5u);
  for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(s(1, j), 0.25);
  EXPECT_THROW(stacked_lambda(m, 0), Error);
}

TEST(Relatedness, GradientMatchesFiniteDifferences) {
  CRDModel m = model_for({"a", "b", "c"});
  Rng rng(71);
  for (std::size_t layer : m.adaptive_layers())
    for (auto& [n, act] : m.slots[layer].per_language)
      for (double& v : act.lambda.values()) v = uniform(rng, -1.0, 1.0);
  Gradients g;
  add_relatedness_gradient(m, 0.5, all_params(), g);
  ASSERT_EQ(g.size(), 6u);
  for (std::size_t layer : m.adaptive_layers())
    for (const auto& lang : m.languages) {
      Matrix& lam = m.slots[layer].for_language(lang.name).lambda;
      const Matrix fd = finite_diff_grad(
          [&](const Matrix& x) {
            const Matrix keep = lam;
            lam = x;
            const double v = 0.5 * relatedness_loss(m);
            lam = keep;
            return v;
          },
          lam, checks::kFdEps);
      const Matrix& an = g.at("act" + std::to_string(layer) + "." + lang.name + ".lambda");
      for (std::size_t j = 0; j < 5; ++j) EXPECT_LE(checks::grad_rel(an[j], fd[j]), 1e-5);
    }
}

TEST(Relatedness, RespectsTrainableFilter) {
  const CRDModel m = model_for({"a", "b"});
  Gradients g;
  add_relatedness_gradient(m, 1.0, language_params("b"), g);
  EXPECT_EQ(g.size(), 2u);
  for (const auto& [name, v] : g) EXPECT_NE(name.find(".b."), std::string::npos);
  Gradients none;
  add_relatedness_gradient(m, 0.0, all_params(), none);
  EXPECT_TRUE(none.empty());
}

TEST(MultilingualLoss, DecomposesIntoCtcPlusRegularizer) {
  const CRDModel m = model_for({"a", "b"});
  const std::map<std::string, double> ctc{{"a", 1.5}, {"b", 2.25}};
  EXPECT_EQ(multilingual_loss(ctc, m, 0.0), 3.75);
  EXPECT_NEAR(multilingual_loss(ctc, m, 0.1), 3.75 + 0.1 * relatedness_loss(m), 1e-15);
  EXPECT_THROW(multilingual_loss({{"zz", 1.0}}, m, 0.1), Error);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  TrainingConfig c;
  Matrix p{{0.5, -0.5}};
  MomentState st;
  adam_update(p, Matrix{{1.0, -1.0}}, st, c);
  // m̂ = g and v̂ = g², so the step is lr · |g| / (|g| + eps).
  EXPECT_NEAR(p(0, 0), 0.5 - c.learning_rate / (1.0 + c.adam_eps), 1e-15);
  EXPECT_NEAR(p(0, 1), -0.5 + c.learning_rate / (1.0 + c.adam_eps), 1e-15);
}

TEST(Adam, ClipsElementwiseBeforeTheUpdate) {
  TrainingConfig c;
  Matrix a{{0.0}}, b{{0.0}};
  MomentState sa, sb;
  for (int i = 0; i < 5; ++i) {
    adam_update(a, Matrix{{50.0}}, sa, c);
    adam_update(b, Matrix{{1.0}}, sb, c);
  }
  EXPECT_EQ(a, b);
  EXPECT_EQ(sa.v(0, 0), sb.v(0, 0));
}

TEST(Adam, MatchesClosedFormRecursion) {
  TrainingConfig c;
  const std::vector<double> gs{0.3, -0.7, 0.1, 2.0, -0.2};
  Matrix p{{1.0}};
  MomentState st;
  double x = 1.0, m = 0.0, v = 0.0;
  for (std::size_t t = 1; t <= gs.size(); ++t) {
    adam_update(p, Matrix{{gs[t - 1]}}, st, c);
    const double g = std::clamp(gs[t - 1], -1.0, 1.0);
    m = 0.9 * m + 0.1 * g;
    v = 0.98 * v + 0.02 * g * g;
    x -= 1e-3 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.98, t))) + 1e-8);
    EXPECT_NEAR(p(0, 0), x, 1e-15) << t;
  }
}

TEST(Adam, StepValidatesNamesAndShapes) {
  CRDModel m = model_for({"a"});
  OptimizerState st;
  TrainingConfig c;
  EXPECT_THROW(adam_step(m, {{"nope", Matrix(1, 1)}}, st, c), Error);
  EXPECT_THROW(adam_step(m, {{"head.a.b", Matrix(2, 2)}}, st, c), ShapeError);
  const std::string before = parameter_hash(m, shared_params());
  adam_step(m, {{"head.a.b", Matrix(1, 5, 1.0)}}, st, c);
  EXPECT_EQ(parameter_hash(m, shared_params()), before);
  EXPECT_EQ(st.steps, 1u);
}

TEST(Config, ValidatesAndParsesStrategies) {
  TrainingConfig c;
  c.alpha = -1;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.beta1 = 1.0;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_EQ(parse_strategy("CL&ML"), Strategy::CLML);
  EXPECT_EQ(to_string(parse_strategy("BN")), "BN");
  EXPECT_THROW(parse_strategy("XX"), Error);
}

TEST(Loop, OneLanguageMultilingualEqualsFromScratch) {
  const DatasetSplit d = micro("a", 40, 0.5);
  CRDModel fs = model_for({"a"}), ml = model_for({"a"});
  TrainingConfig c = quick(2);
  c.alpha = 0.0;
  c.eval_each_epoch = false;
  train_from_scratch(fs, d, c);
  train_multilingual(ml, {d}, c, 2, "fs");
  EXPECT_EQ(parameter_hash(fs), parameter_hash(ml));
}

TEST(Loop, DeterministicForFixedSeed) {
  const DatasetSplit d = micro("a", 40, 0.5);
  CRDModel x = model_for({"a"}), y = model_for({"a"});
  const TrainingReport rx = train_from_scratch(x, d, quick(1));
  const TrainingReport ry = train_from_scratch(y, d, quick(1));
  EXPECT_EQ(parameter_hash(x), parameter_hash(y));
  EXPECT_EQ(rx.metrics[0].ctc_loss, ry.metrics[0].ctc_loss);
}

TEST(Loop, LossDropsAfterOneEpoch) {
  double before = 0.0, after = 0.0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const DatasetSplit d = micro("a", 120, 0.5, seed);
    CRDModel m = model_for({"a"}, 4, seed);
    before += evaluate(m, d.test, "a", Decoder::Greedy).mean_ctc_loss;
    after += train_from_scratch(m, d, quick(1, seed)).metrics.at(0).ctc_loss;
  }
  EXPECT_LT(after, before);
}

TEST(Loop, MemorizesSmallTrainingSet) {
  DatasetSplit d = micro("a", 50, 0.3);
  d.train.utterances.insert(d.train.utterances.end(), d.test.utterances.begin(), d.test.utterances.end());
  d.test = d.train;
  CRDModel m = model_for({"a"});
  TrainingConfig c = quick(30);
  c.eval_each_epoch = false;
  train_from_scratch(m, d, c);
  EXPECT_LE(evaluate(m, d.train, "a", Decoder::Greedy).ter, 0.05);
}

TEST(Loop, MetricsHaveOneRowPerLanguagePerEpoch) {
  const DatasetSplit a = micro("a", 24, 0.5), b = micro("b", 24, 0.5, 2);
  CRDModel m = model_for({"a", "b"});
  const TrainingReport r = train_multilingual(m, {a, b}, quick(2));
  ASSERT_EQ(r.metrics.size(), 4u);
  EXPECT_EQ(r.metrics[0].language, "a");
  EXPECT_EQ(r.metrics[3].language, "b");
  EXPECT_EQ(r.metrics[3].epoch, 2u);
  EXPECT_EQ(r.trace_norm_trajectory.size(), 2u);
  std::ostringstream os;
  write_metrics(os, r.metrics);
  std::istringstream is(os.str());
  std::string line;
  std::size_t lines = 0;
  while (std::getline(is, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), '\t'), 5);
    ++lines;
  }
  EXPECT_EQ(lines, 4u);
}

TEST(Loop, RejectsUnregisteredOrEmptyLanguage) {
  const DatasetSplit a = micro("a", 24, 0.5);
  CRDModel m = model_for({"b"});
  EXPECT_THROW(train_multilingual(m, {a}, quick(1)), Error);
  CRDModel other = model_for({"a", "c"});
  EXPECT_THROW(train_from_scratch(other, a, quick(1)), Error);
}

TEST(Freezing, CrossLingualTouchesOnlyTargetParameters) {
  CRDModel m = model_for({"src"});
  const DatasetSplit t = micro("tgt", 32, 0.5, 3);
  m = replace_activation_for_language(std::move(m), "src", t.train.language);
  const std::string shared = parameter_hash(m, shared_params());
  const std::string src = parameter_hash(m, language_params("src"));
  const std::string tgt = parameter_hash(m, language_params("tgt"));
  const TrainingReport r = finetune_cross_lingual(m, t, quick(2));
  ASSERT_EQ(r.frozen_hashes.size(), 3u);
  for (const auto& h : r.frozen_hashes) EXPECT_EQ(h, r.frozen_hashes.front());
  EXPECT_EQ(parameter_hash(m, shared_params()), shared);
  EXPECT_EQ(parameter_hash(m, language_params("src")), src);
  EXPECT_NE(parameter_hash(m, language_params("tgt")), tgt);
}

TEST(Freezing, BottleneckPhaseTwoKeepsLowerStack) {
  CRDModel m = insert_bottleneck(build_model(Preset::Small, PlacementSpec{}, {Language::with_tokens("src", 4)}, 1));
  const DatasetSplit t = micro("tgt", 32, 0.5, 3);
  const std::string fc1 = parameter_hash(m, [](const ParamInfo& p) { return p.name == "fc1.w"; });
  const TrainingReport r = finetune_bottleneck(m, "src", t, quick(2));
  ASSERT_EQ(r.frozen_hashes.size(), 3u);
  for (const auto& h : r.frozen_hashes) EXPECT_EQ(h, r.frozen_hashes.front());
  EXPECT_NE(parameter_hash(m, [](const ParamInfo& p) { return p.name == "fc1.w"; }), fc1);
  EXPECT_EQ(bottleneck_frozen_region(m)(ParamInfo{"bottleneck.w", ParamGroup::Shared, 5, {}}), true);
  EXPECT_EQ(bottleneck_frozen_region(m)(ParamInfo{"fc1.w", ParamGroup::Shared, 6, {}}), false);
}

TEST(Freezing, BottleneckReinitialisesUpperLayersWhenAsked) {
  CRDModel a = insert_bottleneck(build_model(Preset::Small, PlacementSpec{}, {Language::with_tokens("src", 4)}, 1));
  CRDModel b = a;
  const DatasetSplit t = micro("tgt", 16, 0.5, 3);
  TrainingConfig c = quick(1);
  c.reinit_upper = true;
  finetune_bottleneck(b, "src", t, c);
  finetune_bottleneck(a, "src", t, quick(1));
  EXPECT_EQ(parameter_hash(a, bottleneck_frozen_region(a)), parameter_hash(b, bottleneck_frozen_region(b)));
  EXPECT_NE(parameter_hash(a), parameter_hash(b));
}
