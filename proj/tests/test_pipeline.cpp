#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "atcon/checkpoint.hpp"
#include "atcon/pipeline.hpp"

using namespace atcon;

namespace {

RunConfig tiny_config() {
  RunConfig cfg;
  cfg.data.classes = 3;
  cfg.data.videos_per_class = 12;
  cfg.data.frames = 4;
  cfg.data.frame_dim = 4;
  cfg.model.d_enc = 6;
  cfg.model.d = 6;
  cfg.model.d_b = 5;
  cfg.model.encoder_hidden = 8;
  cfg.model.relation_hidden = 8;
  cfg.epochs_source = 12;
  cfg.epochs_adapt = 2;
  cfg.batch_size = 8;
  cfg.seed = 7;
  cfg.data.seed = 7;
  return cfg;
}

struct Fixture {
  RunConfig cfg = tiny_config();
  Dataset source, target;
  ModelParams model;

  Fixture() {
    std::tie(source, target) = generate_domain_pair(cfg.data);
    model = train_source(source, cfg).model;
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

nlohmann::json params_of(const ModelParams& m) { return checkpoint_to_json(m)["parameters"]; }

}  // namespace

TEST(Variants, TermsTable) {
  const auto full = terms_for(Variant::full);
  EXPECT_TRUE(full.fc && full.pc_local && full.pc_overall && full.im && full.pl && full.lwm.feature && full.lwm.prediction);
  const auto pc = terms_for(Variant::pc);
  EXPECT_TRUE(!pc.fc && pc.pc_local && pc.pc_overall && !pc.im && !pc.pl);
  const auto pno = terms_for(Variant::pc_no_overall);
  EXPECT_TRUE(pno.pc_local && !pno.pc_overall);
  const auto tc = terms_for(Variant::tc);
  EXPECT_TRUE(tc.fc && tc.pc_local && tc.pc_overall && !tc.im && !tc.pl);
  const auto na = terms_for(Variant::na);
  EXPECT_TRUE(na.im && !na.lwm.feature && !na.lwm.prediction);
  EXPECT_TRUE(terms_for(Variant::a_at_f).lwm.feature && !terms_for(Variant::a_at_f).lwm.prediction);
  EXPECT_TRUE(!terms_for(Variant::a_at_p).lwm.feature && terms_for(Variant::a_at_p).lwm.prediction);
  const auto shot = terms_for(Variant::shot_baseline);
  EXPECT_TRUE(shot.im && shot.pl && !shot.fc && !shot.pc_local);
  EXPECT_FALSE(terms_for(Variant::source_only).any());
  for (auto v : all_variants()) EXPECT_EQ(variant_from_string(to_string(v)), v);
  EXPECT_THROW(variant_from_string("bogus"), Error);
}

TEST(Sgd, MomentumAndWeightDecayOracle) {
  auto p = Tensor::vector({1.0, -2.0}, true);
  Sgd sgd({p}, 0.9, 0.1);
  double x = 1.0, v = 0.0;
  for (int step = 0; step < 3; ++step) {
    sgd.zero_grad();
    backward(sum(square(p)));
    sgd.step(0.05);
    const double g = 2.0 * x + 0.1 * x;
    v = 0.9 * v + g;
    x -= 0.05 * v;
    EXPECT_NEAR(p[0], x, 1e-15);
  }
}

TEST(Pipeline, SourceTrainingLearnsAndIsDeterministic) {
  const auto& f = fixture();
  EXPECT_GT(evaluate(f.model, f.source).top1, 0.8);
  const auto again = train_source(f.source, f.cfg);
  EXPECT_EQ(checkpoint_to_string(again.model), checkpoint_to_string(f.model));
  EXPECT_EQ(again.metrics.size(), f.cfg.epochs_source);
  EXPECT_EQ(metrics_csv(again.metrics), metrics_csv(train_source(f.source, f.cfg).metrics));
}

TEST(Pipeline, SourceOnlyIsIdentity) {
  const auto& f = fixture();
  auto cfg = f.cfg;
  cfg.variant = Variant::source_only;
  const auto r = adapt_target(f.model, f.target, cfg);
  EXPECT_EQ(checkpoint_to_string(r.model), checkpoint_to_string(f.model));
  EXPECT_EQ(r.metrics.size(), 1u);
}

TEST(Pipeline, ZeroCoefficientsAreInert) {
  const auto& f = fixture();
  auto cfg = f.cfg;
  cfg.variant = Variant::full;
  cfg.loss.beta_tc = 0.0;
  cfg.loss.beta_im = 0.0;
  cfg.loss.beta_ce = 0.0;
  EXPECT_EQ(checkpoint_to_string(adapt_target(f.model, f.target, cfg).model), checkpoint_to_string(f.model));
}

TEST(Pipeline, HeadFrozenAndLabelsIgnored) {
  const auto& f = fixture();
  auto cfg = f.cfg;
  cfg.variant = Variant::full;
  const auto r = adapt_target(f.model, f.target, cfg);
  const auto before = params_of(f.model), after = params_of(r.model);
  for (const auto& name : {"head.classifier.direction", "head.classifier.magnitude", "head.classifier.bias",
                           "head.bottleneck.weight", "head.bn.gamma"})
    EXPECT_EQ(before[name].dump(), after[name].dump()) << name;
  EXPECT_EQ(checkpoint_to_json(f.model)["batchnorm"].dump(), checkpoint_to_json(r.model)["batchnorm"].dump());
  EXPECT_NE(before["encoder.hidden.weight"].dump(), after["encoder.hidden.weight"].dump());

  const auto bare = adapt_target(f.model, strip_labels(f.target), cfg);
  EXPECT_EQ(stable_hash(checkpoint_to_string(bare.model)), stable_hash(checkpoint_to_string(r.model)));
  EXPECT_FALSE(bare.metrics.back().top1.has_value());
  EXPECT_TRUE(r.metrics.back().top1.has_value());
}

TEST(Pipeline, LastLayerOnlyFreezesClassifierOnly) {
  const auto& f = fixture();
  auto cfg = f.cfg;
  cfg.freeze_scope = FreezeScope::last_layer_only;
  const auto r = adapt_target(f.model, f.target, cfg);
  const auto before = params_of(f.model), after = params_of(r.model);
  EXPECT_EQ(before["head.classifier.direction"].dump(), after["head.classifier.direction"].dump());
  EXPECT_NE(before["head.bottleneck.weight"].dump(), after["head.bottleneck.weight"].dump());
}

TEST(Pipeline, AdaptationIsDeterministicAndTracksTerms) {
  const auto& f = fixture();
  auto cfg = f.cfg;
  const auto a = adapt_target(f.model, f.target, cfg), b = adapt_target(f.model, f.target, cfg);
  EXPECT_EQ(checkpoint_to_string(a.model), checkpoint_to_string(b.model));
  EXPECT_EQ(metrics_csv(a.metrics), metrics_csv(b.metrics));
  ASSERT_FALSE(a.steps.empty());
  for (const auto& s : a.steps) {
    const auto& w = cfg.loss;
    const double combined = w.beta_tc * (w.beta_fc * s.fc + w.beta_pc * (w.alpha_local * s.pc_local +
                                                                         w.alpha_overall * s.pc_overall)) +
                            w.beta_im * s.im + w.beta_ce * s.pl_ce;
    EXPECT_NEAR(combined, s.total, 1e-10 * std::max(1.0, std::abs(s.total)));
  }
  EXPECT_EQ(a.model.aggregation, Aggregation::lwm_normalized);
  cfg.variant = Variant::na;
  EXPECT_EQ(adapt_target(f.model, f.target, cfg).model.aggregation, Aggregation::mean);
}

TEST(Pipeline, DimensionMismatchNamesBothSides) {
  const auto& f = fixture();
  auto spec = f.cfg.data;
  spec.frames = 5;
  const auto other = generate_domain_pair(spec).second;
  try {
    adapt_target(f.model, other, f.cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("k=4"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("k=5"), std::string::npos) << e.what();
  }
}

TEST(Pipeline, EvaluateNeedsLabels) {
  const auto& f = fixture();
  EXPECT_THROW(evaluate(f.model, strip_labels(f.target)), Error);
  const auto r = evaluate(f.model, f.target);
  EXPECT_EQ(r.per_class.size(), 3u);
  EXPECT_EQ(r.predictions.size(), f.target.videos.size());
}

TEST(Pipeline, EmbeddingsLayoutAndDeterminism) {
  const auto& f = fixture();
  const auto local = embeddings_csv(f.model, f.target, EmbeddingLevel::local);
  const auto overall = embeddings_csv(f.model, f.target, EmbeddingLevel::overall);
  const auto lines = [](const std::string& s) { return std::count(s.begin(), s.end(), '\n'); };
  EXPECT_EQ(lines(local), 1 + 36 * 3);
  EXPECT_EQ(lines(overall), 1 + 36);
  EXPECT_EQ(local.substr(0, local.find('\n')), "id,scale,label,f0,f1,f2,f3,f4,f5");
  EXPECT_EQ(local, embeddings_csv(f.model, f.target, EmbeddingLevel::local));
  EXPECT_NE(overall.find(",overall,"), std::string::npos);
}

TEST(Pipeline, MetricsCsvHeader) {
  MetricsRow r;
  r.epoch = 1;
  r.total = 0.5;
  EXPECT_EQ(metrics_csv({r}), "epoch,ce,fc,pc_local,pc_overall,im,pl_ce,total,top1,pl_accuracy\n1,0,0,0,0,0,0,0.5,,\n");
}

TEST(Pipeline, AblationIndependentOfThreadCount) {
  auto cfg = tiny_config();
  cfg.epochs_source = 2;
  cfg.epochs_adapt = 1;
  const std::vector<Variant> variants{Variant::source_only, Variant::full};
  cfg.threads = 1;
  const auto one = run_ablation(cfg, variants, {3, 4});
  cfg.threads = 2;
  const auto two = run_ablation(cfg, variants, {3, 4});
  EXPECT_EQ(one.csv(), two.csv());
  EXPECT_EQ(one.csv().substr(0, one.csv().find('\n')), "variant,seed_3,seed_4,mean");
  EXPECT_THROW(run_ablation(cfg, {}, {1}), Error);
}

TEST(Pipeline, ConfigValidation) {
  auto cfg = tiny_config();
  cfg.batch_size = 1;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = tiny_config();
  cfg.optimizer.lr_adapt = -1.0;
  EXPECT_THROW(cfg.validate(), Error);
}
