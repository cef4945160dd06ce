#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "atcon/checkpoint.hpp"
#include "atcon/trn.hpp"

using namespace atcon;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.k = 4;
  c.d_in = 3;
  c.d_enc = 4;
  c.d = 5;
  c.d_b = 4;
  c.C = 3;
  c.M_max = 2;
  c.encoder_hidden = 6;
  c.relation_hidden = 7;
  return c;
}

VideoSample make_video(const std::string& id, std::size_t k, std::size_t d, double base) {
  VideoSample v{id, {}, 0, "source"};
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<double> f(d);
    for (std::size_t q = 0; q < d; ++q) f[q] = base + 0.1 * static_cast<double>(j) - 0.05 * static_cast<double>(q);
    v.frames.push_back(f);
  }
  return v;
}

// Runs one train-mode forward pass so batch-norm running statistics exist.
void warm_up(ModelParams& p, const std::vector<const VideoSample*>& batch) {
  Rng rng(1);
  const std::vector<ClipIndexSet> clips{sample_clips(p.config.k, p.config.M_max, rng)};
  const auto lts = local_temporal_features(encode_frames(stack_frames(batch), p), batch.size(), clips, p);
  classify(aggregate_overall(lts), p, Mode::train, false);
}

// Replace every parameter of a linear layer with given values.
void set_linear(Linear& l, std::vector<double> w, std::vector<double> b) {
  l.weight = Tensor::from(l.weight.shape(), std::move(w), true);
  l.bias = Tensor::from(l.bias.shape(), std::move(b), true);
}

}  // namespace

TEST(Clips, BinomialAndCounts) {
  EXPECT_EQ(binomial(5, 2), 10u);
  EXPECT_EQ(binomial(5, 5), 1u);
  EXPECT_EQ(binomial(3, 4), 0u);
  EXPECT_EQ(clips_per_scale(5, 2, 3), 3u);
  EXPECT_EQ(clips_per_scale(5, 5, 3), 1u);
}

TEST(Clips, KFiveScaleTwoEnumeratesTenPairs) {
  Rng rng(3);
  const auto set = sample_clips(5, 100, rng);
  ASSERT_EQ(set.at_scale(2).size(), 10u);
  std::set<Clip> distinct(set.at_scale(2).begin(), set.at_scale(2).end());
  EXPECT_EQ(distinct.size(), 10u);
}

TEST(Clips, SampledClipsAreOrderedDistinctAndInRange) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const auto set = sample_clips(6, 3, rng);
    ASSERT_EQ(set.scales.size(), 5u);
    for (std::size_t r = 2; r <= 6; ++r) {
      const auto& clips = set.at_scale(r);
      EXPECT_EQ(clips.size(), clips_per_scale(6, r, 3));
      EXPECT_TRUE(std::is_sorted(clips.begin(), clips.end()));
      EXPECT_EQ(std::set<Clip>(clips.begin(), clips.end()).size(), clips.size());
      for (const auto& c : clips) {
        ASSERT_EQ(c.size(), r);
        EXPECT_TRUE(std::is_sorted(c.begin(), c.end()));
        EXPECT_EQ(std::set<std::size_t>(c.begin(), c.end()).size(), r);
        EXPECT_LT(c.back(), 6u);
      }
    }
  }
}

TEST(Clips, LargeKUsesRejectionSampling) {
  Rng rng(4);
  const auto set = sample_clips(40, 3, rng);
  for (const auto& clips : set.scales) {
    EXPECT_EQ(clips.size(), clips.front().size() == 40 ? 1u : 3u);
    EXPECT_EQ(std::set<Clip>(clips.begin(), clips.end()).size(), clips.size());
  }
}

TEST(Clips, InvalidArguments) {
  Rng rng(1);
  EXPECT_THROW(sample_clips(2, 3, rng), Error);
  EXPECT_THROW(sample_clips(5, 0, rng), Error);
}

TEST(Model, InitIsSeedDeterministic) {
  const auto a = ModelParams::init(small_config(), 9);
  const auto b = ModelParams::init(small_config(), 9);
  const auto c = ModelParams::init(small_config(), 10);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_TRUE(bitwise_equal(pa[i].tensor, pb[i].tensor)) << pa[i].name;
    differs = differs || !bitwise_equal(pa[i].tensor, pc[i].tensor);
  }
  EXPECT_TRUE(differs);
}

TEST(Model, CloneIsDeepAndBitwiseEqual) {
  auto a = ModelParams::init(small_config(), 1);
  auto b = a.clone();
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    EXPECT_TRUE(bitwise_equal(a.parameters()[i].tensor, b.parameters()[i].tensor));
  b.encoder.hidden.weight.mutable_data()[0] += 1.0;
  EXPECT_FALSE(bitwise_equal(a.encoder.hidden.weight, b.encoder.hidden.weight));
}

TEST(Model, WeightNormRowsHaveStoredMagnitude) {
  auto p = ModelParams::init(small_config(), 2);
  p.head.classifier.magnitude.mutable_data()[1] = 2.5;
  const auto w = p.head.classifier.effective_weight();
  for (std::size_t c = 0; c < w.rows(); ++c) {
    double s = 0.0;
    for (std::size_t j = 0; j < w.cols(); ++j) s += w.at(c, j) * w.at(c, j);
    EXPECT_NEAR(std::sqrt(s), p.head.classifier.magnitude[c], 1e-10);
  }
}

TEST(Temporal, SingleClipPerScaleIsRelationOfThatClip) {
  auto cfg = small_config();
  cfg.M_max = 1;
  auto p = ModelParams::init(cfg, 5);
  const auto v = make_video("a", cfg.k, cfg.d_in, 0.3);
  const auto enc = encode_frames(stack_frames({&v}), p);
  ClipIndexSet clips{cfg.k, {{{0, 2}}, {{1, 2, 3}}, {{0, 1, 2, 3}}}};
  const auto lts = local_temporal_features(enc, 1, {clips}, p);
  const auto expect = p.relations[0](concat({slice_rows(enc, 0, 1), slice_rows(enc, 2, 1)}));
  for (std::size_t j = 0; j < cfg.d; ++j) EXPECT_DOUBLE_EQ(lts.scales[0][j], expect[j]);
}

TEST(Temporal, TwoClipsWithLinearRelationSumTheirImages) {
  // k=3, identity encoder, linear scale-2 relation g(x) = x . A (no ReLU effect
  // because hidden weights are identity on non-negative inputs).
  ModelConfig cfg;
  cfg.k = 3;
  cfg.d_in = 1;
  cfg.d_enc = 1;
  cfg.d = 1;
  cfg.d_b = 1;
  cfg.C = 2;
  cfg.M_max = 2;
  cfg.encoder_hidden = 1;
  cfg.relation_hidden = 2;
  auto p = ModelParams::init(cfg, 1);
  set_linear(p.encoder.hidden, {1.0}, {0.0});
  set_linear(p.encoder.output, {1.0}, {0.0});
  set_linear(p.relations[0].hidden, {1.0, 0.0, 0.0, 1.0}, {0.0, 0.0});
  set_linear(p.relations[0].output, {2.0, 3.0}, {0.5});
  VideoSample v{"v", {{1.0}, {2.0}, {4.0}}, std::nullopt, "target"};
  ClipIndexSet clips{3, {{{0, 1}, {1, 2}}, {{0, 1, 2}}}};
  const auto lts = local_temporal_features(encode_frames(stack_frames({&v}), p), 1, {clips}, p);
  // g(a, b) = 2a + 3b + 0.5; clips (1,2) and (2,4).
  const double expected = (2 * 1.0 + 3 * 2.0 + 0.5) + (2 * 2.0 + 3 * 4.0 + 0.5);
  EXPECT_DOUBLE_EQ(lts.scales[0][0], expected);
}

TEST(Temporal, ClipIndexOutOfRangeRejected) {
  auto p = ModelParams::init(small_config(), 5);
  const auto v = make_video("a", 4, 3, 0.3);
  const auto enc = encode_frames(stack_frames({&v}), p);
  ClipIndexSet bad{4, {{{0, 7}}, {{0, 1, 2}}, {{0, 1, 2, 3}}}};
  EXPECT_THROW(local_temporal_features(enc, 1, {bad}, p), ShapeError);
}

TEST(Temporal, AggregateOverallMeanAndWeights) {
  LocalFeatures lts{{Tensor::matrix({{2.0, 0.0}}), Tensor::matrix({{0.0, 2.0}})}};
  const auto t = aggregate_overall(lts);
  EXPECT_DOUBLE_EQ(t[0], 1.0);
  EXPECT_DOUBLE_EQ(t[1], 1.0);
  const std::vector<double> w{2.0, 0.0};
  const auto tw = aggregate_overall(lts, &w);
  EXPECT_DOUBLE_EQ(tw[0], 2.0);
  EXPECT_DOUBLE_EQ(tw[1], 0.0);
}

TEST(Head, EvalBeforeStatisticsThrows) {
  auto p = ModelParams::init(small_config(), 1);
  EXPECT_THROW(classify(Tensor::zeros({2, 5}), p, Mode::eval, true), Error);
}

TEST(Head, EvalForwardMatchesScriptedArithmetic) {
  auto p = ModelParams::init(small_config(), 3);
  p.head.bn.running_mean = {0.1, -0.2, 0.3, 0.0};
  p.head.bn.running_var = {1.0, 2.0, 0.5, 4.0};
  p.head.bn.initialized = true;
  const auto x = Tensor::matrix({{0.5, -1.0, 0.25, 2.0, 0.0}});
  const auto logits = classify(x, p, Mode::eval, true);

  const auto& W1 = p.head.bottleneck.weight;
  const auto& b1 = p.head.bottleneck.bias;
  const auto& dir = p.head.classifier.direction;
  std::vector<double> y(4);
  for (std::size_t j = 0; j < 4; ++j) {
    double z = b1[j];
    for (std::size_t i = 0; i < 5; ++i) z += x[i] * W1.at(i, j);
    const double zn = (z - p.head.bn.running_mean[j]) / std::sqrt(p.head.bn.running_var[j] + 1e-5);
    y[j] = p.head.bn.gamma[j] * zn + p.head.bn.beta[j];
  }
  for (std::size_t c = 0; c < 3; ++c) {
    double norm = 0.0;
    for (std::size_t j = 0; j < 4; ++j) norm += dir.at(c, j) * dir.at(c, j);
    norm = std::sqrt(norm);
    double out = p.head.classifier.bias[c];
    for (std::size_t j = 0; j < 4; ++j) out += y[j] * p.head.classifier.magnitude[c] * dir.at(c, j) / norm;
    EXPECT_NEAR(logits[c], out, 1e-12);
  }
}

TEST(Head, ZeroFeaturesZeroBiasGiveUniformSoftmax) {
  auto p = ModelParams::init(small_config(), 3);
  p.head.bn.initialized = true;
  p.head.bottleneck.bias = Tensor::zeros({1, 4}, true);
  p.head.classifier.bias = Tensor::zeros({1, 3}, true);
  const auto probs = softmax(classify(Tensor::zeros({1, 5}), p, Mode::eval, true));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(probs[c], 1.0 / 3.0, 1e-12);
}

TEST(Head, FrozenHeadReceivesNoGradientAndKeepsStatistics) {
  auto p = ModelParams::init(small_config(), 4);
  const auto v1 = make_video("a", 4, 3, 0.1), v2 = make_video("b", 4, 3, 0.9), v3 = make_video("c", 4, 3, -0.4);
  warm_up(p, {&v1, &v2, &v3});
  for (auto& np : p.parameters()) np.tensor.zero_grad();
  const auto mean_before = p.head.bn.running_mean;
  const auto before = p.clone();

  Rng rng(2);
  const std::vector<ClipIndexSet> clips{sample_clips(4, 2, rng)};
  const auto lts = local_temporal_features(encode_frames(stack_frames({&v1, &v2, &v3}), p), 3, clips, p);
  for (Mode mode : {Mode::train, Mode::eval}) {
    const auto logits = classify(aggregate_overall(lts), p, mode, true);
    backward(sum(square(logits)));
  }
  EXPECT_EQ(p.head.bn.running_mean, mean_before);
  for (const auto& np : p.parameters()) {
    const bool head = np.group != ParamGroup::encoder && np.group != ParamGroup::relation;
    if (head) {
      EXPECT_FALSE(np.tensor.has_grad()) << np.name;
    }
  }
  EXPECT_TRUE(p.encoder.hidden.weight.has_grad());
  for (std::size_t i = 0; i < p.parameters().size(); ++i)
    EXPECT_TRUE(bitwise_equal(p.parameters()[i].tensor, before.parameters()[i].tensor));
}

TEST(Head, TrainModeUpdatesRunningStatistics) {
  auto p = ModelParams::init(small_config(), 4);
  const auto v1 = make_video("a", 4, 3, 0.1), v2 = make_video("b", 4, 3, 0.9);
  warm_up(p, {&v1, &v2});
  EXPECT_TRUE(p.head.bn.initialized);
  EXPECT_NE(p.head.bn.running_mean, std::vector<double>(4, 0.0));
}

TEST(Head, EvalModeIsBatchIndependent) {
  auto p = ModelParams::init(small_config(), 6);
  const auto v1 = make_video("a", 4, 3, 0.1), v2 = make_video("b", 4, 3, 0.9), v3 = make_video("c", 4, 3, -0.4);
  warm_up(p, {&v1, &v2, &v3});
  const auto run = [&](std::vector<const VideoSample*> batch) {
    std::vector<ClipIndexSet> clips;
    for (const auto* v : batch) clips.push_back(eval_clips(*v, p));
    const auto lts = local_temporal_features(encode_frames(stack_frames(batch), p), batch.size(), clips, p);
    return classify(aggregate_overall(lts), p, Mode::eval, true);
  };
  const auto a = run({&v1, &v2, &v3});
  const auto b = run({&v3, &v1, &v2});
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_DOUBLE_EQ(a.at(0, c), b.at(1, c));
    EXPECT_DOUBLE_EQ(a.at(2, c), b.at(0, c));
  }
}

TEST(Head, EvalClipsDependOnlyOnIdAndSeed) {
  const auto p = ModelParams::init(small_config(), 6);
  const auto v = make_video("clip-me", 4, 3, 0.1);
  auto w = make_video("clip-me", 4, 3, 5.0);
  const auto a = eval_clips(v, p), b = eval_clips(w, p);
  EXPECT_EQ(a.scales, b.scales);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto p = ModelParams::init(small_config(), 8);
  const auto v1 = make_video("a", 4, 3, 0.1), v2 = make_video("b", 4, 3, 0.9);
  warm_up(p, {&v1, &v2});
  p.aggregation = Aggregation::lwm_raw;
  const auto text = checkpoint_to_string(p);
  const auto q = checkpoint_from_json(nlohmann::json::parse(text));
  EXPECT_EQ(q.config, p.config);
  EXPECT_EQ(q.rng_seed, p.rng_seed);
  EXPECT_EQ(q.aggregation, p.aggregation);
  EXPECT_EQ(q.head.bn.running_mean, p.head.bn.running_mean);
  EXPECT_EQ(q.head.bn.running_var, p.head.bn.running_var);
  for (std::size_t i = 0; i < p.parameters().size(); ++i)
    EXPECT_TRUE(bitwise_equal(p.parameters()[i].tensor, q.parameters()[i].tensor)) << p.parameters()[i].name;
  EXPECT_EQ(checkpoint_to_string(q), text);
}

TEST(Checkpoint, ErrorsNameTheField) {
  auto j = checkpoint_to_json(ModelParams::init(small_config(), 8));
  auto broken = j;
  broken["hyperparams"].erase("d_b");
  try {
    checkpoint_from_json(broken);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("d_b"), std::string::npos) << e.what();
  }
  broken = j;
  broken["parameters"]["head.bn.gamma"] = nlohmann::json::array({nlohmann::json::array({1.0})});
  try {
    checkpoint_from_json(broken);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("head.bn.gamma"), std::string::npos) << e.what();
  }
  broken = j;
  broken["format_version"] = 99;
  EXPECT_THROW(checkpoint_from_json(broken), Error);
}
