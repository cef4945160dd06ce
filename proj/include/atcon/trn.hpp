#pragma once

// Temporal Relation Network at desk scale.
//
// Frames are pre-featurized vectors. A per-frame MLP stands in for the spatial
// backbone; one relation MLP per scale r in [2, k] fuses clips of r
// temporally ordered frame encodings into a local temporal feature; the
// overall feature is the (optionally weighted) mean of the k-1 local features,
// and a bottleneck + batch-norm + weight-normalized head produces logits.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "atcon/random.hpp"
#include "atcon/tensor.hpp"

namespace atcon {

struct VideoSample {
  std::string id;
  std::vector<std::vector<double>> frames;  // k rows of d_in values, temporal order
  std::optional<int> label;
  std::string domain;

  std::size_t frame_count() const { return frames.size(); }
  std::size_t frame_dim() const { return frames.empty() ? 0 : frames.front().size(); }
};

inline void validate(const VideoSample& v, std::optional<std::size_t> num_classes = std::nullopt) {
  if (v.frames.size() < 3) throw Error("video " + v.id + ": needs at least 3 frames");
  const auto dim = v.frames.front().size();
  if (dim == 0) throw Error("video " + v.id + ": empty frame vector");
  for (const auto& f : v.frames)
    if (f.size() != dim) throw Error("video " + v.id + ": frame dimensions differ");
  if (v.label && (*v.label < 0 || (num_classes && static_cast<std::size_t>(*v.label) >= *num_classes)))
    throw Error("video " + v.id + ": label " + std::to_string(*v.label) + " out of range");
}

// ---------------------------------------------------------------------------
// Clip sampling

using Clip = std::vector<std::size_t>;

struct ClipIndexSet {
  std::size_t frames = 0;
  std::vector<std::vector<Clip>> scales;  // scales[r - 2]

  const std::vector<Clip>& at_scale(std::size_t r) const { return scales.at(r - 2); }
};

inline std::uint64_t binomial(std::size_t n, std::size_t r) {
  if (r > n) return 0;
  r = std::min(r, n - r);
  std::uint64_t c = 1;
  for (std::size_t i = 1; i <= r; ++i) c = c * (n - r + i) / i;
  return c;
}

inline std::size_t clips_per_scale(std::size_t k, std::size_t r, std::size_t max_per_scale) {
  const auto total = binomial(k, r);
  return static_cast<std::size_t>(std::min<std::uint64_t>(total, max_per_scale));
}

namespace detail {

inline std::vector<Clip> all_combinations(std::size_t k, std::size_t r) {
  std::vector<Clip> out;
  Clip c(r);
  for (std::size_t i = 0; i < r; ++i) c[i] = i;
  while (true) {
    out.push_back(c);
    std::size_t i = r;
    while (i > 0 && c[i - 1] == k - r + i - 1) --i;
    if (i == 0) break;
    ++c[i - 1];
    for (std::size_t j = i; j < r; ++j) c[j] = c[j - 1] + 1;
  }
  return out;
}

}  // namespace detail

// For each scale, min(max_per_scale, C(k, r)) distinct increasing tuples drawn
// uniformly without replacement, returned in lexicographic order.
inline ClipIndexSet sample_clips(std::size_t k, std::size_t max_per_scale, Rng& rng) {
  if (k < 3) throw Error("sample_clips: k must be at least 3");
  if (max_per_scale < 1) throw Error("sample_clips: max clips per scale must be at least 1");
  constexpr std::uint64_t enumeration_limit = 1u << 16;
  ClipIndexSet set;
  set.frames = k;
  for (std::size_t r = 2; r <= k; ++r) {
    const std::size_t want = clips_per_scale(k, r, max_per_scale);
    std::vector<Clip> chosen;
    if (binomial(k, r) <= enumeration_limit) {
      auto all = detail::all_combinations(k, r);
      // Partial Fisher-Yates.
      for (std::size_t i = 0; i < want && all.size() > want; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, all.size() - 1);
        std::swap(all[i], all[pick(rng)]);
      }
      all.resize(want);
      chosen = std::move(all);
    } else {
      std::vector<std::size_t> frames(k);
      while (chosen.size() < want) {
        for (std::size_t i = 0; i < k; ++i) frames[i] = i;
        for (std::size_t i = 0; i < r; ++i) {
          std::uniform_int_distribution<std::size_t> pick(i, k - 1);
          std::swap(frames[i], frames[pick(rng)]);
        }
        Clip c(frames.begin(), frames.begin() + static_cast<std::ptrdiff_t>(r));
        std::sort(c.begin(), c.end());
        if (std::find(chosen.begin(), chosen.end(), c) == chosen.end()) chosen.push_back(std::move(c));
      }
    }
    std::sort(chosen.begin(), chosen.end());
    set.scales.push_back(std::move(chosen));
  }
  return set;
}

// ---------------------------------------------------------------------------
// Parameters

struct ModelConfig {
  std::size_t k = 5;
  std::size_t d_in = 32;
  std::size_t d_enc = 64;
  std::size_t d = 64;
  std::size_t d_b = 64;
  std::size_t C = 8;
  std::size_t M_max = 3;
  std::size_t encoder_hidden = 64;
  std::size_t relation_hidden = 128;

  bool operator==(const ModelConfig&) const = default;
};

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out

  static Linear init(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<double> w(in * out), b(out);
    for (auto& v : w) v = u(rng);
    for (auto& v : b) v = u(rng);
    return {Tensor::from({in, out}, std::move(w), true), Tensor::from({1, out}, std::move(b), true)};
  }

  Tensor operator()(const Tensor& x) const { return add_row(matmul(x, weight), bias); }
};

// Linear -> ReLU -> Linear.
struct Mlp {
  Linear hidden;
  Linear output;

  static Mlp init(std::size_t in, std::size_t width, std::size_t out, Rng& rng) {
    auto h = Linear::init(in, width, rng);
    auto o = Linear::init(width, out, rng);
    return {std::move(h), std::move(o)};
  }

  Tensor operator()(const Tensor& x) const { return output(relu(hidden(x))); }
};

struct BatchNorm {
  Tensor gamma;  // 1 x n
  Tensor beta;   // 1 x n
  std::vector<double> running_mean;
  std::vector<double> running_var;
  bool initialized = false;
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
  double eps = 1e-5;

  static BatchNorm init(std::size_t n) {
    return {Tensor::filled({1, n}, 1.0), Tensor::zeros({1, n}), std::vector<double>(n, 0.0),
            std::vector<double>(n, 1.0), false, 0.9, 1e-5};
  }
};

// Row c of the effective weight is magnitude[c] * direction[c] / ||direction[c]||.
struct WeightNormLinear {
  Tensor direction;  // C x in
  Tensor magnitude;  // C x 1
  Tensor bias;       // 1 x C

  static WeightNormLinear init(std::size_t in, std::size_t classes, Rng& rng) {
    auto lin = Linear::init(in, classes, rng);
    auto dir = transpose(lin.weight).detach();
    std::vector<double> g(classes, 0.0);
    for (std::size_t c = 0; c < classes; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < in; ++j) s += dir.at(c, j) * dir.at(c, j);
      g[c] = std::sqrt(s);
    }
    return {Tensor::from(dir.shape(), {dir.data().begin(), dir.data().end()}, true),
            Tensor::from({classes, 1}, std::move(g), true), lin.bias};
  }

  Tensor effective_weight() const {
    auto inv_norm = inv_sqrt(sum_cols(square(direction)));
    return mul_col(direction, elementwise_mul(magnitude, inv_norm));
  }
};

struct Head {
  Linear bottleneck;
  BatchNorm bn;
  WeightNormLinear classifier;
};

enum class ParamGroup { encoder, relation, bottleneck, batchnorm, classifier };

struct NamedParameter {
  std::string name;
  Tensor tensor;
  ParamGroup group;
};

// How evaluation builds the overall feature from local features.
enum class Aggregation { mean, lwm_normalized, lwm_raw };

inline std::string to_string(Aggregation a) {
  switch (a) {
    case Aggregation::mean: return "mean";
    case Aggregation::lwm_normalized: return "lwm_normalized";
    case Aggregation::lwm_raw: return "lwm_raw";
  }
  return "mean";
}

inline Aggregation aggregation_from_string(const std::string& s) {
  if (s == "mean") return Aggregation::mean;
  if (s == "lwm_normalized") return Aggregation::lwm_normalized;
  if (s == "lwm_raw") return Aggregation::lwm_raw;
  throw Error("unknown aggregation '" + s + "'");
}

struct ModelParams {
  ModelConfig config;
  Mlp encoder;
  std::vector<Mlp> relations;  // relations[r - 2]
  Head head;
  std::uint64_t rng_seed = 0;
  Aggregation aggregation = Aggregation::mean;

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
    if (cfg.k < 3) throw Error("model: k must be at least 3");
    if (cfg.C < 2) throw Error("model: need at least 2 classes");
    Rng rng(mix_seed(seed, streams::init));
    ModelParams p;
    p.config = cfg;
    p.rng_seed = seed;
    p.encoder = Mlp::init(cfg.d_in, cfg.encoder_hidden, cfg.d_enc, rng);
    for (std::size_t r = 2; r <= cfg.k; ++r)
      p.relations.push_back(Mlp::init(r * cfg.d_enc, cfg.relation_hidden, cfg.d, rng));
    p.head.bottleneck = Linear::init(cfg.d, cfg.d_b, rng);
    p.head.bn = BatchNorm::init(cfg.d_b);
    p.head.bn.gamma.set_requires_grad(true);
    p.head.bn.beta.set_requires_grad(true);
    p.head.classifier = WeightNormLinear::init(cfg.d_b, cfg.C, rng);
    return p;
  }

  std::vector<NamedParameter> parameters() const {
    std::vector<NamedParameter> out{
        {"encoder.hidden.weight", encoder.hidden.weight, ParamGroup::encoder},
        {"encoder.hidden.bias", encoder.hidden.bias, ParamGroup::encoder},
        {"encoder.output.weight", encoder.output.weight, ParamGroup::encoder},
        {"encoder.output.bias", encoder.output.bias, ParamGroup::encoder},
    };
    for (std::size_t i = 0; i < relations.size(); ++i) {
      const auto prefix = "relation." + std::to_string(i + 2) + ".";
      out.push_back({prefix + "hidden.weight", relations[i].hidden.weight, ParamGroup::relation});
      out.push_back({prefix + "hidden.bias", relations[i].hidden.bias, ParamGroup::relation});
      out.push_back({prefix + "output.weight", relations[i].output.weight, ParamGroup::relation});
      out.push_back({prefix + "output.bias", relations[i].output.bias, ParamGroup::relation});
    }
    out.push_back({"head.bottleneck.weight", head.bottleneck.weight, ParamGroup::bottleneck});
    out.push_back({"head.bottleneck.bias", head.bottleneck.bias, ParamGroup::bottleneck});
    out.push_back({"head.bn.gamma", head.bn.gamma, ParamGroup::batchnorm});
    out.push_back({"head.bn.beta", head.bn.beta, ParamGroup::batchnorm});
    out.push_back({"head.classifier.direction", head.classifier.direction, ParamGroup::classifier});
    out.push_back({"head.classifier.magnitude", head.classifier.magnitude, ParamGroup::classifier});
    out.push_back({"head.classifier.bias", head.classifier.bias, ParamGroup::classifier});
    return out;
  }

  // Deep copy: fresh leaves, bitwise-equal values.
  ModelParams clone() const {
    ModelParams p = *this;
    auto copy_linear = [](Linear& l) {
      l.weight = l.weight.clone();
      l.bias = l.bias.clone();
    };
    copy_linear(p.encoder.hidden);
    copy_linear(p.encoder.output);
    for (auto& m : p.relations) {
      copy_linear(m.hidden);
      copy_linear(m.output);
    }
    copy_linear(p.head.bottleneck);
    p.head.bn.gamma = p.head.bn.gamma.clone();
    p.head.bn.beta = p.head.bn.beta.clone();
    p.head.classifier.direction = p.head.classifier.direction.clone();
    p.head.classifier.magnitude = p.head.classifier.magnitude.clone();
    p.head.classifier.bias = p.head.classifier.bias.clone();
    return p;
  }
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

// ---------------------------------------------------------------------------
// Forward pass

// Stacks frames of a batch into a (B*k) x d_in matrix, video-major.
inline Tensor stack_frames(const std::vector<const VideoSample*>& batch) {
  if (batch.empty()) throw Error("empty batch");
  const auto k = batch.front()->frame_count();
  const auto dim = batch.front()->frame_dim();
  std::vector<double> values;
  values.reserve(batch.size() * k * dim);
  for (const auto* v : batch) {
    if (v->frame_count() != k || v->frame_dim() != dim)
      throw ShapeError("video " + v->id + ": frame layout differs from the rest of the batch");
    for (const auto& f : v->frames) {
      if (f.size() != dim) throw ShapeError("video " + v->id + ": frame dimensions differ");
      values.insert(values.end(), f.begin(), f.end());
    }
  }
  return Tensor::from({batch.size() * k, dim}, std::move(values));
}

// (B*k) x d_in -> (B*k) x d_enc
inline Tensor encode_frames(const Tensor& frames, const ModelParams& params) {
  if (frames.rank() != 2 || frames.cols() != params.config.d_in)
    throw ShapeError("encode_frames: frame dimension " + std::to_string(frames.cols()) + " vs model d_in " +
                     std::to_string(params.config.d_in));
  return params.encoder(frames);
}

// Local temporal features, one B x d matrix per scale (scales[r - 2]).
struct LocalFeatures {
  std::vector<Tensor> scales;

  std::size_t scale_count() const { return scales.size(); }
  std::size_t batch() const { return scales.front().rows(); }
};

// `clips` holds either one set shared by the whole batch or one set per video.
// lt^(r) is the sum over the scale's clips of g^(r) applied to the clip's
// frame encodings concatenated in temporal order.
inline LocalFeatures local_temporal_features(const Tensor& encodings, std::size_t batch,
                                             const std::vector<ClipIndexSet>& clips, const ModelParams& params) {
  const auto k = params.config.k;
  if (encodings.rows() != batch * k) throw ShapeError("local_temporal_features: encoding rows do not match B*k");
  if (clips.size() != 1 && clips.size() != batch)
    throw ShapeError("local_temporal_features: need one clip set or one per video");
  const auto clips_of = [&](std::size_t b) -> const ClipIndexSet& { return clips.size() == 1 ? clips[0] : clips[b]; };

  LocalFeatures out;
  for (std::size_t r = 2; r <= k; ++r) {
    const auto M = clips_of(0).at_scale(r).size();
    std::vector<Tensor> parts;
    for (std::size_t j = 0; j < r; ++j) {
      std::vector<std::size_t> rows;
      rows.reserve(M * batch);
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t b = 0; b < batch; ++b) {
          const auto& scale = clips_of(b).at_scale(r);
          if (scale.size() != M) throw ShapeError("local_temporal_features: clip counts differ across videos");
          const auto& clip = scale[m];
          if (clip.size() != r) throw ShapeError("local_temporal_features: clip length does not match its scale");
          if (clip[j] >= k) throw ShapeError("local_temporal_features: clip index out of range");
          rows.push_back(b * k + clip[j]);
        }
      parts.push_back(gather_rows(encodings, std::move(rows)));
    }
    const auto fused = params.relations[r - 2](concat(parts));
    Tensor lt = slice_rows(fused, 0, batch);
    for (std::size_t m = 1; m < M; ++m) lt = add(lt, slice_rows(fused, m * batch, batch));
    out.scales.push_back(std::move(lt));
  }
  return out;
}

// Mean of local features, or (1/(k-1)) sum_r w_r lt^(r) when weights are
// given (B x (k-1), row-major). Weights act as constants.
inline Tensor aggregate_overall(const LocalFeatures& lts, const std::vector<double>* weights = nullptr) {
  const auto S = lts.scale_count();
  const auto B = lts.batch();
  if (weights && weights->size() != B * S) throw ShapeError("aggregate_overall: need one weight per scale per video");
  Tensor acc;
  for (std::size_t s = 0; s < S; ++s) {
    Tensor term = lts.scales[s];
    if (weights) {
      std::vector<double> col(B);
      for (std::size_t b = 0; b < B; ++b) col[b] = (*weights)[b * S + s];
      term = mul_col(term, Tensor::from({B, 1}, std::move(col)));
    }
    acc = s == 0 ? term : add(acc, term);
  }
  return scale(acc, 1.0 / static_cast<double>(S));
}

enum class Mode { train, eval };

// logits = weight_norm_affine(batchnorm(bottleneck(features))).
// Train mode normalizes with batch statistics and folds them into the running
// statistics; eval mode uses the running statistics. A frozen head is applied
// as constants: nothing inside it receives gradients or changes state.
// `update_stats = false` normalizes with batch statistics without folding them
// into the running statistics.
inline Tensor classify(const Tensor& features, ModelParams& params, Mode mode, bool frozen,
                       bool update_stats = true) {
  auto& head = params.head;
  if (features.cols() != params.config.d)
    throw ShapeError("classify: feature dimension " + std::to_string(features.cols()) + " vs model d " +
                     std::to_string(params.config.d));
  const auto param = [frozen](const Tensor& t) { return frozen ? t.detach() : t; };

  Tensor z = add_row(matmul(features, param(head.bottleneck.weight)), param(head.bottleneck.bias));
  auto& bn = head.bn;
  Tensor normalized;
  if (mode == Mode::train) {
    if (z.rows() < 2) throw Error("classify: batch-norm training needs at least 2 samples");
    const auto mu = mean_rows(z);
    const auto var = variance(z);
    const auto neg_mu = scale(mu, -1.0);
    normalized = mul_row(add_row(z, neg_mu), inv_sqrt(var, bn.eps));
    if (!frozen && update_stats) {
      const double m = static_cast<double>(z.rows());
      for (std::size_t j = 0; j < bn.running_mean.size(); ++j) {
        bn.running_mean[j] = bn.momentum * bn.running_mean[j] + (1.0 - bn.momentum) * mu[j];
        bn.running_var[j] = bn.momentum * bn.running_var[j] + (1.0 - bn.momentum) * var[j] * m / (m - 1.0);
      }
      bn.initialized = true;
    }
  } else {
    if (!bn.initialized) throw Error("classify: batch-norm running statistics are uninitialized");
    std::vector<double> shift(bn.running_mean.size()), inv(bn.running_var.size());
    for (std::size_t j = 0; j < shift.size(); ++j) {
      shift[j] = -bn.running_mean[j];
      inv[j] = 1.0 / std::sqrt(bn.running_var[j] + bn.eps);
    }
    const Shape row{1, shift.size()};
    normalized = mul_row(add_row(z, Tensor::from(row, std::move(shift))), Tensor::from(row, std::move(inv)));
  }
  Tensor y = add_row(mul_row(normalized, param(bn.gamma)), param(bn.beta));

  const auto& cls = head.classifier;
  const Tensor weight = frozen ? cls.effective_weight().detach() : cls.effective_weight();
  return add_row(matmul(y, transpose(weight)), param(cls.bias));
}

// Deterministic per-video clips for evaluation, derived from the video id.
inline ClipIndexSet eval_clips(const VideoSample& video, const ModelParams& params) {
  Rng rng(mix_seed(params.rng_seed, stable_hash(video.id)));
  return sample_clips(params.config.k, params.config.M_max, rng);
}

}  // namespace atcon
