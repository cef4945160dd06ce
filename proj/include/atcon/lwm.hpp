#pragma once

// Local weight module: per-scale relevance weights w = 1 + confidence, where
// confidence is the negative softmax entropy of that scale's source-head
// prediction. Weights are coefficients computed from current values and never
// carry gradients.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "atcon/tensor.hpp"
#include "atcon/trn.hpp"

namespace atcon {

enum class ConfidenceMode {
  raw,         // -H, in [-log C, 0]
  normalized,  // -H / log C, in [-1, 0]
};

inline double confidence(std::span<const double> logits, ConfidenceMode mode) {
  const auto C = logits.size();
  if (C < 2) throw Error("confidence: need at least 2 classes");
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : logits) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  double neg_entropy = 0.0;
  for (double v : logits) {
    const double lp = v - lse;
    neg_entropy += std::exp(lp) * lp;
  }
  return mode == ConfidenceMode::raw ? neg_entropy : neg_entropy / std::log(static_cast<double>(C));
}

// batch x scales, row-major.
struct LocalWeights {
  std::size_t batch = 0;
  std::size_t scales = 0;
  std::vector<double> values;

  double at(std::size_t b, std::size_t s) const { return values[b * scales + s]; }
};

// local_logits[s] is B x C for scale s.
inline LocalWeights local_relevance_weights(const std::vector<Tensor>& local_logits, ConfidenceMode mode) {
  if (local_logits.empty()) throw Error("local_relevance_weights: no scales");
  LocalWeights w;
  w.batch = local_logits.front().rows();
  w.scales = local_logits.size();
  w.values.resize(w.batch * w.scales);
  for (std::size_t s = 0; s < w.scales; ++s) {
    const auto& p = local_logits[s];
    if (p.rows() != w.batch) throw ShapeError("local_relevance_weights: batch sizes differ across scales");
    for (std::size_t b = 0; b < w.batch; ++b)
      w.values[b * w.scales + s] = 1.0 + confidence(p.data().subspan(b * p.cols(), p.cols()), mode);
  }
  return w;
}

struct WeightSites {
  bool feature = true;
  bool prediction = true;

  bool any() const { return feature || prediction; }
};

enum class WeightTarget { logits, probabilities };

struct WeightedOutputs {
  Tensor overall_feature;            // B x d
  std::vector<Tensor> local_logits;  // (k-1) tensors of B x C
};

// Feature site: t' = (1/(k-1)) sum_r w_r lt^(r). Prediction site:
// p'^(r) = w_r p^(r). Sites left out pass through unweighted.
inline WeightedOutputs apply_weights(const LocalFeatures& lts, const std::vector<Tensor>& local_logits,
                                     const LocalWeights& weights, WeightSites sites,
                                     WeightTarget target = WeightTarget::logits) {
  if (!sites.any()) throw Error("apply_weights: at least one site is required");
  if (weights.scales != lts.scale_count() || weights.scales != local_logits.size() || weights.batch != lts.batch())
    throw ShapeError("apply_weights: weights do not match features");
  WeightedOutputs out;
  out.overall_feature = aggregate_overall(lts, sites.feature ? &weights.values : nullptr);
  for (std::size_t s = 0; s < local_logits.size(); ++s) {
    if (!sites.prediction) {
      out.local_logits.push_back(local_logits[s]);
      continue;
    }
    std::vector<double> col(weights.batch);
    for (std::size_t b = 0; b < weights.batch; ++b) col[b] = weights.at(b, s);
    const auto base = target == WeightTarget::logits ? local_logits[s] : softmax(local_logits[s]);
    out.local_logits.push_back(mul_col(base, Tensor::from({weights.batch, 1}, std::move(col))));
  }
  return out;
}

inline Aggregation aggregation_for(bool weighted_feature, ConfidenceMode mode) {
  if (!weighted_feature) return Aggregation::mean;
  return mode == ConfidenceMode::raw ? Aggregation::lwm_raw : Aggregation::lwm_normalized;
}

}  // namespace atcon
