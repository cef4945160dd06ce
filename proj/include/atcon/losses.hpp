#pragma once

// Training objectives. Every loss reduces over the batch by the arithmetic
// mean over videos.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "atcon/tensor.hpp"
#include "atcon/trn.hpp"

namespace atcon {

struct LossWeights {
  double lambda = 5e-3;  // off-diagonal redundancy weight
  double alpha_local = 1.0;
  double alpha_overall = 1.0;
  double beta_fc = 1.0;
  double beta_pc = 1.0;
  double beta_tc = 1.0;
  double beta_im = 1.0;
  double beta_ce = 1.0;
  double eps_norm = 1e-5;
  double eps_smooth = 0.1;

  bool operator==(const LossWeights&) const = default;

  void validate() const {
    for (double v : {lambda, alpha_local, alpha_overall, beta_fc, beta_pc, beta_tc, beta_im, beta_ce, eps_norm, eps_smooth})
      if (!std::isfinite(v) || v < 0.0) throw Error("loss weights must be finite and non-negative");
    if (eps_norm <= 0.0) throw Error("eps_norm must be positive");
    if (eps_smooth >= 1.0) throw Error("eps_smooth must lie in [0, 1)");
  }
};

// Per-scale local logits, their average, and the overall logits.
struct PredictionSet {
  std::vector<Tensor> local;  // (k-1) tensors of B x C
  Tensor average;             // B x C
  Tensor overall;             // B x C
};

namespace detail {

inline Tensor label_matrix(std::span<const int> labels, std::size_t classes, double on, double off, const char* op) {
  std::vector<double> t(labels.size() * classes, off);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes)
      throw Error(std::string(op) + ": label " + std::to_string(labels[b]) + " out of range");
    t[b * classes + static_cast<std::size_t>(labels[b])] = on;
  }
  return Tensor::from({labels.size(), classes}, std::move(t));
}

inline Tensor weighted_sum(std::initializer_list<std::pair<double, Tensor>> terms) {
  Tensor acc;
  for (const auto& [w, t] : terms) {
    auto term = scale(t, w);
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc;
}

}  // namespace detail

// Mean over the batch of -sum_c y'_c log softmax_c, y' = (1 - eps) onehot + eps / C.
inline Tensor smoothed_cross_entropy(const Tensor& logits, std::span<const int> labels, double eps_smooth) {
  if (eps_smooth < 0.0 || eps_smooth >= 1.0) throw Error("smoothed_cross_entropy: eps must lie in [0, 1)");
  if (labels.size() != logits.rows()) throw ShapeError("smoothed_cross_entropy: one label per row required");
  const auto C = logits.cols();
  const double off = eps_smooth / static_cast<double>(C);
  const auto target = detail::label_matrix(labels, C, 1.0 - eps_smooth + off, off, "smoothed_cross_entropy");
  return scale(sum(elementwise_mul(target, log_softmax(logits))), -1.0 / static_cast<double>(logits.rows()));
}

inline Tensor pseudo_label_cross_entropy(const Tensor& logits, std::span<const int> pseudo) {
  if (pseudo.size() != logits.rows()) throw ShapeError("pseudo_label_cross_entropy: one label per row required");
  const auto target = detail::label_matrix(pseudo, logits.cols(), 1.0, 0.0, "pseudo_label_cross_entropy");
  return scale(sum(elementwise_mul(target, log_softmax(logits))), -1.0 / static_cast<double>(logits.rows()));
}

// Per-dimension standardization across the batch (population variance).
inline Tensor normalize_features(const Tensor& lt, double eps_norm) {
  if (lt.rank() != 2 || lt.rows() < 2) throw ShapeError("normalize_features: need a B x d matrix with B >= 2");
  const auto centered = add_row(lt, scale(mean_rows(lt), -1.0));
  return mul_row(centered, inv_sqrt(variance(lt), eps_norm));
}

// (1/B) normalize(lt1)^T normalize(lt2), a d x d matrix.
inline Tensor cross_correlation(const Tensor& lt1, const Tensor& lt2, double eps_norm) {
  if (lt1.shape() != lt2.shape()) throw ShapeError("cross_correlation: feature shapes differ");
  const auto a = normalize_features(lt1, eps_norm);
  const auto b = normalize_features(lt2, eps_norm);
  return scale(matmul(transpose(a), b), 1.0 / static_cast<double>(lt1.rows()));
}

// sum_i (1 - C_ii)^2 + lambda sum_{i != j} C_ij^2
inline Tensor feature_consistency_pair(const Tensor& cc, double lambda) {
  if (cc.rank() != 2 || cc.rows() != cc.cols()) throw ShapeError("feature_consistency_pair: matrix must be square");
  const auto d = cc.rows();
  std::vector<double> identity(d * d, 0.0), mask(d * d, lambda);
  for (std::size_t i = 0; i < d; ++i) {
    identity[i * d + i] = 1.0;
    mask[i * d + i] = 1.0;
  }
  const auto diff = sub(cc, Tensor::from({d, d}, std::move(identity)));
  return sum(elementwise_mul(Tensor::from({d, d}, std::move(mask)), square(diff)));
}

inline std::size_t feature_consistency_pair_count(std::size_t k) { return (k - 1) * (k - 2); }

// Mean of the pair loss over all ordered scale pairs (r1, r2), r1 != r2.
inline Tensor feature_consistency_total(const LocalFeatures& lts, double lambda, double eps_norm) {
  const auto S = lts.scale_count();
  if (S < 2) throw Error("feature_consistency_total: need at least two scales (k >= 3)");
  std::vector<Tensor> normalized;
  for (const auto& lt : lts.scales) normalized.push_back(normalize_features(lt, eps_norm));
  const double inv_b = 1.0 / static_cast<double>(lts.batch());
  Tensor acc;
  std::size_t pairs = 0;
  for (std::size_t r1 = 0; r1 < S; ++r1)
    for (std::size_t r2 = 0; r2 < S; ++r2) {
      if (r1 == r2) continue;
      const auto cc = scale(matmul(transpose(normalized[r1]), normalized[r2]), inv_b);
      const auto term = feature_consistency_pair(cc, lambda);
      acc = acc.defined() ? add(acc, term) : term;
      ++pairs;
    }
  return scale(acc, 1.0 / static_cast<double>(pairs));
}

inline Tensor average_logits(const std::vector<Tensor>& local) {
  if (local.empty()) throw Error("average_logits: no scales");
  Tensor acc = local.front();
  for (std::size_t i = 1; i < local.size(); ++i) acc = add(acc, local[i]);
  return scale(acc, 1.0 / static_cast<double>(local.size()));
}

enum class KlMode {
  distributions,  // KL(softmax(p_r) || softmax(p_bar))
  literal,        // torch-style kl_div(log softmax(p_r), softmax(p_bar)) = KL(softmax(p_bar) || softmax(p_r))
};

// Mean over videos and scales of the KL divergence between each scale's
// prediction and the average local prediction.
inline Tensor local_prediction_consistency(const std::vector<Tensor>& local, KlMode mode = KlMode::distributions) {
  if (local.size() < 2) throw Error("local_prediction_consistency: need at least two scales (k >= 3)");
  const auto avg = average_logits(local);
  const auto log_avg = log_softmax(avg);
  Tensor acc;
  for (const auto& p : local) {
    const auto log_p = log_softmax(p);
    const auto term = mode == KlMode::distributions ? sum(elementwise_mul(softmax(p), sub(log_p, log_avg)))
                                                    : sum(elementwise_mul(softmax(avg), sub(log_avg, log_p)));
    acc = acc.defined() ? add(acc, term) : term;
  }
  return scale(acc, 1.0 / static_cast<double>(local.size() * avg.rows()));
}

// Mean over videos of sum_c |log softmax_c(overall) - log softmax_c(average)|.
inline Tensor overall_prediction_consistency(const Tensor& overall, const Tensor& average) {
  if (overall.shape() != average.shape()) throw ShapeError("overall_prediction_consistency: class counts differ");
  return scale(sum(abs(sub(log_softmax(overall), log_softmax(average)))), 1.0 / static_cast<double>(overall.rows()));
}

inline Tensor prediction_consistency(const Tensor& local_term, const Tensor& overall_term, double alpha_local,
                                     double alpha_overall) {
  return detail::weighted_sum({{alpha_local, local_term}, {alpha_overall, overall_term}});
}

inline Tensor temporal_consistency(const Tensor& fc, const Tensor& pc, double beta_fc, double beta_pc) {
  return detail::weighted_sum({{beta_fc, fc}, {beta_pc, pc}});
}

// Mean per-sample entropy plus KL(batch-mean prediction || uniform).
inline Tensor information_maximization(const Tensor& logits) {
  const auto B = static_cast<double>(logits.rows());
  const auto C = static_cast<double>(logits.cols());
  const auto probs = softmax(logits);
  const auto entropy = scale(sum(elementwise_mul(probs, log_softmax(logits))), -1.0 / B);
  const auto marginal = mean_rows(probs);
  const auto diversity = sum(elementwise_mul(marginal, log(scale(marginal, C))));
  return add(entropy, diversity);
}

}  // namespace atcon
