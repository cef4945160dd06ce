#pragma once

// Centroid pseudo-labeling over the whole target set: prediction-weighted
// initial centroids, cosine nearest-centroid assignment, then hard-assignment
// centroid refresh and relabeling.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "atcon/tensor.hpp"

namespace atcon {

inline constexpr double pseudolabel_eps = 1e-8;

struct CentroidTable {
  int generation = 0;
  std::size_t classes = 0;
  std::size_t dim = 0;
  std::vector<double> centroids;    // classes x dim
  std::vector<std::size_t> counts;  // generation >= 1 only

  std::span<const double> centroid(std::size_t c) const { return std::span(centroids).subspan(c * dim, dim); }
};

// c_c = sum_i softmax_c(logits_i) f_i / sum_i softmax_c(logits_i)
inline CentroidTable init_centroids(const Tensor& features, const Tensor& logits) {
  const auto N = features.rows(), d = features.cols(), C = logits.cols();
  if (N == 0 || logits.rows() != N) throw ShapeError("init_centroids: features and logits must have matching rows");
  const auto probs = softmax(logits.detach());
  CentroidTable t;
  t.classes = C;
  t.dim = d;
  t.centroids.assign(C * d, 0.0);
  std::vector<double> mass(C, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < C; ++c) {
      const double w = probs.at(i, c);
      mass[c] += w;
      for (std::size_t j = 0; j < d; ++j) t.centroids[c * d + j] += w * features.at(i, j);
    }
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t j = 0; j < d; ++j) t.centroids[c * d + j] /= (mass[c] + pseudolabel_eps);
  return t;
}

inline double cosine_distance(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    dot += a[j] * b[j];
    na += a[j] * a[j];
    nb += b[j] * b[j];
  }
  return 1.0 - dot / (std::max(std::sqrt(na), pseudolabel_eps) * std::max(std::sqrt(nb), pseudolabel_eps));
}

// Nearest centroid by cosine distance; ties go to the lowest class index.
inline std::vector<int> assign_labels(const Tensor& features, const CentroidTable& table) {
  if (features.cols() != table.dim) throw ShapeError("assign_labels: feature and centroid dimensions differ");
  const auto N = features.rows(), d = features.cols();
  std::vector<int> labels(N, 0);
  for (std::size_t i = 0; i < N; ++i) {
    const auto f = features.data().subspan(i * d, d);
    double best = cosine_distance(f, table.centroid(0));
    for (std::size_t c = 1; c < table.classes; ++c) {
      const double dist = cosine_distance(f, table.centroid(c));
      if (dist < best) {
        best = dist;
        labels[i] = static_cast<int>(c);
      }
    }
  }
  return labels;
}

// Per-class mean of assigned features; a class with no members keeps its
// centroid from `previous`.
inline CentroidTable update_centroids(const Tensor& features, std::span<const int> labels,
                                      const CentroidTable& previous) {
  const auto N = features.rows(), d = features.cols();
  if (labels.size() != N) throw ShapeError("update_centroids: one label per feature row required");
  if (d != previous.dim) throw ShapeError("update_centroids: dimension mismatch");
  CentroidTable t;
  t.generation = previous.generation + 1;
  t.classes = previous.classes;
  t.dim = d;
  t.centroids.assign(t.classes * d, 0.0);
  t.counts.assign(t.classes, 0);
  for (std::size_t i = 0; i < N; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= t.classes)
      throw Error("update_centroids: label " + std::to_string(labels[i]) + " out of range");
    const auto c = static_cast<std::size_t>(labels[i]);
    ++t.counts[c];
    for (std::size_t j = 0; j < d; ++j) t.centroids[c * d + j] += features.at(i, j);
  }
  for (std::size_t c = 0; c < t.classes; ++c) {
    if (t.counts[c] == 0) {
      std::copy_n(previous.centroids.begin() + static_cast<std::ptrdiff_t>(c * d), d,
                  t.centroids.begin() + static_cast<std::ptrdiff_t>(c * d));
      continue;
    }
    for (std::size_t j = 0; j < d; ++j) t.centroids[c * d + j] /= static_cast<double>(t.counts[c]);
  }
  return t;
}

// init -> assign -> (update -> assign) x rounds
inline std::vector<int> generate_pseudo_labels(const Tensor& features, const Tensor& logits, int rounds = 1) {
  if (rounds < 1) throw Error("generate_pseudo_labels: rounds must be at least 1");
  auto table = init_centroids(features, logits);
  auto labels = assign_labels(features, table);
  for (int round = 0; round < rounds; ++round) {
    table = update_centroids(features, labels, table);
    labels = assign_labels(features, table);
  }
  return labels;
}

}  // namespace atcon
