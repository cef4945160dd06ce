#pragma once

// Source training, source-free adaptation, evaluation, ablation runs and
// embedding export.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "atcon/losses.hpp"
#include "atcon/lwm.hpp"
#include "atcon/pseudolabel.hpp"
#include "atcon/random.hpp"
#include "atcon/synthdata.hpp"
#include "atcon/trn.hpp"

namespace atcon {

enum class Variant { full, fc, pc, pc_no_overall, tc, na, a_at_f, a_at_p, shot_baseline, source_only };

inline const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::full, Variant::fc,     Variant::pc,     Variant::pc_no_overall,
                                      Variant::tc,   Variant::na,     Variant::a_at_f, Variant::a_at_p,
                                      Variant::shot_baseline, Variant::source_only};
  return v;
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::fc: return "fc";
    case Variant::pc: return "pc";
    case Variant::pc_no_overall: return "pc_no_overall";
    case Variant::tc: return "tc";
    case Variant::na: return "na";
    case Variant::a_at_f: return "a_at_f";
    case Variant::a_at_p: return "a_at_p";
    case Variant::shot_baseline: return "shot_baseline";
    case Variant::source_only: return "source_only";
  }
  return "full";
}

inline Variant variant_from_string(const std::string& s) {
  for (auto v : all_variants())
    if (to_string(v) == s) return v;
  throw Error("unknown variant '" + s + "'");
}

enum class FreezeScope { head_all, last_layer_only };

inline std::string to_string(FreezeScope f) { return f == FreezeScope::head_all ? "head_all" : "last_layer_only"; }

inline FreezeScope freeze_scope_from_string(const std::string& s) {
  if (s == "head_all") return FreezeScope::head_all;
  if (s == "last_layer_only") return FreezeScope::last_layer_only;
  throw Error("unknown freeze_scope '" + s + "'");
}

struct OptimizerConfig {
  double lr_source = 1e-2;
  double lr_adapt = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-3;

  bool operator==(const OptimizerConfig&) const = default;
};

struct RunConfig {
  LossWeights loss;
  OptimizerConfig optimizer;
  std::size_t epochs_source = 30;
  std::size_t epochs_adapt = 15;
  std::size_t batch_size = 32;
  Variant variant = Variant::full;
  FreezeScope freeze_scope = FreezeScope::head_all;
  ConfidenceMode confidence = ConfidenceMode::normalized;
  WeightTarget weight_target = WeightTarget::logits;
  KlMode kl_mode = KlMode::distributions;
  bool overall_pc_weighted = true;  // overall prediction consistency uses t' rather than t
  int pl_rounds = 1;
  std::uint64_t seed = 42;
  ModelConfig model;  // k, d_in and C are taken from the data
  DomainSpec data;  // data.seed follows seed
  unsigned threads = 0;  // ablation workers; 0 = one per hardware thread

  bool operator==(const RunConfig&) const = default;

  void validate() const {
    loss.validate();
    if (epochs_source < 1 || epochs_adapt < 1) throw Error("epochs must be at least 1");
    if (batch_size < 2) throw Error("batch_size must be at least 2");
    if (pl_rounds < 1) throw Error("pl_rounds must be at least 1");
    for (double v : {optimizer.lr_source, optimizer.lr_adapt, optimizer.momentum, optimizer.weight_decay})
      if (!std::isfinite(v) || v < 0.0) throw Error("optimizer settings must be finite and non-negative");
    data.validate();
  }
};

// Which terms of L = b_tc (b_fc L_fc + b_pc (a_l L_local + a_o L_overall)) + b_IM L_IM + b_ce L_ce
// a variant optimizes, and where local relevance weights are applied.
struct ObjectiveTerms {
  bool fc = false;
  bool pc_local = false;
  bool pc_overall = false;
  bool im = false;
  bool pl = false;
  WeightSites lwm{false, false};

  bool any() const { return fc || pc_local || pc_overall || im || pl; }
};

inline ObjectiveTerms terms_for(Variant v) {
  const WeightSites both{true, true}, none{false, false};
  switch (v) {
    case Variant::full: return {true, true, true, true, true, both};
    case Variant::fc: return {true, false, false, false, false, both};
    case Variant::pc: return {false, true, true, false, false, both};
    case Variant::pc_no_overall: return {false, true, false, false, false, both};
    case Variant::tc: return {true, true, true, false, false, both};
    case Variant::na: return {true, true, true, true, true, none};
    case Variant::a_at_f: return {true, true, true, true, true, {true, false}};
    case Variant::a_at_p: return {true, true, true, true, true, {false, true}};
    case Variant::shot_baseline: return {false, false, false, true, true, none};
    case Variant::source_only: return {false, false, false, false, false, none};
  }
  return {};
}

struct MetricsRow {
  std::size_t epoch = 0;
  double ce = 0.0;
  double fc = 0.0;
  double pc_local = 0.0;
  double pc_overall = 0.0;
  double im = 0.0;
  double pl_ce = 0.0;
  double total = 0.0;
  std::optional<double> top1;
  std::optional<double> pl_accuracy;
  double wall_time = 0.0;  // seconds; kept out of the metrics file
};

// Term values of one adaptation step, before weighting.
struct StepRecord {
  double fc = 0.0, pc_local = 0.0, pc_overall = 0.0, im = 0.0, pl_ce = 0.0, total = 0.0;
};

struct TrainResult {
  ModelParams model;
  std::vector<MetricsRow> metrics;
  std::vector<StepRecord> steps;
};

struct EvalResult {
  double top1 = 0.0;
  std::vector<double> per_class;
  std::vector<int> predictions;
};

// ---------------------------------------------------------------------------
// Optimizer

// SGD with heavy-ball momentum and L2 weight decay:
// g += wd * p; v = momentum * v + g; p -= lr * v.
class Sgd {
public:
  Sgd(std::vector<Tensor> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) velocity_.emplace_back(p.size(), 0.0);
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      auto value = p.mutable_data();
      auto& v = velocity_[i];
      const auto grad = p.grad();
      for (std::size_t j = 0; j < value.size(); ++j) {
        const double g = (grad.empty() ? 0.0 : grad[j]) + weight_decay_ * value[j];
        v[j] = momentum_ * v[j] + g;
        value[j] -= lr * v[j];
      }
      if (!std::all_of(value.begin(), value.end(), [](double x) { return std::isfinite(x); }))
        throw NumericError("optimizer produced a non-finite parameter");
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
  double weight_decay_;
};

// ---------------------------------------------------------------------------
// Forward helpers

inline ModelConfig model_config_for(const RunConfig& cfg, const Dataset& ds) {
  ModelConfig m = cfg.model;
  m.k = ds.frames;
  m.d_in = ds.frame_dim;
  m.C = ds.classes;
  return m;
}

inline void check_compatible(const ModelParams& model, const Dataset& ds) {
  const auto& c = model.config;
  if (c.k != ds.frames) throw Error("dimension mismatch: model k=" + std::to_string(c.k) + ", data k=" + std::to_string(ds.frames));
  if (c.d_in != ds.frame_dim)
    throw Error("dimension mismatch: model d_in=" + std::to_string(c.d_in) + ", data d_in=" + std::to_string(ds.frame_dim));
  if (c.C != ds.classes)
    throw Error("dimension mismatch: model C=" + std::to_string(c.C) + ", data C=" + std::to_string(ds.classes));
}

inline std::vector<const VideoSample*> gather(const Dataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<const VideoSample*> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(&ds.videos[i]);
  return out;
}

inline std::vector<Tensor> local_logits(const LocalFeatures& lts, ModelParams& model, Mode mode, bool frozen) {
  std::vector<Tensor> out;
  for (const auto& lt : lts.scales) out.push_back(classify(lt, model, mode, frozen, false));
  return out;
}

inline std::optional<ConfidenceMode> confidence_of(Aggregation a) {
  switch (a) {
    case Aggregation::mean: return std::nullopt;
    case Aggregation::lwm_normalized: return ConfidenceMode::normalized;
    case Aggregation::lwm_raw: return ConfidenceMode::raw;
  }
  return std::nullopt;
}

// Eval-mode features of a whole dataset: deterministic per-video clips,
// running batch-norm statistics, overall feature built per the model's
// aggregation setting.
struct Inference {
  std::vector<Tensor> local;  // per scale, N x d
  Tensor overall;             // N x d
  Tensor logits;              // N x C
};

inline Tensor stack_rows(const std::vector<Tensor>& parts) {
  std::vector<double> values;
  const auto cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    values.insert(values.end(), p.data().begin(), p.data().end());
    rows += p.rows();
  }
  return Tensor::from({rows, cols}, std::move(values));
}

inline Inference infer(const ModelParams& source, const Dataset& ds, std::size_t batch_size = 64) {
  check_compatible(source, ds);
  NoGradGuard no_grad;
  ModelParams model = source;  // shares tensors; eval mode mutates nothing
  const auto S = model.config.k - 1;
  std::vector<std::vector<Tensor>> local_parts(S);
  std::vector<Tensor> overall_parts, logit_parts;
  for (const auto& idx : batch_iterator(ds, batch_size, 0, BatchMode::eval)) {
    const auto batch = gather(ds, idx);
    std::vector<ClipIndexSet> clips;
    for (const auto* v : batch) clips.push_back(eval_clips(*v, model));
    const auto enc = encode_frames(stack_frames(batch), model);
    const auto lts = local_temporal_features(enc, batch.size(), clips, model);
    Tensor overall;
    if (auto mode = confidence_of(model.aggregation)) {
      const auto weights = local_relevance_weights(local_logits(lts, model, Mode::eval, true), *mode);
      overall = aggregate_overall(lts, &weights.values);
    } else {
      overall = aggregate_overall(lts);
    }
    logit_parts.push_back(classify(overall, model, Mode::eval, true));
    overall_parts.push_back(overall);
    for (std::size_t s = 0; s < S; ++s) local_parts[s].push_back(lts.scales[s]);
  }
  Inference out;
  for (auto& parts : local_parts) out.local.push_back(stack_rows(parts));
  out.overall = stack_rows(overall_parts);
  out.logits = stack_rows(logit_parts);
  return out;
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c)
      if (logits.at(i, c) > logits.at(i, best)) best = c;
    out[i] = static_cast<int>(best);
  }
  return out;
}

inline EvalResult score(const std::vector<int>& predictions, const Dataset& ds) {
  if (!ds.labeled()) throw Error("evaluate: dataset has unlabeled videos");
  EvalResult r;
  r.predictions = predictions;
  std::vector<std::size_t> hits(ds.classes, 0), counts(ds.classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto y = static_cast<std::size_t>(*ds.videos[i].label);
    ++counts[y];
    if (predictions[i] == static_cast<int>(y)) {
      ++hits[y];
      ++correct;
    }
  }
  r.top1 = static_cast<double>(correct) / static_cast<double>(predictions.size());
  for (std::size_t c = 0; c < ds.classes; ++c)
    r.per_class.push_back(counts[c] ? static_cast<double>(hits[c]) / static_cast<double>(counts[c]) : 0.0);
  return r;
}

inline EvalResult evaluate(const ModelParams& model, const Dataset& ds) {
  if (!ds.labeled()) throw Error("evaluate: dataset has unlabeled videos");
  return score(argmax_rows(infer(model, ds).logits), ds);
}

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline std::vector<Tensor> tensors_of(const ModelParams& model, std::initializer_list<ParamGroup> groups) {
  std::vector<Tensor> out;
  for (const auto& np : model.parameters())
    if (std::find(groups.begin(), groups.end(), np.group) != groups.end()) out.push_back(np.tensor);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Source training

inline TrainResult train_source(const Dataset& source, const RunConfig& cfg) {
  if (!source.labeled()) throw Error("train_source: source dataset requires labels");
  auto model = ModelParams::init(model_config_for(cfg, source), cfg.seed);
  for (auto& np : model.parameters()) np.tensor.set_requires_grad(true);
  Sgd sgd(detail::tensors_of(model, {ParamGroup::encoder, ParamGroup::relation, ParamGroup::bottleneck,
                                     ParamGroup::batchnorm, ParamGroup::classifier}),
          cfg.optimizer.momentum, cfg.optimizer.weight_decay);
  const auto train_seed = mix_seed(cfg.seed, streams::source_training);
  Rng clip_rng(train_seed);

  TrainResult result;
  std::optional<ModelParams> best;
  double best_acc = -1.0;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t epoch = 1; epoch <= cfg.epochs_source; ++epoch) {
    double loss_sum = 0.0;
    std::size_t steps = 0;
    const auto batches = batch_iterator(source, cfg.batch_size, mix_seed(train_seed, epoch), BatchMode::train);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto batch = gather(source, batches[bi]);
      std::vector<int> labels;
      for (const auto* v : batch) labels.push_back(*v->label);
      try {
        const std::vector<ClipIndexSet> clips{sample_clips(model.config.k, model.config.M_max, clip_rng)};
        const auto enc = encode_frames(stack_frames(batch), model);
        const auto lts = local_temporal_features(enc, batch.size(), clips, model);
        const auto logits = classify(aggregate_overall(lts), model, Mode::train, false);
        const auto loss = smoothed_cross_entropy(logits, labels, cfg.loss.eps_smooth);
        backward(loss, GraphMode::consume);
        sgd.step(cfg.optimizer.lr_source);
        sgd.zero_grad();
        loss_sum += loss.item();
        ++steps;
      } catch (const NumericError& e) {
        throw NumericError("source training epoch " + std::to_string(epoch) + " batch " + std::to_string(bi) + ": " +
                           e.what());
      }
    }
    MetricsRow row;
    row.epoch = epoch;
    row.ce = steps ? loss_sum / static_cast<double>(steps) : 0.0;
    row.total = row.ce;
    row.top1 = evaluate(model, source).top1;
    row.wall_time = detail::seconds_since(t0);
    result.metrics.push_back(row);
    if (*row.top1 > best_acc) {
      best_acc = *row.top1;
      best = model.clone();
    }
  }
  result.model = best ? *best : model.clone();
  return result;
}

// ---------------------------------------------------------------------------
// Source-free adaptation

namespace detail {

inline std::optional<double> agreement(const std::vector<int>& a, const Dataset& ds) {
  if (!ds.labeled()) return std::nullopt;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] == *ds.videos[i].label) ++hits;
  return static_cast<double>(hits) / static_cast<double>(a.size());
}

inline bool objective_inert(const ObjectiveTerms& t, const LossWeights& w) {
  const bool tc_live = w.beta_tc > 0.0 && ((t.fc && w.beta_fc > 0.0) ||
                                           (w.beta_pc > 0.0 && ((t.pc_local && w.alpha_local > 0.0) ||
                                                                (t.pc_overall && w.alpha_overall > 0.0))));
  return !tc_live && !(t.im && w.beta_im > 0.0) && !(t.pl && w.beta_ce > 0.0);
}

}  // namespace detail

// Target labels are read only for the diagnostic accuracy columns.
inline TrainResult adapt_target(const ModelParams& source_model, const Dataset& target, const RunConfig& cfg) {
  check_compatible(source_model, target);
  const auto terms = terms_for(cfg.variant);
  const auto& w = cfg.loss;

  TrainResult result;
  result.model = source_model.clone();
  auto& model = result.model;
  const auto t0 = std::chrono::steady_clock::now();

  if (!terms.any() || detail::objective_inert(terms, w)) {
    MetricsRow row;
    const auto inf = infer(model, target);
    row.top1 = detail::agreement(argmax_rows(inf.logits), target);
    row.wall_time = detail::seconds_since(t0);
    result.metrics.push_back(row);
    return result;
  }

  model.aggregation = aggregation_for(terms.lwm.feature, cfg.confidence);
  const bool head_frozen = cfg.freeze_scope == FreezeScope::head_all;
  const Mode head_mode = head_frozen ? Mode::eval : Mode::train;

  std::vector<NamedParameter> frozen;
  std::vector<Tensor> trainable;
  for (auto np : model.parameters()) {
    const bool train = np.group == ParamGroup::encoder || np.group == ParamGroup::relation ||
                       (!head_frozen && (np.group == ParamGroup::bottleneck || np.group == ParamGroup::batchnorm));
    np.tensor.set_requires_grad(train);
    if (train) {
      trainable.push_back(np.tensor);
    } else {
      frozen.push_back({np.name, np.tensor.detach(), np.group});
    }
  }
  const auto frozen_bn = model.head.bn;
  Sgd sgd(trainable, cfg.optimizer.momentum, cfg.optimizer.weight_decay);

  const auto adapt_seed = mix_seed(cfg.seed, streams::adaptation);
  Rng clip_rng(adapt_seed);
  auto inf = infer(model, target);

  for (std::size_t epoch = 1; epoch <= cfg.epochs_adapt; ++epoch) {
    std::vector<int> pseudo;
    if (terms.pl) pseudo = generate_pseudo_labels(inf.overall, inf.logits, cfg.pl_rounds);

    MetricsRow row;
    row.epoch = epoch;
    std::size_t steps = 0;
    const auto batches = batch_iterator(target, cfg.batch_size, mix_seed(adapt_seed, epoch), BatchMode::train);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto batch = gather(target, batches[bi]);
      StepRecord rec;
      try {
        const std::vector<ClipIndexSet> clips{sample_clips(model.config.k, model.config.M_max, clip_rng)};
        const auto enc = encode_frames(stack_frames(batch), model);
        const auto lts = local_temporal_features(enc, batch.size(), clips, model);
        const auto local = local_logits(lts, model, head_mode, head_frozen);

        Tensor overall_feature = aggregate_overall(lts);
        std::vector<Tensor> weighted_local = local;
        if (terms.lwm.any()) {
          const auto weights = local_relevance_weights(local, cfg.confidence);
          auto weighted = apply_weights(lts, local, weights, terms.lwm, cfg.weight_target);
          overall_feature = weighted.overall_feature;
          weighted_local = std::move(weighted.local_logits);
        }
        const auto overall = classify(overall_feature, model, head_mode, head_frozen);

        std::vector<std::pair<double, Tensor>> parts;
        if (terms.fc) {
          const auto v = feature_consistency_total(lts, w.lambda, w.eps_norm);
          rec.fc = v.item();
          parts.emplace_back(w.beta_tc * w.beta_fc, v);
        }
        if (terms.pc_local) {
          const auto v = local_prediction_consistency(weighted_local, cfg.kl_mode);
          rec.pc_local = v.item();
          parts.emplace_back(w.beta_tc * w.beta_pc * w.alpha_local, v);
        }
        if (terms.pc_overall) {
          const auto pc_overall_logits =
              cfg.overall_pc_weighted ? overall : classify(aggregate_overall(lts), model, head_mode, head_frozen, false);
          const auto v = overall_prediction_consistency(pc_overall_logits, average_logits(weighted_local));
          rec.pc_overall = v.item();
          parts.emplace_back(w.beta_tc * w.beta_pc * w.alpha_overall, v);
        }
        if (terms.im) {
          const auto v = information_maximization(overall);
          rec.im = v.item();
          parts.emplace_back(w.beta_im, v);
        }
        if (terms.pl) {
          std::vector<int> labels;
          for (auto i : batches[bi]) labels.push_back(pseudo[i]);
          const auto v = pseudo_label_cross_entropy(overall, labels);
          rec.pl_ce = v.item();
          parts.emplace_back(w.beta_ce, v);
        }
        Tensor total;
        for (const auto& [coef, term] : parts) {
          const auto t = scale(term, coef);
          total = total.defined() ? add(total, t) : t;
        }
        rec.total = total.item();
        double recomposed = 0.0;
        for (const auto& [coef, term] : parts) recomposed += coef * term.item();
        if (std::abs(recomposed - rec.total) > 1e-10 * std::max(1.0, std::abs(rec.total)))
          throw Error("objective decomposition mismatch at adaptation epoch " + std::to_string(epoch));
        backward(total, GraphMode::consume);
        sgd.step(cfg.optimizer.lr_adapt);
        sgd.zero_grad();
      } catch (const NumericError& e) {
        throw NumericError("adaptation epoch " + std::to_string(epoch) + " batch " + std::to_string(bi) + ": " +
                           e.what());
      }
      result.steps.push_back(rec);
      row.fc += rec.fc;
      row.pc_local += rec.pc_local;
      row.pc_overall += rec.pc_overall;
      row.im += rec.im;
      row.pl_ce += rec.pl_ce;
      row.total += rec.total;
      ++steps;
    }
    if (steps) {
      const double n = static_cast<double>(steps);
      for (double* v : {&row.fc, &row.pc_local, &row.pc_overall, &row.im, &row.pl_ce, &row.total}) *v /= n;
    }
    if (terms.pl) row.pl_accuracy = detail::agreement(pseudo, target);
    inf = infer(model, target);
    row.top1 = detail::agreement(argmax_rows(inf.logits), target);
    row.wall_time = detail::seconds_since(t0);
    result.metrics.push_back(row);
  }

  for (const auto& np : model.parameters())
    for (const auto& f : frozen)
      if (f.name == np.name && !bitwise_equal(f.tensor, np.tensor))
        throw Error("frozen parameter " + np.name + " drifted during adaptation");
  if (head_frozen &&
      (frozen_bn.running_mean != model.head.bn.running_mean || frozen_bn.running_var != model.head.bn.running_var))
    throw Error("frozen batch-norm statistics drifted during adaptation");
  for (auto& np : model.parameters()) np.tensor.set_requires_grad(true);
  return result;
}

// ---------------------------------------------------------------------------
// Metrics and exports

namespace detail {

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

inline std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

}  // namespace detail

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  os << "epoch,ce,fc,pc_local,pc_overall,im,pl_ce,total,top1,pl_accuracy\n";
  for (const auto& r : rows)
    os << r.epoch << ',' << detail::fmt(r.ce) << ',' << detail::fmt(r.fc) << ',' << detail::fmt(r.pc_local) << ','
       << detail::fmt(r.pc_overall) << ',' << detail::fmt(r.im) << ',' << detail::fmt(r.pl_ce) << ','
       << detail::fmt(r.total) << ',' << detail::fmt(r.top1) << ',' << detail::fmt(r.pl_accuracy) << '\n';
  return os.str();
}

inline std::string timing_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  os << "epoch,wall_time_s\n";
  for (const auto& r : rows) os << r.epoch << ',' << detail::fmt(r.wall_time) << '\n';
  return os.str();
}

enum class EmbeddingLevel { local, overall };

// One row per (video, scale) or per video: id, scale, label, feature values.
inline std::string embeddings_csv(const ModelParams& model, const Dataset& ds, EmbeddingLevel level) {
  const auto inf = infer(model, ds);
  const auto d = model.config.d;
  std::ostringstream os;
  os << "id,scale,label";
  for (std::size_t j = 0; j < d; ++j) os << ",f" << j;
  os << '\n';
  const auto emit = [&](const VideoSample& v, const std::string& scale_tag, const Tensor& m, std::size_t row) {
    os << v.id << ',' << scale_tag << ',';
    if (v.label) os << *v.label;
    for (std::size_t j = 0; j < d; ++j) os << ',' << detail::fmt(m.at(row, j));
    os << '\n';
  };
  for (std::size_t i = 0; i < ds.videos.size(); ++i) {
    if (level == EmbeddingLevel::overall) {
      emit(ds.videos[i], "overall", inf.overall, i);
    } else {
      for (std::size_t s = 0; s < inf.local.size(); ++s) emit(ds.videos[i], std::to_string(s + 2), inf.local[s], i);
    }
  }
  return os.str();
}

inline void export_embeddings(const ModelParams& model, const Dataset& ds, EmbeddingLevel level,
                              const std::filesystem::path& path) {
  detail::write_text(path, embeddings_csv(model, ds, level));
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationTable {
  std::vector<Variant> variants;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<double>> accuracy;  // [variant][seed]

  double mean(std::size_t v) const {
    double s = 0.0;
    for (double a : accuracy[v]) s += a;
    return s / static_cast<double>(accuracy[v].size());
  }

  double mean(Variant v) const {
    const auto it = std::find(variants.begin(), variants.end(), v);
    if (it == variants.end()) throw Error("variant " + to_string(v) + " not in table");
    return mean(static_cast<std::size_t>(it - variants.begin()));
  }

  std::string csv() const {
    std::ostringstream os;
    os << "variant";
    for (auto s : seeds) os << ",seed_" << s;
    os << ",mean\n";
    for (std::size_t v = 0; v < variants.size(); ++v) {
      os << to_string(variants[v]);
      for (double a : accuracy[v]) os << ',' << detail::fmt(a);
      os << ',' << detail::fmt(mean(v)) << '\n';
    }
    return os.str();
  }
};

// One seed: generate the domain pair, train the source model, then adapt and
// score every variant on the labeled target.
inline std::vector<double> run_seed(const RunConfig& base, const std::vector<Variant>& variants, std::uint64_t seed) {
  RunConfig cfg = base;
  cfg.seed = seed;
  cfg.data.seed = seed;
  const auto [source, target] = generate_domain_pair(cfg.data);
  const auto src = train_source(source, cfg);
  std::vector<double> acc;
  for (auto v : variants) {
    RunConfig vc = cfg;
    vc.variant = v;
    const auto adapted = adapt_target(src.model, target, vc);
    acc.push_back(evaluate(adapted.model, target).top1);
  }
  return acc;
}

// Seeds run on up to cfg.threads worker threads; each run owns its RNG streams,
// so results do not depend on scheduling.
inline AblationTable run_ablation(const RunConfig& cfg, const std::vector<Variant>& variants,
                                  const std::vector<std::uint64_t>& seeds) {
  if (variants.empty() || seeds.empty()) throw Error("run_ablation: need at least one variant and one seed");
  const unsigned threads = cfg.threads ? cfg.threads : std::max(1u, std::thread::hardware_concurrency());
  std::vector<std::vector<double>> per_seed(seeds.size());
  std::vector<std::exception_ptr> errors(seeds.size());
  std::size_t next = 0;
  std::mutex lock;
  const auto worker = [&] {
    while (true) {
      std::size_t i;
      {
        std::lock_guard g(lock);
        if (next >= seeds.size()) return;
        i = next++;
      }
      try {
        per_seed[i] = run_seed(cfg, variants, seeds[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < std::min<std::size_t>(threads, seeds.size()); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  AblationTable table;
  table.variants = variants;
  table.seeds = seeds;
  table.accuracy.assign(variants.size(), std::vector<double>(seeds.size()));
  for (std::size_t s = 0; s < seeds.size(); ++s)
    for (std::size_t v = 0; v < variants.size(); ++v) table.accuracy[v][s] = per_seed[s][v];
  return table;
}

}  // namespace atcon
