#pragma once

// Seeded synthetic cross-domain "videos" and the line-delimited dataset format.
//
// A class is a base appearance plus a per-dimension sinusoidal motion pattern
// sampled at k frames. The target domain rotates frame vectors by a fixed
// random rotation whose angle scales with shift severity, applies a
// per-dimension gain and bias, and shifts every video's temporal phase.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "atcon/random.hpp"
#include "atcon/trn.hpp"

namespace atcon {

struct DomainSpec {
  std::size_t classes = 8;
  std::size_t videos_per_class = 200;
  std::size_t frames = 5;
  std::size_t frame_dim = 32;
  double shift_severity = 0.7;
  double noise_std = 0.1;
  std::uint64_t seed = 42;

  bool operator==(const DomainSpec&) const = default;

  void validate() const {
    if (classes < 2) throw Error("domain spec: classes must be at least 2");
    if (frames < 3) throw Error("domain spec: frames must be at least 3");
    if (frame_dim < 1) throw Error("domain spec: frame_dim must be positive");
    if (videos_per_class < 1) throw Error("domain spec: videos_per_class must be positive");
    if (!(shift_severity >= 0.0 && shift_severity <= 1.0)) throw Error("domain spec: shift_severity must lie in [0, 1]");
    if (!(noise_std >= 0.0)) throw Error("domain spec: noise_std must be non-negative");
  }
};

struct Dataset {
  std::string domain;
  std::size_t classes = 0;
  std::size_t frames = 0;
  std::size_t frame_dim = 0;
  std::vector<VideoSample> videos;

  bool is_source() const { return domain == "source"; }
  bool labeled() const {
    return !videos.empty() && std::all_of(videos.begin(), videos.end(), [](const auto& v) { return v.label.has_value(); });
  }
  std::vector<std::size_t> manifest() const {
    std::vector<std::size_t> counts(classes, 0);
    for (const auto& v : videos)
      if (v.label) ++counts[static_cast<std::size_t>(*v.label)];
    return counts;
  }
};

inline bool operator==(const VideoSample& a, const VideoSample& b) {
  return a.id == b.id && a.label == b.label && a.domain == b.domain && a.frames == b.frames;
}

inline bool operator==(const Dataset& a, const Dataset& b) {
  return a.domain == b.domain && a.classes == b.classes && a.frames == b.frames && a.frame_dim == b.frame_dim &&
         a.videos == b.videos;
}

// Magnitudes of the target shift at severity 1; each is multiplied by the
// severity. Fixed by calibration.
struct ShiftProfile {
  double rotation_min = 1.0471975511965976;  // radians per rotation plane
  double rotation_max = 1.5707963267948966;
  double log_gain_std = 0.8;
  double bias_std = 1.0;
  double phase_offset = 3.0;  // frames

  bool operator==(const ShiftProfile&) const = default;
};

namespace detail {

struct ClassPattern {
  std::vector<double> base;
  std::vector<double> amplitude;
  std::vector<double> phase;
  double frequency = 1.0;  // cycles per k frames
};

struct DomainShift {
  Eigen::MatrixXd rotation;
  std::vector<double> gain;
  std::vector<double> bias;
};

inline ClassPattern make_class_pattern(const DomainSpec& spec, std::size_t c) {
  Rng rng(mix_seed(spec.seed, 1000 + c));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ClassPattern p;
  p.base.resize(spec.frame_dim);
  p.amplitude.resize(spec.frame_dim);
  p.phase.resize(spec.frame_dim);
  for (std::size_t i = 0; i < spec.frame_dim; ++i) {
    p.base[i] = 0.5 * normal(rng);
    p.amplitude[i] = normal(rng);
    p.phase[i] = 2.0 * std::numbers::pi * unit(rng);
  }
  p.frequency = 0.5 + unit(rng);
  return p;
}

// Rotation U diag(R(s theta_1), R(s theta_2), ...) U^T with U random orthogonal.
inline DomainShift make_domain_shift(const DomainSpec& spec, const ShiftProfile& profile) {
  const auto d = static_cast<Eigen::Index>(spec.frame_dim);
  const double s = spec.shift_severity;
  Rng rng(mix_seed(spec.seed, 2000));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> angle(profile.rotation_min, profile.rotation_max);

  Eigen::MatrixXd gaussian(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) gaussian(i, j) = normal(rng);
  const Eigen::MatrixXd basis = Eigen::HouseholderQR<Eigen::MatrixXd>(gaussian).householderQ();
  Eigen::MatrixXd planes = Eigen::MatrixXd::Identity(d, d);
  for (Eigen::Index i = 0; i + 1 < d; i += 2) {
    const double t = s * angle(rng);
    planes(i, i) = std::cos(t);
    planes(i, i + 1) = -std::sin(t);
    planes(i + 1, i) = std::sin(t);
    planes(i + 1, i + 1) = std::cos(t);
  }
  DomainShift shift;
  shift.rotation = basis * planes * basis.transpose();
  shift.gain.resize(spec.frame_dim);
  shift.bias.resize(spec.frame_dim);
  for (std::size_t i = 0; i < spec.frame_dim; ++i) {
    shift.gain[i] = std::exp(s * profile.log_gain_std * normal(rng));
    shift.bias[i] = s * profile.bias_std * normal(rng);
  }
  return shift;
}

inline std::string video_id(const char* prefix, std::size_t c, std::size_t i) {
  std::ostringstream os;
  os << prefix << "-c" << c << "-" << i;
  return os.str();
}

}  // namespace detail

// Both domains draw each video's latent state (phase jitter, amplitude) from the
// same per-(class, index) stream; noise and the target's extra phase offset use
// domain-specific streams. With zero severity and zero noise the two domains are
// therefore identical video for video.
inline std::pair<Dataset, Dataset> generate_domain_pair(const DomainSpec& spec, const ShiftProfile& profile = {}) {
  spec.validate();
  const auto shift = detail::make_domain_shift(spec, profile);
  const auto k = spec.frames, d = spec.frame_dim;
  const double s = spec.shift_severity;

  Dataset source{"source", spec.classes, k, d, {}};
  Dataset target{"target", spec.classes, k, d, {}};
  std::vector<detail::ClassPattern> patterns;
  for (std::size_t c = 0; c < spec.classes; ++c) patterns.push_back(detail::make_class_pattern(spec, c));
  for (std::size_t c = 0; c < spec.classes; ++c) {
    const auto& pattern = patterns[c];
    for (std::size_t i = 0; i < spec.videos_per_class; ++i) {
      const std::uint64_t key = (static_cast<std::uint64_t>(c) << 32) | i;
      Rng latent(mix_seed(spec.seed, mix_seed(key, 1)));
      Rng source_noise(mix_seed(spec.seed, mix_seed(key, 2)));
      Rng target_noise(mix_seed(spec.seed, mix_seed(key, 3)));
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      std::normal_distribution<double> noise(0.0, 1.0);

      const double jitter = unit(latent) - 0.5;
      const double amp = 0.8 + 0.4 * unit(latent);
      const double target_offset = s * profile.phase_offset * unit(target_noise);

      const auto render_frame = [&](const detail::ClassPattern& pat, std::size_t j, double offset, Rng& noise_rng) {
        std::vector<double> f(d);
        const double t =
            2.0 * std::numbers::pi * pat.frequency * (static_cast<double>(j) + jitter + offset) / static_cast<double>(k);
        for (std::size_t q = 0; q < d; ++q)
          f[q] = pat.base[q] + amp * pat.amplitude[q] * std::sin(t + pat.phase[q]) + spec.noise_std * noise(noise_rng);
        return f;
      };
      const auto render = [&](double offset, Rng& noise_rng) {
        std::vector<std::vector<double>> frames;
        for (std::size_t j = 0; j < k; ++j) frames.push_back(render_frame(pattern, j, offset, noise_rng));
        return frames;
      };

      VideoSample src{detail::video_id("src", c, i), render(0.0, source_noise), static_cast<int>(c), "source"};
      auto raw = render(target_offset, target_noise);
      // Zero severity skips the transform so the identity holds bit for bit.
      if (s > 0.0) {
        for (auto& f : raw) {
          const Eigen::Map<const Eigen::VectorXd> x(f.data(), static_cast<Eigen::Index>(d));
          const Eigen::VectorXd y = shift.rotation * x;
          for (std::size_t q = 0; q < d; ++q) f[q] = shift.gain[q] * y(static_cast<Eigen::Index>(q)) + shift.bias[q];
        }
      }
      VideoSample tgt{detail::video_id("tgt", c, i), std::move(raw), static_cast<int>(c), "target"};
      source.videos.push_back(std::move(src));
      target.videos.push_back(std::move(tgt));
    }
  }
  return {std::move(source), std::move(target)};
}

// ---------------------------------------------------------------------------
// Line-delimited files: a header object, then one video object per line.

inline constexpr int dataset_format_version = 1;

inline std::string dataset_to_string(const Dataset& ds) {
  std::string out;
  nlohmann::json header = {{"format_version", dataset_format_version},
                           {"domain", ds.domain},
                           {"C", ds.classes},
                           {"k", ds.frames},
                           {"d_in", ds.frame_dim},
                           {"count", ds.videos.size()}};
  out += header.dump() + "\n";
  for (const auto& v : ds.videos) {
    nlohmann::json rec;
    rec["id"] = v.id;
    rec["label"] = v.label ? nlohmann::json(*v.label) : nlohmann::json(nullptr);
    rec["domain"] = v.domain;
    rec["frames"] = v.frames;
    out += rec.dump() + "\n";
  }
  return out;
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write dataset " + path.string());
  out << dataset_to_string(ds);
}

inline Dataset parse_dataset(std::istream& in, const std::string& name) {
  const auto fail = [&](std::size_t line, const std::string& what) {
    return Error(name + ":" + std::to_string(line) + ": " + what);
  };
  std::string text;
  std::size_t line_no = 0;
  Dataset ds;
  std::size_t expected = 0;
  if (!std::getline(in, text)) throw fail(1, "missing header line");
  ++line_no;
  try {
    const auto h = nlohmann::json::parse(text);
    if (h.at("format_version").get<int>() != dataset_format_version) throw fail(1, "unsupported format_version");
    ds.classes = h.at("C").get<std::size_t>();
    ds.frames = h.at("k").get<std::size_t>();
    ds.frame_dim = h.at("d_in").get<std::size_t>();
    expected = h.at("count").get<std::size_t>();
    ds.domain = h.value("domain", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw fail(1, std::string("malformed header: ") + e.what());
  }

  while (std::getline(in, text)) {
    ++line_no;
    if (text.empty()) continue;
    VideoSample v;
    try {
      const auto rec = nlohmann::json::parse(text);
      v.id = rec.at("id").get<std::string>();
      if (!rec.at("label").is_null()) v.label = rec.at("label").get<int>();
      v.domain = rec.at("domain").get<std::string>();
      v.frames = rec.at("frames").get<std::vector<std::vector<double>>>();
    } catch (const nlohmann::json::exception& e) {
      throw fail(line_no, std::string("malformed record: ") + e.what());
    }
    if (v.frames.size() != ds.frames)
      throw fail(line_no, "video " + v.id + " has " + std::to_string(v.frames.size()) + " frames, header says k=" +
                              std::to_string(ds.frames));
    for (const auto& f : v.frames)
      if (f.size() != ds.frame_dim) throw fail(line_no, "video " + v.id + " frame dimension differs from d_in");
    if (v.label && (*v.label < 0 || static_cast<std::size_t>(*v.label) >= ds.classes))
      throw fail(line_no, "label out of range");
    if (ds.domain.empty()) ds.domain = v.domain;
    if (ds.is_source() && !v.label) throw fail(line_no, "source requires labels");
    ds.videos.push_back(std::move(v));
  }
  if (ds.videos.size() != expected)
    throw fail(line_no, "header count " + std::to_string(expected) + " but " + std::to_string(ds.videos.size()) +
                            " records");
  return ds;
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read dataset " + path.string());
  return parse_dataset(in, path.string());
}

inline Dataset strip_labels(Dataset ds) {
  for (auto& v : ds.videos) v.label.reset();
  return ds;
}

// ---------------------------------------------------------------------------
// Batching

enum class BatchMode {
  train,  // seeded shuffle, short final batch dropped
  eval,   // dataset order, every sample exactly once
};

inline std::vector<std::vector<std::size_t>> batch_iterator(std::size_t count, std::size_t batch_size,
                                                            std::uint64_t shuffle_seed, BatchMode mode) {
  if (batch_size < 1) throw Error("batch_iterator: batch_size must be positive");
  if (mode == BatchMode::train && batch_size < 2) throw Error("batch_iterator: training batches need at least 2 samples");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  if (mode == BatchMode::train) {
    Rng rng(shuffle_seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < count; start += batch_size) {
    const auto end = std::min(count, start + batch_size);
    if (mode == BatchMode::train && end - start < batch_size) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

inline std::vector<std::vector<std::size_t>> batch_iterator(const Dataset& ds, std::size_t batch_size,
                                                            std::uint64_t shuffle_seed, BatchMode mode) {
  return batch_iterator(ds.videos.size(), batch_size, shuffle_seed, mode);
}

}  // namespace atcon
