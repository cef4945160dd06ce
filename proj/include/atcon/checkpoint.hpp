#pragma once

// Versioned JSON checkpoints. Doubles are written in shortest round-trip form,
// so load(save(model)) reproduces every parameter bit for bit.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "atcon/trn.hpp"

namespace atcon {

inline constexpr int checkpoint_format_version = 1;

namespace detail {

inline nlohmann::json tensor_to_json(const Tensor& t) {
  auto j = nlohmann::json::array();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    auto row = nlohmann::json::array();
    for (std::size_t c = 0; c < t.cols(); ++c) row.push_back(t.at(r, c));
    j.push_back(std::move(row));
  }
  return j;
}

inline void tensor_from_json(const nlohmann::json& j, Tensor& t, const std::string& name) {
  if (!j.is_array() || j.size() != t.rows())
    throw Error("checkpoint: parameter " + name + " has " + std::to_string(j.size()) + " rows, expected " +
                std::to_string(t.rows()));
  auto dst = t.mutable_data();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    const auto& row = j[r];
    if (!row.is_array() || row.size() != t.cols())
      throw Error("checkpoint: parameter " + name + " row " + std::to_string(r) + " has wrong width");
    for (std::size_t c = 0; c < t.cols(); ++c) dst[r * t.cols() + c] = row[c].get<double>();
  }
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const ModelParams& p) {
  const auto& c = p.config;
  nlohmann::json j;
  j["format_version"] = checkpoint_format_version;
  j["hyperparams"] = {{"k", c.k},         {"d_in", c.d_in}, {"d_enc", c.d_enc},
                      {"d", c.d},         {"d_b", c.d_b},   {"C", c.C},
                      {"M_max", c.M_max}, {"encoder_hidden", c.encoder_hidden},
                      {"relation_hidden", c.relation_hidden}};
  j["rng_seed"] = p.rng_seed;
  j["aggregation"] = to_string(p.aggregation);
  auto params = nlohmann::json::object();
  for (const auto& np : p.parameters()) params[np.name] = detail::tensor_to_json(np.tensor);
  j["parameters"] = std::move(params);
  const auto& bn = p.head.bn;
  j["batchnorm"] = {{"running_mean", bn.running_mean},
                    {"running_var", bn.running_var},
                    {"initialized", bn.initialized},
                    {"momentum", bn.momentum},
                    {"eps", bn.eps}};
  return j;
}

inline ModelParams checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != checkpoint_format_version)
      throw Error("checkpoint: unsupported format_version " + j.at("format_version").dump());
    const auto& h = j.at("hyperparams");
    ModelConfig c;
    c.k = h.at("k").get<std::size_t>();
    c.d_in = h.at("d_in").get<std::size_t>();
    c.d_enc = h.at("d_enc").get<std::size_t>();
    c.d = h.at("d").get<std::size_t>();
    c.d_b = h.at("d_b").get<std::size_t>();
    c.C = h.at("C").get<std::size_t>();
    c.M_max = h.at("M_max").get<std::size_t>();
    c.encoder_hidden = h.value("encoder_hidden", c.encoder_hidden);
    c.relation_hidden = h.value("relation_hidden", c.relation_hidden);

    auto p = ModelParams::init(c, j.at("rng_seed").get<std::uint64_t>());
    p.aggregation = aggregation_from_string(j.value("aggregation", std::string("mean")));
    const auto& params = j.at("parameters");
    for (auto& np : p.parameters()) {
      if (!params.contains(np.name)) throw Error("checkpoint: missing parameter " + np.name);
      detail::tensor_from_json(params.at(np.name), np.tensor, np.name);
    }
    const auto& bn = j.at("batchnorm");
    p.head.bn.running_mean = bn.at("running_mean").get<std::vector<double>>();
    p.head.bn.running_var = bn.at("running_var").get<std::vector<double>>();
    p.head.bn.initialized = bn.at("initialized").get<bool>();
    p.head.bn.momentum = bn.value("momentum", p.head.bn.momentum);
    p.head.bn.eps = bn.value("eps", p.head.bn.eps);
    if (p.head.bn.running_mean.size() != c.d_b || p.head.bn.running_var.size() != c.d_b)
      throw Error("checkpoint: batch-norm statistics do not match d_b");
    for (std::size_t i = 0; i < c.d_b; ++i)
      if (!std::isfinite(p.head.bn.running_mean[i]) || !std::isfinite(p.head.bn.running_var[i]))
        throw NumericError("checkpoint: non-finite batch-norm statistics");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("checkpoint: ") + e.what());
  }
}

inline std::string checkpoint_to_string(const ModelParams& p) { return checkpoint_to_json(p).dump() + "\n"; }

inline void save_checkpoint(const ModelParams& p, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out << checkpoint_to_string(p);
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("checkpoint " + path.string() + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace atcon
