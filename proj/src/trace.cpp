#include "tokenprune/trace.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "tokenprune/rng.hpp"

namespace tokenprune {

using nlohmann::json;

void TokenPartition::validate() const {
  if (n_visual < 1 || n_prompt < 1 || n_caption < 1) {
    throw std::invalid_argument("token partition counts must all be >= 1");
  }
}

namespace {

// Low-importance tokens the shallow layers will favor: drawn from the bottom
// half of the planted ranking so they are disjoint from the top tokens.
std::vector<int> pick_biased_tokens(const std::vector<double>& importance, Rng& rng) {
  const int n = static_cast<int>(importance.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (importance[a] != importance[b]) return importance[a] > importance[b];
    return a < b;
  });
  const int bottom = std::max(1, n / 2);
  std::vector<int> candidates(order.end() - bottom, order.end());
  rng.shuffle(candidates);
  const int count = std::min(bottom, std::max(1, n / 4));
  candidates.resize(count);
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

}  // namespace

AttentionTrace generate_trace(const TraceConfig& cfg, std::uint64_t seed) {
  cfg.partition.validate();
  if (cfg.n_layers < 3) throw std::invalid_argument("generate_trace: n_layers must be >= 3");
  if (cfg.bias_strength < 0.0 || cfg.bias_strength > 1.0) {
    throw std::invalid_argument("generate_trace: bias_strength must lie in [0,1]");
  }
  if (cfg.noise < 0.0) throw std::invalid_argument("generate_trace: noise must be >= 0");
  if (cfg.dirichlet_alpha <= 0.0) {
    throw std::invalid_argument("generate_trace: dirichlet_alpha must be positive");
  }

  const int n = cfg.partition.n_visual;
  const int m = cfg.partition.n_text();
  const int total = cfg.partition.total();
  const double beta = cfg.bias_strength;

  AttentionTrace trace;
  trace.partition = cfg.partition;
  trace.n_layers = cfg.n_layers;
  trace.bias_strength = beta;
  trace.noise = cfg.noise;
  trace.dirichlet_alpha = cfg.dirichlet_alpha;
  trace.seed = seed;

  Rng rng(seed);
  trace.planted_importance = rng.dirichlet(n, cfg.dirichlet_alpha);
  trace.biased_tokens = pick_biased_tokens(trace.planted_importance, rng);

  std::vector<double> bias_profile(n, 0.0);
  for (int i : trace.biased_tokens) bias_profile[i] = 1.0 / static_cast<double>(trace.biased_tokens.size());

  // Every row splits its mass between the visual and text blocks. Shallow
  // layers push extra mass onto visual columns, which is what makes the
  // layer_visual_importance curve peak at the front of the stack.
  const double base_share = static_cast<double>(n) / static_cast<double>(total);
  const double shallow_share = base_share + beta * 0.75 * (1.0 - base_share);

  std::vector<double> profile(n);
  trace.layers.reserve(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const bool shallow = l < kBiasedLayers;
    const double visual_share = shallow ? shallow_share : base_share;
    const double text_entry = m > 0 ? (1.0 - visual_share) / static_cast<double>(m) : 0.0;
    std::vector<double> mat(static_cast<std::size_t>(total) * total);
    for (int r = 0; r < total; ++r) {
      double sum = 0.0;
      for (int i = 0; i < n; ++i) {
        profile[i] = trace.planted_importance[i] *
                     (cfg.noise > 0.0 ? std::exp(cfg.noise * rng.normal()) : 1.0);
        sum += profile[i];
      }
      double* row = mat.data() + static_cast<std::size_t>(r) * total;
      for (int i = 0; i < n; ++i) {
        double p = profile[i] / sum;
        if (shallow) p = (1.0 - beta) * p + beta * bias_profile[i];
        row[i] = visual_share * p;
      }
      for (int j = 0; j < m; ++j) row[n + j] = text_entry;
    }
    trace.layers.push_back(Tensor::constant({total, total}, std::move(mat)));
  }
  return trace;
}

Tensor aggregate_attention(const AttentionTrace& trace, int skip) {
  if (skip < 0 || skip >= trace.n_layers) {
    throw std::invalid_argument("aggregate_attention: skip " + std::to_string(skip) +
                                " out of range for " + std::to_string(trace.n_layers) + " layers");
  }
  const int total = trace.partition.total();
  const int span = trace.n_layers - skip;
  std::vector<double> acc(static_cast<std::size_t>(total) * total, 0.0);
  for (int l = skip; l < trace.n_layers; ++l) {
    const std::vector<double>& layer = trace.layers[l].data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += layer[i];
  }
  for (double& v : acc) v /= span;
  return Tensor::constant({total, total}, std::move(acc));
}

TargetAttention extract_target(const Tensor& aggregated, const TokenPartition& partition, int skip) {
  partition.validate();
  const int n = partition.n_visual;
  const int total = partition.total();
  if (aggregated.rank() != 2 || aggregated.shape()[0] != total || aggregated.shape()[1] != total) {
    throw std::invalid_argument("extract_target: matrix shape " + shape_str(aggregated.shape()) +
                                " inconsistent with partition total " + std::to_string(total));
  }
  const auto column_means = [&](int row_begin, int row_count) {
    std::vector<double> out(n, 0.0);
    for (int r = row_begin; r < row_begin + row_count; ++r) {
      for (int i = 0; i < n; ++i) out[i] += aggregated.at(r, i);
    }
    for (double& v : out) v /= row_count;
    return out;
  };

  TargetAttention t;
  t.skip_layers = skip;
  t.a_self = column_means(0, n);
  t.a_prompt = column_means(n, partition.n_prompt);
  t.a_text = column_means(n + partition.n_prompt, partition.n_caption);
  t.a.resize(n);
  for (int i = 0; i < n; ++i) t.a[i] = t.a_self[i] + t.a_prompt[i] + t.a_text[i];
  return t;
}

std::vector<double> layer_visual_importance(const AttentionTrace& trace) {
  const int n = trace.partition.n_visual;
  const int total = trace.partition.total();
  std::vector<double> out(trace.n_layers, 0.0);
  for (int l = 0; l < trace.n_layers; ++l) {
    const std::vector<double>& layer = trace.layers[l].data();
    double acc = 0.0;
    for (int r = 0; r < total; ++r) {
      const double* row = layer.data() + static_cast<std::size_t>(r) * total;
      for (int i = 0; i < n; ++i) acc += row[i];
    }
    out[l] = acc / total;
  }
  return out;
}

std::uint64_t trace_hash(const AttentionTrace& trace) {
  std::uint64_t h = 14695981039346656037ull;
  const auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 1099511628211ull;
    }
  };
  mix(static_cast<std::uint64_t>(trace.partition.n_visual));
  mix(static_cast<std::uint64_t>(trace.partition.n_prompt));
  mix(static_cast<std::uint64_t>(trace.partition.n_caption));
  mix(static_cast<std::uint64_t>(trace.n_layers));
  mix(std::bit_cast<std::uint64_t>(trace.bias_strength));
  mix(std::bit_cast<std::uint64_t>(trace.noise));
  mix(trace.seed);
  for (double v : trace.planted_importance) mix(std::bit_cast<std::uint64_t>(v));
  for (int v : trace.biased_tokens) mix(static_cast<std::uint64_t>(v));
  for (const Tensor& layer : trace.layers) {
    for (double v : layer.data()) mix(std::bit_cast<std::uint64_t>(v));
  }
  return h;
}

void write_trace(const AttentionTrace& trace, const std::filesystem::path& path) {
  json j;
  j["partition"] = {{"n_visual", trace.partition.n_visual},
                    {"n_prompt", trace.partition.n_prompt},
                    {"n_caption", trace.partition.n_caption}};
  j["n_layers"] = trace.n_layers;
  j["bias_strength"] = trace.bias_strength;
  j["noise"] = trace.noise;
  j["dirichlet_alpha"] = trace.dirichlet_alpha;
  j["seed"] = trace.seed;
  j["planted_importance"] = trace.planted_importance;
  j["biased_tokens"] = trace.biased_tokens;
  json layers = json::array();
  for (const Tensor& layer : trace.layers) layers.push_back(layer.data());
  j["layers"] = std::move(layers);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_trace: cannot open " + path.string());
  out << j.dump();
  if (!out) throw std::runtime_error("write_trace: write failed for " + path.string());
}

AttentionTrace read_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_trace: cannot open " + path.string());
  json j = json::parse(in);
  AttentionTrace trace;
  trace.partition.n_visual = j.at("partition").at("n_visual").get<int>();
  trace.partition.n_prompt = j.at("partition").at("n_prompt").get<int>();
  trace.partition.n_caption = j.at("partition").at("n_caption").get<int>();
  trace.partition.validate();
  trace.n_layers = j.at("n_layers").get<int>();
  trace.bias_strength = j.at("bias_strength").get<double>();
  trace.noise = j.at("noise").get<double>();
  trace.dirichlet_alpha = j.at("dirichlet_alpha").get<double>();
  trace.seed = j.at("seed").get<std::uint64_t>();
  trace.planted_importance = j.at("planted_importance").get<std::vector<double>>();
  trace.biased_tokens = j.at("biased_tokens").get<std::vector<int>>();
  const int total = trace.partition.total();
  for (const json& layer : j.at("layers")) {
    auto data = layer.get<std::vector<double>>();
    if (static_cast<int>(data.size()) != total * total) {
      throw std::runtime_error("read_trace: layer size does not match partition in " + path.string());
    }
    trace.layers.push_back(Tensor::constant({total, total}, std::move(data)));
  }
  if (static_cast<int>(trace.layers.size()) != trace.n_layers) {
    throw std::runtime_error("read_trace: layer count mismatch in " + path.string());
  }
  return trace;
}

}  // namespace tokenprune
