#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "tokenprune/tensor.hpp"

namespace tokenprune {

// Token layout in every attention matrix is [visual | prompt | caption].
struct TokenPartition {
  int n_visual = 1;
  int n_prompt = 1;
  int n_caption = 1;

  int n_text() const { return n_prompt + n_caption; }
  int total() const { return n_visual + n_prompt + n_caption; }
  void validate() const;
  bool operator==(const TokenPartition&) const = default;
};

struct TraceConfig {
  TokenPartition partition;
  int n_layers = 8;
  double bias_strength = 0.0;   // beta: shallow-layer pull toward the biased subset
  double noise = 0.0;           // eps: log-normal perturbation scale
  double dirichlet_alpha = 0.3; // concentration of the planted importance prior
};

// Synthetic multi-layer attention with a planted per-token importance vector.
// Layers 0 and 1 over-attend to a random subset of low-importance visual
// tokens, scaled by bias_strength; deeper layers track the planted importance
// up to multiplicative noise.
struct AttentionTrace {
  TokenPartition partition;
  int n_layers = 0;
  double bias_strength = 0.0;
  double noise = 0.0;
  double dirichlet_alpha = 0.3;
  std::uint64_t seed = 0;
  std::vector<double> planted_importance;  // length N, sums to 1
  std::vector<int> biased_tokens;          // the shallow-layer favorites
  std::vector<Tensor> layers;              // L row-stochastic (N+M)x(N+M) matrices
};

AttentionTrace generate_trace(const TraceConfig& cfg, std::uint64_t seed);

// Number of shallow layers the generator biases (layers 0..kBiasedLayers-1).
inline constexpr int kBiasedLayers = 2;

// Mean of the last (n_layers - skip) attention matrices; row-stochastic.
Tensor aggregate_attention(const AttentionTrace& trace, int skip);

// Per-token supervision split by attention source. a = a_self+a_prompt+a_text.
struct TargetAttention {
  std::vector<double> a_self;
  std::vector<double> a_prompt;
  std::vector<double> a_text;
  std::vector<double> a;
  int skip_layers = 0;
};

// Column means of the visual / prompt-to-visual / caption-to-visual blocks of
// an aggregated (N+M)x(N+M) matrix. Queries index rows.
TargetAttention extract_target(const Tensor& aggregated, const TokenPartition& partition, int skip);

// Per layer: mean over all query rows of attention mass on visual columns.
std::vector<double> layer_visual_importance(const AttentionTrace& trace);

// Order-sensitive hash of all trace content (for determinism checks).
std::uint64_t trace_hash(const AttentionTrace& trace);

void write_trace(const AttentionTrace& trace, const std::filesystem::path& path);
AttentionTrace read_trace(const std::filesystem::path& path);

}  // namespace tokenprune
