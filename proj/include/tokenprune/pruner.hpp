#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "tokenprune/estimator.hpp"
#include "tokenprune/tensor.hpp"

namespace tokenprune {

// bit = 1 means the token is pruned at or before `layer`.
struct PruneMask {
  std::vector<std::uint8_t> bits;
  int layer = -1;

  int pruned_count() const;
  int size() const { return static_cast<int>(bits.size()); }
};

// Prunes the floor(ratio*N) tokens with the lowest raw scores; ties prune the
// lower index first.
PruneMask static_prune_topk(const ImportanceScores& scores, double ratio);

struct AdaptiveStep {
  PruneMask mask;
  std::vector<double> cumulative;
  double shadow = 0.0;
};

// One layer of adaptive rebalancing. The shadow factor (summed thresholds of
// already-pruned tokens) damps this layer's attention before it accumulates;
// a token is pruned once its cumulative attention reaches its threshold.
// Masks only grow: prev_mask is folded in.
AdaptiveStep adaptive_step(std::span<const double> layer_attention, const PruneMask& prev_mask,
                           std::span<const double> prev_cumulative, std::span<const double> target,
                           int horizon);

struct PruneSchedule {
  int start_layer = 0;
  int total_layers = 0;
  std::vector<double> target;                    // normalized thresholds
  std::vector<PruneMask> masks;                  // k = start_layer..total_layers-1
  std::vector<std::vector<double>> cumulative;   // C_k per layer
  std::vector<double> shadow;                    // s_k per layer
  std::vector<int> retained;                     // live visual tokens per layer

  const PruneMask& final_mask() const;
};

// Folds adaptive_step over layers start_layer..total_layers-1. Each layer's
// per-token attention is the mean over text query rows of the text-to-visual
// block, with already-pruned columns masked out; with `renormalize` each text
// row redistributes the masked mass over what it can still see (the behavior
// of a masked softmax).
PruneSchedule adaptive_run(std::span<const Tensor> text_to_visual, const ImportanceScores& target,
                           int start_layer, int total_layers, bool renormalize = true);

// Mean over schedule layers of (pruned count / N).
double realized_pruning_ratio(const PruneSchedule& schedule);

void write_schedule(const PruneSchedule& schedule, const std::filesystem::path& path);
PruneSchedule read_schedule(const std::filesystem::path& path);

}  // namespace tokenprune
