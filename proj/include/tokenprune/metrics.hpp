#pragma once

#include <span>

#include "tokenprune/pruner.hpp"

namespace tokenprune {

// Mask pruning the `count` lowest-importance tokens; ties prune the lower
// index first (same rule as static_prune_topk).
PruneMask lowest_importance_mask(std::span<const double> importance, int count);

// Fraction of predicted-pruned tokens that an oracle pruning the same number
// of lowest-importance tokens would also prune. Empty predictions score 1.
double pruning_accuracy(const PruneMask& predicted, std::span<const double> oracle_importance);

}  // namespace tokenprune
