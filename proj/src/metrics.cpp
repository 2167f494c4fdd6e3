#include "tokenprune/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace tokenprune {

PruneMask lowest_importance_mask(std::span<const double> importance, int count) {
  const int n = static_cast<int>(importance.size());
  if (count < 0 || count > n) throw std::invalid_argument("lowest_importance_mask: bad count");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (importance[a] != importance[b]) return importance[a] < importance[b];
    return a < b;
  });
  PruneMask mask;
  mask.bits.assign(n, 0);
  for (int i = 0; i < count; ++i) mask.bits[order[i]] = 1;
  return mask;
}

double pruning_accuracy(const PruneMask& predicted, std::span<const double> oracle_importance) {
  if (predicted.bits.size() != oracle_importance.size()) {
    throw std::invalid_argument("pruning_accuracy: mask and importance lengths differ");
  }
  const int pruned = predicted.pruned_count();
  if (pruned == 0) return 1.0;  // vacuous
  const PruneMask oracle = lowest_importance_mask(oracle_importance, pruned);
  int overlap = 0;
  for (std::size_t i = 0; i < predicted.bits.size(); ++i) {
    if (predicted.bits[i] && oracle.bits[i]) ++overlap;
  }
  return static_cast<double>(overlap) / static_cast<double>(pruned);
}

}  // namespace tokenprune
