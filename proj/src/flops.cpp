#include "tokenprune/flops.hpp"

#include <cmath>
#include <stdexcept>

namespace tokenprune {

namespace {

void validate_dims(const TransformerDims& d) {
  if (d.n_layers < 1 || d.start_layer < 0 || d.start_layer > d.n_layers || d.n_visual < 1 ||
      d.n_text < 0 || d.d_model < 1 || d.ffn_multiplier < 1) {
    throw std::invalid_argument("flops_relative: invalid transformer dims");
  }
}

double stack_flops(const TransformerDims& dims, const std::vector<int>& retained_visual) {
  const double full = static_cast<double>(dims.n_visual + dims.n_text);
  double total = 0.0;
  for (int l = 0; l < dims.start_layer; ++l) total += layer_flops(full, dims.d_model, dims.ffn_multiplier);
  for (std::size_t k = 0; k < retained_visual.size(); ++k) {
    total += layer_flops(static_cast<double>(retained_visual[k] + dims.n_text), dims.d_model,
                         dims.ffn_multiplier);
  }
  return total;
}

}  // namespace

double layer_flops(double n, int d_model, int ffn_multiplier) {
  const double d = static_cast<double>(d_model);
  return 4.0 * n * d * d + 2.0 * n * n * d + 2.0 * n * d * (ffn_multiplier * d);
}

double flops_relative(const PruneSchedule& schedule, const TransformerDims& dims) {
  validate_dims(dims);
  if (static_cast<int>(schedule.retained.size()) != dims.n_layers - dims.start_layer) {
    throw std::invalid_argument("flops_relative: schedule covers " +
                                std::to_string(schedule.retained.size()) + " layers, dims expect " +
                                std::to_string(dims.n_layers - dims.start_layer));
  }
  std::vector<int> unpruned(schedule.retained.size(), dims.n_visual);
  return stack_flops(dims, schedule.retained) / stack_flops(dims, unpruned);
}

double flops_relative_static(double ratio, const TransformerDims& dims) {
  validate_dims(dims);
  if (ratio < 0.0 || ratio > 1.0) throw std::invalid_argument("flops_relative: ratio must lie in [0,1]");
  const int pruned = static_cast<int>(std::floor(ratio * dims.n_visual));
  std::vector<int> retained(dims.n_layers - dims.start_layer, dims.n_visual - pruned);
  std::vector<int> unpruned(retained.size(), dims.n_visual);
  return stack_flops(dims, retained) / stack_flops(dims, unpruned);
}

}  // namespace tokenprune
