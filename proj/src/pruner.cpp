#include "tokenprune/pruner.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace tokenprune {

using nlohmann::json;

int PruneMask::pruned_count() const {
  int c = 0;
  for (std::uint8_t b : bits) c += b;
  return c;
}

PruneMask static_prune_topk(const ImportanceScores& scores, double ratio) {
  if (ratio < 0.0 || ratio > 1.0) throw std::invalid_argument("static_prune_topk: ratio must lie in [0,1]");
  const int n = static_cast<int>(scores.raw.size());
  const int prune = static_cast<int>(std::floor(ratio * n));
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores.raw[a] != scores.raw[b]) return scores.raw[a] < scores.raw[b];
    return a < b;
  });
  PruneMask mask;
  mask.bits.assign(n, 0);
  for (int i = 0; i < prune; ++i) mask.bits[order[i]] = 1;
  return mask;
}

AdaptiveStep adaptive_step(std::span<const double> layer_attention, const PruneMask& prev_mask,
                           std::span<const double> prev_cumulative, std::span<const double> target,
                           int horizon) {
  const std::size_t n = target.size();
  if (layer_attention.size() != n || prev_cumulative.size() != n ||
      prev_mask.bits.size() != n) {
    throw std::invalid_argument("adaptive_step: length mismatch between attention, mask, cumulative and target");
  }
  if (horizon < 1) throw std::invalid_argument("adaptive_step: horizon must be >= 1");
  for (std::size_t i = 0; i < n; ++i) {
    if (target[i] < 0.0) throw std::invalid_argument("adaptive_step: target scores must be nonnegative");
    if (layer_attention[i] < 0.0) throw std::invalid_argument("adaptive_step: attention must be nonnegative");
  }

  AdaptiveStep step;
  double shadow = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (prev_mask.bits[i]) shadow += target[i];
  }
  step.shadow = shadow;

  step.cumulative.resize(n);
  step.mask.bits.resize(n);
  step.mask.layer = prev_mask.layer + 1;
  const double damp = 1.0 - shadow;
  for (std::size_t i = 0; i < n; ++i) {
    const double adjusted = layer_attention[i] * damp;
    step.cumulative[i] = prev_cumulative[i] + adjusted / horizon;
    step.mask.bits[i] = (step.cumulative[i] >= target[i]) ? 1 : prev_mask.bits[i];
  }
  return step;
}

PruneSchedule adaptive_run(std::span<const Tensor> text_to_visual, const ImportanceScores& target,
                           int start_layer, int total_layers, bool renormalize) {
  const int n = static_cast<int>(target.normalized.size());
  const int horizon = total_layers - start_layer;
  if (horizon < 1 || start_layer < 0) {
    throw std::invalid_argument("adaptive_run: need 0 <= start_layer < total_layers");
  }
  if (static_cast<int>(text_to_visual.size()) != horizon) {
    throw std::invalid_argument("adaptive_run: expected " + std::to_string(horizon) +
                                " attention layers, got " + std::to_string(text_to_visual.size()));
  }

  PruneSchedule schedule;
  schedule.start_layer = start_layer;
  schedule.total_layers = total_layers;
  schedule.target = target.normalized;

  PruneMask mask;
  mask.bits.assign(n, 0);
  mask.layer = start_layer - 1;
  std::vector<double> cumulative(n, 0.0);
  std::vector<double> attention(n);

  for (int k = 0; k < horizon; ++k) {
    const Tensor& block = text_to_visual[k];
    if (block.rank() != 2 || block.shape()[1] != n) {
      throw std::invalid_argument("adaptive_run: layer " + std::to_string(k) + " block shape " +
                                  shape_str(block.shape()) + " does not match " +
                                  std::to_string(n) + " visual tokens");
    }
    const int rows = block.shape()[0];
    std::fill(attention.begin(), attention.end(), 0.0);
    for (int r = 0; r < rows; ++r) {
      const double* row = block.data().data() + static_cast<std::size_t>(r) * n;
      double scale = 1.0;
      if (renormalize) {
        // A masked softmax spreads the pruned columns' mass over everything
        // the row still attends to, visual or text.
        double masked = 0.0;
        for (int i = 0; i < n; ++i) {
          if (mask.bits[i]) masked += row[i];
        }
        const double denom = 1.0 - masked;
        scale = denom > 1e-12 ? 1.0 / denom : 0.0;
      }
      for (int i = 0; i < n; ++i) {
        if (!mask.bits[i]) attention[i] += row[i] * scale;
      }
    }
    const double inv_rows = 1.0 / rows;
    for (double& v : attention) v *= inv_rows;

    AdaptiveStep step = adaptive_step(attention, mask, cumulative, target.normalized, horizon);
    step.mask.layer = start_layer + k;
    mask = step.mask;
    cumulative = step.cumulative;
    schedule.masks.push_back(mask);
    schedule.cumulative.push_back(cumulative);
    schedule.shadow.push_back(step.shadow);
    schedule.retained.push_back(n - mask.pruned_count());
  }
  return schedule;
}

const PruneMask& PruneSchedule::final_mask() const {
  if (masks.empty()) throw std::logic_error("prune schedule has no layers");
  return masks.back();
}

double realized_pruning_ratio(const PruneSchedule& schedule) {
  if (schedule.masks.empty()) throw std::invalid_argument("realized_pruning_ratio: empty schedule");
  const double n = static_cast<double>(schedule.masks.front().size());
  double acc = 0.0;
  for (const PruneMask& m : schedule.masks) acc += m.pruned_count() / n;
  return acc / static_cast<double>(schedule.masks.size());
}

void write_schedule(const PruneSchedule& schedule, const std::filesystem::path& path) {
  json j;
  j["start_layer"] = schedule.start_layer;
  j["total_layers"] = schedule.total_layers;
  j["target"] = schedule.target;
  json layers = json::array();
  for (std::size_t k = 0; k < schedule.masks.size(); ++k) {
    layers.push_back({{"layer", schedule.masks[k].layer},
                      {"mask", schedule.masks[k].bits},
                      {"cumulative", schedule.cumulative[k]},
                      {"shadow", schedule.shadow[k]},
                      {"retained", schedule.retained[k]}});
  }
  j["layers"] = std::move(layers);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_schedule: cannot open " + path.string());
  out << j.dump();
  if (!out) throw std::runtime_error("write_schedule: write failed for " + path.string());
}

PruneSchedule read_schedule(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_schedule: cannot open " + path.string());
  json j = json::parse(in);
  PruneSchedule s;
  s.start_layer = j.at("start_layer").get<int>();
  s.total_layers = j.at("total_layers").get<int>();
  s.target = j.at("target").get<std::vector<double>>();
  for (const json& layer : j.at("layers")) {
    PruneMask m;
    m.layer = layer.at("layer").get<int>();
    m.bits = layer.at("mask").get<std::vector<std::uint8_t>>();
    s.masks.push_back(std::move(m));
    s.cumulative.push_back(layer.at("cumulative").get<std::vector<double>>());
    s.shadow.push_back(layer.at("shadow").get<double>());
    s.retained.push_back(layer.at("retained").get<int>());
  }
  return s;
}

}  // namespace tokenprune
