#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokenprune/estimator.hpp"
#include "tokenprune/flops.hpp"
#include "tokenprune/report.hpp"
#include "tokenprune/trace.hpp"

namespace tokenprune {

struct OracleSettings {
  TokenPartition partition{50, 4, 6};
  int n_layers = 8;
  double bias_strength = 0.8;
  double noise = 0.1;
  double dirichlet_alpha = 0.3;

  TraceConfig trace_config() const {
    return TraceConfig{partition, n_layers, bias_strength, noise, dirichlet_alpha};
  }
};

struct PruneSettings {
  std::string mode = "static";  // CLI `prune` subcommand: "static" or "adaptive"
  std::vector<double> ratios{0.35, 0.65, 0.9};
  int start_layer = 2;  // K: trims target aggregation and starts pruning
  bool renormalize = true;
};

struct SweepSettings {
  std::vector<int> k_values{0, 1, 2, 3};
  std::vector<double> lambda_values{0.0, 0.1, 0.2, 0.3};
  std::vector<int> d_lowrank_values{32, 64, 128};
};

struct FlopsSettings {
  int d_model = 4096;  // cost-model dims of the backbone being pruned
  int ffn_multiplier = 4;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  int threads = 0;  // 0 = auto (hardware concurrency, capped)
  OracleSettings oracle;
  int n_scenes = 100;       // training scenes
  int n_eval_scenes = 50;   // held-out scenes
  double feature_noise = 0.1;
  EstimatorConfig estimator;
  PruneSettings pruning;
  SweepSettings sweep;
  FlopsSettings flops;
  std::vector<std::string> metrics{"pruning_accuracy", "spearman", "flops_relative"};
  std::string output_dir = "out";
  std::string checkpoint_path;  // empty: <output_dir>/checkpoint.json

  void validate() const;
  int resolved_threads() const;
  // Estimator config with n_visual/n_text/seed bound to this experiment.
  EstimatorConfig bound_estimator_config() const;
  TransformerDims transformer_dims() const;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  // Applies "a.b=value" overrides; unknown keys are rejected.
  void apply_override(const std::string& key, const std::string& value);
};

// One synthetic scene: a trace reduced to what downstream stages need.
struct Scene {
  std::uint64_t seed = 0;
  std::vector<double> planted;         // ground-truth importance
  std::vector<int> biased_tokens;
  TargetAttention target;              // built with the config's K
  Tensor visual_features;              // N x d_in_visual
  Tensor text_features;                // M x d_in_text
  std::vector<Tensor> text_to_visual;  // per layer K..L-1: M x N blocks (kept on demand)
};

Scene make_scene(const ExperimentConfig& cfg, int scene_index, bool keep_attention);
std::vector<Scene> make_scenes(const ExperimentConfig& cfg, int first_index, int count,
                               bool keep_attention);

TrainSample to_train_sample(const Scene& scene);

// Target quality as a function of how many shallow layers are skipped:
// Spearman between the aggregated target and the planted importance, one row
// per (scene, K).
Report debias_experiment(const ExperimentConfig& cfg, const std::vector<int>& k_values);

struct EndToEndResult {
  Report report;
  ImportanceEstimator model;
  double held_out_spearman_vs_target = 0.0;
};

// Full pipeline: scenes -> targets -> training -> random/static/adaptive
// pruning on held-out scenes at each requested ratio. Adaptive thresholds are
// temperature-calibrated so the mean realized ratio tracks the request.
EndToEndResult end_to_end_experiment(const ExperimentConfig& cfg);

// Re-runs the end-to-end experiment per axis value; one aggregate row per
// setting. Axis is one of "K", "lambda", "d_lowrank".
Report sweep_experiment(const ExperimentConfig& base, const std::string& axis);

}  // namespace tokenprune
