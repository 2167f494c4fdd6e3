#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tokenprune/tensor.hpp"
#include "tokenprune/trace.hpp"

namespace tokenprune {

struct EstimatorConfig {
  int n_visual = 50;
  int n_text = 10;
  int d_in_visual = 32;
  int d_in_text = 24;
  int d_model = 256;
  int d_lowrank = 64;
  int n_layers = 2;  // stacked hybrid cross-attention layers
  int ffn_multiplier = 4;
  double lambda = 0.2;  // weight of the pairwise ranking term
  double learning_rate = 8e-4;
  double weight_decay = 1e-4;
  int epochs = 80;
  int batch_size = 64;
  std::uint64_t seed = 0;
  bool use_residual = true;
  bool use_layer_norm = false;
  bool softmax_attention = true;  // row-softmax the summed attention logits

  int head_hidden() const { return std::max(1, d_model / 2); }
  void validate() const;
};

// One estimator block: visual self-attention, dual-path cross-attention
// (scaled dot-product logits plus a sigmoid-gated low-rank term), and an FFN.
struct LayerParams {
  Tensor self_q, self_k, self_v, self_o;  // d_model x d_model
  Tensor cross_q, cross_k, cross_v;       // d_model x d_model
  Tensor low_q, low_k;                    // d_model x d_lowrank
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct ImportanceScores {
  std::vector<double> raw;         // per-token score
  std::vector<double> normalized;  // softmax(raw)
};

ImportanceScores make_scores(std::vector<double> raw);

// Forward pass of one layer; `visual` is N x d_model, `text` is M x d_model.
Tensor layer_forward(GradTape& tape, const LayerParams& layer, const Tensor& visual,
                     const Tensor& text, const EstimatorConfig& cfg);

// Learns per-visual-token importance from projected visual/text features.
class ImportanceEstimator {
 public:
  ImportanceEstimator(const EstimatorConfig& cfg, std::uint64_t init_seed);

  const EstimatorConfig& config() const { return cfg_; }

  // Raw scores as an N-vector tensor on the tape (differentiable).
  Tensor forward_graph(GradTape& tape, const Tensor& visual, const Tensor& text) const;
  ImportanceScores forward(const Tensor& visual, const Tensor& text) const;

  std::vector<Tensor> parameters();
  std::vector<Tensor> parameters() const;
  std::vector<std::string> parameter_names() const;
  std::int64_t parameter_count() const;

  // Weights shared, gradient buffers private; for worker-thread tapes.
  ImportanceEstimator shared_weights_view() const;

  void save(const std::filesystem::path& path) const;
  static ImportanceEstimator load(const std::filesystem::path& path);

 private:
  ImportanceEstimator() = default;
  EstimatorConfig cfg_;
  Tensor visual_projector_, text_projector_;
  std::vector<LayerParams> layers_;
  Tensor head_w1_, head_b1_, head_w2_;
};

// Pairwise hinge ranking loss: sum over ordered pairs with target[i] >
// target[j] of max(0, pred[j] - pred[i]). Ties in the target contribute
// nothing; the hinge subgradient at zero is zero.
double rank_loss(std::span<const double> target, std::span<const double> pred);
Tensor rank_loss_graph(GradTape& tape, std::span<const double> target, const Tensor& pred_raw);

// KL(softmax(target) || softmax(pred_raw)).
double kl_softmax(std::span<const double> target, std::span<const double> pred_raw);
Tensor kl_softmax_graph(GradTape& tape, std::span<const double> target, const Tensor& pred_raw);

double total_loss(const TargetAttention& target, const ImportanceScores& pred, double lambda);
Tensor total_loss_graph(GradTape& tape, std::span<const double> target, const Tensor& pred_raw,
                        double lambda);

struct TrainSample {
  Tensor visual_features;       // N x d_in_visual
  Tensor text_features;         // M x d_in_text
  std::vector<double> target;   // length N
};

struct TrainResult {
  std::vector<double> epoch_loss;  // mean sample loss per epoch
};

// Minibatch AdamW (decoupled weight decay, bias-corrected moments) with a
// cosine schedule from the initial rate to zero over all steps. Deterministic
// for fixed (data, config, threads). Aborts on non-finite loss.
TrainResult train(ImportanceEstimator& model, std::span<const TrainSample> data, int threads = 1);

struct EvalResult {
  double mean_spearman = 0.0;
  std::vector<double> per_sample;
};

// Spearman rank correlation between predicted raw scores and targets.
EvalResult evaluate(const ImportanceEstimator& model, std::span<const TrainSample> data);

}  // namespace tokenprune
