#pragma once

#include "tokenprune/pruner.hpp"

namespace tokenprune {

struct TransformerDims {
  int n_layers = 32;
  int start_layer = 2;   // first layer where pruning applies
  int n_visual = 300;
  int n_text = 50;
  int d_model = 4096;
  int ffn_multiplier = 4;
};

// Conventional dense-transformer per-layer cost for n live tokens:
// 4*n*d^2 (qkv/out projections) + 2*n^2*d (attention) + 2*n*d*(ffn_mult*d).
double layer_flops(double live_tokens, int d_model, int ffn_multiplier);

// Estimated compute of the pruned stack divided by the unpruned stack.
// Layers before start_layer run with all tokens; later layers run with the
// schedule's retained visual tokens plus all text tokens.
double flops_relative(const PruneSchedule& schedule, const TransformerDims& dims);

// Same, with a fixed fraction of visual tokens pruned from start_layer on.
double flops_relative_static(double ratio, const TransformerDims& dims);

}  // namespace tokenprune
