#include "tokenprune/estimator.hpp"

#include <json.hpp>

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <fstream>
#include <functional>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "tokenprune/rng.hpp"
#include "tokenprune/stats.hpp"

namespace tokenprune {

using nlohmann::json;

void EstimatorConfig::validate() const {
  const auto positive = [](int v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string("estimator config: ") + name + " must be >= 1");
  };
  positive(n_visual, "n_visual");
  positive(n_text, "n_text");
  positive(d_in_visual, "d_in_visual");
  positive(d_in_text, "d_in_text");
  positive(d_model, "d_model");
  positive(d_lowrank, "d_lowrank");
  positive(ffn_multiplier, "ffn_multiplier");
  positive(batch_size, "batch_size");
  if (n_layers < 0) throw std::invalid_argument("estimator config: n_layers must be >= 0");
  if (epochs < 0) throw std::invalid_argument("estimator config: epochs must be >= 0");
  if (d_lowrank >= d_model) {
    throw std::invalid_argument("estimator config: d_lowrank (" + std::to_string(d_lowrank) +
                                ") must be strictly less than d_model (" + std::to_string(d_model) + ")");
  }
  if (lambda < 0.0) throw std::invalid_argument("estimator config: lambda must be >= 0");
  if (learning_rate < 0.0) throw std::invalid_argument("estimator config: learning_rate must be >= 0");
  if (weight_decay < 0.0) throw std::invalid_argument("estimator config: weight_decay must be >= 0");
}

namespace {

std::vector<double> softmax_vec(std::span<const double> x) {
  std::vector<double> out(x.size());
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

Tensor init_matrix(Rng& rng, int rows, int cols) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  std::vector<double> w(static_cast<std::size_t>(rows) * cols);
  for (double& v : w) v = rng.uniform(-bound, bound);
  return Tensor::parameter({rows, cols}, std::move(w));
}

Tensor init_bias(int n) { return Tensor::parameter({n}, std::vector<double>(n, 0.0)); }

void check_lengths(std::size_t a, std::size_t b, const char* op) {
  if (a != b) {
    throw std::invalid_argument(std::string(op) + ": length mismatch, " + std::to_string(a) +
                                " vs " + std::to_string(b));
  }
}

}  // namespace

ImportanceScores make_scores(std::vector<double> raw) {
  if (raw.empty()) throw std::invalid_argument("make_scores: empty score vector");
  ImportanceScores s;
  s.normalized = softmax_vec(raw);
  s.raw = std::move(raw);
  return s;
}

ImportanceEstimator::ImportanceEstimator(const EstimatorConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg) {
  cfg_.validate();
  Rng rng(init_seed);
  const int dp = cfg_.d_model;
  visual_projector_ = init_matrix(rng, cfg_.d_in_visual, dp);
  text_projector_ = init_matrix(rng, cfg_.d_in_text, dp);
  layers_.resize(cfg_.n_layers);
  for (LayerParams& p : layers_) {
    p.self_q = init_matrix(rng, dp, dp);
    p.self_k = init_matrix(rng, dp, dp);
    p.self_v = init_matrix(rng, dp, dp);
    p.self_o = init_matrix(rng, dp, dp);
    p.cross_q = init_matrix(rng, dp, dp);
    p.cross_k = init_matrix(rng, dp, dp);
    p.cross_v = init_matrix(rng, dp, dp);
    p.low_q = init_matrix(rng, dp, cfg_.d_lowrank);
    p.low_k = init_matrix(rng, dp, cfg_.d_lowrank);
    const int hidden = dp * cfg_.ffn_multiplier;
    p.ffn_w1 = init_matrix(rng, dp, hidden);
    p.ffn_b1 = init_bias(hidden);
    p.ffn_w2 = init_matrix(rng, hidden, dp);
    p.ffn_b2 = init_bias(dp);
  }
  head_w1_ = init_matrix(rng, dp, cfg_.head_hidden());
  head_b1_ = init_bias(cfg_.head_hidden());
  // No output bias: the losses are invariant to a uniform score shift, so it
  // would be an unidentifiable parameter.
  head_w2_ = init_matrix(rng, cfg_.head_hidden(), 1);
}

Tensor layer_forward(GradTape& t, const LayerParams& p, const Tensor& visual, const Tensor& text,
                     const EstimatorConfig& cfg) {
  const double inv_sqrt_dp = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  const double inv_sqrt_dl = 1.0 / std::sqrt(static_cast<double>(cfg.d_lowrank));

  // Self-attention over the visual stream.
  Tensor sa_in = cfg.use_layer_norm ? t.layer_norm_rows(visual) : visual;
  Tensor q = t.matmul(sa_in, p.self_q);
  Tensor k = t.matmul(sa_in, p.self_k);
  Tensor v = t.matmul(sa_in, p.self_v);
  Tensor attn = t.softmax_rows(t.scale(t.matmul(q, t.transpose(k)), inv_sqrt_dp));
  Tensor sa = t.matmul(t.matmul(attn, v), p.self_o);
  Tensor f_st = cfg.use_residual ? t.add(visual, sa) : sa;

  // Cross-attention: full-rank scaled dot-product logits plus a sigmoid-gated
  // low-rank term, summed before normalization.
  Tensor cross_in = cfg.use_layer_norm ? t.layer_norm_rows(f_st) : f_st;
  Tensor fq = t.matmul(cross_in, p.cross_q);
  Tensor tk = t.matmul(text, p.cross_k);
  Tensor tv = t.matmul(text, p.cross_v);
  Tensor s_high = t.scale(t.matmul(fq, t.transpose(tk)), inv_sqrt_dp);
  Tensor fl = t.matmul(cross_in, p.low_q);
  Tensor tl = t.matmul(text, p.low_k);
  Tensor s_low = t.sigmoid(t.scale(t.matmul(fl, t.transpose(tl)), inv_sqrt_dl));
  Tensor logits = t.add(s_high, s_low);
  Tensor weights = cfg.softmax_attention ? t.softmax_rows(logits) : logits;
  Tensor fused = t.matmul(weights, tv);
  Tensor f_cs = cfg.use_residual ? t.add(f_st, fused) : fused;

  Tensor ffn_in = cfg.use_layer_norm ? t.layer_norm_rows(f_cs) : f_cs;
  Tensor h = t.gelu(t.add_rowwise(t.matmul(ffn_in, p.ffn_w1), p.ffn_b1));
  Tensor ffn = t.add_rowwise(t.matmul(h, p.ffn_w2), p.ffn_b2);
  return cfg.use_residual ? t.add(f_cs, ffn) : ffn;
}

Tensor ImportanceEstimator::forward_graph(GradTape& t, const Tensor& visual, const Tensor& text) const {
  if (visual.rank() != 2 || visual.shape()[0] != cfg_.n_visual || visual.shape()[1] != cfg_.d_in_visual) {
    throw std::invalid_argument("forward: visual features " + shape_str(visual.shape()) +
                                " do not match config [" + std::to_string(cfg_.n_visual) + "x" +
                                std::to_string(cfg_.d_in_visual) + "]");
  }
  if (text.rank() != 2 || text.shape()[0] != cfg_.n_text || text.shape()[1] != cfg_.d_in_text) {
    throw std::invalid_argument("forward: text features " + shape_str(text.shape()) +
                                " do not match config [" + std::to_string(cfg_.n_text) + "x" +
                                std::to_string(cfg_.d_in_text) + "]");
  }
  Tensor f = t.matmul(visual, visual_projector_);
  Tensor tp = t.matmul(text, text_projector_);
  for (const LayerParams& p : layers_) f = layer_forward(t, p, f, tp, cfg_);
  Tensor h = t.gelu(t.add_rowwise(t.matmul(f, head_w1_), head_b1_));
  Tensor raw = t.matmul(h, head_w2_);
  return t.reshape(raw, {cfg_.n_visual});
}

ImportanceScores ImportanceEstimator::forward(const Tensor& visual, const Tensor& text) const {
  GradTape tape;
  Tensor raw = forward_graph(tape, visual, text);
  return make_scores(raw.data());
}

std::vector<Tensor> ImportanceEstimator::parameters() {
  std::vector<Tensor> out{visual_projector_, text_projector_};
  for (LayerParams& p : layers_) {
    for (const Tensor& t : {p.self_q, p.self_k, p.self_v, p.self_o, p.cross_q, p.cross_k, p.cross_v,
                            p.low_q, p.low_k, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2}) {
      out.push_back(t);
    }
  }
  out.push_back(head_w1_);
  out.push_back(head_b1_);
  out.push_back(head_w2_);
  return out;
}

std::vector<Tensor> ImportanceEstimator::parameters() const {
  return const_cast<ImportanceEstimator*>(this)->parameters();
}

std::vector<std::string> ImportanceEstimator::parameter_names() const {
  std::vector<std::string> out{"visual_projector", "text_projector"};
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string prefix = "layers." + std::to_string(i) + ".";
    for (const char* name : {"self_q", "self_k", "self_v", "self_o", "cross_q", "cross_k",
                             "cross_v", "low_q", "low_k", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"}) {
      out.push_back(prefix + name);
    }
  }
  out.push_back("head_w1");
  out.push_back("head_b1");
  out.push_back("head_w2");
  return out;
}

std::int64_t ImportanceEstimator::parameter_count() const {
  std::int64_t n = 0;
  for (const Tensor& p : parameters()) n += p.size();
  return n;
}

ImportanceEstimator ImportanceEstimator::shared_weights_view() const {
  ImportanceEstimator view;
  view.cfg_ = cfg_;
  view.visual_projector_ = visual_projector_.alias();
  view.text_projector_ = text_projector_.alias();
  view.layers_.resize(layers_.size());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerParams& s = layers_[i];
    LayerParams& d = view.layers_[i];
    d.self_q = s.self_q.alias();
    d.self_k = s.self_k.alias();
    d.self_v = s.self_v.alias();
    d.self_o = s.self_o.alias();
    d.cross_q = s.cross_q.alias();
    d.cross_k = s.cross_k.alias();
    d.cross_v = s.cross_v.alias();
    d.low_q = s.low_q.alias();
    d.low_k = s.low_k.alias();
    d.ffn_w1 = s.ffn_w1.alias();
    d.ffn_b1 = s.ffn_b1.alias();
    d.ffn_w2 = s.ffn_w2.alias();
    d.ffn_b2 = s.ffn_b2.alias();
  }
  view.head_w1_ = head_w1_.alias();
  view.head_b1_ = head_b1_.alias();
  view.head_w2_ = head_w2_.alias();
  return view;
}

void ImportanceEstimator::save(const std::filesystem::path& path) const {
  json j;
  j["config"] = {{"n_visual", cfg_.n_visual},
                 {"n_text", cfg_.n_text},
                 {"d_in_visual", cfg_.d_in_visual},
                 {"d_in_text", cfg_.d_in_text},
                 {"d_model", cfg_.d_model},
                 {"d_lowrank", cfg_.d_lowrank},
                 {"n_layers", cfg_.n_layers},
                 {"ffn_multiplier", cfg_.ffn_multiplier},
                 {"lambda", cfg_.lambda},
                 {"learning_rate", cfg_.learning_rate},
                 {"weight_decay", cfg_.weight_decay},
                 {"epochs", cfg_.epochs},
                 {"batch_size", cfg_.batch_size},
                 {"seed", cfg_.seed},
                 {"use_residual", cfg_.use_residual},
                 {"use_layer_norm", cfg_.use_layer_norm},
                 {"softmax_attention", cfg_.softmax_attention}};
  json params = json::object();
  const auto names = parameter_names();
  const auto tensors = parameters();
  for (std::size_t i = 0; i < names.size(); ++i) {
    params[names[i]] = {{"shape", tensors[i].shape()}, {"data", tensors[i].data()}};
  }
  j["parameters"] = std::move(params);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("checkpoint save: cannot open " + path.string());
  out << j.dump();
  if (!out) throw std::runtime_error("checkpoint save: write failed for " + path.string());
}

ImportanceEstimator ImportanceEstimator::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("checkpoint load: cannot open " + path.string());
  json j = json::parse(in);
  const json& c = j.at("config");
  EstimatorConfig cfg;
  cfg.n_visual = c.at("n_visual").get<int>();
  cfg.n_text = c.at("n_text").get<int>();
  cfg.d_in_visual = c.at("d_in_visual").get<int>();
  cfg.d_in_text = c.at("d_in_text").get<int>();
  cfg.d_model = c.at("d_model").get<int>();
  cfg.d_lowrank = c.at("d_lowrank").get<int>();
  cfg.n_layers = c.at("n_layers").get<int>();
  cfg.ffn_multiplier = c.at("ffn_multiplier").get<int>();
  cfg.lambda = c.at("lambda").get<double>();
  cfg.learning_rate = c.at("learning_rate").get<double>();
  cfg.weight_decay = c.at("weight_decay").get<double>();
  cfg.epochs = c.at("epochs").get<int>();
  cfg.batch_size = c.at("batch_size").get<int>();
  cfg.seed = c.at("seed").get<std::uint64_t>();
  cfg.use_residual = c.at("use_residual").get<bool>();
  cfg.use_layer_norm = c.at("use_layer_norm").get<bool>();
  cfg.softmax_attention = c.at("softmax_attention").get<bool>();

  ImportanceEstimator model(cfg, 0);
  const auto names = model.parameter_names();
  auto tensors = model.parameters();
  const json& params = j.at("parameters");
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (!params.contains(names[i])) {
      throw std::runtime_error("checkpoint load: missing parameter '" + names[i] + "' in " + path.string());
    }
    const json& entry = params.at(names[i]);
    const auto shape = entry.at("shape").get<Shape>();
    if (shape != tensors[i].shape()) {
      throw std::runtime_error("checkpoint load: parameter '" + names[i] + "' has shape " +
                               shape_str(shape) + ", config requires " + shape_str(tensors[i].shape()));
    }
    auto data = entry.at("data").get<std::vector<double>>();
    if (data.size() != tensors[i].data().size()) {
      throw std::runtime_error("checkpoint load: parameter '" + names[i] + "' has wrong length");
    }
    tensors[i].data() = std::move(data);
  }
  return model;
}

double rank_loss(std::span<const double> target, std::span<const double> pred) {
  check_lengths(target.size(), pred.size(), "rank_loss");
  if (target.size() < 2) throw std::invalid_argument("rank_loss: need at least 2 scores");
  const std::size_t n = target.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (target[i] > target[j]) {
        const double margin = pred[j] - pred[i];
        if (margin > 0.0) loss += margin;
      }
    }
  }
  return loss;
}

Tensor rank_loss_graph(GradTape& tape, std::span<const double> target, const Tensor& pred_raw) {
  if (pred_raw.rank() != 1) throw std::invalid_argument("rank_loss: predictions must be a vector");
  check_lengths(target.size(), pred_raw.data().size(), "rank_loss");
  const double loss = rank_loss(target, pred_raw.data());
  std::vector<double> a(target.begin(), target.end());
  return tape.custom(
      {pred_raw}, {1}, {loss},
      [a = std::move(a)](const detail::TensorNode& out, std::span<detail::TensorNode* const> in) {
        if (!in[0]->requires_grad) return;
        const double g = out.grad[0];
        const std::vector<double>& pred = *in[0]->data;
        std::vector<double>& dpred = in[0]->grad;
        const std::size_t n = a.size();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            if (a[i] > a[j] && pred[j] - pred[i] > 0.0) {
              dpred[j] += g;
              dpred[i] -= g;
            }
          }
        }
      });
}

double kl_softmax(std::span<const double> target, std::span<const double> pred_raw) {
  check_lengths(target.size(), pred_raw.size(), "kl_softmax");
  const std::vector<double> p = softmax_vec(target);
  const std::vector<double> q = softmax_vec(pred_raw);
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  return kl;
}

Tensor kl_softmax_graph(GradTape& tape, std::span<const double> target, const Tensor& pred_raw) {
  if (pred_raw.rank() != 1) throw std::invalid_argument("kl_softmax: predictions must be a vector");
  check_lengths(target.size(), pred_raw.data().size(), "kl_softmax");
  const int n = static_cast<int>(target.size());
  const std::vector<double> p = softmax_vec(target);
  double entropy_term = 0.0;  // sum p ln p
  for (double v : p) entropy_term += v * std::log(v);
  Tensor log_q = tape.log_softmax_rows(pred_raw);
  Tensor cross = tape.sum(tape.mul(Tensor::constant({n}, p), log_q));
  return tape.add_scalar(tape.scale(cross, -1.0), entropy_term);
}

double total_loss(const TargetAttention& target, const ImportanceScores& pred, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be >= 0");
  check_lengths(target.a.size(), pred.raw.size(), "total_loss");
  return kl_softmax(target.a, pred.raw) + lambda * rank_loss(target.a, pred.raw);
}

Tensor total_loss_graph(GradTape& tape, std::span<const double> target, const Tensor& pred_raw,
                        double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be >= 0");
  Tensor kl = kl_softmax_graph(tape, target, pred_raw);
  Tensor rank = rank_loss_graph(tape, target, pred_raw);
  return tape.add(kl, tape.scale(rank, lambda));
}

namespace {

// Decoupled weight decay with bias-corrected first/second moments. The cosine
// schedule multiplies both the adaptive step and the decay, so a zero
// learning rate still decays weights.
class AdamW {
 public:
  AdamW(std::vector<Tensor>& params, double lr, double weight_decay, int total_steps)
      : params_(params), lr_(lr), wd_(weight_decay), total_steps_(std::max(1, total_steps)) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].data().size(), 0.0);
      v_[i].assign(params[i].data().size(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double schedule =
        0.5 * (1.0 + std::cos(M_PI * static_cast<double>(t_ - 1) / static_cast<double>(total_steps_)));
    const double bc1 = 1.0 - std::pow(kBeta1, t_);
    const double bc2 = 1.0 - std::pow(kBeta2, t_);
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      std::vector<double>& w = params_[pi].data();
      const std::vector<double>& g = params_[pi].grad();
      std::vector<double>& m = m_[pi];
      std::vector<double>& v = v_[pi];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
        v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= schedule * (lr_ * mhat / (std::sqrt(vhat) + kEps) + wd_ * w[i]);
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  std::vector<Tensor>& params_;
  double lr_, wd_;
  int total_steps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Long-lived workers; one task per shard per step. Spawning threads per batch
// costs more than the shards themselves at desk scale.
class WorkerPool {
 public:
  explicit WorkerPool(int workers) {
    for (int i = 1; i < workers; ++i) {
      threads_.emplace_back([this]() {
        for (;;) {
          std::function<void()> task;
          {
            std::unique_lock lock(mu_);
            cv_.wait(lock, [this]() { return stop_ || !tasks_.empty(); });
            if (stop_ && tasks_.empty()) return;
            task = std::move(tasks_.back());
            tasks_.pop_back();
          }
          task();
          if (--pending_ == 0) {
            std::lock_guard lock(mu_);  // pairs with the predicate check in run()
            done_.notify_all();
          }
        }
      });
    }
  }

  ~WorkerPool() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (std::thread& t : threads_) t.join();
  }

  // Runs tasks [0, count); task 0 executes on the calling thread.
  void run(int count, const std::function<void(int)>& fn) {
    if (count <= 1 || threads_.empty()) {
      for (int i = 0; i < count; ++i) fn(i);
      return;
    }
    pending_ = count - 1;
    {
      std::lock_guard lock(mu_);
      for (int i = 1; i < count; ++i) tasks_.push_back([fn, i]() { fn(i); });
    }
    cv_.notify_all();
    fn(0);
    std::unique_lock lock(mu_);
    done_.wait(lock, [this]() { return pending_ == 0; });
  }

 private:
  std::vector<std::thread> threads_;
  std::vector<std::function<void()>> tasks_;
  std::mutex mu_;
  std::condition_variable cv_, done_;
  std::atomic<int> pending_{0};
  bool stop_ = false;
};

void tune_allocator_for_tapes() {
#if defined(__GLIBC__)
  // Tapes allocate and free tens of megabytes per step; without these the
  // heap trims after every batch and the next one page-faults it back.
  static const bool done = []() {
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    mallopt(M_MMAP_THRESHOLD, 512 << 20);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace

TrainResult train(ImportanceEstimator& model, std::span<const TrainSample> data, int threads) {
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  tune_allocator_for_tapes();
  const EstimatorConfig& cfg = model.config();
  const int n = static_cast<int>(data.size());
  const int batch = std::min(cfg.batch_size, n);
  const int steps_per_epoch = (n + batch - 1) / batch;
  const int total_steps = cfg.epochs * steps_per_epoch;
  const int workers = std::max(1, threads);

  std::vector<Tensor> params = model.parameters();
  AdamW opt(params, cfg.learning_rate, cfg.weight_decay, total_steps);
  Rng shuffle_rng(derive_seed(cfg.seed, "train-shuffle"));
  WorkerPool pool(workers);

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  result.epoch_loss.reserve(cfg.epochs);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss_sum = 0.0;
    for (int start = 0; start < n; start += batch) {
      const int count = std::min(batch, n - start);
      const int shard_count = std::min(workers, count);
      const int per_shard = (count + shard_count - 1) / shard_count;

      std::vector<ImportanceEstimator> views;
      views.reserve(shard_count);
      for (int s = 0; s < shard_count; ++s) views.push_back(model.shared_weights_view());
      std::vector<double> shard_loss(shard_count, 0.0);
      std::vector<std::string> shard_error(shard_count);

      auto run_shard = [&](int s) {
        try {
          const int lo = start + s * per_shard;
          const int hi = std::min(start + count, lo + per_shard);
          if (lo >= hi) return;
          GradTape tape;
          Tensor acc;
          for (int idx = lo; idx < hi; ++idx) {
            const TrainSample& sample = data[order[idx]];
            Tensor raw = views[s].forward_graph(tape, sample.visual_features, sample.text_features);
            Tensor loss = total_loss_graph(tape, sample.target, raw, cfg.lambda);
            acc = acc.defined() ? tape.add(acc, loss) : loss;
          }
          shard_loss[s] = acc.value();
          tape.backward(acc);
        } catch (const std::exception& e) {
          shard_error[s] = e.what();
        }
      };

      pool.run(shard_count, run_shard);
      for (int s = 0; s < shard_count; ++s) {
        if (!shard_error[s].empty()) throw std::runtime_error("train: " + shard_error[s]);
      }

      double batch_loss = 0.0;
      for (double v : shard_loss) batch_loss += v;
      batch_loss /= count;
      if (!std::isfinite(batch_loss)) {
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                 ", batch offset " + std::to_string(start) + " (seed " +
                                 std::to_string(cfg.seed) + ")");
      }
      epoch_loss_sum += batch_loss * count;

      // Deterministic reduction: shard views in index order, scaled to the
      // batch mean.
      for (Tensor& p : params) p.zero_grad();
      for (int s = 0; s < shard_count; ++s) {
        std::vector<Tensor> shard_params = views[s].parameters();
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
          const std::vector<double>& g = shard_params[pi].grad();
          std::vector<double>& dst = params[pi].grad();
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
      }
      const double inv = 1.0 / count;
      for (Tensor& p : params)
        for (double& g : p.grad()) g *= inv;

      opt.step();
    }
    result.epoch_loss.push_back(epoch_loss_sum / n);
  }
  return result;
}

EvalResult evaluate(const ImportanceEstimator& model, std::span<const TrainSample> data) {
  if (data.empty()) throw std::invalid_argument("evaluate: dataset is empty");
  EvalResult result;
  result.per_sample.reserve(data.size());
  for (const TrainSample& sample : data) {
    if (sample.target.size() < 2) throw std::invalid_argument("evaluate: need at least 2 tokens");
    const ImportanceScores scores = model.forward(sample.visual_features, sample.text_features);
    result.per_sample.push_back(spearman(scores.raw, sample.target));
  }
  result.mean_spearman = mean(result.per_sample);
  return result;
}

}  // namespace tokenprune
