#include "tokenprune/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "tokenprune/metrics.hpp"
#include "tokenprune/rng.hpp"
#include "tokenprune/stats.hpp"

namespace tokenprune {

using nlohmann::json;

namespace {

const std::vector<std::string> kKnownMetrics{"pruning_accuracy", "spearman", "flops_relative"};

std::vector<double> unit_normal_vec(Rng& rng, int n) {
  std::vector<double> v(n);
  double norm = 0.0;
  for (double& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  if (norm > 0.0) {
    for (double& x : v) x /= norm;
  }
  return v;
}

struct FeatureDictionary {
  std::vector<double> u_importance;  // visual channel carrying the importance signal
  std::vector<double> u_bias;       // visual channel marking biased tokens
  std::vector<double> v_prompt;
  std::vector<double> v_caption;
  std::vector<std::vector<double>> token_tags;  // per-index text-side tags
};

// Shared across scenes so the feature -> importance relationship is learnable.
FeatureDictionary make_dictionary(const ExperimentConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "feature-dictionary"));
  FeatureDictionary d;
  d.u_importance = unit_normal_vec(rng, cfg.estimator.d_in_visual);
  d.u_bias = unit_normal_vec(rng, cfg.estimator.d_in_visual);
  d.v_prompt = unit_normal_vec(rng, cfg.estimator.d_in_text);
  d.v_caption = unit_normal_vec(rng, cfg.estimator.d_in_text);
  d.token_tags.resize(cfg.oracle.partition.n_visual);
  for (auto& tag : d.token_tags) tag = unit_normal_vec(rng, cfg.estimator.d_in_text);
  return d;
}

}  // namespace

void ExperimentConfig::validate() const {
  oracle.partition.validate();
  if (oracle.n_layers < 3) throw std::invalid_argument("experiment config: oracle.n_layers must be >= 3");
  if (oracle.bias_strength < 0.0 || oracle.bias_strength > 1.0) {
    throw std::invalid_argument("experiment config: oracle.bias_strength must lie in [0,1]");
  }
  if (oracle.noise < 0.0) throw std::invalid_argument("experiment config: oracle.noise must be >= 0");
  if (oracle.dirichlet_alpha <= 0.0) {
    throw std::invalid_argument("experiment config: oracle.dirichlet_alpha must be positive");
  }
  if (n_scenes < 1) throw std::invalid_argument("experiment config: n_scenes must be >= 1");
  if (n_eval_scenes < 1) throw std::invalid_argument("experiment config: n_eval_scenes must be >= 1");
  if (feature_noise < 0.0) throw std::invalid_argument("experiment config: feature_noise must be >= 0");
  if (threads < 0) throw std::invalid_argument("experiment config: threads must be >= 0");
  for (double r : pruning.ratios) {
    if (r < 0.0 || r > 1.0) throw std::invalid_argument("experiment config: pruning ratios must lie in [0,1]");
  }
  if (pruning.ratios.empty()) throw std::invalid_argument("experiment config: pruning.ratios is empty");
  if (pruning.start_layer < 0 || pruning.start_layer >= oracle.n_layers) {
    throw std::invalid_argument("experiment config: pruning.start_layer must lie in [0, oracle.n_layers)");
  }
  if (pruning.mode != "static" && pruning.mode != "adaptive") {
    throw std::invalid_argument("experiment config: pruning.mode must be 'static' or 'adaptive'");
  }
  for (const std::string& m : metrics) {
    if (std::find(kKnownMetrics.begin(), kKnownMetrics.end(), m) == kKnownMetrics.end()) {
      throw std::invalid_argument("experiment config: unknown metric '" + m + "'");
    }
  }
  bound_estimator_config().validate();
}

int ExperimentConfig::resolved_threads() const {
  if (threads > 0) return threads;
  const unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::clamp(hw, 1u, 8u));
}

EstimatorConfig ExperimentConfig::bound_estimator_config() const {
  EstimatorConfig e = estimator;
  e.n_visual = oracle.partition.n_visual;
  e.n_text = oracle.partition.n_text();
  e.seed = derive_seed(seed, "estimator");
  return e;
}

TransformerDims ExperimentConfig::transformer_dims() const {
  TransformerDims d;
  d.n_layers = oracle.n_layers;
  d.start_layer = pruning.start_layer;
  d.n_visual = oracle.partition.n_visual;
  d.n_text = oracle.partition.n_text();
  d.d_model = flops.d_model;
  d.ffn_multiplier = flops.ffn_multiplier;
  return d;
}

json ExperimentConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["threads"] = threads;
  j["oracle"] = {{"n_visual", oracle.partition.n_visual},
                 {"n_prompt", oracle.partition.n_prompt},
                 {"n_caption", oracle.partition.n_caption},
                 {"n_layers", oracle.n_layers},
                 {"bias_strength", oracle.bias_strength},
                 {"noise", oracle.noise},
                 {"dirichlet_alpha", oracle.dirichlet_alpha}};
  j["n_scenes"] = n_scenes;
  j["n_eval_scenes"] = n_eval_scenes;
  j["feature_noise"] = feature_noise;
  j["estimator"] = {{"d_in_visual", estimator.d_in_visual},
                    {"d_in_text", estimator.d_in_text},
                    {"d_model", estimator.d_model},
                    {"d_lowrank", estimator.d_lowrank},
                    {"n_layers", estimator.n_layers},
                    {"ffn_multiplier", estimator.ffn_multiplier},
                    {"lambda", estimator.lambda},
                    {"learning_rate", estimator.learning_rate},
                    {"weight_decay", estimator.weight_decay},
                    {"epochs", estimator.epochs},
                    {"batch_size", estimator.batch_size},
                    {"use_residual", estimator.use_residual},
                    {"use_layer_norm", estimator.use_layer_norm},
                    {"softmax_attention", estimator.softmax_attention}};
  j["pruning"] = {{"mode", pruning.mode},
                  {"ratios", pruning.ratios},
                  {"start_layer", pruning.start_layer},
                  {"renormalize", pruning.renormalize}};
  j["sweep"] = {{"k_values", sweep.k_values},
                {"lambda_values", sweep.lambda_values},
                {"d_lowrank_values", sweep.d_lowrank_values}};
  j["flops"] = {{"d_model", flops.d_model}, {"ffn_multiplier", flops.ffn_multiplier}};
  j["metrics"] = metrics;
  j["output_dir"] = output_dir;
  j["checkpoint_path"] = checkpoint_path;
  return j;
}

namespace {

void reject_unknown_keys(const json& j, const json& reference, const std::string& prefix) {
  for (const auto& [key, value] : j.items()) {
    if (!reference.contains(key)) {
      throw std::invalid_argument("config: unknown key '" + prefix + key + "'");
    }
    if (value.is_object() && reference.at(key).is_object()) {
      reject_unknown_keys(value, reference.at(key), prefix + key + ".");
    }
  }
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig cfg;
  reject_unknown_keys(j, cfg.to_json(), "");
  read_if(j, "seed", cfg.seed);
  read_if(j, "threads", cfg.threads);
  if (j.contains("oracle")) {
    const json& o = j.at("oracle");
    read_if(o, "n_visual", cfg.oracle.partition.n_visual);
    read_if(o, "n_prompt", cfg.oracle.partition.n_prompt);
    read_if(o, "n_caption", cfg.oracle.partition.n_caption);
    read_if(o, "n_layers", cfg.oracle.n_layers);
    read_if(o, "bias_strength", cfg.oracle.bias_strength);
    read_if(o, "noise", cfg.oracle.noise);
    read_if(o, "dirichlet_alpha", cfg.oracle.dirichlet_alpha);
  }
  read_if(j, "n_scenes", cfg.n_scenes);
  read_if(j, "n_eval_scenes", cfg.n_eval_scenes);
  read_if(j, "feature_noise", cfg.feature_noise);
  if (j.contains("estimator")) {
    const json& e = j.at("estimator");
    read_if(e, "d_in_visual", cfg.estimator.d_in_visual);
    read_if(e, "d_in_text", cfg.estimator.d_in_text);
    read_if(e, "d_model", cfg.estimator.d_model);
    read_if(e, "d_lowrank", cfg.estimator.d_lowrank);
    read_if(e, "n_layers", cfg.estimator.n_layers);
    read_if(e, "ffn_multiplier", cfg.estimator.ffn_multiplier);
    read_if(e, "lambda", cfg.estimator.lambda);
    read_if(e, "learning_rate", cfg.estimator.learning_rate);
    read_if(e, "weight_decay", cfg.estimator.weight_decay);
    read_if(e, "epochs", cfg.estimator.epochs);
    read_if(e, "batch_size", cfg.estimator.batch_size);
    read_if(e, "use_residual", cfg.estimator.use_residual);
    read_if(e, "use_layer_norm", cfg.estimator.use_layer_norm);
    read_if(e, "softmax_attention", cfg.estimator.softmax_attention);
  }
  if (j.contains("pruning")) {
    const json& p = j.at("pruning");
    read_if(p, "mode", cfg.pruning.mode);
    read_if(p, "ratios", cfg.pruning.ratios);
    read_if(p, "start_layer", cfg.pruning.start_layer);
    read_if(p, "renormalize", cfg.pruning.renormalize);
  }
  if (j.contains("sweep")) {
    const json& s = j.at("sweep");
    read_if(s, "k_values", cfg.sweep.k_values);
    read_if(s, "lambda_values", cfg.sweep.lambda_values);
    read_if(s, "d_lowrank_values", cfg.sweep.d_lowrank_values);
  }
  if (j.contains("flops")) {
    const json& f = j.at("flops");
    read_if(f, "d_model", cfg.flops.d_model);
    read_if(f, "ffn_multiplier", cfg.flops.ffn_multiplier);
  }
  read_if(j, "metrics", cfg.metrics);
  read_if(j, "output_dir", cfg.output_dir);
  read_if(j, "checkpoint_path", cfg.checkpoint_path);
  return cfg;
}

void ExperimentConfig::apply_override(const std::string& key, const std::string& value) {
  json j = to_json();
  json* cursor = &j;
  std::size_t begin = 0;
  std::string leaf;
  for (;;) {
    const std::size_t dot = key.find('.', begin);
    const std::string part = key.substr(begin, dot == std::string::npos ? std::string::npos : dot - begin);
    if (part.empty() || !cursor->is_object() || !cursor->contains(part)) {
      throw std::invalid_argument("override: unknown key '" + key + "'");
    }
    if (dot == std::string::npos) {
      leaf = part;
      break;
    }
    cursor = &(*cursor)[part];
    begin = dot + 1;
  }
  if ((*cursor)[leaf].is_object()) {
    throw std::invalid_argument("override: key '" + key + "' is a section, not a value");
  }
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::parse_error&) {
    parsed = value;  // bare strings (paths, mode names)
  }
  (*cursor)[leaf] = parsed;
  try {
    *this = from_json(j);
  } catch (const json::exception& e) {
    throw std::invalid_argument("override: bad value '" + value + "' for key '" + key + "': " + e.what());
  }
}

Scene make_scene(const ExperimentConfig& cfg, int scene_index, bool keep_attention) {
  const std::uint64_t scene_seed = derive_seed(cfg.seed, "scene-" + std::to_string(scene_index));
  const AttentionTrace trace = generate_trace(cfg.oracle.trace_config(), scene_seed);
  const int skip = cfg.pruning.start_layer;
  const Tensor aggregated = aggregate_attention(trace, skip);

  Scene scene;
  scene.seed = scene_seed;
  scene.planted = trace.planted_importance;
  scene.biased_tokens = trace.biased_tokens;
  scene.target = extract_target(aggregated, trace.partition, skip);

  const FeatureDictionary dict = make_dictionary(cfg);
  const int n = trace.partition.n_visual;
  const int m = trace.partition.n_text();
  const int dv = cfg.estimator.d_in_visual;
  const int dt = cfg.estimator.d_in_text;
  Rng rng(derive_seed(scene_seed, "features"));

  // Standardized log-importance: the signal the estimator has to recover.
  std::vector<double> signal(n);
  for (int i = 0; i < n; ++i) signal[i] = std::log(scene.planted[i] + 1e-12);
  const double sig_mean = mean(signal);
  double sig_sd = 0.0;
  for (double v : signal) sig_sd += (v - sig_mean) * (v - sig_mean);
  sig_sd = std::sqrt(sig_sd / n);
  if (sig_sd < 1e-12) sig_sd = 1.0;
  for (double& v : signal) v = (v - sig_mean) / sig_sd;

  std::vector<std::uint8_t> biased(n, 0);
  for (int i : scene.biased_tokens) biased[i] = 1;

  std::vector<double> fv(static_cast<std::size_t>(n) * dv);
  for (int i = 0; i < n; ++i) {
    double* row = fv.data() + static_cast<std::size_t>(i) * dv;
    for (int c = 0; c < dv; ++c) {
      row[c] = signal[i] * dict.u_importance[c] + (biased[i] ? dict.u_bias[c] : 0.0) +
               cfg.feature_noise * rng.normal();
    }
  }
  scene.visual_features = Tensor::constant({n, dv}, std::move(fv));

  std::vector<double> tag_mean(dt, 0.0);
  for (int i : scene.biased_tokens) {
    for (int c = 0; c < dt; ++c) tag_mean[c] += dict.token_tags[i][c];
  }
  for (double& v : tag_mean) v /= static_cast<double>(scene.biased_tokens.size());

  std::vector<double> ft(static_cast<std::size_t>(m) * dt);
  for (int jrow = 0; jrow < m; ++jrow) {
    const std::vector<double>& role =
        jrow < trace.partition.n_prompt ? dict.v_prompt : dict.v_caption;
    double* row = ft.data() + static_cast<std::size_t>(jrow) * dt;
    for (int c = 0; c < dt; ++c) {
      row[c] = role[c] + tag_mean[c] + cfg.feature_noise * rng.normal();
    }
  }
  scene.text_features = Tensor::constant({m, dt}, std::move(ft));

  if (keep_attention) {
    const int total = trace.partition.total();
    scene.text_to_visual.reserve(trace.n_layers - skip);
    for (int l = skip; l < trace.n_layers; ++l) {
      const std::vector<double>& layer = trace.layers[l].data();
      std::vector<double> block(static_cast<std::size_t>(m) * n);
      for (int r = 0; r < m; ++r) {
        const double* src = layer.data() + static_cast<std::size_t>(n + r) * total;
        std::copy(src, src + n, block.data() + static_cast<std::size_t>(r) * n);
      }
      scene.text_to_visual.push_back(Tensor::constant({m, n}, std::move(block)));
    }
  }
  return scene;
}

std::vector<Scene> make_scenes(const ExperimentConfig& cfg, int first_index, int count,
                               bool keep_attention) {
  std::vector<Scene> scenes(count);
  const int workers = std::min(cfg.resolved_threads(), count);
  if (workers <= 1) {
    for (int i = 0; i < count; ++i) scenes[i] = make_scene(cfg, first_index + i, keep_attention);
    return scenes;
  }
  std::vector<std::thread> pool;
  std::vector<std::string> errors(workers);
  const int per = (count + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      try {
        const int lo = w * per, hi = std::min(count, lo + per);
        for (int i = lo; i < hi; ++i) scenes[i] = make_scene(cfg, first_index + i, keep_attention);
      } catch (const std::exception& e) {
        errors[w] = e.what();
      }
    });
  }
  for (std::thread& t : pool) t.join();
  for (const std::string& e : errors) {
    if (!e.empty()) throw std::runtime_error("make_scenes: " + e);
  }
  return scenes;
}

TrainSample to_train_sample(const Scene& scene) {
  return TrainSample{scene.visual_features, scene.text_features, scene.target.a};
}

Report debias_experiment(const ExperimentConfig& cfg, const std::vector<int>& k_values) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Report report;
  report.config_echo = cfg.to_json();
  report.extra["k_values"] = k_values;

  const double first_ratio = cfg.pruning.ratios.front();
  const TransformerDims base_dims = cfg.transformer_dims();
  for (int k : k_values) {
    ExperimentConfig runcfg = cfg;
    runcfg.pruning.start_layer = k;
    runcfg.validate();
    const std::vector<Scene> scenes = make_scenes(runcfg, 0, cfg.n_scenes, false);
    TransformerDims dims = base_dims;
    dims.start_layer = k;
    for (int i = 0; i < cfg.n_scenes; ++i) {
      const Scene& scene = scenes[i];
      const ImportanceScores target_scores = make_scores(scene.target.a);
      const PruneMask mask = static_prune_topk(target_scores, first_ratio);
      ReportRow row;
      row.scene_id = i;
      row.mode = "target";
      row.ratio_requested = first_ratio;
      row.ratio_realized = static_cast<double>(mask.pruned_count()) / scene.planted.size();
      row.pruning_accuracy = pruning_accuracy(mask, scene.planted);
      row.spearman = spearman(scene.target.a, scene.planted);
      row.flops_relative = flops_relative_static(first_ratio, dims);
      row.skip_layers = k;
      row.lambda = cfg.estimator.lambda;
      row.n_estimator_layers = cfg.estimator.n_layers;
      row.d_lowrank = cfg.estimator.d_lowrank;
      row.seed = scene.seed;
      report.rows.push_back(std::move(row));
    }
  }
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

namespace {

std::vector<double> tempered_thresholds(const std::vector<double>& raw, double gamma) {
  std::vector<double> scaled(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) scaled[i] = raw[i] * gamma;
  return make_scores(std::move(scaled)).normalized;
}

struct AdaptiveContext {
  const std::vector<Scene>* scenes;
  const std::vector<ImportanceScores>* scores;
  int start_layer;
  int total_layers;
  bool renormalize;
};

double mean_realized_at_gamma(const AdaptiveContext& ctx, double gamma,
                              std::vector<PruneSchedule>* out = nullptr) {
  double acc = 0.0;
  for (std::size_t i = 0; i < ctx.scenes->size(); ++i) {
    ImportanceScores thresholds;
    thresholds.raw = (*ctx.scores)[i].raw;
    thresholds.normalized = tempered_thresholds((*ctx.scores)[i].raw, gamma);
    PruneSchedule schedule = adaptive_run((*ctx.scenes)[i].text_to_visual, thresholds,
                                          ctx.start_layer, ctx.total_layers, ctx.renormalize);
    acc += realized_pruning_ratio(schedule);
    if (out) out->push_back(std::move(schedule));
  }
  return acc / static_cast<double>(ctx.scenes->size());
}

// Temperature on the threshold softmax; larger gamma sharpens the target
// distribution and prunes more tokens. Bisects log-gamma so the mean realized
// ratio tracks the requested budget.
double calibrate_gamma(const AdaptiveContext& ctx, double requested) {
  double lo = 1e-3, hi = 1e3;
  double best_gamma = 1.0;
  double best_err = std::abs(mean_realized_at_gamma(ctx, 1.0) - requested);
  for (int iter = 0; iter < 40 && best_err > 5e-3; ++iter) {
    const double mid = std::sqrt(lo * hi);
    const double realized = mean_realized_at_gamma(ctx, mid);
    const double err = std::abs(realized - requested);
    if (err < best_err) {
      best_err = err;
      best_gamma = mid;
    }
    if (realized < requested) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return best_gamma;
}

}  // namespace

EndToEndResult end_to_end_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const int threads = cfg.resolved_threads();

  const std::vector<Scene> train_scenes = make_scenes(cfg, 0, cfg.n_scenes, false);
  std::vector<TrainSample> train_samples;
  train_samples.reserve(train_scenes.size());
  for (const Scene& s : train_scenes) train_samples.push_back(to_train_sample(s));

  ImportanceEstimator model(cfg.bound_estimator_config(), derive_seed(cfg.seed, "model-init"));
  const TrainResult history = train(model, train_samples, threads);

  const std::vector<Scene> eval_scenes = make_scenes(cfg, cfg.n_scenes, cfg.n_eval_scenes, true);
  std::vector<TrainSample> eval_samples;
  eval_samples.reserve(eval_scenes.size());
  for (const Scene& s : eval_scenes) eval_samples.push_back(to_train_sample(s));
  const EvalResult eval = evaluate(model, eval_samples);

  std::vector<ImportanceScores> scores;
  scores.reserve(eval_scenes.size());
  for (const Scene& s : eval_scenes) scores.push_back(model.forward(s.visual_features, s.text_features));

  const TransformerDims dims = cfg.transformer_dims();
  const int n = cfg.oracle.partition.n_visual;
  const int start = cfg.pruning.start_layer;
  const int total_layers = cfg.oracle.n_layers;

  AdaptiveContext ctx{&eval_scenes, &scores, start, total_layers, cfg.pruning.renormalize};
  std::vector<double> gammas;
  std::vector<std::vector<PruneSchedule>> schedules_per_ratio;
  for (double ratio : cfg.pruning.ratios) {
    const double gamma = calibrate_gamma(ctx, ratio);
    gammas.push_back(gamma);
    std::vector<PruneSchedule> schedules;
    schedules.reserve(eval_scenes.size());
    mean_realized_at_gamma(ctx, gamma, &schedules);
    schedules_per_ratio.push_back(std::move(schedules));
  }

  Report report;
  report.config_echo = cfg.to_json();
  for (std::size_t i = 0; i < eval_scenes.size(); ++i) {
    const Scene& scene = eval_scenes[i];
    const double model_vs_planted = spearman(scores[i].raw, scene.planted);
    ReportRow base;
    base.scene_id = static_cast<int>(i);
    base.spearman = model_vs_planted;
    base.skip_layers = start;
    base.lambda = cfg.estimator.lambda;
    base.n_estimator_layers = cfg.estimator.n_layers;
    base.d_lowrank = cfg.estimator.d_lowrank;
    base.seed = scene.seed;

    for (std::size_t ri = 0; ri < cfg.pruning.ratios.size(); ++ri) {
      const double ratio = cfg.pruning.ratios[ri];
      const int prune_count = static_cast<int>(std::floor(ratio * n));
      const double static_flops = flops_relative_static(ratio, dims);

      {
        ReportRow row = base;
        row.mode = "random";
        row.ratio_requested = ratio;
        row.ratio_realized = static_cast<double>(prune_count) / n;
        Rng rng(derive_seed(scene.seed, "random-prune-" + format_double(ratio)));
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        PruneMask mask;
        mask.bits.assign(n, 0);
        for (int p = 0; p < prune_count; ++p) mask.bits[order[p]] = 1;
        row.pruning_accuracy = pruning_accuracy(mask, scene.planted);
        row.flops_relative = static_flops;
        report.rows.push_back(std::move(row));
      }
      {
        ReportRow row = base;
        row.mode = "static";
        row.ratio_requested = ratio;
        row.ratio_realized = static_cast<double>(prune_count) / n;
        const PruneMask mask = static_prune_topk(scores[i], ratio);
        row.pruning_accuracy = pruning_accuracy(mask, scene.planted);
        row.flops_relative = static_flops;
        report.rows.push_back(std::move(row));
      }
      {
        ReportRow row = base;
        row.mode = "adaptive";
        row.ratio_requested = ratio;
        const PruneSchedule& schedule = schedules_per_ratio[ri][i];
        row.ratio_realized = realized_pruning_ratio(schedule);
        row.pruning_accuracy = pruning_accuracy(schedule.final_mask(), scene.planted);
        row.flops_relative = flops_relative(schedule, dims);
        report.rows.push_back(std::move(row));
      }
    }
  }

  report.extra["loss_history"] = history.epoch_loss;
  report.extra["eval_spearman_vs_target"] = eval.mean_spearman;
  json gamma_json = json::object();
  for (std::size_t ri = 0; ri < cfg.pruning.ratios.size(); ++ri) {
    gamma_json[format_double(cfg.pruning.ratios[ri])] = gammas[ri];
  }
  report.extra["adaptive_gamma"] = std::move(gamma_json);
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  return EndToEndResult{std::move(report), std::move(model), eval.mean_spearman};
}

Report sweep_experiment(const ExperimentConfig& base, const std::string& axis) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<ExperimentConfig> settings;
  if (axis == "K") {
    for (int k : base.sweep.k_values) {
      ExperimentConfig c = base;
      c.pruning.start_layer = k;
      settings.push_back(std::move(c));
    }
  } else if (axis == "lambda") {
    for (double l : base.sweep.lambda_values) {
      ExperimentConfig c = base;
      c.estimator.lambda = l;
      settings.push_back(std::move(c));
    }
  } else if (axis == "d_lowrank") {
    for (int d : base.sweep.d_lowrank_values) {
      ExperimentConfig c = base;
      c.estimator.d_lowrank = d;
      settings.push_back(std::move(c));
    }
  } else {
    throw std::invalid_argument("sweep_experiment: unknown axis '" + axis + "'");
  }

  Report report;
  report.config_echo = base.to_json();
  report.extra["axis"] = axis;
  const double eval_ratio = base.pruning.ratios.back();
  for (const ExperimentConfig& cfg : settings) {
    const EndToEndResult result = end_to_end_experiment(cfg);
    std::vector<double> accuracy, rho, realized, flops;
    for (const ReportRow& row : result.report.rows) {
      if (row.mode == "static" && row.ratio_requested == eval_ratio) {
        accuracy.push_back(row.pruning_accuracy);
        rho.push_back(row.spearman);
        realized.push_back(row.ratio_realized);
        flops.push_back(row.flops_relative);
      }
    }
    ReportRow row;
    row.scene_id = -1;  // aggregate over scenes
    row.mode = "static";
    row.ratio_requested = eval_ratio;
    row.ratio_realized = mean(realized);
    row.pruning_accuracy = mean(accuracy);
    row.spearman = mean(rho);
    row.flops_relative = mean(flops);
    row.skip_layers = cfg.pruning.start_layer;
    row.lambda = cfg.estimator.lambda;
    row.n_estimator_layers = cfg.estimator.n_layers;
    row.d_lowrank = cfg.estimator.d_lowrank;
    row.seed = cfg.seed;
    report.rows.push_back(std::move(row));
  }
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace tokenprune
