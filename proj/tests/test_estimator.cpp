#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "tokenprune/estimator.hpp"
#include "tokenprune/rng.hpp"
#include "tokenprune/stats.hpp"

using namespace tokenprune;

namespace {

EstimatorConfig tiny_config() {
  EstimatorConfig cfg;
  cfg.n_visual = 4;
  cfg.n_text = 3;
  cfg.d_in_visual = 6;
  cfg.d_in_text = 5;
  cfg.d_model = 8;
  cfg.d_lowrank = 4;
  cfg.n_layers = 2;
  cfg.lambda = 0.2;
  return cfg;
}

Tensor random_const(Rng& rng, Shape shape) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.normal();
  return Tensor::constant(std::move(shape), std::move(v));
}

std::vector<double> random_vec(Rng& rng, int n) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

// ---- straight-line scalar reference for one layer (independent oracle) ----

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  Mat m(t.shape()[0], std::vector<double>(t.shape()[1]));
  for (int i = 0; i < t.shape()[0]; ++i)
    for (int j = 0; j < t.shape()[1]; ++j) m[i][j] = t.at(i, j);
  return m;
}

Mat mat_mul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

Mat softmax_rows_ref(Mat m) {
  for (auto& row : m) {
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
  return m;
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

Mat reference_layer(const LayerParams& p, const Mat& fin, const Mat& text,
                    const EstimatorConfig& cfg, bool include_lowrank) {
  const double sdp = std::sqrt(static_cast<double>(cfg.d_model));
  const double sdl = std::sqrt(static_cast<double>(cfg.d_lowrank));
  const std::size_t n = fin.size(), m = text.size();

  Mat q = mat_mul(fin, to_mat(p.self_q));
  Mat k = mat_mul(fin, to_mat(p.self_k));
  Mat v = mat_mul(fin, to_mat(p.self_v));
  Mat scores(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      for (int c = 0; c < cfg.d_model; ++c) scores[i][j] += q[i][c] * k[j][c];
      scores[i][j] /= sdp;
    }
  Mat sa = mat_mul(mat_mul(softmax_rows_ref(scores), v), to_mat(p.self_o));
  Mat f_st = fin;
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < cfg.d_model; ++c)
      f_st[i][c] = (cfg.use_residual ? fin[i][c] : 0.0) + sa[i][c];

  Mat fq = mat_mul(f_st, to_mat(p.cross_q));
  Mat tk = mat_mul(text, to_mat(p.cross_k));
  Mat tv = mat_mul(text, to_mat(p.cross_v));
  Mat fl = mat_mul(f_st, to_mat(p.low_q));
  Mat tl = mat_mul(text, to_mat(p.low_k));
  Mat logits(n, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double high = 0.0;
      for (int c = 0; c < cfg.d_model; ++c) high += fq[i][c] * tk[j][c];
      high /= sdp;
      double low = 0.0;
      for (int c = 0; c < cfg.d_lowrank; ++c) low += fl[i][c] * tl[j][c];
      low = 1.0 / (1.0 + std::exp(-low / sdl));
      logits[i][j] = include_lowrank ? high + low : high;
    }
  Mat weights = softmax_rows_ref(logits);
  Mat fused = mat_mul(weights, tv);
  Mat f_cs = f_st;
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < cfg.d_model; ++c)
      f_cs[i][c] = (cfg.use_residual ? f_st[i][c] : 0.0) + fused[i][c];

  Mat h = mat_mul(f_cs, to_mat(p.ffn_w1));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < h[0].size(); ++c) h[i][c] = gelu_ref(h[i][c] + p.ffn_b1.at(c));
  Mat ffn = mat_mul(h, to_mat(p.ffn_w2));
  Mat out = f_cs;
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < cfg.d_model; ++c)
      out[i][c] = (cfg.use_residual ? f_cs[i][c] : 0.0) + ffn[i][c] + p.ffn_b2.at(c);
  return out;
}

LayerParams make_layer(const EstimatorConfig& cfg, std::uint64_t seed) {
  EstimatorConfig one = cfg;
  one.n_layers = 1;
  ImportanceEstimator model(one, seed);
  // First layer parameters start at index 2 (after the two projectors).
  const auto tensors = model.parameters();
  LayerParams p;
  p.self_q = tensors[2];
  p.self_k = tensors[3];
  p.self_v = tensors[4];
  p.self_o = tensors[5];
  p.cross_q = tensors[6];
  p.cross_k = tensors[7];
  p.cross_v = tensors[8];
  p.low_q = tensors[9];
  p.low_k = tensors[10];
  p.ffn_w1 = tensors[11];
  p.ffn_b1 = tensors[12];
  p.ffn_w2 = tensors[13];
  p.ffn_b2 = tensors[14];
  return p;
}

}  // namespace

TEST_CASE("init is deterministic and rejects bad dims") {
  const EstimatorConfig cfg = tiny_config();
  ImportanceEstimator a(cfg, 5);
  ImportanceEstimator b(cfg, 5);
  const auto pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].data() == pb[i].data());

  ImportanceEstimator c(cfg, 6);
  CHECK(c.parameters()[0].data() != pa[0].data());

  EstimatorConfig bad = cfg;
  bad.d_lowrank = bad.d_model;
  CHECK_THROWS_AS(ImportanceEstimator(bad, 1), std::invalid_argument);
}

TEST_CASE("init scale follows 1/sqrt(fan_in)") {
  EstimatorConfig cfg = tiny_config();
  cfg.d_in_visual = 100;
  cfg.d_model = 100;
  cfg.d_lowrank = 4;
  cfg.n_layers = 0;
  ImportanceEstimator model(cfg, 3);
  const Tensor w = model.parameters()[0];  // 100 x 100 visual projector
  CHECK(w.size() == 10000);
  const double sd = stddev(w.data());
  const double expected = 1.0 / (std::sqrt(3.0) * 10.0);
  CHECK(sd == doctest::Approx(expected).epsilon(0.10));
  // Biases start at zero.
  const auto names = model.parameter_names();
  const auto tensors = model.parameters();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i].find("_b") != std::string::npos) {
      for (double v : tensors[i].data()) CHECK(v == 0.0);
    }
  }
}

TEST_CASE("parameter count is a pure function of the config") {
  const EstimatorConfig cfg = tiny_config();
  ImportanceEstimator model(cfg, 1);
  const std::int64_t dp = cfg.d_model, dl = cfg.d_lowrank, h = cfg.head_hidden();
  const std::int64_t ffn = cfg.ffn_multiplier * dp;
  const std::int64_t per_layer = 7 * dp * dp + 2 * dp * dl + dp * ffn + ffn + ffn * dp + dp;
  const std::int64_t expected = cfg.d_in_visual * dp + cfg.d_in_text * dp +
                                cfg.n_layers * per_layer + dp * h + h + h * 1;
  CHECK(model.parameter_count() == expected);
}

TEST_CASE("layer forward matches the scalar reference") {
  Rng rng(21);
  EstimatorConfig cfg = tiny_config();
  cfg.n_visual = 3;
  cfg.n_text = 2;
  const LayerParams p = make_layer(cfg, 77);
  const Tensor fin = random_const(rng, {3, cfg.d_model});
  const Tensor text = random_const(rng, {2, cfg.d_model});

  GradTape t;
  const Tensor got = layer_forward(t, p, fin, text, cfg);
  const Mat want = reference_layer(p, to_mat(fin), to_mat(text), cfg, true);
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < cfg.d_model; ++c)
      CHECK(got.at(i, c) == doctest::Approx(want[i][c]).epsilon(1e-10));
}

TEST_CASE("layer forward with n_visual = 1 matches the scalar reference") {
  Rng rng(22);
  EstimatorConfig cfg = tiny_config();
  const LayerParams p = make_layer(cfg, 78);
  const Tensor fin = random_const(rng, {1, cfg.d_model});
  const Tensor text = random_const(rng, {3, cfg.d_model});
  GradTape t;
  const Tensor got = layer_forward(t, p, fin, text, cfg);
  const Mat want = reference_layer(p, to_mat(fin), to_mat(text), cfg, true);
  for (int c = 0; c < cfg.d_model; ++c) CHECK(got.at(0, c) == doctest::Approx(want[0][c]).epsilon(1e-10));
}

TEST_CASE("zeroed low-rank projectors reduce to plain scaled dot-product weights") {
  Rng rng(23);
  const EstimatorConfig cfg = tiny_config();
  LayerParams p = make_layer(cfg, 79);
  for (double& v : p.low_q.data()) v = 0.0;
  for (double& v : p.low_k.data()) v = 0.0;
  const Tensor fin = random_const(rng, {4, cfg.d_model});
  const Tensor text = random_const(rng, {3, cfg.d_model});
  GradTape t;
  const Tensor got = layer_forward(t, p, fin, text, cfg);
  // The sigmoid branch contributes the constant 0.5 per entry, which the row
  // softmax cancels, so the output matches a reference without the branch.
  const Mat want = reference_layer(p, to_mat(fin), to_mat(text), cfg, false);
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < cfg.d_model; ++c)
      CHECK(got.at(i, c) == doctest::Approx(want[i][c]).epsilon(1e-12));
}

TEST_CASE("G = 0 forward is a head over projected features, independent of text") {
  Rng rng(24);
  EstimatorConfig cfg = tiny_config();
  cfg.n_layers = 0;
  ImportanceEstimator model(cfg, 9);
  const Tensor f = random_const(rng, {cfg.n_visual, cfg.d_in_visual});
  const Tensor t1 = random_const(rng, {cfg.n_text, cfg.d_in_text});
  const Tensor t2 = random_const(rng, {cfg.n_text, cfg.d_in_text});
  const ImportanceScores s1 = model.forward(f, t1);
  const ImportanceScores s2 = model.forward(f, t2);
  CHECK(s1.raw == s2.raw);
}

TEST_CASE("forward determinism and permutation equivariance") {
  Rng rng(25);
  const EstimatorConfig cfg = tiny_config();
  ImportanceEstimator model(cfg, 10);
  const Tensor f = random_const(rng, {cfg.n_visual, cfg.d_in_visual});
  const Tensor text = random_const(rng, {cfg.n_text, cfg.d_in_text});

  const ImportanceScores a = model.forward(f, text);
  const ImportanceScores b = model.forward(f, text);
  CHECK(a.raw == b.raw);

  // Reverse the token order; raw scores must follow the permutation.
  std::vector<double> rev(f.data().size());
  const int n = cfg.n_visual, d = cfg.d_in_visual;
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c)
      rev[static_cast<std::size_t>(i) * d + c] = f.at(n - 1 - i, c);
  const ImportanceScores p = model.forward(Tensor::constant({n, d}, std::move(rev)), text);
  for (int i = 0; i < n; ++i) CHECK(p.raw[i] == doctest::Approx(a.raw[n - 1 - i]).epsilon(1e-10));
}

TEST_CASE("normalized scores are a softmax of raw scores") {
  const ImportanceScores s = make_scores({0.4, -1.2, 2.0, 0.4});
  double sum = 0.0;
  for (double v : s.normalized) sum += v;
  CHECK(std::abs(sum - 1.0) <= 1e-12);
  // Softmax is monotone: order agrees with raw.
  CHECK(s.normalized[2] > s.normalized[0]);
  CHECK(s.normalized[0] == s.normalized[3]);
  CHECK(s.normalized[1] < s.normalized[0]);
}

TEST_CASE("rank loss hand values") {
  CHECK(rank_loss(std::vector<double>{0.6, 0.4}, std::vector<double>{0.3, 0.7}) ==
        doctest::Approx(0.4).epsilon(1e-15));
  // Strictly co-ordered predictions incur no loss.
  CHECK(rank_loss(std::vector<double>{0.1, 0.5, 0.9}, std::vector<double>{-1.0, 0.0, 3.0}) == 0.0);
  // All-equal targets activate no pairs.
  CHECK(rank_loss(std::vector<double>{0.5, 0.5, 0.5}, std::vector<double>{3.0, -2.0, 0.0}) == 0.0);
  CHECK_THROWS_AS(rank_loss(std::vector<double>{1.0, 2.0}, std::vector<double>{1.0}),
                  std::invalid_argument);
}

TEST_CASE("rank loss is zero iff predictions are weakly co-monotone") {
  Rng rng(26);
  int zero_cases = 0, positive_cases = 0;
  for (int iter = 0; iter < 300; ++iter) {
    const int n = 10;
    std::vector<double> a(n), pred(n);
    for (double& v : a) v = rng.uniform_int(4) * 0.25;  // ties likely
    if (iter % 2 == 0) {
      // Construct a weakly co-monotone prediction: a monotone transform of a
      // with tie-breaking noise only within equal-target groups.
      for (int i = 0; i < n; ++i) pred[i] = 3.0 * a[i] + 0.01 * rng.uniform();
    } else {
      for (double& v : pred) v = rng.normal();
    }
    bool co_monotone = true;
    for (int i = 0; i < n && co_monotone; ++i)
      for (int j = 0; j < n; ++j)
        if (a[i] > a[j] && pred[i] < pred[j]) {
          co_monotone = false;
          break;
        }
    const double loss = rank_loss(a, pred);
    if (co_monotone) {
      CHECK(loss == 0.0);
      ++zero_cases;
    } else {
      CHECK(loss > 0.0);
      ++positive_cases;
    }
  }
  CHECK(zero_cases > 50);
  CHECK(positive_cases > 50);
}

TEST_CASE("kl term: nonnegative, zero under constant shift, hand value") {
  Rng rng(27);
  for (int iter = 0; iter < 200; ++iter) {
    const int n = 2 + rng.uniform_int(8);
    const std::vector<double> a = random_vec(rng, n);
    const std::vector<double> b = random_vec(rng, n);
    CHECK(kl_softmax(a, b) >= -1e-12);
  }

  const std::vector<double> a{0.3, -0.7, 1.1, 0.0};
  std::vector<double> shifted(a);
  for (double& v : shifted) v += 4.2;
  CHECK(std::abs(kl_softmax(a, shifted)) <= 1e-12);

  // Closed form: KL(softmax([1,0]) || [0.5,0.5]) = p1 ln(2 p1) + p2 ln(2 p2).
  const double p1 = std::exp(1.0) / (std::exp(1.0) + 1.0);
  const double p2 = 1.0 - p1;
  const double expected = p1 * std::log(2.0 * p1) + p2 * std::log(2.0 * p2);
  CHECK(kl_softmax(std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 0.0}) ==
        doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("total loss value matches the graph route") {
  Rng rng(28);
  for (int iter = 0; iter < 20; ++iter) {
    const int n = 2 + rng.uniform_int(6);
    TargetAttention target;
    target.a = random_vec(rng, n);
    const std::vector<double> raw = random_vec(rng, n);
    const ImportanceScores pred = make_scores(raw);
    const double lambda = iter % 3 == 0 ? 0.0 : 0.2;
    const double value = total_loss(target, pred, lambda);

    GradTape t;
    Tensor pred_t = Tensor::parameter({n}, raw);
    const double graph = total_loss_graph(t, target.a, pred_t, lambda).value();
    CHECK(graph == doctest::Approx(value).epsilon(1e-12));
  }
  TargetAttention bad;
  bad.a = {1.0, 2.0};
  CHECK_THROWS_AS(total_loss(bad, make_scores({1.0, 2.0, 3.0}), 0.1), std::invalid_argument);
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(29);
  const std::vector<double> target{0.9, 0.1, 0.4, 0.4, 0.05};
  Tensor pred = Tensor::parameter({5}, {0.2, -0.3, 0.8, 0.1, -0.5});
  std::vector<Tensor> params{pred};
  const double err = finite_diff_check(
      [&](GradTape& t) { return total_loss_graph(t, target, pred, 0.2); }, params, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("full model gradient check at the reference geometry") {
  const EstimatorConfig cfg = tiny_config();  // N=4 M=3 d_model=8 d_lowrank=4 G=2
  ImportanceEstimator model(cfg, 123);
  Rng rng(30);
  const Tensor f = random_const(rng, {cfg.n_visual, cfg.d_in_visual});
  const Tensor text = random_const(rng, {cfg.n_text, cfg.d_in_text});
  std::vector<double> target(cfg.n_visual);
  for (double& v : target) v = rng.uniform();

  std::vector<Tensor> params = model.parameters();
  const double err = finite_diff_check(
      [&](GradTape& t) {
        Tensor raw = model.forward_graph(t, f, text);
        return total_loss_graph(t, target, raw, 0.2);
      },
      params, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("training overfits a single sample") {
  EstimatorConfig cfg = tiny_config();
  cfg.epochs = 200;
  cfg.batch_size = 1;
  cfg.learning_rate = 3e-3;
  cfg.weight_decay = 0.0;
  cfg.seed = 11;
  ImportanceEstimator model(cfg, 77);

  Rng rng(31);
  std::vector<TrainSample> data(1);
  data[0].visual_features = random_const(rng, {cfg.n_visual, cfg.d_in_visual});
  data[0].text_features = random_const(rng, {cfg.n_text, cfg.d_in_text});
  data[0].target = {0.5, 0.1, 0.3, 0.1};

  const TrainResult r = train(model, data, 1);
  REQUIRE(r.epoch_loss.size() == 200);
  CHECK(r.epoch_loss.back() < 0.1 * r.epoch_loss.front());
}

TEST_CASE("lambda changes the trained parameters") {
  Rng rng(32);
  std::vector<TrainSample> data(4);
  EstimatorConfig cfg = tiny_config();
  cfg.epochs = 10;
  cfg.batch_size = 4;
  cfg.seed = 5;
  for (TrainSample& s : data) {
    s.visual_features = random_const(rng, {cfg.n_visual, cfg.d_in_visual});
    s.text_features = random_const(rng, {cfg.n_text, cfg.d_in_text});
    s.target = {0.4, 0.3, 0.2, 0.1};
  }
  EstimatorConfig a = cfg;
  a.lambda = 0.0;
  EstimatorConfig b = cfg;
  b.lambda = 0.2;
  ImportanceEstimator ma(a, 99), mb(b, 99);
  train(ma, data, 1);
  train(mb, data, 1);
  CHECK(ma.parameters()[0].data() != mb.parameters()[0].data());
}

TEST_CASE("zero learning rate leaves only weight decay") {
  Rng rng(33);
  std::vector<TrainSample> data(2);
  EstimatorConfig cfg = tiny_config();
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.learning_rate = 0.0;
  cfg.weight_decay = 0.01;
  for (TrainSample& s : data) {
    s.visual_features = random_const(rng, {cfg.n_visual, cfg.d_in_visual});
    s.text_features = random_const(rng, {cfg.n_text, cfg.d_in_text});
    s.target = {0.4, 0.3, 0.2, 0.1};
  }
  ImportanceEstimator model(cfg, 50);
  const std::vector<double> before = model.parameters()[0].data();
  train(model, data, 1);
  const std::vector<double> after = model.parameters()[0].data();
  CHECK(before != after);
  // Pure decay: every nonzero weight shrank toward zero, order preserved.
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK(std::abs(after[i]) <= std::abs(before[i]));
    CHECK(after[i] * before[i] >= 0.0);
  }

  cfg.weight_decay = 0.0;
  ImportanceEstimator frozen(cfg, 50);
  const std::vector<double> init = frozen.parameters()[0].data();
  train(frozen, data, 1);
  CHECK(frozen.parameters()[0].data() == init);
}

TEST_CASE("training is deterministic for a fixed config") {
  Rng rng(34);
  std::vector<TrainSample> data(6);
  EstimatorConfig cfg = tiny_config();
  cfg.epochs = 5;
  cfg.batch_size = 3;
  cfg.seed = 21;
  for (TrainSample& s : data) {
    s.visual_features = random_const(rng, {cfg.n_visual, cfg.d_in_visual});
    s.text_features = random_const(rng, {cfg.n_text, cfg.d_in_text});
    s.target = random_vec(rng, cfg.n_visual);
  }
  ImportanceEstimator a(cfg, 7), b(cfg, 7);
  const TrainResult ra = train(a, data, 1);
  const TrainResult rb = train(b, data, 1);
  CHECK(ra.epoch_loss == rb.epoch_loss);
  CHECK(a.parameters()[0].data() == b.parameters()[0].data());
}

TEST_CASE("training aborts on non-finite loss and rejects empty data") {
  EstimatorConfig cfg = tiny_config();
  ImportanceEstimator model(cfg, 1);
  CHECK_THROWS_AS(train(model, std::span<const TrainSample>{}, 1), std::invalid_argument);

  Rng rng(35);
  std::vector<TrainSample> data(1);
  data[0].visual_features = random_const(rng, {cfg.n_visual, cfg.d_in_visual});
  data[0].text_features = random_const(rng, {cfg.n_text, cfg.d_in_text});
  data[0].target = {0.4, 0.3, 0.2, 0.1};
  cfg.learning_rate = 1e160;  // drives the weights to overflow after one step
  cfg.epochs = 5;
  cfg.weight_decay = 0.0;
  ImportanceEstimator doomed(cfg, 2);
  CHECK_THROWS_AS(train(doomed, data, 1), std::runtime_error);
}

TEST_CASE("spearman ranks: identity, reversal, reference formula with ties") {
  const std::vector<double> a{0.1, 0.2, 0.3, 0.5, 0.9};
  std::vector<double> rev(a.rbegin(), a.rend());
  CHECK(spearman(a, a) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(spearman(a, rev) == doctest::Approx(-1.0).epsilon(1e-15));

  // Independent reference: explicit average ranks + Pearson written in place.
  Rng rng(36);
  for (int iter = 0; iter < 50; ++iter) {
    const int n = 8;
    std::vector<double> x(n), y(n);
    for (double& v : x) v = rng.uniform_int(5);  // ties
    for (double& v : y) v = rng.normal();
    const auto rank_of = [](const std::vector<double>& v) {
      const int nn = static_cast<int>(v.size());
      std::vector<double> r(nn, 0.0);
      for (int i = 0; i < nn; ++i) {
        int less = 0, equal = 0;
        for (int j = 0; j < nn; ++j) {
          if (v[j] < v[i]) ++less;
          if (v[j] == v[i]) ++equal;
        }
        r[i] = less + 0.5 * (equal + 1);  // average rank, 1-based
      }
      return r;
    };
    const std::vector<double> rx = rank_of(x), ry = rank_of(y);
    double mx = 0, my = 0;
    for (int i = 0; i < n; ++i) {
      mx += rx[i];
      my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (int i = 0; i < n; ++i) {
      sxy += (rx[i] - mx) * (ry[i] - my);
      sxx += (rx[i] - mx) * (rx[i] - mx);
      syy += (ry[i] - my) * (ry[i] - my);
    }
    const double want = (sxx > 0 && syy > 0) ? sxy / std::sqrt(sxx * syy) : 0.0;
    CHECK(spearman(x, y) == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("evaluate reports per-sample and mean correlations") {
  EstimatorConfig cfg = tiny_config();
  ImportanceEstimator model(cfg, 40);
  Rng rng(37);
  std::vector<TrainSample> data(3);
  for (TrainSample& s : data) {
    s.visual_features = random_const(rng, {cfg.n_visual, cfg.d_in_visual});
    s.text_features = random_const(rng, {cfg.n_text, cfg.d_in_text});
    s.target = random_vec(rng, cfg.n_visual);
  }
  const EvalResult r = evaluate(model, data);
  REQUIRE(r.per_sample.size() == 3);
  CHECK(r.mean_spearman == doctest::Approx(mean(r.per_sample)).epsilon(1e-15));

  std::vector<TrainSample> degenerate(1);
  degenerate[0].visual_features = random_const(rng, {cfg.n_visual, cfg.d_in_visual});
  degenerate[0].text_features = random_const(rng, {cfg.n_text, cfg.d_in_text});
  degenerate[0].target = {1.0};
  CHECK_THROWS_AS(evaluate(model, degenerate), std::invalid_argument);
}

TEST_CASE("checkpoint round-trip preserves the model; shape mismatches are caught") {
  const EstimatorConfig cfg = tiny_config();
  ImportanceEstimator model(cfg, 90);
  Rng rng(38);
  const Tensor f = random_const(rng, {cfg.n_visual, cfg.d_in_visual});
  const Tensor text = random_const(rng, {cfg.n_text, cfg.d_in_text});
  const ImportanceScores before = model.forward(f, text);

  const std::filesystem::path path =
      std::filesystem::temp_directory_path() / "tokenprune_ckpt_test.json";
  model.save(path);
  const ImportanceEstimator loaded = ImportanceEstimator::load(path);
  CHECK(loaded.forward(f, text).raw == before.raw);
  CHECK(loaded.parameter_count() == model.parameter_count());

  // Corrupt one parameter's shape; loading must fail naming the parameter.
  nlohmann::json j;
  {
    std::ifstream in(path);
    j = nlohmann::json::parse(in);
  }
  j["parameters"]["head_w2"]["shape"] = {2, 2};
  {
    std::ofstream out(path);
    out << j.dump();
  }
  CHECK_THROWS_WITH_AS(ImportanceEstimator::load(path), doctest::Contains("head_w2"),
                       std::runtime_error);
  std::filesystem::remove(path);
}
