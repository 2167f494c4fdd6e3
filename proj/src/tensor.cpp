#include "tokenprune/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace tokenprune {

namespace {

using EigenMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenMat>;
using ConstMatMap = Eigen::Map<const EigenMat>;

ConstMatMap map2d(const detail::TensorNode& n) {
  return ConstMatMap(n.data->data(), n.shape[0], n.shape[1]);
}

void check_finite_shape(const Shape& s) {
  if (s.empty()) throw std::invalid_argument("tensor shape must have at least one dimension");
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive, got " + shape_str(s));
  }
}

void require_rank(const Tensor& t, int r, const char* op) {
  if (t.rank() != r) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(r) +
                                " tensor, got shape " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

// Rows/cols view of a rank-1 or rank-2 tensor for the row-softmax family.
std::pair<int, int> as_rows(const Tensor& t, const char* op) {
  if (t.rank() == 1) return {1, t.shape()[0]};
  if (t.rank() == 2) return {t.shape()[0], t.shape()[1]};
  throw std::invalid_argument(std::string(op) + ": expected rank 1 or 2, got shape " +
                              shape_str(t.shape()));
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  check_finite_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->data = std::make_shared<std::vector<double>>(std::move(values));
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape) {
  check_finite_shape(shape);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)), 0.0);
  return constant(std::move(shape), std::move(v));
}

Tensor Tensor::full(Shape shape, double value) {
  check_finite_shape(shape);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)), value);
  return constant(std::move(shape), std::move(v));
}

Tensor Tensor::scalar(double value) { return constant({1}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  t.node_->grad.assign(t.data().size(), 0.0);
  return t;
}

std::int64_t Tensor::size() const { return shape_numel(node_->shape); }

std::vector<double>& Tensor::grad() {
  if (!node_->requires_grad) throw std::logic_error("tensor does not require grad");
  return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (!node_->requires_grad) throw std::logic_error("tensor does not require grad");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_->requires_grad) node_->grad.assign(node_->data->size(), 0.0);
}

double Tensor::value() const {
  if (size() != 1) throw std::invalid_argument("value(): tensor is not scalar, shape " + shape_str(shape()));
  return (*node_->data)[0];
}

double Tensor::at(int i) const {
  if (rank() != 1) throw std::invalid_argument("at(i): tensor is not rank 1");
  return (*node_->data)[static_cast<std::size_t>(i)];
}

double Tensor::at(int i, int j) const {
  if (rank() != 2) throw std::invalid_argument("at(i,j): tensor is not rank 2");
  return (*node_->data)[static_cast<std::size_t>(i) * shape()[1] + j];
}

Tensor Tensor::alias() const {
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = node_->shape;
  node->data = node_->data;  // shared storage
  node->requires_grad = node_->requires_grad;
  if (node->requires_grad) node->grad.assign(node_->data->size(), 0.0);
  return Tensor(std::move(node));
}

Tensor GradTape::emit(std::vector<Tensor> inputs, Shape out_shape, std::vector<double> out_data,
                      CustomBackward fn) {
  bool needs_grad = false;
  for (const Tensor& in : inputs) {
    if (in.node_->producer != nullptr && in.node_->producer != this) {
      throw std::logic_error("tensor produced by a different tape used as input");
    }
    needs_grad = needs_grad || in.requires_grad();
  }
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(out_shape);
  node->data = std::make_shared<std::vector<double>>(std::move(out_data));
  node->producer = this;
  node->requires_grad = needs_grad;
  if (needs_grad) {
    node->grad.assign(node->data->size(), 0.0);
    Record rec;
    for (Tensor& in : inputs) rec.inputs.push_back(in.node_);
    rec.output = node;
    rec.fn = std::move(fn);
    records_.push_back(std::move(rec));
  }
  return Tensor(std::move(node));
}

Tensor GradTape::custom(std::vector<Tensor> inputs, Shape out_shape, std::vector<double> out_data,
                        CustomBackward backward) {
  check_finite_shape(out_shape);
  if (shape_numel(out_shape) != static_cast<std::int64_t>(out_data.size())) {
    throw std::invalid_argument("custom op: data length does not match shape " + shape_str(out_shape));
  }
  return emit(std::move(inputs), std::move(out_shape), std::move(out_data), std::move(backward));
}

Tensor GradTape::matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  {
    MatMap c(out.data(), m, n);
    c.noalias() = ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  }
  return emit({a, b}, {m, n}, std::move(out),
              [m, k, n](const detail::TensorNode& o, std::span<detail::TensorNode* const> in) {
                ConstMatMap dc(o.grad.data(), m, n);
                if (in[0]->requires_grad) {
                  MatMap da(in[0]->grad.data(), m, k);
                  da.noalias() += dc * map2d(*in[1]).transpose();
                }
                if (in[1]->requires_grad) {
                  MatMap db(in[1]->grad.data(), k, n);
                  db.noalias() += map2d(*in[0]).transpose() * dc;
                }
              });
}

Tensor GradTape::transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const int m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(a.data().size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j) * m + i] = a.data()[static_cast<std::size_t>(i) * n + j];
  return emit({a}, {n, m}, std::move(out),
              [m, n](const detail::TensorNode& o, std::span<detail::TensorNode* const> in) {
                if (!in[0]->requires_grad) return;
                for (int i = 0; i < m; ++i)
                  for (int j = 0; j < n; ++j)
                    in[0]->grad[static_cast<std::size_t>(i) * n + j] += o.grad[static_cast<std::size_t>(j) * m + i];
              });
}

Tensor GradTape::add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return emit({a, b}, a.shape(), std::move(out),
              [](const detail::TensorNode& o, std::span<detail::TensorNode* const> in) {
                for (int s = 0; s < 2; ++s) {
                  if (!in[s]->requires_grad) continue;
                  for (std::size_t i = 0; i < o.grad.size(); ++i) in[s]->grad[i] += o.grad[i];
                }
              });
}

Tensor GradTape::mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return emit({a, b}, a.shape(), std::move(out),
              [](const detail::TensorNode& o, std::span<detail::TensorNode* const> in) {
                if (in[0]->requires_grad)
                  for (std::size_t i = 0; i < o.grad.size(); ++i)
                    in[0]->grad[i] += o.grad[i] * (*in[1]->data)[i];
                if (in[1]->requires_grad)
                  for (std::size_t i = 0; i < o.grad.size(); ++i)
                    in[1]->grad[i] += o.grad[i] * (*in[0]->data)[i];
              });
}

Tensor GradTape::scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return emit({a}, a.shape(), std::move(out),
              [s](const detail::TensorNode& o, std::span<detail::TensorNode* const> in) {
                if (!in[0]->requires_grad) return;
                for (std::size_t i = 0; i < o.grad.size(); ++i) in[0]->grad[i] += o.grad[i] * s;
              });
}

Tensor GradTape::add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
  return emit({a}, a.shape(), std::move(out),
              [](const detail::TensorNode& o, std::span<detail::TensorNode* const> in) {
                if (!in[0]->requires_grad) return;
                for (std::size_t i = 0; i < o.grad.size(); ++i) in[0]->grad[i] += o.grad[i];
              });
}

Tensor GradTape::add_rowwise(const Tensor& mat, const Tensor& row) {
  require_rank(mat, 2, "add_rowwise");
  require_rank(row, 1, "add_rowwise");
  const int m = mat.shape()[0], n = mat.shape()[1];
  if (row.shape()[0] != n) {
    throw std::invalid_argument("add_rowwise: shape mismatch " + shape_str(mat.shape()) + " vs " +
                                shape_str(row.shape()));
  }
  std::vector<double> out(mat.data().size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(i) * n + j] = mat.data()[static_cast<std::size_t>(i) * n + j] + row.data()[j];
  return emit({mat, row}, mat.shape(), std::move(out),
              [m, n](const detail::TensorNode& o, std::span<detail::TensorNode* const> in) {
                if (in[0]->requires_grad)
                  for (std::size_t i = 0; i < o.grad.size(); ++i) in[0]->grad[i] += o.grad[i];
                if (in[1]->requires_grad)
                  for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                      in[1]->grad[j] += o.grad[static_cast<std::size_t>(i) * n + j];
              });
}

Tensor GradTape::sigmoid(const Tensor& a) {
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    // Branch on sign so exp never overflows.
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return emit({a}, a.shape(), std::move(out),
              [](const detail::TensorNode& o, std::span<detail::TensorNode* const> in) {
                if (!in[0]->requires_grad) return;
                for (std::size_t i = 0; i < o.grad.size(); ++i) {
                  const double y = (*o.data)[i];
                  in[0]->grad[i] += o.grad[i] * y * (1.0 - y);
                }
              });
}

Tensor GradTape::gelu(const Tensor& a) {
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  return emit({a}, a.shape(), std::move(out),
              [](const detail::TensorNode& o, std::span<detail::TensorNode* const> in) {
                if (!in[0]->requires_grad) return;
                for (std::size_t i = 0; i < o.grad.size(); ++i) {
                  const double x = (*in[0]->data)[i];
                  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                  in[0]->grad[i] += o.grad[i] * (cdf + x * pdf);
                }
              });
}

Tensor GradTape::softmax_rows(const Tensor& a) {
  auto [m, n] = as_rows(a, "softmax_rows");
  std::vector<double> out(a.data().size());
  for (int i = 0; i < m; ++i) {
    const double* x = a.data().data() + static_cast<std::size_t>(i) * n;
    double* y = out.data() + static_cast<std::size_t>(i) * n;
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    for (int j = 0; j < n; ++j) y[j] /= sum;
  }
  return emit({a}, a.shape(), std::move(out),
              [m = m, n = n](const detail::TensorNode& o, std::span<detail::TensorNode* const> in) {
                if (!in[0]->requires_grad) return;
                for (int i = 0; i < m; ++i) {
                  const double* y = o.data->data() + static_cast<std::size_t>(i) * n;
                  const double* dy = o.grad.data() + static_cast<std::size_t>(i) * n;
                  double dot = 0.0;
                  for (int j = 0; j < n; ++j) dot += dy[j] * y[j];
                  double* dx = in[0]->grad.data() + static_cast<std::size_t>(i) * n;
                  for (int j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
                }
              });
}

Tensor GradTape::log_softmax_rows(const Tensor& a) {
  auto [m, n] = as_rows(a, "log_softmax_rows");
  std::vector<double> out(a.data().size());
  for (int i = 0; i < m; ++i) {
    const double* x = a.data().data() + static_cast<std::size_t>(i) * n;
    double* y = out.data() + static_cast<std::size_t>(i) * n;
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
    const double lse = mx + std::log(sum);
    for (int j = 0; j < n; ++j) y[j] = x[j] - lse;
  }
  return emit({a}, a.shape(), std::move(out),
              [m = m, n = n](const detail::TensorNode& o, std::span<detail::TensorNode* const> in) {
                if (!in[0]->requires_grad) return;
                for (int i = 0; i < m; ++i) {
                  const double* y = o.data->data() + static_cast<std::size_t>(i) * n;
                  const double* dy = o.grad.data() + static_cast<std::size_t>(i) * n;
                  double total = 0.0;
                  for (int j = 0; j < n; ++j) total += dy[j];
                  double* dx = in[0]->grad.data() + static_cast<std::size_t>(i) * n;
                  for (int j = 0; j < n; ++j) dx[j] += dy[j] - std::exp(y[j]) * total;
                }
              });
}

Tensor GradTape::layer_norm_rows(const Tensor& a) {
  auto [m, n] = as_rows(a, "layer_norm_rows");
  constexpr double kEps = 1e-6;
  std::vector<double> out(a.data().size());
  std::vector<double> inv_sd(m);
  for (int i = 0; i < m; ++i) {
    const double* x = a.data().data() + static_cast<std::size_t>(i) * n;
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += x[j];
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= n;
    inv_sd[i] = 1.0 / std::sqrt(var + kEps);
    double* y = out.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) y[j] = (x[j] - mean) * inv_sd[i];
  }
  return emit({a}, a.shape(), std::move(out),
              [m = m, n = n, inv_sd = std::move(inv_sd)](const detail::TensorNode& o,
                                                         std::span<detail::TensorNode* const> in) {
                if (!in[0]->requires_grad) return;
                for (int i = 0; i < m; ++i) {
                  const double* y = o.data->data() + static_cast<std::size_t>(i) * n;
                  const double* dy = o.grad.data() + static_cast<std::size_t>(i) * n;
                  double mean_dy = 0.0, mean_dyy = 0.0;
                  for (int j = 0; j < n; ++j) {
                    mean_dy += dy[j];
                    mean_dyy += dy[j] * y[j];
                  }
                  mean_dy /= n;
                  mean_dyy /= n;
                  double* dx = in[0]->grad.data() + static_cast<std::size_t>(i) * n;
                  for (int j = 0; j < n; ++j)
                    dx[j] += inv_sd[i] * (dy[j] - mean_dy - y[j] * mean_dyy);
                }
              });
}

Tensor GradTape::mean_over_axis(const Tensor& a, int axis) {
  if (axis < 0 || axis >= a.rank()) {
    throw std::invalid_argument("mean_over_axis: axis " + std::to_string(axis) +
                                " out of range for shape " + shape_str(a.shape()));
  }
  const Shape& s = a.shape();
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < a.rank(); ++i) inner *= s[i];
  const int n = s[axis];
  Shape out_shape;
  for (int i = 0; i < a.rank(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape.push_back(1);  // reducing a vector yields a scalar
  std::vector<double> out(static_cast<std::size_t>(outer * inner), 0.0);
  for (std::int64_t o = 0; o < outer; ++o)
    for (int k = 0; k < n; ++k)
      for (std::int64_t i = 0; i < inner; ++i)
        out[static_cast<std::size_t>(o * inner + i)] += a.data()[static_cast<std::size_t>((o * n + k) * inner + i)];
  for (double& v : out) v /= n;
  return emit({a}, std::move(out_shape), std::move(out),
              [outer, inner, n](const detail::TensorNode& o, std::span<detail::TensorNode* const> in) {
                if (!in[0]->requires_grad) return;
                for (std::int64_t ot = 0; ot < outer; ++ot)
                  for (int k = 0; k < n; ++k)
                    for (std::int64_t i = 0; i < inner; ++i)
                      in[0]->grad[static_cast<std::size_t>((ot * n + k) * inner + i)] +=
                          o.grad[static_cast<std::size_t>(ot * inner + i)] / n;
              });
}

Tensor GradTape::sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return emit({a}, {1}, {s},
              [](const detail::TensorNode& o, std::span<detail::TensorNode* const> in) {
                if (!in[0]->requires_grad) return;
                for (double& g : in[0]->grad) g += o.grad[0];
              });
}

Tensor GradTape::reshape(const Tensor& a, Shape shape) {
  check_finite_shape(shape);
  if (shape_numel(shape) != a.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(shape));
  }
  std::vector<double> out = a.data();
  return emit({a}, std::move(shape), std::move(out),
              [](const detail::TensorNode& o, std::span<detail::TensorNode* const> in) {
                if (!in[0]->requires_grad) return;
                for (std::size_t i = 0; i < o.grad.size(); ++i) in[0]->grad[i] += o.grad[i];
              });
}

void GradTape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss does not depend on any requires_grad tensor");
  }
  bool found = false;
  for (const Record& r : records_) {
    if (r.output == loss.node_) {
      found = true;
      break;
    }
  }
  if (!found) throw std::invalid_argument("backward: loss tensor was not recorded on this tape");

  loss.node_->grad[0] += 1.0;
  // Records are appended in execution order, so reverse iteration is a valid
  // topological order; each record is visited exactly once.
  std::vector<detail::TensorNode*> scratch;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    scratch.clear();
    for (const auto& n : it->inputs) scratch.push_back(n.get());
    it->fn(*it->output, std::span<detail::TensorNode* const>(scratch.data(), scratch.size()));
  }
}

double finite_diff_check(const std::function<Tensor(GradTape&)>& build_loss,
                         std::span<Tensor> params, double h) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_check: h must be positive");
  for (Tensor& p : params) p.zero_grad();
  {
    GradTape tape;
    Tensor loss = build_loss(tape);
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Tensor& p : params) analytic.push_back(p.grad());

  const auto eval = [&]() {
    GradTape tape;
    return build_loss(tape).value();
  };

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    std::vector<double>& v = params[pi].data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double saved = v[i];
      v[i] = saved + h;
      const double up = eval();
      v[i] = saved - h;
      const double down = eval();
      v[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double g = analytic[pi][i];
      const double rel = std::abs(g - numeric) / std::max(std::abs(g), 1e-8);
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace tokenprune
