#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tokenprune {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

class GradTape;

namespace detail {
struct TensorNode {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  std::vector<double> grad;  // sized iff requires_grad
  bool requires_grad = false;
  const GradTape* producer = nullptr;  // tape that created this node, null for leaves
};
}  // namespace detail

// Dense row-major double tensor. A cheap handle: copies share storage.
// Leaves (parameter / constant) live outside any tape; op outputs are owned
// by the GradTape that produced them.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  // Trainable leaf: carries a gradient buffer.
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t size() const;
  bool requires_grad() const { return node_->requires_grad; }

  std::vector<double>& data() { return *node_->data; }
  const std::vector<double>& data() const { return *node_->data; }
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();

  double value() const;              // scalar tensors only
  double at(int i) const;            // rank 1
  double at(int i, int j) const;     // rank 2

  // Leaf sharing this tensor's storage but owning a private gradient buffer.
  // Lets worker threads run independent tapes against shared weights; the
  // caller merges gradients by explicit summation.
  Tensor alias() const;

 private:
  friend class GradTape;
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;
};

// Records ops as they execute; backward() replays the records in reverse,
// accumulating gradients by summation. A tape and its tensors belong to one
// thread; independent tapes may run concurrently.
class GradTape {
 public:
  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  // a[m x k] * b[k x n] -> [m x n]
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor transpose(const Tensor& a);
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
  Tensor scale(const Tensor& a, double s);
  Tensor add_scalar(const Tensor& a, double c);
  // mat[m x n] + row[n], broadcast over rows.
  Tensor add_rowwise(const Tensor& mat, const Tensor& row);
  Tensor sigmoid(const Tensor& a);
  Tensor gelu(const Tensor& a);
  // Row-stable softmax / log-softmax over the last axis of a vector or matrix.
  Tensor softmax_rows(const Tensor& a);
  Tensor log_softmax_rows(const Tensor& a);
  // Per-row standardization (no affine parameters), eps = 1e-6.
  Tensor layer_norm_rows(const Tensor& a);
  Tensor mean_over_axis(const Tensor& a, int axis);
  Tensor sum(const Tensor& a);  // -> scalar
  Tensor reshape(const Tensor& a, Shape shape);

  // Escape hatch for fused ops (e.g. pairwise ranking losses). `backward`
  // receives the output node and the input nodes and must accumulate into
  // input grads.
  using CustomBackward =
      std::function<void(const detail::TensorNode& out, std::span<detail::TensorNode* const> inputs)>;
  Tensor custom(std::vector<Tensor> inputs, Shape out_shape, std::vector<double> out_data,
                CustomBackward backward);

  // Populates grads of every requires_grad tensor reachable from `loss`.
  void backward(const Tensor& loss);

  std::size_t op_count() const { return records_.size(); }

 private:
  struct Record {
    std::vector<std::shared_ptr<detail::TensorNode>> inputs;
    std::shared_ptr<detail::TensorNode> output;
    CustomBackward fn;
  };

  Tensor emit(std::vector<Tensor> inputs, Shape out_shape, std::vector<double> out_data,
              CustomBackward fn);
  std::vector<Record> records_;
};

// Max over all parameter entries of |analytic - central_difference| /
// max(|analytic|, 1e-8). `build_loss` must construct the scalar loss from the
// parameters' current values on the given tape.
double finite_diff_check(const std::function<Tensor(GradTape&)>& build_loss,
                         std::span<Tensor> params, double h);

}  // namespace tokenprune
