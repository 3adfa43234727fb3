#pragma once

// Dense float32 tensors with tape-free reverse-mode autodiff.
//
// Every op returns a new Tensor whose node remembers its parents and a
// backward closure. Calling backward() on a scalar walks the recorded graph
// in reverse topological order, each node exactly once. Parameters are leaf
// tensors created with requires_grad; their grads accumulate across
// backward() calls until zero_grad() or sgd_step().
//
// Layout is row-major. Spatial ops use NCHW.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace swarmfuse {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  float* grad_buffer();  // allocates (zeroed) on demand
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value) { return from({1}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const float> data() const;
  /// Write access; only legal on leaves (parameters and inputs).
  std::span<float> mutable_data();
  float item() const;
  float at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  void zero_grad();

  /// Reverse-mode sweep from this scalar. The seed gradient is 1.
  void backward() const;

  /// Same values, no history, no grad.
  Tensor detach() const;

  /// Identity of the underlying node (stable while the tensor lives).
  const void* id() const { return node_.get(); }

  // Internal: construction of op results.
  static Tensor make_result(Shape shape, std::vector<float> data,
                            std::vector<Tensor> parents, const char* op,
                            std::function<void(detail::Node&)> backward);
  detail::Node& node() const { return *node_; }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Recorded operations reachable from a root, inputs before consumers.
struct ComputeGraph {
  struct Entry {
    const void* id;
    const char* op;
    std::vector<std::size_t> inputs;  // positions in `nodes`
  };
  std::vector<Entry> nodes;
};

ComputeGraph trace(const Tensor& root);

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- ops -------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::size_t stride = 1, std::size_t pad = 0);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor clamp(const Tensor& x, float lo, float hi);
/// Natural log of max(x, floor); no gradient below the floor.
Tensor log(const Tensor& x, float floor = 1e-8f);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
Tensor sum(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

Tensor softmax(const Tensor& x, std::size_t axis);

Tensor max_pool2x2(const Tensor& x);
Tensor upsample2x(const Tensor& x);

/// Concatenate along `axis`; all other extents must agree.
Tensor concat(std::span<const Tensor> parts, std::size_t axis);

/// out[..., i, ...] = x[..., index[i], ...] along `axis`; index -1 yields 0.
Tensor gather(const Tensor& x, std::size_t axis, std::span<const std::int32_t> index);

/// Per-position routing among same-shape NCHW tensors: output (n, c, p)
/// copies sources[choice[n*H*W + p]]. Gradient reaches only the chosen source.
Tensor select(std::span<const Tensor> sources, std::span<const std::int32_t> choice);

struct MaxResult {
  Tensor value;
  std::vector<std::int32_t> argmax;  // per element, index into inputs; ties -> lowest
};

/// Elementwise maximum over same-shape tensors.
MaxResult elementwise_max(std::span<const Tensor> inputs);

struct CrossEntropyOptions {
  bool input_is_probs = false;
  std::optional<std::int32_t> ignore_index;
};

/// Mean NLL over rows of a [N, C, *spatial] tensor, classes on axis 1.
/// `labels` has N * prod(spatial) entries in row-major (n, spatial) order.
/// If every row is ignored the loss is 0 and `all_ignored` (when given) is set.
Tensor cross_entropy(const Tensor& input, std::span<const std::int32_t> labels,
                     const CrossEntropyOptions& options = {}, bool* all_ignored = nullptr);

// ---- parameters ------------------------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// p <- p - lr * grad, then zero the grads. Throws if a grad is missing.
void sgd_step(std::span<const NamedTensor> params, float lr);

/// SGD with classical momentum: v <- mu v + g; p <- p - lr v.
class MomentumSgd {
 public:
  MomentumSgd(float lr, float momentum) : lr_(lr), momentum_(momentum) {}
  /// `grad_scale` multiplies the accumulated grads first (e.g. 1/batch).
  void step(std::span<const NamedTensor> params, float grad_scale = 1.0f);

 private:
  float lr_;
  float momentum_;
  std::vector<std::vector<float>> velocity_;
};

void save_checkpoint(const std::string& path, std::span<const NamedTensor> params);
std::vector<NamedTensor> load_checkpoint(const std::string& path);

/// Copy checkpoint values into `params` by name; shapes must match.
void assign_checkpoint(std::span<const NamedTensor> params, std::span<const NamedTensor> stored);

bool all_finite(std::span<const float> values);

}  // namespace swarmfuse
