#include "swarmfuse/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "swarmfuse/errors.hpp"

namespace swarmfuse {

namespace {

using MatR = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

thread_local bool t_grad_enabled = true;

[[noreturn]] void dim_error(const std::string& op, const std::string& detail) {
  throw DimensionError(op + ": " + detail);
}

std::size_t prod(const Shape& shape, std::size_t from, std::size_t to) {
  std::size_t p = 1;
  for (std::size_t i = from; i < to; ++i) p *= shape[i];
  return p;
}

bool wants_grad(const Tensor& t) { return t.defined() && t.requires_grad(); }

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    dim_error(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void add_into(float* dst, const float* src, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) { return prod(shape, 0, shape.size()); }

float* detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
  return grad.data();
}

// ---- Tensor ------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->data.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    dim_error("Tensor::from", "shape " + shape_str(shape) + " holds " +
                                  std::to_string(shape_numel(shape)) + " values, got " +
                                  std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) dim_error("dim", "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const float> Tensor::data() const { return node_->data; }

std::span<float> Tensor::mutable_data() {
  if (node_->backward) throw std::logic_error("mutable_data on a non-leaf tensor");
  return node_->data;
}

float Tensor::item() const {
  if (numel() != 1) dim_error("item", "tensor " + shape_str(shape()) + " is not a scalar");
  return node_->data[0];
}

float Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) dim_error("at", "rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) dim_error("at", "index out of range for " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const float> Tensor::grad() const { return node_->grad; }

std::span<float> Tensor::mutable_grad() {
  node_->grad_buffer();
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.assign(node_->data.size(), 0.0f); }

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->data = node_->data;
  return Tensor(std::move(node));
}

Tensor Tensor::make_result(Shape shape, std::vector<float> data, std::vector<Tensor> parents,
                           const char* op, std::function<void(detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (t_grad_enabled && backward) {
    bool any = std::any_of(parents.begin(), parents.end(), wants_grad);
    if (any) {
      node->requires_grad = true;
      node->backward = std::move(backward);
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.node_);
    }
  }
  return Tensor(std::move(node));
}

namespace {

std::vector<detail::Node*> topo_order(detail::Node* root) {
  std::vector<detail::Node*> order;
  std::unordered_map<detail::Node*, bool> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
  seen[root] = true;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (!seen[parent]) {
        seen[parent] = true;
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

ComputeGraph trace(const Tensor& root) {
  ComputeGraph graph;
  auto order = topo_order(&root.node());
  std::unordered_map<const detail::Node*, std::size_t> position;
  for (auto* node : order) {
    ComputeGraph::Entry entry{node, node->op, {}};
    for (auto& p : node->parents) entry.inputs.push_back(position.at(p.get()));
    position[node] = graph.nodes.size();
    graph.nodes.push_back(std::move(entry));
  }
  return graph;
}

void Tensor::backward() const {
  if (numel() != 1) dim_error("backward", "root must be a scalar, got " + shape_str(shape()));
  if (!node_->requires_grad) return;
  auto order = topo_order(node_.get());
  node_->grad_buffer()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

// ---- conv2d ------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t pad) {
  if (input.rank() != 4 || weight.rank() != 4) {
    dim_error("conv2d", "expected 4-D input and weight, got " + shape_str(input.shape()) + " and " +
                            shape_str(weight.shape()));
  }
  const std::size_t n_batch = input.dim(0), channels = input.dim(1), height = input.dim(2),
                    width = input.dim(3);
  const std::size_t filters = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != channels) {
    dim_error("conv2d", "input " + shape_str(input.shape()) + " has " + std::to_string(channels) +
                            " channels but weight " + shape_str(weight.shape()) + " expects " +
                            std::to_string(weight.dim(1)));
  }
  if (kh % 2 == 0 || kw % 2 == 0) dim_error("conv2d", "kernel extents must be odd, got " + shape_str(weight.shape()));
  if (stride < 1) dim_error("conv2d", "stride must be >= 1");
  if (bias.rank() != 1 || bias.dim(0) != filters) {
    dim_error("conv2d", "bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  if (height + 2 * pad < kh || width + 2 * pad < kw) {
    dim_error("conv2d", "kernel " + shape_str(weight.shape()) + " larger than padded input " + shape_str(input.shape()));
  }
  const std::size_t out_h = (height + 2 * pad - kh) / stride + 1;
  const std::size_t out_w = (width + 2 * pad - kw) / stride + 1;
  const std::size_t cells = out_h * out_w;
  const std::size_t patch = channels * kh * kw;
  const std::size_t in_plane = height * width;

  std::vector<float> cols(n_batch * patch * cells, 0.0f);
  std::vector<float> out(n_batch * filters * cells);
  const float* x = input.data().data();
  CMapR w(weight.data().data(), filters, patch);
  Eigen::Map<const Eigen::VectorXf> b(bias.data().data(), filters);

  for (std::size_t n = 0; n < n_batch; ++n) {
    float* col = cols.data() + n * patch * cells;
    const float* xn = x + n * channels * in_plane;
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          float* row = col + ((c * kh + ky) * kw + kx) * cells;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
            const float* src = xn + c * in_plane + static_cast<std::size_t>(iy) * width;
            float* dst = row + oy * out_w;
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(width)) dst[ox] = src[ix];
            }
          }
        }
      }
    }
    MapR o(out.data() + n * filters * cells, filters, cells);
    o.noalias() = w * CMapR(col, patch, cells);
    o.colwise() += b;
  }

  auto backward = [=, cols = std::move(cols)](detail::Node& self) {
    const float* g = self.grad.data();
    auto& in_node = *self.parents[0];
    auto& w_node = *self.parents[1];
    auto& b_node = *self.parents[2];
    for (std::size_t n = 0; n < n_batch; ++n) {
      CMapR gn(g + n * filters * cells, filters, cells);
      CMapR col(cols.data() + n * patch * cells, patch, cells);
      if (w_node.requires_grad) {
        MapR gw(w_node.grad_buffer(), filters, patch);
        gw.noalias() += gn * col.transpose();
      }
      if (b_node.requires_grad) {
        // plain loop: Eigen's horizontal reductions peel by alignment, which
        // would make the summation order depend on where the buffer landed
        float* gb = b_node.grad_buffer();
        for (std::size_t f = 0; f < filters; ++f) {
          const float* row = g + (n * filters + f) * cells;
          float acc = 0.0f;
          for (std::size_t p = 0; p < cells; ++p) acc += row[p];
          gb[f] += acc;
        }
      }
      if (in_node.requires_grad) {
        CMapR wm(w_node.data.data(), filters, patch);
        MatR gcol = wm.transpose() * gn;
        float* gx = in_node.grad_buffer() + n * channels * in_plane;
        for (std::size_t c = 0; c < channels; ++c) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const float* row = gcol.data() + ((c * kh + ky) * kw + kx) * cells;
              for (std::size_t oy = 0; oy < out_h; ++oy) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
                float* dst = gx + c * in_plane + static_cast<std::size_t>(iy) * width;
                const float* src = row + oy * out_w;
                for (std::size_t ox = 0; ox < out_w; ++ox) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                  if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(width)) dst[ix] += src[ox];
                }
              }
            }
          }
        }
      }
    }
  };
  return Tensor::make_result({n_batch, filters, out_h, out_w}, std::move(out), {input, weight, bias},
                             "conv2d", std::move(backward));
}

// ---- dense / elementwise -----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    dim_error("matmul", "cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<float> out(m * n);
  MapR(out.data(), m, n).noalias() = CMapR(a.data().data(), m, k) * CMapR(b.data().data(), k, n);
  return Tensor::make_result({m, n}, std::move(out), {a, b}, "matmul", [=](detail::Node& self) {
    CMapR g(self.grad.data(), m, n);
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    if (an.requires_grad) MapR(an.grad_buffer(), m, k).noalias() += g * CMapR(bn.data.data(), k, n).transpose();
    if (bn.requires_grad) MapR(bn.grad_buffer(), k, n).noalias() += CMapR(an.data.data(), m, k).transpose() * g;
  });
}

Tensor relu(const Tensor& x) {
  std::vector<float> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.0f ? v : 0.0f;
  return Tensor::make_result(x.shape(), std::move(out), {x}, "relu", [](detail::Node& self) {
    auto& in = *self.parents[0];
    float* gx = in.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (in.data[i] > 0.0f) gx[i] += self.grad[i];
    }
  });
}

Tensor clamp(const Tensor& x, float lo, float hi) {
  std::vector<float> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = std::clamp(v, lo, hi);
  return Tensor::make_result(x.shape(), std::move(out), {x}, "clamp", [lo, hi](detail::Node& self) {
    auto& in = *self.parents[0];
    float* gx = in.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (in.data[i] >= lo && in.data[i] <= hi) gx[i] += self.grad[i];
    }
  });
}

Tensor log(const Tensor& x, float floor) {
  std::vector<float> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = std::log(std::max(v, floor));
  return Tensor::make_result(x.shape(), std::move(out), {x}, "log", [floor](detail::Node& self) {
    auto& in = *self.parents[0];
    float* gx = in.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (in.data[i] > floor) gx[i] += self.grad[i] / in.data[i];
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, "add", [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) add_into(p->grad_buffer(), self.grad.data(), self.grad.size());
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, "mul", [](detail::Node& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    if (an.requires_grad) {
      float* g = an.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bn.data[i];
    }
    if (bn.requires_grad) {
      float* g = bn.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * an.data[i];
    }
  });
}

Tensor scale(const Tensor& x, float factor) {
  std::vector<float> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return Tensor::make_result(x.shape(), std::move(out), {x}, "scale", [factor](detail::Node& self) {
    float* g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (float v : x.data()) total += v;
  return Tensor::make_result({1}, {static_cast<float>(total)}, {x}, "sum", [](detail::Node& self) {
    auto& in = *self.parents[0];
    float* g = in.grad_buffer();
    for (std::size_t i = 0; i < in.data.size(); ++i) g[i] += self.grad[0];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    dim_error("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {x}, "reshape", [](detail::Node& self) {
    add_into(self.parents[0]->grad_buffer(), self.grad.data(), self.grad.size());
  });
}

// ---- softmax -----------------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size()) dim_error("softmax", "axis " + std::to_string(axis) + " invalid for " + shape_str(s));
  const std::size_t outer = prod(s, 0, axis), len = s[axis], inner = prod(s, axis + 1, s.size());
  std::vector<float> out(x.numel());
  const float* in = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      float mx = -std::numeric_limits<float>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, in[base + k * inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        float e = std::exp(in[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      const float inv = static_cast<float>(1.0 / total);
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] *= inv;
    }
  }
  return Tensor::make_result(s, std::move(out), {x}, "softmax", [=](detail::Node& self) {
    float* gx = self.parents[0]->grad_buffer();
    const float* y = self.data.data();
    const float* g = self.grad.data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += static_cast<double>(g[base + k * inner]) * y[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t idx = base + k * inner;
          gx[idx] += y[idx] * (g[idx] - static_cast<float>(dot));
        }
      }
    }
  });
}

// ---- spatial -----------------------------------------------------------------

Tensor max_pool2x2(const Tensor& x) {
  if (x.rank() != 4 || x.dim(2) % 2 || x.dim(3) % 2) {
    dim_error("max_pool2x2", "expected NCHW with even H and W, got " + shape_str(x.shape()));
  }
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<float> out(planes * oh * ow);
  std::vector<std::uint32_t> argmax(out.size());
  const float* in = x.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        std::size_t best = p * h * w + (2 * y) * w + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            std::size_t idx = p * h * w + (2 * y + dy) * w + 2 * xx + dx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = (p * oh + y) * ow + xx;
        out[o] = in[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return Tensor::make_result({x.dim(0), x.dim(1), oh, ow}, std::move(out), {x}, "max_pool2x2",
                             [argmax = std::move(argmax)](detail::Node& self) {
                               float* gx = self.parents[0]->grad_buffer();
                               for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += self.grad[i];
                             });
}

Tensor upsample2x(const Tensor& x) {
  if (x.rank() != 4) dim_error("upsample2x", "expected NCHW, got " + shape_str(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = 2 * h, ow = 2 * w;
  std::vector<float> out(planes * oh * ow);
  const float* in = x.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) out[(p * oh + y) * ow + xx] = in[(p * h + y / 2) * w + xx / 2];
    }
  }
  return Tensor::make_result({x.dim(0), x.dim(1), oh, ow}, std::move(out), {x}, "upsample2x",
                             [=](detail::Node& self) {
                               float* gx = self.parents[0]->grad_buffer();
                               for (std::size_t p = 0; p < planes; ++p) {
                                 for (std::size_t y = 0; y < oh; ++y) {
                                   for (std::size_t xx = 0; xx < ow; ++xx) {
                                     gx[(p * h + y / 2) * w + xx / 2] += self.grad[(p * oh + y) * ow + xx];
                                   }
                                 }
                               }
                             });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) dim_error("concat", "no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) dim_error("concat", "axis " + std::to_string(axis) + " invalid for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) dim_error("concat", "cannot join " + shape_str(first) + " with " + shape_str(s) + " on axis " + std::to_string(axis));
    lens.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = prod(first, 0, axis), inner = prod(first, axis + 1, first.size());
  const std::size_t total = out_shape[axis];
  std::vector<float> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const float* src = parts[k].data().data();
    const std::size_t chunk = lens[k] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src + o * chunk, chunk, out.data() + (o * total + offset) * inner);
    }
    offset += lens[k];
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return Tensor::make_result(std::move(out_shape), std::move(out), std::move(parents), "concat",
                             [=](detail::Node& self) {
                               std::size_t off = 0;
                               for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                 const std::size_t chunk = lens[k] * inner;
                                 if (self.parents[k]->requires_grad) {
                                   float* g = self.parents[k]->grad_buffer();
                                   for (std::size_t o = 0; o < outer; ++o) {
                                     add_into(g + o * chunk, self.grad.data() + (o * total + off) * inner, chunk);
                                   }
                                 }
                                 off += lens[k];
                               }
                             });
}

Tensor gather(const Tensor& x, std::size_t axis, std::span<const std::int32_t> index) {
  const Shape& s = x.shape();
  if (axis >= s.size()) dim_error("gather", "axis " + std::to_string(axis) + " invalid for " + shape_str(s));
  const std::size_t outer = prod(s, 0, axis), len = s[axis], inner = prod(s, axis + 1, s.size());
  for (auto i : index) {
    if (i < -1 || i >= static_cast<std::int32_t>(len)) {
      throw std::out_of_range("gather: index " + std::to_string(i) + " outside axis of length " + std::to_string(len));
    }
  }
  Shape out_shape = s;
  out_shape[axis] = index.size();
  const std::size_t m = index.size();
  std::vector<float> out(outer * m * inner, 0.0f);
  const float* in = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < m; ++j) {
      if (index[j] < 0) continue;
      std::copy_n(in + (o * len + static_cast<std::size_t>(index[j])) * inner, inner, out.data() + (o * m + j) * inner);
    }
  }
  std::vector<std::int32_t> idx(index.begin(), index.end());
  return Tensor::make_result(std::move(out_shape), std::move(out), {x}, "gather",
                             [=, idx = std::move(idx)](detail::Node& self) {
                               float* g = self.parents[0]->grad_buffer();
                               for (std::size_t o = 0; o < outer; ++o) {
                                 for (std::size_t j = 0; j < m; ++j) {
                                   if (idx[j] < 0) continue;
                                   add_into(g + (o * len + static_cast<std::size_t>(idx[j])) * inner,
                                            self.grad.data() + (o * m + j) * inner, inner);
                                 }
                               }
                             });
}

Tensor select(std::span<const Tensor> sources, std::span<const std::int32_t> choice) {
  if (sources.empty()) dim_error("select", "no sources");
  const Shape& s = sources[0].shape();
  if (s.size() < 2) dim_error("select", "expected [N, C, ...], got " + shape_str(s));
  for (const auto& src : sources) require_same_shape("select", sources[0], src);
  const std::size_t batch = s[0], channels = s[1], plane = prod(s, 2, s.size());
  if (choice.size() != batch * plane) {
    dim_error("select", "choice has " + std::to_string(choice.size()) + " entries for " + shape_str(s));
  }
  for (auto c : choice) {
    if (c < 0 || c >= static_cast<std::int32_t>(sources.size())) {
      throw std::out_of_range("select: choice " + std::to_string(c) + " out of range");
    }
  }
  std::vector<float> out(shape_numel(s));
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t idx = (n * channels + c) * plane + p;
        out[idx] = sources[static_cast<std::size_t>(choice[n * plane + p])].data()[idx];
      }
    }
  }
  std::vector<std::int32_t> pick(choice.begin(), choice.end());
  std::vector<Tensor> parents(sources.begin(), sources.end());
  return Tensor::make_result(s, std::move(out), std::move(parents), "select",
                             [=, pick = std::move(pick)](detail::Node& self) {
                               for (std::size_t n = 0; n < batch; ++n) {
                                 for (std::size_t c = 0; c < channels; ++c) {
                                   for (std::size_t p = 0; p < plane; ++p) {
                                     auto& src = *self.parents[static_cast<std::size_t>(pick[n * plane + p])];
                                     if (!src.requires_grad) continue;
                                     const std::size_t idx = (n * channels + c) * plane + p;
                                     src.grad_buffer()[idx] += self.grad[idx];
                                   }
                                 }
                               }
                             });
}

MaxResult elementwise_max(std::span<const Tensor> inputs) {
  if (inputs.empty()) dim_error("elementwise_max", "no inputs");
  for (const auto& t : inputs) require_same_shape("elementwise_max", inputs[0], t);
  const std::size_t n = inputs[0].numel();
  std::vector<float> out(inputs[0].data().begin(), inputs[0].data().end());
  std::vector<std::int32_t> arg(n, 0);
  for (std::size_t k = 1; k < inputs.size(); ++k) {
    const float* d = inputs[k].data().data();
    for (std::size_t i = 0; i < n; ++i) {
      if (d[i] > out[i]) {
        out[i] = d[i];
        arg[i] = static_cast<std::int32_t>(k);
      }
    }
  }
  std::vector<Tensor> parents(inputs.begin(), inputs.end());
  Tensor value = Tensor::make_result(inputs[0].shape(), std::move(out), std::move(parents), "elementwise_max",
                                     [arg](detail::Node& self) {
                                       for (std::size_t i = 0; i < arg.size(); ++i) {
                                         auto& src = *self.parents[static_cast<std::size_t>(arg[i])];
                                         if (src.requires_grad) src.grad_buffer()[i] += self.grad[i];
                                       }
                                     });
  return {std::move(value), std::move(arg)};
}

// ---- loss --------------------------------------------------------------------

Tensor cross_entropy(const Tensor& input, std::span<const std::int32_t> labels,
                     const CrossEntropyOptions& options, bool* all_ignored) {
  const Shape& s = input.shape();
  if (s.size() < 2) dim_error("cross_entropy", "expected [N, C, ...], got " + shape_str(s));
  const std::size_t batch = s[0], classes = s[1], plane = prod(s, 2, s.size());
  if (labels.size() != batch * plane) {
    dim_error("cross_entropy", std::to_string(labels.size()) + " labels for input " + shape_str(s));
  }
  const float* x = input.data().data();
  std::size_t counted = 0;
  for (auto label : labels) {
    if (options.ignore_index && label == *options.ignore_index) continue;
    if (label < 0 || label >= static_cast<std::int32_t>(classes)) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                              std::to_string(classes) + ")");
    }
    ++counted;
  }
  if (all_ignored) *all_ignored = counted == 0;
  if (counted == 0) return Tensor::scalar(0.0f);

  constexpr float kMinProb = 1e-8f;
  double total = 0.0;
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::int32_t label = labels[n * plane + p];
      if (options.ignore_index && label == *options.ignore_index) continue;
      const float* row = x + n * classes * plane + p;
      if (options.input_is_probs) {
        total -= std::log(std::clamp(row[static_cast<std::size_t>(label) * plane], kMinProb, 1.0f));
      } else {
        float mx = row[0];
        for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c * plane]);
        double z = 0.0;
        for (std::size_t c = 0; c < classes; ++c) z += std::exp(static_cast<double>(row[c * plane] - mx));
        total += std::log(z) + mx - row[static_cast<std::size_t>(label) * plane];
      }
    }
  }
  const float mean = static_cast<float>(total / static_cast<double>(counted));
  std::vector<std::int32_t> y(labels.begin(), labels.end());
  const CrossEntropyOptions opts = options;
  return Tensor::make_result({1}, {mean}, {input}, "cross_entropy",
                             [=, y = std::move(y)](detail::Node& self) {
                               auto& in = *self.parents[0];
                               float* gx = in.grad_buffer();
                               const float g = self.grad[0] / static_cast<float>(counted);
                               for (std::size_t n = 0; n < batch; ++n) {
                                 for (std::size_t p = 0; p < plane; ++p) {
                                   const std::int32_t label = y[n * plane + p];
                                   if (opts.ignore_index && label == *opts.ignore_index) continue;
                                   const std::size_t base = n * classes * plane + p;
                                   const float* row = in.data.data() + base;
                                   if (opts.input_is_probs) {
                                     const float pt = row[static_cast<std::size_t>(label) * plane];
                                     if (pt >= kMinProb && pt <= 1.0f) gx[base + static_cast<std::size_t>(label) * plane] -= g / pt;
                                   } else {
                                     float mx = row[0];
                                     for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c * plane]);
                                     double z = 0.0;
                                     for (std::size_t c = 0; c < classes; ++c) z += std::exp(static_cast<double>(row[c * plane] - mx));
                                     for (std::size_t c = 0; c < classes; ++c) {
                                       const float prob = static_cast<float>(std::exp(static_cast<double>(row[c * plane] - mx)) / z);
                                       gx[base + c * plane] += g * (prob - (static_cast<std::int32_t>(c) == label ? 1.0f : 0.0f));
                                     }
                                   }
                                 }
                               }
                             });
}

// ---- optimisation ------------------------------------------------------------

void sgd_step(std::span<const NamedTensor> params, float lr) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw std::runtime_error("sgd_step: parameter '" + p.name + "' has no gradient");
  }
  for (const auto& p : params) {
    auto& node = p.tensor.node();
    for (std::size_t i = 0; i < node.data.size(); ++i) node.data[i] -= lr * node.grad[i];
    std::fill(node.grad.begin(), node.grad.end(), 0.0f);
  }
}

void MomentumSgd::step(std::span<const NamedTensor> params, float grad_scale) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw std::runtime_error("MomentumSgd: parameter '" + p.name + "' has no gradient");
  }
  if (velocity_.size() != params.size()) {
    velocity_.clear();
    for (const auto& p : params) velocity_.emplace_back(p.tensor.numel(), 0.0f);
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& node = params[k].tensor.node();
    auto& v = velocity_[k];
    for (std::size_t i = 0; i < node.data.size(); ++i) {
      v[i] = momentum_ * v[i] + grad_scale * node.grad[i];
      node.data[i] -= lr_ * v[i];
    }
    std::fill(node.grad.begin(), node.grad.end(), 0.0f);
  }
}

bool all_finite(std::span<const float> values) {
  return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

// ---- checkpoint files --------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'S', 'W', 'F', 'Z'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("truncated checkpoint while reading ") + what, pos_);
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, std::span<const NamedTensor> params) {
  std::string out(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put_u32(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto e : p.tensor.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : p.tensor.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(out, bits);
    }
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw std::runtime_error("cannot open '" + path + "' for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw std::runtime_error("failed writing '" + path + "'");
}

std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  Reader in(bytes);
  if (in.take(4, "magic") != std::string(kCheckpointMagic, 4)) throw FormatError("bad checkpoint magic", 0);
  const std::size_t version_at = in.pos();
  if (in.u32("version") != kCheckpointVersion) throw FormatError("unsupported checkpoint version", version_at);
  const std::uint32_t count = in.u32("tensor count");
  std::vector<NamedTensor> result;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t name_len = in.u32("name length");
    std::string name = in.take(name_len, "name");
    const std::size_t rank_at = in.pos();
    const std::uint32_t rank = in.u32("rank");
    if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank), rank_at);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(in.u32("extent"));
    const std::size_t n = shape_numel(shape);
    in.need(n * 4, "payload");
    std::vector<float> values(n);
    for (auto& v : values) {
      std::uint32_t bits = in.u32("payload");
      std::memcpy(&v, &bits, 4);
    }
    result.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values))});
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes after last tensor", in.pos());
  return result;
}

void assign_checkpoint(std::span<const NamedTensor> params, std::span<const NamedTensor> stored) {
  for (const auto& p : params) {
    auto it = std::find_if(stored.begin(), stored.end(), [&](const NamedTensor& s) { return s.name == p.name; });
    if (it == stored.end()) throw ConfigError("checkpoint lacks parameter '" + p.name + "'");
    if (it->tensor.shape() != p.tensor.shape()) {
      throw DimensionError("parameter '" + p.name + "' expects " + shape_str(p.tensor.shape()) + ", checkpoint has " +
                           shape_str(it->tensor.shape()));
    }
    auto& node = p.tensor.node();
    std::copy(it->tensor.data().begin(), it->tensor.data().end(), node.data.begin());
  }
}

}  // namespace swarmfuse
