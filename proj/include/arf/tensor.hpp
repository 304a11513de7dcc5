#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <vector>

#include "arf/common.hpp"

namespace arf {

int64_t shape_numel(const std::vector<int>& shape);

// Dense row-major float32 tensor. The buffer is shared; ops treat tensors as
// immutable once another tensor or graph node references the same buffer.
// `node >= 0` means the tensor is tracked on a Graph.
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<float>> buf;
  int node = -1;

  Tensor() : buf(std::make_shared<std::vector<float>>()) {}
  Tensor(std::vector<int> shape_, std::vector<float> data_);

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, float value);

  int64_t size() const { return buf ? int64_t(buf->size()) : 0; }
  bool requires_grad() const { return node >= 0; }

  const float* data() const { return buf->data(); }
  float* data() { return buf->data(); }
  std::span<const float> span() const { return {buf->data(), buf->size()}; }

  float scalar() const;  // requires size() == 1
  bool all_finite() const;

  // Row-major element access, mainly for tests and small fixtures.
  float at(std::initializer_list<int> idx) const;
  void set(std::initializer_list<int> idx, float v);
};

class Graph;

// Saved forward context of one graph node. Concrete ops subclass this and
// implement the backward rule. Live instances are counted process-wide so the
// memory behaviour of graph-building code can be asserted in tests.
struct OpCtx {
  OpCtx();
  virtual ~OpCtx();
  OpCtx(const OpCtx&) = delete;
  OpCtx& operator=(const OpCtx&) = delete;

  virtual const char* kind() const = 0;
  // gout is d(root)/d(output of this node); implementations add each parent's
  // contribution into Graph::grad_of(parent).
  virtual void backward(Graph& g, std::span<const float> gout) = 0;
};

struct GraphStats {
  static int64_t live_nodes();
  static int64_t high_water();
  static void reset_high_water();
};

// leaf node id -> accumulated gradient (same shape as the leaf)
using GradStore = std::map<int, Tensor>;

// Reverse-mode tape. Nodes are appended during the forward pass; parents
// always precede children. A graph is consumable once: after backward it
// refuses further use and must be rebuilt for another pass.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Registers `t` as a differentiable leaf and stamps its node id.
  int register_leaf(Tensor& t);

  // Appends an interior node producing `data` with the given saved context.
  Tensor make_node(std::vector<int> shape, std::vector<float> data,
                   std::vector<int> parents, std::unique_ptr<OpCtx> ctx);

  // Gradient buffer of a node, allocated (zero) on first use. Only valid
  // while a backward pass is running.
  std::span<float> grad_of(int node_id);
  bool has_grad(int node_id) const;

  // Backward from a scalar root; accumulates d(root)/d(leaf) per leaf.
  GradStore backward(const Tensor& root);
  void backward(const Tensor& root, GradStore& accum);
  // Backward from an arbitrary node with an explicit upstream seed (chain
  // rule entry point for deferred back-propagation).
  void backward_from(int node_id, std::span<const float> seed, GradStore& accum);

  size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  const std::vector<int>& node_shape(int id) const;
  bool is_leaf(int id) const;

 private:
  struct Node {
    std::vector<int> shape;
    int64_t numel;
    std::unique_ptr<OpCtx> ctx;
    bool leaf;
  };

  void run_backward(int root_id, std::span<const float> seed, GradStore& accum);

  std::vector<Node> nodes_;
  std::vector<std::vector<float>> grads_;
  std::vector<int> leaves_;
  bool consumed_ = false;
};

// --- operations -----------------------------------------------------------
// All ops run eagerly; a node is recorded only when at least one input is
// tracked on `g`. Untracked inputs act as constants.

Tensor make_tensor(Graph& g, std::vector<int> shape, std::vector<float> data,
                   bool requires_grad);

// 3x3 convolution, stride 1, zero padding 1. Gradients flow to `input` only;
// weight and bias are constants (CNN weights are never trained here).
Tensor conv2d(Graph& g, const Tensor& input, const Tensor& weight, const Tensor& bias);

// 2x2 max pooling, stride 2, floor semantics; ties resolve to the first
// element in row-major window scan.
Tensor maxpool2x2(Graph& g, const Tensor& input);

Tensor relu(Graph& g, const Tensor& input);

Tensor add(Graph& g, const Tensor& a, const Tensor& b);
Tensor mul(Graph& g, const Tensor& a, const Tensor& b);
Tensor scale(Graph& g, const Tensor& a, float s);
Tensor sum(Graph& g, const Tensor& a);  // -> shape {1}

// Concatenates C_i x H x W parts along the channel axis.
Tensor concat_channels(Graph& g, const std::vector<Tensor>& parts);

// Per-channel affine map y[c] = (x[c] - shift[c]) * inv_scale[c] on a CxHxW
// tensor; the building block for input normalization.
Tensor channel_affine(Graph& g, const Tensor& input, std::span<const float> shift,
                      std::span<const float> inv_scale);

// Central-difference gradient estimate of a scalar function; test oracle for
// every backward rule in the library.
Tensor numeric_grad(const std::function<float(const Tensor&)>& f, const Tensor& x,
                    float eps);

}  // namespace arf
