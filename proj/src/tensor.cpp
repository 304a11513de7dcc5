#include "arf/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

namespace arf {

int64_t shape_numel(const std::vector<int>& shape) {
  check_arg(!shape.empty(), "shape must have at least one extent");
  int64_t n = 1;
  for (int e : shape) {
    check_arg(e > 0, "shape extents must be positive");
    n *= e;
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape_, std::vector<float> data_)
    : shape(std::move(shape_)) {
  int64_t n = shape_numel(shape);
  check_arg(n == int64_t(data_.size()), "shape/data length mismatch");
  buf = std::make_shared<std::vector<float>>(std::move(data_));
}

Tensor Tensor::zeros(std::vector<int> shape) {
  int64_t n = shape_numel(shape);
  Tensor t;
  t.shape = std::move(shape);
  t.buf = std::make_shared<std::vector<float>>(size_t(n), 0.f);
  return t;
}

Tensor Tensor::full(std::vector<int> shape, float value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.buf->begin(), t.buf->end(), value);
  return t;
}

float Tensor::scalar() const {
  check_arg(size() == 1, "tensor is not a scalar");
  return (*buf)[0];
}

bool Tensor::all_finite() const {
  for (float v : *buf)
    if (!std::isfinite(v)) return false;
  return true;
}

static size_t flat_index(const std::vector<int>& shape, std::initializer_list<int> idx) {
  check_arg(idx.size() == shape.size(), "index rank mismatch");
  size_t flat = 0;
  int d = 0;
  for (int i : idx) {
    check_arg(i >= 0 && i < shape[size_t(d)], "index out of range");
    flat = flat * size_t(shape[size_t(d)]) + size_t(i);
    ++d;
  }
  return flat;
}

float Tensor::at(std::initializer_list<int> idx) const {
  return (*buf)[flat_index(shape, idx)];
}

void Tensor::set(std::initializer_list<int> idx, float v) {
  (*buf)[flat_index(shape, idx)] = v;
}

// --- node instrumentation ---------------------------------------------------

namespace {
std::atomic<int64_t> g_live_nodes{0};
std::atomic<int64_t> g_high_water{0};
}  // namespace

OpCtx::OpCtx() {
  int64_t live = g_live_nodes.fetch_add(1) + 1;
  int64_t hw = g_high_water.load();
  while (live > hw && !g_high_water.compare_exchange_weak(hw, live)) {
  }
}

OpCtx::~OpCtx() { g_live_nodes.fetch_sub(1); }

int64_t GraphStats::live_nodes() { return g_live_nodes.load(); }
int64_t GraphStats::high_water() { return g_high_water.load(); }
void GraphStats::reset_high_water() { g_high_water.store(g_live_nodes.load()); }

// --- graph ------------------------------------------------------------------

namespace {

struct LeafCtx final : OpCtx {
  const char* kind() const override { return "leaf"; }
  void backward(Graph&, std::span<const float>) override {}
};

}  // namespace

int Graph::register_leaf(Tensor& t) {
  check_state(!consumed_, "graph already consumed by backward");
  int id = int(nodes_.size());
  nodes_.push_back(Node{t.shape, t.size(), std::make_unique<LeafCtx>(), true});
  leaves_.push_back(id);
  t.node = id;
  return id;
}

Tensor Graph::make_node(std::vector<int> shape, std::vector<float> data,
                        std::vector<int> parents, std::unique_ptr<OpCtx> ctx) {
  check_state(!consumed_, "graph already consumed by backward");
  for (int p : parents)
    check_state(p >= 0 && p < int(nodes_.size()), "parent node not on this graph");
  Tensor out(std::move(shape), std::move(data));
  out.node = int(nodes_.size());
  nodes_.push_back(Node{out.shape, out.size(), std::move(ctx), false});
  return out;
}

std::span<float> Graph::grad_of(int node_id) {
  check_state(node_id >= 0 && node_id < int(grads_.size()), "grad_of outside backward");
  auto& buf = grads_[size_t(node_id)];
  if (buf.empty()) buf.assign(size_t(nodes_[size_t(node_id)].numel), 0.f);
  return buf;
}

bool Graph::has_grad(int node_id) const {
  return node_id >= 0 && node_id < int(grads_.size()) &&
         !grads_[size_t(node_id)].empty();
}

const std::vector<int>& Graph::node_shape(int id) const {
  check_state(id >= 0 && id < int(nodes_.size()), "node id out of range");
  return nodes_[size_t(id)].shape;
}

bool Graph::is_leaf(int id) const {
  check_state(id >= 0 && id < int(nodes_.size()), "node id out of range");
  return nodes_[size_t(id)].leaf;
}

void Graph::run_backward(int root_id, std::span<const float> seed, GradStore& accum) {
  check_state(!consumed_, "graph already consumed by backward");
  check_state(root_id >= 0 && root_id < int(nodes_.size()), "root not on graph");
  check_arg(int64_t(seed.size()) == nodes_[size_t(root_id)].numel,
            "seed size does not match root");

  grads_.assign(nodes_.size(), {});
  auto g0 = grad_of(root_id);
  std::copy(seed.begin(), seed.end(), g0.begin());

  for (int id = root_id; id >= 0; --id) {
    if (grads_[size_t(id)].empty()) continue;
    Node& n = nodes_[size_t(id)];
    if (!n.leaf) {
      n.ctx->backward(*this, grads_[size_t(id)]);
      grads_[size_t(id)] = {};  // interior grads are not needed again
    }
  }

  for (int leaf : leaves_) {
    auto& gbuf = grads_[size_t(leaf)];
    if (gbuf.empty()) continue;
    auto it = accum.find(leaf);
    if (it == accum.end()) {
      accum.emplace(leaf, Tensor(nodes_[size_t(leaf)].shape, std::move(gbuf)));
    } else {
      float* dst = it->second.data();
      for (size_t i = 0; i < gbuf.size(); ++i) dst[i] += gbuf[i];
    }
  }
  grads_.clear();
  consumed_ = true;
}

void Graph::backward(const Tensor& root, GradStore& accum) {
  check_state(root.node >= 0, "root not on graph");
  check_arg(root.size() == 1, "backward root must be scalar");
  const float one = 1.f;
  run_backward(root.node, std::span<const float>(&one, 1), accum);
}

GradStore Graph::backward(const Tensor& root) {
  GradStore store;
  backward(root, store);
  return store;
}

void Graph::backward_from(int node_id, std::span<const float> seed, GradStore& accum) {
  run_backward(node_id, seed, accum);
}

// --- op helpers ---------------------------------------------------------------

Tensor make_tensor(Graph& g, std::vector<int> shape, std::vector<float> data,
                   bool requires_grad) {
  Tensor t(std::move(shape), std::move(data));
  if (requires_grad) g.register_leaf(t);
  return t;
}

namespace {

void add_into(std::span<float> dst, std::span<const float> src) {
  for (size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

// --- conv2d -------------------------------------------------------------------

void conv2d_forward(const float* in, const float* w, const float* b, float* out,
                    int C, int H, int W, int O) {
  for (int o = 0; o < O; ++o) {
    float* outp = out + size_t(o) * H * W;
    std::fill(outp, outp + size_t(H) * W, b[o]);
    for (int c = 0; c < C; ++c) {
      const float* inp = in + size_t(c) * H * W;
      const float* wp = w + (size_t(o) * C + c) * 9;
      for (int dy = 0; dy < 3; ++dy) {
        int y0 = std::max(0, 1 - dy), y1 = std::min(H, H + 1 - dy);
        for (int dx = 0; dx < 3; ++dx) {
          float wv = wp[dy * 3 + dx];
          if (wv == 0.f) continue;
          int x0 = std::max(0, 1 - dx), x1 = std::min(W, W + 1 - dx);
          for (int y = y0; y < y1; ++y) {
            const float* row = inp + size_t(y + dy - 1) * W + (dx - 1);
            float* orow = outp + size_t(y) * W;
            for (int x = x0; x < x1; ++x) orow[x] += wv * row[x];
          }
        }
      }
    }
  }
}

// Transposed pass: scatter d(out) through the kernel back to d(in).
void conv2d_backward_input(const float* gout, const float* w, float* gin,
                           int C, int H, int W, int O) {
  for (int o = 0; o < O; ++o) {
    const float* gp = gout + size_t(o) * H * W;
    for (int c = 0; c < C; ++c) {
      float* gi = gin + size_t(c) * H * W;
      const float* wp = w + (size_t(o) * C + c) * 9;
      for (int dy = 0; dy < 3; ++dy) {
        int y0 = std::max(0, 1 - dy), y1 = std::min(H, H + 1 - dy);
        for (int dx = 0; dx < 3; ++dx) {
          float wv = wp[dy * 3 + dx];
          if (wv == 0.f) continue;
          int x0 = std::max(0, 1 - dx), x1 = std::min(W, W + 1 - dx);
          for (int y = y0; y < y1; ++y) {
            float* gi_row = gi + size_t(y + dy - 1) * W + (dx - 1);
            const float* gout_row = gp + size_t(y) * W;
            for (int x = x0; x < x1; ++x) gi_row[x] += wv * gout_row[x];
          }
        }
      }
    }
  }
}

struct Conv2dCtx final : OpCtx {
  int input_node;
  Tensor weight;  // shared buffer, not copied
  int C, H, W, O;

  const char* kind() const override { return "conv2d"; }
  void backward(Graph& g, std::span<const float> gout) override {
    auto gin = g.grad_of(input_node);
    conv2d_backward_input(gout.data(), weight.data(), gin.data(), C, H, W, O);
  }
};

// --- maxpool ------------------------------------------------------------------

struct MaxPoolCtx final : OpCtx {
  int input_node;
  int64_t in_numel;
  std::vector<int32_t> argmax;  // flat input index per output element

  const char* kind() const override { return "maxpool2x2"; }
  void backward(Graph& g, std::span<const float> gout) override {
    auto gin = g.grad_of(input_node);
    for (size_t i = 0; i < argmax.size(); ++i) gin[size_t(argmax[i])] += gout[i];
  }
};

// --- elementwise ----------------------------------------------------------------

struct ReluCtx final : OpCtx {
  int input_node;
  Tensor input;

  const char* kind() const override { return "relu"; }
  void backward(Graph& g, std::span<const float> gout) override {
    auto gin = g.grad_of(input_node);
    const float* x = input.data();
    for (size_t i = 0; i < gout.size(); ++i)
      if (x[i] > 0.f) gin[i] += gout[i];
  }
};

struct AddCtx final : OpCtx {
  int a_node, b_node;  // -1 when constant

  const char* kind() const override { return "add"; }
  void backward(Graph& g, std::span<const float> gout) override {
    if (a_node >= 0) add_into(g.grad_of(a_node), gout);
    if (b_node >= 0) add_into(g.grad_of(b_node), gout);
  }
};

struct MulCtx final : OpCtx {
  int a_node, b_node;
  Tensor a, b;

  const char* kind() const override { return "mul"; }
  void backward(Graph& g, std::span<const float> gout) override {
    if (a_node >= 0) {
      auto ga = g.grad_of(a_node);
      const float* bv = b.data();
      for (size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i] * bv[i];
    }
    if (b_node >= 0) {
      auto gb = g.grad_of(b_node);
      const float* av = a.data();
      for (size_t i = 0; i < gout.size(); ++i) gb[i] += gout[i] * av[i];
    }
  }
};

struct ScaleCtx final : OpCtx {
  int input_node;
  float s;

  const char* kind() const override { return "scale"; }
  void backward(Graph& g, std::span<const float> gout) override {
    auto gin = g.grad_of(input_node);
    for (size_t i = 0; i < gout.size(); ++i) gin[i] += gout[i] * s;
  }
};

struct SumCtx final : OpCtx {
  int input_node;

  const char* kind() const override { return "sum"; }
  void backward(Graph& g, std::span<const float> gout) override {
    auto gin = g.grad_of(input_node);
    for (size_t i = 0; i < gin.size(); ++i) gin[i] += gout[0];
  }
};

struct ConcatCtx final : OpCtx {
  std::vector<int> part_nodes;
  std::vector<int64_t> part_sizes;

  const char* kind() const override { return "concat"; }
  void backward(Graph& g, std::span<const float> gout) override {
    size_t off = 0;
    for (size_t i = 0; i < part_nodes.size(); ++i) {
      size_t n = size_t(part_sizes[i]);
      if (part_nodes[i] >= 0)
        add_into(g.grad_of(part_nodes[i]), gout.subspan(off, n));
      off += n;
    }
  }
};

struct ChannelAffineCtx final : OpCtx {
  int input_node;
  std::vector<float> inv_scale;
  int64_t plane;

  const char* kind() const override { return "channel_affine"; }
  void backward(Graph& g, std::span<const float> gout) override {
    auto gin = g.grad_of(input_node);
    for (size_t c = 0; c < inv_scale.size(); ++c) {
      float s = inv_scale[c];
      size_t base = c * size_t(plane);
      for (size_t i = 0; i < size_t(plane); ++i) gin[base + i] += gout[base + i] * s;
    }
  }
};

}  // namespace

Tensor conv2d(Graph& g, const Tensor& input, const Tensor& weight, const Tensor& bias) {
  check_arg(input.shape.size() == 3, "conv2d input must be CxHxW");
  check_arg(weight.shape.size() == 4 && weight.shape[2] == 3 && weight.shape[3] == 3,
            "conv2d weight must be OxCx3x3");
  check_arg(bias.shape.size() == 1, "conv2d bias must be 1-D");
  int C = input.shape[0], H = input.shape[1], W = input.shape[2];
  int O = weight.shape[0];
  check_arg(weight.shape[1] == C, "conv2d channel mismatch");
  check_arg(bias.shape[0] == O, "conv2d bias size mismatch");
  check_arg(!weight.requires_grad() && !bias.requires_grad(),
            "conv2d weights are constants; gradients flow to the input only");

  std::vector<float> out(size_t(O) * H * W);
  conv2d_forward(input.data(), weight.data(), bias.data(), out.data(), C, H, W, O);

  if (!input.requires_grad()) return Tensor({O, H, W}, std::move(out));

  auto ctx = std::make_unique<Conv2dCtx>();
  ctx->input_node = input.node;
  ctx->weight = weight;
  ctx->C = C;
  ctx->H = H;
  ctx->W = W;
  ctx->O = O;
  return g.make_node({O, H, W}, std::move(out), {input.node}, std::move(ctx));
}

Tensor maxpool2x2(Graph& g, const Tensor& input) {
  check_arg(input.shape.size() == 3, "maxpool input must be CxHxW");
  int C = input.shape[0], H = input.shape[1], W = input.shape[2];
  check_arg(H >= 2 && W >= 2, "maxpool needs H,W >= 2");
  int Ho = H / 2, Wo = W / 2;

  std::vector<float> out(size_t(C) * Ho * Wo);
  std::vector<int32_t> argmax(out.size());
  const float* in = input.data();
  for (int c = 0; c < C; ++c) {
    for (int y = 0; y < Ho; ++y) {
      for (int x = 0; x < Wo; ++x) {
        float best = -std::numeric_limits<float>::infinity();
        int32_t best_idx = 0;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            int32_t idx = int32_t((size_t(c) * H + size_t(2 * y + dy)) * W) +
                          int32_t(2 * x + dx);
            float v = in[idx];
            if (v > best) {  // strict: ties keep the first in scan order
              best = v;
              best_idx = idx;
            }
          }
        }
        out[(size_t(c) * Ho + size_t(y)) * Wo + size_t(x)] = best;
        argmax[(size_t(c) * Ho + size_t(y)) * Wo + size_t(x)] = best_idx;
      }
    }
  }

  if (!input.requires_grad()) return Tensor({C, Ho, Wo}, std::move(out));

  auto ctx = std::make_unique<MaxPoolCtx>();
  ctx->input_node = input.node;
  ctx->in_numel = input.size();
  ctx->argmax = std::move(argmax);
  return g.make_node({C, Ho, Wo}, std::move(out), {input.node}, std::move(ctx));
}

Tensor relu(Graph& g, const Tensor& input) {
  std::vector<float> out(size_t(input.size()));
  const float* x = input.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.f ? x[i] : 0.f;

  if (!input.requires_grad()) return Tensor(input.shape, std::move(out));

  auto ctx = std::make_unique<ReluCtx>();
  ctx->input_node = input.node;
  ctx->input = input;
  return g.make_node(input.shape, std::move(out), {input.node}, std::move(ctx));
}

Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
  check_arg(a.shape == b.shape, "add shape mismatch");
  std::vector<float> out(size_t(a.size()));
  const float* av = a.data();
  const float* bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];

  if (!a.requires_grad() && !b.requires_grad()) return Tensor(a.shape, std::move(out));

  auto ctx = std::make_unique<AddCtx>();
  ctx->a_node = a.node;
  ctx->b_node = b.node;
  std::vector<int> parents;
  if (a.node >= 0) parents.push_back(a.node);
  if (b.node >= 0) parents.push_back(b.node);
  return g.make_node(a.shape, std::move(out), std::move(parents), std::move(ctx));
}

Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
  check_arg(a.shape == b.shape, "mul shape mismatch");
  std::vector<float> out(size_t(a.size()));
  const float* av = a.data();
  const float* bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];

  if (!a.requires_grad() && !b.requires_grad()) return Tensor(a.shape, std::move(out));

  auto ctx = std::make_unique<MulCtx>();
  ctx->a_node = a.node;
  ctx->b_node = b.node;
  ctx->a = a;
  ctx->b = b;
  std::vector<int> parents;
  if (a.node >= 0) parents.push_back(a.node);
  if (b.node >= 0) parents.push_back(b.node);
  return g.make_node(a.shape, std::move(out), std::move(parents), std::move(ctx));
}

Tensor scale(Graph& g, const Tensor& a, float s) {
  std::vector<float> out(size_t(a.size()));
  const float* av = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;

  if (!a.requires_grad()) return Tensor(a.shape, std::move(out));

  auto ctx = std::make_unique<ScaleCtx>();
  ctx->input_node = a.node;
  ctx->s = s;
  return g.make_node(a.shape, std::move(out), {a.node}, std::move(ctx));
}

Tensor sum(Graph& g, const Tensor& a) {
  double acc = 0.0;
  const float* av = a.data();
  for (int64_t i = 0; i < a.size(); ++i) acc += av[i];
  std::vector<float> out{float(acc)};

  if (!a.requires_grad()) return Tensor({1}, std::move(out));

  auto ctx = std::make_unique<SumCtx>();
  ctx->input_node = a.node;
  return g.make_node({1}, std::move(out), {a.node}, std::move(ctx));
}

Tensor concat_channels(Graph& g, const std::vector<Tensor>& parts) {
  check_arg(!parts.empty(), "concat of zero parts");
  int H = parts[0].shape.size() == 3 ? parts[0].shape[1] : -1;
  int W = parts[0].shape.size() == 3 ? parts[0].shape[2] : -1;
  check_arg(H > 0, "concat parts must be CxHxW");
  int Ctot = 0;
  bool tracked = false;
  for (const Tensor& p : parts) {
    check_arg(p.shape.size() == 3 && p.shape[1] == H && p.shape[2] == W,
              "concat spatial size mismatch");
    Ctot += p.shape[0];
    tracked = tracked || p.requires_grad();
  }

  std::vector<float> out;
  out.reserve(size_t(Ctot) * H * W);
  for (const Tensor& p : parts) out.insert(out.end(), p.buf->begin(), p.buf->end());

  if (!tracked) return Tensor({Ctot, H, W}, std::move(out));

  auto ctx = std::make_unique<ConcatCtx>();
  std::vector<int> parents;
  for (const Tensor& p : parts) {
    ctx->part_nodes.push_back(p.node);
    ctx->part_sizes.push_back(p.size());
    if (p.node >= 0) parents.push_back(p.node);
  }
  return g.make_node({Ctot, H, W}, std::move(out), std::move(parents), std::move(ctx));
}

Tensor channel_affine(Graph& g, const Tensor& input, std::span<const float> shift,
                      std::span<const float> inv_scale) {
  check_arg(input.shape.size() == 3, "channel_affine input must be CxHxW");
  int C = input.shape[0];
  check_arg(int(shift.size()) == C && int(inv_scale.size()) == C,
            "channel_affine parameter size mismatch");
  int64_t plane = int64_t(input.shape[1]) * input.shape[2];

  std::vector<float> out(size_t(input.size()));
  const float* x = input.data();
  for (int c = 0; c < C; ++c) {
    size_t base = size_t(c) * size_t(plane);
    for (size_t i = 0; i < size_t(plane); ++i)
      out[base + i] = (x[base + i] - shift[size_t(c)]) * inv_scale[size_t(c)];
  }

  if (!input.requires_grad()) return Tensor(input.shape, std::move(out));

  auto ctx = std::make_unique<ChannelAffineCtx>();
  ctx->input_node = input.node;
  ctx->inv_scale.assign(inv_scale.begin(), inv_scale.end());
  ctx->plane = plane;
  return g.make_node(input.shape, std::move(out), {input.node}, std::move(ctx));
}

Tensor numeric_grad(const std::function<float(const Tensor&)>& f, const Tensor& x,
                    float eps) {
  check_arg(eps > 0.f, "numeric_grad eps must be positive");
  Tensor grad = Tensor::zeros(x.shape);
  Tensor probe(x.shape, std::vector<float>(*x.buf));
  float* p = probe.data();
  for (int64_t i = 0; i < x.size(); ++i) {
    float orig = p[i];
    p[i] = orig + eps;
    float fp = f(probe);
    p[i] = orig - eps;
    float fm = f(probe);
    p[i] = orig;
    grad.data()[i] = (fp - fm) / (2.f * eps);
  }
  return grad;
}

}  // namespace arf
