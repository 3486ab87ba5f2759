// Dense NCHW tensor with reverse-mode autodiff. Define-by-run: every forward
// op builds a node holding its output and a backward closure; the tape is the
// shared_ptr graph itself and is rebuilt on every forward pass.
#pragma once

#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "common.hpp"

namespace cunet {

template <typename T>
class Tensor {
 public:
  struct Node {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until backward needs it
    bool needs_grad = false;
    bool is_leaf = true;
    bool backward_ran = false;
    const char* op = "leaf";
    std::vector<Tensor> parents;
    std::function<void(Node&)> backward_fn;

    Node() = default;
    ~Node() { memstats::sub(int64_t((data.capacity() + grad.capacity()) * sizeof(T))); }
    Node(const Node&) = delete;
    Node& operator=(const Node&) = delete;
  };

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape) {
    Tensor t;
    t.node_ = alloc_node(std::move(shape));
    return t;
  }

  static Tensor full(std::vector<int> shape, T v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.node_->data.begin(), t.node_->data.end(), v);
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<T> values) {
    int64_t n = count(shape);
    require(int64_t(values.size()) == n, "tensor: data length does not match shape product");
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(values);
    memstats::add(int64_t(t.node_->data.capacity() * sizeof(T)));
    return t;
  }

  static Tensor scalar(T v) { return full({1}, v); }

  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0, double mean = 0.0) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.node_->data) v = T(rng.normal(mean, stddev));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int ndim() const { return int(node_->shape.size()); }
  int dim(int i) const { return node_->shape[size_t(i)]; }
  int64_t numel() const { return int64_t(node_->data.size()); }

  T* data() { return node_->data.data(); }
  const T* data() const { return node_->data.data(); }
  std::vector<T>& vec() { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }

  T item() const {
    require(numel() == 1, "item(): tensor is not scalar");
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->needs_grad; }

  // Leaf-only flag; op outputs derive their participation from parents.
  void set_requires_grad(bool b) {
    require(node_->is_leaf, "set_requires_grad: only valid on leaf tensors");
    node_->needs_grad = b;
  }

  // Gradient buffer, allocated (zeroed) on demand for grad-enabled tensors.
  std::vector<T>& grad() {
    require(node_->needs_grad, "grad(): tensor does not require grad");
    ensure_grad_alloc(*node_);
    return node_->grad;
  }

  bool has_grad() const { return node_ && !node_->grad.empty(); }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  // Reverse sweep from a scalar. Visits each reachable node exactly once in
  // reverse topological order. A second call without a fresh forward throws.
  // Intermediate grad buffers are released as soon as their node has run.
  void backward() {
    require(defined(), "backward(): undefined tensor");
    require(numel() == 1, "backward(): loss must be scalar, got numel=" + std::to_string(numel()));
    if (!node_->needs_grad) return;  // constant loss: nothing depends on parameters
    require(!node_->backward_ran, "backward(): tape already consumed; re-run forward first");

    std::vector<Node*> order;
    topo_sort(node_.get(), order);
    ensure_grad_alloc(*node_);
    node_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward_fn) {
        n->backward_fn(*n);
        n->backward_fn = nullptr;
      }
      n->backward_ran = true;
      if (!n->is_leaf && !n->grad.empty()) {
        memstats::sub(int64_t(n->grad.capacity() * sizeof(T)));
        n->grad.clear();
        n->grad.shrink_to_fit();
      }
    }
  }

  // --- internals used by the op layer ---

  static Tensor make_op(std::vector<int> shape, std::vector<Tensor> parents, const char* opname,
                        std::function<void(Node&)> backward_fn) {
    Tensor out = zeros(std::move(shape));
    finish_op(out, std::move(parents), opname, std::move(backward_fn));
    return out;
  }

  // For ops that fill data before wiring the graph.
  static void finish_op(Tensor& out, std::vector<Tensor> parents, const char* opname,
                        std::function<void(Node&)> backward_fn) {
    Node& n = *out.node_;
    n.is_leaf = false;
    n.op = opname;
    bool needs = false;
    for (const auto& p : parents) needs = needs || (p.defined() && p.node_->needs_grad);
    if (needs) {
      n.needs_grad = true;
      n.parents = std::move(parents);
      n.backward_fn = std::move(backward_fn);
    }
    if (debug_checks_flag()) check_finite(out, opname);
  }

  Node* node() { return node_.get(); }
  const Node* node() const { return node_.get(); }
  Tensor& parent(size_t i) { return node_->parents[i]; }

  // Accumulation target for a parent during backward; null if that parent is
  // a constant (no grad flows into it).
  static T* parent_grad(Node& self, size_t i) {
    Node* p = self.parents[i].node_.get();
    if (!p->needs_grad) return nullptr;
    ensure_grad_alloc(*p);
    return p->grad.data();
  }

  static void check_finite(const Tensor& t, const char* opname) {
    for (T v : t.node_->data) {
      if (!std::isfinite(double(v)))
        fail("non-finite value produced by op '", opname, "'");
    }
  }

 private:
  std::shared_ptr<Node> node_;

  static int64_t count(const std::vector<int>& shape) {
    require(!shape.empty(), "tensor: shape must not be empty");
    int64_t n = 1;
    for (int d : shape) {
      require(d > 0, "tensor: shape entries must be positive");
      n *= d;
    }
    return n;
  }

  static std::shared_ptr<Node> alloc_node(std::vector<int> shape) {
    int64_t n = count(shape);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data.assign(size_t(n), T(0));
    memstats::add(int64_t(node->data.capacity() * sizeof(T)));
    return node;
  }

  static void ensure_grad_alloc(Node& n) {
    if (n.grad.empty()) {
      n.grad.assign(n.data.size(), T(0));
      memstats::add(int64_t(n.grad.capacity() * sizeof(T)));
    }
  }

  static void topo_sort(Node* root, std::vector<Node*>& order) {
    std::unordered_set<Node*> seen;
    // Iterative DFS; graphs are deep enough that recursion is unsafe.
    struct Frame {
      Node* n;
      size_t next_parent;
    };
    std::vector<Frame> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.n->parents.size()) {
        Node* p = f.n->parents[f.next_parent++].node_.get();
        if (p->needs_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(f.n);
        stack.pop_back();
      }
    }
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Integer label map (class indices), shape [N,H,W] or [H,W].
struct LabelMap {
  std::vector<int> shape;
  std::vector<int32_t> v;

  int64_t numel() const { return int64_t(v.size()); }
  static LabelMap zeros(std::vector<int> shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return LabelMap{std::move(shape), std::vector<int32_t>(size_t(n), 0)};
  }
};

}  // namespace cunet
