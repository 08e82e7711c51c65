#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace segnet {

/// Extents of a rank-4 tensor in N-C-H-W order.
struct Shape {
  std::size_t n = 0, c = 0, h = 0, w = 0;

  constexpr std::size_t numel() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }
};

/// Training runs in float, gradient checks in double. A graph never mixes the two
/// because every op is templated on a single scalar type.
enum class Precision { train32, check64 };

template <typename T>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? Precision::train32 : Precision::check64;
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  bool backward_done = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Handle to a node of the autodiff graph. Copies share the node.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->shape = shape;
    node_->data.assign(shape.numel(), fill);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (values.size() != shape.numel()) {
      throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                  " values do not fill shape " + shape.str());
    }
    node_->shape = shape;
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor from_node(std::shared_ptr<Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->data.size(); }

  std::vector<T>& data() & { return node_->data; }
  const std::vector<T>& data() const& { return node_->data; }
  // By value on temporaries, so `for (v : op(x).data())` does not dangle.
  std::vector<T> data() && { return node_->data; }
  const std::vector<T>& grad() const { return node_->grad; }
  std::vector<T>& mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool is_leaf() const { return node_->is_leaf(); }
  const char* op() const { return node_->op; }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    const Shape& s = node_->shape;
    return node_->data[((n * s.c + c) * s.h + h) * s.w + w];
  }
  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const Shape& s = node_->shape;
    return node_->data[((n * s.c + c) * s.h + h) * s.w + w];
  }
  T item() const {
    if (numel() != 1) throw std::invalid_argument("item: tensor is not scalar: " + shape().str());
    return node_->data[0];
  }

  /// Fresh leaf holding a copy of the values, detached from any graph.
  Tensor detach() const { return Tensor(shape(), data(), false); }

  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Creates an op output. The backward rule is attached only when some input
/// needs a gradient, so inference graphs stay closure-free.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                      std::vector<Tensor<T>> inputs, std::function<void(Node<T>&)> rule) {
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  node->shape = shape;
  node->data = std::move(data);
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (auto& in : inputs) node->parents.push_back(in.node_ptr());
    node->backward_fn = std::move(rule);
  }
  return Tensor<T>::from_node(std::move(node));
}

/// Reverse-mode sweep from a scalar loss. Every reachable requires_grad leaf
/// accumulates dLoss/dLeaf into its grad. A second call on the same loss throws.
template <typename T>
void backward(Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + loss.shape().str());
  }
  if (!std::isfinite(static_cast<double>(loss.item()))) {
    throw std::domain_error("backward: loss is not finite");
  }
  Node<T>& root = loss.node();
  if (root.backward_done) {
    throw std::logic_error("backward: graph already consumed by a previous backward call");
  }
  if (!root.requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{&root, 0}};
  seen.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.ensure_grad();
  root.grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->is_leaf() || !node->backward_fn) continue;
    if (node->grad.empty()) continue;  // no gradient reached this node
    for (auto& p : node->parents) {
      if (p->requires_grad) p->ensure_grad();
    }
    node->backward_fn(*node);
    node->backward_done = true;
  }
  root.backward_done = true;
}

}  // namespace segnet
