#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "condhar/errors.hpp"

namespace condhar {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One record of the eagerly built computation graph. `backward_fn` reads
// `grad` of this node and accumulates into the parents' grads.
struct Node {
    std::uint64_t id = 0;  // creation order; inputs always have smaller ids
    std::string op;
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;

    std::vector<double>& grad_buffer();  // allocates zeros on first use
};

/// Dense row-major float64 tensor with optional gradient tracking.
///
/// Copies share the underlying node (handle semantics); use `clone()` for a
/// detached deep copy. Values are treated as immutable once an operation has
/// consumed them, except for parameters updated by an optimizer between
/// graph constructions.
class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows,
                            bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const { return data().size(); }

    std::span<const double> data() const;
    std::span<double> mutable_data();  // for optimizers and initializers only
    double item() const;
    double at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    void set_requires_grad(bool on);

    bool has_grad() const;
    // Zero-filled when no gradient has reached this tensor.
    std::vector<double> grad() const;
    void zero_grad();

    Tensor clone() const;   // detached copy of the values
    Tensor detach() const;  // shares nothing with the graph

    const NodePtr& node() const { return node_; }
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

private:
    NodePtr node_;
};

// Creates a graph node for an op result. Tracks gradients when any parent does.
// Throws NumericError when the forward values are not finite.
Tensor make_result(std::string op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> parents, std::function<void(Node&)> backward_fn);

/// Nodes reachable from a root, in topological (creation) order.
class Graph {
public:
    static Graph collect(const Tensor& root);

    const std::vector<NodePtr>& nodes() const { return nodes_; }
    std::size_t size() const { return nodes_.size(); }

    // Runs the reverse sweep seeded with d(root)/d(root) = 1. Each node's
    // backward_fn is invoked exactly once, in reverse order.
    void backward(const Tensor& root) const;

private:
    std::vector<NodePtr> nodes_;
};

// Reverse-mode gradient of a scalar loss into every tracked leaf reachable
// from it. Gradients accumulate; call zero_grad() between steps.
void backward(const Tensor& loss);

/// Max relative error between the analytic gradient of `f` at `x` and a central
/// difference with step `eps`:
///   max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8).
/// `f` must return a scalar tensor built from its argument.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-5);

// Same measure for tensors captured by `loss_fn` (layer parameters). Each
// parameter is perturbed in place and restored.
double grad_check_params(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                         double eps = 1e-5);

// Intra-op parallelism. Work is split into contiguous chunks whose results
// never depend on the thread count. Default 1.
void set_num_threads(std::size_t n);
std::size_t num_threads();
void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace condhar
