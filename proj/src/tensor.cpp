#include "condhar/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <thread>
#include <unordered_set>

namespace condhar {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
std::size_t g_threads = 1;

NodePtr new_node(std::string op, Shape shape, std::vector<double> data, bool requires_grad) {
    if (numel(shape) != data.size()) {
        throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                             std::to_string(numel(shape)) + " values but " +
                             std::to_string(data.size()) + " were given");
    }
    auto n = std::make_shared<Node>();
    n->id = g_next_id.fetch_add(1);
    n->op = std::move(op);
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return n;
}

}  // namespace

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::vector<double>& Node::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
}

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(new_node("leaf", std::move(shape), std::move(data), requires_grad)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(Shape{1}, {value}, requires_grad);
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows,
                         bool requires_grad) {
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    std::vector<double> data;
    for (const auto& r : rows) {
        if (r.size() != cols) throw DimensionError("ragged rows in from_rows");
        data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(data), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= node_->shape.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                             shape_str(node_->shape));
    }
    return node_->shape[axis];
}

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
    if (node_->data.size() != 1) {
        throw ContractError("item() on tensor of shape " + shape_str(node_->shape));
    }
    return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    const auto& s = node_->shape;
    if (index.size() != s.size()) throw DimensionError("index rank mismatch");
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= s[axis]) throw DimensionError("index out of range");
        flat = flat * s[axis] + i;
        ++axis;
    }
    return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool on) { node_->requires_grad = on; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::vector<double> Tensor::grad() const {
    if (node_->grad.empty()) return std::vector<double>(node_->data.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::clone() const { return Tensor(node_->shape, node_->data, node_->requires_grad); }

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data, false); }

Tensor make_result(std::string op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> parents, std::function<void(Node&)> backward_fn) {
    for (double v : data) {
        if (!std::isfinite(v)) throw NumericError("non-finite value produced by " + op);
    }
    bool track = std::any_of(parents.begin(), parents.end(),
                             [](const Tensor& p) { return p.requires_grad(); });
    auto node = new_node(std::move(op), std::move(shape), std::move(data), track);
    if (track) {
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.node());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

Graph Graph::collect(const Tensor& root) {
    Graph g;
    if (!root.defined() || !root.requires_grad()) return g;
    std::unordered_set<const Node*> seen;
    std::vector<NodePtr> stack{root.node()};
    while (!stack.empty()) {
        auto n = std::move(stack.back());
        stack.pop_back();
        if (!seen.insert(n.get()).second) continue;
        for (const auto& p : n->parents) {
            if (p->requires_grad && !seen.count(p.get())) stack.push_back(p);
        }
        g.nodes_.push_back(std::move(n));
    }
    std::sort(g.nodes_.begin(), g.nodes_.end(),
              [](const NodePtr& a, const NodePtr& b) { return a->id < b->id; });
    return g;
}

void Graph::backward(const Tensor& root) const {
    if (root.size() != 1) {
        throw ContractError("backward needs a scalar loss, got shape " + shape_str(root.shape()));
    }
    if (nodes_.empty()) return;
    root.node()->grad_buffer()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = **it;
        if (n.backward_fn && !n.grad.empty()) n.backward_fn(n);
    }
    // Interior gradients are not needed after the sweep.
    for (const auto& n : nodes_) {
        if (n->backward_fn) n->grad.clear();
    }
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward needs a scalar loss" +
                            (loss.defined() ? ", got shape " + shape_str(loss.shape())
                                            : std::string()));
    }
    Graph::collect(loss).backward(loss);
}

namespace {

double checked_scalar(const Tensor& t) {
    if (t.size() != 1) throw ContractError("grad_check needs a scalar-valued function");
    double v = t.item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
}

double rel_error(double analytic, double numeric) {
    double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

void check_eps(double eps) {
    if (!(eps >= 1e-7 && eps <= 1e-3)) {
        throw ContractError("grad_check step must lie in [1e-7, 1e-3]");
    }
}

}  // namespace

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
    check_eps(eps);
    Tensor probe(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
    Tensor out = f(probe);
    checked_scalar(out);
    backward(out);
    const auto analytic = probe.grad();

    double worst = 0.0;
    std::vector<double> base(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < base.size(); ++i) {
        auto plus = base;
        auto minus = base;
        plus[i] += eps;
        minus[i] -= eps;
        double fp = checked_scalar(f(Tensor(x.shape(), std::move(plus))));
        double fm = checked_scalar(f(Tensor(x.shape(), std::move(minus))));
        worst = std::max(worst, rel_error(analytic[i], (fp - fm) / (2.0 * eps)));
    }
    return worst;
}

double grad_check_params(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                         double eps) {
    check_eps(eps);
    for (auto& p : params) p.zero_grad();
    Tensor out = loss_fn();
    checked_scalar(out);
    backward(out);

    double worst = 0.0;
    for (auto& p : params) {
        const auto analytic = p.grad();
        auto values = p.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + eps;
            double fp = checked_scalar(loss_fn());
            values[i] = saved - eps;
            double fm = checked_scalar(loss_fn());
            values[i] = saved;
            worst = std::max(worst, rel_error(analytic[i], (fp - fm) / (2.0 * eps)));
        }
        p.zero_grad();
    }
    return worst;
}

void set_num_threads(std::size_t n) { g_threads = std::max<std::size_t>(1, n); }
std::size_t num_threads() { return g_threads; }

void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& body) {
    const std::size_t workers = std::min(g_threads, count);
    if (workers <= 1) {
        if (count) body(0, count);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    const std::size_t chunk = (count + workers - 1) / workers;
    for (std::size_t w = 1; w < workers; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(count, lo + chunk);
        if (lo < hi) pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    body(0, std::min(count, chunk));
    for (auto& t : pool) t.join();
}

}  // namespace condhar
