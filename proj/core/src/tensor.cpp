#include "dape/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace dape {

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::runtime_error("shape error: non-positive dimension in " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->data.assign(shape_numel(shape), 0.0);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.data()) v = value;
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw std::runtime_error("shape error: " + shape_str(shape) + " does not hold " +
                                 std::to_string(data.size()) + " values");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(std::vector<int> shape, double stddev, Rng& rng, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.data()) v = rng.normal(0.0, stddev);
    return t;
}

Tensor Tensor::rand_uniform(std::vector<int> shape, double bound, Rng& rng, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
}

double Tensor::value() const {
    if (numel() != 1) throw std::runtime_error("contract error: expected scalar, got " + shape_str(shape()));
    return node_->data[0];
}

std::vector<double>& Tensor::grad() {
    node_->ensure_grad();
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (node_->grad.empty())
        throw std::runtime_error("contract error: gradient not populated for tensor " + shape_str(shape()));
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw std::runtime_error("contract error: backward requires a scalar loss");
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

}  // namespace dape
