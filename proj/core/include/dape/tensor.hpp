#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dape/rng.hpp"

namespace dape {

// Dense float64 tensor with optional gradient storage. Value-semantic
// handle: copies share the underlying node, so a parameter updated by the
// optimizer is seen by everyone holding the handle.
class Tensor {
public:
    struct Node {
        std::vector<int> shape;
        std::vector<double> data;
        std::vector<double> grad;  // empty until first accumulation
        bool requires_grad = false;

        std::size_t numel() const { return data.size(); }
        void ensure_grad() {
            if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
        }
    };

    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    // entries drawn iid normal(0, stddev)
    static Tensor randn(std::vector<int> shape, double stddev, Rng& rng,
                        bool requires_grad = false);
    // entries drawn iid uniform(-bound, bound)
    static Tensor rand_uniform(std::vector<int> shape, double bound, Rng& rng,
                               bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::size_t numel() const { return node_->data.size(); }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }
    double value() const;  // scalar accessor; throws on non-scalar

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<double>& grad();              // allocates zeros if absent
    const std::vector<double>& grad() const;  // throws if absent
    void zero_grad();

    const std::shared_ptr<Node>& node() const { return node_; }
    static Tensor wrap(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }

private:
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
    std::shared_ptr<Node> node_;
};

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Record of one forward pass. Operations executed while a TapeScope is
// active append their backward rule in creation order, which is a
// topological order by construction; backward() replays the rules in
// reverse, visiting each exactly once.
class Tape {
public:
    void record(std::function<void()> backward_rule) {
        entries_.push_back(std::move(backward_rule));
    }
    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    // Seeds d(loss)/d(loss)=1 and propagates to every requires_grad tensor
    // reachable from loss. Gradients accumulate additively across fan-out
    // and across repeated backward() calls.
    void backward(const Tensor& loss);

private:
    std::vector<std::function<void()>> entries_;
};

// RAII activation of a tape for the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

// Innermost active tape of the current thread, or nullptr (inference mode).
Tape* active_tape();

}  // namespace dape
