#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace advlens {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until the first accumulation
    bool requires_grad = false;
    bool is_leaf = true;
    Tape* tape = nullptr;  // tape that produced this tensor, if any
    std::size_t tape_node = 0;
    std::atomic<int> tape_refs{0};

    // Adds g into the gradient store, allocating it on first use.
    void accumulate_grad(std::span<const double> g);
    std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Dense row-major double tensor. Copies share storage; use detach() or
/// clone() for an independent value.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape);
    static Tensor ones(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    // Negative axes count from the back.
    std::size_t size(std::ptrdiff_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    // Throws if the tensor is referenced by a live tape.
    std::span<double> mutable_data();
    double item() const;
    double operator[](std::size_t flat) const { return data()[flat]; }

    bool requires_grad() const;
    Tensor& requires_grad_(bool value = true);
    bool is_leaf() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    Tensor grad_tensor() const;
    void zero_grad();

    // Fresh copy of the values, detached from any tape, no grad.
    Tensor detach() const;

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of differentiable operations. Constructing a Tape makes it
/// the recording target for the current thread until it is destroyed; tapes
/// nest like a stack.
class Tape {
public:
    using BackwardFn = std::function<void(std::span<const double> out_grad)>;

    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() noexcept;

    void record(std::vector<std::shared_ptr<detail::TensorImpl>> inputs,
                const std::shared_ptr<detail::TensorImpl>& output, BackwardFn fn);

    // Populates grads of every requires_grad leaf reachable from loss.
    // Leaf grads accumulate across calls; intermediate grads are reset.
    void backward(const Tensor& loss);

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
        std::shared_ptr<detail::TensorImpl> output;
        BackwardFn fn;
    };
    std::vector<Node> nodes_;
    Tape* previous_;

    friend class NoGradScope;
};

/// Disables recording on this thread for its lifetime.
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* saved_;
};

// Runs backward on the tape that produced loss.
void backward(const Tensor& loss);

}  // namespace advlens
