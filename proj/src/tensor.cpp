#include "advlens/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace advlens {

namespace {
thread_local Tape* g_current_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto extent : shape) n *= extent;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

void TensorImpl::accumulate_grad(std::span<const double> g) {
    auto& buf = grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

std::vector<double>& TensorImpl::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
}

}  // namespace detail

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
    if (shape_numel(shape) != data.size()) {
        throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " holds " +
                                    std::to_string(shape_numel(shape)) + " values, got " +
                                    std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

const Shape& Tensor::shape() const {
    if (!impl_) throw std::logic_error("Tensor: use of undefined tensor");
    return impl_->shape;
}

std::size_t Tensor::size(std::ptrdiff_t axis) const {
    const auto& s = shape();
    const auto r = static_cast<std::ptrdiff_t>(s.size());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) {
        throw std::out_of_range("Tensor::size: axis out of range for shape " + shape_str(s));
    }
    return s[static_cast<std::size_t>(axis)];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const {
    if (!impl_) throw std::logic_error("Tensor: use of undefined tensor");
    return impl_->data;
}

std::span<double> Tensor::mutable_data() {
    if (!impl_) throw std::logic_error("Tensor: use of undefined tensor");
    if (impl_->tape_refs.load() > 0) {
        throw std::logic_error("Tensor: in-place mutation of a tensor held by a live tape");
    }
    return impl_->data;
}

double Tensor::item() const {
    if (numel() != 1) {
        throw std::logic_error("Tensor::item: expected one element, shape " + shape_str(shape()));
    }
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::requires_grad_(bool value) {
    if (!impl_) throw std::logic_error("Tensor: use of undefined tensor");
    if (!impl_->is_leaf) throw std::logic_error("Tensor: requires_grad_ on a non-leaf tensor");
    impl_->requires_grad = value;
    return *this;
}

bool Tensor::is_leaf() const { return !impl_ || impl_->is_leaf; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!impl_) throw std::logic_error("Tensor: use of undefined tensor");
    return impl_->grad;
}

Tensor Tensor::grad_tensor() const {
    if (!has_grad()) return Tensor::zeros(shape());
    return Tensor(impl_->shape, impl_->grad);
}

void Tensor::zero_grad() {
    if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data); }

Tape::Tape() : previous_(g_current_tape) { g_current_tape = this; }

Tape::~Tape() {
    for (auto& node : nodes_) {
        for (auto& in : node.inputs) in->tape_refs.fetch_sub(1);
        node.output->tape_refs.fetch_sub(1);
        node.output->tape = nullptr;
    }
    g_current_tape = previous_;
}

Tape* Tape::current() noexcept { return g_current_tape; }

void Tape::record(std::vector<std::shared_ptr<detail::TensorImpl>> inputs,
                  const std::shared_ptr<detail::TensorImpl>& output, BackwardFn fn) {
    for (auto& in : inputs) in->tape_refs.fetch_add(1);
    output->tape_refs.fetch_add(1);
    output->requires_grad = true;
    output->is_leaf = false;
    output->tape = this;
    output->tape_node = nodes_.size();
    nodes_.push_back(Node{std::move(inputs), output, std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                    (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    const auto& li = loss.impl();
    if (li->tape != this) {
        throw std::invalid_argument("backward: loss is not connected to this tape");
    }
    for (auto& node : nodes_) node.output->grad.clear();
    li->grad.assign(1, 1.0);
    for (std::size_t i = li->tape_node + 1; i-- > 0;) {
        auto& node = nodes_[i];
        if (node.output->grad.empty()) continue;
        node.fn(node.output->grad);
    }
}

NoGradScope::NoGradScope() : saved_(g_current_tape) { g_current_tape = nullptr; }
NoGradScope::~NoGradScope() { g_current_tape = saved_; }

void backward(const Tensor& loss) {
    if (!loss.defined() || !loss.impl()->tape) {
        throw std::invalid_argument("backward: loss is not connected to a live tape");
    }
    loss.impl()->tape->backward(loss);
}

}  // namespace advlens
