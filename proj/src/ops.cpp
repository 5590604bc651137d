#include "advlens/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "advlens/kernels.hpp"

namespace advlens {

namespace {

using ImplPtr = std::shared_ptr<detail::TensorImpl>;

[[noreturn]] void shape_error(const char* op, const std::string& what) {
    throw std::invalid_argument(std::string(op) + ": " + what);
}

void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) shape_error(op, "undefined tensor operand");
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (Tape::current() == nullptr) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

void record(const Tensor& out, std::vector<ImplPtr> inputs, Tape::BackwardFn fn) {
    Tape::current()->record(std::move(inputs), out.impl(), std::move(fn));
}

std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank, const char* op) {
    const auto r = static_cast<std::ptrdiff_t>(rank);
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) shape_error(op, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    return static_cast<std::size_t>(axis);
}

// Strides of `in` expressed in the coordinate system of `out`, zero on
// broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    std::size_t stride = 1;
    for (std::size_t k = 0; k < in.size(); ++k) {
        const std::size_t ii = in.size() - 1 - k;
        const std::size_t oi = out.size() - 1 - k;
        strides[oi] = in[ii] == 1 && out[oi] != 1 ? 0 : stride;
        stride *= in[ii];
    }
    return strides;
}

// Calls f(flat_out, offset_a, offset_b) for every element of `out`.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb, F&& f) {
    const std::size_t total = shape_numel(out);
    if (total == 0) return;
    const std::size_t r = out.size();
    if (r == 0) {
        f(std::size_t{0}, std::size_t{0}, std::size_t{0});
        return;
    }
    const std::size_t inner = out[r - 1];
    const std::size_t ia = sa[r - 1], ib = sb[r - 1];
    std::vector<std::size_t> counter(r, 0);
    std::size_t off_a = 0, off_b = 0;
    for (std::size_t base = 0; base < total; base += inner) {
        for (std::size_t j = 0; j < inner; ++j) f(base + j, off_a + j * ia, off_b + j * ib);
        for (std::size_t ax = r - 1; ax-- > 0;) {
            ++counter[ax];
            off_a += sa[ax];
            off_b += sb[ax];
            if (counter[ax] < out[ax]) break;
            off_a -= sa[ax] * counter[ax];
            off_b -= sb[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
}

template <class Fwd, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, DA da, DB db) {
    require_defined(a, op);
    require_defined(b, op);
    Shape out_shape = broadcast_shapes(a.shape(), b.shape(), op);
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    std::vector<double> out(shape_numel(out_shape));
    const auto ad = a.data();
    const auto bd = b.data();
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i], bd[i]);
    } else {
        for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(ad[ia], bd[ib]); });
    }
    Tensor result(out_shape, std::move(out));
    if (should_record({&a, &b})) {
        auto ai = a.impl(), bi = b.impl();
        record(result, {ai, bi}, [ai, bi, out_shape, sa, sb, da, db](std::span<const double> g) {
            const bool need_a = ai->requires_grad, need_b = bi->requires_grad;
            double* ga = need_a ? ai->grad_buffer().data() : nullptr;
            double* gb = need_b ? bi->grad_buffer().data() : nullptr;
            const double* x = ai->data.data();
            const double* y = bi->data.data();
            for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                if (need_a) ga[ia] += g[i] * da(x[ia], y[ib]);
                if (need_b) gb[ib] += g[i] * db(x[ia], y[ib]);
            });
        });
    }
    return result;
}

// dfn(x, y) is the local derivative given input x and output y.
template <class Fwd, class Dfn>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Dfn dfn) {
    require_defined(x, op);
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
    Tensor result(x.shape(), std::move(out));
    if (should_record({&x})) {
        auto xi = x.impl();
        auto yi = result.impl();
        std::weak_ptr<detail::TensorImpl> yw = yi;
        record(result, {xi}, [xi, yw, dfn](std::span<const double> g) {
            auto yl = yw.lock();
            auto& gx = xi->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfn(xi->data[i], yl->data[i]);
        });
    }
    return result;
}

struct AxisSplit {
    std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
    AxisSplit r{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
    Shape out = s;
    if (keepdim) {
        out[axis] = 1;
    } else {
        out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    }
    return out;
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (std::size_t k = 0; k < r; ++k) {
        const std::size_t ea = k < a.size() ? a[a.size() - 1 - k] : 1;
        const std::size_t eb = k < b.size() ? b[b.size() - 1 - k] : 1;
        if (ea != eb && ea != 1 && eb != 1) {
            shape_error(op, "cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
        }
        out[r - 1 - k] = ea == 1 ? eb : ea;
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

Tensor add_scalar(const Tensor& x, double c) {
    return unary(x, "add_scalar", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
    return unary(x, "mul_scalar", [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Tensor neg(const Tensor& x) {
    return unary(x, "neg", [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& x) {
    return unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    return unary(x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
    return unary(x, "sqrt", [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor tanh(const Tensor& x) {
    return unary(x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        x, "sigmoid",
        [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
    return unary(x, "relu", [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
    return unary(
        x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
        [](double v, double) {
            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
            const double pdf = std::exp(-0.5 * v * v) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
            return cdf + v * pdf;
        });
}

Tensor pow(const Tensor& x, double exponent) {
    return unary(
        x, "pow", [exponent](double v) { return std::pow(v, exponent); },
        [exponent](double v, double) { return exponent * std::pow(v, exponent - 1.0); });
}

Tensor abs(const Tensor& x) {
    return unary(
        x, "abs", [](double v) { return std::fabs(v); },
        [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor sign(const Tensor& x) {
    return unary(
        x, "sign", [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }, [](double, double) { return 0.0; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    if (lo > hi) shape_error("clamp", "lower bound exceeds upper bound");
    return unary(
        x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
        [lo, hi](double v, double) { return v >= lo && v <= hi ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
    require_defined(x, "sum");
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor result = Tensor::scalar(acc);
    if (should_record({&x})) {
        auto xi = x.impl();
        record(result, {xi}, [xi](std::span<const double> g) {
            auto& gx = xi->grad_buffer();
            for (auto& v : gx) v += g[0];
        });
    }
    return result;
}

Tensor sum(const Tensor& x, std::ptrdiff_t axis_in, bool keepdim) {
    require_defined(x, "sum");
    const std::size_t axis = normalize_axis(axis_in, x.rank(), "sum");
    const auto sp = split_axis(x.shape(), axis);
    std::vector<double> out(sp.outer * sp.inner, 0.0);
    const auto xd = x.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < sp.n; ++j)
            for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xd[(o * sp.n + j) * sp.inner + i];
    Tensor result(reduced_shape(x.shape(), axis, keepdim), std::move(out));
    if (should_record({&x})) {
        auto xi = x.impl();
        record(result, {xi}, [xi, sp](std::span<const double> g) {
            auto& gx = xi->grad_buffer();
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t j = 0; j < sp.n; ++j)
                    for (std::size_t i = 0; i < sp.inner; ++i) gx[(o * sp.n + j) * sp.inner + i] += g[o * sp.inner + i];
        });
    }
    return result;
}

Tensor mean(const Tensor& x) {
    require_defined(x, "mean");
    if (x.numel() == 0) shape_error("mean", "empty tensor");
    return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mean(const Tensor& x, std::ptrdiff_t axis, bool keepdim) {
    require_defined(x, "mean");
    const auto n = x.size(axis);
    if (n == 0) shape_error("mean", "empty axis");
    return mul_scalar(sum(x, axis, keepdim), 1.0 / static_cast<double>(n));
}

MaxResult max(const Tensor& x, std::ptrdiff_t axis_in, bool keepdim) {
    require_defined(x, "max");
    const std::size_t axis = normalize_axis(axis_in, x.rank(), "max");
    const auto sp = split_axis(x.shape(), axis);
    if (sp.n == 0) shape_error("max", "empty axis");
    std::vector<double> out(sp.outer * sp.inner);
    std::vector<std::size_t> idx(sp.outer * sp.inner, 0);
    const auto xd = x.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
            std::size_t best = 0;
            double bv = xd[o * sp.n * sp.inner + i];
            for (std::size_t j = 1; j < sp.n; ++j) {
                const double v = xd[(o * sp.n + j) * sp.inner + i];
                if (v > bv) {
                    bv = v;
                    best = j;
                }
            }
            out[o * sp.inner + i] = bv;
            idx[o * sp.inner + i] = best;
        }
    }
    Tensor values(reduced_shape(x.shape(), axis, keepdim), std::move(out));
    if (should_record({&x})) {
        auto xi = x.impl();
        record(values, {xi}, [xi, sp, idx](std::span<const double> g) {
            auto& gx = xi->grad_buffer();
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t i = 0; i < sp.inner; ++i)
                    gx[(o * sp.n + idx[o * sp.inner + i]) * sp.inner + i] += g[o * sp.inner + i];
        });
    }
    return MaxResult{std::move(values), std::move(idx)};
}

Tensor reshape(const Tensor& x, Shape shape) {
    require_defined(x, "reshape");
    if (shape_numel(shape) != x.numel()) {
        shape_error("reshape", "cannot reshape " + shape_str(x.shape()) + " into " + shape_str(shape));
    }
    Tensor result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
    if (should_record({&x})) {
        auto xi = x.impl();
        record(result, {xi}, [xi](std::span<const double> g) { xi->accumulate_grad(g); });
    }
    return result;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
    require_defined(x, "permute");
    const auto& in = x.shape();
    const std::size_t r = in.size();
    if (order.size() != r) shape_error("permute", "order length does not match rank of " + shape_str(in));
    std::vector<bool> seen(r, false);
    for (auto o : order) {
        if (o >= r || seen[o]) shape_error("permute", "invalid axis order for " + shape_str(in));
        seen[o] = true;
    }
    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
    Shape out_shape(r);
    std::vector<std::size_t> src_strides(r);
    for (std::size_t i = 0; i < r; ++i) {
        out_shape[i] = in[order[i]];
        src_strides[i] = in_strides[order[i]];
    }
    // Gather map from output flat index to input flat index.
    std::vector<std::size_t> map(x.numel());
    const std::vector<std::size_t> unused(r, 0);
    for_each_broadcast(out_shape, src_strides, unused, [&](std::size_t i, std::size_t src, std::size_t) { map[i] = src; });
    const auto xd = x.data();
    std::vector<double> out(map.size());
    for (std::size_t i = 0; i < map.size(); ++i) out[i] = xd[map[i]];
    Tensor result(out_shape, std::move(out));
    if (should_record({&x})) {
        auto xi = x.impl();
        record(result, {xi}, [xi, map = std::move(map)](std::span<const double> g) {
            auto& gx = xi->grad_buffer();
            for (std::size_t i = 0; i < map.size(); ++i) gx[map[i]] += g[i];
        });
    }
    return result;
}

Tensor transpose(const Tensor& x, std::ptrdiff_t axis0, std::ptrdiff_t axis1) {
    require_defined(x, "transpose");
    const auto a = normalize_axis(axis0, x.rank(), "transpose");
    const auto b = normalize_axis(axis1, x.rank(), "transpose");
    std::vector<std::size_t> order(x.rank());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::swap(order[a], order[b]);
    return permute(x, order);
}

Tensor concat(const std::vector<Tensor>& parts, std::ptrdiff_t axis_in) {
    if (parts.empty()) shape_error("concat", "no inputs");
    for (const auto& p : parts) require_defined(p, "concat");
    const std::size_t r = parts[0].rank();
    const std::size_t axis = normalize_axis(axis_in, r, "concat");
    Shape out_shape = parts[0].shape();
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const auto& s = p.shape();
        bool ok = s.size() == r;
        for (std::size_t i = 0; ok && i < r; ++i) ok = i == axis || s[i] == parts[0].shape()[i];
        if (!ok) shape_error("concat", "incompatible shapes " + shape_str(parts[0].shape()) + " and " + shape_str(s));
        out_shape[axis] += s[axis];
    }
    const auto sp = split_axis(out_shape, axis);
    std::vector<double> out(shape_numel(out_shape));
    std::size_t offset = 0;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        const std::size_t n = p.shape()[axis];
        const auto pd = p.data();
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * n * sp.inner), n * sp.inner,
                        out.begin() + static_cast<std::ptrdiff_t>((o * sp.n + offset) * sp.inner));
        offsets.push_back(offset);
        offset += n;
    }
    Tensor result(out_shape, std::move(out));
    std::vector<const Tensor*> ptrs;
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (any && Tape::current() != nullptr) {
        std::vector<ImplPtr> ins;
        for (const auto& p : parts) ins.push_back(p.impl());
        record(result, ins, [ins, offsets, sp, axis](std::span<const double> g) {
            for (std::size_t k = 0; k < ins.size(); ++k) {
                if (!ins[k]->requires_grad) continue;
                const std::size_t n = ins[k]->shape[axis];
                auto& gp = ins[k]->grad_buffer();
                for (std::size_t o = 0; o < sp.outer; ++o)
                    for (std::size_t j = 0; j < n * sp.inner; ++j)
                        gp[o * n * sp.inner + j] += g[(o * sp.n + offsets[k]) * sp.inner + j];
            }
        });
    }
    return result;
}

Tensor slice(const Tensor& x, std::ptrdiff_t axis_in, std::size_t begin, std::size_t end) {
    require_defined(x, "slice");
    const std::size_t axis = normalize_axis(axis_in, x.rank(), "slice");
    if (begin > end || end > x.shape()[axis]) {
        shape_error("slice", "range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for shape " +
                                 shape_str(x.shape()));
    }
    const auto sp = split_axis(x.shape(), axis);
    const std::size_t n = end - begin;
    Shape out_shape = x.shape();
    out_shape[axis] = n;
    std::vector<double> out(sp.outer * n * sp.inner);
    const auto xd = x.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>((o * sp.n + begin) * sp.inner), n * sp.inner,
                    out.begin() + static_cast<std::ptrdiff_t>(o * n * sp.inner));
    Tensor result(out_shape, std::move(out));
    if (should_record({&x})) {
        auto xi = x.impl();
        record(result, {xi}, [xi, sp, n, begin](std::span<const double> g) {
            auto& gx = xi->grad_buffer();
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t j = 0; j < n * sp.inner; ++j) gx[(o * sp.n + begin) * sp.inner + j] += g[o * n * sp.inner + j];
        });
    }
    return result;
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
    require_defined(x, "broadcast_to");
    if (broadcast_shapes(x.shape(), shape, "broadcast_to") != shape) {
        shape_error("broadcast_to", "cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    const auto sx = broadcast_strides(x.shape(), shape);
    const std::vector<std::size_t> unused(shape.size(), 0);
    std::vector<double> out(shape_numel(shape));
    const auto xd = x.data();
    for_each_broadcast(shape, sx, unused, [&](std::size_t i, std::size_t ix, std::size_t) { out[i] = xd[ix]; });
    Tensor result(shape, std::move(out));
    if (should_record({&x})) {
        auto xi = x.impl();
        record(result, {xi}, [xi, shape, sx, unused](std::span<const double> g) {
            auto& gx = xi->grad_buffer();
            for_each_broadcast(shape, sx, unused, [&](std::size_t i, std::size_t ix, std::size_t) { gx[ix] += g[i]; });
        });
    }
    return result;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_defined(a, "matmul");
    require_defined(b, "matmul");
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() < 2 || bs.size() < 2) {
        shape_error("matmul", "operands must have rank >= 2, got " + shape_str(as) + " and " + shape_str(bs));
    }
    const std::size_t m = as[as.size() - 2], k = as.back();
    const std::size_t k2 = bs[bs.size() - 2], n = bs.back();
    if (k != k2) shape_error("matmul", "inner dimensions differ: " + shape_str(as) + " x " + shape_str(bs));

    const Shape a_batch(as.begin(), as.end() - 2);
    const Shape b_batch(bs.begin(), bs.end() - 2);

    if (b_batch.empty() || (shape_numel(b_batch) == 1 && b_batch.size() <= a_batch.size())) {
        // Fold all leading axes of a into rows: one GEMM.
        const std::size_t rows = shape_numel(a_batch) * m;
        Shape out_shape = a_batch;
        if (out_shape.size() < b_batch.size()) out_shape = b_batch;
        out_shape.push_back(m);
        out_shape.push_back(n);
        std::vector<double> out(rows * n);
        kernels::gemm({rows, n, k}, a.data().data(), b.data().data(), out.data(), false);
        Tensor result(out_shape, std::move(out));
        if (should_record({&a, &b})) {
            auto ai = a.impl(), bi = b.impl();
            record(result, {ai, bi}, [ai, bi, rows, n, k](std::span<const double> g) {
                if (ai->requires_grad) {
                    kernels::gemm({rows, k, n, false, true}, g.data(), bi->data.data(), ai->grad_buffer().data(), true);
                }
                if (bi->requires_grad) {
                    kernels::gemm({k, n, rows, true, false}, ai->data.data(), g.data(), bi->grad_buffer().data(), true);
                }
            });
        }
        return result;
    }

    const Shape batch = broadcast_shapes(a_batch, b_batch, "matmul");
    const auto sa = broadcast_strides(a_batch, batch);
    const auto sb = broadcast_strides(b_batch, batch);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for_each_broadcast(batch, sa, sb, [&](std::size_t, std::size_t ia, std::size_t ib) { pairs.emplace_back(ia, ib); });
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<double> out(shape_numel(out_shape));
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (std::size_t p = 0; p < pairs.size(); ++p) {
        kernels::gemm({m, n, k}, ad + pairs[p].first * m * k, bd + pairs[p].second * k * n, out.data() + p * m * n, false);
    }
    Tensor result(out_shape, std::move(out));
    if (should_record({&a, &b})) {
        auto ai = a.impl(), bi = b.impl();
        record(result, {ai, bi}, [ai, bi, pairs, m, n, k](std::span<const double> g) {
            for (std::size_t p = 0; p < pairs.size(); ++p) {
                const double* gp = g.data() + p * m * n;
                if (ai->requires_grad) {
                    kernels::gemm({m, k, n, false, true}, gp, bi->data.data() + pairs[p].second * k * n,
                                  ai->grad_buffer().data() + pairs[p].first * m * k, true);
                }
                if (bi->requires_grad) {
                    kernels::gemm({k, n, m, true, false}, ai->data.data() + pairs[p].first * m * k, gp,
                                  bi->grad_buffer().data() + pairs[p].second * k * n, true);
                }
            }
        });
    }
    return result;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    return add(matmul(x, weight), bias);
}

namespace {

constexpr std::size_t kColsBudget = 1u << 22;  // doubles per im2col chunk

std::size_t conv_chunk(const kernels::ConvGeometry& g, std::size_t batch) {
    const std::size_t per = g.patch_len() * g.out_h() * g.out_w();
    return std::clamp<std::size_t>(kColsBudget / std::max<std::size_t>(per, 1), 1, std::max<std::size_t>(batch, 1));
}

kernels::ConvGeometry conv_geometry(const Tensor& x, std::size_t kh, std::size_t kw, std::size_t stride,
                                    std::size_t padding, const char* op) {
    if (x.rank() != 4) shape_error(op, "input must be B×C×H×W, got " + shape_str(x.shape()));
    if (stride == 0) shape_error(op, "stride must be >= 1");
    const auto& s = x.shape();
    if (s[2] + 2 * padding < kh || s[3] + 2 * padding < kw) {
        shape_error(op, "kernel " + std::to_string(kh) + "x" + std::to_string(kw) + " exceeds padded input " +
                            shape_str(s) + " with padding " + std::to_string(padding));
    }
    return kernels::ConvGeometry{s[1], s[2], s[3], kh, kw, stride, padding};
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding) {
    require_defined(x, "conv2d");
    require_defined(kernel, "conv2d");
    if (kernel.rank() != 4) shape_error("conv2d", "kernel must be O×C×kh×kw, got " + shape_str(kernel.shape()));
    const auto& ks = kernel.shape();
    const auto g = conv_geometry(x, ks[2], ks[3], stride, padding, "conv2d");
    if (ks[1] != g.channels) {
        shape_error("conv2d", "kernel " + shape_str(ks) + " does not match input channels of " + shape_str(x.shape()));
    }
    const std::size_t batch = x.shape()[0], oc = ks[0];
    const std::size_t hw = g.out_h() * g.out_w();
    const std::size_t plen = g.patch_len();
    const std::size_t img = g.channels * g.height * g.width;
    const std::size_t chunk = conv_chunk(g, batch);

    std::vector<double> out(batch * oc * hw);
    std::vector<double> cols, tmp;
    for (std::size_t b0 = 0; b0 < batch; b0 += chunk) {
        const std::size_t cb = std::min(chunk, batch - b0);
        cols.assign(plen * cb * hw, 0.0);
        tmp.assign(oc * cb * hw, 0.0);
        kernels::im2col(g, cb, x.data().data() + b0 * img, cols.data());
        kernels::gemm({oc, cb * hw, plen}, kernel.data().data(), cols.data(), tmp.data(), false);
        for (std::size_t o = 0; o < oc; ++o)
            for (std::size_t b = 0; b < cb; ++b)
                std::copy_n(tmp.begin() + static_cast<std::ptrdiff_t>((o * cb + b) * hw), hw,
                            out.begin() + static_cast<std::ptrdiff_t>(((b0 + b) * oc + o) * hw));
    }
    Tensor result({batch, oc, g.out_h(), g.out_w()}, std::move(out));
    if (should_record({&x, &kernel})) {
        auto xi = x.impl(), wi = kernel.impl();
        record(result, {xi, wi}, [xi, wi, g, batch, oc, hw, plen, img, chunk](std::span<const double> gout) {
            std::vector<double> cols, gmat, dcols;
            for (std::size_t b0 = 0; b0 < batch; b0 += chunk) {
                const std::size_t cb = std::min(chunk, batch - b0);
                gmat.assign(oc * cb * hw, 0.0);
                for (std::size_t o = 0; o < oc; ++o)
                    for (std::size_t b = 0; b < cb; ++b)
                        std::copy_n(gout.begin() + static_cast<std::ptrdiff_t>(((b0 + b) * oc + o) * hw), hw,
                                    gmat.begin() + static_cast<std::ptrdiff_t>((o * cb + b) * hw));
                if (wi->requires_grad) {
                    cols.assign(plen * cb * hw, 0.0);
                    kernels::im2col(g, cb, xi->data.data() + b0 * img, cols.data());
                    kernels::gemm({oc, plen, cb * hw, false, true}, gmat.data(), cols.data(), wi->grad_buffer().data(),
                                  true);
                }
                if (xi->requires_grad) {
                    dcols.assign(plen * cb * hw, 0.0);
                    kernels::gemm({plen, cb * hw, oc, true, false}, wi->data.data(), gmat.data(), dcols.data(), false);
                    kernels::col2im(g, cb, dcols.data(), xi->grad_buffer().data() + b0 * img);
                }
            }
        });
    }
    return result;
}

Tensor unfold(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t padding) {
    require_defined(x, "unfold");
    if (kernel == 0) shape_error("unfold", "kernel must be >= 1");
    const auto g = conv_geometry(x, kernel, kernel, stride, padding, "unfold");
    const std::size_t batch = x.shape()[0];
    const std::size_t tokens = g.out_h() * g.out_w();
    const std::size_t plen = g.patch_len();
    std::vector<double> cols(plen * batch * tokens);
    kernels::im2col(g, batch, x.data().data(), cols.data());
    std::vector<double> out(batch * tokens * plen);
    for (std::size_t r = 0; r < plen; ++r)
        for (std::size_t c = 0; c < batch * tokens; ++c) out[c * plen + r] = cols[r * batch * tokens + c];
    Tensor result({batch, tokens, plen}, std::move(out));
    if (should_record({&x})) {
        auto xi = x.impl();
        record(result, {xi}, [xi, g, batch, tokens, plen](std::span<const double> gout) {
            std::vector<double> dcols(plen * batch * tokens);
            for (std::size_t r = 0; r < plen; ++r)
                for (std::size_t c = 0; c < batch * tokens; ++c) dcols[r * batch * tokens + c] = gout[c * plen + r];
            kernels::col2im(g, batch, dcols.data(), xi->grad_buffer().data());
        });
    }
    return result;
}

Tensor softmax(const Tensor& x, std::ptrdiff_t axis_in) {
    require_defined(x, "softmax");
    const std::size_t axis = normalize_axis(axis_in, x.rank(), "softmax");
    const auto sp = split_axis(x.shape(), axis);
    if (sp.n == 0) shape_error("softmax", "empty axis");
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.n * sp.inner + i;
            double mx = xd[base];
            for (std::size_t j = 1; j < sp.n; ++j) mx = std::max(mx, xd[base + j * sp.inner]);
            double total = 0.0;
            for (std::size_t j = 0; j < sp.n; ++j) {
                const double e = std::exp(xd[base + j * sp.inner] - mx);
                out[base + j * sp.inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < sp.n; ++j) out[base + j * sp.inner] /= total;
        }
    }
    Tensor result(x.shape(), std::move(out));
    if (should_record({&x})) {
        auto xi = x.impl();
        std::weak_ptr<detail::TensorImpl> yw = result.impl();
        record(result, {xi}, [xi, yw, sp](std::span<const double> g) {
            auto yi = yw.lock();
            const auto& y = yi->data;
            auto& gx = xi->grad_buffer();
            for (std::size_t o = 0; o < sp.outer; ++o) {
                for (std::size_t i = 0; i < sp.inner; ++i) {
                    const std::size_t base = o * sp.n * sp.inner + i;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < sp.n; ++j) dot += g[base + j * sp.inner] * y[base + j * sp.inner];
                    for (std::size_t j = 0; j < sp.n; ++j) {
                        const std::size_t at = base + j * sp.inner;
                        gx[at] += y[at] * (g[at] - dot);
                    }
                }
            }
        });
    }
    return result;
}

Tensor log_softmax(const Tensor& x, std::ptrdiff_t axis_in) {
    require_defined(x, "log_softmax");
    const std::size_t axis = normalize_axis(axis_in, x.rank(), "log_softmax");
    const auto sp = split_axis(x.shape(), axis);
    if (sp.n == 0) shape_error("log_softmax", "empty axis");
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.n * sp.inner + i;
            double mx = xd[base];
            for (std::size_t j = 1; j < sp.n; ++j) mx = std::max(mx, xd[base + j * sp.inner]);
            double total = 0.0;
            for (std::size_t j = 0; j < sp.n; ++j) total += std::exp(xd[base + j * sp.inner] - mx);
            const double lse = mx + std::log(total);
            for (std::size_t j = 0; j < sp.n; ++j) out[base + j * sp.inner] = xd[base + j * sp.inner] - lse;
        }
    }
    Tensor result(x.shape(), std::move(out));
    if (should_record({&x})) {
        auto xi = x.impl();
        std::weak_ptr<detail::TensorImpl> yw = result.impl();
        record(result, {xi}, [xi, yw, sp](std::span<const double> g) {
            auto yi = yw.lock();
            const auto& y = yi->data;
            auto& gx = xi->grad_buffer();
            for (std::size_t o = 0; o < sp.outer; ++o) {
                for (std::size_t i = 0; i < sp.inner; ++i) {
                    const std::size_t base = o * sp.n * sp.inner + i;
                    double total = 0.0;
                    for (std::size_t j = 0; j < sp.n; ++j) total += g[base + j * sp.inner];
                    for (std::size_t j = 0; j < sp.n; ++j) {
                        const std::size_t at = base + j * sp.inner;
                        gx[at] += g[at] - std::exp(y[at]) * total;
                    }
                }
            }
        });
    }
    return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_defined(x, "layer_norm");
    require_defined(gamma, "layer_norm");
    require_defined(beta, "layer_norm");
    if (eps <= 0) shape_error("layer_norm", "eps must be positive");
    if (x.rank() == 0) shape_error("layer_norm", "input must have rank >= 1");
    const std::size_t d = x.shape().back();
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        shape_error("layer_norm", "affine parameters " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                                      " do not match last axis of " + shape_str(x.shape()));
    }
    const std::size_t rows = d == 0 ? 0 : x.numel() / d;
    const auto xd = x.data();
    const auto gd = gamma.data();
    const auto bd = beta.data();
    std::vector<double> out(xd.size()), xhat(xd.size()), rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xd.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (row[j] - mu) * rstd[r];
            out[r * d + j] = xhat[r * d + j] * gd[j] + bd[j];
        }
    }
    Tensor result(x.shape(), std::move(out));
    if (should_record({&x, &gamma, &beta})) {
        auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
        record(result, {xi, gi, bi}, [xi, gi, bi, xhat = std::move(xhat), rstd = std::move(rstd), rows, d](std::span<const double> g) {
            if (gi->requires_grad) {
                auto& gg = gi->grad_buffer();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
            }
            if (bi->requires_grad) {
                auto& gb = bi->grad_buffer();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
            }
            if (xi->requires_grad) {
                auto& gx = xi->grad_buffer();
                const auto& gam = gi->data;
                for (std::size_t r = 0; r < rows; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = g[r * d + j] * gam[j];
                        m1 += dxh;
                        m2 += dxh * xhat[r * d + j];
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = g[r * d + j] * gam[j];
                        gx[r * d + j] += rstd[r] * (dxh - m1 - xhat[r * d + j] * m2);
                    }
                }
            }
        });
    }
    return result;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, Reduction reduction) {
    require_defined(logits, "cross_entropy");
    if (logits.rank() != 2) shape_error("cross_entropy", "logits must be B×K, got " + shape_str(logits.shape()));
    const std::size_t batch = logits.shape()[0], classes = logits.shape()[1];
    if (labels.size() != batch) {
        shape_error("cross_entropy", std::to_string(labels.size()) + " labels for logits " + shape_str(logits.shape()));
    }
    if (batch == 0 || classes == 0) shape_error("cross_entropy", "empty logits " + shape_str(logits.shape()));
    for (std::size_t b = 0; b < batch; ++b) {
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
            throw std::out_of_range("cross_entropy: label " + std::to_string(labels[b]) + " at index " +
                                    std::to_string(b) + " outside [0, " + std::to_string(classes) + ")");
        }
    }
    const auto ld = logits.data();
    std::vector<double> probs(ld.size());
    std::vector<double> per(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        const double* row = ld.data() + b * classes;
        const double mx = *std::max_element(row, row + classes);
        double total = 0.0;
        for (std::size_t j = 0; j < classes; ++j) total += std::exp(row[j] - mx);
        const double lse = mx + std::log(total);
        for (std::size_t j = 0; j < classes; ++j) probs[b * classes + j] = std::exp(row[j] - lse);
        per[b] = lse - row[static_cast<std::size_t>(labels[b])];
    }
    Tensor result;
    if (reduction == Reduction::none) {
        result = Tensor({batch}, per);
    } else {
        double total = 0.0;
        for (double v : per) total += v;
        if (reduction == Reduction::mean) total /= static_cast<double>(batch);
        result = Tensor::scalar(total);
    }
    if (should_record({&logits})) {
        auto li = logits.impl();
        std::vector<int> lab(labels.begin(), labels.end());
        record(result, {li}, [li, lab = std::move(lab), probs = std::move(probs), batch, classes, reduction](std::span<const double> g) {
            auto& gl = li->grad_buffer();
            for (std::size_t b = 0; b < batch; ++b) {
                double scale = reduction == Reduction::none ? g[b] : g[0];
                if (reduction == Reduction::mean) scale /= static_cast<double>(batch);
                for (std::size_t j = 0; j < classes; ++j) {
                    const double onehot = static_cast<int>(j) == lab[b] ? 1.0 : 0.0;
                    gl[b * classes + j] += scale * (probs[b * classes + j] - onehot);
                }
            }
        });
    }
    return result;
}

std::vector<int> argmax_rows(const Tensor& logits) {
    if (logits.rank() != 2) shape_error("argmax_rows", "expected B×K, got " + shape_str(logits.shape()));
    const std::size_t batch = logits.shape()[0], classes = logits.shape()[1];
    std::vector<int> out(batch);
    const auto d = logits.data();
    for (std::size_t b = 0; b < batch; ++b) {
        const double* row = d.data() + b * classes;
        out[b] = static_cast<int>(std::max_element(row, row + classes) - row);
    }
    return out;
}

}  // namespace advlens
