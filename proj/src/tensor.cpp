#include "mvfa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace mvfa {

namespace {

thread_local bool t_grad_enabled = true;

void round_in_place(std::vector<double>& values, Precision precision) {
    if (precision != Precision::f32) return;
    for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

Precision promote(const Tensor& a) { return a.precision(); }

Precision promote(const Tensor& a, const Tensor& b) {
    return (a.precision() == Precision::f64 || b.precision() == Precision::f64) ? Precision::f64
                                                                                : Precision::f32;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

void require_2d(const char* op, const Tensor& a) {
    if (a.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(a.shape()));
    }
}

using Backward = decltype(Node::backward);

// Elementwise unary op with derivative expressed through (input, output).
template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a[i]);
    Precision precision = promote(a);
    round_in_place(out, precision);
    Tensor in = a;
    auto result_data = std::make_shared<std::vector<double>>(out);
    return Tensor::make_result(a.shape(), std::move(out), precision, op, {a},
                               [in, result_data, deriv](std::span<const double> g, std::span<std::vector<double>*> pg) {
                                   if (!pg[0]) return;
                                   auto& ga = *pg[0];
                                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(in[i], (*result_data)[i]);
                               });
}

}  // namespace

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

bool grad_enabled() noexcept { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::from(Shape shape, std::vector<double> data, Precision precision) {
    for (std::size_t d : shape) {
        if (d == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("tensor: shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(data.size()));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->precision = precision;
    round_in_place(impl->data, precision);
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, Precision precision) { return full(std::move(shape), 0.0, precision); }

Tensor Tensor::full(Shape shape, double value, Precision precision) {
    std::vector<double> data(shape_numel(shape), value);
    return from(std::move(shape), std::move(data), precision);
}

Tensor Tensor::scalar(double value, Precision precision) { return from({1}, {value}, precision); }

Tensor Tensor::parameter(std::string name, Shape shape, std::vector<double> data, Precision precision) {
    Tensor t = from(std::move(shape), std::move(data), precision);
    t.impl_->requires_grad = true;
    t.impl_->name = std::move(name);
    return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return impl_->shape[axis];
}

std::size_t Tensor::rows() const {
    if (rank() != 2) throw ShapeError("tensor: rows() needs a 2-D tensor, got " + shape_str(shape()));
    return impl_->shape[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw ShapeError("tensor: cols() needs a 2-D tensor, got " + shape_str(shape()));
    return impl_->shape[1];
}

double Tensor::at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("tensor: item() on non-scalar of shape " + shape_str(shape()));
    return impl_->data[0];
}

void Tensor::assign(std::span<const double> values) {
    if (!is_leaf()) throw ContractError("tensor: only leaf tensors may be assigned");
    if (values.size() != numel()) {
        throw ShapeError("tensor: assign of " + std::to_string(values.size()) + " values into " + shape_str(shape()));
    }
    std::copy(values.begin(), values.end(), impl_->data.begin());
    round_in_place(impl_->data, impl_->precision);
}

void Tensor::set(std::size_t i, double value) {
    if (!is_leaf()) throw ContractError("tensor: only leaf tensors may be assigned");
    impl_->data.at(i) = impl_->precision == Precision::f32 ? static_cast<double>(static_cast<float>(value)) : value;
}

Tensor Tensor::clone() const {
    Tensor t = from(shape(), impl_->data, precision());
    t.impl_->requires_grad = impl_->requires_grad && is_leaf();
    t.impl_->name = impl_->name;
    return t;
}

Tensor Tensor::detach() const { return from(shape(), impl_->data, precision()); }

Tensor Tensor::with_precision(Precision p) const {
    Tensor t = from(shape(), impl_->data, p);
    t.impl_->requires_grad = impl_->requires_grad && is_leaf();
    t.impl_->name = impl_->name;
    return t;
}

Tensor Tensor::make_result(Shape shape, std::vector<double> data, Precision precision, std::string op,
                           std::vector<Tensor> parents, Backward backward) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->precision = precision;
    bool needs = false;
    if (t_grad_enabled) {
        for (const Tensor& p : parents) needs = needs || p.requires_grad();
    }
    if (needs) {
        impl->requires_grad = true;
        impl->node = std::make_shared<Node>(Node{std::move(op), std::move(parents), std::move(backward)});
    }
    return Tensor(std::move(impl));
}

// ---- GradientMap / backward ----------------------------------------------

void GradientMap::add(const Tensor& leaf, Tensor grad) { entries_.push_back({leaf, std::move(grad)}); }

bool GradientMap::contains(const Tensor& leaf) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.leaf.same(leaf); });
}

bool GradientMap::contains(const std::string& name) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.leaf.name() == name; });
}

const Tensor& GradientMap::at(const Tensor& leaf) const {
    for (const Entry& e : entries_) {
        if (e.leaf.same(leaf)) return e.grad;
    }
    throw ContractError("gradient map: no gradient for parameter '" + leaf.name() + "'");
}

const Tensor& GradientMap::at(const std::string& name) const {
    for (const Entry& e : entries_) {
        if (e.leaf.name() == name) return e.grad;
    }
    throw ContractError("gradient map: no gradient for parameter '" + name + "'");
}

std::vector<std::string> GradientMap::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const Entry& e : entries_) out.push_back(e.leaf.name());
    return out;
}

GradientMap backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward: loss must be a scalar, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) {
        throw ContractError("backward: loss is not connected to any trainable tensor");
    }

    // Iterative post-order DFS; each impl is visited once.
    std::vector<Tensor> order;
    std::unordered_set<const TensorImpl*> seen;
    std::vector<std::pair<Tensor, std::size_t>> stack;
    stack.emplace_back(loss, 0);
    seen.insert(loss.id());
    while (!stack.empty()) {
        auto& [t, next] = stack.back();
        const Node* node = t.node();
        if (node && next < node->parents.size()) {
            const Tensor& parent = node->parents[next++];
            if (parent.requires_grad() && seen.insert(parent.id()).second) stack.emplace_back(parent, 0);
            continue;
        }
        order.push_back(t);
        stack.pop_back();
    }

    std::unordered_map<const TensorImpl*, std::vector<double>> grads;
    grads[loss.id()] = std::vector<double>(1, 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const Tensor& t = *it;
        const Node* node = t.node();
        if (!node) continue;
        auto found = grads.find(t.id());
        if (found == grads.end()) continue;
        std::vector<double> g = std::move(found->second);
        grads.erase(found);
        std::vector<std::vector<double>*> parent_grads(node->parents.size(), nullptr);
        for (std::size_t i = 0; i < node->parents.size(); ++i) {
            const Tensor& p = node->parents[i];
            if (!p.requires_grad()) continue;
            auto& slot = grads[p.id()];
            if (slot.empty()) slot.assign(p.numel(), 0.0);
            parent_grads[i] = &slot;
        }
        node->backward(g, parent_grads);
    }

    GradientMap out;
    for (const Tensor& t : order) {
        if (!t.is_leaf() || !t.requires_grad()) continue;
        auto found = grads.find(t.id());
        std::vector<double> g = found != grads.end() ? std::move(found->second) : std::vector<double>(t.numel(), 0.0);
        out.add(t, Tensor::from(t.shape(), std::move(g), t.precision()));
    }

    // Release the recorded graph: intermediates are not retained.
    for (const Tensor& t : order) {
        if (!t.is_leaf()) const_cast<TensorImpl*>(t.id())->node.reset();
    }
    return out;
}

// ---- operations -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d("matmul", a);
    require_2d("matmul", b);
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    if (b.rows() != k) {
        throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<double> out(n * m, 0.0);
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < n; ++i) {
        double* row = out.data() + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ad[i * k + p];
            if (av == 0.0) continue;
            const double* brow = bd.data() + p * m;
            for (std::size_t j = 0; j < m; ++j) row[j] += av * brow[j];
        }
    }
    Precision precision = promote(a, b);
    round_in_place(out, precision);
    return Tensor::make_result({n, m}, std::move(out), precision, "matmul", {a, b},
                               [a, b, n, k, m](std::span<const double> g, std::span<std::vector<double>*> pg) {
                                   auto ad = a.data();
                                   auto bd = b.data();
                                   if (pg[0]) {
                                       auto& ga = *pg[0];
                                       for (std::size_t i = 0; i < n; ++i)
                                           for (std::size_t p = 0; p < k; ++p) {
                                               double s = 0.0;
                                               for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * bd[p * m + j];
                                               ga[i * k + p] += s;
                                           }
                                   }
                                   if (pg[1]) {
                                       auto& gb = *pg[1];
                                       for (std::size_t i = 0; i < n; ++i)
                                           for (std::size_t p = 0; p < k; ++p) {
                                               const double av = ad[i * k + p];
                                               if (av == 0.0) continue;
                                               for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += av * g[i * m + j];
                                           }
                                   }
                               });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    Precision precision = promote(a, b);
    round_in_place(out, precision);
    return Tensor::make_result(a.shape(), std::move(out), precision, "add", {a, b},
                               [](std::span<const double> g, std::span<std::vector<double>*> pg) {
                                   for (auto* p : pg) {
                                       if (!p) continue;
                                       for (std::size_t i = 0; i < g.size(); ++i) (*p)[i] += g[i];
                                   }
                               });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    Precision precision = promote(a, b);
    round_in_place(out, precision);
    return Tensor::make_result(a.shape(), std::move(out), precision, "sub", {a, b},
                               [](std::span<const double> g, std::span<std::vector<double>*> pg) {
                                   if (pg[0])
                                       for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                                   if (pg[1])
                                       for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
                               });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    Precision precision = promote(a, b);
    round_in_place(out, precision);
    return Tensor::make_result(a.shape(), std::move(out), precision, "mul", {a, b},
                               [a, b](std::span<const double> g, std::span<std::vector<double>*> pg) {
                                   if (pg[0])
                                       for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * b[i];
                                   if (pg[1])
                                       for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * a[i];
                               });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape("div", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
    Precision precision = promote(a, b);
    round_in_place(out, precision);
    return Tensor::make_result(a.shape(), std::move(out), precision, "div", {a, b},
                               [a, b](std::span<const double> g, std::span<std::vector<double>*> pg) {
                                   if (pg[0])
                                       for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] / b[i];
                                   if (pg[1])
                                       for (std::size_t i = 0; i < g.size(); ++i)
                                           (*pg[1])[i] -= g[i] * a[i] / (b[i] * b[i]);
                               });
}

Tensor scale(const Tensor& a, double factor) {
    return unary("scale", a, [factor](double x) { return factor * x; },
                 [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
    return unary("add_scalar", a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
    // Subgradient at exactly zero is 0.
    return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
    return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                 [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    std::vector<double> out{s};
    Precision precision = promote(a);
    round_in_place(out, precision);
    return Tensor::make_result({1}, std::move(out), precision, "sum", {a},
                               [](std::span<const double> g, std::span<std::vector<double>*> pg) {
                                   if (!pg[0]) return;
                                   for (double& v : *pg[0]) v += g[0];
                               });
}

Tensor mean(const Tensor& a) {
    const double n = static_cast<double>(a.numel());
    double s = 0.0;
    for (double v : a.data()) s += v;
    std::vector<double> out{s / n};
    Precision precision = promote(a);
    round_in_place(out, precision);
    return Tensor::make_result({1}, std::move(out), precision, "mean", {a},
                               [n](std::span<const double> g, std::span<std::vector<double>*> pg) {
                                   if (!pg[0]) return;
                                   for (double& v : *pg[0]) v += g[0] / n;
                               });
}

Tensor max(const Tensor& a, std::size_t axis) {
    require_2d("max", a);
    if (axis > 1) throw ShapeError("max: axis " + std::to_string(axis) + " invalid for " + shape_str(a.shape()));
    const std::size_t r = a.rows(), c = a.cols();
    const std::size_t outer = axis == 0 ? c : r;
    const std::size_t inner = axis == 0 ? r : c;
    std::vector<double> out(outer);
    std::vector<std::size_t> arg(outer);
    for (std::size_t o = 0; o < outer; ++o) {
        std::size_t best = axis == 0 ? o : o * c;
        for (std::size_t i = 1; i < inner; ++i) {
            const std::size_t idx = axis == 0 ? i * c + o : o * c + i;
            if (a[idx] > a[best]) best = idx;
        }
        arg[o] = best;
        out[o] = a[best];
    }
    Shape shape = axis == 0 ? Shape{1, c} : Shape{r, 1};
    return Tensor::make_result(std::move(shape), std::move(out), promote(a), "max", {a},
                               [arg](std::span<const double> g, std::span<std::vector<double>*> pg) {
                                   if (!pg[0]) return;
                                   for (std::size_t o = 0; o < arg.size(); ++o) (*pg[0])[arg[o]] += g[o];
                               });
}

Tensor max_all(const Tensor& a) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < a.numel(); ++i) {
        if (a[i] > a[best]) best = i;
    }
    return Tensor::make_result({1}, {a[best]}, promote(a), "max_all", {a},
                               [best](std::span<const double> g, std::span<std::vector<double>*> pg) {
                                   if (pg[0]) (*pg[0])[best] += g[0];
                               });
}

Tensor transpose(const Tensor& a) {
    require_2d("transpose", a);
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
    return Tensor::make_result({c, r}, std::move(out), promote(a), "transpose", {a},
                               [r, c](std::span<const double> g, std::span<std::vector<double>*> pg) {
                                   if (!pg[0]) return;
                                   for (std::size_t i = 0; i < r; ++i)
                                       for (std::size_t j = 0; j < c; ++j) (*pg[0])[i * c + j] += g[j * r + i];
                               });
}

Tensor softmax_rows(const Tensor& a) {
    require_2d("softmax_rows", a);
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        double hi = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j) hi = std::max(hi, a[i * c + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] = std::exp(a[i * c + j] - hi);
            z += out[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
    }
    Precision precision = promote(a);
    round_in_place(out, precision);
    auto y = std::make_shared<std::vector<double>>(out);
    return Tensor::make_result({r, c}, std::move(out), precision, "softmax_rows", {a},
                               [y, r, c](std::span<const double> g, std::span<std::vector<double>*> pg) {
                                   if (!pg[0]) return;
                                   const auto& yy = *y;
                                   for (std::size_t i = 0; i < r; ++i) {
                                       double dot = 0.0;
                                       for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * yy[i * c + j];
                                       for (std::size_t j = 0; j < c; ++j)
                                           (*pg[0])[i * c + j] += yy[i * c + j] * (g[i * c + j] - dot);
                                   }
                               });
}

Tensor l2_normalize_rows(const Tensor& a) {
    require_2d("l2_normalize_rows", a);
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<double> out(r * c);
    std::vector<double> norms(r);
    for (std::size_t i = 0; i < r; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < c; ++j) ss += a[i * c + j] * a[i * c + j];
        const double n = std::sqrt(ss);
        if (!(n > 0.0)) throw NumericError("l2_normalize_rows: row " + std::to_string(i) + " has zero norm");
        norms[i] = n;
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a[i * c + j] / n;
    }
    Precision precision = promote(a);
    // Gradient uses the unrounded unit rows.
    auto y = std::make_shared<std::vector<double>>(out);
    round_in_place(out, precision);
    return Tensor::make_result({r, c}, std::move(out), precision, "l2_normalize_rows", {a},
                               [y, norms, r, c](std::span<const double> g, std::span<std::vector<double>*> pg) {
                                   if (!pg[0]) return;
                                   const auto& yy = *y;
                                   for (std::size_t i = 0; i < r; ++i) {
                                       double dot = 0.0;
                                       for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * yy[i * c + j];
                                       for (std::size_t j = 0; j < c; ++j)
                                           (*pg[0])[i * c + j] += (g[i * c + j] - yy[i * c + j] * dot) / norms[i];
                                   }
                               });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return Tensor::make_result(std::move(shape), std::move(out), promote(a), "reshape", {a},
                               [](std::span<const double> g, std::span<std::vector<double>*> pg) {
                                   if (!pg[0]) return;
                                   for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                               });
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
    require_2d("slice_cols", a);
    const std::size_t r = a.rows(), c = a.cols();
    if (count == 0 || start + count > c) {
        throw ShapeError("slice_cols: columns [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + shape_str(a.shape()));
    }
    std::vector<double> out(r * count);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a[i * c + start + j];
    return Tensor::make_result({r, count}, std::move(out), promote(a), "slice_cols", {a},
                               [r, c, start, count](std::span<const double> g, std::span<std::vector<double>*> pg) {
                                   if (!pg[0]) return;
                                   for (std::size_t i = 0; i < r; ++i)
                                       for (std::size_t j = 0; j < count; ++j)
                                           (*pg[0])[i * c + start + j] += g[i * count + j];
                               });
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t r = parts[0].rows();
    std::size_t total = 0;
    Precision precision = Precision::f32;
    for (const Tensor& p : parts) {
        require_2d("concat_cols", p);
        if (p.rows() != r) {
            throw ShapeError("concat_cols: shape mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        }
        total += p.cols();
        if (p.precision() == Precision::f64) precision = Precision::f64;
    }
    std::vector<double> out(r * total);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        offsets.push_back(off);
        const std::size_t c = p.cols();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out[i * total + off + j] = p[i * c + j];
        off += c;
    }
    std::vector<std::size_t> widths;
    for (const Tensor& p : parts) widths.push_back(p.cols());
    std::vector<Tensor> parents(parts.begin(), parts.end());
    return Tensor::make_result({r, total}, std::move(out), precision, "concat_cols", std::move(parents),
                               [r, total, offsets, widths](std::span<const double> g, std::span<std::vector<double>*> pg) {
                                   for (std::size_t k = 0; k < pg.size(); ++k) {
                                       if (!pg[k]) continue;
                                       for (std::size_t i = 0; i < r; ++i)
                                           for (std::size_t j = 0; j < widths[k]; ++j)
                                               (*pg[k])[i * widths[k] + j] += g[i * total + offsets[k] + j];
                                   }
                               });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_2d("layer_norm", x);
    const std::size_t r = x.rows(), c = x.cols();
    if (gain.numel() != c || bias.numel() != c) {
        throw ShapeError("layer_norm: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(gain.shape()));
    }
    std::vector<double> xhat(r * c), inv_std(r), out(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += x[i * c + j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (x[i * c + j] - mu) * (x[i * c + j] - mu);
        var /= static_cast<double>(c);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            xhat[i * c + j] = (x[i * c + j] - mu) * inv_std[i];
            out[i * c + j] = gain[j] * xhat[i * c + j] + bias[j];
        }
    }
    Precision precision = x.precision() == Precision::f64 || gain.precision() == Precision::f64 ? Precision::f64
                                                                                                 : Precision::f32;
    round_in_place(out, precision);
    return Tensor::make_result(
        {r, c}, std::move(out), precision, "layer_norm", {x, gain, bias},
        [gain, xhat = std::move(xhat), inv_std = std::move(inv_std), r, c](std::span<const double> g,
                                                                         std::span<std::vector<double>*> pg) {
            if (pg[0]) {
                std::vector<double> dxhat(c);
                for (std::size_t i = 0; i < r; ++i) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        dxhat[j] = g[i * c + j] * gain[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[i * c + j];
                    }
                    m1 /= static_cast<double>(c);
                    m2 /= static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j)
                        (*pg[0])[i * c + j] += inv_std[i] * (dxhat[j] - m1 - xhat[i * c + j] * m2);
                }
            }
            if (pg[1])
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) (*pg[1])[j] += g[i * c + j] * xhat[i * c + j];
            if (pg[2])
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) (*pg[2])[j] += g[i * c + j];
        });
}

namespace {

struct Tap {
    std::size_t lo;
    std::size_t hi;
    double frac;
};

std::vector<Tap> taps(std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    for (std::size_t o = 0; o < out; ++o) {
        if (in == 1 || out == 1) {
            t[o] = {0, 0, 0.0};
            continue;
        }
        const double pos = static_cast<double>(o) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
        std::size_t lo = static_cast<std::size_t>(std::floor(pos));
        if (lo >= in - 1) lo = in - 1;
        const std::size_t hi = std::min(lo + 1, in - 1);
        t[o] = {lo, hi, pos - static_cast<double>(lo)};
    }
    return t;
}

}  // namespace

Tensor bilinear_upsample(const Tensor& map, std::size_t h, std::size_t w) {
    if (map.rank() != 2 || map.numel() == 0) throw ShapeError("bilinear_upsample: expected a non-empty 2-D map");
    const std::size_t gh = map.rows(), gw = map.cols();
    if (h < gh || w < gw) {
        throw ShapeError("bilinear_upsample: target " + shape_str({h, w}) + " smaller than input " +
                         shape_str(map.shape()));
    }
    auto ty = taps(gh, h);
    auto tx = taps(gw, w);
    std::vector<double> out(h * w);
    for (std::size_t i = 0; i < h; ++i) {
        const Tap& y = ty[i];
        for (std::size_t j = 0; j < w; ++j) {
            const Tap& x = tx[j];
            const double top = map[y.lo * gw + x.lo] * (1.0 - x.frac) + map[y.lo * gw + x.hi] * x.frac;
            const double bot = map[y.hi * gw + x.lo] * (1.0 - x.frac) + map[y.hi * gw + x.hi] * x.frac;
            out[i * w + j] = top * (1.0 - y.frac) + bot * y.frac;
        }
    }
    Precision precision = promote(map);
    round_in_place(out, precision);
    return Tensor::make_result({h, w}, std::move(out), precision, "bilinear_upsample", {map},
                               [ty = std::move(ty), tx = std::move(tx), gw, w](std::span<const double> g,
                                                                               std::span<std::vector<double>*> pg) {
                                   if (!pg[0]) return;
                                   auto& gm = *pg[0];
                                   for (std::size_t i = 0; i < ty.size(); ++i) {
                                       const Tap& y = ty[i];
                                       for (std::size_t j = 0; j < tx.size(); ++j) {
                                           const Tap& x = tx[j];
                                           const double v = g[i * w + j];
                                           gm[y.lo * gw + x.lo] += v * (1.0 - y.frac) * (1.0 - x.frac);
                                           gm[y.lo * gw + x.hi] += v * (1.0 - y.frac) * x.frac;
                                           gm[y.hi * gw + x.lo] += v * y.frac * (1.0 - x.frac);
                                           gm[y.hi * gw + x.hi] += v * y.frac * x.frac;
                                       }
                                   }
                               });
}

}  // namespace mvfa
