#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mvfa/errors.hpp"

namespace mvfa {

using Shape = std::vector<std::size_t>;

// Storage is always double; f32 tensors round every stored value to the
// nearest float so their contents are exactly IEEE-754 binary32 values.
enum class Precision : std::uint8_t { f32, f64 };

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Tensor;

struct Node {
    std::string op;
    std::vector<Tensor> parents;
    // Adds d(loss)/d(parent) into parent_grads[i]; entries are null for
    // parents that do not require gradients.
    std::function<void(std::span<const double> grad_out, std::span<std::vector<double>*> parent_grads)>
        backward;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    Precision precision = Precision::f32;
    bool requires_grad = false;
    std::string name;
    std::shared_ptr<Node> node;
};

// Shared handle to a dense row-major array. Copies alias the same storage;
// use clone() for an independent copy.
class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> data, Precision precision = Precision::f32);
    static Tensor zeros(Shape shape, Precision precision = Precision::f32);
    static Tensor full(Shape shape, double value, Precision precision = Precision::f32);
    static Tensor scalar(double value, Precision precision = Precision::f32);
    // Trainable leaf; name is the parameter identifier used by GradientMap.
    static Tensor parameter(std::string name, Shape shape, std::vector<double> data,
                            Precision precision = Precision::f32);

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t rows() const;
    std::size_t cols() const;
    std::size_t numel() const { return impl_->data.size(); }
    Precision precision() const { return impl_->precision; }
    bool requires_grad() const { return impl_->requires_grad; }
    const std::string& name() const { return impl_->name; }
    bool is_leaf() const { return impl_->node == nullptr; }
    const Node* node() const { return impl_->node.get(); }

    std::span<const double> data() const { return impl_->data; }
    double operator[](std::size_t i) const { return impl_->data[i]; }
    double at(std::size_t r, std::size_t c) const;
    double item() const;

    // Only leaves may be mutated (optimizer updates, test perturbations).
    // Values are re-rounded to the tensor precision on write.
    void assign(std::span<const double> values);
    void set(std::size_t i, double value);

    Tensor clone() const;
    Tensor detach() const;
    Tensor with_precision(Precision precision) const;

    bool same(const Tensor& other) const noexcept { return impl_ == other.impl_; }
    const TensorImpl* id() const noexcept { return impl_.get(); }

    // Internal: result constructor used by ops.
    static Tensor make_result(Shape shape, std::vector<double> data, Precision precision, std::string op,
                              std::vector<Tensor> parents, decltype(Node::backward) backward);

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled() noexcept;

// Gradients of a scalar loss with respect to each reachable trainable leaf.
class GradientMap {
public:
    void add(const Tensor& leaf, Tensor grad);
    bool contains(const Tensor& leaf) const;
    bool contains(const std::string& name) const;
    const Tensor& at(const Tensor& leaf) const;
    const Tensor& at(const std::string& name) const;
    std::vector<std::string> names() const;
    std::size_t size() const { return entries_.size(); }

    struct Entry {
        Tensor leaf;
        Tensor grad;
    };
    const std::vector<Entry>& entries() const { return entries_; }

private:
    std::vector<Entry> entries_;
};

GradientMap backward(const Tensor& loss);

// ---- operations --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// 2-D reduction; axis 0 collapses rows (result 1 x cols), axis 1 collapses
// columns (result rows x 1). Ties route the gradient to the lowest index.
Tensor max(const Tensor& a, std::size_t axis);
Tensor max_all(const Tensor& a);
Tensor transpose(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor l2_normalize_rows(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor concat_cols(std::span<const Tensor> parts);
// Per-row normalization to zero mean and unit variance, then gain * x + bias
// with gain and bias of shape 1 x cols.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// Align-corners bilinear resize of a g x g map to h x w.
Tensor bilinear_upsample(const Tensor& map, std::size_t h, std::size_t w);

}  // namespace mvfa
