#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace csasr {

class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ValueError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline Shape shape_strides(const Shape& s) {
    Shape st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

/// Dense row-major tensor. `grad` is either empty or the same length as
/// `data`; it is allocated lazily the first time a gradient can reach
/// this tensor.
template <typename T>
class Tensor {
public:
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;

    Tensor() = default;
    Tensor(Shape s, std::vector<T> d, bool rg) : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
        validate();
        if (requires_grad) grad.assign(data.size(), T(0));
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t extent(std::size_t axis) const { return shape.at(axis); }

    bool has_grad() const { return !grad.empty(); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
    }

    void validate() const {
        for (std::size_t e : shape) {
            if (e < 1) throw ShapeError("tensor: zero extent in shape " + shape_str(shape));
        }
        if (data.size() != shape_numel(shape)) {
            throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
    }
};

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <typename T>
TensorPtr<T> zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> d(shape_numel(shape), T(0));
    return std::make_shared<Tensor<T>>(std::move(shape), std::move(d), requires_grad);
}

template <typename T>
TensorPtr<T> full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> d(shape_numel(shape), value);
    return std::make_shared<Tensor<T>>(std::move(shape), std::move(d), requires_grad);
}

template <typename T>
TensorPtr<T> tensor_from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    return std::make_shared<Tensor<T>>(std::move(shape), std::move(values), requires_grad);
}

template <typename T>
TensorPtr<T> scalar_tensor(T value, bool requires_grad = false) {
    return tensor_from<T>({1}, {value}, requires_grad);
}

/// Records the backward closures of an eager forward pass. Nodes are
/// appended in execution order, which is already topological, so the
/// backward sweep is a plain reverse iteration. A tape is confined to
/// one thread.
template <typename T>
class Tape {
public:
    void record(const char* op, const void* output, std::function<void()> backward_fn) {
        nodes_.push_back(Node{op, std::move(backward_fn)});
        produced_.insert(output);
    }

    bool produced(const void* tensor) const { return produced_.count(tensor) != 0; }

    std::size_t size() const { return nodes_.size(); }

    void clear() {
        nodes_.clear();
        produced_.clear();
    }

    /// Seeds d(loss)/d(loss) = 1 and runs every recorded closure in
    /// reverse. Gradients accumulate additively across fan-out.
    void backward(const TensorPtr<T>& loss) {
        if (loss->numel() != 1) {
            throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss->shape));
        }
        if (!produced(loss.get())) {
            throw ValueError("backward: loss tensor was not produced on this tape");
        }
        loss->ensure_grad();
        loss->grad[0] += T(1);
        for (std::size_t i = nodes_.size(); i-- > 0;) nodes_[i].fn();
    }

private:
    struct Node {
        const char* op;
        std::function<void()> fn;
    };
    std::vector<Node> nodes_;
    std::unordered_set<const void*> produced_;
};

namespace detail {

/// Common op prologue: decides whether this op participates in
/// autodiff and prepares grad buffers on the tensors involved.
template <typename T>
bool track_unary(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& out) {
    bool rec = tape != nullptr && x->requires_grad;
    if (rec) {
        x->ensure_grad();
        out->requires_grad = true;
        out->ensure_grad();
    }
    return rec;
}

template <typename T>
bool track_binary(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b, const TensorPtr<T>& out) {
    bool rec = tape != nullptr && (a->requires_grad || b->requires_grad);
    if (rec) {
        if (a->requires_grad) a->ensure_grad();
        if (b->requires_grad) b->ensure_grad();
        out->requires_grad = true;
        out->ensure_grad();
    }
    return rec;
}

}  // namespace detail

}  // namespace csasr
