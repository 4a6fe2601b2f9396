#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace nfuse {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << ')';
    return os.str();
}

struct TensorError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : TensorError {
    using TensorError::TensorError;
};
struct NumericError : TensorError {
    using TensorError::TensorError;
};

// When on (default), every primitive op scans its output and raises
// NumericError on NaN/Inf so overflow is reported at the op that produced it.
inline bool& finite_checks() {
    static bool on = true;
    return on;
}

template <typename T>
class Tape;

// Immutable dense n-dimensional array, row-major. A tensor optionally refers
// to a node on a Tape; ops record themselves when any input does.
template <typename T>
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<T>> data;
    int node = -1;
    Tape<T>* tape = nullptr;

    Tensor() : data(std::make_shared<std::vector<T>>()) {}

    Tensor(Shape s, std::vector<T> d)
        : shape(std::move(s)), data(std::make_shared<std::vector<T>>(std::move(d))) {
        if (shape_numel(shape) != data->size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                             std::to_string(data->size()) + " values");
    }

    static Tensor zeros(Shape s) {
        std::size_t n = shape_numel(s);
        return Tensor(std::move(s), std::vector<T>(n, T(0)));
    }
    static Tensor full(Shape s, T v) {
        std::size_t n = shape_numel(s);
        return Tensor(std::move(s), std::vector<T>(n, v));
    }
    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    std::size_t size() const { return data->size(); }
    std::size_t rank() const { return shape.size(); }
    const std::vector<T>& vals() const { return *data; }

    T item() const {
        if (size() != 1) throw ShapeError("item: tensor " + shape_str(shape) + " is not a scalar");
        return (*data)[0];
    }

    bool requires_grad() const { return node >= 0; }

    Tensor detached() const {
        Tensor t = *this;
        t.node = -1;
        t.tape = nullptr;
        return t;
    }
};

// Append-only record of differentiable ops. Backward traverses nodes in
// strict reverse append order; gradients accumulate additively when a node
// feeds multiple consumers.
template <typename T>
class Tape {
public:
    struct Node {
        Shape shape;
        std::function<void(Tape&, const std::vector<T>&)> back;  // null for leaves
        const char* op;
    };

    int leaf(Shape shape) {
        nodes_.push_back({std::move(shape), nullptr, "leaf"});
        return static_cast<int>(nodes_.size()) - 1;
    }

    int record(Shape shape, const char* op, std::function<void(Tape&, const std::vector<T>&)> back) {
        nodes_.push_back({std::move(shape), std::move(back), op});
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Register an existing tensor as a grad-enabled leaf of this tape.
    Tensor<T> watch(const Tensor<T>& t) {
        Tensor<T> r = t;
        r.tape = this;
        r.node = leaf(t.shape);
        return r;
    }

    std::size_t num_nodes() const { return nodes_.size(); }

    void accumulate(int id, const std::vector<T>& g) {
        if (id < 0) return;
        auto& dst = grads_[static_cast<std::size_t>(id)];
        if (dst.empty()) {
            dst = g;
        } else {
            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
    }

    // Reverse-mode sweep from a scalar loss. Returns gradients for every
    // leaf node that was reached (unreached leaves map to zeros).
    std::unordered_map<int, Tensor<T>> backward(const Tensor<T>& loss) {
        if (loss.size() != 1)
            throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape));
        if (loss.tape != this || loss.node < 0)
            throw TensorError("backward: loss is not a node on this tape");
        grads_.assign(nodes_.size(), {});
        grads_[static_cast<std::size_t>(loss.node)] = {T(1)};
        for (int id = loss.node; id >= 0; --id) {
            auto& g = grads_[static_cast<std::size_t>(id)];
            if (!g.empty() && nodes_[static_cast<std::size_t>(id)].back)
                nodes_[static_cast<std::size_t>(id)].back(*this, g);
        }
        std::unordered_map<int, Tensor<T>> out;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (nodes_[i].back) continue;  // not a leaf
            auto& g = grads_[i];
            if (g.empty())
                out.emplace(static_cast<int>(i), Tensor<T>::zeros(nodes_[i].shape));
            else
                out.emplace(static_cast<int>(i), Tensor<T>(nodes_[i].shape, g));
        }
        grads_.clear();
        return out;
    }

private:
    std::vector<Node> nodes_;
    std::vector<std::vector<T>> grads_;
};

namespace detail {

template <typename T>
Tape<T>* joined_tape(std::initializer_list<const Tensor<T>*> ts, const char* op) {
    Tape<T>* tape = nullptr;
    for (const Tensor<T>* t : ts) {
        if (t->tape == nullptr) continue;
        if (tape == nullptr)
            tape = t->tape;
        else if (tape != t->tape)
            throw TensorError(std::string(op) + ": operands live on different tapes");
    }
    return tape;
}

template <typename T>
void check_finite(const char* op, const std::vector<T>& v) {
    if (!finite_checks()) return;
    for (T x : v)
        if (!std::isfinite(static_cast<double>(x)))
            throw NumericError(std::string(op) + ": non-finite value produced");
}

}  // namespace detail

}  // namespace nfuse
