#pragma once

#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dcml/common.hpp"

namespace dcml {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ")";
    return os.str();
}

template <typename T>
class GradTape;

// Dense row-major tensor. Copying a Tensor aliases the underlying buffer;
// the tape holds aliases of every recorded input/output so the graph stays
// alive until the tape is destroyed.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor from_data(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (shape_numel(shape) != int64_t(values.size()))
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        for (int d : shape)
            if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
        if (!all_finite(values))
            throw ValueError("non-finite element entering the graph");
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->values = std::move(values);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<T> v(size_t(shape_numel(shape)), T(0));
        return from_data(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor full(Shape shape, T value) {
        std::vector<T> v(size_t(shape_numel(shape)), value);
        return from_data(std::move(shape), std::move(v));
    }

    static Tensor scalar(T value) { return from_data({1}, {value}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return int(node_->shape.size()); }
    int64_t numel() const { return int64_t(node_->values.size()); }
    bool is_scalar() const { return numel() == 1; }

    const std::vector<T>& values() const { return node_->values; }
    std::vector<T>& values() { return node_->values; }
    T item() const {
        if (!is_scalar()) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->values[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    bool has_grad() const { return !node_->grad.empty(); }
    // Gradient buffer, allocated zero-filled on first touch.
    std::vector<T>& grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->values.size(), T(0));
        return node_->grad;
    }
    const std::vector<T>& grad() const {
        if (node_->grad.empty())
            throw ValueError("gradient read before backward populated it");
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    // Set by the tape when this tensor is the output of a recorded primitive.
    int tape_index() const { return node_->tape_index; }
    const GradTape<T>* tape() const { return node_->tape; }

private:
    friend class GradTape<T>;

    struct Node {
        Shape shape;
        std::vector<T> values;
        std::vector<T> grad;
        bool requires_grad = false;
        int tape_index = -1;
        const GradTape<T>* tape = nullptr;
    };

    std::shared_ptr<Node> node_;
};

// Recording tape for reverse-mode differentiation. Primitives append records
// in execution order, which is a topological order by construction; backward
// walks the records once, in reverse, from the root's record down.
template <typename T>
class GradTape {
public:
    struct Record {
        std::string kind;
        std::vector<Tensor<T>> inputs;
        Tensor<T> output;
        std::function<void()> backward;
    };

    GradTape() = default;
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;
    ~GradTape() {
        if (active_slot() == this) active_slot() = nullptr;
    }

    static GradTape* active() { return active_slot(); }

    // RAII activation; tapes never nest in this codebase but restoring the
    // previous pointer keeps the guard safe anywhere.
    class Scope {
    public:
        explicit Scope(GradTape& tape) : prev_(active_slot()) { active_slot() = &tape; }
        ~Scope() { active_slot() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        GradTape* prev_;
    };

    void record(std::string kind, std::vector<Tensor<T>> inputs, Tensor<T> output,
                std::function<void()> backward) {
        output.node_->tape_index = int(records_.size());
        output.node_->tape = this;
        output.node_->requires_grad = true;
        records_.push_back(Record{std::move(kind), std::move(inputs), std::move(output),
                                  std::move(backward)});
    }

    size_t size() const { return records_.size(); }

    void clear() {
        for (auto& rec : records_) {
            rec.output.node_->tape_index = -1;
            rec.output.node_->tape = nullptr;
        }
        records_.clear();
    }

    // Reverse sweep from `root`. Leaves with requires_grad accumulate
    // d(root)/d(leaf); fan-out accumulates additively. Records whose output
    // gradient was never touched are skipped, so each node on the path from
    // the root is visited exactly once.
    void backward(Tensor<T> root) {
        if (!root.is_scalar())
            throw ShapeError("backward root must be scalar, got " + shape_str(root.shape()));
        if (root.tape() != this || root.tape_index() < 0)
            throw ValueError("backward root is not a node of this tape");
        root.grad()[0] = T(1);
        for (int i = root.tape_index(); i >= 0; --i) {
            Record& rec = records_[size_t(i)];
            if (!rec.output.has_grad()) continue;
            rec.backward();
        }
    }

private:
    static GradTape*& active_slot() {
        thread_local GradTape* slot = nullptr;
        return slot;
    }

    std::vector<Record> records_;
};

}  // namespace dcml
