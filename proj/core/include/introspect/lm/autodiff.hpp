#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "introspect/lm/tensor.hpp"

namespace introspect::lm {

/// Handle to a node of a Graph.
struct Var {
    std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
    bool valid() const { return id != std::numeric_limits<std::uint32_t>::max(); }
};

/// Reverse-mode tape over matrix-valued nodes.
///
/// Every op appends a node holding its value and a closure that pushes the
/// node's gradient into its parents. backward() walks the tape once in reverse
/// order, so nodes must be created in topological order (which the op API
/// guarantees). A graph built with record = false stores no closures and acts
/// as a plain evaluator.
template <typename Real>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, Var self)>;

    explicit Graph(bool record = true) : record_(record) {}

    bool recording() const { return record_; }

    /// Constant that borrows external storage; it must outlive the graph.
    Var borrow(const Matrix<Real>& value);
    /// Constant or differentiable input owning its value.
    Var input(Matrix<Real> value, bool requires_grad = false);
    /// Leaf bound to a parameter; backward() adds into parameter.grad.
    Var parameter(Parameter<Real>& p);
    /// Result of an op.
    Var emplace(Matrix<Real> value, std::initializer_list<Var> parents, BackwardFn backward);

    const Matrix<Real>& value(Var v) const;
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

    /// Gradient buffer of a node; valid only during/after backward().
    Matrix<Real>& grad(Var v) { return nodes_[v.id].grad; }
    const Matrix<Real>& grad(Var v) const { return nodes_[v.id].grad; }

    /// Seeds d(loss)/d(loss) = 1 for a 1x1 node and propagates.
    void backward(Var loss);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        const Matrix<Real>* borrowed = nullptr;
        Matrix<Real> owned;
        Matrix<Real> grad;
        bool requires_grad = false;
        Parameter<Real>* param = nullptr;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
    bool record_;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace introspect::lm
