#include "introspect/lm/autodiff.hpp"

#include <stdexcept>

namespace introspect::lm {

template <typename Real>
Var Graph<Real>::borrow(const Matrix<Real>& value) {
    Node n;
    n.borrowed = &value;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename Real>
Var Graph<Real>::input(Matrix<Real> value, bool requires_grad) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = record_ && requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename Real>
Var Graph<Real>::parameter(Parameter<Real>& p) {
    Node n;
    n.borrowed = &p.value;
    n.requires_grad = record_ && p.trainable;
    n.param = n.requires_grad ? &p : nullptr;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename Real>
Var Graph<Real>::emplace(Matrix<Real> value, std::initializer_list<Var> parents, BackwardFn backward) {
    Node n;
    n.owned = std::move(value);
    if (record_) {
        for (Var p : parents) {
            if (nodes_[p.id].requires_grad) {
                n.requires_grad = true;
                break;
            }
        }
        if (n.requires_grad) n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename Real>
const Matrix<Real>& Graph<Real>::value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.borrowed ? *n.borrowed : n.owned;
}

template <typename Real>
void Graph<Real>::backward(Var loss) {
    if (!record_) throw std::logic_error("Graph::backward on a non-recording graph");
    const Matrix<Real>& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) throw std::invalid_argument("Graph::backward: loss must be 1x1");
    for (std::size_t i = 0; i <= loss.id; ++i) {
        Node& n = nodes_[i];
        if (n.requires_grad) {
            const Matrix<Real>& v = n.borrowed ? *n.borrowed : n.owned;
            n.grad.resize(v.rows(), v.cols());
        }
    }
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad(0, 0) = Real(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad) continue;
        if (n.backward) n.backward(*this, Var{static_cast<std::uint32_t>(i)});
        if (n.param) {
            Real* dst = n.param->grad.data();
            const Real* src = n.grad.data();
            for (std::size_t k = 0; k < n.grad.size(); ++k) dst[k] += src[k];
        }
    }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace introspect::lm
