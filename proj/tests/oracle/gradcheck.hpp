#pragma once

// Central finite differences against the tape gradients of a double-precision
// copy of a model, one relative error per parameter group.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "introspect/lm/ops.hpp"
#include "introspect/lm/transformer.hpp"

namespace oracle {

struct GradBatch {
    introspect::lm::BatchInput<double> input;
    std::vector<int> targets;
    std::vector<double> weights;
};

inline double loss_of(introspect::lm::Transformer<double>& m, const GradBatch& b, bool backward) {
    using namespace introspect::lm;
    Graph<double> g(backward);
    GraphResult r = m.build(g, b.input);
    Var loss = ops::cross_entropy<double>(g, r.logits, b.targets, b.weights);
    if (backward) g.backward(loss);
    return g.value(loss)(0, 0);
}

/// name -> ||g_tape - g_fd|| / max(||g_tape|| + ||g_fd||, 1e-12)
inline std::map<std::string, double> gradient_errors(introspect::lm::Transformer<double>& m, const GradBatch& b,
                                                     double h = 1e-6) {
    m.zero_grad();
    loss_of(m, b, true);
    std::map<std::string, double> out;
    for (auto* p : m.parameters()) {
        double diff2 = 0, a2 = 0, f2 = 0;
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            double& w = p->value.data()[i];
            const double saved = w;
            w = saved + h;
            const double lp = loss_of(m, b, false);
            w = saved - h;
            const double lm = loss_of(m, b, false);
            w = saved;
            const double fd = (lp - lm) / (2 * h);
            const double ad = p->grad.data()[i];
            diff2 += (fd - ad) * (fd - ad);
            a2 += ad * ad;
            f2 += fd * fd;
        }
        out[p->name] = std::sqrt(diff2) / std::max(std::sqrt(a2) + std::sqrt(f2), 1e-12);
    }
    return out;
}

}  // namespace oracle
