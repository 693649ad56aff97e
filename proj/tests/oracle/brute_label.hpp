#pragma once

// Exhaustive label scorer: simulate every label on every input and average a
// plainly computed Pearson correlation. Shares nothing with the closed-form
// scorer beyond the label grammar itself.

#include <cmath>
#include <span>
#include <vector>

#include "introspect/feat/describe.hpp"
#include "introspect/feat/labels.hpp"

namespace oracle {

inline double plain_pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = double(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i] / n;
        mb += b[i] / n;
    }
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa <= 0 || sbb <= 0) return 0;
    return sab / std::sqrt(saa * sbb);
}

inline introspect::feat::LabelScore brute_force_label(const introspect::feat::LabelGrammar& g,
                                                      std::span<const std::vector<int>> corpus,
                                                      std::span<const std::vector<double>> acts, double tie = 1e-9) {
    introspect::feat::LabelScore best{g.labels()[0], -2.0};
    for (const auto& l : g.labels()) {
        double total = 0;
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            const auto sim = introspect::feat::simulate(g, l, corpus[i]);
            const std::vector<double> s(sim.begin(), sim.end());
            if (s.size() >= 2) total += plain_pearson(acts[i], s);
        }
        const double score = total / double(corpus.size());
        const bool win = score > best.score + tie ||
                         (std::abs(score - best.score) <= tie && g.render_string(l) < g.render_string(best.label));
        if (win) best = {l, score};
    }
    return best;
}

}  // namespace oracle
