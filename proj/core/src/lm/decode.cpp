#include "introspect/lm/decode.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace introspect::lm {

int argmax(std::span<const float> logits) {
    if (logits.empty()) throw std::invalid_argument("argmax of empty logits");
    int best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = static_cast<int>(i);
    }
    return best;
}

int argmax_among(std::span<const float> logits, std::span<const int> allowed) {
    if (allowed.empty()) throw std::invalid_argument("argmax_among: empty candidate set");
    int best = -1;
    for (int id : allowed) {
        if (id < 0 || static_cast<std::size_t>(id) >= logits.size()) {
            throw std::out_of_range("argmax_among: candidate id outside vocabulary");
        }
        if (best < 0 || logits[id] > logits[best] || (logits[id] == logits[best] && id < best)) best = id;
    }
    return best;
}

int next_token(const Model& model, const TokenSeq& seq) {
    if (seq.ids.empty()) throw std::invalid_argument("next_token: empty sequence");
    const Trace tr = model.forward(seq);
    return argmax(tr.logits_at(seq.size() - 1));
}

std::vector<int> greedy_decode(const Model& model, const TokenSeq& prompt, int max_new, int stop) {
    TokenSeq seq = prompt;
    std::vector<int> out;
    const auto context = static_cast<std::size_t>(model.config().context);
    for (int i = 0; i < max_new && seq.size() < context; ++i) {
        const int tok = next_token(model, seq);
        out.push_back(tok);
        if (tok == stop) break;
        seq.ids.push_back(tok);
    }
    return out;
}

std::vector<double> log_softmax(std::span<const float> logits) {
    double mx = -INFINITY;
    for (float v : logits) mx = std::max(mx, double(v));
    double z = 0;
    for (float v : logits) z += std::exp(double(v) - mx);
    const double lz = mx + std::log(z);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = double(logits[i]) - lz;
    return out;
}

double continuation_logprob(const Model& model, const TokenSeq& prompt, std::span<const int> continuation) {
    if (prompt.ids.empty()) throw std::invalid_argument("continuation_logprob: empty prompt");
    TokenSeq seq = prompt;
    seq.ids.insert(seq.ids.end(), continuation.begin(), continuation.end());
    const Trace tr = model.forward(seq);
    double total = 0;
    for (std::size_t k = 0; k < continuation.size(); ++k) {
        const auto lp = log_softmax(tr.logits_at(prompt.size() - 1 + k));
        total += lp[continuation[k]];
    }
    return total;
}

}  // namespace introspect::lm
