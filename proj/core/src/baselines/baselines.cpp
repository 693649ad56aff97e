#include "introspect/baselines/baselines.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "introspect/lm/decode.hpp"
#include "introspect/util/encoding.hpp"
#include "introspect/util/jsonl.hpp"

namespace introspect::baselines {

FeatureIndex::FeatureIndex(std::vector<Entry> entries) : entries_(std::move(entries)) {
    std::set<std::string> seen;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const Entry& e = entries_[i];
        if (!seen.insert(e.id).second) throw std::invalid_argument("FeatureIndex: duplicate id " + e.id);
        if (!entries_.empty() && e.v.size() != entries_[0].v.size()) {
            throw std::invalid_argument("FeatureIndex: inconsistent vector dimensions");
        }
        all_.push_back(i);
        by_layer_[e.layer].push_back(i);
    }
}

const FeatureIndex::Entry& FeatureIndex::best(std::span<const float> v, std::span<const std::size_t> candidates) const {
    const Entry* out = nullptr;
    double best_dot = -INFINITY;
    for (std::size_t i : candidates) {
        const Entry& e = entries_[i];
        if (e.v.size() != v.size()) throw std::invalid_argument("FeatureIndex: query dimension mismatch");
        double d = 0;
        for (std::size_t c = 0; c < v.size(); ++c) d += double(e.v[c]) * v[c];
        if (!out || d > best_dot || (d == best_dot && e.id < out->id)) {
            out = &e;
            best_dot = d;
        }
    }
    return *out;
}

const FeatureIndex::Entry& FeatureIndex::nn_layer(std::span<const float> v, int layer) const {
    auto it = by_layer_.find(layer);
    if (it == by_layer_.end()) throw std::out_of_range("FeatureIndex: no training features at layer " + std::to_string(layer));
    return best(v, it->second);
}

const FeatureIndex::Entry& FeatureIndex::nn_all(std::span<const float> v) const {
    if (all_.empty()) throw std::out_of_range("FeatureIndex: empty index");
    return best(v, all_);
}

void FeatureIndex::save(const std::filesystem::path& path, const feat::LabelGrammar& grammar) const {
    std::vector<nlohmann::json> rows;
    for (const auto& e : entries_) {
        rows.push_back({{"id", e.id},
                        {"layer", e.layer},
                        {"label_id", grammar.index(e.label)},
                        {"vector", util::encode_f32(e.v)}});
    }
    util::write_jsonl(path, rows);
}

FeatureIndex FeatureIndex::load(const std::filesystem::path& path, const feat::LabelGrammar& grammar) {
    std::vector<Entry> entries;
    for (const auto& j : util::read_jsonl(path)) {
        entries.push_back({j.at("id"), j.at("layer"), util::decode_f32(j.at("vector").get<std::string>()),
                           grammar.at(j.at("label_id").get<std::size_t>())});
    }
    return FeatureIndex(std::move(entries));
}

SelfieResult selfie_describe(const lm::Model& explainer, const feat::ActivationBank& bank, const feat::LabelGrammar& grammar,
                             std::span<const float> v, int layer, std::span<const float> scales, int template_id) {
    if (scales.empty()) throw std::invalid_argument("selfie_describe: no scales");
    SelfieResult r;
    std::vector<float> sv(v.size());
    for (float s : scales) {
        for (std::size_t i = 0; i < v.size(); ++i) sv[i] = s * v[i];
        const auto d = feat::describe(explainer, nullptr, grammar, sv, layer, template_id);
        r.decodes.push_back(d.label);
        r.scores.push_back(feat::simulator_score(bank, grammar, v, layer, d.label));
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < r.scores.size(); ++i) {
        if (r.scores[i] > r.scores[best]) best = i;
    }
    r.label = r.decodes[best];
    r.score = r.scores[best];
    return r;
}

std::vector<int> zero_shot_scaffold(const pipeline::Vocab& vocab) {
    return vocab.ids({"respond", "with", "exactly", "one", "of", "the", "two", "options", "below"});
}

std::vector<int> zero_shot_branch(const lm::Model& explainer, const pipeline::Vocab& vocab, const lm::TokenSeq& prompt,
                                  std::span<const int> allowed) {
    if (allowed.empty()) throw std::invalid_argument("zero_shot_branch: no allowed content tokens");
    const auto changed = metrics::branch_prefix(vocab, true);
    const auto unchanged = metrics::branch_prefix(vocab, false);
    const double lc = lm::continuation_logprob(explainer, prompt, changed);
    const double lu = lm::continuation_logprob(explainer, prompt, unchanged);
    const bool has_changed = lc > lu;
    lm::TokenSeq seq = prompt;
    const auto& prefix = has_changed ? changed : unchanged;
    seq.ids.insert(seq.ids.end(), prefix.begin(), prefix.end());
    const auto trace = explainer.forward(seq);
    const int content = lm::argmax_among(trace.logits_at(seq.size() - 1), allowed);
    return metrics::render_branch(vocab, has_changed, content);
}

}  // namespace introspect::baselines
