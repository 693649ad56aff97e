#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "introspect/feat/describe.hpp"
#include "introspect/feat/labels.hpp"
#include "introspect/lm/transformer.hpp"
#include "introspect/metrics/branch.hpp"
#include "introspect/sae/sae.hpp"

namespace introspect::baselines {

/// Training features with their labels, searchable by inner product.
class FeatureIndex {
public:
    struct Entry {
        std::string id;
        int layer = 0;
        std::vector<float> v;
        feat::Label label;
    };

    FeatureIndex() = default;
    /// Ids must be unique; vectors are stored as given and must be unit norm.
    explicit FeatureIndex(std::vector<Entry> entries);

    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool has_layer(int layer) const { return by_layer_.count(layer) != 0; }

    /// Best match within `layer`; ties go to the lexicographically lowest id.
    const Entry& nn_layer(std::span<const float> v, int layer) const;
    const Entry& nn_all(std::span<const float> v) const;

    void save(const std::filesystem::path& path, const feat::LabelGrammar& grammar) const;
    static FeatureIndex load(const std::filesystem::path& path, const feat::LabelGrammar& grammar);

private:
    const Entry& best(std::span<const float> v, std::span<const std::size_t> candidates) const;

    std::vector<Entry> entries_;
    std::vector<std::size_t> all_;
    std::map<int, std::vector<std::size_t>> by_layer_;
};

inline const std::vector<float> kSelfieScales{1, 5, 10, 25, 50};

struct SelfieResult {
    std::optional<feat::Label> label;  // best-scoring decode
    double score = 0;
    std::vector<std::optional<feat::Label>> decodes;  // per scale
    std::vector<double> scores;                       // per scale
};

/// Decodes the untrained explainer with s * v in the slot for every scale and
/// keeps the decode with the highest simulator score (first scale on ties).
SelfieResult selfie_describe(const lm::Model& explainer, const feat::ActivationBank& bank, const feat::LabelGrammar& grammar,
                             std::span<const float> v, int layer, std::span<const float> scales = kSelfieScales,
                             int template_id = 3);

/// Token sequence instructing the model to pick one of the two branches.
std::vector<int> zero_shot_scaffold(const pipeline::Vocab& vocab);

/// Constrained two-branch decode: the branch with the higher likelihood of its
/// prefix wins (ties go to unchanged); content is the argmax among `allowed`.
/// `prompt` is a task prompt beginning with bos and carrying any slots.
std::vector<int> zero_shot_branch(const lm::Model& explainer, const pipeline::Vocab& vocab, const lm::TokenSeq& prompt,
                                  std::span<const int> allowed);

}  // namespace introspect::baselines
