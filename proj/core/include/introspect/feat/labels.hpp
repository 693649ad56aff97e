#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "introspect/pipeline/world.hpp"

namespace introspect::feat {

/// A label renders as [family, modifier]; modifier is the `any` token or one member token.
struct Label {
    int family = 0;
    int modifier = 0;
    friend bool operator==(const Label&, const Label&) = default;
};

/// Closed, enumerable label grammar derived from the vocabulary's token classes.
///
/// Families are the leaf classes plus a few unions (entity = subject + objects,
/// object = all objects, word = all fillers). Each family has an `any` label; each
/// content token has a singleton label under its leaf class.
class LabelGrammar {
public:
    explicit LabelGrammar(const pipeline::Vocab& vocab);

    const std::vector<Label>& labels() const { return labels_; }
    std::size_t size() const { return labels_.size(); }
    const Label& at(std::size_t i) const { return labels_.at(i); }
    /// Index of `l` in labels(); throws for labels outside the grammar.
    std::size_t index(const Label& l) const;
    bool contains(const Label& l) const;

    std::vector<int> render(const Label& l) const { return {l.family, l.modifier}; }
    std::string render_string(const Label& l) const;
    /// Accepts exactly [family, modifier] optionally followed by eos.
    std::optional<Label> parse(std::span<const int> tokens) const;

    bool member(const Label& l, int token) const;
    /// Sorted token ids matched by the label.
    const std::vector<int>& extension(const Label& l) const { return extensions_.at(index(l)); }
    const std::vector<int>& family_tokens() const { return family_tokens_; }
    int any_token() const { return any_; }
    const pipeline::Vocab& vocab() const { return *vocab_; }

private:
    const pipeline::Vocab* vocab_;
    int any_ = 0;
    std::vector<int> family_tokens_;
    std::vector<std::vector<int>> family_members_;  // per family token, sorted
    std::vector<Label> labels_;
    std::vector<std::vector<int>> extensions_;
    std::vector<std::vector<char>> membership_;  // label -> vocab-sized mask
};

/// â(x, t, E): 1 where x_t matches the label, else 0.
std::vector<float> simulate(const LabelGrammar& grammar, const Label& label, std::span<const int> x);

}  // namespace introspect::feat
