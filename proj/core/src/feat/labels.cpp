#include "introspect/feat/labels.hpp"

#include <algorithm>
#include <stdexcept>

namespace introspect::feat {

LabelGrammar::LabelGrammar(const pipeline::Vocab& vocab) : vocab_(&vocab), any_(vocab.id("any")) {
    std::vector<std::pair<std::string, std::vector<int>>> families;
    std::vector<int> objects, fillers, subjects;
    for (const auto& c : vocab.classes) {
        families.emplace_back(c.name, c.members);
        const bool is_object = c.name == "city" || c.name == "color" || c.name == "animal" || c.name == "food" ||
                               c.name == "tool" || c.name == "metal";
        const bool is_filler = c.name == "noun" || c.name == "verb" || c.name == "adj" || c.name == "adverb";
        if (is_object) objects.insert(objects.end(), c.members.begin(), c.members.end());
        if (is_filler) fillers.insert(fillers.end(), c.members.begin(), c.members.end());
        if (c.name == "subject") subjects = c.members;
    }
    std::vector<int> entity = subjects;
    entity.insert(entity.end(), objects.begin(), objects.end());
    for (auto* v : {&objects, &fillers, &entity}) std::sort(v->begin(), v->end());
    families.emplace_back("entity", entity);
    families.emplace_back("object", objects);
    families.emplace_back("word", fillers);

    for (const auto& [name, members] : families) {
        family_tokens_.push_back(vocab.id(name));
        family_members_.push_back(members);
    }
    auto add = [&](Label l, std::vector<int> ext) {
        std::vector<char> mask(vocab.size(), 0);
        for (int t : ext) mask[t] = 1;
        labels_.push_back(l);
        extensions_.push_back(std::move(ext));
        membership_.push_back(std::move(mask));
    };
    for (std::size_t f = 0; f < family_tokens_.size(); ++f) add({family_tokens_[f], any_}, family_members_[f]);
    for (const auto& c : vocab.classes) {
        const int fam = vocab.id(c.name);
        for (int t : c.members) add({fam, t}, {t});
    }
}

std::size_t LabelGrammar::index(const Label& l) const {
    for (std::size_t i = 0; i < labels_.size(); ++i) {
        if (labels_[i] == l) return i;
    }
    throw std::out_of_range("label [" + std::to_string(l.family) + ", " + std::to_string(l.modifier) +
                            "] is not in the grammar");
}

bool LabelGrammar::contains(const Label& l) const {
    return std::find(labels_.begin(), labels_.end(), l) != labels_.end();
}

std::string LabelGrammar::render_string(const Label& l) const {
    return vocab_->str(l.family) + " " + vocab_->str(l.modifier);
}

std::optional<Label> LabelGrammar::parse(std::span<const int> tokens) const {
    if (tokens.size() == 3 && tokens[2] != vocab_->eos) return std::nullopt;
    if (tokens.size() != 2 && tokens.size() != 3) return std::nullopt;
    const Label l{tokens[0], tokens[1]};
    if (!contains(l)) return std::nullopt;
    return l;
}

bool LabelGrammar::member(const Label& l, int token) const {
    const auto& mask = membership_[index(l)];
    return token >= 0 && token < static_cast<int>(mask.size()) && mask[token];
}

std::vector<float> simulate(const LabelGrammar& grammar, const Label& label, std::span<const int> x) {
    if (!grammar.contains(label)) throw std::invalid_argument("simulate: unknown label");
    std::vector<float> out(x.size());
    for (std::size_t t = 0; t < x.size(); ++t) out[t] = grammar.member(label, x[t]) ? 1.0f : 0.0f;
    return out;
}

}  // namespace introspect::feat
