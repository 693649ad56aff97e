#include "introspect/pipeline/world.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace introspect::pipeline {

namespace {

const std::vector<std::string> kObjectClasses{"city", "color", "animal", "food", "tool", "metal"};
const std::vector<std::string> kFillerClasses{"noun", "verb", "adj", "adverb"};
const std::vector<std::string> kMarkers{"Question", "Options", "Answer", "unknown", "hint", ":", "the", "answer", "is"};
const std::vector<std::string> kUnionFamilies{"entity", "object", "word"};

}  // namespace

const std::vector<std::string>& structural_words() {
    static const std::vector<std::string> words{
        "at", "layer", ",", "encodes", "activates", "for", "we", "can", "describe", "as", "encoding", "what", "does",
        "mean", "?", "most", "likely", "output", "would", "change", "to", "<<<", ">>>", ".", "remain", "unchanged",
        "from", "if", "were", "removed", "how", "assistant", "where", "did", "feature", "come", "in", "token",
        "layers", "respond", "with", "exactly", "one", "of", "two", "options", "below", "any"};
    return words;
}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
            throw std::invalid_argument("Vocab: duplicate token '" + tokens_[i] + "'");
        }
    }
    class_of.assign(tokens_.size(), -1);
}

int Vocab::id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) throw std::out_of_range("Vocab: unknown token '" + token + "'");
    return it->second;
}

const std::string& Vocab::str(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("Vocab: token id " + std::to_string(id) + " out of range");
    return tokens_[id];
}

std::vector<int> Vocab::ids(std::initializer_list<const char*> words) const {
    std::vector<int> out;
    for (const char* w : words) out.push_back(id(w));
    return out;
}

std::string Vocab::render(std::span<const int> ids) const {
    std::string out;
    for (int i : ids) {
        if (!out.empty()) out.push_back(' ');
        out += str(i);
    }
    return out;
}

int Vocab::layer_token(int layer) const {
    if (layer < 0 || layer >= max_layers()) throw std::out_of_range("Vocab: no token for layer " + std::to_string(layer));
    return layer_tokens_[layer];
}

void WorldConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v <= 0) throw std::invalid_argument(std::string("world: ") + name + " must be positive");
    };
    positive(subjects, "subjects");
    positive(relations, "relations");
    positive(objects_per_relation, "objects_per_relation");
    positive(filler_classes, "filler_classes");
    positive(filler_size, "filler_size");
    positive(digits, "digits");
    positive(max_layers, "max_layers");
    positive(text_min_len, "text_min_len");
    if (text_sentences < 0) throw std::invalid_argument("world: text_sentences must be >= 0");
    if (text_max_len < text_min_len) throw std::invalid_argument("world: text_max_len < text_min_len");
    if (relations > static_cast<int>(kObjectClasses.size())) {
        throw std::invalid_argument("world: at most " + std::to_string(kObjectClasses.size()) + " relations fit the vocabulary");
    }
    if (filler_classes > static_cast<int>(kFillerClasses.size())) {
        throw std::invalid_argument("world: at most " + std::to_string(kFillerClasses.size()) + " filler classes fit the vocabulary");
    }
    if (objects_per_relation < 6) {
        throw std::invalid_argument("world: objects_per_relation must be >= 6 (five options plus a distractor pool)");
    }
    if (subjects < 2) throw std::invalid_argument("world: need at least 2 subjects");
    if (digits > 10) throw std::invalid_argument("world: at most 10 digit tokens");
}

nlohmann::json WorldConfig::to_json() const {
    return {{"seed", seed},
            {"subjects", subjects},
            {"relations", relations},
            {"objects_per_relation", objects_per_relation},
            {"filler_classes", filler_classes},
            {"filler_size", filler_size},
            {"digits", digits},
            {"max_layers", max_layers},
            {"text_sentences", text_sentences},
            {"text_min_len", text_min_len},
            {"text_max_len", text_max_len}};
}

WorldConfig WorldConfig::from_json(const nlohmann::json& j) {
    WorldConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.subjects = j.at("subjects");
    c.relations = j.at("relations");
    c.objects_per_relation = j.at("objects_per_relation");
    c.filler_classes = j.at("filler_classes");
    c.filler_size = j.at("filler_size");
    c.digits = j.at("digits");
    c.max_layers = j.at("max_layers");
    c.text_sentences = j.at("text_sentences");
    c.text_min_len = j.at("text_min_len");
    c.text_max_len = j.at("text_max_len");
    c.validate();
    return c;
}

namespace {

Vocab build_vocab(const WorldConfig& c) {
    std::vector<std::string> toks{"<pad>", "<bos>", "<eos>", "<slot>", "[s]", "[e]"};
    for (int l = 0; l < c.max_layers; ++l) toks.push_back("L" + std::to_string(l));
    for (const auto& w : structural_words()) toks.push_back(w);

    // Leaf classes in a fixed order; their names double as label family tokens.
    std::vector<std::pair<std::string, std::vector<std::string>>> leaves;
    {
        std::vector<std::string> m;
        for (int i = 0; i < c.digits; ++i) m.push_back(std::to_string(i));
        leaves.emplace_back("digit", m);
    }
    {
        std::vector<std::string> m;
        for (int i = 0; i < c.subjects; ++i) m.push_back("sub" + std::to_string(i));
        leaves.emplace_back("subject", m);
    }
    {
        std::vector<std::string> m;
        for (int r = 0; r < c.relations; ++r) {
            m.push_back("rel" + std::to_string(r) + "a");
            m.push_back("rel" + std::to_string(r) + "b");
        }
        leaves.emplace_back("relation", m);
    }
    for (int r = 0; r < c.relations; ++r) {
        std::vector<std::string> m;
        for (int i = 0; i < c.objects_per_relation; ++i) m.push_back(kObjectClasses[r] + std::to_string(i));
        leaves.emplace_back(kObjectClasses[r], m);
    }
    for (int f = 0; f < c.filler_classes; ++f) {
        std::vector<std::string> m;
        for (int i = 0; i < c.filler_size; ++i) m.push_back(kFillerClasses[f] + std::to_string(i));
        leaves.emplace_back(kFillerClasses[f], m);
    }
    leaves.emplace_back("letter", std::vector<std::string>{"A", "B", "C", "D"});
    leaves.emplace_back("marker", kMarkers);

    for (const auto& [name, members] : leaves) toks.push_back(name);
    for (const auto& u : kUnionFamilies) toks.push_back(u);
    for (const auto& [name, members] : leaves) toks.insert(toks.end(), members.begin(), members.end());

    Vocab v(toks);
    v.pad = v.id("<pad>");
    v.bos = v.id("<bos>");
    v.eos = v.id("<eos>");
    v.slot = v.id("<slot>");
    v.open = v.id("[s]");
    v.close = v.id("[e]");
    std::vector<int> layers;
    for (int l = 0; l < c.max_layers; ++l) layers.push_back(v.id("L" + std::to_string(l)));
    v.set_layer_tokens(layers);
    for (const auto& [name, members] : leaves) {
        TokenClass tc{name, {}};
        for (const auto& m : members) {
            const int id = v.id(m);
            tc.members.push_back(id);
            v.class_of[id] = static_cast<int>(v.classes.size());
        }
        std::sort(tc.members.begin(), tc.members.end());
        v.classes.push_back(std::move(tc));
    }
    return v;
}

const TokenClass& find_class(const Vocab& v, const std::string& name) {
    for (const auto& c : v.classes) {
        if (c.name == name) return c;
    }
    throw std::out_of_range("no token class " + name);
}

}  // namespace

World gen_world(const WorldConfig& config) {
    config.validate();
    World w;
    w.config = config;
    w.vocab = build_vocab(config);
    const Vocab& v = w.vocab;
    std::mt19937_64 rng(config.seed);

    for (int r = 0; r < config.relations; ++r) {
        Relation rel;
        rel.name = kObjectClasses[r];
        rel.tokens = {v.id("rel" + std::to_string(r) + "a"), v.id("rel" + std::to_string(r) + "b")};
        rel.objects = find_class(v, kObjectClasses[r]).members;
        w.relations.push_back(rel);
    }
    const auto& subjects = find_class(v, "subject").members;
    for (int r = 0; r < config.relations; ++r) {
        const auto& objs = w.relations[r].objects;
        std::uniform_int_distribution<std::size_t> pick(0, objs.size() - 1);
        std::vector<int> chosen;
        do {
            chosen.clear();
            for (std::size_t s = 0; s < subjects.size(); ++s) chosen.push_back(objs[pick(rng)]);
        } while (std::all_of(chosen.begin(), chosen.end(), [&](int o) { return o == chosen[0]; }));
        for (std::size_t s = 0; s < subjects.size(); ++s) w.facts.push_back({subjects[s], r, chosen[s]});
    }
    for (std::size_t f = 0; f < w.facts.size(); ++f) {
        const Fact& fact = w.facts[f];
        std::vector<int> others;
        for (int o : w.relations[fact.relation].objects) {
            if (o != fact.object) others.push_back(o);
        }
        std::shuffle(others.begin(), others.end(), rng);
        std::vector<int> opts{fact.object, others[0], others[1], others[2]};
        std::shuffle(opts.begin(), opts.end(), rng);
        McQuestion q;
        q.id = static_cast<int>(f);
        q.fact = static_cast<int>(f);
        std::copy(opts.begin(), opts.end(), q.options.begin());
        q.answer = static_cast<int>(std::find(opts.begin(), opts.end(), fact.object) - opts.begin());
        w.questions.push_back(q);
    }

    // Class-level Markov text over fillers and digits.
    std::vector<const TokenClass*> text_classes{&find_class(v, "digit")};
    for (int f = 0; f < config.filler_classes; ++f) text_classes.push_back(&find_class(v, kFillerClasses[f]));
    const std::size_t K = text_classes.size();
    std::vector<std::vector<double>> trans(K, std::vector<double>(K));
    std::exponential_distribution<double> expo(1.0);
    for (auto& row : trans) {
        for (auto& p : row) p = std::pow(expo(rng), 2.0);
    }
    std::uniform_int_distribution<int> len(config.text_min_len, config.text_max_len);
    std::uniform_int_distribution<std::size_t> first(0, K - 1);
    for (int s = 0; s < config.text_sentences; ++s) {
        std::vector<int> sent{v.bos};
        std::size_t cls = first(rng);
        const int n = len(rng);
        for (int i = 0; i < n; ++i) {
            const auto& m = text_classes[cls]->members;
            sent.push_back(m[std::uniform_int_distribution<std::size_t>(0, m.size() - 1)(rng)]);
            std::discrete_distribution<std::size_t> next(trans[cls].begin(), trans[cls].end());
            cls = next(rng);
        }
        sent.push_back(v.eos);
        w.text.push_back(std::move(sent));
    }
    return w;
}

std::vector<int> World::fact_prompt(const Fact& f, std::span<const int> options) const {
    if (options.size() != 5) throw std::invalid_argument("fact prompt needs exactly five options");
    const Relation& r = relations.at(f.relation);
    std::vector<int> out{vocab.bos, f.subject, r.tokens[0], r.tokens[1], vocab.id("Options")};
    out.insert(out.end(), options.begin(), options.end());
    out.push_back(vocab.id("unknown"));
    out.push_back(vocab.id("Answer"));
    return out;
}

std::vector<int> World::mc_prompt(const McQuestion& q) const {
    const Fact& f = facts.at(q.fact);
    const Relation& r = relations.at(f.relation);
    std::vector<int> out{vocab.bos, vocab.id("Question"), f.subject, r.tokens[0], r.tokens[1]};
    for (int i = 0; i < 4; ++i) {
        out.push_back(letter(i));
        out.push_back(q.options[i]);
    }
    out.push_back(vocab.id("Answer"));
    return out;
}

int World::letter(int option_index) const {
    static const char* names[] = {"A", "B", "C", "D"};
    if (option_index < 0 || option_index > 3) throw std::out_of_range("option index must be in [0,4)");
    return vocab.id(names[option_index]);
}

int World::letter_index(int token) const {
    for (int i = 0; i < 4; ++i) {
        if (letter(i) == token) return i;
    }
    return -1;
}

nlohmann::json World::to_json() const {
    nlohmann::json j;
    j["config"] = config.to_json();
    j["vocab"] = vocab.tokens();
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& c : vocab.classes) classes.push_back({{"name", c.name}, {"members", c.members}});
    j["classes"] = classes;
    nlohmann::json rels = nlohmann::json::array();
    for (const auto& r : relations) rels.push_back({{"name", r.name}, {"tokens", r.tokens}, {"objects", r.objects}});
    j["relations"] = rels;
    nlohmann::json facts_j = nlohmann::json::array();
    for (const auto& f : facts) facts_j.push_back({f.subject, f.relation, f.object});
    j["facts"] = facts_j;
    nlohmann::json qs = nlohmann::json::array();
    for (const auto& q : questions) qs.push_back({{"id", q.id}, {"fact", q.fact}, {"options", q.options}, {"answer", q.answer}});
    j["questions"] = qs;
    j["text"] = text;
    return j;
}

World World::from_json(const nlohmann::json& j) {
    // Regenerating from the config reproduces every field; the stored copy is a check.
    World w = gen_world(WorldConfig::from_json(j.at("config")));
    if (w.to_json() != j) throw std::runtime_error("world file does not match regeneration from its config");
    return w;
}

void World::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << to_json().dump() << '\n';
}

World World::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return from_json(nlohmann::json::parse(in));
}

}  // namespace introspect::pipeline
