#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace introspect::pipeline {

/// A named set of token ids. Leaf classes partition the content tokens.
struct TokenClass {
    std::string name;
    std::vector<int> members;  // sorted
};

class Vocab {
public:
    Vocab() = default;
    explicit Vocab(std::vector<std::string> tokens);

    int size() const { return static_cast<int>(tokens_.size()); }
    int id(const std::string& token) const;
    bool contains(const std::string& token) const { return index_.count(token) != 0; }
    const std::string& str(int id) const;
    std::vector<int> ids(std::initializer_list<const char*> words) const;
    std::string render(std::span<const int> ids) const;
    const std::vector<std::string>& tokens() const { return tokens_; }

    std::vector<TokenClass> classes;  // leaf classes over content tokens
    std::vector<int> class_of;        // token id -> class index, -1 for structural tokens

    int pad = 0, bos = 0, eos = 0, slot = 0, open = 0, close = 0;
    int layer_token(int layer) const;
    int max_layers() const { return static_cast<int>(layer_tokens_.size()); }
    void set_layer_tokens(std::vector<int> ids) { layer_tokens_ = std::move(ids); }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    std::vector<int> layer_tokens_;
};

struct Relation {
    std::string name;
    std::array<int, 2> tokens{};  // two-token relation phrase
    std::vector<int> objects;     // object token ids, sorted
};

struct Fact {
    int subject = 0;   // token id
    int relation = 0;  // index into World::relations
    int object = 0;    // token id
};

struct McQuestion {
    int id = 0;
    int fact = 0;                // index into World::facts
    std::array<int, 4> options{};  // object token ids shown as A..D
    int answer = 0;              // index of the correct option
};

struct WorldConfig {
    std::uint64_t seed = 1;
    int subjects = 16;
    int relations = 4;
    int objects_per_relation = 6;
    int filler_classes = 3;
    int filler_size = 8;
    int digits = 10;
    int max_layers = 8;
    int text_sentences = 800;
    int text_min_len = 6;
    int text_max_len = 14;

    void validate() const;
    nlohmann::json to_json() const;
    static WorldConfig from_json(const nlohmann::json& j);
};

/// Synthetic vocabulary, knowledge base, question set and text corpus.
struct World {
    WorldConfig config;
    Vocab vocab;
    std::vector<Relation> relations;
    std::vector<Fact> facts;
    std::vector<McQuestion> questions;
    std::vector<std::vector<int>> text;  // each sentence is bos ... eos

    /// Fact prompt: bos S r1 r2 Options o1..o5 unknown Answer. The answer is predicted after the last token.
    std::vector<int> fact_prompt(const Fact& f, std::span<const int> options) const;
    /// MC prompt without hint: bos Question S r1 r2 A o1 B o2 C o3 D o4 Answer.
    std::vector<int> mc_prompt(const McQuestion& q) const;
    int letter(int option_index) const;
    int letter_index(int token) const;  // -1 if not a letter

    nlohmann::json to_json() const;
    static World from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;
    static World load(const std::filesystem::path& path);
};

World gen_world(const WorldConfig& config);

/// Template words used by every prompt family; all are present in the vocabulary.
const std::vector<std::string>& structural_words();

}  // namespace introspect::pipeline
