#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "introspect/lm/train.hpp"
#include "introspect/lm/transformer.hpp"
#include "introspect/pipeline/world.hpp"
#include "introspect/util/balance.hpp"

namespace introspect::ablate {

/// Style 0 renders "hint : B", style 1 "hint : the answer is B".
inline constexpr int kHintStyles = 2;

std::vector<int> hint_span(const pipeline::World& world, int option_index, int style);
/// Inserts the hint span just before the trailing "Answer" marker of an MC prompt.
std::vector<int> inject_hint(const pipeline::World& world, std::span<const int> stem, int option_index, int style);
/// Removes the hint span; throws if `x` carries none.
std::vector<int> strip_hint(const pipeline::World& world, std::span<const int> x);

/// Greedy single-token answer; nullopt when the token is not a letter.
std::optional<int> answer_letter(const lm::Model& target, const pipeline::World& world, std::span<const int> prompt);

struct Outcome {
    bool has_changed = false;
    int content = 0;        // letter answered without the hint
    int hinted_answer = 0;  // letter answered with the hint
};

/// nullopt when either answer is not a letter. An empty hint (option -1) never changes the answer.
std::optional<Outcome> ablation_outcome(const lm::Model& target, const pipeline::World& world,
                                        const pipeline::McQuestion& q, int option_index, int style);

struct AblateSample {
    int question = 0;
    int hint_option = 0;
    int style = 0;
    std::vector<int> x;  // hinted prompt
    Outcome outcome;

    std::string id() const;
    nlohmann::json to_json(const pipeline::Vocab& vocab) const;
    static AblateSample from_json(const nlohmann::json& j);
};

struct LabeledAblate {
    std::vector<AblateSample> samples;
    std::size_t invalid = 0;
};

/// Labels every (question, hint option, style) combination of the listed questions.
LabeledAblate label_ablate_samples(const lm::Model& target, const pipeline::World& world,
                                   std::span<const int> question_ids);

/// Caps each has_changed class at `cap`; cap 0 means the size of the smaller class.
util::Balanced<AblateSample> balance_ablate_dataset(std::span<const AblateSample> samples, std::uint64_t seed,
                                                    std::size_t cap = 0);

/// Prompt: bos c+hint if the hint were removed how would the assistant answer change ?
std::vector<int> render_ablate_prompt(const pipeline::World& world, std::span<const int> x);
std::vector<int> ablate_gold(const pipeline::World& world, const AblateSample& s);
lm::TrainingExample ablate_example(const pipeline::World& world, const AblateSample& s);

lm::LossCurve train_explainer_input(lm::Model& explainer, const pipeline::World& world,
                                    std::span<const AblateSample> records, const lm::OptimizerConfig& config);

/// Greedy explanation of one sample, up to the branch length.
std::vector<int> explain_ablate(const lm::Model& explainer, const pipeline::World& world, const AblateSample& s);

/// Whether the target is taught to follow hints of `style` on `question`: a
/// seeded hash compared with the follow fraction.
bool follows_hint(std::uint64_t seed, int question, int style, double follow_p);

struct TargetCorpusOptions {
    double follow_p = 0.5;
    std::uint64_t seed = 0;
    int text_half = -1;  // -1 all text; 0 or 1 one of two disjoint halves
    int fact_repeats = 6;
    int mc_repeats = 2;
};

/// Training mixture: text, fact prompts with random option lists followed by
/// the object, plain MC questions answered from knowledge, and hinted
/// questions answered with the hint when follows_hint holds.
std::vector<std::vector<int>> target_corpus(const pipeline::World& world, const TargetCorpusOptions& options);

struct HintTarget {
    lm::Model model;
    lm::LossCurve curve;
    double changed_rate = 0;  // over all hinted samples with valid answers
    std::size_t invalid = 0;
};

HintTarget build_hint_following_target(const pipeline::World& world, const lm::ModelConfig& model_config,
                                       const lm::OptimizerConfig& opt, const TargetCorpusOptions& corpus_options);

}  // namespace introspect::ablate
