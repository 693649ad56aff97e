#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "introspect/lm/projection.hpp"
#include "introspect/lm/train.hpp"
#include "introspect/lm/transformer.hpp"
#include "introspect/pipeline/world.hpp"
#include "introspect/util/balance.hpp"

namespace introspect::patch {

/// Two facts of one relation with different subjects and objects, rendered
/// with a shared option list that contains both objects.
struct CounterfactualPair {
    int fact = 0;        // x
    int counterfact = 0;  // x'
    std::vector<int> options;
    std::vector<int> x, x_prime;

    std::string id() const { return std::to_string(fact) + "-" + std::to_string(counterfact); }
};

/// All ordered pairs within each relation. Throws when a relation has facts
/// with a single distinct object.
std::vector<CounterfactualPair> make_counterfactual_pairs(const pipeline::World& world, std::uint64_t seed);

struct LayerChunk {
    int ordinal = 0;
    std::vector<int> layers;
};

/// Four contiguous chunks covering [0, layers); earlier chunks take the extra layers.
std::vector<LayerChunk> layer_chunks(int layers);

/// Mean of h_{l,t}(x) over the chunk layers.
std::vector<float> chunk_mean(const lm::Model& model, std::span<const int> x, std::size_t t, const LayerChunk& chunk);

struct PatchOutcome {
    bool has_changed = false;
    int content = 0;  // patched next-token argmax
    int clean = 0;    // unpatched next-token argmax
};

/// Patches the chunk mean of x' at position t into every chunk layer of the run on x.
PatchOutcome patch_outcome(const lm::Model& target, std::span<const int> x, std::span<const int> x_prime, std::size_t t,
                           const LayerChunk& chunk);

/// subject-final, relation, orig-option, new-option, other-option, or other:<token>.
std::string token_type(const pipeline::World& world, const CounterfactualPair& pair, std::size_t t);

struct PatchSample {
    std::string pair_id;
    std::vector<int> x, x_prime;
    std::size_t t = 0;
    std::string type;
    LayerChunk chunk;
    std::vector<float> v;
    PatchOutcome outcome;

    std::string id() const;
    nlohmann::json to_json(const pipeline::Vocab& vocab) const;
    static PatchSample from_json(const nlohmann::json& j);
};

/// Every (pair, position, chunk) combination.
std::vector<PatchSample> label_patch_samples(const lm::Model& target, const pipeline::World& world,
                                             std::span<const CounterfactualPair> pairs);

/// Cells keyed by (token type, chunk, has_changed), each capped at `cap`.
util::Balanced<PatchSample> balance_patch_dataset(std::span<const PatchSample> samples, std::size_t cap,
                                                  std::uint64_t seed);

struct Ablation {
    bool no_activation = false;
    bool no_layer = false;
    bool no_token = false;

    void validate() const;
    std::string name() const;
    static Ablation parse(const std::string& s);  // "", "activation", "layer" or "token"
};

/// bos x [s] <slot> [e] at layers L.. token <<< x_t >>> how would the output change ?
/// `slot_index` is set to the slot position, or npos without an activation.
std::vector<int> render_patch_prompt(const pipeline::World& world, const PatchSample& s, const Ablation& a,
                                     std::size_t& slot_index);
std::vector<int> patch_gold(const pipeline::World& world, const PatchSample& s);
lm::TrainingExample patch_example(const pipeline::World& world, const PatchSample& s, const Ablation& a);

lm::LossCurve train_explainer_patch(lm::Model& explainer, const pipeline::World& world, std::span<const PatchSample> records,
                                    const Ablation& a, lm::ProjectionSet* projections, const lm::OptimizerConfig& config);

std::vector<int> explain_patch(const lm::Model& explainer, const lm::ProjectionSet* projections,
                               const pipeline::World& world, const PatchSample& s, const Ablation& a);

/// Content tokens a patched answer may take: the pair's options and "unknown".
std::vector<int> patch_content_tokens(const pipeline::World& world, const PatchSample& s);

/// Probe record: v is the chunk mean of h(x) at position t.
struct LocationRecord {
    std::vector<int> x;
    std::size_t t = 0;
    LayerChunk chunk;
    std::vector<float> v;
};

/// Every position and chunk of each prompt.
std::vector<LocationRecord> make_location_records(const lm::Model& target, std::span<const std::vector<int>> prompts);

/// bos where did feature [s] <slot> [e] come from in <<< x >>> ?
std::vector<int> render_location_prompt(const pipeline::World& world, std::span<const int> x, std::size_t& slot_index);
/// token <<< x_t >>> at layers L.. . eos
std::vector<int> location_answer(const pipeline::World& world, const LocationRecord& r);

lm::LossCurve train_location_probe(lm::Model& explainer, const pipeline::World& world,
                                   std::span<const LocationRecord> records, const lm::OptimizerConfig& config);

struct Location {
    std::size_t t = 0;
    int chunk = 0;
    friend bool operator==(const Location&, const Location&) = default;
};

/// Greedy decode of the probe answer; nullopt when it does not name a token of
/// x and a known chunk.
std::optional<Location> decode_location(const lm::Model& explainer, const pipeline::World& world,
                                        std::span<const float> v, std::span<const int> x, int target_layers);

}  // namespace introspect::patch
