#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "introspect/feat/labels.hpp"
#include "introspect/lm/projection.hpp"
#include "introspect/lm/train.hpp"
#include "introspect/lm/transformer.hpp"
#include "introspect/sae/sae.hpp"

namespace introspect::feat {

/// Residual taps of a frozen target over a fixed corpus, for scoring many directions.
class ActivationBank {
public:
    ActivationBank(const lm::Model& target, std::vector<std::vector<int>> corpus, const lm::LayerSet& layers);

    const std::vector<std::vector<int>>& corpus() const { return corpus_; }
    bool has_layer(int layer) const { return taps_.count(layer) != 0; }
    std::set<int> layers() const;
    /// a_v(x, l, t) for every corpus input x.
    std::vector<std::vector<double>> activations(std::span<const float> v, int layer) const;

private:
    std::vector<std::vector<int>> corpus_;
    std::map<int, lm::Matrix<float>> taps_;  // layer -> [total tokens x d]
    std::vector<std::size_t> offsets_;
};

/// Mean over inputs of Pearson(a_v, simulate(label)); zero-variance inputs contribute 0.
double simulator_score(const LabelGrammar& grammar, const Label& label, std::span<const std::vector<int>> corpus,
                       std::span<const std::vector<double>> activations);
double simulator_score(const ActivationBank& bank, const LabelGrammar& grammar, std::span<const float> v, int layer,
                       const std::optional<Label>& label);

struct LabelScore {
    Label label;
    double score = 0;
};

/// Scores within this distance are ties, broken by the smaller rendered label.
inline constexpr double kScoreTieTolerance = 1e-12;

/// Exhaustive argmax of simulator_score over the candidates.
LabelScore label_feature(const LabelGrammar& grammar, std::span<const std::vector<int>> corpus,
                         std::span<const std::vector<double>> activations, std::span<const Label> candidates);
LabelScore label_feature(const ActivationBank& bank, const LabelGrammar& grammar, std::span<const float> v, int layer,
                         std::span<const Label> candidates);

inline constexpr int kFeatureTemplates = 4;

/// Prompt tokens for a template; `slot_index` receives the continuous-token position.
std::vector<int> render_feature_prompt(const pipeline::Vocab& vocab, int template_id, int layer,
                                       std::size_t& slot_index);

struct FeatureRecord {
    std::string feature_id;
    int layer = 0;
    int template_id = 0;
    std::vector<int> prompt;
    std::size_t slot_index = 0;
    Label gold;
    std::vector<int> gold_tokens;  // family, modifier, eos
    std::vector<float> v;
    double score = 0;  // simulator score of the gold label

    lm::TrainingExample example() const;
    nlohmann::json to_json(const LabelGrammar& grammar) const;
    static FeatureRecord from_json(const nlohmann::json& j, const LabelGrammar& grammar);
};

struct FeatureDatasetOptions {
    int holdout_per_layer = 16;
    double min_score = 0.1;  // features whose best label scores below this are dropped
    std::uint64_t seed = 0;
};

struct FeatureDataset {
    std::vector<FeatureRecord> train;    // one uniformly drawn template per feature
    std::vector<FeatureRecord> heldout;  // every template per held-out feature
    std::vector<std::string> heldout_ids;
    std::size_t dropped_low_score = 0;
};

/// `labels` is parallel to `features`. `covered_layers` lists the layers the labeling corpus covers.
FeatureDataset build_feature_dataset(std::span<const sae::FeatureDirection> features, std::span<const LabelScore> labels,
                                     const LabelGrammar& grammar, const std::set<int>& covered_layers,
                                     const FeatureDatasetOptions& options);

/// Nested per-layer subsample of the training records; fraction in (0, 1].
std::vector<FeatureRecord> subsample_train(std::span<const FeatureRecord> train, double fraction, std::uint64_t seed);

struct AlignmentResult {
    lm::ProjectionSet projections;
    std::map<int, double> residual;  // relative residual per target layer
    std::map<int, bool> ridge;       // whether the ridge fallback was used
};

/// Per-layer least squares h^E_{l_E} ~ P_l h^M_l over the corpus, l_E = round(l L_E / L_M).
AlignmentResult pretrain_projection(const lm::Model& target, const lm::Model& explainer,
                                    std::span<const std::vector<int>> corpus);

/// Relative residual sum ||h^E - P h^M||^2 / sum ||h^E||^2 per target layer.
std::map<int, double> projection_residual(const lm::Model& target, const lm::Model& explainer,
                                          const lm::ProjectionSet& projections, std::span<const std::vector<int>> corpus);

enum class ProjectionMode { Joint, Frozen, Random };
std::string mode_name(ProjectionMode m);
ProjectionMode parse_mode(const std::string& s);

/// Starting projections for a mode: joint starts from identity (or the
/// pre-trained fit when sizes differ), frozen uses the pre-trained fit, random
/// draws Gaussian entries.
lm::ProjectionSet initial_projections(ProjectionMode mode, const lm::Model& target, const lm::Model& explainer,
                                      std::span<const std::vector<int>> alignment_corpus, std::uint64_t seed);

lm::LossCurve train_explainer_feat(lm::Model& explainer, std::span<const FeatureRecord> records,
                                   lm::ProjectionSet& projections, ProjectionMode mode,
                                   const lm::OptimizerConfig& config);

struct Description {
    std::vector<int> tokens;
    std::optional<Label> label;
};

/// Greedy decode with P_l v (or v when projections is null) in the slot.
Description describe(const lm::Model& explainer, const lm::ProjectionSet* projections, const LabelGrammar& grammar,
                     std::span<const float> v, int layer, int template_id, int max_tokens = 3);
/// Same, with an explicit (possibly wrong) layer annotation in the prompt.
Description describe_annotated(const lm::Model& explainer, const lm::ProjectionSet* projections,
                               const LabelGrammar& grammar, std::span<const float> v, int layer, int annotated_layer,
                               int template_id, int max_tokens = 3);

}  // namespace introspect::feat
