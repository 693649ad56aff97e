#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "introspect/feat/labels.hpp"
#include "introspect/lm/projection.hpp"
#include "introspect/lm/transformer.hpp"
#include "introspect/metrics/branch.hpp"
#include "introspect/sae/sae.hpp"

namespace introspect::metrics {

/// Pearson correlation; 0 when either series has zero variance.
double pearson(std::span<const double> a, std::span<const double> b);
double pearson(std::span<const float> a, std::span<const float> b);

/// Occurrence counts of each token over an evaluation corpus; label
/// extensions are compared through these counts.
struct JudgeContext {
    const feat::LabelGrammar* grammar = nullptr;
    std::vector<double> token_counts;  // vocab-sized

    JudgeContext(const feat::LabelGrammar& g, std::span<const std::vector<int>> corpus);
    /// Occurrence-weighted Jaccard of the two labels' extensions.
    double jaccard(const feat::Label& a, const feat::Label& b) const;
    double overlap(const feat::Label& a, const feat::Label& b) const;
};

/// Deterministic rubric on {0, 0.25, 0.5, 0.75, 1}; an unparseable prediction scores 0.
double lexical_judge(const JudgeContext& ctx, const std::optional<feat::Label>& predicted, const feat::Label& gold);

enum class Task { Feat, Patch, Ablate };
std::string task_name(Task t);
Task parse_task(const std::string& s);

struct PredictionRecord {
    Task task = Task::Patch;
    std::string id;
    std::vector<int> predicted;
    std::vector<int> gold;
    std::optional<BranchParse> predicted_parse;
    std::optional<BranchParse> gold_parse;

    /// Fills the parsed fields from the token sequences.
    void parse(const pipeline::Vocab& vocab);
    nlohmann::json to_json() const;
};

struct F1Result {
    double macro_f1 = 0;
    double f1_changed = 0;
    double f1_unchanged = 0;
    std::size_t unparseable = 0;
};

F1Result has_changed_f1(std::span<const PredictionRecord> records);
double content_match(std::span<const PredictionRecord> records);
double exact_match(std::span<const PredictionRecord> records);
/// Fraction of records whose predicted branch equals the gold branch.
double branch_accuracy(std::span<const PredictionRecord> records);

struct TTest {
    double t = 0;
    double p = 1;
    std::size_t n = 0;
    double mean_diff = 0;
};

/// Two-sided paired t-test of a - b.
TTest paired_t_test(std::span<const double> a, std::span<const double> b);

/// Two-sided Welch t-test of mean(a) - mean(b) for unpaired samples.
TTest welch_t_test(std::span<const double> a, std::span<const double> b);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

/// Maps a target layer to the explainer layer round(l * L_E / L_M), clamped.
int corresponding_layer(int target_layer, int target_layers, int explainer_layers);

/// Mean inner product of explainer and (projected) target residuals over the
/// corpus, normalized by the geometric mean of the two self-similarities.
/// A null projection set means identity.
double dot_similarity(const lm::Model& explainer, const lm::Model& target, std::span<const std::vector<int>> corpus,
                      const lm::ProjectionSet* projections = nullptr);

/// Mean Pearson correlation over features and their top exemplars between
/// <h^E, P v> and <h^M, v> across positions.
double sae_pattern_similarity(const lm::Model& explainer, const lm::Model& target,
                              std::span<const sae::FeatureDirection> features,
                              std::span<const std::vector<int>> exemplar_corpus, std::size_t exemplars_per_feature = 5,
                              const lm::ProjectionSet* projections = nullptr);

struct MetricSummary {
    std::string name;
    double mean = 0;
    double sem = 0;  // sample std / sqrt(n)
    std::size_t n = 0;
};

MetricSummary summarize(const std::string& name, std::span<const double> values);

/// Table of summaries with free-form string columns per row.
struct ScoreReport {
    struct Row {
        std::vector<std::pair<std::string, std::string>> keys;
        MetricSummary metric;
        std::optional<double> p_value;
    };
    std::vector<Row> rows;
    nlohmann::json meta = nlohmann::json::object();

    void add(std::vector<std::pair<std::string, std::string>> keys, MetricSummary m,
             std::optional<double> p = std::nullopt);
    void write_csv(const std::filesystem::path& path) const;
    void write_json(const std::filesystem::path& path) const;
};

}  // namespace introspect::metrics
