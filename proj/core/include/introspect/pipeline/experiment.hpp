#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "introspect/feat/describe.hpp"
#include "introspect/lm/train.hpp"
#include "introspect/metrics/metrics.hpp"
#include "introspect/patch/patch.hpp"
#include "introspect/pipeline/config.hpp"
#include "introspect/pipeline/manifest.hpp"
#include "introspect/pipeline/world.hpp"
#include "introspect/sae/sae.hpp"

namespace introspect::pipeline {

/// Which parts of the stage graph `run_all` executes.
struct Plan {
    bool feat = true;
    bool baselines = true;
    bool align = true;
    bool sweep = true;
    bool patch = true;
    bool patch_ablations = false;  // no_activation / no_layer / no_token variants of the self patch explainer
    bool ablate = true;
    bool location = true;
};

/// Every knob of one experiment, read from a Config. All seeds derive from `seed`.
struct Settings {
    std::uint64_t seed = 1;
    std::string config_hash;

    WorldConfig world;

    lm::ModelConfig target_model;
    lm::OptimizerConfig target_opt;
    double follow_p = 0.67;
    int fact_repeats = 6;
    int mc_repeats = 2;

    sae::SaeConfig sae;

    int label_text = 300;  // text sentences in the labeling corpus
    feat::FeatureDatasetOptions feat_data;
    lm::OptimizerConfig feat_opt;
    int feat_min_steps = 400;  // floor for subsampled runs

    int patch_pairs = 240;
    std::size_t patch_cap = 64;
    int patch_test_mod = 5;  // a pair is held out when its hash is 0 mod this
    lm::OptimizerConfig patch_opt;

    std::size_t ablate_cap = 0;
    int ablate_test_mod = 5;
    lm::OptimizerConfig ablate_opt;

    int probe_train = 200;
    int probe_test = 40;
    lm::OptimizerConfig probe_opt;

    int align_text = 100;
    std::vector<double> sweep_fractions{0.008, 0.03, 0.125, 0.5, 1.0};
    std::vector<std::string> sweep_explainers{"A"};
    std::vector<std::string> matrix_tasks{"feat", "patch", "ablate"};
    Plan plan;

    /// `seed` overrides the config's `seed` key and is folded into the hash.
    static Settings from(Config config, std::optional<std::uint64_t> seed = std::nullopt);
    /// Stable 64-bit seed for a named purpose.
    std::uint64_t derive(const std::string& tag) const;
    /// Optimizer steps for a feature run on `fraction` of the training records.
    int feat_steps(double fraction) const;
};

inline const std::vector<std::string> kTwins{"A", "B"};

/// One explainer training/evaluation cell.
struct RunSpec {
    std::string task = "feat";  // feat, patch, ablate or location
    std::string explainer = "A";
    std::string target = "A";
    feat::ProjectionMode mode = feat::ProjectionMode::Joint;
    double fraction = 1.0;
    patch::Ablation ablation;

    /// e.g. feat-AonA-joint-f1-none
    std::string id() const;
    void validate() const;
    bool uses_projection() const { return task == "feat" || task == "patch"; }
};

std::string format_fraction(double f);

/// Per-run scores. `metrics` are means with standard errors; `scalars` are
/// aggregate statistics such as macro F1.
struct EvalSummary {
    std::string id, task, explainer, target, mode, ablation;
    double fraction = 1;
    std::string primary;  // name of the per-record score used in significance tests
    std::vector<metrics::MetricSummary> metrics;
    std::map<std::string, double> scalars;

    const metrics::MetricSummary& metric(const std::string& name) const;
    nlohmann::json to_json() const;
    static EvalSummary from_json(const nlohmann::json& j);
};

class StageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// An output directory holding every artifact of one seed.
class Workspace {
public:
    using Logger = std::function<void(const std::string&)>;

    Workspace(std::filesystem::path root, Settings settings, Logger log = {});

    const Settings& settings() const { return settings_; }
    const ManifestStore& store() const { return store_; }
    std::filesystem::path path(const std::string& rel) const { return store_.root() / rel; }

    void world();
    void train_target(const std::string& twin);
    void train_sae(const std::string& twin);
    void label_features(const std::string& twin);
    void gen_patch(const std::string& twin);
    void gen_ablate(const std::string& twin);
    void pretrain_proj(const std::string& explainer, const std::string& target);
    void train_explainer(const RunSpec& spec);
    /// Fails with a named error when the explainer has not been trained.
    void eval(const RunSpec& spec);
    /// nn_all, nn_layer and selfie score the feature task; zero_shot scores patch or ablate.
    void baseline(const std::string& name, const std::string& target, const std::string& task = "feat");
    void align();
    void sweep();
    void matrix();
    void report();

    /// Runs the stages selected by the plan in dependency order.
    void run_all();

    std::string baseline_id(const std::string& name, const std::string& target, const std::string& task) const;
    EvalSummary load_summary(const std::string& id) const;
    std::vector<double> load_scores(const std::string& id, std::vector<std::string>* record_ids = nullptr) const;

    // Artifact loaders used by the stages and the acceptance checks.
    World load_world() const;
    lm::Model load_target(const std::string& twin) const;
    std::vector<std::vector<int>> labeling_corpus(const World& w) const;
    std::vector<feat::FeatureRecord> load_feature_records(const std::string& twin, const std::string& split,
                                                          const feat::LabelGrammar& grammar) const;
    std::vector<patch::PatchSample> load_patch_samples(const std::string& twin, const std::string& split) const;

private:
    /// Skips the body when a manifest with this id, config hash and input
    /// hashes exists and its outputs are intact.
    void run(const std::string& stage, const std::string& key, const std::vector<std::string>& inputs,
             const std::function<std::vector<std::string>()>& body);
    std::vector<std::string> explainer_inputs(const RunSpec& spec) const;
    void check_twin(const std::string& twin) const;

    ManifestStore store_;
    Settings settings_;
    Logger log_;
};

/// Fact prompts with shuffled option lists for the location probe.
std::vector<std::vector<int>> location_prompts(const World& w, std::size_t n, std::uint64_t seed);

}  // namespace introspect::pipeline
