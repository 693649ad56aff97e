#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "introspect/pipeline/config.hpp"
#include "introspect/pipeline/experiment.hpp"

namespace ip = introspect::pipeline;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

struct Cell {
    std::string task = "feat";
    std::string explainer = "A";
    std::string target = "A";
    std::string mode = "joint";
    double fraction = 1.0;
    std::string ablate;
    std::string baseline;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "key = value settings file")->check(CLI::ExistingFile);
    app->add_option("--seed", c.seed, "overrides the seed key; every other seed derives from it");
    app->add_option("--out", c.out, "workspace directory (default $INTROSPECT_OUT/seed<N> or runs/seed<N>)");
}

ip::Workspace open(const Common& c) {
    ip::Config cfg = c.config.empty() ? ip::Config{} : ip::Config::load(c.config);
    auto settings = ip::Settings::from(cfg, c.seed);
    std::string root = c.out;
    if (root.empty()) {
        const char* env = std::getenv("INTROSPECT_OUT");
        root = std::string(env && *env ? env : "runs") + "/seed" + std::to_string(settings.seed);
    }
    return ip::Workspace(root, settings);
}

ip::RunSpec spec_of(const Cell& c) {
    ip::RunSpec s{.task = c.task, .explainer = c.explainer, .target = c.target};
    s.mode = introspect::feat::parse_mode(c.mode);
    s.fraction = c.fraction;
    s.ablation = introspect::patch::Ablation::parse(c.ablate);
    s.validate();
    return s;
}

void add_cell(CLI::App* app, Cell& c) {
    app->add_option("--task", c.task, "feat, patch, ablate or location")
        ->check(CLI::IsMember({"feat", "patch", "ablate", "location"}));
    app->add_option("--explainer", c.explainer, "model the explainer is copied from")->check(CLI::IsMember({"A", "B"}));
    app->add_option("--target", c.target, "model being explained")->check(CLI::IsMember({"A", "B"}));
    app->add_option("--mode", c.mode, "projection mode")->check(CLI::IsMember({"joint", "frozen", "random"}));
    app->add_option("--fraction", c.fraction, "share of training features per layer (feat task)")
        ->check(CLI::Range(0.0, 1.0));
    app->add_option("--ablate", c.ablate, "input part removed from the patch prompt")
        ->check(CLI::IsMember({"activation", "layer", "token"}));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Training and evaluating models that explain another model's internals"};
    app.require_subcommand(1);
    Common common;
    Cell cell;
    std::string twin = "all";
    std::string explainer = "B";

    auto sub = [&](const char* name, const char* help) {
        auto* s = app.add_subcommand(name, help);
        add_common(s, common);
        return s;
    };
    auto twin_opt = [&](CLI::App* s) {
        s->add_option("--target", twin, "A, B or all")->check(CLI::IsMember({"A", "B", "all"}));
    };

    auto* world = sub("world", "generate the synthetic vocabulary, knowledge base and corpus");
    auto* train_target = sub("train-target", "train the twin target models");
    twin_opt(train_target);
    auto* train_sae = sub("train-sae", "train per-layer sparse autoencoders on a target");
    twin_opt(train_sae);
    auto* label = sub("label-features", "label SAE features and split them into train and held-out sets");
    twin_opt(label);
    auto* gen_patch = sub("gen-patch", "label and balance activation patching samples");
    twin_opt(gen_patch);
    auto* gen_ablate = sub("gen-ablate", "label and balance hint removal samples");
    twin_opt(gen_ablate);
    auto* pretrain = sub("pretrain-proj", "least-squares projection from a target to an explainer");
    pretrain->add_option("--explainer", explainer, "explainer model")->check(CLI::IsMember({"A", "B"}));
    pretrain->add_option("--target", cell.target, "target model")->check(CLI::IsMember({"A", "B"}));
    auto* train_ex = sub("train-explainer", "fine-tune an explainer on one task");
    add_cell(train_ex, cell);
    auto* eval = sub("eval", "score a trained explainer, or a baseline with --baseline");
    add_cell(eval, cell);
    eval->add_option("--baseline", cell.baseline, "nn_all, nn_layer, selfie or zero_shot")
        ->check(CLI::IsMember({"nn_all", "nn_layer", "selfie", "zero_shot"}));
    auto* baseline = sub("baseline", "score a baseline explainer");
    baseline->add_option("name", cell.baseline, "nn_all, nn_layer, selfie or zero_shot")
        ->required()
        ->check(CLI::IsMember({"nn_all", "nn_layer", "selfie", "zero_shot"}));
    baseline->add_option("--target", cell.target, "target model")->check(CLI::IsMember({"A", "B"}));
    baseline->add_option("--task", cell.task, "feat, patch or ablate")->check(CLI::IsMember({"feat", "patch", "ablate"}));
    auto* align = sub("align", "relate representation similarity to explanation quality");
    auto* sweep = sub("sweep", "train and score feature explainers on growing data fractions");
    auto* matrix = sub("matrix", "self versus cross explainer tables with significance tests");
    auto* report = sub("report", "collect every evaluation into report/report.csv");
    auto* all = sub("all", "run every stage selected by the plan.* keys");

    CLI11_PARSE(app, argc, argv);

    try {
        auto ws = open(common);
        auto each = [&](auto&& fn) {
            for (const auto& t : ip::kTwins) {
                if (twin == "all" || twin == t) fn(t);
            }
        };
        if (world->parsed()) ws.world();
        if (train_target->parsed()) each([&](const std::string& t) { ws.train_target(t); });
        if (train_sae->parsed()) each([&](const std::string& t) { ws.train_sae(t); });
        if (label->parsed()) each([&](const std::string& t) { ws.label_features(t); });
        if (gen_patch->parsed()) each([&](const std::string& t) { ws.gen_patch(t); });
        if (gen_ablate->parsed()) each([&](const std::string& t) { ws.gen_ablate(t); });
        if (pretrain->parsed()) ws.pretrain_proj(explainer, cell.target);
        if (train_ex->parsed()) ws.train_explainer(spec_of(cell));
        if (eval->parsed()) {
            if (cell.baseline.empty()) {
                ws.eval(spec_of(cell));
            } else {
                ws.baseline(cell.baseline, cell.target, cell.task);
            }
        }
        if (baseline->parsed()) ws.baseline(cell.baseline, cell.target, cell.task);
        if (align->parsed()) ws.align();
        if (sweep->parsed()) ws.sweep();
        if (matrix->parsed()) ws.matrix();
        if (report->parsed()) ws.report();
        if (all->parsed()) ws.run_all();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
