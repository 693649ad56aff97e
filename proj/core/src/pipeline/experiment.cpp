#include "introspect/pipeline/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "introspect/ablate/ablate.hpp"
#include "introspect/baselines/baselines.hpp"
#include "introspect/lm/checkpoint.hpp"
#include "introspect/lm/decode.hpp"
#include "introspect/util/encoding.hpp"
#include "introspect/util/jsonl.hpp"

namespace introspect::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
    return s;
}

lm::OptimizerConfig read_opt(const Config& c, const std::string& prefix, lm::OptimizerConfig o) {
    o.steps = c.get_int(prefix + ".steps", o.steps);
    o.batch_size = c.get_int(prefix + ".batch", o.batch_size);
    o.lr = static_cast<float>(c.get_double(prefix + ".lr", o.lr));
    o.weight_decay = static_cast<float>(c.get_double(prefix + ".weight_decay", o.weight_decay));
    return o;
}

std::string num(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6g", x);
    return buf;
}

void write_json_file(const fs::path& p, const json& j) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << j.dump(2) << '\n';
}

json read_json_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    return json::parse(in);
}

/// Stable hash bucket of a string, independent of the standard library.
std::uint64_t stable_hash(const std::string& s) { return std::stoull(util::sha256_hex(s).substr(0, 16), nullptr, 16); }

std::vector<int> other_objects(const World& w, const Fact& f) {
    std::vector<int> o;
    for (int x : w.relations[f.relation].objects) {
        if (x != f.object) o.push_back(x);
    }
    return o;
}

metrics::MetricSummary named(const std::string& name, const std::vector<double>& v) { return metrics::summarize(name, v); }

class CsvWriter {
public:
    CsvWriter(const fs::path& p, const std::vector<std::string>& header) : out_(p) {
        if (!out_) throw std::runtime_error("cannot write " + p.string());
        row(header);
    }
    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
        out_ << '\n';
    }

private:
    std::ofstream out_;
};

}  // namespace

// ---- settings ----

Settings Settings::from(Config c, std::optional<std::uint64_t> seed) {
    Settings s;
    s.seed = seed ? *seed : c.get_u64("seed", 1);
    c.set("seed", std::to_string(s.seed));
    s.config_hash = c.hash();

    s.world.seed = s.seed;
    s.world.subjects = c.get_int("world.subjects", s.world.subjects);
    s.world.relations = c.get_int("world.relations", s.world.relations);
    s.world.objects_per_relation = c.get_int("world.objects_per_relation", s.world.objects_per_relation);
    s.world.filler_classes = c.get_int("world.filler_classes", s.world.filler_classes);
    s.world.filler_size = c.get_int("world.filler_size", s.world.filler_size);
    s.world.text_sentences = c.get_int("world.text_sentences", s.world.text_sentences);
    s.world.max_layers = c.get_int("world.max_layers", s.world.max_layers);
    s.world.validate();

    s.target_model.layers = c.get_int("target.layers", 8);
    s.target_model.hidden = c.get_int("target.hidden", 64);
    s.target_model.heads = c.get_int("target.heads", 4);
    s.target_model.context = c.get_int("target.context", 64);
    s.target_opt = read_opt(c, "target", {.steps = 2000, .batch_size = 16, .lr = 3e-3f});
    s.follow_p = c.get_double("target.follow_p", s.follow_p);
    s.fact_repeats = c.get_int("target.fact_repeats", s.fact_repeats);
    s.mc_repeats = c.get_int("target.mc_repeats", s.mc_repeats);

    s.sae.features = c.get_int("sae.features", 128);
    s.sae.steps = c.get_int("sae.steps", 1500);
    s.sae.batch_size = c.get_int("sae.batch", s.sae.batch_size);
    s.sae.lr = static_cast<float>(c.get_double("sae.lr", s.sae.lr));
    s.sae.l1 = static_cast<float>(c.get_double("sae.l1", s.sae.l1));

    s.label_text = c.get_int("feat.label_text", s.label_text);
    s.feat_data.holdout_per_layer = c.get_int("feat.holdout_per_layer", s.feat_data.holdout_per_layer);
    s.feat_data.min_score = c.get_double("feat.min_score", s.feat_data.min_score);
    s.feat_opt = read_opt(c, "feat", {.steps = 1500, .batch_size = 16, .lr = 1e-3f});
    s.feat_min_steps = c.get_int("feat.min_steps", s.feat_min_steps);

    s.patch_pairs = c.get_int("patch.pairs", s.patch_pairs);
    s.patch_cap = static_cast<std::size_t>(c.get_int("patch.cap", static_cast<int>(s.patch_cap)));
    s.patch_test_mod = c.get_int("patch.test_mod", s.patch_test_mod);
    s.patch_opt = read_opt(c, "patch", {.steps = 800, .batch_size = 16, .lr = 1e-3f});

    s.ablate_cap = static_cast<std::size_t>(c.get_int("ablate.cap", 0));
    s.ablate_test_mod = c.get_int("ablate.test_mod", s.ablate_test_mod);
    s.ablate_opt = read_opt(c, "ablate", {.steps = 800, .batch_size = 16, .lr = 1e-3f});

    s.probe_train = c.get_int("probe.train", s.probe_train);
    s.probe_test = c.get_int("probe.test", s.probe_test);
    s.probe_opt = read_opt(c, "probe", {.steps = 1500, .batch_size = 16, .lr = 1e-3f});

    s.align_text = c.get_int("align.text", s.align_text);
    s.sweep_fractions = c.get_doubles("sweep.fractions", s.sweep_fractions);
    s.sweep_explainers = split_list(c.get("sweep.explainers", join(s.sweep_explainers)));
    s.matrix_tasks = split_list(c.get("matrix.tasks", join(s.matrix_tasks)));

    s.plan.feat = c.get_bool("plan.feat", s.plan.feat);
    s.plan.baselines = c.get_bool("plan.baselines", s.plan.baselines);
    s.plan.align = c.get_bool("plan.align", s.plan.align);
    s.plan.sweep = c.get_bool("plan.sweep", s.plan.sweep);
    s.plan.patch = c.get_bool("plan.patch", s.plan.patch);
    s.plan.patch_ablations = c.get_bool("plan.patch_ablations", s.plan.patch_ablations);
    s.plan.ablate = c.get_bool("plan.ablate", s.plan.ablate);
    s.plan.location = c.get_bool("plan.location", s.plan.location);

    for (double f : s.sweep_fractions) {
        if (!(f > 0 && f <= 1)) throw std::invalid_argument("sweep.fractions must lie in (0, 1], got " + num(f));
    }
    for (const auto& e : s.sweep_explainers) {
        if (std::find(kTwins.begin(), kTwins.end(), e) == kTwins.end()) {
            throw std::invalid_argument("sweep.explainers: unknown model '" + e + "'");
        }
    }
    for (const auto& t : s.matrix_tasks) {
        if (t != "feat" && t != "patch" && t != "ablate") throw std::invalid_argument("matrix.tasks: unknown task '" + t + "'");
    }
    if (s.patch_test_mod < 2 || s.ablate_test_mod < 2) throw std::invalid_argument("test_mod must be at least 2");
    return s;
}

std::uint64_t Settings::derive(const std::string& tag) const { return stable_hash(std::to_string(seed) + "/" + tag); }

int Settings::feat_steps(double fraction) const {
    return std::max(feat_min_steps, static_cast<int>(std::lround(fraction * feat_opt.steps)));
}

// ---- run specs ----

std::string format_fraction(double f) {
    std::ostringstream s;
    s << f;
    return s.str();
}

std::string RunSpec::id() const {
    return task + "-" + explainer + "on" + target + "-" + feat::mode_name(mode) + "-f" + format_fraction(fraction) + "-" +
           ablation.name();
}

void RunSpec::validate() const {
    if (task != "feat" && task != "patch" && task != "ablate" && task != "location") {
        throw std::invalid_argument("unknown task '" + task + "' (expected feat, patch, ablate or location)");
    }
    for (const auto& m : {explainer, target}) {
        if (std::find(kTwins.begin(), kTwins.end(), m) == kTwins.end()) {
            throw std::invalid_argument("unknown model '" + m + "' (expected A or B)");
        }
    }
    if (!(fraction > 0 && fraction <= 1)) throw std::invalid_argument("fraction must lie in (0, 1]");
    if (fraction != 1 && task != "feat") throw std::invalid_argument("--fraction applies to the feat task only");
    if (ablation.name() != "none" && task != "patch") throw std::invalid_argument("--ablate applies to the patch task only");
    if (!uses_projection() && mode != feat::ProjectionMode::Joint) {
        throw std::invalid_argument("--mode applies to the feat and patch tasks only");
    }
    ablation.validate();
}

// ---- summaries ----

const metrics::MetricSummary& EvalSummary::metric(const std::string& name) const {
    for (const auto& m : metrics) {
        if (m.name == name) return m;
    }
    throw std::out_of_range("run " + id + " has no metric " + name);
}

json EvalSummary::to_json() const {
    json ms = json::array();
    for (const auto& m : metrics) ms.push_back({{"name", m.name}, {"mean", m.mean}, {"sem", m.sem}, {"n", m.n}});
    return {{"id", id},           {"task", task},         {"explainer", explainer}, {"target", target},
            {"mode", mode},       {"fraction", fraction}, {"ablation", ablation},   {"primary", primary},
            {"metrics", ms},      {"scalars", scalars}};
}

EvalSummary EvalSummary::from_json(const json& j) {
    EvalSummary s;
    s.id = j.at("id");
    s.task = j.at("task");
    s.explainer = j.at("explainer");
    s.target = j.at("target");
    s.mode = j.at("mode");
    s.fraction = j.at("fraction");
    s.ablation = j.at("ablation");
    s.primary = j.at("primary");
    for (const auto& m : j.at("metrics")) {
        s.metrics.push_back({m.at("name"), m.at("mean"), m.at("sem"), m.at("n")});
    }
    s.scalars = j.at("scalars").get<std::map<std::string, double>>();
    return s;
}

std::vector<std::vector<int>> location_prompts(const World& w, std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::vector<int>> prompts;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& f = w.facts[rng() % w.facts.size()];
        auto o = other_objects(w, f);
        std::shuffle(o.begin(), o.end(), rng);
        std::vector<int> opts{f.object, o[0], o[1], o[2], o[3]};
        std::shuffle(opts.begin(), opts.end(), rng);
        prompts.push_back(w.fact_prompt(f, opts));
    }
    return prompts;
}

// ---- workspace ----

Workspace::Workspace(fs::path root, Settings settings, Logger log)
    : store_(std::move(root)), settings_(std::move(settings)), log_(std::move(log)) {
    if (!log_) log_ = [](const std::string& m) { std::cerr << m << '\n'; };
}

void Workspace::check_twin(const std::string& twin) const {
    if (std::find(kTwins.begin(), kTwins.end(), twin) == kTwins.end()) {
        throw std::invalid_argument("unknown model '" + twin + "' (expected A or B)");
    }
}

void Workspace::run(const std::string& stage, const std::string& key, const std::vector<std::string>& inputs,
                    const std::function<std::vector<std::string>()>& body) {
    const std::string id = stage + "/" + key;
    auto ins = store_.verify_inputs(inputs);
    if (const auto old = store_.find(id)) {
        bool same = old->config_hash == settings_.config_hash && old->inputs.size() == ins.size();
        for (std::size_t i = 0; same && i < ins.size(); ++i) {
            same = old->inputs[i].path == ins[i].path && old->inputs[i].sha256 == ins[i].sha256;
        }
        if (same && store_.up_to_date(id)) {
            log_("[" + id + "] up to date");
            return;
        }
    }
    log_("[" + id + "] running");
    const auto t0 = std::chrono::steady_clock::now();
    const auto outputs = body();
    RunManifest m;
    m.id = id;
    m.stage = stage;
    m.config_hash = settings_.config_hash;
    m.seed = settings_.seed;
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    m.inputs = std::move(ins);
    for (const auto& o : outputs) m.outputs.push_back({o, util::sha256_file(path(o))});
    store_.write(m);
    log_("[" + id + "] done in " + num(m.wall_seconds) + " s");
}

World Workspace::load_world() const {
    store_.verify_inputs({"world.json"});
    return World::load(path("world.json"));
}

lm::Model Workspace::load_target(const std::string& twin) const {
    check_twin(twin);
    return lm::load_model(path("targets/" + twin + ".bin"));
}

std::vector<std::vector<int>> Workspace::labeling_corpus(const World& w) const {
    std::vector<std::vector<int>> corpus;
    const auto n = std::min<std::size_t>(settings_.label_text, w.text.size());
    corpus.assign(w.text.begin(), w.text.begin() + static_cast<std::ptrdiff_t>(n));
    for (const auto& f : w.facts) {
        const auto o = other_objects(w, f);
        if (o.size() < 4) throw std::invalid_argument("labeling corpus needs at least 5 objects per relation");
        auto s = w.fact_prompt(f, std::vector<int>{f.object, o[0], o[1], o[2], o[3]});
        s.push_back(f.object);
        corpus.push_back(std::move(s));
    }
    return corpus;
}

std::vector<feat::FeatureRecord> Workspace::load_feature_records(const std::string& twin, const std::string& split,
                                                                 const feat::LabelGrammar& grammar) const {
    std::vector<feat::FeatureRecord> out;
    for (const auto& j : util::read_jsonl(path("feat/" + twin + "/" + split + ".jsonl"))) {
        out.push_back(feat::FeatureRecord::from_json(j, grammar));
    }
    return out;
}

std::vector<patch::PatchSample> Workspace::load_patch_samples(const std::string& twin, const std::string& split) const {
    std::vector<patch::PatchSample> out;
    for (const auto& j : util::read_jsonl(path("patch/" + twin + "/" + split + ".jsonl"))) {
        out.push_back(patch::PatchSample::from_json(j));
    }
    return out;
}

namespace {

std::vector<ablate::AblateSample> load_ablate(const fs::path& p) {
    std::vector<ablate::AblateSample> out;
    for (const auto& j : util::read_jsonl(p)) out.push_back(ablate::AblateSample::from_json(j));
    return out;
}

}  // namespace

void Workspace::world() {
    run("world", "world", {}, [&] {
        gen_world(settings_.world).save(path("world.json"));
        return std::vector<std::string>{"world.json"};
    });
}

void Workspace::train_target(const std::string& twin) {
    check_twin(twin);
    run("train-target", twin, {"world.json"}, [&] {
        const World w = load_world();
        lm::ModelConfig mc = settings_.target_model;
        mc.vocab = w.vocab.size();
        mc.seed = settings_.derive("target/" + twin);
        lm::OptimizerConfig opt = settings_.target_opt;
        opt.seed = settings_.derive("target-opt/" + twin);
        const ablate::TargetCorpusOptions co{.follow_p = settings_.follow_p,
                                             .seed = settings_.derive("follow/" + twin),
                                             .text_half = twin == "A" ? 0 : 1,
                                             .fact_repeats = settings_.fact_repeats,
                                             .mc_repeats = settings_.mc_repeats};
        auto t = ablate::build_hint_following_target(w, mc, opt, co);

        std::mt19937_64 rng(settings_.derive("fact-eval"));
        std::size_t fact_ok = 0, mc_ok = 0;
        for (const auto& f : w.facts) {
            auto o = other_objects(w, f);
            std::shuffle(o.begin(), o.end(), rng);
            std::vector<int> opts{f.object, o[0], o[1], o[2], o[3]};
            std::shuffle(opts.begin(), opts.end(), rng);
            fact_ok += lm::next_token(t.model, {.ids = w.fact_prompt(f, opts)}) == f.object;
        }
        for (const auto& q : w.questions) mc_ok += lm::next_token(t.model, {.ids = w.mc_prompt(q)}) == w.letter(q.answer);

        const std::string base = "targets/" + twin;
        fs::create_directories(path("targets"));
        lm::save_model(path(base + ".bin"), t.model, {{"twin", twin}});
        t.curve.write_csv(path(base + ".loss.csv"));
        const auto steps = t.curve.loss.size();
        write_json_file(path(base + ".json"),
                        {{"twin", twin},
                         {"fact_accuracy", double(fact_ok) / double(w.facts.size())},
                         {"mc_accuracy", double(mc_ok) / double(w.questions.size())},
                         {"hint_changed_rate", t.changed_rate},
                         {"hint_invalid", t.invalid},
                         {"final_loss", steps ? t.curve.moving_average(steps - 1, std::min<std::size_t>(steps, 100)) : 0.0}});
        return std::vector<std::string>{base + ".bin", base + ".loss.csv", base + ".json"};
    });
}

void Workspace::train_sae(const std::string& twin) {
    check_twin(twin);
    run("train-sae", twin, {"world.json", "targets/" + twin + ".bin"}, [&] {
        const World w = load_world();
        const auto target = load_target(twin);
        const auto corpus = labeling_corpus(w);
        const auto layers = lm::all_layers(target.layers());
        const auto taps = sae::collect_activations(target, corpus, layers);
        std::vector<sae::SaeModel> saes;
        std::vector<std::string> outs;
        json stats = json::array();
        fs::create_directories(path("sae/" + twin));
        for (int l : layers) {
            sae::SaeConfig sc = settings_.sae;
            sc.seed = settings_.derive("sae/" + twin + "/" + std::to_string(l));
            saes.push_back(sae::train_sae(sae::tap_matrix(taps, l), l, sc));
            const std::string p = "sae/" + twin + "/L" + std::to_string(l) + ".bin";
            saes.back().save(path(p));
            outs.push_back(p);
            stats.push_back({{"layer", l}, {"mse", saes.back().final_mse}, {"l0", saes.back().final_l0}});
        }
        write_json_file(path("sae/" + twin + "/summary.json"), stats);
        outs.push_back("sae/" + twin + "/summary.json");
        fs::create_directories(path("features"));
        sae::save_features(path("features/" + twin + ".jsonl"), sae::extract_features(saes));
        outs.push_back("features/" + twin + ".jsonl");
        return outs;
    });
}

void Workspace::label_features(const std::string& twin) {
    check_twin(twin);
    run("label-features", twin, {"world.json", "targets/" + twin + ".bin", "features/" + twin + ".jsonl"}, [&] {
        const World w = load_world();
        const feat::LabelGrammar g(w.vocab);
        const auto target = load_target(twin);
        const auto corpus = labeling_corpus(w);
        const auto layers = lm::all_layers(target.layers());
        const auto feats = sae::load_features(path("features/" + twin + ".jsonl"));
        const feat::ActivationBank bank(target, corpus, layers);
        std::vector<feat::LabelScore> labels;
        labels.reserve(feats.size());
        for (const auto& f : feats) labels.push_back(feat::label_feature(bank, g, f.v, f.layer, g.labels()));

        auto opts = settings_.feat_data;
        opts.seed = settings_.derive("feat-split/" + twin);
        const auto ds = feat::build_feature_dataset(feats, labels, g, {layers.begin(), layers.end()}, opts);

        const std::string dir = "feat/" + twin + "/";
        fs::create_directories(path(dir));
        std::vector<json> rows;
        for (std::size_t i = 0; i < feats.size(); ++i) {
            rows.push_back({{"feature_id", feats[i].id},
                            {"layer", feats[i].layer},
                            {"label", g.render_string(labels[i].label)},
                            {"score", labels[i].score}});
        }
        util::write_jsonl(path(dir + "labels.jsonl"), rows);
        rows.clear();
        for (const auto& r : ds.train) rows.push_back(r.to_json(g));
        util::write_jsonl(path(dir + "train.jsonl"), rows);
        rows.clear();
        for (const auto& r : ds.heldout) rows.push_back(r.to_json(g));
        util::write_jsonl(path(dir + "heldout.jsonl"), rows);

        std::vector<baselines::FeatureIndex::Entry> entries;
        for (const auto& r : ds.train) entries.push_back({r.feature_id, r.layer, r.v, r.gold});
        baselines::FeatureIndex(std::move(entries)).save(path(dir + "index.jsonl"), g);

        write_json_file(path(dir + "summary.json"), {{"features", feats.size()},
                                                      {"train", ds.train.size()},
                                                      {"heldout_features", ds.heldout_ids.size()},
                                                      {"heldout_records", ds.heldout.size()},
                                                      {"dropped_low_score", ds.dropped_low_score}});
        return std::vector<std::string>{dir + "labels.jsonl", dir + "train.jsonl", dir + "heldout.jsonl",
                                        dir + "index.jsonl", dir + "summary.json"};
    });
}

void Workspace::gen_patch(const std::string& twin) {
    check_twin(twin);
    run("gen-patch", twin, {"world.json", "targets/" + twin + ".bin"}, [&] {
        const World w = load_world();
        const auto target = load_target(twin);
        auto pairs = patch::make_counterfactual_pairs(w, settings_.derive("pairs"));
        std::mt19937_64 rng(settings_.derive("pairs-pick"));
        std::shuffle(pairs.begin(), pairs.end(), rng);
        pairs.resize(std::min<std::size_t>(pairs.size(), static_cast<std::size_t>(settings_.patch_pairs)));
        const auto samples = patch::label_patch_samples(target, w, pairs);
        const auto bal = patch::balance_patch_dataset(samples, settings_.patch_cap, settings_.derive("patch-balance/" + twin));

        std::vector<json> train, test;
        std::size_t changed = 0;
        for (const auto& s : bal.records) {
            changed += s.outcome.has_changed;
            const bool held = stable_hash(std::to_string(settings_.seed) + "/pair/" + s.pair_id) %
                                  static_cast<std::uint64_t>(settings_.patch_test_mod) ==
                              0;
            (held ? test : train).push_back(s.to_json(w.vocab));
        }
        if (train.empty() || test.empty()) throw StageError("gen-patch: split left an empty train or test set");
        const std::string dir = "patch/" + twin + "/";
        fs::create_directories(path(dir));
        util::write_jsonl(path(dir + "train.jsonl"), train);
        util::write_jsonl(path(dir + "test.jsonl"), test);
        util::write_census_csv(path(dir + "census.csv"), {"type", "chunk", "class"}, bal.census);
        write_json_file(path(dir + "summary.json"), {{"pairs", pairs.size()},
                                                      {"samples", samples.size()},
                                                      {"balanced", bal.records.size()},
                                                      {"changed", changed},
                                                      {"cap", settings_.patch_cap},
                                                      {"train", train.size()},
                                                      {"test", test.size()}});
        return std::vector<std::string>{dir + "train.jsonl", dir + "test.jsonl", dir + "census.csv", dir + "summary.json"};
    });
}

void Workspace::gen_ablate(const std::string& twin) {
    check_twin(twin);
    run("gen-ablate", twin, {"world.json", "targets/" + twin + ".bin"}, [&] {
        const World w = load_world();
        const auto target = load_target(twin);
        std::vector<int> qids;
        for (const auto& q : w.questions) qids.push_back(q.id);
        const auto labeled = ablate::label_ablate_samples(target, w, qids);
        const auto bal = ablate::balance_ablate_dataset(labeled.samples, settings_.derive("ablate-balance/" + twin),
                                                        settings_.ablate_cap);
        std::vector<json> train, test;
        std::size_t changed = 0;
        for (const auto& s : bal.records) {
            changed += s.outcome.has_changed;
            const bool held = stable_hash(std::to_string(settings_.seed) + "/question/" + std::to_string(s.question)) %
                                  static_cast<std::uint64_t>(settings_.ablate_test_mod) ==
                              0;
            (held ? test : train).push_back(s.to_json(w.vocab));
        }
        if (train.empty() || test.empty()) throw StageError("gen-ablate: split left an empty train or test set");
        const std::string dir = "ablate/" + twin + "/";
        fs::create_directories(path(dir));
        util::write_jsonl(path(dir + "train.jsonl"), train);
        util::write_jsonl(path(dir + "test.jsonl"), test);
        util::write_census_csv(path(dir + "census.csv"), {"class"}, bal.census);
        write_json_file(path(dir + "summary.json"), {{"samples", labeled.samples.size()},
                                                      {"invalid", labeled.invalid},
                                                      {"balanced", bal.records.size()},
                                                      {"changed", changed},
                                                      {"train", train.size()},
                                                      {"test", test.size()}});
        return std::vector<std::string>{dir + "train.jsonl", dir + "test.jsonl", dir + "census.csv", dir + "summary.json"};
    });
}

void Workspace::pretrain_proj(const std::string& explainer, const std::string& target) {
    check_twin(explainer);
    check_twin(target);
    const std::string key = explainer + "_from_" + target;
    run("pretrain-proj", key, {"world.json", "targets/" + explainer + ".bin", "targets/" + target + ".bin"}, [&] {
        const World w = load_world();
        const auto e = load_target(explainer);
        const auto t = load_target(target);
        const auto corpus = labeling_corpus(w);
        const auto fit = feat::pretrain_projection(t, e, corpus);
        fs::create_directories(path("proj"));
        lm::save_projections(path("proj/" + key + ".bin"), fit.projections);
        json res = json::array();
        for (const auto& [l, r] : fit.residual) res.push_back({{"layer", l}, {"residual", r}, {"ridge", fit.ridge.at(l)}});
        write_json_file(path("proj/" + key + ".json"), res);
        return std::vector<std::string>{"proj/" + key + ".bin", "proj/" + key + ".json"};
    });
}

std::vector<std::string> Workspace::explainer_inputs(const RunSpec& s) const {
    std::vector<std::string> in{"world.json", "targets/" + s.explainer + ".bin", "targets/" + s.target + ".bin"};
    if (s.task == "feat") {
        in.push_back("feat/" + s.target + "/train.jsonl");
    } else if (s.task == "patch") {
        in.push_back("patch/" + s.target + "/train.jsonl");
    } else if (s.task == "ablate") {
        in.push_back("ablate/" + s.target + "/train.jsonl");
    }
    if (s.mode == feat::ProjectionMode::Frozen) in.push_back("proj/" + s.explainer + "_from_" + s.target + ".bin");
    return in;
}

void Workspace::train_explainer(const RunSpec& spec) {
    spec.validate();
    const std::string id = spec.id();
    run("train-explainer", id, explainer_inputs(spec), [&] {
        const World w = load_world();
        const auto target = load_target(spec.target);
        lm::Model ex = load_target(spec.explainer);
        lm::ProjectionSet proj;
        if (spec.uses_projection()) {
            switch (spec.mode) {
                case feat::ProjectionMode::Joint:
                    proj = lm::ProjectionSet::identity(target.layers(), target.hidden());
                    break;
                case feat::ProjectionMode::Random:
                    proj = lm::ProjectionSet::random(target.layers(), target.hidden(), ex.hidden(),
                                                     settings_.derive("proj/" + id));
                    break;
                case feat::ProjectionMode::Frozen:
                    proj = lm::load_projections(path("proj/" + spec.explainer + "_from_" + spec.target + ".bin"));
                    break;
            }
            if (target.hidden() != ex.hidden() && spec.mode == feat::ProjectionMode::Joint) {
                throw StageError("joint mode starts from identity and needs equal hidden sizes");
            }
        }
        lm::LossCurve curve;
        std::size_t records = 0;
        if (spec.task == "feat") {
            const feat::LabelGrammar g(w.vocab);
            auto train = load_feature_records(spec.target, "train", g);
            if (spec.fraction < 1) train = feat::subsample_train(train, spec.fraction, settings_.derive("subsample/" + spec.target));
            records = train.size();
            auto opt = settings_.feat_opt;
            opt.steps = settings_.feat_steps(spec.fraction);
            opt.seed = settings_.derive("opt/" + id);
            curve = feat::train_explainer_feat(ex, train, proj, spec.mode, opt);
        } else if (spec.task == "patch") {
            const auto train = load_patch_samples(spec.target, "train");
            records = train.size();
            auto opt = settings_.patch_opt;
            opt.seed = settings_.derive("opt/" + id);
            proj.set_trainable(spec.mode != feat::ProjectionMode::Frozen);
            curve = patch::train_explainer_patch(ex, w, train, spec.ablation, &proj, opt);
        } else if (spec.task == "ablate") {
            const auto train = load_ablate(path("ablate/" + spec.target + "/train.jsonl"));
            records = train.size();
            auto opt = settings_.ablate_opt;
            opt.seed = settings_.derive("opt/" + id);
            curve = ablate::train_explainer_input(ex, w, train, opt);
        } else {
            const auto prompts = location_prompts(w, static_cast<std::size_t>(settings_.probe_train), settings_.derive("probe"));
            const auto train = patch::make_location_records(target, prompts);
            records = train.size();
            auto opt = settings_.probe_opt;
            opt.seed = settings_.derive("opt/" + id);
            curve = patch::train_location_probe(ex, w, train, opt);
        }
        const std::string base = "explainers/" + id;
        fs::create_directories(path("explainers"));
        lm::save_model(path(base + ".bin"), ex, {{"run", id}, {"records", records}});
        curve.write_csv(path(base + ".loss.csv"));
        std::vector<std::string> outs{base + ".bin", base + ".loss.csv"};
        if (spec.uses_projection()) {
            lm::save_projections(path(base + ".proj.bin"), proj);
            outs.push_back(base + ".proj.bin");
        }
        return outs;
    });
}

void Workspace::eval(const RunSpec& spec) {
    spec.validate();
    const std::string id = spec.id();
    const std::string base = "explainers/" + id;
    std::vector<std::string> in{"world.json", "targets/" + spec.target + ".bin", base + ".bin"};
    if (spec.uses_projection()) in.push_back(base + ".proj.bin");
    if (!fs::exists(path(base + ".bin"))) {
        throw StageError("eval " + id + ": no trained explainer at " + path(base + ".bin").string() +
                         "; run train-explainer first or pass --baseline");
    }
    if (spec.task == "feat") in.push_back("feat/" + spec.target + "/heldout.jsonl");
    if (spec.task == "patch") in.push_back("patch/" + spec.target + "/test.jsonl");
    if (spec.task == "ablate") in.push_back("ablate/" + spec.target + "/test.jsonl");

    run("eval", id, in, [&] {
        const World w = load_world();
        const auto target = load_target(spec.target);
        const auto ex = lm::load_model(path(base + ".bin"));
        std::optional<lm::ProjectionSet> proj;
        if (spec.uses_projection()) proj = lm::load_projections(path(base + ".proj.bin"));
        const lm::ProjectionSet* P = proj ? &*proj : nullptr;

        EvalSummary sum{.id = id,
                        .task = spec.task,
                        .explainer = spec.explainer,
                        .target = spec.target,
                        .mode = feat::mode_name(spec.mode),
                        .ablation = spec.ablation.name(),
                        .fraction = spec.fraction};
        std::vector<json> rows;

        if (spec.task == "feat") {
            const feat::LabelGrammar g(w.vocab);
            const auto corpus = labeling_corpus(w);
            const feat::ActivationBank bank(target, corpus, lm::all_layers(target.layers()));
            const metrics::JudgeContext jc(g, corpus);
            const auto held = load_feature_records(spec.target, "heldout", g);
            std::vector<double> judge, sim;
            std::map<std::string, std::vector<const feat::FeatureRecord*>> by_feature;
            std::vector<std::string> order;
            for (const auto& r : held) {
                if (!by_feature.count(r.feature_id)) order.push_back(r.feature_id);
                by_feature[r.feature_id].push_back(&r);
            }
            for (const auto& fid : order) {
                double j = 0, s = 0;
                json preds = json::array();
                const auto& recs = by_feature[fid];
                for (const auto* r : recs) {
                    const auto d = feat::describe(ex, P, g, r->v, r->layer, r->template_id);
                    j += metrics::lexical_judge(jc, d.label, r->gold);
                    s += feat::simulator_score(bank, g, r->v, r->layer, d.label);
                    preds.push_back(d.label ? g.render_string(*d.label) : w.vocab.render(d.tokens));
                }
                j /= double(recs.size());
                s /= double(recs.size());
                judge.push_back(j);
                sim.push_back(s);
                rows.push_back({{"id", fid},
                                {"layer", recs.front()->layer},
                                {"gold", g.render_string(recs.front()->gold)},
                                {"predicted", preds},
                                {"score", j},
                                {"simulator", s}});
            }
            sum.primary = "judge";
            sum.metrics = {named("judge", judge), named("simulator", sim)};
        } else if (spec.task == "patch" || spec.task == "ablate") {
            std::vector<metrics::PredictionRecord> recs;
            if (spec.task == "patch") {
                for (const auto& s : load_patch_samples(spec.target, "test")) {
                    metrics::PredictionRecord r{.task = metrics::Task::Patch, .id = s.id()};
                    r.predicted = patch::explain_patch(ex, P, w, s, spec.ablation);
                    r.gold = patch::patch_gold(w, s);
                    recs.push_back(std::move(r));
                }
            } else {
                for (const auto& s : load_ablate(path("ablate/" + spec.target + "/test.jsonl"))) {
                    metrics::PredictionRecord r{.task = metrics::Task::Ablate, .id = s.id()};
                    r.predicted = ablate::explain_ablate(ex, w, s);
                    r.gold = ablate::ablate_gold(w, s);
                    recs.push_back(std::move(r));
                }
            }
            std::vector<double> exact, content, branch;
            for (auto& r : recs) {
                r.parse(w.vocab);
                const std::span<const metrics::PredictionRecord> one(&r, 1);
                exact.push_back(metrics::exact_match(one));
                content.push_back(metrics::content_match(one));
                branch.push_back(metrics::branch_accuracy(one));
                auto j = r.to_json();
                j["score"] = exact.back();
                rows.push_back(j);
            }
            const auto f1 = metrics::has_changed_f1(recs);
            sum.primary = "exact";
            sum.metrics = {named("exact", exact), named("content", content), named("branch", branch)};
            sum.scalars = {{"macro_f1", f1.macro_f1},
                           {"f1_changed", f1.f1_changed},
                           {"f1_unchanged", f1.f1_unchanged},
                           {"unparseable", double(f1.unparseable)}};
        } else {
            const auto prompts = location_prompts(
                w, static_cast<std::size_t>(settings_.probe_train + settings_.probe_test), settings_.derive("probe"));
            const std::vector<std::vector<int>> test(prompts.begin() + settings_.probe_train, prompts.end());
            const auto recs = patch::make_location_records(target, test);
            std::vector<double> exact, tok, chunk;
            for (std::size_t i = 0; i < recs.size(); ++i) {
                const auto& r = recs[i];
                const auto loc = patch::decode_location(ex, w, r.v, r.x, target.layers());
                exact.push_back(loc && loc->t == r.t && loc->chunk == r.chunk.ordinal);
                tok.push_back(loc && loc->t == r.t);
                chunk.push_back(loc && loc->chunk == r.chunk.ordinal);
                rows.push_back({{"id", std::to_string(i)},
                                {"t", r.t},
                                {"chunk", r.chunk.ordinal},
                                {"predicted_t", loc ? json(loc->t) : json(nullptr)},
                                {"predicted_chunk", loc ? json(loc->chunk) : json(nullptr)},
                                {"score", exact.back()}});
            }
            sum.primary = "exact";
            sum.metrics = {named("exact", exact), named("token", tok), named("chunk", chunk)};
        }
        fs::create_directories(path("eval"));
        util::write_jsonl(path("eval/" + id + ".jsonl"), rows);
        write_json_file(path("eval/" + id + ".json"), sum.to_json());
        return std::vector<std::string>{"eval/" + id + ".jsonl", "eval/" + id + ".json"};
    });
}

std::string Workspace::baseline_id(const std::string& name, const std::string& target, const std::string& task) const {
    return task + "-" + name + "-on" + target;
}

void Workspace::baseline(const std::string& name, const std::string& target, const std::string& task) {
    check_twin(target);
    const bool feature_baseline = name == "nn_all" || name == "nn_layer" || name == "selfie";
    if (!feature_baseline && name != "zero_shot") {
        throw std::invalid_argument("unknown baseline '" + name + "' (expected nn_all, nn_layer, selfie or zero_shot)");
    }
    if (feature_baseline && task != "feat") throw std::invalid_argument(name + " is a feat-task baseline");
    if (!feature_baseline && task != "patch" && task != "ablate") {
        throw std::invalid_argument("zero_shot is a patch or ablate baseline");
    }
    const std::string id = baseline_id(name, target, task);
    std::vector<std::string> in{"world.json", "targets/" + target + ".bin"};
    if (task == "feat") {
        in.push_back("feat/" + target + "/heldout.jsonl");
        if (name != "selfie") in.push_back("feat/" + target + "/index.jsonl");
    } else {
        in.push_back(task + "/" + target + "/test.jsonl");
    }
    run("baseline", id, in, [&] {
        const World w = load_world();
        const auto model = load_target(target);
        EvalSummary sum{.id = id, .task = task, .explainer = name, .target = target, .mode = "none", .ablation = "none"};
        std::vector<json> rows;
        if (task == "feat") {
            const feat::LabelGrammar g(w.vocab);
            const auto corpus = labeling_corpus(w);
            const feat::ActivationBank bank(model, corpus, lm::all_layers(model.layers()));
            const metrics::JudgeContext jc(g, corpus);
            std::optional<baselines::FeatureIndex> index;
            if (name != "selfie") index = baselines::FeatureIndex::load(path("feat/" + target + "/index.jsonl"), g);
            std::vector<double> judge, sim;
            std::set<std::string> seen;
            for (const auto& r : load_feature_records(target, "heldout", g)) {
                if (!seen.insert(r.feature_id).second) continue;
                std::optional<feat::Label> label;
                std::string neighbour;
                if (name == "selfie") {
                    label = baselines::selfie_describe(model, bank, g, r.v, r.layer).label;
                } else {
                    const auto& e = name == "nn_all" ? index->nn_all(r.v) : index->nn_layer(r.v, r.layer);
                    label = e.label;
                    neighbour = e.id;
                }
                judge.push_back(metrics::lexical_judge(jc, label, r.gold));
                sim.push_back(feat::simulator_score(bank, g, r.v, r.layer, label));
                rows.push_back({{"id", r.feature_id},
                                {"layer", r.layer},
                                {"gold", g.render_string(r.gold)},
                                {"predicted", label ? g.render_string(*label) : std::string()},
                                {"neighbour", neighbour},
                                {"score", judge.back()},
                                {"simulator", sim.back()}});
            }
            sum.primary = "judge";
            sum.metrics = {named("judge", judge), named("simulator", sim)};
        } else {
            const auto scaffold = baselines::zero_shot_scaffold(w.vocab);
            std::vector<metrics::PredictionRecord> recs;
            auto wrap = [&](const std::vector<int>& prompt, std::size_t slot, const std::vector<float>* v) {
                std::vector<int> ids{w.vocab.bos};
                ids.insert(ids.end(), scaffold.begin(), scaffold.end());
                ids.insert(ids.end(), prompt.begin() + 1, prompt.end());
                lm::TokenSeq q{.ids = ids};
                if (v) q.slots.push_back({slot + scaffold.size(), *v});
                return q;
            };
            if (task == "patch") {
                for (const auto& s : load_patch_samples(target, "test")) {
                    std::size_t slot = 0;
                    const auto p = patch::render_patch_prompt(w, s, {}, slot);
                    metrics::PredictionRecord r{.task = metrics::Task::Patch, .id = s.id()};
                    r.predicted = baselines::zero_shot_branch(model, w.vocab, wrap(p, slot, &s.v),
                                                              patch::patch_content_tokens(w, s));
                    r.gold = patch::patch_gold(w, s);
                    recs.push_back(std::move(r));
                }
            } else {
                std::vector<int> letters;
                for (int i = 0; i < 4; ++i) letters.push_back(w.letter(i));
                for (const auto& s : load_ablate(path("ablate/" + target + "/test.jsonl"))) {
                    const auto p = ablate::render_ablate_prompt(w, s.x);
                    metrics::PredictionRecord r{.task = metrics::Task::Ablate, .id = s.id()};
                    r.predicted = baselines::zero_shot_branch(model, w.vocab, wrap(p, 0, nullptr), letters);
                    r.gold = ablate::ablate_gold(w, s);
                    recs.push_back(std::move(r));
                }
            }
            std::vector<double> exact, content, branch;
            for (auto& r : recs) {
                r.parse(w.vocab);
                const std::span<const metrics::PredictionRecord> one(&r, 1);
                exact.push_back(metrics::exact_match(one));
                content.push_back(metrics::content_match(one));
                branch.push_back(metrics::branch_accuracy(one));
                auto j = r.to_json();
                j["score"] = exact.back();
                rows.push_back(j);
            }
            const auto f1 = metrics::has_changed_f1(recs);
            sum.primary = "exact";
            sum.metrics = {named("exact", exact), named("content", content), named("branch", branch)};
            sum.scalars = {{"macro_f1", f1.macro_f1},
                           {"f1_changed", f1.f1_changed},
                           {"f1_unchanged", f1.f1_unchanged},
                           {"unparseable", double(f1.unparseable)}};
        }
        fs::create_directories(path("eval"));
        util::write_jsonl(path("eval/" + id + ".jsonl"), rows);
        write_json_file(path("eval/" + id + ".json"), sum.to_json());
        return std::vector<std::string>{"eval/" + id + ".jsonl", "eval/" + id + ".json"};
    });
}

EvalSummary Workspace::load_summary(const std::string& id) const {
    const auto p = path("eval/" + id + ".json");
    if (!fs::exists(p)) throw StageError("no evaluation for " + id + " at " + p.string() + "; run eval or baseline first");
    return EvalSummary::from_json(read_json_file(p));
}

std::vector<double> Workspace::load_scores(const std::string& id, std::vector<std::string>* record_ids) const {
    const auto p = path("eval/" + id + ".jsonl");
    if (!fs::exists(p)) throw StageError("no evaluation records for " + id + " at " + p.string());
    std::vector<double> out;
    for (const auto& r : util::read_jsonl(p)) {
        out.push_back(r.at("score").get<double>());
        if (record_ids) record_ids->push_back(r.at("id").get<std::string>());
    }
    return out;
}

namespace {

struct AlignVariant {
    std::string name;
    RunSpec spec;
};

std::vector<AlignVariant> align_variants() {
    using feat::ProjectionMode;
    return {{"self", {.explainer = "A", .target = "A", .mode = ProjectionMode::Joint}},
            {"twin-identity", {.explainer = "B", .target = "A", .mode = ProjectionMode::Joint}},
            {"twin-random", {.explainer = "B", .target = "A", .mode = ProjectionMode::Random}},
            {"twin-pretrained", {.explainer = "B", .target = "A", .mode = ProjectionMode::Frozen}}};
}

}  // namespace

void Workspace::align() {
    const auto variants = align_variants();
    std::vector<std::string> in{"world.json", "targets/A.bin", "feat/A/heldout.jsonl"};
    for (const auto& v : variants) {
        const std::string id = v.spec.id();
        in.push_back("explainers/" + id + ".bin");
        in.push_back("explainers/" + id + ".proj.bin");
        in.push_back("eval/" + id + ".json");
    }
    run("align", "A", in, [&] {
        const World w = load_world();
        const auto target = load_target("A");
        const feat::LabelGrammar g(w.vocab);
        std::vector<std::vector<int>> corpus(
            w.text.begin(), w.text.begin() + std::min<std::ptrdiff_t>(settings_.align_text, std::ssize(w.text)));
        const auto labeling = labeling_corpus(w);
        std::vector<sae::FeatureDirection> feats;
        std::set<std::string> seen;
        for (const auto& r : load_feature_records("A", "heldout", g)) {
            if (seen.insert(r.feature_id).second) feats.push_back({r.feature_id, r.layer, sae::Source::SAE, r.v});
        }
        fs::create_directories(path("align"));
        CsvWriter csv(path("align/align.csv"),
                      {"variant", "run", "dot_similarity", "pattern_similarity", "judge_mean", "judge_sem", "n"});
        std::vector<double> dots, patterns, judges;
        for (const auto& v : variants) {
            const std::string id = v.spec.id();
            const auto ex = lm::load_model(path("explainers/" + id + ".bin"));
            const auto proj = lm::load_projections(path("explainers/" + id + ".proj.bin"));
            const double dot = metrics::dot_similarity(ex, target, corpus, &proj);
            const double pat = metrics::sae_pattern_similarity(ex, target, feats, labeling, 5, &proj);
            const auto judge = load_summary(id).metric("judge");
            dots.push_back(dot);
            patterns.push_back(pat);
            judges.push_back(judge.mean);
            csv.row({v.name, id, num(dot), num(pat), num(judge.mean), num(judge.sem), std::to_string(judge.n)});
        }
        write_json_file(path("align/summary.json"), {{"variants", variants.size()},
                                                      {"spearman_dot_judge", metrics::spearman(dots, judges)},
                                                      {"spearman_pattern_judge", metrics::spearman(patterns, judges)}});
        return std::vector<std::string>{"align/align.csv", "align/summary.json"};
    });
}

void Workspace::sweep() {
    std::vector<RunSpec> specs;
    for (const auto& e : settings_.sweep_explainers) {
        for (double f : settings_.sweep_fractions) specs.push_back({.explainer = e, .target = "A", .fraction = f});
    }
    for (const auto& s : specs) {
        train_explainer(s);
        eval(s);
    }
    baseline("nn_all", "A");
    std::vector<std::string> in{"feat/A/train.jsonl", "feat/A/heldout.jsonl", "eval/" + baseline_id("nn_all", "A", "feat") + ".json"};
    for (const auto& s : specs) in.push_back("eval/" + s.id() + ".json");
    run("sweep", "A", in, [&] {
        const World w = load_world();
        const feat::LabelGrammar g(w.vocab);
        const auto train = load_feature_records("A", "train", g);
        const std::string heldout_sha = util::sha256_file(path("feat/A/heldout.jsonl"));
        fs::create_directories(path("sweep"));
        CsvWriter csv(path("sweep/sweep.csv"),
                      {"fraction", "explainer", "metric", "mean", "stderr", "n", "train_records", "steps", "heldout_sha256"});
        for (const auto& s : specs) {
            const auto sum = load_summary(s.id());
            const auto n_train = s.fraction < 1 ? feat::subsample_train(train, s.fraction, settings_.derive("subsample/A")).size()
                                                : train.size();
            for (const auto& m : sum.metrics) {
                csv.row({format_fraction(s.fraction), s.explainer, m.name, num(m.mean), num(m.sem), std::to_string(m.n),
                         std::to_string(n_train), std::to_string(settings_.feat_steps(s.fraction)), heldout_sha});
            }
        }
        const auto nn = load_summary(baseline_id("nn_all", "A", "feat"));
        for (const auto& m : nn.metrics) {
            csv.row({"1", "nn_all", m.name, num(m.mean), num(m.sem), std::to_string(m.n), std::to_string(train.size()), "0",
                     heldout_sha});
        }
        return std::vector<std::string>{"sweep/sweep.csv"};
    });
}

void Workspace::matrix() {
    auto cell = [](const std::string& task, const std::string& e, const std::string& t) {
        return RunSpec{.task = task, .explainer = e, .target = t};
    };
    std::vector<std::string> in;
    for (const auto& task : settings_.matrix_tasks) {
        for (const auto& e : kTwins) {
            for (const auto& t : kTwins) {
                const auto id = cell(task, e, t).id();
                if (!fs::exists(path("eval/" + id + ".json"))) {
                    throw StageError("matrix: unresolvable cell " + id + "; run train-explainer and eval for it first");
                }
                in.push_back("eval/" + id + ".json");
                in.push_back("eval/" + id + ".jsonl");
            }
        }
    }
    std::string key = join(settings_.matrix_tasks);
    std::replace(key.begin(), key.end(), ',', '+');
    run("matrix", key, in, [&] {
        fs::create_directories(path("matrix"));
        std::vector<std::string> outs;
        json tests = json::array();
        for (const auto& task : settings_.matrix_tasks) {
            const std::string stem = "matrix/" + task;
            {
                CsvWriter csv(path(stem + "_cells.csv"), {"task", "explainer", "target", "metric", "mean", "sem", "n"});
                for (const auto& e : kTwins) {
                    for (const auto& t : kTwins) {
                        const auto sum = load_summary(cell(task, e, t).id());
                        for (const auto& m : sum.metrics) {
                            csv.row({task, e, t, m.name, num(m.mean), num(m.sem), std::to_string(m.n)});
                        }
                        for (const auto& [k, v] : sum.scalars) csv.row({task, e, t, k, num(v), "", ""});
                    }
                }
            }
            {
                // Fix the target and vary the explainer: both runs score the same records.
                CsvWriter csv(path(stem + "_by_target.csv"), {"task", "target", "self", "cross", "self_mean", "cross_mean",
                                                              "diff", "t", "p", "n", "test"});
                for (const auto& t : kTwins) {
                    for (const auto& e : kTwins) {
                        if (e == t) continue;
                        std::vector<std::string> ids_self, ids_cross;
                        const auto a = load_scores(cell(task, t, t).id(), &ids_self);
                        const auto b = load_scores(cell(task, e, t).id(), &ids_cross);
                        if (ids_self != ids_cross) throw StageError("matrix: cells on target " + t + " scored different records");
                        const auto tt = metrics::paired_t_test(a, b);
                        const double ma = metrics::summarize("", a).mean, mb = metrics::summarize("", b).mean;
                        csv.row({task, t, t, e, num(ma), num(mb), num(ma - mb), num(tt.t), num(tt.p), std::to_string(tt.n),
                                 "paired"});
                        tests.push_back({{"task", task}, {"view", "by_target"}, {"fixed", t}, {"self", t}, {"cross", e},
                                         {"diff", ma - mb}, {"t", tt.t}, {"p", tt.p}, {"n", tt.n}});
                    }
                }
            }
            {
                // Fix the explainer and vary the target: the record sets differ, so the test is unpaired.
                CsvWriter csv(path(stem + "_by_explainer.csv"), {"task", "explainer", "self_target", "cross_target",
                                                                 "self_mean", "cross_mean", "diff", "t", "p", "n_self",
                                                                 "n_cross", "test"});
                for (const auto& e : kTwins) {
                    for (const auto& t : kTwins) {
                        if (e == t) continue;
                        const auto a = load_scores(cell(task, e, e).id());
                        const auto b = load_scores(cell(task, e, t).id());
                        const auto tt = metrics::welch_t_test(a, b);
                        const double ma = metrics::summarize("", a).mean, mb = metrics::summarize("", b).mean;
                        csv.row({task, e, e, t, num(ma), num(mb), num(ma - mb), num(tt.t), num(tt.p),
                                 std::to_string(a.size()), std::to_string(b.size()), "welch"});
                        tests.push_back({{"task", task}, {"view", "by_explainer"}, {"fixed", e}, {"self", e}, {"cross", t},
                                         {"diff", ma - mb}, {"t", tt.t}, {"p", tt.p}, {"n", a.size() + b.size()}});
                    }
                }
            }
            for (const char* suffix : {"_cells.csv", "_by_target.csv", "_by_explainer.csv"}) outs.push_back(stem + suffix);
        }
        write_json_file(path("matrix/summary.json"), tests);
        outs.push_back("matrix/summary.json");
        return outs;
    });
}

void Workspace::report() {
    std::vector<std::string> in;
    if (fs::exists(path("eval"))) {
        for (const auto& e : fs::directory_iterator(path("eval"))) {
            if (e.path().extension() == ".json") in.push_back("eval/" + e.path().filename().string());
        }
    }
    std::sort(in.begin(), in.end());
    if (in.empty()) throw StageError("report: no evaluations found under " + path("eval").string());
    for (const char* opt : {"matrix/summary.json", "align/summary.json", "sweep/sweep.csv"}) {
        if (fs::exists(path(opt))) in.push_back(opt);
    }
    run("report", "report", in, [&] {
        fs::create_directories(path("report"));
        CsvWriter csv(path("report/report.csv"), {"section", "id", "task", "explainer", "target", "mode", "fraction",
                                                  "ablation", "metric", "mean", "sem", "n"});
        for (const auto& p : in) {
            if (p.rfind("eval/", 0) != 0) continue;
            const auto s = EvalSummary::from_json(read_json_file(path(p)));
            for (const auto& m : s.metrics) {
                csv.row({"eval", s.id, s.task, s.explainer, s.target, s.mode, format_fraction(s.fraction), s.ablation, m.name,
                         num(m.mean), num(m.sem), std::to_string(m.n)});
            }
            for (const auto& [k, v] : s.scalars) {
                csv.row({"eval", s.id, s.task, s.explainer, s.target, s.mode, format_fraction(s.fraction), s.ablation, k,
                         num(v), "", ""});
            }
        }
        if (fs::exists(path("matrix/summary.json"))) {
            for (const auto& t : read_json_file(path("matrix/summary.json"))) {
                const std::string id = t.at("task").get<std::string>() + ":" + t.at("view").get<std::string>() + ":" +
                                       t.at("self").get<std::string>() + "-vs-" + t.at("cross").get<std::string>();
                for (const char* k : {"diff", "t", "p"}) {
                    csv.row({"matrix", id, t.at("task"), t.at("view") == "by_target" ? t.at("cross") : t.at("self"),
                             t.at("view") == "by_target" ? t.at("self") : t.at("cross"), "joint", "1", "none", k,
                             num(t.at(k).get<double>()), "", std::to_string(t.at("n").get<std::size_t>())});
                }
            }
        }
        if (fs::exists(path("align/summary.json"))) {
            const auto a = read_json_file(path("align/summary.json"));
            for (const char* k : {"spearman_dot_judge", "spearman_pattern_judge"}) {
                csv.row({"align", "align-A", "feat", "", "A", "", "", "", k, num(a.at(k).get<double>()), "",
                         std::to_string(a.at("variants").get<std::size_t>())});
            }
        }
        return std::vector<std::string>{"report/report.csv"};
    });
}

void Workspace::run_all() {
    const auto& plan = settings_.plan;
    world();
    for (const auto& t : kTwins) train_target(t);

    auto cells = [&](const std::string& task) {
        for (const auto& t : kTwins) {
            for (const auto& e : kTwins) {
                const RunSpec s{.task = task, .explainer = e, .target = t};
                train_explainer(s);
                eval(s);
            }
        }
    };
    if (plan.feat) {
        for (const auto& t : kTwins) {
            train_sae(t);
            label_features(t);
        }
        cells("feat");
        if (plan.baselines) {
            for (const char* b : {"nn_all", "nn_layer", "selfie"}) baseline(b, "A");
        }
        if (plan.align) {
            pretrain_proj("B", "A");
            for (auto mode : {feat::ProjectionMode::Random, feat::ProjectionMode::Frozen}) {
                const RunSpec s{.explainer = "B", .target = "A", .mode = mode};
                train_explainer(s);
                eval(s);
            }
            align();
        }
        if (plan.sweep) sweep();
    }
    if (plan.patch) {
        for (const auto& t : kTwins) gen_patch(t);
        cells("patch");
        if (plan.baselines) baseline("zero_shot", "A", "patch");
        if (plan.patch_ablations) {
            for (const char* a : {"activation", "layer", "token"}) {
                const RunSpec s{.task = "patch", .ablation = patch::Ablation::parse(a)};
                train_explainer(s);
                eval(s);
            }
        }
    }
    if (plan.ablate) {
        for (const auto& t : kTwins) gen_ablate(t);
        cells("ablate");
        if (plan.baselines) baseline("zero_shot", "A", "ablate");
    }
    if (plan.location) {
        const RunSpec s{.task = "location"};
        train_explainer(s);
        eval(s);
    }
    std::vector<std::string> tasks;
    for (const auto& t : settings_.matrix_tasks) {
        if ((t == "feat" && plan.feat) || (t == "patch" && plan.patch) || (t == "ablate" && plan.ablate)) tasks.push_back(t);
    }
    if (!tasks.empty()) {
        const auto saved = settings_.matrix_tasks;
        settings_.matrix_tasks = tasks;
        matrix();
        settings_.matrix_tasks = saved;
    }
    report();
}

}  // namespace introspect::pipeline
