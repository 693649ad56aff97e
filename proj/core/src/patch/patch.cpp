#include "introspect/patch/patch.hpp"

#include <algorithm>
#include <map>
#include <random>
#include <set>
#include <stdexcept>

#include "introspect/lm/decode.hpp"
#include "introspect/metrics/branch.hpp"
#include "introspect/util/encoding.hpp"
#include "introspect/util/parallel.hpp"

namespace introspect::patch {

using pipeline::World;

std::vector<CounterfactualPair> make_counterfactual_pairs(const World& world, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<CounterfactualPair> out;
    for (std::size_t r = 0; r < world.relations.size(); ++r) {
        std::vector<int> facts;
        std::set<int> objects;
        for (std::size_t f = 0; f < world.facts.size(); ++f) {
            if (world.facts[f].relation == static_cast<int>(r)) {
                facts.push_back(static_cast<int>(f));
                objects.insert(world.facts[f].object);
            }
        }
        if (objects.size() < 2) {
            throw std::invalid_argument("relation " + world.relations[r].name + " has a single object; no counterfactual exists");
        }
        for (int a : facts) {
            for (int b : facts) {
                const auto& fa = world.facts[a];
                const auto& fb = world.facts[b];
                if (a == b || fa.subject == fb.subject || fa.object == fb.object) continue;
                std::vector<int> others;
                for (int o : world.relations[r].objects) {
                    if (o != fa.object && o != fb.object) others.push_back(o);
                }
                std::shuffle(others.begin(), others.end(), rng);
                std::vector<int> opts{fa.object, fb.object, others.at(0), others.at(1), others.at(2)};
                std::shuffle(opts.begin(), opts.end(), rng);
                out.push_back({a, b, opts, world.fact_prompt(fa, opts), world.fact_prompt(fb, opts)});
            }
        }
    }
    return out;
}

std::vector<LayerChunk> layer_chunks(int layers) {
    if (layers < 4) throw std::invalid_argument("layer chunking needs at least 4 layers");
    std::vector<LayerChunk> out;
    int next = 0;
    for (int c = 0; c < 4; ++c) {
        const int size = layers / 4 + (c < layers % 4 ? 1 : 0);
        LayerChunk ch{c, {}};
        for (int i = 0; i < size; ++i) ch.layers.push_back(next++);
        out.push_back(std::move(ch));
    }
    return out;
}

std::vector<float> chunk_mean(const lm::Model& model, std::span<const int> x, std::size_t t, const LayerChunk& chunk) {
    if (t >= x.size()) throw std::out_of_range("position " + std::to_string(t) + " outside sequence");
    const auto tr = model.forward({.ids = {x.begin(), x.end()}}, chunk.layers);
    std::vector<double> acc(static_cast<std::size_t>(model.hidden()), 0.0);
    for (int l : chunk.layers) {
        const auto h = tr.at(l, t);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += h[i];
    }
    std::vector<float> v(acc.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(acc[i] / double(chunk.layers.size()));
    return v;
}

PatchOutcome patch_outcome(const lm::Model& target, std::span<const int> x, std::span<const int> x_prime, std::size_t t,
                           const LayerChunk& chunk) {
    if (t >= x.size() || t >= x_prime.size()) throw std::out_of_range("patch position outside sequence");
    const lm::TokenSeq seq{.ids = {x.begin(), x.end()}};
    const int clean = lm::argmax(target.forward(seq).logits_at(x.size() - 1));
    const std::vector<lm::Intervention> iv{{chunk.layers, t, chunk_mean(target, x_prime, t, chunk)}};
    const int patched = lm::argmax(target.forward_patched(seq, iv).logits_at(x.size() - 1));
    return {patched != clean, patched, clean};
}

std::string token_type(const World& world, const CounterfactualPair& pair, std::size_t t) {
    // Layout: bos S r1 r2 Options o1..o5 unknown Answer
    if (t == 1) return "subject-final";
    if (t == 2 || t == 3) return "relation";
    if (t >= 5 && t < 10) {
        const int tok = pair.x.at(t);
        if (tok == world.facts.at(pair.fact).object) return "orig-option";
        if (tok == world.facts.at(pair.counterfact).object) return "new-option";
        return "other-option";
    }
    return "other:" + world.vocab.str(pair.x.at(t));
}

std::string PatchSample::id() const {
    return pair_id + "/t" + std::to_string(t) + "/c" + std::to_string(chunk.ordinal);
}

nlohmann::json PatchSample::to_json(const pipeline::Vocab& vocab) const {
    return {{"id", id()},
            {"pair_id", pair_id},
            {"x", x},
            {"x_prime", x_prime},
            {"t", t},
            {"token_type", type},
            {"chunk", chunk.ordinal},
            {"chunk_layers", chunk.layers},
            {"vector", util::encode_f32(v)},
            {"has_changed", outcome.has_changed},
            {"content", outcome.content},
            {"content_token", vocab.str(outcome.content)},
            {"clean", outcome.clean},
            {"rendered_x", vocab.render(x)}};
}

PatchSample PatchSample::from_json(const nlohmann::json& j) {
    PatchSample s;
    s.pair_id = j.at("pair_id");
    s.x = j.at("x").get<std::vector<int>>();
    s.x_prime = j.at("x_prime").get<std::vector<int>>();
    s.t = j.at("t");
    s.type = j.at("token_type");
    s.chunk = {j.at("chunk"), j.at("chunk_layers").get<std::vector<int>>()};
    s.v = util::decode_f32(j.at("vector").get<std::string>());
    s.outcome = {j.at("has_changed"), j.at("content"), j.at("clean")};
    return s;
}

std::vector<PatchSample> label_patch_samples(const lm::Model& target, const World& world,
                                             std::span<const CounterfactualPair> pairs) {
    const auto chunks = layer_chunks(target.layers());
    const std::size_t T = pairs.empty() ? 0 : pairs[0].x.size();
    const std::size_t per_pair = T * chunks.size();
    return util::parallel_map(pairs.size() * per_pair, [&](std::size_t k) {
        const auto& p = pairs[k / per_pair];
        const std::size_t t = (k % per_pair) / chunks.size();
        const auto& ch = chunks[k % chunks.size()];
        PatchSample s;
        s.pair_id = p.id();
        s.x = p.x;
        s.x_prime = p.x_prime;
        s.t = t;
        s.type = token_type(world, p, t);
        s.chunk = ch;
        s.v = chunk_mean(target, p.x_prime, t, ch);
        s.outcome = patch_outcome(target, p.x, p.x_prime, t, ch);
        return s;
    });
}

util::Balanced<PatchSample> balance_patch_dataset(std::span<const PatchSample> samples, std::size_t cap,
                                                  std::uint64_t seed) {
    std::set<std::vector<std::string>> expected;
    for (const auto& s : samples) {
        for (const char* c : {"changed", "unchanged"}) expected.insert({s.type, std::to_string(s.chunk.ordinal), c});
    }
    return util::balance_cells(
        samples,
        [](const PatchSample& s) {
            return std::vector<std::string>{s.type, std::to_string(s.chunk.ordinal),
                                            s.outcome.has_changed ? "changed" : "unchanged"};
        },
        cap, seed, {expected.begin(), expected.end()});
}

void Ablation::validate() const {
    if (no_activation && no_layer && no_token) {
        throw std::invalid_argument("ablating activation, layer and token together leaves nothing to explain");
    }
}

std::string Ablation::name() const {
    std::string s;
    auto add = [&](bool f, const char* n) {
        if (!f) return;
        if (!s.empty()) s += '+';
        s += n;
    };
    add(no_activation, "activation");
    add(no_layer, "layer");
    add(no_token, "token");
    return s.empty() ? "none" : s;
}

Ablation Ablation::parse(const std::string& s) {
    if (s.empty() || s == "none") return {};
    if (s == "activation") return {.no_activation = true};
    if (s == "layer") return {.no_layer = true};
    if (s == "token") return {.no_token = true};
    throw std::invalid_argument("unknown ablation '" + s + "' (expected activation, layer or token)");
}

std::vector<int> render_patch_prompt(const World& world, const PatchSample& s, const Ablation& a, std::size_t& slot_index) {
    a.validate();
    const auto& v = world.vocab;
    std::vector<int> p = s.x;
    slot_index = std::string::npos;
    if (!a.no_activation) {
        p.push_back(v.open);
        slot_index = p.size();
        p.push_back(v.slot);
        p.push_back(v.close);
    }
    if (!a.no_layer) {
        for (int t : v.ids({"at", "layers"})) p.push_back(t);
        for (int l : s.chunk.layers) p.push_back(v.layer_token(l));
    }
    if (!a.no_token) {
        for (int t : v.ids({"token", "<<<"})) p.push_back(t);
        p.push_back(s.x.at(s.t));
        p.push_back(v.id(">>>"));
    }
    for (int t : v.ids({"how", "would", "the", "output", "change", "?"})) p.push_back(t);
    return p;
}

std::vector<int> patch_gold(const World& world, const PatchSample& s) {
    return metrics::render_branch(world.vocab, s.outcome.has_changed, s.outcome.content);
}

lm::TrainingExample patch_example(const World& world, const PatchSample& s, const Ablation& a) {
    lm::TrainingExample e;
    std::size_t slot = 0;
    e.ids = render_patch_prompt(world, s, a, slot);
    const std::size_t n = e.ids.size();
    const auto gold = patch_gold(world, s);
    e.ids.insert(e.ids.end(), gold.begin(), gold.end());
    e.weights.assign(e.ids.size(), 0.0f);
    std::fill(e.weights.begin() + static_cast<std::ptrdiff_t>(n), e.weights.end(), 1.0f);
    if (slot != std::string::npos) e.slots.push_back({slot, s.v, s.chunk.layers.front()});
    return e;
}

lm::LossCurve train_explainer_patch(lm::Model& explainer, const World& world, std::span<const PatchSample> records,
                                    const Ablation& a, lm::ProjectionSet* projections, const lm::OptimizerConfig& config) {
    std::vector<lm::TrainingExample> data;
    data.reserve(records.size());
    for (const auto& r : records) data.push_back(patch_example(world, r, a));
    return lm::fine_tune(explainer, data, config, {.projections = projections, .train_model = true});
}

std::vector<int> explain_patch(const lm::Model& explainer, const lm::ProjectionSet* projections, const World& world,
                               const PatchSample& s, const Ablation& a) {
    std::size_t slot = 0;
    lm::TokenSeq seq{.ids = render_patch_prompt(world, s, a, slot)};
    if (slot != std::string::npos) {
        seq.slots.push_back({slot, projections ? projections->apply(s.chunk.layers.front(), s.v) : s.v});
    }
    const int max_new = static_cast<int>(metrics::render_branch(world.vocab, true, s.outcome.content).size());
    return lm::greedy_decode(explainer, seq, max_new, world.vocab.eos);
}

std::vector<int> patch_content_tokens(const World& world, const PatchSample& s) {
    // Layout: bos S r1 r2 Options o1..o5 unknown Answer
    std::vector<int> out(s.x.begin() + 5, s.x.begin() + 10);
    out.push_back(world.vocab.id("unknown"));
    return out;
}

std::vector<LocationRecord> make_location_records(const lm::Model& target, std::span<const std::vector<int>> prompts) {
    const auto chunks = layer_chunks(target.layers());
    std::vector<LocationRecord> out;
    for (const auto& x : prompts) {
        const auto tr = target.forward({.ids = x}, lm::all_layers(target.layers()));
        for (std::size_t t = 0; t < x.size(); ++t) {
            for (const auto& ch : chunks) {
                std::vector<float> v(static_cast<std::size_t>(target.hidden()), 0.0f);
                for (int l : ch.layers) {
                    const auto h = tr.at(l, t);
                    for (std::size_t i = 0; i < v.size(); ++i) v[i] += h[i];
                }
                for (float& f : v) f /= static_cast<float>(ch.layers.size());
                out.push_back({x, t, ch, std::move(v)});
            }
        }
    }
    return out;
}

std::vector<int> render_location_prompt(const World& world, std::span<const int> x, std::size_t& slot_index) {
    const auto& v = world.vocab;
    std::vector<int> p{v.bos};
    for (int t : v.ids({"where", "did", "feature"})) p.push_back(t);
    p.push_back(v.open);
    slot_index = p.size();
    p.push_back(v.slot);
    p.push_back(v.close);
    for (int t : v.ids({"come", "from", "in", "<<<"})) p.push_back(t);
    p.insert(p.end(), x.begin(), x.end());
    for (int t : v.ids({">>>", "?"})) p.push_back(t);
    return p;
}

std::vector<int> location_answer(const World& world, const LocationRecord& r) {
    const auto& v = world.vocab;
    std::vector<int> a = v.ids({"token", "<<<"});
    a.push_back(r.x.at(r.t));
    for (int t : v.ids({">>>", "at", "layers"})) a.push_back(t);
    for (int l : r.chunk.layers) a.push_back(v.layer_token(l));
    a.push_back(v.id("."));
    a.push_back(v.eos);
    return a;
}

lm::LossCurve train_location_probe(lm::Model& explainer, const World& world, std::span<const LocationRecord> records,
                                   const lm::OptimizerConfig& config) {
    std::vector<lm::TrainingExample> data;
    data.reserve(records.size());
    for (const auto& r : records) {
        lm::TrainingExample e;
        std::size_t slot = 0;
        e.ids = render_location_prompt(world, r.x, slot);
        const std::size_t n = e.ids.size();
        const auto ans = location_answer(world, r);
        e.ids.insert(e.ids.end(), ans.begin(), ans.end());
        e.weights.assign(e.ids.size(), 0.0f);
        std::fill(e.weights.begin() + static_cast<std::ptrdiff_t>(n), e.weights.end(), 1.0f);
        e.slots.push_back({slot, r.v, r.chunk.layers.front()});
        data.push_back(std::move(e));
    }
    return lm::fine_tune(explainer, data, config);
}

std::optional<Location> decode_location(const lm::Model& explainer, const World& world, std::span<const float> v,
                                        std::span<const int> x, int target_layers) {
    const auto& vocab = world.vocab;
    std::size_t slot = 0;
    lm::TokenSeq seq{.ids = render_location_prompt(world, x, slot)};
    seq.slots.push_back({slot, {v.begin(), v.end()}});
    const auto a = lm::greedy_decode(explainer, seq, 12, vocab.eos);
    // token <<< x_t >>> at layers L.. . eos
    if (a.size() < 7 || a[0] != vocab.id("token") || a[1] != vocab.id("<<<") || a[3] != vocab.id(">>>") ||
        a[4] != vocab.id("at") || a[5] != vocab.id("layers")) {
        return std::nullopt;
    }
    const auto pos = std::find(x.begin(), x.end(), a[2]);
    if (pos == x.end()) return std::nullopt;
    std::vector<int> layers;
    for (std::size_t i = 6; i < a.size() && a[i] != vocab.id("."); ++i) {
        int l = -1;
        for (int k = 0; k < vocab.max_layers(); ++k) {
            if (vocab.layer_token(k) == a[i]) l = k;
        }
        if (l < 0) return std::nullopt;
        layers.push_back(l);
    }
    for (const auto& ch : layer_chunks(target_layers)) {
        if (ch.layers == layers) return Location{static_cast<std::size_t>(pos - x.begin()), ch.ordinal};
    }
    return std::nullopt;
}

}  // namespace introspect::patch
