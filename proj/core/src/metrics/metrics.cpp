#include "introspect/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <boost/math/distributions/students_t.hpp>

namespace introspect::metrics {

double pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("pearson: series lengths differ");
    if (a.size() < 2) throw std::invalid_argument("pearson: need at least two points");
    const double n = double(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa <= 0 || sbb <= 0) return 0.0;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double pearson(std::span<const float> a, std::span<const float> b) {
    std::vector<double> da(a.begin(), a.end()), db(b.begin(), b.end());
    return pearson(std::span<const double>(da), std::span<const double>(db));
}

JudgeContext::JudgeContext(const feat::LabelGrammar& g, std::span<const std::vector<int>> corpus)
    : grammar(&g), token_counts(static_cast<std::size_t>(g.vocab().size()), 0.0) {
    for (const auto& x : corpus) {
        for (int t : x) {
            if (t >= 0 && t < static_cast<int>(token_counts.size())) token_counts[t] += 1;
        }
    }
}

namespace {

std::pair<double, double> inter_union(const JudgeContext& ctx, const feat::Label& a, const feat::Label& b) {
    const auto& ea = ctx.grammar->extension(a);
    const auto& eb = ctx.grammar->extension(b);
    double inter = 0, uni = 0;
    std::size_t i = 0, j = 0;
    while (i < ea.size() || j < eb.size()) {
        if (j == eb.size() || (i < ea.size() && ea[i] < eb[j])) {
            uni += ctx.token_counts[ea[i++]];
        } else if (i == ea.size() || eb[j] < ea[i]) {
            uni += ctx.token_counts[eb[j++]];
        } else {
            inter += ctx.token_counts[ea[i]];
            uni += ctx.token_counts[ea[i]];
            ++i;
            ++j;
        }
    }
    return {inter, uni};
}

}  // namespace

double JudgeContext::jaccard(const feat::Label& a, const feat::Label& b) const {
    const auto [inter, uni] = inter_union(*this, a, b);
    return uni > 0 ? inter / uni : 0.0;
}

double JudgeContext::overlap(const feat::Label& a, const feat::Label& b) const {
    return inter_union(*this, a, b).first;
}

double lexical_judge(const JudgeContext& ctx, const std::optional<feat::Label>& predicted, const feat::Label& gold) {
    if (!predicted || !ctx.grammar->contains(*predicted)) return 0.0;
    const feat::Label& p = *predicted;
    if (p == gold) return 1.0;
    if (p.family == gold.family) return 0.75;
    if (ctx.jaccard(p, gold) >= 0.5) return 0.5;
    if (ctx.overlap(p, gold) > 0) return 0.25;
    return 0.0;
}

std::string task_name(Task t) {
    switch (t) {
        case Task::Feat: return "feat";
        case Task::Patch: return "patch";
        case Task::Ablate: return "ablate";
    }
    throw std::logic_error("bad task");
}

Task parse_task(const std::string& s) {
    if (s == "feat") return Task::Feat;
    if (s == "patch") return Task::Patch;
    if (s == "ablate") return Task::Ablate;
    throw std::invalid_argument("unknown task '" + s + "'");
}

void PredictionRecord::parse(const pipeline::Vocab& vocab) {
    if (task == Task::Feat) {
        predicted_parse.reset();
        gold_parse.reset();
        return;
    }
    predicted_parse = parse_branch(vocab, predicted);
    gold_parse = parse_branch(vocab, gold);
    if (!gold_parse) throw std::invalid_argument("record " + id + ": gold explanation does not match a branch template");
}

nlohmann::json PredictionRecord::to_json() const {
    nlohmann::json j{{"task", task_name(task)}, {"id", id}, {"predicted", predicted}, {"gold", gold}};
    if (predicted_parse) j["predicted_parse"] = {{"has_changed", predicted_parse->has_changed}, {"content", predicted_parse->content}};
    if (gold_parse) j["gold_parse"] = {{"has_changed", gold_parse->has_changed}, {"content", gold_parse->content}};
    return j;
}

namespace {

const BranchParse& gold_of(const PredictionRecord& r) {
    if (!r.gold_parse) throw std::invalid_argument("record " + r.id + " has no parsed gold explanation");
    return *r.gold_parse;
}

double f1(std::size_t tp, std::size_t fp, std::size_t fn) {
    if (tp + fp + fn == 0) return 1.0;
    return 2.0 * double(tp) / double(2 * tp + fp + fn);
}

}  // namespace

F1Result has_changed_f1(std::span<const PredictionRecord> records) {
    std::size_t tp[2] = {0, 0}, fp[2] = {0, 0}, fn[2] = {0, 0};
    F1Result res;
    for (const auto& r : records) {
        const bool truth = gold_of(r).has_changed;
        bool pred;
        if (r.predicted_parse) {
            pred = r.predicted_parse->has_changed;
        } else {
            pred = !truth;
            ++res.unparseable;
        }
        for (int c = 0; c < 2; ++c) {
            const bool is_c_truth = truth == (c == 1), is_c_pred = pred == (c == 1);
            tp[c] += is_c_truth && is_c_pred;
            fp[c] += !is_c_truth && is_c_pred;
            fn[c] += is_c_truth && !is_c_pred;
        }
    }
    res.f1_unchanged = f1(tp[0], fp[0], fn[0]);
    res.f1_changed = f1(tp[1], fp[1], fn[1]);
    res.macro_f1 = 0.5 * (res.f1_changed + res.f1_unchanged);
    return res;
}

double content_match(std::span<const PredictionRecord> records) {
    if (records.empty()) return 0.0;
    std::size_t hit = 0;
    for (const auto& r : records) hit += r.predicted_parse && r.predicted_parse->content == gold_of(r).content;
    return double(hit) / double(records.size());
}

double exact_match(std::span<const PredictionRecord> records) {
    if (records.empty()) return 0.0;
    std::size_t hit = 0;
    for (const auto& r : records) hit += r.predicted == r.gold;
    return double(hit) / double(records.size());
}

double branch_accuracy(std::span<const PredictionRecord> records) {
    if (records.empty()) return 0.0;
    std::size_t hit = 0;
    for (const auto& r : records) hit += r.predicted_parse && r.predicted_parse->has_changed == gold_of(r).has_changed;
    return double(hit) / double(records.size());
}

TTest paired_t_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("paired_t_test: samples differ in length");
    if (a.size() < 2) throw std::invalid_argument("paired_t_test: need at least two pairs");
    TTest res;
    res.n = a.size();
    const double n = double(a.size());
    double mean = 0;
    for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
    mean /= n;
    double ss = 0;
    for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
    res.mean_diff = mean;
    const double sd = std::sqrt(ss / (n - 1));
    if (sd == 0) {
        if (mean == 0) return res;
        res.t = mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
        res.p = 0;
        return res;
    }
    res.t = mean / (sd / std::sqrt(n));
    const boost::math::students_t dist(n - 1);
    res.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(res.t))));
    return res;
}

TTest welch_t_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("welch_t_test: need at least two values per sample");
    auto moments = [](std::span<const double> x) {
        double m = 0;
        for (double v : x) m += v;
        m /= double(x.size());
        double ss = 0;
        for (double v : x) ss += (v - m) * (v - m);
        return std::pair{m, ss / double(x.size() - 1)};
    };
    const auto [ma, va] = moments(a);
    const auto [mb, vb] = moments(b);
    TTest res;
    res.n = a.size() + b.size();
    res.mean_diff = ma - mb;
    const double sa = va / double(a.size()), sb = vb / double(b.size());
    const double se = std::sqrt(sa + sb);
    if (se == 0) {
        if (res.mean_diff == 0) return res;
        res.t = res.mean_diff > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
        res.p = 0;
        return res;
    }
    res.t = res.mean_diff / se;
    const double df = (sa + sb) * (sa + sb) /
                      (sa * sa / double(a.size() - 1) + sb * sb / double(b.size() - 1));
    const boost::math::students_t dist(df);
    res.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(res.t))));
    return res;
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
        const double rank = 0.5 * double(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = rank;
        i = j + 1;
    }
    return r;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("spearman: series differ in length");
    const auto ra = average_ranks(a), rb = average_ranks(b);
    return pearson(std::span<const double>(ra), std::span<const double>(rb));
}

int corresponding_layer(int target_layer, int target_layers, int explainer_layers) {
    if (target_layers <= 0 || explainer_layers <= 0) throw std::invalid_argument("corresponding_layer: empty model");
    const int l = static_cast<int>(std::lround(double(target_layer) * explainer_layers / target_layers));
    return std::clamp(l, 0, explainer_layers - 1);
}

namespace {

std::vector<float> project(const lm::ProjectionSet* p, int layer, std::span<const float> h) {
    if (!p) return {h.begin(), h.end()};
    return p->apply(layer, h);
}

}  // namespace

double dot_similarity(const lm::Model& explainer, const lm::Model& target, std::span<const std::vector<int>> corpus,
                      const lm::ProjectionSet* projections) {
    if (!projections && explainer.hidden() != target.hidden()) {
        throw std::invalid_argument("dot_similarity: hidden sizes differ and no projection was given");
    }
    const int LM = target.layers(), LE = explainer.layers();
    double em = 0, ee = 0, mm = 0;
    for (const auto& x : corpus) {
        if (x.empty()) continue;
        const lm::Trace tm = target.forward({.ids = x}, lm::all_layers(LM));
        const lm::Trace te = explainer.forward({.ids = x}, lm::all_layers(LE));
        for (int l = 0; l < LM; ++l) {
            const int le = corresponding_layer(l, LM, LE);
            for (std::size_t t = 0; t < x.size(); ++t) {
                const auto hm = project(projections, l, tm.at(l, t));
                const auto he = te.at(le, t);
                for (std::size_t c = 0; c < he.size(); ++c) {
                    em += double(he[c]) * hm[c];
                    ee += double(he[c]) * he[c];
                    mm += double(hm[c]) * hm[c];
                }
            }
        }
    }
    if (ee <= 0 || mm <= 0) return 0.0;
    return em / std::sqrt(ee * mm);
}

double sae_pattern_similarity(const lm::Model& explainer, const lm::Model& target,
                              std::span<const sae::FeatureDirection> features,
                              std::span<const std::vector<int>> exemplar_corpus, std::size_t exemplars_per_feature,
                              const lm::ProjectionSet* projections) {
    const int LM = target.layers(), LE = explainer.layers();
    std::vector<lm::Trace> tm, te;
    for (const auto& x : exemplar_corpus) {
        tm.push_back(target.forward({.ids = x}, lm::all_layers(LM)));
        te.push_back(explainer.forward({.ids = x}, lm::all_layers(LE)));
    }
    double total = 0;
    std::size_t count = 0;
    for (const auto& f : features) {
        const auto pv = project(projections, f.layer, f.v);
        const int le = corresponding_layer(f.layer, LM, LE);
        std::vector<std::pair<double, std::size_t>> peaks;
        std::vector<std::vector<double>> am(exemplar_corpus.size()), ae(exemplar_corpus.size());
        for (std::size_t i = 0; i < exemplar_corpus.size(); ++i) {
            double peak = -std::numeric_limits<double>::infinity();
            for (std::size_t t = 0; t < exemplar_corpus[i].size(); ++t) {
                const auto hm = tm[i].at(f.layer, t);
                const auto he = te[i].at(le, t);
                double a = 0, b = 0;
                for (std::size_t c = 0; c < hm.size(); ++c) a += double(hm[c]) * f.v[c];
                for (std::size_t c = 0; c < he.size(); ++c) b += double(he[c]) * pv[c];
                am[i].push_back(a);
                ae[i].push_back(b);
                peak = std::max(peak, a);
            }
            peaks.emplace_back(-peak, i);
        }
        std::sort(peaks.begin(), peaks.end());
        double s = 0;
        std::size_t k = 0;
        for (std::size_t j = 0; j < peaks.size() && k < exemplars_per_feature; ++j) {
            const std::size_t i = peaks[j].second;
            if (am[i].size() < 2) continue;
            s += pearson(std::span<const double>(ae[i]), std::span<const double>(am[i]));
            ++k;
        }
        if (k > 0) {
            total += s / double(k);
            ++count;
        }
    }
    return count ? total / double(count) : 0.0;
}

MetricSummary summarize(const std::string& name, std::span<const double> values) {
    MetricSummary m;
    m.name = name;
    m.n = values.size();
    if (values.empty()) return m;
    m.mean = std::accumulate(values.begin(), values.end(), 0.0) / double(values.size());
    if (values.size() > 1) {
        double ss = 0;
        for (double v : values) ss += (v - m.mean) * (v - m.mean);
        m.sem = std::sqrt(ss / double(values.size() - 1)) / std::sqrt(double(values.size()));
    }
    return m;
}

void ScoreReport::add(std::vector<std::pair<std::string, std::string>> keys, MetricSummary m, std::optional<double> p) {
    rows.push_back({std::move(keys), std::move(m), p});
}

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace

void ScoreReport::write_csv(const std::filesystem::path& path) const {
    std::vector<std::string> key_names;
    for (const auto& r : rows) {
        for (const auto& [k, v] : r.keys) {
            if (std::find(key_names.begin(), key_names.end(), k) == key_names.end()) key_names.push_back(k);
        }
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& k : key_names) out << k << ',';
    out << "metric,mean,stderr,n,p_value\n";
    for (const auto& r : rows) {
        for (const auto& k : key_names) {
            auto it = std::find_if(r.keys.begin(), r.keys.end(), [&](const auto& kv) { return kv.first == k; });
            out << (it == r.keys.end() ? "" : it->second) << ',';
        }
        out << r.metric.name << ',' << fmt(r.metric.mean) << ',' << fmt(r.metric.sem) << ',' << r.metric.n << ','
            << (r.p_value ? fmt(*r.p_value) : "") << '\n';
    }
}

void ScoreReport::write_json(const std::filesystem::path& path) const {
    nlohmann::json j;
    j["meta"] = meta;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json row;
        for (const auto& [k, v] : r.keys) row[k] = v;
        row["metric"] = r.metric.name;
        row["mean"] = r.metric.mean;
        row["stderr"] = r.metric.sem;
        row["n"] = r.metric.n;
        if (r.p_value) row["p_value"] = *r.p_value;
        j["rows"].push_back(row);
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

}  // namespace introspect::metrics
