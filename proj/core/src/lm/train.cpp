#include "introspect/lm/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "introspect/lm/ops.hpp"

namespace introspect::lm {

float OptimizerConfig::lr_at(int step) const {
    const int warmup = std::max(1, static_cast<int>(std::lround(warmup_frac * steps)));
    if (step < warmup) return lr * float(step + 1) / float(warmup);
    const double progress = steps > warmup ? double(step - warmup) / double(std::max(1, steps - warmup)) : 1.0;
    const double cosine = 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(1.0, progress)));
    return static_cast<float>(lr * (min_lr_ratio + (1.0 - min_lr_ratio) * cosine));
}

double LossCurve::moving_average(std::size_t step, std::size_t window) const {
    if (loss.empty()) return 0.0;
    step = std::min(step, loss.size() - 1);
    const std::size_t begin = step + 1 >= window ? step + 1 - window : 0;
    double s = 0;
    for (std::size_t i = begin; i <= step; ++i) s += loss[i];
    return s / double(step + 1 - begin);
}

void LossCurve::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "step,loss\n";
    out.precision(9);
    for (std::size_t i = 0; i < loss.size(); ++i) out << i << ',' << loss[i] << '\n';
}

DivergenceError::DivergenceError(int step, double loss)
    : std::runtime_error([&] {
          std::ostringstream os;
          os << "training diverged at step " << step << ": loss = " << loss;
          return os.str();
      }()),
      step_(step) {}

std::size_t TrainingExample::supervised_tokens() const {
    std::size_t n = 0;
    for (std::size_t i = 1; i < weights.size() && i < ids.size(); ++i) n += weights[i] != 0.0f;
    return n;
}

AdamW::AdamW(std::vector<Parameter<float>*> params, const OptimizerConfig& config)
    : params_(std::move(params)), config_(config) {
    for (Parameter<float>* p : params_) {
        m_.emplace_back(p->value.size(), 0.0f);
        v_.emplace_back(p->value.size(), 0.0f);
    }
}

double AdamW::step(int step_index) {
    double norm2 = 0;
    for (Parameter<float>* p : params_) {
        for (float g : p->grad.storage()) norm2 += double(g) * g;
    }
    const double norm = std::sqrt(norm2);
    const float clip_scale = (config_.clip > 0 && norm > config_.clip) ? float(config_.clip / norm) : 1.0f;
    const float lr = config_.lr_at(step_index);
    const double t = step_index + 1;
    const float bc1 = float(1.0 - std::pow(double(config_.beta1), t));
    const float bc2 = float(1.0 - std::pow(double(config_.beta2), t));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Parameter<float>& p = *params_[k];
        float* w = p.value.data();
        const float* g = p.grad.data();
        float* m = m_[k].data();
        float* v = v_[k].data();
        const float decay = p.decay ? config_.weight_decay : 0.0f;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const float gi = g[i] * clip_scale;
            m[i] = config_.beta1 * m[i] + (1.0f - config_.beta1) * gi;
            v[i] = config_.beta2 * v[i] + (1.0f - config_.beta2) * gi * gi;
            const float mhat = m[i] / bc1;
            const float vhat = v[i] / bc2;
            w[i] -= lr * (mhat / (std::sqrt(vhat) + config_.eps) + decay * w[i]);
        }
    }
    return norm;
}

namespace {

struct Packed {
    BatchInput<float> in;
    std::vector<int> targets;
    std::vector<float> weights;
    double supervised = 0;
};

Packed pack(Graph<float>& g, std::span<const TrainingExample* const> batch, int hidden, int context,
            const ProjectionSet* projections) {
    Packed p;
    std::size_t T = 0;
    for (const TrainingExample* e : batch) {
        if (e->weights.size() != e->ids.size()) throw std::invalid_argument("TrainingExample: weights/ids size mismatch");
        if (e->ids.empty()) throw std::invalid_argument("TrainingExample: empty sequence");
        T = std::max(T, e->ids.size());
    }
    if (T > static_cast<std::size_t>(context)) {
        throw std::invalid_argument("training sequence of length " + std::to_string(T) + " exceeds context " +
                                    std::to_string(context));
    }
    p.in.batch = batch.size();
    p.in.seq_len = T;
    p.in.ids.assign(batch.size() * T, 0);
    p.targets.assign(batch.size() * T, 0);
    p.weights.assign(batch.size() * T, 0.0f);

    // layer -> (rows, stacked raw vectors); layer -1 collects raw insertions.
    std::map<int, std::pair<std::vector<std::size_t>, std::vector<float>>> groups;
    std::size_t src_dim = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const TrainingExample& e = *batch[b];
        for (std::size_t t = 0; t < e.ids.size(); ++t) {
            p.in.ids[b * T + t] = e.ids[t];
            if (t + 1 < e.ids.size()) {
                p.targets[b * T + t] = e.ids[t + 1];
                p.weights[b * T + t] = e.weights[t + 1];
                p.supervised += e.weights[t + 1];
            }
        }
        for (const SlotSource& s : e.slots) {
            if (s.position >= e.ids.size()) throw std::out_of_range("TrainingExample: slot position out of range");
            const int key = projections ? s.layer : -1;
            auto& [rows, vals] = groups[key];
            if (src_dim == 0) src_dim = s.vector.size();
            if (s.vector.size() != src_dim) throw std::invalid_argument("TrainingExample: inconsistent slot dimensions");
            rows.push_back(b * T + s.position);
            vals.insert(vals.end(), s.vector.begin(), s.vector.end());
        }
    }
    for (auto& [layer, grp] : groups) {
        auto& [rows, vals] = grp;
        const std::size_t k = rows.size();
        SlotGroup sg;
        sg.rows = rows;
        Matrix<float> raw(k, src_dim, std::move(vals));
        if (layer < 0) {
            if (src_dim != static_cast<std::size_t>(hidden)) {
                throw std::invalid_argument("slot vector dimension " + std::to_string(src_dim) +
                                            " does not match hidden size " + std::to_string(hidden));
            }
            sg.values = g.input(std::move(raw));
        } else {
            const Parameter<float>& proj = projections->at(layer);
            if (proj.value.cols() != src_dim) {
                throw std::invalid_argument("slot vector dimension " + std::to_string(src_dim) +
                                            " does not match projection input " + std::to_string(proj.value.cols()));
            }
            Var pv = g.recording() ? g.parameter(const_cast<Parameter<float>&>(proj)) : g.borrow(proj.value);
            sg.values = ops::matmul_nt(g, g.input(std::move(raw)), pv);
        }
        p.in.slots.push_back(std::move(sg));
    }
    return p;
}

double run_batch(Model& model, std::span<const TrainingExample* const> batch, ProjectionSet* projections) {
    Graph<float> g(true);
    Packed p = pack(g, batch, model.hidden(), model.config().context, projections);
    GraphResult res = model.build(g, p.in);
    Var loss = ops::cross_entropy<float>(g, res.logits, p.targets, p.weights);
    const double value = g.value(loss)(0, 0);
    if (p.supervised > 0) g.backward(loss);
    return value;
}

struct TrainableScope {
    std::vector<std::pair<Parameter<float>*, bool>> saved;
    void set(Parameter<float>* p, bool t) {
        saved.emplace_back(p, p->trainable);
        p->trainable = t;
    }
    ~TrainableScope() {
        for (auto& [p, t] : saved) p->trainable = t;
    }
};

LossCurve run_training(Model& model, std::span<const TrainingExample> data, const OptimizerConfig& config,
                       const FineTuneOptions& options) {
    if (config.steps < 1) throw std::invalid_argument("training needs steps >= 1");
    if (config.batch_size < 1) throw std::invalid_argument("training needs batch_size >= 1");
    if (data.empty()) throw std::invalid_argument("training data is empty");

    TrainableScope scope;
    std::vector<Parameter<float>*> params;
    for (Parameter<float>* p : model.parameters()) {
        scope.set(p, options.train_model);
        if (options.train_model) params.push_back(p);
    }
    if (options.projections) {
        for (Parameter<float>* p : options.projections->parameters()) {
            if (p->trainable) params.push_back(p);
        }
    }
    AdamW opt(params, config);

    std::mt19937_64 rng(config.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t cursor = 0;

    LossCurve curve;
    curve.loss.reserve(config.steps);
    std::vector<const TrainingExample*> batch;
    for (int step = 0; step < config.steps; ++step) {
        batch.clear();
        for (int b = 0; b < config.batch_size && b < static_cast<int>(data.size()); ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            batch.push_back(&data[order[cursor++]]);
        }
        for (Parameter<float>* p : params) p->zero_grad();
        const double loss = run_batch(model, batch, options.projections);
        if (!std::isfinite(loss)) throw DivergenceError(step, loss);
        bool any = false;
        for (const TrainingExample* e : batch) any = any || e->supervised_tokens() > 0;
        if (any) opt.step(step);
        curve.loss.push_back(loss);
    }
    return curve;
}

}  // namespace

LossCurve train_lm(Model& model, std::span<const std::vector<int>> corpus, const OptimizerConfig& config) {
    std::vector<TrainingExample> data;
    data.reserve(corpus.size());
    for (const auto& seq : corpus) {
        if (seq.size() < 2) continue;
        for (int id : seq) {
            if (id < 0 || id >= model.vocab()) throw std::invalid_argument("train_lm: token id outside vocabulary");
        }
        TrainingExample e;
        e.ids = seq;
        e.weights.assign(seq.size(), 1.0f);
        e.weights[0] = 0.0f;
        data.push_back(std::move(e));
    }
    return run_training(model, data, config, {});
}

LossCurve fine_tune(Model& model, std::span<const TrainingExample> data, const OptimizerConfig& config,
                    const FineTuneOptions& options) {
    std::size_t supervised = 0;
    for (const auto& e : data) supervised += e.supervised_tokens();
    if (supervised == 0) throw std::invalid_argument("fine_tune: dataset has zero maskable (supervised) tokens");
    return run_training(model, data, config, options);
}

double evaluate_loss(const Model& model, std::span<const TrainingExample> batch, const ProjectionSet* projections) {
    Graph<float> g(false);
    std::vector<const TrainingExample*> ptrs;
    for (const auto& e : batch) ptrs.push_back(&e);
    Packed p = pack(g, ptrs, model.hidden(), model.config().context, projections);
    GraphResult res = model.build(g, p.in);
    Var loss = ops::cross_entropy<float>(g, res.logits, p.targets, p.weights);
    return g.value(loss)(0, 0);
}

}  // namespace introspect::lm
