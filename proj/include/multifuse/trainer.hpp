#ifndef MULTIFUSE_TRAINER_HPP
#define MULTIFUSE_TRAINER_HPP

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"
#include "multifuse/compute_graph.hpp"
#include "multifuse/config.hpp"
#include "multifuse/errors.hpp"
#include "multifuse/fusion_model.hpp"
#include "multifuse/ops.hpp"
#include "multifuse/rng.hpp"
#include "multifuse/synthcohort.hpp"

namespace multifuse {

enum class Precision { F32, F64 };

struct TrainConfig {
    std::size_t folds = 5;
    std::size_t batch_size = 16;
    double lr = 1e-5;
    double weight_decay = 1e-4;
    std::size_t epochs = 200;
    std::uint64_t seed = 0;
    Precision precision = Precision::F32;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const
    {
        if (folds < 2) throw ConfigError("train: folds must be >= 2");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (!(lr > 0)) throw ConfigError("train: lr must be > 0");
        if (!(weight_decay > 0)) throw ConfigError("train: weight_decay must be > 0");
        if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("train: betas must be in [0,1)");
        if (!(eps > 0)) throw ConfigError("train: eps must be > 0");
    }
};

inline TrainConfig train_config_from(const Config& cfg, TrainConfig t = {})
{
    t.folds = config_get(cfg, "train.folds", t.folds);
    t.batch_size = config_get(cfg, "train.batch_size", t.batch_size);
    t.lr = config_get(cfg, "train.lr", t.lr);
    t.weight_decay = config_get(cfg, "train.weight_decay", t.weight_decay);
    t.epochs = config_get(cfg, "train.epochs", t.epochs);
    t.seed = config_get(cfg, "train.seed", t.seed);
    t.beta1 = config_get(cfg, "train.beta1", t.beta1);
    t.beta2 = config_get(cfg, "train.beta2", t.beta2);
    t.eps = config_get(cfg, "train.eps", t.eps);
    const auto prec = config_get<std::string>(cfg, "train.precision", t.precision == Precision::F32 ? "32" : "64");
    if (prec == "32") t.precision = Precision::F32;
    else if (prec == "64") t.precision = Precision::F64;
    else throw ConfigError("train.precision must be 32 or 64, got " + prec);
    t.validate();
    return t;
}

inline void train_config_to(const TrainConfig& t, Config& cfg)
{
    cfg.put("train.folds", t.folds);
    cfg.put("train.batch_size", t.batch_size);
    cfg.put("train.lr", t.lr);
    cfg.put("train.weight_decay", t.weight_decay);
    cfg.put("train.epochs", t.epochs);
    cfg.put("train.seed", t.seed);
    cfg.put("train.precision", t.precision == Precision::F32 ? "32" : "64");
    cfg.put("train.beta1", t.beta1);
    cfg.put("train.beta2", t.beta2);
    cfg.put("train.eps", t.eps);
}

// ---------------------------------------------------------------- folds

struct FoldSplit {
    std::vector<std::size_t> train; // subject indices, ascending
    std::vector<std::size_t> eval;
};

/// Per-class seeded shuffle, then members are dealt to folds round-robin.
inline std::vector<FoldSplit> stratified_kfold(const std::vector<Label>& labels, std::size_t k, std::uint64_t seed)
{
    if (k < 2) throw ConfigError("stratified_kfold: k must be >= 2");
    std::vector<std::vector<std::size_t>> eval(k);
    for (Label c : {Label::Neg, Label::Pos}) {
        std::vector<std::size_t> ids;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == c) ids.push_back(i);
        if (ids.size() < k) {
            throw ConfigError(std::string("stratified_kfold: class ") + to_string(c) + " has " +
                              std::to_string(ids.size()) + " members, fewer than k = " + std::to_string(k));
        }
        Rng rng(derive_seed(seed, std::string("folds/") + to_string(c)));
        rng.shuffle(ids);
        for (std::size_t j = 0; j < ids.size(); ++j) eval[j % k].push_back(ids[j]);
    }
    std::vector<FoldSplit> out(k);
    for (std::size_t f = 0; f < k; ++f) {
        std::vector<char> in_eval(labels.size(), 0);
        for (auto i : eval[f]) in_eval[i] = 1;
        std::sort(eval[f].begin(), eval[f].end());
        out[f].eval = eval[f];
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (!in_eval[i]) out[f].train.push_back(i);
    }
    return out;
}

struct ClassWeights {
    double neg = 1, pos = 1;
    double of(Label l) const { return l == Label::Pos ? pos : neg; }
};

/// w_c = N / (2 N_c).
inline ClassWeights class_weights(const std::vector<Label>& labels)
{
    const auto n_pos = static_cast<double>(std::count(labels.begin(), labels.end(), Label::Pos));
    const auto n = static_cast<double>(labels.size());
    const double n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) throw ContractError("class_weights: both classes must be present");
    return {n / (2 * n_neg), n / (2 * n_pos)};
}

// ---------------------------------------------------------------- optimizer

struct AdamState {
    std::size_t step = 0;
    std::vector<std::vector<double>> m, v;
};

/// One Adam step over all parameters; L2 is added to the gradient (g + wd * p).
template <class T>
void adam_step(std::vector<NamedParam<T>>& params, AdamState& st, double lr, double weight_decay,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
{
    if (st.m.empty()) {
        for (const auto& p : params) {
            st.m.emplace_back(p.tensor.size(), 0.0);
            st.v.emplace_back(p.tensor.size(), 0.0);
        }
    }
    if (st.m.size() != params.size()) throw ContractError("adam_step: state does not match parameters");
    ++st.step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].tensor.data();
        auto g = params[i].tensor.grad();
        auto& m = st.m[i];
        auto& v = st.v[i];
        if (m.size() != w.size()) throw ContractError("adam_step: state shape mismatch for " + params[i].name);
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = static_cast<double>(g[j]) + weight_decay * static_cast<double>(w[j]);
            m[j] = beta1 * m[j] + (1 - beta1) * gj;
            v[j] = beta2 * v[j] + (1 - beta2) * gj * gj;
            const double mh = m[j] / bc1, vh = v[j] / bc2;
            w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * mh / (std::sqrt(vh) + eps));
        }
    }
}

// ---------------------------------------------------------------- metrics

struct Metrics {
    double accuracy = 0, precision = 0, recall = 0, f1 = 0;
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    bool precision_undefined = false, recall_undefined = false, f1_undefined = false;
};

inline Metrics metrics(const std::vector<Label>& pred, const std::vector<Label>& truth)
{
    if (pred.empty()) throw ContractError("metrics: empty input");
    if (pred.size() != truth.size()) throw ContractError("metrics: length mismatch");
    Metrics m;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] == Label::Pos, t = truth[i] == Label::Pos;
        if (p && t) ++m.tp;
        else if (p) ++m.fp;
        else if (t) ++m.fn;
        else ++m.tn;
    }
    m.accuracy = static_cast<double>(m.tp + m.tn) / static_cast<double>(pred.size());
    if (m.tp + m.fp == 0) m.precision_undefined = true;
    else m.precision = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
    if (m.tp + m.fn == 0) m.recall_undefined = true;
    else m.recall = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
    if (m.precision + m.recall == 0) m.f1_undefined = true;
    else m.f1 = 2 * m.precision * m.recall / (m.precision + m.recall);
    return m;
}

inline json to_json(const Metrics& m)
{
    return {{"accuracy", m.accuracy}, {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1},
            {"tp", m.tp}, {"fp", m.fp}, {"fn", m.fn}, {"tn", m.tn},
            {"precision_undefined", m.precision_undefined}, {"recall_undefined", m.recall_undefined},
            {"f1_undefined", m.f1_undefined}};
}

inline Metrics metrics_from_json(const json& j)
{
    Metrics m;
    m.accuracy = j.at("accuracy");
    m.precision = j.at("precision");
    m.recall = j.at("recall");
    m.f1 = j.at("f1");
    m.tp = j.at("tp");
    m.fp = j.at("fp");
    m.fn = j.at("fn");
    m.tn = j.at("tn");
    m.precision_undefined = j.value("precision_undefined", false);
    m.recall_undefined = j.value("recall_undefined", false);
    m.f1_undefined = j.value("f1_undefined", false);
    return m;
}

// ---------------------------------------------------------------- reports

struct Prediction {
    std::string id;
    Label label = Label::Neg;
    Label predicted = Label::Neg;
    double p_neg = 0, p_pos = 0;
};

struct FoldReport {
    std::size_t fold = 0;
    std::vector<std::string> train_ids, eval_ids;
    ClassWeights weights;
    std::vector<double> epoch_loss;
    Metrics metrics;
    std::vector<Prediction> predictions;
    std::string checkpoint; // relative to the run directory
    bool best = false;
};

inline json to_json(const FoldReport& r)
{
    json preds = json::array();
    for (const auto& p : r.predictions) {
        preds.push_back({{"id", p.id}, {"label", to_string(p.label)}, {"predicted", to_string(p.predicted)},
                         {"p_neg", p.p_neg}, {"p_pos", p.p_pos}});
    }
    return {{"fold", r.fold},
            {"best", r.best},
            {"train_ids", r.train_ids},
            {"eval_ids", r.eval_ids},
            {"class_weights", {{"NEG", r.weights.neg}, {"POS", r.weights.pos}}},
            {"epoch_loss", r.epoch_loss},
            {"metrics", to_json(r.metrics)},
            {"predictions", preds},
            {"checkpoint", r.checkpoint}};
}

inline FoldReport fold_report_from_json(const json& j)
{
    FoldReport r;
    r.fold = j.at("fold");
    r.best = j.value("best", false);
    r.train_ids = j.at("train_ids").get<std::vector<std::string>>();
    r.eval_ids = j.at("eval_ids").get<std::vector<std::string>>();
    r.weights.neg = j.at("class_weights").at("NEG");
    r.weights.pos = j.at("class_weights").at("POS");
    r.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
    r.metrics = metrics_from_json(j.at("metrics"));
    for (const auto& p : j.at("predictions")) {
        r.predictions.push_back({p.at("id"), parse_label(p.at("label")), parse_label(p.at("predicted")),
                                 p.at("p_neg"), p.at("p_pos")});
    }
    r.checkpoint = j.at("checkpoint");
    return r;
}

struct MeanStd {
    double mean = 0, std = 0;
};

/// Mean and population standard deviation.
inline MeanStd mean_std(const std::vector<double>& v)
{
    if (v.empty()) return {};
    double s = 0;
    for (double x : v) s += x;
    const double mean = s / static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(v.size()))};
}

struct CvSummary {
    MeanStd accuracy, precision, recall, f1;
    std::size_t best_fold = 0;
};

/// Aggregates fold metrics; the best fold is the highest accuracy (lowest index on ties).
inline CvSummary summarize(const std::vector<FoldReport>& folds)
{
    if (folds.empty()) throw ContractError("summarize: no folds");
    std::vector<double> a, p, r, f;
    CvSummary s;
    for (std::size_t i = 0; i < folds.size(); ++i) {
        const auto& m = folds[i].metrics;
        a.push_back(m.accuracy);
        p.push_back(m.precision);
        r.push_back(m.recall);
        f.push_back(m.f1);
        if (m.accuracy > folds[s.best_fold].metrics.accuracy) s.best_fold = i;
    }
    s.accuracy = mean_std(a);
    s.precision = mean_std(p);
    s.recall = mean_std(r);
    s.f1 = mean_std(f);
    return s;
}

inline json to_json(const CvSummary& s)
{
    auto ms = [](const MeanStd& m) { return json{{"mean", m.mean}, {"std", m.std}}; };
    return {{"accuracy", ms(s.accuracy)}, {"precision", ms(s.precision)}, {"recall", ms(s.recall)},
            {"f1", ms(s.f1)}, {"best_fold", s.best_fold}};
}

// ---------------------------------------------------------------- training

/// Network inputs for every subject, converted to the training precision.
template <class T>
std::vector<SubjectInput<T>> prepare_cohort_inputs(const Cohort& c, const ModelConfig& mc)
{
    if (c.data.size() != c.subjects.size()) throw UsageError("prepare_cohort_inputs: cohort payloads not loaded");
    const auto* sb = mc.find(BranchKind::StructGraph);
    const LambdaMaxMode mode = sb ? sb->lambda_mode : LambdaMaxMode::Fixed;
    const bool vol = mc.find(BranchKind::Volume), fnc = mc.find(BranchKind::FuncGraph), sc = sb != nullptr;
    std::vector<SubjectInput<T>> out;
    out.reserve(c.data.size());
    for (const auto& d : c.data) {
        out.push_back(prepare_input<T>(vol ? cast<T>(d.gm) : Tensor<T>{}, fnc ? cast<T>(d.fnc) : Tensor<T>{},
                                       sc ? cast<T>(d.sc) : Tensor<T>{}, mode));
    }
    return out;
}

/// Forward pass without recording a tape; returns (p_neg, p_pos).
template <class T>
std::pair<double, double> predict(const FusionModel<T>& model, const SubjectInput<T>& in)
{
    ComputeGraph<T> g;
    g.set_track_parameters(false);
    const auto r = model.forward(g, in);
    return {static_cast<double>(r.probs[0]), static_cast<double>(r.probs[1])};
}

template <class T>
struct FoldOutcome {
    FoldReport report;
    FusionModel<T> model;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Train one model on `split.train` and evaluate it on `split.eval` after the final epoch.
template <class T>
FoldOutcome<T> train_fold(const ModelConfig& mc, const TrainConfig& tc, std::size_t fold, const FoldSplit& split,
                          const std::vector<SubjectInput<T>>& inputs, const std::vector<Label>& labels,
                          const std::vector<std::string>& ids, const ProgressFn& progress = {})
{
    for (auto i : split.eval) {
        if (std::binary_search(split.train.begin(), split.train.end(), i)) {
            throw ContractError("train_fold: subject " + ids[i] + " in both train and eval sets");
        }
    }
    FoldOutcome<T> out{{}, FusionModel<T>(mc, derive_seed(tc.seed, "model/fold/" + std::to_string(fold)))};
    FoldReport& rep = out.report;
    FusionModel<T>& model = out.model;
    rep.fold = fold;
    for (auto i : split.train) rep.train_ids.push_back(ids[i]);
    for (auto i : split.eval) rep.eval_ids.push_back(ids[i]);

    std::vector<Label> train_labels;
    for (auto i : split.train) train_labels.push_back(labels[i]);
    rep.weights = class_weights(train_labels);

    Rng rng(derive_seed(tc.seed, "batches/fold/" + std::to_string(fold)));
    AdamState adam;
    std::vector<std::size_t> order = split.train;
    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += tc.batch_size) {
            const std::size_t b1 = std::min(order.size(), b0 + tc.batch_size);
            const T scale = T(1) / static_cast<T>(b1 - b0);
            model.zero_grad();
            for (std::size_t b = b0; b < b1; ++b) {
                const std::size_t i = order[b];
                ComputeGraph<T> g;
                const auto r = model.forward(g, inputs[i]);
                const T w = static_cast<T>(rep.weights.of(labels[i]));
                auto loss = ops::weighted_cross_entropy(g, r.logits, labels[i] == Label::Pos ? 1 : 0, w * scale);
                const double lv = static_cast<double>(loss[0]) / static_cast<double>(scale);
                if (!std::isfinite(lv)) {
                    throw NumericError("fold " + std::to_string(fold) + " epoch " + std::to_string(epoch + 1) +
                                       ": training loss diverged (non-finite) on subject " + ids[i]);
                }
                epoch_loss += lv;
                g.backward(loss);
            }
            adam_step(model.parameters(), adam, tc.lr, tc.weight_decay, tc.beta1, tc.beta2, tc.eps);
        }
        rep.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
        if (progress) {
            progress("fold " + std::to_string(fold) + " epoch " + std::to_string(epoch + 1) + "/" +
                     std::to_string(tc.epochs) + " loss " + std::to_string(rep.epoch_loss.back()));
        }
    }

    std::vector<Label> pred, truth;
    for (auto i : split.eval) {
        const auto [pn, pp] = predict(model, inputs[i]);
        const Label l = pp > pn ? Label::Pos : Label::Neg;
        rep.predictions.push_back({ids[i], labels[i], l, pn, pp});
        pred.push_back(l);
        truth.push_back(labels[i]);
    }
    rep.metrics = metrics(pred, truth);
    return out;
}

/// Worker count: explicit value, else MULTIFUSE_THREADS, else the hardware concurrency.
inline std::size_t resolve_threads(std::size_t requested)
{
    if (requested > 0) return requested;
    if (const char* env = std::getenv("MULTIFUSE_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v > 0) return static_cast<std::size_t>(v);
        } catch (const std::exception&) {
        }
        throw ConfigError(std::string("MULTIFUSE_THREADS must be a positive integer, got '") + env + "'");
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Run `jobs` tasks on up to `threads` workers; the first exception (lowest job index) is rethrown.
inline void parallel_for(std::size_t jobs, std::size_t threads, const std::function<void(std::size_t)>& fn)
{
    threads = std::max<std::size_t>(1, std::min(threads, jobs));
    std::vector<std::exception_ptr> errors(jobs);
    if (threads == 1) {
        for (std::size_t j = 0; j < jobs; ++j) {
            try {
                fn(j);
            } catch (...) {
                errors[j] = std::current_exception();
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&] {
                for (std::size_t j; (j = next++) < jobs;) {
                    try {
                        fn(j);
                    } catch (...) {
                        errors[j] = std::current_exception();
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

template <class T>
struct CvResult {
    std::vector<FoldReport> folds;
    std::vector<FusionModel<T>> models;
    CvSummary summary;
};

/// Stratified k-fold cross-validation, folds trained in parallel.
template <class T>
CvResult<T> train_cv(const Cohort& cohort, const ModelConfig& mc, const TrainConfig& tc, std::size_t threads = 0,
                     const ProgressFn& progress = {})
{
    tc.validate();
    mc.validate();
    const auto labels = cohort.labels();
    std::vector<std::string> ids;
    for (const auto& s : cohort.subjects) ids.push_back(s.id);
    const auto splits = stratified_kfold(labels, tc.folds, tc.seed);
    const auto inputs = prepare_cohort_inputs<T>(cohort, mc);

    std::vector<std::optional<FoldOutcome<T>>> outcomes(tc.folds);
    std::mutex log_mu;
    ProgressFn locked;
    if (progress) {
        locked = [&](const std::string& s) {
            std::lock_guard<std::mutex> lk(log_mu);
            progress(s);
        };
    }
    parallel_for(tc.folds, resolve_threads(threads), [&](std::size_t f) {
        outcomes[f] = train_fold<T>(mc, tc, f, splits[f], inputs, labels, ids, locked);
    });
    CvResult<T> res;
    for (auto& o : outcomes) {
        res.folds.push_back(std::move(o->report));
        res.models.push_back(std::move(o->model));
    }
    res.summary = summarize(res.folds);
    res.folds[res.summary.best_fold].best = true;
    return res;
}

} // namespace multifuse

#endif
