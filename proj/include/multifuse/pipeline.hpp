#ifndef MULTIFUSE_PIPELINE_HPP
#define MULTIFUSE_PIPELINE_HPP

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "multifuse/attribution.hpp"
#include "multifuse/config.hpp"
#include "multifuse/connectomics.hpp"
#include "multifuse/errors.hpp"
#include "multifuse/fusion_model.hpp"
#include "multifuse/mmt1.hpp"
#include "multifuse/stats.hpp"
#include "multifuse/synthcohort.hpp"
#include "multifuse/trainer.hpp"

#ifndef MULTIFUSE_VERSION
#define MULTIFUSE_VERSION "0.1.0"
#endif

namespace multifuse {

namespace fs = std::filesystem;

inline constexpr const char* kToolName = "multifuse";
inline constexpr const char* kToolVersion = MULTIFUSE_VERSION;
inline constexpr const char* kConfigHashScheme = "fnv1a64-v1";

// Reduced schedule for the 32^3 synthetic cohort.
inline constexpr std::size_t kDeskEpochs = 10;
inline constexpr double kDeskLr = 3e-4;

inline const std::vector<std::string>& known_models()
{
    static const std::vector<std::string> names{"multimodal", "volume", "func", "struct"};
    return names;
}

inline ModelConfig model_for(const std::string& name, const ModelConfig& full)
{
    if (name == "multimodal") return full;
    if (name == "volume") return ModelConfig::unimodal(full, BranchKind::Volume);
    if (name == "func") return ModelConfig::unimodal(full, BranchKind::FuncGraph);
    if (name == "struct") return ModelConfig::unimodal(full, BranchKind::StructGraph);
    throw UsageError("unknown model '" + name + "' (expected multimodal, volume, func or struct)");
}

inline std::string config_hash(const std::string& snapshot)
{
    return std::string(kConfigHashScheme) + ":" + fnv1a_hex(std::string(kConfigHashScheme) + "\n" + snapshot);
}

// ---------------------------------------------------------------- files

namespace pipe_detail {

inline void prepare_output_dir(const fs::path& dir, bool force)
{
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw UsageError("output path " + dir.string() + " exists and is not a directory");
        if (!fs::is_empty(dir)) {
            if (!force) throw UsageError("output directory " + dir.string() + " is not empty; pass --force to overwrite");
            fs::remove_all(dir);
        }
    }
    fs::create_directories(dir);
}

inline void prepare_output_file(const fs::path& file, bool force)
{
    if (fs::exists(file) && !force) {
        throw UsageError("output file " + file.string() + " exists; pass --force to overwrite");
    }
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

inline void write_text(const fs::path& p, const std::string& text)
{
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + p.string());
    os << text;
    if (!os) throw IoError("write failed for " + p.string());
}

inline std::string read_text(const fs::path& p)
{
    std::ifstream is(p, std::ios::binary);
    if (!is) throw IoError("cannot read " + p.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

inline json read_json(const fs::path& p)
{
    try {
        return json::parse(read_text(p));
    } catch (const json::exception& e) {
        throw IoError("malformed JSON in " + p.string() + ": " + e.what());
    }
}

/// `target` relative to `base`, both made absolute first.
inline std::string relative_to(const fs::path& target, const fs::path& base)
{
    return fs::absolute(target).lexically_normal().lexically_relative(fs::absolute(base).lexically_normal())
        .generic_string();
}

inline std::string num(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

inline std::string fixed(double v, int digits)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline json run_manifest(const std::string& subcommand, std::uint64_t seed, const std::string& hash, json inputs,
                         json outputs)
{
    return {{"tool", kToolName}, {"version", kToolVersion}, {"subcommand", subcommand}, {"seed", seed},
            {"config_hash", hash}, {"inputs", std::move(inputs)}, {"outputs", std::move(outputs)}};
}

// Wall-clock time lives outside the manifest so manifests stay reproducible.
inline void write_timing(const fs::path& dir, const std::string& subcommand,
                         std::chrono::steady_clock::time_point start)
{
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_json(dir / "timing.json", {{"subcommand", subcommand}, {"seconds", s}});
}

/// Manifest of an upstream stage, with an actionable error when it is missing or of the wrong kind.
inline json stage_manifest(const fs::path& dir, const std::string& stage, const std::string& consumer)
{
    const auto p = dir / "manifest.json";
    if (!fs::exists(p)) {
        throw UsageError(consumer + ": missing upstream stage '" + stage + "': no manifest.json in " + dir.string() +
                         "; run `multifuse " + stage + "` first");
    }
    json m = read_json(p);
    const std::string sub = m.contains("run") ? m["run"].value("subcommand", "") : m.value("subcommand", "");
    if (sub != stage) {
        throw UsageError(consumer + ": " + dir.string() + " holds output of stage '" + sub + "', expected '" + stage +
                         "'");
    }
    if (m.contains("config_hash") && fs::exists(dir / "config.ini")) {
        if (config_hash(read_text(dir / "config.ini")) != m["config_hash"]) {
            throw UsageError(consumer + ": config.ini in " + dir.string() +
                             " does not match its manifest hash; rerun `multifuse " + stage + "`");
        }
    }
    return m;
}

class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> header) { row(header); }
    void row(const std::vector<std::string>& cells)
    {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ',';
            out_ << cells[i];
        }
        out_ << '\n';
    }
    std::string str() const { return out_.str(); }

private:
    std::ostringstream out_;
};

inline std::vector<std::vector<std::string>> read_csv(const fs::path& p)
{
    std::istringstream is(read_text(p));
    std::vector<std::vector<std::string>> rows;
    for (std::string line; std::getline(is, line);) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ls(line);
        for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        rows.push_back(std::move(cells));
    }
    return rows;
}

} // namespace pipe_detail

// ---------------------------------------------------------------- generate

struct GenerateOptions {
    CohortParams params;
    fs::path out;
    bool force = false;
};

inline json cmd_generate(const GenerateOptions& o)
{
    using namespace pipe_detail;
    const auto t0 = std::chrono::steady_clock::now();
    validate_params(o.params);
    prepare_output_dir(o.out, o.force);
    json m = generate_cohort(o.params, o.out);
    json params{{"seed", o.params.seed}, {"n_neg", o.params.n_neg}, {"n_pos", o.params.n_pos},
                {"shape", m["shape"]}, {"n_rois", o.params.n_rois}, {"fnc_nodes", o.params.fnc_nodes},
                {"sc_nodes", o.params.sc_nodes}, {"abeta42_cutoff", o.params.abeta_cutoff},
                {"effect", m["effect"]}};
    m["run"] = run_manifest("generate", o.params.seed, config_hash(params.dump()), json::object(),
                            {{"manifest", "manifest.json"}, {"atlas", "atlas.mmt1"},
                             {"subjects", m["subjects"].size()}});
    write_json(o.out / "manifest.json", m);
    write_timing(o.out, "generate", t0);
    return m;
}

// ---------------------------------------------------------------- train

struct TrainOptions {
    fs::path cohort;
    fs::path out;
    std::optional<fs::path> config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> folds;
    std::optional<std::size_t> epochs;
    std::optional<double> lr;
    std::optional<std::string> precision;
    bool desk_scale = false;
    std::vector<std::string> models{"multimodal"};
    std::size_t threads = 0;
    bool force = false;
    ProgressFn progress;
};

struct TrainSetup {
    ModelConfig model;
    TrainConfig train;
    std::vector<std::string> models;
    std::string snapshot; // config.ini text
};

/// Defaults, then the desk-scale preset, then the config file, then explicit flags.
/// Input dimensions always follow the cohort.
inline TrainSetup resolve_train_setup(const TrainOptions& o, const CohortParams* cohort = nullptr)
{
    TrainConfig tc;
    if (o.desk_scale) {
        tc.epochs = kDeskEpochs;
        tc.lr = kDeskLr;
    }
    Config file;
    if (o.config) {
        if (!fs::exists(*o.config)) throw UsageError("train: config file " + o.config->string() + " not found");
        file = read_config(*o.config);
    }
    ModelConfig mc = model_config_from(file);
    if (cohort) {
        for (auto& b : mc.branches) {
            if (b.kind == BranchKind::Volume) b.input_shape = cohort->shape;
            if (b.kind == BranchKind::FuncGraph) b.n_nodes = cohort->fnc_nodes;
            if (b.kind == BranchKind::StructGraph) b.n_nodes = cohort->sc_nodes;
        }
        mc.validate();
    }
    tc = train_config_from(file, tc);
    if (o.seed) tc.seed = *o.seed;
    if (o.folds) tc.folds = *o.folds;
    if (o.epochs) tc.epochs = *o.epochs;
    if (o.lr) tc.lr = *o.lr;
    if (o.precision) {
        if (*o.precision == "32") tc.precision = Precision::F32;
        else if (*o.precision == "64") tc.precision = Precision::F64;
        else throw UsageError("train: --precision must be 32 or 64");
    }
    tc.validate();

    std::vector<std::string> models = o.models;
    if (auto m = file.get_optional<std::string>("run.models"); m && o.models == TrainOptions{}.models) {
        models.clear();
        std::stringstream ss(*m);
        for (std::string s; std::getline(ss, s, ',');)
            if (!s.empty()) models.push_back(s);
    }
    if (models.empty()) throw UsageError("train: no models requested");
    for (const auto& name : models) (void)model_for(name, mc);

    Config snap;
    std::string joined;
    for (const auto& m : models) joined += (joined.empty() ? "" : ",") + m;
    snap.put("run.models", joined);
    snap.put("run.desk_scale", o.desk_scale ? "true" : "false");
    train_config_to(tc, snap);
    model_config_to(mc, snap);
    return {mc, tc, models, config_text(snap)};
}

template <class T>
json train_and_write(const Cohort& cohort, const ModelConfig& mc, const TrainConfig& tc, const std::string& name,
                     const fs::path& out, std::size_t threads, const ProgressFn& progress)
{
    using namespace pipe_detail;
    ProgressFn tagged;
    if (progress) tagged = [&](const std::string& s) { progress(name + ": " + s); };
    auto res = train_cv<T>(cohort, mc, tc, threads, tagged);
    json fold_files = json::array();
    for (std::size_t f = 0; f < res.folds.size(); ++f) {
        const fs::path rel = fs::path(name) / ("fold_" + std::to_string(f));
        fs::create_directories(out / rel);
        res.folds[f].checkpoint = (rel / "checkpoint").generic_string();
        res.models[f].save(out / rel / "checkpoint");
        write_json(out / rel / "report.json", to_json(res.folds[f]));
        fold_files.push_back((rel / "report.json").generic_string());
    }
    return {{"summary", to_json(res.summary)}, {"folds", fold_files}};
}

inline json cmd_train(const TrainOptions& o)
{
    using namespace pipe_detail;
    const auto t0 = std::chrono::steady_clock::now();
    stage_manifest(o.cohort, "generate", "train");
    const Cohort cohort = load_cohort(o.cohort);
    const TrainSetup setup = resolve_train_setup(o, &cohort.params);
    prepare_output_dir(o.out, o.force);
    write_text(o.out / "config.ini", setup.snapshot);
    const std::string hash = config_hash(setup.snapshot);

    json models = json::object();
    for (const auto& name : setup.models) {
        const ModelConfig mc = model_for(name, setup.model);
        models[name] = setup.train.precision == Precision::F32
                           ? train_and_write<float>(cohort, mc, setup.train, name, o.out, o.threads, o.progress)
                           : train_and_write<double>(cohort, mc, setup.train, name, o.out, o.threads, o.progress);
    }
    write_json(o.out / "summary.json", {{"models", models}});
    const std::string cohort_manifest = read_text(o.cohort / "manifest.json");
    write_json(o.out / "manifest.json",
               run_manifest("train", setup.train.seed, hash,
                            {{"cohort", relative_to(o.cohort, o.out)},
                             {"cohort_manifest_hash", fnv1a_hex(cohort_manifest)}},
                            {{"config", "config.ini"}, {"summary", "summary.json"}, {"models", setup.models}}));
    write_timing(o.out, "train", t0);
    return models;
}

// ---------------------------------------------------------------- upstream loading

struct TrainRun {
    fs::path dir;
    json manifest;
    Config config;
    ModelConfig model;
    TrainConfig train;
    fs::path cohort;
};

inline TrainRun load_train_run(const fs::path& dir, const std::string& consumer)
{
    using namespace pipe_detail;
    TrainRun r;
    r.dir = dir;
    r.manifest = stage_manifest(dir, "train", consumer);
    r.config = read_config(dir / "config.ini");
    r.model = model_config_from(r.config);
    r.train = train_config_from(r.config);
    r.cohort = dir / r.manifest.at("inputs").at("cohort").get<std::string>();
    const auto cm = r.cohort / "manifest.json";
    if (!fs::exists(cm)) {
        throw UsageError(consumer + ": cohort " + r.cohort.string() + " used by run " + dir.string() +
                         " is missing; rerun `multifuse generate`");
    }
    if (fnv1a_hex(read_text(cm)) != r.manifest["inputs"]["cohort_manifest_hash"]) {
        throw UsageError(consumer + ": cohort " + r.cohort.string() + " changed since run " + dir.string() +
                         " was trained; rerun `multifuse train`");
    }
    return r;
}

inline std::vector<FoldReport> load_fold_reports(const TrainRun& run, const std::string& model)
{
    const json summary = pipe_detail::read_json(run.dir / "summary.json");
    if (!summary.at("models").contains(model)) {
        throw UsageError("run " + run.dir.string() + " has no trained model '" + model + "'");
    }
    std::vector<FoldReport> out;
    for (const auto& f : summary["models"][model]["folds"]) {
        out.push_back(fold_report_from_json(pipe_detail::read_json(run.dir / f.get<std::string>())));
    }
    return out;
}

// ---------------------------------------------------------------- explain

struct ExplainOptions {
    fs::path run;
    std::string fold = "best";
    Label target = Label::Pos;
    std::size_t k = 10;
    std::string model = "multimodal";
    std::optional<fs::path> out; // default: <run>/explain
    bool force = false;
};

struct ExplainResult {
    std::size_t fold = 0;
    std::vector<std::string> subjects; // averaged subjects
    std::vector<AttributionMap> mean_maps;
    std::vector<RegionTable> tables;
};

template <class T>
ExplainResult explain_impl(const TrainRun& run, const FoldReport& rep, const ExplainOptions& o, const Cohort& cohort)
{
    ExplainResult res;
    res.fold = rep.fold;
    const auto model = FusionModel<T>::load(run.dir / rep.checkpoint);
    const auto inputs = prepare_cohort_inputs<T>(cohort, model.config());
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < cohort.subjects.size(); ++i) index[cohort.subjects[i].id] = i;

    std::set<std::string> chosen;
    std::vector<std::vector<AttributionMap>> per_modality(model.config().branches.size());
    for (const auto& p : rep.predictions) {
        if (p.label != o.target || p.predicted != o.target) continue;
        chosen.insert(p.id);
        res.subjects.push_back(p.id);
        auto maps = guided_attribution(model, inputs.at(index.at(p.id)), o.target, p.id);
        for (std::size_t b = 0; b < maps.size(); ++b) per_modality[b].push_back(std::move(maps[b]));
    }
    if (chosen.empty()) {
        throw ContractError("explain: fold " + std::to_string(rep.fold) + " has no correctly classified " +
                            to_string(o.target) + " subject");
    }
    for (const auto& maps : per_modality) res.mean_maps.push_back(average_positive_map(maps, chosen));
    for (const auto& m : res.mean_maps) {
        switch (m.modality) {
        case Modality::Volume: res.tables.push_back(roi_aggregate(m, cohort.atlas)); break;
        case Modality::Func: res.tables.push_back(node_table(m, cohort.fnc_names)); break;
        case Modality::Struct: res.tables.push_back(node_table(m, cohort.sc_names)); break;
        }
    }
    percentages(res.tables);
    return res;
}

inline std::string region_csv(const RegionTable& t)
{
    using pipe_detail::num;
    pipe_detail::CsvWriter w({"region", "raw", "weighted", "pct_within", "pct_across", "pct_within_signed"});
    for (const auto& r : t.rows) {
        w.row({r.name, num(r.raw), num(r.weighted), num(r.pct_within), num(r.pct_across), num(r.pct_within_signed)});
    }
    return w.str();
}

inline ExplainResult cmd_explain(const ExplainOptions& o)
{
    using namespace pipe_detail;
    const auto t0 = std::chrono::steady_clock::now();
    const TrainRun run = load_train_run(o.run, "explain");
    const auto reports = load_fold_reports(run, o.model);
    std::size_t fold = 0;
    if (o.fold == "best") {
        fold = summarize(reports).best_fold;
    } else {
        try {
            fold = std::stoul(o.fold);
        } catch (const std::exception&) {
            throw UsageError("explain: --fold must be 'best' or a fold index, got '" + o.fold + "'");
        }
        if (fold >= reports.size()) throw UsageError("explain: fold " + o.fold + " out of range");
    }
    const fs::path out = o.out ? *o.out : o.run / "explain";
    const Cohort cohort = load_cohort(run.cohort);
    ExplainResult res = run.train.precision == Precision::F32
                            ? explain_impl<float>(run, reports[fold], o, cohort)
                            : explain_impl<double>(run, reports[fold], o, cohort);
    prepare_output_dir(out, o.force);

    json topk = json::object();
    json files = json::array();
    fs::create_directories(out / "maps");
    for (std::size_t t = 0; t < res.tables.size(); ++t) {
        const std::string mod = to_string(res.tables[t].modality);
        const auto& map = res.mean_maps[t];
        mmt1::write<double>(out / "maps" / (mod + "_mean.mmt1"), map.shape, map.values);
        write_text(out / ("regions_" + mod + ".csv"), region_csv(res.tables[t]));
        files.push_back("maps/" + mod + "_mean.mmt1");
        files.push_back("regions_" + mod + ".csv");
        const std::size_t k = std::min(o.k, res.tables[t].rows.size());
        json list = json::array();
        std::size_t rank = 1;
        for (auto i : top_k(res.tables[t], k)) {
            const auto& r = res.tables[t].rows[i];
            list.push_back({{"rank", rank++}, {"index", r.index}, {"name", r.name}, {"pct_within", r.pct_within},
                            {"pct_across", r.pct_across}, {"raw", r.raw}, {"weighted", r.weighted}});
        }
        topk[mod] = {{"zero_mass", res.tables[t].zero_mass}, {"top", list}};
    }
    // combined ranking over every region of every modality
    std::vector<std::pair<std::size_t, std::size_t>> all;
    for (std::size_t t = 0; t < res.tables.size(); ++t)
        for (std::size_t i = 0; i < res.tables[t].rows.size(); ++i) all.emplace_back(t, i);
    std::stable_sort(all.begin(), all.end(), [&](auto a, auto b) {
        return res.tables[a.first].rows[a.second].pct_across > res.tables[b.first].rows[b.second].pct_across;
    });
    json across = json::array();
    for (std::size_t j = 0; j < std::min(o.k, all.size()); ++j) {
        const auto& r = res.tables[all[j].first].rows[all[j].second];
        across.push_back({{"rank", j + 1}, {"modality", to_string(res.tables[all[j].first].modality)},
                          {"name", r.name}, {"pct_across", r.pct_across}});
    }
    topk["across"] = across;
    write_json(out / "topk.json", topk);
    files.push_back("topk.json");

    json inputs{{"run", relative_to(o.run, out)}, {"model", o.model}, {"fold", res.fold},
                {"target", to_string(o.target)}, {"k", o.k}, {"subjects", res.subjects}};
    const std::string hash = config_hash(read_text(o.run / "config.ini") + inputs.dump());
    write_json(out / "manifest.json", run_manifest("explain", run.train.seed, hash, inputs, {{"files", files}}));
    write_timing(out, "explain", t0);
    return res;
}

// ---------------------------------------------------------------- stats

struct StatsOptions {
    fs::path run; // explain output, or a train run containing explain/
    double alpha = 0.05;
    std::optional<fs::path> out; // default: <explain>/stats.csv
    bool force = false;
};

struct StatsRow {
    std::string modality, metric, region;
    double percentage = 0;
    TestResult test;
};

inline fs::path locate_explain_dir(const fs::path& p)
{
    if (fs::exists(p / "manifest.json")) {
        const json m = pipe_detail::read_json(p / "manifest.json");
        if (m.value("subcommand", "") == "explain") return p;
        if (m.value("subcommand", "") == "train") {
            if (!fs::exists(p / "explain" / "manifest.json")) {
                throw UsageError("stats: missing upstream stage 'explain' for run " + p.string() +
                                 "; run `multifuse explain --run " + p.string() + "` first");
            }
            return p / "explain";
        }
    }
    pipe_detail::stage_manifest(p, "explain", "stats");
    return p;
}

inline std::vector<StatsRow> cmd_stats(const StatsOptions& o)
{
    using namespace pipe_detail;
    if (!(o.alpha > 0 && o.alpha < 1)) throw UsageError("stats: --alpha must be in (0,1)");
    const fs::path edir = locate_explain_dir(o.run);
    const json em = stage_manifest(edir, "explain", "stats");
    const fs::path rdir = edir / em["inputs"]["run"].get<std::string>();
    const TrainRun run = load_train_run(rdir, "stats");
    const std::string model = em["inputs"]["model"];
    const auto reports = load_fold_reports(run, model);
    const Cohort cohort = load_cohort(run.cohort);
    const json topk = read_json(edir / "topk.json");

    // every correctly classified subject, each evaluated once across the folds
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < cohort.subjects.size(); ++i) index[cohort.subjects[i].id] = i;
    std::vector<std::size_t> subj;
    std::vector<bool> is_pos;
    for (const auto& rep : reports)
        for (const auto& p : rep.predictions)
            if (p.predicted == p.label) {
                subj.push_back(index.at(p.id));
                is_pos.push_back(p.label == Label::Pos);
            }

    std::vector<StatsRow> rows;
    auto family = [&](const std::string& mod, const std::string& metric, auto feature_of) {
        if (!topk.contains(mod)) return;
        std::vector<Feature> feats;
        std::vector<double> pct;
        for (const auto& t : topk[mod]["top"]) {
            const std::size_t r = t["index"];
            Feature f{t["name"], {}};
            for (auto i : subj) f.values.push_back(feature_of(i, r));
            feats.push_back(std::move(f));
            pct.push_back(t["pct_within"]);
        }
        const auto res = group_compare(feats, is_pos, o.alpha);
        for (std::size_t j = 0; j < res.size(); ++j) rows.push_back({mod, metric, res[j].name, pct[j], res[j]});
    };
    std::map<std::size_t, std::vector<double>> gm_cache, str_cache, abs_cache, bc_cache;
    auto cached = [](auto& cache, std::size_t i, auto compute) -> const std::vector<double>& {
        auto it = cache.find(i);
        if (it == cache.end()) it = cache.emplace(i, compute()).first;
        return it->second;
    };
    family("volume", "gm_mean", [&](std::size_t i, std::size_t r) {
        return cached(gm_cache, i, [&] { return roi_means(cohort.data[i].gm, cohort.atlas); })[r];
    });
    family("func", "strength", [&](std::size_t i, std::size_t r) {
        return cached(str_cache, i, [&] { return node_strength(cohort.data[i].fnc); })[r];
    });
    family("func", "strength_abs", [&](std::size_t i, std::size_t r) {
        return cached(abs_cache, i, [&] { return node_strength(cohort.data[i].fnc, true); })[r];
    });
    family("struct", "betweenness", [&](std::size_t i, std::size_t r) {
        return cached(bc_cache, i, [&] { return betweenness(cohort.data[i].sc); })[r];
    });

    const fs::path out = o.out ? *o.out : edir / "stats.csv";
    prepare_output_file(out, o.force || !o.out);
    CsvWriter w({"modality", "metric", "region", "percentage", "u", "p", "p_fdr", "direction", "n_neg", "n_pos"});
    for (const auto& r : rows) {
        w.row({r.modality, r.metric, r.region, num(r.percentage), num(r.test.u), num(r.test.p), num(r.test.p_fdr),
               r.test.direction, std::to_string(r.test.n_neg), std::to_string(r.test.n_pos)});
    }
    write_text(out, w.str());
    return rows;
}

// ---------------------------------------------------------------- metrics

struct MetricsOptions {
    fs::path cohort;
    MetricKind metric = MetricKind::Strength;
    std::vector<std::string> nodes; // names or 0-based indices; empty = all
    bool absolute = false;
    fs::path out;
    bool force = false;
};

inline std::string cmd_metrics(const MetricsOptions& o)
{
    using namespace pipe_detail;
    pipe_detail::stage_manifest(o.cohort, "generate", "metrics");
    const Cohort c = load_cohort(o.cohort);
    const auto& names = o.metric == MetricKind::Strength ? c.fnc_names : c.sc_names;
    std::vector<std::size_t> nodes;
    for (const auto& s : o.nodes) {
        auto it = std::find(names.begin(), names.end(), s);
        if (it != names.end()) {
            nodes.push_back(static_cast<std::size_t>(it - names.begin()));
            continue;
        }
        try {
            std::size_t used = 0;
            const auto v = std::stoul(s, &used);
            if (used != s.size() || v >= names.size()) throw std::out_of_range(s);
            nodes.push_back(v);
        } catch (const std::exception&) {
            throw UsageError("metrics: unknown node '" + s + "'");
        }
    }
    if (o.nodes.empty())
        for (std::size_t i = 0; i < names.size(); ++i) nodes.push_back(i);

    std::vector<std::string> header{"id", "label"};
    for (auto n : nodes) header.push_back(names[n]);
    CsvWriter w(header);
    for (std::size_t i = 0; i < c.subjects.size(); ++i) {
        const auto v = o.metric == MetricKind::Strength ? node_strength(c.data[i].fnc, o.absolute)
                                                           : betweenness(c.data[i].sc);
        std::vector<std::string> row{c.subjects[i].id, to_string(c.subjects[i].label)};
        for (auto n : nodes) row.push_back(num(v[n]));
        w.row(row);
    }
    prepare_output_file(o.out, o.force);
    write_text(o.out, w.str());
    return w.str();
}

// ---------------------------------------------------------------- report

struct ReportOptions {
    fs::path run;
    std::optional<fs::path> stats; // default: <run>/explain/stats.csv when present
    fs::path out;
    bool force = false;
};

struct ReportFiles {
    std::string metrics_csv, regions_csv, text;
};

/// Table-style summaries from fold reports and a stats CSV; pure function of its inputs.
inline ReportFiles render_report(const json& summary, const std::vector<std::vector<std::string>>& stats)
{
    using pipe_detail::fixed;
    ReportFiles f;
    pipe_detail::CsvWriter m({"model", "acc_mean", "acc_std", "pre_mean", "pre_std", "rec_mean", "rec_std",
                              "f1_mean", "f1_std", "best_fold"});
    std::ostringstream txt;
    txt << "Classification performance (mean +- std over folds)\n";
    txt << "model        ACC             PRE             REC             F1\n";
    std::vector<std::string> order;
    for (const auto& name : known_models())
        if (summary.at("models").contains(name)) order.push_back(name);
    for (const auto& [name, _] : summary.at("models").items())
        if (std::find(order.begin(), order.end(), name) == order.end()) order.push_back(name);
    for (const auto& name : order) {
        const auto& s = summary["models"][name]["summary"];
        auto ms = [&](const char* k) { return std::pair{s[k]["mean"].get<double>(), s[k]["std"].get<double>()}; };
        const auto a = ms("accuracy"), p = ms("precision"), r = ms("recall"), f1 = ms("f1");
        m.row({name, fixed(a.first, 3), fixed(a.second, 3), fixed(p.first, 3), fixed(p.second, 3),
               fixed(r.first, 3), fixed(r.second, 3), fixed(f1.first, 3), fixed(f1.second, 3),
               std::to_string(s["best_fold"].get<std::size_t>())});
        char line[160];
        std::snprintf(line, sizeof line, "%-12s %.3f+-%.3f    %.3f+-%.3f    %.3f+-%.3f    %.3f+-%.3f\n", name.c_str(),
                      a.first, a.second, p.first, p.second, r.first, r.second, f1.first, f1.second);
        txt << line;
    }
    f.metrics_csv = m.str();

    pipe_detail::CsvWriter g({"modality", "metric", "rank", "region", "percentage", "p", "p_fdr", "direction"});
    std::string current;
    std::size_t rank = 0;
    for (std::size_t i = 1; i < stats.size(); ++i) {
        const auto& row = stats[i];
        if (row.size() < 8) throw IoError("report: malformed stats row " + std::to_string(i));
        const std::string key = row[0] + "/" + row[1];
        if (key != current) {
            current = key;
            rank = 0;
            txt << "\nTop regions: " << row[0] << " (" << row[1] << ")\n";
            txt << "rank region                 pct      p          p_fdr      direction\n";
        }
        ++rank;
        const double pct = std::stod(row[3]), p = std::stod(row[5]), q = std::stod(row[6]);
        char ps[32], qs[32];
        std::snprintf(ps, sizeof ps, "%.3g", p);
        std::snprintf(qs, sizeof qs, "%.3g", q);
        g.row({row[0], row[1], std::to_string(rank), row[2], fixed(pct, 2), ps, qs, row[7]});
        char line[200];
        std::snprintf(line, sizeof line, "%-4zu %-22s %6.2f%%  %-10s %-10s %s\n", rank, row[2].c_str(), pct, ps, qs,
                      row[7].c_str());
        txt << line;
    }
    f.regions_csv = g.str();
    f.text = txt.str();
    return f;
}

inline ReportFiles cmd_report(const ReportOptions& o)
{
    using namespace pipe_detail;
    const auto t0 = std::chrono::steady_clock::now();
    const json rm = stage_manifest(o.run, "train", "report");
    const json summary = read_json(o.run / "summary.json");
    std::vector<std::vector<std::string>> stats;
    std::optional<fs::path> sp = o.stats;
    if (!sp && fs::exists(o.run / "explain" / "stats.csv")) sp = o.run / "explain" / "stats.csv";
    if (sp) {
        if (!fs::exists(*sp)) {
            throw UsageError("report: missing upstream stage 'stats': " + sp->string() + " not found; run `multifuse stats` first");
        }
        stats = read_csv(*sp);
    }
    const ReportFiles f = render_report(summary, stats);
    prepare_output_dir(o.out, o.force);
    write_text(o.out / "metrics.csv", f.metrics_csv);
    write_text(o.out / "regions.csv", f.regions_csv);
    write_text(o.out / "report.txt", f.text);
    json inputs{{"run", relative_to(o.run, o.out)}};
    if (sp) inputs["stats"] = relative_to(*sp, o.out);
    write_json(o.out / "manifest.json",
               run_manifest("report", rm.value("seed", std::uint64_t{0}), rm.value("config_hash", ""), inputs,
                            {{"files", {"metrics.csv", "regions.csv", "report.txt"}}}));
    write_timing(o.out, "report", t0);
    return f;
}

} // namespace multifuse

#endif
