#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "multifuse/pipeline.hpp"

using namespace multifuse;

namespace {

Dims3 parse_shape(const std::string& s)
{
    auto v = parse_size_list(s, "--shape");
    if (v.size() == 1) return {v[0], v[0], v[0]};
    if (v.size() == 3) return {v[0], v[1], v[2]};
    throw UsageError("--shape takes N or D,H,W");
}

std::vector<std::string> split(const std::string& s)
{
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

void log_line(const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); }

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Multimodal fusion classifier pipeline on synthetic neuroimaging cohorts"};
    app.set_version_flag("--version", std::string(kToolVersion));
    app.require_subcommand(1);
    app.fallthrough();
    app.failure_message(CLI::FailureMessage::help);
    std::size_t threads = 0;
    app.add_option("--threads", threads, "worker threads (default: MULTIFUSE_THREADS, then all cores)");

    // generate
    auto* gen = app.add_subcommand("generate", "write a synthetic cohort");
    GenerateOptions g;
    std::string shape = "32";
    double effect = -1;
    bool no_effect = false;
    gen->add_option("--seed", g.params.seed, "generator seed")->default_val(0);
    gen->add_option("--out", g.out, "cohort directory")->required();
    gen->add_option("--n-neg", g.params.n_neg, "NEG subjects")->default_val(185);
    gen->add_option("--n-pos", g.params.n_pos, "POS subjects")->default_val(133);
    gen->add_option("--shape", shape, "volume shape N or D,H,W")->default_val("32");
    gen->add_option("--effect-size", effect, "planted effect size d for every modality");
    gen->add_flag("--no-effect", no_effect, "generate without planted effects");
    gen->add_flag("--force", g.force, "overwrite a non-empty output directory");

    // train
    auto* tr = app.add_subcommand("train", "stratified k-fold training");
    TrainOptions t;
    std::string models = "multimodal";
    std::string cfg_path;
    std::uint64_t seed = 0;
    std::size_t folds = 0, epochs = 0;
    double lr = 0;
    std::string precision;
    tr->add_option("--cohort", t.cohort, "cohort directory")->required();
    tr->add_option("--config", cfg_path, "INI config file");
    tr->add_option("--out", t.out, "run directory")->required();
    auto* seed_opt = tr->add_option("--seed", seed, "training seed");
    auto* folds_opt = tr->add_option("--folds", folds, "number of folds");
    auto* epochs_opt = tr->add_option("--epochs", epochs, "epochs per fold");
    auto* lr_opt = tr->add_option("--lr", lr, "Adam learning rate");
    tr->add_option("--precision", precision, "32 or 64")->check(CLI::IsMember({"32", "64"}));
    tr->add_option("--models", models, "comma list of multimodal,volume,func,struct");
    tr->add_flag("--desk-scale", t.desk_scale, "reduced epoch schedule for 32^3 cohorts");
    tr->add_flag("--force", t.force, "overwrite a non-empty run directory");
    bool quiet = false;
    tr->add_flag("--quiet", quiet, "no per-epoch progress");

    // explain
    auto* ex = app.add_subcommand("explain", "guided-backprop attribution on the best fold");
    ExplainOptions e;
    std::string cls = "pos", ex_out;
    ex->add_option("--run", e.run, "run directory")->required();
    ex->add_option("--fold", e.fold, "'best' or a fold index")->default_val("best");
    ex->add_option("--class", cls, "target class")->check(CLI::IsMember({"pos", "neg", "POS", "NEG"}));
    ex->add_option("--k", e.k, "top-k regions")->default_val(10);
    ex->add_option("--model", e.model, "trained model to explain")->default_val("multimodal");
    ex->add_option("--out", ex_out, "output directory (default <run>/explain)");
    ex->add_flag("--force", e.force, "overwrite a non-empty output directory");

    // stats
    auto* st = app.add_subcommand("stats", "Mann-Whitney tests on the top-k regions");
    StatsOptions s;
    std::string st_out;
    st->add_option("--run", s.run, "explain output or run directory")->required();
    st->add_option("--alpha", s.alpha, "FDR level")->default_val(0.05);
    st->add_option("--out", st_out, "CSV path (default <explain>/stats.csv)");
    st->add_flag("--force", s.force, "overwrite an existing CSV");

    // metrics
    auto* me = app.add_subcommand("metrics", "per-subject graph metrics");
    MetricsOptions m;
    std::string metric = "strength", nodes;
    me->add_option("--cohort", m.cohort, "cohort directory")->required();
    me->add_option("--metric", metric, "strength or betweenness")->check(CLI::IsMember({"strength", "betweenness"}));
    me->add_option("--nodes", nodes, "comma list of node names or indices (default all)");
    me->add_flag("--absolute", m.absolute, "absolute-weight strength");
    me->add_option("--out", m.out, "CSV path")->required();
    me->add_flag("--force", m.force, "overwrite an existing CSV");

    // report
    auto* re = app.add_subcommand("report", "metrics and region tables");
    ReportOptions r;
    std::string re_stats;
    re->add_option("--run", r.run, "run directory")->required();
    re->add_option("--stats", re_stats, "stats CSV (default <run>/explain/stats.csv)");
    re->add_option("--out", r.out, "report directory")->required();
    re->add_flag("--force", r.force, "overwrite a non-empty output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        return app.exit(err);
    }

    try {
        if (*gen) {
            g.params.shape = parse_shape(shape);
            if (no_effect) g.params.effect = EffectSpec::none();
            if (effect >= 0) g.params.effect.gm_delta = g.params.effect.fnc_delta = g.params.effect.sc_delta = effect;
            const auto man = cmd_generate(g);
            std::cout << "generated " << man["subjects"].size() << " subjects in " << g.out.string() << "\n";
        } else if (*tr) {
            if (!cfg_path.empty()) t.config = cfg_path;
            if (*seed_opt) t.seed = seed;
            if (*folds_opt) t.folds = folds;
            if (*epochs_opt) t.epochs = epochs;
            if (*lr_opt) t.lr = lr;
            if (!precision.empty()) t.precision = precision;
            t.models = split(models);
            t.threads = threads;
            if (!quiet) t.progress = log_line;
            const auto res = cmd_train(t);
            for (const auto& [name, v] : res.items()) {
                std::printf("%-12s accuracy %.3f +- %.3f  (best fold %zu)\n", name.c_str(),
                            v["summary"]["accuracy"]["mean"].get<double>(), v["summary"]["accuracy"]["std"].get<double>(),
                            v["summary"]["best_fold"].get<std::size_t>());
            }
        } else if (*ex) {
            e.target = cls == "pos" || cls == "POS" ? Label::Pos : Label::Neg;
            if (!ex_out.empty()) e.out = ex_out;
            const auto res = cmd_explain(e);
            std::cout << "explained fold " << res.fold << " over " << res.subjects.size() << " subjects\n";
        } else if (*st) {
            if (!st_out.empty()) s.out = st_out;
            const auto rows = cmd_stats(s);
            std::size_t sig = 0;
            for (const auto& row : rows) sig += row.test.direction != "n.s.";
            std::cout << rows.size() << " tests, " << sig << " significant\n";
        } else if (*me) {
            m.metric = metric == "strength" ? MetricKind::Strength : MetricKind::Betweenness;
            m.nodes = split(nodes);
            cmd_metrics(m);
            std::cout << "wrote " << m.out.string() << "\n";
        } else if (*re) {
            if (!re_stats.empty()) r.stats = re_stats;
            std::cout << cmd_report(r).text;
        }
    } catch (const UsageError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 2;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    }
    return 0;
}
