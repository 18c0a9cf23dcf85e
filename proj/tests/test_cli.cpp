#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>

#include <gtest/gtest.h>

#include "multifuse/pipeline.hpp"

using namespace multifuse;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string out;
};

Run run_cli(const std::string& args, const std::string& env = {})
{
    const std::string cmd = env + (env.empty() ? "" : " ") + MULTIFUSE_CLI_PATH + " " + args + " 2>&1";
    Run r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    for (std::size_t n; (n = fread(buf, 1, sizeof buf, p)) > 0;) r.out.append(buf, n);
    const int st = pclose(p);
    r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
}

std::string slurp(const fs::path& p)
{
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

fs::path scratch(const std::string& name)
{
    const auto p = fs::temp_directory_path() / ("multifuse_cli_" + name);
    fs::remove_all(p);
    return p;
}

std::map<std::string, std::string> tree(const fs::path& root)
{
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file() || e.path().filename() == "timing.json") continue;
        files[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
    }
    return files;
}

// Names of files that differ or exist on one side only.
std::vector<std::string> tree_diff(const std::map<std::string, std::string>& a,
                                   const std::map<std::string, std::string>& b)
{
    std::vector<std::string> out;
    for (const auto& [k, v] : a) {
        auto it = b.find(k);
        if (it == b.end() || it->second != v) out.push_back(k);
    }
    for (const auto& [k, v] : b)
        if (!a.count(k)) out.push_back(k);
    return out;
}

GenerateOptions small_cohort(const fs::path& out, std::uint64_t seed = 3)
{
    GenerateOptions g;
    g.params.seed = seed;
    g.params.n_neg = 20;
    g.params.n_pos = 15;
    g.params.shape = {16, 16, 16};
    g.out = out;
    return g;
}

TrainOptions quick_train(const fs::path& cohort, const fs::path& out)
{
    TrainOptions t;
    t.cohort = cohort;
    t.out = out;
    t.folds = 3;
    t.epochs = 8;
    t.lr = 1e-3;
    t.models = {"multimodal", "func"};
    t.threads = 1;
    return t;
}

} // namespace

TEST(Report, GoldenFixtureIsByteExact)
{
    const fs::path data = MULTIFUSE_TEST_DATA;
    const auto summary = json::parse(slurp(data / "report/summary.json"));
    const auto stats = pipe_detail::read_csv(data / "report/stats.csv");
    const auto f = render_report(summary, stats);
    EXPECT_EQ(f.metrics_csv, slurp(data / "report/expected/metrics.csv"));
    EXPECT_EQ(f.regions_csv, slurp(data / "report/expected/regions.csv"));
    EXPECT_EQ(f.text, slurp(data / "report/expected/report.txt"));
}

TEST(Cli, InvalidFlagPrintsUsageAndFails)
{
    const auto r = run_cli("train --bogus");
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.out.find("Usage"), std::string::npos) << r.out;
    const auto none = run_cli("");
    EXPECT_NE(none.code, 0);
    EXPECT_EQ(run_cli("--version").code, 0);
    EXPECT_NE(run_cli("--version").out.find(kToolVersion), std::string::npos);
}

TEST(Cli, GenerateTwiceIsByteIdenticalAndEchoesCounts)
{
    const auto a = scratch("gen_a"), b = scratch("gen_b");
    const std::string common = " --seed 7 --n-neg 20 --n-pos 15 --shape 16";
    ASSERT_EQ(run_cli("generate --out " + a.string() + common).code, 0);
    ASSERT_EQ(run_cli("generate --out " + b.string() + common).code, 0);
    EXPECT_EQ(tree_diff(tree(a), tree(b)), std::vector<std::string>{});
    const auto m = json::parse(slurp(a / "manifest.json"));
    EXPECT_EQ(m["counts"]["NEG"], 20);
    EXPECT_EQ(m["counts"]["POS"], 15);
    EXPECT_EQ(m["run"]["subcommand"], "generate");

    const auto again = run_cli("generate --out " + a.string() + common);
    EXPECT_EQ(again.code, 2);
    EXPECT_NE(again.out.find("--force"), std::string::npos) << again.out;
    EXPECT_EQ(run_cli("generate --force --out " + a.string() + common).code, 0);
    EXPECT_EQ(tree_diff(tree(a), tree(b)), std::vector<std::string>{});
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Cli, MissingUpstreamStagesAreNamed)
{
    const auto empty = scratch("empty");
    fs::create_directories(empty);
    const auto t = run_cli("train --cohort " + empty.string() + " --out " + (empty / "run").string());
    EXPECT_EQ(t.code, 2);
    EXPECT_NE(t.out.find("missing upstream stage 'generate'"), std::string::npos) << t.out;
    const auto e = run_cli("explain --run " + empty.string());
    EXPECT_EQ(e.code, 2);
    EXPECT_NE(e.out.find("missing upstream stage 'train'"), std::string::npos) << e.out;
    const auto r = run_cli("report --run " + empty.string() + " --out " + (empty / "rep").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("'train'"), std::string::npos) << r.out;

    const auto coh = scratch("coh_only");
    cmd_generate(small_cohort(coh));
    const auto wrong = run_cli("explain --run " + coh.string());
    EXPECT_EQ(wrong.code, 2);
    EXPECT_NE(wrong.out.find("expected 'train'"), std::string::npos) << wrong.out;
    fs::remove_all(empty);
    fs::remove_all(coh);
}

TEST(Cli, BadThreadEnvironmentIsReported)
{
    const auto coh = scratch("threads");
    cmd_generate(small_cohort(coh));
    const auto r = run_cli("train --quiet --epochs 1 --folds 2 --models func --cohort " + coh.string() + " --out " +
                               (coh / "run").string(),
                           "MULTIFUSE_THREADS=lots");
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.out.find("MULTIFUSE_THREADS"), std::string::npos) << r.out;
    fs::remove_all(coh);
}

TEST(Pipeline, EndToEndIsIdempotentAndConsistent)
{
    const auto root = scratch("pipe");
    const auto coh = root / "cohort", run = root / "run", rep = root / "report";
    cmd_generate(small_cohort(coh));
    auto t = quick_train(coh, run);
    const auto summary = cmd_train(t);
    EXPECT_TRUE(summary.contains("multimodal"));
    EXPECT_TRUE(summary.contains("func"));

    const auto rm = json::parse(slurp(run / "manifest.json"));
    EXPECT_EQ(rm["subcommand"], "train");
    EXPECT_EQ(rm["tool"], kToolName);
    EXPECT_EQ(rm["config_hash"], config_hash(slurp(run / "config.ini")));
    EXPECT_EQ(rm["inputs"]["cohort"], "../cohort");

    for (std::size_t f = 0; f < 3; ++f) {
        const auto rep_f = fold_report_from_json(
            json::parse(slurp(run / "multimodal" / ("fold_" + std::to_string(f)) / "report.json")));
        EXPECT_EQ(rep_f.epoch_loss.size(), 8u);
        EXPECT_EQ(rep_f.predictions.size(), rep_f.eval_ids.size());
        EXPECT_TRUE(fs::exists(run / rep_f.checkpoint / "manifest.txt")) << rep_f.checkpoint;
    }

    ExplainOptions e;
    e.run = run;
    const auto ex = cmd_explain(e);
    EXPECT_FALSE(ex.subjects.empty());
    const auto topk = json::parse(slurp(run / "explain" / "topk.json"));
    EXPECT_EQ(topk["volume"]["top"].size(), 10u);
    const auto vol = pipe_detail::read_csv(run / "explain" / "regions_volume.csv");
    ASSERT_EQ(vol.size(), 57u);
    EXPECT_EQ(vol[0][0], "region");
    double pct = 0;
    for (std::size_t i = 1; i < vol.size(); ++i) pct += std::stod(vol[i][3]);
    EXPECT_NEAR(pct, 100.0, 1e-6);

    StatsOptions s;
    s.run = run;
    const auto rows = cmd_stats(s);
    EXPECT_EQ(rows.size(), 40u);
    ReportOptions r;
    r.run = run;
    r.out = rep;
    const auto text = cmd_report(r).text;
    EXPECT_NE(text.find("Top regions: struct (betweenness)"), std::string::npos);

    const auto first = tree(root);
    // stale stage: editing the config snapshot breaks the manifest hash
    {
        std::ofstream os(run / "config.ini", std::ios::app);
        os << "# edited\n";
    }
    ReportOptions again = r;
    again.force = true;
    EXPECT_THROW(cmd_report(again), UsageError);

    // identical inputs with --force reproduce every artifact byte for byte
    t.force = true;
    cmd_train(t);
    e.force = true;
    cmd_explain(e);
    s.force = true;
    cmd_stats(s);
    cmd_report(again);
    EXPECT_EQ(tree_diff(tree(root), first), std::vector<std::string>{});
    fs::remove_all(root);
}

TEST(Pipeline, MetricsMatchConnectomics)
{
    const auto coh = scratch("metrics");
    cmd_generate(small_cohort(coh));
    const auto c = load_cohort(coh);
    MetricsOptions m;
    m.cohort = coh;
    m.nodes = {"IC31", "7"};
    m.out = coh / "strength.csv";
    cmd_metrics(m);
    const auto rows = pipe_detail::read_csv(m.out);
    ASSERT_EQ(rows.size(), 36u);
    EXPECT_EQ(rows[0], (std::vector<std::string>{"id", "label", "IC31", c.fnc_names[7]}));
    const auto s = node_strength(c.data[4].fnc);
    EXPECT_NEAR(std::stod(rows[5][2]), s[30], 1e-8);
    EXPECT_NEAR(std::stod(rows[5][3]), s[7], 1e-8);
    EXPECT_EQ(rows[5][1], to_string(c.subjects[4].label));
    EXPECT_THROW(cmd_metrics(m), UsageError);
    m.nodes = {"IC99"};
    m.force = true;
    EXPECT_THROW(cmd_metrics(m), UsageError);
    fs::remove_all(coh);
}
