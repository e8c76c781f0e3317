#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <sys/wait.h>

#include "agnn/cli.hpp"
#include "test_util.hpp"

using namespace agnn;
using agnn::testing::TempDir;
using json = nlohmann::json;

namespace {

// N=3, K=1, d=8, 50 episodes.
json tiny_doc() {
    return json::parse(R"({
      "seed": 11,
      "dataset": {"source": "synthetic",
                  "synthetic": {"train_classes": 6, "test_classes": 4, "per_class": 8, "dim": 8}},
      "model": {"layers": 2, "hidden_m": 4},
      "train": {"batch_tasks": 5, "total_episodes": 50, "eval_interval": 25, "eval_episodes": 6,
                "ways": 3, "shots": 1, "queries_per_class": 2, "lr_halving_interval": 20},
      "analysis": {"tasks": 3, "epsilon": 0.5}
    })");
}

RunConfig tiny_config() { return parse_run_config(tiny_doc()); }

std::string config_error_key(const json& doc) {
    try {
        parse_run_config(doc);
    } catch (const ConfigError& e) {
        return e.key();
    }
    return "";
}

std::vector<json> read_jsonl(const std::string& path) {
    std::vector<json> out;
    std::istringstream in(io::read_file(path));
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(json::parse(line));
    return out;
}

struct Run {
    int status;
    std::string out, err;
};

template <typename F>
Run capture(F&& f) {
    std::ostringstream out, err;
    const int status = f(out, err);
    return {status, out.str(), err.str()};
}

int run_binary(const std::string& args) {
    const std::string cmd = std::string(AGNN_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int raw = std::system(cmd.c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

}  // namespace

// ---- config document ----------------------------------------------------------

TEST(RunConfig, CanonicalRoundTrip) {
    const auto cfg = tiny_config();
    const auto text = canonical_text(cfg);
    EXPECT_EQ(canonical_text(parse_run_config_text(text)), text);
    // A fully specified document re-serializes to itself.
    EXPECT_EQ(to_json(parse_run_config(json::parse(text))), json::parse(text));
}

TEST(RunConfig, CsvSourceRoundTrip) {
    auto doc = tiny_doc();
    doc["dataset"] = {{"source", "csv"}, {"train_path", "a.csv"}, {"test_path", "b.csv"}};
    const auto text = canonical_text(parse_run_config(doc));
    EXPECT_EQ(canonical_text(parse_run_config_text(text)), text);
    EXPECT_NE(text.find("\"train_path\": \"a.csv\""), std::string::npos);
}

TEST(RunConfig, DefaultsMatchLibrary) {
    const auto cfg = parse_run_config(json::parse(R"({"dataset": {"source": "synthetic"}})"));
    EXPECT_EQ(cfg.model.alpha, 0.5);
    EXPECT_EQ(cfg.model.beta, 0.7);
    EXPECT_EQ(cfg.model.layers, 3u);
    EXPECT_EQ(cfg.train.learning_rate, 1e-3);
    EXPECT_EQ(cfg.train.weight_decay, 1e-6);
    EXPECT_EQ(cfg.analysis_rank(), 5u);
}

TEST(RunConfig, ExplicitMlpWidths) {
    auto doc = tiny_doc();
    doc["model"]["mlp_widths"] = {6, 1};
    const auto cfg = parse_run_config(doc);
    EXPECT_EQ(cfg.model.mlp_widths, (std::vector<std::size_t>{6, 1}));
    EXPECT_EQ(to_json(cfg)["model"]["mlp_widths"], json({6, 1}));
}

TEST(RunConfig, ErrorsNameTheKey) {
    auto doc = tiny_doc();
    doc["model"]["colour"] = 1;
    EXPECT_EQ(config_error_key(doc), "model.colour");
    doc = tiny_doc();
    doc["extra"] = true;
    EXPECT_EQ(config_error_key(doc), "extra");
    doc = tiny_doc();
    doc["dataset"]["synthetic"]["within_sigma"] = 0;
    EXPECT_EQ(config_error_key(doc), "dataset.synthetic.within_sigma");
    doc = tiny_doc();
    doc.erase("dataset");
    EXPECT_EQ(config_error_key(doc), "dataset");
    doc = tiny_doc();
    doc["dataset"].erase("source");
    EXPECT_EQ(config_error_key(doc), "dataset.source");
    doc = tiny_doc();
    doc["train"]["setting"] = "semi";
    EXPECT_EQ(config_error_key(doc), "train.setting");
    doc = tiny_doc();
    doc["train"]["batch_tasks"] = -3;
    EXPECT_EQ(config_error_key(doc), "train.batch_tasks");
    doc = tiny_doc();
    doc["model"]["beta"] = "high";
    EXPECT_EQ(config_error_key(doc), "model.beta");
    doc = tiny_doc();
    doc["dataset"] = {{"source", "csv"}, {"train_path", "a.csv"}};
    EXPECT_EQ(config_error_key(doc), "dataset.test_path");
    EXPECT_THROW(parse_run_config_text("{not json"), ConfigError);
}

TEST(RunConfig, SeedOverride) {
    TempDir dir("cli");
    io::write_file(dir.file("c.json"), tiny_doc().dump());
    const auto cfg = cli::load_run_config(dir.file("c.json"), 99);
    EXPECT_EQ(cfg.seed, 99u);
    EXPECT_EQ(cfg.train.seed, 99u);
    EXPECT_THROW(cli::load_run_config(dir.file("absent.json"), std::nullopt), ConfigError);
}

// ---- gen-data -------------------------------------------------------------------

TEST(GenData, WritesCsvWithHeaderAndIdenticalBytes) {
    TempDir a("cli"), b("cli");
    const auto cfg = tiny_config();
    ASSERT_EQ(capture([&](auto& o, auto& e) { return cli::cmd_gen_data(cfg, a.path().string(), o, e); }).status, 0);
    ASSERT_EQ(capture([&](auto& o, auto& e) { return cli::cmd_gen_data(cfg, b.path().string(), o, e); }).status, 0);
    const auto train = io::read_file(a.file("train.csv"));
    EXPECT_EQ(train.rfind("label,f0,f1,f2,f3,f4,f5,f6,f7\n", 0), 0u);
    EXPECT_EQ(train, io::read_file(b.file("train.csv")));
    EXPECT_EQ(io::read_file(a.file("test.csv")), io::read_file(b.file("test.csv")));
    EXPECT_EQ(load_features_csv(a.file("train.csv")).num_classes(), 6u);
    EXPECT_EQ(load_features_csv(a.file("test.csv")).num_classes(), 4u);
}

TEST(GenData, InvalidSigmaExitsTwoNamingTheKey) {
    TempDir dir("cli");
    auto doc = tiny_doc();
    doc["dataset"]["synthetic"]["between_sigma"] = -1.0;
    io::write_file(dir.file("c.json"), doc.dump());
    EXPECT_EQ(run_binary("gen-data --config " + dir.file("c.json") + " --out " + dir.file("out")), 2);
    const auto r = capture([&](std::ostream&, std::ostream& e) {
        return cli::guarded(e, [&] { return cli::cmd_gen_data(cli::load_run_config(dir.file("c.json"), {}),
                                                              dir.file("out"), std::cout, e); });
    });
    EXPECT_EQ(r.status, 2);
    EXPECT_NE(r.err.find("dataset.synthetic.between_sigma"), std::string::npos);
}

// ---- train / eval -----------------------------------------------------------------

TEST(Train, TinyRunIsFastAndDeterministic) {
    TempDir a("cli"), b("cli");
    const auto cfg = tiny_config();
    const auto start = std::chrono::steady_clock::now();
    ASSERT_EQ(capture([&](auto& o, auto& e) { return cli::cmd_train(cfg, a.path().string(), o, e); }).status, 0);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    EXPECT_LT(seconds, 30.0);
    ASSERT_EQ(capture([&](auto& o, auto& e) { return cli::cmd_train(cfg, b.path().string(), o, e); }).status, 0);
    EXPECT_EQ(io::read_file(a.file("metrics.jsonl")), io::read_file(b.file("metrics.jsonl")));
    EXPECT_EQ(io::read_file(a.file("checkpoint.json")), io::read_file(b.file("checkpoint.json")));
    EXPECT_EQ(io::read_file(a.file("config.json")), canonical_text(cfg));
    const auto log = read_jsonl(a.file("metrics.jsonl"));
    ASSERT_EQ(log.size(), 2u);
    EXPECT_EQ(log[0]["episode"], 25);
    EXPECT_EQ(log[1]["episode"], 50);
}

TEST(Train, MissingCsvDatasetExitsTwo) {
    TempDir dir("cli");
    auto doc = tiny_doc();
    doc["dataset"] = {{"source", "csv"}, {"train_path", dir.file("nope.csv")}, {"test_path", dir.file("nope.csv")}};
    const auto r = capture([&](auto& o, auto& e) { return cli::cmd_train(parse_run_config(doc), dir.file("out"), o, e); });
    EXPECT_EQ(r.status, 2);
    EXPECT_NE(r.err.find("nope.csv"), std::string::npos);
    io::write_file(dir.file("c.json"), doc.dump());
    EXPECT_EQ(run_binary("train --config " + dir.file("c.json") + " --out " + dir.file("out")), 2);
}

TEST(Train, CsvSourceFromGeneratedData) {
    TempDir dir("cli");
    const auto cfg = tiny_config();
    ASSERT_EQ(capture([&](auto& o, auto& e) { return cli::cmd_gen_data(cfg, dir.file("data"), o, e); }).status, 0);
    auto doc = tiny_doc();
    doc["dataset"] = {{"source", "csv"},
                      {"train_path", dir.file("data/train.csv")},
                      {"test_path", dir.file("data/test.csv")}};
    ASSERT_EQ(capture([&](auto& o, auto& e) { return cli::cmd_train(parse_run_config(doc), dir.file("csv"), o, e); })
                  .status,
              0);
    ASSERT_EQ(capture([&](auto& o, auto& e) { return cli::cmd_train(cfg, dir.file("syn"), o, e); }).status, 0);
    // Same data either way, so the same trained model.
    EXPECT_EQ(io::read_file(dir.file("csv/checkpoint.json")), io::read_file(dir.file("syn/checkpoint.json")));
}

TEST(Eval, MatchesFinalLoggedAccuracy) {
    TempDir dir("cli");
    const auto cfg = tiny_config();
    ASSERT_EQ(capture([&](auto& o, auto& e) { return cli::cmd_train(cfg, dir.path().string(), o, e); }).status, 0);
    const auto r = capture([&](auto& o, auto& e) {
        return cli::cmd_eval(cfg, dir.file("checkpoint.json"), dir.file("eval"), o, e);
    });
    ASSERT_EQ(r.status, 0) << r.err;
    const auto rec = read_jsonl(dir.file("eval/eval.jsonl")).at(0);
    const auto log = read_jsonl(dir.file("metrics.jsonl"));
    EXPECT_EQ(rec["accuracy"].get<double>(), log.back()["eval_accuracy"].get<double>());
    EXPECT_FALSE(rec["ci95"].is_null());
    EXPECT_NE(r.out.find("accuracy "), std::string::npos);
}

TEST(Eval, SingleEpisodeReportsNa) {
    TempDir dir("cli");
    auto cfg = tiny_config();
    ASSERT_EQ(capture([&](auto& o, auto& e) { return cli::cmd_train(cfg, dir.path().string(), o, e); }).status, 0);
    cfg.train.eval_episodes = 1;
    const auto r = capture([&](auto& o, auto& e) {
        return cli::cmd_eval(cfg, dir.file("checkpoint.json"), dir.file("eval"), o, e);
    });
    ASSERT_EQ(r.status, 0);
    EXPECT_NE(r.out.find("+/- NA"), std::string::npos);
    EXPECT_TRUE(read_jsonl(dir.file("eval/eval.jsonl")).at(0)["ci95"].is_null());
}

TEST(Eval, CorruptedOrMismatchedCheckpointExitsTwo) {
    TempDir dir("cli");
    const auto cfg = tiny_config();
    ASSERT_EQ(capture([&](auto& o, auto& e) { return cli::cmd_train(cfg, dir.path().string(), o, e); }).status, 0);
    auto text = io::read_file(dir.file("checkpoint.json"));
    // Truncate the first base64 payload.
    const auto pos = text.find("\"values\": \"") + 11;
    const auto end = text.find('"', pos);
    auto truncated = text;
    truncated.erase(pos + (end - pos) / 2, (end - pos) / 2 - 1);
    io::write_file(dir.file("bad.json"), truncated);
    auto r = capture([&](auto& o, auto& e) { return cli::cmd_eval(cfg, dir.file("bad.json"), dir.file("e"), o, e); });
    EXPECT_EQ(r.status, 2);
    EXPECT_NE(r.err.find("checkpoint error"), std::string::npos);

    auto other = cfg;
    other.model.hidden_m = 7;
    r = capture([&](auto& o, auto& e) { return cli::cmd_eval(other, dir.file("checkpoint.json"), dir.file("e"), o, e); });
    EXPECT_EQ(r.status, 2);
    EXPECT_NE(r.err.find("shape mismatch"), std::string::npos);

    io::write_file(dir.file("c.json"), tiny_doc().dump());
    EXPECT_EQ(run_binary("eval --config " + dir.file("c.json") + " --checkpoint " + dir.file("bad.json") + " --out " +
                         dir.file("e")),
              2);
    EXPECT_EQ(run_binary("eval --config " + dir.file("c.json") + " --checkpoint " + dir.file("absent.json")), 2);
}

// ---- analyze ------------------------------------------------------------------------

TEST(Analyze, ProfileRecordsAndBetaSweep) {
    TempDir dir("cli");
    auto cfg = tiny_config();
    ASSERT_EQ(capture([&](auto& o, auto& e) { return cli::cmd_train(cfg, dir.path().string(), o, e); }).status, 0);
    cfg.analysis.export_features = true;
    cfg.analysis.beta_sweep = true;
    const auto r = capture([&](auto& o, auto& e) {
        return cli::cmd_analyze(cfg, dir.file("checkpoint.json"), dir.file("an"), o, e);
    });
    ASSERT_EQ(r.status, 0) << r.err;
    const auto profile = read_jsonl(dir.file("an/profile.jsonl"));
    ASSERT_EQ(profile.size(), cfg.analysis.tasks * (cfg.model.layers + 1));
    for (const auto& rec : profile)
        EXPECT_EQ(rec["flagged"].get<bool>(), rec["rank_loss"].get<double>() < cfg.analysis.epsilon);
    for (std::size_t k = 0; k <= cfg.model.layers; ++k)
        EXPECT_TRUE(std::filesystem::exists(dir.file("an/features/layer_" + std::to_string(k) + ".csv")));
    const auto sweep = read_jsonl(dir.file("an/beta_sweep.jsonl"));
    ASSERT_EQ(sweep.size(), 10u);
    for (std::size_t i = 0; i < 10; ++i) {
        EXPECT_NEAR(sweep[i]["beta"].get<double>(), 0.1 * static_cast<double>(i + 1), 1e-12);
        EXPECT_GE(sweep[i]["accuracy"].get<double>(), 0.0);
        EXPECT_LE(sweep[i]["accuracy"].get<double>(), 1.0);
    }
}

// ---- binary ------------------------------------------------------------------------

TEST(Binary, EndToEndAndUsageErrors) {
    TempDir dir("cli");
    io::write_file(dir.file("c.json"), tiny_doc().dump());
    const auto cfg = dir.file("c.json");
    EXPECT_EQ(run_binary("gen-data --config " + cfg + " --out " + dir.file("data")), 0);
    EXPECT_EQ(run_binary("train --config " + cfg + " --out " + dir.file("run") + " --seed 3"), 0);
    EXPECT_EQ(run_binary("eval --config " + cfg + " --out " + dir.file("run") + " --seed 3 --checkpoint " +
                         dir.file("run/checkpoint.json")),
              0);
    EXPECT_EQ(run_binary("analyze --config " + cfg + " --out " + dir.file("an") + " --checkpoint " +
                         dir.file("run/checkpoint.json")),
              0);
    EXPECT_TRUE(std::filesystem::exists(dir.file("run/eval.jsonl")));
    EXPECT_TRUE(std::filesystem::exists(dir.file("an/profile.jsonl")));
    EXPECT_EQ(parse_run_config_text(io::read_file(dir.file("run/config.json"))).seed, 3u);
    EXPECT_EQ(run_binary("train"), 2);
    EXPECT_EQ(run_binary("bogus --config " + cfg), 2);
    EXPECT_EQ(run_binary("eval --config " + cfg), 2);  // --checkpoint is required
}

// ---- sweep --------------------------------------------------------------------------

TEST(Sweep, EveryVariantAndDistributionReported) {
    TempDir dir("cli");
    json doc;
    doc["base"] = tiny_doc();
    doc["base"]["train"]["total_episodes"] = 10;
    doc["variants"] = json::array({json{{"name", "vanilla"}, {"model", {{"beta", 1.0}, {"memory_mode", "none"}}}},
                                   json{{"name", "full"}}});
    doc["query_dists"] = {"random", "uniform"};
    io::write_file(dir.file("sweep.json"), doc.dump());
    const auto r = capture([&](auto& o, auto& e) {
        return cli::cmd_sweep(dir.file("sweep.json"), std::nullopt, dir.file("out"), o, e);
    });
    ASSERT_EQ(r.status, 0) << r.err;
    const auto recs = read_jsonl(dir.file("out/sweep.jsonl"));
    ASSERT_EQ(recs.size(), 4u);
    EXPECT_EQ(recs[0]["variant"], "vanilla");
    EXPECT_EQ(recs[0]["query_dist"], "random");
    EXPECT_EQ(recs[3]["variant"], "full");
    EXPECT_EQ(recs[3]["query_dist"], "uniform");

    doc["variants"][0]["model"]["nonsense"] = 1;
    io::write_file(dir.file("bad.json"), doc.dump());
    const auto bad = capture([&](auto& o, auto& e) {
        return cli::cmd_sweep(dir.file("bad.json"), std::nullopt, dir.file("out"), o, e);
    });
    EXPECT_EQ(bad.status, 2);
    EXPECT_NE(bad.err.find("model.nonsense"), std::string::npos);
}

TEST(ShippedConfigs, ParseAndCarryDefaults) {
    const std::string root = AGNN_SOURCE_DIR;
    const auto cfg = parse_run_config_text(io::read_file(root + "/configs/example.json"));
    EXPECT_EQ(cfg.model.alpha, 0.5);
    EXPECT_EQ(cfg.model.beta, 0.7);
    EXPECT_EQ(cfg.model.layers, 3u);
    EXPECT_EQ(cfg.train.learning_rate, 1e-3);
    EXPECT_EQ(cfg.dataset.synthetic.dim, 128u);
    const auto plan = cli::parse_sweep(json::parse(io::read_file(root + "/configs/robustness_sweep.json")));
    EXPECT_EQ(plan.variants.size(), 3u);
    EXPECT_EQ(plan.query_dists.size(), 2u);
}
