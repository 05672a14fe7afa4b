#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "somnus/train.hpp"
#include "support/testutil.hpp"

using namespace somnus;

namespace {

std::string read_file(const std::filesystem::path& p) {
    std::ifstream f(p);
    REQUIRE(f.good());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::size_t count_lines(const std::string& s) {
    std::size_t n = 0;
    for (char c : s) n += c == '\n';
    return n;
}

// small cohort, tiny presets: the full pipeline in seconds
RunConfig tiny_run(const std::filesystem::path& out, std::uint64_t seed = 3,
                   std::size_t subjects = 12) {
    RunConfig c;
    c.seed = seed;
    c.out = out.string();
    c.cohort.subjects = subjects;
    c.cohort.min_epochs = 120;
    c.cohort.max_epochs = 124;
    c.micro.preset = "tiny";
    c.micro.batch = 3;  // pretrain split of 12 subjects = 6 records, 1 crop each
    c.micro.crop_epochs = 1;
    c.micro.crops_per_record = 1;
    c.micro.train_epochs = 2;
    c.micro.warmup = 0;
    c.macro.preset = "tiny";
    c.macro.batch = 3;
    c.macro.train_epochs = 1;
    c.macro.warmup = 0;
    c.probe.steps = 60;
    c.probe.sdb_batch = 256;
    return c;
}

}  // namespace

TEST_CASE("run config round-trips through json with stable hashes", "[train]") {
    RunConfig c;
    nlohmann::json j = run_config_json(c);
    RunConfig back = run_config_from_json(j);
    CHECK(run_config_json(back).dump() == j.dump());

    const std::string h = config_hash(c);
    CHECK(h.size() == 16);
    for (char ch : h) CHECK(std::isxdigit(static_cast<unsigned char>(ch)));
    CHECK(config_hash(back) == h);

    SECTION("hash tracks experiment settings, not execution details") {
        RunConfig moved = c;
        moved.out = "/somewhere/else";
        moved.stage = "micro";
        CHECK(config_hash(moved) == h);

        RunConfig reseeded = c;
        reseeded.seed = 2;
        CHECK(config_hash(reseeded) != h);

        RunConfig retuned = c;
        retuned.micro.lr = 1e-3;
        CHECK(config_hash(retuned) != h);
    }

    SECTION("scoped hashes only see their slice of the config") {
        RunConfig probe_changed = c;
        probe_changed.probe.steps = 999;
        CHECK(config_hash(probe_changed) != h);
        CHECK(cohort_scope_hash(probe_changed) == cohort_scope_hash(c));
        CHECK(micro_scope_hash(probe_changed) == micro_scope_hash(c));
        CHECK(macro_scope_hash(probe_changed) == macro_scope_hash(c));

        RunConfig micro_changed = c;
        micro_changed.micro.weight_decay = 0.2;
        CHECK(cohort_scope_hash(micro_changed) == cohort_scope_hash(c));
        CHECK(micro_scope_hash(micro_changed) != micro_scope_hash(c));
        CHECK(macro_scope_hash(micro_changed) != macro_scope_hash(c));

        RunConfig cohort_changed = c;
        cohort_changed.cohort.subjects = 32;
        CHECK(cohort_scope_hash(cohort_changed) != cohort_scope_hash(c));
        CHECK(micro_scope_hash(cohort_changed) != micro_scope_hash(c));
    }

    SECTION("partial json keeps defaults for missing keys") {
        RunConfig sparse = run_config_from_json(nlohmann::json::parse(
            R"({"seed": 11, "micro": {"lr": 0.001}})"));
        CHECK(sparse.seed == 11);
        CHECK(sparse.micro.lr == 0.001);
        CHECK(sparse.micro.batch == RunConfig{}.micro.batch);
        CHECK(sparse.probe.steps == RunConfig{}.probe.steps);
    }
}

TEST_CASE("run config rejects unknown keys and malformed values", "[train]") {
    CHECK_THROWS_MATCHES(run_config_from_json(nlohmann::json::parse(R"({"sed": 1})")),
                         ConfigError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("sed")));
    CHECK_THROWS_MATCHES(
        run_config_from_json(nlohmann::json::parse(R"({"micro": {"larning": 1}})")),
        ConfigError,
        Catch::Matchers::MessageMatches(
            Catch::Matchers::ContainsSubstring("micro.larning")));
    CHECK_THROWS_MATCHES(
        run_config_from_json(nlohmann::json::parse(R"({"cohort": {"subject": 4}})")),
        ConfigError,
        Catch::Matchers::MessageMatches(
            Catch::Matchers::ContainsSubstring("cohort.subject")));
    CHECK_THROWS_MATCHES(run_config_from_json(nlohmann::json::parse(R"({"probe": 7})")),
                         ConfigError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("object")));
    // wrong value type surfaces as a config error, not a raw json exception
    CHECK_THROWS_AS(
        run_config_from_json(nlohmann::json::parse(R"({"probe": {"steps": "many"}})")),
        ConfigError);
}

TEST_CASE("environment overrides update the run config", "[train]") {
    std::map<std::string, std::string> env;
    auto getter = [&env](const char* k) -> const char* {
        auto it = env.find(k);
        return it == env.end() ? nullptr : it->second.c_str();
    };

    RunConfig c;
    env = {{"SOMNUS_SEED", "42"},
           {"SOMNUS_MICRO_LR", "1e-3"},
           {"SOMNUS_PROBE_STEPS", "5"},
           {"SOMNUS_MACRO_PRESET", "tiny"},
           {"SOMNUS_OUT", "run2"}};
    apply_env_overrides(c, getter);
    CHECK(c.seed == 42);
    CHECK(c.micro.lr == 1e-3);
    CHECK(c.probe.steps == 5);
    CHECK(c.macro.preset == "tiny");
    CHECK(c.out == "run2");
    CHECK(c.micro.batch == RunConfig{}.micro.batch);  // untouched field keeps default

    env = {{"SOMNUS_SEED", "abc"}};
    CHECK_THROWS_MATCHES(apply_env_overrides(c, getter), ConfigError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("SOMNUS_SEED")));
    env = {{"SOMNUS_MACRO_RHO", "0.5x"}};
    CHECK_THROWS_AS(apply_env_overrides(c, getter), ConfigError);
}

TEST_CASE("cohort splits interleave subjects 2:1:1 without overlap", "[train]") {
    Splits s = make_splits(128);
    CHECK(s.pretrain.size() == 64);
    CHECK(s.probe.size() == 32);
    CHECK(s.test.size() == 32);

    std::vector<bool> seen(128, false);
    for (const auto* part : {&s.pretrain, &s.probe, &s.test})
        for (std::size_t i : *part) {
            REQUIRE(i < 128);
            CHECK_FALSE(seen[i]);
            seen[i] = true;
        }
    for (bool b : seen) CHECK(b);

    // interleaving: consecutive indices land in different splits
    CHECK(s.pretrain[0] == 0);
    CHECK(s.pretrain[1] == 1);
    CHECK(s.probe[0] == 2);
    CHECK(s.test[0] == 3);
    CHECK(s.probe[1] == 6);

    Splits tiny = make_splits(4);
    CHECK(tiny.pretrain == std::vector<std::size_t>{0, 1});
    CHECK(tiny.probe == std::vector<std::size_t>{2});
    CHECK(tiny.test == std::vector<std::size_t>{3});
    CHECK_THROWS_AS(make_splits(3), ConfigError);
}

TEST_CASE("embedding cache rounds values through float32 and locks its config",
          "[train]") {
    testutil::TempDir dir("emb");
    auto path = dir.path() / "cache" / "x.f32";
    const std::string hash = "0123456789abcdef";

    std::vector<std::vector<double>> rows = {{0.1, 1.0 / 3.0}, {2.5, -7.25}};
    save_embedding_cache(path, hash, rows);
    CHECK(std::filesystem::file_size(path) == 8 + 16 + 8 + 8 + 4 * sizeof(float));

    auto back = load_embedding_cache(path, hash);
    REQUIRE(back.size() == 2);
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t c = 0; c < 2; ++c)
            CHECK(back[r][c] == static_cast<double>(static_cast<float>(rows[r][c])));
    // 0.1 is not representable in float32, so the round trip must move it
    CHECK(back[0][0] != 0.1);
    CHECK(back[1][1] == -7.25);  // exactly representable

    CHECK_THROWS_MATCHES(load_embedding_cache(path, "ffffffffffffffff"), DataError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("different config")));

    SECTION("corrupt magic is rejected") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("BOGUS!!!", 8);
        f.close();
        CHECK_THROWS_AS(load_embedding_cache(path, hash), DataError);
    }

    SECTION("compute runs once, later reads come from the cache") {
        auto path2 = dir.path() / "cache" / "y.f32";
        int calls = 0;
        auto compute = [&]() {
            ++calls;
            return rows;
        };
        auto first = cached_embeddings(path2, hash, compute);
        auto second = cached_embeddings(path2, hash, compute);
        CHECK(calls == 1);
        CHECK(first == second);
    }

    SECTION("ragged rows are refused") {
        CHECK_THROWS_AS(save_embedding_cache(dir.path() / "bad.f32", hash,
                                             {{1.0, 2.0}, {3.0}}),
                        ShapeError);
    }
}

TEST_CASE("head-first truncation keeps the trailing rows", "[train]") {
    std::vector<std::vector<double>> rows = {{0}, {1}, {2}, {3}, {4}};
    auto kept = truncate_head(rows, 3);
    REQUIRE(kept.size() == 3);
    CHECK(kept[0][0] == 2);
    CHECK(kept[2][0] == 4);
    CHECK(truncate_head(rows, 5).size() == 5);
    CHECK(truncate_head(rows, 99).size() == 5);
}

TEST_CASE("row matrices convert to tensors and manifests provide statistics",
          "[train]") {
    Tensor t = rows_to_tensor({{1, 2, 3}, {4, 5, 6}});
    CHECK(t.dim(0) == 2);
    CHECK(t.dim(1) == 3);
    CHECK(t.values() == std::vector<double>{1, 2, 3, 4, 5, 6});
    CHECK_THROWS_AS(rows_to_tensor({{1, 2}, {3}}), ShapeError);
    CHECK_THROWS_AS(rows_to_tensor({}), DataError);

    CohortManifest m;
    m.rows.resize(3);
    m.rows[0].record_id = "a";
    m.rows[0].age = 40;
    m.rows[0].bmi = 20;
    m.rows[1].record_id = "b";
    m.rows[1].age = 60;
    m.rows[1].bmi = 30;
    m.rows[2].record_id = "c";
    m.rows[2].age = 50;
    m.rows[2].bmi = 25;

    DemoStats s = demographic_stats(m, {0, 1});
    CHECK(s.age_mean == 50.0);
    CHECK(s.age_sd == 10.0);
    CHECK(s.bmi_mean == 25.0);
    CHECK(s.bmi_sd == 5.0);
    CHECK_THROWS_AS(demographic_stats(m, {}), DataError);
    CHECK_THROWS_AS(demographic_stats(m, {1}), DataError);  // zero spread

    CHECK(split_ids(m, {2, 0}) == std::vector<std::string>{"c", "a"});
    CHECK_THROWS_AS(split_ids(m, {3}), DataError);
    CHECK_THROWS_AS(check_split_disjoint({"a", "b"}, {"c", "b"}), DataError);
    CHECK_NOTHROW(check_split_disjoint({"a"}, {"c"}));
}

TEST_CASE("the training pipeline runs end to end and resumes bit-exactly",
          "[train][pipeline]") {
    testutil::TempDir dir_a("run_a");
    RunConfig cfg = tiny_run(dir_a.path());

    // --- synth ------------------------------------------------------------
    CohortManifest manifest = cmd_synth(cfg);
    REQUIRE(manifest.rows.size() == 12);
    CHECK(manifest.config_hash == cohort_scope_hash(cfg));
    for (const auto& row : manifest.rows) {
        CHECK(row.duration_epochs >= 120);
        CHECK(row.duration_epochs <= 124);
        CHECK(std::filesystem::exists(dir_a.path() / "cohort" / "subjects" /
                                      row.record_id));
    }
    auto written = nlohmann::json::parse(read_file(dir_a.path() / "config.json"));
    CHECK(written.at("config_hash") == config_hash(cfg));
    CHECK(written.at("seed") == 3);

    CHECK_THROWS_MATCHES(cmd_synth(cfg), DataError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("--force")));
    // a different cohort in the same directory is refused downstream
    RunConfig other_cohort = cfg;
    other_cohort.seed = 99;
    CHECK_THROWS_MATCHES(train_micro(other_cohort), DataError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("synthesised under")));

    // --- macro before micro -------------------------------------------------
    CHECK_THROWS_MATCHES(train_macro(cfg), DataError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("micro")));

    // --- micro pretraining ---------------------------------------------------
    MicroTrainResult micro_res = train_micro(cfg);
    CHECK(micro_res.steps == 4);  // 6 records x 1 crop / batch 3 = 2 steps x 2 passes
    REQUIRE(micro_res.step_losses.size() == 4);
    for (double l : micro_res.step_losses) CHECK(std::isfinite(l));
    CHECK(std::filesystem::exists(dir_a.path() / "checkpoints" / "micro.ckpt"));
    CHECK(std::filesystem::exists(dir_a.path() / "checkpoints" / "micro_epoch1.ckpt"));
    CHECK(std::filesystem::exists(dir_a.path() / "checkpoints" / "micro_epoch2.ckpt"));

    Checkpoint mc = load_checkpoint((dir_a.path() / "checkpoints" / "micro.ckpt").string());
    CHECK(mc.meta.stage == "micro");
    CHECK(mc.meta.epoch == 2);
    CHECK(mc.meta.step == 4);
    CHECK(mc.meta.config_hash == micro_scope_hash(cfg));
    CHECK(mc.has_opt);

    std::string csv = read_file(dir_a.path() / "micro_loss.csv");
    CHECK(csv.rfind("# config_hash=" + micro_scope_hash(cfg), 0) == 0);
    CHECK(csv.find("step,lr,recon,contrastive,koleo,total") != std::string::npos);
    CHECK(count_lines(csv) == 2 + 4);  // comment + header + one row per step

    // rerunning a finished stage is a no-op that keeps the artifacts
    MicroTrainResult again = train_micro(cfg);
    CHECK(again.steps == 4);
    CHECK(again.step_losses.empty());

    // --- macro pretraining ----------------------------------------------------
    MacroTrainResult macro_res = train_macro(cfg);
    CHECK(macro_res.steps == 2);  // 6 pretrain subjects in stratified batches of 3
    for (double l : macro_res.step_losses) CHECK(std::isfinite(l));
    Checkpoint kc = load_checkpoint((dir_a.path() / "checkpoints" / "macro.ckpt").string());
    CHECK(kc.meta.stage == "macro");
    CHECK(kc.meta.config_hash == macro_scope_hash(cfg));
    std::string mcsv = read_file(dir_a.path() / "macro_loss.csv");
    CHECK(mcsv.rfind("# config_hash=" + macro_scope_hash(cfg), 0) == 0);
    CHECK(count_lines(mcsv) == 2 + 2);

    // epoch-embedding caches were materialised for the pretrain split
    Splits splits = make_splits(cfg.cohort.subjects);
    for (std::size_t i : splits.pretrain)
        CHECK(std::filesystem::exists(dir_a.path() / "embeddings" /
                                      ("epoch_" + manifest.rows[i].record_id + ".f32")));

    // --- probes -----------------------------------------------------------------
    ProbeArtifacts reg = run_probe_task(cfg, ProbeTask::regression);
    REQUIRE(reg.metrics.mae.has_value());
    CHECK(std::isfinite(*reg.metrics.mae));
    CHECK(*reg.metrics.mae >= 0.0);
    CHECK_FALSE(reg.metrics.accuracy.has_value());
    CHECK(reg.metrics_with_hash.at("config_hash") == config_hash(cfg));
    CHECK(reg.metrics_with_hash.at("task") == "regression");
    CHECK(std::filesystem::exists(reg.metrics_path));
    CHECK(reg.confusion_path.empty());

    ProbeArtifacts st = run_probe_task(cfg, ProbeTask::stage5);
    REQUIRE(st.metrics.accuracy.has_value());
    CHECK(*st.metrics.accuracy >= 0.0);
    CHECK(*st.metrics.accuracy <= 1.0);
    REQUIRE(st.metrics.per_class_f1.size() == 5);
    REQUIRE(std::filesystem::exists(st.confusion_path));
    std::string conf = read_file(st.confusion_path);
    CHECK(conf.rfind("# config_hash=" + config_hash(cfg), 0) == 0);
    CHECK(conf.find("true\\pred") != std::string::npos);

    ProbeArtifacts sdb = run_probe_task(cfg, ProbeTask::sdb3);
    REQUIRE(sdb.metrics.accuracy.has_value());
    REQUIRE(sdb.metrics.per_class_f1.size() == 3);

    ProbeArtifacts bin = run_probe_task(cfg, ProbeTask::binary);
    REQUIRE(bin.metrics.accuracy.has_value());

    ProbeArtifacts sur = run_probe_task(cfg, ProbeTask::survival);
    REQUIRE(sur.metrics.c_index.has_value());
    CHECK(*sur.metrics.c_index >= 0.0);
    CHECK(*sur.metrics.c_index <= 1.0);

    // identical rerun (now fully cache-backed) reproduces the export byte for byte
    std::string reg_json = read_file(reg.metrics_path);
    ProbeArtifacts reg2 = run_probe_task(cfg, ProbeTask::regression);
    CHECK(read_file(reg2.metrics_path) == reg_json);

    // a changed micro setting invalidates the stored checkpoint
    RunConfig retuned = cfg;
    retuned.micro.lr = 1e-3;
    CHECK_THROWS_MATCHES(run_probe_task(retuned, ProbeTask::regression), DataError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("micro checkpoint")));

    // --- subject embedding export --------------------------------------------------
    auto emb_path = export_subject_embeddings(cfg);
    std::string emb = read_file(emb_path);
    CHECK(emb.rfind("# config_hash=" + config_hash(cfg), 0) == 0);
    CHECK(count_lines(emb) == 2 + splits.probe.size() + splits.test.size());
    CHECK(emb.find(",probe,") != std::string::npos);
    CHECK(emb.find(",test,") != std::string::npos);

    // --- bit-exact resume in a sibling directory --------------------------------------
    testutil::TempDir dir_b("run_b");
    RunConfig cfg_b = cfg;
    cfg_b.out = dir_b.str();
    cmd_synth(cfg_b);
    train_micro(cfg_b);

    // rewind to the end of pass one, as if the process had died mid-run
    auto ck_dir = dir_b.path() / "checkpoints";
    std::filesystem::copy_file(ck_dir / "micro_epoch1.ckpt", ck_dir / "micro.ckpt",
                               std::filesystem::copy_options::overwrite_existing);
    std::filesystem::remove(ck_dir / "micro_epoch2.ckpt");
    MicroTrainResult resumed = train_micro(cfg_b);
    CHECK(resumed.step_losses.size() == 2);  // only the second pass was replayed
    CHECK(std::filesystem::exists(ck_dir / "micro_epoch2.ckpt"));

    Checkpoint a = load_checkpoint((dir_a.path() / "checkpoints" / "micro.ckpt").string());
    Checkpoint b = load_checkpoint((ck_dir / "micro.ckpt").string());
    CHECK(a.meta.step == b.meta.step);
    CHECK(a.opt_steps == b.opt_steps);
    REQUIRE(a.tensors.size() == b.tensors.size());
    for (const auto& [name, payload] : a.tensors) {
        auto it = b.tensors.find(name);
        REQUIRE(it != b.tensors.end());
        CHECK(payload.first == it->second.first);
        bool identical = payload.second == it->second.second;  // bitwise, no tolerance
        if (!identical) INFO("parameter diverged after resume: " << name);
        CHECK(identical);
    }

    // the resumed log appended the replayed pass after the original rows
    std::string csv_b = read_file(dir_b.path() / "micro_loss.csv");
    CHECK(count_lines(csv_b) == 2 + 4 + 2);
    CHECK(csv_b.find("# config_hash=") == csv_b.rfind("# config_hash="));
}

// ---------------------------------------------------------------------------------
// Command-line binary smoke tests. These run only when SOMNUS_CLI_BIN points at
// the built binary (ctest wires this up); they drive real subprocesses.
// ---------------------------------------------------------------------------------

namespace {

struct CliResult {
    int code = -1;
    std::string output;
};

CliResult run_cli(const std::string& args, const std::filesystem::path& log) {
    const char* bin = std::getenv("SOMNUS_CLI_BIN");
    REQUIRE(bin != nullptr);
    std::string cmd = std::string(bin) + " " + args + " > " + log.string() + " 2>&1";
    int rc = std::system(cmd.c_str());
    CliResult r;
    r.code = rc == -1 ? -1 : WEXITSTATUS(rc);
    std::ifstream f(log);
    std::stringstream ss;
    ss << f.rdbuf();
    r.output = ss.str();
    return r;
}

}  // namespace

TEST_CASE("the command line tool walks every stage with proper exit codes",
          "[cli_binary]") {
    if (std::getenv("SOMNUS_CLI_BIN") == nullptr)
        SKIP("SOMNUS_CLI_BIN not set; run via ctest or export it manually");

    testutil::TempDir dir("cli");
    auto log = dir.path() / "cli.log";
    auto run_dir = dir.path() / "run";
    RunConfig cfg = tiny_run(run_dir);
    cfg.probe.steps = 40;

    auto cfg_path = dir.path() / "run.json";
    {
        nlohmann::json j = run_config_json(cfg);
        j.erase("out");
        j.erase("stage");
        std::ofstream f(cfg_path);
        f << j.dump(2) << "\n";
    }
    const std::string base = "--config " + cfg_path.string() + " --out " + run_dir.string();

    SECTION("config and data errors map to distinct exit codes") {
        auto bad_path = dir.path() / "bad.json";
        std::ofstream(bad_path) << R"({"micro": {"typo": 1}})";
        auto r = run_cli("synth --config " + bad_path.string() + " --out " +
                             run_dir.string(),
                         log);
        INFO(r.output);
        CHECK(r.code == 2);

        r = run_cli("pretrain --stage micro " + base, log);  // no cohort yet
        INFO(r.output);
        CHECK(r.code == 3);

        r = run_cli("probe --task bogus " + base, log);
        INFO(r.output);
        CHECK(r.code == 2);

        r = run_cli("pretrain --stage nowhere " + base, log);
        INFO(r.output);
        CHECK(r.code == 2);
    }

    SECTION("a full run produces every artifact and re-entry is safe") {
        auto r = run_cli("all " + base + " --task regression --task binary", log);
        INFO(r.output);
        REQUIRE(r.code == 0);
        CHECK(std::filesystem::exists(run_dir / "cohort" / "cohort.csv"));
        CHECK(std::filesystem::exists(run_dir / "checkpoints" / "micro.ckpt"));
        CHECK(std::filesystem::exists(run_dir / "checkpoints" / "macro.ckpt"));
        CHECK(std::filesystem::exists(run_dir / "exports" / "metrics_regression.json"));
        CHECK(std::filesystem::exists(run_dir / "exports" / "metrics_binary.json"));
        CHECK(std::filesystem::exists(run_dir / "exports" / "subject_embeddings.csv"));

        auto metrics = nlohmann::json::parse(
            read_file(run_dir / "exports" / "metrics_regression.json"));
        CHECK(metrics.at("config_hash") == config_hash(cfg));
        CHECK(metrics.at("task") == "regression");

        r = run_cli("synth " + base, log);  // cohort already present
        INFO(r.output);
        CHECK(r.code == 3);

        r = run_cli("pretrain --stage micro " + base, log);  // finished stage: no-op
        INFO(r.output);
        CHECK(r.code == 0);

        r = run_cli("probe --task stage5 " + base, log);
        INFO(r.output);
        CHECK(r.code == 0);
        CHECK(std::filesystem::exists(run_dir / "exports" / "confusion_stage5.csv"));

        r = run_cli("probe --task sdb3 " + base, log);
        INFO(r.output);
        CHECK(r.code == 0);
        CHECK(std::filesystem::exists(run_dir / "exports" / "metrics_sdb3.json"));

        // an environment override must shift the exported config hash
        RunConfig env_cfg = cfg;
        env_cfg.probe.steps = 25;
        const char* bin = std::getenv("SOMNUS_CLI_BIN");
        std::string cmd = "SOMNUS_PROBE_STEPS=25 " + std::string(bin) +
                          " probe --task regression " + base + " > " + log.string() +
                          " 2>&1";
        REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
        metrics = nlohmann::json::parse(
            read_file(run_dir / "exports" / "metrics_regression.json"));
        CHECK(metrics.at("config_hash") == config_hash(env_cfg));
        CHECK(metrics.at("config_hash") != config_hash(cfg));
    }

    SECTION("flags cap the cohort and reseed the run") {
        auto small_dir = dir.path() / "small";
        auto r = run_cli("synth --config " + cfg_path.string() + " --out " +
                             small_dir.string() + " --limit-subjects 4 --seed 9",
                         log);
        INFO(r.output);
        REQUIRE(r.code == 0);
        CohortManifest m = load_manifest(small_dir / "cohort" / "cohort.csv");
        CHECK(m.rows.size() == 4);
        auto written = nlohmann::json::parse(read_file(small_dir / "config.json"));
        CHECK(written.at("seed") == 9);
        CHECK(written.at("cohort").at("subjects") == 4);
    }
}
