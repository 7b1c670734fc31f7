#include <doctest.h>

#include <filesystem>
#include <set>
#include <string>
#include <unistd.h>

#include "fvlab/common/error.hpp"
#include "fvlab/common/text.hpp"
#include "fvlab/fixture/fixture.hpp"
#include "fvlab/pipeline/pipeline.hpp"

using namespace fvlab;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kMicro = fs::path(FVLAB_SOURCE_DIR) / "tests" / "data" / "micro";

// Removed when the test binary exits.
struct ScratchDir {
    fs::path path;
    ~ScratchDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

fs::path scratch() {
    static const ScratchDir holder{[] {
        auto d = fs::temp_directory_path() / ("fvlab-test-pipeline-" + std::to_string(::getpid()));
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }()};
    return holder.path;
}

const fs::path& fixture_model() {
    static const fs::path path = [] {
        fixture::FixtureOptions opts;
        return fixture::write_model(scratch() / "fixture", opts, fixture::battery_corpus(kMicro));
    }();
    return path;
}

RunManifest micro_manifest(const std::string& out) {
    auto m = RunManifest::load(fs::path(FVLAB_SOURCE_DIR) / "tests" / "data" / "micro_manifest.json");
    m.model = fixture_model();
    m.tokenizer.reset();
    m.battery = kMicro;
    m.out = scratch() / out;
    return m;
}

// Runs the full manifest once per output name and keeps the result.
const RunResult& full_run(const std::string& out) {
    static std::map<std::string, RunResult> runs;
    auto it = runs.find(out);
    if (it == runs.end()) it = runs.emplace(out, run_pipeline(micro_manifest(out))).first;
    return it->second;
}

json gate_doc(const std::vector<std::pair<std::string, double>>& tasks, const std::string& battery = "b") {
    json t = json::array();
    for (const auto& [name, iid] : tasks)
        t.push_back({{"task", name}, {"gated", iid > 0.1}, {"mean_iid", iid}, {"templates", {{{"template", "T1"}}}}});
    return {{"tasks", t}, {"battery_sha256", battery}};
}

}  // namespace

TEST_CASE("manifest parsing and validation") {
    const json j = {{"model", "m/model.xfvc"},
                    {"battery", "bat"},
                    {"seed", 3},
                    {"grid", {{"layers", {0, 1}}, {"alphas", {1.0, 2.0}}}},
                    {"thresholds", {{"tau", 0.2}, {"tau_r", 0.3}}},
                    {"stages", {"stats", "extract", "extract"}}};
    const auto m = RunManifest::from_json(j, "/base");
    CHECK(m.model == fs::path("/base/m/model.xfvc"));
    CHECK(m.battery == fs::path("/base/bat"));
    CHECK(m.seed == 3);
    CHECK(m.tau == doctest::Approx(0.2));
    CHECK(m.tau_r == doctest::Approx(0.3));
    CHECK(m.grid.layers == std::vector<int>{0, 1});
    REQUIRE(m.stages.size() == 2);
    CHECK(m.stages[0] == Stage::extract);
    CHECK(m.stages[1] == Stage::stats);
    CHECK(m.lexicon_path() == fs::path("/base/lexicon/sentiment.json"));

    const auto round = RunManifest::from_json(m.to_json());
    CHECK(round.to_json() == m.to_json());
    CHECK(round.cache_fields() == m.cache_fields());

    auto bad = m;
    bad.tau = 0.0;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = m;
    bad.threads = 0;
    CHECK_THROWS_AS(bad.validate(), Error);
    CHECK_THROWS_AS(stage_from_string("nope"), Error);
    CHECK_THROWS_AS(RunManifest::from_json(json::array()), Error);
    CHECK_THROWS_AS(RunManifest::from_json({{"evaluation", {{"positions", "middle"}}}}), Error);
    CHECK_THROWS_AS(RunManifest::from_json({{"seed", "three"}}), Error);

    auto threads_only = m;
    threads_only.threads = 8;
    threads_only.out = "elsewhere";
    CHECK(threads_only.cache_fields() == m.cache_fields());
    auto reseeded = m;
    reseeded.seed = 4;
    CHECK(reseeded.cache_fields() != m.cache_fields());
}

TEST_CASE("stage order respects dependencies") {
    const auto& order = all_stages();
    for (std::size_t i = 0; i < order.size(); ++i)
        for (Stage dep : stage_dependencies(order[i])) {
            const auto at = std::find(order.begin(), order.end(), dep) - order.begin();
            CHECK(static_cast<std::size_t>(at) < i);
        }
    for (Stage s : order) CHECK(stage_from_string(to_string(s)) == s);
}

TEST_CASE("stats without upstream artifacts is a dependency error") {
    auto m = micro_manifest("orphan");
    m.stages = {Stage::stats};
    try {
        run_pipeline(m);
        FAIL("expected a dependency error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::dependency);
        CHECK(exit_code(e.kind()) == 4);
    }
    CHECK_FALSE(fs::exists(m.out / "reports" / "regression.csv"));
}

TEST_CASE("micro run emits every report with a schema line") {
    const auto& r = full_run("a");
    CHECK(r.exit_code == 0);
    CHECK(r.failed.empty());
    CHECK(r.executed.size() == all_stages().size());
    for (Stage s : all_stages()) CHECK(r.ledger.completed(to_string(s)));
    const fs::path reports = scratch() / "a" / "reports";
    for (const auto& f : report_files()) {
        INFO(f);
        REQUIRE(fs::exists(reports / f));
        const auto text = read_text_file(reports / f);
        CHECK(text.rfind("# schema: 1\n", 0) == 0);
        const auto table = parse_csv(text);
        CHECK_FALSE(table.header.empty());
    }
    const auto summary = json::parse(read_text_file(reports / "summary.json"));
    CHECK(summary.at("schema") == 1);
}

TEST_CASE("coarse coverage equals tasks x templates x layers x alphas") {
    const auto& r = full_run("a");
    const auto& c = r.ledger.stages.at("steer").counters;
    const auto m = micro_manifest("a");
    const int tasks = 2, templates = 8, layers = 2;
    CHECK(c.at("coarse_configs").get<int>() == tasks * templates * layers * static_cast<int>(m.grid.alphas.size()));
    CHECK(c.at("evaluated_configs").get<int>() ==
          c.at("coarse_configs").get<int>() + c.at("refinement_configs").get<int>());
}

TEST_CASE("quadrant rows equal the number of tasks") {
    full_run("a");
    const auto table = parse_csv(read_text_file(scratch() / "a" / "reports" / "quadrant.csv"));
    CHECK(table.rows.size() == 2);
    std::set<std::string> allowed{"both", "steerable_only", "readable_only", "neither"};
    for (const auto& row : table.rows) CHECK(allowed.count(row[table.column("quadrant")]) == 1);
}

TEST_CASE("rerun with unchanged inputs recomputes nothing") {
    const auto& first = full_run("a");
    const auto again = run_pipeline(micro_manifest("a"));
    CHECK(again.executed.empty());
    CHECK(again.exit_code == 0);
    for (const auto& [name, rec] : first.ledger.stages) {
        INFO(name);
        const auto& other = again.ledger.stages.at(name);
        CHECK(other.cache_hit);
        CHECK(other.input_hash == rec.input_hash);
        CHECK(other.outputs == rec.outputs);
    }
}

TEST_CASE("changed inputs and damaged outputs invalidate the cache") {
    full_run("c");
    const fs::path dir = scratch() / "c";
    fs::remove(dir / "reports" / "quadrant.csv");
    auto r = run_pipeline(micro_manifest("c"));
    CHECK(r.executed == std::vector<std::string>{"lens"});
    CHECK(fs::exists(dir / "reports" / "quadrant.csv"));

    auto m = micro_manifest("c");
    m.seed = 12;
    r = run_pipeline(m);
    CHECK(r.executed.size() == all_stages().size());
}

TEST_CASE("identical manifests give byte-identical reports") {
    full_run("a");
    auto m = micro_manifest("b");
    m.threads = 3;
    const auto r = run_pipeline(m);
    REQUIRE(r.exit_code == 0);
    for (const auto& entry : fs::directory_iterator(scratch() / "a" / "reports")) {
        const auto name = entry.path().filename();
        INFO(name.string());
        CHECK(read_text_file(entry.path()) == read_text_file(scratch() / "b" / "reports" / name));
    }
}

TEST_CASE("compare: self comparison and hand subtraction") {
    full_run("a");
    const auto self = compare_runs(scratch() / "a", scratch() / "a");
    CHECK(self.rows.size() == 2);
    for (const auto& row : self.rows) CHECK(row.delta == 0.0);
    CHECK(self.mean_delta == 0.0);

    const auto rep = compare_gates(gate_doc({{"antonym", 0.20}, {"plural", 0.50}}),
                                   gate_doc({{"antonym", 0.45}, {"plural", 0.40}}));
    REQUIRE(rep.rows.size() == 2);
    CHECK(rep.rows[0].task == "antonym");
    CHECK(rep.rows[0].delta == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(rep.rows[1].delta == doctest::Approx(-0.10).epsilon(1e-12));
    CHECK(rep.mean_delta == doctest::Approx(0.075).epsilon(1e-12));
    CHECK(rep.csv().rfind("# schema: 1\n", 0) == 0);

    try {
        compare_gates(gate_doc({{"antonym", 0.2}}), gate_doc({{"plural", 0.2}}));
        FAIL("expected a comparison error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::comparison);
    }
}

TEST_CASE("compare: battery mismatch") {
    full_run("a");
    const fs::path other = scratch() / "mismatch";
    fs::remove_all(other);
    fs::copy(scratch() / "a", other, fs::copy_options::recursive);
    auto ledger = RunLedger::load(other / "ledger.json");
    ledger.battery_sha256 = std::string(64, '0');
    ledger.save(other / "ledger.json");
    try {
        compare_runs(scratch() / "a", other);
        FAIL("expected a comparison error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::comparison);
    }
}

TEST_CASE("ledger json round trip and sha256") {
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    RunLedger l;
    l.code_version = "v";
    l.model_sha256 = "m";
    l.battery_sha256 = "b";
    StageRecord rec;
    rec.status = "completed";
    rec.input_hash = "h";
    rec.outputs = {{"reports/x.csv", "00"}};
    rec.counters = {{"n", 3}};
    l.stages["extract"] = rec;
    const auto back = RunLedger::from_json(l.to_json());
    CHECK(back.to_json() == l.to_json());
    CHECK(back.completed("extract"));
    CHECK_FALSE(back.completed("steer"));
}
