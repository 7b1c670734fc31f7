#include <filesystem>

#include "doctest.h"
#include "fvlab/common/error.hpp"
#include "fvlab/common/rng.hpp"
#include "fvlab/common/text.hpp"
#include "fvlab/fixture/fixture.hpp"
#include "fvlab/patching/patching.hpp"

using namespace fvlab;

namespace {

const std::filesystem::path kMicro = std::filesystem::path(FVLAB_SOURCE_DIR) / "tests" / "data" / "micro";

const Battery& micro() {
    static const Battery b = load_battery(kMicro);
    return b;
}

Model fixture_model(int n_layers, bool llama) {
    fixture::FixtureOptions o;
    o.seed = 13;
    o.n_layers = n_layers;
    o.llama_style = llama;
    return fixture::make_model(o, fixture::battery_corpus(kMicro));
}

// Unembedding reads token t from residual axis (t mod d_model); `favored`
// reads it at full weight, everything else at half.
Model axis_model(int n_layers, int favored) {
    const auto tok = fixture::train_bpe(fixture::battery_corpus(kMicro), 64);
    const auto arch = fixture::tiny_arch(false, tok.size(), n_layers);
    auto w = fixture::random_weights(arch, 4);
    auto& u = fixture::find_tensor(w, "unembed.weight");
    std::fill(u.data.begin(), u.data.end(), 0.0f);
    for (int t = 0; t < arch.vocab_size; ++t)
        u.data[static_cast<std::size_t>(t % arch.d_model) * arch.vocab_size + t] = t == favored ? 1.0f : 0.5f;
    return Model::from_tensors(arch, w, tok);
}

const ExamplePair& umbrella() { return micro().task("first_letter").examples[2]; }

int umbrella_gold() {
    static const int id = axis_model(1, -1).encode(" " + umbrella().output)[0];
    return id;
}

Steering random_steering(const Model& m, const std::string& tmpl, int layer, double alpha, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(static_cast<std::size_t>(m.arch().d_model));
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return {FunctionVector::make("first_letter", tmpl, layer, v, 1, 1, seed), layer, alpha};
}

PatchConfig config_for(const TaskSpec& task, int layer) {
    return {task.name(), "T1", "T5", layer, select_queries(task, 6, 2), PositionMode::all_positions};
}

}  // namespace

TEST_CASE("self-patching recovers clean accuracy at every layer") {
    for (bool llama : {false, true}) {
        const Model m = fixture_model(4, llama);
        const auto& task = micro().task("first_letter");
        const auto s = random_steering(m, "T1", 1, 2.0, 5);
        const auto sweep = layer_sweep_patch(m, task, config_for(task, 0), s, s, true);
        REQUIRE(sweep.results.size() == 4);
        for (const auto& r : sweep.results) {
            CHECK(r.recovery == r.clean_acc);
            CHECK(r.corrupted_acc == r.clean_acc);
        }
    }
}

TEST_CASE("patching the last layer forces the clean first-step logits") {
    for (bool llama : {false, true}) {
        const Model m = fixture_model(2, llama);
        const auto& task = micro().task("country_capital");
        const auto clean = random_steering(m, "T1", 0, 3.0, 1);
        const auto corrupt = random_steering(m, "T5", 1, 4.0, 2);
        for (const auto& q : select_queries(task, 5, 9)) {
            const auto l = first_step_logits(m, task.find_template("T1"), q, clean, corrupt, 1);
            CHECK(l.clean == l.patched);
            // An earlier layer leaves the corrupted steering at layer 1 in play.
            const auto early = first_step_logits(m, task.find_template("T1"), q, clean, corrupt, 0);
            CHECK(early.clean != early.patched);
        }
    }
}

TEST_CASE("patching at or above both steering layers replays the clean run") {
    const Model m = fixture_model(4, false);
    const auto& task = micro().task("country_capital");
    const auto clean = random_steering(m, "T1", 1, 3.0, 11);
    const auto corrupt = random_steering(m, "T5", 0, 3.0, 12);
    const auto sweep = layer_sweep_patch(m, task, config_for(task, 0), clean, corrupt, true);
    for (const auto& r : sweep.results)
        if (r.config.layer >= 1) CHECK(r.recovery == r.clean_acc);
}

TEST_CASE("signal carried by one layer is recovered only there") {
    const Model m = axis_model(4, umbrella_gold());
    TaskSpec task = micro().task("first_letter");
    task.info.max_new_tokens = 1;
    const ExamplePair q = umbrella();
    const int gold = umbrella_gold();
    std::vector<float> v(32, 0.0f);
    v[static_cast<std::size_t>(gold % 32)] = 1.0f;
    const Steering clean{FunctionVector::make(task.name(), "T1", 3, v, 1, 1, 0), 3, 1000.0};
    std::vector<float> w(32, 0.0f);
    w[static_cast<std::size_t>((gold + 1) % 32)] = 1.0f;
    const Steering none{FunctionVector::make(task.name(), "T5", 3, w, 1, 1, 0), 3, 1000.0};

    PatchConfig cfg{task.name(), "T1", "T5", 0, std::vector<ExamplePair>(3, q), PositionMode::all_positions};
    const auto sweep = layer_sweep_patch(m, task, cfg, clean, none, true);
    REQUIRE(sweep.results.size() == 4);
    CHECK(sweep.results[3].clean_acc == 1.0);
    CHECK(sweep.results[3].recovery == 1.0);
    CHECK(sweep.results[0].corrupted_acc == 0.0);
    for (int l = 0; l < 3; ++l) CHECK(sweep.results[static_cast<std::size_t>(l)].recovery == sweep.results[0].corrupted_acc);
    CHECK(sweep.best_layer == 3);
    CHECK(sweep.max_recovery == 1.0);
}

TEST_CASE("null fixture has zero recovery everywhere") {
    const Model m = axis_model(2, umbrella_gold());
    TaskSpec task = micro().task("first_letter");
    task.info.max_new_tokens = 1;
    const ExamplePair q = umbrella();
    const int gold = umbrella_gold();
    std::vector<float> v(32, 0.0f);
    v[static_cast<std::size_t>((gold + 1) % 32)] = 1.0f;
    const Steering wrong{FunctionVector::make(task.name(), "T1", 0, v, 1, 1, 0), 0, 1000.0};
    PatchConfig cfg{task.name(), "T1", "T5", 0, std::vector<ExamplePair>(2, q), PositionMode::all_positions};
    const auto sweep = layer_sweep_patch(m, task, cfg, wrong, wrong, true);
    CHECK(sweep.max_recovery == 0.0);
    CHECK(sweep.best_layer == 0);
}

TEST_CASE("gating, bookkeeping and errors") {
    const Model m = fixture_model(2, false);
    const auto& task = micro().task("first_letter");
    const auto s = random_steering(m, "T1", 0, 1.0, 3);

    const auto skipped = layer_sweep_patch(m, task, config_for(task, 0), s, s, false);
    CHECK(skipped.best_layer == -1);
    for (const auto& r : skipped.results) CHECK(r.skipped);

    std::vector<PatchResult> all = skipped.results;
    all.push_back(run_patch(m, task, config_for(task, 1), s, s, true));
    const auto t = tally(all);
    CHECK(t.attempted == 3);
    CHECK(t.skipped == 2);
    CHECK(t.analyzed == 1);
    CHECK(t.skipped + t.analyzed == t.attempted);

    try {
        run_patch(m, task, config_for(task, 2), s, s, true);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::range);
    }
    CHECK_THROWS_AS(run_patch(m, task, config_for(task, -1), s, s, false), Error);

    const auto csv = parse_csv(patch_csv(all));
    CHECK(csv.header == std::vector<std::string>{"task", "clean", "corrupted", "layer", "recovery", "clean_acc",
                                                 "corrupted_acc", "skipped", "normalized_recovery"});
    CHECK(csv.rows.size() == 3);
    CHECK(csv.rows[0][7] == "1");
}

TEST_CASE("normalized recovery") {
    const Model m = axis_model(2, umbrella_gold());
    TaskSpec task = micro().task("first_letter");
    task.info.max_new_tokens = 1;
    const ExamplePair q = umbrella();
    const int gold = umbrella_gold();
    std::vector<float> v(32, 0.0f), w(32, 0.0f);
    v[static_cast<std::size_t>(gold % 32)] = 1.0f;
    w[static_cast<std::size_t>((gold + 1) % 32)] = 1.0f;
    const Steering good{FunctionVector::make(task.name(), "T1", 1, v, 1, 1, 0), 1, 1000.0};
    const Steering bad{FunctionVector::make(task.name(), "T5", 1, w, 1, 1, 0), 1, 1000.0};
    PatchConfig cfg{task.name(), "T1", "T5", 1, std::vector<ExamplePair>(2, q), PositionMode::all_positions};
    const auto r = run_patch(m, task, cfg, good, bad, true);
    CHECK(r.clean_acc == 1.0);
    CHECK(r.corrupted_acc == 0.0);
    CHECK(r.recovery == 1.0);
    CHECK(r.normalized == 1.0);
}
