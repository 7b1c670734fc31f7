#include <filesystem>

#include "doctest.h"
#include "fvlab/common/error.hpp"
#include "fvlab/common/rng.hpp"
#include "fvlab/common/text.hpp"
#include "fvlab/fixture/fixture.hpp"
#include "fvlab/fv/fv.hpp"

using namespace fvlab;

namespace {

const std::filesystem::path kMicro = std::filesystem::path(FVLAB_SOURCE_DIR) / "tests" / "data" / "micro";

const Battery& micro() {
    static const Battery b = load_battery(kMicro);
    return b;
}

const Model& model() {
    static const Model m = fixture::make_model({.seed = 21}, fixture::battery_corpus(kMicro));
    return m;
}

ExtractionConfig small_config() {
    ExtractionConfig c;
    c.n_prompts = 4;
    c.n_demos = 5;
    c.seed = 3;
    return c;
}

}  // namespace

TEST_CASE("mean difference matches a hand recomputation") {
    const std::vector<std::vector<float>> pos{{1, 2, 3}, {4, 5, 6}, {7, 8, 10}};
    const std::vector<std::vector<float>> neg{{0, 0, 1}, {1, 1, 1}, {2, 2, 2}};
    const auto d = mean_difference(pos, neg);
    CHECK(d[0] == doctest::Approx((1 + 4 + 7) / 3.0 - 1.0));
    CHECK(d[1] == doctest::Approx(5.0 - 1.0));
    CHECK(d[2] == doctest::Approx(19.0 / 3.0 - 4.0 / 3.0));
}

TEST_CASE("mean difference over a union is the size-weighted mean of the parts") {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        auto draw = [&](std::size_t n) {
            std::vector<std::vector<float>> v(n, std::vector<float>(16));
            for (auto& row : v)
                for (auto& x : row) x = static_cast<float>(rng.normal());
            return v;
        };
        const std::size_t na = 1 + rng.below(6), nb = 1 + rng.below(6);
        auto pa = draw(na), qa = draw(na), pb = draw(nb), qb = draw(nb);
        auto pu = pa, qu = qa;
        pu.insert(pu.end(), pb.begin(), pb.end());
        qu.insert(qu.end(), qb.begin(), qb.end());
        const auto fa = mean_difference(pa, qa), fb = mean_difference(pb, qb), fu = mean_difference(pu, qu);
        for (std::size_t i = 0; i < 16; ++i) {
            const double w = (na * fa[i] + nb * fb[i]) / static_cast<double>(na + nb);
            CHECK(std::abs(fu[i] - w) <= 1e-5);
        }
        const auto fv = FunctionVector::make("t", "T1", 0, fu, 1, 1, 0);
        double ss = 0;
        for (float x : fu) ss += static_cast<double>(x) * x;
        CHECK(std::abs(fv.l2_norm - std::sqrt(ss)) <= 1e-6 * std::sqrt(ss));
    }
}

TEST_CASE("extraction with identical prompt sets gives the zero vector") {
    auto cfg = small_config();
    cfg.contrast.derange = false;
    const auto& task = micro().task("first_letter");
    const auto fv = extract_fv(model(), task, task.templates[0], 1, cfg);
    for (float x : fv.vector) CHECK(x == 0.0f);
    CHECK(fv.n_pos == 4);
}

TEST_CASE("extraction on a constant residual stream gives the zero vector") {
    auto arch = fixture::tiny_arch(false, 256);
    auto w = fixture::random_weights(arch, 4);
    for (auto& t : w) {
        const bool keep = t.name == "token_embedding" || t.name.find("norm") != std::string::npos ||
                          t.name.rfind("unembed", 0) == 0;
        if (!keep) std::fill(t.data.begin(), t.data.end(), 0.0f);
    }
    auto& emb = fixture::find_tensor(w, "token_embedding");
    for (std::size_t r = 1; r < 256; ++r) std::copy_n(emb.data.begin(), 32, emb.data.begin() + r * 32);
    const auto m = Model::from_tensors(arch, w, BpeTokenizer::byte_level());
    const auto& task = micro().task("country_capital");
    const int layers[] = {0, 1};
    for (const auto& fv : extract_fvs(m, task, task.templates[2], layers, small_config()))
        for (float x : fv.vector) CHECK(x == 0.0f);
}

TEST_CASE("extraction is deterministic and layer-batched") {
    const auto& task = micro().task("country_capital");
    const int layers[] = {0, 1};
    auto cfg = small_config();
    const auto a = extract_fvs(model(), task, task.templates[1], layers, cfg);
    cfg.threads = 3;
    const auto b = extract_fvs(model(), task, task.templates[1], layers, cfg);
    CHECK(a == b);
    CHECK(extract_fv(model(), task, task.templates[1], 1, small_config()) == a[1]);
    CHECK(a[0].l2_norm > 0.0);
    CHECK_THROWS_AS(extract_fv(model(), task, task.templates[1], 2, cfg), Error);
}

TEST_CASE("zero alpha and zero vector reproduce the zero-shot baseline") {
    const auto& task = micro().task("country_capital");
    const auto& tmpl = task.templates[0];
    const auto queries = select_queries(task, 6, 1);
    const auto fv = extract_fv(model(), task, tmpl, 0, small_config());
    const auto base = baselines(model(), task, tmpl, queries, 0, 1);
    CHECK(steer_eval(model(), fv, task, tmpl, 0, 0.0, queries).accuracy == base.zero_shot_acc);
    const auto zero = FunctionVector::make(task.name(), tmpl.id, 1, std::vector<float>(32, 0.0f), 1, 1, 0);
    for (double alpha : {0.5, 3.0, 5.0})
        CHECK(steer_eval(model(), zero, task, tmpl, 1, alpha, queries).accuracy == base.zero_shot_acc);
    for (const auto& q : queries) {
        const InterventionPlan plan{1, zero.vector, 4.0f};
        CHECK(model().generate_greedy(zero_shot_prompt(tmpl, q), 5, &plan) ==
              model().generate_greedy(zero_shot_prompt(tmpl, q), 5));
    }
}

TEST_CASE("single-query accuracy matches a direct generation check") {
    const auto& task = micro().task("first_letter");
    const auto& tmpl = task.templates[4];
    const auto fv = extract_fv(model(), task, tmpl, 1, small_config());
    for (const auto& q : select_queries(task, 4, 2)) {
        const ExamplePair one[] = {q};
        const InterventionPlan plan{1, fv.vector, 2.0f};
        const auto text = model().generate_greedy(tmpl.render(q.input), task.info.max_new_tokens, &plan);
        const auto out = steer_eval(model(), fv, task, tmpl, 1, 2.0, one);
        CHECK(out.accuracy == (contains_ci(text, q.output) ? 1.0 : 0.0));
        CHECK(out.n_queries == 1);
    }
    // A query whose gold string is the steered output itself.
    const ExamplePair q = select_queries(task, 1, 2)[0];
    const InterventionPlan plan{1, fv.vector, 2.0f};
    const auto text = model().generate_greedy(tmpl.render(q.input), task.info.max_new_tokens, &plan);
    if (!trim(text).empty()) {
        const ExamplePair rigged[] = {{q.input, trim(text), {}, {}}};
        CHECK(steer_eval(model(), fv, task, tmpl, 1, 2.0, rigged).accuracy == 1.0);
    }
}

TEST_CASE("refinement alphas follow the grid rule") {
    SweepGrid g;
    CHECK(g.alphas.size() == 8);
    CHECK(refinement_alphas(g, 1.5, g.alphas) == std::vector<double>{1.25, 1.75});
    CHECK(refinement_alphas(g, 0.5, g.alphas) == std::vector<double>{0.25, 0.75});
    CHECK(refinement_alphas(g, 5.0, g.alphas) == std::vector<double>{4.5, 4.75, 5.25, 5.5});
    g.refinement_step = 0.0;
    g.layers = {0};
    CHECK_THROWS_AS(g.validate(), Error);
    SweepGrid empty;
    CHECK_THROWS_AS(empty.validate(), Error);
    SweepGrid unordered = SweepGrid::with_all_layers(2);
    unordered.alphas = {1.0, 0.5};
    CHECK_THROWS_AS(unordered.validate(), Error);
}

TEST_CASE("best selection prefers accuracy, then lower layer, then lower alpha") {
    std::vector<EvalOutcome> t{{"t", "T1", "T1", 1, 0.5, 0.2, 1, 5},
                               {"t", "T1", "T1", 0, 2.0, 0.2, 1, 5},
                               {"t", "T1", "T1", 0, 1.0, 0.2, 1, 5}};
    CHECK(select_best(t).alpha == 1.0);
    t.push_back({"t", "T1", "T1", 1, 4.0, 0.4, 2, 5});
    CHECK(select_best(t).layer == 1);
}

TEST_CASE("sweep covers the coarse grid, refines at the best layer and dominates its table") {
    const auto& task = micro().task("first_letter");
    const auto& tmpl = task.templates[0];
    const int layers[] = {0, 1};
    const auto fvs = extract_fvs(model(), task, tmpl, layers, small_config());
    auto grid = SweepGrid::with_all_layers(2);
    const auto queries = select_queries(task, 4, 1);
    const auto r = sweep(model(), task, tmpl, fvs, grid, queries);
    int coarse = 0, refined = 0;
    for (const auto& o : r.table) {
        CHECK(r.best.accuracy >= o.accuracy);
        bool in_grid = false;
        for (double a : grid.alphas) in_grid = in_grid || a == o.alpha;
        (in_grid ? coarse : refined)++;
        if (!in_grid) CHECK(o.layer == r.best.layer);
    }
    CHECK(coarse == 16);
    CHECK(refined >= 1);
    CHECK(refined <= 4);
    const auto again = sweep(model(), task, tmpl, fvs, grid, queries, {.threads = 2});
    CHECK(again.table == r.table);
    grid.layers.clear();
    CHECK_THROWS_AS(sweep(model(), task, tmpl, fvs, grid, queries), Error);
}

TEST_CASE("sweep tie-break on a uniformly failing task") {
    const auto& task = micro().task("country_capital");
    const auto& tmpl = task.templates[0];
    const auto zero = FunctionVector::make(task.name(), tmpl.id, 0, std::vector<float>(32, 0.0f), 1, 1, 0);
    auto zero1 = zero;
    zero1.layer = 1;
    const FunctionVector fvs[] = {zero, zero1};
    const std::vector<ExamplePair> impossible{{"France", "\x01\x02\x03", {}, {}}};
    const auto r = sweep(model(), task, tmpl, fvs, SweepGrid::with_all_layers(2), impossible);
    CHECK(r.best.layer == 0);
    CHECK(r.best.alpha == 0.25);
    CHECK(r.table.size() == 18);
}

TEST_CASE("IID gate uses a strict threshold") {
    auto outcome = [](double acc) { return EvalOutcome{"t", "T1", "T1", 0, 1.0, acc, 0, 50}; };
    const EvalOutcome tenth[] = {outcome(0.05), outcome(0.15)};
    CHECK_FALSE(iid_gate(tenth).gated);
    CHECK(iid_gate(tenth).mean_iid == doctest::Approx(0.10));
    const EvalOutcome exact[] = {outcome(0.10)};
    CHECK_FALSE(iid_gate(exact).gated);
    const EvalOutcome low[] = {outcome(0.028)};
    CHECK_FALSE(iid_gate(low).gated);
    const EvalOutcome high[] = {outcome(0.738)};
    CHECK(iid_gate(high).gated);
    CHECK_THROWS_AS(iid_gate(std::span<const EvalOutcome>{}), Error);

    Rng rng(4);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<EvalOutcome> v;
        for (std::size_t i = 0, n = 1 + rng.below(8); i < n; ++i) v.push_back(outcome(rng.below(51) / 50.0));
        const auto before = iid_gate(v);
        v.push_back(outcome(std::min(1.0, before.mean_iid + 0.02 * (1 + rng.below(5)))));
        if (before.gated) CHECK(iid_gate(v).gated);
    }
}

TEST_CASE("baselines are deterministic and collapse at k = 0") {
    const auto& task = micro().task("first_letter");
    const auto& tmpl = task.templates[3];
    const auto queries = select_queries(task, 5, 9);
    const auto a = baselines(model(), task, tmpl, queries, 5, 9);
    CHECK(a == baselines(model(), task, tmpl, queries, 5, 9, 2));
    const auto z = baselines(model(), task, tmpl, queries, 0, 9);
    CHECK(z.few_shot_acc == z.zero_shot_acc);
    CHECK(z.zero_shot_acc == a.zero_shot_acc);
    CHECK_THROWS_AS(baselines(model(), task, tmpl, queries, 40, 9), Error);
}

TEST_CASE("FV store round trip and errors") {
    FvStore s;
    s.put(FunctionVector::make("antonym", "T1", 3, {1, 2, 3}, 20, 20, 7));
    s.put(FunctionVector::make("antonym", "T2", 3, {0, 0, -1}, 20, 20, 7));
    s.put(FunctionVector::make("antonym", "T2", 3, {0, 0, -1}, 20, 20, 7));
    CHECK(s.size() == 2);
    CHECK_THROWS_AS(s.put(FunctionVector::make("antonym", "T2", 3, {0, 1, -1}, 20, 20, 7)), Error);
    const auto bytes = s.encode();
    CHECK(bytes.substr(0, 4) == "XFVS");
    const auto back = FvStore::decode(bytes);
    CHECK(back.get("antonym", "T1", 3, 7) == s.get("antonym", "T1", 3, 7));
    CHECK(back.encode() == bytes);
    try {
        (void)back.get("antonym", "T3", 3, 7);
        FAIL("expected store error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::store);
    }
}

TEST_CASE("outcome table CSV") {
    const EvalOutcome o[] = {{"antonym", "T1", "T2", 3, 1.25, 0.42, 21, 50}};
    const auto t = parse_csv(outcomes_csv(o));
    CHECK(t.header == std::vector<std::string>{"task", "source", "target", "layer", "alpha", "accuracy", "n_queries"});
    CHECK(t.rows[0] == std::vector<std::string>{"antonym", "T1", "T2", "3", "1.25", "0.42", "50"});
}
