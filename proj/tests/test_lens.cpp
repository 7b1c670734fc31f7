#include <algorithm>
#include <filesystem>

#include "doctest.h"
#include "fvlab/common/error.hpp"
#include "fvlab/common/rng.hpp"
#include "fvlab/common/text.hpp"
#include "fvlab/fixture/fixture.hpp"
#include "fvlab/lens/lens.hpp"

using namespace fvlab;

namespace {

const std::filesystem::path kMicro = std::filesystem::path(FVLAB_SOURCE_DIR) / "tests" / "data" / "micro";

const Battery& micro() {
    static const Battery b = load_battery(kMicro);
    return b;
}

const Model& model(bool llama = false) {
    static const Model g = fixture::make_model({.seed = 31}, fixture::battery_corpus(kMicro));
    static const Model l = fixture::make_model({.seed = 32, .llama_style = true}, fixture::battery_corpus(kMicro));
    return llama ? l : g;
}

// Unembedding sends token t to residual axis (t mod d_model).
Model axis_model(std::uint64_t seed) {
    const auto tok = fixture::train_bpe(fixture::battery_corpus(kMicro), 64);
    const auto arch = fixture::tiny_arch(false, tok.size());
    auto w = fixture::random_weights(arch, seed);
    auto& u = fixture::find_tensor(w, "unembed.weight");
    std::fill(u.data.begin(), u.data.end(), 0.0f);
    for (int t = 0; t < arch.vocab_size; ++t)
        u.data[static_cast<std::size_t>(t % arch.d_model) * arch.vocab_size + t] = t < arch.d_model ? 1.0f : 0.5f;
    auto& b = fixture::find_tensor(w, "unembed.bias");
    Rng rng(seed);
    for (auto& x : b.data) x = static_cast<float>(rng.normal() * 0.01);
    return Model::from_tensors(arch, w, tok);
}

const int kLayers[] = {0, 1};

}  // namespace

TEST_CASE("rank and top-k agree with a full sort") {
    Rng rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<float> s(40);
        for (auto& x : s) x = static_cast<float>(rng.below(10));
        std::vector<int> order(40);
        for (int i = 0; i < 40; ++i) order[static_cast<std::size_t>(i)] = i;
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            return s[static_cast<std::size_t>(a)] != s[static_cast<std::size_t>(b)]
                       ? s[static_cast<std::size_t>(a)] > s[static_cast<std::size_t>(b)]
                       : a < b;
        });
        for (std::size_t r = 0; r < 40; ++r) CHECK(rank_of(s, order[r]) == r);
        const auto top = top_k_ids(s, 7);
        CHECK(std::equal(top.begin(), top.end(), order.begin()));
    }
}

TEST_CASE("lens fractions match a brute-force ranking of the full vocabulary") {
    const auto& task = micro().task("country_capital");
    const auto& tmpl = task.templates[0];
    const auto queries = select_queries(task, 3, 1);
    const auto p = logit_lens(model(), task, tmpl, queries, kLayers);
    for (int layer : kLayers) {
        int h1 = 0, h5 = 0, h10 = 0;
        for (const auto& q : queries) {
            const auto rec = model().forward_with_taps(model().encode(tmpl.render(q.input)),
                                                       TapRequest::final_position({layer}));
            const auto logits = model().lens_logits(rec.tap(layer));
            std::vector<std::pair<float, int>> all;
            for (std::size_t i = 0; i < logits.size(); ++i) all.emplace_back(-logits[i], static_cast<int>(i));
            std::sort(all.begin(), all.end());
            const auto gold = gold_first_tokens(model(), q);
            std::size_t best = all.size();
            for (std::size_t r = 0; r < all.size(); ++r)
                if (std::find(gold.begin(), gold.end(), all[r].second) != gold.end()) best = std::min(best, r);
            h1 += best < 1;
            h5 += best < 5;
            h10 += best < 10;
        }
        CHECK(p.per_layer.at(layer).top1 == h1 / 3.0);
        CHECK(p.per_layer.at(layer).top5 == h5 / 3.0);
        CHECK(p.per_layer.at(layer).top10 == h10 / 3.0);
    }
}

TEST_CASE("top-k fractions are nested and final-layer top-1 equals greedy first-token accuracy") {
    for (bool llama : {false, true}) {
        for (const auto& task : micro().tasks) {
            for (const auto& tmpl : task.templates) {
                const auto queries = select_queries(task, 12, 5);
                const auto p = logit_lens(model(llama), task, tmpl, queries, kLayers);
                for (const auto& [layer, k] : p.per_layer) {
                    CHECK(k.top1 <= k.top5);
                    CHECK(k.top5 <= k.top10);
                    CHECK(k.top10 <= 1.0);
                }
                CHECK(p.per_layer.at(1).top1 == greedy_first_token_accuracy(model(llama), task, tmpl, queries));
            }
        }
    }
}

TEST_CASE("a zero FV projects onto the unembedding bias") {
    const auto& task = micro().task("first_letter");
    const auto zero = FunctionVector::make(task.name(), "T1", 0, std::vector<float>(32, 0.0f), 1, 1, 0);
    const auto p = fv_vocab_projection(model(), zero, task);
    const auto& bias = model().tensor("unembed.bias").data;
    const auto best = static_cast<int>(std::max_element(bias.begin(), bias.end()) - bias.begin());
    CHECK(p.top_ids.front() == best);
    CHECK(p.top_tokens.size() == 50);
    for (std::size_t i = 1; i < p.top_tokens.size(); ++i) CHECK(p.top_tokens[i - 1].second >= p.top_tokens[i].second);
    CHECK(fv_vocab_projection(model(), zero, task).to_json() == p.to_json());
}

TEST_CASE("a one-hot FV ranks its token first under an axis-aligned unembedding") {
    const auto m = axis_model(3);
    const auto& task = micro().task("first_letter");
    for (int axis : {0, 5, 17, 31}) {
        std::vector<float> v(32, 0.0f);
        v[static_cast<std::size_t>(axis)] = 1.0f;
        const auto p = fv_vocab_projection(m, FunctionVector::make(task.name(), "T1", 0, v, 1, 1, 0), task);
        CHECK(p.top_ids.front() == axis);
    }
}

TEST_CASE("correct fraction counts tokens that spell a task answer") {
    const auto& task = micro().task("first_letter");
    CHECK(token_matches_task(" a", task));
    CHECK(token_matches_task("B", task));
    CHECK_FALSE(token_matches_task("  ", task));
    CHECK_FALSE(token_matches_task("ab", task));
    TaskSpec none = task;
    for (auto& e : none.examples) e.output = "\x01\x02\x03\x04";
    const auto p = fv_vocab_projection(model(), FunctionVector::make("x", "T1", 0, std::vector<float>(32, 1.0f), 1, 1, 0),
                                       none);
    CHECK(p.correct_fraction == 0.0);
}

TEST_CASE("polarity readout on hand-placed vectors") {
    const std::vector<float> dir{1, 0, 0};
    const std::vector<std::vector<float>> hs{{2, 1, 0}, {-1, 3, 0}, {0, 1, 1}, {0.5f, -4, 2}};
    const char* expected[] = {"negative", "negative", "negative", "positive"};
    int correct = 0;
    for (std::size_t i = 0; i < 4; ++i) correct += polarity_correct(hs[i], dir, expected[i]);
    CHECK(correct == 1);
    CHECK_FALSE(polarity_correct(std::vector<float>{0, 1, 0}, dir, "negative"));
    CHECK_FALSE(polarity_correct(std::vector<float>{0, 1, 0}, dir, "positive"));
    CHECK(polarity_correct(std::vector<float>{-1, 0, 0}, dir, "positive"));
}

TEST_CASE("sentiment direction errors and profile shape") {
    CHECK_THROWS_AS(sentiment_direction(model(), {{}, {"bad"}}), Error);
    try {
        (void)sentiment_direction(model(), {{"good"}, {"good"}});
        FAIL("expected degenerate direction");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::degenerate_input);
    }
    const auto lex = load_lexicon(std::filesystem::path(FVLAB_SOURCE_DIR) / "data" / "lexicon" / "sentiment.json");
    CHECK(lex.positive.size() == 12);
    CHECK(lex.negative.size() == 12);
    const auto dir = sentiment_direction(model(), lex);
    CHECK(l2_norm(dir) == doctest::Approx(1.0));
    const auto& task = micro().task("country_capital");
    const auto p = sentiment_polarity_readability(model(), task, task.templates[0], select_queries(task, 6, 1), kLayers, lex);
    CHECK(p.polarity);
    for (const auto& [layer, k] : p.per_layer) {
        CHECK(k.top1 == k.top10);
        CHECK(k.top1 >= 0.0);
    }
}

TEST_CASE("quadrant classification") {
    CHECK(quadrant_classify("country_capital", 0.880, 0.056).quadrant == Quadrant::steerable_only);
    CHECK(quadrant_classify("x", 0.05, 0.05).quadrant == Quadrant::neither);
    CHECK(quadrant_classify("x", 0.50, 0.50).quadrant == Quadrant::both);
    CHECK(quadrant_classify("x", 0.10, 0.50).quadrant == Quadrant::readable_only);
    CHECK(quadrant_classify("x", 0.50, 0.10).quadrant == Quadrant::steerable_only);
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        const auto c = quadrant_classify("x", rng.uniform(), rng.uniform());
        const auto expect = c.readable ? (c.steerable ? Quadrant::both : Quadrant::readable_only)
                                       : (c.steerable ? Quadrant::steerable_only : Quadrant::neither);
        CHECK(c.quadrant == expect);
    }
}

TEST_CASE("post-steering delta") {
    const auto& task = micro().task("country_capital");
    const auto& tmpl = task.templates[0];
    const auto queries = select_queries(task, 6, 1);
    const auto fv = FunctionVector::make(task.name(), tmpl.id, 0, std::vector<float>(32, 0.3f), 1, 1, 0);
    const auto d0 = post_steering_delta(model(), fv, task, tmpl, 0, 0.0, queries, kLayers);
    for (const auto& [layer, v] : d0.delta_top10) CHECK(v == 0.0);

    // Steering hard along the axis that the gold first token reads from.
    const auto m = axis_model(9);
    const ExamplePair q = queries[0];
    const int gold = gold_first_tokens(m, q)[0];
    std::vector<float> v(32, 0.0f);
    v[static_cast<std::size_t>(gold % 32)] = 1.0f;
    const std::vector<ExamplePair> same(4, q);
    const auto strong = FunctionVector::make(task.name(), tmpl.id, 1, v, 1, 1, 0);
    const auto zero = logit_lens(m, task, tmpl, same, kLayers);
    const auto d = post_steering_delta(m, strong, task, tmpl, 1, 1000.0, same, kLayers);
    CHECK(d.delta_top10.at(1) == doctest::Approx(1.0 - zero.per_layer.at(1).top10));
}

TEST_CASE("lens CSV layout") {
    LensProfile p{"antonym", "T1", "zero_shot", {{0, {0.1, 0.2, 0.3}}, {1, {0, 0, 0.5}}}, 10, false};
    const LensProfile ps[] = {p};
    const auto t = parse_csv(lens_csv(ps));
    CHECK(t.header == std::vector<std::string>{"task", "template", "condition", "layer", "top1", "top5", "top10"});
    CHECK(t.rows.size() == 2);
    CHECK(t.rows[1][6] == "0.5");
    CHECK(pooled_max_top10(ps) == 0.5);
}
