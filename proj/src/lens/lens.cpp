#include "fvlab/lens/lens.hpp"

#include <algorithm>
#include <cmath>

#include "fvlab/common/error.hpp"
#include "fvlab/common/parallel.hpp"
#include "fvlab/common/text.hpp"

namespace fvlab {

double LensProfile::max_top10() const {
    double best = 0.0;
    for (const auto& [layer, k] : per_layer) best = std::max(best, k.top10);
    return best;
}

std::vector<int> gold_first_tokens(const Model& model, const ExamplePair& gold) {
    std::vector<int> ids;
    auto add = [&](const std::string& answer) {
        const auto toks = model.encode(" " + answer);
        if (!toks.empty() && std::find(ids.begin(), ids.end(), toks[0]) == ids.end()) ids.push_back(toks[0]);
    };
    add(gold.output);
    for (const auto& a : gold.alternatives) add(a);
    return ids;
}

std::size_t rank_of(std::span<const float> scores, int id) {
    const float s = scores[static_cast<std::size_t>(id)];
    std::size_t rank = 0;
    for (std::size_t j = 0; j < scores.size(); ++j)
        if (scores[j] > s || (scores[j] == s && static_cast<int>(j) < id)) ++rank;
    return rank;
}

std::vector<int> top_k_ids(std::span<const float> scores, std::size_t k) {
    std::vector<int> ids(scores.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
    k = std::min(k, ids.size());
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), [&](int a, int b) {
        const float sa = scores[static_cast<std::size_t>(a)], sb = scores[static_cast<std::size_t>(b)];
        return sa != sb ? sa > sb : a < b;
    });
    ids.resize(k);
    return ids;
}

namespace {

std::string condition_label(const InterventionPlan* plan) {
    if (!plan) return "zero_shot";
    return "post_steering:L" + std::to_string(plan->layer) + "@" + format_number(plan->alpha);
}

// Per query, per layer: best rank over gold ids.
std::vector<std::vector<std::size_t>> gold_ranks(const Model& model, const TemplateSpec& tmpl,
                                                 std::span<const ExamplePair> queries, std::span<const int> layers,
                                                 const InterventionPlan* plan, int threads) {
    std::vector<std::vector<std::size_t>> ranks(queries.size());
    const std::vector<int> tap_layers(layers.begin(), layers.end());
    parallel_for(queries.size(), threads, [&](std::size_t q) {
        const auto ids = model.encode(tmpl.render(queries[q].input));
        const auto rec = model.forward_with_taps(ids, TapRequest::final_position(tap_layers), plan);
        const auto gold = gold_first_tokens(model, queries[q]);
        for (int l : tap_layers) {
            const auto logits = model.lens_logits(rec.tap(l));
            std::size_t best = logits.size();
            for (int g : gold)
                if (g < static_cast<int>(logits.size())) best = std::min(best, rank_of(logits, g));
            ranks[q].push_back(best);
        }
    });
    return ranks;
}

}  // namespace

LensProfile logit_lens(const Model& model, const TaskSpec& task, const TemplateSpec& tmpl,
                       std::span<const ExamplePair> queries, std::span<const int> layers, const InterventionPlan* plan,
                       int threads) {
    if (queries.empty()) fail(ErrorKind::insufficient_data, "logit lens needs at least one query");
    const auto ranks = gold_ranks(model, tmpl, queries, layers, plan, threads);
    LensProfile p;
    p.task = task.name();
    p.tmpl = tmpl.id;
    p.condition = condition_label(plan);
    p.n_prompts = static_cast<int>(queries.size());
    const double n = static_cast<double>(queries.size());
    for (std::size_t j = 0; j < layers.size(); ++j) {
        int h1 = 0, h5 = 0, h10 = 0;
        for (const auto& r : ranks) {
            h1 += r[j] < 1;
            h5 += r[j] < 5;
            h10 += r[j] < 10;
        }
        p.per_layer[layers[j]] = {h1 / n, h5 / n, h10 / n};
    }
    return p;
}

double greedy_first_token_accuracy(const Model& model, const TaskSpec& task, const TemplateSpec& tmpl,
                                   std::span<const ExamplePair> queries, const InterventionPlan* plan) {
    (void)task;
    int hits = 0;
    for (const auto& q : queries) {
        GreedyOptions opt;
        opt.plan = plan;
        const auto trace = model.generate_traced(model.encode(tmpl.render(q.input)), 1, opt);
        const auto gold = gold_first_tokens(model, q);
        hits += !trace.tokens.empty() && std::find(gold.begin(), gold.end(), trace.tokens[0]) != gold.end();
    }
    return queries.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(queries.size());
}

nlohmann::json VocabProjection::to_json() const {
    auto tokens = nlohmann::json::array();
    for (std::size_t i = 0; i < top_tokens.size(); ++i)
        tokens.push_back({{"id", top_ids[i]}, {"token", top_tokens[i].first}, {"score", top_tokens[i].second}});
    return {{"fv", fv_id}, {"correct_fraction", correct_fraction}, {"top_tokens", tokens}};
}

bool token_matches_task(std::string_view token, const TaskSpec& task) {
    const auto t = trim(token);
    if (t.empty()) return false;
    for (const auto& e : task.examples) {
        if (equals_ci(t, e.output)) return true;
        for (const auto& a : e.alternatives)
            if (equals_ci(t, a)) return true;
    }
    return false;
}

VocabProjection fv_vocab_projection(const Model& model, const FunctionVector& fv, const TaskSpec& task,
                                    std::size_t top_n) {
    if (static_cast<int>(fv.vector.size()) != model.arch().d_model)
        fail(ErrorKind::parameter, "function vector length must equal d_model");
    const auto scores = model.lens_logits(fv.vector);
    VocabProjection p;
    p.fv_id = fv.id();
    p.top_ids = top_k_ids(scores, top_n);
    const auto& tok = model.tokenizer();
    int hits = 0;
    for (int id : p.top_ids) {
        const std::string text = id < tok.size() ? tok.token_bytes(id) : "<" + std::to_string(id) + ">";
        hits += token_matches_task(text, task);
        p.top_tokens.emplace_back(text, scores[static_cast<std::size_t>(id)]);
    }
    p.correct_fraction = p.top_ids.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(p.top_ids.size());
    return p;
}

Lexicon load_lexicon(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) fail(ErrorKind::io, "no lexicon at " + path.string());
    try {
        const auto j = nlohmann::json::parse(read_text_file(path));
        return {j.at("positive").get<std::vector<std::string>>(), j.at("negative").get<std::vector<std::string>>()};
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, path.string() + ": " + e.what());
    }
}

std::vector<float> sentiment_direction(const Model& model, const Lexicon& lexicon) {
    if (lexicon.positive.empty() || lexicon.negative.empty())
        fail(ErrorKind::parameter, "sentiment lexicon needs positive and negative words");
    const auto d = static_cast<std::size_t>(model.arch().d_model);
    auto mean_embedding = [&](const std::vector<std::string>& words) {
        std::vector<double> acc(d, 0.0);
        for (const auto& w : words) {
            const auto ids = model.encode(" " + w);
            for (int id : ids) {
                const auto e = model.token_embedding(id);
                for (std::size_t i = 0; i < d; ++i) acc[i] += e[i] / static_cast<double>(ids.size() * words.size());
            }
        }
        return acc;
    };
    const auto pos = mean_embedding(lexicon.positive);
    const auto neg = mean_embedding(lexicon.negative);
    std::vector<double> diff(d);
    double ss = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        diff[i] = neg[i] - pos[i];
        ss += diff[i] * diff[i];
    }
    if (!(ss > 0.0)) fail(ErrorKind::degenerate_input, "positive and negative lexicon embeddings coincide");
    const double norm = std::sqrt(ss);
    std::vector<float> out(d);
    for (std::size_t i = 0; i < d; ++i) out[i] = static_cast<float>(diff[i] / norm);
    return out;
}

bool polarity_correct(std::span<const float> normed, std::span<const float> direction, std::string_view polarity) {
    double dot = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < normed.size(); ++i) {
        dot += static_cast<double>(normed[i]) * direction[i];
        nn += static_cast<double>(normed[i]) * normed[i];
    }
    if (nn == 0.0 || dot == 0.0) return false;
    return polarity == "positive" ? dot < 0.0 : dot > 0.0;
}

LensProfile sentiment_polarity_readability(const Model& model, const TaskSpec& task, const TemplateSpec& tmpl,
                                           std::span<const ExamplePair> queries, std::span<const int> layers,
                                           const Lexicon& lexicon, const InterventionPlan* plan, int threads) {
    if (queries.empty()) fail(ErrorKind::insufficient_data, "polarity readout needs at least one query");
    const auto direction = sentiment_direction(model, lexicon);
    const std::vector<int> tap_layers(layers.begin(), layers.end());
    std::vector<std::vector<char>> hits(queries.size());
    parallel_for(queries.size(), threads, [&](std::size_t q) {
        const auto rec = model.forward_with_taps(model.encode(tmpl.render(queries[q].input)),
                                                 TapRequest::final_position(tap_layers), plan);
        const std::string polarity = queries[q].polarity.empty() ? "negative" : queries[q].polarity;
        for (int l : tap_layers) hits[q].push_back(polarity_correct(model.final_norm(rec.tap(l)), direction, polarity));
    });
    LensProfile p;
    p.task = task.name();
    p.tmpl = tmpl.id;
    p.condition = condition_label(plan);
    p.polarity = true;
    p.n_prompts = static_cast<int>(queries.size());
    for (std::size_t j = 0; j < tap_layers.size(); ++j) {
        int c = 0;
        for (const auto& h : hits) c += h[j];
        const double acc = static_cast<double>(c) / static_cast<double>(queries.size());
        p.per_layer[tap_layers[j]] = {acc, acc, acc};
    }
    return p;
}

double pooled_max_top10(std::span<const LensProfile> profiles) {
    std::map<int, std::pair<double, int>> sums;
    for (const auto& p : profiles)
        for (const auto& [layer, k] : p.per_layer) {
            sums[layer].first += k.top10;
            sums[layer].second += 1;
        }
    double best = 0.0;
    for (const auto& [layer, s] : sums) best = std::max(best, s.first / s.second);
    return best;
}

std::string to_string(Quadrant q) {
    switch (q) {
        case Quadrant::both: return "both";
        case Quadrant::readable_only: return "readable_only";
        case Quadrant::steerable_only: return "steerable_only";
        case Quadrant::neither: return "neither";
    }
    return "?";
}

QuadrantCell quadrant_classify(const std::string& task, double best_iid, double best_top10, double tau, double tau_r,
                               std::string run_id) {
    QuadrantCell c{task, std::move(run_id), best_top10 > tau_r, best_iid > tau, Quadrant::neither};
    c.quadrant = c.readable ? (c.steerable ? Quadrant::both : Quadrant::readable_only)
                            : (c.steerable ? Quadrant::steerable_only : Quadrant::neither);
    return c;
}

LensDelta lens_delta(const LensProfile& zero_shot, const LensProfile& steered) {
    LensDelta d{zero_shot.task, zero_shot.tmpl, {}, 0.0, 0};
    bool first = true;
    for (const auto& [layer, k] : steered.per_layer) {
        auto it = zero_shot.per_layer.find(layer);
        if (it == zero_shot.per_layer.end()) continue;
        const double delta = k.top10 - it->second.top10;
        d.delta_top10[layer] = delta;
        if (first || delta > d.max_delta) {
            d.max_delta = delta;
            d.max_layer = layer;
            first = false;
        }
    }
    return d;
}

LensDelta post_steering_delta(const Model& model, const FunctionVector& fv, const TaskSpec& task,
                              const TemplateSpec& tmpl, int layer, double alpha, std::span<const ExamplePair> queries,
                              std::span<const int> tap_layers, int threads) {
    const InterventionPlan plan{layer, fv.vector, static_cast<float>(alpha)};
    const auto zero = logit_lens(model, task, tmpl, queries, tap_layers, nullptr, threads);
    auto steered = logit_lens(model, task, tmpl, queries, tap_layers, &plan, threads);
    return lens_delta(zero, steered);
}

std::string lens_csv(std::span<const LensProfile> profiles) {
    CsvWriter csv({"task", "template", "condition", "layer", "top1", "top5", "top10"});
    for (const auto& p : profiles)
        for (const auto& [layer, k] : p.per_layer)
            csv.row({p.task, p.tmpl, p.condition, std::to_string(layer), format_number(k.top1), format_number(k.top5),
                     format_number(k.top10)});
    return csv.str();
}

}  // namespace fvlab
