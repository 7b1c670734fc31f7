#include "fvlab/patching/patching.hpp"

#include <cmath>
#include <limits>

#include "fvlab/common/error.hpp"
#include "fvlab/common/parallel.hpp"
#include "fvlab/common/text.hpp"

namespace fvlab {

namespace {

InterventionPlan plan_for(const Steering& s) {
    return {s.layer, s.fv.vector, static_cast<float>(s.alpha), PositionMode::all_positions};
}

struct QueryRuns {
    bool clean = false;
    bool corrupted = false;
    bool patched = false;
};

QueryRuns run_query(const Model& model, const TaskSpec& task, const std::vector<int>& prompt, const ExamplePair& gold,
                    const InterventionPlan& clean_plan, const InterventionPlan& corrupt_plan, int layer,
                    PositionMode positions, bool want_baselines) {
    const int max_new = task.info.max_new_tokens;
    GreedyOptions clean_opts;
    clean_opts.plan = &clean_plan;
    clean_opts.capture_layer = layer;
    const auto clean = model.generate_traced(prompt, max_new, clean_opts);

    GreedyOptions patch_opts;
    patch_opts.plan = &corrupt_plan;
    patch_opts.replay = &clean.captures;
    patch_opts.replay_layer = layer;
    patch_opts.replay_positions = positions;
    const auto patched = model.generate_traced(prompt, max_new, patch_opts);

    QueryRuns r;
    r.clean = match_answer(task, clean.text, gold);
    r.patched = match_answer(task, patched.text, gold);
    if (want_baselines) {
        GreedyOptions corrupt_opts;
        corrupt_opts.plan = &corrupt_plan;
        r.corrupted = match_answer(task, model.generate_traced(prompt, max_new, corrupt_opts).text, gold);
    }
    return r;
}

void check_layer(const Model& model, int layer) {
    if (layer < 0 || layer >= model.arch().n_layers)
        fail(ErrorKind::range, "patch layer " + std::to_string(layer) + " outside [0, " +
                                   std::to_string(model.arch().n_layers) + ")");
}

double normalized_recovery(double patched, double clean, double corrupted) {
    if (clean == corrupted) return std::numeric_limits<double>::quiet_NaN();
    return (patched - corrupted) / (clean - corrupted);
}

}  // namespace

PatchResult run_patch(const Model& model, const TaskSpec& task, const PatchConfig& config, const Steering& clean,
                      const Steering& corrupted, bool gated, int threads) {
    check_layer(model, config.layer);
    PatchResult result;
    result.config = config;
    if (!gated) {
        result.skipped = true;
        result.normalized = std::numeric_limits<double>::quiet_NaN();
        return result;
    }
    if (config.queries.empty()) fail(ErrorKind::insufficient_data, "no queries to patch");
    const TemplateSpec& tmpl = task.find_template(config.clean_template);
    const auto clean_plan = plan_for(clean), corrupt_plan = plan_for(corrupted);

    const std::size_t n = config.queries.size();
    std::vector<QueryRuns> runs(n);
    parallel_for(n, threads, [&](std::size_t i) {
        const auto prompt = model.encode(zero_shot_prompt(tmpl, config.queries[i]));
        runs[i] = run_query(model, task, prompt, config.queries[i], clean_plan, corrupt_plan, config.layer,
                            config.positions, true);
    });
    int c = 0, k = 0, p = 0;
    for (const auto& r : runs) {
        c += r.clean;
        k += r.corrupted;
        p += r.patched;
    }
    const double dn = static_cast<double>(n);
    result.clean_acc = c / dn;
    result.corrupted_acc = k / dn;
    result.recovery = p / dn;
    result.normalized = normalized_recovery(result.recovery, result.clean_acc, result.corrupted_acc);
    return result;
}

PatchSweep layer_sweep_patch(const Model& model, const TaskSpec& task, PatchConfig config, const Steering& clean,
                             const Steering& corrupted, bool gated, int threads) {
    PatchSweep sweep;
    for (int layer = 0; layer < model.arch().n_layers; ++layer) {
        config.layer = layer;
        sweep.results.push_back(run_patch(model, task, config, clean, corrupted, gated, threads));
        const auto& r = sweep.results.back();
        if (!r.skipped && (sweep.best_layer < 0 || r.recovery > sweep.max_recovery)) {
            sweep.best_layer = layer;
            sweep.max_recovery = r.recovery;
        }
    }
    return sweep;
}

FirstTokenLogits first_step_logits(const Model& model, const TemplateSpec& tmpl, const ExamplePair& query,
                                   const Steering& clean, const Steering& corrupted, int layer,
                                   PositionMode positions) {
    check_layer(model, layer);
    const auto prompt = model.encode(zero_shot_prompt(tmpl, query));
    const auto clean_plan = plan_for(clean), corrupt_plan = plan_for(corrupted);
    GreedyOptions c;
    c.plan = &clean_plan;
    c.capture_layer = layer;
    c.keep_step_logits = true;
    auto clean_trace = model.generate_traced(prompt, 1, c);
    GreedyOptions p;
    p.plan = &corrupt_plan;
    p.replay = &clean_trace.captures;
    p.replay_layer = layer;
    p.replay_positions = positions;
    p.keep_step_logits = true;
    auto patched = model.generate_traced(prompt, 1, p);
    return {std::move(clean_trace.step_logits.front()), std::move(patched.step_logits.front())};
}

PatchTally tally(std::span<const PatchResult> results) {
    PatchTally t;
    for (const auto& r : results) {
        ++t.attempted;
        (r.skipped ? t.skipped : t.analyzed) += 1;
    }
    return t;
}

std::string patch_csv(std::span<const PatchResult> results) {
    CsvWriter csv({"task", "clean", "corrupted", "layer", "recovery", "clean_acc", "corrupted_acc", "skipped",
                   "normalized_recovery"});
    for (const auto& r : results)
        csv.row({r.config.task, r.config.clean_template, r.config.corrupted_template, std::to_string(r.config.layer),
                 format_number(r.recovery), format_number(r.clean_acc), format_number(r.corrupted_acc),
                 r.skipped ? "1" : "0", format_number(r.normalized)});
    return csv.str();
}

}  // namespace fvlab
