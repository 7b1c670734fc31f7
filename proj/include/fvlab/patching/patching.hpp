#pragma once

#include <span>
#include <string>
#include <vector>

#include "fvlab/fv/fv.hpp"

namespace fvlab {

// A steering configuration: which FV, where, how hard.
struct Steering {
    FunctionVector fv;
    int layer = 0;
    double alpha = 0.0;
};

// Queries render zero-shot under the clean template for every run, so the
// clean and corrupted sequences stay position-aligned.
struct PatchConfig {
    std::string task;
    std::string clean_template;
    std::string corrupted_template;
    int layer = 0;
    std::vector<ExamplePair> queries;
    PositionMode positions = PositionMode::all_positions;
};

struct PatchResult {
    PatchConfig config;
    double recovery = 0.0;       // accuracy of the patched run
    double clean_acc = 0.0;
    double corrupted_acc = 0.0;
    // (recovery - corrupted) / (clean - corrupted); NaN when clean == corrupted.
    double normalized = 0.0;
    bool skipped = false;
};

// Clean run steers with `clean`, corrupted with `corrupted`; the patched run
// is the corrupted run with resid_post at config.layer overwritten, decode
// step by decode step, from the clean run. Ungated tasks come back skipped.
PatchResult run_patch(const Model& model, const TaskSpec& task, const PatchConfig& config, const Steering& clean,
                      const Steering& corrupted, bool gated, int threads = 1);

struct PatchSweep {
    std::vector<PatchResult> results;  // one per layer, ascending
    int best_layer = -1;               // lowest layer on ties; -1 when skipped
    double max_recovery = 0.0;
};

PatchSweep layer_sweep_patch(const Model& model, const TaskSpec& task, PatchConfig config, const Steering& clean,
                             const Steering& corrupted, bool gated, int threads = 1);

struct FirstTokenLogits {
    std::vector<float> clean;
    std::vector<float> patched;
};

// Next-token logits of the first decode step for one query.
FirstTokenLogits first_step_logits(const Model& model, const TemplateSpec& tmpl, const ExamplePair& query,
                                   const Steering& clean, const Steering& corrupted, int layer,
                                   PositionMode positions = PositionMode::all_positions);

struct PatchTally {
    int attempted = 0;
    int analyzed = 0;
    int skipped = 0;
};

PatchTally tally(std::span<const PatchResult> results);

std::string patch_csv(std::span<const PatchResult> results);

}  // namespace fvlab
