#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "fvlab/battery/battery.hpp"
#include "fvlab/model/model.hpp"

namespace fvlab {

struct FunctionVector {
    std::string task;
    std::string tmpl;
    int layer = 0;
    std::vector<float> vector;
    int n_pos = 0;
    int n_neg = 0;
    std::uint64_t seed = 0;
    double l2_norm = 0.0;

    static FunctionVector make(std::string task, std::string tmpl, int layer, std::vector<float> vector, int n_pos,
                               int n_neg, std::uint64_t seed);
    std::string id() const;
    bool operator==(const FunctionVector&) const = default;
};

double l2_norm(std::span<const float> v);

// Mean of `pos` minus mean of `neg`, accumulated in double.
std::vector<float> mean_difference(std::span<const std::vector<float>> pos, std::span<const std::vector<float>> neg);

struct ExtractionConfig {
    int n_prompts = 20;
    int n_demos = 15;
    std::uint64_t seed = 0;
    int threads = 1;
    ContrastOptions contrast{};
};

// One FV per requested layer from a shared set of forward passes. Prompt i
// uses the i-th seeded extraction query and the same demo draw for every
// template of the task.
std::vector<FunctionVector> extract_fvs(const Model& model, const TaskSpec& task, const TemplateSpec& tmpl,
                                        std::span<const int> layers, const ExtractionConfig& config);
FunctionVector extract_fv(const Model& model, const TaskSpec& task, const TemplateSpec& tmpl, int layer,
                          const ExtractionConfig& config);

struct SweepGrid {
    std::vector<double> alphas{0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0};
    double refinement_step = 0.25;
    int refinement_radius = 2;
    std::vector<int> layers;

    static SweepGrid with_all_layers(int n_layers);
    void validate() const;
};

struct EvalOutcome {
    std::string task;
    std::string source;
    std::string target;
    int layer = 0;
    double alpha = 0.0;
    double accuracy = 0.0;
    int n_correct = 0;
    int n_queries = 0;

    bool operator==(const EvalOutcome&) const = default;
};

struct EvalOptions {
    int threads = 1;
    PositionMode positions = PositionMode::all_positions;
};

// Zero-shot rendering of each query under `target`, greedy decoding with
// the FV added at `layer`.
EvalOutcome steer_eval(const Model& model, const FunctionVector& fv, const TaskSpec& task, const TemplateSpec& target,
                       int layer, double alpha, std::span<const ExamplePair> queries, const EvalOptions& options = {});

// Accuracy of greedy generations for already-rendered prompts.
int count_correct(const Model& model, const TaskSpec& task, std::span<const std::string> prompts,
                  std::span<const ExamplePair> queries, const InterventionPlan* plan, int threads);

struct SweepResult {
    EvalOutcome best;
    std::vector<EvalOutcome> table;  // sorted by (layer, alpha)
};

// Highest accuracy wins; ties go to the lowest layer, then the lowest alpha.
const EvalOutcome& select_best(std::span<const EvalOutcome> outcomes);

// Alphas to add around `best`: best +/- k*step for k = 1..radius, positive
// and not already in `evaluated`, ascending.
std::vector<double> refinement_alphas(const SweepGrid& grid, double best, std::span<const double> evaluated);

// `fvs` must hold the source template's FV at every grid layer.
SweepResult sweep(const Model& model, const TaskSpec& task, const TemplateSpec& tmpl,
                  std::span<const FunctionVector> fvs, const SweepGrid& grid, std::span<const ExamplePair> queries,
                  const EvalOptions& options = {});

struct GateResult {
    bool gated = false;
    double mean_iid = 0.0;
};

GateResult iid_gate(std::span<const EvalOutcome> best_per_template, double threshold = 0.10);

struct BaselineRecord {
    std::string task;
    std::string tmpl;
    double zero_shot_acc = 0.0;
    double few_shot_acc = 0.0;
    int few_shot_k = 5;
    int n_queries = 0;

    bool operator==(const BaselineRecord&) const = default;
};

std::string zero_shot_prompt(const TemplateSpec& tmpl, const ExamplePair& query);

BaselineRecord baselines(const Model& model, const TaskSpec& task, const TemplateSpec& tmpl,
                         std::span<const ExamplePair> queries, int few_shot_k, std::uint64_t seed, int threads = 1);

// Append-only FV collection keyed by (task, template, layer, seed); stored in
// the "XFVS" container.
class FvStore {
public:
    using Key = std::tuple<std::string, std::string, int, std::uint64_t>;

    void put(const FunctionVector& fv);
    bool contains(const std::string& task, const std::string& tmpl, int layer, std::uint64_t seed) const;
    const FunctionVector& get(const std::string& task, const std::string& tmpl, int layer, std::uint64_t seed) const;
    std::size_t size() const { return vectors_.size(); }
    const std::map<Key, FunctionVector>& all() const { return vectors_; }

    std::string encode() const;
    static FvStore decode(std::string_view bytes);
    void save(const std::filesystem::path& path) const;
    static FvStore load(const std::filesystem::path& path);

private:
    std::map<Key, FunctionVector> vectors_;
};

std::string outcomes_csv(std::span<const EvalOutcome> outcomes);

}  // namespace fvlab
