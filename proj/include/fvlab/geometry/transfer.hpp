#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fvlab/fv/fv.hpp"
#include "fvlab/geometry/stats.hpp"

namespace fvlab {

struct TransferPair {
    std::string task;
    std::string source;
    std::string target;
    double cosine = 0.0;
    double ood_accuracy = 0.0;
    double source_iid = 0.0;
    int layer = 0;
    double alpha = 0.0;
    double source_norm = 0.0;
    bool within_style = false;

    bool operator==(const TransferPair&) const = default;
};

// Ordered (source, target) template ids, source != target, in registry order.
std::vector<std::pair<std::string, std::string>> enumerate_pairs(const TaskSpec& task);

// 0 when either vector is zero.
double cosine(std::span<const float> a, std::span<const float> b);

enum class OodLayerChoice { source_best, pair_best };

struct OodConfig {
    OodLayerChoice choice = OodLayerChoice::source_best;
    SweepGrid grid;            // pair_best only
    std::uint64_t fv_seed = 0;  // store key of the FVs to use
    EvalOptions eval{};
};

// `source_best` maps template id -> that template's best IID outcome.
std::vector<TransferPair> ood_matrix(const Model& model, const TaskSpec& task, const FvStore& store,
                                     const std::map<std::string, EvalOutcome>& source_best,
                                     std::span<const ExamplePair> queries, const OodConfig& config);

struct DissociationRecord {
    std::string task;
    std::string source;
    std::string target;
    double cosine = 0.0;
    double ood_accuracy = 0.0;
    double source_iid = 0.0;
    bool is_dissociation = false;
    bool iid_viable = false;
};

struct DissociationSummary {
    int n_pairs = 0;
    int n_dissociation = 0;
    int n_viable_dissociation = 0;
    double rate = 0.0;
};

std::vector<DissociationRecord> dissociation_scan(std::span<const TransferPair> pairs, double gate = 0.10,
                                                  DissociationThresholds t = {});
DissociationSummary summarize(std::span<const DissociationRecord> records);

struct StyleReport {
    double within_mean = 0.0;
    double across_mean = 0.0;
    double t = 0.0;
    double df = 0.0;
    double p = 1.0;
    int n_within = 0;
    int n_across = 0;
};

StyleReport style_compare(std::span<const TransferPair> pairs);

struct UtvReport {
    std::string task;
    int layer = 0;
    double pc1_fraction = 1.0;
    bool degenerate = false;
};

// All FVs must share `layer`; the usual call passes a task's 8 templates.
UtvReport utv_pca(std::span<const FunctionVector> fvs, int layer);

// Source FV norm against OOD accuracy over the pairs.
CorrelationReport norm_correlation(std::span<const TransferPair> pairs);

CorrelationReport pooled_correlation(std::span<const TransferPair> pairs);
// One report per task in first-seen order; constant tasks come back with defined = false.
std::vector<CorrelationReport> per_task_correlations(std::span<const TransferPair> pairs);

RegressionReport pair_regression(std::span<const TransferPair> pairs);
PermutationResult pair_permutation_test(std::span<const TransferPair> pairs, int n_shuffles, std::uint64_t seed);

std::string transfer_csv(std::span<const TransferPair> pairs);

}  // namespace fvlab
