#include "fvlab/geometry/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fvlab/common/error.hpp"
#include "fvlab/common/text.hpp"

namespace fvlab {

std::vector<std::pair<std::string, std::string>> enumerate_pairs(const TaskSpec& task) {
    if (task.templates.size() != 8)
        fail(ErrorKind::battery_integrity,
             task.name() + " has " + std::to_string(task.templates.size()) + " templates, expected 8");
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& s : task.templates)
        for (const auto& t : task.templates)
            if (s.id != t.id) out.emplace_back(s.id, t.id);
    return out;
}

double cosine(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) fail(ErrorKind::parameter, "cosine of vectors with different lengths");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += static_cast<double>(a[i]) * b[i];
        aa += static_cast<double>(a[i]) * a[i];
        bb += static_cast<double>(b[i]) * b[i];
    }
    if (aa == 0.0 || bb == 0.0) return 0.0;
    return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

std::vector<TransferPair> ood_matrix(const Model& model, const TaskSpec& task, const FvStore& store,
                                     const std::map<std::string, EvalOutcome>& source_best,
                                     std::span<const ExamplePair> queries, const OodConfig& config) {
    std::vector<TransferPair> out;
    for (const auto& [src_id, tgt_id] : enumerate_pairs(task)) {
        const auto best = source_best.find(src_id);
        if (best == source_best.end()) fail(ErrorKind::store, "no IID sweep result for " + task.name() + " " + src_id);
        const TemplateSpec& source = task.find_template(src_id);
        const TemplateSpec& target = task.find_template(tgt_id);

        int layer = best->second.layer;
        double alpha = best->second.alpha;
        EvalOutcome outcome;
        if (config.choice == OodLayerChoice::pair_best) {
            std::vector<FunctionVector> fvs;
            for (int l : config.grid.layers) fvs.push_back(store.get(task.name(), src_id, l, config.fv_seed));
            outcome = sweep(model, task, target, fvs, config.grid, queries, config.eval).best;
            layer = outcome.layer;
            alpha = outcome.alpha;
        } else {
            outcome = steer_eval(model, store.get(task.name(), src_id, layer, config.fv_seed), task, target, layer,
                                 alpha, queries, config.eval);
        }
        const auto& src_fv = store.get(task.name(), src_id, layer, config.fv_seed);
        const auto& tgt_fv = store.get(task.name(), tgt_id, layer, config.fv_seed);

        TransferPair p;
        p.task = task.name();
        p.source = src_id;
        p.target = tgt_id;
        p.cosine = cosine(src_fv.vector, tgt_fv.vector);
        p.ood_accuracy = outcome.accuracy;
        p.source_iid = best->second.accuracy;
        p.layer = layer;
        p.alpha = alpha;
        p.source_norm = src_fv.l2_norm;
        p.within_style = source.style == target.style;
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<DissociationRecord> dissociation_scan(std::span<const TransferPair> pairs, double gate,
                                                  DissociationThresholds t) {
    std::vector<DissociationRecord> out;
    for (const auto& p : pairs)
        out.push_back({p.task, p.source, p.target, p.cosine, p.ood_accuracy, p.source_iid,
                       is_dissociation(p.cosine, p.ood_accuracy, t), p.source_iid > gate});
    return out;
}

DissociationSummary summarize(std::span<const DissociationRecord> records) {
    DissociationSummary s;
    s.n_pairs = static_cast<int>(records.size());
    for (const auto& r : records) {
        s.n_dissociation += r.is_dissociation;
        s.n_viable_dissociation += r.is_dissociation && r.iid_viable;
    }
    s.rate = s.n_pairs == 0 ? 0.0 : static_cast<double>(s.n_dissociation) / s.n_pairs;
    return s;
}

StyleReport style_compare(std::span<const TransferPair> pairs) {
    std::vector<double> within, across;
    for (const auto& p : pairs) (p.within_style ? within : across).push_back(p.ood_accuracy);
    const auto w = welch_t_test(within, across);
    return {w.mean_a, w.mean_b, w.t, w.df, w.p, w.n_a, w.n_b};
}

UtvReport utv_pca(std::span<const FunctionVector> fvs, int layer) {
    if (fvs.empty()) fail(ErrorKind::parameter, "UTV PCA needs function vectors");
    std::vector<std::vector<double>> rows;
    for (const auto& fv : fvs) {
        if (fv.layer != layer) fail(ErrorKind::parameter, "UTV PCA vectors must share one layer");
        rows.emplace_back(fv.vector.begin(), fv.vector.end());
    }
    const auto pca = pc1_fraction(rows);
    return {fvs.front().task, layer, pca.pc1_fraction, pca.degenerate};
}

CorrelationReport norm_correlation(std::span<const TransferPair> pairs) {
    std::vector<double> norms, acc;
    for (const auto& p : pairs) {
        norms.push_back(p.source_norm);
        acc.push_back(p.ood_accuracy);
    }
    return pearson(norms, acc);
}

CorrelationReport pooled_correlation(std::span<const TransferPair> pairs) {
    std::vector<double> c, a;
    for (const auto& p : pairs) {
        c.push_back(p.cosine);
        a.push_back(p.ood_accuracy);
    }
    return pearson(c, a);
}

std::vector<CorrelationReport> per_task_correlations(std::span<const TransferPair> pairs) {
    std::vector<std::string> order;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_task;
    for (const auto& p : pairs) {
        if (!by_task.count(p.task)) order.push_back(p.task);
        by_task[p.task].first.push_back(p.cosine);
        by_task[p.task].second.push_back(p.ood_accuracy);
    }
    std::vector<CorrelationReport> out;
    for (const auto& name : order) {
        const auto& [c, a] = by_task[name];
        CorrelationReport r;
        try {
            r = pearson(c, a);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::degenerate_input) throw;
            r.r = std::numeric_limits<double>::quiet_NaN();
            r.p = std::numeric_limits<double>::quiet_NaN();
            r.n = static_cast<int>(c.size());
            r.defined = false;
        }
        r.scope = name;
        out.push_back(r);
    }
    return out;
}

namespace {

struct Columns {
    std::vector<std::string> task;
    std::vector<double> cosine, accuracy;
};

Columns columns(std::span<const TransferPair> pairs) {
    Columns c;
    for (const auto& p : pairs) {
        c.task.push_back(p.task);
        c.cosine.push_back(p.cosine);
        c.accuracy.push_back(p.ood_accuracy);
    }
    return c;
}

}  // namespace

RegressionReport pair_regression(std::span<const TransferPair> pairs) {
    const auto c = columns(pairs);
    return hierarchical_regression(c.task, c.cosine, c.accuracy);
}

PermutationResult pair_permutation_test(std::span<const TransferPair> pairs, int n_shuffles, std::uint64_t seed) {
    if (pairs.size() < 2) fail(ErrorKind::parameter, "permutation test needs at least two pairs");
    const auto c = columns(pairs);
    return permutation_test(c.task, c.cosine, c.accuracy, n_shuffles, seed);
}

std::string transfer_csv(std::span<const TransferPair> pairs) {
    CsvWriter csv({"task", "source", "target", "layer", "alpha", "cosine", "ood_accuracy", "source_iid",
                   "source_norm", "within_style"});
    for (const auto& p : pairs)
        csv.row({p.task, p.source, p.target, std::to_string(p.layer), format_number(p.alpha), format_number(p.cosine),
                 format_number(p.ood_accuracy), format_number(p.source_iid), format_number(p.source_norm),
                 p.within_style ? "1" : "0"});
    return csv.str();
}

}  // namespace fvlab
