#include "fvlab/pipeline/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <set>

#include "fvlab/battery/battery.hpp"
#include "fvlab/common/error.hpp"
#include "fvlab/common/rng.hpp"
#include "fvlab/common/text.hpp"
#include "fvlab/lens/lens.hpp"
#include "fvlab/model/model.hpp"
#include "fvlab/patching/patching.hpp"

namespace fvlab {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& report_files() {
    static const std::vector<std::string> files{
        "iid_table.csv", "transfer_table.csv", "quadrant.csv", "regression.csv", "style.csv",
        "dissociation.csv", "patching.csv", "utv.csv", "norms.csv",
    };
    return files;
}

namespace {

// ---- serialization ----

json outcome_json(const EvalOutcome& o) {
    return {{"task", o.task},         {"source", o.source},         {"target", o.target},
            {"layer", o.layer},       {"alpha", o.alpha},           {"accuracy", o.accuracy},
            {"n_correct", o.n_correct}, {"n_queries", o.n_queries}};
}

EvalOutcome outcome_from(const json& j) {
    return {j.at("task"), j.at("source"), j.at("target"), j.at("layer"), j.at("alpha"), j.at("accuracy"),
            j.at("n_correct"), j.at("n_queries")};
}

json pair_json(const TransferPair& p) {
    return {{"task", p.task},         {"source", p.source},           {"target", p.target},
            {"cosine", p.cosine},     {"ood_accuracy", p.ood_accuracy}, {"source_iid", p.source_iid},
            {"layer", p.layer},       {"alpha", p.alpha},             {"source_norm", p.source_norm},
            {"within_style", p.within_style}};
}

TransferPair pair_from(const json& j) {
    TransferPair p;
    p.task = j.at("task");
    p.source = j.at("source");
    p.target = j.at("target");
    p.cosine = j.at("cosine");
    p.ood_accuracy = j.at("ood_accuracy");
    p.source_iid = j.at("source_iid");
    p.layer = j.at("layer");
    p.alpha = j.at("alpha");
    p.source_norm = j.at("source_norm");
    p.within_style = j.at("within_style");
    return p;
}

std::string num(double v) { return format_number(v); }
std::string flag(bool b) { return b ? "1" : "0"; }

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::string hash_directory(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::string joined;
    for (const auto& f : files) joined += f.filename().string() + ":" + sha256_file(f) + "\n";
    return sha256_hex(joined);
}

struct GateInfo {
    bool gated = false;
    double mean_iid = 0.0;
    std::map<std::string, EvalOutcome> best;
};

class Runner {
public:
    explicit Runner(RunManifest manifest) : m_(std::move(manifest)) {}

    RunResult run();

private:
    // ---- inputs ----
    void load_inputs();
    const Model& model();
    std::vector<const TaskSpec*> tasks() const;
    std::vector<int> grid_layers();
    std::vector<int> all_layers();
    SweepGrid grid();
    std::vector<ExamplePair> queries(const TaskSpec& task, int n) const { return select_queries(task, n, m_.seed); }

    // ---- outputs ----
    void emit(const std::string& rel, const std::string& contents);
    void emit_report(const std::string& name, const std::string& contents) { emit("reports/" + name, contents); }
    void emit_artifact(const std::string& name, const json& j);
    json read_artifact(const std::string& name) const;
    FvStore load_store() const;
    std::map<std::string, GateInfo> load_gate() const;

    std::string input_hash(Stage s) const;
    json execute(Stage s);

    json stage_baseline();
    json stage_extract();
    json stage_steer();
    json stage_gate();
    json stage_transfer();
    json stage_lens();
    json stage_project();
    json stage_patch();
    json stage_stats();
    json stage_report();

    RunManifest m_;
    fs::path out_;
    RunLedger ledger_;
    std::optional<Battery> battery_;
    std::optional<Model> model_;
    std::string lexicon_sha_;
    std::vector<OutputFile> written_;
};

void Runner::load_inputs() {
    battery_ = load_battery(m_.battery);
    for (const auto& name : m_.tasks) battery_->task(name);
    ledger_.battery_sha256 = hash_directory(m_.battery);
    if (!fs::exists(m_.model)) fail(ErrorKind::io, "no such model file: " + m_.model.string());
    std::string model_key = sha256_file(m_.model);
    const fs::path tok = m_.tokenizer ? *m_.tokenizer : m_.model.parent_path() / "tokenizer.json";
    if (fs::exists(tok)) model_key += sha256_file(tok);
    ledger_.model_sha256 = sha256_hex(model_key);
    if (fs::exists(m_.lexicon_path())) lexicon_sha_ = sha256_file(m_.lexicon_path());
}

const Model& Runner::model() {
    if (!model_) model_ = Model::load(m_.model, m_.tokenizer);
    return *model_;
}

std::vector<const TaskSpec*> Runner::tasks() const {
    std::vector<const TaskSpec*> out;
    for (const auto& t : battery_->tasks)
        if (m_.tasks.empty() || std::find(m_.tasks.begin(), m_.tasks.end(), t.name()) != m_.tasks.end())
            out.push_back(&t);
    return out;
}

std::vector<int> Runner::all_layers() {
    std::vector<int> l(static_cast<std::size_t>(model().arch().n_layers));
    for (std::size_t i = 0; i < l.size(); ++i) l[i] = static_cast<int>(i);
    return l;
}

std::vector<int> Runner::grid_layers() {
    if (m_.grid.layers.empty()) return all_layers();
    for (int l : m_.grid.layers)
        if (l < 0 || l >= model().arch().n_layers)
            fail(ErrorKind::range, "grid layer " + std::to_string(l) + " outside the model");
    return m_.grid.layers;
}

SweepGrid Runner::grid() {
    SweepGrid g = m_.grid;
    g.layers = grid_layers();
    return g;
}

void Runner::emit(const std::string& rel, const std::string& contents) {
    write_text_file(out_ / rel, contents);
    written_.push_back({rel, sha256_hex(contents)});
}

void Runner::emit_artifact(const std::string& name, const json& j) {
    json doc = j;
    doc["schema"] = 1;
    emit("artifacts/" + name, doc.dump(1, ' ', false, json::error_handler_t::replace) + "\n");
}

json Runner::read_artifact(const std::string& name) const {
    const auto path = out_ / "artifacts" / name;
    if (!fs::exists(path)) fail(ErrorKind::dependency, "missing artifact " + name);
    return json::parse(read_text_file(path));
}

FvStore Runner::load_store() const {
    const auto path = out_ / "artifacts" / "fvs.xfvs";
    if (!fs::exists(path)) fail(ErrorKind::dependency, "missing artifact fvs.xfvs");
    return FvStore::load(path);
}

std::map<std::string, GateInfo> Runner::load_gate() const {
    std::map<std::string, GateInfo> out;
    const json gate_doc = read_artifact("gate.json");
    for (const auto& t : gate_doc.at("tasks")) {
        GateInfo g;
        g.gated = t.at("gated");
        g.mean_iid = t.at("mean_iid");
        for (const auto& row : t.at("templates")) g.best[row.at("template").get<std::string>()] = outcome_from(row.at("best"));
        out[t.at("task").get<std::string>()] = std::move(g);
    }
    return out;
}

std::string Runner::input_hash(Stage s) const {
    json deps = json::object();
    for (Stage d : stage_dependencies(s)) {
        auto it = ledger_.stages.find(to_string(d));
        json outs = json::array();
        if (it != ledger_.stages.end())
            for (const auto& o : it->second.outputs) outs.push_back(o.sha256);
        deps[to_string(d)] = outs;
    }
    const json key{{"code_version", kCodeVersion},       {"stage", to_string(s)},
                   {"model", ledger_.model_sha256},      {"battery", ledger_.battery_sha256},
                   {"lexicon", lexicon_sha_},            {"config", m_.cache_fields()},
                   {"dependencies", deps}};
    return sha256_hex(key.dump());
}

json Runner::execute(Stage s) {
    switch (s) {
    case Stage::baseline: return stage_baseline();
    case Stage::extract: return stage_extract();
    case Stage::steer: return stage_steer();
    case Stage::gate: return stage_gate();
    case Stage::transfer: return stage_transfer();
    case Stage::lens: return stage_lens();
    case Stage::project: return stage_project();
    case Stage::patch: return stage_patch();
    case Stage::stats: return stage_stats();
    case Stage::report: return stage_report();
    }
    return {};
}

// ---- stages ----

json Runner::stage_baseline() {
    json records = json::array();
    CsvWriter csv({"task", "template", "zero_shot_acc", "few_shot_acc", "few_shot_k", "n_queries"});
    for (const TaskSpec* task : tasks()) {
        const auto q = queries(*task, m_.n_queries);
        for (const auto& tmpl : task->templates) {
            const auto b = baselines(model(), *task, tmpl, q, m_.few_shot_k, m_.seed, m_.threads);
            records.push_back({{"task", b.task}, {"template", b.tmpl}, {"zero_shot", b.zero_shot_acc},
                               {"few_shot", b.few_shot_acc}, {"k", b.few_shot_k}, {"n_queries", b.n_queries}});
            csv.row({b.task, b.tmpl, num(b.zero_shot_acc), num(b.few_shot_acc), std::to_string(b.few_shot_k),
                     std::to_string(b.n_queries)});
        }
    }
    emit_artifact("baseline.json", {{"records", records}});
    emit_report("baselines.csv", csv.str());
    return {{"records", records.size()}};
}

json Runner::stage_extract() {
    ExtractionConfig cfg;
    cfg.n_prompts = m_.n_prompts;
    cfg.n_demos = m_.n_demos;
    cfg.seed = m_.seed;
    cfg.threads = m_.threads;
    FvStore store;
    const auto layers = grid_layers();
    for (const TaskSpec* task : tasks())
        for (const auto& tmpl : task->templates)
            for (auto& fv : extract_fvs(model(), *task, tmpl, layers, cfg)) store.put(fv);
    emit("artifacts/fvs.xfvs", store.encode());
    return {{"vectors", store.size()}};
}

json Runner::stage_steer() {
    const FvStore store = load_store();
    const SweepGrid g = grid();
    const EvalOptions opts{m_.threads, m_.positions};
    json sweeps = json::array();
    std::vector<EvalOutcome> all;
    std::size_t coarse = 0, refined = 0;
    for (const TaskSpec* task : tasks()) {
        const auto q = queries(*task, m_.n_queries);
        for (const auto& tmpl : task->templates) {
            std::vector<FunctionVector> fvs;
            for (int l : g.layers) fvs.push_back(store.get(task->name(), tmpl.id, l, m_.seed));
            const auto r = sweep(model(), *task, tmpl, fvs, g, q, opts);
            coarse += g.layers.size() * g.alphas.size();
            refined += r.table.size() - g.layers.size() * g.alphas.size();
            json table = json::array();
            for (const auto& o : r.table) table.push_back(outcome_json(o));
            sweeps.push_back({{"task", task->name()}, {"template", tmpl.id}, {"best", outcome_json(r.best)},
                              {"table", table}});
            all.insert(all.end(), r.table.begin(), r.table.end());
        }
    }
    emit_artifact("steer.json", {{"sweeps", sweeps}});
    emit_report("iid_sweeps.csv", outcomes_csv(all));
    return {{"coarse_configs", coarse}, {"refinement_configs", refined}, {"evaluated_configs", coarse + refined}};
}

json Runner::stage_gate() {
    std::map<std::pair<std::string, std::string>, json> base;
    const json baseline_doc = read_artifact("baseline.json");
    for (const auto& r : baseline_doc.at("records")) base[{r.at("task").get<std::string>(), r.at("template").get<std::string>()}] = r;
    std::map<std::string, std::vector<EvalOutcome>> best;
    const json steer_doc = read_artifact("steer.json");
    for (const auto& s : steer_doc.at("sweeps")) best[s.at("task").get<std::string>()].push_back(outcome_from(s.at("best")));

    CsvWriter csv({"task", "template", "zero_shot_acc", "few_shot_acc", "best_layer", "best_alpha", "iid_accuracy",
                   "mean_iid", "gated"});
    json tasks_json = json::array();
    int cells = 0, below = 0, gated_count = 0;
    for (const TaskSpec* task : tasks()) {
        const auto bit = best.find(task->name());
        if (bit == best.end()) fail(ErrorKind::dependency, "no steering sweeps for " + task->name());
        const auto& outcomes = bit->second;
        const auto gate = iid_gate(outcomes, m_.tau);
        gated_count += gate.gated;
        json rows = json::array();
        for (const auto& o : outcomes) {
            const auto it = base.find({task->name(), o.source});
            if (it == base.end()) fail(ErrorKind::dependency, "no baseline for " + task->name() + " " + o.source);
            const double zero = it->second.at("zero_shot"), few = it->second.at("few_shot");
            ++cells;
            below += o.accuracy < zero;
            rows.push_back({{"template", o.source}, {"best", outcome_json(o)}, {"zero_shot", zero}, {"few_shot", few}});
            csv.row({task->name(), o.source, num(zero), num(few), std::to_string(o.layer), num(o.alpha),
                     num(o.accuracy), num(gate.mean_iid), flag(gate.gated)});
        }
        tasks_json.push_back(
            {{"task", task->name()}, {"gated", gate.gated}, {"mean_iid", gate.mean_iid}, {"templates", rows}});
    }
    const json below_zero{{"cells", cells},
                          {"below_zero_shot", below},
                          {"fraction", cells == 0 ? 0.0 : static_cast<double>(below) / cells}};
    emit_artifact("gate.json", {{"tasks", tasks_json}, {"threshold", m_.tau}, {"steering_below_zero_shot", below_zero}});
    emit_report("iid_table.csv", csv.str());
    return {{"tasks", tasks_json.size()}, {"gated", gated_count}};
}

json Runner::stage_transfer() {
    const FvStore store = load_store();
    const auto gate = load_gate();
    OodConfig oc;
    oc.choice = m_.ood_choice;
    oc.grid = grid();
    oc.fv_seed = m_.seed;
    oc.eval = {m_.threads, m_.positions};

    json pairs_json = json::array();
    std::vector<TransferPair> all;
    CsvWriter table({"task", "n_pairs", "mean_iid", "mean_ood", "iid_ood_gap", "gated"});
    for (const TaskSpec* task : tasks()) {
        const auto& g = gate.at(task->name());
        const auto pairs = ood_matrix(model(), *task, store, g.best, queries(*task, m_.n_queries), oc);
        double ood = 0.0;
        for (const auto& p : pairs) {
            ood += p.ood_accuracy;
            pairs_json.push_back(pair_json(p));
        }
        ood /= static_cast<double>(pairs.size());
        table.row({task->name(), std::to_string(pairs.size()), num(g.mean_iid), num(ood), num(g.mean_iid - ood),
                   flag(g.gated)});
        all.insert(all.end(), pairs.begin(), pairs.end());
    }
    emit_artifact("transfer.json", {{"pairs", pairs_json}, {"ood_choice", to_string(m_.ood_choice)}});
    emit_report("transfer_pairs.csv", transfer_csv(all));
    emit_report("transfer_table.csv", table.str());
    return {{"pairs", all.size()}};
}

json Runner::stage_lens() {
    const FvStore store = load_store();
    const auto gate = load_gate();
    const auto layers = all_layers();
    std::optional<Lexicon> lexicon;

    std::vector<LensProfile> profiles;
    CsvWriter deltas({"task", "template", "steer_layer", "alpha", "layer", "delta_top10", "max_delta", "max_layer"});
    CsvWriter quad({"task", "mean_iid", "best_top10", "readable", "steerable", "quadrant"});
    json cells = json::array();
    std::map<std::string, int> counts{{"both", 0}, {"readable_only", 0}, {"steerable_only", 0}, {"neither", 0}};
    for (const TaskSpec* task : tasks()) {
        const auto q = queries(*task, m_.n_queries);
        const bool polarity = task->info.eval_mode == EvalMode::polarity;
        if (polarity && !lexicon) lexicon = load_lexicon(m_.lexicon_path());
        std::vector<LensProfile> readable_from;
        for (const auto& tmpl : task->templates) {
            auto zero = logit_lens(model(), *task, tmpl, q, layers, nullptr, m_.threads);
            profiles.push_back(zero);
            if (polarity) {
                auto pol = sentiment_polarity_readability(model(), *task, tmpl, q, layers, *lexicon, nullptr, m_.threads);
                profiles.push_back(pol);
                readable_from.push_back(std::move(pol));
            } else {
                readable_from.push_back(std::move(zero));
            }
            const auto& b = gate.at(task->name()).best.at(tmpl.id);
            const auto& fv = store.get(task->name(), tmpl.id, b.layer, m_.seed);
            const auto d = post_steering_delta(model(), fv, *task, tmpl, b.layer, b.alpha, q, layers, m_.threads);
            for (const auto& [layer, v] : d.delta_top10)
                deltas.row({task->name(), tmpl.id, std::to_string(b.layer), num(b.alpha), std::to_string(layer), num(v),
                            num(d.max_delta), std::to_string(d.max_layer)});
        }
        const double top10 = pooled_max_top10(readable_from);
        const auto& g = gate.at(task->name());
        const auto cell = quadrant_classify(task->name(), g.mean_iid, top10, m_.tau, m_.tau_r,
                                            ledger_.model_sha256.substr(0, 12));
        ++counts[to_string(cell.quadrant)];
        quad.row({task->name(), num(g.mean_iid), num(top10), flag(cell.readable), flag(cell.steerable),
                  to_string(cell.quadrant)});
        cells.push_back({{"task", cell.task}, {"run_id", cell.run_id}, {"mean_iid", g.mean_iid}, {"best_top10", top10},
                         {"readable", cell.readable}, {"steerable", cell.steerable},
                         {"quadrant", to_string(cell.quadrant)}});
    }
    emit_artifact("lens.json", {{"quadrant", cells}, {"counts", counts}, {"tau", m_.tau}, {"tau_r", m_.tau_r}});
    emit_report("lens_profiles.csv", lens_csv(profiles));
    emit_report("lens_delta.csv", deltas.str());
    emit_report("quadrant.csv", quad.str());
    return {{"profiles", profiles.size()}, {"tasks", cells.size()}};
}

json Runner::stage_project() {
    const FvStore store = load_store();
    const auto gate = load_gate();
    json out = json::array();
    for (const TaskSpec* task : tasks())
        for (const auto& tmpl : task->templates) {
            const auto& b = gate.at(task->name()).best.at(tmpl.id);
            const auto p = fv_vocab_projection(model(), store.get(task->name(), tmpl.id, b.layer, m_.seed), *task);
            json j = p.to_json();
            j["task"] = task->name();
            j["template"] = tmpl.id;
            j["layer"] = b.layer;
            out.push_back(std::move(j));
        }
    emit_report("projections.json", json{{"schema", 1}, {"projections", out}}.dump(1, ' ', false, json::error_handler_t::replace) + "\n");
    return {{"projections", out.size()}};
}

json Runner::stage_patch() {
    const FvStore store = load_store();
    const auto gate = load_gate();
    std::vector<PatchResult> results;
    json best = json::array();
    for (const TaskSpec* task : tasks()) {
        const auto& g = gate.at(task->name());
        auto pairs = enumerate_pairs(*task);
        if (m_.patch_pairs_per_task > 0 && pairs.size() > static_cast<std::size_t>(m_.patch_pairs_per_task))
            pairs.resize(static_cast<std::size_t>(m_.patch_pairs_per_task));
        const auto q = queries(*task, m_.patch_queries > 0 ? m_.patch_queries : m_.n_queries);
        for (const auto& [clean_id, corrupt_id] : pairs) {
            auto steering = [&](const std::string& id) {
                const auto& b = g.best.at(id);
                return Steering{store.get(task->name(), id, b.layer, m_.seed), b.layer, b.alpha};
            };
            PatchConfig cfg{task->name(), clean_id, corrupt_id, 0, q, m_.patch_positions};
            const auto sweep =
                layer_sweep_patch(model(), *task, cfg, steering(clean_id), steering(corrupt_id), g.gated, m_.threads);
            results.insert(results.end(), sweep.results.begin(), sweep.results.end());
            best.push_back({{"task", task->name()}, {"clean", clean_id}, {"corrupted", corrupt_id},
                            {"skipped", !g.gated}, {"best_layer", sweep.best_layer},
                            {"max_recovery", sweep.max_recovery}});
        }
    }
    const auto t = tally(results);
    const json tally_json{{"attempted", t.attempted}, {"analyzed", t.analyzed}, {"skipped", t.skipped}};
    emit_artifact("patch.json", {{"pairs", best}, {"tally", tally_json}});
    emit_report("patching.csv", patch_csv(results));
    return tally_json;
}

json Runner::stage_stats() {
    std::vector<TransferPair> pairs;
    const json transfer_doc = read_artifact("transfer.json");
    for (const auto& p : transfer_doc.at("pairs")) pairs.push_back(pair_from(p));
    const FvStore store = load_store();
    const auto gate = load_gate();

    std::vector<std::string> task_names;
    std::map<std::string, std::vector<TransferPair>> by_task;
    for (const auto& p : pairs) {
        if (!by_task.count(p.task)) task_names.push_back(p.task);
        by_task[p.task].push_back(p);
    }
    const int m_tasks = std::max<int>(1, static_cast<int>(task_names.size()));
    const double alpha_task = bonferroni(m_.alpha, m_tasks);
    json summary = json::object();

    auto correlation_row = [&](CsvWriter& csv, const std::string& scope, auto&& fn, double alpha) {
        try {
            const CorrelationReport r = fn();
            csv.row({scope, std::to_string(r.n), num(r.r), num(r.p), num(alpha), flag(r.p < alpha), "1"});
            return json{{"scope", scope}, {"n", r.n}, {"r", r.r}, {"p", r.p}, {"alpha", alpha}};
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::degenerate_input) throw;
            csv.row({scope, "0", "nan", "nan", num(alpha), "0", "0"});
            return json{{"scope", scope}, {"r", nullptr}, {"p", nullptr}, {"alpha", alpha}};
        }
    };

    // Cosine-transfer correlations, pooled and per task.
    {
        CsvWriter csv({"scope", "n", "r", "p", "alpha_corrected", "significant", "defined"});
        json rows = json::array();
        rows.push_back(correlation_row(csv, "pooled", [&] { return pooled_correlation(pairs); }, m_.alpha));
        for (const auto& t : task_names)
            rows.push_back(correlation_row(csv, t, [&] { return pooled_correlation(by_task[t]); }, alpha_task));
        emit_report("correlations.csv", csv.str());
        summary["correlations"] = rows;
    }
    // Hierarchical regression.
    {
        CsvWriter csv({"scope", "n", "n_tasks", "r2_task", "r2_task_plus_cos", "delta_r2", "cos_coef",
                       "cos_coef_defined", "r2_defined", "status"});
        auto reg_row = [&](const std::string& scope, const std::vector<TransferPair>& ps) {
            try {
                const auto r = pair_regression(ps);
                csv.row({scope, std::to_string(r.n), std::to_string(r.n_tasks), num(r.r2_task),
                         num(r.r2_task_plus_cos), num(r.delta_r2), num(r.cos_coef), flag(r.cos_coef_defined),
                         flag(r.r2_defined), "ok"});
                summary["regression_" + scope] = {{"r2_task", r.r2_task},
                                                  {"r2_task_plus_cos", r.r2_task_plus_cos},
                                                  {"delta_r2", r.delta_r2},
                                                  {"cos_coef", finite_or_null(r.cos_coef)}};
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::degenerate_input && e.kind() != ErrorKind::parameter) throw;
                csv.row({scope, std::to_string(ps.size()), "0", "nan", "nan", "nan", "nan", "0", "0",
                         std::string(to_string(e.kind()))});
            }
        };
        std::vector<TransferPair> gated;
        for (const auto& p : pairs)
            if (gate.at(p.task).gated) gated.push_back(p);
        reg_row("all", pairs);
        reg_row("gated", gated);
        emit_report("regression.csv", csv.str());
    }
    // Permutation tests per task.
    {
        CsvWriter csv({"task", "n_pairs", "observed_rate", "p", "n_shuffles", "alpha_corrected", "significant"});
        for (const auto& t : task_names) {
            const auto r = pair_permutation_test(by_task[t], m_.n_shuffles, derive_seed(m_.seed, {"permutation", t}));
            csv.row({t, std::to_string(by_task[t].size()), num(r.observed), num(r.p), std::to_string(r.n_shuffles),
                     num(alpha_task), flag(r.p < alpha_task)});
        }
        emit_report("permutation.csv", csv.str());
    }
    // Dissociation cases.
    {
        const auto records = dissociation_scan(pairs, m_.tau);
        std::string lines;
        for (const auto& r : records)
            lines += json{{"schema", 1},
                          {"task", r.task},
                          {"source", r.source},
                          {"target", r.target},
                          {"cosine", r.cosine},
                          {"ood_accuracy", r.ood_accuracy},
                          {"source_iid", r.source_iid},
                          {"is_dissociation", r.is_dissociation},
                          {"iid_viable", r.iid_viable}}
                         .dump(-1, ' ', false, json::error_handler_t::replace) +
                     "\n";
        emit_report("dissociation.jsonl", lines);
        CsvWriter csv({"scope", "n_pairs", "n_dissociation", "n_viable_dissociation", "rate"});
        auto row = [&](const std::string& scope, std::span<const DissociationRecord> rs) {
            const auto s = summarize(rs);
            csv.row({scope, std::to_string(s.n_pairs), std::to_string(s.n_dissociation),
                     std::to_string(s.n_viable_dissociation), num(s.rate)});
            return s;
        };
        for (const auto& t : task_names) {
            std::vector<DissociationRecord> rs;
            for (const auto& r : records)
                if (r.task == t) rs.push_back(r);
            row(t, rs);
        }
        const auto s = row("all", records);
        summary["dissociation"] = {{"n_pairs", s.n_pairs}, {"n_dissociation", s.n_dissociation},
                                   {"n_viable_dissociation", s.n_viable_dissociation}, {"rate", s.rate}};
        emit_report("dissociation.csv", csv.str());
    }
    // Within- vs across-style transfer.
    {
        CsvWriter csv({"scope", "n_within", "n_across", "within_mean", "across_mean", "t", "df", "p",
                       "alpha_corrected", "status"});
        auto row = [&](const std::string& scope, const std::vector<TransferPair>& ps, double alpha) {
            try {
                const auto s = style_compare(ps);
                csv.row({scope, std::to_string(s.n_within), std::to_string(s.n_across), num(s.within_mean),
                         num(s.across_mean), num(s.t), num(s.df), num(s.p), num(alpha), "ok"});
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::degenerate_input && e.kind() != ErrorKind::parameter) throw;
                csv.row({scope, "0", "0", "nan", "nan", "nan", "nan", "nan", num(alpha), std::string(to_string(e.kind()))});
            }
        };
        row("pooled", pairs, m_.alpha);
        for (const auto& t : task_names) row(t, by_task[t], alpha_task);
        emit_report("style.csv", csv.str());
    }
    // Universal template vector PCA.
    {
        CsvWriter csv({"task", "layer", "pc1_fraction", "degenerate"});
        for (const TaskSpec* task : tasks())
            for (int layer : grid_layers()) {
                std::vector<FunctionVector> fvs;
                for (const auto& tmpl : task->templates) fvs.push_back(store.get(task->name(), tmpl.id, layer, m_.seed));
                const auto u = utv_pca(fvs, layer);
                csv.row({u.task, std::to_string(u.layer), num(u.pc1_fraction), flag(u.degenerate)});
            }
        emit_report("utv.csv", csv.str());
    }
    // FV norm against transfer.
    {
        CsvWriter csv({"scope", "n", "r", "p", "alpha_corrected", "significant", "defined"});
        json rows = json::array();
        rows.push_back(correlation_row(csv, "pooled", [&] { return norm_correlation(pairs); }, m_.alpha));
        for (const auto& t : task_names)
            rows.push_back(correlation_row(csv, t, [&] { return norm_correlation(by_task[t]); }, alpha_task));
        emit_report("norms.csv", csv.str());
        summary["norms"] = rows;
    }
    summary["bonferroni"] = {{"alpha", m_.alpha}, {"family_size", m_tasks}, {"alpha_corrected", alpha_task}};
    emit_artifact("stats.json", summary);
    return {{"pairs", pairs.size()}};
}

json Runner::stage_report() {
    json reports = json::array();
    for (const auto& name : report_files()) {
        const auto path = out_ / "reports" / name;
        if (!fs::exists(path)) fail(ErrorKind::dependency, "report " + name + " was never produced");
        reports.push_back({{"file", name}, {"sha256", sha256_file(path)}});
    }
    const json gate = read_artifact("gate.json");
    const json lens = read_artifact("lens.json");
    const json patch = read_artifact("patch.json");
    const json stats = read_artifact("stats.json");

    json gates = json::array();
    for (const auto& t : gate.at("tasks"))
        gates.push_back({{"task", t.at("task")}, {"mean_iid", t.at("mean_iid")}, {"gated", t.at("gated")}});
    json reference = json::object();
    for (const TaskSpec* task : tasks())
        reference[task->name()] = {{"expected_iid", {task->info.expected_iid_lo, task->info.expected_iid_hi}},
                                   {"dataset_size", task->info.reference_n}};
    json coverage = json::object();
    if (auto it = ledger_.stages.find("steer"); it != ledger_.stages.end()) coverage = it->second.counters;

    const json summary{
        {"schema", 1},
        {"code_version", kCodeVersion},
        {"model_sha256", ledger_.model_sha256},
        {"battery_sha256", ledger_.battery_sha256},
        {"seed", m_.seed},
        {"thresholds", {{"tau", m_.tau}, {"tau_r", m_.tau_r}}},
        {"reports", reports},
        {"iid_gate", gates},
        {"steering_below_zero_shot", gate.at("steering_below_zero_shot")},
        {"quadrant_counts", lens.at("counts")},
        {"patching", patch.at("tally")},
        {"statistics", stats},
        {"coverage", coverage},
        {"notes",
         {"pooled Pearson p-values treat pairs as independent although pairs share source templates",
          "dataset sizes and IID ranges under reference are inert metadata"}},
        {"reference", reference},
    };
    emit_report("summary.json", summary.dump(1, ' ', false, json::error_handler_t::replace) + "\n");
    return {{"reports", reports.size()}};
}

RunResult Runner::run() {
    m_.validate();
    out_ = m_.out;
    fs::create_directories(out_);
    const auto ledger_path = out_ / "ledger.json";
    if (fs::exists(ledger_path)) {
        try {
            ledger_ = RunLedger::load(ledger_path);
        } catch (const Error&) {
            ledger_ = {};
        }
        if (ledger_.code_version != kCodeVersion) ledger_ = {};
    }
    ledger_.code_version = std::string(kCodeVersion);
    const std::string old_model = ledger_.model_sha256, old_battery = ledger_.battery_sha256;
    load_inputs();
    if (old_model != ledger_.model_sha256 || old_battery != ledger_.battery_sha256) ledger_.stages.clear();

    const auto selected = m_.selected_stages();
    auto is_selected = [&](Stage s) { return std::find(selected.begin(), selected.end(), s) != selected.end(); };
    for (Stage s : selected)
        for (Stage d : stage_dependencies(s)) {
            if (is_selected(d)) continue;
            const auto name = to_string(d);
            if (!ledger_.completed(name) || !ledger_.outputs_intact(name, out_) ||
                ledger_.stages.at(name).input_hash != input_hash(d))
                fail(ErrorKind::dependency, "stage '" + to_string(s) + "' needs '" + name +
                                                "', which is neither selected nor available from an earlier run");
        }

    RunResult result;
    std::set<Stage> broken;
    for (Stage s : selected) {
        const auto name = to_string(s);
        StageRecord rec;
        const auto deps = stage_dependencies(s);
        const auto blocker = std::find_if(deps.begin(), deps.end(), [&](Stage d) { return broken.count(d) > 0; });
        if (blocker != deps.end()) {
            rec.status = "blocked";
            rec.error = "upstream stage '" + to_string(*blocker) + "' did not complete";
            ledger_.stages[name] = rec;
            broken.insert(s);
            result.failed.push_back(name);
            ledger_.save(ledger_path);
            continue;
        }
        rec.input_hash = input_hash(s);
        if (auto it = ledger_.stages.find(name); it != ledger_.stages.end() && it->second.status == "completed" &&
                                                 it->second.input_hash == rec.input_hash &&
                                                 ledger_.outputs_intact(name, out_)) {
            it->second.cache_hit = true;
            ledger_.save(ledger_path);
            continue;
        }
        written_.clear();
        const auto t0 = std::chrono::steady_clock::now();
        try {
            rec.counters = execute(s);
            rec.status = "completed";
        } catch (const std::exception& e) {
            rec.status = "failed";
            rec.error = e.what();
            broken.insert(s);
            result.failed.push_back(name);
        }
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rec.outputs = written_;
        ledger_.stages[name] = std::move(rec);
        result.executed.push_back(name);
        ledger_.save(ledger_path);
    }
    result.exit_code = result.failed.empty() ? 0 : 4;
    result.ledger = ledger_;
    return result;
}

}  // namespace

RunResult run_pipeline(const RunManifest& manifest) { return Runner(manifest).run(); }

std::string CompareReport::csv() const {
    CsvWriter csv({"task", "iid_a", "iid_b", "delta"});
    for (const auto& r : rows) csv.row({r.task, num(r.iid_a), num(r.iid_b), num(r.delta)});
    csv.row({"mean", "", "", num(mean_delta)});
    return csv.str();
}

CompareReport compare_gates(const json& gate_a, const json& gate_b) {
    auto collect = [](const json& g) {
        std::map<std::string, std::pair<double, std::set<std::string>>> out;
        std::vector<std::string> order;
        for (const auto& t : g.at("tasks")) {
            std::set<std::string> templates;
            for (const auto& row : t.at("templates")) templates.insert(row.at("template").get<std::string>());
            order.push_back(t.at("task").get<std::string>());
            out[t.at("task").get<std::string>()] = {t.at("mean_iid").get<double>(), templates};
        }
        return std::pair{order, out};
    };
    try {
        const auto [order_a, a] = collect(gate_a);
        const auto [order_b, b] = collect(gate_b);
        if (order_a != order_b) fail(ErrorKind::comparison, "runs cover different tasks");
        CompareReport report;
        for (const auto& task : order_a) {
            if (a.at(task).second != b.at(task).second)
                fail(ErrorKind::comparison, "runs use different templates for " + task);
            const double ia = a.at(task).first, ib = b.at(task).first;
            report.rows.push_back({task, ia, ib, ib - ia});
            report.mean_delta += ib - ia;
        }
        if (!report.rows.empty()) report.mean_delta /= static_cast<double>(report.rows.size());
        return report;
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("malformed gate artifact: ") + e.what());
    }
}

CompareReport compare_runs(const fs::path& run_a, const fs::path& run_b) {
    const auto la = RunLedger::load(run_a / "ledger.json");
    const auto lb = RunLedger::load(run_b / "ledger.json");
    if (la.battery_sha256 != lb.battery_sha256) fail(ErrorKind::comparison, "runs were made on different batteries");
    if (!la.completed("gate") || !lb.completed("gate"))
        fail(ErrorKind::dependency, "both runs need a completed gate stage");
    auto gate = [](const fs::path& dir) { return json::parse(read_text_file(dir / "artifacts" / "gate.json")); };
    return compare_gates(gate(run_a), gate(run_b));
}

}  // namespace fvlab
