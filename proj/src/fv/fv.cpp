#include "fvlab/fv/fv.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "fvlab/common/error.hpp"
#include "fvlab/common/parallel.hpp"
#include "fvlab/common/rng.hpp"
#include "fvlab/common/text.hpp"
#include "fvlab/model/container.hpp"

namespace fvlab {

double l2_norm(std::span<const float> v) {
    double ss = 0.0;
    for (float x : v) ss += static_cast<double>(x) * x;
    return std::sqrt(ss);
}

FunctionVector FunctionVector::make(std::string task, std::string tmpl, int layer, std::vector<float> vector,
                                    int n_pos, int n_neg, std::uint64_t seed) {
    FunctionVector fv{std::move(task), std::move(tmpl), layer, std::move(vector), n_pos, n_neg, seed, 0.0};
    fv.l2_norm = fvlab::l2_norm(fv.vector);
    return fv;
}

std::string FunctionVector::id() const { return task + "/" + tmpl + "/L" + std::to_string(layer); }

std::vector<float> mean_difference(std::span<const std::vector<float>> pos, std::span<const std::vector<float>> neg) {
    if (pos.empty() || neg.empty()) fail(ErrorKind::insufficient_data, "mean difference needs both prompt sets");
    const std::size_t d = pos[0].size();
    std::vector<double> acc(d, 0.0);
    for (const auto& h : pos) {
        if (h.size() != d) fail(ErrorKind::parameter, "activation length mismatch");
        for (std::size_t i = 0; i < d; ++i) acc[i] += h[i] / static_cast<double>(pos.size());
    }
    for (const auto& h : neg) {
        if (h.size() != d) fail(ErrorKind::parameter, "activation length mismatch");
        for (std::size_t i = 0; i < d; ++i) acc[i] -= h[i] / static_cast<double>(neg.size());
    }
    return std::vector<float>(acc.begin(), acc.end());
}

std::vector<FunctionVector> extract_fvs(const Model& model, const TaskSpec& task, const TemplateSpec& tmpl,
                                        std::span<const int> layers, const ExtractionConfig& config) {
    for (int l : layers)
        if (l < 0 || l >= model.arch().n_layers) fail(ErrorKind::range, "extraction layer out of range");
    if (config.n_prompts < 1) fail(ErrorKind::parameter, "n_prompts must be >= 1");
    const auto queries = select_extraction_queries(task, config.n_prompts, config.seed);
    const std::size_t n = queries.size();

    // slot [i][2*j + {0,1}] = positive/negative activation of prompt i at layers[j]
    std::vector<std::vector<std::vector<float>>> acts(n);
    const std::vector<int> tap_layers(layers.begin(), layers.end());
    parallel_for(n, config.threads, [&](std::size_t i) {
        const auto seed = derive_seed(config.seed, {"contrast", task.name(), std::to_string(i)});
        const auto [pos, neg] = build_contrast_prompts(task, tmpl, queries[i], config.n_demos, seed, config.contrast);
        const auto taps = TapRequest::final_position(tap_layers);
        const auto rp = model.forward_with_taps(model.encode(pos.rendered), taps);
        const auto rn = model.forward_with_taps(model.encode(neg.rendered), taps);
        for (int l : tap_layers) {
            acts[i].push_back(rp.tap(l));
            acts[i].push_back(rn.tap(l));
        }
    });

    std::vector<FunctionVector> out;
    for (std::size_t j = 0; j < tap_layers.size(); ++j) {
        std::vector<std::vector<float>> pos, neg;
        for (std::size_t i = 0; i < n; ++i) {
            pos.push_back(acts[i][2 * j]);
            neg.push_back(acts[i][2 * j + 1]);
        }
        out.push_back(FunctionVector::make(task.name(), tmpl.id, tap_layers[j], mean_difference(pos, neg),
                                           static_cast<int>(n), static_cast<int>(n), config.seed));
    }
    return out;
}

FunctionVector extract_fv(const Model& model, const TaskSpec& task, const TemplateSpec& tmpl, int layer,
                          const ExtractionConfig& config) {
    const int layers[] = {layer};
    return extract_fvs(model, task, tmpl, layers, config).front();
}

SweepGrid SweepGrid::with_all_layers(int n_layers) {
    SweepGrid g;
    for (int l = 0; l < n_layers; ++l) g.layers.push_back(l);
    return g;
}

void SweepGrid::validate() const {
    if (alphas.empty()) fail(ErrorKind::parameter, "alpha grid is empty");
    for (std::size_t i = 0; i < alphas.size(); ++i) {
        if (!(alphas[i] > 0.0)) fail(ErrorKind::parameter, "alphas must be positive");
        if (i > 0 && !(alphas[i] > alphas[i - 1])) fail(ErrorKind::parameter, "alphas must be strictly increasing");
    }
    if (!(refinement_step > 0.0)) fail(ErrorKind::parameter, "refinement_step must be positive");
    if (refinement_radius < 0) fail(ErrorKind::parameter, "refinement_radius must be >= 0");
    if (layers.empty()) fail(ErrorKind::parameter, "sweep layer list is empty");
}

std::string zero_shot_prompt(const TemplateSpec& tmpl, const ExamplePair& query) { return tmpl.render(query.input); }

int count_correct(const Model& model, const TaskSpec& task, std::span<const std::string> prompts,
                  std::span<const ExamplePair> queries, const InterventionPlan* plan, int threads) {
    std::vector<char> hit(prompts.size(), 0);
    parallel_for(prompts.size(), threads, [&](std::size_t i) {
        const auto text = model.generate_greedy(prompts[i], task.info.max_new_tokens, plan);
        hit[i] = match_answer(task, text, queries[i]) ? 1 : 0;
    });
    return static_cast<int>(std::count(hit.begin(), hit.end(), 1));
}

EvalOutcome steer_eval(const Model& model, const FunctionVector& fv, const TaskSpec& task, const TemplateSpec& target,
                       int layer, double alpha, std::span<const ExamplePair> queries, const EvalOptions& options) {
    if (static_cast<int>(fv.vector.size()) != model.arch().d_model)
        fail(ErrorKind::parameter, "function vector length must equal d_model");
    if (queries.empty()) fail(ErrorKind::insufficient_data, "no queries to evaluate");
    const InterventionPlan plan{layer, fv.vector, static_cast<float>(alpha), options.positions};
    std::vector<std::string> prompts;
    for (const auto& q : queries) prompts.push_back(zero_shot_prompt(target, q));
    const int correct = count_correct(model, task, prompts, queries, &plan, options.threads);
    const int n = static_cast<int>(queries.size());
    return {task.name(), fv.tmpl, target.id, layer, alpha, static_cast<double>(correct) / n, correct, n};
}

const EvalOutcome& select_best(std::span<const EvalOutcome> outcomes) {
    if (outcomes.empty()) fail(ErrorKind::parameter, "no outcomes to choose from");
    const EvalOutcome* best = &outcomes[0];
    for (const auto& o : outcomes) {
        if (o.accuracy > best->accuracy ||
            (o.accuracy == best->accuracy &&
             (o.layer < best->layer || (o.layer == best->layer && o.alpha < best->alpha))))
            best = &o;
    }
    return *best;
}

std::vector<double> refinement_alphas(const SweepGrid& grid, double best, std::span<const double> evaluated) {
    std::vector<double> out;
    auto seen = [&](double a) {
        for (double e : evaluated)
            if (std::abs(e - a) < 1e-9) return true;
        for (double e : out)
            if (std::abs(e - a) < 1e-9) return true;
        return false;
    };
    for (int k = 1; k <= grid.refinement_radius; ++k) {
        for (double a : {best - k * grid.refinement_step, best + k * grid.refinement_step})
            if (a > 0.0 && !seen(a)) out.push_back(a);
    }
    std::sort(out.begin(), out.end());
    return out;
}

SweepResult sweep(const Model& model, const TaskSpec& task, const TemplateSpec& tmpl,
                  std::span<const FunctionVector> fvs, const SweepGrid& grid, std::span<const ExamplePair> queries,
                  const EvalOptions& options) {
    grid.validate();
    auto fv_at = [&](int layer) -> const FunctionVector& {
        for (const auto& fv : fvs)
            if (fv.layer == layer) return fv;
        fail(ErrorKind::store, "no FV for " + task.name() + " " + tmpl.id + " at layer " + std::to_string(layer));
    };
    SweepResult result;
    for (int layer : grid.layers)
        for (double alpha : grid.alphas)
            result.table.push_back(steer_eval(model, fv_at(layer), task, tmpl, layer, alpha, queries, options));

    const EvalOutcome coarse = select_best(result.table);
    for (double alpha : refinement_alphas(grid, coarse.alpha, grid.alphas))
        result.table.push_back(steer_eval(model, fv_at(coarse.layer), task, tmpl, coarse.layer, alpha, queries, options));

    std::stable_sort(result.table.begin(), result.table.end(), [](const EvalOutcome& a, const EvalOutcome& b) {
        return a.layer != b.layer ? a.layer < b.layer : a.alpha < b.alpha;
    });
    result.best = select_best(result.table);
    return result;
}

GateResult iid_gate(std::span<const EvalOutcome> best_per_template, double threshold) {
    if (best_per_template.empty()) fail(ErrorKind::parameter, "IID gate needs at least one template outcome");
    double sum = 0.0;
    for (const auto& o : best_per_template) sum += o.accuracy;
    const double mean = sum / static_cast<double>(best_per_template.size());
    return {mean > threshold, mean};
}

BaselineRecord baselines(const Model& model, const TaskSpec& task, const TemplateSpec& tmpl,
                         std::span<const ExamplePair> queries, int few_shot_k, std::uint64_t seed, int threads) {
    if (few_shot_k < 0) fail(ErrorKind::parameter, "few_shot_k must be >= 0");
    if (queries.empty()) fail(ErrorKind::insufficient_data, "no queries to evaluate");
    std::vector<const ExamplePair*> pool;
    for (const auto& e : task.demo_pool()) pool.push_back(&e);
    if (static_cast<int>(pool.size()) < few_shot_k + 1)
        fail(ErrorKind::insufficient_data, task.name() + ": demo pool too small for " + std::to_string(few_shot_k) +
                                               "-shot baselines");
    Rng rng(derive_seed(seed, {"fewshot", task.name()}));
    rng.shuffle(pool);

    std::vector<std::string> zero, few;
    for (const auto& q : queries) {
        zero.push_back(zero_shot_prompt(tmpl, q));
        std::vector<std::pair<std::string, std::string>> demos;
        for (const auto* e : pool) {
            if (static_cast<int>(demos.size()) == few_shot_k) break;
            if (e->input != q.input) demos.emplace_back(e->input, e->output);
        }
        few.push_back(build_prompt(tmpl, std::move(demos), q.input).rendered);
    }
    const double n = static_cast<double>(queries.size());
    BaselineRecord r;
    r.task = task.name();
    r.tmpl = tmpl.id;
    r.few_shot_k = few_shot_k;
    r.n_queries = static_cast<int>(queries.size());
    r.zero_shot_acc = count_correct(model, task, zero, queries, nullptr, threads) / n;
    r.few_shot_acc = few_shot_k == 0 ? r.zero_shot_acc : count_correct(model, task, few, queries, nullptr, threads) / n;
    return r;
}

void FvStore::put(const FunctionVector& fv) {
    Key key{fv.task, fv.tmpl, fv.layer, fv.seed};
    auto [it, inserted] = vectors_.emplace(key, fv);
    if (!inserted && it->second != fv)
        fail(ErrorKind::store, "conflicting FV already stored for " + fv.id() + " seed " + std::to_string(fv.seed));
}

bool FvStore::contains(const std::string& task, const std::string& tmpl, int layer, std::uint64_t seed) const {
    return vectors_.count({task, tmpl, layer, seed}) > 0;
}

const FunctionVector& FvStore::get(const std::string& task, const std::string& tmpl, int layer,
                                   std::uint64_t seed) const {
    auto it = vectors_.find({task, tmpl, layer, seed});
    if (it == vectors_.end())
        fail(ErrorKind::store, "missing FV " + task + "/" + tmpl + "/L" + std::to_string(layer) + " seed " +
                                   std::to_string(seed));
    return it->second;
}

std::string FvStore::encode() const {
    nlohmann::json manifest{{"schema", 1}};
    auto& list = manifest["vectors"] = nlohmann::json::array();
    std::vector<Tensor> tensors;
    for (const auto& [key, fv] : vectors_) {
        list.push_back({{"task", fv.task},
                        {"template", fv.tmpl},
                        {"layer", fv.layer},
                        {"n_pos", fv.n_pos},
                        {"n_neg", fv.n_neg},
                        {"seed", fv.seed}});
        tensors.push_back({fv.id() + "/" + std::to_string(fv.seed), {static_cast<std::int64_t>(fv.vector.size())},
                           fv.vector});
    }
    return encode_container(kStoreMagic, std::move(manifest), tensors);
}

FvStore FvStore::decode(std::string_view bytes) {
    const auto c = decode_container(bytes, kStoreMagic);
    if (!c.manifest.contains("vectors") || c.manifest["vectors"].size() != c.tensors.size())
        fail(ErrorKind::store, "FV store manifest does not match its tensors");
    FvStore store;
    for (std::size_t i = 0; i < c.tensors.size(); ++i) {
        const auto& m = c.manifest["vectors"][i];
        try {
            store.put(FunctionVector::make(m.at("task").get<std::string>(), m.at("template").get<std::string>(),
                                           m.at("layer").get<int>(), c.tensors[i].data, m.at("n_pos").get<int>(),
                                           m.at("n_neg").get<int>(), m.at("seed").get<std::uint64_t>()));
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::store, std::string("malformed FV store entry: ") + e.what());
        }
    }
    return store;
}

void FvStore::save(const std::filesystem::path& path) const { write_text_file(path, encode()); }

FvStore FvStore::load(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) fail(ErrorKind::store, "no FV store at " + path.string());
    return decode(read_text_file(path));
}

std::string outcomes_csv(std::span<const EvalOutcome> outcomes) {
    CsvWriter csv({"task", "source", "target", "layer", "alpha", "accuracy", "n_queries"});
    for (const auto& o : outcomes)
        csv.row({o.task, o.source, o.target, std::to_string(o.layer), format_number(o.alpha),
                 format_number(o.accuracy), std::to_string(o.n_queries)});
    return csv.str();
}

}  // namespace fvlab
