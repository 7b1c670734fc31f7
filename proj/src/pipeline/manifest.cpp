#include "fvlab/pipeline/manifest.hpp"

#include <algorithm>
#include <map>

#include "fvlab/common/error.hpp"
#include "fvlab/common/text.hpp"

namespace fvlab {

const std::vector<Stage>& all_stages() {
    static const std::vector<Stage> s{Stage::baseline, Stage::extract, Stage::steer, Stage::gate,  Stage::transfer,
                                      Stage::lens,     Stage::project, Stage::patch, Stage::stats, Stage::report};
    return s;
}

std::string to_string(Stage s) {
    switch (s) {
    case Stage::baseline: return "baseline";
    case Stage::extract: return "extract";
    case Stage::steer: return "steer";
    case Stage::gate: return "gate";
    case Stage::transfer: return "transfer";
    case Stage::lens: return "lens";
    case Stage::project: return "project";
    case Stage::patch: return "patch";
    case Stage::stats: return "stats";
    case Stage::report: return "report";
    }
    return "unknown";
}

Stage stage_from_string(std::string_view name) {
    for (Stage s : all_stages())
        if (to_string(s) == name) return s;
    fail(ErrorKind::parameter, "unknown stage '" + std::string(name) + "'");
}

const std::vector<Stage>& stage_dependencies(Stage s) {
    static const std::map<Stage, std::vector<Stage>> deps{
        {Stage::baseline, {}},
        {Stage::extract, {}},
        {Stage::steer, {Stage::extract}},
        {Stage::gate, {Stage::steer, Stage::baseline}},
        {Stage::transfer, {Stage::extract, Stage::gate}},
        {Stage::lens, {Stage::extract, Stage::gate}},
        {Stage::project, {Stage::extract, Stage::gate}},
        {Stage::patch, {Stage::extract, Stage::gate}},
        {Stage::stats, {Stage::extract, Stage::gate, Stage::transfer}},
        {Stage::report, {Stage::gate, Stage::transfer, Stage::lens, Stage::project, Stage::patch, Stage::stats}},
    };
    return deps.at(s);
}

std::string to_string(PositionMode m) {
    return m == PositionMode::all_positions ? "all_positions" : "final_position_only";
}

PositionMode position_mode_from_string(std::string_view s) {
    if (s == "all_positions") return PositionMode::all_positions;
    if (s == "final_position_only") return PositionMode::final_position_only;
    fail(ErrorKind::parameter, "unknown position mode '" + std::string(s) + "'");
}

std::string to_string(OodLayerChoice c) { return c == OodLayerChoice::source_best ? "source_best" : "pair_best"; }

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& into) {
    if (j.contains(key)) into = j.at(key).get<T>();
}

}  // namespace

RunManifest RunManifest::from_json(const nlohmann::json& j, const std::filesystem::path& base) {
    if (!j.is_object()) fail(ErrorKind::format, "manifest must be a JSON object");
    if (j.value("schema", 1) != 1) fail(ErrorKind::format, "unsupported manifest schema");
    RunManifest m;
    try {
        if (j.contains("model")) m.model = resolve(base, j.at("model").get<std::string>());
        if (j.contains("tokenizer")) m.tokenizer = resolve(base, j.at("tokenizer").get<std::string>());
        if (j.contains("battery")) m.battery = resolve(base, j.at("battery").get<std::string>());
        if (j.contains("lexicon")) m.lexicon = resolve(base, j.at("lexicon").get<std::string>());
        if (j.contains("out")) m.out = resolve(base, j.at("out").get<std::string>());
        read(j, "seed", m.seed);
        read(j, "threads", m.threads);
        if (j.contains("grid")) {
            const auto& g = j.at("grid");
            read(g, "alphas", m.grid.alphas);
            read(g, "layers", m.grid.layers);
            read(g, "refinement_step", m.grid.refinement_step);
            read(g, "refinement_radius", m.grid.refinement_radius);
        }
        if (j.contains("thresholds")) {
            read(j.at("thresholds"), "tau", m.tau);
            read(j.at("thresholds"), "tau_r", m.tau_r);
        }
        if (j.contains("extraction")) {
            read(j.at("extraction"), "n_prompts", m.n_prompts);
            read(j.at("extraction"), "n_demos", m.n_demos);
        }
        if (j.contains("evaluation")) {
            const auto& e = j.at("evaluation");
            read(e, "n_queries", m.n_queries);
            read(e, "few_shot_k", m.few_shot_k);
            if (e.contains("positions")) m.positions = position_mode_from_string(e.at("positions").get<std::string>());
            if (e.contains("ood_choice")) {
                const auto c = e.at("ood_choice").get<std::string>();
                if (c == "source_best") m.ood_choice = OodLayerChoice::source_best;
                else if (c == "pair_best") m.ood_choice = OodLayerChoice::pair_best;
                else fail(ErrorKind::parameter, "unknown ood_choice '" + c + "'");
            }
        }
        if (j.contains("patching")) {
            const auto& p = j.at("patching");
            read(p, "n_queries", m.patch_queries);
            read(p, "pairs_per_task", m.patch_pairs_per_task);
            if (p.contains("positions"))
                m.patch_positions = position_mode_from_string(p.at("positions").get<std::string>());
        }
        if (j.contains("statistics")) {
            read(j.at("statistics"), "n_shuffles", m.n_shuffles);
            read(j.at("statistics"), "alpha", m.alpha);
        }
        read(j, "tasks", m.tasks);
        if (j.contains("stages"))
            for (const auto& s : j.at("stages")) m.stages.push_back(stage_from_string(s.get<std::string>()));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("manifest field has the wrong type: ") + e.what());
    }
    m.normalize();
    return m;
}

RunManifest RunManifest::load(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, "manifest " + path.string() + ": " + e.what());
    }
    return from_json(j, path.parent_path());
}

nlohmann::json RunManifest::cache_fields() const {
    return {
        {"seed", seed},
        {"grid",
         {{"alphas", grid.alphas},
          {"layers", grid.layers},
          {"refinement_step", grid.refinement_step},
          {"refinement_radius", grid.refinement_radius}}},
        {"thresholds", {{"tau", tau}, {"tau_r", tau_r}}},
        {"extraction", {{"n_prompts", n_prompts}, {"n_demos", n_demos}}},
        {"evaluation",
         {{"n_queries", n_queries},
          {"few_shot_k", few_shot_k},
          {"positions", to_string(positions)},
          {"ood_choice", to_string(ood_choice)}}},
        {"patching",
         {{"n_queries", patch_queries},
          {"pairs_per_task", patch_pairs_per_task},
          {"positions", to_string(patch_positions)}}},
        {"statistics", {{"n_shuffles", n_shuffles}, {"alpha", alpha}}},
        {"tasks", tasks},
    };
}

nlohmann::json RunManifest::to_json() const {
    auto j = cache_fields();
    j["schema"] = 1;
    j["model"] = model.string();
    if (tokenizer) j["tokenizer"] = tokenizer->string();
    j["battery"] = battery.string();
    if (lexicon) j["lexicon"] = lexicon->string();
    j["out"] = out.string();
    j["threads"] = threads;
    auto names = nlohmann::json::array();
    for (Stage s : stages) names.push_back(to_string(s));
    j["stages"] = names;
    return j;
}

void RunManifest::normalize() {
    std::vector<Stage> ordered;
    for (Stage s : all_stages())
        if (std::find(stages.begin(), stages.end(), s) != stages.end()) ordered.push_back(s);
    stages = std::move(ordered);
}

void RunManifest::validate() const {
    if (!(tau > 0.0) || !(tau_r > 0.0)) fail(ErrorKind::parameter, "thresholds must be positive");
    if (grid.alphas.empty()) fail(ErrorKind::parameter, "alpha grid is empty");
    for (std::size_t i = 0; i < grid.alphas.size(); ++i) {
        if (!(grid.alphas[i] > 0.0)) fail(ErrorKind::parameter, "alphas must be positive");
        if (i > 0 && !(grid.alphas[i] > grid.alphas[i - 1])) fail(ErrorKind::parameter, "alphas must increase");
    }
    if (!(grid.refinement_step > 0.0)) fail(ErrorKind::parameter, "refinement_step must be positive");
    if (grid.refinement_radius < 0) fail(ErrorKind::parameter, "refinement_radius must be >= 0");
    if (threads < 1) fail(ErrorKind::parameter, "threads must be >= 1");
    if (n_prompts < 1 || n_demos < 2 || n_queries < 1 || few_shot_k < 0 || n_shuffles < 1)
        fail(ErrorKind::parameter, "extraction and evaluation counts are out of range");
    if (patch_queries < 0 || patch_pairs_per_task < 0) fail(ErrorKind::parameter, "patching counts must be >= 0");
    if (!(alpha > 0.0 && alpha < 1.0)) fail(ErrorKind::parameter, "alpha must lie in (0, 1)");
    if (!std::is_sorted(stages.begin(), stages.end())) fail(ErrorKind::parameter, "stages are not in execution order");
}

std::filesystem::path RunManifest::lexicon_path() const {
    if (lexicon) return *lexicon;
    return battery.parent_path() / "lexicon" / "sentiment.json";
}

std::vector<Stage> RunManifest::selected_stages() const { return stages.empty() ? all_stages() : stages; }

}  // namespace fvlab
