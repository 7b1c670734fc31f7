#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fvlab/fv/fv.hpp"
#include "fvlab/geometry/transfer.hpp"

namespace fvlab {

inline constexpr std::string_view kCodeVersion = "fvlab-1.0.0";

// Listed in execution order; every stage comes after its dependencies.
enum class Stage { baseline, extract, steer, gate, transfer, lens, project, patch, stats, report };

const std::vector<Stage>& all_stages();
std::string to_string(Stage s);
Stage stage_from_string(std::string_view name);  // parameter error on unknown names
const std::vector<Stage>& stage_dependencies(Stage s);

struct RunManifest {
    std::filesystem::path model;
    std::optional<std::filesystem::path> tokenizer;
    std::filesystem::path battery;
    std::optional<std::filesystem::path> lexicon;  // default: <battery>/../lexicon/sentiment.json
    std::filesystem::path out = "fvlab-run";
    std::uint64_t seed = 0;
    int threads = 1;

    SweepGrid grid;  // empty layers = every layer of the model
    double tau = 0.10;
    double tau_r = 0.10;

    int n_prompts = 20;
    int n_demos = 15;
    int n_queries = 50;
    int few_shot_k = 5;
    PositionMode positions = PositionMode::all_positions;

    OodLayerChoice ood_choice = OodLayerChoice::source_best;

    int patch_queries = 0;         // 0 = n_queries
    int patch_pairs_per_task = 0;  // 0 = all 56
    PositionMode patch_positions = PositionMode::all_positions;

    int n_shuffles = 1000;
    double alpha = 0.05;  // family-wise level before Bonferroni

    std::vector<std::string> tasks;  // empty = whole battery
    std::vector<Stage> stages;       // empty = every stage

    // Relative paths resolve against `base`.
    static RunManifest from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
    static RunManifest load(const std::filesystem::path& path);
    nlohmann::json to_json() const;

    // Fields that change results; paths, threads and the stage list are left out.
    nlohmann::json cache_fields() const;

    // Sorts stages into execution order and drops duplicates.
    void normalize();
    void validate() const;

    std::filesystem::path lexicon_path() const;
    std::vector<Stage> selected_stages() const;
};

std::string to_string(PositionMode m);
PositionMode position_mode_from_string(std::string_view s);
std::string to_string(OodLayerChoice c);

}  // namespace fvlab
