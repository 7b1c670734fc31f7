#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fvlab/battery/battery.hpp"
#include "fvlab/fv/fv.hpp"
#include "fvlab/model/model.hpp"

namespace fvlab {

struct TopK {
    double top1 = 0.0;
    double top5 = 0.0;
    double top10 = 0.0;

    bool operator==(const TopK&) const = default;
};

struct LensProfile {
    std::string task;
    std::string tmpl;
    std::string condition = "zero_shot";  // or "post_steering:<fv id>@<alpha>"
    std::map<int, TopK> per_layer;
    int n_prompts = 0;
    bool polarity = false;  // top1 = top5 = top10 = polarity accuracy

    double max_top10() const;
    bool operator==(const LensProfile&) const = default;
};

// First token ids of " " + output and of each alternative, deduplicated.
std::vector<int> gold_first_tokens(const Model& model, const ExamplePair& gold);

// Position of `id` in the ranking by (score desc, id asc); 0 is best.
std::size_t rank_of(std::span<const float> scores, int id);
// The k best ids under the same ordering.
std::vector<int> top_k_ids(std::span<const float> scores, std::size_t k);

// Zero-shot prompts (template + query) unless `plan` steers them.
LensProfile logit_lens(const Model& model, const TaskSpec& task, const TemplateSpec& tmpl,
                       std::span<const ExamplePair> queries, std::span<const int> layers,
                       const InterventionPlan* plan = nullptr, int threads = 1);

// Fraction of queries whose first greedily generated token is a gold first token.
double greedy_first_token_accuracy(const Model& model, const TaskSpec& task, const TemplateSpec& tmpl,
                                   std::span<const ExamplePair> queries, const InterventionPlan* plan = nullptr);

struct VocabProjection {
    std::string fv_id;
    std::vector<std::pair<std::string, double>> top_tokens;
    std::vector<int> top_ids;
    double correct_fraction = 0.0;

    nlohmann::json to_json() const;
};

bool token_matches_task(std::string_view token, const TaskSpec& task);

VocabProjection fv_vocab_projection(const Model& model, const FunctionVector& fv, const TaskSpec& task,
                                    std::size_t top_n = 50);

struct Lexicon {
    std::vector<std::string> positive;
    std::vector<std::string> negative;
};

Lexicon load_lexicon(const std::filesystem::path& path);

// Unit vector from the mean positive-word embedding to the mean
// negative-word embedding.
std::vector<float> sentiment_direction(const Model& model, const Lexicon& lexicon);

// True when the sign of cos(normed, direction) agrees with `polarity`
// ("negative" -> positive cosine). A zero cosine is never correct.
bool polarity_correct(std::span<const float> normed, std::span<const float> direction, std::string_view polarity);

LensProfile sentiment_polarity_readability(const Model& model, const TaskSpec& task, const TemplateSpec& tmpl,
                                           std::span<const ExamplePair> queries, std::span<const int> layers,
                                           const Lexicon& lexicon, const InterventionPlan* plan = nullptr,
                                           int threads = 1);

// Max over layers of the per-layer top-10 mean across profiles.
double pooled_max_top10(std::span<const LensProfile> profiles);

enum class Quadrant { both, readable_only, steerable_only, neither };
std::string to_string(Quadrant q);

struct QuadrantCell {
    std::string task;
    std::string run_id;
    bool readable = false;
    bool steerable = false;
    Quadrant quadrant = Quadrant::neither;
};

QuadrantCell quadrant_classify(const std::string& task, double best_iid, double best_top10, double tau = 0.10,
                               double tau_r = 0.10, std::string run_id = {});

struct LensDelta {
    std::string task;
    std::string tmpl;
    std::map<int, double> delta_top10;
    double max_delta = 0.0;
    int max_layer = 0;
};

LensDelta lens_delta(const LensProfile& zero_shot, const LensProfile& steered);

LensDelta post_steering_delta(const Model& model, const FunctionVector& fv, const TaskSpec& task,
                              const TemplateSpec& tmpl, int layer, double alpha, std::span<const ExamplePair> queries,
                              std::span<const int> tap_layers, int threads = 1);

std::string lens_csv(std::span<const LensProfile> profiles);

}  // namespace fvlab
