#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace fvlab {

enum class Category { lexical, factual, morphological, character, compositional };
enum class EvalMode { substring_ci, case_sensitive, polarity };
enum class Style { natural, symbolic, question, formal };

std::string to_string(Category c);
std::string to_string(EvalMode m);
std::string to_string(Style s);
Style style_from_string(std::string_view s);

struct ExamplePair {
    std::string input;
    std::string output;
    std::vector<std::string> alternatives;
    // Expected sentiment of the output ("positive" / "negative"), used by the
    // polarity readout. Empty for tasks without a polarity.
    std::string polarity;

    bool operator==(const ExamplePair&) const = default;
};

struct TemplateSpec {
    std::string id;  // T1..T8
    Style style = Style::natural;
    std::string pattern;  // exactly one "{X}"

    std::string render(std::string_view x) const;
    bool operator==(const TemplateSpec&) const = default;
};

// Fixed per-task metadata. expected_iid is carried along as reference only.
struct TaskInfo {
    std::string name;
    Category category;
    EvalMode eval_mode;
    int max_new_tokens;
    double expected_iid_lo;
    double expected_iid_hi;
    int reference_n;
};

const std::vector<TaskInfo>& task_catalog();
const TaskInfo* find_task_info(std::string_view name);

struct TaskSpec {
    TaskInfo info;
    std::vector<TemplateSpec> templates;
    std::vector<ExamplePair> examples;

    const std::string& name() const { return info.name; }
    const TemplateSpec& find_template(std::string_view id) const;

    // Demos come from the first ceil(n/2) examples, evaluation queries from
    // the rest.
    std::span<const ExamplePair> demo_pool() const;
    std::span<const ExamplePair> query_pool() const;
};

struct Battery {
    std::vector<TaskSpec> tasks;  // catalog order

    const TaskSpec& task(std::string_view name) const;
    std::size_t template_count() const;
};

// Reads templates.json plus one <task>.jsonl per registered task.
Battery load_battery(const std::filesystem::path& dir);
// Throws battery-integrity errors: template counts, ids, style partition,
// placeholder count, and template strings shared anywhere in the battery.
void verify_battery(const Battery& battery);

std::vector<ExamplePair> parse_dataset(std::string_view jsonl, const std::string& source);

struct PromptBundle {
    std::vector<std::pair<std::string, std::string>> demos;
    std::string query_input;
    std::string rendered;

    bool operator==(const PromptBundle&) const = default;
};

// Demo lines "<rendered input> <output>\n", then the rendered query with the
// answer slot empty.
PromptBundle build_prompt(const TemplateSpec& tmpl, std::vector<std::pair<std::string, std::string>> demos,
                          std::string_view query_input);

struct ContrastOptions {
    bool derange = true;  // false only for degenerate harnesses
};

// Positive and negative bundles over the same seeded demo inputs (drawn from
// the demo pool, never the query itself). Negative outputs are a seeded
// derangement: no demo keeps an output equal to its own.
std::pair<PromptBundle, PromptBundle> build_contrast_prompts(const TaskSpec& task, const TemplateSpec& tmpl,
                                                             const ExamplePair& query, int n_demos,
                                                             std::uint64_t seed, ContrastOptions options = {});

// Permutation p of [0, n) with equals_ci(values[p[i]], values[i]) false for
// every i. Parameter error when none exists.
std::vector<std::size_t> seeded_derangement(const std::vector<std::string>& values, std::uint64_t seed);

// Seeded choice of up to n examples from the held-out half, in dataset order.
std::vector<ExamplePair> select_queries(const TaskSpec& task, int n, std::uint64_t seed);
// Seeded choice of n distinct queries from the demo half for FV extraction.
std::vector<ExamplePair> select_extraction_queries(const TaskSpec& task, int n, std::uint64_t seed);

bool match_answer(const TaskSpec& task, std::string_view generated, const ExamplePair& gold);
bool match_answer(EvalMode mode, std::string_view generated, const ExamplePair& gold);

}  // namespace fvlab
