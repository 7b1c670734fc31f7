#include "fvlab/battery/battery.hpp"

#include <algorithm>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "fvlab/common/error.hpp"
#include "fvlab/common/rng.hpp"
#include "fvlab/common/text.hpp"

namespace fvlab {

std::string to_string(Category c) {
    switch (c) {
        case Category::lexical: return "lexical";
        case Category::factual: return "factual";
        case Category::morphological: return "morphological";
        case Category::character: return "character";
        case Category::compositional: return "compositional";
    }
    return "?";
}

std::string to_string(EvalMode m) {
    switch (m) {
        case EvalMode::substring_ci: return "substring_ci";
        case EvalMode::case_sensitive: return "case_sensitive";
        case EvalMode::polarity: return "polarity";
    }
    return "?";
}

std::string to_string(Style s) {
    switch (s) {
        case Style::natural: return "natural";
        case Style::symbolic: return "symbolic";
        case Style::question: return "question";
        case Style::formal: return "formal";
    }
    return "?";
}

Style style_from_string(std::string_view s) {
    const auto lower = to_lower(s);
    if (lower == "natural") return Style::natural;
    if (lower == "symbolic") return Style::symbolic;
    if (lower == "question") return Style::question;
    if (lower == "formal") return Style::formal;
    fail(ErrorKind::battery_integrity, "unknown template style '" + std::string(s) + "'");
}

std::string TemplateSpec::render(std::string_view x) const {
    std::string out = pattern;
    const auto at = out.find("{X}");
    if (at == std::string::npos) fail(ErrorKind::battery_integrity, "template " + id + " has no {X} placeholder");
    out.replace(at, 3, x);
    return out;
}

const std::vector<TaskInfo>& task_catalog() {
    using C = Category;
    using E = EvalMode;
    static const std::vector<TaskInfo> catalog{
        {"antonym", C::lexical, E::substring_ci, 5, 0.45, 0.60, 95},
        {"synonym", C::lexical, E::substring_ci, 5, 0.20, 0.40, 88},
        {"hypernym", C::lexical, E::substring_ci, 5, 0.25, 0.45, 86},
        {"country_capital", C::factual, E::substring_ci, 5, 0.40, 0.65, 90},
        {"english_spanish", C::factual, E::substring_ci, 5, 0.25, 0.50, 88},
        {"object_color", C::factual, E::substring_ci, 5, 0.30, 0.55, 85},
        {"past_tense", C::morphological, E::substring_ci, 5, 0.35, 0.55, 90},
        {"plural", C::morphological, E::substring_ci, 5, 0.30, 0.50, 90},
        {"capitalize", C::character, E::case_sensitive, 5, 0.00, 0.05, 84},
        {"first_letter", C::character, E::substring_ci, 3, 0.05, 0.20, 86},
        {"reverse_word", C::character, E::substring_ci, 5, 0.00, 0.08, 80},
        {"sentiment_flip", C::compositional, E::substring_ci, 10, 0.00, 0.05, 60},
    };
    return catalog;
}

const TaskInfo* find_task_info(std::string_view name) {
    for (const auto& t : task_catalog())
        if (t.name == name) return &t;
    return nullptr;
}

const TemplateSpec& TaskSpec::find_template(std::string_view id) const {
    for (const auto& t : templates)
        if (t.id == id) return t;
    fail(ErrorKind::parameter, "task " + name() + " has no template " + std::string(id));
}

std::span<const ExamplePair> TaskSpec::demo_pool() const {
    return std::span<const ExamplePair>(examples).first((examples.size() + 1) / 2);
}

std::span<const ExamplePair> TaskSpec::query_pool() const {
    return std::span<const ExamplePair>(examples).subspan((examples.size() + 1) / 2);
}

const TaskSpec& Battery::task(std::string_view name) const {
    for (const auto& t : tasks)
        if (t.name() == name) return t;
    fail(ErrorKind::parameter, "battery has no task '" + std::string(name) + "'");
}

std::size_t Battery::template_count() const {
    std::size_t n = 0;
    for (const auto& t : tasks) n += t.templates.size();
    return n;
}

std::vector<ExamplePair> parse_dataset(std::string_view jsonl, const std::string& source) {
    std::vector<ExamplePair> rows;
    int line_no = 0;
    for (const auto& line : split_lines(jsonl)) {
        ++line_no;
        if (trim(line).empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::ingestion, source + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (j.contains("schema") && !j.contains("input")) {
            if (j["schema"] != 1) fail(ErrorKind::format, source + ": unsupported schema " + j["schema"].dump());
            continue;
        }
        ExamplePair p;
        try {
            p.input = j.at("input").get<std::string>();
            p.output = j.at("output").get<std::string>();
            if (j.contains("alternatives")) p.alternatives = j["alternatives"].get<std::vector<std::string>>();
            if (j.contains("polarity")) p.polarity = j["polarity"].get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::ingestion, source + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (p.input.empty() || p.output.empty())
            fail(ErrorKind::ingestion, source + ":" + std::to_string(line_no) + ": empty input or output");
        if (std::find(p.alternatives.begin(), p.alternatives.end(), p.output) != p.alternatives.end())
            fail(ErrorKind::ingestion, source + ":" + std::to_string(line_no) + ": alternative repeats the output");
        rows.push_back(std::move(p));
    }
    return rows;
}

void verify_battery(const Battery& battery) {
    static const Style kStyles[] = {Style::natural, Style::natural, Style::symbolic, Style::symbolic,
                                    Style::question, Style::question, Style::formal, Style::formal};
    std::map<std::string, std::string> owner;
    for (const auto& task : battery.tasks) {
        if (task.templates.size() != 8)
            fail(ErrorKind::battery_integrity, task.name() + " registers " + std::to_string(task.templates.size()) +
                                                   " templates, expected 8");
        for (std::size_t i = 0; i < 8; ++i) {
            const auto& t = task.templates[i];
            if (t.id != "T" + std::to_string(i + 1))
                fail(ErrorKind::battery_integrity, task.name() + ": template " + std::to_string(i + 1) + " has id " + t.id);
            if (t.style != kStyles[i])
                fail(ErrorKind::battery_integrity, task.name() + " " + t.id + " should be " + to_string(kStyles[i]));
            const auto first = t.pattern.find("{X}");
            if (first == std::string::npos || t.pattern.find("{X}", first + 1) != std::string::npos)
                fail(ErrorKind::battery_integrity, task.name() + " " + t.id + " needs exactly one {X}");
            auto [it, inserted] = owner.emplace(t.pattern, task.name() + " " + t.id);
            if (!inserted)
                fail(ErrorKind::battery_integrity, "template string \"" + t.pattern + "\" is shared by " + it->second +
                                                       " and " + task.name() + " " + t.id);
        }
        if (task.examples.empty()) fail(ErrorKind::ingestion, task.name() + " has no examples");
    }
}

Battery load_battery(const std::filesystem::path& dir) {
    const auto registry_path = dir / "templates.json";
    if (!std::filesystem::exists(registry_path))
        fail(ErrorKind::ingestion, "missing template registry " + registry_path.string());
    nlohmann::json registry;
    try {
        registry = nlohmann::json::parse(read_text_file(registry_path));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, registry_path.string() + ": " + e.what());
    }
    if (!registry.is_object() || registry.value("schema", 0) != 1)
        fail(ErrorKind::format, registry_path.string() + ": expected an object with \"schema\": 1");

    for (auto it = registry.begin(); it != registry.end(); ++it)
        if (it.key() != "schema" && !find_task_info(it.key()))
            fail(ErrorKind::ingestion, "registry lists unknown task '" + it.key() + "'");

    Battery battery;
    for (const auto& info : task_catalog()) {
        if (!registry.contains(info.name)) continue;
        TaskSpec task;
        task.info = info;
        const auto& list = registry[info.name];
        if (!list.is_array()) fail(ErrorKind::format, info.name + ": templates must be an array");
        for (const auto& entry : list) {
            try {
                task.templates.push_back({entry.at("id").get<std::string>(),
                                          style_from_string(entry.at("style").get<std::string>()),
                                          entry.at("pattern").get<std::string>()});
            } catch (const nlohmann::json::exception& e) {
                fail(ErrorKind::format, info.name + ": malformed template entry: " + e.what());
            }
        }
        const auto data_path = dir / (info.name + ".jsonl");
        if (!std::filesystem::exists(data_path)) fail(ErrorKind::ingestion, "missing dataset " + data_path.string());
        task.examples = parse_dataset(read_text_file(data_path), data_path.string());
        battery.tasks.push_back(std::move(task));
    }
    if (battery.tasks.empty()) fail(ErrorKind::ingestion, "registry lists no tasks");
    verify_battery(battery);
    return battery;
}

PromptBundle build_prompt(const TemplateSpec& tmpl, std::vector<std::pair<std::string, std::string>> demos,
                          std::string_view query_input) {
    PromptBundle b;
    for (const auto& [in, out] : demos) {
        b.rendered += tmpl.render(in);
        b.rendered += ' ';
        b.rendered += out;
        b.rendered += '\n';
    }
    b.rendered += tmpl.render(query_input);
    b.demos = std::move(demos);
    b.query_input = std::string(query_input);
    return b;
}

std::vector<std::size_t> seeded_derangement(const std::vector<std::string>& values, std::uint64_t seed) {
    const std::size_t n = values.size();
    if (n < 2) fail(ErrorKind::parameter, "a derangement needs at least 2 items");
    std::map<std::string, std::size_t> counts;
    for (const auto& v : values) ++counts[to_lower(v)];
    for (const auto& [v, c] : counts)
        if (2 * c > n) fail(ErrorKind::parameter, "no derangement exists: output '" + v + "' fills over half the demos");

    Rng rng(seed);
    std::vector<std::size_t> p(n);
    auto clash = [&](std::size_t i, std::size_t j) { return equals_ci(values[j], values[i]); };
    for (int attempt = 0; attempt < 1000; ++attempt) {
        for (std::size_t i = 0; i < n; ++i) p[i] = i;
        rng.shuffle(p);
        // Repair fixed points by swapping with a partner that resolves both.
        bool ok = true;
        for (std::size_t i = 0; i < n && ok; ++i) {
            if (!clash(i, p[i])) continue;
            ok = false;
            const std::size_t start = static_cast<std::size_t>(rng.below(n));
            for (std::size_t k = 0; k < n; ++k) {
                const std::size_t j = (start + k) % n;
                if (j != i && !clash(i, p[j]) && !clash(j, p[i])) {
                    std::swap(p[i], p[j]);
                    ok = true;
                    break;
                }
            }
        }
        if (ok) {
            bool valid = true;
            for (std::size_t i = 0; i < n; ++i) valid = valid && !clash(i, p[i]);
            if (valid) return p;
        }
    }
    fail(ErrorKind::parameter, "could not construct a derangement of the demo outputs");
}

std::pair<PromptBundle, PromptBundle> build_contrast_prompts(const TaskSpec& task, const TemplateSpec& tmpl,
                                                             const ExamplePair& query, int n_demos,
                                                             std::uint64_t seed, ContrastOptions options) {
    if (n_demos < 2) fail(ErrorKind::parameter, "contrast prompts need n_demos >= 2 for a derangement");
    if (static_cast<int>(task.examples.size()) < n_demos + 1)
        fail(ErrorKind::insufficient_data, task.name() + " has " + std::to_string(task.examples.size()) +
                                               " examples, needs " + std::to_string(n_demos + 1));
    std::vector<const ExamplePair*> pool;
    for (const auto& e : task.demo_pool())
        if (e.input != query.input) pool.push_back(&e);
    if (static_cast<int>(pool.size()) < n_demos)
        fail(ErrorKind::insufficient_data, task.name() + ": demo pool holds " + std::to_string(pool.size()) +
                                               " examples, needs " + std::to_string(n_demos));

    Rng rng(derive_seed(seed, {"demos"}));
    rng.shuffle(pool);
    pool.resize(static_cast<std::size_t>(n_demos));

    std::vector<std::pair<std::string, std::string>> pos, neg;
    std::vector<std::string> outputs;
    for (const auto* e : pool) {
        pos.emplace_back(e->input, e->output);
        outputs.push_back(e->output);
    }
    if (options.derange) {
        const auto p = seeded_derangement(outputs, derive_seed(seed, {"derangement"}));
        for (std::size_t i = 0; i < pool.size(); ++i) neg.emplace_back(pool[i]->input, outputs[p[i]]);
    } else {
        neg = pos;
    }
    return {build_prompt(tmpl, std::move(pos), query.input), build_prompt(tmpl, std::move(neg), query.input)};
}

namespace {

std::vector<ExamplePair> seeded_subset(std::span<const ExamplePair> pool, int n, std::uint64_t seed) {
    std::vector<std::size_t> idx(pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed);
    rng.shuffle(idx);
    idx.resize(std::min(idx.size(), static_cast<std::size_t>(std::max(n, 0))));
    std::sort(idx.begin(), idx.end());
    std::vector<ExamplePair> out;
    for (auto i : idx) out.push_back(pool[i]);
    return out;
}

}  // namespace

std::vector<ExamplePair> select_queries(const TaskSpec& task, int n, std::uint64_t seed) {
    return seeded_subset(task.query_pool(), n, derive_seed(seed, {"queries", task.name()}));
}

std::vector<ExamplePair> select_extraction_queries(const TaskSpec& task, int n, std::uint64_t seed) {
    if (static_cast<int>(task.demo_pool().size()) < n)
        fail(ErrorKind::insufficient_data, task.name() + ": " + std::to_string(n) +
                                               " extraction queries requested, demo pool holds " +
                                               std::to_string(task.demo_pool().size()));
    return seeded_subset(task.demo_pool(), n, derive_seed(seed, {"extraction", task.name()}));
}

bool match_answer(EvalMode mode, std::string_view generated, const ExamplePair& gold) {
    auto hit = [&](std::string_view answer) {
        return mode == EvalMode::case_sensitive ? generated.find(answer) != std::string_view::npos
                                                : contains_ci(generated, answer);
    };
    if (hit(gold.output)) return true;
    return std::any_of(gold.alternatives.begin(), gold.alternatives.end(), hit);
}

bool match_answer(const TaskSpec& task, std::string_view generated, const ExamplePair& gold) {
    return match_answer(task.info.eval_mode, generated, gold);
}

}  // namespace fvlab
