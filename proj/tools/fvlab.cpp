#include <cstdlib>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "fvlab/common/error.hpp"
#include "fvlab/common/text.hpp"
#include "fvlab/pipeline/pipeline.hpp"

using namespace fvlab;

namespace {

struct Overrides {
    std::string manifest;
    std::string model;
    std::string battery;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::vector<std::string> stages;
};

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--manifest", o.manifest, "Run manifest (JSON)");
    cmd->add_option("--model", o.model, "Checkpoint in XFVC format");
    cmd->add_option("--battery", o.battery, "Battery directory");
    cmd->add_option("--out", o.out, "Run directory");
    cmd->add_option("--seed", o.seed, "Master seed");
    cmd->add_option("--threads", o.threads, "Worker threads");
}

RunManifest build_manifest(const Overrides& o) {
    RunManifest m = o.manifest.empty() ? RunManifest{} : RunManifest::load(o.manifest);
    if (const char* env = std::getenv("FVLAB_OUT"); env && *env) m.out = env;
    if (const char* env = std::getenv("FVLAB_THREADS"); env && *env) {
        try {
            m.threads = std::stoi(env);
        } catch (const std::exception&) {
            fail(ErrorKind::parameter, "FVLAB_THREADS is not an integer");
        }
    }
    if (!o.model.empty()) m.model = o.model;
    if (!o.battery.empty()) m.battery = o.battery;
    if (!o.out.empty()) m.out = o.out;
    if (o.seed) m.seed = *o.seed;
    if (o.threads) m.threads = *o.threads;
    if (m.model.empty()) fail(ErrorKind::parameter, "no model given (--model or manifest)");
    if (m.battery.empty()) fail(ErrorKind::parameter, "no battery given (--battery or manifest)");
    return m;
}

int run_stages(const Overrides& o, const std::vector<Stage>& stages) {
    RunManifest m = build_manifest(o);
    if (!stages.empty()) m.stages = stages;
    m.normalize();
    const auto result = run_pipeline(m);
    for (Stage stage : m.selected_stages()) {
        const auto it = result.ledger.stages.find(std::string(to_string(stage)));
        if (it == result.ledger.stages.end()) continue;
        const auto& rec = it->second;
        std::cout << it->first << ": " << rec.status << (rec.cache_hit ? " (cached)" : "");
        if (!rec.error.empty()) std::cout << " - " << rec.error;
        std::cout << "\n";
    }
    std::cout << "run directory: " << m.out.string() << "\n";
    return result.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Function-vector steering and logit-lens laboratory"};
    app.require_subcommand(1);
    Overrides o;
    std::vector<std::pair<CLI::App*, Stage>> stage_cmds;
    for (Stage s : all_stages()) {
        auto* cmd = app.add_subcommand(to_string(s), "Run the " + to_string(s) + " stage");
        add_common(cmd, o);
        stage_cmds.emplace_back(cmd, s);
    }
    auto* all = app.add_subcommand("all", "Run every stage (or those named with --stage)");
    add_common(all, o);
    all->add_option("--stage", o.stages, "Restrict to these stages");

    std::string run_a, run_b, compare_out;
    auto* compare = app.add_subcommand("compare", "Per-task IID deltas between two runs (b - a)");
    compare->add_option("run_a", run_a, "Baseline run directory")->required();
    compare->add_option("run_b", run_b, "Comparison run directory")->required();
    compare->add_option("--out", compare_out, "Write the delta table here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (compare->parsed()) {
            const auto report = compare_runs(run_a, run_b);
            if (!compare_out.empty()) write_text_file(std::filesystem::path(compare_out) / "compare.csv", report.csv());
            std::cout << report.csv();
            return 0;
        }
        if (all->parsed()) {
            std::vector<Stage> stages;
            for (const auto& s : o.stages) stages.push_back(stage_from_string(s));
            return run_stages(o, stages);
        }
        for (const auto& [cmd, stage] : stage_cmds)
            if (cmd->parsed()) return run_stages(o, {stage});
    } catch (const Error& e) {
        std::cerr << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
