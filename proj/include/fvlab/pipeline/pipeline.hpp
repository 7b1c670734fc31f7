#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fvlab/pipeline/ledger.hpp"
#include "fvlab/pipeline/manifest.hpp"

namespace fvlab {

// The nine table reports every complete run emits under <out>/reports.
const std::vector<std::string>& report_files();

struct RunResult {
    RunLedger ledger;
    std::vector<std::string> executed;  // stages recomputed in this invocation
    std::vector<std::string> failed;    // failed or blocked stages
    int exit_code = 0;                  // 0, or 4 when any stage failed
};

// Runs the manifest's stages in order, reusing cached stages whose input
// hash and outputs are unchanged. Throws a dependency error before doing
// any work when a required upstream stage is neither selected nor cached.
RunResult run_pipeline(const RunManifest& manifest);

struct CompareRow {
    std::string task;
    double iid_a = 0.0;
    double iid_b = 0.0;
    double delta = 0.0;  // b - a
};

struct CompareReport {
    std::vector<CompareRow> rows;
    double mean_delta = 0.0;

    std::string csv() const;
};

// Works on the gate artifacts of two runs.
CompareReport compare_gates(const nlohmann::json& gate_a, const nlohmann::json& gate_b);
// Battery mismatch between the runs is a comparison error.
CompareReport compare_runs(const std::filesystem::path& run_a, const std::filesystem::path& run_b);

}  // namespace fvlab
