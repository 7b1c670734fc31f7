#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace fvlab {

// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

struct OutputFile {
    std::string path;  // relative to the run directory
    std::string sha256;

    bool operator==(const OutputFile&) const = default;
};

struct StageRecord {
    std::string status = "pending";  // completed, failed, blocked, pending
    std::string input_hash;
    std::vector<OutputFile> outputs;
    double wall_seconds = 0.0;
    bool cache_hit = false;
    std::string error;
    nlohmann::json counters = nlohmann::json::object();
};

struct RunLedger {
    std::string code_version;
    std::string model_sha256;
    std::string battery_sha256;
    std::map<std::string, StageRecord> stages;

    bool completed(const std::string& stage) const;
    // Every recorded output still exists under `dir` with its recorded hash.
    bool outputs_intact(const std::string& stage, const std::filesystem::path& dir) const;

    nlohmann::json to_json() const;
    static RunLedger from_json(const nlohmann::json& j);
    static RunLedger load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
};

}  // namespace fvlab
