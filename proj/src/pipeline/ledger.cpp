#include "fvlab/pipeline/ledger.hpp"

#include <openssl/evp.h>

#include <cstdio>

#include "fvlab/common/error.hpp"
#include "fvlab/common/text.hpp"

namespace fvlab {

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        fail(ErrorKind::integrity, "SHA-256 computation failed");
    std::string hex;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", digest[i]);
        hex += buf;
    }
    return hex;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_text_file(path)); }

bool RunLedger::completed(const std::string& stage) const {
    auto it = stages.find(stage);
    return it != stages.end() && it->second.status == "completed";
}

bool RunLedger::outputs_intact(const std::string& stage, const std::filesystem::path& dir) const {
    auto it = stages.find(stage);
    if (it == stages.end()) return false;
    for (const auto& o : it->second.outputs) {
        const auto p = dir / o.path;
        if (!std::filesystem::exists(p) || sha256_file(p) != o.sha256) return false;
    }
    return true;
}

nlohmann::json RunLedger::to_json() const {
    nlohmann::json st = nlohmann::json::object();
    for (const auto& [name, r] : stages) {
        auto outs = nlohmann::json::array();
        for (const auto& o : r.outputs) outs.push_back({{"path", o.path}, {"sha256", o.sha256}});
        st[name] = {{"status", r.status},     {"input_hash", r.input_hash}, {"outputs", outs},
                    {"wall_seconds", r.wall_seconds}, {"cache_hit", r.cache_hit}, {"error", r.error},
                    {"counters", r.counters}};
    }
    return {{"schema", 1},
            {"code_version", code_version},
            {"model_sha256", model_sha256},
            {"battery_sha256", battery_sha256},
            {"stages", st}};
}

RunLedger RunLedger::from_json(const nlohmann::json& j) {
    RunLedger l;
    try {
        if (j.value("schema", 0) != 1) fail(ErrorKind::format, "unsupported ledger schema");
        l.code_version = j.value("code_version", "");
        l.model_sha256 = j.value("model_sha256", "");
        l.battery_sha256 = j.value("battery_sha256", "");
        for (const auto& [name, r] : j.at("stages").items()) {
            StageRecord rec;
            rec.status = r.at("status").get<std::string>();
            rec.input_hash = r.at("input_hash").get<std::string>();
            for (const auto& o : r.at("outputs")) rec.outputs.push_back({o.at("path"), o.at("sha256")});
            rec.wall_seconds = r.value("wall_seconds", 0.0);
            rec.cache_hit = r.value("cache_hit", false);
            rec.error = r.value("error", "");
            rec.counters = r.value("counters", nlohmann::json::object());
            l.stages[name] = std::move(rec);
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("malformed ledger: ") + e.what());
    }
    return l;
}

RunLedger RunLedger::load(const std::filesystem::path& path) {
    try {
        return from_json(nlohmann::json::parse(read_text_file(path)));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, "ledger " + path.string() + ": " + e.what());
    }
}

void RunLedger::save(const std::filesystem::path& path) const { write_text_file(path, to_json().dump(2) + "\n"); }

}  // namespace fvlab
