#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace fvlab {

// Byte-level BPE. Vocabulary strings use the GPT-2 byte-to-unicode alphabet
// so hub vocabularies load unchanged; special-token strings are taken
// verbatim. Every one of the 256 byte tokens must be present, which makes
// encode total and decode(encode(x)) == x for any byte string.
class BpeTokenizer {
public:
    BpeTokenizer() = default;

    // {vocab: {token: id}, merges: [[a, b], ...] or ["a b", ...], specials: [id, ...]}
    static BpeTokenizer from_json(const nlohmann::json& j);
    static BpeTokenizer load(const std::filesystem::path& path);
    // 256 single-byte tokens (id == byte value), no merges.
    static BpeTokenizer byte_level();
    // Byte tokens plus the given merges, ids assigned in merge order after 255.
    static BpeTokenizer from_merges(const std::vector<std::pair<std::string, std::string>>& merges);

    nlohmann::json to_json() const;

    std::vector<int> encode(std::string_view text) const;
    std::string decode(std::span<const int> ids) const;

    const std::string& token_bytes(int id) const { return id_to_bytes_.at(static_cast<std::size_t>(id)); }
    int size() const { return static_cast<int>(id_to_bytes_.size()); }
    int max_id() const { return size() - 1; }
    bool is_special(int id) const;
    int byte_token(unsigned char b) const { return byte_ids_[b]; }
    const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

private:
    void finalize();
    void encode_piece(std::string_view piece, std::vector<int>& out) const;

    std::vector<std::string> id_to_bytes_;
    std::unordered_map<std::string, int> bytes_to_id_;
    std::vector<std::pair<std::string, std::string>> merges_;  // raw bytes, rank order
    std::map<std::pair<std::string, std::string>, int> merge_rank_;
    std::vector<int> specials_;
    int byte_ids_[256] = {};
};

// GPT-2 style pre-tokenization (contractions, optional-space letter / digit /
// symbol runs, whitespace runs). Non-ASCII bytes count as letters. The pieces
// partition the input exactly.
std::vector<std::string_view> pretokenize(std::string_view text);

// GPT-2 byte <-> printable code point mapping, UTF-8 encoded.
std::string bytes_to_unicode(std::string_view raw);
std::string unicode_to_bytes(std::string_view mapped);  // throws format error on foreign code points

}  // namespace fvlab
