#include "fvlab/model/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <limits>

#include "fvlab/common/error.hpp"
#include "fvlab/common/text.hpp"

namespace fvlab {

namespace {

struct ByteAlphabet {
    std::array<char32_t, 256> to_cp{};
    std::unordered_map<char32_t, unsigned char> to_byte;

    ByteAlphabet() {
        std::array<bool, 256> direct{};
        for (int b = '!'; b <= '~'; ++b) direct[b] = true;
        for (int b = 0xA1; b <= 0xAC; ++b) direct[b] = true;
        for (int b = 0xAE; b <= 0xFF; ++b) direct[b] = true;
        int extra = 0;
        for (int b = 0; b < 256; ++b) {
            to_cp[b] = direct[b] ? static_cast<char32_t>(b) : static_cast<char32_t>(256 + extra++);
            to_byte[to_cp[b]] = static_cast<unsigned char>(b);
        }
    }
};

const ByteAlphabet& alphabet() {
    static const ByteAlphabet a;
    return a;
}

void append_utf8(std::string& out, char32_t cp) {
    if (cp < 0x80) {
        out += static_cast<char>(cp);
    } else if (cp < 0x800) {
        out += static_cast<char>(0xC0 | (cp >> 6));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
        out += static_cast<char>(0xE0 | (cp >> 12));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    }
}

bool next_code_point(std::string_view s, std::size_t& i, char32_t& cp) {
    const auto c0 = static_cast<unsigned char>(s[i]);
    int len = c0 < 0x80 ? 1 : (c0 >> 5) == 0x6 ? 2 : (c0 >> 4) == 0xE ? 3 : (c0 >> 3) == 0x1E ? 4 : 0;
    if (len == 0 || i + len > s.size()) return false;
    cp = len == 1 ? c0 : len == 2 ? (c0 & 0x1F) : len == 3 ? (c0 & 0x0F) : (c0 & 0x07);
    for (int k = 1; k < len; ++k) {
        const auto c = static_cast<unsigned char>(s[i + k]);
        if ((c >> 6) != 0x2) return false;
        cp = (cp << 6) | (c & 0x3F);
    }
    i += len;
    return true;
}

enum class CharClass { space, letter, digit, other };

CharClass classify(unsigned char c) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') return CharClass::space;
    if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80) return CharClass::letter;
    if (c >= '0' && c <= '9') return CharClass::digit;
    return CharClass::other;
}

std::size_t contraction_length(std::string_view s, std::size_t i) {
    if (s[i] != '\'') return 0;
    static constexpr std::string_view kSuffixes[] = {"ll", "re", "ve", "s", "t", "m", "d"};
    for (auto suffix : kSuffixes)
        if (s.substr(i + 1, suffix.size()) == suffix) return 1 + suffix.size();
    return 0;
}

std::size_t run_end(std::string_view s, std::size_t i, CharClass cls) {
    while (i < s.size() && classify(static_cast<unsigned char>(s[i])) == cls) ++i;
    return i;
}

}  // namespace

std::string bytes_to_unicode(std::string_view raw) {
    std::string out;
    for (unsigned char b : raw) append_utf8(out, alphabet().to_cp[b]);
    return out;
}

std::string unicode_to_bytes(std::string_view mapped) {
    std::string out;
    std::size_t i = 0;
    while (i < mapped.size()) {
        char32_t cp;
        if (!next_code_point(mapped, i, cp)) fail(ErrorKind::format, "invalid UTF-8 in token string");
        auto it = alphabet().to_byte.find(cp);
        if (it == alphabet().to_byte.end()) fail(ErrorKind::format, "token string outside the byte alphabet");
        out += static_cast<char>(it->second);
    }
    return out;
}

std::vector<std::string_view> pretokenize(std::string_view s) {
    std::vector<std::string_view> pieces;
    std::size_t i = 0;
    while (i < s.size()) {
        const std::size_t start = i;
        if (auto n = contraction_length(s, i)) {
            i += n;
        } else {
            const auto cls = classify(static_cast<unsigned char>(s[i]));
            if (cls != CharClass::space) {
                i = run_end(s, i, cls);
            } else if (s[i] == ' ' && i + 1 < s.size() &&
                       classify(static_cast<unsigned char>(s[i + 1])) != CharClass::space) {
                i = run_end(s, i + 1, classify(static_cast<unsigned char>(s[i + 1])));
            } else {
                const std::size_t end = run_end(s, i, CharClass::space);
                // A whitespace run followed by text leaves its last character
                // to lead the next piece.
                i = (end < s.size() && end - i > 1) ? end - 1 : end;
            }
        }
        pieces.push_back(s.substr(start, i - start));
    }
    return pieces;
}

BpeTokenizer BpeTokenizer::from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("vocab") || !j["vocab"].is_object())
        fail(ErrorKind::format, "tokenizer JSON needs a vocab object");
    BpeTokenizer t;
    if (j.contains("specials"))
        for (const auto& id : j["specials"]) t.specials_.push_back(id.get<int>());
    std::sort(t.specials_.begin(), t.specials_.end());

    const auto& vocab = j["vocab"];
    t.id_to_bytes_.assign(vocab.size(), {});
    std::vector<bool> seen(vocab.size(), false);
    for (auto it = vocab.begin(); it != vocab.end(); ++it) {
        const int id = it.value().get<int>();
        if (id < 0 || id >= static_cast<int>(vocab.size()) || seen[static_cast<std::size_t>(id)])
            fail(ErrorKind::format, "vocab ids must be dense and unique");
        seen[static_cast<std::size_t>(id)] = true;
        t.id_to_bytes_[static_cast<std::size_t>(id)] =
            std::binary_search(t.specials_.begin(), t.specials_.end(), id) ? it.key() : unicode_to_bytes(it.key());
    }
    if (j.contains("merges")) {
        for (const auto& m : j["merges"]) {
            std::string a, b;
            if (m.is_array() && m.size() == 2) {
                a = m[0].get<std::string>();
                b = m[1].get<std::string>();
            } else if (m.is_string()) {
                const auto s = m.get<std::string>();
                const auto sp = s.find(' ');
                if (sp == std::string::npos) fail(ErrorKind::format, "merge entry lacks a separator");
                a = s.substr(0, sp);
                b = s.substr(sp + 1);
            } else {
                fail(ErrorKind::format, "merge entries must be pairs");
            }
            t.merges_.emplace_back(unicode_to_bytes(a), unicode_to_bytes(b));
        }
    }
    t.finalize();
    return t;
}

BpeTokenizer BpeTokenizer::load(const std::filesystem::path& path) {
    try {
        return from_json(nlohmann::json::parse(read_text_file(path)));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, "tokenizer " + path.string() + ": " + e.what());
    }
}

BpeTokenizer BpeTokenizer::byte_level() { return from_merges({}); }

BpeTokenizer BpeTokenizer::from_merges(const std::vector<std::pair<std::string, std::string>>& merges) {
    BpeTokenizer t;
    for (int b = 0; b < 256; ++b) t.id_to_bytes_.emplace_back(1, static_cast<char>(b));
    for (const auto& [a, b] : merges) {
        t.merges_.emplace_back(a, b);
        t.id_to_bytes_.push_back(a + b);
    }
    t.finalize();
    return t;
}

void BpeTokenizer::finalize() {
    bytes_to_id_.clear();
    for (std::size_t id = 0; id < id_to_bytes_.size(); ++id) {
        if (is_special(static_cast<int>(id))) continue;
        bytes_to_id_.emplace(id_to_bytes_[id], static_cast<int>(id));
    }
    for (int b = 0; b < 256; ++b) {
        auto it = bytes_to_id_.find(std::string(1, static_cast<char>(b)));
        if (it == bytes_to_id_.end()) fail(ErrorKind::integrity, "vocabulary lacks byte token " + std::to_string(b));
        byte_ids_[b] = it->second;
    }
    merge_rank_.clear();
    for (std::size_t r = 0; r < merges_.size(); ++r) merge_rank_.emplace(merges_[r], static_cast<int>(r));
}

nlohmann::json BpeTokenizer::to_json() const {
    nlohmann::json vocab = nlohmann::json::object();
    for (std::size_t id = 0; id < id_to_bytes_.size(); ++id)
        vocab[is_special(static_cast<int>(id)) ? id_to_bytes_[id] : bytes_to_unicode(id_to_bytes_[id])] = id;
    auto merges = nlohmann::json::array();
    for (const auto& [a, b] : merges_) merges.push_back({bytes_to_unicode(a), bytes_to_unicode(b)});
    return {{"schema", 1}, {"vocab", vocab}, {"merges", merges}, {"specials", specials_}};
}

bool BpeTokenizer::is_special(int id) const {
    return std::binary_search(specials_.begin(), specials_.end(), id);
}

void BpeTokenizer::encode_piece(std::string_view piece, std::vector<int>& out) const {
    std::vector<std::string> symbols;
    symbols.reserve(piece.size());
    for (char c : piece) symbols.emplace_back(1, c);

    while (symbols.size() > 1) {
        int best_rank = std::numeric_limits<int>::max();
        std::size_t best_at = 0;
        for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
            auto it = merge_rank_.find({symbols[i], symbols[i + 1]});
            if (it != merge_rank_.end() && it->second < best_rank) {
                best_rank = it->second;
                best_at = i;
            }
        }
        if (best_rank == std::numeric_limits<int>::max()) break;
        const std::string first = symbols[best_at];
        const std::string second = symbols[best_at + 1];
        std::vector<std::string> merged;
        merged.reserve(symbols.size());
        for (std::size_t i = 0; i < symbols.size();) {
            if (i + 1 < symbols.size() && symbols[i] == first && symbols[i + 1] == second) {
                merged.push_back(first + second);
                i += 2;
            } else {
                merged.push_back(std::move(symbols[i]));
                ++i;
            }
        }
        symbols = std::move(merged);
    }
    for (const auto& s : symbols) {
        auto it = bytes_to_id_.find(s);
        if (it != bytes_to_id_.end()) {
            out.push_back(it->second);
        } else {
            for (unsigned char c : s) out.push_back(byte_ids_[c]);
        }
    }
}

std::vector<int> BpeTokenizer::encode(std::string_view text) const {
    std::vector<int> ids;
    if (id_to_bytes_.empty()) fail(ErrorKind::capability, "model has no tokenizer");
    for (auto piece : pretokenize(text)) encode_piece(piece, ids);
    return ids;
}

std::string BpeTokenizer::decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
        if (id < 0 || id >= size()) fail(ErrorKind::range, "token id out of range: " + std::to_string(id));
        out += id_to_bytes_[static_cast<std::size_t>(id)];
    }
    return out;
}

}  // namespace fvlab
