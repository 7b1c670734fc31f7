#include "fvlab/model/container.hpp"

#include <bit>
#include <cstring>
#include <limits>

#include "fvlab/common/error.hpp"
#include "fvlab/common/text.hpp"

namespace fvlab {

namespace {

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(std::string_view in, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return v;
}

void put_floats(std::string& out, const std::vector<float>& data) {
    const std::size_t at = out.size();
    out.resize(at + data.size() * 4);
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(out.data() + at, data.data(), data.size() * 4);
    } else {
        for (std::size_t i = 0; i < data.size(); ++i) {
            const auto bits = std::bit_cast<std::uint32_t>(data[i]);
            for (int b = 0; b < 4; ++b) out[at + 4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
        }
    }
}

void get_floats(std::string_view in, std::size_t at, std::vector<float>& data) {
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(data.data(), in.data() + at, data.size() * 4);
    } else {
        for (std::size_t i = 0; i < data.size(); ++i) data[i] = std::bit_cast<float>(get_u32(in, at + 4 * i));
    }
}

}  // namespace

const Tensor* Container::find(std::string_view name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

std::string encode_container(std::string_view magic, nlohmann::json manifest, const std::vector<Tensor>& tensors) {
    auto list = nlohmann::json::array();
    for (const auto& t : tensors) {
        std::int64_t n = 1;
        for (auto d : t.dims) n *= d;
        if (n != static_cast<std::int64_t>(t.data.size()))
            fail(ErrorKind::integrity, "tensor '" + t.name + "' payload does not match its dims");
        list.push_back({{"name", t.name}, {"dims", t.dims}});
    }
    manifest["tensors"] = std::move(list);
    const std::string text = manifest.dump();

    std::string out;
    out.append(magic);
    put_u32(out, kContainerVersion);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    for (const auto& t : tensors) put_floats(out, t.data);
    return out;
}

Container decode_container(std::string_view bytes, std::string_view magic) {
    if (bytes.size() < 12 || bytes.substr(0, 4) != magic)
        fail(ErrorKind::format, "bad magic, expected '" + std::string(magic) + "'");
    const auto version = get_u32(bytes, 4);
    if (version != kContainerVersion) fail(ErrorKind::format, "unsupported container version " + std::to_string(version));
    const auto manifest_len = get_u32(bytes, 8);
    if (12 + static_cast<std::size_t>(manifest_len) > bytes.size()) fail(ErrorKind::integrity, "manifest truncated");

    Container c;
    try {
        c.manifest = nlohmann::json::parse(bytes.substr(12, manifest_len));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("manifest is not valid JSON: ") + e.what());
    }
    if (!c.manifest.is_object() || !c.manifest.contains("tensors") || !c.manifest["tensors"].is_array())
        fail(ErrorKind::format, "manifest lacks a tensor list");

    std::size_t at = 12 + manifest_len;
    for (const auto& entry : c.manifest["tensors"]) {
        Tensor t;
        try {
            t.name = entry.at("name").get<std::string>();
            t.dims = entry.at("dims").get<std::vector<std::int64_t>>();
        } catch (const nlohmann::json::exception&) {
            fail(ErrorKind::format, "malformed tensor entry in manifest");
        }
        std::int64_t n = 1;
        for (auto d : t.dims) {
            if (d < 0) fail(ErrorKind::integrity, "negative dimension in '" + t.name + "'");
            n *= d;
        }
        const std::size_t nbytes = static_cast<std::size_t>(n) * 4;
        if (at + nbytes > bytes.size())
            fail(ErrorKind::integrity, "payload for '" + t.name + "' is shorter than its declared shape");
        t.data.resize(static_cast<std::size_t>(n));
        get_floats(bytes, at, t.data);
        at += nbytes;
        c.tensors.push_back(std::move(t));
    }
    if (at != bytes.size()) fail(ErrorKind::integrity, "trailing bytes after the last tensor payload");
    return c;
}

void write_container(const std::filesystem::path& path, std::string_view magic, nlohmann::json manifest,
                     const std::vector<Tensor>& tensors) {
    write_text_file(path, encode_container(magic, std::move(manifest), tensors));
}

Container read_container(const std::filesystem::path& path, std::string_view magic) {
    if (!std::filesystem::exists(path)) fail(ErrorKind::io, "no such file: " + path.string());
    return decode_container(read_text_file(path), magic);
}

}  // namespace fvlab
