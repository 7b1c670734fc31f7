#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fvlab/model/arch.hpp"

namespace fvlab {

// Binary container shared by checkpoints ("XFVC") and FV stores ("XFVS"):
//
//   magic[4] | version u32 LE | manifest_len u32 LE | manifest (UTF-8 JSON)
//   | raw row-major f32 LE payload of each tensor, in manifest order
//
// The manifest carries a "tensors" array of {name, dims}; every other
// manifest field belongs to the caller.
inline constexpr std::string_view kCheckpointMagic = "XFVC";
inline constexpr std::string_view kStoreMagic = "XFVS";
inline constexpr std::uint32_t kContainerVersion = 1;

struct Tensor {
    std::string name;
    std::vector<std::int64_t> dims;
    std::vector<float> data;

    TensorSpec spec() const { return {name, dims}; }
};

struct Container {
    nlohmann::json manifest;  // includes "tensors"
    std::vector<Tensor> tensors;

    const Tensor* find(std::string_view name) const;
};

// Serializes `manifest` (without "tensors"; it is filled from `tensors`).
std::string encode_container(std::string_view magic, nlohmann::json manifest, const std::vector<Tensor>& tensors);
Container decode_container(std::string_view bytes, std::string_view magic);

void write_container(const std::filesystem::path& path, std::string_view magic, nlohmann::json manifest,
                     const std::vector<Tensor>& tensors);
Container read_container(const std::filesystem::path& path, std::string_view magic);

}  // namespace fvlab
