#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace fvlab {

enum class NormKind { layernorm, rmsnorm };
enum class PosKind { learned, rotary };
enum class MlpKind { gelu_mlp, swiglu };

// Shape of a decoder-only transformer. Exactly two families are supported:
// GPT-2 style {layernorm, learned, gelu_mlp} and Llama style
// {rmsnorm, rotary, swiglu}.
struct ArchDescriptor {
    int n_layers = 0;
    int d_model = 0;
    int n_heads = 0;
    int n_kv_heads = 0;  // 0 means n_heads
    int vocab_size = 0;
    int max_context = 0;
    int d_ff = 0;  // 0 means 4 * d_model
    NormKind norm_kind = NormKind::layernorm;
    PosKind pos_kind = PosKind::learned;
    MlpKind mlp_kind = MlpKind::gelu_mlp;
    float norm_eps = 1e-5f;
    float rope_theta = 10000.0f;

    int head_dim() const { return d_model / n_heads; }
    int kv_heads() const { return n_kv_heads > 0 ? n_kv_heads : n_heads; }
    int kv_dim() const { return kv_heads() * head_dim(); }
    int ff_dim() const { return d_ff > 0 ? d_ff : 4 * d_model; }
    bool gpt2_style() const { return norm_kind == NormKind::layernorm; }

    // Throws integrity error on broken dimensions, capability error on an
    // unsupported family.
    void validate() const;

    bool operator==(const ArchDescriptor&) const = default;
};

struct TensorSpec {
    std::string name;
    std::vector<std::int64_t> dims;

    std::int64_t numel() const;
    bool operator==(const TensorSpec&) const = default;
};

// Every tensor the forward pass reads, in canonical checkpoint order.
// Linear weights are stored (in_features x out_features) so that y = x W + b.
std::vector<TensorSpec> expected_tensors(const ArchDescriptor& arch);

nlohmann::json arch_to_json(const ArchDescriptor& arch);
ArchDescriptor arch_from_json(const nlohmann::json& j);

std::string to_string(NormKind k);
std::string to_string(PosKind k);
std::string to_string(MlpKind k);

}  // namespace fvlab
