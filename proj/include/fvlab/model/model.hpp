#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fvlab/model/arch.hpp"
#include "fvlab/model/container.hpp"
#include "fvlab/model/tokenizer.hpp"

namespace fvlab {

enum class PositionMode { all_positions, final_position_only };

// h'_l = h_l + alpha * vector, applied to the post-block residual at `layer`
// before any later block reads it.
struct InterventionPlan {
    int layer = 0;
    std::vector<float> vector;
    float alpha = 0.0f;
    PositionMode positions = PositionMode::all_positions;
};

// Overwrites the post-block residual at `layer` with recorded values
// (row-major, rows x d_model). Rows beyond the current sequence are ignored;
// with final_position_only only the last row is written.
struct ResidualPatch {
    int layer = 0;
    const std::vector<float>* values = nullptr;
    int rows = 0;
    PositionMode positions = PositionMode::all_positions;
};

// Positions are absolute indices; kFinalPosition names the last token.
inline constexpr int kFinalPosition = -1;

struct TapRequest {
    std::vector<int> layers;
    std::vector<int> positions{kFinalPosition};
    bool all_positions = false;

    static TapRequest final_position(std::vector<int> layers) { return {std::move(layers), {kFinalPosition}, false}; }
    static TapRequest every_position(std::vector<int> layers) { return {std::move(layers), {}, true}; }
};

struct ActivationRecord {
    // (layer, absolute position) -> post-block residual vector.
    std::map<std::pair<int, int>, std::vector<float>> taps;
    std::vector<float> final_logits;
    int n_tokens = 0;

    const std::vector<float>& tap(int layer, int position = kFinalPosition) const;
    bool operator==(const ActivationRecord&) const = default;
};

struct ForwardHooks {
    const InterventionPlan* plan = nullptr;
    const ResidualPatch* patch = nullptr;
    // Copies the full residual (all positions, after plan and patch) at
    // capture_layer into *capture.
    int capture_layer = -1;
    std::vector<float>* capture = nullptr;
};

struct GreedyTrace {
    std::vector<int> tokens;        // generated ids (specials excluded)
    std::string text;               // decoded continuation
    std::vector<std::vector<float>> step_logits;   // final logits per decode step
    // Residual at `capture_layer`, all positions, per decode step (row-major).
    std::vector<std::vector<float>> captures;
};

struct GreedyOptions {
    const InterventionPlan* plan = nullptr;
    int capture_layer = -1;
    // Step-aligned patch source: replay[s] overwrites `replay_layer` on decode
    // step s. Steps past replay.size() run unpatched.
    const std::vector<std::vector<float>>* replay = nullptr;
    int replay_layer = -1;
    PositionMode replay_positions = PositionMode::all_positions;
    bool keep_step_logits = false;
};

// Immutable decoder-only transformer. Safe to share across threads; every
// forward pass owns its scratch.
class Model {
public:
    // Reads an "XFVC" checkpoint. The tokenizer comes from `tokenizer_path`,
    // else "tokenizer.json" beside the checkpoint, else the plain byte-level
    // table when the vocabulary has room for it.
    static Model load(const std::filesystem::path& checkpoint,
                      const std::optional<std::filesystem::path>& tokenizer_path = std::nullopt);
    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    static Model from_tensors(const ArchDescriptor& arch, std::vector<Tensor> tensors,
                              std::optional<BpeTokenizer> tokenizer);

    const ArchDescriptor& arch() const { return arch_; }
    bool has_tokenizer() const { return tokenizer_.has_value(); }
    const BpeTokenizer& tokenizer() const;

    std::vector<int> encode(std::string_view text) const { return tokenizer().encode(text); }
    std::string decode(std::span<const int> ids) const { return tokenizer().decode(ids); }

    ActivationRecord forward_with_taps(std::span<const int> tokens, const TapRequest& taps,
                                       const InterventionPlan* plan = nullptr) const;
    ActivationRecord forward_with_taps(std::span<const int> tokens, const TapRequest& taps,
                                       const ForwardHooks& hooks) const;

    // Continuation only; stops early on a special token.
    std::string generate_greedy(std::string_view prompt, int max_new_tokens,
                                const InterventionPlan* plan = nullptr) const;
    GreedyTrace generate_traced(std::span<const int> prompt, int max_new_tokens, const GreedyOptions& options) const;

    // The model's own head, usable on any residual vector.
    std::vector<float> final_norm(std::span<const float> h) const;
    std::vector<float> unembed(std::span<const float> normed) const;
    std::vector<float> lens_logits(std::span<const float> h) const { return unembed(final_norm(h)); }

    std::span<const float> token_embedding(int id) const;
    const Tensor& tensor(std::string_view name) const;

private:
    Model() = default;

    struct Layer {
        const float *attn_norm_w = nullptr, *attn_norm_b = nullptr;
        const float *wq = nullptr, *bq = nullptr, *wk = nullptr, *bk = nullptr, *wv = nullptr, *bv = nullptr;
        const float *wo = nullptr, *bo = nullptr;
        const float *mlp_norm_w = nullptr, *mlp_norm_b = nullptr;
        const float *w_gate = nullptr, *w_up = nullptr, *b_up = nullptr, *w_down = nullptr, *b_down = nullptr;
    };

    void bind();
    void norm_rows(const float* x, int rows, const float* w, const float* b, float* out) const;
    void attention(std::vector<float>& x, int T, const Layer& L) const;
    void mlp(std::vector<float>& x, int T, const Layer& L) const;

    ArchDescriptor arch_;
    std::vector<Tensor> tensors_;
    std::optional<BpeTokenizer> tokenizer_;
    std::vector<Layer> layers_;
    const float* tok_emb_ = nullptr;
    const float* pos_emb_ = nullptr;
    const float* final_norm_w_ = nullptr;
    const float* final_norm_b_ = nullptr;
    const float* unembed_w_ = nullptr;
    const float* unembed_b_ = nullptr;
};

void write_checkpoint(const std::filesystem::path& path, const ArchDescriptor& arch, const std::vector<Tensor>& tensors);
ArchDescriptor read_checkpoint_arch(const std::filesystem::path& path);

}  // namespace fvlab
