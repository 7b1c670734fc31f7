#include "fvlab/model/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "fvlab/common/error.hpp"

namespace fvlab {

namespace {

// y[r] = x[r] W (+ b); W is (in x out) row-major. The k-outer loop keeps the
// accumulation order fixed, so results are reproducible bit for bit.
void matmul(const float* x, int rows, int in, const float* W, int out, const float* bias, float* y) {
    for (int r = 0; r < rows; ++r) {
        float* yr = y + static_cast<std::size_t>(r) * out;
        if (bias)
            std::copy(bias, bias + out, yr);
        else
            std::fill(yr, yr + out, 0.0f);
        const float* xr = x + static_cast<std::size_t>(r) * in;
        for (int k = 0; k < in; ++k) {
            const float xk = xr[k];
            const float* wk = W + static_cast<std::size_t>(k) * out;
            for (int j = 0; j < out; ++j) yr[j] += xk * wk[j];
        }
    }
}

inline float gelu_tanh(float x) {
    constexpr float kSqrt2OverPi = 0.7978845608028654f;
    return 0.5f * x * (1.0f + std::tanh(kSqrt2OverPi * (x + 0.044715f * x * x * x)));
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

void apply_rope(float* v, int n_heads, int head_dim, int position, float theta) {
    const int half = head_dim / 2;
    for (int i = 0; i < half; ++i) {
        const double inv_freq = std::pow(static_cast<double>(theta), -2.0 * i / head_dim);
        const double angle = position * inv_freq;
        const auto c = static_cast<float>(std::cos(angle));
        const auto s = static_cast<float>(std::sin(angle));
        for (int h = 0; h < n_heads; ++h) {
            float* x = v + static_cast<std::size_t>(h) * head_dim;
            const float x1 = x[i], x2 = x[i + half];
            x[i] = x1 * c - x2 * s;
            x[i + half] = x2 * c + x1 * s;
        }
    }
}

int argmax_lowest(const std::vector<float>& v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i)
        if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
    return best;
}

}  // namespace

const std::vector<float>& ActivationRecord::tap(int layer, int position) const {
    const int pos = position == kFinalPosition ? n_tokens - 1 : position;
    auto it = taps.find({layer, pos});
    if (it == taps.end())
        fail(ErrorKind::range, "no tap recorded at layer " + std::to_string(layer) + ", position " + std::to_string(pos));
    return it->second;
}

Model Model::load(const std::filesystem::path& checkpoint, const std::optional<std::filesystem::path>& tokenizer_path) {
    Container c = read_container(checkpoint, kCheckpointMagic);
    const ArchDescriptor arch = arch_from_json(c.manifest);

    std::optional<BpeTokenizer> tok;
    if (tokenizer_path) {
        tok = BpeTokenizer::load(*tokenizer_path);
    } else if (auto sibling = checkpoint.parent_path() / "tokenizer.json"; std::filesystem::exists(sibling)) {
        tok = BpeTokenizer::load(sibling);
    } else if (arch.vocab_size >= 256) {
        tok = BpeTokenizer::byte_level();
    }
    return from_tensors(arch, std::move(c.tensors), std::move(tok));
}

Model Model::from_tensors(const ArchDescriptor& arch, std::vector<Tensor> tensors, std::optional<BpeTokenizer> tokenizer) {
    arch.validate();
    const auto expected = expected_tensors(arch);
    std::set<std::string> wanted;
    for (const auto& spec : expected) wanted.insert(spec.name);
    for (const auto& t : tensors)
        if (!wanted.count(t.name)) fail(ErrorKind::integrity, "unexpected tensor '" + t.name + "'");

    Model m;
    m.arch_ = arch;
    for (const auto& spec : expected) {
        auto it = std::find_if(tensors.begin(), tensors.end(), [&](const Tensor& t) { return t.name == spec.name; });
        if (it == tensors.end()) fail(ErrorKind::integrity, "missing tensor '" + spec.name + "'");
        if (it->dims != spec.dims) fail(ErrorKind::integrity, "shape mismatch for '" + spec.name + "'");
        if (static_cast<std::int64_t>(it->data.size()) != spec.numel())
            fail(ErrorKind::integrity, "payload size mismatch for '" + spec.name + "'");
        m.tensors_.push_back(std::move(*it));
    }
    if (tokenizer && tokenizer->size() > arch.vocab_size)
        fail(ErrorKind::integrity, "tokenizer has more tokens than the unembedding");
    m.tokenizer_ = std::move(tokenizer);
    m.bind();
    return m;
}

void Model::bind() {
    auto ptr = [&](const std::string& name) { return tensor(name).data.data(); };
    auto opt = [&](const std::string& name) -> const float* {
        for (const auto& t : tensors_)
            if (t.name == name) return t.data.data();
        return nullptr;
    };
    tok_emb_ = ptr("token_embedding");
    pos_emb_ = opt("position_embedding");
    layers_.assign(static_cast<std::size_t>(arch_.n_layers), {});
    for (int l = 0; l < arch_.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        Layer& L = layers_[static_cast<std::size_t>(l)];
        L.attn_norm_w = ptr(p + "attn_norm.weight");
        L.attn_norm_b = opt(p + "attn_norm.bias");
        L.wq = ptr(p + "attn.q.weight");
        L.bq = opt(p + "attn.q.bias");
        L.wk = ptr(p + "attn.k.weight");
        L.bk = opt(p + "attn.k.bias");
        L.wv = ptr(p + "attn.v.weight");
        L.bv = opt(p + "attn.v.bias");
        L.wo = ptr(p + "attn.o.weight");
        L.bo = opt(p + "attn.o.bias");
        L.mlp_norm_w = ptr(p + "mlp_norm.weight");
        L.mlp_norm_b = opt(p + "mlp_norm.bias");
        L.w_gate = opt(p + "mlp.gate.weight");
        L.w_up = ptr(p + "mlp.up.weight");
        L.b_up = opt(p + "mlp.up.bias");
        L.w_down = ptr(p + "mlp.down.weight");
        L.b_down = opt(p + "mlp.down.bias");
    }
    final_norm_w_ = ptr("final_norm.weight");
    final_norm_b_ = opt("final_norm.bias");
    unembed_w_ = ptr("unembed.weight");
    unembed_b_ = ptr("unembed.bias");
}

const BpeTokenizer& Model::tokenizer() const {
    if (!tokenizer_) fail(ErrorKind::capability, "model was loaded without a tokenizer");
    return *tokenizer_;
}

const Tensor& Model::tensor(std::string_view name) const {
    for (const auto& t : tensors_)
        if (t.name == name) return t;
    fail(ErrorKind::integrity, "missing tensor '" + std::string(name) + "'");
}

std::span<const float> Model::token_embedding(int id) const {
    if (id < 0 || id >= arch_.vocab_size) fail(ErrorKind::range, "token id out of range");
    return {tok_emb_ + static_cast<std::size_t>(id) * arch_.d_model, static_cast<std::size_t>(arch_.d_model)};
}

void Model::norm_rows(const float* x, int rows, const float* w, const float* b, float* out) const {
    const int d = arch_.d_model;
    for (int r = 0; r < rows; ++r) {
        const float* xr = x + static_cast<std::size_t>(r) * d;
        float* yr = out + static_cast<std::size_t>(r) * d;
        if (arch_.norm_kind == NormKind::layernorm) {
            double mean = 0.0;
            for (int i = 0; i < d; ++i) mean += xr[i];
            mean /= d;
            double var = 0.0;
            for (int i = 0; i < d; ++i) {
                const double diff = xr[i] - mean;
                var += diff * diff;
            }
            var /= d;
            const auto inv = static_cast<float>(1.0 / std::sqrt(var + arch_.norm_eps));
            const auto m = static_cast<float>(mean);
            for (int i = 0; i < d; ++i) yr[i] = (xr[i] - m) * inv * w[i] + (b ? b[i] : 0.0f);
        } else {
            double ss = 0.0;
            for (int i = 0; i < d; ++i) ss += static_cast<double>(xr[i]) * xr[i];
            const auto inv = static_cast<float>(1.0 / std::sqrt(ss / d + arch_.norm_eps));
            for (int i = 0; i < d; ++i) yr[i] = xr[i] * inv * w[i];
        }
    }
}

void Model::attention(std::vector<float>& x, int T, const Layer& L) const {
    const int d = arch_.d_model, hd = arch_.head_dim(), H = arch_.n_heads, KVH = arch_.kv_heads();
    const int kvd = arch_.kv_dim();
    const int group = H / KVH;
    std::vector<float> a(static_cast<std::size_t>(T) * d);
    norm_rows(x.data(), T, L.attn_norm_w, L.attn_norm_b, a.data());

    std::vector<float> q(static_cast<std::size_t>(T) * d), k(static_cast<std::size_t>(T) * kvd),
        v(static_cast<std::size_t>(T) * kvd);
    matmul(a.data(), T, d, L.wq, d, L.bq, q.data());
    matmul(a.data(), T, d, L.wk, kvd, L.bk, k.data());
    matmul(a.data(), T, d, L.wv, kvd, L.bv, v.data());
    if (arch_.pos_kind == PosKind::rotary) {
        for (int t = 0; t < T; ++t) {
            apply_rope(q.data() + static_cast<std::size_t>(t) * d, H, hd, t, arch_.rope_theta);
            apply_rope(k.data() + static_cast<std::size_t>(t) * kvd, KVH, hd, t, arch_.rope_theta);
        }
    }

    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    std::vector<float> ctx(static_cast<std::size_t>(T) * d, 0.0f);
    std::vector<float> scores(static_cast<std::size_t>(T));
    for (int h = 0; h < H; ++h) {
        const int kvh = h / group;
        for (int i = 0; i < T; ++i) {
            const float* qi = q.data() + static_cast<std::size_t>(i) * d + static_cast<std::size_t>(h) * hd;
            float mx = -INFINITY;
            for (int j = 0; j <= i; ++j) {
                const float* kj = k.data() + static_cast<std::size_t>(j) * kvd + static_cast<std::size_t>(kvh) * hd;
                float s = 0.0f;
                for (int e = 0; e < hd; ++e) s += qi[e] * kj[e];
                s *= scale;
                scores[static_cast<std::size_t>(j)] = s;
                mx = std::max(mx, s);
            }
            float denom = 0.0f;
            for (int j = 0; j <= i; ++j) {
                const float e = std::exp(scores[static_cast<std::size_t>(j)] - mx);
                scores[static_cast<std::size_t>(j)] = e;
                denom += e;
            }
            float* ci = ctx.data() + static_cast<std::size_t>(i) * d + static_cast<std::size_t>(h) * hd;
            for (int j = 0; j <= i; ++j) {
                const float p = scores[static_cast<std::size_t>(j)] / denom;
                const float* vj = v.data() + static_cast<std::size_t>(j) * kvd + static_cast<std::size_t>(kvh) * hd;
                for (int e = 0; e < hd; ++e) ci[e] += p * vj[e];
            }
        }
    }
    std::vector<float> o(static_cast<std::size_t>(T) * d);
    matmul(ctx.data(), T, d, L.wo, d, L.bo, o.data());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += o[i];
}

void Model::mlp(std::vector<float>& x, int T, const Layer& L) const {
    const int d = arch_.d_model, ff = arch_.ff_dim();
    std::vector<float> a(static_cast<std::size_t>(T) * d);
    norm_rows(x.data(), T, L.mlp_norm_w, L.mlp_norm_b, a.data());
    std::vector<float> up(static_cast<std::size_t>(T) * ff);
    matmul(a.data(), T, d, L.w_up, ff, L.b_up, up.data());
    if (arch_.mlp_kind == MlpKind::swiglu) {
        std::vector<float> gate(static_cast<std::size_t>(T) * ff);
        matmul(a.data(), T, d, L.w_gate, ff, nullptr, gate.data());
        for (std::size_t i = 0; i < up.size(); ++i) up[i] *= silu(gate[i]);
    } else {
        for (auto& u : up) u = gelu_tanh(u);
    }
    std::vector<float> down(static_cast<std::size_t>(T) * d);
    matmul(up.data(), T, ff, L.w_down, d, L.b_down, down.data());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += down[i];
}

std::vector<float> Model::final_norm(std::span<const float> h) const {
    if (static_cast<int>(h.size()) != arch_.d_model) fail(ErrorKind::parameter, "vector length must equal d_model");
    std::vector<float> out(h.size());
    norm_rows(h.data(), 1, final_norm_w_, final_norm_b_, out.data());
    return out;
}

std::vector<float> Model::unembed(std::span<const float> normed) const {
    if (static_cast<int>(normed.size()) != arch_.d_model) fail(ErrorKind::parameter, "vector length must equal d_model");
    std::vector<float> logits(static_cast<std::size_t>(arch_.vocab_size));
    matmul(normed.data(), 1, arch_.d_model, unembed_w_, arch_.vocab_size, unembed_b_, logits.data());
    return logits;
}

ActivationRecord Model::forward_with_taps(std::span<const int> tokens, const TapRequest& taps,
                                          const InterventionPlan* plan) const {
    return forward_with_taps(tokens, taps, ForwardHooks{plan, nullptr});
}

ActivationRecord Model::forward_with_taps(std::span<const int> tokens, const TapRequest& taps,
                                          const ForwardHooks& hooks) const {
    const int T = static_cast<int>(tokens.size());
    const int d = arch_.d_model;
    if (T == 0) fail(ErrorKind::length, "empty token sequence");
    if (T > arch_.max_context)
        fail(ErrorKind::length, "sequence of " + std::to_string(T) + " tokens exceeds max_context " +
                                    std::to_string(arch_.max_context));
    for (int l : taps.layers)
        if (l < 0 || l >= arch_.n_layers) fail(ErrorKind::range, "tap layer out of range: " + std::to_string(l));
    std::vector<int> positions;
    if (taps.all_positions) {
        for (int t = 0; t < T; ++t) positions.push_back(t);
    } else {
        for (int p : taps.positions) {
            const int pos = p == kFinalPosition ? T - 1 : p;
            if (pos < 0 || pos >= T) fail(ErrorKind::range, "tap position out of range: " + std::to_string(p));
            positions.push_back(pos);
        }
    }
    const InterventionPlan* plan = hooks.plan;
    if (plan) {
        if (plan->layer < 0 || plan->layer >= arch_.n_layers)
            fail(ErrorKind::range, "intervention layer out of range: " + std::to_string(plan->layer));
        if (static_cast<int>(plan->vector.size()) != d)
            fail(ErrorKind::parameter, "intervention vector length must equal d_model");
    }
    const ResidualPatch* patch = hooks.patch;
    if (patch && (patch->layer < 0 || patch->layer >= arch_.n_layers))
        fail(ErrorKind::range, "patch layer out of range: " + std::to_string(patch->layer));
    if (hooks.capture && (hooks.capture_layer < 0 || hooks.capture_layer >= arch_.n_layers))
        fail(ErrorKind::range, "capture layer out of range");

    std::vector<float> x(static_cast<std::size_t>(T) * d);
    for (int t = 0; t < T; ++t) {
        const int id = tokens[static_cast<std::size_t>(t)];
        if (id < 0 || id >= arch_.vocab_size) fail(ErrorKind::range, "token id out of range: " + std::to_string(id));
        float* xt = x.data() + static_cast<std::size_t>(t) * d;
        const float* e = tok_emb_ + static_cast<std::size_t>(id) * d;
        std::copy(e, e + d, xt);
        if (pos_emb_) {
            const float* pe = pos_emb_ + static_cast<std::size_t>(t) * d;
            for (int i = 0; i < d; ++i) xt[i] += pe[i];
        }
    }

    ActivationRecord rec;
    rec.n_tokens = T;
    for (int l = 0; l < arch_.n_layers; ++l) {
        const Layer& L = layers_[static_cast<std::size_t>(l)];
        attention(x, T, L);
        mlp(x, T, L);

        if (plan && plan->layer == l) {
            const int first = plan->positions == PositionMode::final_position_only ? T - 1 : 0;
            for (int t = first; t < T; ++t) {
                float* xt = x.data() + static_cast<std::size_t>(t) * d;
                for (int i = 0; i < d; ++i) xt[i] += plan->alpha * plan->vector[static_cast<std::size_t>(i)];
            }
        }
        if (patch && patch->layer == l && patch->values) {
            const int rows = std::min(T, patch->rows);
            const int first = patch->positions == PositionMode::final_position_only ? rows - 1 : 0;
            for (int t = std::max(first, 0); t < rows; ++t)
                std::copy_n(patch->values->data() + static_cast<std::size_t>(t) * d, d,
                            x.data() + static_cast<std::size_t>(t) * d);
        }
        if (hooks.capture && hooks.capture_layer == l) *hooks.capture = x;
        if (std::find(taps.layers.begin(), taps.layers.end(), l) != taps.layers.end()) {
            for (int pos : positions) {
                const float* xt = x.data() + static_cast<std::size_t>(pos) * d;
                rec.taps[{l, pos}] = std::vector<float>(xt, xt + d);
            }
        }
    }
    rec.final_logits = lens_logits(std::span<const float>(x.data() + static_cast<std::size_t>(T - 1) * d,
                                                          static_cast<std::size_t>(d)));
    return rec;
}

GreedyTrace Model::generate_traced(std::span<const int> prompt, int max_new_tokens, const GreedyOptions& options) const {
    if (max_new_tokens < 1) fail(ErrorKind::parameter, "max_new_tokens must be >= 1");
    const auto& tok = tokenizer();
    std::vector<int> seq(prompt.begin(), prompt.end());
    GreedyTrace trace;
    for (int step = 0; step < max_new_tokens; ++step) {
        if (static_cast<int>(seq.size()) > arch_.max_context) {
            trace.text = tok.decode(trace.tokens);
            throw TruncationError("context exhausted after " + std::to_string(step) + " generated tokens", trace.text);
        }
        ForwardHooks hooks;
        hooks.plan = options.plan;
        ResidualPatch patch;
        if (options.replay && step < static_cast<int>(options.replay->size())) {
            const auto& values = (*options.replay)[static_cast<std::size_t>(step)];
            patch = {options.replay_layer, &values, static_cast<int>(values.size()) / arch_.d_model,
                     options.replay_positions};
            hooks.patch = &patch;
        }
        std::vector<float> capture;
        if (options.capture_layer >= 0) {
            hooks.capture_layer = options.capture_layer;
            hooks.capture = &capture;
        }
        ActivationRecord rec = forward_with_taps(seq, TapRequest{{}, {}, false}, hooks);
        if (options.capture_layer >= 0) trace.captures.push_back(std::move(capture));
        const int next = argmax_lowest(rec.final_logits);
        if (options.keep_step_logits) trace.step_logits.push_back(std::move(rec.final_logits));
        if (next >= tok.size() || tok.is_special(next)) break;
        trace.tokens.push_back(next);
        seq.push_back(next);
    }
    trace.text = tok.decode(trace.tokens);
    return trace;
}

std::string Model::generate_greedy(std::string_view prompt, int max_new_tokens, const InterventionPlan* plan) const {
    const auto ids = encode(prompt);
    GreedyOptions options;
    options.plan = plan;
    return generate_traced(ids, max_new_tokens, options).text;
}

void write_checkpoint(const std::filesystem::path& path, const ArchDescriptor& arch, const std::vector<Tensor>& tensors) {
    arch.validate();
    std::vector<Tensor> ordered;
    for (const auto& spec : expected_tensors(arch)) {
        auto it = std::find_if(tensors.begin(), tensors.end(), [&](const Tensor& t) { return t.name == spec.name; });
        if (it == tensors.end()) fail(ErrorKind::integrity, "missing tensor '" + spec.name + "'");
        if (it->dims != spec.dims) fail(ErrorKind::integrity, "shape mismatch for '" + spec.name + "'");
        ordered.push_back(*it);
    }
    auto manifest = arch_to_json(arch);
    manifest["schema"] = 1;
    write_container(path, kCheckpointMagic, manifest, ordered);
}

ArchDescriptor read_checkpoint_arch(const std::filesystem::path& path) {
    return arch_from_json(read_container(path, kCheckpointMagic).manifest);
}

}  // namespace fvlab
