#include "fvlab/model/arch.hpp"

#include "fvlab/common/error.hpp"

namespace fvlab {

std::string to_string(NormKind k) { return k == NormKind::layernorm ? "layernorm" : "rmsnorm"; }
std::string to_string(PosKind k) { return k == PosKind::learned ? "learned" : "rotary"; }
std::string to_string(MlpKind k) { return k == MlpKind::gelu_mlp ? "gelu_mlp" : "swiglu"; }

void ArchDescriptor::validate() const {
    require(n_layers >= 1, ErrorKind::integrity, "n_layers must be >= 1");
    require(d_model >= 1 && n_heads >= 1, ErrorKind::integrity, "d_model and n_heads must be positive");
    require(d_model % n_heads == 0, ErrorKind::integrity, "d_model must be divisible by n_heads");
    require(vocab_size >= 2, ErrorKind::integrity, "vocab_size must be >= 2");
    require(max_context >= 1, ErrorKind::integrity, "max_context must be positive");
    require(n_kv_heads >= 0 && n_heads % kv_heads() == 0, ErrorKind::integrity,
            "n_heads must be a multiple of n_kv_heads");
    require(d_ff >= 0, ErrorKind::integrity, "d_ff must be non-negative");
    require(norm_eps > 0.0f, ErrorKind::integrity, "norm_eps must be positive");
    if (pos_kind == PosKind::rotary)
        require(head_dim() % 2 == 0, ErrorKind::integrity, "rotary embeddings need an even head_dim");
    const bool gpt2 = norm_kind == NormKind::layernorm && pos_kind == PosKind::learned && mlp_kind == MlpKind::gelu_mlp;
    const bool llama = norm_kind == NormKind::rmsnorm && pos_kind == PosKind::rotary && mlp_kind == MlpKind::swiglu;
    if (!gpt2 && !llama)
        fail(ErrorKind::capability, "unsupported architecture combination {" + to_string(norm_kind) + ", " +
                                        to_string(pos_kind) + ", " + to_string(mlp_kind) + "}");
}

std::int64_t TensorSpec::numel() const {
    std::int64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

std::vector<TensorSpec> expected_tensors(const ArchDescriptor& a) {
    const std::int64_t d = a.d_model, kv = a.kv_dim(), ff = a.ff_dim(), V = a.vocab_size;
    const bool ln = a.norm_kind == NormKind::layernorm;
    const bool biased = a.gpt2_style();
    std::vector<TensorSpec> out;
    out.push_back({"token_embedding", {V, d}});
    if (a.pos_kind == PosKind::learned) out.push_back({"position_embedding", {a.max_context, d}});
    for (int l = 0; l < a.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        out.push_back({p + "attn_norm.weight", {d}});
        if (ln) out.push_back({p + "attn_norm.bias", {d}});
        for (const char* proj : {"q", "k", "v"}) {
            const std::int64_t width = proj[0] == 'q' ? d : kv;
            out.push_back({p + "attn." + proj + ".weight", {d, width}});
            if (biased) out.push_back({p + "attn." + proj + ".bias", {width}});
        }
        out.push_back({p + "attn.o.weight", {d, d}});
        if (biased) out.push_back({p + "attn.o.bias", {d}});
        out.push_back({p + "mlp_norm.weight", {d}});
        if (ln) out.push_back({p + "mlp_norm.bias", {d}});
        if (a.mlp_kind == MlpKind::swiglu) {
            out.push_back({p + "mlp.gate.weight", {d, ff}});
            out.push_back({p + "mlp.up.weight", {d, ff}});
            out.push_back({p + "mlp.down.weight", {ff, d}});
        } else {
            out.push_back({p + "mlp.up.weight", {d, ff}});
            out.push_back({p + "mlp.up.bias", {ff}});
            out.push_back({p + "mlp.down.weight", {ff, d}});
            out.push_back({p + "mlp.down.bias", {d}});
        }
    }
    out.push_back({"final_norm.weight", {d}});
    if (ln) out.push_back({"final_norm.bias", {d}});
    out.push_back({"unembed.weight", {d, V}});
    out.push_back({"unembed.bias", {V}});
    return out;
}

nlohmann::json arch_to_json(const ArchDescriptor& a) {
    return {
        {"n_layers", a.n_layers},
        {"d_model", a.d_model},
        {"n_heads", a.n_heads},
        {"n_kv_heads", a.kv_heads()},
        {"vocab_size", a.vocab_size},
        {"max_context", a.max_context},
        {"d_ff", a.ff_dim()},
        {"norm_kind", to_string(a.norm_kind)},
        {"pos_kind", to_string(a.pos_kind)},
        {"mlp_kind", to_string(a.mlp_kind)},
        {"norm_eps", a.norm_eps},
        {"rope_theta", a.rope_theta},
    };
}

namespace {

int positive_int(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || !j[key].is_number_integer())
        fail(ErrorKind::format, std::string("manifest field missing or not an integer: ") + key);
    return j[key].get<int>();
}

}  // namespace

ArchDescriptor arch_from_json(const nlohmann::json& j) {
    if (!j.is_object()) fail(ErrorKind::format, "manifest is not a JSON object");
    ArchDescriptor a;
    a.n_layers = positive_int(j, "n_layers");
    a.d_model = positive_int(j, "d_model");
    a.n_heads = positive_int(j, "n_heads");
    a.vocab_size = positive_int(j, "vocab_size");
    a.max_context = positive_int(j, "max_context");
    a.n_kv_heads = j.value("n_kv_heads", 0);
    a.d_ff = j.value("d_ff", 0);
    a.norm_eps = j.value("norm_eps", 1e-5f);
    a.rope_theta = j.value("rope_theta", 10000.0f);

    const auto norm = j.value("norm_kind", std::string{});
    if (norm == "layernorm") a.norm_kind = NormKind::layernorm;
    else if (norm == "rmsnorm") a.norm_kind = NormKind::rmsnorm;
    else fail(ErrorKind::capability, "unsupported norm_kind '" + norm + "'");

    const auto pos = j.value("pos_kind", std::string{});
    if (pos == "learned") a.pos_kind = PosKind::learned;
    else if (pos == "rotary") a.pos_kind = PosKind::rotary;
    else fail(ErrorKind::capability, "unsupported pos_kind '" + pos + "'");

    const auto mlp = j.value("mlp_kind", std::string{});
    if (mlp == "gelu_mlp") a.mlp_kind = MlpKind::gelu_mlp;
    else if (mlp == "swiglu") a.mlp_kind = MlpKind::swiglu;
    else fail(ErrorKind::capability, "unsupported mlp_kind '" + mlp + "'");
    return a;
}

}  // namespace fvlab
