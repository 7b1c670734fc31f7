#include "fvlab/fixture/fixture.hpp"

#include <algorithm>
#include <map>

#include <nlohmann/json.hpp>

#include "fvlab/common/error.hpp"
#include "fvlab/common/rng.hpp"
#include "fvlab/common/text.hpp"

namespace fvlab::fixture {

ArchDescriptor tiny_arch(bool llama_style, int vocab_size, int n_layers) {
    ArchDescriptor a;
    a.n_layers = n_layers;
    a.d_model = 32;
    a.n_heads = 4;
    a.n_kv_heads = 4;
    a.vocab_size = vocab_size;
    a.max_context = 1024;
    a.d_ff = 64;
    if (llama_style) {
        a.n_kv_heads = 2;
        a.norm_kind = NormKind::rmsnorm;
        a.pos_kind = PosKind::rotary;
        a.mlp_kind = MlpKind::swiglu;
    }
    return a;
}

std::vector<Tensor> random_weights(const ArchDescriptor& arch, std::uint64_t seed, float scale) {
    Rng rng(seed);
    std::vector<Tensor> out;
    for (const auto& spec : expected_tensors(arch)) {
        Tensor t{spec.name, spec.dims, std::vector<float>(static_cast<std::size_t>(spec.numel()))};
        const bool gain = spec.name.find("norm.weight") != std::string::npos;
        const bool norm_bias = spec.name.find("norm.bias") != std::string::npos;
        for (auto& v : t.data) v = gain ? 1.0f : norm_bias ? 0.0f : static_cast<float>(rng.normal() * scale);
        out.push_back(std::move(t));
    }
    return out;
}

Tensor& find_tensor(std::vector<Tensor>& tensors, const std::string& name) {
    for (auto& t : tensors)
        if (t.name == name) return t;
    fail(ErrorKind::integrity, "fixture has no tensor '" + name + "'");
}

BpeTokenizer train_bpe(const std::vector<std::string>& corpus, int n_merges) {
    std::map<std::string, long> piece_counts;
    for (const auto& line : corpus)
        for (auto piece : pretokenize(line)) ++piece_counts[std::string(piece)];

    std::vector<std::pair<std::vector<std::string>, long>> words;
    for (const auto& [piece, count] : piece_counts) {
        std::vector<std::string> symbols;
        for (char c : piece) symbols.emplace_back(1, c);
        words.emplace_back(std::move(symbols), count);
    }

    std::vector<std::pair<std::string, std::string>> merges;
    for (int m = 0; m < n_merges; ++m) {
        std::map<std::pair<std::string, std::string>, long> pair_counts;
        for (const auto& [symbols, count] : words)
            for (std::size_t i = 0; i + 1 < symbols.size(); ++i) pair_counts[{symbols[i], symbols[i + 1]}] += count;
        const std::pair<std::string, std::string>* best = nullptr;
        long best_count = 1;
        for (const auto& [pair, count] : pair_counts)
            if (count > best_count) {
                best = &pair;
                best_count = count;
            }
        if (!best) break;
        const auto chosen = *best;
        merges.push_back(chosen);
        for (auto& [symbols, count] : words) {
            std::vector<std::string> merged;
            for (std::size_t i = 0; i < symbols.size();) {
                if (i + 1 < symbols.size() && symbols[i] == chosen.first && symbols[i + 1] == chosen.second) {
                    merged.push_back(chosen.first + chosen.second);
                    i += 2;
                } else {
                    merged.push_back(symbols[i++]);
                }
            }
            symbols = std::move(merged);
        }
    }
    return BpeTokenizer::from_merges(merges);
}

std::vector<std::string> battery_corpus(const std::filesystem::path& battery_dir) {
    std::vector<std::string> lines;
    std::vector<std::string> inputs;
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(battery_dir))
        if (entry.path().extension() == ".jsonl") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
        for (const auto& raw : split_lines(read_text_file(file))) {
            const auto j = nlohmann::json::parse(raw);
            if (!j.contains("input")) continue;
            const auto in = j["input"].get<std::string>();
            lines.push_back(in + " " + j["output"].get<std::string>());
            inputs.push_back(in);
        }
    }
    const auto registry_path = battery_dir / "templates.json";
    if (std::filesystem::exists(registry_path)) {
        const auto reg = nlohmann::json::parse(read_text_file(registry_path));
        std::size_t k = 0;
        for (auto it = reg.begin(); it != reg.end(); ++it) {
            if (!it.value().is_array()) continue;
            for (const auto& t : it.value()) {
                std::string p = t.at("pattern").get<std::string>();
                const auto at = p.find("{X}");
                if (at != std::string::npos && !inputs.empty()) p.replace(at, 3, inputs[k++ % inputs.size()]);
                lines.push_back(p);
            }
        }
    }
    return lines;
}

Model make_model(const FixtureOptions& options, const std::vector<std::string>& corpus) {
    BpeTokenizer tok = corpus.empty() ? BpeTokenizer::byte_level() : train_bpe(corpus, options.n_merges);
    const auto arch = tiny_arch(options.llama_style, tok.size(), options.n_layers);
    return Model::from_tensors(arch, random_weights(arch, options.seed, options.scale), std::move(tok));
}

std::filesystem::path write_model(const std::filesystem::path& dir, const FixtureOptions& options,
                                  const std::vector<std::string>& corpus) {
    BpeTokenizer tok = corpus.empty() ? BpeTokenizer::byte_level() : train_bpe(corpus, options.n_merges);
    const auto arch = tiny_arch(options.llama_style, tok.size(), options.n_layers);
    std::filesystem::create_directories(dir);
    const auto path = dir / "model.xfvc";
    write_checkpoint(path, arch, random_weights(arch, options.seed, options.scale));
    write_text_file(dir / "tokenizer.json", tok.to_json().dump(1) + "\n");
    return path;
}

}  // namespace fvlab::fixture
