#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fvlab/model/model.hpp"

namespace fvlab::fixture {

// Small synthetic models for tests and smoke runs.

ArchDescriptor tiny_arch(bool llama_style = false, int vocab_size = 256, int n_layers = 2);

// Gaussian weights with the given std, unit norm gains and zero norm biases.
std::vector<Tensor> random_weights(const ArchDescriptor& arch, std::uint64_t seed, float scale = 0.08f);

Tensor& find_tensor(std::vector<Tensor>& tensors, const std::string& name);

// Classic BPE training over pretokenized pieces: repeatedly merge the most
// frequent adjacent pair (ties go to the lexicographically smallest pair).
BpeTokenizer train_bpe(const std::vector<std::string>& corpus, int n_merges);

// Lines of every dataset and template in a battery directory, as training text.
std::vector<std::string> battery_corpus(const std::filesystem::path& battery_dir);

struct FixtureOptions {
    std::uint64_t seed = 7;
    int n_layers = 2;
    int n_merges = 192;
    bool llama_style = false;
    float scale = 0.08f;
};

Model make_model(const FixtureOptions& options, const std::vector<std::string>& corpus = {});

// Writes model.xfvc and tokenizer.json into `dir`; returns the checkpoint path.
std::filesystem::path write_model(const std::filesystem::path& dir, const FixtureOptions& options,
                                  const std::vector<std::string>& corpus = {});

}  // namespace fvlab::fixture
