#include <iostream>

#include "CLI11.hpp"
#include "fvlab/common/error.hpp"
#include "fvlab/fixture/fixture.hpp"

using namespace fvlab;

int main(int argc, char** argv) {
    CLI::App app{"Write a small synthetic model (model.xfvc + tokenizer.json)"};
    std::string out, battery;
    fixture::FixtureOptions opts;
    app.add_option("--out", out, "Output directory")->required();
    app.add_option("--battery", battery, "Battery directory used to train the tokenizer");
    app.add_option("--seed", opts.seed, "Weight seed");
    app.add_option("--layers", opts.n_layers, "Number of layers");
    app.add_option("--merges", opts.n_merges, "BPE merges");
    app.add_flag("--llama", opts.llama_style, "RMSNorm / rotary / SwiGLU variant");
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }
    try {
        const auto corpus = battery.empty() ? std::vector<std::string>{} : fixture::battery_corpus(battery);
        std::cout << fixture::write_model(out, opts, corpus).string() << "\n";
    } catch (const Error& e) {
        std::cerr << e.what() << "\n";
        return exit_code(e.kind());
    }
    return 0;
}
