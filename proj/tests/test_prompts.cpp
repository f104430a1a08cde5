#include <doctest.h>

#include <filesystem>
#include <set>

#include "crossgen/phantom.hpp"
#include "crossgen/prompts.hpp"
#include "crossgen/text_encoder.hpp"

using namespace crossgen;

namespace {

// Every renderable prompt in the default phantom vocabulary.
std::vector<PromptSpec> phantom_spec_space() {
    std::vector<std::string> modalities = {"P1", "P2"};
    std::vector<std::string> attrs = {
        map_modality_attributes(default_modality_p1()),
        map_modality_attributes(default_modality_p2()),
    };
    std::vector<PromptSpec> specs;
    for (size_t m = 0; m < modalities.size(); ++m)
        for (const auto& region : region_names())
            for (int organs = 1; organs <= 3; ++organs) {
                PromptSpec s;
                s.modality = modalities[m];
                s.attributes = attrs[m];
                s.region = region;
                for (int k = 0; k < organs; ++k) s.organs.push_back(organ_names()[size_t(k)]);
                specs.push_back(s);
            }
    return specs;
}

Vocabulary phantom_vocab() {
    std::vector<std::string> prompts;
    for (const auto& s : phantom_spec_space()) prompts.push_back(render_prompt(s));
    return Vocabulary::build(prompts, 32);
}

}  // namespace

TEST_CASE("render_prompt matches the four-field template") {
    PromptSpec s;
    s.modality = "T1";
    s.attributes =
        "fat high signal, muscle intermediate signal, water low signal, fat bright, water dark";
    s.region = "upper abdomen";
    s.organs = {"liver", "spleen", "kidney"};
    CHECK(render_prompt(s) ==
          "T1 MRI; fat high signal, muscle intermediate signal, water low signal, fat bright, "
          "water dark; upper abdomen; liver, spleen, and kidney");

    s.organs = {"liver"};
    CHECK(render_prompt(s) ==
          "T1 MRI; fat high signal, muscle intermediate signal, water low signal, fat bright, "
          "water dark; upper abdomen; liver");

    s.organs = {"liver", "spleen"};
    auto two = render_prompt(s);
    CHECK(two.substr(two.size() - 16) == "liver and spleen");
}

TEST_CASE("rendering is injective over the phantom spec space") {
    std::set<std::string> seen;
    auto specs = phantom_spec_space();
    for (const auto& s : specs) seen.insert(render_prompt(s));
    CHECK(seen.size() == specs.size());
}

TEST_CASE("tokenizer round trip and closed world") {
    Vocabulary vocab = phantom_vocab();

    // empty string: null id then padding
    auto null_ids = vocab.tokenize("");
    CHECK(null_ids[0] == kNullPromptToken);
    for (size_t i = 1; i < null_ids.size(); ++i) CHECK(null_ids[i] == kPadToken);

    // round trip recovers the prompt exactly (whitespace-normalized template)
    for (const auto& s : phantom_spec_space()) {
        std::string p = render_prompt(s);
        CHECK(vocab.detokenize(vocab.tokenize(p)) == p);
    }

    // distinct prompts tokenize distinctly
    std::set<std::vector<int>> seen;
    auto specs = phantom_spec_space();
    for (const auto& s : specs) seen.insert(vocab.tokenize(render_prompt(s)));
    CHECK(seen.size() == specs.size());

    CHECK_THROWS_AS(vocab.tokenize("unknown-word MRI"), std::invalid_argument);
}

TEST_CASE("vocabulary save/load round trip") {
    Vocabulary vocab = phantom_vocab();
    auto dir = std::filesystem::temp_directory_path() / "crossgen_vocab";
    std::filesystem::create_directories(dir);
    vocab.save((dir / "vocab.json").string());
    Vocabulary loaded = Vocabulary::load((dir / "vocab.json").string());
    CHECK(loaded.size() == vocab.size());
    auto p = render_prompt(phantom_spec_space()[3]);
    CHECK(loaded.tokenize(p) == vocab.tokenize(p));
    std::filesystem::remove_all(dir);
}

TEST_CASE("drop_prompt probability behavior") {
    PromptSpec s = phantom_spec_space()[0];
    Rng rng(5);
    for (int i = 0; i < 10000; ++i) CHECK(drop_prompt(s, 0.0, rng).has_value());
    for (int i = 0; i < 100; ++i) CHECK_FALSE(drop_prompt(s, 1.0, rng).has_value());

    Rng mc(17);
    int dropped = 0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i)
        if (!drop_prompt(s, 0.1, mc)) ++dropped;
    double freq = double(dropped) / draws;
    CHECK(freq >= 0.08);
    CHECK(freq <= 0.12);
}

TEST_CASE("text encoder shape, determinism, and null embedding") {
    Vocabulary vocab = phantom_vocab();
    TextEncoderConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.max_len = vocab.max_len();
    cfg.embed_dim = 24;
    cfg.blocks = 2;
    TextEncoder enc(cfg, 7);

    auto ids = vocab.tokenize(render_prompt(phantom_spec_space()[0]));
    ConditioningMatrix c1 = enc.embed_tokens(ids, false);
    CHECK(c1.matrix.shape() == std::vector<int>{cfg.max_len, cfg.embed_dim});
    ConditioningMatrix c2 = enc.embed_tokens(ids, false);
    CHECK(max_abs_diff(c1.matrix, c2.matrix) == 0.0);

    // the unconditional embedding depends only on the null token sequence
    ConditioningMatrix u1 = enc.embed_tokens(vocab.null_tokens(), true);
    ConditioningMatrix u2 = enc.embed_tokens(vocab.tokenize(""), true);
    CHECK(u1.is_null);
    CHECK(max_abs_diff(u1.matrix, u2.matrix) == 0.0);
    CHECK(max_abs_diff(u1.matrix, c1.matrix) > 0.0);
}
