#pragma once

#include "crossgen/nn.hpp"
#include "crossgen/prompts.hpp"

namespace crossgen {

// Conditioning matrix C_T: one row per token plus a flag for the stored
// unconditional (null-prompt) embedding.
struct ConditioningMatrix {
    Tensor matrix;  // [L, E]
    bool is_null = false;
};

struct TextEncoderConfig {
    int vocab_size = 0;
    int max_len = 32;
    int embed_dim = 48;
    int blocks = 2;
};

// Small self-attention stack over learned token+position embeddings. Trained
// jointly with the denoiser; pluggable behind embed(): any string->matrix
// encoder can stand in.
class TextEncoder {
public:
    TextEncoder(const TextEncoderConfig& cfg, uint64_t seed);

    nn::Value embed(nn::Graph& g, const std::vector<int>& token_ids) const;

    // Inference helper returning a plain tensor.
    ConditioningMatrix embed_tokens(const std::vector<int>& token_ids, bool is_null) const;

    nn::ParamStore& params() { return params_; }
    const TextEncoderConfig& config() const { return cfg_; }

private:
    struct Block {
        nn::LayerNorm ln1, ln2;
        nn::Linear wq, wk, wv, wo;
        nn::Linear mlp1, mlp2;
    };

    TextEncoderConfig cfg_;
    nn::ParamStore params_;
    nn::Param* token_emb_ = nullptr;
    nn::Param* pos_emb_ = nullptr;
    std::vector<Block> blocks_;
    nn::LayerNorm final_ln_;
};

}  // namespace crossgen
