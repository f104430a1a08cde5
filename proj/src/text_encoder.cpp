#include "crossgen/text_encoder.hpp"

#include <cmath>

namespace crossgen {

using nn::Graph;
using nn::Value;

TextEncoder::TextEncoder(const TextEncoderConfig& cfg, uint64_t seed) : cfg_(cfg) {
    require(cfg.vocab_size >= 2, "text encoder: vocabulary missing");
    Rng rng(derive_seed(seed, "text_encoder"));
    const int E = cfg.embed_dim;
    token_emb_ = &params_.add("tok_emb", Tensor::randn({cfg.vocab_size, E}, rng, 0.05));
    pos_emb_ = &params_.add("pos_emb", Tensor::randn({cfg.max_len, E}, rng, 0.05));
    for (int b = 0; b < cfg.blocks; ++b) {
        std::string p = "block" + std::to_string(b);
        Block blk;
        blk.ln1 = nn::LayerNorm::create(params_, p + ".ln1", E);
        blk.wq = nn::Linear::create(params_, p + ".wq", E, E, rng);
        blk.wk = nn::Linear::create(params_, p + ".wk", E, E, rng);
        blk.wv = nn::Linear::create(params_, p + ".wv", E, E, rng);
        blk.wo = nn::Linear::create(params_, p + ".wo", E, E, rng, /*zero_init=*/true);
        blk.ln2 = nn::LayerNorm::create(params_, p + ".ln2", E);
        blk.mlp1 = nn::Linear::create(params_, p + ".mlp1", E, 2 * E, rng);
        blk.mlp2 = nn::Linear::create(params_, p + ".mlp2", 2 * E, E, rng, /*zero_init=*/true);
        blocks_.push_back(blk);
    }
    final_ln_ = nn::LayerNorm::create(params_, "final_ln", E);
}

Value TextEncoder::embed(Graph& g, const std::vector<int>& token_ids) const {
    require(int(token_ids.size()) == cfg_.max_len, "text encoder: token length mismatch");
    auto h = g.add(g.embedding(g.param(*token_emb_), token_ids), g.param(*pos_emb_));
    const double scale = 1.0 / std::sqrt(double(cfg_.embed_dim));
    for (const auto& blk : blocks_) {
        auto x = blk.ln1(g, h);
        auto q = blk.wq(g, x);
        auto k = blk.wk(g, x);
        auto v = blk.wv(g, x);
        auto attn = g.softmax_rows(g.scale(g.matmul_nt(q, k), scale));
        h = g.add(h, blk.wo(g, g.matmul(attn, v)));
        auto y = blk.ln2(g, h);
        h = g.add(h, blk.mlp2(g, g.silu(blk.mlp1(g, y))));
    }
    return final_ln_(g, h);
}

ConditioningMatrix TextEncoder::embed_tokens(const std::vector<int>& token_ids,
                                             bool is_null) const {
    Graph g(false);
    auto v = embed(g, token_ids);
    ConditioningMatrix out;
    out.matrix = v.tensor().clone();
    out.is_null = is_null;
    return out;
}

}  // namespace crossgen
