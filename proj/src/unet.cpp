#include "crossgen/unet.hpp"

#include <cmath>
#include <set>

namespace crossgen {

using nn::Graph;
using nn::Value;

ResBlock ResBlock::create(nn::ParamStore& ps, const std::string& prefix, int in_ch, int out_ch,
                          int temb_dim, int groups, Rng& rng) {
    ResBlock b;
    b.n1 = nn::GroupNorm::create(ps, prefix + ".n1", in_ch, groups);
    b.c1 = nn::Conv2d::create(ps, prefix + ".c1", in_ch, out_ch, 3, 1, 1, rng);
    b.temb_proj = nn::Linear::create(ps, prefix + ".temb", temb_dim, out_ch, rng);
    b.n2 = nn::GroupNorm::create(ps, prefix + ".n2", out_ch, groups);
    b.c2 = nn::Conv2d::create(ps, prefix + ".c2", out_ch, out_ch, 3, 1, 1, rng, /*zero_init=*/true);
    if (in_ch != out_ch) {
        b.skip = nn::Conv2d::create(ps, prefix + ".skip", in_ch, out_ch, 1, 1, 0, rng);
        b.has_skip = true;
    }
    return b;
}

Value ResBlock::operator()(Graph& g, const Value& x, const Value& temb) const {
    auto h = c1(g, g.silu(n1(g, x)));
    auto tb = temb_proj(g, temb);  // [1, out_ch]
    h = g.add_channel_bias(h, g.reshape(tb, {h.shape()[0]}));
    h = c2(g, g.silu(n2(g, h)));
    auto res = has_skip ? skip(g, x) : x;
    return g.add(res, h);
}

CrossAttnBlock CrossAttnBlock::create(nn::ParamStore& ps, const std::string& prefix, int channels,
                                      int cond_dim, int groups, Rng& rng) {
    CrossAttnBlock b;
    b.norm = nn::GroupNorm::create(ps, prefix + ".norm", channels, groups);
    b.wq = nn::Linear::create(ps, prefix + ".wq", channels, channels, rng);
    b.wk = nn::Linear::create(ps, prefix + ".wk", cond_dim, channels, rng);
    b.wv = nn::Linear::create(ps, prefix + ".wv", cond_dim, channels, rng);
    b.wo = nn::Linear::create(ps, prefix + ".wo", channels, channels, rng, /*zero_init=*/true);
    b.channels = channels;
    return b;
}

Value cross_attention(Graph& g, const Value& queries, const Value& keys, const Value& values) {
    const int e = queries.shape()[1];
    auto scores = g.scale(g.matmul_nt(queries, keys), 1.0 / std::sqrt(double(e)));
    return g.matmul(g.softmax_rows(scores), values);
}

Value CrossAttnBlock::operator()(Graph& g, const Value& x, const Value& cond) const {
    const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    auto tokens = g.transpose2d(g.reshape(norm(g, x), {c, h * w}));  // [hw, c]
    auto q = wq(g, tokens);
    auto k = wk(g, cond);
    auto v = wv(g, cond);
    auto attended = wo(g, cross_attention(g, q, k, v));  // [hw, c]
    auto back = g.reshape(g.transpose2d(attended), {c, h, w});
    return g.add(x, back);
}

UnetModel::UnetModel(const UnetConfig& cfg, uint64_t seed) : cfg_(cfg) {
    Rng rng(derive_seed(seed, "unet_init"));
    const int c0 = width(0), c1 = width(1), c2 = width(2);
    const int gr = cfg.groups, td = cfg.temb_dim, cd = cfg.cond_dim;

    temb_l1_ = nn::Linear::create(params_, "temb.l1", td, td, rng);
    temb_l2_ = nn::Linear::create(params_, "temb.l2", td, td, rng);

    conv_in_ = nn::Conv2d::create(params_, "enc.in", cfg.latent_channels, c0, 3, 1, 1, rng);
    rb_e0_ = ResBlock::create(params_, "enc.rb0", c0, c0, td, gr, rng);
    down0_ = nn::Conv2d::create(params_, "enc.down0", c0, c1, 3, 2, 1, rng);
    rb_e1_ = ResBlock::create(params_, "enc.rb1", c1, c1, td, gr, rng);
    attn_e1_ = CrossAttnBlock::create(params_, "enc.attn1", c1, cd, gr, rng);
    down1_ = nn::Conv2d::create(params_, "enc.down1", c1, c2, 3, 2, 1, rng);
    rb_e2_ = ResBlock::create(params_, "enc.rb2", c2, c2, td, gr, rng);

    rb_m1_ = ResBlock::create(params_, "mid.rb1", c2, c2, td, gr, rng);
    attn_m_ = CrossAttnBlock::create(params_, "mid.attn", c2, cd, gr, rng);
    rb_m2_ = ResBlock::create(params_, "mid.rb2", c2, c2, td, gr, rng);

    up1_ = nn::Conv2d::create(params_, "dec.up1", c2, c1, 3, 1, 1, rng);
    rb_d1_ = ResBlock::create(params_, "dec.rb1", 2 * c1, c1, td, gr, rng);
    attn_d1_ = CrossAttnBlock::create(params_, "dec.attn1", c1, cd, gr, rng);
    up0_ = nn::Conv2d::create(params_, "dec.up0", c1, c0, 3, 1, 1, rng);
    rb_d0_ = ResBlock::create(params_, "dec.rb0", 2 * c0, c0, td, gr, rng);
    out_norm_ = nn::GroupNorm::create(params_, "dec.out_norm", c0, gr);
    conv_out_ = nn::Conv2d::create(params_, "dec.out", c0, cfg.latent_channels, 3, 1, 1, rng,
                                   /*zero_init=*/true);
}

Value UnetModel::time_embedding(Graph& g, int t) const {
    Tensor feats = nn::timestep_features(t, cfg_.temb_dim).reshaped({1, cfg_.temb_dim});
    auto h = temb_l1_(g, g.leaf(feats));
    return temb_l2_(g, g.silu(h));
}

std::vector<Value> UnetModel::encode_features(Graph& g, const Value& h0, int t,
                                              const Value& cond) const {
    auto temb = time_embedding(g, t);
    std::vector<Value> feats;
    auto h = rb_e0_(g, h0, temb);
    feats.push_back(h);  // c0 @ 8x8
    h = down0_(g, h);
    h = attn_e1_(g, rb_e1_(g, h, temb), cond);
    feats.push_back(h);  // c1 @ 4x4
    h = down1_(g, h);
    h = rb_e2_(g, h, temb);
    feats.push_back(h);  // c2 @ 2x2
    return feats;
}

Value UnetModel::forward(Graph& g, const Value& z_t, int t, const Value& cond,
                         const std::vector<Value>* residuals) const {
    require(z_t.shape() ==
                std::vector<int>{cfg_.latent_channels, cfg_.latent_hw, cfg_.latent_hw},
            "unet: latent shape mismatch, got " + shape_str(z_t.shape()));
    require(t >= 1, "unet: t must be >= 1");
    require(cond.shape().size() == 2 && cond.shape()[1] == cfg_.cond_dim,
            "unet: conditioning width mismatch");
    require(!residuals || residuals->size() == 3, "unet: expected 3 injection residuals");

    auto temb = time_embedding(g, t);
    auto skips = encode_features(g, conv_in_(g, z_t), t, cond);

    auto h = rb_m2_(g, attn_m_(g, rb_m1_(g, skips[2], temb), cond), temb);
    if (residuals) h = g.add(h, (*residuals)[2]);

    h = up1_(g, g.upsample_nearest2(h));
    h = attn_d1_(g, rb_d1_(g, g.concat_ch(h, skips[1]), temb), cond);
    if (residuals) h = g.add(h, (*residuals)[1]);

    h = up0_(g, g.upsample_nearest2(h));
    h = rb_d0_(g, g.concat_ch(h, skips[0]), temb);
    if (residuals) h = g.add(h, (*residuals)[0]);

    return conv_out_(g, g.silu(out_norm_(g, h)));
}

Tensor UnetModel::denoise(const Tensor& z_t, int t, const ConditioningMatrix& cond) const {
    Graph g(false);
    return forward(g, g.leaf(z_t), t, g.leaf(cond.matrix)).tensor().clone();
}

double diffusion_loss(const Tensor& eps, const Tensor& eps_hat) {
    require(eps.same_shape(eps_hat), "diffusion_loss: shape mismatch");
    double s = 0;
    for (int64_t i = 0; i < eps.numel(); ++i) {
        double d = eps[i] - eps_hat[i];
        s += d * d;
    }
    return s / double(eps.numel());
}

PromptSpec prompt_for_record(const ManifestRecord& rec, int organ_count) {
    PromptSpec spec;
    spec.modality = rec.modality;
    spec.attributes = rec.attributes;
    spec.region = rec.region;
    if (rec.has_mask) {
        Tensor mask = load_tensor(rec.mask_path);
        std::set<int> classes;
        for (int64_t i = 0; i < mask.numel(); ++i)
            if (int(mask[i]) > 0) classes.insert(int(mask[i]));
        for (int c : classes) spec.organs.push_back(organ_names()[size_t(c - 1)]);
    } else {
        for (int k = 0; k < organ_count; ++k) spec.organs.push_back(organ_names()[size_t(k)]);
    }
    return spec;
}

LatentCache encode_manifest_latents(const VaeModel& vae, const DatasetManifest& manifest,
                                    int threads) {
    LatentCache cache;
    cache.posteriors.resize(manifest.records.size());
    parallel_for(int64_t(manifest.records.size()), threads, [&](int64_t i) {
        Tensor img = load_tensor(manifest.records[size_t(i)].path);
        cache.posteriors[size_t(i)] = vae.encode_image(img);
    });
    double sq = 0;
    int64_t n = 0;
    for (const auto& p : cache.posteriors) {
        for (int64_t i = 0; i < p.mu.numel(); ++i) sq += p.mu[i] * p.mu[i];
        n += p.mu.numel();
    }
    double stddev = std::sqrt(sq / double(n));
    cache.scale = stddev > 1e-8 ? 1.0 / stddev : 1.0;
    return cache;
}

std::vector<TrainLogEntry> train_text_guided(UnetModel& unet, TextEncoder& text,
                                             const VaeModel& vae, const DatasetManifest& manifest,
                                             const Vocabulary& vocab, const NoiseSchedule& sched,
                                             const DiffusionTrainConfig& cfg, uint64_t seed,
                                             double* latent_scale_out) {
    require(!manifest.records.empty(), "train_text_guided: empty manifest");
    {
        std::set<std::string> mods;
        for (const auto& r : manifest.records) mods.insert(r.modality);
        require(mods.size() >= 2, "train_text_guided: manifest must span >= 2 modalities");
    }

    LatentCache cache = encode_manifest_latents(vae, manifest, cfg.threads);
    if (latent_scale_out) *latent_scale_out = cache.scale;

    // Tokenized prompts are fixed per record; organ count from the mask or
    // the full analog set for unannotated records.
    std::vector<std::vector<int>> tokens(manifest.records.size());
    for (size_t i = 0; i < manifest.records.size(); ++i)
        tokens[i] = vocab.tokenize(
            render_prompt(prompt_for_record(manifest.records[i], cfg.organ_count)));
    const std::vector<int> null_tokens = vocab.null_tokens();

    std::vector<nn::Param*> params = unet.params().all();
    for (nn::Param* p : text.params().all()) params.push_back(p);

    nn::AdamW opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;

    const bool sample_latents = cfg.latent_mode == "sample";
    std::vector<TrainLogEntry> log;
    for (int step = 0; step < cfg.steps; ++step) {
        Rng batch_rng(derive_seed(seed, "diff_batch", uint64_t(step)));
        std::vector<int64_t> idx(static_cast<size_t>(cfg.batch_size));
        for (auto& i : idx) i = batch_rng.randint(0, int64_t(manifest.records.size()) - 1);

        nn::AdamW::zero_grad(params);
        double loss = nn::run_batch(
            cfg.batch_size, cfg.threads, params, [&](Graph& g, int64_t bi) -> Value {
                const size_t ri = size_t(idx[size_t(bi)]);
                Rng rng(derive_seed(seed, "diff_sample", uint64_t(step), uint64_t(bi)));

                Tensor z0 = sample_latents
                                ? sample_posterior(cache.posteriors[ri], rng.next_u64())
                                : cache.posteriors[ri].mu.clone();
                for (int64_t i = 0; i < z0.numel(); ++i) z0[i] *= cache.scale;

                int t = int(rng.randint(1, sched.T));
                Tensor eps = Tensor::randn(z0.shape(), rng);
                Tensor z_t = forward_diffuse(z0, t, eps, sched);

                bool dropped = rng.uniform() < cfg.prompt_dropout;
                const auto& toks = dropped ? null_tokens : tokens[ri];
                auto cond = text.embed(g, toks);
                auto eps_hat = unet.forward(g, g.leaf(z_t), t, cond);
                return g.mse(eps_hat, g.leaf(eps));
            });
        opt.step(params);
        if (step % cfg.log_every == 0 || step == cfg.steps - 1) log.push_back({step, loss});
    }
    return log;
}

}  // namespace crossgen
