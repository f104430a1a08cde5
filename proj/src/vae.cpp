#include "crossgen/vae.hpp"

#include <cmath>

#include "crossgen/metrics.hpp"

namespace crossgen {

using nn::Graph;
using nn::Value;

VaeModel::VaeModel(const VaeConfig& cfg, uint64_t seed) : cfg_(cfg) {
    require(cfg.image_size % 8 == 0, "vae: image size must be divisible by 8");
    Rng rng(derive_seed(seed, "vae_init"));
    const int w = cfg.base_width;       // 64x64 width
    const int w2 = w + w / 2;           // 32x32
    const int w4 = 2 * w;               // 16x16
    const int w8 = 3 * w;               // 8x8
    const int g = cfg.groups;
    const int d = cfg.latent_channels;

    enc_in_ = nn::Conv2d::create(params_, "enc.in", 1, w, 3, 1, 1, rng);
    enc_n1_ = nn::GroupNorm::create(params_, "enc.n1", w, g);
    enc_d1_ = nn::Conv2d::create(params_, "enc.d1", w, w2, 3, 2, 1, rng);
    enc_n2_ = nn::GroupNorm::create(params_, "enc.n2", w2, g);
    enc_d2_ = nn::Conv2d::create(params_, "enc.d2", w2, w4, 3, 2, 1, rng);
    enc_n3_ = nn::GroupNorm::create(params_, "enc.n3", w4, g);
    enc_d3_ = nn::Conv2d::create(params_, "enc.d3", w4, w8, 3, 2, 1, rng);
    enc_n4_ = nn::GroupNorm::create(params_, "enc.n4", w8, g);
    enc_mid_ = nn::Conv2d::create(params_, "enc.mid", w8, w8, 3, 1, 1, rng);
    enc_n5_ = nn::GroupNorm::create(params_, "enc.n5", w8, g);
    enc_out_ = nn::Conv2d::create(params_, "enc.out", w8, 2 * d, 3, 1, 1, rng);

    dec_in_ = nn::Conv2d::create(params_, "dec.in", d, w8, 3, 1, 1, rng);
    dec_n1_ = nn::GroupNorm::create(params_, "dec.n1", w8, g);
    dec_mid_ = nn::Conv2d::create(params_, "dec.mid", w8, w8, 3, 1, 1, rng);
    dec_n2_ = nn::GroupNorm::create(params_, "dec.n2", w8, g);
    dec_u1_ = nn::Conv2d::create(params_, "dec.u1", w8, w4, 3, 1, 1, rng);
    dec_n3_ = nn::GroupNorm::create(params_, "dec.n3", w4, g);
    dec_u2_ = nn::Conv2d::create(params_, "dec.u2", w4, w2, 3, 1, 1, rng);
    dec_n4_ = nn::GroupNorm::create(params_, "dec.n4", w2, g);
    dec_u3_ = nn::Conv2d::create(params_, "dec.u3", w2, w, 3, 1, 1, rng);
    dec_n5_ = nn::GroupNorm::create(params_, "dec.n5", w, g);
    dec_out_ = nn::Conv2d::create(params_, "dec.out", w, 1, 3, 1, 1, rng);
}

std::pair<Value, Value> VaeModel::encode(Graph& g, const Value& image) const {
    require(image.shape() == std::vector<int>{1, cfg_.image_size, cfg_.image_size},
            "vae encode: image shape mismatch, got " + shape_str(image.shape()));
    auto h = enc_in_(g, image);
    h = enc_d1_(g, g.silu(enc_n1_(g, h)));
    h = enc_d2_(g, g.silu(enc_n2_(g, h)));
    h = enc_d3_(g, g.silu(enc_n3_(g, h)));
    h = enc_mid_(g, g.silu(enc_n4_(g, h)));
    h = enc_out_(g, g.silu(enc_n5_(g, h)));
    const int d = cfg_.latent_channels;
    auto mu = g.slice_ch(h, 0, d);
    auto logvar = g.clamp_(g.slice_ch(h, d, 2 * d), -30.0, 20.0);
    return {mu, logvar};
}

Value VaeModel::decode(Graph& g, const Value& z) const {
    const int hw = latent_hw();
    require(z.shape() == std::vector<int>{cfg_.latent_channels, hw, hw},
            "vae decode: latent shape mismatch, got " + shape_str(z.shape()));
    auto h = dec_in_(g, z);
    h = dec_mid_(g, g.silu(dec_n1_(g, h)));
    h = g.silu(dec_n2_(g, h));
    h = dec_u1_(g, g.upsample_nearest2(h));
    h = g.silu(dec_n3_(g, h));
    h = dec_u2_(g, g.upsample_nearest2(h));
    h = g.silu(dec_n4_(g, h));
    h = dec_u3_(g, g.upsample_nearest2(h));
    h = dec_out_(g, g.silu(dec_n5_(g, h)));
    return g.tanh_(h);
}

PosteriorParams VaeModel::encode_image(const Tensor& image) const {
    Graph g(false);
    Tensor img = image.ndim() == 2
                     ? image.reshaped({1, image.dim(0), image.dim(1)})
                     : image;
    auto [mu, logvar] = encode(g, g.leaf(img));
    return {mu.tensor().clone(), logvar.tensor().clone()};
}

Tensor VaeModel::decode_latent(const Tensor& z) const {
    Graph g(false);
    return decode(g, g.leaf(z)).tensor().clone();
}

Tensor sample_posterior(const PosteriorParams& post, uint64_t seed) {
    Rng rng(derive_seed(seed, "posterior_sample"));
    Tensor z(post.mu.shape());
    for (int64_t i = 0; i < z.numel(); ++i)
        z[i] = post.mu[i] + std::exp(0.5 * post.logvar[i]) * rng.normal();
    return z;
}

double kl_loss(const PosteriorParams& post) {
    require(post.mu.same_shape(post.logvar), "kl_loss: mu/logvar shape mismatch");
    double s = 0;
    for (int64_t i = 0; i < post.mu.numel(); ++i)
        s += 0.5 * (post.mu[i] * post.mu[i] + std::exp(post.logvar[i]) - 1.0 - post.logvar[i]);
    return s / double(post.mu.numel());
}

double vae_loss(const Tensor& image, const Tensor& reconstruction, const PosteriorParams& post,
                double gamma) {
    return mse(image, reconstruction) + gamma * kl_loss(post);
}

std::vector<TrainLogEntry> train_autoencoder(VaeModel& model, const DatasetManifest& manifest,
                                             const VaeTrainConfig& cfg, uint64_t seed) {
    require(!manifest.records.empty(), "train_autoencoder: empty manifest");
    std::vector<Tensor> images;
    images.reserve(manifest.records.size());
    for (const auto& r : manifest.records) images.push_back(load_tensor(r.path));

    auto params = model.params().all();
    nn::AdamW opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;

    std::vector<TrainLogEntry> log;
    for (int step = 0; step < cfg.steps; ++step) {
        Rng batch_rng(derive_seed(seed, "vae_batch", uint64_t(step)));
        std::vector<int64_t> idx(size_t(cfg.batch_size));
        for (auto& i : idx) i = batch_rng.randint(0, int64_t(images.size()) - 1);

        nn::AdamW::zero_grad(params);
        double loss = nn::run_batch(
            cfg.batch_size, cfg.threads, params, [&](Graph& g, int64_t i) -> Value {
                SliceRecord rec;
                rec.image = images[size_t(idx[size_t(i)])];
                Rng aug_rng(derive_seed(seed, "vae_aug", uint64_t(step), uint64_t(i)));
                rec = augment(rec, cfg.augment_prob, aug_rng);
                Tensor img = rec.image.reshaped({1, rec.image.dim(0), rec.image.dim(1)});

                auto in = g.leaf(img);
                auto [mu, logvar] = model.encode(g, in);
                Rng noise_rng(derive_seed(seed, "vae_noise", uint64_t(step), uint64_t(i)));
                Tensor n = Tensor::randn(mu.shape(), noise_rng);
                auto std_half = g.exp_(g.scale(logvar, 0.5));
                auto z = g.add(mu, g.mul(std_half, g.leaf(n)));
                auto recon = model.decode(g, z);
                auto rec_loss = g.mse(recon, in);
                auto kl = g.kl_normal(mu, logvar);
                return g.weighted_sum({rec_loss, kl}, {1.0, cfg.gamma});
            });
        opt.step(params);
        if (step % cfg.log_every == 0 || step == cfg.steps - 1)
            log.push_back({step, loss});
    }
    return log;
}

double reconstruction_psnr(const VaeModel& model, const DatasetManifest& manifest,
                           int max_records) {
    require(!manifest.records.empty(), "reconstruction_psnr: empty manifest");
    int n = std::min<int>(max_records, int(manifest.records.size()));
    double total = 0;
    for (int i = 0; i < n; ++i) {
        Tensor img = load_tensor(manifest.records[size_t(i)].path);
        PosteriorParams post = model.encode_image(img);
        Tensor recon = model.decode_latent(post.mu);
        total += psnr(img.reshaped(recon.shape()), recon, 2.0);
    }
    return total / double(n);
}

}  // namespace crossgen
