#include "crossgen/controller.hpp"

#include <cmath>
#include <set>

namespace crossgen {

using nn::Graph;
using nn::Value;

MaskImage encode_mask(const Tensor& organ_labels, int k_max) {
    require(k_max >= 1, "encode_mask: k_max must be >= 1");
    MaskImage out;
    out.k_max = k_max;
    out.image = Tensor(organ_labels.shape());
    for (int64_t i = 0; i < organ_labels.numel(); ++i) {
        int k = int(organ_labels[i]);
        require(k >= 0 && k <= k_max, "encode_mask: label " + std::to_string(k) +
                                          " exceeds k_max " + std::to_string(k_max));
        out.image[i] = double(k) / double(k_max);
    }
    return out;
}

Tensor decode_mask(const MaskImage& mask) {
    Tensor out(mask.image.shape());
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = std::round(mask.image[i] * double(mask.k_max));
    return out;
}

MaskController::MaskController(const UnetConfig& cfg, int image_size, uint64_t seed)
    : cfg_(cfg), image_size_(image_size) {
    Rng rng(derive_seed(seed, "controller_init"));
    const int c0 = cfg.base_width, c1 = 2 * cfg.base_width, c2 = 3 * cfg.base_width;
    const int gr = cfg.groups, td = cfg.temb_dim, cd = cfg.cond_dim;

    // Names mirror the denoiser so init_from_denoiser can copy by name.
    temb_l1_ = nn::Linear::create(params_, "temb.l1", td, td, rng);
    temb_l2_ = nn::Linear::create(params_, "temb.l2", td, td, rng);
    conv_in_ = nn::Conv2d::create(params_, "enc.in", cfg.latent_channels, c0, 3, 1, 1, rng);
    rb_e0_ = ResBlock::create(params_, "enc.rb0", c0, c0, td, gr, rng);
    down0_ = nn::Conv2d::create(params_, "enc.down0", c0, c1, 3, 2, 1, rng);
    rb_e1_ = ResBlock::create(params_, "enc.rb1", c1, c1, td, gr, rng);
    attn_e1_ = CrossAttnBlock::create(params_, "enc.attn1", c1, cd, gr, rng);
    down1_ = nn::Conv2d::create(params_, "enc.down1", c1, c2, 3, 2, 1, rng);
    rb_e2_ = ResBlock::create(params_, "enc.rb2", c2, c2, td, gr, rng);

    md1_ = nn::Conv2d::create(params_, "mask.d1", 1, 8, 3, 2, 1, rng);
    mn1_ = nn::GroupNorm::create(params_, "mask.n1", 8, 4);
    md2_ = nn::Conv2d::create(params_, "mask.d2", 8, 16, 3, 2, 1, rng);
    mn2_ = nn::GroupNorm::create(params_, "mask.n2", 16, 4);
    md3_ = nn::Conv2d::create(params_, "mask.d3", 16, 16, 3, 2, 1, rng);
    mn3_ = nn::GroupNorm::create(params_, "mask.n3", 16, 4);
    md_out_ = nn::Conv2d::create(params_, "mask.out", 16, c0, 3, 1, 1, rng);

    zc0_ = nn::Conv2d::create(params_, "inject.z0", c0, c0, 1, 1, 0, rng, /*zero_init=*/true);
    zc1_ = nn::Conv2d::create(params_, "inject.z1", c1, c1, 1, 1, 0, rng, /*zero_init=*/true);
    zc2_ = nn::Conv2d::create(params_, "inject.z2", c2, c2, 1, 1, 0, rng, /*zero_init=*/true);
}

void MaskController::init_from_denoiser(const UnetModel& denoiser) {
    for (const auto& src : denoiser.params().params()) {
        if (src->name.rfind("enc.", 0) != 0 && src->name.rfind("temb.", 0) != 0) continue;
        nn::Param* dst = params_.find(src->name);
        require(dst != nullptr, "init_controller: missing mirror tensor " + src->name);
        require(dst->value.same_shape(src->value),
                "init_controller: architecture mismatch on " + src->name);
        dst->value = src->value.clone();
    }
}

Value MaskController::time_embedding(Graph& g, int t) const {
    Tensor feats = nn::timestep_features(t, cfg_.temb_dim).reshaped({1, cfg_.temb_dim});
    return temb_l2_(g, g.silu(temb_l1_(g, g.leaf(feats))));
}

std::vector<Value> MaskController::residuals(Graph& g, const Value& z_t, int t,
                                             const Value& cond, const Value& mask) const {
    require(mask.shape() == std::vector<int>{1, image_size_, image_size_},
            "controller: mask shape mismatch, got " + shape_str(mask.shape()));
    auto m = g.silu(mn1_(g, md1_(g, mask)));
    m = g.silu(mn2_(g, md2_(g, m)));
    m = g.silu(mn3_(g, md3_(g, m)));
    m = md_out_(g, m);  // c0 at latent resolution

    auto temb = time_embedding(g, t);
    auto h = g.add(conv_in_(g, z_t), m);
    h = rb_e0_(g, h, temb);
    auto f0 = h;
    h = down0_(g, h);
    h = attn_e1_(g, rb_e1_(g, h, temb), cond);
    auto f1 = h;
    h = down1_(g, h);
    auto f2 = rb_e2_(g, h, temb);
    return {zc0_(g, f0), zc1_(g, f1), zc2_(g, f2)};
}

Value controlled_forward(Graph& g, const UnetModel& denoiser, const MaskController& controller,
                         const Value& z_t, int t, const Value& cond, const Value& mask) {
    auto res = controller.residuals(g, z_t, t, cond, mask);
    return denoiser.forward(g, z_t, t, cond, &res);
}

Tensor controlled_denoise(const UnetModel& denoiser, const MaskController& controller,
                          const Tensor& z_t, int t, const ConditioningMatrix& cond,
                          const MaskImage& mask) {
    Graph g(false);
    Tensor m = mask.image.ndim() == 2
                   ? mask.image.reshaped({1, mask.image.dim(0), mask.image.dim(1)})
                   : mask.image;
    return controlled_forward(g, denoiser, controller, g.leaf(z_t), t, g.leaf(cond.matrix),
                              g.leaf(m))
        .tensor()
        .clone();
}

ControllerTrainLog train_controller(MaskController& controller, const UnetModel& denoiser,
                                    const TextEncoder& text, const VaeModel& vae,
                                    const DatasetManifest& annotated,
                                    const DatasetManifest& unannotated,
                                    const Vocabulary& vocab, const NoiseSchedule& sched,
                                    double latent_scale, const ControllerTrainConfig& cfg,
                                    uint64_t seed) {
    require(!annotated.records.empty(),
            "train_controller: need at least one mask-annotated record");
    for (const auto& r : annotated.records)
        require(r.has_mask, "train_controller: annotated manifest record lacks a mask");

    struct Item {
        PosteriorParams post;
        std::vector<int> tokens;
        Tensor mask_img;  // 1xHxW palette image; zeros for unannotated
        bool has_mask;
    };

    DatasetManifest all;
    all.records = annotated.records;
    for (const auto& r : unannotated.records) all.records.push_back(r);

    LatentCache cache = encode_manifest_latents(vae, all, cfg.threads);
    std::vector<Item> items(all.records.size());
    const int hw = vae.config().image_size;
    for (size_t i = 0; i < all.records.size(); ++i) {
        const auto& rec = all.records[i];
        items[i].post = cache.posteriors[i];
        items[i].tokens =
            vocab.tokenize(render_prompt(prompt_for_record(rec, cfg.organ_count)));
        items[i].has_mask = rec.has_mask;
        if (rec.has_mask) {
            MaskImage mi = encode_mask(load_tensor(rec.mask_path), cfg.k_max);
            items[i].mask_img = mi.image.reshaped({1, hw, hw});
        } else {
            items[i].mask_img = Tensor::zeros({1, hw, hw});
        }
    }
    const std::vector<int> null_tokens = vocab.null_tokens();

    // Optimizer scope: controller only. Denoiser params bind as constants so
    // no gradient is ever computed for them; text/vae run outside the graph.
    auto ctrl_params = controller.params().all();
    auto frozen = const_cast<UnetModel&>(denoiser).params().all();
    nn::set_frozen(frozen, true);
    nn::AdamW opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;

    const bool bypass = cfg.unannotated_mask == "bypass";
    ControllerTrainLog log;
    double ann_loss = 0, unann_loss = 0;
    int64_t ann_n = 0, unann_n = 0;
    const int final_window = std::max(1, cfg.steps / 5);

    for (int step = 0; step < cfg.steps; ++step) {
        Rng batch_rng(derive_seed(seed, "ctrl_batch", uint64_t(step)));
        std::vector<int64_t> idx(static_cast<size_t>(cfg.batch_size));
        for (auto& i : idx) i = batch_rng.randint(0, int64_t(items.size()) - 1);

        nn::AdamW::zero_grad(ctrl_params);
        std::vector<double> sample_losses;
        double loss = nn::run_batch(
            cfg.batch_size, cfg.threads, ctrl_params,
            [&](Graph& g, int64_t bi) -> Value {
                const Item& item = items[size_t(idx[size_t(bi)])];
                Rng rng(derive_seed(seed, "ctrl_sample", uint64_t(step), uint64_t(bi)));

                Tensor z0 = item.post.mu.clone();
                for (int64_t i = 0; i < z0.numel(); ++i) z0[i] *= latent_scale;
                int t = int(rng.randint(1, sched.T));
                Tensor eps = Tensor::randn(z0.shape(), rng);
                Tensor z_t = forward_diffuse(z0, t, eps, sched);

                bool dropped = rng.uniform() < cfg.prompt_dropout;
                const auto& toks = dropped ? null_tokens : item.tokens;
                // Frozen conditioning: embed outside the gradient path.
                ConditioningMatrix cm = text.embed_tokens(toks, dropped);
                auto cond = g.leaf(cm.matrix);

                Value eps_hat;
                if (!item.has_mask && bypass) {
                    eps_hat = denoiser.forward(g, g.leaf(z_t), t, cond);
                } else {
                    eps_hat = controlled_forward(g, denoiser, controller, g.leaf(z_t), t, cond,
                                                 g.leaf(item.mask_img));
                }
                return g.mse(eps_hat, g.leaf(eps));
            },
            &sample_losses);

        opt.step(ctrl_params);
        if (step % cfg.log_every == 0 || step == cfg.steps - 1) log.total.push_back({step, loss});
        if (step >= cfg.steps - final_window) {
            for (int64_t bi = 0; bi < cfg.batch_size; ++bi) {
                const Item& item = items[size_t(idx[size_t(bi)])];
                if (item.has_mask) {
                    ann_loss += sample_losses[size_t(bi)];
                    ++ann_n;
                } else {
                    unann_loss += sample_losses[size_t(bi)];
                    ++unann_n;
                }
            }
        }
    }
    nn::set_frozen(frozen, false);
    log.final_annotated_loss = ann_n ? ann_loss / double(ann_n) : 0.0;
    log.final_unannotated_loss = unann_n ? unann_loss / double(unann_n) : 0.0;
    return log;
}

}  // namespace crossgen
