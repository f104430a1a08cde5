#pragma once

#include "crossgen/manifest.hpp"
#include "crossgen/nn.hpp"
#include "crossgen/schedule.hpp"
#include "crossgen/text_encoder.hpp"
#include "crossgen/vae.hpp"

namespace crossgen {

struct UnetConfig {
    int latent_channels = 16;
    int latent_hw = 8;
    int base_width = 32;  // stage widths are base * {1, 2, 3}
    int temb_dim = 96;
    int cond_dim = 48;    // must match the text encoder embedding width
    int groups = 8;
};

// Residual block with timestep conditioning.
struct ResBlock {
    nn::GroupNorm n1, n2;
    nn::Conv2d c1, c2;  // c2 zero-initialized
    nn::Linear temb_proj;
    nn::Conv2d skip;  // 1x1, present when channels change
    bool has_skip = false;

    static ResBlock create(nn::ParamStore& ps, const std::string& prefix, int in_ch, int out_ch,
                           int temb_dim, int groups, Rng& rng);
    nn::Value operator()(nn::Graph& g, const nn::Value& x, const nn::Value& temb) const;
};

// Text cross-attention over flattened spatial tokens: queries from the
// feature map, keys/values from the conditioning matrix.
struct CrossAttnBlock {
    nn::GroupNorm norm;
    nn::Linear wq, wk, wv, wo;  // wo zero-initialized
    int channels = 0;

    static CrossAttnBlock create(nn::ParamStore& ps, const std::string& prefix, int channels,
                                 int cond_dim, int groups, Rng& rng);
    nn::Value operator()(nn::Graph& g, const nn::Value& x, const nn::Value& cond) const;
};

// Standalone form of the attention core, keys/values straight from `cond`:
// softmax(Q K^T / sqrt(e)) V. The caller adds the residual.
nn::Value cross_attention(nn::Graph& g, const nn::Value& queries, const nn::Value& keys,
                          const nn::Value& values);

// The latent denoiser eps_hat(z_t, t, C_T): three-resolution UNet, text
// cross-attention at the two lowest resolutions, optional per-decoder-block
// residual injection (used by the mask controller).
class UnetModel {
public:
    UnetModel(const UnetConfig& cfg, uint64_t seed);

    // residuals, when present, are added to the decoder block outputs:
    // index 0 at full latent resolution, 1 at half, 2 at the bottleneck.
    nn::Value forward(nn::Graph& g, const nn::Value& z_t, int t, const nn::Value& cond,
                      const std::vector<nn::Value>* residuals = nullptr) const;

    // Tensor-side inference.
    Tensor denoise(const Tensor& z_t, int t, const ConditioningMatrix& cond) const;

    nn::Value time_embedding(nn::Graph& g, int t) const;

    const UnetConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }

    // Encoder pass shared with the controller: returns features at the three
    // resolutions (post conv_in + rb0, post rb1+attn, post rb2).
    std::vector<nn::Value> encode_features(nn::Graph& g, const nn::Value& h0, int t,
                                           const nn::Value& cond) const;

    int width(int stage) const { return cfg_.base_width * (stage + 1); }

private:
    UnetConfig cfg_;
    nn::ParamStore params_;

    nn::Linear temb_l1_, temb_l2_;
    nn::Conv2d conv_in_;
    ResBlock rb_e0_, rb_e1_, rb_e2_, rb_m1_, rb_m2_, rb_d1_, rb_d0_;
    CrossAttnBlock attn_e1_, attn_m_, attn_d1_;
    nn::Conv2d down0_, down1_, up1_, up0_;
    nn::GroupNorm out_norm_;
    nn::Conv2d conv_out_;
};

// mean((eps - eps_hat)^2)
double diffusion_loss(const Tensor& eps, const Tensor& eps_hat);

struct DiffusionTrainConfig {
    int steps = 4000;
    int batch_size = 12;
    double lr = 2e-4;
    double weight_decay = 1e-6;
    double prompt_dropout = 0.10;
    std::string latent_mode = "mean";  // mean | sample
    int organ_count = 3;
    int threads = 2;
    int log_every = 50;
};

// Stage-two text-guided pretraining: encode to latents, noise, regress eps.
// The text encoder trains jointly. Returns the loss log and writes the
// measured latent scale to latent_scale_out.
std::vector<TrainLogEntry> train_text_guided(UnetModel& unet, TextEncoder& text,
                                             const VaeModel& vae, const DatasetManifest& manifest,
                                             const Vocabulary& vocab, const NoiseSchedule& sched,
                                             const DiffusionTrainConfig& cfg, uint64_t seed,
                                             double* latent_scale_out);

// Prompt spec for one manifest record; organ list from the mask when present,
// else every configured organ analog (phantom volumes contain them all).
PromptSpec prompt_for_record(const ManifestRecord& rec, int organ_count);

// Cached per-record latent posterior used by the diffusion stages.
struct LatentCache {
    std::vector<PosteriorParams> posteriors;
    double scale = 1.0;  // 1 / std of the mean latents
};
LatentCache encode_manifest_latents(const VaeModel& vae, const DatasetManifest& manifest,
                                    int threads);

}  // namespace crossgen
