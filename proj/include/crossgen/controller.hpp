#pragma once

#include "crossgen/unet.hpp"

namespace crossgen {

// Single-channel palette image: organ k renders at intensity k / K_max.
struct MaskImage {
    Tensor image;  // HxW in {0, 1/K, ..., 1}
    int k_max = 0;
};

MaskImage encode_mask(const Tensor& organ_labels, int k_max);
Tensor decode_mask(const MaskImage& mask);

// Mask condition controller: a copy of the denoiser encoder fed z_t plus
// downsampled mask features, emitting one zero-initialized residual per
// decoder block of the denoiser.
class MaskController {
public:
    MaskController(const UnetConfig& cfg, int image_size, uint64_t seed);

    // Copies the denoiser's encoder and timestep-trunk weights into this
    // controller (shapes must match); injection projections stay zero.
    void init_from_denoiser(const UnetModel& denoiser);

    // Residuals at the three injection points (full res, half, bottleneck).
    std::vector<nn::Value> residuals(nn::Graph& g, const nn::Value& z_t, int t,
                                     const nn::Value& cond, const nn::Value& mask) const;

    nn::ParamStore& params() { return params_; }
    const UnetConfig& unet_config() const { return cfg_; }
    int image_size() const { return image_size_; }

private:
    UnetConfig cfg_;
    int image_size_;
    nn::ParamStore params_;

    // mirror of the denoiser encoder
    nn::Linear temb_l1_, temb_l2_;
    nn::Conv2d conv_in_;
    ResBlock rb_e0_, rb_e1_, rb_e2_;
    CrossAttnBlock attn_e1_;
    nn::Conv2d down0_, down1_;

    // learnable downsampler phi_down: HxW mask -> latent-resolution features
    nn::Conv2d md1_, md2_, md3_, md_out_;
    nn::GroupNorm mn1_, mn2_, mn3_;

    // zero-initialized 1x1 injection projections
    nn::Conv2d zc0_, zc1_, zc2_;

    nn::Value time_embedding(nn::Graph& g, int t) const;
};

// eps_hat_c(z_t, t, C_T, M): denoiser decoder blocks plus controller
// residuals, exactly the plain denoiser when the projections are zero.
nn::Value controlled_forward(nn::Graph& g, const UnetModel& denoiser,
                             const MaskController& controller, const nn::Value& z_t, int t,
                             const nn::Value& cond, const nn::Value& mask);

Tensor controlled_denoise(const UnetModel& denoiser, const MaskController& controller,
                          const Tensor& z_t, int t, const ConditioningMatrix& cond,
                          const MaskImage& mask);

struct ControllerTrainConfig {
    int steps = 1200;
    int batch_size = 12;
    double lr = 2e-4;
    double weight_decay = 1e-6;
    double prompt_dropout = 0.10;
    std::string unannotated_mask = "background";  // background | bypass
    int organ_count = 3;
    int k_max = 4;
    int threads = 2;
    int log_every = 50;
};

struct ControllerTrainLog {
    std::vector<TrainLogEntry> total;
    double final_annotated_loss = 0.0;
    double final_unannotated_loss = 0.0;
};

// Stage-three finetuning on a mix of mask-annotated and unannotated records.
// Only controller parameters update; denoiser, text encoder, and VAE stay
// frozen. Unannotated records feed an all-background mask (or bypass the
// controller entirely, per config).
ControllerTrainLog train_controller(MaskController& controller, const UnetModel& denoiser,
                                    const TextEncoder& text, const VaeModel& vae,
                                    const DatasetManifest& annotated,
                                    const DatasetManifest& unannotated,
                                    const Vocabulary& vocab, const NoiseSchedule& sched,
                                    double latent_scale, const ControllerTrainConfig& cfg,
                                    uint64_t seed);

}  // namespace crossgen
