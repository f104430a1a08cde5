#pragma once

#include <string>

#include "crossgen/manifest.hpp"
#include "crossgen/nn.hpp"

namespace crossgen {

// Variational posterior q(z|I); logvar is clamped to [-30, 20] at encode.
struct PosteriorParams {
    Tensor mu;      // [d, h, w]
    Tensor logvar;  // [d, h, w]
};

struct VaeConfig {
    int image_size = 64;
    int latent_channels = 16;  // d
    int base_width = 16;
    int groups = 4;
};

// Convolutional autoencoder with three stride-2 stages (compression ratio 8)
// and a tanh-squashed decoder.
class VaeModel {
public:
    VaeModel(const VaeConfig& cfg, uint64_t seed);

    // Graph-side forward passes (training).
    std::pair<nn::Value, nn::Value> encode(nn::Graph& g, const nn::Value& image) const;
    nn::Value decode(nn::Graph& g, const nn::Value& z) const;

    // Tensor-side helpers (inference).
    PosteriorParams encode_image(const Tensor& image) const;
    Tensor decode_latent(const Tensor& z) const;

    const VaeConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return params_; }
    int latent_hw() const { return cfg_.image_size / 8; }

private:
    VaeConfig cfg_;
    nn::ParamStore params_;

    nn::Conv2d enc_in_, enc_d1_, enc_d2_, enc_d3_, enc_mid_, enc_out_;
    nn::GroupNorm enc_n1_, enc_n2_, enc_n3_, enc_n4_, enc_n5_;
    nn::Conv2d dec_in_, dec_mid_, dec_u1_, dec_u2_, dec_u3_, dec_out_;
    nn::GroupNorm dec_n1_, dec_n2_, dec_n3_, dec_n4_, dec_n5_;
};

// z = mu + exp(logvar/2) * n with n ~ N(0,1); deterministic given seed.
Tensor sample_posterior(const PosteriorParams& post, uint64_t seed);

// mean over elements of 0.5 (mu^2 + exp(logvar) - 1 - logvar)
double kl_loss(const PosteriorParams& post);

// ||I - I_hat||^2 (mean) + gamma * KL
double vae_loss(const Tensor& image, const Tensor& reconstruction, const PosteriorParams& post,
                double gamma);

struct VaeTrainConfig {
    int steps = 2500;
    int batch_size = 8;
    double lr = 1e-3;
    double weight_decay = 1e-6;
    double gamma = 1e-4;       // KL weight
    double augment_prob = 0.2; // this stage only
    int threads = 2;
    int log_every = 50;
};

// Trains on every record in the manifest (masks ignored); returns the log.
// The model's params end at the trained state.
std::vector<TrainLogEntry> train_autoencoder(VaeModel& model, const DatasetManifest& manifest,
                                             const VaeTrainConfig& cfg, uint64_t seed);

// Mean PSNR of mean-latent reconstructions over a sample of records.
double reconstruction_psnr(const VaeModel& model, const DatasetManifest& manifest,
                           int max_records = 32);

}  // namespace crossgen
