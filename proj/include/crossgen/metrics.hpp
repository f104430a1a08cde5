#pragma once

#include <string>
#include <vector>

#include "crossgen/nn.hpp"

namespace crossgen {

double mse(const Tensor& a, const Tensor& b);

// 10 log10(range^2 / mse); identical inputs report the 100 dB cap.
double psnr(const Tensor& a, const Tensor& b, double data_range);

// Uniform 7x7 window, standard constants, means over valid windows.
double ssim(const Tensor& a, const Tensor& b, double data_range = 2.0);

// N x E feature matrix plus the id of the extractor that produced it.
struct FeatureSet {
    Tensor features;
    std::string extractor_id;
};

// Frechet distance between Gaussian fits: |mu_a - mu_b|^2 +
// tr(Sa + Sb - 2 (Sa Sb)^(1/2)). Square roots via symmetric eigen
// decomposition; eigenvalues below -1e-6 are rejected, small negatives
// clipped to zero. Covariances are the unbiased (N-1) estimates.
double fid(const FeatureSet& a, const FeatureSet& b);

// Pooled trunk features of a small conv classifier; the desk-scale stand-in
// for a pretrained feature backbone. Trained to separate phantom modalities.
class FeatureExtractor {
public:
    FeatureExtractor(int image_size, int num_classes, uint64_t seed);

    nn::Value features(nn::Graph& g, const nn::Value& image) const;  // [E]
    nn::Value logits(nn::Graph& g, const nn::Value& image) const;    // [1, classes]

    Tensor extract(const Tensor& image) const;  // [E]

    struct TrainConfig {
        int steps = 400;
        int batch_size = 16;
        double lr = 1e-3;
        int threads = 2;
    };
    // Returns final-window mean cross-entropy.
    double train_classifier(const std::vector<Tensor>& images, const std::vector<int>& labels,
                            const TrainConfig& cfg, uint64_t seed);

    nn::ParamStore& params() { return params_; }
    int feature_dim() const { return 32; }
    std::string id() const { return "conv-modality-clf"; }

private:
    int image_size_;
    nn::ParamStore params_;
    nn::Conv2d c1_, c2_, c3_;
    nn::GroupNorm n1_, n2_, n3_;
    nn::Linear head_;
};

FeatureSet extract_features(const std::vector<Tensor>& images, const FeatureExtractor& extractor);

}  // namespace crossgen
