#pragma once

#include "crossgen/nn.hpp"
#include "crossgen/phantom.hpp"
#include "crossgen/prompts.hpp"

namespace crossgen {

// Shared image/text embedding space for region classification. Any
// implementation slots into classify_region; temperature scales the cosine
// similarities before the softmax.
class EmbedderInterface {
public:
    virtual ~EmbedderInterface() = default;
    virtual Tensor embed_image(const Tensor& image) const = 0;
    virtual Tensor embed_text(const std::string& prompt) const = 0;
    virtual double temperature() const { return 1.0; }
};

// The six region description prompts fed to the text tower.
std::vector<std::string> region_prompt_list();

// Cosine similarity of the image embedding to each prompt embedding, softmax
// over similarities / temperature; argmax label when its probability clears
// the confidence threshold, otherwise "unlabeled".
std::string classify_region(const Tensor& image, const std::vector<std::string>& region_prompts,
                            const std::vector<std::string>& region_labels,
                            const EmbedderInterface& embedder, double threshold = 0.40);

// Softmax probabilities over the prompts, exposed for calibration tests.
std::vector<double> region_probabilities(const Tensor& image,
                                         const std::vector<std::string>& region_prompts,
                                         const EmbedderInterface& embedder);

// Trainable tiny two-tower embedder fit on labeled phantom slices (region =
// slice-band ground truth). Learned temperature, CLIP-style.
class TwoTowerEmbedder : public EmbedderInterface {
public:
    TwoTowerEmbedder(int image_size, int embed_dim, uint64_t seed);

    Tensor embed_image(const Tensor& image) const override;
    Tensor embed_text(const std::string& prompt) const override;
    double temperature() const override;

    struct TrainConfig {
        int steps = 300;
        int batch_size = 16;
        double lr = 2e-3;
        int threads = 2;
    };
    // Supervised contrastive fit: image vs the six region prompts, labels are
    // band indices. Returns final-window mean loss.
    double fit(const std::vector<Tensor>& images, const std::vector<int>& band_labels,
               const TrainConfig& cfg, uint64_t seed);

    // Accuracy against procedural band labels on a held-out sample.
    double band_accuracy(const std::vector<Tensor>& images, const std::vector<int>& labels) const;

    nn::ParamStore& params() { return params_; }

private:
    nn::Value image_features(nn::Graph& g, const nn::Value& image) const;
    nn::Value text_features(nn::Graph& g, const std::vector<int>& token_ids) const;
    std::vector<int> prompt_tokens(const std::string& prompt) const;

    int image_size_;
    int embed_dim_;
    nn::ParamStore params_;
    Vocabulary text_vocab_;
    nn::Conv2d c1_, c2_, c3_;
    nn::GroupNorm n1_, n2_, n3_;
    nn::Linear img_proj_;
    nn::Param* token_table_ = nullptr;
    nn::Linear txt_proj_;
    nn::Param* log_tau_ = nullptr;
};

}  // namespace crossgen
