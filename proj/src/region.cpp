#include "crossgen/region.hpp"

#include <cmath>

namespace crossgen {

using nn::Graph;
using nn::Value;

std::vector<std::string> region_prompt_list() {
    // Region/organ wording pairs for the text tower, one per band.
    static const std::vector<std::pair<std::string, std::string>> pairs = {
        {"upper thoracic region", "lung, ribs and clavicles"},
        {"middle thoracic region", "lung, ribs and heart"},
        {"lower thoracic region", "lung, ribs and liver"},
        {"upper abdominal region", "liver, spleen, pancreas, kidney and stomach"},
        {"lower abdominal region", "kidney, small intestine, colon, cecum and appendix"},
        {"pelvic region", "rectum, bladder, prostate/uterus and pelvic bones"},
    };
    std::vector<std::string> prompts;
    for (const auto& [region, organs] : pairs)
        prompts.push_back("This is a radiology image that shows " + region +
                          " of a human body, and probably contains " + organs + ".");
    return prompts;
}

namespace {
double cosine(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "classify_region: embedder dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    double denom = std::sqrt(na) * std::sqrt(nb);
    return denom > 1e-12 ? dot / denom : 0.0;
}
}  // namespace

std::vector<double> region_probabilities(const Tensor& image,
                                         const std::vector<std::string>& region_prompts,
                                         const EmbedderInterface& embedder) {
    require(!region_prompts.empty(), "classify_region: no prompts");
    Tensor img_emb = embedder.embed_image(image);
    std::vector<double> sims;
    for (const auto& p : region_prompts) sims.push_back(cosine(img_emb, embedder.embed_text(p)));
    double tau = embedder.temperature();
    double mx = -1e300;
    for (double s : sims) mx = std::max(mx, s / tau);
    double z = 0;
    std::vector<double> probs;
    for (double s : sims) {
        double e = std::exp(s / tau - mx);
        probs.push_back(e);
        z += e;
    }
    for (double& p : probs) p /= z;
    return probs;
}

std::string classify_region(const Tensor& image, const std::vector<std::string>& region_prompts,
                            const std::vector<std::string>& region_labels,
                            const EmbedderInterface& embedder, double threshold) {
    require(region_prompts.size() == region_labels.size(),
            "classify_region: prompt/label count mismatch");
    auto probs = region_probabilities(image, region_prompts, embedder);
    size_t best = 0;
    for (size_t i = 1; i < probs.size(); ++i)
        if (probs[i] > probs[best]) best = i;
    if (probs[best] < threshold) return "unlabeled";
    return region_labels[best];
}

TwoTowerEmbedder::TwoTowerEmbedder(int image_size, int embed_dim, uint64_t seed)
    : image_size_(image_size),
      embed_dim_(embed_dim),
      text_vocab_(Vocabulary::build(region_prompt_list(), 24)) {
    Rng rng(derive_seed(seed, "two_tower"));
    c1_ = nn::Conv2d::create(params_, "c1", 1, 8, 3, 2, 1, rng);
    n1_ = nn::GroupNorm::create(params_, "n1", 8, 4);
    c2_ = nn::Conv2d::create(params_, "c2", 8, 16, 3, 2, 1, rng);
    n2_ = nn::GroupNorm::create(params_, "n2", 16, 4);
    c3_ = nn::Conv2d::create(params_, "c3", 16, 32, 3, 2, 1, rng);
    n3_ = nn::GroupNorm::create(params_, "n3", 32, 4);
    img_proj_ = nn::Linear::create(params_, "img_proj", 32, embed_dim, rng);
    token_table_ = &params_.add("tok_table", Tensor::randn({text_vocab_.size(), embed_dim}, rng, 0.2));
    txt_proj_ = nn::Linear::create(params_, "txt_proj", embed_dim, embed_dim, rng);
    // CLIP-style learned temperature, initialized to 0.07
    log_tau_ = &params_.add("log_tau", Tensor::full({1}, std::log(0.07)));
}

std::vector<int> TwoTowerEmbedder::prompt_tokens(const std::string& prompt) const {
    return text_vocab_.tokenize(prompt);
}

Value TwoTowerEmbedder::image_features(Graph& g, const Value& image) const {
    auto h = g.silu(n1_(g, c1_(g, image)));
    h = g.silu(n2_(g, c2_(g, h)));
    h = g.silu(n3_(g, c3_(g, h)));
    return img_proj_(g, g.reshape(g.avgpool_all(h), {1, 32}));
}

Value TwoTowerEmbedder::text_features(Graph& g, const std::vector<int>& token_ids) const {
    auto emb = g.embedding(g.param(*token_table_), token_ids);
    return txt_proj_(g, g.reshape(g.mean_rows(emb), {1, embed_dim_}));
}

Tensor TwoTowerEmbedder::embed_image(const Tensor& image) const {
    Graph g(false);
    Tensor img = image.ndim() == 2 ? image.reshaped({1, image.dim(0), image.dim(1)}) : image;
    require(img.dim(1) == image_size_, "two tower: image size mismatch");
    return image_features(g, g.leaf(img)).tensor().reshaped({embed_dim_}).clone();
}

Tensor TwoTowerEmbedder::embed_text(const std::string& prompt) const {
    Graph g(false);
    return text_features(g, prompt_tokens(prompt)).tensor().reshaped({embed_dim_}).clone();
}

double TwoTowerEmbedder::temperature() const { return std::exp(log_tau_->value[0]); }

double TwoTowerEmbedder::fit(const std::vector<Tensor>& images,
                             const std::vector<int>& band_labels, const TrainConfig& cfg,
                             uint64_t seed) {
    require(!images.empty() && images.size() == band_labels.size(),
            "two tower: image/label mismatch");
    auto prompts = region_prompt_list();
    std::vector<std::vector<int>> prompt_ids;
    for (const auto& p : prompts) prompt_ids.push_back(prompt_tokens(p));

    auto params = params_.all();
    nn::AdamW opt;
    opt.lr = cfg.lr;
    double window = 0;
    int window_n = 0;

    for (int step = 0; step < cfg.steps; ++step) {
        Rng batch_rng(derive_seed(seed, "tt_batch", uint64_t(step)));
        std::vector<int64_t> idx(static_cast<size_t>(cfg.batch_size));
        for (auto& i : idx) i = batch_rng.randint(0, int64_t(images.size()) - 1);

        nn::AdamW::zero_grad(params);
        double loss = nn::run_batch(
            cfg.batch_size, cfg.threads, params, [&](Graph& g, int64_t bi) -> Value {
                const size_t ri = size_t(idx[size_t(bi)]);
                Tensor raw = images[ri];
                Tensor img = raw.ndim() == 2 ? raw.reshaped({1, raw.dim(0), raw.dim(1)}) : raw;
                auto iv = g.l2_normalize_rows(image_features(g, g.leaf(img)));  // [1, D]

                std::vector<Value> rows;
                for (size_t p = 0; p < prompt_ids.size(); ++p)
                    rows.push_back(text_features(g, prompt_ids[p]));
                auto tv = g.l2_normalize_rows(g.concat_rows(rows));  // [P, D]

                auto inv_tau = g.exp_(g.scale(g.param(*log_tau_), -1.0));
                auto logits = g.mul_scalar_value(g.matmul_nt(iv, tv), inv_tau);  // [1, P]
                return g.softmax_xent_rows(logits, {band_labels[ri]});
            });
        opt.step(params);
        if (step >= cfg.steps - 20) {
            window += loss;
            ++window_n;
        }
    }
    return window / std::max(1, window_n);
}

double TwoTowerEmbedder::band_accuracy(const std::vector<Tensor>& images,
                                       const std::vector<int>& labels) const {
    auto prompts = region_prompt_list();
    int correct = 0;
    for (size_t i = 0; i < images.size(); ++i) {
        auto probs = region_probabilities(images[i], prompts, *this);
        size_t best = 0;
        for (size_t k = 1; k < probs.size(); ++k)
            if (probs[k] > probs[best]) best = k;
        if (int(best) == labels[i]) ++correct;
    }
    return double(correct) / double(images.size());
}

}  // namespace crossgen
