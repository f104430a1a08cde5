#include "crossgen/metrics.hpp"

#include <cmath>

#include <Eigen/Dense>

namespace crossgen {

using nn::Graph;
using nn::Value;

double mse(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "mse: shape mismatch");
    double s = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s / double(a.numel());
}

double psnr(const Tensor& a, const Tensor& b, double data_range) {
    require(data_range > 0, "psnr: data_range must be positive");
    double m = mse(a, b);
    if (m <= 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(data_range * data_range / m));
}

double ssim(const Tensor& a, const Tensor& b, double data_range) {
    require(a.same_shape(b), "ssim: shape mismatch");
    Tensor x = a.ndim() == 3 ? a.reshaped({a.dim(1), a.dim(2)}) : a;
    Tensor y = b.ndim() == 3 ? b.reshaped({b.dim(1), b.dim(2)}) : b;
    require(x.ndim() == 2, "ssim: expected 2-D images");
    const int h = x.dim(0), w = x.dim(1);
    const int win = 7;
    require(h >= win && w >= win, "ssim: image smaller than window");
    const double c1 = (0.01 * data_range) * (0.01 * data_range);
    const double c2 = (0.03 * data_range) * (0.03 * data_range);
    const double n = double(win) * win;

    double total = 0;
    int64_t count = 0;
    for (int i = 0; i + win <= h; ++i) {
        for (int j = 0; j + win <= w; ++j) {
            double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
            for (int u = 0; u < win; ++u)
                for (int v = 0; v < win; ++v) {
                    double xv = x.at(i + u, j + v), yv = y.at(i + u, j + v);
                    sx += xv;
                    sy += yv;
                    sxx += xv * xv;
                    syy += yv * yv;
                    sxy += xv * yv;
                }
            double mx = sx / n, my = sy / n;
            double vx = sxx / n - mx * mx;
            double vy = syy / n - my * my;
            double cxy = sxy / n - mx * my;
            total += ((2 * mx * my + c1) * (2 * cxy + c2)) /
                     ((mx * mx + my * my + c1) * (vx + vy + c2));
            ++count;
        }
    }
    return total / double(count);
}

namespace {

using Mat = Eigen::MatrixXd;

// Symmetric PSD square root with the documented eigenvalue clipping.
Mat sqrtm_psd(const Mat& m) {
    Eigen::SelfAdjointEigenSolver<Mat> es(m);
    Eigen::VectorXd ev = es.eigenvalues();
    for (int i = 0; i < ev.size(); ++i) {
        require(ev[i] > -1e-6, "fid: covariance square root has eigenvalue below -1e-6");
        ev[i] = std::sqrt(std::max(0.0, ev[i]));
    }
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

void mean_and_cov(const Tensor& feats, Eigen::VectorXd& mu, Mat& cov) {
    const int n = feats.dim(0), e = feats.dim(1);
    require(n >= 2, "fid: need at least 2 samples per set");
    mu = Eigen::VectorXd::Zero(e);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < e; ++j) mu[j] += feats.at(i, j);
    mu /= double(n);
    cov = Mat::Zero(e, e);
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd d(e);
        for (int j = 0; j < e; ++j) d[j] = feats.at(i, j) - mu[j];
        cov += d * d.transpose();
    }
    cov /= double(n - 1);
    require(cov.allFinite(), "fid: non-finite covariance");
}

}  // namespace

double fid(const FeatureSet& a, const FeatureSet& b) {
    require(a.features.ndim() == 2 && b.features.ndim() == 2 &&
                a.features.dim(1) == b.features.dim(1),
            "fid: feature sets must be NxE with equal E");
    Eigen::VectorXd mu_a, mu_b;
    Mat cov_a, cov_b;
    mean_and_cov(a.features, mu_a, cov_a);
    mean_and_cov(b.features, mu_b, cov_b);

    Mat sqrt_a = sqrtm_psd(cov_a);
    Mat inner = sqrt_a * cov_b * sqrt_a;
    // Symmetrize against round-off before the second root.
    inner = 0.5 * (inner + inner.transpose());
    Mat cross = sqrtm_psd(inner);

    double dist = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    return std::max(0.0, dist);
}

FeatureExtractor::FeatureExtractor(int image_size, int num_classes, uint64_t seed)
    : image_size_(image_size) {
    Rng rng(derive_seed(seed, "feature_extractor"));
    c1_ = nn::Conv2d::create(params_, "c1", 1, 8, 3, 2, 1, rng);
    n1_ = nn::GroupNorm::create(params_, "n1", 8, 4);
    c2_ = nn::Conv2d::create(params_, "c2", 8, 16, 3, 2, 1, rng);
    n2_ = nn::GroupNorm::create(params_, "n2", 16, 4);
    c3_ = nn::Conv2d::create(params_, "c3", 16, 32, 3, 2, 1, rng);
    n3_ = nn::GroupNorm::create(params_, "n3", 32, 4);
    head_ = nn::Linear::create(params_, "head", 32, num_classes, rng);
}

Value FeatureExtractor::features(Graph& g, const Value& image) const {
    require(image.shape() == std::vector<int>{1, image_size_, image_size_},
            "feature extractor: image shape mismatch");
    auto h = g.silu(n1_(g, c1_(g, image)));
    h = g.silu(n2_(g, c2_(g, h)));
    h = g.silu(n3_(g, c3_(g, h)));
    return g.avgpool_all(h);
}

Value FeatureExtractor::logits(Graph& g, const Value& image) const {
    return head_(g, g.reshape(features(g, image), {1, feature_dim()}));
}

Tensor FeatureExtractor::extract(const Tensor& image) const {
    Graph g(false);
    Tensor img = image.ndim() == 2 ? image.reshaped({1, image.dim(0), image.dim(1)}) : image;
    return features(g, g.leaf(img)).tensor().clone();
}

double FeatureExtractor::train_classifier(const std::vector<Tensor>& images,
                                          const std::vector<int>& labels,
                                          const TrainConfig& cfg, uint64_t seed) {
    require(!images.empty() && images.size() == labels.size(),
            "feature extractor: image/label count mismatch");
    auto ps = params_.all();
    nn::AdamW opt;
    opt.lr = cfg.lr;
    double window = 0;
    int window_n = 0;
    for (int step = 0; step < cfg.steps; ++step) {
        Rng batch_rng(derive_seed(seed, "fx_batch", uint64_t(step)));
        std::vector<int64_t> idx(size_t(cfg.batch_size));
        for (auto& i : idx) i = batch_rng.randint(0, int64_t(images.size()) - 1);
        nn::AdamW::zero_grad(ps);
        double loss = nn::run_batch(cfg.batch_size, cfg.threads, ps, [&](Graph& g, int64_t i) {
            const Tensor& raw = images[size_t(idx[size_t(i)])];
            Tensor img = raw.ndim() == 2 ? raw.reshaped({1, raw.dim(0), raw.dim(1)}) : raw;
            auto lg = logits(g, g.leaf(img));
            return g.softmax_xent_rows(lg, {labels[size_t(idx[size_t(i)])]});
        });
        opt.step(ps);
        if (step >= cfg.steps - 20) {
            window += loss;
            ++window_n;
        }
    }
    return window / std::max(1, window_n);
}

FeatureSet extract_features(const std::vector<Tensor>& images, const FeatureExtractor& extractor) {
    require(!images.empty(), "extract_features: empty image list");
    FeatureSet out;
    out.extractor_id = extractor.id();
    out.features = Tensor({int(images.size()), extractor.feature_dim()});
    for (size_t i = 0; i < images.size(); ++i) {
        Tensor f = extractor.extract(images[i]);
        for (int j = 0; j < extractor.feature_dim(); ++j) out.features.at(int(i), j) = f[j];
    }
    return out;
}

}  // namespace crossgen
