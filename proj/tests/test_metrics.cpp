#include <doctest.h>

#include <cmath>

#include "crossgen/metrics.hpp"

using namespace crossgen;

TEST_CASE("mse / psnr / ssim closed forms") {
    Rng rng(3);
    Tensor a = Tensor::randn({16, 16}, rng);
    Tensor b = a.clone();
    CHECK(mse(a, b) == 0.0);
    CHECK(psnr(a, b, 2.0) == 100.0);  // identical-image cap
    CHECK(ssim(a, b) == doctest::Approx(1.0).epsilon(1e-9));

    // mse 0.01 on unit range -> 20 dB
    Tensor c = a.clone();
    for (int64_t i = 0; i < c.numel(); ++i) c[i] += 0.1;
    CHECK(mse(a, c) == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(psnr(a, c, 1.0) == doctest::Approx(20.0).epsilon(1e-9));

    // consistency identity whenever mse > 0
    for (double range : {1.0, 2.0}) {
        double m = mse(a, c);
        CHECK(psnr(a, c, range) ==
              doctest::Approx(10.0 * std::log10(range * range / m)).epsilon(1e-9));
    }
    CHECK_THROWS_AS(mse(a, Tensor::zeros({4, 4})), std::invalid_argument);
}

TEST_CASE("fid matches the 1-D closed form") {
    // a ~ N(0,1), b ~ N(1,1): analytic Frechet distance
    // (mu1-mu2)^2 + s1 + s2 - 2 sqrt(s1 s2) = 1
    Rng rng(11);
    const int n = 10000;
    FeatureSet a, b;
    a.features = Tensor({n, 1});
    b.features = Tensor({n, 1});
    for (int i = 0; i < n; ++i) {
        a.features.at(i, 0) = rng.normal();
        b.features.at(i, 0) = rng.normal() + 1.0;
    }
    double d = fid(a, b);
    CHECK(std::fabs(d - 1.0) < 0.1);

    // identity and symmetry
    CHECK(fid(a, a) == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(fid(a, b) == doctest::Approx(fid(b, a)).epsilon(1e-6));
    CHECK(fid(a, b) >= 0.0);
}

TEST_CASE("fid closed form against analytic values for scaled gaussians") {
    Rng rng(13);
    const int n = 10000;
    FeatureSet a, b;
    a.features = Tensor({n, 1});
    b.features = Tensor({n, 1});
    double mu1 = 0.5, s1 = 1.5, mu2 = -0.3, s2 = 0.7;  // stddevs
    for (int i = 0; i < n; ++i) {
        a.features.at(i, 0) = mu1 + s1 * rng.normal();
        b.features.at(i, 0) = mu2 + s2 * rng.normal();
    }
    double analytic =
        (mu1 - mu2) * (mu1 - mu2) + s1 * s1 + s2 * s2 - 2.0 * std::sqrt(s1 * s1 * s2 * s2);
    CHECK(std::fabs(fid(a, b) - analytic) < 0.1);
}

TEST_CASE("fid is not invariant to linear feature maps") {
    Rng rng(17);
    const int n = 2000, e = 3;
    FeatureSet a, b;
    a.features = Tensor({n, e});
    b.features = Tensor({n, e});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < e; ++j) {
            a.features.at(i, j) = rng.normal();
            b.features.at(i, j) = rng.normal() * 1.4 + 0.5;
        }
    double base = fid(a, b);
    // scale both sets by the same invertible diagonal map
    FeatureSet a2 = a, b2 = b;
    a2.features = a.features.clone();
    b2.features = b.features.clone();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < e; ++j) {
            a2.features.at(i, j) *= (j + 2.0);
            b2.features.at(i, j) *= (j + 2.0);
        }
    double scaled = fid(a2, b2);
    CHECK(std::fabs(scaled - base) > 0.05 * base);
}

TEST_CASE("fid input validation") {
    FeatureSet a, b;
    a.features = Tensor({1, 4});
    b.features = Tensor({5, 4});
    CHECK_THROWS_AS(fid(a, b), std::invalid_argument);  // N >= 2 per set
    a.features = Tensor({5, 3});
    CHECK_THROWS_AS(fid(a, b), std::invalid_argument);  // E mismatch
}

TEST_CASE("feature extractor determinism and shape contract") {
    FeatureExtractor fx(32, 2, 5);
    Rng rng(7);
    std::vector<Tensor> imgs;
    for (int i = 0; i < 6; ++i) imgs.push_back(Tensor::randn({32, 32}, rng, 0.3));
    FeatureSet f1 = extract_features(imgs, fx);
    FeatureSet f2 = extract_features(imgs, fx);
    CHECK(f1.features.shape() == std::vector<int>{6, fx.feature_dim()});
    CHECK(max_abs_diff(f1.features, f2.features) == 0.0);
    CHECK(f1.extractor_id == fx.id());
}

TEST_CASE("trained extractor separates modalities more than same-set halves") {
    // two toy 'modalities': bright blobs vs dark blobs on opposite background
    Rng rng(23);
    auto make = [&](int cls) {
        Tensor img = Tensor::full({32, 32}, cls == 0 ? -0.5 : 0.5);
        int cx = int(rng.randint(10, 21)), cy = int(rng.randint(10, 21));
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x)
                if ((x - cx) * (x - cx) + (y - cy) * (y - cy) < 36)
                    img.at(y, x) = cls == 0 ? 0.6 : -0.6;
        for (int64_t i = 0; i < img.numel(); ++i) img[i] += 0.05 * rng.normal();
        return img;
    };
    std::vector<Tensor> images;
    std::vector<int> labels;
    for (int i = 0; i < 60; ++i) {
        images.push_back(make(i % 2));
        labels.push_back(i % 2);
    }
    FeatureExtractor fx(32, 2, 9);
    FeatureExtractor::TrainConfig tc;
    tc.steps = 120;
    tc.batch_size = 8;
    fx.train_classifier(images, labels, tc, 31);

    std::vector<Tensor> p1, p1_half_a, p1_half_b, p2;
    for (int i = 0; i < 60; ++i) {
        if (labels[size_t(i)] == 0) {
            p1.push_back(images[size_t(i)]);
            (p1_half_a.size() <= p1_half_b.size() ? p1_half_a : p1_half_b)
                .push_back(images[size_t(i)]);
        } else {
            p2.push_back(images[size_t(i)]);
        }
    }
    double cross = fid(extract_features(p1, fx), extract_features(p2, fx));
    double within = fid(extract_features(p1_half_a, fx), extract_features(p1_half_b, fx));
    CHECK(cross > within);
}
