#include <doctest.h>

#include "crossgen/autodiff.hpp"
#include "crossgen/nn.hpp"
#include "crossgen/threading.hpp"
#include "gradcheck.hpp"

using namespace crossgen;
using ad::Graph;
using ad::GradSink;
using ad::Value;
using nn::Param;
using nn::ParamStore;

namespace {

// Projects a tensor-valued op onto a fixed random direction so every output
// element participates in the scalar loss.
Value project(Graph& g, const Value& v, const Tensor& weights) {
    auto w = g.leaf(weights);
    return g.mean_all(g.mul(v, w));
}

Tensor rand_tensor(std::vector<int> shape, uint64_t seed) {
    Rng rng(seed);
    return Tensor::randn(std::move(shape), rng);
}

}  // namespace

TEST_CASE("gradcheck: elementwise, matmul, linear") {
    ParamStore ps;
    Rng rng(1);
    Param& a = ps.add("a", Tensor::randn({4, 5}, rng));
    Param& b = ps.add("b", Tensor::randn({4, 5}, rng));
    Param& w = ps.add("w", Tensor::randn({3, 5}, rng, 0.5));
    Param& bias = ps.add("bias", Tensor::randn({3}, rng, 0.2));
    Tensor proj = rand_tensor({4, 3}, 99);

    auto build = [&](Graph& g) {
        auto av = g.param(a), bv = g.param(b);
        auto h = g.mul(g.add(av, bv), g.silu(g.sub(av, g.scale(bv, 0.7))));
        h = g.tanh_(h);
        auto y = g.linear(h, g.param(w), g.param(bias));  // [4,3]
        auto z = g.sigmoid_(y);
        return project(g, z, proj);
    };
    auto rep = gradcheck::check_all_coords(build, ps.all());
    CHECK(rep.checked > 0);
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("gradcheck: matmul variants and transpose") {
    ParamStore ps;
    Rng rng(2);
    Param& a = ps.add("a", Tensor::randn({3, 4}, rng));
    Param& b = ps.add("b", Tensor::randn({4, 2}, rng));
    Param& c = ps.add("c", Tensor::randn({5, 2}, rng));
    Tensor proj = rand_tensor({3, 5}, 7);

    auto build = [&](Graph& g) {
        auto m = g.matmul(g.param(a), g.param(b));        // [3,2]
        auto y = g.matmul_nt(m, g.param(c));              // [3,5]
        auto t = g.transpose2d(y);                        // [5,3]
        return project(g, g.transpose2d(t), proj);
    };
    auto rep = gradcheck::check_all_coords(build, ps.all());
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: conv2d stride 1 and 2, padding") {
    for (int stride : {1, 2}) {
        CAPTURE(stride);
        ParamStore ps;
        Rng rng(3 + uint64_t(stride));
        Param& x = ps.add("x", Tensor::randn({2, 6, 6}, rng));
        Param& w = ps.add("w", Tensor::randn({3, 2, 3, 3}, rng, 0.4));
        Param& b = ps.add("b", Tensor::randn({3}, rng, 0.1));
        int out_hw = stride == 1 ? 6 : 3;
        Tensor proj = rand_tensor({3, out_hw, out_hw}, 11);

        auto build = [&](Graph& g) {
            auto y = g.conv2d(g.param(x), g.param(w), g.param(b), stride, 1);
            return project(g, y, proj);
        };
        auto rep = gradcheck::check_all_coords(build, ps.all());
        CHECK(rep.max_rel_err < 1e-6);
    }
}

TEST_CASE("gradcheck: upsample, concat, channel bias, avgpool") {
    ParamStore ps;
    Rng rng(4);
    Param& x = ps.add("x", Tensor::randn({2, 3, 3}, rng));
    Param& y = ps.add("y", Tensor::randn({1, 6, 6}, rng));
    Param& cb = ps.add("cb", Tensor::randn({3}, rng));
    Tensor proj = rand_tensor({3}, 13);

    auto build = [&](Graph& g) {
        auto up = g.upsample_nearest2(g.param(x));           // [2,6,6]
        auto cat = g.concat_ch(up, g.param(y));              // [3,6,6]
        auto biased = g.add_channel_bias(cat, g.param(cb));  // [3,6,6]
        auto pooled = g.avgpool_all(g.silu(biased));         // [3]
        return project(g, pooled, proj);
    };
    auto rep = gradcheck::check_all_coords(build, ps.all());
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: groupnorm and layernorm") {
    ParamStore ps;
    Rng rng(5);
    Param& x = ps.add("x", Tensor::randn({4, 3, 3}, rng));
    Param& gm = ps.add("gm", Tensor::randn({4}, rng, 0.3));
    Param& bt = ps.add("bt", Tensor::randn({4}, rng, 0.3));
    Param& lx = ps.add("lx", Tensor::randn({3, 6}, rng));
    Param& lg = ps.add("lg", Tensor::randn({6}, rng, 0.3));
    Param& lb = ps.add("lb", Tensor::randn({6}, rng, 0.3));
    Tensor proj_g = rand_tensor({4, 3, 3}, 17);
    Tensor proj_l = rand_tensor({3, 6}, 19);

    auto build = [&](Graph& g) {
        auto gn = g.groupnorm(g.param(x), g.param(gm), g.param(bt), 2);
        auto ln = g.layernorm_rows(g.param(lx), g.param(lg), g.param(lb));
        return g.weighted_sum({project(g, gn, proj_g), project(g, ln, proj_l)}, {1.0, 1.0});
    };
    auto rep = gradcheck::check_all_coords(build, ps.all(), 1e-6);
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("gradcheck: softmax, attention pattern, embedding") {
    ParamStore ps;
    Rng rng(6);
    Param& q = ps.add("q", Tensor::randn({4, 5}, rng));
    Param& k = ps.add("k", Tensor::randn({3, 5}, rng));
    Param& v = ps.add("v", Tensor::randn({3, 5}, rng));
    Param& table = ps.add("table", Tensor::randn({7, 5}, rng));
    std::vector<int> ids = {2, 0, 6, 2};
    Tensor proj = rand_tensor({4, 5}, 23);
    Tensor proj2 = rand_tensor({4, 5}, 29);

    auto build = [&](Graph& g) {
        auto scores = g.scale(g.matmul_nt(g.param(q), g.param(k)), 1.0 / std::sqrt(5.0));
        auto attn = g.softmax_rows(scores);
        auto out = g.matmul(attn, g.param(v));
        auto emb = g.embedding(g.param(table), ids);
        return g.weighted_sum({project(g, out, proj), project(g, emb, proj2)}, {1.0, 0.5});
    };
    auto rep = gradcheck::check_all_coords(build, ps.all());
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("softmax rows sum to one") {
    Graph g(false);
    Rng rng(8);
    auto y = g.softmax_rows(g.leaf(Tensor::randn({5, 9}, rng)));
    for (int r = 0; r < 5; ++r) {
        double s = 0;
        for (int c = 0; c < 9; ++c) {
            s += y.tensor().at(r, c);
            CHECK(y.tensor().at(r, c) >= 0.0);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("gradcheck: classification and segmentation losses") {
    ParamStore ps;
    Rng rng(7);
    Param& logits = ps.add("logits", Tensor::randn({4, 3}, rng));
    Param& pix = ps.add("pix", Tensor::randn({3, 4, 4}, rng));
    std::vector<int> labels = {0, 2, 1, 2};
    Tensor grid({4, 4});
    Rng grng(9);
    for (int64_t i = 0; i < grid.numel(); ++i) grid[i] = double(grng.randint(0, 2));

    auto build = [&](Graph& g) {
        auto ce = g.softmax_xent_rows(g.param(logits), labels);
        auto pce = g.pixel_xent(g.param(pix), grid);
        auto probs = g.softmax_pixels(g.param(pix));
        auto dice = g.soft_dice(probs, grid, 3);
        return g.weighted_sum({ce, pce, dice}, {1.0, 1.0, 1.0});
    };
    auto rep = gradcheck::check_all_coords(build, ps.all());
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: mse and reductions") {
    ParamStore ps;
    Rng rng(10);
    Param& a = ps.add("a", Tensor::randn({3, 4}, rng));
    Param& b = ps.add("b", Tensor::randn({3, 4}, rng));
    auto build = [&](Graph& g) {
        auto m = g.mse(g.param(a), g.param(b));
        auto mm = g.mean_all(g.relu(g.param(a)));
        auto mr = g.mean_rows(g.param(b));
        auto mrs = g.mean_all(mr);
        return g.weighted_sum({m, mm, mrs}, {1.0, 0.3, 0.7});
    };
    auto rep = gradcheck::check_all_coords(build, ps.all());
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("directional gradcheck on a composite network") {
    ParamStore ps;
    Rng rng(11);
    nn::Conv2d c1 = nn::Conv2d::create(ps, "c1", 1, 4, 3, 2, 1, rng);
    nn::GroupNorm n1 = nn::GroupNorm::create(ps, "n1", 4, 2);
    nn::Conv2d c2 = nn::Conv2d::create(ps, "c2", 4, 2, 3, 1, 1, rng);
    nn::Linear fc = nn::Linear::create(ps, "fc", 2, 1, rng);
    Tensor img = rand_tensor({1, 8, 8}, 31);

    auto build = [&](Graph& g) {
        auto h = c1(g, g.leaf(img));
        h = g.silu(n1(g, h));
        h = c2(g, h);
        auto pooled = g.avgpool_all(h);
        auto y = fc(g, g.reshape(pooled, {1, 2}));
        return g.mean_all(y);
    };
    auto rep = gradcheck::check_directions(build, ps.all(), 20, 123);
    CHECK(rep.checked == 20);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("grad sinks merge independent of thread count") {
    ParamStore ps;
    Rng rng(12);
    nn::Linear fc = nn::Linear::create(ps, "fc", 6, 3, rng);
    std::vector<Tensor> batch;
    for (int i = 0; i < 9; ++i) batch.push_back(rand_tensor({2, 6}, 100 + uint64_t(i)));

    auto run = [&](int threads) {
        std::vector<GradSink> sinks(batch.size());
        parallel_for(int64_t(batch.size()), threads, [&](int64_t i) {
            Graph g(true, &sinks[size_t(i)]);
            auto y = fc(g, g.leaf(batch[size_t(i)]));
            auto loss = g.mean_all(g.mul(y, y));
            g.backward(loss);
        });
        nn::AdamW::zero_grad(ps.all());
        nn::merge_grads(ps.all(), sinks, 1.0 / double(batch.size()));
        return std::make_pair(fc.w->grad.clone(), fc.b->grad.clone());
    };

    auto [w1, b1] = run(1);
    auto [w4, b4] = run(4);
    CHECK(max_abs_diff(w1, w4) == 0.0);
    CHECK(max_abs_diff(b1, b4) == 0.0);
}

TEST_CASE("adamw step is deterministic and decays weights") {
    ParamStore ps;
    Rng rng(13);
    Param& w = ps.add("w", Tensor::full({4}, 1.0));
    nn::AdamW opt;
    opt.lr = 0.1;
    opt.weight_decay = 0.5;
    w.grad.fill(0.0);
    opt.step(ps.all());
    // zero gradient: only the decoupled decay moves the weight
    for (int i = 0; i < 4; ++i) CHECK(w.value[i] == doctest::Approx(1.0 - 0.1 * 0.5));
}

TEST_CASE("timestep features are injective over the schedule range") {
    const int dim = 32;
    std::vector<Tensor> seen;
    for (int t = 1; t <= 1000; ++t) seen.push_back(nn::timestep_features(t, dim));
    // spot pairs plus adjacent pairs; full pairwise is quadratic
    for (int t = 1; t < 1000; ++t) CHECK(max_abs_diff(seen[size_t(t - 1)], seen[size_t(t)]) > 1e-6);
    CHECK(max_abs_diff(seen[0], seen[999]) > 1e-3);
}

TEST_CASE("inference graph skips gradient bookkeeping") {
    ParamStore ps;
    Rng rng(14);
    nn::Linear fc = nn::Linear::create(ps, "fc", 3, 3, rng);
    Graph g(false);
    auto y = fc(g, g.leaf(rand_tensor({2, 3}, 55)));
    CHECK_FALSE(y.node()->requires_grad);
    CHECK_THROWS(g.backward(g.mean_all(y)));
}
