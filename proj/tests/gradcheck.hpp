#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "crossgen/autodiff.hpp"
#include "crossgen/nn.hpp"
#include "crossgen/rng.hpp"

// Central finite-difference oracle used against analytic gradients. The
// oracle only re-evaluates the loss closure; it never touches the backward
// implementations it is checking.
namespace gradcheck {

using crossgen::Rng;
using crossgen::Tensor;
using crossgen::ad::Graph;
using crossgen::nn::Param;

struct Report {
    double max_rel_err = 0.0;
    int checked = 0;
};

// The closure builds the graph and returns the loss Value.
using LossBuilder = std::function<crossgen::ad::Value(Graph&)>;

// Coordinate-wise check over every element of every param (use on tiny
// problems only).

inline Report check_all_coords(const LossBuilder& build, const std::vector<Param*>& params,
                               double eps = 1e-5) {
    crossgen::nn::AdamW::zero_grad(params);
    {
        Graph g(true);
        auto loss = build(g);
        g.backward(loss);
    }
    Report rep;
    for (Param* p : params) {
        for (int64_t i = 0; i < p->value.numel(); ++i) {
            double saved = p->value[i];
            p->value[i] = saved + eps;
            double lp;
            {
                Graph g(false);
                lp = build(g).scalar();
            }
            p->value[i] = saved - eps;
            double lm;
            {
                Graph g(false);
                lm = build(g).scalar();
            }
            p->value[i] = saved;
            double numeric = (lp - lm) / (2.0 * eps);
            double analytic = p->grad[i];
            double denom = std::max({1e-6, std::fabs(numeric), std::fabs(analytic)});
            rep.max_rel_err = std::max(rep.max_rel_err, std::fabs(numeric - analytic) / denom);
            ++rep.checked;
        }
    }
    return rep;
}

// Directional-derivative check: compares g.d against (L(th+eps d)-L(th-eps d))/2eps
// for `dirs` random unit directions over the full parameter vector.
inline Report check_directions(const LossBuilder& build, const std::vector<Param*>& params,
                               int dirs, uint64_t seed, double eps = 1e-5) {
    crossgen::nn::AdamW::zero_grad(params);
    {
        Graph g(true);
        auto loss = build(g);
        g.backward(loss);
    }
    int64_t total = 0;
    for (Param* p : params) total += p->value.numel();

    Report rep;
    Rng rng(seed);
    for (int d = 0; d < dirs; ++d) {
        std::vector<double> dir(static_cast<size_t>(total));
        double norm = 0;
        for (auto& x : dir) {
            x = rng.normal();
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (auto& x : dir) x /= norm;

        double analytic = 0;
        {
            int64_t off = 0;
            for (Param* p : params)
                for (int64_t i = 0; i < p->value.numel(); ++i) analytic += p->grad[i] * dir[size_t(off++)];
        }
        auto shift = [&](double a) {
            int64_t off = 0;
            for (Param* p : params)
                for (int64_t i = 0; i < p->value.numel(); ++i) p->value[i] += a * dir[size_t(off++)];
        };
        shift(eps);
        double lp;
        {
            Graph g(false);
            lp = build(g).scalar();
        }
        shift(-2.0 * eps);
        double lm;
        {
            Graph g(false);
            lm = build(g).scalar();
        }
        shift(eps);
        double numeric = (lp - lm) / (2.0 * eps);
        double denom = std::max({1e-6, std::fabs(numeric), std::fabs(analytic)});
        rep.max_rel_err = std::max(rep.max_rel_err, std::fabs(numeric - analytic) / denom);
        ++rep.checked;
    }
    return rep;
}

}  // namespace gradcheck
