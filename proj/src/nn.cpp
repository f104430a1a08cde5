#include "crossgen/nn.hpp"

#include <cmath>

namespace crossgen::nn {

Param& ParamStore::add(const std::string& name, Tensor init) {
    require(find(name) == nullptr, "param store: duplicate name " + name);
    auto p = std::make_unique<Param>();
    p->name = name;
    p->value = std::move(init);
    p->grad = Tensor::zeros(p->value.shape());
    p->m = Tensor::zeros(p->value.shape());
    p->v = Tensor::zeros(p->value.shape());
    params_.push_back(std::move(p));
    return *params_.back();
}

std::vector<Param*> ParamStore::all() {
    std::vector<Param*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

Param* ParamStore::find(const std::string& name) {
    for (auto& p : params_)
        if (p->name == name) return p.get();
    return nullptr;
}

int64_t ParamStore::total_elements() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p->value.numel();
    return n;
}

Tensor he_normal(std::vector<int> shape, int fan_in, Rng& rng) {
    return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / double(fan_in)));
}

Tensor uniform_init(std::vector<int> shape, double lo, double hi, Rng& rng) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

Linear Linear::create(ParamStore& ps, const std::string& prefix, int in, int out, Rng& rng,
                      bool zero_init) {
    Linear l;
    l.w = &ps.add(prefix + ".w",
                  zero_init ? Tensor::zeros({out, in}) : he_normal({out, in}, in, rng));
    l.b = &ps.add(prefix + ".b", Tensor::zeros({out}));
    return l;
}

Value Linear::operator()(Graph& g, const Value& x) const {
    return g.linear(x, g.param(*w), g.param(*b));
}

Conv2d Conv2d::create(ParamStore& ps, const std::string& prefix, int in_ch, int out_ch,
                      int kernel, int stride, int pad, Rng& rng, bool zero_init) {
    Conv2d c;
    int fan_in = in_ch * kernel * kernel;
    c.w = &ps.add(prefix + ".w", zero_init ? Tensor::zeros({out_ch, in_ch, kernel, kernel})
                                           : he_normal({out_ch, in_ch, kernel, kernel}, fan_in, rng));
    c.b = &ps.add(prefix + ".b", Tensor::zeros({out_ch}));
    c.stride = stride;
    c.pad = pad;
    return c;
}

Value Conv2d::operator()(Graph& g, const Value& x) const {
    return g.conv2d(x, g.param(*w), g.param(*b), stride, pad);
}

GroupNorm GroupNorm::create(ParamStore& ps, const std::string& prefix, int channels, int groups) {
    GroupNorm n;
    n.gamma = &ps.add(prefix + ".gamma", Tensor::full({channels}, 1.0));
    n.beta = &ps.add(prefix + ".beta", Tensor::zeros({channels}));
    n.groups = groups;
    return n;
}

Value GroupNorm::operator()(Graph& g, const Value& x) const {
    return g.groupnorm(x, g.param(*gamma), g.param(*beta), groups);
}

LayerNorm LayerNorm::create(ParamStore& ps, const std::string& prefix, int dim) {
    LayerNorm n;
    n.gamma = &ps.add(prefix + ".gamma", Tensor::full({dim}, 1.0));
    n.beta = &ps.add(prefix + ".beta", Tensor::zeros({dim}));
    return n;
}

Value LayerNorm::operator()(Graph& g, const Value& x) const {
    return g.layernorm_rows(x, g.param(*gamma), g.param(*beta));
}

void AdamW::step(const std::vector<Param*>& params) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, double(t));
    const double bc2 = 1.0 - std::pow(beta2, double(t));
    for (Param* p : params) {
        double* w = p->value.data();
        const double* g = p->grad.data();
        double* m = p->m.data();
        double* v = p->v.data();
        const int64_t n = p->value.numel();
        for (int64_t i = 0; i < n; ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            w[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * w[i]);
        }
    }
}

void AdamW::zero_grad(const std::vector<Param*>& params) {
    for (Param* p : params) p->grad.fill(0.0);
}

void merge_grads(const std::vector<Param*>& params, std::vector<GradSink>& sinks,
                 double scale) {
    for (Param* p : params) {
        double* g = p->grad.data();
        for (auto& sink : sinks) {
            const Tensor* s = sink.find(*p);
            if (!s) continue;
            const double* sd = s->data();
            for (int64_t i = 0; i < p->grad.numel(); ++i) g[i] += scale * sd[i];
        }
    }
}

double run_batch(int64_t n, int threads, const std::vector<Param*>& params,
                 const std::function<Value(Graph&, int64_t)>& build,
                 std::vector<double>* per_sample_losses) {
    std::vector<GradSink> sinks(static_cast<size_t>(n));
    std::vector<double> losses(static_cast<size_t>(n), 0.0);
    parallel_for(n, threads, [&](int64_t i) {
        Graph g(true, &sinks[size_t(i)]);
        Value loss = build(g, i);
        g.backward(loss);
        losses[size_t(i)] = loss.scalar();
    });
    merge_grads(params, sinks, 1.0 / double(n));
    double mean = 0;
    for (double l : losses) mean += l;
    if (per_sample_losses) *per_sample_losses = std::move(losses);
    return mean / double(n);
}

Tensor timestep_features(int t, int dim) {
    require(dim % 2 == 0, "timestep_features: dim must be even");
    Tensor out({dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        out[i] = std::sin(double(t) * freq);
        out[half + i] = std::cos(double(t) * freq);
    }
    return out;
}

}  // namespace crossgen::nn
