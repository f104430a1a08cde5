#pragma once

#include <memory>
#include <string>
#include <vector>

#include "crossgen/autodiff.hpp"
#include "crossgen/rng.hpp"
#include "crossgen/threading.hpp"

namespace crossgen::nn {

using ad::Graph;
using ad::GradSink;
using ad::Param;
using ad::Value;

// Owns the named parameters of one model. Registration order is the
// canonical order used by optimizers, checkpoints, and gradient merges.
class ParamStore {
public:
    Param& add(const std::string& name, Tensor init);
    const std::vector<std::unique_ptr<Param>>& params() const { return params_; }
    std::vector<Param*> all();
    Param* find(const std::string& name);
    int64_t total_elements() const;

private:
    std::vector<std::unique_ptr<Param>> params_;
};

// Initializers
Tensor he_normal(std::vector<int> shape, int fan_in, Rng& rng);
Tensor uniform_init(std::vector<int> shape, double lo, double hi, Rng& rng);

struct Linear {
    Param* w = nullptr;  // [out, in]
    Param* b = nullptr;  // [out]
    static Linear create(ParamStore& ps, const std::string& prefix, int in, int out, Rng& rng,
                         bool zero_init = false);
    Value operator()(Graph& g, const Value& x) const;
};

struct Conv2d {
    Param* w = nullptr;  // [OC, IC, k, k]
    Param* b = nullptr;  // [OC]
    int stride = 1;
    int pad = 1;
    static Conv2d create(ParamStore& ps, const std::string& prefix, int in_ch, int out_ch,
                         int kernel, int stride, int pad, Rng& rng, bool zero_init = false);
    Value operator()(Graph& g, const Value& x) const;
};

struct GroupNorm {
    Param* gamma = nullptr;
    Param* beta = nullptr;
    int groups = 1;
    static GroupNorm create(ParamStore& ps, const std::string& prefix, int channels, int groups);
    Value operator()(Graph& g, const Value& x) const;
};

struct LayerNorm {
    Param* gamma = nullptr;
    Param* beta = nullptr;
    static LayerNorm create(ParamStore& ps, const std::string& prefix, int dim);
    Value operator()(Graph& g, const Value& x) const;
};

struct TrainLogEntry {
    int64_t step;
    double loss;
};

// Decoupled-weight-decay Adam.
struct AdamW {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int64_t t = 0;

    void step(const std::vector<Param*>& params);
    static void zero_grad(const std::vector<Param*>& params);
};

// Merges per-sample sinks into Param::grad in sample order and scales by
// 1/batch. Bitwise independent of how samples were distributed over threads.
void merge_grads(const std::vector<Param*>& params, std::vector<GradSink>& sinks,
                 double scale);

inline void set_frozen(const std::vector<Param*>& params, bool frozen) {
    for (Param* p : params) p->frozen = frozen;
}

// Sinusoidal timestep features, dim even; injective over t in [0, T].
Tensor timestep_features(int t, int dim);

// Runs per-sample forward/backward in parallel, merges gradients into
// Param::grad (scaled by 1/n, in sample order), and returns the mean loss.
// Caller zeroes grads first and steps the optimizer after. When
// per_sample_losses is given it receives each sample's loss.
double run_batch(int64_t n, int threads, const std::vector<Param*>& params,
                 const std::function<Value(Graph&, int64_t)>& build,
                 std::vector<double>* per_sample_losses = nullptr);

}  // namespace crossgen::nn

namespace crossgen {
using nn::TrainLogEntry;
}
