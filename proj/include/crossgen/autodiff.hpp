#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "crossgen/tensor.hpp"

namespace crossgen::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily by Graph::backward
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    // Propagates this->grad into parents' grads. Null for leaves.
    std::function<void(Node&)> backprop;

    void ensure_grad() {
        if (!grad.defined()) grad = Tensor::zeros(value.shape());
    }
};

// Lightweight handle; ops below are Graph member functions building a tape.
class Value {
public:
    Value() = default;
    explicit Value(NodePtr n) : node_(std::move(n)) {}
    const Tensor& tensor() const { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    const std::vector<int>& shape() const { return node_->value.shape(); }
    NodePtr node() const { return node_; }
    bool defined() const { return node_ != nullptr; }
    double scalar() const { return node_->value[0]; }

private:
    NodePtr node_;
};

// Named trainable tensor. Models own Params; graphs bind them as leaves.
// A frozen param binds as a constant: no gradient is computed or stored.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    // AdamW state
    Tensor m, v;
    bool frozen = false;
};

// Per-sample gradient accumulator. Binding a Graph to a sink routes every
// param gradient here instead of Param::grad; the trainer then merges sinks
// in sample order, which makes batch gradients independent of thread count.
class GradSink {
public:
    Tensor& slot(Param& p);
    const Tensor* find(const Param& p) const;
    void clear() { grads_.clear(); }

private:
    std::unordered_map<const Param*, Tensor> grads_;
};

// Define-by-run tape. One Graph per forward pass; create with
// grad_enabled=false for inference (backprop closures are then skipped).
class Graph {
public:
    explicit Graph(bool grad_enabled = true, GradSink* sink = nullptr)
        : grad_enabled_(grad_enabled), sink_(sink) {}

    bool grad_enabled() const { return grad_enabled_; }

    Value leaf(Tensor t, bool requires_grad = false);
    // Leaf whose grad accumulates into p.grad, or into the bound sink.
    Value param(Param& p);

    // Elementwise (strict shapes)
    Value add(const Value& a, const Value& b);
    Value sub(const Value& a, const Value& b);
    Value mul(const Value& a, const Value& b);
    Value scale(const Value& a, double c);
    Value add_scalar(const Value& a, double c);
    Value silu(const Value& a);
    Value relu(const Value& a);
    Value tanh_(const Value& a);
    Value sigmoid_(const Value& a);
    Value exp_(const Value& a);
    Value clamp_(const Value& a, double lo, double hi);  // zero grad outside [lo,hi]

    // Linear algebra. Matrices are [rows, cols], row-major.
    Value matmul(const Value& a, const Value& b);     // [m,k]x[k,n]
    Value matmul_nt(const Value& a, const Value& b);  // [m,k]x[n,k]^T -> [m,n]
    Value transpose2d(const Value& a);
    Value linear(const Value& x, const Value& w, const Value& b);  // x[n,in], w[out,in], b[out]

    // Convolutions on CHW tensors.
    Value conv2d(const Value& x, const Value& w, const Value& b, int stride, int pad);
    Value upsample_nearest2(const Value& x);

    // Normalization
    Value groupnorm(const Value& x, const Value& gamma, const Value& beta, int groups,
                    double eps = 1e-5);
    Value layernorm_rows(const Value& x, const Value& gamma, const Value& beta,
                         double eps = 1e-5);

    // Shape plumbing
    Value reshape(const Value& a, std::vector<int> shape);
    Value concat_ch(const Value& a, const Value& b);
    Value slice_ch(const Value& a, int c0, int c1);  // channels [c0, c1) of CHW
    Value concat_rows(const std::vector<Value>& rows);  // k [1,D] rows -> [k,D]
    Value add_channel_bias(const Value& x, const Value& b);  // x[C,H,W] + b[C]
    Value add_row_bias(const Value& x, const Value& b);      // x[L,E] + b[E]

    // Reductions / heads
    Value l2_normalize_rows(const Value& x);         // rows scaled to unit norm
    Value mul_scalar_value(const Value& a, const Value& s);  // s is a [1] node
    Value softmax_rows(const Value& x);
    Value mean_rows(const Value& x);     // [L,E] -> [E]
    Value avgpool_all(const Value& x);   // [C,H,W] -> [C]
    Value mean_all(const Value& x);      // -> scalar [1]
    Value mse(const Value& a, const Value& b);  // -> scalar [1]
    // mean(0.5 (mu^2 + exp(logvar) - 1 - logvar)): KL(N(mu,var) || N(0,1))
    Value kl_normal(const Value& mu, const Value& logvar);

    // Token embedding lookup; ids outside [0,V) are rejected.
    Value embedding(const Value& table, const std::vector<int>& ids);

    // Fused classification/segmentation losses.
    Value softmax_xent_rows(const Value& logits, const std::vector<int>& labels);
    Value pixel_xent(const Value& logits, const Tensor& labels);      // logits[K,H,W], labels HxW
    Value softmax_pixels(const Value& logits);                        // channelwise softmax
    Value soft_dice(const Value& probs, const Tensor& labels, int num_classes);

    // Weighted sum of scalars: sum_i c_i * s_i.
    Value weighted_sum(const std::vector<Value>& vs, const std::vector<double>& cs);

    void backward(const Value& loss);

    size_t size() const { return tape_.size(); }

private:
    Value make(Tensor value, std::vector<NodePtr> parents,
               std::function<void(Node&)> backprop);

    bool grad_enabled_;
    GradSink* sink_;
    std::vector<NodePtr> tape_;
};

}  // namespace crossgen::ad
