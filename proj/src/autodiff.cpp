#include "crossgen/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

namespace crossgen::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

namespace {

CMapMat as_mat(const Tensor& t, int rows, int cols) {
    return CMapMat(t.data(), rows, cols);
}

MapMat as_mat(Tensor& t, int rows, int cols) {
    return MapMat(t.data(), rows, cols);
}

// dst += src, viewing both as matrices.
void acc_mat(Tensor& dst, const RowMat& src) {
    MapMat(dst.data(), src.rows(), src.cols()) += src;
}

// im2col for 3x3/arbitrary kernels: x[C,H,W] -> cols[C*kh*kw, oh*ow].
void im2col(const Tensor& x, int kh, int kw, int stride, int pad, int oh, int ow,
            Tensor& cols) {
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const double* xd = x.data();
    double* cd = cols.data();
    const int64_t plane = int64_t(H) * W;
    const int64_t out_plane = int64_t(oh) * ow;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                double* row = cd + ((int64_t(c) * kh + ky) * kw + kx) * out_plane;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        std::fill(row + int64_t(oy) * ow, row + int64_t(oy + 1) * ow, 0.0);
                        continue;
                    }
                    const double* src = xd + c * plane + int64_t(iy) * W;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride - pad + kx;
                        row[int64_t(oy) * ow + ox] = (ix >= 0 && ix < W) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

// col2im: scatter-add of cols[C*kh*kw, oh*ow] back into dx[C,H,W].
void col2im_acc(const Tensor& cols, int kh, int kw, int stride, int pad, int oh, int ow,
                Tensor& dx) {
    const int C = dx.dim(0), H = dx.dim(1), W = dx.dim(2);
    double* xd = dx.data();
    const double* cd = cols.data();
    const int64_t plane = int64_t(H) * W;
    const int64_t out_plane = int64_t(oh) * ow;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const double* row = cd + ((int64_t(c) * kh + ky) * kw + kx) * out_plane;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    double* dst = xd + c * plane + int64_t(iy) * W;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) dst[ix] += row[int64_t(oy) * ow + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Value Graph::make(Tensor value, std::vector<NodePtr> parents,
                  std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (grad_enabled_) {
        bool needs = false;
        for (const auto& p : parents) needs = needs || p->requires_grad;
        if (needs) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->backprop = std::move(backprop);
        }
    }
    tape_.push_back(n);
    return Value(n);
}

Value Graph::leaf(Tensor t, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = requires_grad && grad_enabled_;
    tape_.push_back(n);
    return Value(n);
}

Tensor& GradSink::slot(Param& p) {
    auto it = grads_.find(&p);
    if (it == grads_.end()) it = grads_.emplace(&p, Tensor::zeros(p.value.shape())).first;
    return it->second;
}

const Tensor* GradSink::find(const Param& p) const {
    auto it = grads_.find(&p);
    return it == grads_.end() ? nullptr : &it->second;
}

Value Graph::param(Param& p) {
    auto n = std::make_shared<Node>();
    n->value = p.value;  // shared storage
    n->requires_grad = grad_enabled_ && !p.frozen;
    if (n->requires_grad) n->grad = sink_ ? sink_->slot(p) : p.grad;
    tape_.push_back(n);
    return Value(n);
}

void Graph::backward(const Value& loss) {
    require(grad_enabled_, "backward: graph built with grad disabled");
    require(loss.tensor().numel() == 1, "backward: loss must be scalar");
    Node* root = loss.node().get();
    root->ensure_grad();
    root->grad.fill(1.0);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
        Node& n = **it;
        if (!n.requires_grad || !n.grad.defined() || !n.backprop) continue;
        n.backprop(n);
    }
}

// ---- elementwise ----

Value Graph::add(const Value& a, const Value& b) {
    require(a.tensor().same_shape(b.tensor()), "add: shape mismatch");
    Tensor out = a.tensor().clone();
    axpy(out, 1.0, b.tensor());
    return make(std::move(out), {a.node(), b.node()}, [](Node& n) {
        for (int i = 0; i < 2; ++i)
            if (n.parents[i]->requires_grad) {
                n.parents[i]->ensure_grad();
                axpy(n.parents[i]->grad, 1.0, n.grad);
            }
    });
}

Value Graph::sub(const Value& a, const Value& b) {
    require(a.tensor().same_shape(b.tensor()), "sub: shape mismatch");
    Tensor out = a.tensor().clone();
    axpy(out, -1.0, b.tensor());
    return make(std::move(out), {a.node(), b.node()}, [](Node& n) {
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            axpy(n.parents[0]->grad, 1.0, n.grad);
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            axpy(n.parents[1]->grad, -1.0, n.grad);
        }
    });
}

Value Graph::mul(const Value& a, const Value& b) {
    require(a.tensor().same_shape(b.tensor()), "mul: shape mismatch");
    Tensor out(a.shape());
    const Tensor &av = a.tensor(), &bv = b.tensor();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
    return make(std::move(out), {a.node(), b.node()}, [av, bv](Node& n) {
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            Tensor& g = n.parents[0]->grad;
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * bv[i];
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            Tensor& g = n.parents[1]->grad;
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * av[i];
        }
    });
}

Value Graph::scale(const Value& a, double c) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = c * a.tensor()[i];
    return make(std::move(out), {a.node()}, [c](Node& n) {
        n.parents[0]->ensure_grad();
        axpy(n.parents[0]->grad, c, n.grad);
    });
}

Value Graph::add_scalar(const Value& a, double c) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.tensor()[i] + c;
    return make(std::move(out), {a.node()}, [](Node& n) {
        n.parents[0]->ensure_grad();
        axpy(n.parents[0]->grad, 1.0, n.grad);
    });
}

Value Graph::silu(const Value& a) {
    Tensor out(a.shape());
    const Tensor& x = a.tensor();
    for (int64_t i = 0; i < out.numel(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-x[i]));
        out[i] = x[i] * s;
    }
    return make(std::move(out), {a.node()}, [x](Node& n) {
        n.parents[0]->ensure_grad();
        Tensor& g = n.parents[0]->grad;
        for (int64_t i = 0; i < g.numel(); ++i) {
            double s = 1.0 / (1.0 + std::exp(-x[i]));
            g[i] += n.grad[i] * s * (1.0 + x[i] * (1.0 - s));
        }
    });
}

Value Graph::relu(const Value& a) {
    Tensor out(a.shape());
    const Tensor& x = a.tensor();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = x[i] > 0 ? x[i] : 0.0;
    return make(std::move(out), {a.node()}, [x](Node& n) {
        n.parents[0]->ensure_grad();
        Tensor& g = n.parents[0]->grad;
        for (int64_t i = 0; i < g.numel(); ++i)
            if (x[i] > 0) g[i] += n.grad[i];
    });
}

Value Graph::tanh_(const Value& a) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(a.tensor()[i]);
    Tensor y = out;
    return make(std::move(out), {a.node()}, [y](Node& n) {
        n.parents[0]->ensure_grad();
        Tensor& g = n.parents[0]->grad;
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * (1.0 - y[i] * y[i]);
    });
}

Value Graph::sigmoid_(const Value& a) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = 1.0 / (1.0 + std::exp(-a.tensor()[i]));
    Tensor y = out;
    return make(std::move(out), {a.node()}, [y](Node& n) {
        n.parents[0]->ensure_grad();
        Tensor& g = n.parents[0]->grad;
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * y[i] * (1.0 - y[i]);
    });
}

Value Graph::exp_(const Value& a) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(a.tensor()[i]);
    Tensor y = out;
    return make(std::move(out), {a.node()}, [y](Node& n) {
        n.parents[0]->ensure_grad();
        Tensor& g = n.parents[0]->grad;
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * y[i];
    });
}

Value Graph::clamp_(const Value& a, double lo, double hi) {
    Tensor out(a.shape());
    const Tensor& x = a.tensor();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::clamp(x[i], lo, hi);
    return make(std::move(out), {a.node()}, [x, lo, hi](Node& n) {
        n.parents[0]->ensure_grad();
        Tensor& g = n.parents[0]->grad;
        for (int64_t i = 0; i < g.numel(); ++i)
            if (x[i] > lo && x[i] < hi) g[i] += n.grad[i];
    });
}

// ---- linear algebra ----

Value Graph::matmul(const Value& a, const Value& b) {
    require(a.shape().size() == 2 && b.shape().size() == 2 && a.shape()[1] == b.shape()[0],
            "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int m = a.shape()[0], k = a.shape()[1], n2 = b.shape()[1];
    Tensor out({m, n2});
    as_mat(out, m, n2) = as_mat(a.tensor(), m, k) * as_mat(b.tensor(), k, n2);
    Tensor av = a.tensor(), bv = b.tensor();
    return make(std::move(out), {a.node(), b.node()}, [av, bv, m, k, n2](Node& n) {
        CMapMat dy(n.grad.data(), m, n2);
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            acc_mat(n.parents[0]->grad, dy * as_mat(bv, k, n2).transpose());
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            acc_mat(n.parents[1]->grad, as_mat(av, m, k).transpose() * dy);
        }
    });
}

Value Graph::matmul_nt(const Value& a, const Value& b) {
    require(a.shape().size() == 2 && b.shape().size() == 2 && a.shape()[1] == b.shape()[1],
            "matmul_nt: incompatible shapes");
    int m = a.shape()[0], k = a.shape()[1], n2 = b.shape()[0];
    Tensor out({m, n2});
    as_mat(out, m, n2) = as_mat(a.tensor(), m, k) * as_mat(b.tensor(), n2, k).transpose();
    Tensor av = a.tensor(), bv = b.tensor();
    return make(std::move(out), {a.node(), b.node()}, [av, bv, m, k, n2](Node& n) {
        CMapMat dy(n.grad.data(), m, n2);
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            acc_mat(n.parents[0]->grad, dy * as_mat(bv, n2, k));
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            acc_mat(n.parents[1]->grad, dy.transpose() * as_mat(av, m, k));
        }
    });
}

Value Graph::transpose2d(const Value& a) {
    require(a.shape().size() == 2, "transpose2d: expected matrix");
    int r = a.shape()[0], c = a.shape()[1];
    Tensor out({c, r});
    as_mat(out, c, r) = as_mat(a.tensor(), r, c).transpose();
    return make(std::move(out), {a.node()}, [r, c](Node& n) {
        n.parents[0]->ensure_grad();
        acc_mat(n.parents[0]->grad, CMapMat(n.grad.data(), c, r).transpose());
    });
}

Value Graph::linear(const Value& x, const Value& w, const Value& b) {
    require(x.shape().size() == 2 && w.shape().size() == 2 && x.shape()[1] == w.shape()[1],
            "linear: incompatible shapes");
    int n2 = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[0];
    require(b.shape() == std::vector<int>{out_dim}, "linear: bias shape mismatch");
    Tensor out({n2, out_dim});
    as_mat(out, n2, out_dim) =
        as_mat(x.tensor(), n2, in) * as_mat(w.tensor(), out_dim, in).transpose();
    for (int i = 0; i < n2; ++i)
        for (int j = 0; j < out_dim; ++j) out.at(i, j) += b.tensor()[j];
    Tensor xv = x.tensor(), wv = w.tensor();
    return make(std::move(out), {x.node(), w.node(), b.node()},
                [xv, wv, n2, in, out_dim](Node& n) {
                    CMapMat dy(n.grad.data(), n2, out_dim);
                    if (n.parents[0]->requires_grad) {
                        n.parents[0]->ensure_grad();
                        acc_mat(n.parents[0]->grad, dy * as_mat(wv, out_dim, in));
                    }
                    if (n.parents[1]->requires_grad) {
                        n.parents[1]->ensure_grad();
                        acc_mat(n.parents[1]->grad, dy.transpose() * as_mat(xv, n2, in));
                    }
                    if (n.parents[2]->requires_grad) {
                        n.parents[2]->ensure_grad();
                        Tensor& db = n.parents[2]->grad;
                        for (int i = 0; i < n2; ++i)
                            for (int j = 0; j < out_dim; ++j) db[j] += n.grad.at(i, j);
                    }
                });
}

// ---- convolution ----

Value Graph::conv2d(const Value& x, const Value& w, const Value& b, int stride, int pad) {
    require(x.shape().size() == 3 && w.shape().size() == 4, "conv2d: expected CHW input, OIHW kernel");
    const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    const int OC = w.shape()[0], IC = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
    require(IC == C, "conv2d: channel mismatch");
    require(b.shape() == std::vector<int>{OC}, "conv2d: bias shape mismatch");
    const int oh = (H + 2 * pad - kh) / stride + 1;
    const int ow = (W + 2 * pad - kw) / stride + 1;
    require(oh > 0 && ow > 0, "conv2d: output would be empty");

    Tensor cols({C * kh * kw, oh * ow});
    im2col(x.tensor(), kh, kw, stride, pad, oh, ow, cols);
    Tensor out({OC, oh, ow});
    as_mat(out, OC, oh * ow) =
        as_mat(w.tensor(), OC, C * kh * kw) * as_mat(cols, C * kh * kw, oh * ow);
    for (int oc = 0; oc < OC; ++oc) {
        double bias = b.tensor()[oc];
        double* plane = out.data() + int64_t(oc) * oh * ow;
        for (int64_t i = 0; i < int64_t(oh) * ow; ++i) plane[i] += bias;
    }

    Tensor xv = x.tensor(), wv = w.tensor();
    return make(std::move(out), {x.node(), w.node(), b.node()},
                [xv, wv, stride, pad, C, H, W, OC, kh, kw, oh, ow](Node& n) {
                    CMapMat dy(n.grad.data(), OC, oh * ow);
                    const int ck = C * kh * kw;
                    // cols are recomputed rather than kept alive in the tape;
                    // memory stays bounded at large spatial sizes.
                    if (n.parents[1]->requires_grad) {
                        Tensor cols({ck, oh * ow});
                        im2col(xv, kh, kw, stride, pad, oh, ow, cols);
                        n.parents[1]->ensure_grad();
                        acc_mat(n.parents[1]->grad, dy * as_mat(cols, ck, oh * ow).transpose());
                    }
                    if (n.parents[2]->requires_grad) {
                        n.parents[2]->ensure_grad();
                        Tensor& db = n.parents[2]->grad;
                        for (int oc = 0; oc < OC; ++oc) db[oc] += dy.row(oc).sum();
                    }
                    if (n.parents[0]->requires_grad) {
                        Tensor dcols({ck, oh * ow});
                        as_mat(dcols, ck, oh * ow) = as_mat(wv, OC, ck).transpose() * dy;
                        n.parents[0]->ensure_grad();
                        col2im_acc(dcols, kh, kw, stride, pad, oh, ow, n.parents[0]->grad);
                    }
                });
}

Value Graph::upsample_nearest2(const Value& x) {
    require(x.shape().size() == 3, "upsample_nearest2: expected CHW");
    const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    Tensor out({C, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                double v = x.tensor().at(c, i, j);
                out.at(c, 2 * i, 2 * j) = v;
                out.at(c, 2 * i, 2 * j + 1) = v;
                out.at(c, 2 * i + 1, 2 * j) = v;
                out.at(c, 2 * i + 1, 2 * j + 1) = v;
            }
    return make(std::move(out), {x.node()}, [C, H, W](Node& n) {
        n.parents[0]->ensure_grad();
        Tensor& dx = n.parents[0]->grad;
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j)
                    dx.at(c, i, j) += n.grad.at(c, 2 * i, 2 * j) + n.grad.at(c, 2 * i, 2 * j + 1) +
                                      n.grad.at(c, 2 * i + 1, 2 * j) +
                                      n.grad.at(c, 2 * i + 1, 2 * j + 1);
    });
}

// ---- normalization ----

Value Graph::groupnorm(const Value& x, const Value& gamma, const Value& beta, int groups,
                       double eps) {
    require(x.shape().size() == 3, "groupnorm: expected CHW");
    const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    require(C % groups == 0, "groupnorm: channels not divisible by groups");
    const int cg = C / groups;
    const int64_t m = int64_t(cg) * H * W;
    const int64_t plane = int64_t(H) * W;

    Tensor xhat({C, H, W});
    std::vector<double> inv_std(static_cast<size_t>(groups));
    const Tensor& xv = x.tensor();
    for (int g = 0; g < groups; ++g) {
        const double* xs = xv.data() + int64_t(g) * cg * plane;
        double mean = 0;
        for (int64_t i = 0; i < m; ++i) mean += xs[i];
        mean /= double(m);
        double var = 0;
        for (int64_t i = 0; i < m; ++i) {
            double d = xs[i] - mean;
            var += d * d;
        }
        var /= double(m);
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[size_t(g)] = is;
        double* xh = xhat.data() + int64_t(g) * cg * plane;
        for (int64_t i = 0; i < m; ++i) xh[i] = (xs[i] - mean) * is;
    }
    Tensor out({C, H, W});
    for (int c = 0; c < C; ++c) {
        double gm = gamma.tensor()[c], bt = beta.tensor()[c];
        const double* xh = xhat.data() + int64_t(c) * plane;
        double* o = out.data() + int64_t(c) * plane;
        for (int64_t i = 0; i < plane; ++i) o[i] = gm * xh[i] + bt;
    }

    Tensor gv = gamma.tensor();
    return make(std::move(out), {x.node(), gamma.node(), beta.node()},
                [xhat, inv_std, gv, groups, cg, plane, m, C](Node& n) {
                    if (n.parents[1]->requires_grad) {
                        n.parents[1]->ensure_grad();
                        Tensor& dg = n.parents[1]->grad;
                        for (int c = 0; c < C; ++c) {
                            const double* xh = xhat.data() + int64_t(c) * plane;
                            const double* dy = n.grad.data() + int64_t(c) * plane;
                            double s = 0;
                            for (int64_t i = 0; i < plane; ++i) s += dy[i] * xh[i];
                            dg[c] += s;
                        }
                    }
                    if (n.parents[2]->requires_grad) {
                        n.parents[2]->ensure_grad();
                        Tensor& db = n.parents[2]->grad;
                        for (int c = 0; c < C; ++c) {
                            const double* dy = n.grad.data() + int64_t(c) * plane;
                            double s = 0;
                            for (int64_t i = 0; i < plane; ++i) s += dy[i];
                            db[c] += s;
                        }
                    }
                    if (n.parents[0]->requires_grad) {
                        n.parents[0]->ensure_grad();
                        Tensor& dx = n.parents[0]->grad;
                        for (int g = 0; g < groups; ++g) {
                            const double* xh = xhat.data() + int64_t(g) * cg * plane;
                            double* dxg = dx.data() + int64_t(g) * cg * plane;
                            // t = dy * gamma (per channel within the group)
                            double t_mean = 0, tx_mean = 0;
                            std::vector<double> t(static_cast<size_t>(m));
                            for (int cc = 0; cc < cg; ++cc) {
                                int c = g * cg + cc;
                                double gm = gv[c];
                                const double* dy = n.grad.data() + int64_t(c) * plane;
                                for (int64_t i = 0; i < plane; ++i) {
                                    double ti = dy[i] * gm;
                                    t[size_t(cc * plane + i)] = ti;
                                    t_mean += ti;
                                    tx_mean += ti * xh[cc * plane + i];
                                }
                            }
                            t_mean /= double(m);
                            tx_mean /= double(m);
                            double is = inv_std[size_t(g)];
                            for (int64_t i = 0; i < m; ++i)
                                dxg[i] += is * (t[size_t(i)] - t_mean - xh[i] * tx_mean);
                        }
                    }
                });
}

Value Graph::layernorm_rows(const Value& x, const Value& gamma, const Value& beta, double eps) {
    require(x.shape().size() == 2, "layernorm_rows: expected matrix");
    const int L = x.shape()[0], E = x.shape()[1];
    Tensor xhat({L, E});
    std::vector<double> inv_std(static_cast<size_t>(L));
    for (int l = 0; l < L; ++l) {
        const double* xs = x.tensor().data() + int64_t(l) * E;
        double mean = 0;
        for (int e = 0; e < E; ++e) mean += xs[e];
        mean /= E;
        double var = 0;
        for (int e = 0; e < E; ++e) var += (xs[e] - mean) * (xs[e] - mean);
        var /= E;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[size_t(l)] = is;
        for (int e = 0; e < E; ++e) xhat.at(l, e) = (xs[e] - mean) * is;
    }
    Tensor out({L, E});
    for (int l = 0; l < L; ++l)
        for (int e = 0; e < E; ++e)
            out.at(l, e) = gamma.tensor()[e] * xhat.at(l, e) + beta.tensor()[e];

    Tensor gv = gamma.tensor();
    return make(std::move(out), {x.node(), gamma.node(), beta.node()},
                [xhat, inv_std, gv, L, E](Node& n) {
                    if (n.parents[1]->requires_grad) {
                        n.parents[1]->ensure_grad();
                        Tensor& dg = n.parents[1]->grad;
                        for (int l = 0; l < L; ++l)
                            for (int e = 0; e < E; ++e) dg[e] += n.grad.at(l, e) * xhat.at(l, e);
                    }
                    if (n.parents[2]->requires_grad) {
                        n.parents[2]->ensure_grad();
                        Tensor& db = n.parents[2]->grad;
                        for (int l = 0; l < L; ++l)
                            for (int e = 0; e < E; ++e) db[e] += n.grad.at(l, e);
                    }
                    if (n.parents[0]->requires_grad) {
                        n.parents[0]->ensure_grad();
                        Tensor& dx = n.parents[0]->grad;
                        for (int l = 0; l < L; ++l) {
                            double t_mean = 0, tx_mean = 0;
                            std::vector<double> t(static_cast<size_t>(E));
                            for (int e = 0; e < E; ++e) {
                                double ti = n.grad.at(l, e) * gv[e];
                                t[size_t(e)] = ti;
                                t_mean += ti;
                                tx_mean += ti * xhat.at(l, e);
                            }
                            t_mean /= E;
                            tx_mean /= E;
                            for (int e = 0; e < E; ++e)
                                dx.at(l, e) += inv_std[size_t(l)] *
                                               (t[size_t(e)] - t_mean - xhat.at(l, e) * tx_mean);
                        }
                    }
                });
}

// ---- shape plumbing ----

Value Graph::reshape(const Value& a, std::vector<int> shape) {
    Tensor out = a.tensor().reshaped(shape);
    return make(std::move(out), {a.node()}, [](Node& n) {
        n.parents[0]->ensure_grad();
        Tensor& g = n.parents[0]->grad;
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    });
}

Value Graph::concat_ch(const Value& a, const Value& b) {
    require(a.shape().size() == 3 && b.shape().size() == 3 && a.shape()[1] == b.shape()[1] &&
                a.shape()[2] == b.shape()[2],
            "concat_ch: spatial mismatch");
    const int Ca = a.shape()[0], Cb = b.shape()[0], H = a.shape()[1], W = a.shape()[2];
    const int64_t plane = int64_t(H) * W;
    Tensor out({Ca + Cb, H, W});
    std::copy(a.tensor().data(), a.tensor().data() + Ca * plane, out.data());
    std::copy(b.tensor().data(), b.tensor().data() + Cb * plane, out.data() + Ca * plane);
    return make(std::move(out), {a.node(), b.node()}, [Ca, Cb, plane](Node& n) {
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            Tensor& g = n.parents[0]->grad;
            for (int64_t i = 0; i < Ca * plane; ++i) g[i] += n.grad[i];
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            Tensor& g = n.parents[1]->grad;
            for (int64_t i = 0; i < Cb * plane; ++i) g[i] += n.grad[Ca * plane + i];
        }
    });
}

Value Graph::slice_ch(const Value& a, int c0, int c1) {
    require(a.shape().size() == 3 && c0 >= 0 && c0 < c1 && c1 <= a.shape()[0],
            "slice_ch: bad channel range");
    const int H = a.shape()[1], W = a.shape()[2];
    const int64_t plane = int64_t(H) * W;
    Tensor out({c1 - c0, H, W});
    std::copy(a.tensor().data() + c0 * plane, a.tensor().data() + c1 * plane, out.data());
    return make(std::move(out), {a.node()}, [c0, c1, plane](Node& n) {
        n.parents[0]->ensure_grad();
        Tensor& g = n.parents[0]->grad;
        for (int64_t i = 0; i < (c1 - c0) * plane; ++i) g[c0 * plane + i] += n.grad[i];
    });
}

Value Graph::add_channel_bias(const Value& x, const Value& b) {
    require(x.shape().size() == 3 && b.shape() == std::vector<int>{x.shape()[0]},
            "add_channel_bias: shape mismatch");
    const int C = x.shape()[0];
    const int64_t plane = int64_t(x.shape()[1]) * x.shape()[2];
    Tensor out = x.tensor().clone();
    for (int c = 0; c < C; ++c) {
        double bias = b.tensor()[c];
        double* p = out.data() + c * plane;
        for (int64_t i = 0; i < plane; ++i) p[i] += bias;
    }
    return make(std::move(out), {x.node(), b.node()}, [C, plane](Node& n) {
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            axpy(n.parents[0]->grad, 1.0, n.grad);
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            Tensor& db = n.parents[1]->grad;
            for (int c = 0; c < C; ++c) {
                const double* g = n.grad.data() + c * plane;
                double s = 0;
                for (int64_t i = 0; i < plane; ++i) s += g[i];
                db[c] += s;
            }
        }
    });
}

Value Graph::add_row_bias(const Value& x, const Value& b) {
    require(x.shape().size() == 2 && b.shape() == std::vector<int>{x.shape()[1]},
            "add_row_bias: shape mismatch");
    const int L = x.shape()[0], E = x.shape()[1];
    Tensor out = x.tensor().clone();
    for (int l = 0; l < L; ++l)
        for (int e = 0; e < E; ++e) out.at(l, e) += b.tensor()[e];
    return make(std::move(out), {x.node(), b.node()}, [L, E](Node& n) {
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            axpy(n.parents[0]->grad, 1.0, n.grad);
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            Tensor& db = n.parents[1]->grad;
            for (int l = 0; l < L; ++l)
                for (int e = 0; e < E; ++e) db[e] += n.grad.at(l, e);
        }
    });
}

Value Graph::concat_rows(const std::vector<Value>& rows) {
    require(!rows.empty(), "concat_rows: no rows");
    const int D = rows[0].shape().back();
    Tensor out({int(rows.size()), D});
    std::vector<NodePtr> parents;
    for (size_t r = 0; r < rows.size(); ++r) {
        require(rows[r].tensor().numel() == D, "concat_rows: row width mismatch");
        std::copy(rows[r].tensor().data(), rows[r].tensor().data() + D,
                  out.data() + int64_t(r) * D);
        parents.push_back(rows[r].node());
    }
    return make(std::move(out), std::move(parents), [D](Node& n) {
        for (size_t r = 0; r < n.parents.size(); ++r) {
            if (!n.parents[r]->requires_grad) continue;
            n.parents[r]->ensure_grad();
            Tensor& g = n.parents[r]->grad;
            for (int i = 0; i < D; ++i) g[i] += n.grad[int64_t(r) * D + i];
        }
    });
}

// ---- reductions / heads ----

Value Graph::l2_normalize_rows(const Value& x) {
    require(x.shape().size() == 2, "l2_normalize_rows: expected matrix");
    const int R = x.shape()[0], C = x.shape()[1];
    Tensor out({R, C});
    std::vector<double> inv_norms(static_cast<size_t>(R));
    for (int r = 0; r < R; ++r) {
        double s = 0;
        for (int c = 0; c < C; ++c) s += x.tensor().at(r, c) * x.tensor().at(r, c);
        double inv = 1.0 / std::sqrt(std::max(s, 1e-24));
        inv_norms[size_t(r)] = inv;
        for (int c = 0; c < C; ++c) out.at(r, c) = x.tensor().at(r, c) * inv;
    }
    Tensor y = out;
    return make(std::move(out), {x.node()}, [y, inv_norms, R, C](Node& n) {
        n.parents[0]->ensure_grad();
        Tensor& dx = n.parents[0]->grad;
        for (int r = 0; r < R; ++r) {
            double dot = 0;
            for (int c = 0; c < C; ++c) dot += n.grad.at(r, c) * y.at(r, c);
            for (int c = 0; c < C; ++c)
                dx.at(r, c) += inv_norms[size_t(r)] * (n.grad.at(r, c) - y.at(r, c) * dot);
        }
    });
}

Value Graph::mul_scalar_value(const Value& a, const Value& s) {
    require(s.tensor().numel() == 1, "mul_scalar_value: scalar node expected");
    const double sv = s.tensor()[0];
    Tensor out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.tensor()[i] * sv;
    Tensor av = a.tensor();
    return make(std::move(out), {a.node(), s.node()}, [av, sv](Node& n) {
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            axpy(n.parents[0]->grad, sv, n.grad);
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            double acc = 0;
            for (int64_t i = 0; i < av.numel(); ++i) acc += n.grad[i] * av[i];
            n.parents[1]->grad[0] += acc;
        }
    });
}

Value Graph::softmax_rows(const Value& x) {
    require(x.shape().size() == 2, "softmax_rows: expected matrix");
    const int R = x.shape()[0], C = x.shape()[1];
    Tensor out({R, C});
    for (int r = 0; r < R; ++r) {
        double mx = -1e300;
        for (int c = 0; c < C; ++c) mx = std::max(mx, x.tensor().at(r, c));
        double s = 0;
        for (int c = 0; c < C; ++c) {
            double e = std::exp(x.tensor().at(r, c) - mx);
            out.at(r, c) = e;
            s += e;
        }
        for (int c = 0; c < C; ++c) out.at(r, c) /= s;
    }
    Tensor y = out;
    return make(std::move(out), {x.node()}, [y, R, C](Node& n) {
        n.parents[0]->ensure_grad();
        Tensor& dx = n.parents[0]->grad;
        for (int r = 0; r < R; ++r) {
            double dot = 0;
            for (int c = 0; c < C; ++c) dot += n.grad.at(r, c) * y.at(r, c);
            for (int c = 0; c < C; ++c)
                dx.at(r, c) += y.at(r, c) * (n.grad.at(r, c) - dot);
        }
    });
}

Value Graph::mean_rows(const Value& x) {
    require(x.shape().size() == 2, "mean_rows: expected matrix");
    const int L = x.shape()[0], E = x.shape()[1];
    Tensor out({E});
    for (int l = 0; l < L; ++l)
        for (int e = 0; e < E; ++e) out[e] += x.tensor().at(l, e) / double(L);
    return make(std::move(out), {x.node()}, [L, E](Node& n) {
        n.parents[0]->ensure_grad();
        Tensor& dx = n.parents[0]->grad;
        for (int l = 0; l < L; ++l)
            for (int e = 0; e < E; ++e) dx.at(l, e) += n.grad[e] / double(L);
    });
}

Value Graph::avgpool_all(const Value& x) {
    require(x.shape().size() == 3, "avgpool_all: expected CHW");
    const int C = x.shape()[0];
    const int64_t plane = int64_t(x.shape()[1]) * x.shape()[2];
    Tensor out({C});
    for (int c = 0; c < C; ++c) {
        const double* p = x.tensor().data() + c * plane;
        double s = 0;
        for (int64_t i = 0; i < plane; ++i) s += p[i];
        out[c] = s / double(plane);
    }
    return make(std::move(out), {x.node()}, [C, plane](Node& n) {
        n.parents[0]->ensure_grad();
        Tensor& dx = n.parents[0]->grad;
        for (int c = 0; c < C; ++c) {
            double g = n.grad[c] / double(plane);
            double* p = dx.data() + c * plane;
            for (int64_t i = 0; i < plane; ++i) p[i] += g;
        }
    });
}

Value Graph::mean_all(const Value& x) {
    Tensor out({1});
    out[0] = x.tensor().mean();
    int64_t n_elem = x.tensor().numel();
    return make(std::move(out), {x.node()}, [n_elem](Node& n) {
        n.parents[0]->ensure_grad();
        double g = n.grad[0] / double(n_elem);
        Tensor& dx = n.parents[0]->grad;
        for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += g;
    });
}

Value Graph::mse(const Value& a, const Value& b) {
    require(a.tensor().same_shape(b.tensor()), "mse: shape mismatch");
    const Tensor &av = a.tensor(), &bv = b.tensor();
    int64_t n_elem = av.numel();
    double s = 0;
    for (int64_t i = 0; i < n_elem; ++i) {
        double d = av[i] - bv[i];
        s += d * d;
    }
    Tensor out({1});
    out[0] = s / double(n_elem);
    return make(std::move(out), {a.node(), b.node()}, [av, bv, n_elem](Node& n) {
        double g = 2.0 * n.grad[0] / double(n_elem);
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            Tensor& da = n.parents[0]->grad;
            for (int64_t i = 0; i < n_elem; ++i) da[i] += g * (av[i] - bv[i]);
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            Tensor& db = n.parents[1]->grad;
            for (int64_t i = 0; i < n_elem; ++i) db[i] -= g * (av[i] - bv[i]);
        }
    });
}

Value Graph::kl_normal(const Value& mu, const Value& logvar) {
    require(mu.tensor().same_shape(logvar.tensor()), "kl_normal: shape mismatch");
    const Tensor &m = mu.tensor(), &lv = logvar.tensor();
    const int64_t n_elem = m.numel();
    double s = 0;
    for (int64_t i = 0; i < n_elem; ++i)
        s += 0.5 * (m[i] * m[i] + std::exp(lv[i]) - 1.0 - lv[i]);
    Tensor out({1});
    out[0] = s / double(n_elem);
    return make(std::move(out), {mu.node(), logvar.node()}, [m, lv, n_elem](Node& n) {
        double g = n.grad[0] / double(n_elem);
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            Tensor& dm = n.parents[0]->grad;
            for (int64_t i = 0; i < n_elem; ++i) dm[i] += g * m[i];
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            Tensor& dl = n.parents[1]->grad;
            for (int64_t i = 0; i < n_elem; ++i) dl[i] += g * 0.5 * (std::exp(lv[i]) - 1.0);
        }
    });
}

Value Graph::embedding(const Value& table, const std::vector<int>& ids) {
    require(table.shape().size() == 2, "embedding: expected VxE table");
    const int V = table.shape()[0], E = table.shape()[1];
    const int L = int(ids.size());
    Tensor out({L, E});
    for (int l = 0; l < L; ++l) {
        require(ids[size_t(l)] >= 0 && ids[size_t(l)] < V, "embedding: id out of range");
        std::copy(table.tensor().data() + int64_t(ids[size_t(l)]) * E,
                  table.tensor().data() + int64_t(ids[size_t(l)] + 1) * E,
                  out.data() + int64_t(l) * E);
    }
    return make(std::move(out), {table.node()}, [ids, E, L](Node& n) {
        n.parents[0]->ensure_grad();
        Tensor& dt = n.parents[0]->grad;
        for (int l = 0; l < L; ++l)
            for (int e = 0; e < E; ++e) dt.at(ids[size_t(l)], e) += n.grad.at(l, e);
    });
}

Value Graph::softmax_xent_rows(const Value& logits, const std::vector<int>& labels) {
    require(logits.shape().size() == 2 && int(labels.size()) == logits.shape()[0],
            "softmax_xent_rows: shape mismatch");
    const int N = logits.shape()[0], K = logits.shape()[1];
    Tensor probs({N, K});
    double loss = 0;
    for (int i = 0; i < N; ++i) {
        double mx = -1e300;
        for (int k = 0; k < K; ++k) mx = std::max(mx, logits.tensor().at(i, k));
        double s = 0;
        for (int k = 0; k < K; ++k) {
            double e = std::exp(logits.tensor().at(i, k) - mx);
            probs.at(i, k) = e;
            s += e;
        }
        for (int k = 0; k < K; ++k) probs.at(i, k) /= s;
        require(labels[size_t(i)] >= 0 && labels[size_t(i)] < K,
                "softmax_xent_rows: label out of range");
        loss -= std::log(std::max(probs.at(i, labels[size_t(i)]), 1e-300));
    }
    Tensor out({1});
    out[0] = loss / double(N);
    return make(std::move(out), {logits.node()}, [probs, labels, N, K](Node& n) {
        n.parents[0]->ensure_grad();
        Tensor& dl = n.parents[0]->grad;
        double g = n.grad[0] / double(N);
        for (int i = 0; i < N; ++i)
            for (int k = 0; k < K; ++k)
                dl.at(i, k) += g * (probs.at(i, k) - (k == labels[size_t(i)] ? 1.0 : 0.0));
    });
}

Value Graph::pixel_xent(const Value& logits, const Tensor& labels) {
    require(logits.shape().size() == 3, "pixel_xent: expected KxHxW logits");
    const int K = logits.shape()[0], H = logits.shape()[1], W = logits.shape()[2];
    require(labels.ndim() == 2 && labels.dim(0) == H && labels.dim(1) == W,
            "pixel_xent: label grid mismatch");
    const int64_t plane = int64_t(H) * W;
    Tensor probs({K, H, W});
    double loss = 0;
    for (int64_t i = 0; i < plane; ++i) {
        double mx = -1e300;
        for (int k = 0; k < K; ++k) mx = std::max(mx, logits.tensor()[k * plane + i]);
        double s = 0;
        for (int k = 0; k < K; ++k) {
            double e = std::exp(logits.tensor()[k * plane + i] - mx);
            probs[k * plane + i] = e;
            s += e;
        }
        int lab = int(labels[i]);
        require(lab >= 0 && lab < K, "pixel_xent: label out of range");
        for (int k = 0; k < K; ++k) probs[k * plane + i] /= s;
        loss -= std::log(std::max(probs[lab * plane + i], 1e-300));
    }
    Tensor out({1});
    out[0] = loss / double(plane);
    return make(std::move(out), {logits.node()}, [probs, labels, K, plane](Node& n) {
        n.parents[0]->ensure_grad();
        Tensor& dl = n.parents[0]->grad;
        double g = n.grad[0] / double(plane);
        for (int64_t i = 0; i < plane; ++i) {
            int lab = int(labels[i]);
            for (int k = 0; k < K; ++k)
                dl[k * plane + i] += g * (probs[k * plane + i] - (k == lab ? 1.0 : 0.0));
        }
    });
}

Value Graph::softmax_pixels(const Value& logits) {
    require(logits.shape().size() == 3, "softmax_pixels: expected KxHxW");
    const int K = logits.shape()[0];
    const int64_t plane = int64_t(logits.shape()[1]) * logits.shape()[2];
    Tensor out(logits.shape());
    for (int64_t i = 0; i < plane; ++i) {
        double mx = -1e300;
        for (int k = 0; k < K; ++k) mx = std::max(mx, logits.tensor()[k * plane + i]);
        double s = 0;
        for (int k = 0; k < K; ++k) {
            double e = std::exp(logits.tensor()[k * plane + i] - mx);
            out[k * plane + i] = e;
            s += e;
        }
        for (int k = 0; k < K; ++k) out[k * plane + i] /= s;
    }
    Tensor y = out;
    return make(std::move(out), {logits.node()}, [y, K, plane](Node& n) {
        n.parents[0]->ensure_grad();
        Tensor& dx = n.parents[0]->grad;
        for (int64_t i = 0; i < plane; ++i) {
            double dot = 0;
            for (int k = 0; k < K; ++k) dot += n.grad[k * plane + i] * y[k * plane + i];
            for (int k = 0; k < K; ++k)
                dx[k * plane + i] += y[k * plane + i] * (n.grad[k * plane + i] - dot);
        }
    });
}

Value Graph::soft_dice(const Value& probs, const Tensor& labels, int num_classes) {
    require(probs.shape().size() == 3 && probs.shape()[0] == num_classes,
            "soft_dice: prob/class mismatch");
    const int H = probs.shape()[1], W = probs.shape()[2];
    require(labels.ndim() == 2 && labels.dim(0) == H && labels.dim(1) == W,
            "soft_dice: label grid mismatch");
    const int64_t plane = int64_t(H) * W;
    const double smooth = 1.0;
    const int organs = num_classes - 1;  // class 0 is background
    require(organs >= 1, "soft_dice: needs at least one foreground class");

    std::vector<double> inter(size_t(organs), 0.0), denom(size_t(organs), 0.0);
    for (int k = 1; k < num_classes; ++k) {
        const double* p = probs.tensor().data() + int64_t(k) * plane;
        double pg = 0, ps = 0, gs = 0;
        for (int64_t i = 0; i < plane; ++i) {
            double g = (int(labels[i]) == k) ? 1.0 : 0.0;
            pg += p[i] * g;
            ps += p[i];
            gs += g;
        }
        inter[size_t(k - 1)] = 2.0 * pg + smooth;
        denom[size_t(k - 1)] = ps + gs + smooth;
    }
    double dice_mean = 0;
    for (int k = 0; k < organs; ++k) dice_mean += inter[size_t(k)] / denom[size_t(k)];
    dice_mean /= double(organs);
    Tensor out({1});
    out[0] = 1.0 - dice_mean;

    return make(std::move(out), {probs.node()},
                [inter, denom, labels, num_classes, plane, organs](Node& n) {
                    n.parents[0]->ensure_grad();
                    Tensor& dp = n.parents[0]->grad;
                    double g = n.grad[0] / double(organs);
                    for (int k = 1; k < num_classes; ++k) {
                        double N = inter[size_t(k - 1)], D = denom[size_t(k - 1)];
                        double* d = dp.data() + int64_t(k) * plane;
                        for (int64_t i = 0; i < plane; ++i) {
                            double gt = (int(labels[i]) == k) ? 1.0 : 0.0;
                            // d(1 - N/D)/dp = -(2*gt*D - N) / D^2
                            d[i] += -g * (2.0 * gt * D - N) / (D * D);
                        }
                    }
                });
}

Value Graph::weighted_sum(const std::vector<Value>& vs, const std::vector<double>& cs) {
    require(!vs.empty() && vs.size() == cs.size(), "weighted_sum: size mismatch");
    Tensor out({1});
    double s = 0;
    std::vector<NodePtr> parents;
    for (size_t i = 0; i < vs.size(); ++i) {
        require(vs[i].tensor().numel() == 1, "weighted_sum: scalar inputs only");
        s += cs[i] * vs[i].tensor()[0];
        parents.push_back(vs[i].node());
    }
    out[0] = s;
    return make(std::move(out), std::move(parents), [cs](Node& n) {
        for (size_t i = 0; i < n.parents.size(); ++i)
            if (n.parents[i]->requires_grad) {
                n.parents[i]->ensure_grad();
                n.parents[i]->grad[0] += cs[i] * n.grad[0];
            }
    });
}

}  // namespace crossgen::ad
