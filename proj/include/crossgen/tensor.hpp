#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "crossgen/rng.hpp"

namespace crossgen {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// Dense row-major tensor of doubles with shared-buffer copy semantics.
// Copying a Tensor aliases the storage; clone() makes a deep copy. On disk
// tensors are 32-bit floats (see tensor_io), in memory everything is double.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)),
          buf_(std::make_shared<std::vector<double>>(count(shape_), 0.0)) {}

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        for (double& x : *t.buf_) x = v;
        return t;
    }

    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (double& x : *t.buf_) x = stddev * rng.normal();
        return t;
    }

    static Tensor from_values(std::vector<int> shape, std::vector<double> values) {
        require(count(shape) == int64_t(values.size()), "tensor: value count does not match shape");
        Tensor t;
        t.shape_ = std::move(shape);
        t.buf_ = std::make_shared<std::vector<double>>(std::move(values));
        return t;
    }

    bool defined() const { return buf_ != nullptr; }
    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(size_t(i)); }
    int ndim() const { return int(shape_.size()); }
    int64_t numel() const { return buf_ ? int64_t(buf_->size()) : 0; }

    double* data() { return buf_->data(); }
    const double* data() const { return buf_->data(); }

    double& operator[](int64_t i) { return (*buf_)[size_t(i)]; }
    double operator[](int64_t i) const { return (*buf_)[size_t(i)]; }

    // 2-D / 3-D indexed access for readability in non-hot code.
    double& at(int i, int j) { return (*buf_)[size_t(i) * dim(1) + j]; }
    double at(int i, int j) const { return (*buf_)[size_t(i) * dim(1) + j]; }
    double& at(int c, int i, int j) {
        return (*buf_)[(size_t(c) * dim(1) + i) * dim(2) + j];
    }
    double at(int c, int i, int j) const {
        return (*buf_)[(size_t(c) * dim(1) + i) * dim(2) + j];
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.buf_ = std::make_shared<std::vector<double>>(*buf_);
        return t;
    }

    // Shares storage; numel must match.
    Tensor reshaped(std::vector<int> shape) const {
        require(count(shape) == numel(), "reshape: element count mismatch");
        Tensor t;
        t.shape_ = std::move(shape);
        t.buf_ = buf_;
        return t;
    }

    void fill(double v) {
        for (double& x : *buf_) x = v;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double x : *buf_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    double min() const;
    double max() const;
    double mean() const;
    double sum() const;

    static int64_t count(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) {
            require(d >= 0, "tensor: negative dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::shared_ptr<std::vector<double>> buf_;
};

std::string shape_str(const std::vector<int>& shape);

inline void axpy(Tensor& y, double a, const Tensor& x) {
    const double* xs = x.data();
    double* ys = y.data();
    int64_t n = y.numel();
    for (int64_t i = 0; i < n; ++i) ys[i] += a * xs[i];
}

double max_abs_diff(const Tensor& a, const Tensor& b);

// --- Tensor file format ------------------------------------------------
// One JSON header line {"dims":[...],"dtype":"float32","layout":"row-major"}
// followed by raw little-endian float32 data.
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// Process-wide read hook invoked with every path load_tensor opens. The
// experiment harness installs its leakage guard here so that every nested
// loader is audited. Install before spawning workers; the hook must be
// thread-safe.
using TensorLoadHook = std::function<void(const std::string&)>;
void set_tensor_load_hook(TensorLoadHook hook);

// 16-bit PGM export for eyeballing grayscale tensors ([-1,1] or [0,1] mapped
// onto the full range). Inspection only; never read back.
void save_pgm16(const std::string& path, const Tensor& image, double lo, double hi);

// Minimal 24-bit BMP writer for plots/grids. rgb is [3,H,W] in [0,1].
void save_bmp(const std::string& path, const Tensor& rgb);

// Atomic write helper: writes to <path>.tmp then renames.
void atomic_write_text(const std::string& path, const std::string& content);

}  // namespace crossgen
