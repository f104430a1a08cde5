#pragma once

#include <atomic>
#include <map>
#include <optional>

#include "crossgen/manifest.hpp"
#include "crossgen/nn.hpp"

namespace crossgen {

// Hard failure raised when an experiment arm touches quarantined data.
struct LeakageError : std::runtime_error {
    explicit LeakageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Denylist-based read auditor. Installed as the tensor-load hook for the
// duration of an experiment; any read under a denied prefix throws.
class AccessGuard {
public:
    void deny_prefix(const std::string& prefix) { denied_.push_back(prefix); }
    void check(const std::string& path) const;
    int64_t checked_reads() const { return checked_.load(); }

    // RAII installation as the global tensor-load hook.
    class Scope {
    public:
        explicit Scope(const AccessGuard& guard);
        ~Scope();
    };

private:
    std::vector<std::string> denied_;
    mutable std::atomic<int64_t> checked_{0};
};

struct SegConfig {
    int image_size = 64;
    int num_classes = 4;  // background + organs
    int base_width = 12;
    int groups = 4;
};

// Small three-resolution UNet emitting per-pixel class logits.
class SegUnet {
public:
    SegUnet(const SegConfig& cfg, uint64_t seed);

    nn::Value logits(nn::Graph& g, const nn::Value& image) const;  // [K,H,W]
    Tensor predict_mask(const Tensor& image) const;                // argmax labels HxW

    const SegConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return params_; }

private:
    SegConfig cfg_;
    nn::ParamStore params_;
    nn::Conv2d c_in_, c1_, d1_, c2_, d2_, c3_, u1a_, u1b_, u2a_, u2b_, c_out_;
    nn::GroupNorm n_in_, n1_, n2_, n3_, n4_, n5_, n6_, n7_;
};

struct SegTrainConfig {
    int steps = 1500;
    int batch_size = 8;
    double lr = 1e-3;
    double weight_decay = 1e-6;
    double dice_weight = 1.0;  // loss = pixel CE + dice_weight * soft dice
    int threads = 2;
    int log_every = 50;
};

// Pixelwise cross-entropy + soft Dice on image/mask pairs; every record must
// carry a mask.
std::vector<TrainLogEntry> train_segmenter(SegUnet& model, const DatasetManifest& pairs,
                                           const SegTrainConfig& cfg, uint64_t seed);

// Volume-stacked per-organ Dice: DSC_k = 2|P_k ^ G_k| / (|P_k| + |G_k|) over
// whole volumes; organs with empty ground truth are excluded (nullopt).
std::map<int, std::optional<double>> dice_per_organ(const std::vector<Tensor>& pred_slices,
                                                    const std::vector<Tensor>& gt_slices,
                                                    int num_classes);

struct DscReport {
    // volume_id -> organ -> dsc (organ omitted when GT empty in that volume)
    std::vector<std::pair<int, std::map<int, double>>> per_volume;
    std::map<int, double> per_organ_mean;
    double overall_mean = 0.0;
};

// Groups test slices by volume, stacks them in slice order, and averages the
// per-volume per-organ DSC across volumes, then across organs.
DscReport evaluate(const SegUnet& model, const DatasetManifest& test_manifest);

// Mean DSC of the ground truth against itself minus predictions on the train
// set; quick sanity metric for training runs.
double train_set_mean_dsc(const SegUnet& model, const DatasetManifest& pairs, int max_records);

}  // namespace crossgen
