#include "crossgen/seg.hpp"

#include <algorithm>
#include <set>

namespace crossgen {

using nn::Graph;
using nn::Value;

void AccessGuard::check(const std::string& path) const {
    checked_.fetch_add(1);
    for (const auto& prefix : denied_)
        if (path.rfind(prefix, 0) == 0)
            throw LeakageError("leakage guard: read of quarantined path " + path);
}

AccessGuard::Scope::Scope(const AccessGuard& guard) {
    set_tensor_load_hook([&guard](const std::string& path) { guard.check(path); });
}

AccessGuard::Scope::~Scope() { set_tensor_load_hook(nullptr); }

SegUnet::SegUnet(const SegConfig& cfg, uint64_t seed) : cfg_(cfg) {
    Rng rng(derive_seed(seed, "seg_init"));
    const int w = cfg.base_width, w2 = 2 * cfg.base_width, w4 = 4 * cfg.base_width;
    const int g = cfg.groups;
    c_in_ = nn::Conv2d::create(params_, "in", 1, w, 3, 1, 1, rng);
    n_in_ = nn::GroupNorm::create(params_, "n_in", w, g);
    c1_ = nn::Conv2d::create(params_, "c1", w, w, 3, 1, 1, rng);
    n1_ = nn::GroupNorm::create(params_, "n1", w, g);
    d1_ = nn::Conv2d::create(params_, "d1", w, w2, 3, 2, 1, rng);
    n2_ = nn::GroupNorm::create(params_, "n2", w2, g);
    c2_ = nn::Conv2d::create(params_, "c2", w2, w2, 3, 1, 1, rng);
    n3_ = nn::GroupNorm::create(params_, "n3", w2, g);
    d2_ = nn::Conv2d::create(params_, "d2", w2, w4, 3, 2, 1, rng);
    n4_ = nn::GroupNorm::create(params_, "n4", w4, g);
    c3_ = nn::Conv2d::create(params_, "c3", w4, w4, 3, 1, 1, rng);
    n5_ = nn::GroupNorm::create(params_, "n5", w4, g);
    u1a_ = nn::Conv2d::create(params_, "u1a", w4, w2, 3, 1, 1, rng);
    u1b_ = nn::Conv2d::create(params_, "u1b", 2 * w2, w2, 3, 1, 1, rng);
    n6_ = nn::GroupNorm::create(params_, "n6", w2, g);
    u2a_ = nn::Conv2d::create(params_, "u2a", w2, w, 3, 1, 1, rng);
    u2b_ = nn::Conv2d::create(params_, "u2b", 2 * w, w, 3, 1, 1, rng);
    n7_ = nn::GroupNorm::create(params_, "n7", w, g);
    c_out_ = nn::Conv2d::create(params_, "out", w, cfg.num_classes, 3, 1, 1, rng);
}

Value SegUnet::logits(Graph& g, const Value& image) const {
    require(image.shape() == std::vector<int>{1, cfg_.image_size, cfg_.image_size},
            "seg: image shape mismatch, got " + shape_str(image.shape()));
    auto h0 = c1_(g, g.silu(n_in_(g, c_in_(g, image))));
    auto s0 = h0;                                   // w @ full
    auto h1 = c2_(g, g.silu(n2_(g, d1_(g, g.silu(n1_(g, h0))))));
    auto s1 = h1;                                   // 2w @ half
    auto h2 = c3_(g, g.silu(n4_(g, d2_(g, g.silu(n3_(g, h1))))));
    auto u1 = u1a_(g, g.upsample_nearest2(g.silu(n5_(g, h2))));
    auto m1 = g.silu(n6_(g, u1b_(g, g.concat_ch(u1, s1))));
    auto u2 = u2a_(g, g.upsample_nearest2(m1));
    auto m2 = g.silu(n7_(g, u2b_(g, g.concat_ch(u2, s0))));
    return c_out_(g, m2);
}

Tensor SegUnet::predict_mask(const Tensor& image) const {
    Graph g(false);
    Tensor img = image.ndim() == 2 ? image.reshaped({1, image.dim(0), image.dim(1)}) : image;
    Tensor lg = logits(g, g.leaf(img)).tensor();
    const int k = cfg_.num_classes, h = cfg_.image_size, w = cfg_.image_size;
    const int64_t plane = int64_t(h) * w;
    Tensor out({h, w});
    for (int64_t i = 0; i < plane; ++i) {
        int best = 0;
        double best_v = lg[i];
        for (int c = 1; c < k; ++c)
            if (lg[c * plane + i] > best_v) {
                best_v = lg[c * plane + i];
                best = c;
            }
        out[i] = double(best);
    }
    return out;
}

std::vector<TrainLogEntry> train_segmenter(SegUnet& model, const DatasetManifest& pairs,
                                           const SegTrainConfig& cfg, uint64_t seed) {
    require(!pairs.records.empty(), "train_segmenter: empty manifest");
    for (const auto& r : pairs.records)
        require(r.has_mask, "train_segmenter: record without mask: " + r.path);

    std::vector<Tensor> images(pairs.records.size()), masks(pairs.records.size());
    for (size_t i = 0; i < pairs.records.size(); ++i) {
        images[i] = load_tensor(pairs.records[i].path);
        masks[i] = load_tensor(pairs.records[i].mask_path);
    }

    auto params = model.params().all();
    nn::AdamW opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;

    const int k = model.config().num_classes;
    std::vector<TrainLogEntry> log;
    for (int step = 0; step < cfg.steps; ++step) {
        Rng batch_rng(derive_seed(seed, "seg_batch", uint64_t(step)));
        std::vector<int64_t> idx(static_cast<size_t>(cfg.batch_size));
        for (auto& i : idx) i = batch_rng.randint(0, int64_t(images.size()) - 1);

        nn::AdamW::zero_grad(params);
        double loss = nn::run_batch(
            cfg.batch_size, cfg.threads, params, [&](Graph& g, int64_t bi) -> Value {
                const size_t ri = size_t(idx[size_t(bi)]);
                Tensor img = images[ri].reshaped({1, images[ri].dim(0), images[ri].dim(1)});
                auto lg = model.logits(g, g.leaf(img));
                auto ce = g.pixel_xent(lg, masks[ri]);
                auto dice = g.soft_dice(g.softmax_pixels(lg), masks[ri], k);
                return g.weighted_sum({ce, dice}, {1.0, cfg.dice_weight});
            });
        opt.step(params);
        if (step % cfg.log_every == 0 || step == cfg.steps - 1) log.push_back({step, loss});
    }
    return log;
}

std::map<int, std::optional<double>> dice_per_organ(const std::vector<Tensor>& pred_slices,
                                                    const std::vector<Tensor>& gt_slices,
                                                    int num_classes) {
    require(pred_slices.size() == gt_slices.size() && !pred_slices.empty(),
            "dice_per_organ: slice count mismatch");
    for (size_t i = 0; i < pred_slices.size(); ++i)
        require(pred_slices[i].same_shape(gt_slices[i]), "dice_per_organ: slice shape mismatch");

    std::map<int, std::optional<double>> out;
    for (int k = 1; k < num_classes; ++k) {
        int64_t inter = 0, p_count = 0, g_count = 0;
        for (size_t s = 0; s < pred_slices.size(); ++s) {
            const Tensor& p = pred_slices[s];
            const Tensor& gt = gt_slices[s];
            for (int64_t i = 0; i < p.numel(); ++i) {
                bool pp = int(p[i]) == k, gg = int(gt[i]) == k;
                inter += pp && gg;
                p_count += pp;
                g_count += gg;
            }
        }
        if (g_count == 0) {
            out[k] = std::nullopt;  // absent from this volume's ground truth
        } else {
            out[k] = 2.0 * double(inter) / double(p_count + g_count);
        }
    }
    return out;
}

DscReport evaluate(const SegUnet& model, const DatasetManifest& test_manifest) {
    require(!test_manifest.records.empty(), "evaluate: empty test manifest");
    // Group by volume id, order slices by slice_index regardless of file order.
    std::map<int, std::vector<const ManifestRecord*>> volumes;
    for (const auto& r : test_manifest.records) {
        require(r.has_mask, "evaluate: test record without mask: " + r.path);
        volumes[r.volume_id].push_back(&r);
    }

    const int k = model.config().num_classes;
    DscReport report;
    std::map<int, std::pair<double, int>> organ_sums;
    for (auto& [vid, recs] : volumes) {
        std::sort(recs.begin(), recs.end(), [](const ManifestRecord* a, const ManifestRecord* b) {
            return a->slice_index < b->slice_index;
        });
        std::vector<Tensor> preds, gts;
        for (const auto* r : recs) {
            preds.push_back(model.predict_mask(load_tensor(r->path)));
            gts.push_back(load_tensor(r->mask_path));
        }
        auto dsc = dice_per_organ(preds, gts, k);
        std::map<int, double> present;
        for (const auto& [organ, value] : dsc)
            if (value) {
                present[organ] = *value;
                organ_sums[organ].first += *value;
                organ_sums[organ].second += 1;
            }
        report.per_volume.emplace_back(vid, std::move(present));
    }

    double total = 0;
    int organs = 0;
    for (const auto& [organ, sum] : organ_sums) {
        double mean = sum.first / double(sum.second);
        report.per_organ_mean[organ] = mean;
        total += mean;
        ++organs;
    }
    report.overall_mean = organs ? total / double(organs) : 0.0;
    return report;
}

double train_set_mean_dsc(const SegUnet& model, const DatasetManifest& pairs, int max_records) {
    int n = std::min<int>(max_records, int(pairs.records.size()));
    require(n > 0, "train_set_mean_dsc: empty manifest");
    const int k = model.config().num_classes;
    double total = 0;
    int counted = 0;
    for (int i = 0; i < n; ++i) {
        Tensor pred = model.predict_mask(load_tensor(pairs.records[size_t(i)].path));
        Tensor gt = load_tensor(pairs.records[size_t(i)].mask_path);
        auto dsc = dice_per_organ({pred}, {gt}, k);
        double s = 0;
        int c = 0;
        for (const auto& [organ, value] : dsc)
            if (value) {
                s += *value;
                ++c;
            }
        if (c > 0) {
            total += s / double(c);
            ++counted;
        }
    }
    return counted ? total / double(counted) : 0.0;
}

}  // namespace crossgen
