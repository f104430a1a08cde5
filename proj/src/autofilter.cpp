#include "crossgen/autofilter.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace crossgen {

using ordered_json = nlohmann::ordered_json;

ThresholdSet relax(const ThresholdSet& t) {
    auto drop = [](double v) { return std::max(0.0, v - 0.10); };
    return {drop(t.tau_iou), drop(t.tau_conf), drop(t.tau_iou_avg), drop(t.tau_conf_avg)};
}

bool passes(const FilterVerdict& verdict, const ThresholdSet& th) {
    for (const auto& o : verdict.per_organ)
        if (o.s_iou < th.tau_iou || o.s_conf < th.tau_conf) return false;
    return verdict.avg_iou >= th.tau_iou_avg && verdict.avg_conf >= th.tau_conf_avg;
}

double binary_iou(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "binary_iou: shape mismatch");
    int64_t inter = 0, uni = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        bool pa = a[i] > 0.5, pb = b[i] > 0.5;
        inter += pa && pb;
        uni += pa || pb;
    }
    return uni == 0 ? 0.0 : double(inter) / double(uni);
}

namespace {

// 3x3 box blur with clamped borders.
Tensor box_blur(const Tensor& img) {
    const int h = img.dim(0), w = img.dim(1);
    Tensor out({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    int yy = std::clamp(y + dy, 0, h - 1);
                    int xx = std::clamp(x + dx, 0, w - 1);
                    s += img.at(yy, xx);
                }
            out.at(y, x) = s / 9.0;
        }
    return out;
}

// Central-difference gradient magnitude of the blurred image; the blur keeps
// single-pixel noise from counting as edges.
Tensor edge_magnitude(const Tensor& img) {
    Tensor blurred = box_blur(img);
    const int h = img.dim(0), w = img.dim(1);
    Tensor out({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double gx = (blurred.at(y, std::min(x + 1, w - 1)) -
                         blurred.at(y, std::max(x - 1, 0))) * 0.5;
            double gy = (blurred.at(std::min(y + 1, h - 1), x) -
                         blurred.at(std::max(y - 1, 0), x)) * 0.5;
            out.at(y, x) = std::sqrt(gx * gx + gy * gy);
        }
    return out;
}

// One 4-neighborhood erosion pass.
Tensor erode(const Tensor& region) {
    const int h = region.dim(0), w = region.dim(1);
    Tensor out = Tensor::zeros({h, w});
    for (int y = 1; y + 1 < h; ++y)
        for (int x = 1; x + 1 < w; ++x)
            if (region.at(y, x) > 0.5 && region.at(y - 1, x) > 0.5 &&
                region.at(y + 1, x) > 0.5 && region.at(y, x - 1) > 0.5 &&
                region.at(y, x + 1) > 0.5)
                out.at(y, x) = 1.0;
    return out;
}

}  // namespace

OracleResult RegionGrowOracle::segment(const Tensor& image, const Tensor& organ_region) const {
    require(image.same_shape(organ_region), "oracle: image/region shape mismatch");
    const int h = image.dim(0), w = image.dim(1);

    int64_t region_px = 0;
    for (int64_t i = 0; i < organ_region.numel(); ++i) region_px += organ_region[i] > 0.5;
    if (region_px == 0) return {Tensor::zeros({h, w}), 0.0};

    // Seeds: the twice-eroded interior, falling back to single erosion and
    // then the full region for thin shapes.
    Tensor seeds = erode(erode(organ_region));
    bool any = seeds.max() > 0.5;
    if (!any) seeds = erode(organ_region);
    if (seeds.max() <= 0.5) seeds = organ_region;

    double seed_mean = 0;
    int64_t seed_n = 0;
    for (int64_t i = 0; i < seeds.numel(); ++i)
        if (seeds[i] > 0.5) {
            seed_mean += image[i];
            ++seed_n;
        }
    seed_mean /= double(seed_n);

    // BFS growth: seed pixels start the region; a neighbor joins when it is
    // intensity-compatible with the seeds and the local step is not an edge.
    Tensor pred = Tensor::zeros({h, w});
    std::deque<int64_t> queue;
    for (int64_t i = 0; i < seeds.numel(); ++i)
        if (seeds[i] > 0.5 && std::fabs(image[i] - seed_mean) <= grow_tol) {
            pred[i] = 1.0;
            queue.push_back(i);
        }
    const int dy[4] = {-1, 1, 0, 0};
    const int dx[4] = {0, 0, -1, 1};
    while (!queue.empty()) {
        int64_t p = queue.front();
        queue.pop_front();
        int py = int(p / w), px = int(p % w);
        for (int k = 0; k < 4; ++k) {
            int qy = py + dy[k], qx = px + dx[k];
            if (qy < 0 || qy >= h || qx < 0 || qx >= w) continue;
            int64_t q = int64_t(qy) * w + qx;
            if (pred[q] > 0.5) continue;
            if (std::fabs(image[q] - seed_mean) > grow_tol) continue;
            if (std::fabs(image[q] - image[p]) > step_tol) continue;
            pred[q] = 1.0;
            queue.push_back(q);
        }
    }

    // Confidence: fraction of predicted-boundary pixels on strong edges.
    Tensor edges = edge_magnitude(image);
    int64_t boundary = 0, agreeing = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (pred.at(y, x) <= 0.5) continue;
            bool on_boundary = false;
            for (int k = 0; k < 4; ++k) {
                int qy = y + dy[k], qx = x + dx[k];
                if (qy < 0 || qy >= h || qx < 0 || qx >= w || pred.at(qy, qx) <= 0.5) {
                    on_boundary = true;
                    break;
                }
            }
            if (!on_boundary) continue;
            ++boundary;
            if (edges.at(y, x) >= edge_thresh) ++agreeing;
        }
    double confidence = boundary == 0 ? 0.0 : double(agreeing) / double(boundary);
    return {std::move(pred), confidence};
}

FilterVerdict score_sample(const Tensor& image, const Tensor& cond_mask,
                           const SegmentationOracle& oracle) {
    require(image.same_shape(cond_mask), "score_sample: image/mask shape mismatch");
    std::set<int> organs;
    for (int64_t i = 0; i < cond_mask.numel(); ++i)
        if (int(cond_mask[i]) > 0) organs.insert(int(cond_mask[i]));

    FilterVerdict v;
    for (int organ : organs) {
        Tensor region(cond_mask.shape());
        for (int64_t i = 0; i < region.numel(); ++i)
            region[i] = int(cond_mask[i]) == organ ? 1.0 : 0.0;
        OracleResult res = oracle.segment(image, region);
        OrganScore score;
        score.organ_id = organ;
        score.s_iou = binary_iou(res.mask, region);
        score.s_conf = res.confidence;
        v.per_organ.push_back(score);
        v.avg_iou += score.s_iou;
        v.avg_conf += score.s_conf;
    }
    if (!v.per_organ.empty()) {
        v.avg_iou /= double(v.per_organ.size());
        v.avg_conf /= double(v.per_organ.size());
    }
    return v;
}

std::vector<SyntheticPair> select_candidates(const std::vector<CandidateRecord>& candidates,
                                             const std::vector<FilterVerdict>& verdicts,
                                             const ThresholdSet& thresholds, int keep) {
    require(candidates.size() == verdicts.size(), "select_candidates: size mismatch");
    auto rank = [&](size_t i) { return 0.5 * (verdicts[i].avg_iou + verdicts[i].avg_conf); };

    std::vector<size_t> passing;
    for (size_t i = 0; i < candidates.size(); ++i)
        if (passes(verdicts[i], thresholds)) passing.push_back(i);

    auto by_rank = [&](size_t a, size_t b) {
        double ra = rank(a), rb = rank(b);
        if (ra != rb) return ra > rb;
        return a < b;  // deterministic tie break
    };

    std::vector<SyntheticPair> out;
    if (!passing.empty()) {
        std::sort(passing.begin(), passing.end(), by_rank);
        for (size_t k = 0; k < passing.size() && int(k) < keep; ++k) {
            SyntheticPair p{candidates[passing[k]], verdicts[passing[k]]};
            p.verdict.accepted = true;
            out.push_back(std::move(p));
        }
        return out;
    }

    // Fallback: one relaxation, single best sample; low-quality samples that
    // fail even the relaxed predicate are discarded outright.
    ThresholdSet relaxed = relax(thresholds);
    std::vector<size_t> relaxed_pass;
    for (size_t i = 0; i < candidates.size(); ++i)
        if (passes(verdicts[i], relaxed)) relaxed_pass.push_back(i);
    if (relaxed_pass.empty()) return out;
    std::sort(relaxed_pass.begin(), relaxed_pass.end(), by_rank);
    SyntheticPair p{candidates[relaxed_pass[0]], verdicts[relaxed_pass[0]]};
    p.verdict.accepted = true;
    out.push_back(std::move(p));
    return out;
}

FilterOutput run_filter(const std::vector<CandidateRecord>& candidates, const FilterConfig& cfg) {
    FilterOutput out;
    std::vector<FilterVerdict> verdicts(candidates.size());
    parallel_for(int64_t(candidates.size()), cfg.threads, [&](int64_t i) {
        Tensor image = load_tensor(candidates[size_t(i)].image_path);
        Tensor mask = load_tensor(candidates[size_t(i)].cond_mask_path);
        verdicts[size_t(i)] = score_sample(image, mask, cfg.oracle);
    });

    std::map<int, std::vector<size_t>> groups;
    for (size_t i = 0; i < candidates.size(); ++i) groups[candidates[i].group].push_back(i);

    for (const auto& [group, idx] : groups) {
        std::vector<CandidateRecord> cands;
        std::vector<FilterVerdict> verds;
        for (size_t i : idx) {
            cands.push_back(candidates[i]);
            verds.push_back(verdicts[i]);
        }
        auto selected = select_candidates(cands, verds, cfg.thresholds, cfg.keep);
        for (auto& s : selected) out.accepted.push_back(std::move(s));
    }

    // Audit trail carries the final accept/reject decision per candidate.
    std::set<std::pair<int, int>> chosen;
    for (const auto& s : out.accepted)
        chosen.insert({s.candidate.group, s.candidate.candidate_index});
    for (size_t i = 0; i < candidates.size(); ++i) {
        verdicts[i].accepted =
            chosen.count({candidates[i].group, candidates[i].candidate_index}) > 0;
        out.all_verdicts.emplace_back(candidates[i], verdicts[i]);
    }
    return out;
}

DatasetManifest synthetic_manifest(const std::vector<SyntheticPair>& accepted,
                                   const std::string& modality, const std::string& attributes) {
    DatasetManifest m;
    m.split = "train";
    m.source_kind = "synthetic";
    for (const auto& p : accepted) {
        ManifestRecord r;
        r.path = p.candidate.image_path;
        r.modality = modality;
        r.attributes = attributes;
        r.region = "unlabeled";
        r.volume_id = p.candidate.group;
        r.slice_index = p.candidate.candidate_index;
        r.has_mask = true;
        r.mask_path = p.candidate.cond_mask_path;
        m.records.push_back(std::move(r));
    }
    return m;
}

void save_verdicts(const std::string& path,
                   const std::vector<std::pair<CandidateRecord, FilterVerdict>>& verdicts) {
    std::ostringstream out;
    for (const auto& [cand, v] : verdicts) {
        ordered_json j;
        j["image_path"] = cand.image_path;
        j["group"] = cand.group;
        j["candidate_index"] = cand.candidate_index;
        ordered_json organs = ordered_json::array();
        for (const auto& o : v.per_organ) {
            ordered_json oj;
            oj["organ_id"] = o.organ_id;
            oj["s_iou"] = o.s_iou;
            oj["s_conf"] = o.s_conf;
            organs.push_back(oj);
        }
        j["per_organ"] = organs;
        j["avg_iou"] = v.avg_iou;
        j["avg_conf"] = v.avg_conf;
        j["accepted"] = v.accepted;
        out << j.dump() << "\n";
    }
    atomic_write_text(path, out.str());
}

}  // namespace crossgen
