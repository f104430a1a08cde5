#pragma once

#include "crossgen/sampler.hpp"

namespace crossgen {

struct ThresholdSet {
    double tau_iou = 0.70;
    double tau_conf = 0.80;
    double tau_iou_avg = 0.80;
    double tau_conf_avg = 0.90;
};

// Every threshold reduced by 0.10, floored at 0.
ThresholdSet relax(const ThresholdSet& t);

struct OrganScore {
    int organ_id = 0;
    double s_iou = 0.0;
    double s_conf = 0.0;
};

struct FilterVerdict {
    std::vector<OrganScore> per_organ;
    double avg_iou = 0.0;
    double avg_conf = 0.0;
    bool accepted = false;
};

// Per-organ and per-average predicate: every organ clears (tau_iou, tau_conf)
// AND the averages clear (tau_iou_avg, tau_conf_avg).
bool passes(const FilterVerdict& verdict, const ThresholdSet& thresholds);

// |a AND b| / |a OR b| over binary grids; 0 when both empty.
double binary_iou(const Tensor& a, const Tensor& b);

// Promptable-segmentation oracle interface: predict one binary mask plus a
// confidence in [0,1] per prompted organ region.
struct OracleResult {
    Tensor mask;  // HxW binary
    double confidence = 0.0;
};

class SegmentationOracle {
public:
    virtual ~SegmentationOracle() = default;
    virtual OracleResult segment(const Tensor& image, const Tensor& organ_region) const = 0;
};

// Default desk oracle: seeded region growing from the prompt-region interior
// with gradient-magnitude stopping. Confidence is boundary agreement: the
// fraction of predicted-boundary pixels lying on strong intensity edges of
// the (lightly blurred) image.
class RegionGrowOracle : public SegmentationOracle {
public:
    double grow_tol = 0.35;    // |I - seed mean| acceptance band
    double step_tol = 0.35;    // max step across a growth edge
    double edge_thresh = 0.10; // blurred-gradient magnitude of a strong edge

    OracleResult segment(const Tensor& image, const Tensor& organ_region) const override;
};

// Scores one candidate against its conditioning mask: per-organ oracle
// prediction, IoU against the conditioning region, arithmetic averages.
// Organs absent from cond_mask are excluded; an empty prompt region scores
// (0,0). The decision flag is left false (see passes / select_candidates).
FilterVerdict score_sample(const Tensor& image, const Tensor& cond_mask,
                           const SegmentationOracle& oracle);

struct SyntheticPair {
    CandidateRecord candidate;
    FilterVerdict verdict;
};

// Among passing candidates keep the top `keep` ranked by
// (avg_iou + avg_conf)/2; if none pass, relax once and keep the single best
// passing the relaxed predicate; otherwise nothing.
std::vector<SyntheticPair> select_candidates(const std::vector<CandidateRecord>& candidates,
                                             const std::vector<FilterVerdict>& verdicts,
                                             const ThresholdSet& thresholds, int keep);

struct FilterConfig {
    ThresholdSet thresholds;
    int keep = 2;
    int threads = 2;
    RegionGrowOracle oracle;
};

struct FilterOutput {
    std::vector<SyntheticPair> accepted;                  // grouped selection result
    std::vector<std::pair<CandidateRecord, FilterVerdict>> all_verdicts;  // audit trail
};

// Scores every candidate, selects per group, and builds the synthetic
// manifest records (image = generated, mask = conditioning mask).
FilterOutput run_filter(const std::vector<CandidateRecord>& candidates, const FilterConfig& cfg);

DatasetManifest synthetic_manifest(const std::vector<SyntheticPair>& accepted,
                                   const std::string& modality, const std::string& attributes);

void save_verdicts(const std::string& path,
                   const std::vector<std::pair<CandidateRecord, FilterVerdict>>& verdicts);

}  // namespace crossgen
