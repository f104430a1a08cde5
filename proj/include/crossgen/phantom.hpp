#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crossgen/rng.hpp"
#include "crossgen/tensor.hpp"

namespace crossgen {

// Tissue classes. Class 0 is background; organ classes are the analogs the
// attribute template talks about.
inline constexpr int kTissueBackground = 0;
inline constexpr int kTissueFat = 1;
inline constexpr int kTissueMuscle = 2;
inline constexpr int kTissueWater = 3;
inline constexpr int kTissueBone = 4;
inline constexpr int kMaxOrganClasses = 4;

const std::vector<std::string>& organ_names();  // index = class - 1
const std::vector<std::string>& region_names(); // the six region labels

// Ground-truth anatomy for one slice: integer labels in [0, K].
struct TissueMap {
    Tensor label_grid;           // HxW, values 0..K stored as doubles
    std::vector<int> organ_ids;  // subset of {1..K} counted as organs
};

// One acquisition style: per-tissue mean intensity plus corruption levels.
struct ModalitySpec {
    std::string name;
    std::map<int, double> intensity_table;  // tissue class -> mean in [0,1]
    double noise_sigma = 0.0;
    double bias_field_amp = 0.0;
};

struct SliceRecord {
    Tensor image;  // HxW in [-1,1]
    std::optional<Tensor> mask;  // HxW organ labels, 0 = background
    std::string modality;
    std::string attributes;
    std::string region;  // one of the six labels or "unlabeled"
    int volume_id = 0;
    int slice_index = 0;
};

// ---- generation ----

// Smoothly varying multi-organ anatomy for one slice of a volume. Geometry
// depends only on (seed, slice, organ_count), never on the modality.
TissueMap make_tissue_map(uint64_t seed, int image_size, int slice_index, int num_slices,
                          int organ_count);

// pixel = intensity_table[class] * bias_field + noise, clamped to [0,1].
Tensor render_modality(const TissueMap& tissue, const ModalitySpec& modality, uint64_t seed);

// Full volume: identical anatomy stream across modalities for equal seeds.
// volume_id < 0 derives the id from the seed.
std::vector<SliceRecord> generate_phantom_volume(uint64_t seed, const ModalitySpec& modality,
                                                 int num_slices, int organ_count,
                                                 int volume_id = -1, int image_size = 64);

// ---- preprocessing ----

// Clip to the [p_lo, p_hi] percentiles (order statistics: floor index for the
// low cut, ceil for the high), rescale to [0,1], then to [-1,1]. A constant
// input maps to all -1. Idempotent: re-applying changes nothing.
Tensor clip_and_rescale(const Tensor& raw, double lo_pct = 0.5, double hi_pct = 99.5);

// With probability p applies exactly one of {hflip, vflip, rot90, rot180,
// rot270}, the same transform to image and mask; otherwise returns the record
// unchanged.
SliceRecord augment(const SliceRecord& record, double probability, Rng& rng);

enum class FlipRot { HFlip, VFlip, Rot90, Rot180, Rot270 };
Tensor apply_fliprot(const Tensor& grid, FlipRot op);

// ---- attribute mapping ----

// Signal-level wording per tissue analog: >= 0.66 high, >= 0.33 intermediate,
// else low; rendered in fat, muscle, water order.
std::string map_modality_attributes(const ModalitySpec& modality);

// Procedural region ground truth: six equal slice bands.
std::string region_for_slice(int slice_index, int num_slices);

// The default two-modality phantom pair with inverted intensity tables.
ModalitySpec default_modality_p1();
ModalitySpec default_modality_p2();

}  // namespace crossgen
