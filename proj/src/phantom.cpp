#include "crossgen/phantom.hpp"

#include <algorithm>
#include <cmath>

namespace crossgen {

const std::vector<std::string>& organ_names() {
    static const std::vector<std::string> names = {
        "fat analog", "muscle analog", "water analog", "bone analog"};
    return names;
}

const std::vector<std::string>& region_names() {
    static const std::vector<std::string> names = {
        "upper thoracic region",  "middle thoracic region", "lower thoracic region",
        "upper abdominal region", "lower abdominal region", "pelvic region"};
    return names;
}

namespace {

struct OrganShape {
    double cx, cy;        // base center (pixels)
    double rx, ry;        // base half-axes
    double drift_x, drift_y;  // center drift across the volume
    double wobble_amp, wobble_phase;
    double tilt;          // in-plane rotation
};

// Organ anchors live in separate quadrants so shapes never overlap.
OrganShape sample_organ(Rng& rng, int organ_idx, int image_size) {
    static const double qx[4] = {0.25, 0.75, 0.25, 0.75};
    static const double qy[4] = {0.25, 0.25, 0.75, 0.75};
    OrganShape s;
    double n = double(image_size);
    s.cx = qx[organ_idx] * n + rng.uniform(-0.05, 0.05) * n;
    s.cy = qy[organ_idx] * n + rng.uniform(-0.05, 0.05) * n;
    s.rx = rng.uniform(0.08, 0.15) * n;
    s.ry = rng.uniform(0.08, 0.15) * n;
    s.drift_x = rng.uniform(-0.06, 0.06) * n;
    s.drift_y = rng.uniform(-0.06, 0.06) * n;
    s.wobble_amp = rng.uniform(0.0, 0.18);
    s.wobble_phase = rng.uniform(0.0, 6.283185307179586);
    s.tilt = rng.uniform(0.0, 3.141592653589793);
    return s;
}

// Cross-section scale along the slice axis: large mid-volume, smaller at the
// ends, floored so every organ is present on every slice.
double slice_profile(int slice_index, int num_slices) {
    if (num_slices <= 1) return 1.0;
    double u = 2.0 * double(slice_index) / double(num_slices - 1) - 1.0;
    return std::sqrt(std::max(0.18, 1.0 - 0.8 * u * u));
}

}  // namespace

TissueMap make_tissue_map(uint64_t seed, int image_size, int slice_index, int num_slices,
                          int organ_count) {
    require(organ_count >= 1 && organ_count <= kMaxOrganClasses,
            "make_tissue_map: organ_count must be in [1,4]");
    require(slice_index >= 0 && slice_index < num_slices, "make_tissue_map: slice out of range");

    // Geometry stream depends on the seed only; all slices of a volume share
    // the organ shapes and evolve them with slice_index.
    Rng rng(derive_seed(seed, "geometry"));
    std::vector<OrganShape> organs;
    for (int k = 0; k < organ_count; ++k) organs.push_back(sample_organ(rng, k, image_size));

    TissueMap map;
    map.label_grid = Tensor::zeros({image_size, image_size});
    for (int k = 1; k <= organ_count; ++k) map.organ_ids.push_back(k);

    double prog = num_slices <= 1 ? 0.0 : double(slice_index) / double(num_slices - 1) - 0.5;
    double scale = slice_profile(slice_index, num_slices);

    for (int k = 0; k < organ_count; ++k) {
        const OrganShape& o = organs[size_t(k)];
        double cx = o.cx + o.drift_x * prog;
        double cy = o.cy + o.drift_y * prog;
        double rx = o.rx * scale;
        double ry = o.ry * scale;
        double wob = o.wobble_phase + 0.9 * prog;
        double ct = std::cos(o.tilt), st = std::sin(o.tilt);
        for (int y = 0; y < image_size; ++y) {
            for (int x = 0; x < image_size; ++x) {
                double dx = double(x) - cx, dy = double(y) - cy;
                double u = ct * dx + st * dy;
                double v = -st * dx + ct * dy;
                double theta = std::atan2(v, u);
                double r_mod = 1.0 + o.wobble_amp * scale * std::sin(2.0 * theta + wob);
                double d = (u * u) / (rx * rx * r_mod * r_mod) + (v * v) / (ry * ry * r_mod * r_mod);
                if (d <= 1.0) map.label_grid.at(y, x) = double(k + 1);
            }
        }
    }
    return map;
}

Tensor render_modality(const TissueMap& tissue, const ModalitySpec& modality, uint64_t seed) {
    const int h = tissue.label_grid.dim(0), w = tissue.label_grid.dim(1);
    Rng rng(derive_seed(seed, "render", hash_combine(0, modality.name)));

    // Low-frequency multiplicative bias: a few random cosine modes.
    double ph1 = rng.uniform(0.0, 6.28), ph2 = rng.uniform(0.0, 6.28);
    double fx1 = rng.uniform(0.5, 1.5), fy1 = rng.uniform(0.5, 1.5);
    double fx2 = rng.uniform(1.0, 2.5), fy2 = rng.uniform(1.0, 2.5);

    Tensor out({h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int cls = int(tissue.label_grid.at(y, x));
            auto it = modality.intensity_table.find(cls);
            require(it != modality.intensity_table.end(),
                    "render_modality: tissue class " + std::to_string(cls) +
                        " missing from intensity table of " + modality.name);
            double bias = 1.0;
            if (modality.bias_field_amp > 0.0) {
                double u = double(x) / double(w), v = double(y) / double(h);
                double b = 0.6 * std::cos(6.28 * (fx1 * u + fy1 * v) + ph1) +
                           0.4 * std::cos(6.28 * (fx2 * u - fy2 * v) + ph2);
                bias = 1.0 + modality.bias_field_amp * b;
            }
            double value = it->second * bias;
            if (modality.noise_sigma > 0.0) value += rng.normal(0.0, modality.noise_sigma);
            out.at(y, x) = std::clamp(value, 0.0, 1.0);
        }
    }
    return out;
}

std::vector<SliceRecord> generate_phantom_volume(uint64_t seed, const ModalitySpec& modality,
                                                 int num_slices, int organ_count, int volume_id,
                                                 int image_size) {
    require(num_slices >= 1, "generate_phantom_volume: num_slices must be >= 1");
    require(organ_count >= 1 && organ_count <= kMaxOrganClasses,
            "generate_phantom_volume: organ_count must be in [1,4]");
    if (volume_id < 0) volume_id = int(seed & 0x7FFFFFFFull);

    std::vector<SliceRecord> records;
    records.reserve(size_t(num_slices));
    const std::string attributes = map_modality_attributes(modality);
    for (int s = 0; s < num_slices; ++s) {
        TissueMap tissue = make_tissue_map(seed, image_size, s, num_slices, organ_count);
        Tensor raw = render_modality(tissue, modality, derive_seed(seed, "slice", uint64_t(s)));
        SliceRecord rec;
        rec.image = clip_and_rescale(raw);
        Tensor mask = tissue.label_grid.clone();
        rec.mask = std::move(mask);
        rec.modality = modality.name;
        rec.attributes = attributes;
        rec.region = region_for_slice(s, num_slices);
        rec.volume_id = volume_id;
        rec.slice_index = s;
        records.push_back(std::move(rec));
    }
    return records;
}

Tensor clip_and_rescale(const Tensor& raw, double lo_pct, double hi_pct) {
    require(raw.numel() > 0, "clip_and_rescale: empty grid");
    require(raw.all_finite(), "clip_and_rescale: non-finite input");
    std::vector<double> sorted(raw.data(), raw.data() + raw.numel());
    std::sort(sorted.begin(), sorted.end());
    // Order-statistic percentiles: floor index for the low cut, ceil for the
    // high cut. Both cuts land on data values, which makes re-applying the
    // preprocessing to its own output an exact no-op.
    auto lo_idx = size_t(std::floor(lo_pct / 100.0 * double(sorted.size() - 1)));
    auto hi_idx = size_t(std::ceil(hi_pct / 100.0 * double(sorted.size() - 1)));
    double lo = sorted[lo_idx];
    double hi = sorted[hi_idx];

    Tensor out(raw.shape());
    if (hi - lo < 1e-12) {
        out.fill(-1.0);  // degenerate range maps to the minimum
        return out;
    }
    for (int64_t i = 0; i < raw.numel(); ++i) {
        double v = std::clamp(raw[i], lo, hi);
        out[i] = 2.0 * (v - lo) / (hi - lo) - 1.0;
    }
    return out;
}

Tensor apply_fliprot(const Tensor& grid, FlipRot op) {
    require(grid.ndim() == 2, "apply_fliprot: expected HxW grid");
    const int h = grid.dim(0), w = grid.dim(1);
    Tensor out = op == FlipRot::Rot90 || op == FlipRot::Rot270 ? Tensor({w, h}) : Tensor({h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double v = grid.at(y, x);
            switch (op) {
                case FlipRot::HFlip: out.at(y, w - 1 - x) = v; break;
                case FlipRot::VFlip: out.at(h - 1 - y, x) = v; break;
                case FlipRot::Rot90: out.at(x, h - 1 - y) = v; break;   // clockwise
                case FlipRot::Rot180: out.at(h - 1 - y, w - 1 - x) = v; break;
                case FlipRot::Rot270: out.at(w - 1 - x, y) = v; break;
            }
        }
    }
    return out;
}

SliceRecord augment(const SliceRecord& record, double probability, Rng& rng) {
    if (rng.uniform() >= probability) return record;
    auto op = FlipRot(rng.randint(0, 4));
    SliceRecord out = record;
    out.image = apply_fliprot(record.image, op);
    if (record.mask) out.mask = apply_fliprot(*record.mask, op);
    return out;
}

std::string map_modality_attributes(const ModalitySpec& modality) {
    auto level = [&](int cls) -> std::string {
        auto it = modality.intensity_table.find(cls);
        double v = it == modality.intensity_table.end() ? 0.0 : it->second;
        if (v >= 0.66) return "high";
        if (v >= 0.33) return "intermediate";
        return "low";
    };
    return "fat " + level(kTissueFat) + " signal, muscle " + level(kTissueMuscle) +
           " signal, water " + level(kTissueWater) + " signal";
}

std::string region_for_slice(int slice_index, int num_slices) {
    const auto& names = region_names();
    int band = int(int64_t(slice_index) * int64_t(names.size()) / int64_t(num_slices));
    band = std::clamp(band, 0, int(names.size()) - 1);
    return names[size_t(band)];
}

ModalitySpec default_modality_p1() {
    ModalitySpec m;
    m.name = "P1";
    m.intensity_table = {{kTissueBackground, 0.35},
                         {kTissueFat, 0.92},
                         {kTissueMuscle, 0.60},
                         {kTissueWater, 0.08},
                         {kTissueBone, 0.75}};
    m.noise_sigma = 0.03;
    m.bias_field_amp = 0.12;
    return m;
}

ModalitySpec default_modality_p2() {
    ModalitySpec m;
    m.name = "P2";
    m.intensity_table = {{kTissueBackground, 0.65},
                         {kTissueFat, 0.08},
                         {kTissueMuscle, 0.40},
                         {kTissueWater, 0.92},
                         {kTissueBone, 0.25}};
    m.noise_sigma = 0.03;
    m.bias_field_amp = 0.12;
    return m;
}

}  // namespace crossgen
