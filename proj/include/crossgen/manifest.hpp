#pragma once

#include <string>
#include <vector>

#include "crossgen/phantom.hpp"

namespace crossgen {

// One manifest line: a slice on disk plus its metadata.
struct ManifestRecord {
    std::string path;
    std::string modality;
    std::string attributes;
    std::string region;
    int volume_id = 0;
    int slice_index = 0;
    bool has_mask = false;
    std::string mask_path;
};

struct DatasetManifest {
    std::vector<ManifestRecord> records;
    std::string split;        // train | test
    std::string source_kind;  // source_domain | target_domain | synthetic
};

// JSONL, one record per line, fields exactly
// {path, modality, attributes, region, volume_id, slice_index, has_mask, mask_path}.
void save_manifest(const std::string& path, const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::string& path, const std::string& split = "",
                              const std::string& source_kind = "");

// Volume-granularity split: no volume ever straddles train/test. The train
// share is round(fraction * volumes), clamped so both sides are non-empty.
std::pair<DatasetManifest, DatasetManifest> build_manifest(
    const std::vector<ManifestRecord>& records, double split_fraction, uint64_t seed,
    const std::string& source_kind);

// Writes a record's tensors under dir and returns its manifest entry.
// strip_mask drops the mask from the manifest AND redirects the mask file to
// a quarantine subdirectory (used for unannotated target-domain training
// splits, whose masks exist as ground truth but must stay unreadable to every
// training path).
ManifestRecord write_slice(const std::string& dir, const SliceRecord& rec,
                           bool strip_mask = false);

SliceRecord read_slice(const ManifestRecord& rec);

std::vector<int> manifest_volume_ids(const DatasetManifest& m);

}  // namespace crossgen
