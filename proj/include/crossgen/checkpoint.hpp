#pragma once

#include <map>
#include <string>
#include <vector>

#include "crossgen/nn.hpp"

namespace crossgen {

// Metadata carried by every checkpoint archive. `extra` holds stage-specific
// scalars (e.g. the latent scale measured after autoencoder training).
struct CheckpointMeta {
    std::string stage;
    int64_t step = 0;
    std::string config_hash;
    std::string parent_hash;  // archive hash of the checkpoint this one builds on
    std::map<std::string, double> extra;
};

// Single-file archive: one JSON header line (metadata + tensor directory +
// payload checksum) followed by the concatenated float32 tensor payloads.
// Writes are atomic (temp file + rename).
void save_checkpoint(const std::string& path, const std::vector<nn::Param*>& params,
                     const CheckpointMeta& meta);

// Loads values into an already-constructed store; names and shapes must match
// exactly. Verifies the payload checksum and, when expected_stage is
// non-empty, the stage tag.
CheckpointMeta load_checkpoint(const std::string& path, const std::vector<nn::Param*>& params,
                               const std::string& expected_stage);

// Reads only the header.
CheckpointMeta peek_checkpoint(const std::string& path);

// FNV-1a over a whole file; used for parent-checkpoint provenance.
std::string file_hash(const std::string& path);

}  // namespace crossgen
