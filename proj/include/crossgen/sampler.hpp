#pragma once

#include <optional>

#include "crossgen/controller.hpp"

namespace crossgen {

// Conditioning inputs for one generation.
struct GenerationRequest {
    PromptSpec prompt;
    std::optional<MaskImage> mask;
    double guidance_weight = 7.0;
    int steps = 50;
    uint64_t seed = 0;
};

// eps = eps_uncond + w (eps_cond - eps_uncond); w=0 gives the unconditional
// prediction, w=1 the conditional one, bit-exactly.
Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double w);

// Everything a generation needs beyond the request. controller may be null
// only for mask-free requests. latent_scale comes from the diffusion
// checkpoint.
struct SamplerContext {
    const UnetModel* denoiser = nullptr;
    const MaskController* controller = nullptr;
    const VaeModel* vae = nullptr;
    const TextEncoder* text = nullptr;
    const Vocabulary* vocab = nullptr;
    const NoiseSchedule* sched = nullptr;
    double latent_scale = 1.0;
};

// Classifier-free-guided DDIM generation: z_T from the seed, two denoiser
// evaluations per step (the unconditional branch keeps the mask when one is
// present), decode of the final z0 prediction. Deterministic given the seed.
Tensor generate(const GenerationRequest& request, const SamplerContext& ctx);

// One synthesized candidate on disk plus its full provenance.
struct CandidateRecord {
    std::string image_path;
    std::string cond_mask_path;  // conditioning organ-label grid
    int group = 0;               // candidates of one mask share a group
    int candidate_index = 0;
    uint64_t seed = 0;
    std::string prompt;
    double guidance_weight = 7.0;
    int steps = 50;
    std::string checkpoint_hash;
};

void save_candidates(const std::string& path, const std::vector<CandidateRecord>& records);
std::vector<CandidateRecord> load_candidates(const std::string& path);

struct SynthesisConfig {
    int candidates_per_mask = 20;
    int max_masks = 0;  // 0 = every annotated record in the mask manifest
    double guidance_weight = 7.0;
    int steps = 50;
    int k_max = 4;
    int threads = 2;
};

// Synthesizes candidates for the target modality conditioned on the source
// manifest's masks (prompt = target attributes, source record's region and
// organ list). Writes images under out_dir and returns the records.
std::vector<CandidateRecord> synthesize_candidates(
    const DatasetManifest& mask_manifest, const ModalitySpec& target_modality,
    const SamplerContext& ctx, const SynthesisConfig& cfg, const std::string& out_dir,
    const std::string& checkpoint_hash, uint64_t seed);

}  // namespace crossgen
