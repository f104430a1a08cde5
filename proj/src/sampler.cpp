#include "crossgen/sampler.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace crossgen {

using nn::Graph;
namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double w) {
    require(eps_cond.same_shape(eps_uncond), "cfg_combine: shape mismatch");
    Tensor out(eps_cond.shape());
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = eps_uncond[i] + w * (eps_cond[i] - eps_uncond[i]);
    return out;
}

Tensor generate(const GenerationRequest& request, const SamplerContext& ctx) {
    require(ctx.denoiser && ctx.vae && ctx.text && ctx.vocab && ctx.sched,
            "generate: incomplete sampler context");
    require(request.steps >= 1, "generate: steps must be >= 1");
    require(!request.mask || ctx.controller,
            "generate: mask conditioning requires a controller");

    const UnetConfig& ucfg = ctx.denoiser->config();
    Rng rng(derive_seed(request.seed, "gen_init"));
    Tensor z = Tensor::randn({ucfg.latent_channels, ucfg.latent_hw, ucfg.latent_hw}, rng);

    ConditioningMatrix cond =
        ctx.text->embed_tokens(ctx.vocab->tokenize(render_prompt(request.prompt)), false);
    ConditioningMatrix uncond = ctx.text->embed_tokens(ctx.vocab->null_tokens(), true);

    MaskImage mask_img;
    if (request.mask) {
        mask_img = *request.mask;
        if (mask_img.image.ndim() == 2)
            mask_img.image =
                mask_img.image.reshaped({1, mask_img.image.dim(0), mask_img.image.dim(1)});
    }

    auto eval = [&](const Tensor& z_t, int t, const ConditioningMatrix& c) {
        if (request.mask) return controlled_denoise(*ctx.denoiser, *ctx.controller, z_t, t, c,
                                                    mask_img);
        return ctx.denoiser->denoise(z_t, t, c);
    };

    auto ts = ddim_timesteps(ctx.sched->T, request.steps);
    for (size_t i = 0; i < ts.size(); ++i) {
        int t = ts[i];
        int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        Tensor eps_c = eval(z, t, cond);
        Tensor eps_u = eval(z, t, uncond);
        Tensor eps = cfg_combine(eps_c, eps_u, request.guidance_weight);
        z = ddim_step(z, eps, t, t_prev, *ctx.sched);
    }

    for (int64_t i = 0; i < z.numel(); ++i) z[i] /= ctx.latent_scale;
    Tensor image = ctx.vae->decode_latent(z);
    return image.reshaped({image.dim(1), image.dim(2)});
}

void save_candidates(const std::string& path, const std::vector<CandidateRecord>& records) {
    std::ostringstream out;
    for (const auto& r : records) {
        ordered_json j;
        j["image_path"] = r.image_path;
        j["cond_mask_path"] = r.cond_mask_path;
        j["group"] = r.group;
        j["candidate_index"] = r.candidate_index;
        j["seed"] = r.seed;
        j["prompt"] = r.prompt;
        j["w"] = r.guidance_weight;
        j["steps"] = r.steps;
        j["checkpoint_hash"] = r.checkpoint_hash;
        out << j.dump() << "\n";
    }
    atomic_write_text(path, out.str());
}

std::vector<CandidateRecord> load_candidates(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "load_candidates: cannot open " + path);
    std::vector<CandidateRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ordered_json j = ordered_json::parse(line);
        CandidateRecord r;
        r.image_path = j.at("image_path").get<std::string>();
        r.cond_mask_path = j.at("cond_mask_path").get<std::string>();
        r.group = j.at("group").get<int>();
        r.candidate_index = j.at("candidate_index").get<int>();
        r.seed = j.at("seed").get<uint64_t>();
        r.prompt = j.at("prompt").get<std::string>();
        r.guidance_weight = j.at("w").get<double>();
        r.steps = j.at("steps").get<int>();
        r.checkpoint_hash = j.at("checkpoint_hash").get<std::string>();
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<CandidateRecord> synthesize_candidates(
    const DatasetManifest& mask_manifest, const ModalitySpec& target_modality,
    const SamplerContext& ctx, const SynthesisConfig& cfg, const std::string& out_dir,
    const std::string& checkpoint_hash, uint64_t seed) {
    require(ctx.controller != nullptr, "synthesize: controller checkpoint required");
    std::vector<const ManifestRecord*> with_masks;
    for (const auto& r : mask_manifest.records)
        if (r.has_mask) with_masks.push_back(&r);
    require(!with_masks.empty(), "synthesize: mask manifest has no annotated records");

    // Deterministic stride subset when a mask budget is set.
    std::vector<const ManifestRecord*> picked;
    if (cfg.max_masks > 0 && int(with_masks.size()) > cfg.max_masks) {
        double stride = double(with_masks.size()) / double(cfg.max_masks);
        for (int i = 0; i < cfg.max_masks; ++i)
            picked.push_back(with_masks[size_t(double(i) * stride)]);
    } else {
        picked = with_masks;
    }

    fs::create_directories(out_dir);
    const std::string target_attrs = map_modality_attributes(target_modality);

    struct Job {
        CandidateRecord rec;
        GenerationRequest req;
    };
    std::vector<Job> jobs;
    for (size_t gi = 0; gi < picked.size(); ++gi) {
        const ManifestRecord& src = *picked[gi];
        Tensor labels = load_tensor(src.mask_path);

        PromptSpec prompt;
        prompt.modality = target_modality.name;
        prompt.attributes = target_attrs;
        prompt.region = src.region;
        std::set<int> classes;
        for (int64_t i = 0; i < labels.numel(); ++i)
            if (int(labels[i]) > 0) classes.insert(int(labels[i]));
        for (int c : classes) prompt.organs.push_back(organ_names()[size_t(c - 1)]);

        MaskImage mask = encode_mask(labels, cfg.k_max);
        for (int c = 0; c < cfg.candidates_per_mask; ++c) {
            Job job;
            job.req.prompt = prompt;
            job.req.mask = mask;
            job.req.guidance_weight = cfg.guidance_weight;
            job.req.steps = cfg.steps;
            job.req.seed = derive_seed(seed, "synthesis", gi, uint64_t(c));
            char name[64];
            std::snprintf(name, sizeof(name), "cand_g%04d_c%02d.ten", int(gi), c);
            job.rec.image_path = (fs::path(out_dir) / name).string();
            job.rec.cond_mask_path = src.mask_path;
            job.rec.group = int(gi);
            job.rec.candidate_index = c;
            job.rec.seed = job.req.seed;
            job.rec.prompt = render_prompt(prompt);
            job.rec.guidance_weight = cfg.guidance_weight;
            job.rec.steps = cfg.steps;
            job.rec.checkpoint_hash = checkpoint_hash;
            jobs.push_back(std::move(job));
        }
    }

    parallel_for(int64_t(jobs.size()), cfg.threads, [&](int64_t i) {
        Tensor image = generate(jobs[size_t(i)].req, ctx);
        save_tensor(jobs[size_t(i)].rec.image_path, image);
    });

    std::vector<CandidateRecord> records;
    records.reserve(jobs.size());
    for (auto& j : jobs) records.push_back(std::move(j.rec));
    save_candidates((fs::path(out_dir) / "candidates.jsonl").string(), records);
    return records;
}

}  // namespace crossgen
