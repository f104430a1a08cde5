#include "crossgen/checkpoint.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace crossgen {

using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

std::string to_hex(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)v);
    return std::string(buf);
}

ordered_json meta_to_json(const CheckpointMeta& meta) {
    ordered_json j;
    j["stage"] = meta.stage;
    j["step"] = meta.step;
    j["config_hash"] = meta.config_hash;
    j["parent_hash"] = meta.parent_hash;
    ordered_json extra = ordered_json::object();
    for (const auto& [k, v] : meta.extra) extra[k] = v;
    j["extra"] = extra;
    return j;
}

CheckpointMeta meta_from_json(const ordered_json& j) {
    CheckpointMeta meta;
    meta.stage = j.at("stage").get<std::string>();
    meta.step = j.at("step").get<int64_t>();
    meta.config_hash = j.at("config_hash").get<std::string>();
    meta.parent_hash = j.value("parent_hash", std::string());
    if (j.contains("extra"))
        for (const auto& [k, v] : j.at("extra").items()) meta.extra[k] = v.get<double>();
    return meta;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<nn::Param*>& params,
                     const CheckpointMeta& meta) {
    std::vector<float> payload;
    ordered_json tensors = ordered_json::array();
    for (const nn::Param* p : params) {
        ordered_json entry;
        entry["name"] = p->name;
        entry["dims"] = p->value.shape();
        tensors.push_back(entry);
        for (int64_t i = 0; i < p->value.numel(); ++i) payload.push_back(float(p->value[i]));
    }
    uint64_t checksum = fnv1a(payload.data(), payload.size() * sizeof(float));

    ordered_json header = meta_to_json(meta);
    header["checksum"] = to_hex(checksum);
    header["tensors"] = tensors;

    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        require(out.good(), "save_checkpoint: cannot open " + tmp);
        out << header.dump() << "\n";
        out.write(reinterpret_cast<const char*>(payload.data()),
                  std::streamsize(payload.size() * sizeof(float)));
        require(out.good(), "save_checkpoint: write failed for " + tmp);
    }
    fs::rename(tmp, path);
}

CheckpointMeta peek_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "checkpoint: cannot open " + path);
    std::string line;
    std::getline(in, line);
    return meta_from_json(ordered_json::parse(line));
}

CheckpointMeta load_checkpoint(const std::string& path, const std::vector<nn::Param*>& params,
                               const std::string& expected_stage) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "load_checkpoint: cannot open " + path);
    std::string line;
    std::getline(in, line);
    ordered_json header = ordered_json::parse(line);
    CheckpointMeta meta = meta_from_json(header);
    if (!expected_stage.empty() && meta.stage != expected_stage)
        throw std::runtime_error("load_checkpoint: stage mismatch in " + path + " (found '" +
                                 meta.stage + "', expected '" + expected_stage + "')");

    const auto& tensors = header.at("tensors");
    int64_t total = 0;
    for (const auto& t : tensors) total += Tensor::count(t.at("dims").get<std::vector<int>>());
    std::vector<float> payload(static_cast<size_t>(total));
    in.read(reinterpret_cast<char*>(payload.data()), std::streamsize(payload.size() * sizeof(float)));
    require(in.gcount() == std::streamsize(payload.size() * sizeof(float)),
            "load_checkpoint: truncated archive " + path);

    uint64_t checksum = fnv1a(payload.data(), payload.size() * sizeof(float));
    if (to_hex(checksum) != header.at("checksum").get<std::string>())
        throw std::runtime_error("load_checkpoint: checksum mismatch in " + path);

    require(tensors.size() == params.size(),
            "load_checkpoint: tensor count mismatch in " + path);
    size_t off = 0;
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& entry = tensors[i];
        nn::Param* p = params[i];
        require(entry.at("name").get<std::string>() == p->name,
                "load_checkpoint: tensor name mismatch: " + entry.at("name").get<std::string>() +
                    " vs " + p->name);
        auto dims = entry.at("dims").get<std::vector<int>>();
        require(dims == p->value.shape(), "load_checkpoint: shape mismatch for " + p->name);
        for (int64_t k = 0; k < p->value.numel(); ++k) p->value[k] = double(payload[off++]);
    }
    return meta;
}

std::string file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "file_hash: cannot open " + path);
    uint64_t h = 0xCBF29CE484222325ull;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
        h = fnv1a(buf, size_t(in.gcount()), h);
    return to_hex(h);
}

}  // namespace crossgen
