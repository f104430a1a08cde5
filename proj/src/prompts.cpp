#include "crossgen/prompts.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "crossgen/tensor.hpp"

namespace crossgen {

using ordered_json = nlohmann::ordered_json;

std::string render_prompt(const PromptSpec& spec) {
    std::string organs;
    const auto& o = spec.organs;
    if (o.size() == 1) {
        organs = o[0];
    } else if (o.size() == 2) {
        organs = o[0] + " and " + o[1];
    } else if (o.size() > 2) {
        for (size_t i = 0; i + 1 < o.size(); ++i) organs += o[i] + ", ";
        organs += "and " + o.back();
    }
    return spec.modality + " MRI; " + spec.attributes + "; " + spec.region + "; " + organs;
}

std::vector<std::string> Vocabulary::split_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::string word;
    auto flush = [&]() {
        if (!word.empty()) {
            out.push_back(word);
            word.clear();
        }
    };
    for (char c : text) {
        if (c == ' ' || c == '\t' || c == '\n') {
            flush();
        } else if (c == ';' || c == ',') {
            flush();
            out.emplace_back(1, c);
        } else {
            word.push_back(c);
        }
    }
    flush();
    return out;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& prompts, int max_len) {
    require(max_len >= 2, "vocabulary: max_len too small");
    Vocabulary v;
    v.max_len_ = max_len;
    v.tokens_ = {"<pad>", "<null>"};
    std::set<std::string> seen;
    for (const auto& p : prompts)
        for (const auto& tok : split_tokens(p)) seen.insert(tok);
    for (const auto& tok : seen) v.tokens_.push_back(tok);
    for (size_t i = 0; i < v.tokens_.size(); ++i) v.ids_[v.tokens_[i]] = int(i);
    return v;
}

std::vector<int> Vocabulary::tokenize(const std::string& prompt) const {
    std::vector<int> out(size_t(max_len_), kPadToken);
    if (prompt.empty()) {
        out[0] = kNullPromptToken;
        return out;
    }
    auto toks = split_tokens(prompt);
    size_t n = std::min(toks.size(), size_t(max_len_));
    for (size_t i = 0; i < n; ++i) {
        auto it = ids_.find(toks[i]);
        require(it != ids_.end(), "tokenize: out-of-vocabulary token '" + toks[i] + "'");
        out[i] = it->second;
    }
    return out;
}

std::string Vocabulary::detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id == kPadToken) continue;
        if (id == kNullPromptToken) continue;
        require(id >= 0 && id < size(), "detokenize: id out of range");
        const std::string& tok = tokens_[size_t(id)];
        if (tok == ";" || tok == ",") {
            out += tok;
        } else {
            if (!out.empty()) out += " ";
            out += tok;
        }
    }
    return out;
}

std::vector<int> Vocabulary::null_tokens() const { return tokenize(""); }

void Vocabulary::save(const std::string& path) const {
    ordered_json j;
    j["max_len"] = max_len_;
    ordered_json map = ordered_json::object();
    for (size_t i = 0; i < tokens_.size(); ++i) map[tokens_[i]] = int(i);
    j["tokens"] = map;
    atomic_write_text(path, j.dump(2) + "\n");
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "vocabulary: cannot open " + path);
    ordered_json j = ordered_json::parse(in);
    Vocabulary v;
    v.max_len_ = j.at("max_len").get<int>();
    const auto& map = j.at("tokens");
    v.tokens_.resize(map.size());
    for (const auto& [tok, id] : map.items()) {
        v.tokens_[size_t(id.get<int>())] = tok;
        v.ids_[tok] = id.get<int>();
    }
    return v;
}

std::optional<PromptSpec> drop_prompt(const PromptSpec& spec, double p, Rng& rng) {
    require(p >= 0.0 && p <= 1.0, "drop_prompt: p must be in [0,1]");
    if (rng.uniform() < p) return std::nullopt;
    return spec;
}

}  // namespace crossgen
