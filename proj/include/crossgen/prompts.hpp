#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "crossgen/rng.hpp"

namespace crossgen {

// The four conditioning fields rendered into the templated prompt.
struct PromptSpec {
    std::string modality;
    std::string attributes;
    std::string region;
    std::vector<std::string> organs;
};

// "{modality} MRI; {attributes}; {region}; {a, b, and c}"
std::string render_prompt(const PromptSpec& spec);

inline constexpr int kPadToken = 0;
inline constexpr int kNullPromptToken = 1;

// Closed-world tokenizer over the corpus prompt space. Words and the
// punctuation tokens ';' and ',' get ids; anything else is rejected.
class Vocabulary {
public:
    static Vocabulary build(const std::vector<std::string>& prompts, int max_len);

    // Pad/truncate to max_len. The empty string encodes the null prompt:
    // [NULL, PAD, PAD, ...].
    std::vector<int> tokenize(const std::string& prompt) const;
    std::string detokenize(const std::vector<int>& ids) const;
    std::vector<int> null_tokens() const;

    int size() const { return int(tokens_.size()); }
    int max_len() const { return max_len_; }

    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

    static std::vector<std::string> split_tokens(const std::string& text);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
    int max_len_ = 0;
};

// Whole-prompt dropout for classifier-free guidance: returns nullopt with
// probability p, otherwise the spec unchanged.
std::optional<PromptSpec> drop_prompt(const PromptSpec& spec, double p, Rng& rng);

}  // namespace crossgen
