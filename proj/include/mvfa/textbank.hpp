#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mvfa/tensor.hpp"

namespace mvfa {

enum class Polarity : std::uint8_t { normal, abnormal };

struct StatePattern {
    Polarity polarity;
    std::string pattern;  // contains "[o]" exactly once
};

// Two-tier prompt scheme: state patterns name the object, templates wrap a
// state. A whitespace token such as "a/the/one" in a template expands into
// one prompt per alternative.
struct PromptSet {
    std::vector<StatePattern> states;
    std::vector<std::string> templates;  // contain "[c]" exactly once

    // 7 normal and 4 abnormal states, 17 templates (35 expanded forms).
    static PromptSet defaults();

    // Plain text, one pattern per line: "- " normal state, "+ " abnormal
    // state, "T " template. Blank lines and lines starting with '#' are
    // ignored.
    static PromptSet parse(const std::string& text);
    static PromptSet load(const std::filesystem::path& path);
};

// Expands slash alternates: "a photo of a/the [c]." -> two strings.
std::vector<std::string> expand_alternates(const std::string& pattern);

struct ExpandedPrompts {
    std::vector<std::string> normal;
    std::vector<std::string> abnormal;
};

ExpandedPrompts expand_prompts(const PromptSet& prompts, const std::string& object_name);

// Deterministic stand-in for a text encoder: each whitespace token seeds a
// d-dimensional normal draw, the draws are summed and the sum is
// l2-normalized. Result is 1 x d.
Tensor encode_text_stub(const std::string& text, std::uint64_t seed, std::size_t dim,
                        Precision precision = Precision::f32);

// Row 0 averages the normal prompts, row 1 the abnormal ones; each row is
// l2-normalized. Means are accumulated in double.
struct TextFeatures {
    Tensor f_text;  // 2 x d
};

TextFeatures build_text_features(const PromptSet& prompts, const std::string& object_name, std::uint64_t seed,
                                 std::size_t dim, Precision precision = Precision::f32);

// Same as above starting from already expanded prompt lists.
TextFeatures build_text_features(const ExpandedPrompts& prompts, std::uint64_t seed, std::size_t dim,
                                 Precision precision = Precision::f32);

}  // namespace mvfa
