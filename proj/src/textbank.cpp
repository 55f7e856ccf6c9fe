#include "mvfa/textbank.hpp"

#include <cmath>
#include <sstream>

#include "mvfa/io.hpp"
#include "mvfa/rng.hpp"

namespace mvfa {

namespace {

std::size_t count_occurrences(const std::string& s, const std::string& needle) {
    std::size_t n = 0;
    for (std::size_t pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + needle.size())) ++n;
    return n;
}

void require_placeholder(const std::string& pattern, const std::string& placeholder) {
    const std::size_t n = count_occurrences(pattern, placeholder);
    if (n != 1) {
        throw DataError("prompt pattern '" + pattern + "' must contain " + placeholder + " exactly once (found " +
                        std::to_string(n) + ")");
    }
}

std::string substitute(const std::string& pattern, const std::string& placeholder, const std::string& value) {
    std::string out = pattern;
    out.replace(out.find(placeholder), placeholder.size(), value);
    return out;
}

std::vector<std::string> split_ws(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> tokens;
    for (std::string tok; in >> tok;) tokens.push_back(tok);
    return tokens;
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

PromptSet PromptSet::defaults() {
    PromptSet p;
    for (const char* s : {"[o]", "flawless [o]", "perfect [o]", "unblemished [o]", "[o] without flaw",
                          "[o] without defect", "[o] without damage"}) {
        p.states.push_back({Polarity::normal, s});
    }
    for (const char* s : {"damaged [o]", "[o] with flaw", "[o] with defect", "[o] with damage"}) {
        p.states.push_back({Polarity::abnormal, s});
    }
    p.templates = {
        "a photo of a/the/one [c].",
        "a photo of a/the cool [c].",
        "a photo of a/the small [c].",
        "a photo of a/the large [c].",
        "a bright photo of a/the [c].",
        "a dark photo of a/the [c].",
        "a blurry photo of a/the [c].",
        "a bad photo of a/the [c].",
        "a good photo of a/the [c].",
        "a cropped photo of a/the [c].",
        "a close-up photo of a/the [c].",
        "a photo of my [c].",
        "a low resolution photo of a/the [c].",
        "a black and white photo of a/the [c].",
        "a jpeg corrupted photo of a/the [c].",
        "there is a/the [c] in the scene.",
        "this is a/the/one [c] in the scene.",
    };
    return p;
}

PromptSet PromptSet::parse(const std::string& text) {
    PromptSet p;
    std::istringstream in(text);
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        if (line.size() < 3 || line[1] != ' ') {
            throw DataError("prompt file line " + std::to_string(line_no) + ": expected '+ ', '- ' or 'T ' prefix");
        }
        const std::string body = line.substr(2);
        switch (line[0]) {
            case '-':
                require_placeholder(body, "[o]");
                p.states.push_back({Polarity::normal, body});
                break;
            case '+':
                require_placeholder(body, "[o]");
                p.states.push_back({Polarity::abnormal, body});
                break;
            case 'T':
                require_placeholder(body, "[c]");
                p.templates.push_back(body);
                break;
            default:
                throw DataError("prompt file line " + std::to_string(line_no) + ": unknown prefix '" +
                                std::string(1, line[0]) + "'");
        }
    }
    return p;
}

PromptSet PromptSet::load(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    return parse(std::string(bytes.begin(), bytes.end()));
}

std::vector<std::string> expand_alternates(const std::string& pattern) {
    std::vector<std::string> results{""};
    for (const std::string& tok : split_ws(pattern)) {
        std::vector<std::string> options;
        if (tok.find('/') != std::string::npos) {
            std::size_t start = 0;
            for (std::size_t slash = tok.find('/'); ; slash = tok.find('/', start)) {
                options.push_back(tok.substr(start, slash - start));
                if (slash == std::string::npos) break;
                start = slash + 1;
            }
        } else {
            options.push_back(tok);
        }
        std::vector<std::string> next;
        next.reserve(results.size() * options.size());
        for (const std::string& prefix : results)
            for (const std::string& opt : options) next.push_back(prefix.empty() ? opt : prefix + " " + opt);
        results = std::move(next);
    }
    return results;
}

ExpandedPrompts expand_prompts(const PromptSet& prompts, const std::string& object_name) {
    if (object_name.empty()) throw DataError("expand_prompts: object name is empty");
    std::vector<std::string> templates;
    for (const std::string& t : prompts.templates) {
        require_placeholder(t, "[c]");
        for (std::string& e : expand_alternates(t)) templates.push_back(std::move(e));
    }
    ExpandedPrompts out;
    for (const StatePattern& s : prompts.states) {
        require_placeholder(s.pattern, "[o]");
        const std::string state = substitute(s.pattern, "[o]", object_name);
        auto& dst = s.polarity == Polarity::normal ? out.normal : out.abnormal;
        for (const std::string& t : templates) dst.push_back(substitute(t, "[c]", state));
    }
    return out;
}

Tensor encode_text_stub(const std::string& text, std::uint64_t seed, std::size_t dim, Precision precision) {
    const auto tokens = split_ws(text);
    if (tokens.empty()) throw DataError("encode_text_stub: empty text");
    std::vector<double> acc(dim, 0.0);
    for (const std::string& tok : tokens) {
        Rng rng(mix_seed(seed, fnv1a(tok)));
        for (double& v : acc) v += rng.normal();
    }
    double ss = 0.0;
    for (double v : acc) ss += v * v;
    const double n = std::sqrt(ss);
    for (double& v : acc) v /= n;
    return Tensor::from({1, dim}, std::move(acc), precision);
}

TextFeatures build_text_features(const ExpandedPrompts& prompts, std::uint64_t seed, std::size_t dim,
                                 Precision precision) {
    if (prompts.normal.empty() || prompts.abnormal.empty()) {
        throw DataError("build_text_features: both polarities need at least one prompt");
    }
    std::vector<double> rows(2 * dim, 0.0);
    auto accumulate = [&](const std::vector<std::string>& list, std::size_t row) {
        // Embeddings stay in double here; only the final rows are rounded.
        for (const std::string& s : list) {
            Tensor e = encode_text_stub(s, seed, dim, Precision::f64);
            for (std::size_t j = 0; j < dim; ++j) rows[row * dim + j] += e[j];
        }
        double ss = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
            rows[row * dim + j] /= static_cast<double>(list.size());
            ss += rows[row * dim + j] * rows[row * dim + j];
        }
        const double n = std::sqrt(ss);
        for (std::size_t j = 0; j < dim; ++j) rows[row * dim + j] /= n;
    };
    accumulate(prompts.normal, 0);
    accumulate(prompts.abnormal, 1);
    return {Tensor::from({2, dim}, std::move(rows), precision)};
}

TextFeatures build_text_features(const PromptSet& prompts, const std::string& object_name, std::uint64_t seed,
                                 std::size_t dim, Precision precision) {
    return build_text_features(expand_prompts(prompts, object_name), seed, dim, precision);
}

}  // namespace mvfa
