#include "mvfa/data.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mvfa/io.hpp"
#include "mvfa/rng.hpp"

namespace mvfa {

// ---- PGM -------------------------------------------------------------------

std::vector<std::uint8_t> encode_pgm(const GrayImage& image) {
    if (image.pixels.size() != std::size_t{image.width} * image.height || image.width == 0 || image.height == 0) {
        throw ContractError("encode_pgm: pixel count does not match " + std::to_string(image.width) + "x" +
                            std::to_string(image.height));
    }
    io::ByteWriter w;
    w.raw("P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n");
    w.bytes(image.pixels);
    return w.take();
}

namespace {

class HeaderParser {
public:
    explicit HeaderParser(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            if (std::isspace(bytes_[pos_])) {
                ++pos_;
            } else if (bytes_[pos_] == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else {
                break;
            }
        }
    }

    std::uint32_t number(const char* what) {
        skip_space_and_comments();
        const std::size_t start = pos_;
        std::uint64_t v = 0;
        while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
            v = v * 10 + (bytes_[pos_] - '0');
            if (v > 0xFFFFFFFFULL) throw FormatError(std::string("PGM ") + what + " too large", start);
            ++pos_;
        }
        if (pos_ == start) throw FormatError(std::string("PGM: expected ") + what, start);
        return static_cast<std::uint32_t>(v);
    }

    std::size_t pos_ = 0;
    std::span<const std::uint8_t> bytes_;
};

}  // namespace

GrayImage decode_pgm(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw FormatError("PGM: missing P5 magic", 0);
    HeaderParser p(bytes);
    p.pos_ = 2;
    GrayImage img;
    img.width = p.number("width");
    img.height = p.number("height");
    p.skip_space_and_comments();
    const std::size_t maxval_at = p.pos_;
    const std::uint32_t maxval = p.number("maxval");
    if (maxval != 255) throw FormatError("PGM: maxval " + std::to_string(maxval) + " is not 255", maxval_at);
    if (img.width == 0 || img.height == 0) throw FormatError("PGM: zero dimension", maxval_at);
    if (p.pos_ >= bytes.size() || !std::isspace(bytes[p.pos_])) {
        throw FormatError("PGM: expected single whitespace after maxval", p.pos_);
    }
    ++p.pos_;
    const std::size_t n = std::size_t{img.width} * img.height;
    if (bytes.size() - p.pos_ != n) {
        throw FormatError("PGM: expected " + std::to_string(n) + " pixel bytes, found " +
                              std::to_string(bytes.size() - p.pos_),
                          p.pos_);
    }
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(p.pos_), bytes.end());
    return img;
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
    io::write_file_atomic(path, encode_pgm(image));
}

GrayImage read_pgm(const std::filesystem::path& path) {
    try {
        return decode_pgm(io::read_file(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what(), e.offset());
    }
}

Tensor image_to_tensor(const GrayImage& image, Precision precision) {
    std::vector<double> v(image.pixels.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (image.pixels[i] / 255.0 - 0.5) / 0.25;
    return Tensor::from({image.height, image.width, 1}, std::move(v), precision);
}

Tensor mask_to_tensor(const GrayImage& mask, Precision precision) {
    std::vector<double> v(mask.pixels.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = mask.pixels[i] ? 1.0 : 0.0;
    return Tensor::from({mask.height, mask.width}, std::move(v), precision);
}

// ---- synthesis -------------------------------------------------------------

SynthConfig SynthConfig::defaults() {
    SynthConfig c;
    c.modalities = {
        {"texture-a", 3.0, 42.0, 6.0, 0.3, true},
        {"texture-b", 6.0, 34.0, 10.0, 1.2, true},
        {"texture-c", 9.0, 28.0, 7.0, 2.2, true},
    };
    return c;
}

void SynthConfig::validate() const {
    if (modalities.empty()) throw ConfigError("synth: at least one modality is required");
    if (normals < 1 || labeled < 1 || test < 1) throw ConfigError("synth: every sample count must be at least 1");
    if (image_size < 8) throw ConfigError("synth: image_size must be at least 8");
    if (defects.min_count < 1 || defects.max_count < defects.min_count) throw ConfigError("synth: bad defect count range");
    if (!(defects.min_radius >= 1.0) || defects.max_radius < defects.min_radius) {
        throw ConfigError("synth: bad defect radius range");
    }
    if (!(defects.min_delta > 0.0) || defects.max_delta < defects.min_delta) {
        throw ConfigError("synth: bad intensity delta range");
    }
    std::set<std::string> names;
    for (const auto& m : modalities) {
        if (m.name.empty() || !names.insert(m.name).second) {
            throw ConfigError("synth: modality names must be unique and non-empty");
        }
    }
}

std::string to_string(SplitRole role) {
    switch (role) {
        case SplitRole::normal: return "normal";
        case SplitRole::labeled: return "labeled";
        case SplitRole::test: return "test";
    }
    return "?";
}

SplitRole parse_split_role(const std::string& s) {
    if (s == "normal") return SplitRole::normal;
    if (s == "labeled") return SplitRole::labeled;
    if (s == "test") return SplitRole::test;
    throw DataError("unknown split '" + s + "'");
}

namespace {

std::uint64_t name_hash(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<double> texture(const TextureProfile& p, std::uint32_t size, Rng& rng) {
    constexpr int kWaves = 6;
    const double two_pi = 2.0 * std::numbers::pi;
    std::vector<double> img(std::size_t{size} * size, 128.0);
    for (int k = 0; k < kWaves; ++k) {
        const double theta = p.orientation + 0.35 * rng.normal();
        const double freq = p.base_frequency * rng.uniform(0.75, 1.25);
        const double phase = rng.uniform(0.0, two_pi);
        const double amp = p.contrast / std::sqrt(static_cast<double>(kWaves)) * rng.uniform(0.6, 1.4);
        const double cx = std::cos(theta), sy = std::sin(theta);
        for (std::uint32_t y = 0; y < size; ++y)
            for (std::uint32_t x = 0; x < size; ++x)
                img[y * size + x] += amp * std::sin(two_pi * freq * (x * cx + y * sy) / size + phase);
    }
    std::vector<double> white(img.size());
    for (double& v : white) v = rng.normal();
    // 3x3 box blur; the factor 3 restores unit variance of the blurred field.
    for (std::uint32_t y = 0; y < size; ++y)
        for (std::uint32_t x = 0; x < size; ++x) {
            double s = 0.0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const auto yy = static_cast<std::uint32_t>(std::clamp<int>(static_cast<int>(y) + dy, 0, size - 1));
                    const auto xx = static_cast<std::uint32_t>(std::clamp<int>(static_cast<int>(x) + dx, 0, size - 1));
                    s += white[yy * size + xx];
                }
            img[y * size + x] += p.noise * s / 3.0;
        }
    return img;
}

std::vector<std::uint8_t> quantize(const std::vector<double>& v) {
    std::vector<std::uint8_t> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v[i]), 0L, 255L));
    return out;
}

std::vector<bool> defect_region(std::uint32_t size, const DefectParams& d, Rng& rng) {
    std::vector<bool> region(std::size_t{size} * size, false);
    const double r_max = std::min(d.max_radius, size / 3.0);
    const double r_min = std::min(d.min_radius, r_max);
    if (rng.uniform() < 0.7) {
        const double rx = rng.uniform(r_min, r_max);
        const double ry = rng.uniform(r_min, r_max);
        const double margin = std::max(rx, ry);
        const double cx = rng.uniform(margin, size - 1 - margin);
        const double cy = rng.uniform(margin, size - 1 - margin);
        const double a = rng.uniform(0.0, std::numbers::pi);
        const double ca = std::cos(a), sa = std::sin(a);
        for (std::uint32_t y = 0; y < size; ++y)
            for (std::uint32_t x = 0; x < size; ++x) {
                const double dx = x - cx, dy = y - cy;
                const double u = (dx * ca + dy * sa) / rx;
                const double v = (-dx * sa + dy * ca) / ry;
                if (u * u + v * v <= 1.0) region[y * size + x] = true;
            }
    } else {
        const double x0 = rng.uniform(r_min, size - 1 - r_min);
        const double y0 = rng.uniform(r_min, size - 1 - r_min);
        const double len = rng.uniform(2.0 * r_min, 3.0 * r_max);
        const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double x1 = std::clamp(x0 + len * std::cos(a), 0.0, size - 1.0);
        const double y1 = std::clamp(y0 + len * std::sin(a), 0.0, size - 1.0);
        const double half_width = rng.uniform(1.5, std::max(2.0, r_min * 0.6));
        const double vx = x1 - x0, vy = y1 - y0;
        const double vv = std::max(vx * vx + vy * vy, 1e-9);
        for (std::uint32_t y = 0; y < size; ++y)
            for (std::uint32_t x = 0; x < size; ++x) {
                const double t = std::clamp(((x - x0) * vx + (y - y0) * vy) / vv, 0.0, 1.0);
                const double px = x0 + t * vx - x, py = y0 + t * vy - y;
                if (px * px + py * py <= half_width * half_width) region[y * size + x] = true;
            }
    }
    return region;
}

}  // namespace

GeneratedSample synthesize(const TextureProfile& profile, std::uint32_t size, const DefectParams& defects,
                           bool anomalous, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> base = texture(profile, size, rng);
    GeneratedSample out;
    out.image = {size, size, quantize(base)};
    out.mask = {size, size, std::vector<std::uint8_t>(std::size_t{size} * size, 0)};
    if (!anomalous) return out;

    std::vector<double> img = base;
    const auto count = static_cast<std::uint32_t>(rng.uniform_int(defects.min_count, defects.max_count));
    for (std::uint32_t k = 0; k < count; ++k) {
        std::vector<bool> region = defect_region(size, defects, rng);
        double local = 0.0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < region.size(); ++i) {
            if (!region[i]) continue;
            local += img[i];
            ++n;
        }
        if (n == 0) continue;
        const double magnitude = rng.uniform(defects.min_delta, defects.max_delta);
        const double delta = local / static_cast<double>(n) < 128.0 ? magnitude : -magnitude;
        for (std::size_t i = 0; i < region.size(); ++i) {
            if (!region[i]) continue;
            img[i] += delta;
            out.mask.pixels[i] = 255;
        }
    }
    const std::vector<std::uint8_t> clean = out.image.pixels;
    out.image.pixels = quantize(img);

    double inside = 0.0, outside = 0.0;
    std::size_t n_in = 0, n_out = 0;
    for (std::size_t i = 0; i < clean.size(); ++i) {
        const double diff = std::abs(static_cast<double>(out.image.pixels[i]) - clean[i]);
        if (out.mask.pixels[i]) {
            inside += diff;
            ++n_in;
        } else {
            outside += diff;
            ++n_out;
        }
    }
    out.inside_diff = n_in ? inside / static_cast<double>(n_in) : 0.0;
    out.outside_diff = n_out ? outside / static_cast<double>(n_out) : 0.0;
    return out;
}

GenerationStats gen_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
    cfg.validate();
    GenerationStats stats;
    stats.min_contrast_gap = std::numeric_limits<double>::infinity();
    std::ostringstream manifest;
    const std::array<std::pair<SplitRole, std::uint32_t>, 3> pools{
        {{SplitRole::normal, cfg.normals}, {SplitRole::labeled, cfg.labeled}, {SplitRole::test, cfg.test}}};

    for (const TextureProfile& profile : cfg.modalities) {
        const std::uint64_t modality_seed = mix_seed(cfg.seed, name_hash(profile.name));
        for (const auto& [role, count] : pools) {
            for (std::uint32_t i = 0; i < count; ++i) {
                const bool anomalous = role != SplitRole::normal && i % 2 == 1;
                const std::uint64_t seed = mix_seed(modality_seed, static_cast<std::uint64_t>(role) * 1000003ULL + i);
                // Retry placement until the defect measurably changes the image.
                GeneratedSample g;
                for (std::uint64_t attempt = 0;; ++attempt) {
                    g = synthesize(profile, cfg.image_size, cfg.defects, anomalous, mix_seed(seed, attempt));
                    if (!anomalous || g.inside_diff > g.outside_diff) break;
                    if (attempt > 64) throw DataError("synth: could not place a visible defect for " + profile.name);
                }
                std::ostringstream stem;
                stem << profile.name << '/' << to_string(role) << '/' << std::setw(4) << std::setfill('0') << i;
                Sample s;
                s.image = stem.str() + ".pgm";
                s.label = anomalous ? 1 : 0;
                s.modality = profile.name;
                s.split = role;
                write_pgm(out_dir / s.image, g.image);
                if (profile.masks) {
                    s.mask = stem.str() + "_mask.pgm";
                    write_pgm(out_dir / *s.mask, g.mask);
                }
                manifest << manifest_line(s, {}) << '\n';
                ++stats.images;
                if (anomalous) {
                    ++stats.anomalies;
                    stats.min_contrast_gap = std::min(stats.min_contrast_gap, g.inside_diff - g.outside_diff);
                }
            }
        }
    }
    if (stats.anomalies == 0) stats.min_contrast_gap = 0.0;
    io::write_text_atomic(out_dir / "manifest.jsonl", manifest.str());
    return stats;
}

// ---- manifest ----------------------------------------------------------------

std::string manifest_line(const Sample& s, const std::filesystem::path& base) {
    auto rel = [&](const std::filesystem::path& p) {
        return (base.empty() ? p : p.lexically_relative(base)).generic_string();
    };
    nlohmann::ordered_json j;
    j["image"] = rel(s.image);
    j["mask"] = s.mask ? nlohmann::ordered_json(rel(*s.mask)) : nlohmann::ordered_json(nullptr);
    j["label"] = s.label;
    j["modality"] = s.modality;
    j["split"] = to_string(s.split);
    return j.dump();
}

std::vector<Sample> load_manifest(const std::filesystem::path& path, bool verify) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest '" + path.string() + "'");
    const std::filesystem::path base = path.parent_path();
    std::vector<Sample> out;
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = "manifest line " + std::to_string(line_no) + ": ";
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(where + "invalid JSON (" + e.what() + ")");
        }
        if (!j.is_object()) throw DataError(where + "expected a JSON object");
        if (!j.contains("image") || !j["image"].is_string()) throw DataError(where + "missing string key 'image'");
        if (!j.contains("modality") || !j["modality"].is_string() || j["modality"].get<std::string>().empty()) {
            throw DataError(where + "missing string key 'modality'");
        }
        if (!j.contains("label") || !j["label"].is_number_integer()) throw DataError(where + "missing integer 'label'");
        if (!j.contains("mask") || !(j["mask"].is_null() || j["mask"].is_string())) {
            throw DataError(where + "'mask' must be a string or null");
        }
        Sample s;
        s.image = base / j["image"].get<std::string>();
        s.label = j["label"].get<int>();
        if (s.label != 0 && s.label != 1) throw DataError(where + "label must be 0 or 1");
        if (j["mask"].is_string()) s.mask = base / j["mask"].get<std::string>();
        s.modality = j["modality"].get<std::string>();
        if (j.contains("split")) {
            if (!j["split"].is_string()) throw DataError(where + "'split' must be a string");
            try {
                s.split = parse_split_role(j["split"].get<std::string>());
            } catch (const DataError& e) {
                throw DataError(where + e.what());
            }
        }
        if (verify && s.mask) {
            GrayImage mask = read_pgm(*s.mask);
            const bool positive = std::any_of(mask.pixels.begin(), mask.pixels.end(), [](auto v) { return v != 0; });
            if (positive != (s.label == 1)) {
                throw DataError(where + "label " + std::to_string(s.label) + " is inconsistent with mask '" +
                                s.mask->string() + "'");
            }
            GrayImage image = read_pgm(s.image);
            if (image.width != mask.width || image.height != mask.height) {
                throw DataError(where + "image and mask dimensions differ");
            }
        }
        out.push_back(std::move(s));
    }
    if (out.empty()) throw DataError("manifest '" + path.string() + "' has no samples");
    return out;
}

std::vector<std::string> modalities(const std::vector<Sample>& manifest) {
    std::vector<std::string> out;
    for (const Sample& s : manifest) {
        if (std::find(out.begin(), out.end(), s.modality) == out.end()) out.push_back(s.modality);
    }
    return out;
}

namespace {

void shuffle(std::vector<Sample>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace

DataSplit split(const std::vector<Sample>& manifest, const SplitParams& params) {
    const auto mods = modalities(manifest);
    if (std::find(mods.begin(), mods.end(), params.target) == mods.end()) {
        throw DataError("split: unknown modality '" + params.target + "'");
    }
    DataSplit out;
    for (const Sample& s : manifest) {
        if (s.modality == params.target && s.split == SplitRole::test) out.test.push_back(s);
    }

    if (params.mode == SplitMode::zero_shot) {
        for (const Sample& s : manifest) {
            if (s.modality != params.target && s.split == SplitRole::labeled) out.train.push_back(s);
        }
        if (out.test.empty()) {
            // No dedicated test pool: the whole target modality is unseen.
            for (const Sample& s : manifest) {
                if (s.modality == params.target) out.test.push_back(s);
            }
        }
        if (out.train.empty()) throw DataError("split: no labeled samples outside '" + params.target + "'");
        return out;
    }

    if (params.k == 0) throw ConfigError("split: few-shot needs k >= 1");
    if (out.test.empty()) throw DataError("split: no test samples for '" + params.target + "'");
    std::vector<Sample> anomalous, normal, pool;
    for (const Sample& s : manifest) {
        if (s.modality != params.target) continue;
        if (s.split == SplitRole::labeled) (s.label ? anomalous : normal).push_back(s);
        if (s.split == SplitRole::normal) pool.push_back(s);
    }
    if (params.k > anomalous.size() + normal.size()) {
        throw DataError("split: k = " + std::to_string(params.k) + " exceeds the " +
                        std::to_string(anomalous.size() + normal.size()) + " labeled samples of '" + params.target +
                        "'");
    }
    Rng rng(mix_seed(params.seed, name_hash(params.target)));
    shuffle(anomalous, rng);
    shuffle(normal, rng);
    shuffle(pool, rng);
    std::size_t want_anom = std::min((params.k + 1) / 2, anomalous.size());
    std::size_t want_norm = params.k - want_anom;
    if (want_norm > normal.size()) {
        want_norm = normal.size();
        want_anom = params.k - want_norm;
    }
    out.train.insert(out.train.end(), anomalous.begin(), anomalous.begin() + static_cast<std::ptrdiff_t>(want_anom));
    out.train.insert(out.train.end(), normal.begin(), normal.begin() + static_cast<std::ptrdiff_t>(want_norm));

    // Bank references come from the unlabeled normal pool, falling back to
    // labeled normals not already used for training.
    std::vector<Sample> candidates = pool;
    candidates.insert(candidates.end(), normal.begin() + static_cast<std::ptrdiff_t>(want_norm), normal.end());
    if (candidates.size() < params.k) {
        throw DataError("split: only " + std::to_string(candidates.size()) + " normal references for k = " +
                        std::to_string(params.k));
    }
    out.bank.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(params.k));
    // The bank references are known normals, so they also serve as training negatives.
    out.train.insert(out.train.end(), out.bank.begin(), out.bank.end());
    return out;
}

}  // namespace mvfa
