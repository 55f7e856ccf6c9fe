#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvfa/tensor.hpp"

namespace mvfa {

// 8-bit single-channel image, row-major.
struct GrayImage {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::vector<std::uint8_t> pixels;

    bool operator==(const GrayImage&) const = default;
};

// Binary P5 with maxval 255. Output header is exactly "P5\n<w> <h>\n255\n".
std::vector<std::uint8_t> encode_pgm(const GrayImage& image);
GrayImage decode_pgm(std::span<const std::uint8_t> bytes);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);
GrayImage read_pgm(const std::filesystem::path& path);

// Pixel v maps to (v / 255 - 0.5) / 0.25; result is h x w x 1.
Tensor image_to_tensor(const GrayImage& image, Precision precision = Precision::f32);
// Nonzero pixels become 1; result is h x w.
Tensor mask_to_tensor(const GrayImage& mask, Precision precision = Precision::f32);

// ---- synthetic data ----------------------------------------------------------

struct TextureProfile {
    std::string name;
    double base_frequency = 4.0;  // cycles per image
    double contrast = 40.0;       // amplitude of the band-limited component
    double noise = 8.0;           // std-dev of the smoothed white-noise component
    double orientation = 0.0;     // dominant orientation, radians
    bool masks = true;            // false: classification-only modality
};

struct DefectParams {
    std::uint32_t min_count = 1;
    std::uint32_t max_count = 2;
    double min_radius = 5.0;
    double max_radius = 11.0;
    double min_delta = 45.0;
    double max_delta = 75.0;
};

struct SynthConfig {
    std::vector<TextureProfile> modalities;
    std::uint32_t image_size = 64;
    DefectParams defects;
    std::uint32_t normals = 200;   // unlabeled normal pool per modality
    std::uint32_t labeled = 32;    // labeled pool per modality (half anomalous)
    std::uint32_t test = 100;      // held-out test images per modality (half anomalous)
    std::uint64_t seed = 42;

    // texture-a, texture-b, texture-c with distinct spectral profiles.
    static SynthConfig defaults();
    void validate() const;
};

enum class SplitRole : std::uint8_t { normal, labeled, test };
std::string to_string(SplitRole role);
SplitRole parse_split_role(const std::string& s);

struct Sample {
    std::filesystem::path image;
    int label = 0;
    std::optional<std::filesystem::path> mask;
    std::string modality;
    SplitRole split = SplitRole::labeled;
};

struct GenerationStats {
    std::size_t images = 0;
    std::size_t anomalies = 0;
    // Smallest (mean |diff| inside mask) - (mean |diff| outside mask) over
    // all anomalies; positive by construction.
    double min_contrast_gap = 0.0;
};

struct GeneratedSample {
    GrayImage image;
    GrayImage mask;
    double inside_diff = 0.0;
    double outside_diff = 0.0;
};

// One image of the given modality; anomalous images carry inserted blobs or
// strokes and a matching mask.
GeneratedSample synthesize(const TextureProfile& profile, std::uint32_t size, const DefectParams& defects,
                           bool anomalous, std::uint64_t seed);

// Writes <out>/<modality>/<split>/NNNN.pgm (+ NNNN_mask.pgm) and
// <out>/manifest.jsonl. Pure function of cfg.
GenerationStats gen_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir);

// ---- manifest and splits -----------------------------------------------------

// JSON lines with keys image, mask (nullable), label, modality and optional
// split (normal | labeled | test, default labeled). Relative paths resolve
// against the manifest directory. When verify is set the masks are read to
// check label consistency.
std::vector<Sample> load_manifest(const std::filesystem::path& path, bool verify = true);
std::string manifest_line(const Sample& sample, const std::filesystem::path& base);

enum class SplitMode : std::uint8_t { zero_shot, few_shot };

struct SplitParams {
    SplitMode mode = SplitMode::few_shot;
    std::string target;
    std::size_t k = 4;
    std::uint64_t seed = 42;
};

struct DataSplit {
    std::vector<Sample> train;
    std::vector<Sample> bank;  // K normal references (few-shot only)
    std::vector<Sample> test;
};

// zero-shot: train = labeled samples of every other modality, test = target
// test samples. few-shot: train = K labeled target samples (anomalous half
// rounded up) plus the K bank normals, bank = K target normals from the
// unlabeled pool, test = target test samples.
DataSplit split(const std::vector<Sample>& manifest, const SplitParams& params);

std::vector<std::string> modalities(const std::vector<Sample>& manifest);

}  // namespace mvfa
