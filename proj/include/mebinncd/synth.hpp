#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mebinncd/raster.hpp"

namespace mebinncd {

enum class ShapeClass { LineScratch, Blob, RingHole, SpeckleCluster, Normal };

std::string to_string(ShapeClass c);
ShapeClass shape_class_from_string(const std::string& s);

struct NoiseConfig {
    double fp_blob_rate = 0.5;  // expected false-positive blobs per image
    double miss_rate = 0.05;    // probability a GT region is left out of the map
    double blur_radius = 2.0;   // Gaussian sigma in pixels
    double score_jitter = 0.05;

    static NoiseConfig none() { return {0.0, 0.0, 0.0, 0.0}; }
};

struct SynthConfig {
    int image_side = 64;
    int num_unlabeled = 60;
    int num_labeled = 40;
    std::vector<ShapeClass> novel_classes{ShapeClass::LineScratch, ShapeClass::RingHole, ShapeClass::Normal};
    std::vector<ShapeClass> known_classes{ShapeClass::Blob, ShapeClass::SpeckleCluster};
    NoiseConfig noise;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Smallest shape extent the generator draws.
inline constexpr int kMinShapeSize = 8;

struct SynthRegion {
    Box box;
    double score = 0.0;
    bool in_map = true;
};

struct SynthImage {
    std::string image_id;
    std::string class_name;
    bool labeled = false;
    std::optional<int> label;  // index into known_classes for labeled images
    int class_index = 0;       // index into novel_classes (unlabeled) or known_classes (labeled)
    GrayImage image;
    BinaryMask gt_mask;
    AnomalyMap map;
    nlohmann::json shapes = nlohmann::json::array();
    std::vector<SynthRegion> regions;  // ordered by GT component ID
    std::vector<Box> fp_blobs;
};

struct SynthCorpus {
    SynthConfig config;
    std::vector<SynthImage> images;  // unlabeled first, then labeled
};

SynthCorpus generate(const SynthConfig& cfg);

/// Manifest line for one image.
nlohmann::json manifest_entry(const SynthImage& img);

/// Writes images/, masks/, maps/ (PNG) and manifest.jsonl under `dir`.
void write_corpus(const SynthCorpus& corpus, const std::filesystem::path& dir);

struct ManifestEntry {
    std::string image_id;
    std::string class_name;
    bool labeled = false;
    std::optional<int> label;
    std::vector<Box> regions;
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

}  // namespace mebinncd
