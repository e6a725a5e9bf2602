#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mebinncd/crop.hpp"
#include "mebinncd/error.hpp"
#include "mebinncd/mebin.hpp"
#include "mebinncd/merge.hpp"
#include "mebinncd/metrics.hpp"
#include "mebinncd/mgvit.hpp"
#include "mebinncd/ncd.hpp"
#include "mebinncd/synth.hpp"

namespace mebinncd {

namespace fs = std::filesystem;

/// How the binarize stage turns maps into masks.
struct ThresholdMode {
    enum class Kind { Mebin, Otsu, Fixed } kind = Kind::Mebin;
    float epsilon = 0.5f;

    std::string name() const;
    static ThresholdMode parse(const std::string& s);  // "mebin" | "otsu" | a number
};

struct PipelineConfig {
    fs::path maps_dir;
    fs::path images_dir;
    fs::path manifest;   // image ids, split, labels of the labeled set, truth classes
    fs::path masks_dir;  // ground-truth masks; crops of labeled images and detection rates
    fs::path out_dir;

    ThresholdMode threshold;
    MebinConfig mebin;
    CropConfig crop;
    ModelConfig model;
    TrainConfig train;
    MergeConfig merge;
    MergeStrategy merge_strategy = MergeStrategy::AreaAverage;
    std::uint64_t seed = 0;
    int jobs = 0;  // 0 = OpenMP default

    void validate() const;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
/// Relative paths in `j` resolve against `base`.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const fs::path& base = {});

/// Any failure inside a stage, tagged with the stage name.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, ErrorKind kind, const std::string& message);
    const std::string& stage() const { return stage_; }
    ErrorKind kind() const { return kind_; }
    std::string detail() const { return detail_; }
    nlohmann::json record() const;

private:
    std::string stage_;
    ErrorKind kind_;
    std::string detail_;
};

// --- stage building blocks, usable on their own ---------------------------------

struct BinarizeItem {
    std::string image_id;
    BinaryMask mask;
    std::optional<float> threshold;
    int region_count = 0;
    std::vector<int> counts;  // per-threshold component counts (MEBin only)
};

struct BinarizeOutput {
    ThresholdRange range;
    std::vector<BinarizeItem> items;
};

BinarizeOutput binarize_maps(std::span<const std::string> ids, std::span<const AnomalyMap> maps,
                             const ThresholdMode& mode, const MebinConfig& cfg, Exec exec = Exec::Parallel);

/// Writes masks/<id>.png and mebin_report.json under `dir`.
void write_binarize_output(const BinarizeOutput& out, const fs::path& dir);
BinarizeOutput read_binarize_output(const fs::path& dir);

/// crops.jsonl with one line per record plus PNGs of every sub-image and mask.
void write_crops(std::span<const SubImageRecord> records, const fs::path& dir);
std::vector<SubImageRecord> read_crops(const fs::path& jsonl);

struct RegionPrediction {
    int region_index = 0;
    Vec probs;
    double weight = 0.0;  // merge weight within the image
};

struct ImagePrediction {
    std::string image_id;
    int cluster = 0;
    Vec probs;
    int num_regions = 0;
    std::vector<RegionPrediction> regions;
};

/// Per-image merged predictions; images without crops fall into the normal slot.
std::vector<ImagePrediction> classify_images(const ModelParams& params, int head, double tau_s,
                                             std::span<const std::string> image_ids,
                                             std::span<const SubImageRecord> unlabeled_crops,
                                             MergeStrategy strategy, const MergeConfig& merge,
                                             Exec exec = Exec::Parallel);

void write_predictions(std::span<const ImagePrediction> preds, const fs::path& path);
std::vector<ImagePrediction> read_predictions(const fs::path& path);

/// Clustering metrics of predicted clusters against manifest classes.
nlohmann::json evaluate_predictions(std::span<const ImagePrediction> preds, std::span<const ManifestEntry> truth);

nlohmann::json history_line(const EpochRecord& rec);

// --- full pipeline ------------------------------------------------------------------

struct PipelineResult {
    nlohmann::json report;
    fs::path report_path;
};

/// binarize -> crop -> train -> classify (merge) -> evaluate. Stage outputs go to
/// out_dir/<stage>-<hash>/ keyed by the stage's effective configuration, so a
/// rerun only recomputes stages whose inputs changed. On failure an error.json
/// record is written to out_dir and StageError is thrown.
PipelineResult run_pipeline(const PipelineConfig& cfg);

enum class SweepAxis { FixedThreshold, MaskedLayers, MergeStrategy, PlcThreshold, MaskTarget };

std::string to_string(SweepAxis a);
SweepAxis sweep_axis_from_string(const std::string& s);

struct SweepResult {
    nlohmann::json table;  // {"axis":..., "rows":[...]}
    std::string csv;
};

/// Runs the pipeline once per value of `axis`, writing sweep_<axis>.json/.csv
/// into cfg.out_dir.
SweepResult ablation_sweep(const PipelineConfig& cfg, SweepAxis axis);

/// Axis values for a given config (used by ablation_sweep).
std::vector<std::string> sweep_values(const PipelineConfig& cfg, SweepAxis axis);

}  // namespace mebinncd
