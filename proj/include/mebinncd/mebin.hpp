#pragma once

#include <optional>
#include <span>
#include <vector>

#include "mebinncd/raster.hpp"

namespace mebinncd {

/// Selects the serial reference kernel or its OpenMP counterpart. Both must
/// produce identical results; the serial one is kept for tests and benchmarks.
enum class Exec { Serial, Parallel };

struct MebinConfig {
    int num_thresholds = 64;
    int min_stable_run = 4;
    int erosion_radius = 1;
    Connectivity connectivity = Connectivity::Eight;
    /// Restore the full extent of every component that survives erosion in the
    /// emitted mask. Counting always uses the eroded masks.
    bool reconstruct = true;

    void validate() const;
};

struct ThresholdRange {
    float s_min = 0.0f;
    float s_max = 1.0f;
};

struct MebinResult {
    BinaryMask mask;
    std::optional<float> selected_threshold;
    int region_count = 0;
    std::vector<int> per_threshold_counts;
    std::vector<float> thresholds;
};

ThresholdRange compute_threshold_range(std::span<const AnomalyMap> maps);

/// 𝒯 thresholds sampled uniformly over [s_min, s_max], endpoints included.
std::vector<float> sample_thresholds(const ThresholdRange& range, int count);

/// Component count of the eroded mask 1[map > t] for each threshold.
std::vector<int> sweep_region_counts(const AnomalyMap& map, std::span<const float> thresholds,
                                     const MebinConfig& cfg, Exec exec = Exec::Parallel);

/// The stable-run selection on an already computed count sequence. Returns the
/// index of the selected threshold, or nullopt when no stable run qualifies.
struct StableRun {
    int modal_count = 0;
    int start = 0;
    int length = 0;
};
std::optional<StableRun> find_stable_run(std::span<const int> counts, int min_stable_run);

MebinResult binarize(const AnomalyMap& map, const ThresholdRange& range, const MebinConfig& cfg,
                     Exec exec = Exec::Parallel);

BinaryMask fixed_threshold_binarize(const AnomalyMap& map, float epsilon, const MebinConfig& cfg);

/// Otsu threshold over a 256-bin quantization of [0,1]. Pixels strictly above
/// the returned value form the foreground class.
float otsu_threshold(const AnomalyMap& map);

}  // namespace mebinncd
