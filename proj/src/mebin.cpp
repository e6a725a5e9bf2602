#include "mebinncd/mebin.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>

#include "mebinncd/error.hpp"

namespace mebinncd {

void MebinConfig::validate() const {
    if (num_thresholds < 2) throw Error(ErrorKind::ConfigInvalid, "num_thresholds must be >= 2");
    if (min_stable_run < 1) throw Error(ErrorKind::ConfigInvalid, "min_stable_run must be >= 1");
    if (erosion_radius < 0) throw Error(ErrorKind::ConfigInvalid, "erosion_radius must be >= 0");
}

ThresholdRange compute_threshold_range(std::span<const AnomalyMap> maps) {
    if (maps.empty()) throw Error(ErrorKind::EmptyInput, "compute_threshold_range needs at least one map");
    float s_min = 1.0f;
    for (const auto& m : maps) s_min = std::min(s_min, m.max_value());
    return ThresholdRange{s_min, 1.0f};
}

std::vector<float> sample_thresholds(const ThresholdRange& range, int count) {
    std::vector<float> t(count);
    const double lo = range.s_min;
    const double hi = range.s_max;
    for (int j = 0; j < count; ++j)
        t[j] = static_cast<float>(lo + (hi - lo) * static_cast<double>(j) / static_cast<double>(count - 1));
    t.back() = range.s_max;
    return t;
}

namespace {

int eroded_count(const AnomalyMap& map, float t, const MebinConfig& cfg) {
    return connected_components(erode(threshold_mask(map, t), cfg.erosion_radius), cfg.connectivity).count;
}

}  // namespace

std::vector<int> sweep_region_counts(const AnomalyMap& map, std::span<const float> thresholds,
                                     const MebinConfig& cfg, Exec exec) {
    const int n = static_cast<int>(thresholds.size());
    std::vector<int> counts(n);
    if (exec == Exec::Serial) {
        for (int j = 0; j < n; ++j) counts[j] = eroded_count(map, thresholds[j], cfg);
    } else {
#pragma omp parallel for schedule(dynamic)
        for (int j = 0; j < n; ++j) counts[j] = eroded_count(map, thresholds[j], cfg);
    }
    return counts;
}

std::optional<StableRun> find_stable_run(std::span<const int> counts, int min_stable_run) {
    // Ordered map: on equal frequency the smaller count wins.
    std::map<int, int> freq;
    for (int c : counts)
        if (c > 0) ++freq[c];
    if (freq.empty()) return std::nullopt;
    int modal = 0;
    int best_freq = 0;
    for (const auto& [value, f] : freq)
        if (f > best_freq) {
            best_freq = f;
            modal = value;
        }

    StableRun best{modal, 0, 0};
    const int n = static_cast<int>(counts.size());
    for (int j = 0; j < n;) {
        if (counts[j] != modal) {
            ++j;
            continue;
        }
        int k = j;
        while (k < n && counts[k] == modal) ++k;
        if (k - j > best.length) best = StableRun{modal, j, k - j};
        j = k;
    }
    if (best.length < min_stable_run) return std::nullopt;
    return best;
}

BinaryMask fixed_threshold_binarize(const AnomalyMap& map, float epsilon, const MebinConfig& cfg) {
    const BinaryMask raw = threshold_mask(map, epsilon);
    BinaryMask eroded = erode(raw, cfg.erosion_radius);
    if (!cfg.reconstruct || cfg.erosion_radius == 0) return eroded;
    return reconstruct(eroded, raw, cfg.connectivity);
}

MebinResult binarize(const AnomalyMap& map, const ThresholdRange& range, const MebinConfig& cfg, Exec exec) {
    cfg.validate();
    if (!(range.s_min >= 0.0f && range.s_min <= range.s_max && range.s_max <= 1.0f))
        throw Error(ErrorKind::InvalidArgument, "threshold range must satisfy 0 <= s_min <= s_max <= 1");

    MebinResult result;
    result.thresholds = sample_thresholds(range, cfg.num_thresholds);
    result.per_threshold_counts = sweep_region_counts(map, result.thresholds, cfg, exec);

    const auto run = find_stable_run(result.per_threshold_counts, cfg.min_stable_run);
    if (!run) {
        result.mask = BinaryMask(map.width(), map.height());
        return result;
    }
    const float t = result.thresholds[run->start];
    result.selected_threshold = t;
    result.mask = fixed_threshold_binarize(map, t, cfg);
    result.region_count = connected_components(result.mask, cfg.connectivity).count;
    return result;
}

float otsu_threshold(const AnomalyMap& map) {
    // bin b holds values in (b/256, (b+1)/256]; 0 lands in bin 0.
    std::array<double, 256> hist{};
    for (float v : map.data()) {
        const int b = std::clamp(static_cast<int>(std::ceil(static_cast<double>(v) * 256.0)) - 1, 0, 255);
        hist[b] += 1.0;
    }
    const int occupied = static_cast<int>(std::count_if(hist.begin(), hist.end(), [](double h) { return h > 0; }));
    if (occupied < 2) throw Error(ErrorKind::DegenerateHistogram, "anomaly map has a single quantized value");

    double total = 0.0, total_sum = 0.0;
    for (int b = 0; b < 256; ++b) {
        total += hist[b];
        total_sum += b * hist[b];
    }
    double w0 = 0.0, sum0 = 0.0, best = -1.0;
    int best_k = 0;
    for (int k = 0; k < 255; ++k) {
        w0 += hist[k];
        sum0 += k * hist[k];
        const double w1 = total - w0;
        if (w0 == 0.0 || w1 == 0.0) continue;
        const double mu0 = sum0 / w0;
        const double mu1 = (total_sum - sum0) / w1;
        const double between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if (between > best) {
            best = between;
            best_k = k;
        }
    }
    return static_cast<float>((best_k + 1) / 256.0);
}

}  // namespace mebinncd
