// Serial reference vs OpenMP kernels. Each pair is also checked for identical
// output, so a speedup never hides a divergence.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>

#include <omp.h>

#include "mebinncd/mebin.hpp"
#include "mebinncd/ncd.hpp"
#include "mebinncd/pipeline.hpp"
#include "mebinncd/synth.hpp"

using namespace mebinncd;

namespace {

double seconds(const std::function<void()>& fn, int reps) {
    fn();  // warm-up
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / reps;
}

bool failed = false;

void report(const char* name, double serial, double parallel, bool same) {
    std::printf("%-26s serial %9.3f ms   openmp %9.3f ms   speedup %5.2fx   %s\n", name, serial * 1e3,
                parallel * 1e3, serial / parallel, same ? "identical" : "MISMATCH");
    failed = failed || !same;
}

AnomalyMap large_map(int side, std::uint64_t seed) {
    SynthConfig cfg;
    cfg.image_side = side;
    cfg.num_unlabeled = 1;
    cfg.num_labeled = 0;
    cfg.known_classes = {};
    cfg.novel_classes = {ShapeClass::SpeckleCluster, ShapeClass::RingHole};
    cfg.noise.fp_blob_rate = 1.0;
    cfg.seed = seed;
    return generate(cfg).images.front().map;
}

}  // namespace

int main(int argc, char** argv) {
    const int reps = argc > 1 ? std::atoi(argv[1]) : 3;
    std::printf("OpenMP threads: %d\n", omp_get_max_threads());

    // MEBin threshold sweep on one large map.
    {
        const AnomalyMap map = large_map(512, 5);
        const auto thresholds = sample_thresholds({0.0f, 1.0f}, 64);
        const MebinConfig cfg;
        std::vector<int> a, b;
        const double s = seconds([&] { a = sweep_region_counts(map, thresholds, cfg, Exec::Serial); }, reps);
        const double p = seconds([&] { b = sweep_region_counts(map, thresholds, cfg, Exec::Parallel); }, reps);
        report("sweep_region_counts 512^2", s, p, a == b);
    }

    // Per-image binarization over a corpus.
    {
        SynthConfig cfg;
        cfg.num_unlabeled = 200;
        cfg.num_labeled = 0;
        cfg.known_classes = {};
        cfg.novel_classes = {ShapeClass::LineScratch, ShapeClass::Blob, ShapeClass::RingHole};
        const SynthCorpus corpus = generate(cfg);
        std::vector<std::string> ids;
        std::vector<AnomalyMap> maps;
        for (const auto& im : corpus.images) {
            ids.push_back(im.image_id);
            maps.push_back(im.map);
        }
        BinarizeOutput a, b;
        const double s = seconds([&] { a = binarize_maps(ids, maps, {}, {}, Exec::Serial); }, reps);
        const double p = seconds([&] { b = binarize_maps(ids, maps, {}, {}, Exec::Parallel); }, reps);
        bool same = a.items.size() == b.items.size();
        for (std::size_t i = 0; same && i < a.items.size(); ++i)
            same = a.items[i].mask == b.items[i].mask && a.items[i].threshold == b.items[i].threshold;
        report("binarize_maps 200 x 64^2", s, p, same);
    }

    // One training step's loss and gradient.
    {
        ModelConfig mc;
        mc.patch_size = 4;
        TrainConfig tc;
        const ModelParams params = ModelParams::initialize(mc, 1);
        SynthConfig sc;
        const SynthCorpus corpus = generate(sc);
        std::vector<PreparedView> va, vb;
        std::vector<ItemMeta> meta;
        for (int i = 0; i < 32; ++i) {
            const auto& im = corpus.images[i * 3 % corpus.images.size()];
            SubImageRecord r;
            r.sub_image = resize_bilinear(im.image, mc.input_side);
            r.sub_mask = resize_nearest(im.gt_mask, mc.input_side);
            const auto [x, y] = augment(r, static_cast<std::uint64_t>(i));
            va.push_back(prepare_view(x, mc));
            vb.push_back(prepare_view(y, mc));
            meta.push_back({im.labeled ? im.label : std::nullopt, 0.8});
        }
        BatchGradient a, b;
        const double s = seconds([&] { a = batch_gradient(params, va, vb, meta, tc, 0.07, nullptr, Exec::Serial); }, reps);
        const double p = seconds([&] { b = batch_gradient(params, va, vb, meta, tc, 0.07, nullptr, Exec::Parallel); }, reps);
        report("batch_gradient batch 32", s, p, a.grad == b.grad && a.loss.total == b.loss.total);
    }

    return failed ? 1 : 0;
}
