// Command-line front end: one subcommand per pipeline stage plus the full
// pipeline, ablation sweeps and checkpoint inspection.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "mebinncd/config_json.hpp"
#include "mebinncd/log.hpp"
#include "mebinncd/parallel.hpp"
#include "mebinncd/pipeline.hpp"

using namespace mebinncd;
using nlohmann::json;

namespace {

json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw Error(ErrorKind::MissingFile, "cannot open " + p.string());
    return json::parse(in);
}

void write_file(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out || !(out << text)) throw Error(ErrorKind::IoFailure, "cannot write " + p.string());
}

// Image ids are file stems of the rasters in `dir`, sorted.
std::vector<std::string> raster_ids(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw Error(ErrorKind::MissingFile, "directory not found: " + dir.string());
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto ext = e.path().extension();
        if (ext == ".png" || ext == ".f32" || ext == ".raw") ids.push_back(e.path().stem().string());
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

fs::path raster_path(const fs::path& dir, const std::string& id) {
    for (const char* ext : {".png", ".f32", ".raw"})
        if (fs::exists(dir / (id + ext))) return dir / (id + ext);
    throw Error(ErrorKind::MissingFile, "no raster for '" + id + "' in " + dir.string());
}

template <typename T>
T load_config(const std::string& path) {
    return path.empty() ? T{} : read_json(path).get<T>();
}

// --- subcommands ---------------------------------------------------------------------

struct SynthArgs {
    std::string config, out;
    std::optional<std::uint64_t> seed;
};

void cmd_synth(const SynthArgs& a) {
    SynthConfig cfg = load_config<SynthConfig>(a.config);
    if (a.seed) cfg.seed = *a.seed;
    spdlog::info("synth config: {}", json(cfg).dump());
    const SynthCorpus corpus = generate(cfg);
    write_corpus(corpus, a.out);
    std::printf("wrote %zu images to %s\n", corpus.images.size(), a.out.c_str());
}

struct BinarizeArgs {
    std::string maps, out, threshold = "mebin", config;
    int T = 64, tau = 4, erosion = 1, connectivity = 8;
};

void cmd_binarize(const BinarizeArgs& a) {
    MebinConfig cfg = load_config<MebinConfig>(a.config);
    cfg.num_thresholds = a.T;
    cfg.min_stable_run = a.tau;
    cfg.erosion_radius = a.erosion;
    cfg.connectivity = connectivity_from_int(a.connectivity);
    cfg.validate();
    spdlog::info("binarize config: {} threshold {}", json(cfg).dump(), a.threshold);
    const auto ids = raster_ids(a.maps);
    if (ids.empty()) throw Error(ErrorKind::EmptyInput, "no maps in " + a.maps);
    std::vector<AnomalyMap> maps(ids.size());
    parallel_for(static_cast<int>(ids.size()), Exec::Parallel,
                 [&](int i) { maps[i] = load_anomaly_map(raster_path(a.maps, ids[i])); });
    const BinarizeOutput out = binarize_maps(ids, maps, ThresholdMode::parse(a.threshold), cfg);
    write_binarize_output(out, a.out);
    int regions = 0;
    for (const auto& it : out.items) regions += it.region_count;
    std::printf("binarized %zu maps (%d regions) into %s\n", ids.size(), regions, a.out.c_str());
}

struct CropArgs {
    std::string images, masks, maps, out, manifest, config, split = "all";
};

void cmd_crop(const CropArgs& a) {
    const CropConfig cfg = load_config<CropConfig>(a.config);
    cfg.validate();
    std::map<std::string, std::optional<int>> labels;
    std::vector<std::string> ids;
    if (a.split != "all" && a.manifest.empty()) throw Error(ErrorKind::InvalidArgument, "--split needs --manifest");
    if (!a.manifest.empty()) {
        const auto mask_ids = raster_ids(a.masks);
        for (const auto& e : read_manifest(a.manifest)) {
            labels[e.image_id] = e.label;
            const bool wanted = a.split == "all" || (a.split == "labeled") == e.labeled;
            if (wanted && std::binary_search(mask_ids.begin(), mask_ids.end(), e.image_id)) ids.push_back(e.image_id);
        }
    } else {
        ids = raster_ids(a.masks);
    }
    std::vector<std::vector<SubImageRecord>> per_image(ids.size());
    parallel_for(static_cast<int>(ids.size()), Exec::Parallel, [&](int i) {
        const GrayImage image = load_gray_image(raster_path(a.images, ids[i]));
        const BinaryMask mask = load_mask(raster_path(a.masks, ids[i]));
        const AnomalyMap map = load_anomaly_map(raster_path(a.maps, ids[i]));
        per_image[i] = crop_regions(image, mask, map, cfg, ids[i]);
        const auto it = labels.find(ids[i]);
        for (auto& r : per_image[i]) r.label = it == labels.end() ? std::nullopt : it->second;
    });
    std::vector<SubImageRecord> all;
    for (auto& v : per_image)
        for (auto& r : v) all.push_back(std::move(r));
    write_crops(all, a.out);
    std::printf("wrote %zu sub-images to %s\n", all.size(), (fs::path(a.out) / "crops.jsonl").c_str());
}

struct TrainArgs {
    std::string crops, labeled, model_cfg, train_cfg, out;
    std::optional<std::uint64_t> seed;
    int jobs = 0;
};

void cmd_train(const TrainArgs& a) {
    const ModelConfig mc = load_config<ModelConfig>(a.model_cfg);
    TrainConfig tc = load_config<TrainConfig>(a.train_cfg);
    if (a.seed) tc.seed = *a.seed;
    set_jobs(a.jobs);
    spdlog::info("model config: {}", json(mc).dump());
    spdlog::info("train config: {}", json(tc).dump());

    std::vector<SubImageRecord> records;
    for (auto& r : read_crops(a.crops)) {
        r.label.reset();
        records.push_back(resize_to_model(r, mc.input_side));
    }
    if (!a.labeled.empty())
        for (auto& r : read_crops(a.labeled)) {
            if (!r.label) throw Error(ErrorKind::NoLabeledItems, "record without label in " + a.labeled);
            records.push_back(resize_to_model(r, mc.input_side));
        }

    const fs::path out = a.out;
    std::string history;
    TrainResult tr = train(records, mc, tc, [&](const EpochRecord& rec) {
        spdlog::info("epoch {} tau_t {:.4f} loss {:.5f}", rec.epoch, rec.tau_t, rec.mean.total);
        history += history_line(rec).dump() + "\n";
    });
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_checkpoint({std::move(tr.params), tr.inference_head, tc.tau_s}, out);
    write_file(out.parent_path() / "history.jsonl", history);
    std::printf("trained %zu epochs on %zu sub-images; inference head %d; checkpoint %s\n", tr.history.size(),
                records.size(), tr.inference_head, out.c_str());
}

struct ClassifyArgs {
    std::string crops, ckpt, strategy = "area", out = "predictions.jsonl", manifest;
    double merge_tau = 100.0;
    int jobs = 0;
};

void cmd_classify(const ClassifyArgs& a) {
    set_jobs(a.jobs);
    const Checkpoint ck = load_checkpoint(a.ckpt);
    std::vector<SubImageRecord> unlabeled;
    for (auto& r : read_crops(a.crops))
        if (!r.label) unlabeled.push_back(std::move(r));
    std::vector<std::string> ids;
    if (!a.manifest.empty()) {
        for (const auto& e : read_manifest(a.manifest))
            if (!e.labeled) ids.push_back(e.image_id);
    } else {
        std::set<std::string> seen;
        for (const auto& r : unlabeled)
            if (seen.insert(r.image_id).second) ids.push_back(r.image_id);
    }
    MergeConfig merge;
    merge.tau_alpha = a.merge_tau;
    merge.validate();
    const auto preds = classify_images(ck.params, ck.inference_head, ck.tau_s, ids, unlabeled,
                                       merge_strategy_from_string(a.strategy), merge);
    write_predictions(preds, a.out);
    std::printf("classified %zu images (%zu sub-images) into %s\n", preds.size(), unlabeled.size(), a.out.c_str());
}

struct EvaluateArgs {
    std::string pred, truth, out = "report.json", gt_masks, pred_masks;
};

void cmd_evaluate(const EvaluateArgs& a) {
    const auto preds = read_predictions(a.pred);
    const auto truth = read_manifest(a.truth);
    json report = {{"status", "ok"}, {"clustering", evaluate_predictions(preds, truth)}};
    if (!a.gt_masks.empty() && !a.pred_masks.empty()) {
        std::vector<BinaryMask> gt, pr;
        for (const auto& id : raster_ids(a.pred_masks)) {
            gt.push_back(load_mask(raster_path(a.gt_masks, id)));
            pr.push_back(load_mask(raster_path(a.pred_masks, id)));
        }
        const DetectionReport d = detection_rates(gt, pr);
        report["detection"] = {
            {"fpr", d.fpr}, {"fnr", d.fnr}, {"gt_regions", d.gt_regions}, {"pred_regions", d.pred_regions}};
    }
    write_file(a.out, report.dump(2) + "\n");
    const auto& c = report["clustering"];
    std::printf("nmi %.4f ari %.4f f1 %.4f -> %s\n", c["nmi"].get<double>(), c["ari"].get<double>(),
                c["f1"].get<double>(), a.out.c_str());
}

struct PipelineArgs {
    std::string config, data, out, threshold, strategy;
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs;
};

// Config file first, then --data as a synth-corpus layout, then explicit flags.
PipelineConfig resolve_pipeline(const PipelineArgs& a) {
    PipelineConfig c;
    if (!a.config.empty()) c = pipeline_config_from_json(read_json(a.config), fs::path(a.config).parent_path());
    if (!a.data.empty()) {
        const fs::path d = a.data;
        c.maps_dir = d / "maps";
        c.images_dir = d / "images";
        c.masks_dir = d / "masks";
        c.manifest = d / "manifest.jsonl";
    }
    if (!a.out.empty()) c.out_dir = a.out;
    if (!a.threshold.empty()) c.threshold = ThresholdMode::parse(a.threshold);
    if (!a.strategy.empty()) c.merge_strategy = merge_strategy_from_string(a.strategy);
    if (a.seed) c.seed = *a.seed;
    if (a.jobs) c.jobs = *a.jobs;
    return c;
}

void cmd_pipeline(const PipelineArgs& a) {
    const PipelineResult r = run_pipeline(resolve_pipeline(a));
    const auto& c = r.report["clustering"];
    std::printf("nmi %.4f ari %.4f f1 %.4f -> %s\n", c["nmi"].get<double>(), c["ari"].get<double>(),
                c["f1"].get<double>(), r.report_path.c_str());
}

void cmd_sweep(const PipelineArgs& a, const std::string& axis) {
    const SweepResult r = ablation_sweep(resolve_pipeline(a), sweep_axis_from_string(axis));
    std::fputs(r.csv.c_str(), stdout);
}

void cmd_inspect(const std::string& path, bool as_json) {
    const Checkpoint ck = load_checkpoint(path);
    const auto& specs = ck.params.layout().specs();
    if (as_json) {
        json tensors = json::array();
        for (const auto& s : specs) tensors.push_back({{"name", s.name}, {"shape", {s.rows, s.cols}}});
        std::cout << json{{"model", ck.params.config},
                          {"inference_head", ck.inference_head},
                          {"tau_s", ck.tau_s},
                          {"num_values", ck.params.values.size()},
                          {"tensors", tensors}}
                         .dump(2)
                  << "\n";
        return;
    }
    std::printf("model: %s\n", json(ck.params.config).dump().c_str());
    std::printf("inference head: %d  tau_s: %g  parameters: %zu\n", ck.inference_head, ck.tau_s,
                ck.params.values.size());
    for (const auto& s : specs) std::printf("  %-28s %4d x %-4d\n", s.name.c_str(), s.rows, s.cols);
}

}  // namespace

int main(int argc, char** argv) {
    init_logging();
    CLI::App app{"MEBin binarization and mask-guided novel class discovery for anomaly maps"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "mebinncd 0.1.0");

    SynthArgs synth;
    auto* s_synth = app.add_subcommand("synth", "Generate a seeded synthetic corpus");
    s_synth->add_option("--config", synth.config, "SynthConfig JSON (defaults when omitted)")->check(CLI::ExistingFile);
    s_synth->add_option("--out", synth.out, "Output directory")->required();
    s_synth->add_option("--seed", synth.seed, "Override the config seed");

    BinarizeArgs bin;
    auto* s_bin = app.add_subcommand("binarize", "Binarize anomaly maps into region masks");
    s_bin->add_option("--maps", bin.maps, "Directory of anomaly maps (16-bit PNG or raw F32)")->required();
    s_bin->add_option("--out", bin.out, "Output directory")->required();
    s_bin->add_option("--config", bin.config, "MebinConfig JSON")->check(CLI::ExistingFile);
    s_bin->add_option("--T", bin.T, "Number of sampled thresholds")->capture_default_str();
    s_bin->add_option("--tau", bin.tau, "Minimum stable run length")->capture_default_str();
    s_bin->add_option("--erosion", bin.erosion, "Erosion radius in pixels")->capture_default_str();
    s_bin->add_option("--connectivity", bin.connectivity, "4 or 8")->check(CLI::IsMember({4, 8}))->capture_default_str();
    s_bin->add_option("--threshold", bin.threshold, "mebin, otsu or a fixed value in [0,1]")->capture_default_str();

    CropArgs crop;
    auto* s_crop = app.add_subcommand("crop", "Cut square sub-images around mask regions");
    s_crop->add_option("--images", crop.images, "Directory of grayscale images")->required();
    s_crop->add_option("--masks", crop.masks, "Directory of region masks (one per image)")->required();
    s_crop->add_option("--maps", crop.maps, "Directory of anomaly maps (region scores)")->required();
    s_crop->add_option("--out", crop.out, "Output directory")->required();
    s_crop->add_option("--manifest", crop.manifest, "Manifest JSONL; attaches labels of labeled images");
    s_crop->add_option("--config", crop.config, "CropConfig JSON")->check(CLI::ExistingFile);
    s_crop->add_option("--split", crop.split, "Restrict to manifest images: all, labeled or unlabeled")
        ->check(CLI::IsMember({"all", "labeled", "unlabeled"}))
        ->capture_default_str();

    TrainArgs tr;
    auto* s_train = app.add_subcommand("train", "Train the mask-guided ViT");
    s_train->add_option("--crops", tr.crops, "Unlabeled crops.jsonl")->required()->check(CLI::ExistingFile);
    s_train->add_option("--labeled", tr.labeled, "Labeled crops.jsonl")->check(CLI::ExistingFile);
    s_train->add_option("--model-cfg", tr.model_cfg, "ModelConfig JSON")->check(CLI::ExistingFile);
    s_train->add_option("--train-cfg", tr.train_cfg, "TrainConfig JSON")->check(CLI::ExistingFile);
    s_train->add_option("--out", tr.out, "Checkpoint path; history.jsonl goes next to it")->required();
    s_train->add_option("--seed", tr.seed, "Override the training seed");
    s_train->add_option("--jobs", tr.jobs, "OpenMP threads (0 = default)");

    ClassifyArgs cl;
    auto* s_cls = app.add_subcommand("classify", "Predict and merge per-image class distributions");
    s_cls->add_option("--crops", cl.crops, "crops.jsonl (labeled records are skipped)")->required()->check(CLI::ExistingFile);
    s_cls->add_option("--ckpt", cl.ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
    s_cls->add_option("--merge-tau", cl.merge_tau, "Area temperature tau_alpha")->capture_default_str();
    s_cls->add_option("--strategy", cl.strategy, "avg, score or area")->capture_default_str();
    s_cls->add_option("--manifest", cl.manifest, "Manifest; images without crops are predicted normal");
    s_cls->add_option("--out", cl.out, "predictions.jsonl path")->capture_default_str();
    s_cls->add_option("--jobs", cl.jobs, "OpenMP threads (0 = default)");

    EvaluateArgs ev;
    auto* s_eval = app.add_subcommand("evaluate", "Clustering metrics and detection rates");
    s_eval->add_option("--pred", ev.pred, "predictions.jsonl")->required()->check(CLI::ExistingFile);
    s_eval->add_option("--truth", ev.truth, "Manifest JSONL with true classes")->required()->check(CLI::ExistingFile);
    s_eval->add_option("--out", ev.out, "Report path")->capture_default_str();
    s_eval->add_option("--gt-masks", ev.gt_masks, "Ground-truth mask directory (for FPR/FNR)");
    s_eval->add_option("--pred-masks", ev.pred_masks, "Predicted mask directory (for FPR/FNR)");

    PipelineArgs pl;
    auto add_pipeline_opts = [&](CLI::App* s) {
        s->add_option("--config", pl.config, "Pipeline config JSON")->check(CLI::ExistingFile);
        s->add_option("--data", pl.data, "Synth corpus directory (sets maps/images/masks/manifest)");
        s->add_option("--out", pl.out, "Output directory");
        s->add_option("--threshold", pl.threshold, "mebin, otsu or a fixed value");
        s->add_option("--strategy", pl.strategy, "Merge strategy: avg, score or area");
        s->add_option("--seed", pl.seed, "Run seed (also seeds training)");
        s->add_option("--jobs", pl.jobs, "OpenMP threads; 1 gives bit-reproducible runs");
    };
    auto* s_pipe = app.add_subcommand("pipeline", "binarize -> crop -> train -> classify -> evaluate");
    add_pipeline_opts(s_pipe);
    std::string axis;
    auto* s_sweep = app.add_subcommand("sweep", "Ablation sweep along one axis");
    add_pipeline_opts(s_sweep);
    s_sweep->add_option("--axis", axis, "fixed-threshold, L_m, merge-strategy, plc-threshold or mask-target")
        ->required();

    auto* s_model = app.add_subcommand("model", "Checkpoint utilities");
    s_model->require_subcommand(1);
    std::string ckpt_path;
    bool inspect_json = false;
    auto* s_inspect = s_model->add_subcommand("inspect", "Print checkpoint header and tensor shapes");
    s_inspect->add_option("ckpt", ckpt_path, "Checkpoint file")->required()->check(CLI::ExistingFile);
    s_inspect->add_flag("--json", inspect_json, "Machine-readable output");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*s_synth) cmd_synth(synth);
        else if (*s_bin) cmd_binarize(bin);
        else if (*s_crop) cmd_crop(crop);
        else if (*s_train) cmd_train(tr);
        else if (*s_cls) cmd_classify(cl);
        else if (*s_eval) cmd_evaluate(ev);
        else if (*s_pipe) cmd_pipeline(pl);
        else if (*s_sweep) cmd_sweep(pl, axis);
        else if (*s_inspect) cmd_inspect(ckpt_path, inspect_json);
    } catch (const StageError& e) {
        std::cerr << e.record().dump() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << json{{"status", "error"}, {"kind", std::string(to_string(e.kind()))}, {"message", e.message()}}.dump()
                  << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << json{{"status", "error"}, {"kind", "InvalidArgument"}, {"message", e.what()}}.dump() << "\n";
        return 2;
    }
    return 0;
}
