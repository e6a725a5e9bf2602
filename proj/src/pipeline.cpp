#include "mebinncd/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <spdlog/spdlog.h>

#include "mebinncd/config_json.hpp"
#include "mebinncd/parallel.hpp"

namespace mebinncd {

using nlohmann::json;

// --- threshold mode -----------------------------------------------------------------

std::string ThresholdMode::name() const {
    switch (kind) {
        case Kind::Mebin: return "mebin";
        case Kind::Otsu: return "otsu";
        case Kind::Fixed: {
            std::ostringstream s;
            s << epsilon;
            return s.str();
        }
    }
    return "mebin";
}

ThresholdMode ThresholdMode::parse(const std::string& s) {
    if (s == "mebin") return {};
    if (s == "otsu") return {Kind::Otsu, 0.0f};
    try {
        std::size_t used = 0;
        const float e = std::stof(s, &used);
        if (used == s.size() && e >= 0.0f && e <= 1.0f) return {Kind::Fixed, e};
    } catch (const std::exception&) {
    }
    throw Error(ErrorKind::ConfigInvalid, "threshold must be mebin, otsu or a number in [0,1], got '" + s + "'");
}

// --- config ---------------------------------------------------------------------------

void PipelineConfig::validate() const {
    mebin.validate();
    crop.validate();
    model.validate();
    train.validate();
    merge.validate();
    if (out_dir.empty()) throw Error(ErrorKind::ConfigInvalid, "output directory not set");
}

void to_json(json& j, const PipelineConfig& c) {
    j = {{"paths",
          {{"maps", c.maps_dir.string()},
           {"images", c.images_dir.string()},
           {"manifest", c.manifest.string()},
           {"masks", c.masks_dir.string()},
           {"out", c.out_dir.string()}}},
         {"threshold", c.threshold.name()},
         {"mebin", c.mebin},
         {"crop", c.crop},
         {"model", c.model},
         {"train", c.train},
         {"merge", c.merge},
         {"merge_strategy", to_string(c.merge_strategy)},
         {"seed", c.seed},
         {"jobs", c.jobs}};
}

PipelineConfig pipeline_config_from_json(const json& j, const fs::path& base) {
    reject_unknown_keys(j, {"paths", "threshold", "mebin", "crop", "model", "train", "merge", "merge_strategy", "seed",
                            "jobs"},
                        "pipeline config");
    PipelineConfig c;
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() || base.empty() ? fs::path(p) : base / p; };
    if (j.contains("paths")) {
        const auto& p = j.at("paths");
        reject_unknown_keys(p, {"maps", "images", "manifest", "masks", "out"}, "paths");
        if (p.contains("maps")) c.maps_dir = resolve(p.at("maps").get<std::string>());
        if (p.contains("images")) c.images_dir = resolve(p.at("images").get<std::string>());
        if (p.contains("manifest")) c.manifest = resolve(p.at("manifest").get<std::string>());
        if (p.contains("masks")) c.masks_dir = resolve(p.at("masks").get<std::string>());
        if (p.contains("out")) c.out_dir = resolve(p.at("out").get<std::string>());
    }
    if (j.contains("threshold")) {
        const auto& t = j.at("threshold");
        c.threshold = ThresholdMode::parse(t.is_number() ? json(t.get<double>()).dump() : t.get<std::string>());
    }
    if (j.contains("mebin")) c.mebin = j.at("mebin").get<MebinConfig>();
    if (j.contains("crop")) c.crop = j.at("crop").get<CropConfig>();
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    if (j.contains("merge")) c.merge = j.at("merge").get<MergeConfig>();
    if (j.contains("merge_strategy")) c.merge_strategy = merge_strategy_from_string(j.at("merge_strategy"));
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("jobs")) c.jobs = j.at("jobs").get<int>();
    return c;
}

// --- stage errors --------------------------------------------------------------------

StageError::StageError(std::string stage, ErrorKind kind, const std::string& message)
    : std::runtime_error(stage + ": " + std::string(to_string(kind)) + ": " + message),
      stage_(std::move(stage)),
      kind_(kind),
      detail_(message) {}

json StageError::record() const {
    return {{"status", "error"}, {"stage", stage_}, {"kind", std::string(to_string(kind_))}, {"message", detail_}};
}

namespace {

template <typename Fn>
auto run_stage(const std::string& stage, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const Error& e) {
        throw StageError(stage, e.kind(), e.message());
    } catch (const json::exception& e) {
        throw StageError(stage, ErrorKind::MalformedHeader, e.what());
    } catch (const fs::filesystem_error& e) {
        throw StageError(stage, ErrorKind::IoFailure, e.what());
    } catch (const std::exception& e) {
        throw StageError(stage, ErrorKind::InvalidArgument, e.what());
    }
}

std::string hex64(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

struct Hasher {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    Hasher& add(std::string_view s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        h ^= 0xff;
        h *= 0x100000001b3ULL;
        return *this;
    }
    Hasher& add_file(const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        if (!in) return add("<missing>");
        std::ostringstream ss;
        ss << in.rdbuf();
        return add(ss.str());
    }
    std::string hex() const { return hex64(h); }
};

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error(ErrorKind::MissingFile, "cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out || !out.write(text.data(), static_cast<std::streamsize>(text.size())))
        throw Error(ErrorKind::IoFailure, "cannot write " + p.string());
}

json box_json(const Box& b) { return {b.min_x, b.min_y, b.max_x, b.max_y}; }
Box box_from_json(const json& j) { return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()}; }

fs::path find_raster(const fs::path& dir, const std::string& id) {
    for (const char* ext : {".png", ".f32", ".raw"}) {
        fs::path p = dir / (id + ext);
        if (fs::exists(p)) return p;
    }
    throw Error(ErrorKind::MissingFile, "no raster for '" + id + "' in " + dir.string());
}

void require_dir(const fs::path& dir, const char* what) {
    if (dir.empty() || !fs::is_directory(dir))
        throw Error(ErrorKind::MissingFile, std::string(what) + " directory not found: " + dir.string());
}

}  // namespace

// --- binarize ------------------------------------------------------------------------------

BinarizeOutput binarize_maps(std::span<const std::string> ids, std::span<const AnomalyMap> maps,
                             const ThresholdMode& mode, const MebinConfig& cfg, Exec exec) {
    if (ids.size() != maps.size()) throw Error(ErrorKind::LengthMismatch, "ids and maps differ in length");
    cfg.validate();
    BinarizeOutput out;
    out.items.resize(maps.size());
    if (mode.kind == ThresholdMode::Kind::Mebin && !maps.empty()) out.range = compute_threshold_range(maps);
    parallel_for(static_cast<int>(maps.size()), exec, [&](int i) {
        BinarizeItem& item = out.items[i];
        item.image_id = ids[i];
        const AnomalyMap& map = maps[i];
        switch (mode.kind) {
            case ThresholdMode::Kind::Mebin: {
                MebinResult r = binarize(map, out.range, cfg, Exec::Serial);
                item.mask = std::move(r.mask);
                item.threshold = r.selected_threshold;
                item.counts = std::move(r.per_threshold_counts);
                break;
            }
            case ThresholdMode::Kind::Otsu:
                try {
                    item.threshold = otsu_threshold(map);
                    item.mask = fixed_threshold_binarize(map, *item.threshold, cfg);
                } catch (const Error& e) {
                    if (e.kind() != ErrorKind::DegenerateHistogram) throw;
                    item.mask = BinaryMask(map.width(), map.height());
                }
                break;
            case ThresholdMode::Kind::Fixed:
                item.threshold = mode.epsilon;
                item.mask = fixed_threshold_binarize(map, mode.epsilon, cfg);
                break;
        }
        item.region_count = connected_components(item.mask, cfg.connectivity).count;
    });
    return out;
}

void write_binarize_output(const BinarizeOutput& out, const fs::path& dir) {
    fs::create_directories(dir / "masks");
    json items = json::array();
    for (const auto& it : out.items) {
        save_mask(it.mask, dir / "masks" / (it.image_id + ".png"));
        json item = {{"image_id", it.image_id},
                     {"threshold", it.threshold ? json(*it.threshold) : json(nullptr)},
                     {"region_count", it.region_count}};
        if (!it.counts.empty()) item["counts"] = it.counts;
        items.push_back(std::move(item));
    }
    // One image per line keeps the count sequences readable.
    std::string text = "{\n  \"s_min\": " + json(out.range.s_min).dump() + ",\n  \"s_max\": " +
                       json(out.range.s_max).dump() + ",\n  \"images\": [";
    for (std::size_t i = 0; i < items.size(); ++i) text += (i ? ",\n    " : "\n    ") + items[i].dump();
    text += items.empty() ? "]\n}\n" : "\n  ]\n}\n";
    write_text(dir / "mebin_report.json", text);
}

BinarizeOutput read_binarize_output(const fs::path& dir) {
    const json report = json::parse(read_text(dir / "mebin_report.json"));
    BinarizeOutput out;
    out.range = {report.at("s_min").get<float>(), report.at("s_max").get<float>()};
    for (const auto& j : report.at("images")) {
        BinarizeItem it;
        it.image_id = j.at("image_id").get<std::string>();
        if (!j.at("threshold").is_null()) it.threshold = j.at("threshold").get<float>();
        it.region_count = j.at("region_count").get<int>();
        if (j.contains("counts")) it.counts = j.at("counts").get<std::vector<int>>();
        it.mask = load_mask(dir / "masks" / (it.image_id + ".png"));
        out.items.push_back(std::move(it));
    }
    return out;
}

// --- crops -----------------------------------------------------------------------------------

void write_crops(std::span<const SubImageRecord> records, const fs::path& dir) {
    fs::create_directories(dir / "crops");
    std::string lines;
    for (const auto& r : records) {
        const std::string stem = r.image_id + "_" + std::to_string(r.region_index);
        save_gray_image(r.sub_image, dir / "crops" / (stem + ".png"));
        save_mask(r.sub_mask, dir / "crops" / (stem + "_mask.png"));
        json j = {{"image_id", r.image_id},
                  {"region_index", r.region_index},
                  {"image", "crops/" + stem + ".png"},
                  {"mask", "crops/" + stem + "_mask.png"},
                  {"anomaly_score", r.anomaly_score},
                  {"area", r.area},
                  {"crop_box", box_json(r.crop_box)},
                  {"label", r.label ? json(*r.label) : json(nullptr)}};
        lines += j.dump() + "\n";
    }
    write_text(dir / "crops.jsonl", lines);
}

std::vector<SubImageRecord> read_crops(const fs::path& jsonl) {
    std::istringstream in(read_text(jsonl));
    const fs::path base = jsonl.parent_path();
    std::vector<SubImageRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        SubImageRecord r;
        r.image_id = j.at("image_id").get<std::string>();
        r.region_index = j.at("region_index").get<int>();
        r.sub_image = load_gray_image(base / j.at("image").get<std::string>());
        r.sub_mask = load_mask(base / j.at("mask").get<std::string>());
        r.anomaly_score = j.at("anomaly_score").get<double>();
        r.area = j.at("area").get<long long>();
        r.crop_box = box_from_json(j.at("crop_box"));
        if (!j.at("label").is_null()) r.label = j.at("label").get<int>();
        out.push_back(std::move(r));
    }
    return out;
}

// --- classify -----------------------------------------------------------------------------------

std::vector<ImagePrediction> classify_images(const ModelParams& params, int head, double tau_s,
                                             std::span<const std::string> image_ids,
                                             std::span<const SubImageRecord> unlabeled_crops,
                                             MergeStrategy strategy, const MergeConfig& merge, Exec exec) {
    const ModelConfig& mc = params.config;
    std::map<std::string, std::vector<int>> by_image;
    for (int i = 0; i < static_cast<int>(unlabeled_crops.size()); ++i)
        by_image[unlabeled_crops[i].image_id].push_back(i);

    std::vector<ClassDistribution> crop_pred(unlabeled_crops.size());
    parallel_for(static_cast<int>(unlabeled_crops.size()), exec,
                 [&](int i) { crop_pred[i] = predict(params, unlabeled_crops[i], head, tau_s); });

    std::vector<ImagePrediction> out(image_ids.size());
    for (std::size_t k = 0; k < image_ids.size(); ++k) {
        ImagePrediction& p = out[k];
        p.image_id = image_ids[k];
        const auto it = by_image.find(p.image_id);
        if (it == by_image.end()) {
            p.probs = Vec::Zero(mc.num_classes());
            p.probs[mc.num_known_classes] = 1.0;
            p.cluster = mc.num_known_classes;
            continue;
        }
        std::vector<ClassDistribution> preds;
        std::vector<double> areas, scores;
        for (int i : it->second) {
            preds.push_back(crop_pred[i]);
            areas.push_back(static_cast<double>(unlabeled_crops[i].area));
            scores.push_back(unlabeled_crops[i].anomaly_score);
        }
        const MergeResult m = merge_baselines(preds, areas, scores, strategy, merge);
        p.probs = m.image_pred.probs;
        for (std::size_t r = 0; r < it->second.size(); ++r)
            p.regions.push_back({unlabeled_crops[it->second[r]].region_index, preds[r].probs, m.weights[r]});
        // Unlabeled images belong to novel classes; known slots are not candidates.
        Eigen::Index best = 0;
        p.probs.tail(mc.num_novel_classes).maxCoeff(&best);
        p.cluster = mc.num_known_classes + static_cast<int>(best);
        p.num_regions = static_cast<int>(preds.size());
    }
    return out;
}

namespace {

std::vector<double> to_vector(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vec from_vector(const std::vector<double>& v) { return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())); }

int argmax(const Vec& v) {
    Eigen::Index i = 0;
    v.maxCoeff(&i);
    return static_cast<int>(i);
}

}  // namespace

void write_predictions(std::span<const ImagePrediction> preds, const fs::path& path) {
    std::string lines;
    for (const auto& p : preds) {
        std::vector<int> order(p.probs.size());
        for (int i = 0; i < static_cast<int>(order.size()); ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p.probs[a] > p.probs[b]; });
        json top = json::array();
        for (int i = 0; i < std::min<int>(3, static_cast<int>(order.size())); ++i)
            top.push_back({{"class", order[i]}, {"prob", p.probs[order[i]]}});
        json regions = json::array();
        for (const auto& r : p.regions)
            regions.push_back({{"region_index", r.region_index},
                               {"probs", to_vector(r.probs)},
                               {"argmax", argmax(r.probs)},
                               {"weight", r.weight}});
        json j = {{"image_id", p.image_id},
                  {"cluster", p.cluster},
                  {"probs", to_vector(p.probs)},
                  {"top_k", top},
                  {"num_regions", p.num_regions},
                  {"regions", regions}};
        lines += j.dump() + "\n";
    }
    write_text(path, lines);
}

std::vector<ImagePrediction> read_predictions(const fs::path& path) {
    std::istringstream in(read_text(path));
    std::vector<ImagePrediction> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        ImagePrediction p;
        p.image_id = j.at("image_id").get<std::string>();
        p.cluster = j.at("cluster").get<int>();
        p.probs = from_vector(j.at("probs").get<std::vector<double>>());
        p.num_regions = j.value("num_regions", 0);
        if (j.contains("regions"))
            for (const auto& r : j.at("regions"))
                p.regions.push_back({r.at("region_index").get<int>(), from_vector(r.at("probs").get<std::vector<double>>()),
                                     r.at("weight").get<double>()});
        out.push_back(std::move(p));
    }
    return out;
}

// --- evaluate -------------------------------------------------------------------------------------

json evaluate_predictions(std::span<const ImagePrediction> preds, std::span<const ManifestEntry> truth) {
    std::map<std::string, std::string> class_of;
    for (const auto& e : truth) class_of[e.image_id] = e.class_name;
    std::vector<std::string> names;
    for (const auto& p : preds) {
        const auto it = class_of.find(p.image_id);
        if (it == class_of.end()) throw Error(ErrorKind::PairMismatch, "no truth entry for '" + p.image_id + "'");
        names.push_back(it->second);
    }
    std::vector<std::string> classes = names;
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    std::vector<int> y_true, y_pred;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        y_true.push_back(static_cast<int>(std::lower_bound(classes.begin(), classes.end(), names[i]) - classes.begin()));
        y_pred.push_back(preds[i].cluster);
    }
    const ClusteringReport r = clustering_report(y_true, y_pred);
    json mapping = json::object();
    for (std::size_t k = 0; k < r.matching.cluster_ids.size(); ++k) {
        const int t = r.matching.mapping[k];
        mapping[std::to_string(r.matching.cluster_ids[k])] = t >= 0 ? json(classes[t]) : json(nullptr);
    }
    return {{"nmi", r.nmi},
            {"ari", r.ari},
            {"f1", r.f1},
            {"micro_f1", r.micro_f1},
            {"num_images", preds.size()},
            {"classes", classes},
            {"clusters", r.matching.cluster_ids},
            {"mapping", mapping},
            {"confusion", r.matching.confusion}};
}

json history_line(const EpochRecord& rec) {
    return {{"epoch", rec.epoch},
            {"tau_t", rec.tau_t},
            {"steps", rec.steps},
            {"total", rec.mean.total},
            {"rep_u", rec.mean.rep_u},
            {"rep_l", rec.mean.rep_l},
            {"cls_l", rec.mean.cls_l},
            {"cls_u", rec.mean.cls_u},
            {"entropy", rec.mean.entropy},
            {"head_cls", rec.mean.head_cls}};
}

// --- full pipeline ---------------------------------------------------------------------------------

namespace {

struct Inputs {
    std::vector<ManifestEntry> manifest;
    std::vector<std::string> unlabeled_ids;
};

bool stage_done(const fs::path& dir) { return fs::exists(dir / "stage.json"); }

void mark_done(const fs::path& dir, const json& key) { write_text(dir / "stage.json", key.dump(2) + "\n"); }

std::vector<SubImageRecord> resized(std::span<const SubImageRecord> records, int side) {
    std::vector<SubImageRecord> out(records.size());
    parallel_for(static_cast<int>(records.size()), Exec::Parallel,
                 [&](int i) { out[i] = resize_to_model(records[i], side); });
    return out;
}

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& cfg_in) {
    PipelineConfig cfg = cfg_in;
    run_stage("config", [&] {
        cfg.validate();
        cfg.train.seed = cfg.seed;
        return 0;
    });
    set_jobs(cfg.jobs);
    fs::create_directories(cfg.out_dir);
    spdlog::info("pipeline config: {}", json(cfg).dump());

    try {
        // binarize
        Inputs in;
        std::string bin_hash;
        fs::path bin_dir;
        BinarizeOutput bin = run_stage("binarize", [&] {
            if (!fs::is_regular_file(cfg.manifest))
                throw Error(ErrorKind::MissingFile, "manifest not found: " + cfg.manifest.string());
            require_dir(cfg.maps_dir, "maps");
            in.manifest = read_manifest(cfg.manifest);
            for (const auto& e : in.manifest)
                if (!e.labeled) in.unlabeled_ids.push_back(e.image_id);
            if (in.unlabeled_ids.empty()) throw Error(ErrorKind::EmptyInput, "manifest has no unlabeled images");
            Hasher h;
            h.add("binarize").add(cfg.threshold.name()).add(json(cfg.mebin).dump()).add_file(cfg.manifest);
            for (const auto& id : in.unlabeled_ids) h.add_file(find_raster(cfg.maps_dir, id));
            bin_hash = h.hex();
            bin_dir = cfg.out_dir / ("binarize-" + bin_hash);
            if (stage_done(bin_dir)) {
                spdlog::info("binarize: reusing {}", bin_dir.string());
                return read_binarize_output(bin_dir);
            }
            std::vector<AnomalyMap> maps(in.unlabeled_ids.size());
            parallel_for(static_cast<int>(maps.size()), Exec::Parallel, [&](int i) {
                LoadStats stats;
                maps[i] = load_anomaly_map(find_raster(cfg.maps_dir, in.unlabeled_ids[i]), &stats);
                if (stats.clamped) spdlog::warn("{}: clamped {} map values", in.unlabeled_ids[i], stats.clamped);
            });
            BinarizeOutput out = binarize_maps(in.unlabeled_ids, maps, cfg.threshold, cfg.mebin);
            write_binarize_output(out, bin_dir);
            mark_done(bin_dir, {{"stage", "binarize"}, {"threshold", cfg.threshold.name()}, {"mebin", cfg.mebin}});
            return out;
        });

        // crop
        std::string crop_hash;
        fs::path crop_dir;
        std::vector<SubImageRecord> crops = run_stage("crop", [&] {
            require_dir(cfg.images_dir, "images");
            Hasher h;
            h.add("crop").add(bin_hash).add(json(cfg.crop).dump());
            for (const auto& e : in.manifest) {
                h.add_file(find_raster(cfg.images_dir, e.image_id));
                if (e.labeled) h.add_file(find_raster(cfg.masks_dir, e.image_id));
            }
            crop_hash = h.hex();
            crop_dir = cfg.out_dir / ("crop-" + crop_hash);
            if (stage_done(crop_dir)) {
                spdlog::info("crop: reusing {}", crop_dir.string());
                return read_crops(crop_dir / "crops.jsonl");
            }
            std::map<std::string, const BinaryMask*> pred_mask;
            for (const auto& it : bin.items) pred_mask[it.image_id] = &it.mask;
            std::vector<std::vector<SubImageRecord>> per_image(in.manifest.size());
            parallel_for(static_cast<int>(in.manifest.size()), Exec::Parallel, [&](int i) {
                const ManifestEntry& e = in.manifest[i];
                const GrayImage image = load_gray_image(find_raster(cfg.images_dir, e.image_id));
                AnomalyMap map = load_anomaly_map(find_raster(cfg.maps_dir, e.image_id));
                BinaryMask mask;
                if (e.labeled) {
                    require_dir(cfg.masks_dir, "masks");
                    mask = load_mask(find_raster(cfg.masks_dir, e.image_id));
                } else {
                    mask = *pred_mask.at(e.image_id);
                }
                per_image[i] = crop_regions(image, mask, map, cfg.crop, e.image_id);
                for (auto& r : per_image[i]) r.label = e.labeled ? e.label : std::nullopt;
            });
            std::vector<SubImageRecord> all;
            for (auto& v : per_image)
                for (auto& r : v) all.push_back(std::move(r));
            write_crops(all, crop_dir);
            mark_done(crop_dir, {{"stage", "crop"}, {"crop", cfg.crop}, {"binarize", bin_hash}});
            return all;
        });
        int labeled_crops = 0;
        for (const auto& r : crops) labeled_crops += r.label.has_value();
        spdlog::info("crop: {} sub-images ({} labeled)", crops.size(), labeled_crops);

        // train
        std::string train_hash;
        Checkpoint ckpt = run_stage("train", [&] {
            Hasher h;
            h.add("train").add(crop_hash).add(json(cfg.model).dump()).add(json(cfg.train).dump());
            train_hash = h.hex();
            const fs::path dir = cfg.out_dir / ("train-" + train_hash);
            if (stage_done(dir)) {
                spdlog::info("train: reusing {}", dir.string());
                return load_checkpoint(dir / "model.ckpt");
            }
            fs::create_directories(dir);
            const auto records = resized(crops, cfg.model.input_side);
            std::string history;
            TrainResult tr = train(records, cfg.model, cfg.train, [&](const EpochRecord& rec) {
                spdlog::info("epoch {} tau_t {:.4f} loss {:.5f}", rec.epoch, rec.tau_t, rec.mean.total);
                history += history_line(rec).dump() + "\n";
            });
            write_text(dir / "history.jsonl", history);
            Checkpoint c{std::move(tr.params), tr.inference_head, cfg.train.tau_s};
            save_checkpoint(c, dir / "model.ckpt");
            mark_done(dir, {{"stage", "train"}, {"model", cfg.model}, {"train", cfg.train}, {"crop", crop_hash}});
            return c;
        });

        // classify
        std::string classify_hash;
        std::vector<ImagePrediction> preds = run_stage("classify", [&] {
            Hasher h;
            h.add("classify-v3").add(train_hash).add(to_string(cfg.merge_strategy)).add(json(cfg.merge).dump());
            classify_hash = h.hex();
            const fs::path dir = cfg.out_dir / ("classify-" + classify_hash);
            if (stage_done(dir)) return read_predictions(dir / "predictions.jsonl");
            fs::create_directories(dir);
            std::vector<SubImageRecord> unlabeled;
            for (const auto& r : crops)
                if (!r.label) unlabeled.push_back(r);
            auto p = classify_images(ckpt.params, ckpt.inference_head, ckpt.tau_s, in.unlabeled_ids, unlabeled,
                                     cfg.merge_strategy, cfg.merge);
            write_predictions(p, dir / "predictions.jsonl");
            mark_done(dir, {{"stage", "classify"}, {"merge_strategy", to_string(cfg.merge_strategy)}});
            return p;
        });

        // evaluate
        PipelineResult result;
        result.report = run_stage("evaluate", [&] {
            std::vector<ManifestEntry> truth;
            for (const auto& e : in.manifest)
                if (!e.labeled) truth.push_back(e);
            json report = {{"status", "ok"}, {"clustering", evaluate_predictions(preds, truth)}};
            if (!cfg.masks_dir.empty() && fs::is_directory(cfg.masks_dir)) {
                std::vector<BinaryMask> gt, pred;
                for (const auto& it : bin.items) {
                    gt.push_back(load_mask(find_raster(cfg.masks_dir, it.image_id)));
                    pred.push_back(it.mask);
                }
                const DetectionReport d = detection_rates(gt, pred, cfg.mebin.connectivity);
                report["detection"] = {{"fpr", d.fpr},
                                       {"fnr", d.fnr},
                                       {"gt_regions", d.gt_regions},
                                       {"pred_regions", d.pred_regions}};
            }
            json resolved = cfg;
            resolved.erase("paths");
            resolved.erase("jobs");
            report["config"] = resolved;
            report["stages"] = {{"binarize", bin_hash}, {"crop", crop_hash}, {"train", train_hash},
                                {"classify", classify_hash}};
            report["counts"] = {{"unlabeled_images", in.unlabeled_ids.size()},
                                {"sub_images", crops.size()},
                                {"labeled_sub_images", labeled_crops}};
            report["inference_head"] = ckpt.inference_head;
            const std::string text = report.dump(2) + "\n";
            write_text(cfg.out_dir / "report.json", text);
            if (fs::exists(cfg.out_dir / "error.json")) fs::remove(cfg.out_dir / "error.json");
            return report;
        });
        result.report_path = cfg.out_dir / "report.json";
        return result;
    } catch (const StageError& e) {
        std::ofstream(cfg.out_dir / "error.json") << e.record().dump(2) << "\n";
        throw;
    }
}

// --- sweeps -----------------------------------------------------------------------------------------------

std::string to_string(SweepAxis a) {
    switch (a) {
        case SweepAxis::FixedThreshold: return "fixed-threshold";
        case SweepAxis::MaskedLayers: return "L_m";
        case SweepAxis::MergeStrategy: return "merge-strategy";
        case SweepAxis::PlcThreshold: return "plc-threshold";
        case SweepAxis::MaskTarget: return "mask-target";
    }
    return "fixed-threshold";
}

SweepAxis sweep_axis_from_string(const std::string& s) {
    if (s == "fixed-threshold" || s == "threshold") return SweepAxis::FixedThreshold;
    if (s == "L_m" || s == "masked-layers" || s == "lm") return SweepAxis::MaskedLayers;
    if (s == "merge-strategy" || s == "merge") return SweepAxis::MergeStrategy;
    if (s == "plc-threshold" || s == "plc") return SweepAxis::PlcThreshold;
    if (s == "mask-target") return SweepAxis::MaskTarget;
    throw Error(ErrorKind::ConfigInvalid, "unknown sweep axis '" + s + "'");
}

std::vector<std::string> sweep_values(const PipelineConfig& cfg, SweepAxis axis) {
    switch (axis) {
        case SweepAxis::FixedThreshold: return {"0.1", "0.3", "0.5", "0.7", "0.9", "otsu", "mebin"};
        case SweepAxis::MaskedLayers: {
            const int L = cfg.model.num_layers;
            std::vector<int> v{1, (L + 3) / 4, (L + 1) / 2, (3 * L + 3) / 4, L};
            std::vector<std::string> out;
            for (int x : v)
                if (std::find(out.begin(), out.end(), std::to_string(x)) == out.end()) out.push_back(std::to_string(x));
            return out;
        }
        case SweepAxis::MergeStrategy: return {"avg", "score", "area"};
        case SweepAxis::PlcThreshold: return {"0", "0.3", "0.5", "0.7", "0.9"};
        case SweepAxis::MaskTarget: return {"all", "patch", "class"};
    }
    return {};
}

SweepResult ablation_sweep(const PipelineConfig& cfg, SweepAxis axis) {
    SweepResult res;
    json rows = json::array();
    std::ostringstream csv;
    csv << to_string(axis) << ",nmi,ari,f1,fpr,fnr\n";
    for (const std::string& value : sweep_values(cfg, axis)) {
        PipelineConfig c = cfg;
        switch (axis) {
            case SweepAxis::FixedThreshold: c.threshold = ThresholdMode::parse(value); break;
            case SweepAxis::MaskedLayers: c.model.masked_layers = std::stoi(value); break;
            case SweepAxis::MergeStrategy: c.merge_strategy = merge_strategy_from_string(value); break;
            case SweepAxis::PlcThreshold: c.train.plc_threshold = std::stod(value); break;
            case SweepAxis::MaskTarget: c.model.mask_target = mask_target_from_string(value); break;
        }
        spdlog::info("sweep {} = {}", to_string(axis), value);
        const PipelineResult r = run_pipeline(c);
        const json& cl = r.report.at("clustering");
        json row = {{"value", value}, {"nmi", cl.at("nmi")}, {"ari", cl.at("ari")}, {"f1", cl.at("f1")}};
        if (r.report.contains("detection")) {
            row["fpr"] = r.report["detection"]["fpr"];
            row["fnr"] = r.report["detection"]["fnr"];
        }
        csv << value << ',' << cl.at("nmi").get<double>() << ',' << cl.at("ari").get<double>() << ','
            << cl.at("f1").get<double>() << ',' << (row.contains("fpr") ? row["fpr"].dump() : "") << ','
            << (row.contains("fnr") ? row["fnr"].dump() : "") << '\n';
        rows.push_back(row);
    }
    res.table = {{"axis", to_string(axis)}, {"rows", rows}};
    res.csv = csv.str();
    fs::create_directories(cfg.out_dir);
    write_text(cfg.out_dir / ("sweep_" + to_string(axis) + ".json"), res.table.dump(2) + "\n");
    write_text(cfg.out_dir / ("sweep_" + to_string(axis) + ".csv"), res.csv);
    return res;
}

}  // namespace mebinncd
