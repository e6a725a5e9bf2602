#include "mebinncd/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "mebinncd/error.hpp"

namespace mebinncd {

std::string to_string(ShapeClass c) {
    switch (c) {
        case ShapeClass::LineScratch: return "line-scratch";
        case ShapeClass::Blob: return "blob";
        case ShapeClass::RingHole: return "ring-hole";
        case ShapeClass::SpeckleCluster: return "speckle-cluster";
        case ShapeClass::Normal: return "normal";
    }
    return "normal";
}

ShapeClass shape_class_from_string(const std::string& s) {
    if (s == "line-scratch") return ShapeClass::LineScratch;
    if (s == "blob") return ShapeClass::Blob;
    if (s == "ring-hole") return ShapeClass::RingHole;
    if (s == "speckle-cluster") return ShapeClass::SpeckleCluster;
    if (s == "normal") return ShapeClass::Normal;
    throw Error(ErrorKind::ConfigInvalid, "unknown shape class '" + s + "'");
}

void SynthConfig::validate() const {
    if (image_side < 4 * kMinShapeSize)
        throw Error(ErrorKind::ConfigInvalid, "image_side must be >= " + std::to_string(4 * kMinShapeSize));
    if (num_unlabeled < 0 || num_labeled < 0) throw Error(ErrorKind::ConfigInvalid, "image counts must be >= 0");
    if (num_unlabeled > 0 && novel_classes.empty())
        throw Error(ErrorKind::ConfigInvalid, "novel_classes is empty");
    if (num_labeled > 0 && known_classes.empty())
        throw Error(ErrorKind::ConfigInvalid, "known_classes is empty");
    for (ShapeClass k : known_classes) {
        if (std::count(novel_classes.begin(), novel_classes.end(), k))
            throw Error(ErrorKind::ConfigInvalid, "class '" + to_string(k) + "' is both known and novel");
        if (k == ShapeClass::Normal)
            throw Error(ErrorKind::ConfigInvalid, "the normal class cannot be a known class");
    }
    auto has_duplicates = [](std::vector<ShapeClass> v) {
        std::sort(v.begin(), v.end());
        return std::adjacent_find(v.begin(), v.end()) != v.end();
    };
    if (has_duplicates(novel_classes) || has_duplicates(known_classes))
        throw Error(ErrorKind::ConfigInvalid, "class lists contain duplicates");
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(noise.miss_rate)) throw Error(ErrorKind::ConfigInvalid, "miss_rate must be in [0,1]");
    if (!unit(noise.fp_blob_rate)) throw Error(ErrorKind::ConfigInvalid, "fp_blob_rate must be in [0,1]");
    if (!(noise.blur_radius >= 0.0)) throw Error(ErrorKind::ConfigInvalid, "blur_radius must be >= 0");
    if (!(noise.score_jitter >= 0.0)) throw Error(ErrorKind::ConfigInvalid, "score_jitter must be >= 0");
}

namespace {

using Rng = std::mt19937_64;

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

struct Shape {
    BinaryMask mask;   // GT pixels
    BinaryMask paint;  // pixels drawn dark in the image
    Box bounds;
    nlohmann::json params;
};

Shape empty_shape(int side) { return {BinaryMask(side, side), BinaryMask(side, side), {}, {}}; }

void finish(Shape& s) {
    s.bounds = mask_bounds(s.mask);
    s.params["box"] = {s.bounds.min_x, s.bounds.min_y, s.bounds.max_x, s.bounds.max_y};
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double dx = bx - ax, dy = by - ay;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return std::hypot(px - (ax + t * dx), py - (ay + t * dy));
}

Shape draw_line(int side, double cx, double cy, double scale, Rng& rng) {
    Shape s = empty_shape(side);
    const double length = uniform(rng, 18.0, 28.0) * scale;
    const double half_width = uniform(rng, 2.0, 2.6);
    const double angle = uniform(rng, 0.0, std::numbers::pi);
    const double ax = cx - 0.5 * length * std::cos(angle), ay = cy - 0.5 * length * std::sin(angle);
    const double bx = cx + 0.5 * length * std::cos(angle), by = cy + 0.5 * length * std::sin(angle);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
            if (segment_distance(x, y, ax, ay, bx, by) <= half_width) s.mask.at(x, y) = s.paint.at(x, y) = 1;
    s.params = {{"type", "line-scratch"}, {"center", {cx, cy}}, {"length", length}, {"half_width", half_width},
                {"angle", angle}};
    return s;
}

Shape draw_blob(int side, double cx, double cy, double scale, Rng& rng) {
    Shape s = empty_shape(side);
    const double a = uniform(rng, 5.0, 8.0) * scale;
    const double b = a * uniform(rng, 0.7, 1.0);
    const double phi = uniform(rng, 0.0, std::numbers::pi);
    const double c = std::cos(phi), sn = std::sin(phi);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            const double u = (x - cx) * c + (y - cy) * sn;
            const double v = -(x - cx) * sn + (y - cy) * c;
            if ((u * u) / (a * a) + (v * v) / (b * b) <= 1.0) s.mask.at(x, y) = s.paint.at(x, y) = 1;
        }
    s.params = {{"type", "blob"}, {"center", {cx, cy}}, {"semi_axes", {a, b}}, {"angle", phi}};
    return s;
}

Shape draw_ring(int side, double cx, double cy, double scale, Rng& rng) {
    Shape s = empty_shape(side);
    const double outer = uniform(rng, 7.5, 10.0) * scale;
    const double thickness = uniform(rng, 3.5, 4.5);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            const double d = std::hypot(x - cx, y - cy);
            if (d <= outer && d > outer - thickness) s.mask.at(x, y) = s.paint.at(x, y) = 1;
        }
    s.params = {{"type", "ring-hole"}, {"center", {cx, cy}}, {"outer_radius", outer}, {"thickness", thickness}};
    return s;
}

// 3x3 dots on a random walk with Chebyshev step 4. Each dot's 5x5
// neighbourhood touches its parent's, so the GT mask is one component while
// the image shows separate speckles.
Shape draw_speckle(int side, double cx, double cy, double scale, Rng& rng) {
    Shape s = empty_shape(side);
    const int count = uniform_int(rng, 5, 8);
    const double reach = 9.0 * scale;
    std::vector<std::pair<int, int>> dots{{static_cast<int>(std::lround(cx)), static_cast<int>(std::lround(cy))}};
    for (int attempt = 0; attempt < 200 && static_cast<int>(dots.size()) < count; ++attempt) {
        const auto [px, py] = dots[uniform_int(rng, 0, static_cast<int>(dots.size()) - 1)];
        int dx = uniform_int(rng, -4, 4), dy = uniform_int(rng, -4, 4);
        if (std::max(std::abs(dx), std::abs(dy)) != 4) continue;
        const int nx = px + dx, ny = py + dy;
        if (std::hypot(nx - cx, ny - cy) > reach) continue;
        bool clash = false;
        for (const auto& [qx, qy] : dots) clash |= std::max(std::abs(qx - nx), std::abs(qy - ny)) < 4;
        if (!clash) dots.emplace_back(nx, ny);
    }
    nlohmann::json centers = nlohmann::json::array();
    for (const auto& [dx, dy] : dots) {
        centers.push_back({dx, dy});
        for (int oy = -2; oy <= 2; ++oy)
            for (int ox = -2; ox <= 2; ++ox) {
                const int x = dx + ox, y = dy + oy;
                if (x < 0 || y < 0 || x >= side || y >= side) continue;
                s.mask.at(x, y) = 1;
                if (std::abs(ox) <= 1 && std::abs(oy) <= 1) s.paint.at(x, y) = 1;
            }
    }
    s.params = {{"type", "speckle-cluster"}, {"center", {cx, cy}}, {"dots", centers}};
    return s;
}

Shape draw_shape(ShapeClass cls, int side, double cx, double cy, double scale, Rng& rng) {
    switch (cls) {
        case ShapeClass::LineScratch: return draw_line(side, cx, cy, scale, rng);
        case ShapeClass::Blob: return draw_blob(side, cx, cy, scale, rng);
        case ShapeClass::RingHole: return draw_ring(side, cx, cy, scale, rng);
        case ShapeClass::SpeckleCluster: return draw_speckle(side, cx, cy, scale, rng);
        case ShapeClass::Normal: break;
    }
    return empty_shape(side);
}

Box grow(const Box& b, int by) { return {b.min_x - by, b.min_y - by, b.max_x + by, b.max_y + by}; }

bool overlaps(const Box& a, const Box& b) {
    return a.min_x <= b.max_x && b.min_x <= a.max_x && a.min_y <= b.max_y && b.min_y <= a.max_y;
}

bool inside(const Box& b, int side, int margin) {
    return b.min_x >= margin && b.min_y >= margin && b.max_x < side - margin && b.max_y < side - margin;
}

std::vector<float> gaussian_kernel(double sigma) {
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<float> k(2 * r + 1);
    double sum = 0.0;
    for (int i = -r; i <= r; ++i) sum += (k[i + r] = static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma))));
    for (float& v : k) v = static_cast<float>(v / sum);
    return k;
}

// Separable blur with zero padding.
std::vector<float> blur(const BinaryMask& mask, double sigma) {
    const int w = mask.width(), h = mask.height();
    std::vector<float> src(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) src[i] = mask[i] ? 1.0f : 0.0f;
    if (sigma <= 0.0) return src;
    const auto k = gaussian_kernel(sigma);
    const int r = static_cast<int>(k.size() / 2);
    std::vector<float> tmp(src.size(), 0.0f), out(src.size(), 0.0f);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float acc = 0.0f;
            for (int i = -r; i <= r; ++i)
                if (x + i >= 0 && x + i < w) acc += k[i + r] * src[static_cast<std::size_t>(y) * w + x + i];
            tmp[static_cast<std::size_t>(y) * w + x] = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float acc = 0.0f;
            for (int i = -r; i <= r; ++i)
                if (y + i >= 0 && y + i < h) acc += k[i + r] * tmp[static_cast<std::size_t>(y + i) * w + x];
            out[static_cast<std::size_t>(y) * w + x] = acc;
        }
    return out;
}

SynthImage render(const SynthConfig& cfg, ShapeClass cls, std::uint64_t seed) {
    Rng rng(seed);
    const int side = cfg.image_side;
    const double scale = side / 64.0;
    const NoiseConfig& noise = cfg.noise;
    // Footprints include blur tails and must stay `gap` pixels apart so every
    // region stays a separate component in the map at any threshold.
    const int tail = static_cast<int>(std::ceil(3.0 * noise.blur_radius));
    const int gap = 3;

    SynthImage img;
    img.class_name = to_string(cls);
    img.gt_mask = BinaryMask(side, side);
    img.map = AnomalyMap(side, side, 0.0f);
    img.image = GrayImage(side, side);

    // Background texture: smooth gradient plus seeded pixel noise.
    const double base = uniform(rng, 110.0, 150.0);
    const double fx = uniform(rng, 0.5, 2.0), fy = uniform(rng, 0.5, 2.0), phase = uniform(rng, 0.0, 6.28);
    std::normal_distribution<double> pixel_noise(0.0, 6.0);
    std::vector<double> tone(static_cast<std::size_t>(side) * side);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
            tone[static_cast<std::size_t>(y) * side + x] =
                base + 10.0 * std::sin(2.0 * std::numbers::pi * (fx * x + fy * y) / side + phase) + pixel_noise(rng);

    // Anomaly shapes, separated by `gap` pixels.
    std::vector<Shape> shapes;
    std::vector<Box> occupied;
    if (cls != ShapeClass::Normal) {
        const int wanted = uniform_int(rng, 1, 2);
        for (int n = 0; n < wanted; ++n) {
            for (int attempt = 0; attempt < 60; ++attempt) {
                const double cx = uniform(rng, 0.2 * side, 0.8 * side);
                const double cy = uniform(rng, 0.2 * side, 0.8 * side);
                Shape s = draw_shape(cls, side, cx, cy, scale, rng);
                finish(s);
                if (s.bounds.max_x < s.bounds.min_x || !inside(s.bounds, side, 1)) continue;
                const Box footprint = grow(s.bounds, tail);
                const Box grown = grow(footprint, gap);
                if (std::any_of(occupied.begin(), occupied.end(), [&](const Box& b) { return overlaps(b, grown); }))
                    continue;
                occupied.push_back(footprint);
                shapes.push_back(std::move(s));
                break;
            }
        }
    }

    const double dark = uniform(rng, 60.0, 80.0);
    std::normal_distribution<double> shape_noise(0.0, 4.0);
    std::vector<int> owner(static_cast<std::size_t>(side) * side, -1);
    for (std::size_t k = 0; k < shapes.size(); ++k) {
        for (std::size_t i = 0; i < tone.size(); ++i) {
            if (shapes[k].paint[i]) tone[i] -= dark + shape_noise(rng);
            if (shapes[k].mask[i]) {
                img.gt_mask[i] = 1;
                owner[i] = static_cast<int>(k);
            }
        }
        img.shapes.push_back(shapes[k].params);
    }
    for (std::size_t i = 0; i < tone.size(); ++i)
        img.image[i] = static_cast<std::uint8_t>(std::clamp(std::lround(tone[i]), 0L, 255L));

    // Anomaly map: one blurred bump per GT region, peak equal to its score.
    // The blurred mask is remapped so the faint tail is cut (support hugs the
    // shape) and the core saturates into a plateau, like a detector response.
    constexpr float kTailCut = 0.3f;
    constexpr float kPlateau = 0.7f;
    // Detector response scale varies per image; false positives sit at a
    // fraction of it, so no single global threshold separates the two.
    const double image_score = uniform(rng, 0.2, 1.0);
    std::normal_distribution<double> jitter(0.0, 1.0);
    std::bernoulli_distribution drop(noise.miss_rate);
    std::vector<double> shape_score(shapes.size());
    std::vector<char> shape_in_map(shapes.size());
    for (std::size_t k = 0; k < shapes.size(); ++k) {
        shape_score[k] = std::clamp(image_score + noise.score_jitter * jitter(rng), 0.15, 1.0);
        shape_in_map[k] = !drop(rng);
        if (!shape_in_map[k]) continue;
        const auto bumped = blur(shapes[k].mask, noise.blur_radius);
        const float peak = *std::max_element(bumped.begin(), bumped.end());
        for (std::size_t i = 0; i < bumped.size(); ++i) {
            const float rel = std::clamp((bumped[i] / peak - kTailCut) / (kPlateau - kTailCut), 0.0f, 1.0f);
            const float v = static_cast<float>(shape_score[k]) * rel;
            img.map[i] = std::max(img.map[i], v);
        }
    }

    // False-positive blobs away from the GT shapes.
    const int fp_count = noise.fp_blob_rate > 0.0 ? std::poisson_distribution<int>(noise.fp_blob_rate)(rng) : 0;
    for (int n = 0; n < fp_count; ++n) {
        for (int attempt = 0; attempt < 60; ++attempt) {
            const double sigma = uniform(rng, 1.5, 2.5);
            const double peak = image_score * uniform(rng, 0.2, 0.5);
            const double cx = uniform(rng, 0.1 * side, 0.9 * side), cy = uniform(rng, 0.1 * side, 0.9 * side);
            const int r = static_cast<int>(std::ceil(3.0 * sigma));
            const Box b{static_cast<int>(cx) - r, static_cast<int>(cy) - r, static_cast<int>(cx) + r,
                        static_cast<int>(cy) + r};
            if (!inside(b, side, 0)) continue;
            const Box grown = grow(b, gap);
            if (std::any_of(occupied.begin(), occupied.end(), [&](const Box& o) { return overlaps(o, grown); }))
                continue;
            occupied.push_back(b);
            img.fp_blobs.push_back(b);
            for (int y = b.min_y; y <= b.max_y; ++y)
                for (int x = b.min_x; x <= b.max_x; ++x) {
                    const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    if (d2 > 9.0 * sigma * sigma) continue;
                    const float v = static_cast<float>(peak * std::exp(-0.5 * d2 / (sigma * sigma)));
                    img.map.at(x, y) = std::max(img.map.at(x, y), v);
                }
            break;
        }
    }
    for (float& v : img.map.data()) v = std::clamp(v, 0.0f, 1.0f);

    const RegionSet regions = connected_components(img.gt_mask, Connectivity::Eight);
    img.regions.resize(regions.count);
    for (int id = 1; id <= regions.count; ++id) {
        const Box& b = regions.boxes[id - 1];
        int k = -1;
        for (int y = b.min_y; y <= b.max_y && k < 0; ++y)
            for (int x = b.min_x; x <= b.max_x && k < 0; ++x)
                if (regions.label_at(x, y) == id) k = owner[static_cast<std::size_t>(y) * side + x];
        img.regions[id - 1] = {b, shape_score[k], static_cast<bool>(shape_in_map[k])};
    }
    return img;
}

std::string image_id(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "img_%05d", index);
    return buf;
}

}  // namespace

SynthCorpus generate(const SynthConfig& cfg) {
    cfg.validate();
    SynthCorpus corpus;
    corpus.config = cfg;
    const int total = cfg.num_unlabeled + cfg.num_labeled;
    corpus.images.reserve(total);
    for (int i = 0; i < total; ++i) {
        const bool labeled = i >= cfg.num_unlabeled;
        const int local = labeled ? i - cfg.num_unlabeled : i;
        const auto& classes = labeled ? cfg.known_classes : cfg.novel_classes;
        const int class_index = local % static_cast<int>(classes.size());
        SynthImage img = render(cfg, classes[class_index], splitmix(splitmix(cfg.seed) ^ static_cast<std::uint64_t>(i)));
        img.image_id = image_id(i);
        img.labeled = labeled;
        img.class_index = class_index;
        if (labeled) img.label = class_index;
        corpus.images.push_back(std::move(img));
    }
    return corpus;
}

nlohmann::json manifest_entry(const SynthImage& img) {
    nlohmann::json regions = nlohmann::json::array();
    for (const auto& r : img.regions)
        regions.push_back({{"box", {r.box.min_x, r.box.min_y, r.box.max_x, r.box.max_y}},
                           {"score", r.score},
                           {"in_map", r.in_map}});
    nlohmann::json fps = nlohmann::json::array();
    for (const auto& b : img.fp_blobs) fps.push_back({b.min_x, b.min_y, b.max_x, b.max_y});
    nlohmann::json j = {{"image_id", img.image_id},
                        {"class", img.class_name},
                        {"split", img.labeled ? "labeled" : "unlabeled"},
                        {"shapes", img.shapes},
                        {"regions", regions},
                        {"fp_blobs", fps}};
    if (img.label) j["label"] = *img.label;
    return j;
}

void write_corpus(const SynthCorpus& corpus, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    for (const char* sub : {"images", "masks", "maps"}) fs::create_directories(dir / sub);
    std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary);
    if (!manifest) throw Error(ErrorKind::IoFailure, "cannot write " + (dir / "manifest.jsonl").string());
    for (const auto& img : corpus.images) {
        const std::string name = img.image_id + ".png";
        save_gray_image(img.image, dir / "images" / name);
        save_mask(img.gt_mask, dir / "masks" / name);
        save_anomaly_map_png(img.map, dir / "maps" / name);
        manifest << manifest_entry(img).dump() << '\n';
    }
    if (!manifest) throw Error(ErrorKind::IoFailure, "failed writing manifest");
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::MissingFile, "cannot open manifest " + path.string());
    std::vector<ManifestEntry> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            ManifestEntry e;
            e.image_id = j.at("image_id").get<std::string>();
            e.class_name = j.at("class").get<std::string>();
            e.labeled = j.value("split", "unlabeled") == "labeled";
            if (j.contains("label")) e.label = j.at("label").get<int>();
            if (j.contains("regions"))
                for (const auto& r : j.at("regions")) {
                    const auto& b = r.at("box");
                    e.regions.push_back({b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()});
                }
            out.push_back(std::move(e));
        } catch (const nlohmann::json::exception& ex) {
            throw Error(ErrorKind::MalformedHeader,
                        path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
        }
    }
    return out;
}

}  // namespace mebinncd
