#include <doctest.h>

#include <filesystem>
#include <random>

#include "mebinncd/error.hpp"
#include "mebinncd/mgvit.hpp"
#include "oracles.hpp"

using namespace mebinncd;

namespace {

ModelConfig tiny() {
    ModelConfig c;
    c.input_side = 16;
    c.patch_size = 4;
    c.embed_dim = 8;
    c.num_heads = 2;
    c.num_layers = 2;
    c.masked_layers = 1;
    c.projection_dim = 4;
    c.mlp_ratio = 2;
    return c;
}

GrayImage random_image(int side, std::mt19937_64& rng) {
    GrayImage g(side, side);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<std::uint8_t>(rng() % 256);
    return g;
}

double max_diff(const ForwardOutput& a, const ForwardOutput& b) {
    double d = (a.cls_token - b.cls_token).cwiseAbs().maxCoeff();
    d = std::max(d, (a.projection - b.projection).cwiseAbs().maxCoeff());
    for (std::size_t h = 0; h < a.logits.size(); ++h) d = std::max(d, (a.logits[h] - b.logits[h]).cwiseAbs().maxCoeff());
    return d;
}

}  // namespace

TEST_CASE("pool mask") {
    const ModelConfig cfg = tiny();
    const MaskVector full = pool_mask(BinaryMask(16, 16, 1), cfg);
    REQUIRE(full.pooled.size() == 17);
    for (std::size_t i = 0; i < full.pooled.size(); ++i) {
        CHECK(full.pooled[i] == 1.0);
        CHECK(full.additive[i] == 0.0);
    }

    const MaskVector none = pool_mask(BinaryMask(16, 16), cfg);
    CHECK(none.pooled[0] == 1.0);
    CHECK(none.additive[0] == 0.0);
    for (std::size_t i = 1; i < none.pooled.size(); ++i) {
        CHECK(none.pooled[i] == 0.0);
        CHECK(none.additive[i] == kMaskedLogit);
    }

    // First patch cell exactly half covered: closed (strict comparison).
    BinaryMask half(16, 16);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 4; ++x) half.at(x, y) = 1;
    // Second cell three quarters covered: open.
    for (int y = 0; y < 3; ++y)
        for (int x = 4; x < 8; ++x) half.at(x, y) = 1;
    const MaskVector h = pool_mask(half, cfg);
    CHECK(h.pooled[1] == 0.5);
    CHECK(h.additive[1] == kMaskedLogit);
    CHECK(h.pooled[2] == 0.75);
    CHECK(h.additive[2] == 0.0);
}

TEST_CASE("patchify standardizes per image") {
    const ModelConfig cfg = tiny();
    std::mt19937_64 rng(3);
    const Mat p = patchify(random_image(16, rng), cfg);
    CHECK(p.rows() == 16);
    CHECK(p.cols() == 16);
    CHECK(std::abs(p.mean()) < 1e-12);
    // A brightness shift leaves the patches unchanged.
    GrayImage a(16, 16), b(16, 16);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<std::uint8_t>(50 + i % 40), b[i] = a[i] + 60;
    CHECK((patchify(a, cfg) - patchify(b, cfg)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("open mask equals the unmasked model") {
    const ModelConfig cfg = tiny();
    ModelConfig plain = cfg;
    plain.masked_layers = 0;
    const ModelParams p = ModelParams::initialize(cfg, 4);
    ModelParams q(plain);
    q.values = p.values;
    std::mt19937_64 rng(6);
    for (int i = 0; i < 10; ++i) {
        const GrayImage img = random_image(16, rng);
        const auto a = forward(img, MaskVector::open(cfg.num_tokens()), p);
        const auto b = forward(img, MaskVector::open(cfg.num_tokens()), q);
        CHECK(max_diff(a, b) == 0.0);
    }
}

TEST_CASE("attention rows are distributions and closed cells get no weight") {
    const ModelConfig cfg = tiny();
    const ModelParams p = ModelParams::initialize(cfg, 5);
    std::mt19937_64 rng(7);
    BinaryMask m(16, 16);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) m.at(x, y) = 1;
    ForwardCache cache;
    const auto out = forward(random_image(16, rng), pool_mask(m, cfg), p, &cache);
    CHECK(out.projection.norm() == doctest::Approx(1.0));
    REQUIRE(cache.valid);
    for (const auto& layer : cache.layers)
        for (const Mat& pr : layer.probs)
            for (Eigen::Index r = 0; r < pr.rows(); ++r) CHECK(std::abs(pr.row(r).sum() - 1.0) < 1e-9);

    const MaskVector mv = pool_mask(m, cfg);
    const auto rows = cls_attention(cache);
    for (const auto& row : rows)
        for (std::size_t t = 1; t < row.size(); ++t)
            if (mv.additive[t] != 0.0) CHECK(row[t] < 1e-6);
}

TEST_CASE("masked cells do not influence the output through the CLS row") {
    // With one layer that masks only the CLS query, pixels under closed cells
    // still reach patch tokens but never the CLS token of that layer.
    ModelConfig cfg = tiny();
    cfg.num_layers = 1;
    cfg.masked_layers = 1;
    const ModelParams p = ModelParams::initialize(cfg, 2);
    std::mt19937_64 rng(8);
    BinaryMask m(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 8; ++x) m.at(x, y) = 1;
    // Standardization is per image, so perturb the patch matrix directly.
    const Mat pa = patchify(random_image(16, rng), cfg);
    Mat pb = pa;
    for (int r = 0; r < pb.rows(); ++r)
        if ((r % 4) >= 2)
            for (int c = 0; c < pb.cols(); ++c) pb(r, c) += 0.5 * std::sin(r + c);
    const MaskVector mv = pool_mask(m, cfg);
    const auto oa = forward(pa, mv, p);
    const auto ob = forward(pb, mv, p);
    CHECK((oa.cls_token - ob.cls_token).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("zero cotangent gives a zero gradient") {
    const ModelConfig cfg = tiny();
    const ModelParams p = ModelParams::initialize(cfg, 1);
    std::mt19937_64 rng(1);
    ForwardCache cache;
    const auto out = forward(random_image(16, rng), MaskVector::open(cfg.num_tokens()), p, &cache);
    std::vector<double> grad(p.values.size(), 0.0);
    backward(cache, OutputGrad{}, p, grad);
    for (double g : grad) CHECK(g == 0.0);
    (void)out;
}

TEST_CASE("backward matches finite differences on a projection objective") {
    const ModelConfig cfg = tiny();
    ModelParams p = ModelParams::initialize(cfg, 9);
    std::mt19937_64 rng(2);
    const Mat patches = patchify(random_image(16, rng), cfg);
    BinaryMask m(16, 16);
    for (int y = 4; y < 14; ++y)
        for (int x = 2; x < 12; ++x) m.at(x, y) = 1;
    const MaskVector mv = pool_mask(m, cfg);
    Vec w = Vec::LinSpaced(cfg.projection_dim, -1.0, 1.0);
    std::vector<Vec> wl;
    for (int h = 0; h < cfg.num_heads_classifier; ++h) wl.push_back(Vec::LinSpaced(cfg.num_classes(), 0.3 * h, -0.5));

    auto objective = [&](const ModelParams& q) {
        const auto o = forward(patches, mv, q);
        double v = w.dot(o.projection);
        for (std::size_t h = 0; h < wl.size(); ++h) v += wl[h].dot(o.logits[h]);
        return v;
    };
    ForwardCache cache;
    forward(patches, mv, p, &cache);
    std::vector<double> grad(p.values.size(), 0.0);
    backward(cache, OutputGrad{wl, w, {}}, p, grad);

    double worst = 0.0;
    for (std::size_t k = 0; k < p.values.size(); k += 7) {
        const double saved = p.values[k];
        p.values[k] = saved + 1e-5;
        const double up = objective(p);
        p.values[k] = saved - 1e-5;
        const double down = objective(p);
        p.values[k] = saved;
        const double fd = (up - down) / 2e-5;
        worst = std::max(worst, std::abs(fd - grad[k]) / std::max({std::abs(fd), std::abs(grad[k]), 1e-6}));
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("layout and config validation") {
    const ModelConfig cfg = tiny();
    const ParamLayout layout(cfg);
    std::size_t total = 0;
    for (const auto& s : layout.specs()) {
        CHECK(s.offset == total);
        total += s.size();
    }
    CHECK(total == layout.total());
    CHECK(layout.find(layout.spec(layout.cls).name) == layout.cls);

    ModelConfig bad = cfg;
    bad.patch_size = 5;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = cfg;
    bad.num_heads = 3;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = cfg;
    bad.masked_layers = 3;
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("checkpoint round trip") {
    const ModelConfig cfg = tiny();
    Checkpoint ck{ModelParams::initialize(cfg, 12), 1, 0.1};
    const auto path = std::filesystem::temp_directory_path() / "mebinncd_unit" / "model.ckpt";
    std::filesystem::create_directories(path.parent_path());
    save_checkpoint(ck, path);
    const Checkpoint back = load_checkpoint(path);
    CHECK(back.params.values == ck.params.values);
    CHECK(back.inference_head == 1);
    CHECK(back.tau_s == 0.1);
    CHECK(back.params.config.embed_dim == cfg.embed_dim);
    CHECK(to_string(back.params.config.mask_target) == to_string(cfg.mask_target));
}

TEST_CASE("mask target names") {
    for (auto t : {MaskTarget::ClassToken, MaskTarget::PatchTokens, MaskTarget::AllTokens})
        CHECK(mask_target_from_string(to_string(t)) == t);
    CHECK_THROWS_AS(mask_target_from_string("nope"), Error);
}
