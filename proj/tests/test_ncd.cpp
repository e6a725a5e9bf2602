#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "mebinncd/error.hpp"
#include "mebinncd/ncd.hpp"

using namespace mebinncd;

namespace {

Vec unit(int dim, int axis) {
    Vec v = Vec::Zero(dim);
    v[axis] = 1.0;
    return v;
}

Vec random_unit(int dim, std::mt19937_64& rng) {
    std::normal_distribution<double> n;
    Vec v(dim);
    for (int i = 0; i < dim; ++i) v[i] = n(rng);
    return v.normalized();
}

ClassDistribution random_dist(int k, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.01, 1.0);
    Vec v(k);
    for (int i = 0; i < k; ++i) v[i] = u(rng);
    return {v / v.sum()};
}

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

SubImageRecord random_record(int side, std::mt19937_64& rng, std::optional<int> label) {
    SubImageRecord r;
    r.sub_image = GrayImage(side, side);
    r.sub_mask = BinaryMask(side, side);
    for (std::size_t i = 0; i < r.sub_image.size(); ++i) r.sub_image[i] = static_cast<std::uint8_t>(rng() % 256);
    const int x0 = static_cast<int>(rng() % 4), y0 = static_cast<int>(rng() % 4);
    for (int y = y0; y < y0 + side / 2; ++y)
        for (int x = x0; x < x0 + side / 2; ++x) r.sub_mask.at(x, y) = 1;
    r.anomaly_score = 0.3 + 0.7 * static_cast<double>(rng() % 100) / 100.0;
    r.area = static_cast<long long>(r.sub_mask.count());
    r.label = label;
    return r;
}

}  // namespace

TEST_CASE("pseudo labels") {
    const ClassDistribution q = pseudo_label(Vec::Constant(4, 0.3), 2, 0.07);
    CHECK(q.probs[0] == 0.0);
    CHECK(q.probs[1] == 0.0);
    CHECK(q.probs[2] == doctest::Approx(0.5));
    CHECK(q.probs[3] == doctest::Approx(0.5));

    Vec logits(4);
    logits << 5.0, 3.0, 1.0, 0.0;
    const double sharp = pseudo_label(logits, 2, 0.04).probs.maxCoeff();
    const double soft = pseudo_label(logits, 2, 0.07).probs.maxCoeff();
    CHECK(sharp > soft);
    CHECK(soft == doctest::Approx(1.0 / (1.0 + std::exp(-1.0 / 0.07))));

    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0, 10);
    for (int t = 0; t < 200; ++t) {
        Vec l(6);
        for (int i = 0; i < 6; ++i) l[i] = n(rng);
        const ClassDistribution p = pseudo_label(l, 3, 0.05);
        CHECK(p.probs.head(3).cwiseAbs().maxCoeff() == 0.0);
        CHECK(std::abs(p.probs.sum() - 1.0) < 1e-9);
        CHECK(p.is_valid());
    }
}

TEST_CASE("pseudo label correction") {
    const ClassDistribution q{Vec::Constant(4, 0.25)};
    const auto same = correct_pseudo_label(q, 0.7, 0);
    CHECK(same.probs == q.probs);

    const auto zero = correct_pseudo_label(q, 0.0, 1);
    CHECK(zero.probs[1] == doctest::Approx(0.5 + 0.5 * 0.25));
    CHECK(zero.probs[0] == doctest::Approx(0.125));

    const auto mid = correct_pseudo_label(q, 0.3, 0);
    CHECK(mid.probs[0] == doctest::Approx(0.4));
    for (int i = 1; i < 4; ++i) CHECK(mid.probs[i] == doctest::Approx(0.2));
    CHECK(mid.probs.sum() == doctest::Approx(1.0));
}

TEST_CASE("self contrastive closed form and order invariance") {
    const double tau = 0.07;
    std::vector<Vec> z{unit(4, 0), unit(4, 1)};
    const ContrastiveResult r = loss_contrastive_self(z, z, tau);
    const double expect = -std::log(std::exp(1 / tau) / (std::exp(1 / tau) + 1.0));
    CHECK(r.loss == doctest::Approx(expect).epsilon(1e-12));
    CHECK(r.contributing == 2);

    std::mt19937_64 rng(4);
    std::vector<Vec> a, b;
    for (int i = 0; i < 6; ++i) a.push_back(random_unit(5, rng)), b.push_back(random_unit(5, rng));
    const double base = loss_contrastive_self(a, b, tau).loss;
    std::vector<Vec> ap{a.rbegin(), a.rend()}, bp{b.rbegin(), b.rend()};
    CHECK(loss_contrastive_self(ap, bp, tau).loss == doctest::Approx(base).epsilon(1e-12));

    CHECK_THROWS_AS(loss_contrastive_self(std::vector<Vec>{unit(2, 0)}, std::vector<Vec>{unit(2, 0)}, tau), Error);
}

TEST_CASE("supervised contrastive closed forms") {
    std::vector<Vec> z{unit(3, 0), unit(3, 0), unit(3, 1), unit(3, 1)};
    const std::vector<int> labels{0, 0, 1, 1};
    const ContrastiveResult r = loss_contrastive_supervised(z, z, labels, 1.0);
    CHECK(r.loss == doctest::Approx(std::log(2 * std::numbers::e + 2) - 1.0).epsilon(1e-12));

    // One label for everyone: positives are all other candidates.
    std::mt19937_64 rng(2);
    std::vector<Vec> a, b;
    for (int i = 0; i < 5; ++i) a.push_back(random_unit(4, rng)), b.push_back(random_unit(4, rng));
    const std::vector<int> same(5, 3);
    double expect = 0.0;
    for (int j = 0; j < 5; ++j) {
        double denom = 0.0, pos = 0.0;
        for (int c = 0; c < 5; ++c) denom += std::exp(a[j].dot(b[c]) / 0.5);
        for (int c = 0; c < 5; ++c)
            if (c != j) pos += -std::log(std::exp(a[j].dot(b[c]) / 0.5) / denom) / 4.0;
        expect += pos / 5.0;
    }
    CHECK(loss_contrastive_supervised(a, b, same, 0.5).loss == doctest::Approx(expect).epsilon(1e-12));

    // Anchors without positives are skipped.
    const ContrastiveResult skip = loss_contrastive_supervised(a, b, std::vector<int>{0, 1, 2, 3, 3}, 0.5);
    CHECK(skip.contributing == 2);
}

TEST_CASE("contrastive gradients match finite differences") {
    std::mt19937_64 rng(7);
    std::vector<Vec> a, b;
    for (int i = 0; i < 4; ++i) a.push_back(random_unit(3, rng)), b.push_back(random_unit(3, rng));
    const std::vector<int> labels{0, 1, 0, 1};
    const auto r = loss_contrastive_supervised(a, b, labels, 0.3);
    const double h = 1e-6;
    for (int j = 0; j < 4; ++j)
        for (int d = 0; d < 3; ++d) {
            auto ap = a, am = a;
            ap[j][d] += h;
            am[j][d] -= h;
            const double fd = (loss_contrastive_supervised(ap, b, labels, 0.3).loss -
                               loss_contrastive_supervised(am, b, labels, 0.3).loss) / (2 * h);
            CHECK(r.grad_anchors[j][d] == doctest::Approx(fd).epsilon(1e-6));
        }
}

TEST_CASE("classification loss") {
    const ClassDistribution one{unit(3, 1)};
    CHECK(loss_classification(std::vector{one}, std::vector{one}) == doctest::Approx(0.0));

    const ClassDistribution uni{Vec::Constant(5, 0.2)};
    CHECK(loss_classification(std::vector{uni}, std::vector{uni}) == doctest::Approx(std::log(5.0)));

    std::mt19937_64 rng(5);
    std::vector<ClassDistribution> p, t;
    for (int i = 0; i < 6; ++i) p.push_back(random_dist(4, rng)), t.push_back(random_dist(4, rng));
    double direct = 0.0, swapped = 0.0;
    for (int i = 0; i < 6; ++i)
        for (int c = 0; c < 4; ++c) {
            direct -= t[i].probs[c] * std::log(p[i].probs[c]) / 6.0;
            swapped -= t[(i + 3) % 6].probs[c] * std::log(p[i].probs[c]) / 6.0;
        }
    CHECK(loss_classification(p, t) == doctest::Approx(direct).epsilon(1e-12));
    CHECK(loss_classification(p, t, true) == doctest::Approx(swapped).epsilon(1e-12));
}

TEST_CASE("entropy regularizer") {
    const ClassDistribution one{unit(4, 2)};
    CHECK(loss_regularizer(std::vector{one, one}, std::vector{one}) == doctest::Approx(0.0));

    std::vector<ClassDistribution> spread;
    for (int k = 0; k < 4; ++k) spread.push_back({unit(4, k)});
    CHECK(loss_regularizer(spread, spread) == doctest::Approx(std::log(4.0)));

    std::mt19937_64 rng(6);
    std::vector<ClassDistribution> a, b;
    for (int i = 0; i < 3; ++i) a.push_back(random_dist(3, rng)), b.push_back(random_dist(3, rng));
    double h = 0.0;
    for (int c = 0; c < 3; ++c) {
        double m = 0.0;
        for (int i = 0; i < 3; ++i) m += (a[i].probs[c] + b[i].probs[c]) / 6.0;
        h -= m * std::log(m);
    }
    CHECK(loss_regularizer(a, b) == doctest::Approx(h).epsilon(1e-12));
}

TEST_CASE("teacher temperature schedule") {
    TrainConfig c;
    CHECK(c.teacher_temperature(0) == doctest::Approx(0.07));
    CHECK(c.teacher_temperature(3) == doctest::Approx(0.07));
    CHECK(c.teacher_temperature(4) < 0.07);
    CHECK(c.teacher_temperature(40) == doctest::Approx(0.04));
    CHECK(c.teacher_temperature(49) == doctest::Approx(0.04));
    for (int e = 1; e < 50; ++e) CHECK(c.teacher_temperature(e) <= c.teacher_temperature(e - 1));

    CHECK(c.batch_size == 32);
    CHECK(c.epochs == 50);
    CHECK(c.learning_rate == 0.003);
    CHECK(c.tau_u == 0.07);
    CHECK(c.tau_c == 1.0);
    TrainConfig bad;
    bad.lambda = 1.5;
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("augmentation") {
    std::mt19937_64 rng(3);
    const SubImageRecord r = random_record(16, rng, std::nullopt);
    const View id = apply_augment(r.sub_image, r.sub_mask, AugmentParams::identity());
    CHECK(id.image == r.sub_image);
    CHECK(id.mask == r.sub_mask);

    for (std::uint64_t s = 0; s < 50; ++s) {
        const auto [a, b] = augment(r, s);
        for (const View* v : {&a, &b}) {
            CHECK(v->image.same_shape(16, 16));
            for (std::size_t i = 0; i < v->mask.size(); ++i) CHECK(v->mask[i] <= 1);
        }
        const auto [a2, b2] = augment(r, s);
        CHECK(a.image == a2.image);
        CHECK(b.mask == b2.mask);
    }
}

TEST_CASE("lambda 1 ignores unlabeled items") {
    const ModelConfig mc = tiny();
    const ModelParams params = ModelParams::initialize(mc, 3);
    TrainConfig tc;
    tc.lambda = 1.0;
    std::mt19937_64 rng(9);
    std::vector<SubImageRecord> recs;
    for (int i = 0; i < 6; ++i) recs.push_back(random_record(16, rng, i < 4 ? std::optional<int>(i % 2) : std::nullopt));
    auto views = [&](const std::vector<SubImageRecord>& rs, std::vector<PreparedView>& va, std::vector<PreparedView>& vb,
                     std::vector<ItemMeta>& meta) {
        for (std::size_t i = 0; i < rs.size(); ++i) {
            const auto [a, b] = augment(rs[i], i);
            va.push_back(prepare_view(a, mc));
            vb.push_back(prepare_view(b, mc));
            meta.push_back({rs[i].label, rs[i].anomaly_score});
        }
    };
    std::vector<PreparedView> a1, b1, a2, b2;
    std::vector<ItemMeta> m1, m2;
    views(recs, a1, b1, m1);
    auto changed = recs;
    for (int i = 4; i < 6; ++i) changed[i] = random_record(16, rng, std::nullopt);
    views(changed, a2, b2, m2);
    const auto g1 = batch_gradient(params, a1, b1, m1, tc, 0.07);
    const auto g2 = batch_gradient(params, a2, b2, m2, tc, 0.07);
    CHECK(g1.grad == g2.grad);
}

TEST_CASE("serial and parallel batch gradients are identical") {
    const ModelConfig mc = tiny();
    const ModelParams params = ModelParams::initialize(mc, 4);
    std::mt19937_64 rng(10);
    std::vector<PreparedView> va, vb;
    std::vector<ItemMeta> meta;
    for (int i = 0; i < 8; ++i) {
        const auto r = random_record(16, rng, i < 3 ? std::optional<int>(i % 2) : std::nullopt);
        const auto [a, b] = augment(r, 100 + i);
        va.push_back(prepare_view(a, mc));
        vb.push_back(prepare_view(b, mc));
        meta.push_back({r.label, r.anomaly_score});
    }
    const auto s = batch_gradient(params, va, vb, meta, TrainConfig{}, 0.07, nullptr, Exec::Serial);
    const auto p = batch_gradient(params, va, vb, meta, TrainConfig{}, 0.07, nullptr, Exec::Parallel);
    CHECK(s.grad == p.grad);
    CHECK(s.loss.total == p.loss.total);
}

TEST_CASE("short training run") {
    const ModelConfig mc = tiny();
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 8;
    std::mt19937_64 rng(12);
    std::vector<SubImageRecord> recs;
    for (int i = 0; i < 16; ++i) recs.push_back(random_record(16, rng, i < 6 ? std::optional<int>(i % 2) : std::nullopt));
    int calls = 0;
    const TrainResult r = train(recs, mc, tc, [&](const EpochRecord&) { ++calls; });
    CHECK(calls == 3);
    REQUIRE(r.history.size() == 3);
    for (const auto& e : r.history) CHECK(std::isfinite(e.mean.total));
    CHECK(r.inference_head >= 0);
    CHECK(r.inference_head < mc.num_heads_classifier);

    const TrainResult again = train(recs, mc, tc);
    CHECK(again.params.values == r.params.values);

    const ClassDistribution p = predict(r.params, recs[8], r.inference_head, tc.tau_s);
    CHECK(p.is_valid());
    CHECK(p.probs.size() == mc.num_classes());

    auto bad = recs;
    bad[0].label = 7;
    CHECK_THROWS_AS(train(bad, mc, tc), Error);
}
