#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "mebinncd/error.hpp"
#include "mebinncd/raster.hpp"
#include "oracles.hpp"

using namespace mebinncd;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "mebinncd_unit";
    fs::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("connected components: empty and diagonal connectivity") {
    CHECK(connected_components(BinaryMask(5, 5)).count == 0);

    BinaryMask diag(2, 2);
    diag.at(0, 0) = 1;
    diag.at(1, 1) = 1;
    CHECK(connected_components(diag, Connectivity::Eight).count == 1);
    CHECK(connected_components(diag, Connectivity::Four).count == 2);
}

TEST_CASE("connected components match flood fill on random masks") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const BinaryMask m = oracle::random_mask(16, 16, 0.1 + 0.6 * (trial % 7) / 7.0, rng);
        for (int c : {4, 8}) {
            const RegionSet rs = connected_components(m, connectivity_from_int(c));
            REQUIRE(rs.count == oracle::component_count(m, c));
            long long area = 0;
            for (long long a : rs.areas) area += a;
            CHECK(area == static_cast<long long>(m.count()));
            // IDs in raster-scan order of first occurrence.
            int next = 1;
            for (int label : rs.labels)
                if (label >= next) {
                    CHECK(label == next);
                    ++next;
                }
        }
    }
}

TEST_CASE("component boxes enclose their pixels") {
    std::mt19937_64 rng(3);
    const BinaryMask m = oracle::random_mask(20, 14, 0.3, rng);
    const RegionSet rs = connected_components(m);
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x)
            if (const int id = rs.label_at(x, y)) CHECK(rs.boxes[id - 1].contains(x, y));
    for (int id = 1; id <= rs.count; ++id)
        CHECK(static_cast<long long>(rs.component_mask(id).count()) == rs.areas[id - 1]);
}

TEST_CASE("erosion") {
    std::mt19937_64 rng(5);
    const BinaryMask m = oracle::random_mask(12, 12, 0.7, rng);
    CHECK(erode(m, 0) == m);

    BinaryMask ones(3, 3, 1);
    const BinaryMask e = erode(ones, 1);
    CHECK(e.count() == 1);
    CHECK(e.at(1, 1) == 1);

    for (int trial = 0; trial < 50; ++trial) {
        const BinaryMask r = oracle::random_mask(12, 12, 0.75, rng);
        for (int radius : {1, 2}) CHECK(erode(r, radius) == oracle::window_min(r, radius));
    }
}

TEST_CASE("reconstruction keeps whole components touched by the seed") {
    BinaryMask src(8, 3);
    for (int x = 0; x < 3; ++x) src.at(x, 1) = 1;
    for (int x = 5; x < 8; ++x) src.at(x, 1) = 1;
    BinaryMask seed(8, 3);
    seed.at(1, 1) = 1;
    const BinaryMask r = reconstruct(seed, src, Connectivity::Eight);
    CHECK(r.count() == 3);
    CHECK(r.at(0, 1) == 1);
    CHECK(r.at(6, 1) == 0);
}

TEST_CASE("box iou") {
    const Box a{0, 0, 9, 9};
    CHECK(box_iou(a, a) == doctest::Approx(1.0));
    CHECK(box_iou(a, Box{20, 20, 29, 29}) == 0.0);
    CHECK(box_iou(a, Box{5, 0, 14, 9}) == doctest::Approx(50.0 / 150.0));
}

TEST_CASE("raw anomaly map I/O") {
    const fs::path p = scratch("two.f32");
    {
        std::ofstream out(p, std::ios::binary);
        out << "F32 2 1\n";
        const float v[2] = {0.0f, 1.0f};
        out.write(reinterpret_cast<const char*>(v), sizeof v);
    }
    const AnomalyMap m = load_anomaly_map(p);
    REQUIRE(m.same_shape(2, 1));
    CHECK(m[0] == 0.0f);
    CHECK(m[1] == 1.0f);

    const fs::path q = scratch("clamp.f32");
    {
        std::ofstream out(q, std::ios::binary);
        out << "F32 2 1\n";
        const float v[2] = {1.5f, 0.25f};
        out.write(reinterpret_cast<const char*>(v), sizeof v);
    }
    LoadStats stats;
    const AnomalyMap c = load_anomaly_map(q, &stats);
    CHECK(c[0] == 1.0f);
    CHECK(c[1] == 0.25f);
    CHECK(stats.clamped == 1);

    AnomalyMap r(7, 5);
    std::mt19937_64 rng(2);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::uniform_real_distribution<float>(0, 1)(rng);
    save_anomaly_map_raw(r, scratch("r.f32"));
    CHECK(load_anomaly_map(scratch("r.f32")) == r);
}

TEST_CASE("raw header errors") {
    const fs::path p = scratch("bad.f32");
    {
        std::ofstream out(p, std::ios::binary);
        out << "F32 4 4\n";
        const float v = 0.5f;
        out.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
    CHECK_THROWS_AS(load_anomaly_map(p), Error);
    CHECK_THROWS_AS(load_anomaly_map(scratch("does_not_exist.f32")), Error);
}

TEST_CASE("16-bit PNG maps") {
    AnomalyMap m(3, 2);
    m[0] = 1.0f;
    m[1] = 0.5f;
    save_anomaly_map_png(m, scratch("m.png"));
    const AnomalyMap back = load_anomaly_map(scratch("m.png"));
    CHECK(back[0] == 1.0f);
    CHECK(back[1] == doctest::Approx(0.5).epsilon(1e-4));
    CHECK(back[2] == 0.0f);
}

TEST_CASE("mask PNG round trip") {
    BinaryMask one(1, 1, 1);
    save_mask(one, scratch("one.png"));
    CHECK(load_gray_image(scratch("one.png"))[0] == 255);
    BinaryMask zero(1, 1, 0);
    save_mask(zero, scratch("zero.png"));
    CHECK(load_gray_image(scratch("zero.png"))[0] == 0);

    std::mt19937_64 rng(9);
    const BinaryMask r = oracle::random_mask(17, 9, 0.4, rng);
    save_mask(r, scratch("r.png"));
    CHECK(load_mask(scratch("r.png")) == r);

    GrayImage g(4, 4);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<std::uint8_t>(i * 13);
    save_gray_image(g, scratch("g.png"));
    CHECK(load_gray_image(scratch("g.png")) == g);
}
