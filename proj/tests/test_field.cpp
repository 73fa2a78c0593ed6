#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "depthalign/errors.hpp"
#include "depthalign/field.hpp"
#include "depthalign/rng.hpp"
#include "depthalign/tensor_io.hpp"

using namespace depthalign;

namespace {

DepthMap uniform_depth(std::size_t h, std::size_t w, double value) {
    return DepthMap(ScalarField(h, w, value), ValidityMask(h, w, true));
}

std::vector<std::uint8_t> file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

TEST_CASE("make_depth_mask range rules") {
    ScalarField raw(4, 4, 5.0);
    ValidityMask m = make_depth_mask(raw, nullptr, 0.1, 10.0);
    CHECK(m.count_valid() == 16);

    raw.at(1, 2) = 0.05; // below the indoor minimum
    raw.at(2, 3) = 85.0; // beyond the outdoor maximum of 80
    raw.at(0, 0) = std::numeric_limits<double>::quiet_NaN();
    m = make_depth_mask(raw, nullptr, 0.1, 80.0);
    CHECK_FALSE(m.at(1, 2));
    CHECK_FALSE(m.at(2, 3));
    CHECK_FALSE(m.at(0, 0));
    CHECK(m.at(3, 3));

    ValidityMask sky(4, 4, false);
    sky.set(3, 3, true);
    m = make_depth_mask(raw, &sky, 0.1, 80.0);
    CHECK_FALSE(m.at(3, 3));

    ValidityMask wrong(3, 4, false);
    CHECK_THROWS_AS(make_depth_mask(raw, &wrong, 0.1, 80.0), DimensionError);
    CHECK_THROWS_AS(make_depth_mask(raw, nullptr, 0.0, 80.0), DomainError);
    CHECK_THROWS_AS(make_depth_mask(raw, nullptr, 1.0, 0.5), DomainError);
}

TEST_CASE("log_field values and sentinel") {
    DepthMap d = uniform_depth(2, 3, 1.0);
    d.values.at(0, 1) = std::exp(1.0);
    d.values.at(1, 2) = 2.0;
    d.mask.set(1, 0, false);

    const ScalarField l = log_field(d);
    CHECK(l.at(0, 0) == 0.0);
    CHECK(l.at(0, 1) == doctest::Approx(1.0).epsilon(1e-15));
    // Frozen from an independent high-precision logarithm.
    CHECK(l.at(1, 2) == doctest::Approx(0.69314718055994531).epsilon(1e-15));
    CHECK(std::isnan(l.at(1, 0)));

    d.values.at(0, 2) = -1.0; // corrupt a valid pixel after construction
    CHECK_THROWS_AS(log_field(d), DomainError);
}

TEST_CASE("DepthMap rejects nonpositive valid pixels") {
    ScalarField v(2, 2, 1.0);
    v.at(0, 0) = 0.0;
    CHECK_THROWS_AS(DepthMap(v, ValidityMask(2, 2, true)), DomainError);
    ValidityMask m(2, 2, true);
    m.set(0, 0, false);
    CHECK_NOTHROW(DepthMap(v, m));
}

TEST_CASE("masked reductions skip invalid pixels and report empty") {
    ScalarField f(2, 2, 1.0);
    f.at(0, 0) = 100.0;
    ValidityMask m(2, 2, true);
    m.set(0, 0, false);
    CHECK(*masked_sum(f, m) == 3.0);
    CHECK(*masked_mean(f, m) == 1.0);

    const ValidityMask none(2, 2, false);
    CHECK_FALSE(masked_sum(f, none).has_value());
    CHECK_FALSE(masked_mean(f, none).has_value());
}

TEST_CASE("spatial_gradient stencils") {
    const std::size_t h = 5, w = 6;
    ValidityMask all(h, w, true);

    SUBCASE("constant field is flat") {
        const FieldStack g = spatial_gradient(ScalarField(h, w, 3.5), all);
        for (double v : g.data) CHECK(v == 0.0);
    }

    SUBCASE("linear ramp in the column direction") {
        ScalarField f(h, w);
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) f.at(r, c) = static_cast<double>(c);
        const FieldStack g = spatial_gradient(f, all);
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                CHECK(g.at(0, r, c) == 0.0);
                CHECK(g.at(1, r, c) == 1.0); // one-sided at borders matches the slope
            }
        }
    }

    SUBCASE("isolated pixel has zero gradient") {
        ScalarField f(3, 3, 2.0);
        ValidityMask lone(3, 3, false);
        lone.set(1, 1, true);
        const FieldStack g = spatial_gradient(f, lone);
        CHECK(g.at(0, 1, 1) == 0.0);
        CHECK(g.at(1, 1, 1) == 0.0);
    }

    SUBCASE("valid/invalid boundary falls back to one-sided") {
        ScalarField f(1, 3);
        f.at(0, 0) = 10.0;
        f.at(0, 1) = 1.0;
        f.at(0, 2) = 5.0;
        ValidityMask m(1, 3, true);
        m.set(0, 0, false);
        const FieldStack g = spatial_gradient(f, m);
        CHECK(g.at(1, 0, 1) == 4.0); // uses only the right neighbor
        CHECK(g.at(1, 0, 2) == 4.0);
        CHECK(g.at(1, 0, 0) == 0.0); // invalid pixel carries no gradient
    }

    SUBCASE("shift invariance: grad(f + c) == grad(f) exactly") {
        // Quarter-integer values keep f + 16 exactly representable, so the
        // stencil must reproduce the gradient bit-for-bit.
        Rng rng(7);
        ScalarField f(h, w);
        ValidityMask m(h, w, true);
        for (auto& v : f.data)
            v = 0.25 * static_cast<double>(rng.uniform_int(-32, 32));
        for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = rng.uniform() < 0.8;
        ScalarField shifted = f;
        for (auto& v : shifted.data) v += 16.0;
        const FieldStack g0 = spatial_gradient(f, m);
        const FieldStack g1 = spatial_gradient(shifted, m);
        for (std::size_t i = 0; i < g0.data.size(); ++i) CHECK(g0.data[i] == g1.data[i]);
    }
}

TEST_CASE("bilinear weights") {
    const BilinearCell cell{2.0, 10.0, 6.0, 14.0};

    SUBCASE("vertex, center, edge midpoint") {
        BilinearWeights w = bilinear_weights(2.0, 10.0, cell);
        CHECK(w.tl == 1.0);
        CHECK(w.tr == 0.0);
        CHECK(w.bl == 0.0);
        CHECK(w.br == 0.0);

        w = bilinear_weights(4.0, 12.0, cell);
        CHECK(w.tl == doctest::Approx(0.25));
        CHECK(w.tr == doctest::Approx(0.25));
        CHECK(w.bl == doctest::Approx(0.25));
        CHECK(w.br == doctest::Approx(0.25));

        w = bilinear_weights(2.0, 12.0, cell); // top edge midpoint
        CHECK(w.tl == doctest::Approx(0.5));
        CHECK(w.tr == doctest::Approx(0.5));
        CHECK(w.bl == 0.0);
        CHECK(w.br == 0.0);
    }

    SUBCASE("partition of unity and point reconstruction") {
        Rng rng(11);
        for (int trial = 0; trial < 200; ++trial) {
            const double r = rng.uniform(cell.r0, cell.r1);
            const double c = rng.uniform(cell.c0, cell.c1);
            const BilinearWeights w = bilinear_weights(r, c, cell);
            CHECK(std::abs(w.tl + w.tr + w.bl + w.br - 1.0) <= 1e-15);
            const double rr = w.tl * cell.r0 + w.tr * cell.r0 + w.bl * cell.r1 + w.br * cell.r1;
            const double cc = w.tl * cell.c0 + w.tr * cell.c1 + w.bl * cell.c0 + w.br * cell.c1;
            CHECK(std::abs(rr - r) <= 1e-12);
            CHECK(std::abs(cc - c) <= 1e-12);
            CHECK(w.tl >= 0.0);
            CHECK(w.tr >= 0.0);
            CHECK(w.bl >= 0.0);
            CHECK(w.br >= 0.0);
        }
    }

    SUBCASE("outside the cell") {
        CHECK_THROWS_AS(bilinear_weights(1.0, 12.0, cell), DomainError);
        CHECK_THROWS_AS(bilinear_weights(3.0, 15.0, cell), DomainError);
    }
}

TEST_CASE("ANCH round trips are bit-exact") {
    const auto dir = std::filesystem::temp_directory_path() / "depthalign_field_test";
    std::filesystem::create_directories(dir);

    SUBCASE("float64 rank-2") {
        ScalarField f(3, 4);
        for (std::size_t i = 0; i < f.data.size(); ++i)
            f.data[i] = 0.1 * static_cast<double>(i) + 1.0;
        const auto path = dir / "f64.anch";
        write_tensor(path, to_tensor(f));
        const auto first = file_bytes(path);
        const Tensor t = read_tensor(path);
        write_tensor(path, t);
        CHECK(file_bytes(path) == first);
        CHECK(tensor_to_scalar_field(t).data == f.data);
    }

    SUBCASE("float32 and uint8 rank-2") {
        for (const TensorDtype dtype : {TensorDtype::Float32, TensorDtype::Uint8}) {
            Tensor t;
            t.dtype = dtype;
            t.dims = {2, 3};
            t.data = {0, 1, 2, 3, 4, 250};
            const auto path = dir / "small.anch";
            write_tensor(path, t);
            const auto first = file_bytes(path);
            const Tensor back = read_tensor(path);
            CHECK(back.dtype == dtype);
            write_tensor(path, back);
            CHECK(file_bytes(path) == first);
        }
    }

    SUBCASE("rank-3 payload is channel-major") {
        FieldStack s(2, 3, 4);
        for (std::size_t i = 0; i < s.data.size(); ++i)
            s.data[i] = static_cast<double>(i);
        const auto bytes = encode_tensor(to_tensor(s));
        // Independent byte-layout check: header is 12 bytes + 3 u32 dims,
        // then 24 doubles in channel-major order.
        REQUIRE(bytes.size() == 12 + 12 + 24 * 8);
        CHECK(bytes[0] == 'A');
        CHECK(bytes[8] == 1);  // dtype float64
        CHECK(bytes[9] == 3);  // rank
        const std::size_t payload = 24;
        for (std::size_t i = 0; i < payload; ++i) {
            double v;
            std::memcpy(&v, bytes.data() + 24 + 8 * i, 8);
            CHECK(v == static_cast<double>(i));
        }
    }
}

TEST_CASE("ANCH rejects malformed headers with byte offsets") {
    ScalarField f(2, 2, 1.0);
    auto bytes = encode_tensor(to_tensor(f));

    SUBCASE("bad magic at offset 0") {
        auto bad = bytes;
        bad[0] = 'X';
        try {
            decode_tensor(bad);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.offset() == 0);
        }
    }

    SUBCASE("unsupported dtype at offset 8") {
        auto bad = bytes;
        bad[8] = 9;
        try {
            decode_tensor(bad);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.offset() == 8);
        }
    }

    SUBCASE("bad rank at offset 9") {
        auto bad = bytes;
        bad[9] = 5;
        try {
            decode_tensor(bad);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.offset() == 9);
        }
    }

    SUBCASE("nonzero reserved at offset 10") {
        auto bad = bytes;
        bad[10] = 1;
        try {
            decode_tensor(bad);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.offset() == 10);
        }
    }

    SUBCASE("truncated payload reports the file size") {
        auto bad = bytes;
        bad.resize(bad.size() - 5);
        try {
            decode_tensor(bad);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.offset() == bad.size());
        }
    }

    SUBCASE("trailing bytes rejected") {
        auto bad = bytes;
        bad.push_back(0);
        CHECK_THROWS_AS(decode_tensor(bad), FormatError);
    }
}
