#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "depthalign/basis.hpp"
#include "depthalign/errors.hpp"
#include "depthalign/rng.hpp"
#include "oracles.hpp"

using namespace depthalign;

namespace {

EmbeddingStack constant_stack(std::size_t k, std::size_t h, std::size_t w,
                              double value) {
    return EmbeddingStack(k, h, w, value);
}

DesignMatrix design_from(const oracle::Matrix& rows) {
    DesignMatrix d;
    d.m.resize(static_cast<Eigen::Index>(rows.size()),
               static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[0].size(); ++j)
            d.m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    return d;
}

double ridge_objective(const DesignMatrix& m, const AnchorTargets& y,
                       const Eigen::VectorXd& w, double lambda) {
    const Eigen::Map<const Eigen::VectorXd> yv(y.y.data(),
                                               static_cast<Eigen::Index>(y.y.size()));
    return (m.m * w - yv).squaredNorm() + lambda * w.squaredNorm();
}

} // namespace

TEST_CASE("assemble_design reads embeddings at anchor pixels") {
    SUBCASE("constant unit channel") {
        const EmbeddingStack e = constant_stack(1, 6, 6, 1.0);
        AnchorSet a;
        a.anchors = {Anchor{0, 0, 1}, Anchor{2, 3, 1}, Anchor{5, 5, 1}};
        const DesignMatrix m = assemble_design(e, a);
        REQUIRE(m.m.rows() == 3);
        REQUIRE(m.m.cols() == 1);
        for (int i = 0; i < 3; ++i) CHECK(m.m(i, 0) == 1.0);
    }

    SUBCASE("constant channels carry their channel index") {
        EmbeddingStack e(3, 4, 4, 0.0);
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t i = 0; i < e.plane_size(); ++i)
                e.plane(ch)[i] = static_cast<double>(ch);
        AnchorSet a;
        a.anchors = {Anchor{1, 1, 1}, Anchor{3, 0, 1}};
        const DesignMatrix m = assemble_design(e, a);
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 3; ++j) CHECK(m.m(i, j) == static_cast<double>(j));
    }

    SUBCASE("distinct values index exactly") {
        EmbeddingStack e(2, 5, 7, 0.0);
        for (std::size_t i = 0; i < e.data.size(); ++i)
            e.data[i] = static_cast<double>(i) * 0.5;
        AnchorSet a;
        a.anchors = {Anchor{2, 6, 1}};
        const DesignMatrix m = assemble_design(e, a);
        CHECK(m.m(0, 0) == e.at(0, 2, 6));
        CHECK(m.m(0, 1) == e.at(1, 2, 6));
    }

    SUBCASE("anchor outside the grid") {
        const EmbeddingStack e = constant_stack(1, 4, 4, 1.0);
        AnchorSet a;
        a.anchors = {Anchor{4, 0, 1}};
        CHECK_THROWS_AS(assemble_design(e, a), DimensionError);
    }
}

TEST_CASE("ridge_solve closed-form cases") {
    SUBCASE("constant column yields the target mean") {
        const DesignMatrix m = design_from({{1}, {1}, {1}});
        const AnchorTargets y{{2.0, 2.0, 2.0}};
        const WeightVector w = ridge_solve(m, y, RidgeConfig{0.0});
        CHECK(w.w(0) == doctest::Approx(2.0).epsilon(1e-14));
    }

    SUBCASE("identity design with unit ridge halves the target") {
        const DesignMatrix m = design_from({{1, 0}, {0, 1}});
        const AnchorTargets y{{1.0, 0.0}};
        const WeightVector w = ridge_solve(m, y, RidgeConfig{1.0});
        CHECK(w.w(0) == doctest::Approx(0.5).epsilon(1e-14));
        CHECK(w.w(1) == doctest::Approx(0.0).epsilon(1e-14));
    }

    SUBCASE("random instance matches the Gaussian-elimination oracle") {
        Rng rng(31);
        oracle::Matrix m(20, std::vector<double>(5));
        std::vector<double> y(20);
        for (auto& row : m)
            for (auto& v : row) v = rng.normal();
        for (auto& v : y) v = rng.normal();

        const std::vector<double> expect = oracle::ridge_oracle(m, y, 1e-3);
        const WeightVector w = ridge_solve(design_from(m), AnchorTargets{y},
                                           RidgeConfig{1e-3});
        for (std::size_t j = 0; j < 5; ++j)
            CHECK(oracle::rel_err(w.w(static_cast<Eigen::Index>(j)), expect[j]) <= 1e-10);
    }

    SUBCASE("normal-equation residual stays at roundoff") {
        Rng rng(77);
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t n = 4 + rng.bounded(30);
            const std::size_t k = 1 + rng.bounded(8);
            DesignMatrix m;
            m.m.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
            for (Eigen::Index i = 0; i < m.m.size(); ++i) m.m.data()[i] = rng.normal();
            AnchorTargets y;
            y.y.resize(n);
            for (auto& v : y.y) v = rng.normal();
            const double lambda = trial % 2 == 0 ? 1e-3 : 1.0;

            const WeightVector w = ridge_solve(m, y, RidgeConfig{lambda});
            Eigen::MatrixXd a = m.m.transpose() * m.m;
            a.diagonal().array() += lambda;
            const Eigen::Map<const Eigen::VectorXd> yv(y.y.data(),
                                                       static_cast<Eigen::Index>(n));
            const Eigen::VectorXd rhs = m.m.transpose() * yv;
            CHECK((a * w.w - rhs).norm() <= 1e-12 * rhs.norm());
        }
    }

    SUBCASE("singular normal matrix with lambda = 0") {
        const DesignMatrix m = design_from({{1, 0}, {1, 0}, {1, 0}});
        const AnchorTargets y{{1.0, 2.0, 3.0}};
        CHECK_THROWS_AS(ridge_solve(m, y, RidgeConfig{0.0}), RankError);
        CHECK_NOTHROW(ridge_solve(m, y, RidgeConfig{1e-6}));
    }

    SUBCASE("negative lambda rejected") {
        const DesignMatrix m = design_from({{1}});
        CHECK_THROWS_AS(ridge_solve(m, AnchorTargets{{1.0}}, RidgeConfig{-1.0}),
                        DomainError);
    }
}

TEST_CASE("ridge solution properties") {
    Rng rng(99);

    SUBCASE("perturbations never improve the objective") {
        for (int trial = 0; trial < 5; ++trial) {
            const std::size_t n = 12, k = 4;
            DesignMatrix m;
            m.m.resize(n, k);
            for (Eigen::Index i = 0; i < m.m.size(); ++i) m.m.data()[i] = rng.normal();
            AnchorTargets y;
            y.y.resize(n);
            for (auto& v : y.y) v = rng.normal();
            const double lambda = 1e-3;
            const WeightVector w = ridge_solve(m, y, RidgeConfig{lambda});
            const double base = ridge_objective(m, y, w.w, lambda);
            for (int dir = 0; dir < 100; ++dir) {
                Eigen::VectorXd delta(k);
                for (auto& v : delta.reshaped()) v = rng.normal();
                delta *= 1e-3 / delta.norm();
                CHECK(ridge_objective(m, y, w.w + delta, lambda) > base);
            }
        }
    }

    SUBCASE("solution norm shrinks as lambda grows") {
        for (int trial = 0; trial < 10; ++trial) {
            const std::size_t n = 16, k = 5;
            DesignMatrix m;
            m.m.resize(n, k);
            for (Eigen::Index i = 0; i < m.m.size(); ++i) m.m.data()[i] = rng.normal();
            AnchorTargets y;
            y.y.resize(n);
            for (auto& v : y.y) v = rng.normal();

            double prev = ridge_solve(m, y, RidgeConfig{0.0}).w.norm();
            for (const double lambda : {1e-3, 1e-1, 1.0, 10.0}) {
                const double cur = ridge_solve(m, y, RidgeConfig{lambda}).w.norm();
                CHECK(cur <= prev * (1.0 + 1e-12));
                prev = cur;
            }
        }
    }
}

TEST_CASE("predict_log_scale") {
    SUBCASE("zero weights give a zero field") {
        const EmbeddingStack e = constant_stack(3, 4, 5, 2.0);
        WeightVector w;
        w.w = Eigen::VectorXd::Zero(3);
        const ScalarField l = predict_log_scale(e, w);
        for (double v : l.data) CHECK(v == 0.0);
    }

    SUBCASE("single constant channel scales by the weight") {
        const EmbeddingStack e = constant_stack(1, 4, 5, 1.0);
        WeightVector w;
        w.w = Eigen::VectorXd::Constant(1, 3.25);
        const ScalarField l = predict_log_scale(e, w);
        for (double v : l.data) CHECK(v == 3.25);
    }

    SUBCASE("per-pixel dot product with the weights") {
        Rng rng(4);
        EmbeddingStack e(2, 3, 3, 0.0);
        for (auto& v : e.data) v = rng.uniform(-1.0, 1.0);
        WeightVector w;
        w.w.resize(2);
        w.w << 0.5, -2.0;
        const ScalarField l = predict_log_scale(e, w);
        const double expect = 0.5 * e.at(0, 1, 2) - 2.0 * e.at(1, 1, 2);
        CHECK(l.at(1, 2) == doctest::Approx(expect).epsilon(1e-15));
    }
}

TEST_CASE("recover_depth") {
    DepthMap mde(ScalarField(3, 3, 2.0), ValidityMask(3, 3, true));

    SUBCASE("zero log-scale is the identity") {
        const DepthMap d = recover_depth(mde, ScalarField(3, 3, 0.0));
        for (std::size_t i = 0; i < d.values.data.size(); ++i)
            CHECK(d.values.data[i] == 2.0);
    }

    SUBCASE("log 3 triples the depth") {
        const DepthMap d = recover_depth(mde, ScalarField(3, 3, std::log(3.0)));
        for (std::size_t i = 0; i < d.values.data.size(); ++i)
            CHECK(d.values.data[i] == doctest::Approx(6.0).epsilon(1e-14));
    }

    SUBCASE("mask carries through and clamping is counted") {
        mde.mask.set(0, 0, false);
        std::size_t clamped = 0;
        const DepthMap d = recover_depth(mde, ScalarField(3, 3, 800.0), &clamped);
        CHECK(clamped == 8); // the invalid pixel is skipped
        CHECK_FALSE(d.mask.at(0, 0));
        for (std::size_t i = 1; i < d.values.data.size(); ++i)
            CHECK(std::isfinite(d.values.data[i]));
    }
}

TEST_CASE("single-anchor pipeline recovers the global ratio") {
    // K = 1 with a unit channel: the closed form gives w = y / (1 + lambda).
    const std::size_t h = 8, w = 10;
    const EmbeddingStack e = constant_stack(1, h, w, 1.0);
    DepthMap mde(ScalarField(h, w, 2.0), ValidityMask(h, w, true));

    AnchorSet a;
    a.anchors = {Anchor{3, 4, 4.0}};
    const AnchorTargets y = compute_targets(a, mde);
    const DesignMatrix m = assemble_design(e, a);
    const WeightVector wv = ridge_solve(m, y, RidgeConfig{1e-9});
    const DepthMap d = recover_depth(mde, predict_log_scale(e, wv));
    for (double v : d.values.data) CHECK(v == doctest::Approx(4.0).epsilon(1e-6));
}

TEST_CASE("unit channel with lambda 0 recovers the geometric-mean ratio") {
    const std::size_t h = 6, w = 6;
    const EmbeddingStack e = constant_stack(1, h, w, 1.0);
    Rng rng(13);
    ScalarField mde_values(h, w, 0.0);
    for (auto& v : mde_values.data) v = rng.uniform(0.5, 5.0);
    const DepthMap mde(mde_values, ValidityMask(h, w, true));

    AnchorSet a;
    a.anchors = {Anchor{0, 0, 2.0}, Anchor{2, 3, 7.0}, Anchor{5, 5, 1.0}};
    const AnchorTargets y = compute_targets(a, mde);
    const WeightVector wv = ridge_solve(assemble_design(e, a), y, RidgeConfig{0.0});

    double mean_y = 0.0;
    for (double v : y.y) mean_y += v / 3.0;
    const DepthMap d = recover_depth(mde, predict_log_scale(e, wv));
    for (std::size_t i = 0; i < d.values.data.size(); ++i)
        CHECK(d.values.data[i] ==
              doctest::Approx(mde.values.data[i] * std::exp(mean_y)).epsilon(1e-12));
}

TEST_CASE("absorb_shift") {
    DepthMap mde(ScalarField(2, 2, 4.0), ValidityMask(2, 2, true));

    SUBCASE("pure scale") {
        const AbsorbedShift r =
            absorb_shift(ScalarField(2, 2, 2.0), ScalarField(2, 2, 0.0), mde);
        for (std::size_t i = 0; i < 4; ++i)
            CHECK(r.log_scale.data[i] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
        CHECK(r.invalid_count == 0);
    }

    SUBCASE("identity") {
        const AbsorbedShift r =
            absorb_shift(ScalarField(2, 2, 1.0), ScalarField(2, 2, 0.0), mde);
        for (std::size_t i = 0; i < 4; ++i) CHECK(r.log_scale.data[i] == 0.0);
    }

    SUBCASE("shift folds into a depth-dependent scale") {
        const AbsorbedShift r =
            absorb_shift(ScalarField(2, 2, 2.0), ScalarField(2, 2, 1.0), mde);
        for (std::size_t i = 0; i < 4; ++i)
            CHECK(r.log_scale.data[i] == doctest::Approx(std::log(2.25)).epsilon(1e-15));
        const DepthMap d = recover_depth(mde, r.log_scale);
        for (std::size_t i = 0; i < 4; ++i)
            CHECK(d.values.data[i] == doctest::Approx(9.0).epsilon(1e-14));
    }

    SUBCASE("nonpositive argument flags the pixel") {
        const AbsorbedShift r =
            absorb_shift(ScalarField(2, 2, 0.1), ScalarField(2, 2, -1.0), mde);
        CHECK(r.invalid_count == 4);
        for (std::size_t i = 0; i < 4; ++i) CHECK_FALSE(r.valid.data[i]);
    }
}

TEST_CASE("affine round trip through absorb_shift is exact") {
    Rng rng(55);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t h = 7, w = 9;
        ScalarField depth(h, w, 0.0);
        ScalarField s(h, w, 0.0), t(h, w, 0.0);
        for (std::size_t i = 0; i < h * w; ++i) {
            depth.data[i] = rng.uniform(0.5, 30.0);
            s.data[i] = rng.uniform(0.4, 2.5);
            t.data[i] = rng.uniform(-0.1, 1.0);
        }
        const DepthMap mde(depth, ValidityMask(h, w, true));
        const AbsorbedShift ab = absorb_shift(s, t, mde);
        REQUIRE(ab.invalid_count == 0);
        const DepthMap rec = recover_depth(mde, ab.log_scale);
        for (std::size_t i = 0; i < h * w; ++i) {
            const double expect = s.data[i] * depth.data[i] + t.data[i];
            CHECK(std::abs(rec.values.data[i] - expect) <= 1e-12 * expect);
        }
    }
}
