#include "depthalign/basis.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "depthalign/errors.hpp"

namespace depthalign {

DesignMatrix assemble_design(const EmbeddingStack& e, const AnchorSet& a) {
    const std::size_t n = a.size();
    const std::size_t k = e.channels;
    DesignMatrix d;
    d.m.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
    for (std::size_t i = 0; i < n; ++i) {
        const Anchor& an = a.anchors[i];
        if (an.row >= e.height || an.col >= e.width)
            throw DimensionError("assemble_design: anchor " + std::to_string(i) +
                                 " outside the embedding grid");
        for (std::size_t m = 0; m < k; ++m)
            d.m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(m)) =
                e.at(m, an.row, an.col);
    }
    return d;
}

WeightVector ridge_solve(const DesignMatrix& m, const AnchorTargets& y,
                         const RidgeConfig& cfg) {
    const Eigen::Index n = m.m.rows();
    const Eigen::Index k = m.m.cols();
    if (k < 1 || n < 1)
        throw DimensionError("ridge_solve: need N >= 1 anchors and K >= 1 channels");
    if (static_cast<Eigen::Index>(y.y.size()) != n)
        throw DimensionError("ridge_solve: target length does not match anchor count");
    if (cfg.lambda < 0.0)
        throw DomainError("ridge_solve: lambda must be >= 0");

    const Eigen::Map<const Eigen::VectorXd> yv(y.y.data(), n);
    Eigen::MatrixXd normal = m.m.transpose() * m.m;
    normal.diagonal().array() += cfg.lambda;
    const Eigen::VectorXd rhs = m.m.transpose() * yv;

    Eigen::LLT<Eigen::MatrixXd> llt(normal);
    if (llt.info() != Eigen::Success)
        throw RankError("ridge_solve: normal matrix is singular; use lambda > 0");

    WeightVector out;
    out.w = llt.solve(rhs);
    // One refinement pass; K x K, so essentially free.
    out.w += llt.solve(rhs - normal * out.w);

    const double rhs_norm = rhs.norm();
    const double resid = (normal * out.w - rhs).norm();
    if (!out.w.allFinite() || (rhs_norm > 0.0 && resid > 1e-8 * rhs_norm))
        throw RankError("ridge_solve: normal equations too ill-conditioned; increase lambda");
    return out;
}

ScalarField predict_log_scale(const EmbeddingStack& e, const WeightVector& w) {
    if (static_cast<std::size_t>(w.w.size()) != e.channels)
        throw DimensionError("predict_log_scale: weight count does not match channel count");
    ScalarField ell(e.height, e.width, 0.0);
    const std::size_t plane = e.plane_size();
    for (std::size_t m = 0; m < e.channels; ++m) {
        const double wm = w.w(static_cast<Eigen::Index>(m));
        const double* src = e.plane(m);
        for (std::size_t p = 0; p < plane; ++p) ell.data[p] += wm * src[p];
    }
    return ell;
}

DepthMap recover_depth(const DepthMap& d_mde, const ScalarField& ell,
                       std::size_t* clamped) {
    if (ell.height != d_mde.height() || ell.width != d_mde.width())
        throw DimensionError("recover_depth: log-scale field dimension mismatch");

    constexpr double kLogClamp = 700.0; // exp stays finite in double
    std::size_t clamp_count = 0;
    ScalarField out(d_mde.height(), d_mde.width(), invalid_sentinel());
    for (std::size_t r = 0; r < d_mde.height(); ++r) {
        for (std::size_t c = 0; c < d_mde.width(); ++c) {
            if (!d_mde.mask.at(r, c)) continue;
            double l = ell.at(r, c);
            if (l > kLogClamp) {
                l = kLogClamp;
                ++clamp_count;
            } else if (l < -kLogClamp) {
                l = -kLogClamp;
                ++clamp_count;
            }
            out.at(r, c) = d_mde.values.at(r, c) * std::exp(l);
        }
    }
    if (clamped) *clamped = clamp_count;
    return DepthMap(std::move(out), d_mde.mask);
}

AbsorbedShift absorb_shift(const ScalarField& s, const ScalarField& t,
                           const DepthMap& d_mde) {
    if (s.height != d_mde.height() || s.width != d_mde.width() ||
        t.height != d_mde.height() || t.width != d_mde.width())
        throw DimensionError("absorb_shift: field dimension mismatch");

    AbsorbedShift out;
    out.log_scale = ScalarField(s.height, s.width, invalid_sentinel());
    out.valid = ValidityMask(s.height, s.width, false);
    for (std::size_t r = 0; r < s.height; ++r) {
        for (std::size_t c = 0; c < s.width; ++c) {
            if (!d_mde.mask.at(r, c)) continue;
            const double arg = s.at(r, c) + t.at(r, c) / d_mde.values.at(r, c);
            if (arg > 0.0) {
                out.log_scale.at(r, c) = std::log(arg);
                out.valid.set(r, c, true);
            } else {
                ++out.invalid_count;
            }
        }
    }
    return out;
}

void write_weight_csv(const std::filesystem::path& path, const WeightVector& w) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("write_weight_csv: cannot open " + path.string());
    out << "index,weight\n";
    char buf[64];
    for (Eigen::Index i = 0; i < w.w.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", w.w(i));
        out << i << ',' << buf << '\n';
    }
}

} // namespace depthalign
