#include "depthalign/field.hpp"

#include <cmath>
#include <string>

namespace depthalign {

DepthMap::DepthMap(ScalarField v, ValidityMask m)
    : values(std::move(v)), mask(std::move(m)) {
    require_same_shape(values, mask, "DepthMap");
    for (std::size_t r = 0; r < values.height; ++r) {
        for (std::size_t c = 0; c < values.width; ++c) {
            if (!mask.at(r, c)) continue;
            const double d = values.at(r, c);
            if (!std::isfinite(d) || d <= 0.0)
                throw DomainError("DepthMap: nonpositive or non-finite depth at valid pixel (" +
                                  std::to_string(r) + "," + std::to_string(c) + ")");
        }
    }
}

std::optional<double> masked_sum(const ScalarField& f, const ValidityMask& m) {
    require_same_shape(f, m, "masked_sum");
    bool any = false;
    double acc = 0.0;
    for (std::size_t i = 0; i < f.data.size(); ++i) {
        if (m.data[i]) {
            acc += f.data[i];
            any = true;
        }
    }
    if (!any) return std::nullopt;
    return acc;
}

std::optional<double> masked_mean(const ScalarField& f, const ValidityMask& m) {
    require_same_shape(f, m, "masked_mean");
    std::size_t n = 0;
    double acc = 0.0;
    for (std::size_t i = 0; i < f.data.size(); ++i) {
        if (m.data[i]) {
            acc += f.data[i];
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return acc / static_cast<double>(n);
}

ValidityMask make_depth_mask(const ScalarField& raw, const ValidityMask* sky,
                             double min_depth, double max_depth) {
    if (!(min_depth > 0.0))
        throw DomainError("make_depth_mask: min_depth must be > 0");
    if (!(max_depth > min_depth))
        throw DomainError("make_depth_mask: max_depth must exceed min_depth");
    if (sky && (sky->height != raw.height || sky->width != raw.width))
        throw DimensionError("make_depth_mask: sky mask dimension mismatch");

    ValidityMask out(raw.height, raw.width, false);
    for (std::size_t r = 0; r < raw.height; ++r) {
        for (std::size_t c = 0; c < raw.width; ++c) {
            const double d = raw.at(r, c);
            const bool is_sky = sky && sky->at(r, c);
            out.set(r, c, std::isfinite(d) && d >= min_depth && d <= max_depth && !is_sky);
        }
    }
    return out;
}

ScalarField log_field(const DepthMap& d) {
    ScalarField out(d.height(), d.width(), invalid_sentinel());
    for (std::size_t r = 0; r < d.height(); ++r) {
        for (std::size_t c = 0; c < d.width(); ++c) {
            if (!d.mask.at(r, c)) continue;
            const double v = d.values.at(r, c);
            if (v <= 0.0)
                throw DomainError("log_field: nonpositive depth at valid pixel (" +
                                  std::to_string(r) + "," + std::to_string(c) + ")");
            out.at(r, c) = std::log(v);
        }
    }
    return out;
}

namespace {

// One axis of the gradient stencil. prev/next are validity-gated samples.
double directional_diff(double center, bool has_prev, double prev,
                        bool has_next, double next) {
    if (has_prev && has_next) return 0.5 * (next - prev);
    if (has_next) return next - center;
    if (has_prev) return center - prev;
    return 0.0;
}

} // namespace

FieldStack spatial_gradient(const ScalarField& f, const ValidityMask& mask) {
    require_same_shape(f, mask, "spatial_gradient");
    const std::size_t h = f.height, w = f.width;
    FieldStack g(2, h, w, 0.0);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            if (!mask.at(r, c)) continue;
            const double center = f.at(r, c);

            const bool up = r > 0 && mask.at(r - 1, c);
            const bool down = r + 1 < h && mask.at(r + 1, c);
            g.at(0, r, c) = directional_diff(center, up, up ? f.at(r - 1, c) : 0.0,
                                             down, down ? f.at(r + 1, c) : 0.0);

            const bool left = c > 0 && mask.at(r, c - 1);
            const bool right = c + 1 < w && mask.at(r, c + 1);
            g.at(1, r, c) = directional_diff(center, left, left ? f.at(r, c - 1) : 0.0,
                                             right, right ? f.at(r, c + 1) : 0.0);
        }
    }
    return g;
}

BilinearWeights bilinear_weights(double r, double c, const BilinearCell& cell) {
    constexpr double kEdgeTol = 1e-12;
    if (r < cell.r0 - kEdgeTol || r > cell.r1 + kEdgeTol ||
        c < cell.c0 - kEdgeTol || c > cell.c1 + kEdgeTol)
        throw DomainError("bilinear_weights: query point outside the cell");

    // Degenerate axes put all weight on the single available vertex row/col.
    const double a = (cell.r1 > cell.r0) ? (r - cell.r0) / (cell.r1 - cell.r0) : 0.0;
    const double b = (cell.c1 > cell.c0) ? (c - cell.c0) / (cell.c1 - cell.c0) : 0.0;
    const double ac = std::min(std::max(a, 0.0), 1.0);
    const double bc = std::min(std::max(b, 0.0), 1.0);

    return BilinearWeights{(1.0 - ac) * (1.0 - bc), (1.0 - ac) * bc,
                           ac * (1.0 - bc), ac * bc};
}

} // namespace depthalign
