#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "depthalign/errors.hpp"

namespace depthalign {

// Internal sentinel for pixels excluded by a mask. Never part of a public
// contract: masks gate all reads.
inline double invalid_sentinel() {
    return std::numeric_limits<double>::quiet_NaN();
}

// Dense H x W grid of doubles, row-major.
struct ScalarField {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> data;

    ScalarField() = default;
    ScalarField(std::size_t h, std::size_t w, double fill = 0.0)
        : height(h), width(w), data(h * w, fill) {
        if (h < 1 || w < 1)
            throw DimensionError("ScalarField: height and width must be >= 1");
    }

    std::size_t size() const { return height * width; }
    double& at(std::size_t r, std::size_t c) { return data[r * width + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * width + c]; }
};

// C x H x W stack, channel-major (each channel a row-major plane).
struct FieldStack {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> data;

    FieldStack() = default;
    FieldStack(std::size_t ch, std::size_t h, std::size_t w, double fill = 0.0)
        : channels(ch), height(h), width(w), data(ch * h * w, fill) {
        if (h < 1 || w < 1)
            throw DimensionError("FieldStack: height and width must be >= 1");
    }

    std::size_t plane_size() const { return height * width; }
    double& at(std::size_t ch, std::size_t r, std::size_t c) {
        return data[(ch * height + r) * width + c];
    }
    double at(std::size_t ch, std::size_t r, std::size_t c) const {
        return data[(ch * height + r) * width + c];
    }
    const double* plane(std::size_t ch) const {
        return data.data() + ch * plane_size();
    }
    double* plane(std::size_t ch) { return data.data() + ch * plane_size(); }

    ScalarField channel(std::size_t ch) const {
        ScalarField f(height, width);
        const double* p = plane(ch);
        f.data.assign(p, p + plane_size());
        return f;
    }
};

// Per-pixel boolean validity, same dimensions as the field it masks.
struct ValidityMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> data;

    ValidityMask() = default;
    ValidityMask(std::size_t h, std::size_t w, bool fill = true)
        : height(h), width(w), data(h * w, fill ? 1 : 0) {
        if (h < 1 || w < 1)
            throw DimensionError("ValidityMask: height and width must be >= 1");
    }

    std::size_t size() const { return height * width; }
    bool at(std::size_t r, std::size_t c) const {
        return data[r * width + c] != 0;
    }
    void set(std::size_t r, std::size_t c, bool v) {
        data[r * width + c] = v ? 1 : 0;
    }
    std::size_t count_valid() const {
        std::size_t n = 0;
        for (auto v : data) n += (v != 0);
        return n;
    }
};

inline void require_same_shape(const ScalarField& a, const ValidityMask& m,
                               const char* what) {
    if (a.height != m.height || a.width != m.width)
        throw DimensionError(std::string(what) + ": field/mask dimension mismatch");
}

// Metric depth plus validity. Every masked-valid pixel is strictly
// positive so its log is finite.
struct DepthMap {
    ScalarField values;
    ValidityMask mask;

    DepthMap() = default;
    DepthMap(ScalarField v, ValidityMask m);

    std::size_t height() const { return values.height; }
    std::size_t width() const { return values.width; }
};

// Masked reductions. Invalid pixels contribute nothing; an all-invalid
// mask yields an empty optional, never NaN.
std::optional<double> masked_sum(const ScalarField& f, const ValidityMask& m);
std::optional<double> masked_mean(const ScalarField& f, const ValidityMask& m);

// Validity from a raw depth reading: finite, inside [min_depth, max_depth],
// and not flagged as sky.
ValidityMask make_depth_mask(const ScalarField& raw, const ValidityMask* sky,
                             double min_depth, double max_depth);

// Natural log of depth at valid pixels; invalid pixels carry the sentinel.
ScalarField log_field(const DepthMap& d);

// Two-channel stack: channel 0 = d/d(row), channel 1 = d/d(col).
// Central differences where both neighbors are valid, one-sided at borders
// and at valid/invalid boundaries, zero where no valid neighbor exists.
FieldStack spatial_gradient(const ScalarField& f, const ValidityMask& mask);

// Axis-aligned interpolation cell; r0 <= r1, c0 <= c1 (either may be
// degenerate).
struct BilinearCell {
    double r0, c0, r1, c1;
};

// Weights for (top-left, top-right, bottom-left, bottom-right).
// Nonnegative, sum to 1, and reproduce the query point as the weighted
// vertex average. Throws DomainError if the point lies outside the cell.
struct BilinearWeights {
    double tl, tr, bl, br;
};
BilinearWeights bilinear_weights(double r, double c, const BilinearCell& cell);

} // namespace depthalign
