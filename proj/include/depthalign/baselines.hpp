#pragma once

#include <cstddef>
#include <map>
#include <vector>

#include "depthalign/anchors.hpp"
#include "depthalign/field.hpp"

namespace depthalign {

// Constant scale/shift pair of the affine template.
struct AffineParams {
    double s = 1.0;
    double t = 0.0;
};

// Least-squares affine fit over the anchors. Falls back to scale-only
// (t = 0) for a single anchor or when all anchor MDE depths coincide.
AffineParams fit_global(const DepthMap& d_mde, const AnchorSet& a);

// s * D + t at valid pixels; nonpositive outputs are flagged invalid.
DepthMap apply_affine(const DepthMap& d_mde, const AffineParams& p);

// Interval-wise affine alignment over MDE depth. `edges` are ascending
// interior boundaries; interval i covers (edges[i-1], edges[i]].
struct PiecewiseModel {
    std::vector<double> edges;
    std::vector<AffineParams> params; // edges.size() + 1 entries
};

// Equal-frequency intervals over anchor MDE depths, bin count
// min(n_bins_max, N/2); bins with fewer than 2 anchors merge into their
// nearest neighbor before fitting.
PiecewiseModel fit_piecewise(const DepthMap& d_mde, const AnchorSet& a,
                             std::size_t n_bins_max);
DepthMap apply_piecewise(const DepthMap& d_mde, const PiecewiseModel& m);

struct LwlrConfig {
    double sigma = 0.0;        // kernel bandwidth in pixels; <= 0 means 0.1 * image diagonal
    double lambda_t = 1.0;     // shift regularizer
    std::size_t eval_stride = 8;
};

// Locally weighted scale/shift regression on globally pre-aligned depth.
// Local parameters are solved on a stride lattice with Gaussian anchor
// weights and bilinearly upsampled to dense fields.
DepthMap fit_lwlr(const DepthMap& d_mde, const AnchorSet& a, const LwlrConfig& cfg);

// Per-vertex scales of a coarse lattice spanning the image.
struct GridScaleField {
    std::size_t grid_rows = 0;
    std::size_t grid_cols = 0;
    std::vector<double> s;  // row-major vertex scales
    std::vector<double> vr; // vertex row coordinates
    std::vector<double> vc; // vertex column coordinates
};

struct GridFitResult {
    GridScaleField field;
    DepthMap depth;
    AffineParams pre_align;
};

// Bilinear vertex-scale field fitted to anchors on globally pre-aligned
// depth, with a mu-weighted first-difference smoothness term tying
// unsupported vertices to their neighbors.
GridFitResult fit_grid(const DepthMap& d_mde, const AnchorSet& a,
                       std::size_t grid_rows, std::size_t grid_cols, double mu);

// Region-wise affine + planar model: D = s*Dmde + beta*u + gamma*v + t,
// (u, v) normalized pixel coordinates in [0, 1].
struct RegionParams {
    double s = 1.0;
    double beta = 0.0;
    double gamma = 0.0;
    double t = 0.0;
};

struct RegionModel {
    std::vector<int> labels; // per-pixel label after merging, row-major
    std::map<int, RegionParams> params;
    std::size_t height = 0;
    std::size_t width = 0;
};

struct RegionFitResult {
    RegionModel model;
    DepthMap depth;
};

// Regions with fewer than 4 anchors merge into the adjacent region sharing
// the longest boundary until every survivor supports a fit; rank-deficient
// regions drop the planar terms.
RegionFitResult fit_region(const DepthMap& d_mde, const AnchorSet& a,
                           const ScalarField& labels);

} // namespace depthalign
