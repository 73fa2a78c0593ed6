#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "depthalign/field.hpp"

namespace depthalign {

// Pixel with known ground-truth metric depth.
struct Anchor {
    std::size_t row = 0;
    std::size_t col = 0;
    double depth_gt = 0.0;
};

// Ordered anchor list; the order is the deterministic sampling order.
struct AnchorSet {
    std::vector<Anchor> anchors;
    std::uint64_t seed = 0;

    std::size_t size() const { return anchors.size(); }
};

// Candidate lattice plus the anchor-count interval drawn from it.
struct AnchorRegime {
    std::size_t n_min = 1;
    std::size_t n_max = 1;
    std::size_t grid_rows = 1;
    std::size_t grid_cols = 1;
};

// Named defaults; the lattice always exceeds n_max.
AnchorRegime low_regime();    // 4x4 grid,   N in [10, 15]
AnchorRegime medium_regime(); // 12x12 grid, N in [100, 120]
AnchorRegime high_regime();   // 24x24 grid, N in [500, 530]
AnchorRegime regime_by_name(const std::string& name);

// Log-ratio targets, aligned index-for-index with an AnchorSet.
struct AnchorTargets {
    std::vector<double> y;
};

// Draws anchors from a uniform candidate lattice inside the depth mask.
// Candidates outside the mask shift to the nearest valid pixel (exact
// Euclidean distance, ties by row-major order); duplicates collapse before
// selection. N is drawn uniformly from [n_min, n_max], then N distinct
// candidates are chosen without replacement. Pure function of
// (mask, regime, seed).
AnchorSet sample_anchors(const DepthMap& gt, const AnchorRegime& regime,
                         std::uint64_t seed);

// y_i = log D_gt(a_i) - log D_mde(a_i).
AnchorTargets compute_targets(const AnchorSet& a, const DepthMap& d_mde);

// Iterative closest-pair removal order (indices into `a.anchors`).
// Each step removes one member of the closest pair; among tied pairs the
// one whose row-major-smallest member is smallest wins, and that member
// is removed. Length is size-1; deterministic per input.
std::vector<std::size_t> drop_anchor_sequence(const AnchorSet& a);

// Survivors after applying removals from the sequence until n remain.
AnchorSet take_first_n(const AnchorSet& a,
                       const std::vector<std::size_t>& sequence, std::size_t n);

// Anchor CSV: header "row,col,depth_m", one anchor per line.
void write_anchor_csv(const std::filesystem::path& path, const AnchorSet& a);
AnchorSet read_anchor_csv(const std::filesystem::path& path);

// Removal sequence CSV: header "step,row,col".
void write_removal_csv(const std::filesystem::path& path, const AnchorSet& a,
                       const std::vector<std::size_t>& sequence);

// Order-sensitive content hash, used to assert paired-anchor discipline.
std::uint64_t anchor_set_hash(const AnchorSet& a);

} // namespace depthalign
