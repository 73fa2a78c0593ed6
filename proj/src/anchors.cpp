#include "depthalign/anchors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <string>

#include "depthalign/errors.hpp"
#include "depthalign/rng.hpp"

namespace depthalign {

AnchorRegime low_regime() { return AnchorRegime{10, 15, 4, 4}; }
AnchorRegime medium_regime() { return AnchorRegime{100, 120, 12, 12}; }
AnchorRegime high_regime() { return AnchorRegime{500, 530, 24, 24}; }

AnchorRegime regime_by_name(const std::string& name) {
    if (name == "low") return low_regime();
    if (name == "med" || name == "medium") return medium_regime();
    if (name == "high") return high_regime();
    throw DomainError("unknown anchor regime \"" + name + "\" (expected low|med|high)");
}

namespace {

// Nearest mask-valid pixel by exact squared Euclidean distance; ties by
// row-major order. Full-mask scan, no search-radius cap.
std::pair<std::size_t, std::size_t> nearest_valid(const ValidityMask& mask,
                                                  std::size_t row, std::size_t col) {
    long best = std::numeric_limits<long>::max();
    std::size_t best_r = 0, best_c = 0;
    for (std::size_t r = 0; r < mask.height; ++r) {
        for (std::size_t c = 0; c < mask.width; ++c) {
            if (!mask.at(r, c)) continue;
            const long dr = static_cast<long>(r) - static_cast<long>(row);
            const long dc = static_cast<long>(c) - static_cast<long>(col);
            const long d2 = dr * dr + dc * dc;
            if (d2 < best) { // row-major scan keeps ties at the first hit
                best = d2;
                best_r = r;
                best_c = c;
            }
        }
    }
    return {best_r, best_c};
}

} // namespace

AnchorSet sample_anchors(const DepthMap& gt, const AnchorRegime& regime,
                         std::uint64_t seed) {
    if (regime.n_min < 1 || regime.n_min > regime.n_max ||
        regime.n_max > regime.grid_rows * regime.grid_cols)
        throw DomainError("sample_anchors: regime requires 1 <= n_min <= n_max <= grid cells");

    const std::size_t h = gt.height(), w = gt.width();
    const std::size_t valid_total = gt.mask.count_valid();
    if (valid_total == 0)
        throw InsufficiencyError("sample_anchors: depth mask has no valid pixels");

    // Uniform lattice of cell centers, then mask-valid snapping.
    std::vector<std::pair<std::size_t, std::size_t>> candidates;
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (std::size_t i = 0; i < regime.grid_rows; ++i) {
        for (std::size_t j = 0; j < regime.grid_cols; ++j) {
            std::size_t r = static_cast<std::size_t>(
                (2 * i + 1) * h / (2 * regime.grid_rows));
            std::size_t c = static_cast<std::size_t>(
                (2 * j + 1) * w / (2 * regime.grid_cols));
            if (r >= h) r = h - 1;
            if (c >= w) c = w - 1;
            if (!gt.mask.at(r, c)) std::tie(r, c) = nearest_valid(gt.mask, r, c);
            if (seen.insert({r, c}).second) candidates.push_back({r, c});
        }
    }

    if (candidates.size() < regime.n_min)
        throw InsufficiencyError(
            "sample_anchors: only " + std::to_string(candidates.size()) +
            " distinct valid candidates, need at least " + std::to_string(regime.n_min) +
            " (short by " + std::to_string(regime.n_min - candidates.size()) + ")");

    Rng rng(seed);
    std::size_t n = static_cast<std::size_t>(rng.uniform_int(
        static_cast<std::int64_t>(regime.n_min), static_cast<std::int64_t>(regime.n_max)));
    n = std::min(n, candidates.size());

    // Partial Fisher-Yates; the first n slots are the selection order.
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.bounded(candidates.size() - i));
        std::swap(candidates[i], candidates[j]);
    }

    AnchorSet out;
    out.seed = seed;
    out.anchors.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto [r, c] = candidates[i];
        out.anchors.push_back(Anchor{r, c, gt.values.at(r, c)});
    }
    return out;
}

AnchorTargets compute_targets(const AnchorSet& a, const DepthMap& d_mde) {
    AnchorTargets t;
    t.y.reserve(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Anchor& an = a.anchors[i];
        if (an.row >= d_mde.height() || an.col >= d_mde.width())
            throw DimensionError("compute_targets: anchor " + std::to_string(i) +
                                 " outside the image");
        if (!d_mde.mask.at(an.row, an.col))
            throw DomainError("compute_targets: anchor " + std::to_string(i) + " at (" +
                              std::to_string(an.row) + "," + std::to_string(an.col) +
                              ") is invalid in the MDE depth");
        const double mde = d_mde.values.at(an.row, an.col);
        if (mde <= 0.0)
            throw DomainError("compute_targets: nonpositive MDE depth at anchor " +
                              std::to_string(i));
        t.y.push_back(std::log(an.depth_gt) - std::log(mde));
    }
    return t;
}

std::vector<std::size_t> drop_anchor_sequence(const AnchorSet& a) {
    const std::size_t n = a.size();
    if (n == 0)
        throw InsufficiencyError("drop_anchor_sequence: empty anchor set");

    // Row-major key gives the deterministic tie order.
    auto key = [&](std::size_t i) {
        return std::make_pair(a.anchors[i].row, a.anchors[i].col);
    };
    auto dist2 = [&](std::size_t i, std::size_t j) {
        const long dr = static_cast<long>(a.anchors[i].row) - static_cast<long>(a.anchors[j].row);
        const long dc = static_cast<long>(a.anchors[i].col) - static_cast<long>(a.anchors[j].col);
        return dr * dr + dc * dc; // integer pixel coordinates: exact ties
    };

    std::vector<std::size_t> alive(n);
    for (std::size_t i = 0; i < n; ++i) alive[i] = i;

    std::vector<std::size_t> removed;
    removed.reserve(n - 1);
    while (alive.size() > 1) {
        long best_d = std::numeric_limits<long>::max();
        std::size_t victim = alive[0];
        auto victim_key = key(victim);
        bool found = false;
        for (std::size_t p = 0; p < alive.size(); ++p) {
            for (std::size_t q = p + 1; q < alive.size(); ++q) {
                const long d = dist2(alive[p], alive[q]);
                auto k = std::min(key(alive[p]), key(alive[q]));
                if (!found || d < best_d || (d == best_d && k < victim_key)) {
                    best_d = d;
                    victim = key(alive[p]) < key(alive[q]) ? alive[p] : alive[q];
                    victim_key = k;
                    found = true;
                }
            }
        }
        removed.push_back(victim);
        alive.erase(std::find(alive.begin(), alive.end(), victim));
    }
    return removed;
}

AnchorSet take_first_n(const AnchorSet& a, const std::vector<std::size_t>& sequence,
                       std::size_t n) {
    if (n < 1 || n > a.size())
        throw DomainError("take_first_n: n out of range [1, " +
                          std::to_string(a.size()) + "]");

    std::vector<bool> dropped(a.size(), false);
    for (std::size_t step = 0; step + n < a.size(); ++step)
        dropped[sequence.at(step)] = true;

    AnchorSet out;
    out.seed = a.seed;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!dropped[i]) out.anchors.push_back(a.anchors[i]);
    return out;
}

void write_anchor_csv(const std::filesystem::path& path, const AnchorSet& a) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("write_anchor_csv: cannot open " + path.string());
    out << "row,col,depth_m\n";
    char buf[64];
    for (const auto& an : a.anchors) {
        std::snprintf(buf, sizeof buf, "%.17g", an.depth_gt);
        out << an.row << ',' << an.col << ',' << buf << '\n';
    }
}

AnchorSet read_anchor_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("read_anchor_csv: cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "row,col,depth_m")
        throw FormatError("anchor CSV missing \"row,col,depth_m\" header", 0);

    AnchorSet out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        Anchor an;
        unsigned long r = 0, c = 0;
        double d = 0.0;
        if (std::sscanf(line.c_str(), "%lu,%lu,%lf", &r, &c, &d) != 3)
            throw FormatError("anchor CSV parse failure at line " + std::to_string(lineno), 0);
        an.row = r;
        an.col = c;
        an.depth_gt = d;
        if (an.depth_gt <= 0.0)
            throw DomainError("read_anchor_csv: nonpositive depth at line " +
                              std::to_string(lineno));
        out.anchors.push_back(an);
    }
    return out;
}

void write_removal_csv(const std::filesystem::path& path, const AnchorSet& a,
                       const std::vector<std::size_t>& sequence) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("write_removal_csv: cannot open " + path.string());
    out << "step,row,col\n";
    for (std::size_t s = 0; s < sequence.size(); ++s) {
        const Anchor& an = a.anchors.at(sequence[s]);
        out << s << ',' << an.row << ',' << an.col << '\n';
    }
}

std::uint64_t anchor_set_hash(const AnchorSet& a) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& an : a.anchors) {
        h = fnv1a64_u64(an.row, h);
        h = fnv1a64_u64(an.col, h);
        std::uint64_t bits;
        static_assert(sizeof bits == sizeof an.depth_gt);
        std::memcpy(&bits, &an.depth_gt, 8);
        h = fnv1a64_u64(bits, h);
    }
    return h;
}

} // namespace depthalign
