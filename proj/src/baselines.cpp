#include "depthalign/baselines.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "depthalign/errors.hpp"

namespace depthalign {

namespace {

struct AnchorSamples {
    std::vector<double> d;   // MDE (or pre-aligned) depth at the anchor
    std::vector<double> g;   // ground-truth depth
    std::vector<double> row; // pixel coordinates
    std::vector<double> col;
};

AnchorSamples gather(const DepthMap& d_mde, const AnchorSet& a) {
    AnchorSamples s;
    s.d.reserve(a.size());
    s.g.reserve(a.size());
    s.row.reserve(a.size());
    s.col.reserve(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Anchor& an = a.anchors[i];
        if (an.row >= d_mde.height() || an.col >= d_mde.width())
            throw DimensionError("anchor " + std::to_string(i) + " outside the image");
        if (!d_mde.mask.at(an.row, an.col))
            throw DomainError("anchor " + std::to_string(i) +
                              " lies on an invalid MDE pixel");
        s.d.push_back(d_mde.values.at(an.row, an.col));
        s.g.push_back(an.depth_gt);
        s.row.push_back(static_cast<double>(an.row));
        s.col.push_back(static_cast<double>(an.col));
    }
    return s;
}

AffineParams fit_affine_samples(const std::vector<double>& d,
                                const std::vector<double>& g) {
    const std::size_t n = d.size();
    double sd = 0.0, sg = 0.0, sdd = 0.0, sdg = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sd += d[i];
        sg += g[i];
        sdd += d[i] * d[i];
        sdg += d[i] * g[i];
    }
    auto scale_only = [&]() {
        return AffineParams{sdd > 0.0 ? sdg / sdd : 1.0, 0.0};
    };
    if (n == 1) return scale_only();

    const double nn = static_cast<double>(n);
    const double dbar = sd / nn, gbar = sg / nn;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (d[i] - dbar) * (d[i] - dbar);
        sxy += (d[i] - dbar) * (g[i] - gbar);
    }
    if (sxx <= 1e-13 * sdd) return scale_only(); // all MDE depths equal
    const double s = sxy / sxx;
    return AffineParams{s, gbar - s * dbar};
}

} // namespace

AffineParams fit_global(const DepthMap& d_mde, const AnchorSet& a) {
    if (a.size() < 1)
        throw InsufficiencyError("fit_global: at least one anchor required");
    const AnchorSamples s = gather(d_mde, a);
    return fit_affine_samples(s.d, s.g);
}

DepthMap apply_affine(const DepthMap& d_mde, const AffineParams& p) {
    ScalarField out(d_mde.height(), d_mde.width(), invalid_sentinel());
    ValidityMask mask(d_mde.height(), d_mde.width(), false);
    for (std::size_t r = 0; r < d_mde.height(); ++r) {
        for (std::size_t c = 0; c < d_mde.width(); ++c) {
            if (!d_mde.mask.at(r, c)) continue;
            const double v = p.s * d_mde.values.at(r, c) + p.t;
            if (v > 0.0) {
                out.at(r, c) = v;
                mask.set(r, c, true);
            }
        }
    }
    return DepthMap(std::move(out), std::move(mask));
}

PiecewiseModel fit_piecewise(const DepthMap& d_mde, const AnchorSet& a,
                             std::size_t n_bins_max) {
    const std::size_t n = a.size();
    if (n < 2)
        throw InsufficiencyError("fit_piecewise: at least two anchors required");
    if (n_bins_max < 1)
        throw DomainError("fit_piecewise: n_bins_max must be >= 1");

    const AnchorSamples s = gather(d_mde, a);
    const std::size_t n_bins = std::max<std::size_t>(1, std::min(n_bins_max, n / 2));

    std::vector<double> sorted_d = s.d;
    std::sort(sorted_d.begin(), sorted_d.end());

    // Equal-frequency interior edges at the midpoints of the split samples.
    std::vector<double> edges;
    for (std::size_t k = 1; k < n_bins; ++k) {
        const std::size_t idx = k * n / n_bins;
        const double e = 0.5 * (sorted_d[idx - 1] + sorted_d[idx]);
        if (edges.empty() || e > edges.back()) edges.push_back(e);
    }

    // Anchor membership per bin.
    auto count_bins = [&](const std::vector<double>& eds) {
        std::vector<std::vector<std::size_t>> member(eds.size() + 1);
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t b = 0;
            while (b < eds.size() && s.d[i] > eds[b]) ++b;
            member[b].push_back(i);
        }
        return member;
    };

    auto member = count_bins(edges);

    // Merge under-filled bins into the nearest neighbor (by mean anchor
    // depth; end bins have only one choice).
    while (member.size() > 1) {
        std::size_t deficient = member.size();
        for (std::size_t b = 0; b < member.size(); ++b) {
            if (member[b].size() < 2) {
                deficient = b;
                break;
            }
        }
        if (deficient == member.size()) break;

        auto bin_mean = [&](std::size_t b) -> double {
            if (member[b].empty()) return std::numeric_limits<double>::quiet_NaN();
            double acc = 0.0;
            for (auto i : member[b]) acc += s.d[i];
            return acc / static_cast<double>(member[b].size());
        };

        std::size_t target;
        if (deficient == 0) {
            target = 1;
        } else if (deficient + 1 == member.size()) {
            target = deficient - 1;
        } else {
            const double m = bin_mean(deficient);
            const double left = bin_mean(deficient - 1);
            const double right = bin_mean(deficient + 1);
            if (std::isnan(m) || std::isnan(left) || std::isnan(right))
                target = deficient - 1;
            else
                target = (m - left) <= (right - m) ? deficient - 1 : deficient + 1;
        }

        // Removing the edge between the two bins merges them.
        const std::size_t edge_idx = std::min(deficient, target);
        edges.erase(edges.begin() + static_cast<std::ptrdiff_t>(edge_idx));
        member = count_bins(edges);
    }

    PiecewiseModel model;
    model.edges = edges;
    for (std::size_t b = 0; b < member.size(); ++b) {
        std::vector<double> d_b, g_b;
        for (auto i : member[b]) {
            d_b.push_back(s.d[i]);
            g_b.push_back(s.g[i]);
        }
        if (d_b.empty()) {
            // Unreachable after merging unless a single empty bin remains.
            model.params.push_back(AffineParams{1.0, 0.0});
        } else {
            model.params.push_back(fit_affine_samples(d_b, g_b));
        }
    }
    return model;
}

DepthMap apply_piecewise(const DepthMap& d_mde, const PiecewiseModel& m) {
    if (m.params.size() != m.edges.size() + 1)
        throw DimensionError("apply_piecewise: params/edges size mismatch");
    ScalarField out(d_mde.height(), d_mde.width(), invalid_sentinel());
    ValidityMask mask(d_mde.height(), d_mde.width(), false);
    for (std::size_t r = 0; r < d_mde.height(); ++r) {
        for (std::size_t c = 0; c < d_mde.width(); ++c) {
            if (!d_mde.mask.at(r, c)) continue;
            const double depth = d_mde.values.at(r, c);
            std::size_t b = 0;
            while (b < m.edges.size() && depth > m.edges[b]) ++b;
            const AffineParams& p = m.params[b];
            const double v = p.s * depth + p.t;
            if (v > 0.0) {
                out.at(r, c) = v;
                mask.set(r, c, true);
            }
        }
    }
    return DepthMap(std::move(out), std::move(mask));
}

namespace {

// Stride lattice covering [0, extent-1]; the final coordinate is always
// the last pixel so bilinear upsampling never extrapolates.
std::vector<std::size_t> stride_lattice(std::size_t extent, std::size_t stride) {
    std::vector<std::size_t> pts;
    for (std::size_t p = 0; p < extent; p += stride) pts.push_back(p);
    if (pts.back() != extent - 1) pts.push_back(extent - 1);
    return pts;
}

// Local weighted scale/shift solve at one evaluation point.
AffineParams solve_local(const AnchorSamples& s, double r, double c, double sigma,
                         double lambda_t) {
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    double sw = 0.0, swd = 0.0, swdd = 0.0, swg = 0.0, swdg = 0.0;
    for (std::size_t i = 0; i < s.d.size(); ++i) {
        const double dr = r - s.row[i];
        const double dc = c - s.col[i];
        const double w = std::exp(-(dr * dr + dc * dc) * inv2s2);
        sw += w;
        swd += w * s.d[i];
        swdd += w * s.d[i] * s.d[i];
        swg += w * s.g[i];
        swdg += w * s.d[i] * s.g[i];
    }
    if (sw <= 0.0) return AffineParams{1.0, 0.0}; // weights underflowed: keep global alignment

    const double a11 = swdd, a12 = swd, a22 = sw + lambda_t;
    const double det = a11 * a22 - a12 * a12;
    if (!(det > 1e-12 * std::max(a11 * a22, 1e-300))) {
        // Effectively one anchor: local scale-only.
        return AffineParams{swdd > 0.0 ? swdg / swdd : 1.0, 0.0};
    }
    const double sc = (a22 * swdg - a12 * swg) / det;
    const double tc = (a11 * swg - a12 * swdg) / det;
    return AffineParams{sc, tc};
}

} // namespace

DepthMap fit_lwlr(const DepthMap& d_mde, const AnchorSet& a, const LwlrConfig& cfg) {
    if (a.size() < 2)
        throw InsufficiencyError("fit_lwlr: at least two anchors required");
    if (cfg.lambda_t < 0.0)
        throw DomainError("fit_lwlr: lambda_t must be >= 0");
    if (cfg.eval_stride < 1)
        throw DomainError("fit_lwlr: eval_stride must be >= 1");

    const std::size_t h = d_mde.height(), w = d_mde.width();
    const double sigma = cfg.sigma > 0.0
                             ? cfg.sigma
                             : 0.1 * std::hypot(static_cast<double>(h),
                                                static_cast<double>(w));

    // Stage 1: global pre-alignment.
    const AffineParams pre = fit_global(d_mde, a);
    const DepthMap aligned = apply_affine(d_mde, pre);

    AnchorSamples s = gather(d_mde, a);
    for (std::size_t i = 0; i < s.d.size(); ++i) s.d[i] = pre.s * s.d[i] + pre.t;

    // Stage 2: local solves on the evaluation lattice.
    const auto rows = stride_lattice(h, cfg.eval_stride);
    const auto cols = stride_lattice(w, cfg.eval_stride);
    std::vector<double> ls(rows.size() * cols.size());
    std::vector<double> lt(rows.size() * cols.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < cols.size(); ++j) {
            const AffineParams p =
                solve_local(s, static_cast<double>(rows[i]),
                            static_cast<double>(cols[j]), sigma, cfg.lambda_t);
            ls[i * cols.size() + j] = p.s;
            lt[i * cols.size() + j] = p.t;
        }
    }

    // Bilinear upsampling of the lattice fields, then the local model.
    ScalarField out(h, w, invalid_sentinel());
    ValidityMask mask(h, w, false);
    std::size_t ci = 0;
    for (std::size_t r = 0; r < h; ++r) {
        while (ci + 2 < rows.size() && static_cast<double>(r) > static_cast<double>(rows[ci + 1]))
            ++ci;
        // Reset column cell per row scan.
        std::size_t cj = 0;
        for (std::size_t c = 0; c < w; ++c) {
            while (cj + 2 < cols.size() && static_cast<double>(c) > static_cast<double>(cols[cj + 1]))
                ++cj;
            if (!aligned.mask.at(r, c)) continue;
            const BilinearCell cell{static_cast<double>(rows[ci]), static_cast<double>(cols[cj]),
                                    static_cast<double>(rows[ci + 1]), static_cast<double>(cols[cj + 1])};
            const BilinearWeights bw =
                bilinear_weights(static_cast<double>(r), static_cast<double>(c), cell);
            const std::size_t i0 = ci * cols.size() + cj;
            const std::size_t i1 = (ci + 1) * cols.size() + cj;
            const double sx = bw.tl * ls[i0] + bw.tr * ls[i0 + 1] + bw.bl * ls[i1] + bw.br * ls[i1 + 1];
            const double tx = bw.tl * lt[i0] + bw.tr * lt[i0 + 1] + bw.bl * lt[i1] + bw.br * lt[i1 + 1];
            const double v = sx * aligned.values.at(r, c) + tx;
            if (v > 0.0) {
                out.at(r, c) = v;
                mask.set(r, c, true);
            }
        }
    }
    return DepthMap(std::move(out), std::move(mask));
}

GridFitResult fit_grid(const DepthMap& d_mde, const AnchorSet& a,
                       std::size_t grid_rows, std::size_t grid_cols, double mu) {
    if (a.size() < 1)
        throw InsufficiencyError("fit_grid: at least one anchor required");
    if (grid_rows < 2 || grid_cols < 2)
        throw DomainError("fit_grid: vertex grid must be at least 2x2");
    if (mu < 0.0) throw DomainError("fit_grid: mu must be >= 0");

    const std::size_t h = d_mde.height(), w = d_mde.width();
    const AffineParams pre = fit_global(d_mde, a);
    const DepthMap aligned = apply_affine(d_mde, pre);

    AnchorSamples s = gather(d_mde, a);
    for (std::size_t i = 0; i < s.d.size(); ++i) s.d[i] = pre.s * s.d[i] + pre.t;

    GridScaleField field;
    field.grid_rows = grid_rows;
    field.grid_cols = grid_cols;
    field.vr.resize(grid_rows);
    field.vc.resize(grid_cols);
    for (std::size_t i = 0; i < grid_rows; ++i)
        field.vr[i] = static_cast<double>(i) * static_cast<double>(h - 1) /
                      static_cast<double>(grid_rows - 1);
    for (std::size_t j = 0; j < grid_cols; ++j)
        field.vc[j] = static_cast<double>(j) * static_cast<double>(w - 1) /
                      static_cast<double>(grid_cols - 1);

    const std::size_t nv = grid_rows * grid_cols;
    Eigen::MatrixXd normal = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nv),
                                                   static_cast<Eigen::Index>(nv));
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nv));

    auto cell_of = [](double x, const std::vector<double>& v) {
        std::size_t i = 0;
        while (i + 2 < v.size() && x > v[i + 1]) ++i;
        return i;
    };

    auto vertex_weights = [&](double r, double c, std::size_t idx[4], double wgt[4]) {
        const std::size_t i = cell_of(r, field.vr);
        const std::size_t j = cell_of(c, field.vc);
        const BilinearCell cell{field.vr[i], field.vc[j], field.vr[i + 1], field.vc[j + 1]};
        const BilinearWeights bw = bilinear_weights(r, c, cell);
        idx[0] = i * grid_cols + j;
        idx[1] = i * grid_cols + j + 1;
        idx[2] = (i + 1) * grid_cols + j;
        idx[3] = (i + 1) * grid_cols + j + 1;
        wgt[0] = bw.tl;
        wgt[1] = bw.tr;
        wgt[2] = bw.bl;
        wgt[3] = bw.br;
    };

    for (std::size_t i = 0; i < s.d.size(); ++i) {
        std::size_t idx[4];
        double wgt[4];
        vertex_weights(s.row[i], s.col[i], idx, wgt);
        for (int p = 0; p < 4; ++p) {
            rhs(static_cast<Eigen::Index>(idx[p])) += s.g[i] * s.d[i] * wgt[p];
            for (int q = 0; q < 4; ++q)
                normal(static_cast<Eigen::Index>(idx[p]), static_cast<Eigen::Index>(idx[q])) +=
                    s.d[i] * s.d[i] * wgt[p] * wgt[q];
        }
    }

    // First-difference smoothness over the 4-connected vertex graph.
    auto couple = [&](std::size_t k, std::size_t j) {
        const auto ki = static_cast<Eigen::Index>(k);
        const auto ji = static_cast<Eigen::Index>(j);
        normal(ki, ki) += mu;
        normal(ji, ji) += mu;
        normal(ki, ji) -= mu;
        normal(ji, ki) -= mu;
    };
    for (std::size_t i = 0; i < grid_rows; ++i) {
        for (std::size_t j = 0; j < grid_cols; ++j) {
            if (j + 1 < grid_cols) couple(i * grid_cols + j, i * grid_cols + j + 1);
            if (i + 1 < grid_rows) couple(i * grid_cols + j, (i + 1) * grid_cols + j);
        }
    }

    Eigen::LDLT<Eigen::MatrixXd> ldlt(normal);
    Eigen::VectorXd sol;
    bool ok = ldlt.info() == Eigen::Success;
    if (ok) {
        // A vertex without anchor or smoothness support shows up as a zero
        // pivot; a consistent singular system would still solve with a small
        // residual, so the rank check has to look at the factor itself.
        const Eigen::VectorXd d = ldlt.vectorD();
        const double dmax = d.cwiseAbs().maxCoeff();
        ok = dmax > 0.0 && d.cwiseAbs().minCoeff() > 1e-12 * dmax;
    }
    if (ok) {
        sol = ldlt.solve(rhs);
        const double resid = (normal * sol - rhs).norm();
        ok = sol.allFinite() && resid <= 1e-8 * std::max(rhs.norm(), 1e-300);
    }
    if (!ok)
        throw RankError("fit_grid: singular vertex system; set mu > 0 so unsupported "
                        "vertices couple to their neighbors");

    field.s.assign(sol.data(), sol.data() + sol.size());

    ScalarField out(h, w, invalid_sentinel());
    ValidityMask mask(h, w, false);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            if (!aligned.mask.at(r, c)) continue;
            std::size_t idx[4];
            double wgt[4];
            vertex_weights(static_cast<double>(r), static_cast<double>(c), idx, wgt);
            double sx = 0.0;
            for (int p = 0; p < 4; ++p) sx += wgt[p] * field.s[idx[p]];
            const double v = sx * aligned.values.at(r, c);
            if (v > 0.0) {
                out.at(r, c) = v;
                mask.set(r, c, true);
            }
        }
    }
    return GridFitResult{std::move(field), DepthMap(std::move(out), std::move(mask)), pre};
}

namespace {

// LS over rows [d, u, v, 1] -> g; drops the planar terms when the design
// is rank-deficient.
RegionParams fit_region_samples(const std::vector<double>& d, const std::vector<double>& g,
                                const std::vector<double>& u, const std::vector<double>& v) {
    const auto n = static_cast<Eigen::Index>(d.size());
    Eigen::MatrixXd x(n, 4);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        x(i, 0) = d[static_cast<std::size_t>(i)];
        x(i, 1) = u[static_cast<std::size_t>(i)];
        x(i, 2) = v[static_cast<std::size_t>(i)];
        x(i, 3) = 1.0;
        y(i) = g[static_cast<std::size_t>(i)];
    }

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
    qr.setThreshold(1e-10);
    if (qr.rank() == 4) {
        const Eigen::VectorXd b = qr.solve(y);
        if (b.allFinite()) return RegionParams{b(0), b(1), b(2), b(3)};
    }

    // Planar terms unsupported: refit scale/shift only.
    const AffineParams p = fit_affine_samples(d, g);
    return RegionParams{p.s, 0.0, 0.0, p.t};
}

} // namespace

RegionFitResult fit_region(const DepthMap& d_mde, const AnchorSet& a,
                           const ScalarField& labels) {
    const std::size_t h = d_mde.height(), w = d_mde.width();
    if (labels.height != h || labels.width != w)
        throw DimensionError("fit_region: label field dimension mismatch");
    if (a.size() < 4)
        throw InsufficiencyError("fit_region: at least four anchors required");

    std::vector<int> lab(h * w);
    for (std::size_t i = 0; i < h * w; ++i)
        lab[i] = static_cast<int>(std::llround(labels.data[i]));

    const AnchorSamples s = gather(d_mde, a);
    const double unorm = h > 1 ? 1.0 / static_cast<double>(h - 1) : 0.0;
    const double vnorm = w > 1 ? 1.0 / static_cast<double>(w - 1) : 0.0;

    auto anchor_label = [&](std::size_t i) {
        return lab[a.anchors[i].row * w + a.anchors[i].col];
    };

    // Merge anchor-deficient regions into their longest-boundary neighbor.
    while (true) {
        std::map<int, std::size_t> counts;
        for (std::size_t i = 0; i < h * w; ++i) counts[lab[i]]; // all surviving labels
        for (std::size_t i = 0; i < a.size(); ++i) ++counts[anchor_label(i)];
        if (counts.size() <= 1) break;

        int deficient = 0;
        std::size_t deficient_count = 4;
        bool found = false;
        for (const auto& [label, count] : counts) {
            if (count < 4 && (!found || count < deficient_count)) {
                deficient = label;
                deficient_count = count;
                found = true;
            }
        }
        if (!found) break;

        // Boundary lengths against every 4-adjacent region.
        std::map<int, std::size_t> boundary;
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                const int me = lab[r * w + c];
                if (c + 1 < w) {
                    const int right = lab[r * w + c + 1];
                    if (me == deficient && right != deficient) ++boundary[right];
                    if (right == deficient && me != deficient) ++boundary[me];
                }
                if (r + 1 < h) {
                    const int below = lab[(r + 1) * w + c];
                    if (me == deficient && below != deficient) ++boundary[below];
                    if (below == deficient && me != deficient) ++boundary[me];
                }
            }
        }

        int target = 0;
        std::size_t best_len = 0;
        bool have_target = false;
        for (const auto& [label, len] : boundary) {
            if (!have_target || len > best_len) {
                target = label;
                best_len = len;
                have_target = true;
            }
        }
        if (!have_target) {
            // Disconnected from everything (single-region image cannot reach
            // here); fold into the smallest other label.
            for (const auto& [label, count] : counts) {
                (void)count;
                if (label != deficient) {
                    target = label;
                    have_target = true;
                    break;
                }
            }
        }

        for (auto& l : lab)
            if (l == deficient) l = target;
    }

    // Fit survivors.
    std::map<int, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < a.size(); ++i) members[anchor_label(i)].push_back(i);

    RegionModel model;
    model.labels = lab;
    model.height = h;
    model.width = w;
    for (const auto& [label, idxs] : members) {
        std::vector<double> d_r, g_r, u_r, v_r;
        for (auto i : idxs) {
            d_r.push_back(s.d[i]);
            g_r.push_back(s.g[i]);
            u_r.push_back(s.row[i] * unorm);
            v_r.push_back(s.col[i] * vnorm);
        }
        model.params[label] = fit_region_samples(d_r, g_r, u_r, v_r);
    }

    // Pixels in regions that lost every anchor fall back to the model of
    // the nearest surviving label; after merging, every surviving label has
    // anchors unless the image had labels with no anchors at all.
    ScalarField out(h, w, invalid_sentinel());
    ValidityMask mask(h, w, false);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            if (!d_mde.mask.at(r, c)) continue;
            const int label = lab[r * w + c];
            auto it = model.params.find(label);
            if (it == model.params.end()) continue;
            const RegionParams& p = it->second;
            const double v = p.s * d_mde.values.at(r, c) +
                             p.beta * static_cast<double>(r) * unorm +
                             p.gamma * static_cast<double>(c) * vnorm + p.t;
            if (v > 0.0) {
                out.at(r, c) = v;
                mask.set(r, c, true);
            }
        }
    }
    return RegionFitResult{std::move(model), DepthMap(std::move(out), std::move(mask))};
}

} // namespace depthalign
