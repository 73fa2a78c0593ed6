#include "depthalign/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "depthalign/errors.hpp"

namespace depthalign {

Eigen::MatrixXd gram(const DesignMatrix& m) {
    Eigen::MatrixXd c = m.m * m.m.transpose();
    // Symmetrize away the last bits of roundoff.
    c = 0.5 * (c + c.transpose()).eval();
    return c;
}

EigenDecomposition sym_eigen(const Eigen::MatrixXd& c_in) {
    if (c_in.rows() != c_in.cols())
        throw DimensionError("sym_eigen: matrix must be square");
    const Eigen::Index n = c_in.rows();

    Eigen::MatrixXd a = 0.5 * (c_in + c_in.transpose());
    Eigen::MatrixXd u = Eigen::MatrixXd::Identity(n, n);

    const double norm = a.norm();
    const double tol = 1e-12 * norm;

    auto off_norm = [&]() {
        double s = 0.0;
        for (Eigen::Index p = 0; p < n; ++p)
            for (Eigen::Index q = p + 1; q < n; ++q) s += 2.0 * a(p, q) * a(p, q);
        return std::sqrt(s);
    };

    constexpr int kMaxSweeps = 100;
    int sweep = 0;
    if (norm > 0.0) {
        while (off_norm() > tol) {
            if (++sweep > kMaxSweeps)
                throw ConvergenceError(
                    "sym_eigen: Jacobi failed to converge in 100 sweeps (off-diagonal "
                    "residual " + std::to_string(off_norm()) + ")");
            for (Eigen::Index p = 0; p < n; ++p) {
                for (Eigen::Index q = p + 1; q < n; ++q) {
                    const double apq = a(p, q);
                    if (std::abs(apq) <= 1e-300) continue;
                    const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                    // Smaller-angle root of t^2 + 2 theta t - 1 = 0.
                    const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                     (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                    const double cs = 1.0 / std::sqrt(t * t + 1.0);
                    const double sn = t * cs;

                    for (Eigen::Index i = 0; i < n; ++i) {
                        const double aip = a(i, p), aiq = a(i, q);
                        a(i, p) = cs * aip - sn * aiq;
                        a(i, q) = sn * aip + cs * aiq;
                    }
                    for (Eigen::Index i = 0; i < n; ++i) {
                        const double api = a(p, i), aqi = a(q, i);
                        a(p, i) = cs * api - sn * aqi;
                        a(q, i) = sn * api + cs * aqi;
                    }
                    for (Eigen::Index i = 0; i < n; ++i) {
                        const double uip = u(i, p), uiq = u(i, q);
                        u(i, p) = cs * uip - sn * uiq;
                        u(i, q) = sn * uip + cs * uiq;
                    }
                }
            }
        }
    }

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index i, Eigen::Index j) { return a(i, i) > a(j, j); });

    EigenDecomposition out;
    out.values.resize(n);
    out.u.resize(n, n);
    for (Eigen::Index k = 0; k < n; ++k) {
        out.values(k) = a(order[static_cast<std::size_t>(k)],
                          order[static_cast<std::size_t>(k)]);
        out.u.col(k) = u.col(order[static_cast<std::size_t>(k)]);
    }
    return out;
}

double energy_concentration(const Eigen::VectorXd& eigenvalues) {
    if (eigenvalues.size() == 0)
        throw DomainError("energy_concentration: empty spectrum");
    double total = 0.0;
    double top = 0.0;
    for (Eigen::Index i = 0; i < eigenvalues.size(); ++i) {
        const double s = std::max(eigenvalues(i), 0.0); // PSD up to roundoff
        total += s;
        top = std::max(top, s);
    }
    if (total <= 0.0)
        throw DomainError("energy_concentration: all-zero spectrum, eta1 undefined");
    return top / total;
}

LeadingSimilarity leading_similarity(const DesignMatrix& m, double ridge_lambda) {
    const Eigen::Index k = m.m.cols();
    if (k < 1) throw DimensionError("leading_similarity: K >= 1 required");

    const Eigen::MatrixXd mtm = m.m.transpose() * m.m;
    const EigenDecomposition eig = sym_eigen(mtm);

    LeadingSimilarity out;
    out.mu1 = eig.values(0);
    out.v1 = eig.u.col(0);
    out.similarity = std::abs(out.v1(0));
    out.degenerate = k > 1 && (eig.values(0) - eig.values(1)) < 1e-12 * std::abs(eig.values(0));

    // The ridge shift moves eigenvalues, not eigenvectors; check it held.
    if (ridge_lambda > 0.0 && !out.degenerate) {
        Eigen::MatrixXd shifted = mtm;
        shifted.diagonal().array() += ridge_lambda;
        const EigenDecomposition eig_shifted = sym_eigen(shifted);
        const double overlap = std::abs(out.v1.dot(eig_shifted.u.col(0)));
        if (overlap < 1.0 - 1e-9)
            throw ConvergenceError(
                "leading_similarity: ridge shift perturbed the leading eigenvector "
                "(overlap " + std::to_string(overlap) + ")");
    }
    return out;
}

GatingStats gating_stats(const FieldStack& g, const ValidityMask& mask) {
    if (g.height != mask.height || g.width != mask.width)
        throw DimensionError("gating_stats: mask dimension mismatch");
    if (g.channels < 1) throw DimensionError("gating_stats: empty stack");

    const double* g0 = g.plane(0);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < g.plane_size(); ++i) {
        if (!mask.data[i]) continue;
        sum += g0[i];
        ++n;
    }
    if (n == 0) throw EmptyReductionError("gating_stats: empty mask");

    const double mean = sum / static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < g.plane_size(); ++i) {
        if (!mask.data[i]) continue;
        const double d = g0[i] - mean;
        var += d * d;
    }
    return GatingStats{mean, var / static_cast<double>(n)};
}

Eigen::VectorXd eigenbasis_coefficients(const Eigen::MatrixXd& eigvecs,
                                        const AnchorTargets& y) {
    if (eigvecs.rows() != static_cast<Eigen::Index>(y.y.size()))
        throw DimensionError("eigenbasis_coefficients: dimension mismatch");
    const Eigen::Map<const Eigen::VectorXd> yv(y.y.data(),
                                               static_cast<Eigen::Index>(y.y.size()));
    return eigvecs.transpose() * yv;
}

SpectralReport make_spectral_report(const std::string& image_id,
                                    const DesignMatrix& m, const AnchorTargets& y,
                                    const FieldStack& gating, const ValidityMask& mask,
                                    double ridge_lambda) {
    SpectralReport rep;
    rep.image_id = image_id;

    const Eigen::MatrixXd c = gram(m);
    const EigenDecomposition eig = sym_eigen(c);
    rep.eigenvalues.assign(eig.values.data(), eig.values.data() + eig.values.size());
    rep.eta1 = energy_concentration(eig.values);

    const Eigen::VectorXd alpha = eigenbasis_coefficients(eig.u, y);
    rep.alpha.assign(alpha.data(), alpha.data() + alpha.size());

    const LeadingSimilarity sim = leading_similarity(m, ridge_lambda);
    rep.mu1 = sim.mu1;
    rep.v1.assign(sim.v1.data(), sim.v1.data() + sim.v1.size());
    rep.similarity = sim.similarity;
    rep.degenerate = sim.degenerate;

    const GatingStats gs = gating_stats(gating, mask);
    rep.g0_mean = gs.mean;
    rep.g0_var = gs.variance;
    return rep;
}

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

void write_spectral_csv(const std::filesystem::path& path,
                        const std::vector<SpectralReport>& reports,
                        const std::vector<std::string>& header_comments) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("write_spectral_csv: cannot open " + path.string());
    for (const auto& line : header_comments) out << "# " << line << '\n';
    out << "image_id,eta1,mu1,similarity,g0_mean,g0_var\n";
    for (const auto& r : reports) {
        out << r.image_id << ',' << fmt_double(r.eta1) << ',' << fmt_double(r.mu1)
            << ',' << fmt_double(r.similarity) << ',' << fmt_double(r.g0_mean) << ','
            << fmt_double(r.g0_var) << '\n';
    }
}

void write_eigenvalue_sidecar(const std::filesystem::path& path,
                              const std::vector<SpectralReport>& reports,
                              const std::vector<std::string>& header_comments) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("write_eigenvalue_sidecar: cannot open " + path.string());
    for (const auto& line : header_comments) out << "# " << line << '\n';
    out << "image_id,index,eigenvalue\n";
    for (const auto& r : reports)
        for (std::size_t i = 0; i < r.eigenvalues.size(); ++i)
            out << r.image_id << ',' << i << ',' << fmt_double(r.eigenvalues[i]) << '\n';
}

} // namespace depthalign
