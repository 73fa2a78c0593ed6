#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>
#include <vector>

#include "depthalign/anchors.hpp"
#include "depthalign/basis.hpp"
#include "depthalign/field.hpp"

namespace depthalign {

// Eigenvalues (descending) and the matching orthonormal eigenvectors
// (columns of u).
struct EigenDecomposition {
    Eigen::VectorXd values;
    Eigen::MatrixXd u;
};

// Gram matrix C = M M^T; C[i,j] is the inner product of the anchor-i and
// anchor-j embeddings.
Eigen::MatrixXd gram(const DesignMatrix& m);

// Cyclic Jacobi rotations on a symmetric matrix. Input is symmetrized;
// iteration stops when the off-diagonal Frobenius norm falls below
// 1e-12 * ||C||_F, with a 100-sweep cap (ConvergenceError beyond that).
EigenDecomposition sym_eigen(const Eigen::MatrixXd& c);

// eta_1 = s_1 / sum_l s_l after clamping roundoff-negative eigenvalues
// to zero. Errors on an all-zero spectrum.
double energy_concentration(const Eigen::VectorXd& eigenvalues);

// Leading eigenpair of M^T M and the overlap |v_1[0]| with the global
// channel selector. The ridge shift lambda*I moves eigenvalues only, which
// leading_similarity verifies numerically.
struct LeadingSimilarity {
    double mu1 = 0.0;
    Eigen::VectorXd v1;
    double similarity = 0.0;
    bool degenerate = false; // leading eigenvalue within 1e-12 relative of the next
};
LeadingSimilarity leading_similarity(const DesignMatrix& m, double ridge_lambda);

// Masked mean and population variance of gating channel 0.
struct GatingStats {
    double mean = 0.0;
    double variance = 0.0;
};
GatingStats gating_stats(const FieldStack& g, const ValidityMask& mask);

// alpha_l = u_l^T y; sum_l alpha_l u_l reconstructs y.
Eigen::VectorXd eigenbasis_coefficients(const Eigen::MatrixXd& eigvecs,
                                        const AnchorTargets& y);

// Per-image spectral diagnostics row.
struct SpectralReport {
    std::string image_id;
    std::vector<double> eigenvalues; // of the Gram matrix, descending
    double eta1 = 0.0;
    std::vector<double> alpha;
    double mu1 = 0.0;
    std::vector<double> v1;
    double similarity = 0.0;
    bool degenerate = false;
    double g0_mean = 0.0;
    double g0_var = 0.0;
};

SpectralReport make_spectral_report(const std::string& image_id,
                                    const DesignMatrix& m, const AnchorTargets& y,
                                    const FieldStack& gating, const ValidityMask& mask,
                                    double ridge_lambda);

// Main CSV: image_id,eta1,mu1,similarity,g0_mean,g0_var.
// Sidecar CSV: image_id,index,eigenvalue.
void write_spectral_csv(const std::filesystem::path& path,
                        const std::vector<SpectralReport>& reports,
                        const std::vector<std::string>& header_comments);
void write_eigenvalue_sidecar(const std::filesystem::path& path,
                              const std::vector<SpectralReport>& reports,
                              const std::vector<std::string>& header_comments);

} // namespace depthalign
