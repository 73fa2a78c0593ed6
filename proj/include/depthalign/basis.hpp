#pragma once

#include <Eigen/Dense>
#include <filesystem>

#include "depthalign/anchors.hpp"
#include "depthalign/field.hpp"

namespace depthalign {

// K basis maps; channel m holds E_m(x). The per-anchor rows of this stack
// form the design matrix.
using EmbeddingStack = FieldStack;

// N x K matrix whose row i is the embedding at anchor i.
struct DesignMatrix {
    Eigen::MatrixXd m;
};

// Log-scale coefficients, one per basis map.
struct WeightVector {
    Eigen::VectorXd w;
};

struct RidgeConfig {
    double lambda = 1e-3; // >= 0; 0 only valid when M has full column rank
};

// Row i = E(a_i); anchors are integer pixels, no interpolation.
DesignMatrix assemble_design(const EmbeddingStack& e, const AnchorSet& a);

// Solves (M^T M + lambda I) w = M^T y through a symmetric positive-definite
// factorization of the K x K normal matrix; one refinement pass keeps the
// normal-equation residual at roundoff. Throws RankError when lambda = 0 and
// M^T M is singular.
WeightVector ridge_solve(const DesignMatrix& m, const AnchorTargets& y,
                         const RidgeConfig& cfg);

// l(x) = sum_m w_m E_m(x).
ScalarField predict_log_scale(const EmbeddingStack& e, const WeightVector& w);

// D_hat(x) = D_mde(x) * exp(l(x)); the output mask equals the input mask.
// |l| > 700 is clamped before exponentiation; the clamp count is reported
// through `clamped` when given.
DepthMap recover_depth(const DepthMap& d_mde, const ScalarField& ell,
                       std::size_t* clamped = nullptr);

// Shift absorption: l*(x) = log(s(x) + t(x)/D_mde(x)). Pixels with a
// nonpositive argument are flagged invalid in `valid` and counted.
struct AbsorbedShift {
    ScalarField log_scale;
    ValidityMask valid;
    std::size_t invalid_count = 0;
};
AbsorbedShift absorb_shift(const ScalarField& s, const ScalarField& t,
                           const DepthMap& d_mde);

// Diagnostics CSV: header "index,weight".
void write_weight_csv(const std::filesystem::path& path, const WeightVector& w);

} // namespace depthalign
