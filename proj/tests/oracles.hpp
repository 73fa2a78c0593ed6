#pragma once

// Test-only oracles, deliberately independent of the library's solver and
// linear-algebra paths: plain-vector Gaussian elimination, triple-loop
// products, and small numeric helpers.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

// Solve A x = b by Gaussian elimination with partial pivoting.
inline std::vector<double> ge_solve(Matrix a, std::vector<double> b) {
    const std::size_t n = b.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
        if (a[pivot][col] == 0.0) throw std::runtime_error("ge_solve: singular");
        std::swap(a[col], a[pivot]);
        std::swap(b[col], b[pivot]);
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a[r][col] / a[col][col];
            for (std::size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(n, 0.0);
    for (std::size_t r = n; r-- > 0;) {
        double acc = b[r];
        for (std::size_t c = r + 1; c < n; ++c) acc -= a[r][c] * x[c];
        x[r] = acc / a[r][r];
    }
    return x;
}

// Ridge normal equations (M^T M + lambda I) w = M^T y assembled and solved
// entirely with plain loops.
inline std::vector<double> ridge_oracle(const Matrix& m, const std::vector<double>& y,
                                        double lambda) {
    const std::size_t n = m.size();
    const std::size_t k = m.empty() ? 0 : m[0].size();
    Matrix a(k, std::vector<double>(k, 0.0));
    std::vector<double> rhs(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            rhs[p] += m[i][p] * y[i];
            for (std::size_t q = 0; q < k; ++q) a[p][q] += m[i][p] * m[i][q];
        }
    }
    for (std::size_t p = 0; p < k; ++p) a[p][p] += lambda;
    return ge_solve(std::move(a), std::move(rhs));
}

// Gram matrix C = M M^T by triple loop.
inline Matrix gram_oracle(const Matrix& m) {
    const std::size_t n = m.size();
    const std::size_t k = m.empty() ? 0 : m[0].size();
    Matrix c(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) c[i][j] += m[i][p] * m[j][p];
    return c;
}

inline double rel_err(double got, double want) {
    const double denom = std::max(std::abs(want), 1e-300);
    return std::abs(got - want) / denom;
}

} // namespace oracle
