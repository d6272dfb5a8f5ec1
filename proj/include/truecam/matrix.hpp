#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace truecam {

/// Dense row-major matrix of doubles. The one matrix type used throughout
/// the library; invariant: data.size() == rows * cols.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const {
        return {data.data() + r * cols, cols};
    }

    bool empty() const { return rows == 0 || cols == 0; }
    bool all_finite() const;
};

namespace linalg {

double dot(std::span<const double> a, std::span<const double> b);
double squared_distance(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);

/// m * x
std::vector<double> matvec(const Matrix& m, std::span<const double> x);
/// m^T * x
std::vector<double> matvec_transposed(const Matrix& m, std::span<const double> x);

/// a^T a, a (cols x cols) symmetric matrix.
Matrix transpose_times_self(const Matrix& a);

/// Lower Cholesky factor of a symmetric positive definite matrix.
/// Throws std::runtime_error when the matrix is not SPD.
Matrix cholesky(const Matrix& spd);

/// Solves (L L^T) x = rhs given the lower factor L.
std::vector<double> cholesky_solve(const Matrix& lower, std::span<const double> rhs);

/// x^T (L L^T)^{-1} x given the lower factor L; equals ||L^{-1} x||^2.
double quad_form_inverse(const Matrix& lower, std::span<const double> x);

}  // namespace linalg
}  // namespace truecam
