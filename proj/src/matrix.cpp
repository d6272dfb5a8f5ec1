#include "truecam/matrix.hpp"

#include <cmath>
#include <stdexcept>

namespace truecam {

bool Matrix::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

namespace linalg {

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

std::vector<double> matvec(const Matrix& m, std::span<const double> x) {
    std::vector<double> out(m.rows, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) out[r] = dot(m.row(r), x);
    return out;
}

std::vector<double> matvec_transposed(const Matrix& m, std::span<const double> x) {
    std::vector<double> out(m.cols, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double xr = x[r];
        const double* row = m.data.data() + r * m.cols;
        for (std::size_t c = 0; c < m.cols; ++c) out[c] += row[c] * xr;
    }
    return out;
}

Matrix transpose_times_self(const Matrix& a) {
    Matrix out(a.cols, a.cols, 0.0);
    for (std::size_t r = 0; r < a.rows; ++r) {
        const double* row = a.data.data() + r * a.cols;
        for (std::size_t i = 0; i < a.cols; ++i) {
            const double ri = row[i];
            if (ri == 0.0) continue;
            double* dst = out.data.data() + i * a.cols;
            for (std::size_t j = i; j < a.cols; ++j) dst[j] += ri * row[j];
        }
    }
    // mirror the upper triangle
    for (std::size_t i = 0; i < a.cols; ++i)
        for (std::size_t j = 0; j < i; ++j) out.at(i, j) = out.at(j, i);
    return out;
}

Matrix cholesky(const Matrix& spd) {
    if (spd.rows != spd.cols)
        throw std::runtime_error("cholesky: matrix must be square");
    const std::size_t n = spd.rows;
    Matrix l(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = spd.at(i, j);
            const double* li = l.data.data() + i * n;
            const double* lj = l.data.data() + j * n;
            for (std::size_t k = 0; k < j; ++k) s -= li[k] * lj[k];
            if (i == j) {
                if (s <= 0.0 || !std::isfinite(s))
                    throw std::runtime_error("cholesky: matrix not positive definite");
                l.at(i, j) = std::sqrt(s);
            } else {
                l.at(i, j) = s / l.at(j, j);
            }
        }
    }
    return l;
}

std::vector<double> cholesky_solve(const Matrix& lower, std::span<const double> rhs) {
    const std::size_t n = lower.rows;
    std::vector<double> y(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double s = rhs[i];
        const double* li = lower.data.data() + i * n;
        for (std::size_t k = 0; k < i; ++k) s -= li[k] * y[k];
        y[i] = s / li[i];
    }
    std::vector<double> x(n, 0.0);
    for (std::size_t ii = n; ii > 0; --ii) {
        const std::size_t i = ii - 1;
        double s = y[i];
        for (std::size_t k = i + 1; k < n; ++k) s -= lower.at(k, i) * x[k];
        x[i] = s / lower.at(i, i);
    }
    return x;
}

double quad_form_inverse(const Matrix& lower, std::span<const double> x) {
    const std::size_t n = lower.rows;
    double out = 0.0;
    std::vector<double> y(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double s = x[i];
        const double* li = lower.data.data() + i * n;
        for (std::size_t k = 0; k < i; ++k) s -= li[k] * y[k];
        y[i] = s / li[i];
        out += y[i] * y[i];
    }
    return out;
}

}  // namespace linalg
}  // namespace truecam
