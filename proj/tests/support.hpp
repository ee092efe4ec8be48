// Test-only oracles, independent of the library code paths they check.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "psfuse/geometry.hpp"
#include "psfuse/matern.hpp"

namespace oracle {

/// Modified Bessel K_1 by direct quadrature of the integral representation
/// K_1(x) = int_0^inf exp(-x cosh t) cosh t dt (Simpson rule).
inline double bessel_k1(double x) {
    const double tmax = std::log(1600.0 / x) + 4.0;
    const int n = 40000;  // even
    const double h = tmax / n;
    auto f = [&](double t) { return std::exp(-x * std::cosh(t)) * std::cosh(t); };
    double sum = f(0.0) + f(tmax);
    for (int i = 1; i < n; ++i) sum += f(i * h) * (i % 2 == 1 ? 4.0 : 2.0);
    return sum * h / 3.0;
}

/// Polygon area by counting subsamples of a fine regular grid over the
/// polygon bbox (clip-free membership test).
inline double polygon_area_by_counting(const psfuse::Polygon& poly, int resolution = 1500) {
    double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
    for (const auto& p : poly) {
        x0 = std::min(x0, p.x);
        y0 = std::min(y0, p.y);
        x1 = std::max(x1, p.x);
        y1 = std::max(y1, p.y);
    }
    if (!(x1 > x0) || !(y1 > y0)) return 0.0;
    const double dx = (x1 - x0) / resolution;
    const double dy = (y1 - y0) / resolution;
    long long inside = 0;
    for (int j = 0; j < resolution; ++j) {
        const double y = y0 + (j + 0.5) * dy;
        for (int i = 0; i < resolution; ++i) {
            if (psfuse::point_in_polygon_closed({x0 + (i + 0.5) * dx, y}, poly)) ++inside;
        }
    }
    return static_cast<double>(inside) * dx * dy;
}

/// Dense Matern covariance matrix between two point sets.
inline Eigen::MatrixXd matern_cov_matrix(const std::vector<psfuse::Point2>& a,
                                         const std::vector<psfuse::Point2>& b,
                                         const psfuse::MaternParams& params) {
    Eigen::MatrixXd c(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j)
            c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                psfuse::matern_cov(psfuse::dist(a[i], b[j]), params);
    return c;
}

struct DenseKriging {
    Eigen::VectorXd mean;
    Eigen::VectorXd var;
};

/// Simple kriging against the exact covariance with a nugget on the
/// observations: mean = C_tX (C_XX + vI)^-1 y.
inline DenseKriging dense_kriging(const std::vector<psfuse::Point2>& obs_locs,
                                  const Eigen::VectorXd& obs_values,
                                  const std::vector<psfuse::Point2>& targets,
                                  const psfuse::MaternParams& params, double nugget_var) {
    const Eigen::MatrixXd cxx =
        matern_cov_matrix(obs_locs, obs_locs, params) +
        nugget_var * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(obs_locs.size()),
                                               static_cast<Eigen::Index>(obs_locs.size()));
    const Eigen::MatrixXd ctx = matern_cov_matrix(targets, obs_locs, params);
    const Eigen::LDLT<Eigen::MatrixXd> chol(cxx);
    DenseKriging out;
    out.mean = ctx * chol.solve(obs_values);
    out.var.resize(static_cast<Eigen::Index>(targets.size()));
    const Eigen::MatrixXd solved = chol.solve(ctx.transpose());
    for (std::size_t t = 0; t < targets.size(); ++t) {
        const auto k = static_cast<Eigen::Index>(t);
        out.var[k] = params.sigma * params.sigma - ctx.row(k).dot(solved.col(k));
    }
    return out;
}

/// log N(y; 0, C) with full constants.
inline double dense_gaussian_logpdf(const Eigen::VectorXd& y, const Eigen::MatrixXd& cov) {
    const Eigen::LDLT<Eigen::MatrixXd> chol(cov);
    const double quad = y.dot(chol.solve(y));
    const double logdet = chol.vectorD().array().log().sum();
    return -0.5 * (static_cast<double>(y.size()) * std::log(2.0 * M_PI) + logdet + quad);
}

/// Two-sample-free 2-D Kolmogorov-Smirnov p-value against the uniform law on
/// a rectangle (Fasano & Franceschini's quadrant statistic with Kolmogorov
/// asymptotics).
inline double ks2d_uniform_pvalue(const std::vector<psfuse::Point2>& pts,
                                  const psfuse::Rect& box) {
    const int n = static_cast<int>(pts.size());
    if (n < 5) return 1.0;
    double d = 0.0;
    for (const auto& c : pts) {
        const double fx = (c.x - box.x0) / box.width();
        const double fy = (c.y - box.y0) / box.height();
        int q[4] = {0, 0, 0, 0};
        for (const auto& p : pts) {
            const bool right = p.x > c.x;
            const bool above = p.y > c.y;
            ++q[(right ? 1 : 0) + (above ? 2 : 0)];
        }
        const double expected[4] = {fx * fy, (1.0 - fx) * fy, fx * (1.0 - fy),
                                    (1.0 - fx) * (1.0 - fy)};
        for (int k = 0; k < 4; ++k)
            d = std::max(d, std::abs(static_cast<double>(q[k]) / n - expected[k]));
    }
    // sample correlation enters the effective dimension correction
    double mx = 0.0, my = 0.0;
    for (const auto& p : pts) {
        mx += p.x;
        my += p.y;
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (const auto& p : pts) {
        sxx += (p.x - mx) * (p.x - mx);
        syy += (p.y - my) * (p.y - my);
        sxy += (p.x - mx) * (p.y - my);
    }
    double r2 = 0.0;
    if (sxx > 0.0 && syy > 0.0) r2 = sxy * sxy / (sxx * syy);
    const double sqn = std::sqrt(static_cast<double>(n));
    const double lambda = sqn * d / (1.0 + std::sqrt(1.0 - r2) * (0.25 - 0.75 / sqn));
    double p = 0.0;
    for (int j = 1; j <= 100; ++j)
        p += 2.0 * (j % 2 == 1 ? 1.0 : -1.0) * std::exp(-2.0 * j * j * lambda * lambda);
    return std::clamp(p, 0.0, 1.0);
}

}  // namespace oracle
