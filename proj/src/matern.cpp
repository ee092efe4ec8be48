#include "psfuse/matern.hpp"

#include <cmath>

#include "psfuse/errors.hpp"
#include "psfuse/rng.hpp"

namespace psfuse {

namespace {

void check_params(double sigma, double scale, double nu, const char* what) {
    if (!(sigma > 0.0) || !(scale > 0.0))
        throw ConfigError(std::string(what) + ": sigma and range must be > 0");
    if (nu != 1.0)
        throw ConfigError(std::string(what) + ": only nu = 1 is supported");
}

}  // namespace

double MaternParams::kappa() const { return std::sqrt(8.0 * nu) / range_rho; }

double MaternParams::tau() const {
    // stationary marginal variance of the alpha = 2 field in 2-D:
    // sigma^2 = 1 / (4 pi kappa^2 tau^2)
    const double k = kappa();
    return 1.0 / (std::sqrt(4.0 * M_PI) * k * sigma);
}

double MaternParams::theta_micro() const { return sigma * sigma * std::pow(kappa(), 2.0 * nu); }

MaternParams MaternParams::from_range(double sigma, double rho, double nu) {
    check_params(sigma, rho, nu, "MaternParams::from_range");
    return MaternParams{sigma, rho, nu};
}

MaternParams MaternParams::from_scale(double sigma, double s, double nu) {
    check_params(sigma, s, nu, "MaternParams::from_scale");
    const double kappa = std::sqrt(2.0 * nu) / s;
    const double rho = std::sqrt(8.0 * nu) / kappa;
    return MaternParams{sigma, rho, nu};
}

double matern_cov(double h, const MaternParams& params) {
    if (h < 0.0) throw ConfigError("matern_cov: negative distance");
    const double kh = params.kappa() * h;
    if (kh == 0.0) return params.sigma * params.sigma;
    if (kh > 30.0) return 0.0;  // below 1e-12 of sigma^2
    // nu = 1: sigma^2 (kappa h) K_1(kappa h)
    return params.sigma * params.sigma * kh * std::cyl_bessel_k(1.0, kh);
}

SpdeOperator::SpdeOperator(const FemMatrices& fem) {
    c_lumped_ = fem.mass_lumped;
    g_ = fem.stiffness;
    const Eigen::VectorXd cinv = c_lumped_.cwiseInverse();
    gcg_ = g_ * cinv.asDiagonal() * g_;
    gcg_.makeCompressed();
    g_.makeCompressed();
}

SpMat SpdeOperator::precision(const MaternParams& params) const {
    if (params.nu != 1.0) throw ConfigError("SpdeOperator: only nu = 1 (alpha = 2) is supported");
    const double k2 = params.kappa() * params.kappa();
    const double t2 = params.tau() * params.tau();
    SpMat q = t2 * gcg_;
    q += (2.0 * t2 * k2) * g_;
    SpMat cpart(size(), size());
    cpart.reserve(Eigen::VectorXi::Constant(size(), 1));
    for (int i = 0; i < size(); ++i) cpart.insert(i, i) = t2 * k2 * k2 * c_lumped_[i];
    q += cpart;
    q.makeCompressed();
    return q;
}

SpdePrecision spde_precision(const FemMatrices& fem, const MaternParams& params) {
    SpdeOperator op(fem);
    SpdePrecision out;
    out.Q = op.precision(params);
    out.params = params;
    Eigen::SimplicialLLT<SpMat> llt(out.Q);
    if (llt.info() != Eigen::Success)
        throw NumericalError("spde_precision: precision matrix is not positive definite");
    return out;
}

Eigen::VectorXd sample_grf(const SpdePrecision& precision, std::uint64_t seed) {
    Eigen::SimplicialLLT<SpMat> llt(precision.Q);
    if (llt.info() != Eigen::Success)
        throw NumericalError("sample_grf: Cholesky factorization failed");
    const int m = static_cast<int>(precision.Q.rows());
    Rng rng(seed);
    Eigen::VectorXd z(m);
    for (int i = 0; i < m; ++i) z[i] = rng.normal();
    // x = P^T L^-T z has precision Q when P Q P^T = L L^T
    Eigen::VectorXd x = llt.matrixU().solve(z);
    return llt.permutationPinv() * x;
}

}  // namespace psfuse
