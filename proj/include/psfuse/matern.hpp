#pragma once

#include <cstdint>

#include "psfuse/mesh.hpp"

namespace psfuse {

/// Matern hyperparameters with smoothness fixed at nu = 1 (SPDE alpha = 2 in
/// 2-D). kappa, tau and the microergodic parameter are derived consistently
/// from (sigma, rho).
struct MaternParams {
    double sigma = 1.0;
    double range_rho = 0.2;
    double nu = 1.0;

    double kappa() const;        // sqrt(8 nu) / rho
    double tau() const;          // scales the SPDE so the marginal variance is sigma^2
    double theta_micro() const;  // sigma^2 kappa^(2 nu)

    /// From (sigma, practical range rho).
    static MaternParams from_range(double sigma, double rho, double nu = 1.0);
    /// From (sigma, scale s) with kappa = sqrt(2 nu)/s, i.e. rho = 2 s.
    static MaternParams from_scale(double sigma, double s, double nu = 1.0);
};

inline MaternParams params_from_scale(double sigma, double s, double nu = 1.0) {
    return MaternParams::from_scale(sigma, s, nu);
}

/// Matern covariance at distance h; sigma^2 at h = 0, clamped to 0 beyond
/// 30/kappa where it is below 1e-12 anyway.
double matern_cov(double h, const MaternParams& params);

/// kappa-independent FEM pieces of the alpha = 2 precision
/// Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G), with C the lumped mass.
/// Caching these makes Q a cheap scalar combination per hyperparameter value.
class SpdeOperator {
public:
    SpdeOperator() = default;
    explicit SpdeOperator(const FemMatrices& fem);

    SpMat precision(const MaternParams& params) const;
    int size() const { return static_cast<int>(c_lumped_.size()); }
    const Eigen::VectorXd& lumped_mass() const { return c_lumped_; }

private:
    Eigen::VectorXd c_lumped_;
    SpMat g_;
    SpMat gcg_;  // G C^-1 G
};

struct SpdePrecision {
    SpMat Q;
    MaternParams params;
};

SpdePrecision spde_precision(const FemMatrices& fem, const MaternParams& params);

/// Zero-mean draw with precision Q via back-substitution through the sparse
/// Cholesky factor. Deterministic given the seed.
Eigen::VectorXd sample_grf(const SpdePrecision& precision, std::uint64_t seed);

}  // namespace psfuse
