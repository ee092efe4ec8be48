#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "psfuse/model.hpp"

namespace psfuse {

/// Gaussian approximation of the latent field conditional on one
/// hyperparameter vector, centered at the joint-density mode.
struct LatentGaussianApprox {
    Eigen::VectorXd mode;
    SpMat precision_at_mode;
    double log_det_half = 0.0;  // 0.5 log det of precision_at_mode
    bool converged = false;
    int iterations = 0;
    /// -0.5 x'Qx + sum of block log likelihoods at the mode (latent prior
    /// normalization excluded; it cancels inside the Laplace marginal).
    double objective_at_mode = 0.0;
};

struct FitControls {
    double inner_grad_tol = 1e-8;
    int inner_max_iter = 50;
    double grid_step_sd = 0.75;
    int grid_points_per_axis = 3;
    double grid_prune = 0.01;
    int outer_max_eval = 500;
    int outer_stall_limit = 200;  // evaluations without improvement => diagnostic failure
    double outer_simplex_step = 0.5;
    int jobs = 1;  // grid-point evaluations may run concurrently
    std::uint64_t summary_seed = 20240901;
};

struct HyperSummary {
    double mean = 0.0, sd = 0.0, q025 = 0.0, q975 = 0.0;
    bool contains(double v) const { return v >= q025 && v <= q975; }
};

struct GridPoint {
    Eigen::VectorXd zeta;
    double log_post = 0.0;
    double weight = 0.0;
};

struct FitDiagnostics {
    bool converged = false;
    bool inner_converged = true;
    int n_eval = 0;
    double runtime_s = 0.0;
    std::string message;
};

struct FitResult {
    Variant variant = Variant::PSmelding;
    HyperLayout layout;
    std::vector<std::pair<std::string, HyperSummary>> hyper;  // one per zeta axis
    HyperSummary theta_micro;  // transform of (sigma, rho), not fit directly
    HyperSummary mu, alpha;
    Eigen::VectorXd node_mean, node_sd;
    std::vector<GridPoint> grid;
    Eigen::VectorXd map_zeta;
    FitDiagnostics diagnostics;

    // per-grid-point modes; rebuilt on demand when loaded from file
    std::vector<Eigen::VectorXd> grid_modes;

    const HyperSummary* find(const std::string& name) const;
};

struct Prediction {
    Eigen::VectorXd mean;
    Eigen::VectorXd sd;
};

/// Newton ascent on the joint log-density of [field, mu, alpha] given zeta,
/// with step halving; Poisson rows add diag(exposure * exp(eta)) curvature.
LatentGaussianApprox find_mode(const AssembledModel& model, const Eigen::VectorXd& zeta,
                               const Eigen::VectorXd* warm_start = nullptr,
                               const FitControls& controls = {});

/// Laplace-approximated log posterior of the hyperparameters,
/// log pi(zeta) + log pi(y | zeta) up to a zeta-free constant.
double log_posterior_hyper(const AssembledModel& model, const Eigen::VectorXd& zeta,
                           const FitControls& controls = {});

/// Full joint log density (latent prior normalization included) and its
/// latent gradient; the gradient is what the Newton iteration follows.
double joint_log_density(const AssembledModel& model, const Eigen::VectorXd& latent,
                         const Eigen::VectorXd& zeta);
Eigen::VectorXd joint_gradient(const AssembledModel& model, const Eigen::VectorXd& latent,
                               const Eigen::VectorXd& zeta);

/// Nelder-Mead optimum of log_posterior_hyper, a 3-point-per-axis grid around
/// it (steps of grid_step_sd posterior sds), Gaussian latent mixtures over the
/// grid, and per-axis quadratically interpolated hyperparameter summaries.
FitResult fit(const AssembledModel& model, const FitControls& controls = {});

/// Posterior mean and sd of mu + field at each target, mixed over the
/// hyperparameter grid by the law of total mean and variance.
Prediction predict(const FitResult& fit, const AssembledModel& model,
                   std::span<const Point2> targets, const FitControls& controls = {});

/// P(mu + field(target) > threshold) under the same mixture.
Eigen::VectorXd exceedance_prob(const FitResult& fit, const AssembledModel& model,
                                std::span<const Point2> targets, double threshold,
                                const FitControls& controls = {});

}  // namespace psfuse
