#pragma once

#include <Eigen/Core>
#include <span>
#include <utility>
#include <vector>

namespace psfuse {

struct SurfaceScore {
    double mse = 0.0;
    double mae = 0.0;
    double wd = 0.0;
    int n_targets = 0;
};

/// MSE against the predictive mean, MAE against the predictive median, and
/// the mean pointwise Gaussian 2-Wasserstein distance
/// sqrt((mean - truth)^2 + (sd - ref_sd)^2).
SurfaceScore surface_scores(const Eigen::VectorXd& pred_mean, const Eigen::VectorXd& pred_median,
                            const Eigen::VectorXd& pred_sd, const Eigen::VectorXd& truth,
                            const Eigen::VectorXd& ref_sd);

/// Interval score of a central (1-alpha) interval:
/// (u - l) + (2/alpha)(l - y)_+ + (2/alpha)(y - u)_+.
double interval_score(double lower, double upper, double y, double level_alpha = 0.05);

/// Fraction of closed intervals containing the true value.
double coverage(std::span<const std::pair<double, double>> intervals, double true_value);

/// Empirical quantile with type-7 interpolation; values need not be sorted.
double quantile_type7(std::vector<double> values, double p);

struct Aggregate {
    double mean = 0.0;
    double q025 = 0.0;
    double q975 = 0.0;
};

/// Mean and 2.5%/97.5% type-7 quantiles over replicate scores.
Aggregate aggregate_scenario(std::span<const double> replicate_scores);

struct ParamScore {
    double avg_posterior_mean = 0.0;
    double inscore = 0.0;  // average 95% interval score
    double cp = 0.0;       // 95% coverage probability
};

ParamScore param_score(std::span<const double> posterior_means, std::span<const double> lowers,
                       std::span<const double> uppers, double true_value);

}  // namespace psfuse
