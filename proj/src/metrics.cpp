#include "psfuse/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "psfuse/errors.hpp"

namespace psfuse {

SurfaceScore surface_scores(const Eigen::VectorXd& pred_mean, const Eigen::VectorXd& pred_median,
                            const Eigen::VectorXd& pred_sd, const Eigen::VectorXd& truth,
                            const Eigen::VectorXd& ref_sd) {
    const Eigen::Index n = truth.size();
    if (pred_mean.size() != n || pred_median.size() != n || pred_sd.size() != n ||
        ref_sd.size() != n)
        throw InputError("surface_scores: input lengths differ");
    if (n == 0) throw InputError("surface_scores: empty input");

    SurfaceScore s;
    s.n_targets = static_cast<int>(n);
    s.mse = (pred_mean - truth).squaredNorm() / static_cast<double>(n);
    s.mae = (pred_median - truth).cwiseAbs().sum() / static_cast<double>(n);
    s.wd = ((pred_mean - truth).array().square() + (pred_sd - ref_sd).array().square())
               .sqrt()
               .sum() /
           static_cast<double>(n);
    return s;
}

double interval_score(double lower, double upper, double y, double level_alpha) {
    if (lower > upper) throw InputError("interval_score: inverted interval");
    double score = upper - lower;
    if (y < lower) score += 2.0 / level_alpha * (lower - y);
    if (y > upper) score += 2.0 / level_alpha * (y - upper);
    return score;
}

double coverage(std::span<const std::pair<double, double>> intervals, double true_value) {
    if (intervals.empty()) throw InputError("coverage: no intervals");
    int hits = 0;
    for (const auto& [lo, hi] : intervals)
        if (true_value >= lo && true_value <= hi) ++hits;
    return static_cast<double>(hits) / static_cast<double>(intervals.size());
}

double quantile_type7(std::vector<double> values, double p) {
    if (values.empty()) throw InputError("quantile_type7: empty input");
    std::sort(values.begin(), values.end());
    const double h = (static_cast<double>(values.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (h - std::floor(h)) * (values[hi] - values[lo]);
}

Aggregate aggregate_scenario(std::span<const double> replicate_scores) {
    if (replicate_scores.empty()) throw InputError("aggregate_scenario: no replicates");
    std::vector<double> v(replicate_scores.begin(), replicate_scores.end());
    Aggregate a;
    a.mean = 0.0;
    for (double x : v) a.mean += x;
    a.mean /= static_cast<double>(v.size());
    a.q025 = quantile_type7(v, 0.025);
    a.q975 = quantile_type7(v, 0.975);
    return a;
}

ParamScore param_score(std::span<const double> posterior_means, std::span<const double> lowers,
                       std::span<const double> uppers, double true_value) {
    const std::size_t n = posterior_means.size();
    if (n == 0 || lowers.size() != n || uppers.size() != n)
        throw InputError("param_score: inconsistent replicate vectors");
    ParamScore ps;
    std::vector<std::pair<double, double>> intervals;
    intervals.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        ps.avg_posterior_mean += posterior_means[i];
        ps.inscore += interval_score(lowers[i], uppers[i], true_value);
        intervals.emplace_back(lowers[i], uppers[i]);
    }
    ps.avg_posterior_mean /= static_cast<double>(n);
    ps.inscore /= static_cast<double>(n);
    ps.cp = coverage(intervals, true_value);
    return ps;
}

}  // namespace psfuse
