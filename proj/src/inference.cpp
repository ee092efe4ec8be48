#include "psfuse/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>

#include <Eigen/Dense>

#include "psfuse/errors.hpp"
#include "psfuse/metrics.hpp"
#include "psfuse/parallel.hpp"
#include "psfuse/rng.hpp"

namespace psfuse {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double normal_upper_tail(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

// ---------------------------------------------------------------------
// Selected inversion (Takahashi recursions): entries of H^-1 on the
// pattern of the LDL^T factor, which covers every structural entry of H.
// ---------------------------------------------------------------------
class SelectedInverse {
public:
    explicit SelectedInverse(const Eigen::SimplicialLDLT<SpMat>& ldlt) {
        L_ = ldlt.matrixL();
        L_.makeCompressed();
        d_ = ldlt.vectorD();
        const auto& idx = ldlt.permutationP().indices();
        to_permuted_.resize(idx.size());
        for (Eigen::Index k = 0; k < idx.size(); ++k) to_permuted_[idx[k]] = static_cast<int>(k);

        const int n = static_cast<int>(L_.rows());
        z_.assign(static_cast<std::size_t>(L_.nonZeros()), 0.0);
        const int* outer = L_.outerIndexPtr();
        const int* inner = L_.innerIndexPtr();
        const double* lval = L_.valuePtr();

        for (int j = n - 1; j >= 0; --j) {
            if (!(d_[j] > 0.0))
                throw NumericalError("selected inverse: factor has a non-positive pivot");
            // off-diagonals first (descending row), diagonal last
            for (int idx_ij = outer[j + 1] - 1; idx_ij >= outer[j]; --idx_ij) {
                const int i = inner[idx_ij];
                double sum = 0.0;
                for (int idx_kj = outer[j] + 1; idx_kj < outer[j + 1]; ++idx_kj) {
                    const int k = inner[idx_kj];
                    sum += lval[idx_kj] * value_at(std::max(i, k), std::min(i, k));
                }
                z_[static_cast<std::size_t>(idx_ij)] = (i == j ? 1.0 / d_[j] : 0.0) - sum;
            }
        }
    }

    /// H^-1 entry for original (unpermuted) indices; (i, j) must lie on the
    /// structural pattern of H.
    double entry(int i, int j) const {
        const int pi = to_permuted_[i];
        const int pj = to_permuted_[j];
        return value_at(std::max(pi, pj), std::min(pi, pj));
    }

    double diag(int i) const { return entry(i, i); }

    /// a' H^-1 a for a sparse vector whose index pairs all lie on the pattern.
    double quad_form(std::span<const std::pair<int, double>> a) const {
        double out = 0.0;
        for (std::size_t r = 0; r < a.size(); ++r) {
            out += a[r].second * a[r].second * diag(a[r].first);
            for (std::size_t c = r + 1; c < a.size(); ++c)
                out += 2.0 * a[r].second * a[c].second * entry(a[r].first, a[c].first);
        }
        return out;
    }

private:
    double value_at(int i, int j) const {  // permuted indices, i >= j
        const int* outer = L_.outerIndexPtr();
        const int* inner = L_.innerIndexPtr();
        const int* lo = inner + outer[j];
        const int* hi = inner + outer[j + 1];
        const int* pos = std::lower_bound(lo, hi, i);
        if (pos == hi || *pos != i)
            throw NumericalError("selected inverse: entry off the factor pattern");
        return z_[static_cast<std::size_t>(outer[j] + (pos - lo))];
    }

    SpMat L_;
    Eigen::VectorXd d_;
    std::vector<int> to_permuted_;
    std::vector<double> z_;
};

// ---------------------------------------------------------------------
// Newton engine for one assembled model. Reuses symbolic factorizations
// and the kappa-independent SPDE pieces across hyperparameter values.
// ---------------------------------------------------------------------
class Engine {
public:
    Engine(const AssembledModel& model, const FitControls& controls)
        : model_(model), controls_(controls) {}

    const AssembledModel& model() const { return model_; }

    // -0.5 x'Q_full x + total block log likelihood; -inf instead of throwing
    // on overflow so the line search can reject the step
    double objective(const Eigen::VectorXd& x, const HyperView& hv, const SpMat& q_field) const {
        if (!x.allFinite()) return -kInf;
        const double p_int = model_.intercept_precision();
        double obj = -0.5 * x.head(model_.m).dot(q_field * x.head(model_.m)) -
                     0.5 * p_int * (x[model_.m] * x[model_.m] + x[model_.m + 1] * x[model_.m + 1]);
        for (const LikBlock& block : model_.blocks) {
            const Eigen::VectorXd eta = block_predictor(block, model_, x, hv);
            if (!eta.allFinite()) return -kInf;
            if (block.family == Family::Gaussian) {
                const double tau = block.noise == NoisePrec::TauS ? hv.tau_s : hv.tau_B;
                obj += 0.5 * block.rows() * (std::log(tau) - 1.8378770664093453) -
                       0.5 * tau * (block.y - eta).squaredNorm();
            } else {
                for (int i = 0; i < block.rows(); ++i) {
                    obj += block.y[i] * eta[i];
                    if (block.exposure[i] != 0.0) obj -= block.exposure[i] * std::exp(eta[i]);
                }
            }
            if (std::isnan(obj) || obj == kInf) return -kInf;
        }
        return obj;
    }

    Eigen::VectorXd gradient(const Eigen::VectorXd& x, const HyperView& hv,
                             const SpMat& q_field) const {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(model_.latent_dim());
        g.head(model_.m) = -(q_field * x.head(model_.m));
        const double p_int = model_.intercept_precision();
        g[model_.m] -= p_int * x[model_.m];
        g[model_.m + 1] -= p_int * x[model_.m + 1];
        for (const LikBlock& block : model_.blocks) {
            const Eigen::VectorXd eta = block_predictor(block, model_, x, hv);
            Eigen::VectorXd gb;
            if (block.family == Family::Gaussian) {
                const double tau = block.noise == NoisePrec::TauS ? hv.tau_s : hv.tau_B;
                gb = tau * (block.y - eta);
            } else {
                gb = block.y - block.exposure.cwiseProduct(eta.array().exp().matrix());
            }
            const double scale = block.scale_by_gamma ? hv.gamma : 1.0;
            g.head(model_.m) += scale * (block.A_field.transpose() * gb);
            if (block.mu_coef != 0.0) g[model_.m] += block.mu_coef * gb.sum();
            if (block.alpha_coef != 0.0) g[model_.m + 1] += block.alpha_coef * gb.sum();
        }
        return g;
    }

    SpMat hessian(const Eigen::VectorXd& x, const HyperView& hv, const SpMat& q_field) const {
        const int d = model_.latent_dim();
        const int m = model_.m;
        std::vector<Eigen::Triplet<double>> trips;
        trips.reserve(static_cast<std::size_t>(q_field.nonZeros()) + 8u * static_cast<std::size_t>(m));

        for (int k = 0; k < q_field.outerSize(); ++k)
            for (SpMat::InnerIterator it(q_field, k); it; ++it)
                trips.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()),
                                   it.value());

        Eigen::VectorXd col_mu = Eigen::VectorXd::Zero(m);
        Eigen::VectorXd col_alpha = Eigen::VectorXd::Zero(m);
        double h_mumu = model_.intercept_precision();
        double h_alal = model_.intercept_precision();
        double h_mual = 0.0;

        for (const LikBlock& block : model_.blocks) {
            const Eigen::VectorXd eta = block_predictor(block, model_, x, hv);
            Eigen::VectorXd w;
            if (block.family == Family::Gaussian) {
                const double tau = block.noise == NoisePrec::TauS ? hv.tau_s : hv.tau_B;
                w = Eigen::VectorXd::Constant(block.rows(), tau);
            } else {
                w = block.exposure.cwiseProduct(eta.array().exp().matrix());
            }
            const double scale = block.scale_by_gamma ? hv.gamma : 1.0;
            const SpMat atwa = block.A_field.transpose() * w.asDiagonal() * block.A_field;
            const double s2 = scale * scale;
            for (int k = 0; k < atwa.outerSize(); ++k)
                for (SpMat::InnerIterator it(atwa, k); it; ++it)
                    trips.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()),
                                       s2 * it.value());
            const Eigen::VectorXd atw = block.A_field.transpose() * w;
            if (block.mu_coef != 0.0) col_mu += (scale * block.mu_coef) * atw;
            if (block.alpha_coef != 0.0) col_alpha += (scale * block.alpha_coef) * atw;
            const double wsum = w.sum();
            h_mumu += block.mu_coef * block.mu_coef * wsum;
            h_alal += block.alpha_coef * block.alpha_coef * wsum;
            h_mual += block.mu_coef * block.alpha_coef * wsum;
        }

        // intercept rows kept structurally dense so the selected inverse
        // covers every (node, intercept) pair
        for (int i = 0; i < m; ++i) {
            trips.emplace_back(i, m, col_mu[i]);
            trips.emplace_back(m, i, col_mu[i]);
            trips.emplace_back(i, m + 1, col_alpha[i]);
            trips.emplace_back(m + 1, i, col_alpha[i]);
        }
        trips.emplace_back(m, m, h_mumu);
        trips.emplace_back(m + 1, m + 1, h_alal);
        trips.emplace_back(m, m + 1, h_mual);
        trips.emplace_back(m + 1, m, h_mual);

        SpMat h(d, d);
        h.setFromTriplets(trips.begin(), trips.end());
        h.makeCompressed();
        return h;
    }

    /// Field precision for the zeta value, cached (the grid revisits values).
    const SpMat& field_precision(const HyperView& hv, double* log_det_half = nullptr) {
        if (hv.sigma != q_sigma_ || hv.rho != q_rho_) {
            q_cache_ = model_.spde.precision(
                MaternParams::from_range(hv.sigma, hv.rho, model_.spec.nu));
            if (!q_analyzed_) {
                q_solver_.analyzePattern(q_cache_);
                q_analyzed_ = true;
            }
            q_solver_.factorize(q_cache_);
            if (q_solver_.info() != Eigen::Success)
                throw NumericalError("field precision factorization failed");
            q_logdet_half_ = 0.5 * q_solver_.vectorD().array().log().sum();
            q_sigma_ = hv.sigma;
            q_rho_ = hv.rho;
        }
        if (log_det_half) *log_det_half = q_logdet_half_;
        return q_cache_;
    }

    LatentGaussianApprox find_mode(const Eigen::VectorXd& zeta, const Eigen::VectorXd* warm) {
        const HyperView hv = model_.hyper_view(zeta);
        const SpMat& q_field = field_precision(hv);

        LatentGaussianApprox out;
        Eigen::VectorXd x = (warm && warm->size() == model_.latent_dim())
                                ? *warm
                                : Eigen::VectorXd::Zero(model_.latent_dim());
        double obj = objective(x, hv, q_field);
        if (obj == -kInf) {
            x.setZero();
            obj = objective(x, hv, q_field);
        }
        Eigen::VectorXd grad = gradient(x, hv, q_field);

        int iter = 0;
        bool converged = false;
        for (;;) {
            const SpMat h = hessian(x, hv, q_field);
            if (!h_analyzed_) {
                h_solver_.analyzePattern(h);
                h_analyzed_ = true;
            }
            h_solver_.factorize(h);
            if (h_solver_.info() != Eigen::Success)
                throw NumericalError("find_mode: Hessian factorization failed");

            if (grad.cwiseAbs().maxCoeff() < controls_.inner_grad_tol) {
                converged = true;
                break;
            }
            if (iter >= controls_.inner_max_iter) break;

            const Eigen::VectorXd step = h_solver_.solve(grad);
            double t = 1.0;
            bool accepted = false;
            while (t > 1e-12) {
                const Eigen::VectorXd cand = x + t * step;
                const double cand_obj = objective(cand, hv, q_field);
                if (cand_obj >= obj - 1e-12) {  // monotone ascent
                    x = cand;
                    obj = cand_obj;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            ++iter;
            if (!accepted) break;
            grad = gradient(x, hv, q_field);
        }

        out.mode = std::move(x);
        out.converged = converged;
        out.iterations = iter;
        out.objective_at_mode = obj;
        out.precision_at_mode = hessian(out.mode, hv, q_field);
        out.log_det_half = 0.5 * h_solver_.vectorD().array().log().sum();
        return out;
    }

    /// Laplace marginal; leaves the engine factorized at the mode.
    double log_posterior(const Eigen::VectorXd& zeta, LatentGaussianApprox* approx = nullptr) {
        const double lp_prior = log_prior_hyper(zeta, model_.spec);
        if (lp_prior == -kInf) return -kInf;
        const HyperView hv = model_.hyper_view(zeta);
        double q_logdet_half = 0.0;
        field_precision(hv, &q_logdet_half);
        const double p_int = model_.intercept_precision();
        const double full_logdet_half = q_logdet_half + std::log(p_int);

        LatentGaussianApprox mode = find_mode(zeta, nullptr);
        const double lp = lp_prior + full_logdet_half + mode.objective_at_mode - mode.log_det_half;
        if (approx) *approx = std::move(mode);
        return lp;
    }

    const Eigen::SimplicialLDLT<SpMat>& factor() const { return h_solver_; }

private:
    const AssembledModel& model_;
    FitControls controls_;
    Eigen::SimplicialLDLT<SpMat> h_solver_, q_solver_;
    bool h_analyzed_ = false, q_analyzed_ = false;
    SpMat q_cache_;
    double q_sigma_ = std::numeric_limits<double>::quiet_NaN();
    double q_rho_ = std::numeric_limits<double>::quiet_NaN();
    double q_logdet_half_ = 0.0;
};

// ---------------------------------------------------------------------
// Nelder-Mead (maximization), with stall detection for the diagnostics.
// ---------------------------------------------------------------------
struct NmResult {
    Eigen::VectorXd best_x;
    double best_f = -kInf;
    int n_eval = 0;
    bool stalled = false;
};

NmResult nelder_mead_max(const std::function<double(const Eigen::VectorXd&)>& f,
                         const Eigen::VectorXd& x0, double step, int max_eval, int stall_limit) {
    const int n = static_cast<int>(x0.size());
    NmResult result;
    result.best_x = x0;

    int since_improvement = 0;
    auto eval = [&](const Eigen::VectorXd& x) {
        const double v = f(x);
        ++result.n_eval;
        if (v > result.best_f + 1e-10) {
            result.best_f = v;
            result.best_x = x;
            since_improvement = 0;
        } else if (++since_improvement >= stall_limit) {
            result.stalled = true;
        }
        return v;
    };

    std::vector<Eigen::VectorXd> xs(static_cast<std::size_t>(n + 1), x0);
    std::vector<double> fs(static_cast<std::size_t>(n + 1));
    for (int i = 0; i < n; ++i) xs[static_cast<std::size_t>(i + 1)][i] += step;
    for (int i = 0; i <= n; ++i) fs[static_cast<std::size_t>(i)] = eval(xs[static_cast<std::size_t>(i)]);

    while (result.n_eval < max_eval && !result.stalled) {
        std::vector<int> order(static_cast<std::size_t>(n + 1));
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            return fs[static_cast<std::size_t>(a)] > fs[static_cast<std::size_t>(b)];
        });
        const int best = order[0], worst = order[static_cast<std::size_t>(n)];
        const int second_worst = order[static_cast<std::size_t>(n - 1)];

        if (fs[static_cast<std::size_t>(best)] - fs[static_cast<std::size_t>(worst)] < 1e-6) break;

        Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
        for (int i = 0; i <= n; ++i)
            if (i != worst) centroid += xs[static_cast<std::size_t>(i)];
        centroid /= static_cast<double>(n);

        const Eigen::VectorXd reflected = centroid + (centroid - xs[static_cast<std::size_t>(worst)]);
        const double fr = eval(reflected);
        if (fr > fs[static_cast<std::size_t>(best)]) {
            const Eigen::VectorXd expanded =
                centroid + 2.0 * (centroid - xs[static_cast<std::size_t>(worst)]);
            const double fe = eval(expanded);
            if (fe > fr) {
                xs[static_cast<std::size_t>(worst)] = expanded;
                fs[static_cast<std::size_t>(worst)] = fe;
            } else {
                xs[static_cast<std::size_t>(worst)] = reflected;
                fs[static_cast<std::size_t>(worst)] = fr;
            }
        } else if (fr > fs[static_cast<std::size_t>(second_worst)]) {
            xs[static_cast<std::size_t>(worst)] = reflected;
            fs[static_cast<std::size_t>(worst)] = fr;
        } else {
            const Eigen::VectorXd contracted =
                centroid + 0.5 * (xs[static_cast<std::size_t>(worst)] - centroid);
            const double fc = eval(contracted);
            if (fc > fs[static_cast<std::size_t>(worst)]) {
                xs[static_cast<std::size_t>(worst)] = contracted;
                fs[static_cast<std::size_t>(worst)] = fc;
            } else {
                for (int i = 0; i <= n; ++i) {  // shrink toward the best vertex
                    if (i == best) continue;
                    xs[static_cast<std::size_t>(i)] =
                        xs[static_cast<std::size_t>(best)] +
                        0.5 * (xs[static_cast<std::size_t>(i)] - xs[static_cast<std::size_t>(best)]);
                    fs[static_cast<std::size_t>(i)] = eval(xs[static_cast<std::size_t>(i)]);
                }
            }
        }
    }
    return result;
}

// per-axis Gaussian from a 3-point log-weight profile; falls back to the
// discrete moments when the profile is not concave
struct AxisGaussian {
    double mean = 0.0;
    double sd = 0.0;
};

AxisGaussian axis_gaussian(const std::array<double, 3>& values, const std::array<double, 3>& weights) {
    AxisGaussian g;
    const double wsum = weights[0] + weights[1] + weights[2];
    double mean_d = 0.0;
    for (int i = 0; i < 3; ++i) mean_d += weights[static_cast<std::size_t>(i)] * values[static_cast<std::size_t>(i)];
    mean_d /= wsum;
    double var_d = 0.0;
    for (int i = 0; i < 3; ++i) {
        const double d = values[static_cast<std::size_t>(i)] - mean_d;
        var_d += weights[static_cast<std::size_t>(i)] * d * d;
    }
    var_d /= wsum;

    const double delta = 0.5 * (values[2] - values[0]);
    const double tiny = 1e-12;
    if (weights[0] > tiny && weights[1] > tiny && weights[2] > tiny && delta > 0.0) {
        const double l0 = std::log(weights[0]);
        const double l1 = std::log(weights[1]);
        const double l2 = std::log(weights[2]);
        const double curvature = l0 - 2.0 * l1 + l2;
        if (curvature < -1e-10) {
            const double s2 = -delta * delta / curvature;
            double shift = s2 * (l2 - l0) / (2.0 * delta);
            shift = std::clamp(shift, -delta, delta);
            g.mean = values[1] + shift;
            g.sd = std::sqrt(s2);
            return g;
        }
    }
    g.mean = mean_d;
    g.sd = std::sqrt(std::max(var_d, 1e-12));
    return g;
}

HyperSummary lognormal_summary(double mean_log, double sd_log) {
    HyperSummary s;
    s.mean = std::exp(mean_log + 0.5 * sd_log * sd_log);
    s.sd = s.mean * std::sqrt(std::expm1(sd_log * sd_log));
    s.q025 = std::exp(mean_log - 1.959963984540054 * sd_log);
    s.q975 = std::exp(mean_log + 1.959963984540054 * sd_log);
    return s;
}

HyperSummary normal_summary(double mean, double sd) {
    HyperSummary s;
    s.mean = mean;
    s.sd = sd;
    s.q025 = mean - 1.959963984540054 * sd;
    s.q975 = mean + 1.959963984540054 * sd;
    return s;
}

using SpMatRow = Eigen::SparseMatrix<double, Eigen::RowMajor>;

std::vector<std::pair<int, double>> target_row(const SpMatRow& proj, int row, int mu_index) {
    std::vector<std::pair<int, double>> out;
    for (SpMatRow::InnerIterator it(proj, row); it; ++it)
        out.emplace_back(static_cast<int>(it.col()), it.value());
    out.emplace_back(mu_index, 1.0);
    return out;
}

}  // namespace

const HyperSummary* FitResult::find(const std::string& name) const {
    for (const auto& [n, s] : hyper)
        if (n == name) return &s;
    if (name == "theta_micro") return &theta_micro;
    if (name == "mu") return &mu;
    if (name == "alpha") return &alpha;
    return nullptr;
}

LatentGaussianApprox find_mode(const AssembledModel& model, const Eigen::VectorXd& zeta,
                               const Eigen::VectorXd* warm_start, const FitControls& controls) {
    Engine engine(model, controls);
    return engine.find_mode(zeta, warm_start);
}

double log_posterior_hyper(const AssembledModel& model, const Eigen::VectorXd& zeta,
                           const FitControls& controls) {
    Engine engine(model, controls);
    return engine.log_posterior(zeta);
}

double joint_log_density(const AssembledModel& model, const Eigen::VectorXd& latent,
                         const Eigen::VectorXd& zeta) {
    Engine engine(model, FitControls{});
    const HyperView hv = model.hyper_view(zeta);
    double q_logdet_half = 0.0;
    const SpMat& q = engine.field_precision(hv, &q_logdet_half);
    const double p_int = model.intercept_precision();
    const double d = static_cast<double>(model.latent_dim());
    return engine.objective(latent, hv, q) + q_logdet_half + std::log(p_int) -
           0.5 * d * 1.8378770664093453;
}

Eigen::VectorXd joint_gradient(const AssembledModel& model, const Eigen::VectorXd& latent,
                               const Eigen::VectorXd& zeta) {
    Engine engine(model, FitControls{});
    const HyperView hv = model.hyper_view(zeta);
    const SpMat& q = engine.field_precision(hv);
    return engine.gradient(latent, hv, q);
}

namespace {

Eigen::VectorXd initial_zeta(const AssembledModel& model) {
    double value_sd = 1.0;
    double count = 0.0;
    double mean = 0.0, m2 = 0.0;
    for (const LikBlock& block : model.blocks) {
        if (block.family != Family::Gaussian) continue;
        for (int i = 0; i < block.rows(); ++i) {
            count += 1.0;
            const double d = block.y[i] - mean;
            mean += d / count;
            m2 += d * (block.y[i] - mean);
        }
    }
    if (count > 1.0) value_sd = std::sqrt(std::max(m2 / (count - 1.0), 1e-8));

    Eigen::VectorXd zeta(model.layout.size());
    for (int i = 0; i < model.layout.size(); ++i) {
        switch (model.layout.axes[static_cast<std::size_t>(i)]) {
            case Hyper::LogTauS:
            case Hyper::LogTauB: zeta[i] = std::log(10.0); break;
            case Hyper::LogSigma: zeta[i] = std::log(value_sd); break;
            case Hyper::LogRange: zeta[i] = std::log(model.domain.diameter() / 4.0); break;
            case Hyper::Gamma: zeta[i] = 0.0; break;
        }
    }
    return zeta;
}

std::vector<double> grid_axis_sds(const std::function<double(const Eigen::VectorXd&)>& lp,
                                  const Eigen::VectorXd& zstar, double lp_star) {
    const int k = static_cast<int>(zstar.size());
    const double h = 0.1;
    Eigen::MatrixXd hess(k, k);
    std::vector<double> fplus(static_cast<std::size_t>(k)), fminus(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
        Eigen::VectorXd zp = zstar, zm = zstar;
        zp[i] += h;
        zm[i] -= h;
        fplus[static_cast<std::size_t>(i)] = lp(zp);
        fminus[static_cast<std::size_t>(i)] = lp(zm);
        hess(i, i) = (fplus[static_cast<std::size_t>(i)] - 2.0 * lp_star +
                      fminus[static_cast<std::size_t>(i)]) /
                     (h * h);
    }
    for (int i = 0; i < k; ++i) {
        for (int j = i + 1; j < k; ++j) {
            Eigen::VectorXd zpp = zstar, zpm = zstar, zmp = zstar, zmm = zstar;
            zpp[i] += h; zpp[j] += h;
            zpm[i] += h; zpm[j] -= h;
            zmp[i] -= h; zmp[j] += h;
            zmm[i] -= h; zmm[j] -= h;
            hess(i, j) = hess(j, i) = (lp(zpp) - lp(zpm) - lp(zmp) + lp(zmm)) / (4.0 * h * h);
        }
    }

    std::vector<double> sds(static_cast<std::size_t>(k), 0.3);
    Eigen::MatrixXd cov = -hess;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(cov);
    bool spd = ldlt.info() == Eigen::Success && (ldlt.vectorD().array() > 0.0).all();
    if (spd) {
        const Eigen::MatrixXd inv = ldlt.solve(Eigen::MatrixXd::Identity(k, k));
        for (int i = 0; i < k; ++i) {
            const double v = inv(i, i);
            if (v > 0.0 && std::isfinite(v)) sds[static_cast<std::size_t>(i)] = std::sqrt(v);
        }
    } else {
        for (int i = 0; i < k; ++i)
            if (hess(i, i) < -1e-8) sds[static_cast<std::size_t>(i)] = std::sqrt(-1.0 / hess(i, i));
    }
    for (double& s : sds) s = std::clamp(s, 0.02, 2.0);
    return sds;
}

}  // namespace

FitResult fit(const AssembledModel& model, const FitControls& controls) {
    const auto t_start = std::chrono::steady_clock::now();
    const int k = model.layout.size();

    FitResult result;
    result.variant = model.spec.variant;
    result.layout = model.layout;

    Engine engine(model, controls);
    int n_eval = 0;
    auto lp = [&](const Eigen::VectorXd& z) {
        ++n_eval;
        try {
            return engine.log_posterior(z);
        } catch (const NumericalError&) {
            return -kInf;
        }
    };

    // 1. locate the posterior mode over hyperparameters
    const Eigen::VectorXd z0 = initial_zeta(model);
    NmResult nm = nelder_mead_max([&](const Eigen::VectorXd& z) { return lp(z); }, z0,
                                  controls.outer_simplex_step, controls.outer_max_eval,
                                  controls.outer_stall_limit);
    result.map_zeta = nm.best_x;
    result.diagnostics.converged = !nm.stalled && std::isfinite(nm.best_f);
    if (nm.stalled) result.diagnostics.message = "hyperparameter search stalled; best-so-far result";
    if (!std::isfinite(nm.best_f))
        throw NumericalError("fit: posterior is degenerate at every evaluated point");

    // 2. per-axis grid steps from the finite-difference Hessian
    const std::vector<double> sds = grid_axis_sds(lp, nm.best_x, lp(nm.best_x));

    // 3. centered grid, 3 points per axis
    const int n_grid = static_cast<int>(std::pow(3.0, k));
    std::vector<Eigen::VectorXd> zetas(static_cast<std::size_t>(n_grid));
    std::vector<std::array<int, 8>> offs(static_cast<std::size_t>(n_grid));
    for (int g = 0; g < n_grid; ++g) {
        Eigen::VectorXd z = nm.best_x;
        int rem = g;
        for (int a = 0; a < k; ++a) {
            const int o = rem % 3 - 1;  // -1, 0, +1
            rem /= 3;
            offs[static_cast<std::size_t>(g)][static_cast<std::size_t>(a)] = o;
            z[a] += controls.grid_step_sd * sds[static_cast<std::size_t>(a)] * o;
        }
        zetas[static_cast<std::size_t>(g)] = z;
    }

    struct GridEval {
        double log_post = -kInf;
        Eigen::VectorXd mode;
        Eigen::VectorXd node_var;
        double mu_var = 0.0, alpha_var = 0.0;
        bool converged = false;
        bool ok = false;
    };
    std::vector<GridEval> evals(static_cast<std::size_t>(n_grid));

    auto eval_grid_point = [&](Engine& eng, int g) {
        GridEval& e = evals[static_cast<std::size_t>(g)];
        try {
            LatentGaussianApprox approx;
            e.log_post = eng.log_posterior(zetas[static_cast<std::size_t>(g)], &approx);
            if (!std::isfinite(e.log_post)) return;
            const SelectedInverse sel(eng.factor());
            e.node_var.resize(model.m);
            for (int i = 0; i < model.m; ++i) e.node_var[i] = sel.diag(i);
            e.mu_var = sel.diag(model.m);
            e.alpha_var = sel.diag(model.m + 1);
            e.mode = std::move(approx.mode);
            e.converged = approx.converged;
            e.ok = true;
        } catch (const NumericalError&) {
            e.ok = false;
            e.log_post = -kInf;
        }
    };

    if (controls.jobs > 1) {
        const int workers = std::min(controls.jobs, n_grid);
        parallel_for(workers, workers, [&](int w) {
            Engine local(model, controls);
            for (int g = w; g < n_grid; g += workers) eval_grid_point(local, g);
        });
        n_eval += n_grid;
    } else {
        for (int g = 0; g < n_grid; ++g) {
            eval_grid_point(engine, g);
            ++n_eval;
        }
    }

    // 4. weights, pruning, normalization
    double lp_max = -kInf;
    for (const auto& e : evals) lp_max = std::max(lp_max, e.log_post);
    if (!std::isfinite(lp_max)) throw NumericalError("fit: no usable grid point");
    double wsum = 0.0;
    std::vector<int> kept;
    for (int g = 0; g < n_grid; ++g) {
        auto& e = evals[static_cast<std::size_t>(g)];
        if (!e.ok) continue;
        const double w = std::exp(e.log_post - lp_max);
        if (w > controls.grid_prune) {
            kept.push_back(g);
            wsum += w;
        }
    }
    result.diagnostics.inner_converged = true;
    for (int g : kept)
        if (!evals[static_cast<std::size_t>(g)].converged) result.diagnostics.inner_converged = false;

    result.grid.reserve(kept.size());
    result.grid_modes.reserve(kept.size());
    for (int g : kept) {
        GridPoint gp;
        gp.zeta = zetas[static_cast<std::size_t>(g)];
        gp.log_post = evals[static_cast<std::size_t>(g)].log_post;
        gp.weight = std::exp(evals[static_cast<std::size_t>(g)].log_post - lp_max) / wsum;
        result.grid.push_back(std::move(gp));
        result.grid_modes.push_back(evals[static_cast<std::size_t>(g)].mode);
    }

    // 5. latent mixtures (law of total mean and variance)
    result.node_mean = Eigen::VectorXd::Zero(model.m);
    Eigen::VectorXd node_second = Eigen::VectorXd::Zero(model.m);
    double mu_mean = 0.0, mu_second = 0.0, al_mean = 0.0, al_second = 0.0;
    for (std::size_t gi = 0; gi < kept.size(); ++gi) {
        const GridEval& e = evals[static_cast<std::size_t>(kept[gi])];
        const double w = result.grid[gi].weight;
        result.node_mean += w * e.mode.head(model.m);
        node_second +=
            w * (e.node_var + e.mode.head(model.m).cwiseProduct(e.mode.head(model.m)));
        mu_mean += w * e.mode[model.m];
        mu_second += w * (e.mu_var + e.mode[model.m] * e.mode[model.m]);
        al_mean += w * e.mode[model.m + 1];
        al_second += w * (e.alpha_var + e.mode[model.m + 1] * e.mode[model.m + 1]);
    }
    result.node_sd =
        (node_second - result.node_mean.cwiseProduct(result.node_mean)).cwiseMax(0.0).cwiseSqrt();
    result.mu = normal_summary(mu_mean, std::sqrt(std::max(mu_second - mu_mean * mu_mean, 0.0)));
    result.alpha = normal_summary(al_mean, std::sqrt(std::max(al_second - al_mean * al_mean, 0.0)));

    // 6. hyperparameter summaries: per-axis quadratic interpolation of the
    //    grid profile
    std::vector<AxisGaussian> axis(static_cast<std::size_t>(k));
    for (int a = 0; a < k; ++a) {
        std::array<double, 3> values{}, weights{};
        const double delta = controls.grid_step_sd * sds[static_cast<std::size_t>(a)];
        for (int o = 0; o < 3; ++o) values[static_cast<std::size_t>(o)] = nm.best_x[a] + (o - 1) * delta;
        for (std::size_t gi = 0; gi < kept.size(); ++gi) {
            const int o = offs[static_cast<std::size_t>(kept[gi])][static_cast<std::size_t>(a)] + 1;
            weights[static_cast<std::size_t>(o)] += result.grid[gi].weight;
        }
        axis[static_cast<std::size_t>(a)] = axis_gaussian(values, weights);
    }

    const std::vector<std::string> names = model.layout.names();
    for (int a = 0; a < k; ++a) {
        const AxisGaussian& g = axis[static_cast<std::size_t>(a)];
        const bool is_gamma = model.layout.axes[static_cast<std::size_t>(a)] == Hyper::Gamma;
        result.hyper.emplace_back(names[static_cast<std::size_t>(a)],
                                  is_gamma ? normal_summary(g.mean, g.sd)
                                           : lognormal_summary(g.mean, g.sd));
    }

    // 7. theta = sigma^2 kappa^2 summarized from (log sigma, log rho) samples,
    //    with the grid correlation between the two axes
    const int ia = model.layout.index_of(Hyper::LogSigma);
    const int ib = model.layout.index_of(Hyper::LogRange);
    {
        double ma = 0.0, mb = 0.0, vaa = 0.0, vbb = 0.0, vab = 0.0;
        for (std::size_t gi = 0; gi < kept.size(); ++gi) {
            const double w = result.grid[gi].weight;
            const double za = result.grid[gi].zeta[ia];
            const double zb = result.grid[gi].zeta[ib];
            ma += w * za;
            mb += w * zb;
        }
        for (std::size_t gi = 0; gi < kept.size(); ++gi) {
            const double w = result.grid[gi].weight;
            const double da = result.grid[gi].zeta[ia] - ma;
            const double db = result.grid[gi].zeta[ib] - mb;
            vaa += w * da * da;
            vbb += w * db * db;
            vab += w * da * db;
        }
        double corr = 0.0;
        if (vaa > 1e-14 && vbb > 1e-14) corr = std::clamp(vab / std::sqrt(vaa * vbb), -0.99, 0.99);

        const AxisGaussian& gs = axis[static_cast<std::size_t>(ia)];
        const AxisGaussian& gr = axis[static_cast<std::size_t>(ib)];
        Rng rng(controls.summary_seed);
        const int n_draw = 20000;
        std::vector<double> draws(static_cast<std::size_t>(n_draw));
        const double log8nu = std::log(8.0 * model.spec.nu);
        for (int s = 0; s < n_draw; ++s) {
            const double u1 = rng.normal();
            const double u2 = rng.normal();
            const double zs = gs.mean + gs.sd * u1;
            const double zr = gr.mean + gr.sd * (corr * u1 + std::sqrt(1.0 - corr * corr) * u2);
            draws[static_cast<std::size_t>(s)] = std::exp(log8nu + 2.0 * zs - 2.0 * zr);
        }
        double dm = 0.0;
        for (double v : draws) dm += v;
        dm /= n_draw;
        double dv = 0.0;
        for (double v : draws) dv += (v - dm) * (v - dm);
        dv /= (n_draw - 1);
        result.theta_micro.mean = dm;
        result.theta_micro.sd = std::sqrt(dv);
        result.theta_micro.q025 = quantile_type7(draws, 0.025);
        result.theta_micro.q975 = quantile_type7(draws, 0.975);
    }

    result.diagnostics.n_eval = n_eval;
    result.diagnostics.runtime_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return result;
}

namespace {

struct TargetPredictions {
    Eigen::VectorXd mean, sd;
    Eigen::VectorXd exceedance;  // empty unless requested
    Eigen::VectorXd median;      // empty unless requested
};

TargetPredictions mixture_predictions(const FitResult& fit, const AssembledModel& model,
                                      std::span<const Point2> targets,
                                      const std::optional<double>& threshold, bool want_median,
                                      const FitControls& controls) {
    if (fit.grid.empty()) throw ConfigError("predict: fit result has an empty hyper grid");
    const SpMatRow proj_rows =
        project_points(*model.spec.mesh, targets, ProjectionKind::PredictionGrid).A;
    const int n_t = static_cast<int>(targets.size());
    const int n_g = static_cast<int>(fit.grid.size());

    Eigen::MatrixXd means(n_t, n_g);
    Eigen::MatrixXd vars(n_t, n_g);

    const bool have_modes = static_cast<int>(fit.grid_modes.size()) == n_g;

    const int workers = std::max(1, std::min(controls.jobs, n_g));
    parallel_for(workers, workers, [&](int w) {
        Engine eng(model, controls);
        for (int g = w; g < n_g; g += workers) {
            const Eigen::VectorXd* warm =
                have_modes ? &fit.grid_modes[static_cast<std::size_t>(g)] : nullptr;
            const LatentGaussianApprox approx =
                eng.find_mode(fit.grid[static_cast<std::size_t>(g)].zeta, warm);
            const SelectedInverse sel(eng.factor());
            for (int t = 0; t < n_t; ++t) {
                const auto row = target_row(proj.A, t, model.m);
                double mean = 0.0;
                for (const auto& [idx, wv] : row) mean += wv * approx.mode[idx];
                means(t, g) = mean;
                vars(t, g) = std::max(sel.quad_form(row), 0.0);
            }
        }
    });

    TargetPredictions out;
    out.mean = Eigen::VectorXd::Zero(n_t);
    Eigen::VectorXd second = Eigen::VectorXd::Zero(n_t);
    for (int g = 0; g < n_g; ++g) {
        const double w = fit.grid[static_cast<std::size_t>(g)].weight;
        out.mean += w * means.col(g);
        second += w * (vars.col(g) + means.col(g).cwiseProduct(means.col(g)));
    }
    out.sd = (second - out.mean.cwiseProduct(out.mean)).cwiseMax(0.0).cwiseSqrt();

    if (threshold) {
        out.exceedance = Eigen::VectorXd::Zero(n_t);
        for (int g = 0; g < n_g; ++g) {
            const double w = fit.grid[static_cast<std::size_t>(g)].weight;
            for (int t = 0; t < n_t; ++t) {
                const double sd = std::sqrt(std::max(vars(t, g), 1e-300));
                out.exceedance[t] += w * normal_upper_tail((*threshold - means(t, g)) / sd);
            }
        }
    }

    if (want_median) {
        out.median = Eigen::VectorXd::Zero(n_t);
        for (int t = 0; t < n_t; ++t) {
            // bisect the mixture CDF for the exact predictive median
            double lo = means(t, 0), hi = means(t, 0);
            for (int g = 0; g < n_g; ++g) {
                const double sd = std::sqrt(std::max(vars(t, g), 1e-300));
                lo = std::min(lo, means(t, g) - 10.0 * sd);
                hi = std::max(hi, means(t, g) + 10.0 * sd);
            }
            for (int it = 0; it < 80; ++it) {
                const double mid = 0.5 * (lo + hi);
                double cdf = 0.0;
                for (int g = 0; g < n_g; ++g) {
                    const double sd = std::sqrt(std::max(vars(t, g), 1e-300));
                    cdf += fit.grid[static_cast<std::size_t>(g)].weight *
                           (1.0 - normal_upper_tail((mid - means(t, g)) / sd));
                }
                (cdf < 0.5 ? lo : hi) = mid;
            }
            out.median[t] = 0.5 * (lo + hi);
        }
    }
    return out;
}

}  // namespace

Prediction predict(const FitResult& fit, const AssembledModel& model,
                   std::span<const Point2> targets, const FitControls& controls) {
    const TargetPredictions p = mixture_predictions(fit, model, targets, std::nullopt, false, controls);
    return {p.mean, p.sd};
}

Eigen::VectorXd exceedance_prob(const FitResult& fit, const AssembledModel& model,
                                std::span<const Point2> targets, double threshold,
                                const FitControls& controls) {
    return mixture_predictions(fit, model, targets, threshold, false, controls).exceedance;
}

}  // namespace psfuse
