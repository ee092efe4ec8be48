#include "psfuse/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <limits>

#include "psfuse/errors.hpp"

namespace psfuse {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

double normal_logpdf(double x, double mean, double sd) {
    const double z = (x - mean) / sd;
    return -0.5 * kLog2Pi - std::log(sd) - 0.5 * z * z;
}

/// Find the root of a decreasing function on (0, inf) by bracketing + bisection.
double solve_decreasing(const std::function<double(double)>& f) {
    double lo = 1e-12, hi = 1.0;
    while (f(hi) > 0.0 && hi < 1e12) hi *= 2.0;
    while (f(lo) < 0.0 && lo > 1e-300) lo *= 0.5;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::PSmelding: return "psmelding";
        case Variant::Melding: return "melding";
        case Variant::PSgeo: return "psgeo";
    }
    return "?";
}

Variant variant_from_name(const std::string& name) {
    std::string n = name;
    std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
    if (n == "psmelding") return Variant::PSmelding;
    if (n == "melding") return Variant::Melding;
    if (n == "psgeo") return Variant::PSgeo;
    throw ConfigError("unknown model variant '" + name + "' (psmelding|melding|psgeo)");
}

void Priors::validate() const {
    auto check_scale = [](const ScalePrior& p, const char* what) {
        if (p.kind == ScalePrior::Kind::Pc) {
            if (!(p.u > 0.0) || !(p.tail > 0.0) || !(p.tail < 1.0))
                throw ConfigError(std::string(what) + ": pc prior needs u > 0 and tail in (0,1)");
        } else if (!(p.sd_log > 0.0)) {
            throw ConfigError(std::string(what) + ": log-normal prior needs sd_log > 0");
        }
    };
    check_scale(sigma, "sigma prior");
    check_scale(range, "range prior");
    if (!(tau_s_shape > 0.0) || !(tau_s_rate > 0.0) || !(tau_B_shape > 0.0) || !(tau_B_rate > 0.0))
        throw ConfigError("precision priors need positive shape and rate");
    if (!(tau_gamma > 0.0)) throw ConfigError("tau_gamma must be > 0");
    if (!(intercept_sd > 0.0)) throw ConfigError("intercept_sd must be > 0");
}

Priors default_priors_for(const Rect& domain, double value_sd) {
    Priors p;
    const double sd = (std::isfinite(value_sd) && value_sd > 0.0) ? value_sd : 1.0;
    p.sigma = {ScalePrior::Kind::Pc, 2.5 * sd, 0.01};
    p.range = {ScalePrior::Kind::Pc, domain.diameter() / 10.0, 0.1};
    return p;
}

double pc_sigma_rate(double u, double tail) {
    return solve_decreasing([&](double lam) { return std::exp(-lam * u) - tail; });
}

double pc_range_rate(double u, double tail) {
    return solve_decreasing([&](double lam) { return std::exp(-lam / u) - tail; });
}

double log_prior_log_sigma(double log_sigma, const ScalePrior& prior) {
    if (prior.kind == ScalePrior::Kind::LogNormal)
        return normal_logpdf(log_sigma, prior.mean_log, prior.sd_log);
    const double lam = pc_sigma_rate(prior.u, prior.tail);
    // sigma ~ Exp(lam), with the log-scale Jacobian
    return std::log(lam) - lam * std::exp(log_sigma) + log_sigma;
}

double log_prior_log_range(double log_range, const ScalePrior& prior) {
    if (prior.kind == ScalePrior::Kind::LogNormal)
        return normal_logpdf(log_range, prior.mean_log, prior.sd_log);
    const double lam = pc_range_rate(prior.u, prior.tail);
    // 1/rho ~ Exp(lam): pi(rho) = lam rho^-2 exp(-lam/rho), log-scale Jacobian rho
    return std::log(lam) - log_range - lam * std::exp(-log_range);
}

double log_prior_log_precision(double log_tau, double shape, double rate) {
    return shape * std::log(rate) - std::lgamma(shape) + shape * log_tau -
           rate * std::exp(log_tau);
}

double sample_pc_sigma(const ScalePrior& prior, double unit_uniform) {
    const double lam = pc_sigma_rate(prior.u, prior.tail);
    return -std::log1p(-unit_uniform) / lam;
}

double sample_pc_range(const ScalePrior& prior, double unit_uniform) {
    const double lam = pc_range_rate(prior.u, prior.tail);
    return lam / (-std::log1p(-unit_uniform));
}

HyperLayout HyperLayout::for_variant(Variant v) {
    HyperLayout layout;
    switch (v) {
        case Variant::PSmelding:
            layout.axes = {Hyper::LogTauS, Hyper::LogTauB, Hyper::LogSigma, Hyper::LogRange,
                           Hyper::Gamma};
            break;
        case Variant::Melding:
            layout.axes = {Hyper::LogTauS, Hyper::LogTauB, Hyper::LogSigma, Hyper::LogRange};
            break;
        case Variant::PSgeo:
            layout.axes = {Hyper::LogTauS, Hyper::LogSigma, Hyper::LogRange, Hyper::Gamma};
            break;
    }
    return layout;
}

int HyperLayout::index_of(Hyper h) const {
    for (std::size_t i = 0; i < axes.size(); ++i)
        if (axes[i] == h) return static_cast<int>(i);
    return -1;
}

std::vector<std::string> HyperLayout::names() const {
    std::vector<std::string> out;
    for (Hyper h : axes) {
        switch (h) {
            case Hyper::LogTauS: out.push_back("tau_s"); break;
            case Hyper::LogTauB: out.push_back("tau_B"); break;
            case Hyper::LogSigma: out.push_back("sigma"); break;
            case Hyper::LogRange: out.push_back("rho"); break;
            case Hyper::Gamma: out.push_back("gamma"); break;
        }
    }
    return out;
}

HyperView AssembledModel::hyper_view(const Eigen::VectorXd& zeta) const {
    if (zeta.size() != layout.size())
        throw ConfigError("hyperparameter vector has wrong length for this variant");
    HyperView hv;
    auto get = [&](Hyper h, double fallback, bool exp_scale) {
        const int i = layout.index_of(h);
        if (i < 0) return fallback;
        return exp_scale ? std::exp(zeta[i]) : zeta[i];
    };
    hv.tau_s = get(Hyper::LogTauS, 1.0, true);
    hv.tau_B = get(Hyper::LogTauB, 1.0, true);
    hv.sigma = get(Hyper::LogSigma, 1.0, true);
    hv.rho = get(Hyper::LogRange, 1.0, true);
    hv.gamma = get(Hyper::Gamma, 0.0, false);
    return hv;
}

MaternParams AssembledModel::field_params(const Eigen::VectorXd& zeta) const {
    const HyperView hv = hyper_view(zeta);
    return MaternParams::from_range(hv.sigma, hv.rho, spec.nu);
}

AssembledModel assemble(const ModelSpec& spec, const Dataset& data) {
    if (!spec.mesh) throw ConfigError("assemble: model spec has no mesh");
    if (spec.nu != 1.0) throw ConfigError("assemble: only nu = 1 is supported");
    spec.priors.validate();

    const Mesh& mesh = *spec.mesh;
    const bool wants_areas = spec.variant != Variant::PSgeo;
    const bool wants_lgcp = spec.variant != Variant::Melding;
    const int n_areas = wants_areas ? data.n_areas() : 0;

    if (data.n_points() == 0 && n_areas == 0)
        throw ConfigError("assemble: " + variant_name(spec.variant) +
                          " model with no point and no areal observations");
    if (spec.variant == Variant::PSgeo && data.n_points() == 0)
        throw ConfigError("assemble: psgeo model requires point observations");

    AssembledModel model;
    model.spec = spec;
    model.m = mesh.n_nodes();
    model.layout = HyperLayout::for_variant(spec.variant);
    model.domain = mesh.domain_bbox;
    model.spde = SpdeOperator(assemble_fem(mesh));

    if (spec.variant == Variant::PSgeo && data.n_areas() > 0)
        model.warnings.push_back("psgeo model ignores areal observations");

    ProjectionMatrix point_proj;
    if (data.n_points() > 0) point_proj = project_points(mesh, data.point_locs);

    if (data.n_points() > 0) {
        LikBlock block;
        block.family = Family::Gaussian;
        block.name = "points";
        block.A_field = point_proj.A;
        block.mu_coef = 1.0;
        block.noise = NoisePrec::TauS;
        block.y = data.point_values;
        model.blocks.push_back(std::move(block));
    }

    if (n_areas > 0) {
        ProjectionMatrix area_proj = project_areas(mesh, data.areas);
        for (const auto& w : area_proj.warnings) model.warnings.push_back(w);
        LikBlock block;
        block.family = Family::Gaussian;
        block.name = "areas";
        block.A_field = area_proj.A;
        block.mu_coef = 1.0;
        block.noise = NoisePrec::TauB;
        block.y = data.area_values;
        model.blocks.push_back(std::move(block));
    }

    if (wants_lgcp) {
        const DualWeights dual = dual_weights(mesh, mesh.domain_bbox);
        const int n_pts = data.n_points();
        LikBlock block;
        block.family = Family::PoissonPseudo;
        block.name = "lgcp";
        block.alpha_coef = 1.0;
        block.scale_by_gamma = true;

        // rows: one per dual node (y = 0, exposure = cell area), then one per
        // observed location (y = 1, exposure = 0: the exact sum term)
        SpMat a(model.m + n_pts, model.m);
        std::vector<Eigen::Triplet<double>> trips;
        trips.reserve(static_cast<std::size_t>(model.m) + 3u * static_cast<std::size_t>(n_pts));
        for (int i = 0; i < model.m; ++i) trips.emplace_back(i, i, 1.0);
        if (n_pts > 0) {
            for (int k = 0; k < point_proj.A.outerSize(); ++k) {
                for (SpMat::InnerIterator it(point_proj.A, k); it; ++it)
                    trips.emplace_back(model.m + static_cast<int>(it.row()),
                                       static_cast<int>(it.col()), it.value());
            }
        }
        a.setFromTriplets(trips.begin(), trips.end());
        block.A_field = std::move(a);

        block.y = Eigen::VectorXd::Zero(model.m + n_pts);
        block.y.tail(n_pts).setOnes();
        block.exposure = Eigen::VectorXd::Zero(model.m + n_pts);
        block.exposure.head(model.m) = dual.weights;
        model.blocks.push_back(std::move(block));
    }

    return model;
}

double log_prior_hyper(const Eigen::VectorXd& zeta, const ModelSpec& spec) {
    const HyperLayout layout = HyperLayout::for_variant(spec.variant);
    if (zeta.size() != layout.size())
        throw ConfigError("log_prior_hyper: wrong hyperparameter dimension");
    if (!zeta.allFinite()) return -std::numeric_limits<double>::infinity();

    double lp = 0.0;
    for (int i = 0; i < layout.size(); ++i) {
        switch (layout.axes[static_cast<std::size_t>(i)]) {
            case Hyper::LogTauS:
                lp += log_prior_log_precision(zeta[i], spec.priors.tau_s_shape,
                                              spec.priors.tau_s_rate);
                break;
            case Hyper::LogTauB:
                lp += log_prior_log_precision(zeta[i], spec.priors.tau_B_shape,
                                              spec.priors.tau_B_rate);
                break;
            case Hyper::LogSigma:
                lp += log_prior_log_sigma(zeta[i], spec.priors.sigma);
                break;
            case Hyper::LogRange:
                lp += log_prior_log_range(zeta[i], spec.priors.range);
                break;
            case Hyper::Gamma:
                lp += normal_logpdf(zeta[i], 0.0, spec.priors.tau_gamma);
                break;
        }
    }
    return lp;
}

Eigen::VectorXd block_predictor(const LikBlock& block, const AssembledModel& model,
                                const Eigen::VectorXd& latent, const HyperView& hv) {
    const double scale = block.scale_by_gamma ? hv.gamma : 1.0;
    Eigen::VectorXd eta = scale * (block.A_field * latent.head(model.m));
    if (block.mu_coef != 0.0) eta.array() += block.mu_coef * latent[model.m];
    if (block.alpha_coef != 0.0) eta.array() += block.alpha_coef * latent[model.m + 1];
    return eta;
}

std::vector<double> log_likelihood_blocks(const AssembledModel& model,
                                          const Eigen::VectorXd& latent,
                                          const Eigen::VectorXd& zeta) {
    if (latent.size() != model.latent_dim())
        throw ConfigError("log_likelihood_blocks: latent vector has wrong length");
    const HyperView hv = model.hyper_view(zeta);
    std::vector<double> out;
    out.reserve(model.blocks.size());
    for (const LikBlock& block : model.blocks) {
        const Eigen::VectorXd eta = block_predictor(block, model, latent, hv);
        if (!eta.allFinite())
            throw NumericalError("log_likelihood_blocks: non-finite linear predictor in '" +
                                 block.name + "'");
        double ll = 0.0;
        if (block.family == Family::Gaussian) {
            const double tau = block.noise == NoisePrec::TauS ? hv.tau_s : hv.tau_B;
            const Eigen::VectorXd r = block.y - eta;
            ll = 0.5 * block.rows() * (std::log(tau) - kLog2Pi) - 0.5 * tau * r.squaredNorm();
        } else {
            for (int i = 0; i < block.rows(); ++i) {
                ll += block.y[i] * eta[i];
                if (block.exposure[i] != 0.0) ll -= block.exposure[i] * std::exp(eta[i]);
            }
        }
        out.push_back(ll);
    }
    return out;
}

double total_log_likelihood(const AssembledModel& model, const Eigen::VectorXd& latent,
                            const Eigen::VectorXd& zeta) {
    double total = 0.0;
    for (double v : log_likelihood_blocks(model, latent, zeta)) total += v;
    return total;
}

}  // namespace psfuse
