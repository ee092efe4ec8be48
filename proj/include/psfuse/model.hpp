#pragma once

#include <memory>
#include <string>
#include <vector>

#include "psfuse/matern.hpp"
#include "psfuse/mesh.hpp"
#include "psfuse/simulate.hpp"

namespace psfuse {

enum class Variant { PSmelding, Melding, PSgeo };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

/// Prior on a positive scale parameter: either a penalized-complexity pair
/// (a tail probability statement, rate calibrated by root finding) or a
/// log-normal.
struct ScalePrior {
    enum class Kind { Pc, LogNormal };
    Kind kind = Kind::Pc;
    double u = 1.0;      // pc: tail threshold
    double tail = 0.01;  // pc: tail probability
    double mean_log = 0.0, sd_log = 1.0;
};

struct Priors {
    ScalePrior sigma{ScalePrior::Kind::Pc, 2.5, 0.01};   // P(sigma > u) = tail
    ScalePrior range{ScalePrior::Kind::Pc, 0.1, 0.1};    // P(rho < u) = tail
    double tau_s_shape = 1.0, tau_s_rate = 5e-5;         // gamma prior on precision
    double tau_B_shape = 1.0, tau_B_rate = 5e-5;
    double tau_gamma = 1.0;     // sd of the N(0, tau_gamma^2) prior on gamma
    double intercept_sd = 31.6;

    void validate() const;
};

/// Weakly informative defaults scaled to the data: sigma tail at 2.5 sample
/// sds, range tail at a tenth of the domain diameter.
Priors default_priors_for(const Rect& domain, double value_sd);

/// Rate of the exponential PC prior on sigma solving P(sigma > u) = tail.
double pc_sigma_rate(double u, double tail);
/// Rate lambda of the PC range prior (1/rho ~ Exp(lambda)) solving P(rho < u) = tail.
double pc_range_rate(double u, double tail);

double log_prior_log_sigma(double log_sigma, const ScalePrior& prior);
double log_prior_log_range(double log_range, const ScalePrior& prior);
double log_prior_log_precision(double log_tau, double shape, double rate);

// prior samplers (used for tail-calibration checks)
double sample_pc_sigma(const ScalePrior& prior, double unit_uniform);
double sample_pc_range(const ScalePrior& prior, double unit_uniform);

struct ModelSpec {
    Variant variant = Variant::PSmelding;
    Priors priors;
    std::shared_ptr<const Mesh> mesh;
    double nu = 1.0;
};

/// Hyperparameter axes, filtered by variant. Scale axes live on the log
/// scale; gamma is untransformed.
enum class Hyper { LogTauS, LogTauB, LogSigma, LogRange, Gamma };

struct HyperLayout {
    std::vector<Hyper> axes;

    static HyperLayout for_variant(Variant v);
    int size() const { return static_cast<int>(axes.size()); }
    int index_of(Hyper h) const;
    bool has(Hyper h) const { return index_of(h) >= 0; }
    std::vector<std::string> names() const;
};

/// Natural-scale view of one hyperparameter vector. Absent axes take
/// neutral values (gamma 0; precisions 1).
struct HyperView {
    double tau_s = 1.0, tau_B = 1.0, sigma = 1.0, rho = 1.0, gamma = 0.0;
};

enum class Family { Gaussian, PoissonPseudo };
enum class NoisePrec { TauS, TauB };

/// One conditionally independent likelihood block. The linear predictor for
/// row i is scale * (A_field x)_i + mu_coef * mu + alpha_coef * alpha, where
/// scale is gamma for the point-process block and 1 otherwise.
struct LikBlock {
    Family family = Family::Gaussian;
    std::string name;
    SpMat A_field;  // n_rows x m
    double mu_coef = 0.0, alpha_coef = 0.0;
    bool scale_by_gamma = false;
    NoisePrec noise = NoisePrec::TauS;  // gaussian blocks
    Eigen::VectorXd y;
    Eigen::VectorXd exposure;  // poisson blocks; zero rows carry exact sum terms

    int rows() const { return static_cast<int>(y.size()); }
};

/// Joint latent-Gaussian model: latent vector [x (m field weights), mu, alpha]
/// plus likelihood blocks and the hyperparameter layout.
struct AssembledModel {
    ModelSpec spec;
    SpdeOperator spde;
    std::vector<LikBlock> blocks;
    int m = 0;
    HyperLayout layout;
    Rect domain;
    std::vector<std::string> warnings;

    int latent_dim() const { return m + 2; }
    double intercept_precision() const {
        return 1.0 / (spec.priors.intercept_sd * spec.priors.intercept_sd);
    }
    HyperView hyper_view(const Eigen::VectorXd& zeta) const;
    MaternParams field_params(const Eigen::VectorXd& zeta) const;
};

AssembledModel assemble(const ModelSpec& spec, const Dataset& data);

double log_prior_hyper(const Eigen::VectorXd& zeta, const ModelSpec& spec);
inline double log_prior_hyper(const Eigen::VectorXd& zeta, const AssembledModel& model) {
    return log_prior_hyper(zeta, model.spec);
}

/// Linear predictor of one block at the given latent vector.
Eigen::VectorXd block_predictor(const LikBlock& block, const AssembledModel& model,
                                const Eigen::VectorXd& latent, const HyperView& hv);

/// Per-block log likelihood. Gaussian blocks include their normalizing
/// constants; the Poisson pseudo block is sum_i (y_i eta_i - a_i exp(eta_i)).
std::vector<double> log_likelihood_blocks(const AssembledModel& model,
                                          const Eigen::VectorXd& latent,
                                          const Eigen::VectorXd& zeta);

double total_log_likelihood(const AssembledModel& model, const Eigen::VectorXd& latent,
                            const Eigen::VectorXd& zeta);

}  // namespace psfuse
