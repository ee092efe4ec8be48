#include <doctest.h>

#include <Eigen/Dense>
#include <memory>

#include "psfuse/errors.hpp"
#include "psfuse/inference.hpp"
#include "psfuse/parallel.hpp"
#include "psfuse/rng.hpp"
#include "psfuse/simulate.hpp"
#include "support.hpp"

using namespace psfuse;

namespace {

std::shared_ptr<Mesh> tiny_mesh() {
    // 14 x 14 lattice = 196 nodes
    auto mesh = std::make_shared<Mesh>(build_structured_mesh({0, 0, 1, 1}, 0.16, 0.5));
    REQUIRE(mesh->n_nodes() <= 200);
    return mesh;
}

Dataset sim_data(int n_points, int n_areas, double gamma, std::uint64_t seed) {
    ScenarioConfig cfg = table1_scenario(gamma > 0 ? 5 : 2);
    cfg.n_points = n_points;
    cfg.n_areas = n_areas;
    cfg.sim_mesh_edge = 0.05;
    cfg.seed = seed;
    return simulate_scenario(cfg, 0);
}

ModelSpec spec_for(Variant v, std::shared_ptr<Mesh> mesh) {
    ModelSpec spec;
    spec.variant = v;
    spec.mesh = std::move(mesh);
    return spec;
}

Eigen::VectorXd zeta_of(const AssembledModel& model, double tau_s, double tau_B, double sigma,
                        double rho, double gamma) {
    Eigen::VectorXd z(model.layout.size());
    for (int i = 0; i < model.layout.size(); ++i) {
        switch (model.layout.axes[static_cast<std::size_t>(i)]) {
            case Hyper::LogTauS: z[i] = std::log(tau_s); break;
            case Hyper::LogTauB: z[i] = std::log(tau_B); break;
            case Hyper::LogSigma: z[i] = std::log(sigma); break;
            case Hyper::LogRange: z[i] = std::log(rho); break;
            case Hyper::Gamma: z[i] = gamma; break;
        }
    }
    return z;
}

// dense reference pieces for a pure-Gaussian (melding) model
struct DenseGaussianOracle {
    Eigen::MatrixXd design;     // B: n x d
    Eigen::VectorXd response;   // y
    Eigen::VectorXd noise_tau;  // per-row precision
    Eigen::MatrixXd q_full;     // d x d latent prior precision

    Eigen::MatrixXd posterior_precision() const {
        return q_full + design.transpose() * noise_tau.asDiagonal() * design;
    }
    Eigen::VectorXd mode() const {
        return posterior_precision().ldlt().solve(design.transpose() *
                                                  (noise_tau.asDiagonal() * response));
    }
    double marginal_loglik() const {
        const Eigen::MatrixXd cov_y =
            design * q_full.inverse() * design.transpose() +
            Eigen::MatrixXd(noise_tau.cwiseInverse().asDiagonal());
        return oracle::dense_gaussian_logpdf(response, cov_y);
    }
};

DenseGaussianOracle dense_oracle(const AssembledModel& model, const Eigen::VectorXd& zeta) {
    const HyperView hv = model.hyper_view(zeta);
    DenseGaussianOracle o;
    int rows = 0;
    for (const auto& b : model.blocks) rows += b.rows();
    const int d = model.latent_dim();
    o.design = Eigen::MatrixXd::Zero(rows, d);
    o.response.resize(rows);
    o.noise_tau.resize(rows);
    int at = 0;
    for (const auto& b : model.blocks) {
        REQUIRE(b.family == Family::Gaussian);
        const double tau = b.noise == NoisePrec::TauS ? hv.tau_s : hv.tau_B;
        o.design.block(at, 0, b.rows(), model.m) = Eigen::MatrixXd(b.A_field);
        for (int i = 0; i < b.rows(); ++i) {
            o.design(at + i, model.m) = b.mu_coef;
            o.design(at + i, model.m + 1) = b.alpha_coef;
            o.response[at + i] = b.y[i];
            o.noise_tau[at + i] = tau;
        }
        at += b.rows();
    }
    o.q_full = Eigen::MatrixXd::Zero(d, d);
    o.q_full.topLeftCorner(model.m, model.m) =
        Eigen::MatrixXd(model.spde.precision(model.field_params(zeta)));
    o.q_full(model.m, model.m) = model.intercept_precision();
    o.q_full(model.m + 1, model.m + 1) = model.intercept_precision();
    return o;
}

}  // namespace

TEST_CASE("find_mode: gaussian models solve in one step and match the dense mode") {
    auto mesh = tiny_mesh();
    const Dataset data = sim_data(40, 16, 0.0, 21);
    const AssembledModel model = assemble(spec_for(Variant::Melding, mesh), data);
    const Eigen::VectorXd zeta = zeta_of(model, 10, 10, 1.0, 0.25, 0.0);

    const LatentGaussianApprox approx = find_mode(model, zeta);
    CHECK(approx.converged);
    CHECK(approx.iterations <= 1);

    const DenseGaussianOracle oracle_model = dense_oracle(model, zeta);
    const Eigen::VectorXd dense_mode = oracle_model.mode();
    CHECK((approx.mode - dense_mode).cwiseAbs().maxCoeff() < 1e-8);

    SUBCASE("warm start at the answer stays put") {
        const LatentGaussianApprox again = find_mode(model, zeta, &approx.mode);
        CHECK(again.iterations == 0);
        CHECK((again.mode - approx.mode).cwiseAbs().maxCoeff() < 1e-10);
    }

    SUBCASE("gradient vanishes at the mode") {
        const Eigen::VectorXd g = joint_gradient(model, approx.mode, zeta);
        CHECK(g.cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("find_mode: zero observations give the prior mean") {
    auto mesh = tiny_mesh();
    Dataset data = sim_data(5, 4, 0.0, 22);
    // keep the blocks but empty them
    AssembledModel model = assemble(spec_for(Variant::Melding, mesh), data);
    for (auto& b : model.blocks) {
        b.A_field = SpMat(0, model.m);
        b.y = Eigen::VectorXd(0);
        b.exposure = Eigen::VectorXd(0);
    }
    const Eigen::VectorXd zeta = zeta_of(model, 10, 10, 1.0, 0.25, 0.0);
    const LatentGaussianApprox approx = find_mode(model, zeta);
    CHECK(approx.converged);
    CHECK(approx.mode.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("laplace marginal is exact for gaussian models") {
    auto mesh = tiny_mesh();
    const Dataset data = sim_data(30, 9, 0.0, 23);
    const AssembledModel model = assemble(spec_for(Variant::Melding, mesh), data);

    for (double rho : {0.2, 0.4}) {
        for (double tau : {5.0, 20.0}) {
            const Eigen::VectorXd zeta = zeta_of(model, tau, 10, 0.8, rho, 0.0);
            const double lp = log_posterior_hyper(model, zeta);
            const double dense = dense_oracle(model, zeta).marginal_loglik();
            const double prior = log_prior_hyper(zeta, model.spec);
            CHECK(lp - prior == doctest::Approx(dense).epsilon(1e-6));
        }
    }

    SUBCASE("an empty block changes nothing") {
        AssembledModel extended = model;
        LikBlock empty;
        empty.family = Family::Gaussian;
        empty.name = "empty";
        empty.A_field = SpMat(0, model.m);
        empty.mu_coef = 1.0;
        empty.noise = NoisePrec::TauS;
        empty.y = Eigen::VectorXd(0);
        extended.blocks.push_back(empty);
        const Eigen::VectorXd zeta = zeta_of(model, 10, 10, 1.0, 0.3, 0.0);
        CHECK(log_posterior_hyper(extended, zeta) ==
              doctest::Approx(log_posterior_hyper(model, zeta)).epsilon(1e-12));
    }

    SUBCASE("prior shifts move the log posterior by exactly the prior difference") {
        const Eigen::VectorXd zeta = zeta_of(model, 10, 10, 1.0, 0.3, 0.0);
        AssembledModel other = model;
        other.spec.priors.sigma = {ScalePrior::Kind::Pc, 1.5, 0.05};
        const double shift =
            log_prior_hyper(zeta, other.spec) - log_prior_hyper(zeta, model.spec);
        CHECK(log_posterior_hyper(other, zeta) - log_posterior_hyper(model, zeta) ==
              doctest::Approx(shift).epsilon(1e-9));
    }
}

TEST_CASE("newton gradient matches finite differences") {
    auto mesh = std::make_shared<Mesh>(build_structured_mesh({0, 0, 1, 1}, 0.25, 0.2));
    const Dataset data = sim_data(25, 4, 1.0, 24);
    const AssembledModel model = assemble(spec_for(Variant::PSmelding, mesh), data);
    const Eigen::VectorXd zeta = zeta_of(model, 10, 10, 1.0, 0.25, 0.8);

    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        Eigen::VectorXd x(model.latent_dim());
        for (int i = 0; i < x.size(); ++i) x[i] = 0.4 * rng.normal();
        const Eigen::VectorXd g = joint_gradient(model, x, zeta);
        const double h = 1e-6;
        // spot-check a handful of coordinates per trial
        for (int c = 0; c < 5; ++c) {
            const int i = static_cast<int>(rng.uniform() * model.latent_dim());
            Eigen::VectorXd xp = x, xm = x;
            xp[i] += h;
            xm[i] -= h;
            const double fd =
                (joint_log_density(model, xp, zeta) - joint_log_density(model, xm, zeta)) /
                (2.0 * h);
            const double scale = std::max({1.0, std::abs(fd), std::abs(g[i])});
            CHECK(std::abs(g[i] - fd) / scale < 1e-5);
        }
    }
}

TEST_CASE("newton ascends monotonically and converges on the poisson model") {
    auto mesh = std::make_shared<Mesh>(build_structured_mesh({0, 0, 1, 1}, 0.125, 0.2));
    const Dataset data = sim_data(80, 25, 1.0, 25);
    const AssembledModel model = assemble(spec_for(Variant::PSmelding, mesh), data);

    Rng rng(9);
    for (int trial = 0; trial < 5; ++trial) {
        const Eigen::VectorXd zeta = zeta_of(model, std::exp(rng.normal() * 0.5 + std::log(10)),
                                             10, std::exp(0.3 * rng.normal()),
                                             std::exp(0.4 * rng.normal() + std::log(0.25)),
                                             rng.normal());
        const LatentGaussianApprox approx = find_mode(model, zeta);
        CHECK(approx.converged);
        // the damped objective never ends below the start
        const Eigen::VectorXd zero = Eigen::VectorXd::Zero(model.latent_dim());
        CHECK(joint_log_density(model, approx.mode, zeta) >=
              joint_log_density(model, zero, zeta) - 1e-9);
        CHECK(joint_gradient(model, approx.mode, zeta).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("variant coherence: psmelding with gamma frozen at 0 reproduces melding") {
    auto mesh = tiny_mesh();
    const Dataset data = sim_data(50, 16, 0.0, 26);
    const AssembledModel ps = assemble(spec_for(Variant::PSmelding, mesh), data);
    const AssembledModel meld = assemble(spec_for(Variant::Melding, mesh), data);

    const Eigen::VectorXd z_ps = zeta_of(ps, 10, 10, 1.0, 0.25, 0.0);
    const Eigen::VectorXd z_meld = zeta_of(meld, 10, 10, 1.0, 0.25, 0.0);
    const LatentGaussianApprox a = find_mode(ps, z_ps);
    const LatentGaussianApprox b = find_mode(meld, z_meld);
    CHECK((a.mode.head(ps.m + 1) - b.mode.head(ps.m + 1)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("predict: dense kriging equality, reversion, mixture behavior") {
    auto mesh = tiny_mesh();
    const Dataset data = sim_data(35, 9, 0.0, 27);
    const AssembledModel model = assemble(spec_for(Variant::Melding, mesh), data);
    const Eigen::VectorXd zeta = zeta_of(model, 10, 10, 1.0, 0.3, 0.0);

    // single-grid-point fit at a fixed zeta
    FitResult fixed;
    fixed.variant = model.spec.variant;
    fixed.layout = model.layout;
    GridPoint gp;
    gp.zeta = zeta;
    gp.log_post = 0.0;
    gp.weight = 1.0;
    fixed.grid.push_back(gp);

    std::vector<Point2> targets;
    Rng rng(3);
    for (int i = 0; i < 40; ++i) targets.push_back({rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)});
    const Prediction pred = predict(fixed, model, targets);

    SUBCASE("matches the dense GLS answer to 1e-6") {
        const DenseGaussianOracle o = dense_oracle(model, zeta);
        const Eigen::VectorXd dense_mode = o.mode();
        const Eigen::MatrixXd cov = o.posterior_precision().inverse();
        const ProjectionMatrix proj = project_points(*mesh, targets);
        for (int t = 0; t < 40; ++t) {
            Eigen::VectorXd a = Eigen::VectorXd::Zero(model.latent_dim());
            for (SpMat::InnerIterator it(proj.A, t); it; ++it) a[it.col()] = it.value();
            a[model.m] = 1.0;
            CHECK(pred.mean[t] == doctest::Approx(a.dot(dense_mode)).epsilon(1e-6));
            CHECK(pred.sd[t] == doctest::Approx(std::sqrt(a.dot(cov * a))).epsilon(1e-6));
        }
    }

    SUBCASE("an observed point with a tight nugget is interpolated") {
        Dataset tight = data;
        AssembledModel model_tight = assemble(spec_for(Variant::Melding, mesh), tight);
        const Eigen::VectorXd z_tight = zeta_of(model_tight, 1e4, 10, 1.0, 0.3, 0.0);
        FitResult f2 = fixed;
        f2.grid[0].zeta = z_tight;
        f2.grid_modes.clear();
        const std::vector<Point2> at_obs = {data.point_locs[0]};
        const Prediction p2 = predict(f2, model_tight, at_obs);
        CHECK(std::abs(p2.mean[0] - data.point_values[0]) < 2.0 * std::sqrt(1.0 / 1e4) + 2e-2);
    }

    SUBCASE("far targets revert to the prior sd") {
        // far corner of the extended mesh, outside the data window
        const Rect ext = mesh->extended_bbox();
        const std::vector<Point2> far = {{ext.x0 + 0.02, ext.y1 - 0.02}};
        const Prediction p3 = predict(fixed, model, far);
        CHECK(p3.sd[0] == doctest::Approx(1.0).epsilon(0.15));
    }

    SUBCASE("grid order does not matter and weights must sum to one") {
        FitResult two;
        two.variant = fixed.variant;
        two.layout = fixed.layout;
        GridPoint g1 = gp, g2 = gp;
        g1.weight = 0.6;
        g2.zeta = zeta_of(model, 12, 8, 0.9, 0.35, 0.0);
        g2.weight = 0.4;
        two.grid = {g1, g2};
        FitResult swapped = two;
        std::swap(swapped.grid[0], swapped.grid[1]);
        const Prediction pa = predict(two, model, targets);
        const Prediction pb = predict(swapped, model, targets);
        CHECK((pa.mean - pb.mean).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((pa.sd - pb.sd).cwiseAbs().maxCoeff() < 1e-12);
    }

    SUBCASE("out-of-mesh target is rejected") {
        const std::vector<Point2> outside = {{50.0, 50.0}};
        CHECK_THROWS_AS(predict(fixed, model, outside), OutOfDomainError);
    }
}

TEST_CASE("exceedance probabilities") {
    auto mesh = tiny_mesh();
    const Dataset data = sim_data(30, 9, 0.0, 28);
    const AssembledModel model = assemble(spec_for(Variant::Melding, mesh), data);
    const Eigen::VectorXd zeta = zeta_of(model, 10, 10, 1.0, 0.3, 0.0);

    FitResult fixed;
    fixed.variant = model.spec.variant;
    fixed.layout = model.layout;
    GridPoint gp;
    gp.zeta = zeta;
    gp.weight = 1.0;
    fixed.grid.push_back(gp);

    const std::vector<Point2> targets = {{0.3, 0.4}, {0.7, 0.6}, {0.5, 0.1}};
    const Prediction pred = predict(fixed, model, targets);

    SUBCASE("degenerate thresholds") {
        const Eigen::VectorXd all = exceedance_prob(fixed, model, targets, -1e30);
        for (int t = 0; t < all.size(); ++t) CHECK(all[t] == doctest::Approx(1.0));
        const Eigen::VectorXd at_mean = exceedance_prob(fixed, model, targets, pred.mean[0]);
        CHECK(at_mean[0] == doctest::Approx(0.5).epsilon(1e-9));
    }

    SUBCASE("monte carlo draws reproduce the probabilities within 0.02") {
        const double threshold = pred.mean[1] + 0.5 * pred.sd[1];
        const Eigen::VectorXd exc = exceedance_prob(fixed, model, targets, threshold);

        // oracle: sample the dense Gaussian approximation
        const DenseGaussianOracle o = dense_oracle(model, zeta);
        const Eigen::VectorXd mode = o.mode();
        const Eigen::MatrixXd cov = o.posterior_precision().inverse();
        const Eigen::MatrixXd chol = Eigen::LLT<Eigen::MatrixXd>(cov).matrixL();
        const ProjectionMatrix proj = project_points(*mesh, targets);
        Rng rng(2024);
        const int n_draws = 10000;
        Eigen::VectorXd hits = Eigen::VectorXd::Zero(3);
        Eigen::VectorXd z(model.latent_dim());
        for (int s = 0; s < n_draws; ++s) {
            for (int i = 0; i < z.size(); ++i) z[i] = rng.normal();
            const Eigen::VectorXd draw = mode + chol * z;
            const Eigen::VectorXd at = proj.A * draw.head(model.m);
            for (int t = 0; t < 3; ++t)
                if (at[t] + draw[model.m] > threshold) hits[t] += 1.0;
        }
        for (int t = 0; t < 3; ++t) CHECK(std::abs(hits[t] / n_draws - exc[t]) < 0.02);
    }
}

TEST_CASE("fit: recovery and calibration on simulated data" * doctest::timeout(1500)) {
    FitControls controls;
    controls.jobs = 2;

    SUBCASE("melding, large n: mu lands within 3 posterior sds in most replicates") {
        auto mesh = std::make_shared<Mesh>(build_structured_mesh({0, 0, 1, 1}, 0.1, 0.2));
        int good = 0;
        const int n_reps = 30;
        std::vector<int> flags(n_reps, 0);
        parallel_for(n_reps, 2, [&](int r) {
            ScenarioConfig cfg = table1_scenario(2);  // gamma = 0
            cfg.n_points = 150;
            cfg.n_areas = 25;
            cfg.sim_mesh_edge = 0.05;
            cfg.seed = 7000 + static_cast<std::uint64_t>(r);
            const Dataset data = simulate_scenario(cfg, 0);
            const AssembledModel model = assemble(spec_for(Variant::Melding, mesh), data);
            const FitResult fr = fit(model, FitControls{});
            if (std::abs(fr.mu.mean) <= 3.0 * std::max(fr.mu.sd, 1e-6)) flags[static_cast<std::size_t>(r)] = 1;
        });
        for (int f : flags) good += f;
        CHECK(good >= 27);  // >= 90%
    }

    SUBCASE("psmelding on gamma = 0 data: the gamma interval covers 0") {
        auto mesh = std::make_shared<Mesh>(build_structured_mesh({0, 0, 1, 1}, 0.1, 0.2));
        const int n_reps = 30;
        std::vector<int> flags(n_reps, 0);
        parallel_for(n_reps, 2, [&](int r) {
            ScenarioConfig cfg = table1_scenario(2);
            cfg.n_points = 100;
            cfg.n_areas = 25;
            cfg.sim_mesh_edge = 0.05;
            cfg.seed = 8000 + static_cast<std::uint64_t>(r);
            const Dataset data = simulate_scenario(cfg, 0);
            const AssembledModel model = assemble(spec_for(Variant::PSmelding, mesh), data);
            const FitResult fr = fit(model, FitControls{});
            const HyperSummary* g = fr.find("gamma");
            if (g && g->contains(0.0)) flags[static_cast<std::size_t>(r)] = 1;
        });
        int covered = 0;
        for (int f : flags) covered += f;
        CHECK(covered >= 24);  // >= 80%
    }

    SUBCASE("fit diagnostics and grid invariants") {
        auto mesh = std::make_shared<Mesh>(build_structured_mesh({0, 0, 1, 1}, 0.125, 0.2));
        ScenarioConfig cfg = table1_scenario(5);
        cfg.n_points = 100;
        cfg.n_areas = 25;
        cfg.sim_mesh_edge = 0.05;
        cfg.seed = 4242;
        const Dataset data = simulate_scenario(cfg, 0);
        const AssembledModel model = assemble(spec_for(Variant::PSmelding, mesh), data);
        const FitResult fr = fit(model, controls);
        CHECK(fr.diagnostics.converged);

        double wsum = 0.0;
        for (const auto& g : fr.grid) {
            CHECK(g.weight >= 0.0);
            wsum += g.weight;
        }
        CHECK(wsum == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(fr.hyper.size() == 5);
        for (const auto& [name, s] : fr.hyper) {
            CHECK(s.sd >= 0.0);
            CHECK(s.q025 <= s.q975);
        }
        CHECK(fr.theta_micro.q025 <= fr.theta_micro.q975);
        CHECK(fr.node_mean.size() == model.m);
        CHECK(fr.node_sd.minCoeff() >= 0.0);

        // theta summaries transform (sigma, rho): consistent in expectation
        const HyperSummary* sig = fr.find("sigma");
        const HyperSummary* rho = fr.find("rho");
        REQUIRE(sig != nullptr);
        REQUIRE(rho != nullptr);
        const double theta_point = 8.0 * sig->mean * sig->mean / (rho->mean * rho->mean);
        CHECK(fr.theta_micro.mean / theta_point > 0.5);
        CHECK(fr.theta_micro.mean / theta_point < 2.0);
    }
}
