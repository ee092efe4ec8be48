#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>

#include "psfuse/errors.hpp"
#include "psfuse/rng.hpp"
#include "psfuse/simulate.hpp"
#include "support.hpp"

using namespace psfuse;

namespace {

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
        sab += (a[i] - ma) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

// correlation between 10x10 cell counts and cell-mean field
double count_field_correlation(const std::vector<Point2>& pts, const Mesh& mesh,
                               const Eigen::VectorXd& field) {
    std::vector<double> counts(100, 0.0), means(100, 0.0);
    for (const Point2& p : pts) {
        const int i = std::min(9, static_cast<int>(p.x * 10.0));
        const int j = std::min(9, static_cast<int>(p.y * 10.0));
        counts[static_cast<std::size_t>(j * 10 + i)] += 1.0;
    }
    const ProjectionMatrix proj = project_points(mesh, grid_centers(10, 10, Rect{0, 0, 1, 1}));
    const Eigen::VectorXd cell_field = proj.A * field;
    for (int c = 0; c < 100; ++c) means[static_cast<std::size_t>(c)] = cell_field[c];
    return pearson(counts, means);
}

ScenarioConfig fast_config() {
    ScenarioConfig cfg = table1_scenario(5);
    cfg.sim_mesh_edge = 0.05;
    return cfg;
}

}  // namespace

TEST_CASE("table1 presets") {
    const ScenarioConfig s5 = table1_scenario(5);
    CHECK(s5.range_rho == doctest::Approx(0.2));
    CHECK(s5.theta_micro == doctest::Approx(200.0));
    CHECK(s5.gamma == doctest::Approx(1.0));
    CHECK(s5.preferential());

    const ScenarioConfig s2 = table1_scenario(2);
    CHECK(s2.range_rho == doctest::Approx(0.2));
    CHECK(s2.gamma == doctest::Approx(0.0));
    CHECK_FALSE(s2.preferential());

    CHECK(table1_scenario(1).theta_micro == doctest::Approx(800.0));
    CHECK(table1_scenario(6).theta_micro == doctest::Approx(50.0));
    CHECK_THROWS_AS(table1_scenario(0), ConfigError);
    CHECK_THROWS_AS(table1_scenario(7), ConfigError);

    SUBCASE("inconsistent theta is rejected") {
        ScenarioConfig bad = table1_scenario(5);
        bad.theta_micro = 123.0;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }
    SUBCASE("non-square area counts are rejected") {
        ScenarioConfig bad = table1_scenario(5);
        bad.n_areas = 7;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }
}

TEST_CASE("simulate_scenario: determinism and dataset shape") {
    ScenarioConfig cfg = fast_config();
    cfg.n_points = 50;
    cfg.n_areas = 25;
    cfg.seed = 99;

    const Dataset a = simulate_scenario(cfg, 3);
    const Dataset b = simulate_scenario(cfg, 3);
    CHECK(a.n_points() == 50);
    CHECK(a.n_areas() == 25);
    CHECK(a.pred_grid.size() == 2500);
    CHECK(a.preferential);
    REQUIRE(a.point_values.size() == b.point_values.size());
    CHECK((a.point_values - b.point_values).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.area_values - b.area_values).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.true_field_nodes - b.true_field_nodes).cwiseAbs().maxCoeff() == 0.0);
    for (std::size_t i = 0; i < a.point_locs.size(); ++i) {
        CHECK(a.point_locs[i].x == b.point_locs[i].x);
        CHECK(a.point_locs[i].y == b.point_locs[i].y);
    }

    const Dataset c = simulate_scenario(cfg, 4);
    CHECK((a.true_field_nodes - c.true_field_nodes).cwiseAbs().maxCoeff() > 1e-6);

    SUBCASE("points stay inside the domain") {
        for (const Point2& p : a.point_locs) CHECK(cfg.domain.contains(p));
    }
    SUBCASE("gamma = 0 is flagged non-preferential") {
        ScenarioConfig np = table1_scenario(2);
        np.sim_mesh_edge = 0.05;
        np.n_points = 20;
        np.n_areas = 0;
        CHECK_FALSE(simulate_scenario(np, 0).preferential);
    }
}

TEST_CASE("preferential sampling: uniformity, attraction, monotonicity") {
    const Mesh mesh = build_structured_mesh({0, 0, 1, 1}, 0.05, 0.2);
    const FemMatrices fem = assemble_fem(mesh);
    const SpdeOperator spde(fem);
    const MaternParams params = MaternParams::from_range(1.0, 0.2);
    const SpMat q = spde.precision(params);

    const int n_reps = 50;
    const int n_pts = 100;

    SUBCASE("gamma = 0: 2-D KS uniformity at the 1% level") {
        int passed = 0;
        for (int r = 0; r < n_reps; ++r) {
            const SpdePrecision prec{q, params};
            const Eigen::VectorXd field = sample_grf(prec, 500 + static_cast<std::uint64_t>(r));
            const auto pts = sample_preferential_points(field, mesh, 0.0, 0.05, n_pts,
                                                        900 + static_cast<std::uint64_t>(r),
                                                        Rect{0, 0, 1, 1});
            CHECK(static_cast<int>(pts.size()) == n_pts);
            if (oracle::ks2d_uniform_pvalue(pts, Rect{0, 0, 1, 1}) > 0.01) ++passed;
        }
        CHECK(passed >= 48);
    }

    SUBCASE("gamma = 1: counts correlate with the field; monotone in gamma") {
        std::vector<double> corr0, corr1;
        int positive = 0;
        for (int r = 0; r < n_reps; ++r) {
            const SpdePrecision prec{q, params};
            const Eigen::VectorXd field = sample_grf(prec, 2000 + static_cast<std::uint64_t>(r));
            const auto pts1 = sample_preferential_points(field, mesh, 1.0, 0.05, n_pts,
                                                         3000 + static_cast<std::uint64_t>(r),
                                                         Rect{0, 0, 1, 1});
            const auto pts0 = sample_preferential_points(field, mesh, 0.0, 0.05, n_pts,
                                                         4000 + static_cast<std::uint64_t>(r),
                                                         Rect{0, 0, 1, 1});
            const double c1 = count_field_correlation(pts1, mesh, field);
            const double c0 = count_field_correlation(pts0, mesh, field);
            corr1.push_back(c1);
            corr0.push_back(c0);
            if (c1 > 0.0) ++positive;
        }
        CHECK(positive >= 48);  // >= 95% of replicates

        // Mann-Whitney U, one-sided: corr1 stochastically larger than corr0
        double u = 0.0;
        for (double x : corr1)
            for (double y : corr0) u += (x > y) ? 1.0 : (x == y ? 0.5 : 0.0);
        const double n1 = n_reps, n2 = n_reps;
        const double z = (u - n1 * n2 / 2.0) / std::sqrt(n1 * n2 * (n1 + n2 + 1.0) / 12.0);
        CHECK(z > 2.33);  // p < 0.01
    }

    SUBCASE("envelope failure on a non-finite field") {
        Eigen::VectorXd bad = Eigen::VectorXd::Zero(mesh.n_nodes());
        bad[3] = std::numeric_limits<double>::quiet_NaN();
        CHECK_THROWS_AS(
            sample_preferential_points(bad, mesh, 1.0, 0.0, 10, 1, Rect{0, 0, 1, 1}),
            NumericalError);
    }
}

TEST_CASE("observe_points: noise level and limits") {
    const Mesh mesh = build_structured_mesh({0, 0, 1, 1}, 0.1, 0.2);
    const FemMatrices fem = assemble_fem(mesh);
    const SpdePrecision prec = spde_precision(fem, MaternParams::from_range(1.0, 0.3));
    const Eigen::VectorXd field = sample_grf(prec, 10);

    Rng rng(77);
    std::vector<Point2> locs;
    for (int i = 0; i < 100; ++i) locs.push_back({rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)});
    const ProjectionMatrix proj = project_points(mesh, locs);
    const Eigen::VectorXd signal = proj.A * field;

    SUBCASE("huge precision recovers the interpolated field") {
        const Eigen::VectorXd y = observe_points(field, mesh, locs, 2.0, 1e12, 5);
        CHECK((y - (signal.array() + 2.0).matrix()).cwiseAbs().maxCoeff() < 1e-5);
    }

    SUBCASE("mu = 5, zero field, huge precision") {
        const Eigen::VectorXd zero = Eigen::VectorXd::Zero(mesh.n_nodes());
        const Eigen::VectorXd y = observe_points(zero, mesh, locs, 5.0, 1e12, 6);
        for (int i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(5.0).epsilon(1e-5));
    }

    SUBCASE("residual variance matches 1/tau over 10^4 draws") {
        const int n_draws = 10000;
        double ss = 0.0;
        long long count = 0;
        for (int d = 0; d < n_draws / 100; ++d) {
            const Eigen::VectorXd y =
                observe_points(field, mesh, locs, 0.0, 10.0, 100000 + static_cast<std::uint64_t>(d));
            const Eigen::VectorXd resid = y - signal;
            ss += resid.squaredNorm();
            count += resid.size();
        }
        CHECK(ss / static_cast<double>(count) == doctest::Approx(0.1).epsilon(0.05));
    }

    SUBCASE("permuting locations permutes outputs identically") {
        const Eigen::VectorXd y = observe_points(field, mesh, locs, 1.0, 10.0, 42);
        std::vector<Point2> shuffled = locs;
        std::reverse(shuffled.begin(), shuffled.end());
        const Eigen::VectorXd y2 = observe_points(field, mesh, shuffled, 1.0, 10.0, 42);
        for (int i = 0; i < y.size(); ++i)
            CHECK(y2[i] == doctest::Approx(y[y.size() - 1 - i]).epsilon(1e-15));
    }
}

TEST_CASE("observe_areas: grid geometry and quadrature oracle") {
    const Mesh mesh = build_structured_mesh({0, 0, 1, 1}, 0.04, 0.2);

    SUBCASE("constant field, no noise: every area equals mu + c") {
        const Eigen::VectorXd field = Eigen::VectorXd::Constant(mesh.n_nodes(), 1.7);
        const AreaSet areas = grid_areas(2, 2, Rect{0, 0, 1, 1});
        const Eigen::VectorXd y = observe_areas(field, mesh, areas, 0.5, 1e12, 3);
        for (int j = 0; j < 4; ++j) CHECK(y[j] == doctest::Approx(2.2).epsilon(1e-5));
    }

    SUBCASE("4-area grid covers the four quadrants") {
        const AreaSet areas = grid_areas(2, 2, Rect{0, 0, 1, 1});
        CHECK(areas.size() == 4);
        CHECK(areas.grid->cell(0).x1 == doctest::Approx(0.5));
        CHECK(areas.grid->cell(3).x0 == doctest::Approx(0.5));
        CHECK(areas.grid->cell(3).y0 == doctest::Approx(0.5));
    }

    SUBCASE("areal averages match a 200x200 quadrature of the interpolant") {
        const FemMatrices fem = assemble_fem(mesh);
        const SpdePrecision prec = spde_precision(fem, MaternParams::from_range(1.0, 0.3));
        const Eigen::VectorXd field = sample_grf(prec, 21);
        const AreaSet areas = grid_areas(5, 5, Rect{0, 0, 1, 1});
        const Eigen::VectorXd y = observe_areas(field, mesh, areas, 0.0, 1e12, 9);

        const ProjectionMatrix quad =
            project_points(mesh, grid_centers(200, 200, Rect{0, 0, 1, 1}));
        const Eigen::VectorXd dense = quad.A * field;
        Eigen::VectorXd exact = Eigen::VectorXd::Zero(25);
        Eigen::VectorXd counts = Eigen::VectorXd::Zero(25);
        const auto centers = grid_centers(200, 200, Rect{0, 0, 1, 1});
        for (std::size_t i = 0; i < centers.size(); ++i) {
            const int cell = areas.grid->cell_of(centers[i]);
            exact[cell] += dense[static_cast<Eigen::Index>(i)];
            counts[cell] += 1.0;
        }
        exact = exact.cwiseQuotient(counts);
        const double rms_err = std::sqrt((y - exact).squaredNorm() / 25.0);
        const double rms_ref = std::sqrt(exact.squaredNorm() / 25.0);
        CHECK(rms_err / rms_ref < 0.02);
    }

    SUBCASE("linear fields: halving the mesh edge at least halves the error") {
        const AreaSet areas = grid_areas(3, 3, Rect{0, 0, 1, 1});
        auto rms_error = [&](double edge) {
            const Mesh m = build_structured_mesh({0, 0, 1, 1}, edge, 0.2);
            Eigen::VectorXd lin(m.n_nodes());
            for (int k = 0; k < m.n_nodes(); ++k)
                lin[k] = 1.3 * m.nodes[static_cast<std::size_t>(k)].x -
                         0.4 * m.nodes[static_cast<std::size_t>(k)].y;
            const Eigen::VectorXd y = observe_areas(lin, m, areas, 0.0, 1e12, 4);
            double ss = 0.0;
            for (int j = 0; j < 9; ++j) {
                const Point2 c = areas.grid->cell(j).center();
                const double exact = 1.3 * c.x - 0.4 * c.y;
                ss += (y[j] - exact) * (y[j] - exact);
            }
            return std::sqrt(ss / 9.0);
        };
        const double coarse = rms_error(0.09);
        const double fine = rms_error(0.045);
        CHECK(fine <= coarse / 2.0 + 1e-12);
    }
}

TEST_CASE("dataset files round trip") {
    ScenarioConfig cfg = fast_config();
    cfg.n_points = 30;
    cfg.n_areas = 4;
    cfg.seed = 5;
    const Dataset data = simulate_scenario(cfg, 0);
    const std::string dir = "/tmp/psfuse_test_dataset";
    write_dataset(data, cfg, dir);

    const auto pts = read_points_csv(dir + "/points.csv");
    REQUIRE(static_cast<int>(pts.size()) == 30);
    for (int i = 0; i < 30; ++i) {
        CHECK(pts[static_cast<std::size_t>(i)].first.x ==
              doctest::Approx(data.point_locs[static_cast<std::size_t>(i)].x).epsilon(1e-9));
        CHECK(pts[static_cast<std::size_t>(i)].second ==
              doctest::Approx(data.point_values[i]).epsilon(1e-9));
    }
    const auto areas = read_values_csv(dir + "/areas.csv");
    REQUIRE(static_cast<int>(areas.size()) == 4);
    const AreaSet geom = read_areas_file(dir + "/areas_geom.txt");
    CHECK(geom.size() == 4);

    SUBCASE("malformed rows are reported with their line number") {
        {
            std::ofstream os("/tmp/psfuse_bad_points.csv");
            os << "x,y,value\n0.1,0.2,0.3\n0.4,oops\n";
        }
        CHECK_THROWS_WITH_AS(read_points_csv("/tmp/psfuse_bad_points.csv"),
                             doctest::Contains(":3"), InputError);
    }
}
