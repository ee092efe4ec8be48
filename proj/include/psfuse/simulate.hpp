#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "psfuse/matern.hpp"
#include "psfuse/mesh.hpp"

namespace psfuse {

/// One simulation scenario: latent-field parameters, sampling design and
/// observation noise. Defaults follow the unit-square study design.
struct ScenarioConfig {
    double range_rho = 0.2;
    double sigma = 1.0;
    double theta_micro = 200.0;  // redundant with (sigma, rho); checked
    double gamma = 1.0;

    int n_points = 100;
    int n_areas = 25;  // 0 or a perfect square; k^2 means a k x k grid
    double tau_s = 10.0;
    double tau_B = 10.0;
    double mu = 0.0;
    double alpha = 0.05;

    int pred_nx = 50, pred_ny = 50;
    int n_replicates = 1;
    std::uint64_t seed = 1;

    Rect domain{0.0, 0.0, 1.0, 1.0};
    double sim_mesh_edge = 0.025;
    double sim_mesh_extension = 0.2;

    bool preferential() const { return gamma != 0.0; }
    MaternParams field_params() const;
    void validate() const;
};

/// Scenario presets: six (rho, theta, gamma) combinations with sigma = 1,
/// rho in {0.1, 0.2, 0.4} and gamma 0 (ids 1-3) or 1 (ids 4-6).
ScenarioConfig table1_scenario(int id);

struct Dataset {
    std::vector<Point2> point_locs;
    Eigen::VectorXd point_values;
    AreaSet areas;
    Eigen::VectorXd area_values;

    // simulation truth; empty for imported data
    Eigen::VectorXd true_field_nodes;
    std::vector<Point2> pred_grid;
    Eigen::VectorXd true_at_grid;

    bool preferential = false;
    int replicate = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> warnings;

    int n_points() const { return static_cast<int>(point_locs.size()); }
    int n_areas() const { return areas.size(); }
};

/// Exactly n locations from the density proportional to
/// exp(alpha + gamma * field(s)) on `window`, by rejection against the
/// nodal-max envelope of the piecewise linear interpolant.
std::vector<Point2> sample_preferential_points(const Eigen::VectorXd& field, const Mesh& mesh,
                                               double gamma, double alpha, int n,
                                               std::uint64_t seed, const Rect& window);

/// Y(s_i) = mu + field(s_i) + eps, eps iid N(0, 1/tau_s). Noise is keyed to
/// the location so permuting inputs permutes outputs.
Eigen::VectorXd observe_points(const Eigen::VectorXd& field, const Mesh& mesh,
                               std::span<const Point2> locations, double mu, double tau_s,
                               std::uint64_t seed);

/// Y(B_j) = mu + equal-weight nodal average of the field over B_j + eps,
/// eps iid N(0, 1/tau_B).
Eigen::VectorXd observe_areas(const Eigen::VectorXd& field, const Mesh& mesh, const AreaSet& areas,
                              double mu, double tau_B, std::uint64_t seed,
                              std::vector<std::string>* warnings = nullptr);

/// Precomputed mesh and SPDE operator shared by all replicates of a scenario.
class Simulator {
public:
    explicit Simulator(const ScenarioConfig& config);

    Dataset replicate(int rep_index) const;
    const Mesh& mesh() const { return mesh_; }
    const ScenarioConfig& config() const { return config_; }

private:
    ScenarioConfig config_;
    Mesh mesh_;
    SpdeOperator spde_;
    SpMat field_precision_;
};

/// Convenience wrapper: one replicate of a scenario.
Dataset simulate_scenario(const ScenarioConfig& config, int rep_index = 0);

/// Centers of an nx x ny grid of cells over `box`, row-major from (x0, y0).
std::vector<Point2> grid_centers(int nx, int ny, const Rect& box);

// --- dataset files: points.csv, areas.csv + areas_geom.txt, truth.csv, meta.json ---
void write_dataset(const Dataset& data, const ScenarioConfig& config, const std::string& dir);
std::vector<std::pair<Point2, double>> read_points_csv(const std::string& path);
std::vector<std::pair<std::string, double>> read_values_csv(const std::string& path);

}  // namespace psfuse
