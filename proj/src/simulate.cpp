#include "psfuse/simulate.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "psfuse/errors.hpp"
#include "psfuse/rng.hpp"

namespace psfuse {

namespace {

constexpr std::uint64_t kFieldStream = 1;
constexpr std::uint64_t kLocationStream = 2;
constexpr std::uint64_t kPointNoiseStream = 3;
constexpr std::uint64_t kAreaNoiseStream = 4;

std::uint64_t fnv1a(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t location_key(const Point2& p) {
    double buf[2] = {p.x, p.y};
    return fnv1a(buf, sizeof(buf));
}

std::uint64_t area_key(const AreaSet& areas, int j) {
    const Polygon ring = areas.ring(j);
    std::vector<double> buf;
    buf.reserve(2 * ring.size());
    for (const Point2& p : ring) {
        buf.push_back(p.x);
        buf.push_back(p.y);
    }
    return fnv1a(buf.data(), buf.size() * sizeof(double));
}

double keyed_normal(std::uint64_t seed, std::uint64_t key) {
    Rng rng(derive_seed(seed, key));
    return rng.normal();
}

}  // namespace

MaternParams ScenarioConfig::field_params() const {
    return MaternParams::from_range(sigma, range_rho);
}

void ScenarioConfig::validate() const {
    if (!(range_rho > 0.0) || !(sigma > 0.0)) throw ConfigError("scenario: sigma, rho must be > 0");
    const double theta = field_params().theta_micro();
    if (std::abs(theta - theta_micro) > 1e-6 * std::max(1.0, theta))
        throw ConfigError("scenario: theta_micro inconsistent with (sigma, rho)");
    if (n_points <= 0) throw ConfigError("scenario: n_points must be > 0");
    if (n_areas < 0) throw ConfigError("scenario: n_areas must be >= 0");
    if (n_areas > 0) {
        const int k = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n_areas))));
        if (k * k != n_areas)
            throw ConfigError("scenario: n_areas must be 0 or a perfect square (k x k grid)");
    }
    if (!(tau_s > 0.0) || !(tau_B > 0.0)) throw ConfigError("scenario: precisions must be > 0");
    if (!domain.valid()) throw ConfigError("scenario: degenerate domain");
    if (pred_nx <= 0 || pred_ny <= 0) throw ConfigError("scenario: invalid prediction grid");
}

ScenarioConfig table1_scenario(int id) {
    if (id < 1 || id > 6) throw ConfigError("table1 scenario id must be in 1..6");
    static const double rhos[3] = {0.1, 0.2, 0.4};
    static const double thetas[3] = {800.0, 200.0, 50.0};
    ScenarioConfig cfg;
    cfg.range_rho = rhos[(id - 1) % 3];
    cfg.theta_micro = thetas[(id - 1) % 3];
    cfg.sigma = 1.0;
    cfg.gamma = id <= 3 ? 0.0 : 1.0;
    return cfg;
}

std::vector<Point2> sample_preferential_points(const Eigen::VectorXd& field, const Mesh& mesh,
                                               double gamma, double alpha, int n,
                                               std::uint64_t seed, const Rect& window) {
    (void)alpha;  // constant log-intensity offset cancels in the normalized density
    if (n <= 0) throw ConfigError("sample_preferential_points: n must be > 0");
    if (!field.allFinite())
        throw NumericalError("sample_preferential_points: non-finite field, no envelope");

    double log_envelope = 0.0;
    for (int k = 0; k < field.size(); ++k)
        log_envelope = std::max(log_envelope, gamma * field[k]);

    std::vector<Point2> out;
    out.reserve(static_cast<std::size_t>(n));
    Rng rng(seed);
    const long long max_attempts = 20'000'000LL + 200'000LL * n;
    long long attempts = 0;
    std::vector<Point2> probe(1);
    while (static_cast<int>(out.size()) < n) {
        if (++attempts > max_attempts)
            throw NumericalError("sample_preferential_points: rejection rate too high");
        const Point2 s{rng.uniform(window.x0, window.x1), rng.uniform(window.y0, window.y1)};
        const double u = rng.uniform();
        if (gamma == 0.0) {
            out.push_back(s);
            continue;
        }
        const PointLocation loc = locate_point(mesh, s);
        if (loc.triangle < 0) continue;
        const auto& tri = mesh.triangles[static_cast<std::size_t>(loc.triangle)];
        double value = 0.0;
        for (int a = 0; a < 3; ++a) value += loc.bary[a] * field[tri[a]];
        if (std::log(std::max(u, 1e-300)) < gamma * value - log_envelope) out.push_back(s);
    }
    return out;
}

Eigen::VectorXd observe_points(const Eigen::VectorXd& field, const Mesh& mesh,
                               std::span<const Point2> locations, double mu, double tau_s,
                               std::uint64_t seed) {
    const ProjectionMatrix proj = project_points(mesh, locations);
    Eigen::VectorXd y = proj.A * field;
    const double sd = 1.0 / std::sqrt(tau_s);
    for (int i = 0; i < y.size(); ++i)
        y[i] += mu + sd * keyed_normal(seed, location_key(locations[static_cast<std::size_t>(i)]));
    return y;
}

Eigen::VectorXd observe_areas(const Eigen::VectorXd& field, const Mesh& mesh, const AreaSet& areas,
                              double mu, double tau_B, std::uint64_t seed,
                              std::vector<std::string>* warnings) {
    const ProjectionMatrix proj = project_areas(mesh, areas);
    if (warnings)
        warnings->insert(warnings->end(), proj.warnings.begin(), proj.warnings.end());
    Eigen::VectorXd y = proj.A * field;
    const double sd = 1.0 / std::sqrt(tau_B);
    for (int j = 0; j < y.size(); ++j)
        y[j] += mu + sd * keyed_normal(seed, area_key(areas, j));
    return y;
}

std::vector<Point2> grid_centers(int nx, int ny, const Rect& box) {
    std::vector<Point2> pts;
    pts.reserve(static_cast<std::size_t>(nx) * ny);
    const double dx = box.width() / nx;
    const double dy = box.height() / ny;
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i)
            pts.push_back({box.x0 + (i + 0.5) * dx, box.y0 + (j + 0.5) * dy});
    return pts;
}

Simulator::Simulator(const ScenarioConfig& config) : config_(config) {
    config_.validate();
    mesh_ = build_structured_mesh(config_.domain, config_.sim_mesh_edge, config_.sim_mesh_extension);
    spde_ = SpdeOperator(assemble_fem(mesh_));
    field_precision_ = spde_.precision(config_.field_params());
}

Dataset Simulator::replicate(int rep_index) const {
    const std::uint64_t rep_seed = derive_seed(config_.seed, 1000 + static_cast<std::uint64_t>(rep_index));

    Dataset data;
    data.replicate = rep_index;
    data.seed = rep_seed;
    data.preferential = config_.preferential();

    SpdePrecision prec{field_precision_, config_.field_params()};
    data.true_field_nodes = sample_grf(prec, derive_seed(rep_seed, kFieldStream));

    data.point_locs =
        sample_preferential_points(data.true_field_nodes, mesh_, config_.gamma, config_.alpha,
                                   config_.n_points, derive_seed(rep_seed, kLocationStream),
                                   config_.domain);
    data.point_values = observe_points(data.true_field_nodes, mesh_, data.point_locs, config_.mu,
                                       config_.tau_s, derive_seed(rep_seed, kPointNoiseStream));

    if (config_.n_areas > 0) {
        const int k = static_cast<int>(std::lround(std::sqrt(static_cast<double>(config_.n_areas))));
        data.areas = grid_areas(k, k, config_.domain);
        data.area_values =
            observe_areas(data.true_field_nodes, mesh_, data.areas, config_.mu, config_.tau_B,
                          derive_seed(rep_seed, kAreaNoiseStream), &data.warnings);
    }

    data.pred_grid = grid_centers(config_.pred_nx, config_.pred_ny, config_.domain);
    const ProjectionMatrix pg = project_points(mesh_, data.pred_grid, ProjectionKind::PredictionGrid);
    data.true_at_grid = (pg.A * data.true_field_nodes).array() + config_.mu;
    return data;
}

Dataset simulate_scenario(const ScenarioConfig& config, int rep_index) {
    return Simulator(config).replicate(rep_index);
}

// --- file IO ----------------------------------------------------------

namespace {

void write_atomic(const std::string& path, const std::string& contents) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw InputError("cannot open " + tmp + " for writing");
        os << contents;
    }
    std::filesystem::rename(tmp, path);
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

}  // namespace

void write_dataset(const Dataset& data, const ScenarioConfig& config, const std::string& dir) {
    std::filesystem::create_directories(dir);
    const std::filesystem::path base(dir);

    std::string points = "x,y,value\n";
    for (int i = 0; i < data.n_points(); ++i) {
        points += format_double(data.point_locs[static_cast<std::size_t>(i)].x) + "," +
                  format_double(data.point_locs[static_cast<std::size_t>(i)].y) + "," +
                  format_double(data.point_values[i]) + "\n";
    }
    write_atomic((base / "points.csv").string(), points);

    if (data.n_areas() > 0) {
        std::string areas = "area_id,value\n";
        for (int j = 0; j < data.n_areas(); ++j)
            areas += std::to_string(j) + "," + format_double(data.area_values[j]) + "\n";
        write_atomic((base / "areas.csv").string(), areas);

        std::string geom;
        if (data.areas.grid) {
            const GridSpec& g = *data.areas.grid;
            geom = std::to_string(g.nx) + " " + std::to_string(g.ny) + " " +
                   format_double(g.box.x0) + " " + format_double(g.box.y0) + " " +
                   format_double(g.box.x1) + " " + format_double(g.box.y1) + "\n";
        } else {
            for (int j = 0; j < data.n_areas(); ++j) {
                geom += std::to_string(j) + ":";
                for (const Point2& p : data.areas.polygons[static_cast<std::size_t>(j)])
                    geom += " " + format_double(p.x) + " " + format_double(p.y);
                geom += "\n";
            }
        }
        write_atomic((base / "areas_geom.txt").string(), geom);
    }

    std::string truth = "x,y,value\n";
    for (std::size_t i = 0; i < data.pred_grid.size(); ++i) {
        truth += format_double(data.pred_grid[i].x) + "," + format_double(data.pred_grid[i].y) +
                 "," + format_double(data.true_at_grid[static_cast<Eigen::Index>(i)]) + "\n";
    }
    write_atomic((base / "truth.csv").string(), truth);

    nlohmann::json meta;
    meta["replicate"] = data.replicate;
    meta["replicate_seed"] = data.seed;
    meta["sampling"] = data.preferential ? "preferential" : "non-preferential";
    meta["config"] = {
        {"rho", config.range_rho},       {"sigma", config.sigma},
        {"theta", config.theta_micro},   {"gamma", config.gamma},
        {"n_points", config.n_points},   {"n_areas", config.n_areas},
        {"tau_s", config.tau_s},         {"tau_B", config.tau_B},
        {"mu", config.mu},               {"alpha", config.alpha},
        {"seed", config.seed},           {"sim_mesh_edge", config.sim_mesh_edge},
        {"sim_mesh_extension", config.sim_mesh_extension},
        {"domain", {config.domain.x0, config.domain.y0, config.domain.x1, config.domain.y1}},
        {"pred_grid", {config.pred_nx, config.pred_ny}},
    };
    if (!data.warnings.empty()) meta["warnings"] = data.warnings;
    write_atomic((base / "meta.json").string(), meta.dump(2) + "\n");
}

std::vector<std::pair<Point2, double>> read_points_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open " + path);
    std::vector<std::pair<Point2, double>> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line.back() == '\r') {
            while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
            if (line.empty()) continue;
        }
        if (lineno == 1 && line.find("x") != std::string::npos &&
            line.find("value") != std::string::npos)
            continue;  // header
        double x, y, v;
        if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &x, &y, &v) != 3)
            throw InputError(path + ":" + std::to_string(lineno) + ": expected 'x,y,value'");
        out.push_back({{x, y}, v});
    }
    return out;
}

std::vector<std::pair<std::string, double>> read_values_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open " + path);
    std::vector<std::pair<std::string, double>> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (line.empty()) continue;
        if (lineno == 1 && line.find("value") != std::string::npos) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw InputError(path + ":" + std::to_string(lineno) + ": expected 'id,value'");
        try {
            out.emplace_back(line.substr(0, comma), std::stod(line.substr(comma + 1)));
        } catch (const std::exception&) {
            throw InputError(path + ":" + std::to_string(lineno) + ": bad value field");
        }
    }
    return out;
}

}  // namespace psfuse
