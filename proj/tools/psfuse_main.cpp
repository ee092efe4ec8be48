// psfuse: simulate, fit, predict and reproduce full scenario studies for
// point/areal data fusion under preferential sampling.

#include <CLI11.hpp>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>

#include "psfuse/errors.hpp"
#include "psfuse/fit_io.hpp"
#include "psfuse/inference.hpp"
#include "psfuse/metrics.hpp"
#include "psfuse/model.hpp"
#include "psfuse/parallel.hpp"
#include "psfuse/simulate.hpp"

namespace fs = std::filesystem;
using namespace psfuse;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitDiagnostic = 2;

std::uint64_t effective_seed(std::uint64_t flag_seed) {
    if (const char* env = std::getenv("PSFUSE_SEED")) {
        try {
            return std::stoull(env);
        } catch (const std::exception&) {
            throw ConfigError("PSFUSE_SEED is not an integer");
        }
    }
    return flag_seed;
}

Rect parse_rect(const std::string& text, const char* what) {
    std::string s = text;
    std::replace(s.begin(), s.end(), ',', ' ');
    std::istringstream ss(s);
    Rect r;
    if (!(ss >> r.x0 >> r.y0 >> r.x1 >> r.y1) || !r.valid())
        throw ConfigError(std::string(what) + ": expected x0,y0,x1,y1 with x1>x0, y1>y0");
    return r;
}

std::pair<int, int> parse_grid(const std::string& text) {
    const auto x = text.find('x');
    if (x == std::string::npos) throw ConfigError("--grid: expected NxM, e.g. 50x50");
    try {
        const int nx = std::stoi(text.substr(0, x));
        const int ny = std::stoi(text.substr(x + 1));
        if (nx <= 0 || ny <= 0) throw std::invalid_argument("");
        return {nx, ny};
    } catch (const std::exception&) {
        throw ConfigError("--grid: expected NxM with positive integers");
    }
}

void write_pgm(const std::string& path, int nx, int ny, const Eigen::VectorXd& values, double lo,
               double hi) {
    std::ostringstream os;
    os << "P2\n# range " << lo << " " << hi << "\n" << nx << " " << ny << "\n255\n";
    const double span = hi > lo ? hi - lo : 1.0;
    // row-major from the top so the image reads like a map
    for (int j = ny - 1; j >= 0; --j) {
        for (int i = 0; i < nx; ++i) {
            const double v = values[j * nx + i];
            const int g = std::clamp(static_cast<int>(std::lround((v - lo) / span * 255.0)), 0, 255);
            os << g << (i + 1 == nx ? "" : " ");
        }
        os << "\n";
    }
    write_text_atomic(path, os.str());
}

struct ScenarioFlags {
    int table1 = 0;
    double rho = 0.2, sigma = 1.0, gamma = 1.0;
    int points = 100, areas = 25, reps = 1;
    std::uint64_t seed = 1;
    double tau_s = 10.0, tau_B = 10.0, mu = 0.0, alpha = 0.05;
    double sim_edge = 0.025, sim_extension = 0.2;
    std::string domain = "0,0,1,1";
    std::string pred_grid = "50x50";
};

ScenarioConfig make_scenario_config(const ScenarioFlags& f) {
    ScenarioConfig cfg;
    if (f.table1 > 0) {
        cfg = table1_scenario(f.table1);
        if (f.points != 100 && f.points != 250)
            throw ConfigError("--table1 uses 100 or 250 points");
        if (f.areas != 0 && f.areas != 4 && f.areas != 25 && f.areas != 100)
            throw ConfigError("--table1 uses 0, 4, 25 or 100 areas");
    } else {
        cfg.range_rho = f.rho;
        cfg.sigma = f.sigma;
        cfg.gamma = f.gamma;
        cfg.theta_micro = MaternParams::from_range(f.sigma, f.rho).theta_micro();
    }
    cfg.n_points = f.points;
    cfg.n_areas = f.areas;
    cfg.n_replicates = f.reps;
    cfg.seed = effective_seed(f.seed);
    cfg.tau_s = f.tau_s;
    cfg.tau_B = f.tau_B;
    cfg.mu = f.mu;
    cfg.alpha = f.alpha;
    cfg.sim_mesh_edge = f.sim_edge;
    cfg.sim_mesh_extension = f.sim_extension;
    cfg.domain = parse_rect(f.domain, "--domain");
    const auto [nx, ny] = parse_grid(f.pred_grid);
    cfg.pred_nx = nx;
    cfg.pred_ny = ny;
    cfg.validate();
    return cfg;
}

// --- fit plumbing shared by `fit` and `scenario` ------------------------

struct FitInputs {
    Dataset data;
    MeshRef mesh_ref;
    std::shared_ptr<const Mesh> mesh;
    Priors priors;
    Variant variant = Variant::PSmelding;
};

Dataset load_dataset(const std::string& points_path, const std::string& areas_path,
                     const std::string& areas_geom_path) {
    Dataset data;
    if (!points_path.empty()) {
        const auto pts = read_points_csv(points_path);
        data.point_locs.reserve(pts.size());
        data.point_values.resize(static_cast<Eigen::Index>(pts.size()));
        for (std::size_t i = 0; i < pts.size(); ++i) {
            data.point_locs.push_back(pts[i].first);
            data.point_values[static_cast<Eigen::Index>(i)] = pts[i].second;
        }
    }
    if (!areas_path.empty()) {
        if (areas_geom_path.empty())
            throw ConfigError("areal values need their geometry (--areas-geom)");
        data.areas = read_areas_file(areas_geom_path);
        const auto vals = read_values_csv(areas_path);
        if (static_cast<int>(vals.size()) != data.areas.size())
            throw InputError(areas_path + ": " + std::to_string(vals.size()) +
                             " values for " + std::to_string(data.areas.size()) + " areas");
        data.area_values.resize(static_cast<Eigen::Index>(vals.size()));
        for (std::size_t j = 0; j < vals.size(); ++j)
            data.area_values[static_cast<Eigen::Index>(j)] = vals[j].second;
    }
    return data;
}

Rect data_bbox(const Dataset& data) {
    double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
    auto grow = [&](const Point2& p) {
        x0 = std::min(x0, p.x);
        y0 = std::min(y0, p.y);
        x1 = std::max(x1, p.x);
        y1 = std::max(y1, p.y);
    };
    for (const Point2& p : data.point_locs) grow(p);
    if (data.n_areas() > 0) {
        for (int j = 0; j < data.n_areas(); ++j)
            for (const Point2& p : data.areas.ring(j)) grow(p);
    }
    if (!(x1 > x0) || !(y1 > y0)) throw ConfigError("cannot infer a domain from the data");
    return {x0, y0, x1, y1};
}

double point_value_sd(const Dataset& data) {
    if (data.n_points() < 2) return 1.0;
    const double mean = data.point_values.mean();
    return std::sqrt((data.point_values.array() - mean).square().sum() /
                     (data.point_values.size() - 1));
}

int run_fit_to_dir(const FitInputs& inputs, const FitControls& controls, const std::string& out_dir,
                   const std::string& points_path, const std::string& areas_path,
                   const std::string& areas_geom_path, bool quiet) {
    ModelSpec spec;
    spec.variant = inputs.variant;
    spec.priors = inputs.priors;
    spec.mesh = inputs.mesh;

    const AssembledModel model = assemble(spec, inputs.data);
    for (const auto& w : model.warnings) std::cerr << "warning: " << w << "\n";

    const FitResult result = fit(model, controls);

    fs::create_directories(out_dir);
    FitFile file;
    file.variant = inputs.variant;
    file.priors = inputs.priors;
    file.mesh = inputs.mesh_ref;
    file.points_path = points_path;
    file.areas_path = areas_path;
    file.areas_geom_path = areas_geom_path;
    file.result = result;
    write_fit_json(file, (fs::path(out_dir) / "fit.json").string());
    write_field_csv(result, (fs::path(out_dir) / "field.csv").string());

    if (!quiet) {
        std::cout << "model: " << variant_name(inputs.variant) << ", "
                  << (result.diagnostics.converged ? "converged" : "NOT converged") << " ("
                  << result.diagnostics.n_eval << " evaluations, " << result.diagnostics.runtime_s
                  << " s)\n";
        for (const auto& [name, s] : result.hyper)
            std::cout << "  " << name << ": mean " << s.mean << "  95% [" << s.q025 << ", "
                      << s.q975 << "]\n";
        std::cout << "  theta_micro: mean " << result.theta_micro.mean << "  95% ["
                  << result.theta_micro.q025 << ", " << result.theta_micro.q975 << "]\n";
        std::cout << "  mu: mean " << result.mu.mean << "  95% [" << result.mu.q025 << ", "
                  << result.mu.q975 << "]\n";
    }
    return result.diagnostics.converged ? kExitOk : kExitDiagnostic;
}

// --- subcommands --------------------------------------------------------

int cmd_simulate(const ScenarioFlags& flags, const std::string& out) {
    const ScenarioConfig cfg = make_scenario_config(flags);
    const Simulator sim(cfg);
    for (int r = 0; r < cfg.n_replicates; ++r) {
        const Dataset data = sim.replicate(r);
        write_dataset(data, cfg, (fs::path(out) / ("rep_" + std::to_string(r))).string());
    }
    std::cout << "wrote " << cfg.n_replicates << " replicate(s) under " << out << "\n";
    return kExitOk;
}

struct FitFlags {
    std::string points, areas, areas_geom, model = "psmelding", spec_file, mesh_file;
    std::string domain;
    double mesh_edge = 0.0, extension = 0.2;
    double tau_gamma = 0.0;
    std::string out = ".";
    int jobs = 1;
};

FitInputs prepare_fit_inputs(const FitFlags& f) {
    FitInputs inputs;
    inputs.variant = variant_from_name(f.model);
    inputs.data = load_dataset(f.points, f.areas, f.areas_geom);
    if (inputs.variant == Variant::PSgeo && inputs.data.n_areas() > 0)
        std::cerr << "warning: psgeo ignores the supplied areal data\n";

    std::optional<SpecFile> spec_file;
    if (!f.spec_file.empty()) {
        spec_file = read_spec_json(f.spec_file);
        if (spec_file->variant && variant_name(*spec_file->variant) != variant_name(inputs.variant) &&
            !f.model.empty())
            inputs.variant = *spec_file->variant;
    }

    if (!f.mesh_file.empty()) {
        inputs.mesh_ref.structured = false;
        inputs.mesh_ref.file = f.mesh_file;
    } else if (spec_file && spec_file->mesh) {
        inputs.mesh_ref = *spec_file->mesh;
    } else {
        const Rect domain = f.domain.empty() ? data_bbox(inputs.data) : parse_rect(f.domain, "--domain");
        inputs.mesh_ref.structured = true;
        inputs.mesh_ref.domain = domain;
        inputs.mesh_ref.extension = f.extension;
        inputs.mesh_ref.edge =
            f.mesh_edge > 0.0 ? f.mesh_edge : std::max(domain.width(), domain.height()) / 20.0;
    }
    Mesh mesh = inputs.mesh_ref.build();
    if (!f.domain.empty() && !inputs.mesh_ref.structured)
        mesh.domain_bbox = parse_rect(f.domain, "--domain");
    inputs.mesh = std::make_shared<Mesh>(std::move(mesh));

    inputs.priors = spec_file ? spec_file->priors
                              : default_priors_for(inputs.mesh->domain_bbox, point_value_sd(inputs.data));
    if (f.tau_gamma > 0.0) inputs.priors.tau_gamma = f.tau_gamma;
    return inputs;
}

int cmd_fit(const FitFlags& f) {
    FitInputs inputs = prepare_fit_inputs(f);
    FitControls controls;
    controls.jobs = f.jobs;
    return run_fit_to_dir(inputs, controls, f.out, f.points, f.areas, f.areas_geom, false);
}

int cmd_predict(const std::string& fit_path, const std::string& grid, const std::string& targets_csv,
                std::optional<double> threshold, const std::string& out, int jobs) {
    FitFile file = read_fit_json(fit_path);

    // data paths resolve relative to the fit file
    const fs::path base = fs::path(fit_path).parent_path();
    auto resolve = [&](const std::string& p) {
        if (p.empty() || fs::path(p).is_absolute() || fs::exists(p)) return p;
        return (base / p).string();
    };
    const Dataset data = load_dataset(resolve(file.points_path), resolve(file.areas_path),
                                      resolve(file.areas_geom_path));

    ModelSpec spec;
    spec.variant = file.variant;
    spec.priors = file.priors;
    spec.mesh = std::make_shared<Mesh>(file.mesh.build());
    const AssembledModel model = assemble(spec, data);

    std::vector<Point2> targets;
    if (!grid.empty()) {
        const auto [nx, ny] = parse_grid(grid);
        targets = grid_centers(nx, ny, model.domain);
    } else if (!targets_csv.empty()) {
        targets = read_targets_csv(targets_csv);
    } else {
        throw ConfigError("predict needs --grid or --targets");
    }

    FitControls controls;
    controls.jobs = jobs;
    const Prediction pred = predict(file.result, model, targets, controls);
    if (threshold) {
        const Eigen::VectorXd exc = exceedance_prob(file.result, model, targets, *threshold, controls);
        write_pred_csv(targets, pred.mean, pred.sd, &exc, out);
    } else {
        write_pred_csv(targets, pred.mean, pred.sd, nullptr, out);
    }
    std::cout << "wrote " << targets.size() << " predictions to " << out << "\n";
    return kExitOk;
}

struct ScenarioRunFlags {
    ScenarioFlags sim;
    std::string models = "psmelding,melding,psgeo";
    std::string out;
    int jobs = 1;
    double mesh_edge = 0.05, extension = 0.2;
    double wd_ref_sd = -1.0;  // default: nugget sd from tau_s
    std::string spec_file;
};

int cmd_scenario(const ScenarioRunFlags& f) {
    const ScenarioConfig cfg = make_scenario_config(f.sim);
    std::vector<Variant> variants;
    {
        std::stringstream ss(f.models);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (!tok.empty()) variants.push_back(variant_from_name(tok));
        }
        if (variants.empty()) throw ConfigError("--models: empty list");
    }

    const Simulator sim(cfg);
    const auto mesh = std::make_shared<Mesh>(
        build_structured_mesh(cfg.domain, f.mesh_edge, f.extension));
    Priors priors = default_priors_for(cfg.domain, cfg.sigma);
    if (!f.spec_file.empty()) priors = read_spec_json(f.spec_file).priors;
    const double ref_sd = f.wd_ref_sd > 0.0 ? f.wd_ref_sd : 1.0 / std::sqrt(cfg.tau_s);

    struct RepResult {
        bool ok = false;
        std::string failure;
        SurfaceScore surface;
        double mu_mean = 0, mu_lo = 0, mu_hi = 0;
        double theta_mean = 0, theta_lo = 0, theta_hi = 0;
        double gamma_mean = 0, gamma_lo = 0, gamma_hi = 0;
        bool has_gamma = false;
    };
    const int n_models = static_cast<int>(variants.size());
    std::vector<std::vector<RepResult>> results(
        static_cast<std::size_t>(n_models),
        std::vector<RepResult>(static_cast<std::size_t>(cfg.n_replicates)));

    fs::create_directories(f.out);
    std::mutex io_mutex;

    parallel_for(cfg.n_replicates, f.jobs, [&](int r) {
        const Dataset data = sim.replicate(r);
        const fs::path rep_dir = fs::path(f.out) / ("rep_" + std::to_string(r));
        fs::create_directories(rep_dir);
        {
            const double lo = data.true_at_grid.minCoeff();
            const double hi = data.true_at_grid.maxCoeff();
            std::lock_guard<std::mutex> lock(io_mutex);
            write_pgm((rep_dir / "heatmap_truth.pgm").string(), cfg.pred_nx, cfg.pred_ny,
                      data.true_at_grid, lo, hi);
        }

        for (int mi = 0; mi < n_models; ++mi) {
            RepResult& out = results[static_cast<std::size_t>(mi)][static_cast<std::size_t>(r)];
            try {
                ModelSpec spec;
                spec.variant = variants[static_cast<std::size_t>(mi)];
                spec.priors = priors;
                spec.mesh = mesh;
                const AssembledModel model = assemble(spec, data);
                const FitResult fitres = fit(model, FitControls{});
                const Prediction pred = predict(fitres, model, data.pred_grid, FitControls{});

                const Eigen::VectorXd ref = Eigen::VectorXd::Constant(pred.mean.size(), ref_sd);
                out.surface = surface_scores(pred.mean, pred.mean, pred.sd, data.true_at_grid, ref);
                out.mu_mean = fitres.mu.mean;
                out.mu_lo = fitres.mu.q025;
                out.mu_hi = fitres.mu.q975;
                out.theta_mean = fitres.theta_micro.mean;
                out.theta_lo = fitres.theta_micro.q025;
                out.theta_hi = fitres.theta_micro.q975;
                if (const HyperSummary* g = fitres.find("gamma"); g && fitres.layout.has(Hyper::Gamma)) {
                    out.has_gamma = true;
                    out.gamma_mean = g->mean;
                    out.gamma_lo = g->q025;
                    out.gamma_hi = g->q975;
                }
                out.ok = true;

                if (spec.variant == Variant::PSmelding) {
                    const double lo = std::min(pred.mean.minCoeff(), data.true_at_grid.minCoeff());
                    const double hi = std::max(pred.mean.maxCoeff(), data.true_at_grid.maxCoeff());
                    std::lock_guard<std::mutex> lock(io_mutex);
                    write_pgm((rep_dir / "heatmap_psmelding.pgm").string(), cfg.pred_nx,
                              cfg.pred_ny, pred.mean, lo, hi);
                }
            } catch (const std::exception& e) {
                out.ok = false;
                out.failure = e.what();
            }
        }
    });

    // scores.csv
    std::ostringstream scores;
    scores.precision(10);
    scores << "scenario_id,model,areas,points,rho,metric,mean,q025,q975\n";
    const std::string scen_id =
        f.sim.table1 > 0 ? std::to_string(f.sim.table1)
                         : ("rho" + std::to_string(cfg.range_rho) + "_g" + std::to_string(cfg.gamma));
    std::ostringstream failures;
    failures << "scenario_id,replicate,model,reason\n";
    int n_failures = 0;

    std::ostringstream params;
    params.precision(10);
    params << "scenario_id,model,parameter,true_value,avg_posterior_mean,inscore,cp\n";

    for (int mi = 0; mi < n_models; ++mi) {
        const std::string mname = variant_name(variants[static_cast<std::size_t>(mi)]);
        std::vector<double> mse, mae, wd;
        std::vector<double> mu_m, mu_l, mu_h, th_m, th_l, th_h, ga_m, ga_l, ga_h;
        for (int r = 0; r < cfg.n_replicates; ++r) {
            const RepResult& rr = results[static_cast<std::size_t>(mi)][static_cast<std::size_t>(r)];
            if (!rr.ok) {
                ++n_failures;
                std::string reason = rr.failure;
                std::replace(reason.begin(), reason.end(), ',', ';');
                std::replace(reason.begin(), reason.end(), '\n', ' ');
                failures << scen_id << "," << r << "," << mname << "," << reason << "\n";
                continue;
            }
            mse.push_back(rr.surface.mse);
            mae.push_back(rr.surface.mae);
            wd.push_back(rr.surface.wd);
            mu_m.push_back(rr.mu_mean);
            mu_l.push_back(rr.mu_lo);
            mu_h.push_back(rr.mu_hi);
            th_m.push_back(rr.theta_mean);
            th_l.push_back(rr.theta_lo);
            th_h.push_back(rr.theta_hi);
            if (rr.has_gamma) {
                ga_m.push_back(rr.gamma_mean);
                ga_l.push_back(rr.gamma_lo);
                ga_h.push_back(rr.gamma_hi);
            }
        }
        if (mse.empty()) continue;
        auto emit = [&](const char* metric, const std::vector<double>& v) {
            const Aggregate a = aggregate_scenario(v);
            scores << scen_id << "," << mname << "," << cfg.n_areas << "," << cfg.n_points << ","
                   << cfg.range_rho << "," << metric << "," << a.mean << "," << a.q025 << ","
                   << a.q975 << "\n";
        };
        emit("mse", mse);
        emit("mae", mae);
        emit("wd", wd);

        auto emit_param = [&](const char* pname, double truth, const std::vector<double>& m,
                              const std::vector<double>& l, const std::vector<double>& h) {
            if (m.empty()) return;
            const ParamScore ps = param_score(m, l, h, truth);
            params << scen_id << "," << mname << "," << pname << "," << truth << ","
                   << ps.avg_posterior_mean << "," << ps.inscore << "," << ps.cp << "\n";
        };
        emit_param("mu", cfg.mu, mu_m, mu_l, mu_h);
        emit_param("theta", cfg.theta_micro, th_m, th_l, th_h);
        emit_param("gamma", cfg.gamma, ga_m, ga_l, ga_h);
    }

    write_text_atomic((fs::path(f.out) / "scores.csv").string(), scores.str());
    write_text_atomic((fs::path(f.out) / "params.csv").string(), params.str());
    if (n_failures > 0) {
        write_text_atomic((fs::path(f.out) / "failures.csv").string(), failures.str());
        std::cerr << n_failures << " replicate fit(s) failed; see failures.csv\n";
    }
    std::cout << "scenario " << scen_id << ": " << cfg.n_replicates << " replicates, "
              << n_models << " model(s); results in " << f.out << "\n";
    return kExitOk;
}

int cmd_mesh(const std::string& bbox, double edge, double extension, const std::string& in,
             const std::string& out) {
    Mesh mesh;
    if (!in.empty()) {
        mesh = read_mesh_file(in);
    } else {
        mesh = build_structured_mesh(parse_rect(bbox, "--bbox"), edge, extension);
    }
    std::cout << "mesh: " << mesh.n_nodes() << " nodes, " << mesh.n_triangles() << " triangles\n";
    if (!out.empty()) {
        write_mesh_file(mesh, out);
        std::cout << "wrote " << out << "\n";
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bayesian fusion of point and areal spatial data under preferential sampling"};
    app.require_subcommand(1);

    // simulate
    auto* sim_cmd = app.add_subcommand("simulate", "generate synthetic scenario datasets");
    ScenarioFlags sim_flags;
    std::string sim_out;
    sim_cmd->add_option("--table1", sim_flags.table1, "scenario preset id (1-6)")
        ->check(CLI::Range(1, 6));
    sim_cmd->add_option("--rho", sim_flags.rho, "practical range of the latent field");
    sim_cmd->add_option("--sigma", sim_flags.sigma, "marginal sd of the latent field");
    sim_cmd->add_option("--gamma", sim_flags.gamma, "preferential degree");
    sim_cmd->add_option("--points", sim_flags.points, "number of point observations");
    sim_cmd->add_option("--areas", sim_flags.areas, "number of areal observations (0 or k^2)");
    sim_cmd->add_option("--tau-s", sim_flags.tau_s, "point nugget precision");
    sim_cmd->add_option("--tau-B", sim_flags.tau_B, "areal nugget precision");
    sim_cmd->add_option("--mu", sim_flags.mu, "observation intercept");
    sim_cmd->add_option("--alpha", sim_flags.alpha, "log-intensity intercept");
    sim_cmd->add_option("--reps", sim_flags.reps, "number of replicates");
    sim_cmd->add_option("--seed", sim_flags.seed, "base seed (PSFUSE_SEED overrides)");
    sim_cmd->add_option("--sim-edge", sim_flags.sim_edge, "simulation mesh edge length");
    sim_cmd->add_option("--extension", sim_flags.sim_extension, "mesh extension factor");
    sim_cmd->add_option("--domain", sim_flags.domain, "domain rectangle x0,y0,x1,y1");
    sim_cmd->add_option("--pred-grid", sim_flags.pred_grid, "prediction grid, e.g. 50x50");
    sim_cmd->add_option("--out", sim_out, "output directory")->required();

    // fit
    auto* fit_cmd = app.add_subcommand("fit", "fit a model to point/areal data");
    FitFlags fit_flags;
    fit_cmd->add_option("--points", fit_flags.points, "points.csv (x,y,value)")->required();
    fit_cmd->add_option("--areas", fit_flags.areas, "areas.csv (area_id,value)");
    fit_cmd->add_option("--areas-geom", fit_flags.areas_geom, "area geometry file");
    fit_cmd->add_option("--model", fit_flags.model, "psmelding | melding | psgeo");
    fit_cmd->add_option("--spec", fit_flags.spec_file, "model spec JSON (variant, priors, mesh)");
    fit_cmd->add_option("--mesh-file", fit_flags.mesh_file, "import a mesh instead of building one");
    fit_cmd->add_option("--mesh-edge", fit_flags.mesh_edge, "target mesh edge (default: max side / 20)");
    fit_cmd->add_option("--extension", fit_flags.extension, "mesh extension factor");
    fit_cmd->add_option("--domain", fit_flags.domain, "domain rectangle x0,y0,x1,y1");
    fit_cmd->add_option("--tau-gamma", fit_flags.tau_gamma, "prior sd of gamma");
    fit_cmd->add_option("--out", fit_flags.out, "output directory")->required();
    fit_cmd->add_option("--jobs", fit_flags.jobs, "parallel grid evaluations");

    // predict
    auto* pred_cmd = app.add_subcommand("predict", "posterior prediction from a saved fit");
    std::string pred_fit, pred_grid, pred_targets, pred_out = "pred.csv";
    double pred_threshold = std::numeric_limits<double>::quiet_NaN();
    int pred_jobs = 1;
    pred_cmd->add_option("--fit", pred_fit, "fit.json from a previous fit")->required();
    pred_cmd->add_option("--grid", pred_grid, "prediction grid over the domain, e.g. 50x50");
    pred_cmd->add_option("--targets", pred_targets, "CSV of target coordinates (x,y)");
    pred_cmd->add_option("--threshold", pred_threshold, "adds an exceedance probability column");
    pred_cmd->add_option("--out", pred_out, "output CSV");
    pred_cmd->add_option("--jobs", pred_jobs, "parallel grid evaluations");

    // scenario
    auto* scen_cmd = app.add_subcommand("scenario", "simulate, fit and score a full scenario");
    ScenarioRunFlags scen_flags;
    scen_cmd->add_option("--table1", scen_flags.sim.table1, "scenario preset id (1-6)")
        ->check(CLI::Range(1, 6));
    scen_cmd->add_option("--rho", scen_flags.sim.rho, "practical range");
    scen_cmd->add_option("--sigma", scen_flags.sim.sigma, "marginal sd");
    scen_cmd->add_option("--gamma", scen_flags.sim.gamma, "preferential degree");
    scen_cmd->add_option("--points", scen_flags.sim.points, "point observations");
    scen_cmd->add_option("--areas", scen_flags.sim.areas, "areal observations (0 or k^2)");
    scen_cmd->add_option("--reps", scen_flags.sim.reps, "replicates");
    scen_cmd->add_option("--seed", scen_flags.sim.seed, "base seed (PSFUSE_SEED overrides)");
    scen_cmd->add_option("--sim-edge", scen_flags.sim.sim_edge, "simulation mesh edge");
    scen_cmd->add_option("--models", scen_flags.models, "comma list of models to fit");
    scen_cmd->add_option("--mesh-edge", scen_flags.mesh_edge, "inference mesh edge");
    scen_cmd->add_option("--extension", scen_flags.extension, "inference mesh extension factor");
    scen_cmd->add_option("--wd-ref-sd", scen_flags.wd_ref_sd,
                         "reference sd for the Wasserstein score (default: nugget sd)");
    scen_cmd->add_option("--spec", scen_flags.spec_file, "model spec JSON for priors");
    scen_cmd->add_option("--jobs", scen_flags.jobs, "parallel replicates");
    scen_cmd->add_option("--out", scen_flags.out, "output directory")->required();

    // mesh
    auto* mesh_cmd = app.add_subcommand("mesh", "build or inspect a mesh file");
    std::string mesh_bbox = "0,0,1,1", mesh_in, mesh_out;
    double mesh_edge = 0.05, mesh_extension = 0.2;
    mesh_cmd->add_option("--bbox", mesh_bbox, "domain rectangle x0,y0,x1,y1");
    mesh_cmd->add_option("--edge", mesh_edge, "target edge length");
    mesh_cmd->add_option("--extension", mesh_extension, "extension factor");
    mesh_cmd->add_option("--in", mesh_in, "read an existing mesh file");
    mesh_cmd->add_option("--out", mesh_out, "write the mesh to this path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitError;
    }

    try {
        if (sim_cmd->parsed()) return cmd_simulate(sim_flags, sim_out);
        if (fit_cmd->parsed()) return cmd_fit(fit_flags);
        if (pred_cmd->parsed()) {
            std::optional<double> thr;
            if (!std::isnan(pred_threshold)) thr = pred_threshold;
            return cmd_predict(pred_fit, pred_grid, pred_targets, thr, pred_out, pred_jobs);
        }
        if (scen_cmd->parsed()) {
            scen_flags.sim.seed = effective_seed(scen_flags.sim.seed);
            return cmd_scenario(scen_flags);
        }
        if (mesh_cmd->parsed()) return cmd_mesh(mesh_bbox, mesh_edge, mesh_extension, mesh_in, mesh_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    }
    return kExitError;
}
