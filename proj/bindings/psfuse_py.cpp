#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>

#include "psfuse/errors.hpp"
#include "psfuse/fit_io.hpp"
#include "psfuse/inference.hpp"
#include "psfuse/metrics.hpp"
#include "psfuse/model.hpp"
#include "psfuse/simulate.hpp"

namespace py = pybind11;
using namespace psfuse;

namespace {

std::vector<Point2> to_points(const Eigen::MatrixXd& xy) {
    if (xy.cols() != 2) throw ConfigError("expected an (n, 2) coordinate array");
    std::vector<Point2> pts(static_cast<std::size_t>(xy.rows()));
    for (Eigen::Index i = 0; i < xy.rows(); ++i) pts[static_cast<std::size_t>(i)] = {xy(i, 0), xy(i, 1)};
    return pts;
}

Eigen::MatrixXd from_points(const std::vector<Point2>& pts) {
    Eigen::MatrixXd xy(static_cast<Eigen::Index>(pts.size()), 2);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        xy(static_cast<Eigen::Index>(i), 0) = pts[i].x;
        xy(static_cast<Eigen::Index>(i), 1) = pts[i].y;
    }
    return xy;
}

py::dict summary_dict(const HyperSummary& s) {
    py::dict d;
    d["mean"] = s.mean;
    d["sd"] = s.sd;
    d["q025"] = s.q025;
    d["q975"] = s.q975;
    return d;
}

/// Dense (rows, cols, values, shape) view of a sparse projection matrix.
py::tuple sparse_triplets(const SpMat& a) {
    std::vector<int> rows, cols;
    std::vector<double> vals;
    rows.reserve(static_cast<std::size_t>(a.nonZeros()));
    cols.reserve(static_cast<std::size_t>(a.nonZeros()));
    vals.reserve(static_cast<std::size_t>(a.nonZeros()));
    for (int k = 0; k < a.outerSize(); ++k) {
        for (SpMat::InnerIterator it(a, k); it; ++it) {
            rows.push_back(static_cast<int>(it.row()));
            cols.push_back(static_cast<int>(it.col()));
            vals.push_back(it.value());
        }
    }
    return py::make_tuple(rows, cols, vals, py::make_tuple(a.rows(), a.cols()));
}

Dataset make_dataset(const Eigen::MatrixXd& point_xy, const Eigen::VectorXd& point_values,
                     std::optional<std::tuple<int, int, double, double, double, double>> area_grid,
                     std::optional<Eigen::VectorXd> area_values) {
    Dataset data;
    data.point_locs = to_points(point_xy);
    if (point_values.size() != static_cast<Eigen::Index>(data.point_locs.size()))
        throw ConfigError("point values and coordinates disagree in length");
    data.point_values = point_values;
    if (area_grid) {
        const auto [nx, ny, x0, y0, x1, y1] = *area_grid;
        data.areas = grid_areas(nx, ny, Rect{x0, y0, x1, y1});
        if (!area_values || area_values->size() != data.areas.size())
            throw ConfigError("areal values missing or of wrong length");
        data.area_values = *area_values;
    }
    return data;
}

/// A fitted model bundled with everything prediction needs.
struct PyFit {
    std::shared_ptr<const Mesh> mesh;
    AssembledModel model;
    FitResult result;

    py::dict summaries() const {
        py::dict d;
        for (const auto& [name, s] : result.hyper) d[name.c_str()] = summary_dict(s);
        d["theta_micro"] = summary_dict(result.theta_micro);
        d["mu"] = summary_dict(result.mu);
        d["alpha"] = summary_dict(result.alpha);
        return d;
    }

    py::dict predict_at(const Eigen::MatrixXd& xy, std::optional<double> threshold, int jobs) const {
        FitControls controls;
        controls.jobs = jobs;
        const auto targets = to_points(xy);
        const Prediction p = predict(result, model, targets, controls);
        py::dict d;
        d["mean"] = p.mean;
        d["sd"] = p.sd;
        if (threshold)
            d["exc_prob"] = exceedance_prob(result, model, targets, *threshold, controls);
        return d;
    }
};

PyFit fit_dataset(const Dataset& data, const std::string& variant, double mesh_edge,
                  double extension, std::optional<Rect> domain, double tau_gamma, int jobs) {
    PyFit out;
    Rect box;
    if (domain) {
        box = *domain;
    } else if (data.areas.grid) {
        box = data.areas.grid->box;
    } else {
        double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
        for (const Point2& p : data.point_locs) {
            x0 = std::min(x0, p.x);
            y0 = std::min(y0, p.y);
            x1 = std::max(x1, p.x);
            y1 = std::max(y1, p.y);
        }
        box = {x0, y0, x1, y1};
    }
    out.mesh = std::make_shared<Mesh>(build_structured_mesh(box, mesh_edge, extension));

    ModelSpec spec;
    spec.variant = variant_from_name(variant);
    spec.mesh = out.mesh;
    double sd = 1.0;
    if (data.point_values.size() > 1) {
        const double mean = data.point_values.mean();
        sd = std::sqrt((data.point_values.array() - mean).square().sum() /
                       (data.point_values.size() - 1));
    }
    spec.priors = default_priors_for(box, sd);
    if (tau_gamma > 0.0) spec.priors.tau_gamma = tau_gamma;

    out.model = assemble(spec, data);
    FitControls controls;
    controls.jobs = jobs;
    out.result = fit(out.model, controls);
    return out;
}

}  // namespace

PYBIND11_MODULE(_psfuse, m) {
    m.doc() = "Fusion of point and areal spatial data under preferential sampling";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<GeometryError>(m, "GeometryError", PyExc_ValueError);
    py::register_exception<OutOfDomainError>(m, "OutOfDomainError", PyExc_ValueError);
    py::register_exception<NumericalError>(m, "NumericalError", PyExc_RuntimeError);
    py::register_exception<InputError>(m, "InputError", PyExc_ValueError);

    py::class_<Rect>(m, "Rect")
        .def(py::init<double, double, double, double>(), py::arg("x0"), py::arg("y0"),
             py::arg("x1"), py::arg("y1"))
        .def_readwrite("x0", &Rect::x0)
        .def_readwrite("y0", &Rect::y0)
        .def_readwrite("x1", &Rect::x1)
        .def_readwrite("y1", &Rect::y1)
        .def("area", &Rect::area);

    py::class_<Mesh, std::shared_ptr<Mesh>>(m, "Mesh")
        .def_property_readonly("n_nodes", &Mesh::n_nodes)
        .def_property_readonly("n_triangles", &Mesh::n_triangles)
        .def_property_readonly("nodes", [](const Mesh& mesh) { return from_points(mesh.nodes); })
        .def_property_readonly("triangles",
                               [](const Mesh& mesh) {
                                   Eigen::MatrixXi t(mesh.n_triangles(), 3);
                                   for (int k = 0; k < mesh.n_triangles(); ++k)
                                       for (int a = 0; a < 3; ++a)
                                           t(k, a) = mesh.triangles[static_cast<std::size_t>(k)][a];
                                   return t;
                               })
        .def_property_readonly("domain", [](const Mesh& mesh) { return mesh.domain_bbox; })
        .def("__repr__", [](const Mesh& mesh) {
            return "<psfuse.Mesh with " + std::to_string(mesh.n_nodes()) + " nodes, " +
                   std::to_string(mesh.n_triangles()) + " triangles>";
        });

    m.def("build_structured_mesh", &build_structured_mesh, py::arg("bbox"),
          py::arg("target_edge"), py::arg("extension_factor") = 0.2);

    m.def(
        "fem_matrices",
        [](const Mesh& mesh) {
            const FemMatrices fem = assemble_fem(mesh);
            py::dict d;
            d["mass"] = sparse_triplets(fem.mass);
            d["stiffness"] = sparse_triplets(fem.stiffness);
            d["mass_lumped"] = fem.mass_lumped;
            return d;
        },
        py::arg("mesh"), "P1 mass/stiffness matrices as (rows, cols, values, shape) triplets");

    m.def(
        "dual_weights",
        [](const Mesh& mesh, std::optional<Rect> clip) {
            return dual_weights(mesh, clip ? *clip : mesh.domain_bbox).weights;
        },
        py::arg("mesh"), py::arg("clip_to") = std::nullopt);

    m.def(
        "project_points",
        [](const Mesh& mesh, const Eigen::MatrixXd& xy) {
            return sparse_triplets(project_points(mesh, to_points(xy)).A);
        },
        py::arg("mesh"), py::arg("locations"));

    m.def(
        "project_areas",
        [](const Mesh& mesh, int nx, int ny, const Rect& box) {
            return sparse_triplets(project_areas(mesh, grid_areas(nx, ny, box)).A);
        },
        py::arg("mesh"), py::arg("nx"), py::arg("ny"), py::arg("box"));

    py::class_<MaternParams>(m, "MaternParams")
        .def_static("from_range", &MaternParams::from_range, py::arg("sigma"), py::arg("rho"),
                    py::arg("nu") = 1.0)
        .def_static("from_scale", &MaternParams::from_scale, py::arg("sigma"), py::arg("s"),
                    py::arg("nu") = 1.0)
        .def_readonly("sigma", &MaternParams::sigma)
        .def_readonly("range_rho", &MaternParams::range_rho)
        .def_readonly("nu", &MaternParams::nu)
        .def_property_readonly("kappa", &MaternParams::kappa)
        .def_property_readonly("theta_micro", &MaternParams::theta_micro);

    m.def("matern_cov", &matern_cov, py::arg("h"), py::arg("params"));

    m.def(
        "sample_grf",
        [](const Mesh& mesh, const MaternParams& params, std::uint64_t seed) {
            return sample_grf(spde_precision(assemble_fem(mesh), params), seed);
        },
        py::arg("mesh"), py::arg("params"), py::arg("seed"),
        "One zero-mean draw of the SPDE field at the mesh nodes");

    py::class_<ScenarioConfig>(m, "ScenarioConfig")
        .def(py::init<>())
        .def_readwrite("range_rho", &ScenarioConfig::range_rho)
        .def_readwrite("sigma", &ScenarioConfig::sigma)
        .def_readwrite("theta_micro", &ScenarioConfig::theta_micro)
        .def_readwrite("gamma", &ScenarioConfig::gamma)
        .def_readwrite("n_points", &ScenarioConfig::n_points)
        .def_readwrite("n_areas", &ScenarioConfig::n_areas)
        .def_readwrite("tau_s", &ScenarioConfig::tau_s)
        .def_readwrite("tau_B", &ScenarioConfig::tau_B)
        .def_readwrite("mu", &ScenarioConfig::mu)
        .def_readwrite("alpha", &ScenarioConfig::alpha)
        .def_readwrite("seed", &ScenarioConfig::seed)
        .def_readwrite("sim_mesh_edge", &ScenarioConfig::sim_mesh_edge);

    m.def("table1_scenario", &table1_scenario, py::arg("id"),
          "Preset (rho, theta, gamma) combinations, ids 1-6");

    py::class_<Dataset>(m, "Dataset")
        .def(py::init(&make_dataset), py::arg("point_xy"), py::arg("point_values"),
             py::arg("area_grid") = std::nullopt, py::arg("area_values") = std::nullopt)
        .def_property_readonly("n_points", &Dataset::n_points)
        .def_property_readonly("n_areas", &Dataset::n_areas)
        .def_property_readonly("point_xy",
                               [](const Dataset& d) { return from_points(d.point_locs); })
        .def_readonly("point_values", &Dataset::point_values)
        .def_readonly("area_values", &Dataset::area_values)
        .def_readonly("preferential", &Dataset::preferential)
        .def_property_readonly("pred_xy", [](const Dataset& d) { return from_points(d.pred_grid); })
        .def_readonly("true_at_grid", &Dataset::true_at_grid);

    m.def(
        "simulate_scenario",
        [](const ScenarioConfig& config, int rep) { return simulate_scenario(config, rep); },
        py::arg("config"), py::arg("replicate") = 0);

    py::class_<PyFit>(m, "Fit")
        .def_property_readonly("converged",
                               [](const PyFit& f) { return f.result.diagnostics.converged; })
        .def_property_readonly("node_mean", [](const PyFit& f) { return f.result.node_mean; })
        .def_property_readonly("node_sd", [](const PyFit& f) { return f.result.node_sd; })
        .def_property_readonly("n_grid_points",
                               [](const PyFit& f) { return f.result.grid.size(); })
        .def("summaries", &PyFit::summaries)
        .def("predict", &PyFit::predict_at, py::arg("targets"),
             py::arg("threshold") = std::nullopt, py::arg("jobs") = 1);

    m.def("fit", &fit_dataset, py::arg("dataset"), py::arg("variant") = "psmelding",
          py::arg("mesh_edge") = 0.05, py::arg("extension") = 0.2,
          py::arg("domain") = std::nullopt, py::arg("tau_gamma") = 0.0, py::arg("jobs") = 1,
          "Assemble and fit one model; returns a Fit with summaries and prediction");

    m.def(
        "surface_scores",
        [](const Eigen::VectorXd& mean, const Eigen::VectorXd& sd, const Eigen::VectorXd& truth,
           double ref_sd) {
            const SurfaceScore s = surface_scores(
                mean, mean, sd, truth, Eigen::VectorXd::Constant(truth.size(), ref_sd));
            py::dict d;
            d["mse"] = s.mse;
            d["mae"] = s.mae;
            d["wd"] = s.wd;
            return d;
        },
        py::arg("pred_mean"), py::arg("pred_sd"), py::arg("truth"), py::arg("ref_sd"));

    m.def("interval_score", &interval_score, py::arg("lower"), py::arg("upper"), py::arg("y"),
          py::arg("level_alpha") = 0.05);

#ifdef PSFUSE_VERSION
    m.attr("__version__") = PSFUSE_VERSION;
#else
    m.attr("__version__") = "dev";
#endif
}
