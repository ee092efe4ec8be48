#include "psfuse/fit_io.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "psfuse/errors.hpp"

namespace psfuse {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
    if (!obj.is_object()) throw InputError(where + ": expected a JSON object");
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        if (!allowed.count(key)) throw InputError(where + ": unknown key '" + key + "'");
    }
}

json scale_prior_to_json(const ScalePrior& p) {
    if (p.kind == ScalePrior::Kind::Pc) return json{{"type", "pc"}, {"u", p.u}, {"tail", p.tail}};
    return json{{"type", "lognormal"}, {"mean_log", p.mean_log}, {"sd_log", p.sd_log}};
}

ScalePrior scale_prior_from_json(const json& j, const std::string& where) {
    ScalePrior p;
    const std::string type = j.value("type", "pc");
    if (type == "pc") {
        reject_unknown(j, {"type", "u", "tail"}, where);
        p.kind = ScalePrior::Kind::Pc;
        p.u = j.at("u").get<double>();
        p.tail = j.at("tail").get<double>();
    } else if (type == "lognormal") {
        reject_unknown(j, {"type", "mean_log", "sd_log"}, where);
        p.kind = ScalePrior::Kind::LogNormal;
        p.mean_log = j.at("mean_log").get<double>();
        p.sd_log = j.at("sd_log").get<double>();
    } else {
        throw InputError(where + ": prior type must be 'pc' or 'lognormal'");
    }
    return p;
}

json priors_to_json(const Priors& p) {
    return json{
        {"sigma", scale_prior_to_json(p.sigma)},
        {"range", scale_prior_to_json(p.range)},
        {"tau_s", {{"shape", p.tau_s_shape}, {"rate", p.tau_s_rate}}},
        {"tau_B", {{"shape", p.tau_B_shape}, {"rate", p.tau_B_rate}}},
        {"intercept_sd", p.intercept_sd},
    };
}

Priors priors_from_json(const json& j, Priors base) {
    reject_unknown(j, {"sigma", "range", "tau_s", "tau_B", "intercept_sd"}, "priors");
    if (j.contains("sigma")) base.sigma = scale_prior_from_json(j["sigma"], "priors.sigma");
    if (j.contains("range")) base.range = scale_prior_from_json(j["range"], "priors.range");
    if (j.contains("tau_s")) {
        reject_unknown(j["tau_s"], {"shape", "rate"}, "priors.tau_s");
        base.tau_s_shape = j["tau_s"].value("shape", base.tau_s_shape);
        base.tau_s_rate = j["tau_s"].value("rate", base.tau_s_rate);
    }
    if (j.contains("tau_B")) {
        reject_unknown(j["tau_B"], {"shape", "rate"}, "priors.tau_B");
        base.tau_B_shape = j["tau_B"].value("shape", base.tau_B_shape);
        base.tau_B_rate = j["tau_B"].value("rate", base.tau_B_rate);
    }
    if (j.contains("intercept_sd")) base.intercept_sd = j["intercept_sd"].get<double>();
    return base;
}

json mesh_ref_to_json(const MeshRef& m) {
    if (!m.structured) return json{{"file", m.file}};
    return json{{"edge", m.edge},
                {"extension", m.extension},
                {"domain", {m.domain.x0, m.domain.y0, m.domain.x1, m.domain.y1}}};
}

MeshRef mesh_ref_from_json(const json& j) {
    MeshRef m;
    if (j.contains("file")) {
        reject_unknown(j, {"file"}, "mesh");
        m.structured = false;
        m.file = j["file"].get<std::string>();
        return m;
    }
    reject_unknown(j, {"edge", "extension", "domain"}, "mesh");
    m.structured = true;
    if (j.contains("edge")) m.edge = j["edge"].get<double>();
    if (j.contains("extension")) m.extension = j["extension"].get<double>();
    if (j.contains("domain")) {
        const auto d = j["domain"];
        if (!d.is_array() || d.size() != 4) throw InputError("mesh.domain: expected [x0,y0,x1,y1]");
        m.domain = Rect{d[0].get<double>(), d[1].get<double>(), d[2].get<double>(),
                        d[3].get<double>()};
    }
    return m;
}

json summary_to_json(const HyperSummary& s) {
    return json{{"mean", s.mean}, {"sd", s.sd}, {"q025", s.q025}, {"q975", s.q975}};
}

HyperSummary summary_from_json(const json& j) {
    HyperSummary s;
    s.mean = j.at("mean").get<double>();
    s.sd = j.at("sd").get<double>();
    s.q025 = j.at("q025").get<double>();
    s.q975 = j.at("q975").get<double>();
    return s;
}

}  // namespace

Mesh MeshRef::build() const {
    if (!structured) return read_mesh_file(file);
    return build_structured_mesh(domain, edge, extension);
}

void write_text_atomic(const std::string& path, const std::string& contents) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw InputError("cannot open " + tmp + " for writing");
        os << contents;
    }
    std::filesystem::rename(tmp, path);
}

void write_fit_json(const FitFile& fit, const std::string& path) {
    json j;
    j["variant"] = variant_name(fit.variant);
    j["priors"] = priors_to_json(fit.priors);
    j["tau_gamma"] = fit.priors.tau_gamma;
    j["mesh"] = mesh_ref_to_json(fit.mesh);
    json data;
    data["points"] = fit.points_path;
    if (!fit.areas_path.empty()) {
        data["areas"] = fit.areas_path;
        data["areas_geom"] = fit.areas_geom_path;
    }
    j["data"] = data;

    const FitResult& r = fit.result;
    j["converged"] = r.diagnostics.converged;
    j["diagnostics"] = {{"converged", r.diagnostics.converged},
                        {"inner_converged", r.diagnostics.inner_converged},
                        {"n_eval", r.diagnostics.n_eval},
                        {"runtime_s", r.diagnostics.runtime_s},
                        {"message", r.diagnostics.message}};
    json hs;
    for (const auto& [name, s] : r.hyper) hs[name] = summary_to_json(s);
    j["hyper_summaries"] = hs;
    j["derived"] = {{"theta_micro", summary_to_json(r.theta_micro)}};
    j["fixed_effects"] = {{"mu", summary_to_json(r.mu)}, {"alpha", summary_to_json(r.alpha)}};
    j["map_zeta"] = std::vector<double>(r.map_zeta.data(), r.map_zeta.data() + r.map_zeta.size());
    json grid = json::array();
    for (const GridPoint& gp : r.grid) {
        grid.push_back({{"zeta", std::vector<double>(gp.zeta.data(), gp.zeta.data() + gp.zeta.size())},
                        {"log_post", gp.log_post},
                        {"weight", gp.weight}});
    }
    j["hyper_grid"] = grid;
    write_text_atomic(path, j.dump(2) + "\n");
}

FitFile read_fit_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw InputError(path + ": " + e.what());
    }
    try {
        FitFile fit;
        fit.variant = variant_from_name(j.at("variant").get<std::string>());
        fit.priors = priors_from_json(j.at("priors"), Priors{});
        fit.priors.tau_gamma = j.value("tau_gamma", 1.0);
        fit.mesh = mesh_ref_from_json(j.at("mesh"));
        const json& data = j.at("data");
        fit.points_path = data.value("points", "");
        fit.areas_path = data.value("areas", "");
        fit.areas_geom_path = data.value("areas_geom", "");

        FitResult& r = fit.result;
        r.variant = fit.variant;
        r.layout = HyperLayout::for_variant(fit.variant);
        r.diagnostics.converged = j.value("converged", false);
        for (const auto& [name, s] : j.at("hyper_summaries").items())
            r.hyper.emplace_back(name, summary_from_json(s));
        r.theta_micro = summary_from_json(j.at("derived").at("theta_micro"));
        r.mu = summary_from_json(j.at("fixed_effects").at("mu"));
        r.alpha = summary_from_json(j.at("fixed_effects").at("alpha"));
        const auto mz = j.at("map_zeta").get<std::vector<double>>();
        r.map_zeta = Eigen::Map<const Eigen::VectorXd>(mz.data(), static_cast<Eigen::Index>(mz.size()));
        for (const json& g : j.at("hyper_grid")) {
            GridPoint gp;
            const auto z = g.at("zeta").get<std::vector<double>>();
            gp.zeta = Eigen::Map<const Eigen::VectorXd>(z.data(), static_cast<Eigen::Index>(z.size()));
            gp.log_post = g.at("log_post").get<double>();
            gp.weight = g.at("weight").get<double>();
            r.grid.push_back(std::move(gp));
        }
        return fit;
    } catch (const json::exception& e) {
        throw InputError(path + ": " + e.what());
    }
}

void write_field_csv(const FitResult& result, const std::string& path) {
    std::ostringstream os;
    os.precision(10);
    os << "node,mean,sd\n";
    for (Eigen::Index i = 0; i < result.node_mean.size(); ++i)
        os << i << "," << result.node_mean[i] << "," << result.node_sd[i] << "\n";
    write_text_atomic(path, os.str());
}

void write_pred_csv(std::span<const Point2> targets, const Eigen::VectorXd& mean,
                    const Eigen::VectorXd& sd, const Eigen::VectorXd* exc_prob,
                    const std::string& path) {
    std::ostringstream os;
    os.precision(10);
    os << "x,y,mean,sd" << (exc_prob ? ",exc_prob" : "") << "\n";
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto k = static_cast<Eigen::Index>(i);
        os << targets[i].x << "," << targets[i].y << "," << mean[k] << "," << sd[k];
        if (exc_prob) os << "," << (*exc_prob)[k];
        os << "\n";
    }
    write_text_atomic(path, os.str());
}

std::vector<Point2> read_targets_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open " + path);
    std::vector<Point2> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (line.empty()) continue;
        double x, y;
        if (std::sscanf(line.c_str(), "%lf,%lf", &x, &y) != 2) {
            if (lineno == 1) continue;  // header
            throw InputError(path + ":" + std::to_string(lineno) + ": expected 'x,y[,...]'");
        }
        out.push_back({x, y});
    }
    return out;
}

SpecFile read_spec_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw InputError(path + ": " + e.what());
    }
    reject_unknown(j, {"variant", "priors", "mesh", "tau_gamma"}, path);
    SpecFile spec;
    try {
        if (j.contains("variant")) spec.variant = variant_from_name(j["variant"].get<std::string>());
        if (j.contains("priors")) spec.priors = priors_from_json(j["priors"], Priors{});
        if (j.contains("tau_gamma")) spec.priors.tau_gamma = j["tau_gamma"].get<double>();
        if (j.contains("mesh")) spec.mesh = mesh_ref_from_json(j["mesh"]);
    } catch (const json::exception& e) {
        throw InputError(path + ": " + e.what());
    }
    return spec;
}

}  // namespace psfuse
