#pragma once

#include <optional>
#include <string>

#include "psfuse/inference.hpp"
#include "psfuse/model.hpp"

namespace psfuse {

/// How to rebuild the mesh a fit used: a structured spec or a mesh file.
struct MeshRef {
    bool structured = true;
    Rect domain{0.0, 0.0, 1.0, 1.0};
    double edge = 0.05;
    double extension = 0.2;
    std::string file;

    Mesh build() const;
};

/// Everything fit.json stores: the model description, data file references
/// and the posterior summaries + hyper grid needed to re-run prediction.
struct FitFile {
    Variant variant = Variant::PSmelding;
    Priors priors;
    MeshRef mesh;
    std::string points_path, areas_path, areas_geom_path;
    FitResult result;
};

void write_fit_json(const FitFile& fit, const std::string& path);
FitFile read_fit_json(const std::string& path);

void write_field_csv(const FitResult& result, const std::string& path);

void write_pred_csv(std::span<const Point2> targets, const Eigen::VectorXd& mean,
                    const Eigen::VectorXd& sd, const Eigen::VectorXd* exc_prob,
                    const std::string& path);
std::vector<Point2> read_targets_csv(const std::string& path);

/// Model-spec JSON: {variant, priors{...}, mesh{...}, tau_gamma}; unknown
/// keys are rejected.
struct SpecFile {
    std::optional<Variant> variant;
    Priors priors;
    std::optional<MeshRef> mesh;
};

SpecFile read_spec_json(const std::string& path);

/// Atomic write (temp file + rename).
void write_text_atomic(const std::string& path, const std::string& contents);

}  // namespace psfuse
