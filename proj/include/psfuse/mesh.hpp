#pragma once

#include <Eigen/Sparse>
#include <array>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "psfuse/geometry.hpp"

namespace psfuse {

using SpMat = Eigen::SparseMatrix<double>;

/// Triangulation of an extended rectangular domain. Nodes of structured
/// meshes sit on a regular lattice, which makes point location O(1);
/// imported meshes fall back to a bucket index.
struct Mesh {
    std::vector<Point2> nodes;
    std::vector<std::array<int, 3>> triangles;  // CCW after construction
    Rect domain_bbox;
    double extension_width = 0.0;  // added on each side of domain_bbox

    // lattice acceleration, only set for structured meshes
    bool structured = false;
    int cells_x = 0, cells_y = 0;
    double hx = 0.0, hy = 0.0;

    int n_nodes() const { return static_cast<int>(nodes.size()); }
    int n_triangles() const { return static_cast<int>(triangles.size()); }
    Rect extended_bbox() const { return domain_bbox.expanded(extension_width); }

    double triangle_area(int t) const;
};

/// Regular criss-cross triangulation of bbox widened by
/// extension_factor * max(width, height) on all sides. Node spacing never
/// exceeds target_edge.
Mesh build_structured_mesh(const Rect& bbox, double target_edge, double extension_factor);

/// P1 mass and stiffness matrices. The lumped mass is the row sum of the
/// consistent mass and equals the nodal dual-cell areas.
struct FemMatrices {
    SpMat mass;                  // consistent
    Eigen::VectorXd mass_lumped;
    SpMat stiffness;
};

FemMatrices assemble_fem(const Mesh& mesh);

/// Dual-cell quadrature: integration points are the mesh nodes, weights are
/// the areas of the median dual cells clipped to a window. Nodes whose cell
/// misses the window get weight exactly 0.
struct DualWeights {
    Eigen::VectorXd weights;
    std::vector<Point2> integration_points;
};

DualWeights dual_weights(const Mesh& mesh, const Rect& clip_to);

enum class ProjectionKind { PointBarycentric, ArealAverage, PredictionGrid };

/// Sparse n_obs x m projection onto nodal basis weights. Every row is
/// nonnegative and sums to 1.
struct ProjectionMatrix {
    SpMat A;
    ProjectionKind kind = ProjectionKind::PointBarycentric;
    std::vector<std::string> warnings;
};

ProjectionMatrix project_points(const Mesh& mesh, std::span<const Point2> locations,
                                ProjectionKind kind = ProjectionKind::PointBarycentric);

/// Regular nx x ny partition of a rectangle into grid-cell areas,
/// row-major from (x0, y0).
struct GridSpec {
    int nx = 0, ny = 0;
    Rect box;

    int n_cells() const { return nx * ny; }
    Rect cell(int j) const;
    /// Cell owning a point under the half-open rule: a node on a shared
    /// edge belongs to the cell with the smaller index. Returns -1 outside.
    int cell_of(const Point2& p) const;
};

/// Areal geometries: either a grid spec or an explicit list of polygons.
struct AreaSet {
    std::optional<GridSpec> grid;
    std::vector<Polygon> polygons;
    std::vector<std::string> ids;

    int size() const;
    Polygon ring(int j) const;     // outline of area j
    Point2 centroid(int j) const;
};

AreaSet grid_areas(int nx, int ny, const Rect& box);

/// Equal-weight rows over the mesh nodes contained in each area (closed-set
/// rule; grid cells use half-open tie-breaking so rows partition the nodes).
/// An area holding no node falls back to the node nearest its centroid and
/// records a warning.
ProjectionMatrix project_areas(const Mesh& mesh, const AreaSet& areas);

/// Triangle index and barycentric weights for one location.
struct PointLocation {
    int triangle = -1;
    std::array<double, 3> bary{};
};

PointLocation locate_point(const Mesh& mesh, const Point2& p);

// --- plain-text mesh format: "m t", m lines "x y", t lines "i j k" ---
void write_mesh(const Mesh& mesh, std::ostream& os);
Mesh read_mesh(std::istream& is);
void write_mesh_file(const Mesh& mesh, const std::string& path);
Mesh read_mesh_file(const std::string& path);

// --- area geometry files: "nx ny x0 y0 x1 y1" or one "id: x y x y ..." per line ---
AreaSet read_areas_file(const std::string& path);
void write_areas_file(const AreaSet& areas, const std::string& path);

}  // namespace psfuse
