#include "psfuse/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>

#include "psfuse/errors.hpp"

namespace psfuse {

double Mesh::triangle_area(int t) const {
    const auto& tri = triangles[static_cast<std::size_t>(t)];
    const Point2& a = nodes[static_cast<std::size_t>(tri[0])];
    const Point2& b = nodes[static_cast<std::size_t>(tri[1])];
    const Point2& c = nodes[static_cast<std::size_t>(tri[2])];
    return 0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y));
}

Mesh build_structured_mesh(const Rect& bbox, double target_edge, double extension_factor) {
    if (!bbox.valid()) throw ConfigError("build_structured_mesh: degenerate bbox");
    if (!(target_edge > 0.0)) throw ConfigError("build_structured_mesh: target_edge must be > 0");
    if (extension_factor < 0.0) throw ConfigError("build_structured_mesh: extension_factor must be >= 0");

    Mesh mesh;
    mesh.domain_bbox = bbox;
    mesh.extension_width = extension_factor * std::max(bbox.width(), bbox.height());
    const Rect ext = mesh.extended_bbox();

    mesh.structured = true;
    mesh.cells_x = std::max(1, static_cast<int>(std::ceil(ext.width() / target_edge - 1e-12)));
    mesh.cells_y = std::max(1, static_cast<int>(std::ceil(ext.height() / target_edge - 1e-12)));
    mesh.hx = ext.width() / mesh.cells_x;
    mesh.hy = ext.height() / mesh.cells_y;

    const int npx = mesh.cells_x + 1;
    const int npy = mesh.cells_y + 1;
    mesh.nodes.reserve(static_cast<std::size_t>(npx) * npy);
    for (int j = 0; j < npy; ++j) {
        for (int i = 0; i < npx; ++i) {
            // snap the last row/column to the exact bbox edge
            const double x = (i == mesh.cells_x) ? ext.x1 : ext.x0 + i * mesh.hx;
            const double y = (j == mesh.cells_y) ? ext.y1 : ext.y0 + j * mesh.hy;
            mesh.nodes.push_back({x, y});
        }
    }

    auto vid = [npx](int i, int j) { return j * npx + i; };
    mesh.triangles.reserve(2u * static_cast<std::size_t>(mesh.cells_x) * mesh.cells_y);
    for (int j = 0; j < mesh.cells_y; ++j) {
        for (int i = 0; i < mesh.cells_x; ++i) {
            const int v00 = vid(i, j);
            const int v10 = vid(i + 1, j);
            const int v01 = vid(i, j + 1);
            const int v11 = vid(i + 1, j + 1);
            // diagonal v00-v11 in every cell keeps interior dual cells equal
            mesh.triangles.push_back({v00, v10, v11});
            mesh.triangles.push_back({v00, v11, v01});
        }
    }
    return mesh;
}

FemMatrices assemble_fem(const Mesh& mesh) {
    const int m = mesh.n_nodes();
    std::vector<Eigen::Triplet<double>> mass_t, stiff_t;
    mass_t.reserve(9u * mesh.triangles.size());
    stiff_t.reserve(9u * mesh.triangles.size());
    Eigen::VectorXd lumped = Eigen::VectorXd::Zero(m);

    for (int t = 0; t < mesh.n_triangles(); ++t) {
        const auto& tri = mesh.triangles[static_cast<std::size_t>(t)];
        const Point2& p0 = mesh.nodes[static_cast<std::size_t>(tri[0])];
        const Point2& p1 = mesh.nodes[static_cast<std::size_t>(tri[1])];
        const Point2& p2 = mesh.nodes[static_cast<std::size_t>(tri[2])];
        const double area = mesh.triangle_area(t);
        if (!(area > 1e-14 * (mesh.extended_bbox().area() / std::max(1, mesh.n_triangles())))) {
            throw GeometryError("assemble_fem: degenerate triangle " + std::to_string(t));
        }
        // gradients of the P1 basis: grad phi_i = rot90(opposite edge) / (2 area)
        const double bx[3] = {p1.y - p2.y, p2.y - p0.y, p0.y - p1.y};
        const double by[3] = {p2.x - p1.x, p0.x - p2.x, p1.x - p0.x};
        for (int a = 0; a < 3; ++a) {
            lumped[tri[a]] += area / 3.0;
            for (int b = 0; b < 3; ++b) {
                mass_t.emplace_back(tri[a], tri[b], area * ((a == b) ? 1.0 / 6.0 : 1.0 / 12.0));
                stiff_t.emplace_back(tri[a], tri[b],
                                     (bx[a] * bx[b] + by[a] * by[b]) / (4.0 * area));
            }
        }
    }

    FemMatrices fem;
    fem.mass.resize(m, m);
    fem.mass.setFromTriplets(mass_t.begin(), mass_t.end());
    fem.stiffness.resize(m, m);
    fem.stiffness.setFromTriplets(stiff_t.begin(), stiff_t.end());
    fem.mass_lumped = lumped;
    return fem;
}

DualWeights dual_weights(const Mesh& mesh, const Rect& clip_to) {
    const Rect ext = mesh.extended_bbox();
    const double tol = 1e-9 * std::max(ext.width(), ext.height());
    if (clip_to.x0 < ext.x0 - tol || clip_to.y0 < ext.y0 - tol || clip_to.x1 > ext.x1 + tol ||
        clip_to.y1 > ext.y1 + tol) {
        throw ConfigError("dual_weights: clip window not inside the extended mesh");
    }

    DualWeights dw;
    dw.weights = Eigen::VectorXd::Zero(mesh.n_nodes());
    dw.integration_points = mesh.nodes;

    // median dual: per triangle, each vertex owns the convex quadrilateral
    // [vertex, edge midpoint, centroid, edge midpoint] of area |T|/3
    for (int t = 0; t < mesh.n_triangles(); ++t) {
        const auto& tri = mesh.triangles[static_cast<std::size_t>(t)];
        const Point2& p0 = mesh.nodes[static_cast<std::size_t>(tri[0])];
        const Point2& p1 = mesh.nodes[static_cast<std::size_t>(tri[1])];
        const Point2& p2 = mesh.nodes[static_cast<std::size_t>(tri[2])];
        const Point2 centroid{(p0.x + p1.x + p2.x) / 3.0, (p0.y + p1.y + p2.y) / 3.0};
        const Point2 pts[3] = {p0, p1, p2};
        for (int a = 0; a < 3; ++a) {
            const Point2& v = pts[a];
            const Point2& nxt = pts[(a + 1) % 3];
            const Point2& prv = pts[(a + 2) % 3];
            const Polygon quad = {v,
                                  {0.5 * (v.x + nxt.x), 0.5 * (v.y + nxt.y)},
                                  centroid,
                                  {0.5 * (v.x + prv.x), 0.5 * (v.y + prv.y)}};
            const Polygon clipped = clip_polygon_rect(quad, clip_to);
            if (clipped.size() >= 3) dw.weights[tri[a]] += polygon_area(clipped);
        }
    }
    return dw;
}

namespace {

std::array<double, 3> barycentric(const Point2& p, const Point2& a, const Point2& b,
                                  const Point2& c) {
    const double det = (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y);
    const double w1 = ((b.x - p.x) * (c.y - p.y) - (c.x - p.x) * (b.y - p.y)) / det;
    const double w2 = ((c.x - p.x) * (a.y - p.y) - (a.x - p.x) * (c.y - p.y)) / det;
    return {w1, w2, 1.0 - w1 - w2};
}

// uniform-bucket triangle index for imported meshes
struct BucketIndex {
    Rect box;
    int nx = 0, ny = 0;
    std::vector<std::vector<int>> buckets;

    explicit BucketIndex(const Mesh& mesh) {
        box = mesh.extended_bbox();
        const int target = std::max(1, static_cast<int>(std::sqrt(mesh.n_triangles() / 2.0)));
        nx = ny = target;
        buckets.resize(static_cast<std::size_t>(nx) * ny);
        for (int t = 0; t < mesh.n_triangles(); ++t) {
            const auto& tri = mesh.triangles[static_cast<std::size_t>(t)];
            double lx = box.x1, ly = box.y1, ux = box.x0, uy = box.y0;
            for (int a = 0; a < 3; ++a) {
                const Point2& p = mesh.nodes[static_cast<std::size_t>(tri[a])];
                lx = std::min(lx, p.x);
                ly = std::min(ly, p.y);
                ux = std::max(ux, p.x);
                uy = std::max(uy, p.y);
            }
            const int i0 = clampi(static_cast<int>((lx - box.x0) / box.width() * nx), 0, nx - 1);
            const int i1 = clampi(static_cast<int>((ux - box.x0) / box.width() * nx), 0, nx - 1);
            const int j0 = clampi(static_cast<int>((ly - box.y0) / box.height() * ny), 0, ny - 1);
            const int j1 = clampi(static_cast<int>((uy - box.y0) / box.height() * ny), 0, ny - 1);
            for (int j = j0; j <= j1; ++j)
                for (int i = i0; i <= i1; ++i)
                    buckets[static_cast<std::size_t>(j) * nx + i].push_back(t);
        }
    }

    static int clampi(int v, int lo, int hi) { return std::max(lo, std::min(hi, v)); }

    const std::vector<int>& candidates(const Point2& p) const {
        const int i = clampi(static_cast<int>((p.x - box.x0) / box.width() * nx), 0, nx - 1);
        const int j = clampi(static_cast<int>((p.y - box.y0) / box.height() * ny), 0, ny - 1);
        return buckets[static_cast<std::size_t>(j) * nx + i];
    }
};

PointLocation locate_in_triangles(const Mesh& mesh, const Point2& p,
                                  std::span<const int> candidates) {
    PointLocation best;
    double best_violation = std::numeric_limits<double>::infinity();
    for (int t : candidates) {
        const auto& tri = mesh.triangles[static_cast<std::size_t>(t)];
        const auto w = barycentric(p, mesh.nodes[static_cast<std::size_t>(tri[0])],
                                   mesh.nodes[static_cast<std::size_t>(tri[1])],
                                   mesh.nodes[static_cast<std::size_t>(tri[2])]);
        const double violation = -std::min({w[0], w[1], w[2]});
        if (violation < best_violation) {
            best_violation = violation;
            best.triangle = t;
            best.bary = w;
        }
        if (violation <= 0.0) break;
    }
    if (best.triangle < 0 || best_violation > 1e-9) best.triangle = -1;
    return best;
}

}  // namespace

PointLocation locate_point(const Mesh& mesh, const Point2& p) {
    const Rect ext = mesh.extended_bbox();
    if (!ext.contains(p)) return {};

    if (mesh.structured) {
        int ci = static_cast<int>((p.x - ext.x0) / mesh.hx);
        int cj = static_cast<int>((p.y - ext.y0) / mesh.hy);
        ci = std::max(0, std::min(mesh.cells_x - 1, ci));
        cj = std::max(0, std::min(mesh.cells_y - 1, cj));
        // two triangles per cell, split along the v00-v11 diagonal
        const int base = 2 * (cj * mesh.cells_x + ci);
        const double lx = (p.x - (ext.x0 + ci * mesh.hx)) / mesh.hx;
        const double ly = (p.y - (ext.y0 + cj * mesh.hy)) / mesh.hy;
        const int cand[2] = {ly <= lx ? base : base + 1, ly <= lx ? base + 1 : base};
        auto loc = locate_in_triangles(mesh, p, cand);
        if (loc.triangle >= 0) return loc;
        // numeric edge case on a cell border: search the 4-neighborhood
        std::vector<int> nearby;
        for (int dj = -1; dj <= 1; ++dj) {
            for (int di = -1; di <= 1; ++di) {
                const int ii = ci + di, jj = cj + dj;
                if (ii < 0 || jj < 0 || ii >= mesh.cells_x || jj >= mesh.cells_y) continue;
                nearby.push_back(2 * (jj * mesh.cells_x + ii));
                nearby.push_back(2 * (jj * mesh.cells_x + ii) + 1);
            }
        }
        return locate_in_triangles(mesh, p, nearby);
    }

    static thread_local const Mesh* cached_mesh = nullptr;
    static thread_local std::unique_ptr<BucketIndex> cached_index;
    if (cached_mesh != &mesh) {
        cached_index = std::make_unique<BucketIndex>(mesh);
        cached_mesh = &mesh;
    }
    return locate_in_triangles(mesh, p, cached_index->candidates(p));
}

ProjectionMatrix project_points(const Mesh& mesh, std::span<const Point2> locations,
                                ProjectionKind kind) {
    ProjectionMatrix proj;
    proj.kind = kind;
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(3 * locations.size());
    for (std::size_t i = 0; i < locations.size(); ++i) {
        const PointLocation loc = locate_point(mesh, locations[i]);
        if (loc.triangle < 0) {
            throw OutOfDomainError("project_points: location " + std::to_string(i) +
                                   " outside the mesh");
        }
        const auto& tri = mesh.triangles[static_cast<std::size_t>(loc.triangle)];
        double w[3] = {loc.bary[0], loc.bary[1], loc.bary[2]};
        double sum = 0.0;
        for (double& v : w) {
            v = std::max(0.0, v);
            sum += v;
        }
        for (int a = 0; a < 3; ++a) {
            const double v = w[a] / sum;
            if (v > 0.0) trips.emplace_back(static_cast<int>(i), tri[a], v);
        }
    }
    proj.A.resize(static_cast<int>(locations.size()), mesh.n_nodes());
    proj.A.setFromTriplets(trips.begin(), trips.end());
    return proj;
}

Rect GridSpec::cell(int j) const {
    const int iy = j / nx;
    const int ix = j % nx;
    const double dx = box.width() / nx;
    const double dy = box.height() / ny;
    return {box.x0 + ix * dx, box.y0 + iy * dy, box.x0 + (ix + 1) * dx, box.y0 + (iy + 1) * dy};
}

int GridSpec::cell_of(const Point2& p) const {
    if (!box.contains(p)) return -1;
    const double dx = box.width() / nx;
    const double dy = box.height() / ny;
    // half-open (lo, hi] cells except the first, so edge nodes go to the
    // smaller-index cell
    auto idx = [](double offset, double step, int n) {
        int i = static_cast<int>(std::ceil(offset / step)) - 1;
        return std::max(0, std::min(n - 1, i));
    };
    return idx(p.y - box.y0, dy, ny) * nx + idx(p.x - box.x0, dx, nx);
}

int AreaSet::size() const {
    return grid ? grid->n_cells() : static_cast<int>(polygons.size());
}

Polygon AreaSet::ring(int j) const {
    if (grid) {
        const Rect c = grid->cell(j);
        return {{c.x0, c.y0}, {c.x1, c.y0}, {c.x1, c.y1}, {c.x0, c.y1}};
    }
    return polygons[static_cast<std::size_t>(j)];
}

Point2 AreaSet::centroid(int j) const {
    if (grid) return grid->cell(j).center();
    return polygon_centroid(polygons[static_cast<std::size_t>(j)]);
}

AreaSet grid_areas(int nx, int ny, const Rect& box) {
    if (nx <= 0 || ny <= 0 || !box.valid()) throw ConfigError("grid_areas: invalid grid spec");
    AreaSet set;
    set.grid = GridSpec{nx, ny, box};
    return set;
}

ProjectionMatrix project_areas(const Mesh& mesh, const AreaSet& areas) {
    const int n_areas = areas.size();
    ProjectionMatrix proj;
    proj.kind = ProjectionKind::ArealAverage;

    std::vector<std::vector<int>> members(static_cast<std::size_t>(n_areas));
    if (areas.grid) {
        for (int k = 0; k < mesh.n_nodes(); ++k) {
            const int j = areas.grid->cell_of(mesh.nodes[static_cast<std::size_t>(k)]);
            if (j >= 0) members[static_cast<std::size_t>(j)].push_back(k);
        }
    } else {
        for (int j = 0; j < n_areas; ++j) {
            const Polygon& ring = areas.polygons[static_cast<std::size_t>(j)];
            for (int k = 0; k < mesh.n_nodes(); ++k) {
                if (point_in_polygon_closed(mesh.nodes[static_cast<std::size_t>(k)], ring))
                    members[static_cast<std::size_t>(j)].push_back(k);
            }
        }
    }

    std::vector<Eigen::Triplet<double>> trips;
    for (int j = 0; j < n_areas; ++j) {
        auto& nodes_in = members[static_cast<std::size_t>(j)];
        if (nodes_in.empty()) {
            // keep coarse-mesh runs alive: snap to the node nearest the centroid
            const Point2 c = areas.centroid(j);
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int k = 0; k < mesh.n_nodes(); ++k) {
                const double d = dist(c, mesh.nodes[static_cast<std::size_t>(k)]);
                if (d < best_d) {
                    best_d = d;
                    best = k;
                }
            }
            nodes_in.push_back(best);
            proj.warnings.push_back("area " + std::to_string(j) +
                                    " contains no mesh node; using nearest node " +
                                    std::to_string(best));
        }
        const double w = 1.0 / static_cast<double>(nodes_in.size());
        for (int k : nodes_in) trips.emplace_back(j, k, w);
    }
    proj.A.resize(n_areas, mesh.n_nodes());
    proj.A.setFromTriplets(trips.begin(), trips.end());
    return proj;
}

// --- IO ---------------------------------------------------------------

void write_mesh(const Mesh& mesh, std::ostream& os) {
    os.precision(17);
    os << mesh.n_nodes() << " " << mesh.n_triangles() << "\n";
    for (const Point2& p : mesh.nodes) os << p.x << " " << p.y << "\n";
    for (const auto& t : mesh.triangles) os << t[0] << " " << t[1] << " " << t[2] << "\n";
}

Mesh read_mesh(std::istream& is) {
    Mesh mesh;
    int m = 0, t = 0;
    if (!(is >> m >> t) || m < 3 || t < 1) throw InputError("mesh file: bad header");
    mesh.nodes.resize(static_cast<std::size_t>(m));
    double lx = std::numeric_limits<double>::infinity(), ly = lx;
    double ux = -lx, uy = -lx;
    for (int i = 0; i < m; ++i) {
        if (!(is >> mesh.nodes[static_cast<std::size_t>(i)].x >>
              mesh.nodes[static_cast<std::size_t>(i)].y))
            throw InputError("mesh file: bad node line " + std::to_string(i));
        lx = std::min(lx, mesh.nodes[static_cast<std::size_t>(i)].x);
        ly = std::min(ly, mesh.nodes[static_cast<std::size_t>(i)].y);
        ux = std::max(ux, mesh.nodes[static_cast<std::size_t>(i)].x);
        uy = std::max(uy, mesh.nodes[static_cast<std::size_t>(i)].y);
    }
    mesh.triangles.resize(static_cast<std::size_t>(t));
    for (int k = 0; k < t; ++k) {
        auto& tri = mesh.triangles[static_cast<std::size_t>(k)];
        if (!(is >> tri[0] >> tri[1] >> tri[2]))
            throw InputError("mesh file: bad triangle line " + std::to_string(k));
        for (int a = 0; a < 3; ++a) {
            if (tri[a] < 0 || tri[a] >= m)
                throw InputError("mesh file: triangle " + std::to_string(k) +
                                 " references missing node " + std::to_string(tri[a]));
        }
    }
    mesh.domain_bbox = {lx, ly, ux, uy};
    mesh.extension_width = 0.0;
    mesh.structured = false;
    // consistent orientation: flip any clockwise triangle
    for (int k = 0; k < mesh.n_triangles(); ++k) {
        if (mesh.triangle_area(k) < 0.0)
            std::swap(mesh.triangles[static_cast<std::size_t>(k)][1],
                      mesh.triangles[static_cast<std::size_t>(k)][2]);
    }
    return mesh;
}

void write_mesh_file(const Mesh& mesh, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw InputError("cannot open " + path + " for writing");
    write_mesh(mesh, os);
}

Mesh read_mesh_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open " + path);
    return read_mesh(is);
}

namespace {

std::vector<double> parse_numbers(const std::string& text) {
    std::string cleaned = text;
    std::replace(cleaned.begin(), cleaned.end(), ',', ' ');
    std::istringstream ss(cleaned);
    std::vector<double> out;
    double v;
    while (ss >> v) out.push_back(v);
    return out;
}

}  // namespace

AreaSet read_areas_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open " + path);
    std::string first;
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) {
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        lines.push_back(line);
    }
    if (lines.empty()) throw InputError(path + ": empty area geometry file");

    if (lines[0].find(':') == std::string::npos) {
        const auto nums = parse_numbers(lines[0]);
        if (nums.size() != 6) throw InputError(path + ": grid spec needs nx ny x0 y0 x1 y1");
        const int nx = static_cast<int>(nums[0]);
        const int ny = static_cast<int>(nums[1]);
        return grid_areas(nx, ny, Rect{nums[2], nums[3], nums[4], nums[5]});
    }

    AreaSet set;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const auto colon = lines[i].find(':');
        if (colon == std::string::npos)
            throw InputError(path + ":" + std::to_string(i + 1) + ": expected 'id: x y x y ...'");
        const auto nums = parse_numbers(lines[i].substr(colon + 1));
        if (nums.size() < 6 || nums.size() % 2 != 0)
            throw InputError(path + ":" + std::to_string(i + 1) + ": ring needs >= 3 x y pairs");
        Polygon poly;
        for (std::size_t k = 0; k + 1 < nums.size(); k += 2) poly.push_back({nums[k], nums[k + 1]});
        set.polygons.push_back(std::move(poly));
        std::string id = lines[i].substr(0, colon);
        id.erase(0, id.find_first_not_of(" \t"));
        id.erase(id.find_last_not_of(" \t") + 1);
        set.ids.push_back(id);
    }
    return set;
}

void write_areas_file(const AreaSet& areas, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw InputError("cannot open " + path + " for writing");
    os.precision(17);
    if (areas.grid) {
        os << areas.grid->nx << " " << areas.grid->ny << " " << areas.grid->box.x0 << " "
           << areas.grid->box.y0 << " " << areas.grid->box.x1 << " " << areas.grid->box.y1 << "\n";
        return;
    }
    for (int j = 0; j < areas.size(); ++j) {
        os << (j < static_cast<int>(areas.ids.size()) ? areas.ids[static_cast<std::size_t>(j)]
                                                      : std::to_string(j))
           << ":";
        for (const Point2& p : areas.polygons[static_cast<std::size_t>(j)])
            os << " " << p.x << " " << p.y;
        os << "\n";
    }
}

}  // namespace psfuse
