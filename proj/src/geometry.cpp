#include "psfuse/geometry.hpp"

namespace psfuse {

double polygon_signed_area(const Polygon& poly) {
    const std::size_t n = poly.size();
    if (n < 3) return 0.0;
    double twice = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Point2& a = poly[i];
        const Point2& b = poly[(i + 1) % n];
        twice += a.x * b.y - b.x * a.y;
    }
    return 0.5 * twice;
}

Point2 polygon_centroid(const Polygon& poly) {
    const std::size_t n = poly.size();
    if (n == 0) return {};
    double a6 = 0.0, cx = 0.0, cy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Point2& p = poly[i];
        const Point2& q = poly[(i + 1) % n];
        const double cross = p.x * q.y - q.x * p.y;
        a6 += cross;
        cx += (p.x + q.x) * cross;
        cy += (p.y + q.y) * cross;
    }
    if (std::abs(a6) < 1e-300) {  // degenerate: fall back to vertex mean
        double sx = 0.0, sy = 0.0;
        for (const Point2& p : poly) { sx += p.x; sy += p.y; }
        return {sx / static_cast<double>(n), sy / static_cast<double>(n)};
    }
    return {cx / (3.0 * a6), cy / (3.0 * a6)};
}

namespace {

// Clip against one half-plane keep(p) >= 0, with line(p) == 0 on the edge.
template <typename Keep, typename Line>
Polygon clip_half_plane(const Polygon& poly, Keep inside, Line line) {
    Polygon out;
    const std::size_t n = poly.size();
    if (n == 0) return out;
    out.reserve(n + 2);
    for (std::size_t i = 0; i < n; ++i) {
        const Point2& cur = poly[i];
        const Point2& nxt = poly[(i + 1) % n];
        const bool cin = inside(cur);
        const bool nin = inside(nxt);
        if (cin) out.push_back(cur);
        if (cin != nin) {
            const double dc = line(cur);
            const double dn = line(nxt);
            const double t = dc / (dc - dn);
            out.push_back({cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)});
        }
    }
    return out;
}

}  // namespace

Polygon clip_polygon_rect(const Polygon& poly, const Rect& clip) {
    Polygon p = poly;
    p = clip_half_plane(p, [&](const Point2& q) { return q.x >= clip.x0; },
                        [&](const Point2& q) { return q.x - clip.x0; });
    p = clip_half_plane(p, [&](const Point2& q) { return q.x <= clip.x1; },
                        [&](const Point2& q) { return clip.x1 - q.x; });
    p = clip_half_plane(p, [&](const Point2& q) { return q.y >= clip.y0; },
                        [&](const Point2& q) { return q.y - clip.y0; });
    p = clip_half_plane(p, [&](const Point2& q) { return q.y <= clip.y1; },
                        [&](const Point2& q) { return clip.y1 - q.y; });
    return p;
}

bool point_in_polygon_closed(const Point2& p, const Polygon& poly) {
    const std::size_t n = poly.size();
    if (n < 3) return false;
    // boundary check first: distance from p to each segment
    for (std::size_t i = 0; i < n; ++i) {
        const Point2& a = poly[i];
        const Point2& b = poly[(i + 1) % n];
        const double ux = b.x - a.x, uy = b.y - a.y;
        const double len2 = ux * ux + uy * uy;
        double t = len2 > 0.0 ? ((p.x - a.x) * ux + (p.y - a.y) * uy) / len2 : 0.0;
        t = std::fmin(1.0, std::fmax(0.0, t));
        const double dx = p.x - (a.x + t * ux);
        const double dy = p.y - (a.y + t * uy);
        if (dx * dx + dy * dy < 1e-24) return true;
    }
    // even-odd crossing test
    bool in = false;
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const Point2& a = poly[i];
        const Point2& b = poly[j];
        if ((a.y > p.y) != (b.y > p.y)) {
            const double xint = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if (p.x < xint) in = !in;
        }
    }
    return in;
}

}  // namespace psfuse
