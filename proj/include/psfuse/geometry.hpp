#pragma once

#include <cmath>
#include <vector>

namespace psfuse {

struct Point2 {
    double x = 0.0;
    double y = 0.0;
};

inline double dist(const Point2& a, const Point2& b) {
    return std::hypot(a.x - b.x, a.y - b.y);
}

/// Axis-aligned rectangle [x0,x1] x [y0,y1].
struct Rect {
    double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    double area() const { return width() * height(); }
    double diameter() const { return std::hypot(width(), height()); }
    bool valid() const { return x1 > x0 && y1 > y0; }
    bool contains(const Point2& p) const {
        return p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1;
    }
    Point2 center() const { return {0.5 * (x0 + x1), 0.5 * (y0 + y1)}; }
    Rect expanded(double margin) const {
        return {x0 - margin, y0 - margin, x1 + margin, y1 + margin};
    }
};

/// Closed ring, vertices in order (either orientation), no repeated last vertex.
using Polygon = std::vector<Point2>;

/// Signed area (positive for counter-clockwise rings).
double polygon_signed_area(const Polygon& poly);

inline double polygon_area(const Polygon& poly) { return std::abs(polygon_signed_area(poly)); }

Point2 polygon_centroid(const Polygon& poly);

/// Sutherland-Hodgman clip of a convex polygon against a rectangle.
Polygon clip_polygon_rect(const Polygon& poly, const Rect& clip);

/// Point-in-polygon with boundary counted as inside.
bool point_in_polygon_closed(const Point2& p, const Polygon& poly);

}  // namespace psfuse
