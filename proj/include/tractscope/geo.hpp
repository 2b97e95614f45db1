#pragma once

#include <optional>
#include <string>
#include <vector>

namespace tractscope::geo {

struct LatLon {
    double lat = 0.0;
    double lon = 0.0;
};

struct PixelXY {
    double x = 0.0;
    double y = 0.0;
};

// Closed ring: first vertex equals last, at least 4 vertices.
using Ring = std::vector<LatLon>;

struct Polygon {
    Ring outer;
    std::vector<Ring> holes;
};

// Multipolygon support: a geometry is one or more polygons with holes.
using Geometry = std::vector<Polygon>;

struct TractRecord {
    std::string id;
    std::string region;
    Geometry geometry;
    std::optional<double> prevalence;    // percentage in [0,100]
    std::optional<double> income;        // non-negative
    std::optional<double> land_area_km2; // positive
};

struct TileSpec {
    std::string tract_id;
    LatLon center;
    int zoom = 18;
    int width_px = 400;
    int height_px = 400;
    // Position in the tract's pixel grid; also the tile's identity for
    // ordering (ascending (row, col)).
    int row = 0;
    int col = 0;
};

struct PoiProbe {
    LatLon center;
    double radius_m = 0.0;
};

// Which GeoJSON feature properties carry the tract fields. An empty name
// means "not present in this dataset".
struct PropertyMap {
    std::string id = "tract_id";
    std::string region = "region";
    std::string prevalence = "prevalence";
    std::string income = "income";
    std::string area = "land_area_km2";
};

inline constexpr double kMercatorMaxLat = 85.05112878;
inline constexpr double kEarthRadiusM = 6371000.0;       // mean Earth radius
inline constexpr double kMetersPerDegree = kEarthRadiusM * 3.14159265358979323846 / 180.0;

// --- GeoJSON ingestion ------------------------------------------------------

std::vector<TractRecord> parse_tract_collection(const std::string& geojson_text,
                                                const PropertyMap& props = {});

// --- Web Mercator -----------------------------------------------------------

// Continuous global pixel coordinates on a 256*2^zoom square map.
PixelXY latlon_to_world_pixel(double lat, double lon, int zoom);
LatLon world_pixel_to_latlon(double px, double py, int zoom);
double ground_resolution(double lat, int zoom);  // meters per pixel

// --- Polygon predicates -----------------------------------------------------

// Even-odd rule; holes excluded; boundary points count as inside.
bool point_in_polygon(const LatLon& point, const Geometry& geometry);

// Planar shoelace area in a local equirectangular frame about the polygon
// centroid; holes subtracted. Adequate at tract scale.
double polygon_area_km2(const Geometry& geometry);

// A point guaranteed to lie inside the geometry (midpoint of the widest
// mid-latitude scanline span; centroid fallback).
LatLon representative_point(const Geometry& geometry);

// --- Coverage planning ------------------------------------------------------

// Edge-adjacent tile grid over the tract's pixel bounding box; a candidate is
// kept iff its center is inside the polygon. A tract too small to catch any
// center gets one tile at its representative interior point.
std::vector<TileSpec> plan_tiles(const TractRecord& tract, int zoom, int width_px,
                                 int height_px);

// Square probe grid with spacing radius_m*sqrt(2); a probe is kept iff its
// grid cell intersects the polygon, so the kept probe disks cover the tract.
std::vector<PoiProbe> plan_poi_grid(const TractRecord& tract, double radius_m);

}  // namespace tractscope::geo
