#include "tractscope/geo.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

#include "tractscope/errors.hpp"
#include "tractscope/strutil.hpp"

namespace tractscope::geo {

using nlohmann::json;

namespace {

constexpr double kPi = 3.14159265358979323846;

double map_size(int zoom) { return 256.0 * static_cast<double>(1u << zoom); }

void check_zoom(int zoom) {
    if (zoom < 0 || zoom > 22) throw InputError(strfmt("zoom %d outside [0,22]", zoom));
}

// Planar point-in-ring crossing count (even-odd), plus on-boundary detection.
// Works on any planar (x, y) coordinates; callers pick the frame.
struct XY {
    double x, y;
};

bool on_segment(const XY& p, const XY& a, const XY& b) {
    double cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    double scale = std::max({std::abs(a.x), std::abs(a.y), std::abs(b.x), std::abs(b.y), 1.0});
    if (std::abs(cross) > 1e-12 * scale) return false;
    return p.x >= std::min(a.x, b.x) - 1e-12 && p.x <= std::max(a.x, b.x) + 1e-12 &&
           p.y >= std::min(a.y, b.y) - 1e-12 && p.y <= std::max(a.y, b.y) + 1e-12;
}

// Returns -1 if on the ring boundary, else the parity contribution (0/1).
int ring_crossings(const XY& p, const std::vector<XY>& ring) {
    int crossings = 0;
    for (size_t i = 0; i + 1 < ring.size(); ++i) {
        const XY& a = ring[i];
        const XY& b = ring[i + 1];
        if (on_segment(p, a, b)) return -1;
        if ((a.y > p.y) != (b.y > p.y)) {
            double x_at = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if (x_at > p.x) ++crossings;
        }
    }
    return crossings & 1;
}

using XYRing = std::vector<XY>;
using XYPoly = std::vector<std::vector<XYRing>>;  // polygon -> rings (outer first)

bool point_in_rings(const XY& p, const XYPoly& polys) {
    int parity = 0;
    for (const auto& rings : polys) {
        for (const auto& ring : rings) {
            int c = ring_crossings(p, ring);
            if (c < 0) return true;  // boundary counts as inside
            parity ^= c;
        }
    }
    return parity != 0;
}

XYPoly to_lonlat_xy(const Geometry& geometry) {
    XYPoly out;
    for (const auto& poly : geometry) {
        std::vector<XYRing> rings;
        XYRing outer;
        for (const auto& v : poly.outer) outer.push_back({v.lon, v.lat});
        rings.push_back(std::move(outer));
        for (const auto& hole : poly.holes) {
            XYRing r;
            for (const auto& v : hole) r.push_back({v.lon, v.lat});
            rings.push_back(std::move(r));
        }
        out.push_back(std::move(rings));
    }
    return out;
}

double shoelace(const XYRing& ring) {
    double s = 0.0;
    for (size_t i = 0; i + 1 < ring.size(); ++i)
        s += ring[i].x * ring[i + 1].y - ring[i + 1].x * ring[i].y;
    return 0.5 * s;
}

LatLon vertex_centroid(const Geometry& geometry) {
    double lat = 0.0, lon = 0.0;
    size_t count = 0;
    for (const auto& poly : geometry) {
        // skip the duplicated closing vertex
        for (size_t i = 0; i + 1 < poly.outer.size(); ++i) {
            lat += poly.outer[i].lat;
            lon += poly.outer[i].lon;
            ++count;
        }
    }
    if (count == 0) throw InputError("empty geometry");
    return {lat / static_cast<double>(count), lon / static_cast<double>(count)};
}

// Local equirectangular projection about `origin`, in meters.
XY to_local_m(const LatLon& p, const LatLon& origin) {
    double x = (p.lon - origin.lon) * kMetersPerDegree * std::cos(origin.lat * kPi / 180.0);
    double y = (p.lat - origin.lat) * kMetersPerDegree;
    return {x, y};
}

LatLon from_local_m(const XY& p, const LatLon& origin) {
    double lon = origin.lon + p.x / (kMetersPerDegree * std::cos(origin.lat * kPi / 180.0));
    double lat = origin.lat + p.y / kMetersPerDegree;
    return {lat, lon};
}

bool segments_intersect(const XY& a, const XY& b, const XY& c, const XY& d) {
    auto orient = [](const XY& p, const XY& q, const XY& r) {
        double v = (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x);
        if (v > 0) return 1;
        if (v < 0) return -1;
        return 0;
    };
    int o1 = orient(a, b, c), o2 = orient(a, b, d);
    int o3 = orient(c, d, a), o4 = orient(c, d, b);
    if (o1 != o2 && o3 != o4) return true;
    if (o1 == 0 && on_segment(c, a, b)) return true;
    if (o2 == 0 && on_segment(d, a, b)) return true;
    if (o3 == 0 && on_segment(a, c, d)) return true;
    if (o4 == 0 && on_segment(b, c, d)) return true;
    return false;
}

// Axis-aligned square cell vs polygon-with-holes intersection test.
bool cell_intersects(const XY& lo, const XY& hi, const XYPoly& polys) {
    XY corners[4] = {{lo.x, lo.y}, {hi.x, lo.y}, {hi.x, hi.y}, {lo.x, hi.y}};
    XY center{0.5 * (lo.x + hi.x), 0.5 * (lo.y + hi.y)};
    if (point_in_rings(center, polys)) return true;
    for (const auto& c : corners)
        if (point_in_rings(c, polys)) return true;
    for (const auto& rings : polys) {
        for (const auto& ring : rings) {
            for (const auto& v : ring) {
                if (v.x >= lo.x && v.x <= hi.x && v.y >= lo.y && v.y <= hi.y) return true;
            }
            for (size_t i = 0; i + 1 < ring.size(); ++i) {
                for (int e = 0; e < 4; ++e) {
                    if (segments_intersect(ring[i], ring[i + 1], corners[e], corners[(e + 1) % 4]))
                        return true;
                }
            }
        }
    }
    return false;
}

Ring parse_ring(const json& coords, const std::string& where) {
    if (!coords.is_array() || coords.size() < 4)
        throw InputError("ring with fewer than 4 vertices in " + where);
    Ring ring;
    for (const auto& pt : coords) {
        if (!pt.is_array() || pt.size() < 2)
            throw InputError("malformed coordinate in " + where);
        double lon = pt[0].get<double>();
        double lat = pt[1].get<double>();
        if (std::abs(lat) > 90.0)
            throw InputError(strfmt("latitude %.6f out of range in %s", lat, where.c_str()));
        if (lon < -180.0 || lon >= 180.0)
            throw InputError(strfmt("longitude %.6f out of range in %s", lon, where.c_str()));
        ring.push_back({lat, lon});
    }
    if (ring.front().lat != ring.back().lat || ring.front().lon != ring.back().lon)
        throw InputError("open ring in " + where);
    return ring;
}

Polygon parse_polygon(const json& coords, const std::string& where) {
    if (!coords.is_array() || coords.empty())
        throw InputError("polygon with no rings in " + where);
    Polygon poly;
    poly.outer = parse_ring(coords[0], where);
    for (size_t i = 1; i < coords.size(); ++i) poly.holes.push_back(parse_ring(coords[i], where));
    return poly;
}

std::optional<double> numeric_property(const json& props, const std::string& name,
                                       const std::string& where) {
    if (name.empty() || !props.contains(name) || props[name].is_null()) return std::nullopt;
    const json& v = props[name];
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) return parse_double(v.get<std::string>(), "property " + name + " of " + where);
    throw InputError("unparseable property " + name + " of " + where);
}

}  // namespace

std::vector<TractRecord> parse_tract_collection(const std::string& geojson_text,
                                                const PropertyMap& props) {
    json doc;
    try {
        doc = json::parse(geojson_text);
    } catch (const json::parse_error& e) {
        throw InputError(std::string("malformed GeoJSON: ") + e.what());
    }
    if (!doc.is_object() || doc.value("type", "") != "FeatureCollection" ||
        !doc.contains("features") || !doc["features"].is_array())
        throw InputError("expected a GeoJSON FeatureCollection");

    std::vector<TractRecord> records;
    std::set<std::string> seen_ids;
    size_t index = 0;
    for (const auto& feature : doc["features"]) {
        std::string where = strfmt("feature %zu", index++);
        if (!feature.contains("geometry") || feature["geometry"].is_null())
            throw InputError("missing geometry in " + where);
        const json& geom = feature["geometry"];
        const json& fprops = feature.contains("properties") && feature["properties"].is_object()
                                 ? feature["properties"]
                                 : json::object();

        TractRecord rec;
        if (fprops.contains(props.id) && !fprops[props.id].is_null()) {
            const json& idv = fprops[props.id];
            rec.id = idv.is_string() ? idv.get<std::string>() : idv.dump();
        } else {
            throw InputError("missing id property '" + props.id + "' in " + where);
        }
        where += " (" + rec.id + ")";
        if (!seen_ids.insert(rec.id).second) throw InputError("duplicate id " + rec.id);

        if (!props.region.empty() && fprops.contains(props.region) &&
            fprops[props.region].is_string())
            rec.region = fprops[props.region].get<std::string>();

        rec.prevalence = numeric_property(fprops, props.prevalence, where);
        if (rec.prevalence && (*rec.prevalence < 0.0 || *rec.prevalence > 100.0))
            throw InputError(strfmt("prevalence %.4f outside [0,100] in %s", *rec.prevalence,
                                    where.c_str()));
        rec.income = numeric_property(fprops, props.income, where);
        if (rec.income && *rec.income < 0.0)
            throw InputError("negative income in " + where);
        rec.land_area_km2 = numeric_property(fprops, props.area, where);
        if (rec.land_area_km2 && *rec.land_area_km2 <= 0.0)
            throw InputError("non-positive land area in " + where);

        std::string gtype = geom.value("type", "");
        if (gtype == "Polygon") {
            rec.geometry.push_back(parse_polygon(geom["coordinates"], where));
        } else if (gtype == "MultiPolygon") {
            for (const auto& poly : geom["coordinates"])
                rec.geometry.push_back(parse_polygon(poly, where));
            if (rec.geometry.empty()) throw InputError("empty MultiPolygon in " + where);
        } else {
            throw InputError("unsupported geometry type '" + gtype + "' in " + where);
        }
        records.push_back(std::move(rec));
    }
    return records;
}

PixelXY latlon_to_world_pixel(double lat, double lon, int zoom) {
    check_zoom(zoom);
    if (std::abs(lat) > kMercatorMaxLat)
        throw InputError(strfmt("latitude %.8f outside Mercator clamp", lat));
    double size = map_size(zoom);
    double phi = lat * kPi / 180.0;
    double px = size * (lon + 180.0) / 360.0;
    // asinh(tan phi) == ln(tan phi + sec phi), with one fewer rounding step
    double py = size * (1.0 - std::asinh(std::tan(phi)) / kPi) / 2.0;
    return {std::clamp(px, 0.0, size), std::clamp(py, 0.0, size)};
}

LatLon world_pixel_to_latlon(double px, double py, int zoom) {
    check_zoom(zoom);
    double size = map_size(zoom);
    if (px < 0.0 || px > size || py < 0.0 || py > size)
        throw InputError(strfmt("pixel (%.3f, %.3f) outside map at zoom %d", px, py, zoom));
    double lon = px / size * 360.0 - 180.0;
    double n = kPi * (1.0 - 2.0 * py / size);
    double lat = std::atan(std::sinh(n)) * 180.0 / kPi;
    return {lat, lon};
}

double ground_resolution(double lat, int zoom) {
    check_zoom(zoom);
    if (std::abs(lat) > kMercatorMaxLat)
        throw InputError(strfmt("latitude %.8f outside Mercator clamp", lat));
    return 156543.03392 * std::cos(lat * kPi / 180.0) / static_cast<double>(1u << zoom);
}

bool point_in_polygon(const LatLon& point, const Geometry& geometry) {
    return point_in_rings({point.lon, point.lat}, to_lonlat_xy(geometry));
}

double polygon_area_km2(const Geometry& geometry) {
    double total_m2 = 0.0;
    for (const auto& poly : geometry) {
        Geometry single{poly};
        LatLon origin = vertex_centroid(single);
        XYRing outer;
        for (const auto& v : poly.outer) outer.push_back(to_local_m(v, origin));
        double area = std::abs(shoelace(outer));
        for (const auto& hole : poly.holes) {
            XYRing h;
            for (const auto& v : hole) h.push_back(to_local_m(v, origin));
            area -= std::abs(shoelace(h));
        }
        total_m2 += area;
    }
    return total_m2 / 1e6;
}

LatLon representative_point(const Geometry& geometry) {
    XYPoly polys = to_lonlat_xy(geometry);
    double ymin = 1e300, ymax = -1e300;
    for (const auto& rings : polys)
        for (const auto& v : rings[0]) {
            ymin = std::min(ymin, v.y);
            ymax = std::max(ymax, v.y);
        }
    // Scan a few latitudes in case the midline clips a concavity or hole.
    for (double f : {0.5, 0.37, 0.63, 0.25, 0.75, 0.45, 0.55}) {
        double y = ymin + f * (ymax - ymin);
        std::vector<double> xs;
        for (const auto& rings : polys) {
            for (const auto& ring : rings) {
                for (size_t i = 0; i + 1 < ring.size(); ++i) {
                    const XY& a = ring[i];
                    const XY& b = ring[i + 1];
                    if ((a.y > y) != (b.y > y))
                        xs.push_back(a.x + (y - a.y) / (b.y - a.y) * (b.x - a.x));
                }
            }
        }
        if (xs.size() < 2) continue;
        std::sort(xs.begin(), xs.end());
        double best_width = -1.0, best_x = 0.0;
        for (size_t i = 0; i + 1 < xs.size(); i += 2) {
            if (xs[i + 1] - xs[i] > best_width) {
                best_width = xs[i + 1] - xs[i];
                best_x = 0.5 * (xs[i] + xs[i + 1]);
            }
        }
        XY candidate{best_x, y};
        if (best_width > 0.0 && point_in_rings(candidate, polys))
            return {candidate.y, candidate.x};
    }
    LatLon c = vertex_centroid(geometry);
    if (point_in_polygon(c, geometry)) return c;
    throw InputError("cannot find interior point of degenerate geometry");
}

std::vector<TileSpec> plan_tiles(const TractRecord& tract, int zoom, int width_px,
                                 int height_px) {
    check_zoom(zoom);
    if (width_px < 64 || width_px > 1280 || height_px < 64 || height_px > 1280)
        throw InputError("tile size outside [64,1280]");
    if (tract.geometry.empty() || polygon_area_km2(tract.geometry) <= 0.0)
        throw InputError("degenerate geometry for tract " + tract.id);

    double min_x = 1e300, min_y = 1e300, max_x = -1e300, max_y = -1e300;
    for (const auto& poly : tract.geometry) {
        for (const auto& v : poly.outer) {
            PixelXY p = latlon_to_world_pixel(v.lat, v.lon, zoom);
            min_x = std::min(min_x, p.x);
            min_y = std::min(min_y, p.y);
            max_x = std::max(max_x, p.x);
            max_y = std::max(max_y, p.y);
        }
    }
    int cols = std::max(1, static_cast<int>(std::ceil((max_x - min_x) / width_px)));
    int rows = std::max(1, static_cast<int>(std::ceil((max_y - min_y) / height_px)));

    double size = map_size(zoom);
    std::vector<TileSpec> tiles;
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            double cx = min_x + (c + 0.5) * width_px;
            double cy = min_y + (r + 0.5) * height_px;
            if (cx < 0.0 || cx > size || cy < 0.0 || cy > size) continue;
            LatLon center = world_pixel_to_latlon(cx, cy, zoom);
            if (!point_in_polygon(center, tract.geometry)) continue;
            tiles.push_back({tract.id, center, zoom, width_px, height_px, r, c});
        }
    }
    if (tiles.empty()) {
        LatLon center = representative_point(tract.geometry);
        tiles.push_back({tract.id, center, zoom, width_px, height_px, 0, 0});
    }
    return tiles;
}

std::vector<PoiProbe> plan_poi_grid(const TractRecord& tract, double radius_m) {
    if (radius_m <= 0.0) throw InputError("probe radius must be positive");
    if (tract.geometry.empty() || polygon_area_km2(tract.geometry) <= 0.0)
        throw InputError("degenerate geometry for tract " + tract.id);

    LatLon origin = vertex_centroid(tract.geometry);
    XYPoly polys;
    double min_x = 1e300, min_y = 1e300, max_x = -1e300, max_y = -1e300;
    for (const auto& poly : tract.geometry) {
        std::vector<XYRing> rings;
        XYRing outer;
        for (const auto& v : poly.outer) {
            XY p = to_local_m(v, origin);
            outer.push_back(p);
            min_x = std::min(min_x, p.x);
            min_y = std::min(min_y, p.y);
            max_x = std::max(max_x, p.x);
            max_y = std::max(max_y, p.y);
        }
        rings.push_back(std::move(outer));
        for (const auto& hole : poly.holes) {
            XYRing h;
            for (const auto& v : hole) h.push_back(to_local_m(v, origin));
            rings.push_back(std::move(h));
        }
        polys.push_back(std::move(rings));
    }

    // Disks of radius r cover squares of side r*sqrt(2).
    double spacing = radius_m * std::sqrt(2.0);
    int cols = std::max(1, static_cast<int>(std::ceil((max_x - min_x) / spacing)));
    int rows = std::max(1, static_cast<int>(std::ceil((max_y - min_y) / spacing)));

    std::vector<PoiProbe> probes;
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            XY lo{min_x + c * spacing, min_y + r * spacing};
            XY hi{lo.x + spacing, lo.y + spacing};
            if (!cell_intersects(lo, hi, polys)) continue;
            probes.push_back({from_local_m({0.5 * (lo.x + hi.x), 0.5 * (lo.y + hi.y)}, origin),
                              radius_m});
        }
    }
    if (probes.empty()) probes.push_back({representative_point(tract.geometry), radius_m});
    return probes;
}

}  // namespace tractscope::geo
