#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tractscope/geo.hpp"
#include "tractscope/image_codec.hpp"

namespace tractscope::acq {

struct EndpointConfig {
    // URL of the service. In offline mode fetch_poi interprets this as the
    // path of a newline-delimited JSON fixture; fetch_tile serves from the
    // cache only and never touches it.
    std::string base_url;
    std::optional<std::string> api_key;
    int max_concurrent = 4;
    int retry_limit = 3;
    bool offline = false;
    int retry_base_ms = 1000;  // exponential backoff base, factor 2, jittered
};

struct PoiRecord {
    std::string place_id;
    std::string category;
    geo::LatLon location;
};

struct PoiFetchResult {
    std::vector<PoiRecord> records;
    int warnings = 0;  // malformed records skipped
};

// `z{zoom}_{lat:.6f}_{lon:.6f}_{w}x{h}.png`
std::string tile_cache_key(const geo::TileSpec& spec);

// Cache-first tile read. On a miss: offline throws, online GETs
// `{base_url}?center=..&zoom=..&size=..&maptype=satellite&key=..`, writes the
// cache entry atomically, appends a manifest.csv line, and returns the
// decoded image.
RasterImage fetch_tile(const geo::TileSpec& spec, const EndpointConfig& cfg,
                       const std::filesystem::path& cache_dir);

// Fetches a whole plan, deduplicating identical specs so N distinct uncached
// tiles cost exactly N requests. Parallel up to min(jobs, max_concurrent);
// results are returned in plan order regardless of completion order.
std::vector<RasterImage> fetch_tiles(const std::vector<geo::TileSpec>& plan,
                                     const EndpointConfig& cfg,
                                     const std::filesystem::path& cache_dir, int jobs);

// Follows pagination tokens to exhaustion; pages concatenate in order;
// malformed records are skipped and tallied. Seeing the same page token twice
// is a pagination loop and throws.
PoiFetchResult fetch_poi(const geo::PoiProbe& probe, const EndpointConfig& cfg);

// One `{"place_id":..,"category":..,"lat":..,"lon":..}` object per line.
std::string poi_records_to_ndjson(const std::vector<PoiRecord>& records);
PoiFetchResult parse_poi_ndjson(const std::string& text);

}  // namespace tractscope::acq
