#include "tractscope/acquisition.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "tractscope/errors.hpp"
#include "tractscope/rng.hpp"
#include "tractscope/strutil.hpp"

namespace tractscope::acq {

using nlohmann::json;

namespace {

std::mutex manifest_mutex;

// "http://host:port/some/path" -> {"http://host:port", "/some/path"}
std::pair<std::string, std::string> split_url(const std::string& url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw InputError("base_url missing scheme: " + url);
    auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

void backoff_sleep(const EndpointConfig& cfg, int attempt, uint64_t jitter_seed) {
    SplitMix64 rng(jitter_seed + static_cast<uint64_t>(attempt));
    double jitter = 0.75 + 0.5 * rng.next_double();
    auto ms = static_cast<int64_t>(cfg.retry_base_ms * std::pow(2.0, attempt) * jitter);
    std::this_thread::sleep_for(std::chrono::milliseconds(ms));
}

std::string http_get(const EndpointConfig& cfg, const std::string& query,
                     const std::string& identity) {
    auto [host, path] = split_url(cfg.base_url);
    httplib::Client client(host);
    client.set_connection_timeout(5, 0);
    client.set_read_timeout(30, 0);
    std::string last_error;
    for (int attempt = 0; attempt <= cfg.retry_limit; ++attempt) {
        if (attempt > 0) backoff_sleep(cfg, attempt - 1, std::hash<std::string>{}(identity));
        auto res = client.Get(path + query);
        if (res && res->status == 200) return res->body;
        last_error = res ? strfmt("HTTP %d", res->status)
                         : std::string("transport error ") + httplib::to_string(res.error());
    }
    throw std::runtime_error("fetch failed for " + identity + " after " +
                             strfmt("%d retries: %s", cfg.retry_limit, last_error.c_str()));
}

void append_manifest(const std::filesystem::path& cache_dir, const std::string& key,
                     const std::string& tract_id) {
    std::lock_guard<std::mutex> lock(manifest_mutex);
    auto path = cache_dir / "manifest.csv";
    bool fresh = !std::filesystem::exists(path);
    std::ofstream out(path, std::ios::app);
    if (fresh) out << "key,tract_id,fetched_utc\n";
    auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    out << key << ',' << tract_id << ',' << stamp << '\n';
}

double distance_m(const geo::LatLon& a, const geo::LatLon& b) {
    double dx = (b.lon - a.lon) * geo::kMetersPerDegree * std::cos(a.lat * M_PI / 180.0);
    double dy = (b.lat - a.lat) * geo::kMetersPerDegree;
    return std::hypot(dx, dy);
}

// A record is usable iff place_id and category are non-empty strings and the
// location parses in range.
bool parse_poi_object(const json& obj, PoiRecord& out) {
    if (!obj.is_object()) return false;
    if (!obj.contains("place_id") || !obj["place_id"].is_string()) return false;
    if (!obj.contains("category") || !obj["category"].is_string()) return false;
    if (!obj.contains("lat") || !obj["lat"].is_number()) return false;
    if (!obj.contains("lon") || !obj["lon"].is_number()) return false;
    out.place_id = obj["place_id"].get<std::string>();
    out.category = obj["category"].get<std::string>();
    out.location = {obj["lat"].get<double>(), obj["lon"].get<double>()};
    if (out.place_id.empty() || out.category.empty()) return false;
    if (std::abs(out.location.lat) > 90.0 || std::abs(out.location.lon) > 180.0) return false;
    return true;
}

}  // namespace

std::string tile_cache_key(const geo::TileSpec& spec) {
    return strfmt("z%d_%.6f_%.6f_%dx%d.png", spec.zoom, spec.center.lat, spec.center.lon,
                  spec.width_px, spec.height_px);
}

RasterImage fetch_tile(const geo::TileSpec& spec, const EndpointConfig& cfg,
                       const std::filesystem::path& cache_dir) {
    std::string key = tile_cache_key(spec);
    auto cached = cache_dir / key;
    if (std::filesystem::exists(cached)) {
        auto bytes = read_file_bytes(cached);
        return decode_image(bytes);
    }
    if (cfg.offline)
        throw InputError("cache miss for tile " + key + " (tract " + spec.tract_id +
                         ") in offline mode");

    std::string query = strfmt("?center=%.6f,%.6f&zoom=%d&size=%dx%d&maptype=satellite",
                               spec.center.lat, spec.center.lon, spec.zoom, spec.width_px,
                               spec.height_px);
    if (cfg.api_key) query += "&key=" + *cfg.api_key;
    std::string body = http_get(cfg, query, "tile " + key);

    RasterImage image;
    try {
        image = decode_image(std::span<const uint8_t>(
            reinterpret_cast<const uint8_t*>(body.data()), body.size()));
    } catch (const std::exception& e) {
        throw std::runtime_error("undecodable payload for tile " + key + ": " + e.what());
    }
    std::filesystem::create_directories(cache_dir);
    atomic_write_file(cached, body.data(), body.size());
    append_manifest(cache_dir, key, spec.tract_id);
    return image;
}

std::vector<RasterImage> fetch_tiles(const std::vector<geo::TileSpec>& plan,
                                     const EndpointConfig& cfg,
                                     const std::filesystem::path& cache_dir, int jobs) {
    // Duplicate specs collapse onto the first occurrence.
    std::unordered_map<std::string, size_t> owner;
    std::vector<size_t> unique_idx;
    std::vector<size_t> source(plan.size());
    for (size_t i = 0; i < plan.size(); ++i) {
        auto [it, inserted] = owner.emplace(tile_cache_key(plan[i]), i);
        if (inserted) unique_idx.push_back(i);
        source[i] = it->second;
    }

    std::vector<RasterImage> fetched(plan.size());
    std::string first_error;
    int threads = std::max(1, std::min(jobs, cfg.max_concurrent));
#pragma omp parallel for schedule(dynamic) num_threads(threads)
    for (size_t u = 0; u < unique_idx.size(); ++u) {
        size_t i = unique_idx[u];
        try {
            fetched[i] = fetch_tile(plan[i], cfg, cache_dir);
        } catch (const std::exception& e) {
#pragma omp critical(fetch_tiles_error)
            if (first_error.empty()) first_error = e.what();
        }
    }
    if (!first_error.empty()) throw std::runtime_error(first_error);

    std::vector<RasterImage> out(plan.size());
    for (size_t i = 0; i < plan.size(); ++i) out[i] = fetched[source[i]];
    return out;
}

PoiFetchResult fetch_poi(const geo::PoiProbe& probe, const EndpointConfig& cfg) {
    if (probe.radius_m <= 0.0) throw InputError("probe radius must be positive");
    if (cfg.offline) {
        PoiFetchResult all = parse_poi_ndjson(read_file(cfg.base_url));
        PoiFetchResult out;
        out.warnings = all.warnings;
        for (auto& rec : all.records) {
            if (distance_m(probe.center, rec.location) <= probe.radius_m)
                out.records.push_back(std::move(rec));
        }
        return out;
    }

    PoiFetchResult out;
    std::set<std::string> seen_tokens;
    std::string token;
    while (true) {
        std::string query = strfmt("?location=%.6f,%.6f&radius=%.0f", probe.center.lat,
                                   probe.center.lon, probe.radius_m);
        if (!token.empty()) query += "&pagetoken=" + token;
        if (cfg.api_key) query += "&key=" + *cfg.api_key;
        std::string body = http_get(cfg, query,
                                    strfmt("poi probe (%.6f,%.6f)", probe.center.lat,
                                           probe.center.lon));
        json doc;
        try {
            doc = json::parse(body);
        } catch (const json::parse_error& e) {
            throw std::runtime_error(std::string("malformed POI response: ") + e.what());
        }
        if (doc.contains("results") && doc["results"].is_array()) {
            for (const auto& obj : doc["results"]) {
                PoiRecord rec;
                if (parse_poi_object(obj, rec))
                    out.records.push_back(std::move(rec));
                else
                    ++out.warnings;
            }
        }
        if (!doc.contains("next_page_token") || doc["next_page_token"].is_null()) break;
        token = doc["next_page_token"].get<std::string>();
        if (token.empty()) break;
        if (!seen_tokens.insert(token).second)
            throw std::runtime_error("pagination loop: token '" + token + "' repeated");
    }
    return out;
}

std::string poi_records_to_ndjson(const std::vector<PoiRecord>& records) {
    std::ostringstream out;
    for (const auto& rec : records) {
        json obj{{"place_id", rec.place_id},
                 {"category", rec.category},
                 {"lat", rec.location.lat},
                 {"lon", rec.location.lon}};
        out << obj.dump() << '\n';
    }
    return out.str();
}

PoiFetchResult parse_poi_ndjson(const std::string& text) {
    PoiFetchResult out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        PoiRecord rec;
        json obj = json::parse(line, nullptr, false);
        if (obj.is_discarded() || !parse_poi_object(obj, rec)) {
            ++out.warnings;
            continue;
        }
        out.records.push_back(std::move(rec));
    }
    return out;
}

}  // namespace tractscope::acq
