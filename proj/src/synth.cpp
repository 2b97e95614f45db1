#include "tractscope/synth.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tractscope/acquisition.hpp"
#include "tractscope/errors.hpp"
#include "tractscope/geo.hpp"
#include "tractscope/rng.hpp"
#include "tractscope/strutil.hpp"

namespace tractscope::synth {

using nlohmann::json;

namespace {

uint64_t mix_seed(uint64_t a, uint64_t b) {
    SplitMix64 g(a ^ (b + 0x9e3779b97f4a7c15ULL));
    return g.next();
}

json ring_json(const geo::Ring& ring) {
    json arr = json::array();
    for (const auto& v : ring) arr.push_back(json::array({v.lon, v.lat}));
    return arr;
}

}  // namespace

SynthResult generate_world(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
    if (cfg.n_tracts < 10) throw InputError("n_tracts must be at least 10");
    if (cfg.image_px < 64 || cfg.image_px > 1280) throw InputError("image_px outside [64,1280]");
    if (cfg.regions.empty()) throw InputError("need at least one region label");
    if (cfg.target_r2 <= 0.0 || cfg.target_r2 > 1.0) throw InputError("target_r2 must be in (0,1]");
    if (cfg.tiles_min < 1 || cfg.tiles_max < cfg.tiles_min)
        throw InputError("bad tiles_per_tract range");

    double sd_z = std::sqrt(1.0 / 12.0);  // z ~ U[0,1]
    double noise_sd = cfg.noise_sd >= 0.0
                          ? cfg.noise_sd
                          : cfg.outcome_gain * sd_z * std::sqrt(1.0 / cfg.target_r2 - 1.0);
    double income_noise_sd = cfg.income_gain * sd_z * std::sqrt(1.0 / cfg.target_r2 - 1.0);

    std::filesystem::create_directories(out_dir);
    SynthResult result;
    result.noise_sd = noise_sd;
    result.tracts_geojson = out_dir / "tracts.geojson";
    result.cache_dir = out_dir / "tiles";
    result.poi_fixture = out_dir / "poi_fixture.ndjson";
    result.truth_csv = out_dir / "truth.csv";
    result.config_file = out_dir / "world.cfg";
    std::filesystem::create_directories(result.cache_dir);

    // Tile-grid geometry: tracts are pixel-space rectangles of cols x rows
    // tile footprints, so their tile plans have exactly cols*rows entries.
    int c1 = std::max(1, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(cfg.tiles_min)))));
    int c2 = std::max(c1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(cfg.tiles_max)))));
    int grid_cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(cfg.n_tracts))));
    double cell_px = static_cast<double>((c2 + 1) * cfg.image_px);

    geo::PixelXY base = geo::latlon_to_world_pixel(41.0, -101.0, cfg.zoom);

    json features_array = json::array();
    std::ostringstream truth;
    truth << "tract_id,z,outcome,noise_sd\n";
    std::ostringstream poi_lines;

    std::vector<double> outcomes, noises;
    int tile_total = 0, poi_total = 0;

    for (int i = 0; i < cfg.n_tracts; ++i) {
        std::string id = strfmt("S%05d", i);
        SplitMix64 tract_rng(mix_seed(cfg.seed, static_cast<uint64_t>(i)));

        double z = tract_rng.next_double();
        int cols = c1 + static_cast<int>(tract_rng.next_below(static_cast<uint64_t>(c2 - c1 + 1)));
        int rows = c1 + static_cast<int>(tract_rng.next_below(static_cast<uint64_t>(c2 - c1 + 1)));
        double noise = noise_sd * tract_rng.next_normal();
        double income_noise = income_noise_sd * tract_rng.next_normal();

        int gi = i / grid_cols, gj = i % grid_cols;
        double x0 = base.x + gj * cell_px;
        double y0 = base.y + gi * cell_px;
        double x1 = x0 + cols * cfg.image_px;
        double y1 = y0 + rows * cfg.image_px;
        geo::LatLon nw = geo::world_pixel_to_latlon(x0, y0, cfg.zoom);
        geo::LatLon se = geo::world_pixel_to_latlon(x1, y1, cfg.zoom);

        geo::TractRecord rec;
        rec.id = id;
        rec.region = cfg.regions[static_cast<size_t>(i) * cfg.regions.size() /
                                 static_cast<size_t>(cfg.n_tracts)];
        geo::Ring ring = {{nw.lat, nw.lon}, {nw.lat, se.lon}, {se.lat, se.lon},
                          {se.lat, nw.lon}, {nw.lat, nw.lon}};
        rec.geometry.push_back({ring, {}});

        double outcome = std::clamp(cfg.outcome_base + cfg.outcome_gain * z + noise, 0.5, 99.5);
        double income = std::max(1000.0, cfg.income_base - cfg.income_gain * z + income_noise);
        rec.prevalence = outcome;
        rec.income = income;
        rec.land_area_km2 = geo::polygon_area_km2(rec.geometry);

        outcomes.push_back(outcome);
        noises.push_back(outcome - (cfg.outcome_base + cfg.outcome_gain * z));

        // tiles
        auto plan = geo::plan_tiles(rec, cfg.zoom, cfg.image_px, cfg.image_px);
        for (const auto& tile : plan) {
            SplitMix64 pix_rng(mix_seed(mix_seed(cfg.seed, static_cast<uint64_t>(i)),
                                        (static_cast<uint64_t>(tile.row) << 32) |
                                            static_cast<uint64_t>(tile.col)));
            acq::RasterImage img;
            img.width = cfg.image_px;
            img.height = cfg.image_px;
            img.data.resize(static_cast<size_t>(cfg.image_px) * cfg.image_px * 3);
            double green = cfg.green_base + cfg.green_gain * z;
            double amp = cfg.stripe_amp_base + cfg.stripe_amp_gain * z;
            for (int y = 0; y < cfg.image_px; ++y) {
                for (int x = 0; x < cfg.image_px; ++x) {
                    // balanced stripe pattern on red: +amp, 0, -amp, 0 ...
                    int phase = x % 8;
                    double stripe = phase < 2 ? amp : (phase >= 4 && phase < 6 ? -amp : 0.0);
                    auto noise8 = [&] {
                        return static_cast<double>(pix_rng.next_below(17)) - 8.0;
                    };
                    double r = 118.0 + stripe + noise8();
                    double g = green + noise8();
                    double b = 70.0 + noise8();
                    uint8_t* px = img.pixel(y, x);
                    px[0] = static_cast<uint8_t>(std::clamp(r, 0.0, 255.0));
                    px[1] = static_cast<uint8_t>(std::clamp(g, 0.0, 255.0));
                    px[2] = static_cast<uint8_t>(std::clamp(b, 0.0, 255.0));
                }
            }
            auto png = acq::encode_png(img);
            atomic_write_file(result.cache_dir / acq::tile_cache_key(tile), png.data(),
                              png.size());
            ++tile_total;
        }

        // POIs: category rates linear in z
        SplitMix64 poi_rng(mix_seed(mix_seed(cfg.seed, static_cast<uint64_t>(i)), 0x9010ULL));
        for (size_t ci = 0; ci < kPoiCategories.size(); ++ci) {
            double rate = (ci % 2 == 0) ? 1.0 + 4.0 * z : 3.0 - 2.0 * z;
            int count = static_cast<int>(std::floor(rate + poi_rng.next_double()));
            for (int k = 0; k < count; ++k) {
                double fx = 0.05 + 0.9 * poi_rng.next_double();
                double fy = 0.05 + 0.9 * poi_rng.next_double();
                geo::LatLon loc = geo::world_pixel_to_latlon(x0 + fx * (x1 - x0),
                                                             y0 + fy * (y1 - y0), cfg.zoom);
                json obj{{"place_id", strfmt("P%s_%s_%d", id.c_str(),
                                             kPoiCategories[ci].c_str(), k)},
                         {"category", kPoiCategories[ci]},
                         {"lat", loc.lat},
                         {"lon", loc.lon}};
                poi_lines << obj.dump() << '\n';
                ++poi_total;
            }
        }

        json props{{"tract_id", id},          {"region", rec.region},
                   {"prevalence", outcome},   {"income", income},
                   {"land_area_km2", *rec.land_area_km2}};
        json geometry{{"type", "Polygon"}, {"coordinates", json::array({ring_json(ring)})}};
        features_array.push_back(
            json{{"type", "Feature"}, {"geometry", geometry}, {"properties", props}});

        truth << id << ',' << strfmt("%.9g,%.9g,%.9g", z, outcome, noise_sd) << '\n';
    }

    // achieved generative R^2 over the realized draws
    auto variance = [](const std::vector<double>& v) {
        double m = 0.0;
        for (double x : v) m += x;
        m /= static_cast<double>(v.size());
        double s = 0.0;
        for (double x : v) s += (x - m) * (x - m);
        return s / static_cast<double>(v.size());
    };
    double var_out = variance(outcomes);
    result.achieved_r2 = var_out > 0.0 ? 1.0 - variance(noises) / var_out : 1.0;
    result.n_tiles = tile_total;
    result.n_pois = poi_total;

    json collection{{"type", "FeatureCollection"}, {"features", features_array}};
    write_file(result.tracts_geojson, collection.dump(1) + "\n");
    write_file(result.poi_fixture, poi_lines.str());
    write_file(result.truth_csv, truth.str());

    json meta{{"outcome_base", cfg.outcome_base},
              {"outcome_gain", cfg.outcome_gain},
              {"noise_sd", noise_sd},
              {"achieved_r2", result.achieved_r2},
              {"n_tracts", cfg.n_tracts},
              {"n_tiles", tile_total},
              {"n_pois", poi_total}};
    write_file(out_dir / "truth_meta.json", meta.dump(1) + "\n");

    // paths are relative so a world directory can be moved; run the pipeline
    // with --workdir pointed at it
    std::ostringstream world_cfg;
    world_cfg << "tracts=tracts.geojson\n"
              << "cache=tiles\n"
              << "poi-fixture=poi_fixture.ndjson\n"
              << "zoom=" << cfg.zoom << '\n'
              << "tile-width=" << cfg.image_px << '\n'
              << "tile-height=" << cfg.image_px << '\n'
              << "poi-radius=250\n"
              << "extractor=baseline\n"
              << "target=prevalence\n";
    write_file(result.config_file, world_cfg.str());
    return result;
}

}  // namespace tractscope::synth
