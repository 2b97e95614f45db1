#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace tractscope::synth {

// Deterministic synthetic world: gridded rectangular tracts, procedural tile
// imagery whose green level and edge density carry a latent z in [0,1], POI
// counts with category rates linear in z, and outcomes a + b*z + noise.
struct SynthConfig {
    uint64_t seed = 42;
    int n_tracts = 200;
    int tiles_min = 4, tiles_max = 16;  // per tract; met exactly for square-able ranges
    int image_px = 64;                  // tile width and height
    int zoom = 15;
    std::vector<std::string> regions = {"north", "south", "east", "west"};

    // outcome = base + gain*z + N(0, noise_sd); noise_sd < 0 means "derive
    // from target_r2 against the theoretical sd of z ~ U[0,1]".
    double outcome_base = 15.0;
    double outcome_gain = 25.0;
    double target_r2 = 0.8;
    double noise_sd = -1.0;

    // image statistics carrying z
    double green_base = 40.0;
    double green_gain = 160.0;   // mean green gap between z=0 and z=1
    double stripe_amp_base = 10.0;
    double stripe_amp_gain = 60.0;  // edge contrast gap

    // income = income_base - income_gain*z + noise (own scale)
    double income_base = 95000.0;
    double income_gain = 60000.0;
};

struct SynthResult {
    std::filesystem::path tracts_geojson;
    std::filesystem::path cache_dir;
    std::filesystem::path poi_fixture;
    std::filesystem::path truth_csv;    // tract_id,z,outcome,noise_sd
    std::filesystem::path config_file;  // pipeline-ready key=value snapshot
    int n_tiles = 0;
    int n_pois = 0;
    double noise_sd = 0.0;
    double achieved_r2 = 0.0;  // 1 - var(noise)/var(outcome) over the realized draws
};

SynthResult generate_world(const SynthConfig& cfg, const std::filesystem::path& out_dir);

inline const std::vector<std::string> kPoiCategories = {
    "restaurant", "grocery", "gym", "park", "school", "church", "pharmacy", "pet_store"};

}  // namespace tractscope::synth
