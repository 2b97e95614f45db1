#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tractscope/acquisition.hpp"
#include "tractscope/cnn.hpp"
#include "tractscope/geo.hpp"

namespace tractscope::features {

// Aligned modeling input. y/regions are parallel to ids; y may be empty for a
// feature-only table that has not been joined to an outcome yet.
struct DesignMatrix {
    std::vector<std::string> ids;
    std::vector<std::string> columns;
    std::vector<double> X;  // row-major, ids.size() x columns.size()
    std::vector<double> y;
    std::vector<std::string> regions;

    size_t rows() const { return ids.size(); }
    size_t cols() const { return columns.size(); }
    double at(size_t r, size_t c) const { return X[r * columns.size() + c]; }
};

struct FeatureStore {
    struct Record {
        std::string tract_id;
        uint32_t tile_count = 0;
        std::vector<float> values;
    };
    std::string extractor_id;  // in-memory metadata; not part of the file formats
    uint32_t dim = 0;
    std::vector<Record> records;  // kept sorted by tract_id

    const Record* find(const std::string& tract_id) const;
};

// Elementwise arithmetic mean, f64 accumulation in the order given. Callers
// wanting the canonical result pass vectors in ascending tile-id order.
cnn::FeatureVector aggregate_tract(std::span<const cnn::FeatureVector> vectors);

enum class PoiMode { counts, per_km2 };

struct PoiMatrix {
    DesignMatrix matrix;      // one row per tract (ascending id), one column per category
    int duplicates = 0;       // records dropped by place_id dedup
    int outside_tract = 0;    // deduped records falling in no tract
    int unknown_category = 0; // deduped in-tract records with a category outside the vocabulary
};

// Dedup by place_id (first occurrence wins), assign each survivor to the
// tract containing it, count per (tract, category). per_km2 divides by the
// tract's land_area_km2 property, falling back to the polygon area.
PoiMatrix poi_feature_matrix(const std::vector<acq::PoiRecord>& records,
                             const std::vector<geo::TractRecord>& tracts,
                             const std::vector<std::string>& categories, PoiMode mode);

// Binary FVS1 (paths without .csv extension): magic "FVS1", u32 dim,
// u32 count, per record u16 id length + id + u32 tile_count + dim x f32.
// CSV form (.csv): header `tract_id,tile_count,f0,...,f{D-1}`, 9 significant
// digits. read auto-detects by content.
void write_feature_store(const FeatureStore& store, const std::filesystem::path& path);
FeatureStore read_feature_store(const std::filesystem::path& path);

enum class Target { prevalence, income };

struct BuildResult {
    DesignMatrix matrix;
    std::vector<std::string> excluded;  // tract ids left out (no features or null target)
};

// Rows = tracts present in the feature source AND carrying a non-null target,
// ascending tract id.
BuildResult build_design_matrix(const FeatureStore& store,
                                const std::vector<geo::TractRecord>& tracts, Target target);
BuildResult build_design_matrix(const DesignMatrix& features,
                                const std::vector<geo::TractRecord>& tracts, Target target);

}  // namespace tractscope::features
