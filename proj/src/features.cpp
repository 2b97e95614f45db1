#include "tractscope/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include "tractscope/errors.hpp"
#include "tractscope/strutil.hpp"

namespace tractscope::features {

namespace {

double tract_area_km2(const geo::TractRecord& tract) {
    if (tract.land_area_km2) return *tract.land_area_km2;
    double area = geo::polygon_area_km2(tract.geometry);
    if (area <= 0.0)
        throw InputError("tract " + tract.id + " lacks an area and has degenerate geometry");
    return area;
}

bool looks_like_csv(const std::vector<uint8_t>& bytes) {
    return bytes.size() < 4 || std::memcmp(bytes.data(), "FVS1", 4) != 0;
}

}  // namespace

const FeatureStore::Record* FeatureStore::find(const std::string& tract_id) const {
    auto it = std::lower_bound(records.begin(), records.end(), tract_id,
                               [](const Record& r, const std::string& id) { return r.tract_id < id; });
    if (it == records.end() || it->tract_id != tract_id) return nullptr;
    return &*it;
}

cnn::FeatureVector aggregate_tract(std::span<const cnn::FeatureVector> vectors) {
    if (vectors.empty()) throw InputError("aggregate_tract: empty vector list");
    size_t dim = vectors.front().values.size();
    for (const auto& v : vectors)
        if (v.values.size() != dim)
            throw InputError(strfmt("aggregate_tract: mixed lengths %zu vs %zu", dim,
                                    v.values.size()));
    std::vector<double> acc(dim, 0.0);
    for (const auto& v : vectors)
        for (size_t i = 0; i < dim; ++i) acc[i] += v.values[i];
    cnn::FeatureVector mean;
    mean.extractor_id = vectors.front().extractor_id;
    mean.layer_name = vectors.front().layer_name;
    mean.values.resize(dim);
    for (size_t i = 0; i < dim; ++i)
        mean.values[i] = static_cast<float>(acc[i] / static_cast<double>(vectors.size()));
    return mean;
}

PoiMatrix poi_feature_matrix(const std::vector<acq::PoiRecord>& records,
                             const std::vector<geo::TractRecord>& tracts,
                             const std::vector<std::string>& categories, PoiMode mode) {
    if (categories.empty()) throw InputError("empty category vocabulary");

    std::vector<const geo::TractRecord*> sorted;
    for (const auto& t : tracts) sorted.push_back(&t);
    std::sort(sorted.begin(), sorted.end(),
              [](const auto* a, const auto* b) { return a->id < b->id; });

    std::unordered_map<std::string, size_t> category_index;
    for (size_t i = 0; i < categories.size(); ++i) category_index.emplace(categories[i], i);

    PoiMatrix out;
    out.matrix.columns = categories;
    for (const auto* t : sorted) {
        out.matrix.ids.push_back(t->id);
        out.matrix.regions.push_back(t->region);
    }
    out.matrix.X.assign(sorted.size() * categories.size(), 0.0);

    std::set<std::string> seen_places;
    for (const auto& rec : records) {
        if (!seen_places.insert(rec.place_id).second) {
            ++out.duplicates;
            continue;
        }
        const geo::TractRecord* home = nullptr;
        size_t home_row = 0;
        for (size_t i = 0; i < sorted.size(); ++i) {
            if (geo::point_in_polygon(rec.location, sorted[i]->geometry)) {
                home = sorted[i];
                home_row = i;
                break;
            }
        }
        if (!home) {
            ++out.outside_tract;
            continue;
        }
        auto it = category_index.find(rec.category);
        if (it == category_index.end()) {
            ++out.unknown_category;
            continue;
        }
        out.matrix.X[home_row * categories.size() + it->second] += 1.0;
    }

    if (mode == PoiMode::per_km2) {
        for (size_t i = 0; i < sorted.size(); ++i) {
            double area = tract_area_km2(*sorted[i]);
            for (size_t c = 0; c < categories.size(); ++c)
                out.matrix.X[i * categories.size() + c] /= area;
        }
    }
    return out;
}

void write_feature_store(const FeatureStore& store, const std::filesystem::path& path) {
    for (const auto& rec : store.records)
        if (rec.values.size() != store.dim)
            throw std::runtime_error("feature store record " + rec.tract_id + " has wrong dim");

    if (path.extension() == ".csv") {
        std::ostringstream out;
        out << "tract_id,tile_count";
        for (uint32_t i = 0; i < store.dim; ++i) out << ",f" << i;
        out << '\n';
        for (const auto& rec : store.records) {
            out << rec.tract_id << ',' << rec.tile_count;
            for (float v : rec.values) out << ',' << strfmt("%.9g", static_cast<double>(v));
            out << '\n';
        }
        std::string s = out.str();
        atomic_write_file(path, s.data(), s.size());
        return;
    }

    std::vector<uint8_t> bytes;
    auto put_u32 = [&](uint32_t v) {
        const auto* b = reinterpret_cast<const uint8_t*>(&v);
        bytes.insert(bytes.end(), b, b + 4);
    };
    bytes.insert(bytes.end(), {'F', 'V', 'S', '1'});
    put_u32(store.dim);
    put_u32(static_cast<uint32_t>(store.records.size()));
    for (const auto& rec : store.records) {
        uint16_t len = static_cast<uint16_t>(rec.tract_id.size());
        const auto* lb = reinterpret_cast<const uint8_t*>(&len);
        bytes.insert(bytes.end(), lb, lb + 2);
        bytes.insert(bytes.end(), rec.tract_id.begin(), rec.tract_id.end());
        put_u32(rec.tile_count);
        const auto* vb = reinterpret_cast<const uint8_t*>(rec.values.data());
        bytes.insert(bytes.end(), vb, vb + rec.values.size() * 4);
    }
    atomic_write_file(path, bytes.data(), bytes.size());
}

FeatureStore read_feature_store(const std::filesystem::path& path) {
    auto bytes = read_file_bytes(path);
    FeatureStore store;

    if (looks_like_csv(bytes)) {
        std::istringstream in(std::string(bytes.begin(), bytes.end()));
        std::string line;
        if (!std::getline(in, line) || line.rfind("tract_id,tile_count", 0) != 0)
            throw InputError("feature store " + path.string() +
                             ": bad magic (neither FVS1 nor CSV header)");
        auto header = split(line, ',');
        store.dim = static_cast<uint32_t>(header.size() - 2);
        std::set<std::string> seen;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto cells = split(line, ',');
            if (cells.size() != header.size())
                throw InputError("feature store CSV row with wrong cell count");
            FeatureStore::Record rec;
            rec.tract_id = cells[0];
            if (!seen.insert(rec.tract_id).second)
                throw InputError("duplicate tract id " + rec.tract_id + " in feature store");
            rec.tile_count = static_cast<uint32_t>(parse_long(cells[1], "tile_count"));
            for (size_t i = 2; i < cells.size(); ++i)
                rec.values.push_back(static_cast<float>(parse_double(cells[i], "feature value")));
            store.records.push_back(std::move(rec));
        }
        std::sort(store.records.begin(), store.records.end(),
                  [](const auto& a, const auto& b) { return a.tract_id < b.tract_id; });
        return store;
    }

    size_t pos = 4;
    auto need = [&](size_t n) {
        if (pos + n > bytes.size()) throw InputError("truncated feature store " + path.string());
    };
    auto get_u32 = [&] {
        need(4);
        uint32_t v;
        std::memcpy(&v, bytes.data() + pos, 4);
        pos += 4;
        return v;
    };
    store.dim = get_u32();
    uint32_t count = get_u32();
    std::set<std::string> seen;
    for (uint32_t i = 0; i < count; ++i) {
        need(2);
        uint16_t len;
        std::memcpy(&len, bytes.data() + pos, 2);
        pos += 2;
        need(len);
        FeatureStore::Record rec;
        rec.tract_id.assign(reinterpret_cast<const char*>(bytes.data() + pos), len);
        pos += len;
        if (!seen.insert(rec.tract_id).second)
            throw InputError("duplicate tract id " + rec.tract_id + " in feature store");
        rec.tile_count = get_u32();
        need(static_cast<size_t>(store.dim) * 4);
        rec.values.resize(store.dim);
        std::memcpy(rec.values.data(), bytes.data() + pos, static_cast<size_t>(store.dim) * 4);
        pos += static_cast<size_t>(store.dim) * 4;
        store.records.push_back(std::move(rec));
    }
    if (pos != bytes.size()) throw InputError("trailing bytes in feature store " + path.string());
    std::sort(store.records.begin(), store.records.end(),
              [](const auto& a, const auto& b) { return a.tract_id < b.tract_id; });
    return store;
}

namespace {

BuildResult build_from_rows(const std::vector<std::string>& source_ids,
                            const std::vector<std::string>& columns,
                            const std::function<void(size_t, double*)>& copy_row,
                            const std::vector<geo::TractRecord>& tracts, Target target) {
    std::map<std::string, const geo::TractRecord*> by_id;
    for (const auto& t : tracts) by_id.emplace(t.id, &t);

    // source row index per id, ascending id
    std::map<std::string, size_t> source_by_id;
    for (size_t i = 0; i < source_ids.size(); ++i) source_by_id.emplace(source_ids[i], i);

    BuildResult out;
    out.matrix.columns = columns;
    for (const auto& [id, tract] : by_id) {
        auto src = source_by_id.find(id);
        std::optional<double> value =
            target == Target::prevalence ? tract->prevalence : tract->income;
        if (src == source_by_id.end() || !value) {
            out.excluded.push_back(id);
            continue;
        }
        out.matrix.ids.push_back(id);
        out.matrix.regions.push_back(tract->region);
        out.matrix.y.push_back(*value);
        size_t row = out.matrix.ids.size() - 1;
        out.matrix.X.resize(out.matrix.ids.size() * columns.size());
        copy_row(src->second, out.matrix.X.data() + row * columns.size());
    }
    if (out.matrix.ids.size() < 2)
        throw InputError(strfmt("need at least 2 tracts with a non-null target, got %zu",
                                out.matrix.ids.size()));
    for (double v : out.matrix.X)
        if (!std::isfinite(v)) throw InputError("non-finite feature value in design matrix");
    return out;
}

}  // namespace

BuildResult build_design_matrix(const FeatureStore& store,
                                const std::vector<geo::TractRecord>& tracts, Target target) {
    std::vector<std::string> ids;
    for (const auto& rec : store.records) ids.push_back(rec.tract_id);
    std::vector<std::string> columns;
    for (uint32_t i = 0; i < store.dim; ++i) columns.push_back(strfmt("f%u", i));
    return build_from_rows(
        ids, columns,
        [&](size_t src, double* dst) {
            const auto& vals = store.records[src].values;
            for (size_t i = 0; i < vals.size(); ++i) dst[i] = vals[i];
        },
        tracts, target);
}

BuildResult build_design_matrix(const DesignMatrix& features,
                                const std::vector<geo::TractRecord>& tracts, Target target) {
    return build_from_rows(
        features.ids, features.columns,
        [&](size_t src, double* dst) {
            const double* row = features.X.data() + src * features.columns.size();
            std::copy(row, row + features.columns.size(), dst);
        },
        tracts, target);
}

}  // namespace tractscope::features
