#include <doctest.h>

#include <filesystem>
#include <set>

#include "tractscope/errors.hpp"
#include "tractscope/features.hpp"
#include "tractscope/rng.hpp"
#include "tractscope/strutil.hpp"

using namespace tractscope;
using namespace tractscope::features;

namespace fs = std::filesystem;

namespace {

cnn::FeatureVector fv(std::vector<float> values) {
    cnn::FeatureVector v;
    v.values = std::move(values);
    v.extractor_id = "baseline";
    return v;
}

geo::Ring square_ring(double lat0, double lon0, double side) {
    return {{lat0, lon0},
            {lat0, lon0 + side},
            {lat0 + side, lon0 + side},
            {lat0 + side, lon0},
            {lat0, lon0}};
}

geo::TractRecord square_tract(const std::string& id, double lat0, double lon0, double side) {
    geo::TractRecord t;
    t.id = id;
    t.region = "r1";
    t.geometry.push_back({square_ring(lat0, lon0, side), {}});
    return t;
}

fs::path temp_file(const std::string& name) {
    auto p = fs::temp_directory_path() / ("tractscope_feat_" + name);
    fs::remove(p);
    return p;
}

FeatureStore sample_store() {
    FeatureStore store;
    store.extractor_id = "baseline";
    store.dim = 3;
    store.records = {{"A", 4, {1.0f, 2.0f, 3.0f}},
                     {"B", 2, {0.5f, -1.25f, 8.0f}},
                     {"C", 9, {1e-7f, 123456.78f, -0.001f}}};
    return store;
}

bool stores_equal(const FeatureStore& a, const FeatureStore& b, float tol = 0.0f) {
    if (a.dim != b.dim || a.records.size() != b.records.size()) return false;
    for (size_t i = 0; i < a.records.size(); ++i) {
        if (a.records[i].tract_id != b.records[i].tract_id) return false;
        if (a.records[i].tile_count != b.records[i].tile_count) return false;
        for (size_t j = 0; j < a.dim; ++j) {
            float d = std::abs(a.records[i].values[j] - b.records[i].values[j]);
            float scale = std::max(1.0f, std::abs(a.records[i].values[j]));
            if (d > tol * scale) return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("aggregate_tract mean and edge cases") {
    auto mean = aggregate_tract(std::vector<cnn::FeatureVector>{fv({1, 2}), fv({3, 4})});
    CHECK(mean.values == std::vector<float>{2.0f, 3.0f});

    auto single = aggregate_tract(std::vector<cnn::FeatureVector>{fv({7, 8, 9})});
    CHECK(single.values == std::vector<float>{7.0f, 8.0f, 9.0f});

    CHECK_THROWS_AS(aggregate_tract(std::vector<cnn::FeatureVector>{}), InputError);
    CHECK_THROWS_AS(aggregate_tract(std::vector<cnn::FeatureVector>{fv({1}), fv({1, 2})}),
                    InputError);
}

TEST_CASE("aggregate_tract permutation stability within 1e-12") {
    SplitMix64 rng(3);
    std::vector<cnn::FeatureVector> vecs;
    for (int i = 0; i < 10; ++i) {
        std::vector<float> vals(16);
        for (auto& v : vals) v = static_cast<float>(rng.next_double() * 100.0 - 50.0);
        vecs.push_back(fv(vals));
    }
    auto base = aggregate_tract(vecs);
    std::vector<cnn::FeatureVector> shuffled = vecs;
    rng.shuffle(shuffled);
    auto permuted = aggregate_tract(shuffled);
    for (size_t i = 0; i < base.values.size(); ++i)
        CHECK(std::abs(double(base.values[i]) - double(permuted.values[i])) <=
              1e-12 * std::max(1.0, std::abs(double(base.values[i]))));
}

TEST_CASE("aggregate_tract scaling equivariance") {
    SplitMix64 rng(4);
    std::vector<cnn::FeatureVector> vecs, scaled;
    float c = 3.5f;
    for (int i = 0; i < 5; ++i) {
        std::vector<float> vals(8), s(8);
        for (size_t j = 0; j < 8; ++j) {
            vals[j] = static_cast<float>(rng.next_double());
            s[j] = c * vals[j];
        }
        vecs.push_back(fv(vals));
        scaled.push_back(fv(s));
    }
    auto m = aggregate_tract(vecs);
    auto ms = aggregate_tract(scaled);
    for (size_t j = 0; j < 8; ++j)
        CHECK(ms.values[j] == doctest::Approx(c * m.values[j]).epsilon(1e-5));
}

TEST_CASE("poi_feature_matrix dedup, counts and per-km2") {
    std::vector<geo::TractRecord> tracts = {square_tract("T1", 0.0, 0.0, 0.01)};
    tracts[0].land_area_km2 = 2.0;

    std::vector<acq::PoiRecord> records = {
        {"p1", "restaurant", {0.005, 0.005}}, {"p2", "restaurant", {0.004, 0.004}},
        {"p3", "restaurant", {0.006, 0.006}}, {"p4", "gym", {0.005, 0.006}},
        {"p1", "restaurant", {0.005, 0.005}},  // duplicate place_id
        {"p5", "bowling", {0.005, 0.005}},     // unknown category
        {"p6", "gym", {0.5, 0.5}},             // outside every tract
    };
    std::vector<std::string> vocab = {"restaurant", "gym"};

    auto counts = poi_feature_matrix(records, tracts, vocab, PoiMode::counts);
    REQUIRE(counts.matrix.rows() == 1);
    CHECK(counts.matrix.at(0, 0) == doctest::Approx(3.0));
    CHECK(counts.matrix.at(0, 1) == doctest::Approx(1.0));
    CHECK(counts.duplicates == 1);
    CHECK(counts.unknown_category == 1);
    CHECK(counts.outside_tract == 1);

    auto density = poi_feature_matrix(records, tracts, vocab, PoiMode::per_km2);
    CHECK(density.matrix.at(0, 0) == doctest::Approx(1.5));
    CHECK(density.matrix.at(0, 1) == doctest::Approx(0.5));

    CHECK_THROWS_AS(poi_feature_matrix(records, tracts, {}, PoiMode::counts), InputError);
}

TEST_CASE("poi_feature_matrix dedup idempotence and count conservation") {
    SplitMix64 rng(5);
    std::vector<geo::TractRecord> tracts = {square_tract("A", 0.0, 0.0, 0.01),
                                            square_tract("B", 0.0, 0.02, 0.01)};
    std::vector<std::string> vocab = {"gym", "park", "cafe"};
    std::vector<acq::PoiRecord> records;
    for (int i = 0; i < 60; ++i) {
        acq::PoiRecord rec;
        rec.place_id = "p" + std::to_string(static_cast<int>(rng.next_below(40)));  // collisions
        rec.category = vocab[rng.next_below(3)];
        bool in_a = rng.next_below(2) == 0;
        rec.location = {0.001 + 0.008 * rng.next_double(),
                        (in_a ? 0.0 : 0.02) + 0.001 + 0.008 * rng.next_double()};
        records.push_back(rec);
    }
    auto once = poi_feature_matrix(records, tracts, vocab, PoiMode::counts);

    // explicit pre-dedup: first occurrence wins
    std::vector<acq::PoiRecord> dedup;
    std::set<std::string> seen;
    for (const auto& r : records)
        if (seen.insert(r.place_id).second) dedup.push_back(r);
    auto twice = poi_feature_matrix(dedup, tracts, vocab, PoiMode::counts);
    CHECK(once.matrix.X == twice.matrix.X);

    double total = 0.0;
    for (double v : once.matrix.X) total += v;
    CHECK(total == doctest::Approx(static_cast<double>(dedup.size()) - once.outside_tract -
                                   once.unknown_category));
}

TEST_CASE("feature store binary round-trip is bit exact") {
    auto store = sample_store();
    auto path = temp_file("store.fvs");
    write_feature_store(store, path);
    auto back = read_feature_store(path);
    CHECK(stores_equal(store, back, 0.0f));

    // byte-level: write(read(bytes)) == bytes
    auto bytes1 = read_file_bytes(path);
    auto path2 = temp_file("store2.fvs");
    write_feature_store(back, path2);
    CHECK(read_file_bytes(path2) == bytes1);
}

TEST_CASE("feature store CSV round-trip and binary agreement") {
    auto store = sample_store();
    auto csv_path = temp_file("store.csv");
    write_feature_store(store, csv_path);
    auto back = read_feature_store(csv_path);
    CHECK(stores_equal(store, back, 1e-6f));

    std::string text = read_file(csv_path);
    CHECK(text.rfind("tract_id,tile_count,f0,f1,f2", 0) == 0);
}

TEST_CASE("feature store rejects corrupt payloads") {
    auto store = sample_store();
    auto path = temp_file("store3.fvs");
    write_feature_store(store, path);

    auto bytes = read_file_bytes(path);
    bytes[0] = 'X';
    auto bad = temp_file("bad.fvs");
    write_file(bad, std::string(bytes.begin(), bytes.end()));
    CHECK_THROWS_WITH_AS(read_feature_store(bad), doctest::Contains("bad magic"), InputError);

    bytes = read_file_bytes(path);
    bytes.resize(bytes.size() - 5);
    auto trunc = temp_file("trunc.fvs");
    write_file(trunc, std::string(bytes.begin(), bytes.end()));
    CHECK_THROWS_WITH_AS(read_feature_store(trunc), doctest::Contains("truncated"), InputError);
}

TEST_CASE("build_design_matrix filters null targets and missing features") {
    FeatureStore store = sample_store();  // tracts A, B, C
    std::vector<geo::TractRecord> tracts = {square_tract("A", 0.0, 0.0, 0.01),
                                            square_tract("B", 0.02, 0.0, 0.01),
                                            square_tract("C", 0.04, 0.0, 0.01),
                                            square_tract("D", 0.06, 0.0, 0.01)};
    tracts[0].prevalence = 20.0;
    tracts[1].prevalence = std::nullopt;  // excluded: null target
    tracts[2].prevalence = 30.0;
    tracts[3].prevalence = 40.0;  // excluded: no features
    tracts[0].income = 50000.0;
    tracts[2].income = 60000.0;

    auto built = build_design_matrix(store, tracts, Target::prevalence);
    CHECK(built.matrix.ids == std::vector<std::string>{"A", "C"});
    CHECK(built.matrix.y == std::vector<double>{20.0, 30.0});
    CHECK(built.excluded == std::vector<std::string>{"B", "D"});
    CHECK(built.matrix.columns.size() == 3);
    CHECK(built.matrix.at(1, 1) == doctest::Approx(123456.78).epsilon(1e-6));

    auto income = build_design_matrix(store, tracts, Target::income);
    CHECK(income.matrix.y == std::vector<double>{50000.0, 60000.0});

    // row order stable across calls
    auto again = build_design_matrix(store, tracts, Target::prevalence);
    CHECK(again.matrix.ids == built.matrix.ids);
    CHECK(again.matrix.X == built.matrix.X);

    // fewer than 2 usable rows
    tracts[2].prevalence = std::nullopt;
    CHECK_THROWS_AS(build_design_matrix(store, tracts, Target::prevalence), InputError);
}
