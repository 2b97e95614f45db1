#include <doctest.h>

#include <filesystem>
#include <set>

#include <nlohmann/json.hpp>

#include "tractscope/errors.hpp"
#include "tractscope/eval.hpp"
#include "tractscope/rng.hpp"
#include "tractscope/strutil.hpp"

using namespace tractscope;
using namespace tractscope::eval;

namespace fs = std::filesystem;

namespace {

features::DesignMatrix regioned_design(size_t per_region, const std::vector<std::string>& regions,
                                       SplitMix64& rng, size_t p = 3) {
    features::DesignMatrix m;
    for (size_t j = 0; j < p; ++j) m.columns.push_back("f" + std::to_string(j));
    int counter = 0;
    for (const auto& region : regions) {
        for (size_t i = 0; i < per_region; ++i) {
            double y = 1.0;
            for (size_t j = 0; j < p; ++j) {
                double x = rng.next_normal();
                m.X.push_back(x);
                y += (j == 0 ? 2.0 : 0.2) * x;
            }
            m.y.push_back(y + 0.3 * rng.next_normal());
            m.ids.push_back(strfmt("T%04d", counter++));
            m.regions.push_back(region);
        }
    }
    return m;
}

geo::TractRecord square_tract(const std::string& id, double lat0, double lon0, double side) {
    geo::TractRecord t;
    t.id = id;
    t.region = "r1";
    t.geometry.push_back({{{lat0, lon0},
                           {lat0, lon0 + side},
                           {lat0 + side, lon0 + side},
                           {lat0 + side, lon0},
                           {lat0, lon0}},
                          {}});
    return t;
}

}  // namespace

TEST_CASE("r_squared anchors and spreadsheet oracle") {
    std::vector<double> y = {1, 2, 3, 4};
    CHECK(r_squared(y, y) == doctest::Approx(1.0));

    std::vector<double> mean_pred(4, 2.5);
    CHECK(r_squared(y, mean_pred) == doctest::Approx(0.0));

    // hand computation: ss_res = 0.01+0.01+0.04+0.04 = 0.10, ss_tot = 5.0
    std::vector<double> yhat = {1.1, 1.9, 3.2, 3.8};
    CHECK(r_squared(y, yhat) == doctest::Approx(1.0 - 0.10 / 5.0).epsilon(1e-12));

    std::vector<double> constant(4, 3.0);
    CHECK_THROWS_AS(r_squared(constant, yhat), InputError);
    CHECK_THROWS_AS(r_squared(y, std::vector<double>{1.0}), InputError);
}

TEST_CASE("rmse anchors and direct oracle") {
    std::vector<double> y = {1, 2, 3};
    CHECK(rmse(y, y) == doctest::Approx(0.0));

    std::vector<double> plus1 = {2, 3, 4};
    CHECK(rmse(y, plus1) == doctest::Approx(1.0));

    SplitMix64 rng(1);
    std::vector<double> a(10), b(10);
    for (size_t i = 0; i < 10; ++i) {
        a[i] = rng.next_normal();
        b[i] = rng.next_normal();
    }
    double ss = 0.0;
    for (size_t i = 0; i < 10; ++i) ss += (a[i] - b[i]) * (a[i] - b[i]);
    CHECK(rmse(a, b) == doctest::Approx(std::sqrt(ss / 10.0)));

    CHECK_THROWS_AS(rmse(y, std::vector<double>{1.0}), InputError);
}

TEST_CASE("pearson anchors and affine invariance") {
    std::vector<double> y = {1, 2, 3};
    CHECK(pearson(y, std::vector<double>{2, 4, 6}) == doctest::Approx(1.0));
    CHECK(pearson(y, std::vector<double>{3, 2, 1}) == doctest::Approx(-1.0));

    SplitMix64 rng(2);
    std::vector<double> a(20), b(20);
    for (size_t i = 0; i < 20; ++i) {
        a[i] = rng.next_normal();
        b[i] = a[i] + 0.7 * rng.next_normal();
    }
    double base = pearson(a, b);
    std::vector<double> a2(20), b2(20);
    for (size_t i = 0; i < 20; ++i) {
        a2[i] = 3.0 * a[i] + 11.0;
        b2[i] = 0.5 * b[i] - 4.0;
    }
    CHECK(pearson(a2, b2) == doctest::Approx(base).epsilon(1e-12));

    CHECK_THROWS_WITH_AS(pearson(std::vector<double>{1, 1, 1}, y),
                         doctest::Contains("undefined correlation"), InputError);
}

TEST_CASE("metrics are invariant to simultaneous permutation") {
    SplitMix64 rng(3);
    std::vector<double> y(15), yhat(15);
    for (size_t i = 0; i < 15; ++i) {
        y[i] = rng.next_normal();
        yhat[i] = y[i] + 0.4 * rng.next_normal();
    }
    std::vector<size_t> order(15);
    for (size_t i = 0; i < 15; ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<double> yp(15), yhp(15);
    for (size_t i = 0; i < 15; ++i) {
        yp[i] = y[order[i]];
        yhp[i] = yhat[order[i]];
    }
    CHECK(r_squared(yp, yhp) == doctest::Approx(r_squared(y, yhat)));
    CHECK(rmse(yp, yhp) == doctest::Approx(rmse(y, yhat)));
    CHECK(pearson(yp, yhp) == doctest::Approx(pearson(y, yhat)));
}

TEST_CASE("r_squared equals pearson^2 for OLS fitted values") {
    SplitMix64 rng(4);
    size_t n = 30;
    std::vector<double> x(n), y(n);
    for (size_t i = 0; i < n; ++i) {
        x[i] = rng.next_normal();
        y[i] = 1.5 * x[i] + 0.8 * rng.next_normal();
    }
    // closed-form simple OLS of y on x
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0;
    for (size_t i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    double slope = sxy / sxx, intercept = my - slope * mx;
    std::vector<double> yhat(n);
    for (size_t i = 0; i < n; ++i) yhat[i] = intercept + slope * x[i];
    CHECK(r_squared(y, yhat) == doctest::Approx(std::pow(pearson(y, yhat), 2)).epsilon(1e-12));
}

TEST_CASE("evaluate_run cv emits pooled plus per-region reports") {
    SplitMix64 rng(5);
    auto design = regioned_design(60, {"east", "west"}, rng);
    model::ElasticNetConfig cfg;
    cfg.path_length = 20;
    auto outcome = evaluate_run(design, cfg, EvalMode::cv, "baseline", "prevalence", {"X9"});

    REQUIRE(outcome.reports.size() == 3);  // pooled + 2 regions
    CHECK(outcome.reports[0].scope == "pooled");
    CHECK(outcome.reports[0].n == 120);
    CHECK(outcome.reports[0].folds == 3);  // n=120 < 200
    CHECK(outcome.reports[0].featurizer == "baseline");
    CHECK(outcome.reports[0].mode == "cv");
    CHECK(outcome.reports[0].excluded == std::vector<std::string>{"X9"});
    CHECK(outcome.reports[1].scope == "east");
    CHECK(outcome.reports[2].scope == "west");
    for (const auto& r : outcome.reports) {
        CHECK(r.r2 <= 1.0);
        CHECK(r.rmse >= 0.0);
        CHECK(std::abs(r.pearson) <= 1.0);
    }
    // out-of-fold predictions cover every pooled row exactly once
    CHECK(outcome.predictions.size() == 120);
    std::set<std::string> ids;
    for (const auto& p : outcome.predictions) CHECK(ids.insert(p.tract_id).second);
}

TEST_CASE("evaluate_run holdout keeps train and test disjoint") {
    SplitMix64 rng(6);
    auto design = regioned_design(110, {"east", "west"}, rng);  // pooled n=220 -> 5 folds
    model::ElasticNetConfig cfg;
    cfg.path_length = 20;
    cfg.holdout_fraction = 0.6;
    auto outcome = evaluate_run(design, cfg, EvalMode::holdout, "baseline", "prevalence");

    CHECK(outcome.reports[0].mode == "holdout");
    CHECK(outcome.reports[0].n == 220 - static_cast<int>(std::llround(0.6 * 220)));
    CHECK(outcome.reports[0].folds == 3);  // CV runs on the train split: n=132 < 200
    // metrics computed on test rows only
    CHECK(outcome.predictions.size() == static_cast<size_t>(outcome.reports[0].n));

    // determinism under identical seeds
    auto again = evaluate_run(design, cfg, EvalMode::holdout, "baseline", "prevalence");
    CHECK(again.reports[0].r2 == outcome.reports[0].r2);
    CHECK(again.reports[0].lambda == outcome.reports[0].lambda);
}

TEST_CASE("evaluate_run rejects a region smaller than its fold count") {
    SplitMix64 rng(7);
    auto design = regioned_design(2, {"tiny", "alsotiny"}, rng);
    model::ElasticNetConfig cfg;
    cfg.folds = 3;
    CHECK_THROWS_AS(evaluate_run(design, cfg, EvalMode::cv, "baseline", "prevalence"),
                    InputError);
}

TEST_CASE("report CSV row format uses 6 significant digits") {
    EvalReport r;
    r.scope = "pooled";
    r.target = "prevalence";
    r.featurizer = "baseline";
    r.mode = "cv";
    r.n = 200;
    r.folds = 5;
    r.alpha = 0.5;
    r.lambda = 0.01234567;
    r.r2 = 0.7512345;
    r.rmse = 4.351234;
    r.pearson = 0.8112345;
    r.seed = 42;
    CHECK(report_csv_row(r) ==
          "pooled,prevalence,baseline,cv,200,5,0.5,0.0123457,0.751235,4.35123,0.811234,42");
    CHECK(report_csv_header() == "scope,target,featurizer,mode,n,folds,alpha,lambda,r2,rmse,"
                                 "pearson,seed");
}

TEST_CASE("emit_outputs writes scatter, report and null-annotated choropleth") {
    std::vector<geo::TractRecord> tracts = {square_tract("A", 0.0, 0.0, 0.01),
                                            square_tract("B", 0.02, 0.0, 0.01),
                                            square_tract("C", 0.04, 0.0, 0.01)};
    tracts[0].prevalence = 20.0;
    tracts[1].prevalence = 30.0;  // modeled but excluded from predictions below
    // C has no outcome at all

    std::vector<EvalReport> reports(1);
    reports[0].scope = "pooled";
    reports[0].target = "prevalence";
    reports[0].featurizer = "baseline";
    reports[0].mode = "cv";
    reports[0].n = 2;
    reports[0].folds = 3;
    reports[0].seed = 42;
    std::vector<Prediction> preds = {{"A", "r1", 20.0, 21.5}};

    fs::path dir = fs::temp_directory_path() / "tractscope_emit_test";
    fs::remove_all(dir);
    emit_outputs(reports, preds, tracts, dir);

    std::string scatter = read_file(dir / "scatter.csv");
    CHECK(scatter.rfind("tract_id,region,actual,predicted", 0) == 0);
    CHECK(scatter.find("A,r1,20,21.5") != std::string::npos);
    CHECK(std::count(scatter.begin(), scatter.end(), '\n') == 2);  // header + 1 row

    std::string report = read_file(dir / "report.csv");
    CHECK(report.find("pooled,prevalence,baseline,cv,2,3") != std::string::npos);

    // choropleth re-parses through parse_tract_collection with geometry intact
    std::string geojson = read_file(dir / "choropleth.geojson");
    auto parsed = geo::parse_tract_collection(geojson);
    REQUIRE(parsed.size() == 3);
    CHECK(parsed[0].id == "A");
    for (size_t i = 0; i < 3; ++i) {
        REQUIRE(parsed[i].geometry.size() == tracts[i].geometry.size());
        const auto& a = parsed[i].geometry[0].outer;
        const auto& b = tracts[i].geometry[0].outer;
        REQUIRE(a.size() == b.size());
        for (size_t k = 0; k < a.size(); ++k) {
            CHECK(a[k].lat == b[k].lat);  // untouched, bit-for-bit
            CHECK(a[k].lon == b[k].lon);
        }
    }

    // nulls for tracts without predictions
    auto doc = nlohmann::json::parse(geojson);
    bool saw_null = false, saw_value = false;
    for (const auto& f : doc["features"]) {
        const auto& props = f["properties"];
        if (props["tract_id"] == "A") {
            CHECK(props["predicted"].get<double>() == doctest::Approx(21.5));
            CHECK(props["residual"].get<double>() == doctest::Approx(-1.5));
            saw_value = true;
        } else {
            CHECK(props["actual"].is_null());
            CHECK(props["predicted"].is_null());
            CHECK(props["residual"].is_null());
            saw_null = true;
        }
    }
    CHECK(saw_value);
    CHECK(saw_null);
}
