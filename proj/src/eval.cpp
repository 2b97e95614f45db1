#include "tractscope/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tractscope/errors.hpp"
#include "tractscope/strutil.hpp"

namespace tractscope::eval {

using nlohmann::json;

namespace {

void check_lengths(std::span<const double> y, std::span<const double> yhat, size_t min_len) {
    if (y.size() != yhat.size())
        throw InputError(strfmt("length mismatch: %zu vs %zu", y.size(), yhat.size()));
    if (y.size() < min_len) throw InputError(strfmt("need at least %zu points", min_len));
}

double mean_of(std::span<const double> v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

features::DesignMatrix subset_rows(const features::DesignMatrix& m,
                                   const std::vector<size_t>& rows) {
    features::DesignMatrix out;
    out.columns = m.columns;
    size_t p = m.cols();
    for (size_t r : rows) {
        out.ids.push_back(m.ids[r]);
        out.regions.push_back(m.regions[r]);
        out.y.push_back(m.y[r]);
        out.X.insert(out.X.end(), m.X.begin() + r * p, m.X.begin() + (r + 1) * p);
    }
    return out;
}

EvalReport run_one(const features::DesignMatrix& design, const model::ElasticNetConfig& cfg,
                   EvalMode mode, std::vector<Prediction>* predictions_out) {
    EvalReport report;
    report.seed = cfg.seed;
    report.alpha = cfg.alpha;

    std::vector<double> actual, predicted;
    std::vector<size_t> rows;

    if (mode == EvalMode::cv) {
        model::CvResult cv = model::kfold_cv(design, cfg);
        report.folds = cv.folds;
        report.lambda = cv.selected_lambda;
        actual = design.y;
        predicted = cv.oof_pred;
        rows.resize(design.rows());
        std::iota(rows.begin(), rows.end(), 0);
    } else {
        auto [train_ids, test_ids] =
            model::train_test_split(design.ids, cfg.holdout_fraction, cfg.seed);
        std::set<std::string> train_set(train_ids.begin(), train_ids.end());
        std::set<std::string> test_set(test_ids.begin(), test_ids.end());
        for (const auto& id : train_set)
            if (test_set.count(id))
                throw std::runtime_error("train/test overlap on id " + id);

        std::vector<size_t> train_rows, test_rows;
        for (size_t i = 0; i < design.rows(); ++i)
            (train_set.count(design.ids[i]) ? train_rows : test_rows).push_back(i);

        features::DesignMatrix train = subset_rows(design, train_rows);
        model::FitWithCv fitted = model::fit_elastic_net(train, cfg);
        report.folds = fitted.cv.folds;
        report.lambda = fitted.fit.lambda;

        features::DesignMatrix test = subset_rows(design, test_rows);
        predicted = model::predict(fitted.fit, test);
        actual = test.y;
        rows = test_rows;
    }

    report.n = static_cast<int>(actual.size());
    report.r2 = r_squared(actual, predicted);
    report.rmse = rmse(actual, predicted);
    report.pearson = pearson(actual, predicted);

    if (predictions_out) {
        for (size_t k = 0; k < rows.size(); ++k)
            predictions_out->push_back(
                {design.ids[rows[k]], design.regions[rows[k]], actual[k], predicted[k]});
    }
    return report;
}

}  // namespace

double r_squared(std::span<const double> y, std::span<const double> yhat) {
    check_lengths(y, yhat, 2);
    double y_mean = mean_of(y);
    double ss_res = 0.0, ss_tot = 0.0;
    for (size_t i = 0; i < y.size(); ++i) {
        ss_res += (y[i] - yhat[i]) * (y[i] - yhat[i]);
        ss_tot += (y[i] - y_mean) * (y[i] - y_mean);
    }
    if (ss_tot <= 0.0) throw InputError("r_squared undefined for constant response");
    return 1.0 - ss_res / ss_tot;
}

double rmse(std::span<const double> y, std::span<const double> yhat) {
    check_lengths(y, yhat, 1);
    double ss = 0.0;
    for (size_t i = 0; i < y.size(); ++i) ss += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    return std::sqrt(ss / static_cast<double>(y.size()));
}

double pearson(std::span<const double> y, std::span<const double> yhat) {
    check_lengths(y, yhat, 2);
    double my = mean_of(y), mh = mean_of(yhat);
    double sy = 0.0, sh = 0.0, shy = 0.0;
    for (size_t i = 0; i < y.size(); ++i) {
        double dy = y[i] - my, dh = yhat[i] - mh;
        sy += dy * dy;
        sh += dh * dh;
        shy += dy * dh;
    }
    if (sy <= 0.0 || sh <= 0.0) throw InputError("undefined correlation for constant input");
    return shy / std::sqrt(sy * sh);
}

EvalOutcome evaluate_run(const features::DesignMatrix& design, const model::ElasticNetConfig& cfg,
                         EvalMode mode, const std::string& featurizer, const std::string& target,
                         const std::vector<std::string>& excluded) {
    if (design.rows() < 2) throw InputError("design matrix has fewer than 2 rows");
    EvalOutcome out;

    EvalReport pooled = run_one(design, cfg, mode, &out.predictions);
    pooled.scope = "pooled";
    pooled.target = target;
    pooled.featurizer = featurizer;
    pooled.mode = mode == EvalMode::cv ? "cv" : "holdout";
    pooled.excluded = excluded;
    out.reports.push_back(pooled);

    std::map<std::string, std::vector<size_t>> by_region;
    for (size_t i = 0; i < design.rows(); ++i) by_region[design.regions[i]].push_back(i);
    if (by_region.size() > 1) {
        for (const auto& [region, rows] : by_region) {
            features::DesignMatrix sub = subset_rows(design, rows);
            if (sub.rows() < static_cast<size_t>(cfg.effective_folds(sub.rows())))
                throw InputError(strfmt("region %s has %zu rows, fewer than %d folds",
                                        region.c_str(), sub.rows(),
                                        cfg.effective_folds(sub.rows())));
            EvalReport rr = run_one(sub, cfg, mode, nullptr);
            rr.scope = region;
            rr.target = target;
            rr.featurizer = featurizer;
            rr.mode = pooled.mode;
            out.reports.push_back(std::move(rr));
        }
    }
    return out;
}

std::string report_csv_header() {
    return "scope,target,featurizer,mode,n,folds,alpha,lambda,r2,rmse,pearson,seed";
}

std::string report_csv_row(const EvalReport& r) {
    return strfmt("%s,%s,%s,%s,%d,%d,%.6g,%.6g,%.6g,%.6g,%.6g,%llu", r.scope.c_str(),
                  r.target.c_str(), r.featurizer.c_str(), r.mode.c_str(), r.n, r.folds, r.alpha,
                  r.lambda, r.r2, r.rmse, r.pearson,
                  static_cast<unsigned long long>(r.seed));
}

void emit_outputs(const std::vector<EvalReport>& reports,
                  const std::vector<Prediction>& predictions,
                  const std::vector<geo::TractRecord>& tracts,
                  const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (!std::filesystem::is_directory(out_dir))
        throw InputError("cannot create output directory " + out_dir.string());

    {
        std::ostringstream scatter;
        scatter << "tract_id,region,actual,predicted\n";
        for (const auto& p : predictions)
            scatter << p.tract_id << ',' << p.region << ','
                    << strfmt("%.9g,%.9g", p.actual, p.predicted) << '\n';
        write_file(out_dir / "scatter.csv", scatter.str());
    }
    {
        std::ostringstream report;
        report << report_csv_header() << '\n';
        for (const auto& r : reports) report << report_csv_row(r) << '\n';
        write_file(out_dir / "report.csv", report.str());
    }

    std::map<std::string, const Prediction*> by_id;
    for (const auto& p : predictions) by_id.emplace(p.tract_id, &p);

    json features_array = json::array();
    for (const auto& tract : tracts) {
        json props;
        props["tract_id"] = tract.id;
        props["region"] = tract.region;
        if (tract.prevalence)
            props["prevalence"] = *tract.prevalence;
        else
            props["prevalence"] = nullptr;
        if (tract.income)
            props["income"] = *tract.income;
        else
            props["income"] = nullptr;
        if (tract.land_area_km2) props["land_area_km2"] = *tract.land_area_km2;

        auto it = by_id.find(tract.id);
        if (it != by_id.end()) {
            props["actual"] = it->second->actual;
            props["predicted"] = it->second->predicted;
            props["residual"] = it->second->actual - it->second->predicted;
        } else {
            props["actual"] = nullptr;
            props["predicted"] = nullptr;
            props["residual"] = nullptr;
        }

        auto ring_to_json = [](const geo::Ring& ring) {
            json arr = json::array();
            for (const auto& v : ring) arr.push_back(json::array({v.lon, v.lat}));
            return arr;
        };
        json geometry;
        if (tract.geometry.size() == 1) {
            geometry["type"] = "Polygon";
            json rings = json::array();
            rings.push_back(ring_to_json(tract.geometry[0].outer));
            for (const auto& hole : tract.geometry[0].holes) rings.push_back(ring_to_json(hole));
            geometry["coordinates"] = rings;
        } else {
            geometry["type"] = "MultiPolygon";
            json polys = json::array();
            for (const auto& poly : tract.geometry) {
                json rings = json::array();
                rings.push_back(ring_to_json(poly.outer));
                for (const auto& hole : poly.holes) rings.push_back(ring_to_json(hole));
                polys.push_back(rings);
            }
            geometry["coordinates"] = polys;
        }
        json feature{{"type", "Feature"}, {"geometry", geometry}, {"properties", props}};
        features_array.push_back(std::move(feature));
    }
    json collection{{"type", "FeatureCollection"}, {"features", features_array}};
    write_file(out_dir / "choropleth.geojson", collection.dump(1) + "\n");
}

}  // namespace tractscope::eval
