#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tractscope/model.hpp"

namespace tractscope::eval {

double r_squared(std::span<const double> y, std::span<const double> yhat);
double rmse(std::span<const double> y, std::span<const double> yhat);
double pearson(std::span<const double> y, std::span<const double> yhat);

enum class EvalMode { cv, holdout };

struct EvalReport {
    std::string scope;       // "pooled" or a region label
    std::string target;      // prevalence|income
    std::string featurizer;  // cnn|baseline|poi
    std::string mode;        // cv|holdout
    int n = 0;               // points the metrics are computed over
    int folds = 0;
    double alpha = 0.0;
    double lambda = 0.0;
    double r2 = 0.0;
    double rmse = 0.0;
    double pearson = 0.0;
    uint64_t seed = 0;
    std::vector<std::string> excluded;
};

struct Prediction {
    std::string tract_id;
    std::string region;
    double actual = 0.0;
    double predicted = 0.0;
};

struct EvalOutcome {
    std::vector<EvalReport> reports;      // pooled first, then one per region (sorted)
    std::vector<Prediction> predictions;  // pooled-model predictions (oof or holdout-test)
};

// mode=cv: metrics over out-of-fold predictions at the CV-selected lambda.
// mode=holdout: fit (with internal CV) on the seeded fraction split, metrics
// on the held-out rows; train/test id disjointness is asserted. Per-region
// reports rerun the whole procedure on the region's rows, including the
// small-sample fold rule.
EvalOutcome evaluate_run(const features::DesignMatrix& design, const model::ElasticNetConfig& cfg,
                         EvalMode mode, const std::string& featurizer, const std::string& target,
                         const std::vector<std::string>& excluded = {});

// Writes scatter.csv (`tract_id,region,actual,predicted`), report.csv (pinned
// header, 6 significant digits) and choropleth.geojson (input geometry with
// actual/predicted/residual properties; tracts without predictions get
// nulls).
void emit_outputs(const std::vector<EvalReport>& reports,
                  const std::vector<Prediction>& predictions,
                  const std::vector<geo::TractRecord>& tracts,
                  const std::filesystem::path& out_dir);

std::string report_csv_header();
std::string report_csv_row(const EvalReport& report);

}  // namespace tractscope::eval
