#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tractscope/features.hpp"

namespace tractscope::model {

struct ElasticNetConfig {
    double alpha = 0.5;  // L1/L2 mix, 1 = pure L1
    int path_length = 100;
    double path_ratio = 1e-3;
    double tol = 1e-7;
    long max_sweeps = 100000;
    std::optional<int> folds;        // unset: 5, or 3 when n < 200
    std::optional<int> feature_cap;  // unset: number of rows
    uint64_t seed = 42;
    double holdout_fraction = 0.6;

    int effective_folds(size_t n) const {
        if (folds) return *folds;
        return n < 200 ? 3 : 5;
    }
    int effective_cap(size_t n) const {
        return feature_cap ? *feature_cap : static_cast<int>(n);
    }
};

// Column-standardized copy of a design matrix. Columns with population sd
// below 1e-12 are zeroed and recorded; surviving columns have mean 0 and
// population variance 1.
struct Standardized {
    size_t n = 0, p = 0;
    std::vector<double> columns;  // column-major, n*p, dropped columns all-zero
    std::vector<double> means;
    std::vector<double> sds;           // as computed (dropped columns keep their tiny sd)
    std::vector<size_t> dropped;       // column indices
    std::vector<uint8_t> kept;         // 1/0 per column

    const double* col(size_t j) const { return columns.data() + j * n; }
};

Standardized standardize(const double* X_row_major, size_t n, size_t p);
Standardized standardize(const features::DesignMatrix& m);

double soft_threshold(double z, double g);

// Coordinate-descent solution on the standardized scale, y centered
// internally (intercept = mean of y).
struct StandardizedFit {
    std::vector<double> beta;  // standardized scale, length p
    double intercept = 0.0;    // mean of y
    long sweeps = 0;
    double lambda = 0.0;
    double alpha = 0.0;
};

// Cyclic coordinate descent: beta_j <- S((1/n) x_j^T r_-j, lambda*alpha) /
// (1 + lambda*(1-alpha)). Stops when no coefficient moves by tol within a
// sweep; throws if max_sweeps is exhausted first. warm_start, when given,
// seeds beta. objective_trace, when given, records the penalized objective
// after every sweep.
StandardizedFit fit_at_lambda(const Standardized& Xs, std::span<const double> y, double lambda,
                              double alpha, const std::vector<double>* warm_start, double tol,
                              long max_sweeps, std::vector<double>* objective_trace = nullptr);

// (1/2n)||y - b0 - X beta||^2 + lambda*(alpha*||beta||_1 + (1-alpha)/2*||beta||_2^2)
double penalized_objective(const Standardized& Xs, std::span<const double> y,
                           std::span<const double> beta, double lambda, double alpha);

// True iff |x_j^T r / n| <= lambda*alpha + 10*tol for every zero coefficient
// and the stationarity residual of every active coordinate is within 10*tol.
bool kkt_satisfied(const Standardized& Xs, std::span<const double> y,
                   std::span<const double> beta, double lambda, double alpha, double tol);

// lambda_max = max_j |x_j^T yc| / (n * max(alpha, 0.001)); log-spaced descent
// to lambda_max * path_ratio. Throws "zero-variance response" on constant y.
std::vector<double> lambda_path(const Standardized& Xs, std::span<const double> y, double alpha,
                                int path_length, double path_ratio);

// Fit on the original scale: standardizes internally, destandardizes back.
struct ElasticNetFit {
    double intercept = 0.0;
    std::vector<double> coefficients;  // original scale, dropped columns at 0
    double lambda = 0.0;
    double alpha = 0.0;
    std::vector<double> column_means;
    std::vector<double> column_sds;
    std::vector<std::string> dropped_columns;
    int active_set_size = 0;
    std::vector<std::string> columns;
};

ElasticNetFit destandardize(const Standardized& Xs, const StandardizedFit& fit,
                            const std::vector<std::string>& columns);

std::vector<double> predict(const ElasticNetFit& fit, const double* X_row_major, size_t n,
                            size_t p);
std::vector<double> predict(const ElasticNetFit& fit, const features::DesignMatrix& m);

struct CvResult {
    std::vector<double> lambdas;       // descending
    std::vector<double> mean_cv_mse;   // per lambda, averaged over folds
    std::vector<int> fold_of;          // per row
    std::vector<double> oof_pred;      // out-of-fold prediction per row at selected lambda
    std::vector<int> active_sizes;     // full-data active-set size per lambda
    size_t selected_index = 0;
    double selected_lambda = 0.0;
    int folds = 0;
};

// Rows are shuffled by the seeded generator and dealt round-robin into folds;
// each fold standardizes on its own training portion and fits the shared
// path with warm starts. Fold fits run in parallel; merge order is fold
// index, so the result is independent of thread count.
CvResult kfold_cv(const features::DesignMatrix& m, const ElasticNetConfig& cfg);

// Among lambdas whose full-data active-set size is within the cap, the one
// minimizing mean CV MSE; ties go to the larger lambda.
size_t select_lambda(const std::vector<double>& lambdas, const std::vector<double>& mean_cv_mse,
                     const std::vector<int>& active_sizes, int feature_cap);

// Full-data fit at the CV-selected lambda.
struct FitWithCv {
    ElasticNetFit fit;
    CvResult cv;
};
FitWithCv fit_elastic_net(const features::DesignMatrix& m, const ElasticNetConfig& cfg);

// Seeded shuffle; train gets round(fraction*n) ids; outputs sorted.
std::pair<std::vector<std::string>, std::vector<std::string>> train_test_split(
    const std::vector<std::string>& ids, double fraction, uint64_t seed);

}  // namespace tractscope::model
