#include "tractscope/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tractscope/errors.hpp"
#include "tractscope/rng.hpp"
#include "tractscope/strutil.hpp"

namespace tractscope::model {

namespace {

constexpr double kSdFloor = 1e-12;

double mean_of(std::span<const double> v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::vector<double> centered(std::span<const double> y) {
    double m = mean_of(y);
    std::vector<double> yc(y.size());
    for (size_t i = 0; i < y.size(); ++i) yc[i] = y[i] - m;
    return yc;
}

double dot(const double* a, const double* b, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

Standardized standardize(const double* X_row_major, size_t n, size_t p) {
    if (n < 2) throw InputError("standardize needs at least 2 rows");
    Standardized s;
    s.n = n;
    s.p = p;
    s.columns.assign(n * p, 0.0);
    s.means.resize(p);
    s.sds.resize(p);
    s.kept.assign(p, 1);
    for (size_t j = 0; j < p; ++j) {
        double sum = 0.0;
        for (size_t i = 0; i < n; ++i) sum += X_row_major[i * p + j];
        double mean = sum / static_cast<double>(n);
        double var = 0.0;
        for (size_t i = 0; i < n; ++i) {
            double d = X_row_major[i * p + j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);  // population variance
        double sd = std::sqrt(var);
        s.means[j] = mean;
        s.sds[j] = sd;
        if (sd < kSdFloor) {
            s.kept[j] = 0;
            s.dropped.push_back(j);
            continue;  // column stays all-zero
        }
        double* col = s.columns.data() + j * n;
        for (size_t i = 0; i < n; ++i) col[i] = (X_row_major[i * p + j] - mean) / sd;
    }
    if (s.dropped.size() == p) throw InputError("all columns have zero variance");
    return s;
}

Standardized standardize(const features::DesignMatrix& m) {
    return standardize(m.X.data(), m.rows(), m.cols());
}

double soft_threshold(double z, double g) {
    if (z > g) return z - g;
    if (z < -g) return z + g;
    return 0.0;
}

StandardizedFit fit_at_lambda(const Standardized& Xs, std::span<const double> y, double lambda,
                              double alpha, const std::vector<double>* warm_start, double tol,
                              long max_sweeps, std::vector<double>* objective_trace) {
    if (y.size() != Xs.n) throw InputError("fit_at_lambda: y length mismatch");
    size_t n = Xs.n, p = Xs.p;
    double y_mean = mean_of(y);

    StandardizedFit fit;
    fit.intercept = y_mean;
    fit.lambda = lambda;
    fit.alpha = alpha;
    fit.beta.assign(p, 0.0);
    if (warm_start) {
        if (warm_start->size() != p) throw InputError("warm start has wrong length");
        fit.beta = *warm_start;
        for (size_t j : Xs.dropped) fit.beta[j] = 0.0;
    }

    std::vector<double> r(n);
    for (size_t i = 0; i < n; ++i) r[i] = y[i] - y_mean;
    for (size_t j = 0; j < p; ++j) {
        if (fit.beta[j] == 0.0) continue;
        const double* col = Xs.col(j);
        for (size_t i = 0; i < n; ++i) r[i] -= col[i] * fit.beta[j];
    }

    double l1 = lambda * alpha;
    double l2 = lambda * (1.0 - alpha);
    double inv_n = 1.0 / static_cast<double>(n);

    for (long sweep = 0; sweep < max_sweeps; ++sweep) {
        double max_delta = 0.0;
        for (size_t j = 0; j < p; ++j) {
            if (!Xs.kept[j]) continue;
            const double* col = Xs.col(j);
            double old = fit.beta[j];
            // partial residual correlation; columns have unit variance
            double z = dot(col, r.data(), n) * inv_n + old;
            double next = soft_threshold(z, l1) / (1.0 + l2);
            if (next != old) {
                double delta = old - next;
                for (size_t i = 0; i < n; ++i) r[i] += col[i] * delta;
                fit.beta[j] = next;
                max_delta = std::max(max_delta, std::abs(delta));
            }
        }
        fit.sweeps = sweep + 1;
        if (objective_trace)
            objective_trace->push_back(penalized_objective(Xs, y, fit.beta, lambda, alpha));
        if (max_delta < tol) return fit;
    }
    throw std::runtime_error(strfmt(
        "coordinate descent did not converge within %ld sweeps (lambda=%g, alpha=%g)", max_sweeps,
        lambda, alpha));
}

double penalized_objective(const Standardized& Xs, std::span<const double> y,
                           std::span<const double> beta, double lambda, double alpha) {
    size_t n = Xs.n, p = Xs.p;
    double y_mean = mean_of(y);
    double rss = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double pred = y_mean;
        for (size_t j = 0; j < p; ++j)
            if (beta[j] != 0.0) pred += Xs.col(j)[i] * beta[j];
        double d = y[i] - pred;
        rss += d * d;
    }
    double pen_l1 = 0.0, pen_l2 = 0.0;
    for (size_t j = 0; j < p; ++j) {
        pen_l1 += std::abs(beta[j]);
        pen_l2 += beta[j] * beta[j];
    }
    return rss / (2.0 * static_cast<double>(n)) +
           lambda * (alpha * pen_l1 + 0.5 * (1.0 - alpha) * pen_l2);
}

bool kkt_satisfied(const Standardized& Xs, std::span<const double> y,
                   std::span<const double> beta, double lambda, double alpha, double tol) {
    size_t n = Xs.n, p = Xs.p;
    std::vector<double> r = centered(y);
    for (size_t j = 0; j < p; ++j) {
        if (beta[j] == 0.0) continue;
        const double* col = Xs.col(j);
        for (size_t i = 0; i < n; ++i) r[i] -= col[i] * beta[j];
    }
    double slack = 10.0 * tol;
    for (size_t j = 0; j < p; ++j) {
        if (!Xs.kept[j]) continue;
        double g = dot(Xs.col(j), r.data(), n) / static_cast<double>(n);
        if (beta[j] == 0.0) {
            if (std::abs(g) > lambda * alpha + slack) return false;
        } else {
            double sign = beta[j] > 0.0 ? 1.0 : -1.0;
            double stationarity = g - lambda * alpha * sign - lambda * (1.0 - alpha) * beta[j];
            if (std::abs(stationarity) > slack * (1.0 + lambda * (1.0 - alpha))) return false;
        }
    }
    return true;
}

std::vector<double> lambda_path(const Standardized& Xs, std::span<const double> y, double alpha,
                                int path_length, double path_ratio) {
    if (path_length < 1) throw InputError("path_length must be positive");
    if (path_ratio <= 0.0 || path_ratio >= 1.0) throw InputError("path_ratio must be in (0,1)");
    std::vector<double> yc = centered(y);
    double y_var = dot(yc.data(), yc.data(), yc.size()) / static_cast<double>(yc.size());
    if (std::sqrt(y_var) < kSdFloor) throw InputError("zero-variance response");

    double lambda_max = 0.0;
    for (size_t j = 0; j < Xs.p; ++j) {
        if (!Xs.kept[j]) continue;
        lambda_max = std::max(lambda_max, std::abs(dot(Xs.col(j), yc.data(), Xs.n)));
    }
    lambda_max /= static_cast<double>(Xs.n) * std::max(alpha, 0.001);
    // nudge past the exact threshold so the path start nulls every coefficient
    lambda_max = std::max(lambda_max * (1.0 + 1e-9), kSdFloor);

    std::vector<double> path(path_length);
    if (path_length == 1) {
        path[0] = lambda_max;
        return path;
    }
    for (int i = 0; i < path_length; ++i)
        path[i] = lambda_max *
                  std::pow(path_ratio, static_cast<double>(i) / static_cast<double>(path_length - 1));
    return path;
}

ElasticNetFit destandardize(const Standardized& Xs, const StandardizedFit& fit,
                            const std::vector<std::string>& columns) {
    ElasticNetFit out;
    out.lambda = fit.lambda;
    out.alpha = fit.alpha;
    out.column_means = Xs.means;
    out.column_sds = Xs.sds;
    out.columns = columns;
    out.coefficients.assign(Xs.p, 0.0);
    double intercept = fit.intercept;
    for (size_t j = 0; j < Xs.p; ++j) {
        if (!Xs.kept[j] || fit.beta[j] == 0.0) continue;
        out.coefficients[j] = fit.beta[j] / Xs.sds[j];
        intercept -= out.coefficients[j] * Xs.means[j];
        ++out.active_set_size;
    }
    out.intercept = intercept;
    for (size_t j : Xs.dropped)
        out.dropped_columns.push_back(j < columns.size() ? columns[j] : strfmt("col%zu", j));
    return out;
}

std::vector<double> predict(const ElasticNetFit& fit, const double* X_row_major, size_t n,
                            size_t p) {
    if (p != fit.coefficients.size())
        throw InputError(strfmt("predict: %zu columns, fit has %zu", p, fit.coefficients.size()));
    std::vector<double> yhat(n, fit.intercept);
    for (size_t i = 0; i < n; ++i) {
        const double* row = X_row_major + i * p;
        double acc = 0.0;
        for (size_t j = 0; j < p; ++j)
            if (fit.coefficients[j] != 0.0) acc += fit.coefficients[j] * row[j];
        yhat[i] += acc;
    }
    return yhat;
}

std::vector<double> predict(const ElasticNetFit& fit, const features::DesignMatrix& m) {
    if (!fit.columns.empty() && fit.columns != m.columns)
        throw InputError("predict: column names do not match the fit");
    return predict(fit, m.X.data(), m.rows(), m.cols());
}

size_t select_lambda(const std::vector<double>& lambdas, const std::vector<double>& mean_cv_mse,
                     const std::vector<int>& active_sizes, int feature_cap) {
    if (lambdas.size() != mean_cv_mse.size() || lambdas.size() != active_sizes.size())
        throw InputError("select_lambda: mismatched inputs");
    bool found = false;
    size_t best = 0;
    for (size_t i = 0; i < lambdas.size(); ++i) {
        if (active_sizes[i] > feature_cap) continue;
        // strict < keeps the earlier (larger) lambda on ties
        if (!found || mean_cv_mse[i] < mean_cv_mse[best]) {
            best = i;
            found = true;
        }
    }
    if (!found) throw InputError("no lambda on the path satisfies the feature cap");
    return best;
}

CvResult kfold_cv(const features::DesignMatrix& m, const ElasticNetConfig& cfg) {
    size_t n = m.rows(), p = m.cols();
    int folds = cfg.effective_folds(n);
    if (folds < 2) throw InputError("need at least 2 folds");
    if (n < static_cast<size_t>(folds))
        throw InputError(strfmt("%zu rows cannot fill %d folds", n, folds));
    if (n / static_cast<size_t>(folds) < 2)
        throw InputError(strfmt("a fold with < 2 rows (n=%zu, folds=%d)", n, folds));

    CvResult cv;
    cv.folds = folds;
    cv.fold_of.resize(n);
    std::vector<size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    SplitMix64 rng(cfg.seed);
    rng.shuffle(perm);
    for (size_t i = 0; i < n; ++i) cv.fold_of[perm[i]] = static_cast<int>(i % folds);

    // Shared path and feasibility sizes come from the full data.
    Standardized full = standardize(m);
    cv.lambdas = lambda_path(full, m.y, cfg.alpha, cfg.path_length, cfg.path_ratio);
    size_t path_len = cv.lambdas.size();

    cv.active_sizes.resize(path_len);
    std::vector<std::vector<double>> full_betas(path_len);
    {
        std::vector<double> warm(p, 0.0);
        for (size_t li = 0; li < path_len; ++li) {
            StandardizedFit f = fit_at_lambda(full, m.y, cv.lambdas[li], cfg.alpha, &warm,
                                              cfg.tol, cfg.max_sweeps);
            warm = f.beta;
            full_betas[li] = f.beta;
            int active = 0;
            for (double b : f.beta)
                if (b != 0.0) ++active;
            cv.active_sizes[li] = active;
        }
    }

    std::vector<std::vector<double>> fold_mse(folds, std::vector<double>(path_len, 0.0));
    // test predictions per fold, flattened [lambda][test_row]
    std::vector<std::vector<double>> fold_preds(folds);
    std::vector<std::vector<size_t>> fold_test_rows(folds);
    for (size_t i = 0; i < n; ++i) fold_test_rows[cv.fold_of[i]].push_back(i);

    std::string first_error;
#pragma omp parallel for schedule(dynamic)
    for (int k = 0; k < folds; ++k) {
        try {
            const auto& test_rows = fold_test_rows[k];
            std::vector<size_t> train_rows;
            train_rows.reserve(n - test_rows.size());
            for (size_t i = 0; i < n; ++i)
                if (cv.fold_of[i] != k) train_rows.push_back(i);

            std::vector<double> Xtr(train_rows.size() * p);
            std::vector<double> ytr(train_rows.size());
            for (size_t r = 0; r < train_rows.size(); ++r) {
                std::copy(m.X.begin() + train_rows[r] * p, m.X.begin() + (train_rows[r] + 1) * p,
                          Xtr.begin() + r * p);
                ytr[r] = m.y[train_rows[r]];
            }
            Standardized strain = standardize(Xtr.data(), train_rows.size(), p);

            fold_preds[k].assign(path_len * test_rows.size(), 0.0);
            std::vector<double> warm(p, 0.0);
            for (size_t li = 0; li < path_len; ++li) {
                StandardizedFit f = fit_at_lambda(strain, ytr, cv.lambdas[li], cfg.alpha, &warm,
                                                  cfg.tol, cfg.max_sweeps);
                warm = f.beta;
                ElasticNetFit fit = destandardize(strain, f, m.columns);
                double mse = 0.0;
                for (size_t t = 0; t < test_rows.size(); ++t) {
                    const double* row = m.X.data() + test_rows[t] * p;
                    double pred = fit.intercept;
                    for (size_t j = 0; j < p; ++j)
                        if (fit.coefficients[j] != 0.0) pred += fit.coefficients[j] * row[j];
                    fold_preds[k][li * test_rows.size() + t] = pred;
                    double d = m.y[test_rows[t]] - pred;
                    mse += d * d;
                }
                fold_mse[k][li] = mse / static_cast<double>(test_rows.size());
            }
        } catch (const std::exception& e) {
#pragma omp critical(kfold_error)
            if (first_error.empty()) first_error = e.what();
        }
    }
    if (!first_error.empty()) throw std::runtime_error(first_error);

    cv.mean_cv_mse.assign(path_len, 0.0);
    for (int k = 0; k < folds; ++k)
        for (size_t li = 0; li < path_len; ++li) cv.mean_cv_mse[li] += fold_mse[k][li];
    for (double& v : cv.mean_cv_mse) v /= static_cast<double>(folds);

    cv.selected_index =
        select_lambda(cv.lambdas, cv.mean_cv_mse, cv.active_sizes, cfg.effective_cap(n));
    cv.selected_lambda = cv.lambdas[cv.selected_index];

    cv.oof_pred.assign(n, 0.0);
    for (int k = 0; k < folds; ++k) {
        const auto& test_rows = fold_test_rows[k];
        for (size_t t = 0; t < test_rows.size(); ++t)
            cv.oof_pred[test_rows[t]] = fold_preds[k][cv.selected_index * test_rows.size() + t];
    }
    return cv;
}

FitWithCv fit_elastic_net(const features::DesignMatrix& m, const ElasticNetConfig& cfg) {
    FitWithCv out;
    out.cv = kfold_cv(m, cfg);
    Standardized full = standardize(m);
    std::vector<double> warm(m.cols(), 0.0);
    StandardizedFit f;
    for (size_t li = 0; li <= out.cv.selected_index; ++li) {
        f = fit_at_lambda(full, m.y, out.cv.lambdas[li], cfg.alpha, &warm, cfg.tol,
                          cfg.max_sweeps);
        warm = f.beta;
    }
    out.fit = destandardize(full, f, m.columns);
    return out;
}

std::pair<std::vector<std::string>, std::vector<std::string>> train_test_split(
    const std::vector<std::string>& ids, double fraction, uint64_t seed) {
    if (ids.size() < 2) throw InputError("train_test_split needs at least 2 ids");
    if (fraction <= 0.0 || fraction >= 1.0) throw InputError("split fraction must be in (0,1)");
    std::vector<std::string> shuffled = ids;
    SplitMix64 rng(seed);
    rng.shuffle(shuffled);
    auto train_n = static_cast<size_t>(std::llround(fraction * static_cast<double>(ids.size())));
    train_n = std::clamp<size_t>(train_n, 1, ids.size() - 1);
    std::vector<std::string> train(shuffled.begin(), shuffled.begin() + train_n);
    std::vector<std::string> test(shuffled.begin() + train_n, shuffled.end());
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {std::move(train), std::move(test)};
}

}  // namespace tractscope::model
