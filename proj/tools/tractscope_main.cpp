// tractscope command line: plan and fetch satellite tiles over census-tract
// polygons, extract per-tract feature vectors, fit and evaluate elastic-net
// models, and emit report/scatter/choropleth artifacts.

#include <omp.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tractscope/acquisition.hpp"
#include "tractscope/cnn.hpp"
#include "tractscope/errors.hpp"
#include "tractscope/eval.hpp"
#include "tractscope/features.hpp"
#include "tractscope/geo.hpp"
#include "tractscope/manifest.hpp"
#include "tractscope/model.hpp"
#include "tractscope/strutil.hpp"
#include "tractscope/synth.hpp"

namespace ts = tractscope;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void log_line(const char* level, const std::string& stage, const std::string& message) {
    std::fprintf(stderr, "%s %s %s %s\n", level, ts::utc_now().c_str(), stage.c_str(),
                 message.c_str());
}
void info(const std::string& stage, const std::string& message) { log_line("INFO", stage, message); }
void warn(const std::string& stage, const std::string& message) { log_line("WARN", stage, message); }

int default_jobs() {
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

struct Common {
    std::string workdir = ".";
    int jobs = default_jobs();
    uint64_t seed = 42;
};

void add_common(CLI::App* cmd, const std::shared_ptr<Common>& c) {
    cmd->add_option("--workdir", c->workdir, "base directory for relative paths");
    cmd->add_option("--jobs", c->jobs, "worker threads (default: logical CPUs)");
    cmd->add_option("--seed", c->seed, "PRNG seed");
    cmd->add_option("--config", "flat key=value file; command-line flags override it");
}

// Flat `key = value` config support: the file's pairs are injected as
// `--key=value` tokens ahead of the explicit flags, which therefore win
// (options use the take-last policy). Keys the target subcommand does not
// know are skipped.
std::vector<std::string> expand_config(int argc, char** argv, CLI::App& app) {
    std::vector<std::string> args(argv + 1, argv + argc);
    std::string cfg_path;
    for (size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size())
            cfg_path = args[i + 1];
        else if (args[i].rfind("--config=", 0) == 0)
            cfg_path = args[i].substr(9);
    }
    if (cfg_path.empty()) return args;

    CLI::App* leaf = &app;
    size_t inject_at = 0;
    while (inject_at < args.size() && !args[inject_at].empty() && args[inject_at][0] != '-') {
        CLI::App* next = nullptr;
        try {
            next = leaf->get_subcommand(args[inject_at]);
        } catch (const CLI::Error&) {
            break;
        }
        leaf = next;
        ++inject_at;
    }

    auto trim = [](std::string s) {
        size_t b = s.find_first_not_of(" \t\r");
        size_t e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    std::vector<std::string> injected;
    std::istringstream in(ts::read_file(cfg_path));
    std::string line;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw ts::InputError("bad config line: " + line);
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (leaf->get_option_no_throw("--" + key) == nullptr) continue;
        injected.push_back("--" + key + "=" + value);
    }
    args.insert(args.begin() + static_cast<std::ptrdiff_t>(inject_at), injected.begin(),
                injected.end());
    return args;
}

fs::path resolve(const Common& c, const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : fs::path(c.workdir) / path;
}

void apply_jobs(const Common& c) { omp_set_num_threads(std::max(1, c.jobs)); }

std::string command_line_of(int argc, char** argv) {
    std::vector<std::string> parts(argv, argv + argc);
    return ts::join(parts, ' ');
}

std::string g_command_line;

void stamp_manifest(const Common& c, const fs::path& out_dir,
                    const std::vector<fs::path>& inputs,
                    const std::map<std::string, std::string>& config,
                    const std::string& started) {
    ts::RunManifest m;
    m.command_line = g_command_line;
    m.seed = c.seed;
    m.inputs = inputs;
    m.config = config;
    m.started_utc = started;
    m.finished_utc = ts::utc_now();
    ts::write_run_manifest(m, out_dir);
}

// ---- tract / property flags ----

struct TractOpts {
    std::string tracts;
    ts::geo::PropertyMap props;
};

void add_tract_opts(CLI::App* cmd, const std::shared_ptr<TractOpts>& t, bool required = true) {
    auto* opt = cmd->add_option("--tracts", t->tracts, "tract GeoJSON FeatureCollection");
    if (required) opt->required();
    cmd->add_option("--prop-id", t->props.id, "feature property holding the tract id");
    cmd->add_option("--prop-region", t->props.region, "property holding the region label");
    cmd->add_option("--prop-prevalence", t->props.prevalence, "property holding prevalence");
    cmd->add_option("--prop-income", t->props.income, "property holding income");
    cmd->add_option("--prop-area", t->props.area, "property holding land area (km^2)");
}

std::vector<ts::geo::TractRecord> load_tracts(const Common& c, const TractOpts& t) {
    auto path = resolve(c, t.tracts);
    auto tracts = ts::geo::parse_tract_collection(ts::read_file(path), t.props);
    info("tracts", ts::strfmt("parsed %zu tracts from %s", tracts.size(), path.c_str()));
    return tracts;
}

// ---- plan CSV ----

const char* kPlanHeader = "tract_id,row,col,center_lat,center_lon,zoom,width_px,height_px";

void write_plan_csv(const std::vector<ts::geo::TileSpec>& plan, const fs::path& path) {
    std::ostringstream out;
    out << kPlanHeader << '\n';
    for (const auto& t : plan)
        out << t.tract_id << ',' << t.row << ',' << t.col << ','
            << ts::strfmt("%.6f,%.6f", t.center.lat, t.center.lon) << ',' << t.zoom << ','
            << t.width_px << ',' << t.height_px << '\n';
    ts::write_file(path, out.str());
}

std::vector<ts::geo::TileSpec> read_plan_csv(const fs::path& path) {
    std::istringstream in(ts::read_file(path));
    std::string line;
    if (!std::getline(in, line) || line != kPlanHeader)
        throw ts::InputError("bad tile plan header in " + path.string());
    std::vector<ts::geo::TileSpec> plan;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cells = ts::split(line, ',');
        if (cells.size() != 8) throw ts::InputError("bad tile plan row: " + line);
        ts::geo::TileSpec spec;
        spec.tract_id = cells[0];
        spec.row = static_cast<int>(ts::parse_long(cells[1], "row"));
        spec.col = static_cast<int>(ts::parse_long(cells[2], "col"));
        spec.center.lat = ts::parse_double(cells[3], "center_lat");
        spec.center.lon = ts::parse_double(cells[4], "center_lon");
        spec.zoom = static_cast<int>(ts::parse_long(cells[5], "zoom"));
        spec.width_px = static_cast<int>(ts::parse_long(cells[6], "width_px"));
        spec.height_px = static_cast<int>(ts::parse_long(cells[7], "height_px"));
        plan.push_back(std::move(spec));
    }
    return plan;
}

std::vector<ts::geo::TileSpec> plan_all_tiles(const std::vector<ts::geo::TractRecord>& tracts,
                                              int zoom, int width, int height) {
    std::vector<const ts::geo::TractRecord*> sorted;
    for (const auto& t : tracts) sorted.push_back(&t);
    std::sort(sorted.begin(), sorted.end(),
              [](const auto* a, const auto* b) { return a->id < b->id; });
    std::vector<ts::geo::TileSpec> plan;
    for (const auto* t : sorted) {
        auto tiles = ts::geo::plan_tiles(*t, zoom, width, height);
        plan.insert(plan.end(), tiles.begin(), tiles.end());
    }
    return plan;
}

// ---- feature extraction ----

struct ExtractorOpts {
    std::string extractor = "baseline";
    std::string weights;
    std::string layer = "fc7";
};

ts::features::FeatureStore extract_features(const Common& c,
                                            const std::vector<ts::geo::TileSpec>& plan,
                                            const fs::path& cache_dir,
                                            const ExtractorOpts& ex) {
    std::unique_ptr<ts::cnn::NetworkSpec> net;
    if (ex.extractor == "cnn") {
        if (ex.weights.empty())
            throw ts::InputError("--weights is required with --extractor cnn");
        net = std::make_unique<ts::cnn::NetworkSpec>(
            ts::cnn::parse_weights(ts::read_file_bytes(resolve(c, ex.weights))));
        if (!net->find(ex.layer))
            throw ts::InputError("layer '" + ex.layer + "' not present in the weight file");
    } else if (ex.extractor != "baseline") {
        throw ts::InputError("unknown extractor '" + ex.extractor + "' (cnn|baseline)");
    }

    ts::acq::EndpointConfig offline;
    offline.offline = true;

    std::vector<ts::cnn::FeatureVector> tile_vecs(plan.size());
    std::string first_error;
#pragma omp parallel for schedule(dynamic)
    for (size_t i = 0; i < plan.size(); ++i) {
        try {
            ts::acq::RasterImage img = ts::acq::fetch_tile(plan[i], offline, cache_dir);
            tile_vecs[i] = net ? ts::cnn::forward_to_layer(*net, ts::cnn::preprocess(img, *net),
                                                           ex.layer)
                               : ts::cnn::baseline_descriptor(img);
        } catch (const std::exception& e) {
#pragma omp critical(extract_error)
            if (first_error.empty()) first_error = e.what();
        }
    }
    if (!first_error.empty()) throw std::runtime_error(first_error);

    // plan is grouped by tract with tiles in (row, col) order
    ts::features::FeatureStore store;
    store.extractor_id = ex.extractor;
    size_t i = 0;
    while (i < plan.size()) {
        size_t j = i;
        while (j < plan.size() && plan[j].tract_id == plan[i].tract_id) ++j;
        auto mean = ts::features::aggregate_tract(
            std::span<const ts::cnn::FeatureVector>(tile_vecs.data() + i, j - i));
        store.records.push_back({plan[i].tract_id, static_cast<uint32_t>(j - i),
                                 std::move(mean.values)});
        i = j;
    }
    std::sort(store.records.begin(), store.records.end(),
              [](const auto& a, const auto& b) { return a.tract_id < b.tract_id; });
    store.dim = store.records.empty() ? 0 : static_cast<uint32_t>(store.records[0].values.size());
    return store;
}

// ---- POI matrix CSV ----

void write_poi_matrix_csv(const ts::features::DesignMatrix& m, const fs::path& path) {
    std::ostringstream out;
    out << "tract_id,region";
    for (const auto& c : m.columns) out << ',' << c;
    out << '\n';
    for (size_t i = 0; i < m.rows(); ++i) {
        out << m.ids[i] << ',' << m.regions[i];
        for (size_t j = 0; j < m.cols(); ++j) out << ',' << ts::strfmt("%.9g", m.at(i, j));
        out << '\n';
    }
    ts::write_file(path, out.str());
}

ts::features::DesignMatrix read_poi_matrix_csv(const fs::path& path) {
    std::istringstream in(ts::read_file(path));
    std::string line;
    if (!std::getline(in, line) || line.rfind("tract_id,region", 0) != 0)
        throw ts::InputError("bad POI matrix header in " + path.string());
    auto header = ts::split(line, ',');
    ts::features::DesignMatrix m;
    m.columns.assign(header.begin() + 2, header.end());
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cells = ts::split(line, ',');
        if (cells.size() != header.size())
            throw ts::InputError("bad POI matrix row: " + line);
        m.ids.push_back(cells[0]);
        m.regions.push_back(cells[1]);
        for (size_t j = 2; j < cells.size(); ++j)
            m.X.push_back(ts::parse_double(cells[j], "poi matrix cell"));
    }
    return m;
}

// ---- model options ----

struct ModelOpts {
    std::string store;
    std::string poi_matrix;
    std::string target = "prevalence";
    std::string featurizer;
    double alpha = 0.5;
    int path_length = 100;
    double path_ratio = 1e-3;
    double tol = 1e-7;
    int folds = -1;
    long feature_cap = -1;
    double split = 0.6;
};

void add_model_opts(CLI::App* cmd, const std::shared_ptr<ModelOpts>& m) {
    cmd->add_option("--store", m->store, "feature store (.fvs binary or .csv)");
    cmd->add_option("--poi-matrix", m->poi_matrix, "POI matrix CSV from `poi aggregate`");
    cmd->add_option("--target", m->target, "prevalence|income")
        ->check(CLI::IsMember({"prevalence", "income"}));
    cmd->add_option("--alpha", m->alpha, "elastic net mixing weight in [0,1]");
    cmd->add_option("--path-length", m->path_length, "lambda path length");
    cmd->add_option("--path-ratio", m->path_ratio, "lambda_min / lambda_max");
    cmd->add_option("--tol", m->tol, "coordinate descent tolerance");
    cmd->add_option("--folds", m->folds, "CV folds (default 5, or 3 when n < 200)");
    cmd->add_option("--feature-cap", m->feature_cap, "max selected features (default: n rows)");
    cmd->add_option("--split", m->split, "training fraction for holdout mode");
}

ts::model::ElasticNetConfig to_config(const ModelOpts& m, const Common& c) {
    ts::model::ElasticNetConfig cfg;
    cfg.alpha = m.alpha;
    cfg.path_length = m.path_length;
    cfg.path_ratio = m.path_ratio;
    cfg.tol = m.tol;
    if (m.folds > 0) cfg.folds = m.folds;
    if (m.feature_cap > 0) cfg.feature_cap = static_cast<int>(m.feature_cap);
    cfg.seed = c.seed;
    cfg.holdout_fraction = m.split;
    return cfg;
}

ts::features::BuildResult build_design(const Common& c, const ModelOpts& m,
                                       const std::vector<ts::geo::TractRecord>& tracts) {
    if (m.store.empty() == m.poi_matrix.empty())
        throw ts::InputError("give exactly one of --store / --poi-matrix");
    auto target =
        m.target == "income" ? ts::features::Target::income : ts::features::Target::prevalence;
    if (!m.store.empty()) {
        auto store = ts::features::read_feature_store(resolve(c, m.store));
        return ts::features::build_design_matrix(store, tracts, target);
    }
    auto matrix = read_poi_matrix_csv(resolve(c, m.poi_matrix));
    return ts::features::build_design_matrix(matrix, tracts, target);
}

std::string default_featurizer(const ModelOpts& m) {
    if (!m.featurizer.empty()) return m.featurizer;
    return m.poi_matrix.empty() ? "baseline" : "poi";
}

// ---- eval report CSV round-trip (for `report emit`) ----

std::vector<ts::eval::EvalReport> read_reports_csv(const fs::path& path) {
    std::istringstream in(ts::read_file(path));
    std::string line;
    if (!std::getline(in, line) || line != ts::eval::report_csv_header())
        throw ts::InputError("bad report header in " + path.string());
    std::vector<ts::eval::EvalReport> reports;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cells = ts::split(line, ',');
        if (cells.size() != 12) throw ts::InputError("bad report row: " + line);
        ts::eval::EvalReport r;
        r.scope = cells[0];
        r.target = cells[1];
        r.featurizer = cells[2];
        r.mode = cells[3];
        r.n = static_cast<int>(ts::parse_long(cells[4], "n"));
        r.folds = static_cast<int>(ts::parse_long(cells[5], "folds"));
        r.alpha = ts::parse_double(cells[6], "alpha");
        r.lambda = ts::parse_double(cells[7], "lambda");
        r.r2 = ts::parse_double(cells[8], "r2");
        r.rmse = ts::parse_double(cells[9], "rmse");
        r.pearson = ts::parse_double(cells[10], "pearson");
        r.seed = static_cast<uint64_t>(ts::parse_long(cells[11], "seed"));
        reports.push_back(std::move(r));
    }
    return reports;
}

std::vector<ts::eval::Prediction> read_predictions_csv(const fs::path& path) {
    std::istringstream in(ts::read_file(path));
    std::string line;
    if (!std::getline(in, line) || line != "tract_id,region,actual,predicted")
        throw ts::InputError("bad predictions header in " + path.string());
    std::vector<ts::eval::Prediction> preds;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cells = ts::split(line, ',');
        if (cells.size() != 4) throw ts::InputError("bad prediction row: " + line);
        preds.push_back({cells[0], cells[1], ts::parse_double(cells[2], "actual"),
                         ts::parse_double(cells[3], "predicted")});
    }
    return preds;
}

void write_eval_artifacts(const std::vector<ts::eval::EvalReport>& reports,
                          const std::vector<ts::eval::Prediction>& predictions,
                          const fs::path& out_dir) {
    fs::create_directories(out_dir);
    std::ostringstream rep;
    rep << ts::eval::report_csv_header() << '\n';
    for (const auto& r : reports) rep << ts::eval::report_csv_row(r) << '\n';
    ts::write_file(out_dir / "eval_reports.csv", rep.str());

    std::ostringstream pred;
    pred << "tract_id,region,actual,predicted\n";
    for (const auto& p : predictions)
        pred << p.tract_id << ',' << p.region << ','
             << ts::strfmt("%.9g,%.9g", p.actual, p.predicted) << '\n';
    ts::write_file(out_dir / "predictions.csv", pred.str());
}

void write_fit_json(const ts::model::FitWithCv& fitted, uint64_t seed, const fs::path& path) {
    json columns = json::array();
    for (size_t j = 0; j < fitted.fit.columns.size(); ++j)
        columns.push_back(
            json{{"name", fitted.fit.columns[j]}, {"coefficient", fitted.fit.coefficients[j]}});
    json cv_table = json::array();
    for (size_t i = 0; i < fitted.cv.lambdas.size(); ++i)
        cv_table.push_back(
            json{{"lambda", fitted.cv.lambdas[i]}, {"mean_mse", fitted.cv.mean_cv_mse[i]}});
    json doc{{"intercept", fitted.fit.intercept},
             {"columns", columns},
             {"lambda", fitted.fit.lambda},
             {"alpha", fitted.fit.alpha},
             {"seed", seed},
             {"dropped_columns", fitted.fit.dropped_columns},
             {"active_set_size", fitted.fit.active_set_size},
             {"folds", fitted.cv.folds},
             {"cv_table", cv_table}};
    ts::write_file(path, doc.dump(1) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
    g_command_line = command_line_of(argc, argv);
    CLI::App app{"tractscope: built-environment features from satellite tiles, POI densities, "
                 "and elastic-net models of tract-level outcomes"};
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app.require_subcommand(1);

    // ---------------- tracts validate ----------------
    auto* tracts_cmd = app.add_subcommand("tracts", "tract collection utilities");
    tracts_cmd->require_subcommand(1);
    {
        auto c = std::make_shared<Common>();
        auto t = std::make_shared<TractOpts>();
        auto* cmd = tracts_cmd->add_subcommand("validate", "parse and summarize a tract GeoJSON");
        add_common(cmd, c);
        add_tract_opts(cmd, t);
        cmd->callback([c, t] {
            apply_jobs(*c);
            auto tracts = load_tracts(*c, *t);
            std::map<std::string, int> regions;
            int no_prev = 0, no_income = 0;
            for (const auto& tr : tracts) {
                ++regions[tr.region];
                if (!tr.prevalence) ++no_prev;
                if (!tr.income) ++no_income;
            }
            for (const auto& [region, count] : regions)
                info("validate", ts::strfmt("region '%s': %d tracts", region.c_str(), count));
            info("validate", ts::strfmt("%d tracts lack prevalence, %d lack income", no_prev,
                                        no_income));
        });
    }

    // ---------------- tiles plan / fetch ----------------
    auto* tiles_cmd = app.add_subcommand("tiles", "satellite tile planning and fetching");
    tiles_cmd->require_subcommand(1);
    {
        auto c = std::make_shared<Common>();
        auto t = std::make_shared<TractOpts>();
        auto zoom = std::make_shared<int>(18);
        auto tw = std::make_shared<int>(400);
        auto th = std::make_shared<int>(400);
        auto out = std::make_shared<std::string>("plan.csv");
        auto* cmd = tiles_cmd->add_subcommand("plan", "compute the tile grid for every tract");
        add_common(cmd, c);
        add_tract_opts(cmd, t);
        cmd->add_option("--zoom", *zoom, "Web Mercator zoom level");
        cmd->add_option("--tile-width", *tw, "tile width in pixels");
        cmd->add_option("--tile-height", *th, "tile height in pixels");
        cmd->add_option("--out", *out, "output plan CSV");
        cmd->callback([c, t, zoom, tw, th, out] {
            apply_jobs(*c);
            std::string started = ts::utc_now();
            auto tracts = load_tracts(*c, *t);
            auto plan = plan_all_tiles(tracts, *zoom, *tw, *th);
            auto out_path = resolve(*c, *out);
            if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
            write_plan_csv(plan, out_path);
            info("plan", ts::strfmt("%zu tiles -> %s", plan.size(), out_path.c_str()));
            stamp_manifest(*c, out_path.parent_path().empty() ? "." : out_path.parent_path(),
                           {resolve(*c, t->tracts)}, {{"zoom", std::to_string(*zoom)}}, started);
        });
    }
    {
        auto c = std::make_shared<Common>();
        auto plan_path = std::make_shared<std::string>();
        auto cache = std::make_shared<std::string>("tile_cache");
        auto base_url = std::make_shared<std::string>();
        auto offline = std::make_shared<bool>(false);
        auto retries = std::make_shared<int>(3);
        auto max_conc = std::make_shared<int>(4);
        auto* cmd = tiles_cmd->add_subcommand("fetch", "download planned tiles into the cache");
        add_common(cmd, c);
        cmd->add_option("--plan", *plan_path, "plan CSV from `tiles plan`")->required();
        cmd->add_option("--cache", *cache, "tile cache directory");
        cmd->add_option("--base-url", *base_url, "static-map endpoint");
        cmd->add_flag("--offline", *offline, "never open a network connection");
        cmd->add_option("--retries", *retries, "retry limit per tile");
        cmd->add_option("--max-concurrent", *max_conc, "parallel request cap");
        cmd->callback([c, plan_path, cache, base_url, offline, retries, max_conc] {
            apply_jobs(*c);
            std::string started = ts::utc_now();
            auto plan = read_plan_csv(resolve(*c, *plan_path));
            ts::acq::EndpointConfig cfg;
            cfg.base_url = *base_url;
            cfg.offline = *offline || base_url->empty();
            cfg.retry_limit = *retries;
            cfg.max_concurrent = *max_conc;
            if (const char* key = std::getenv("TRACTSCOPE_API_KEY"))
                cfg.api_key = std::string(key);
            auto cache_dir = resolve(*c, *cache);
            fs::create_directories(cache_dir);
            auto images = ts::acq::fetch_tiles(plan, cfg, cache_dir, c->jobs);
            info("fetch", ts::strfmt("%zu tiles available in %s", images.size(),
                                     cache_dir.c_str()));
            stamp_manifest(*c, cache_dir, {resolve(*c, *plan_path)}, {}, started);
        });
    }

    // ---------------- features extract ----------------
    auto* features_cmd = app.add_subcommand("features", "per-tract feature extraction");
    features_cmd->require_subcommand(1);
    {
        auto c = std::make_shared<Common>();
        auto t = std::make_shared<TractOpts>();
        auto ex = std::make_shared<ExtractorOpts>();
        auto plan_path = std::make_shared<std::string>();
        auto cache = std::make_shared<std::string>("tile_cache");
        auto zoom = std::make_shared<int>(18);
        auto tw = std::make_shared<int>(400);
        auto th = std::make_shared<int>(400);
        auto out = std::make_shared<std::string>("store.fvs");
        auto* cmd = features_cmd->add_subcommand(
            "extract", "decode cached tiles, run the extractor, average per tract");
        add_common(cmd, c);
        add_tract_opts(cmd, t);
        cmd->add_option("--plan", *plan_path, "tile plan CSV (computed from tracts when absent)");
        cmd->add_option("--cache", *cache, "tile cache directory");
        cmd->add_option("--extractor", ex->extractor, "cnn|baseline");
        cmd->add_option("--weights", ex->weights, "CNW1 weight file (cnn extractor)");
        cmd->add_option("--layer", ex->layer, "layer to read the feature vector from");
        cmd->add_option("--zoom", *zoom, "zoom when planning internally");
        cmd->add_option("--tile-width", *tw, "tile width when planning internally");
        cmd->add_option("--tile-height", *th, "tile height when planning internally");
        cmd->add_option("--out", *out, "feature store path (.fvs binary, .csv text)");
        cmd->callback([c, t, ex, plan_path, cache, zoom, tw, th, out] {
            apply_jobs(*c);
            std::string started = ts::utc_now();
            auto tracts = load_tracts(*c, *t);
            auto plan = plan_path->empty() ? plan_all_tiles(tracts, *zoom, *tw, *th)
                                           : read_plan_csv(resolve(*c, *plan_path));
            auto store = extract_features(*c, plan, resolve(*c, *cache), *ex);
            auto out_path = resolve(*c, *out);
            if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
            ts::features::write_feature_store(store, out_path);
            info("extract", ts::strfmt("%zu tracts x %u dims (%s) -> %s", store.records.size(),
                                       store.dim, ex->extractor.c_str(), out_path.c_str()));
            stamp_manifest(*c, out_path.parent_path().empty() ? "." : out_path.parent_path(),
                           {resolve(*c, t->tracts)}, {{"extractor", ex->extractor}}, started);
        });
    }

    // ---------------- net activations ----------------
    auto* net_cmd = app.add_subcommand("net", "network inspection");
    net_cmd->require_subcommand(1);
    {
        auto c = std::make_shared<Common>();
        auto weights = std::make_shared<std::string>();
        auto image = std::make_shared<std::string>();
        auto layer = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>("activations");
        auto* cmd = net_cmd->add_subcommand("activations",
                                            "export a conv layer's activation maps as PGM");
        add_common(cmd, c);
        cmd->add_option("--weights", *weights, "CNW1 weight file")->required();
        cmd->add_option("--image", *image, "input image (PNG or JPEG)")->required();
        cmd->add_option("--layer", *layer, "conv layer name")->required();
        cmd->add_option("--out", *out, "output directory");
        cmd->callback([c, weights, image, layer, out] {
            apply_jobs(*c);
            std::string started = ts::utc_now();
            auto net = ts::cnn::parse_weights(ts::read_file_bytes(resolve(*c, *weights)));
            auto img = ts::acq::decode_image(ts::read_file_bytes(resolve(*c, *image)));
            auto maps =
                ts::cnn::activation_maps(net, ts::cnn::preprocess(img, net), *layer);
            auto out_dir = resolve(*c, *out);
            ts::cnn::write_activation_pgms(maps, out_dir, *layer);
            info("activations", ts::strfmt("%zu maps -> %s", maps.size(), out_dir.c_str()));
            stamp_manifest(*c, out_dir, {resolve(*c, *weights), resolve(*c, *image)},
                           {{"layer", *layer}}, started);
        });
    }

    // ---------------- poi fetch / aggregate ----------------
    auto* poi_cmd = app.add_subcommand("poi", "places-of-interest acquisition and densities");
    poi_cmd->require_subcommand(1);
    {
        auto c = std::make_shared<Common>();
        auto t = std::make_shared<TractOpts>();
        auto radius = std::make_shared<double>(400.0);
        auto base_url = std::make_shared<std::string>();
        auto fixture = std::make_shared<std::string>();
        auto retries = std::make_shared<int>(3);
        auto max_conc = std::make_shared<int>(4);
        auto out = std::make_shared<std::string>("poi.ndjson");
        auto* cmd = poi_cmd->add_subcommand("fetch",
                                            "run nearby searches over each tract's probe grid");
        add_common(cmd, c);
        add_tract_opts(cmd, t);
        cmd->add_option("--radius", *radius, "probe radius in meters");
        cmd->add_option("--base-url", *base_url, "nearby-search endpoint");
        cmd->add_option("--fixture", *fixture, "offline NDJSON fixture");
        cmd->add_option("--retries", *retries, "retry limit per probe");
        cmd->add_option("--max-concurrent", *max_conc, "parallel request cap");
        cmd->add_option("--out", *out, "output NDJSON of fetched records");
        cmd->callback([c, t, radius, base_url, fixture, retries, max_conc, out] {
            apply_jobs(*c);
            std::string started = ts::utc_now();
            if (base_url->empty() == fixture->empty())
                throw ts::InputError("give exactly one of --base-url / --fixture");
            auto tracts = load_tracts(*c, *t);
            std::vector<ts::geo::PoiProbe> probes;
            std::vector<const ts::geo::TractRecord*> sorted;
            for (const auto& tr : tracts) sorted.push_back(&tr);
            std::sort(sorted.begin(), sorted.end(),
                      [](const auto* a, const auto* b) { return a->id < b->id; });
            for (const auto* tr : sorted) {
                auto grid = ts::geo::plan_poi_grid(*tr, *radius);
                probes.insert(probes.end(), grid.begin(), grid.end());
            }
            ts::acq::EndpointConfig cfg;
            cfg.offline = !fixture->empty();
            cfg.base_url = cfg.offline ? resolve(*c, *fixture).string() : *base_url;
            cfg.retry_limit = *retries;
            cfg.max_concurrent = *max_conc;
            if (const char* key = std::getenv("TRACTSCOPE_API_KEY"))
                cfg.api_key = std::string(key);

            std::vector<ts::acq::PoiFetchResult> results(probes.size());
            std::string first_error;
            int threads = std::max(1, std::min(c->jobs, cfg.max_concurrent));
#pragma omp parallel for schedule(dynamic) num_threads(threads)
            for (size_t i = 0; i < probes.size(); ++i) {
                try {
                    results[i] = ts::acq::fetch_poi(probes[i], cfg);
                } catch (const std::exception& e) {
#pragma omp critical(poi_error)
                    if (first_error.empty()) first_error = e.what();
                }
            }
            if (!first_error.empty()) throw std::runtime_error(first_error);

            std::vector<ts::acq::PoiRecord> records;
            int warnings = 0;
            for (auto& r : results) {  // merged in probe order
                records.insert(records.end(), r.records.begin(), r.records.end());
                warnings += r.warnings;
            }
            if (warnings) warn("poi", ts::strfmt("%d malformed records skipped", warnings));
            auto out_path = resolve(*c, *out);
            if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
            ts::write_file(out_path, ts::acq::poi_records_to_ndjson(records));
            info("poi", ts::strfmt("%zu probes -> %zu records -> %s", probes.size(),
                                   records.size(), out_path.c_str()));
            stamp_manifest(*c, out_path.parent_path().empty() ? "." : out_path.parent_path(),
                           {resolve(*c, t->tracts)}, {{"radius", std::to_string(*radius)}},
                           started);
        });
    }
    {
        auto c = std::make_shared<Common>();
        auto t = std::make_shared<TractOpts>();
        auto poi_path = std::make_shared<std::string>();
        auto categories = std::make_shared<std::string>();
        auto mode = std::make_shared<std::string>("counts");
        auto out = std::make_shared<std::string>("poi_matrix.csv");
        auto* cmd = poi_cmd->add_subcommand("aggregate",
                                            "dedup records and build the tract x category matrix");
        add_common(cmd, c);
        add_tract_opts(cmd, t);
        cmd->add_option("--poi", *poi_path, "NDJSON of POI records")->required();
        cmd->add_option("--categories", *categories,
                        "comma-separated vocabulary (default: observed categories)");
        cmd->add_option("--mode", *mode, "counts|per-km2")
            ->check(CLI::IsMember({"counts", "per-km2"}));
        cmd->add_option("--out", *out, "output matrix CSV");
        cmd->callback([c, t, poi_path, categories, mode, out] {
            apply_jobs(*c);
            std::string started = ts::utc_now();
            auto tracts = load_tracts(*c, *t);
            auto parsed = ts::acq::parse_poi_ndjson(ts::read_file(resolve(*c, *poi_path)));
            if (parsed.warnings)
                warn("aggregate", ts::strfmt("%d malformed records skipped", parsed.warnings));
            std::vector<std::string> vocab;
            if (categories->empty()) {
                std::set<std::string> seen;
                for (const auto& r : parsed.records) seen.insert(r.category);
                vocab.assign(seen.begin(), seen.end());
            } else {
                vocab = ts::split(*categories, ',');
            }
            auto result = ts::features::poi_feature_matrix(
                parsed.records, tracts, vocab,
                *mode == "per-km2" ? ts::features::PoiMode::per_km2
                                   : ts::features::PoiMode::counts);
            info("aggregate",
                 ts::strfmt("%d duplicates, %d outside tracts, %d unknown-category",
                            result.duplicates, result.outside_tract, result.unknown_category));
            auto out_path = resolve(*c, *out);
            if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
            write_poi_matrix_csv(result.matrix, out_path);
            info("aggregate", ts::strfmt("%zu tracts x %zu categories (%s) -> %s",
                                         result.matrix.rows(), result.matrix.cols(),
                                         mode->c_str(), out_path.c_str()));
            stamp_manifest(*c, out_path.parent_path().empty() ? "." : out_path.parent_path(),
                           {resolve(*c, t->tracts), resolve(*c, *poi_path)}, {{"mode", *mode}},
                           started);
        });
    }

    // ---------------- model fit / evaluate ----------------
    auto* model_cmd = app.add_subcommand("model", "elastic-net fitting and evaluation");
    model_cmd->require_subcommand(1);
    {
        auto c = std::make_shared<Common>();
        auto t = std::make_shared<TractOpts>();
        auto m = std::make_shared<ModelOpts>();
        auto out = std::make_shared<std::string>("fit.json");
        auto* cmd = model_cmd->add_subcommand("fit",
                                              "cross-validated elastic net on the full data");
        add_common(cmd, c);
        add_tract_opts(cmd, t);
        add_model_opts(cmd, m);
        cmd->add_option("--out", *out, "fit artifact JSON");
        cmd->callback([c, t, m, out] {
            apply_jobs(*c);
            std::string started = ts::utc_now();
            auto tracts = load_tracts(*c, *t);
            auto built = build_design(*c, *m, tracts);
            if (!built.excluded.empty())
                info("fit", ts::strfmt("%zu tracts excluded (no features or null target)",
                                       built.excluded.size()));
            auto fitted = ts::model::fit_elastic_net(built.matrix, to_config(*m, *c));
            auto out_path = resolve(*c, *out);
            if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
            write_fit_json(fitted, c->seed, out_path);
            info("fit", ts::strfmt("lambda=%.6g active=%d -> %s", fitted.fit.lambda,
                                   fitted.fit.active_set_size, out_path.c_str()));
            stamp_manifest(*c, out_path.parent_path().empty() ? "." : out_path.parent_path(),
                           {resolve(*c, t->tracts)}, {{"target", m->target}}, started);
        });
    }
    {
        auto c = std::make_shared<Common>();
        auto t = std::make_shared<TractOpts>();
        auto m = std::make_shared<ModelOpts>();
        auto mode = std::make_shared<std::string>("cv");
        auto out_dir = std::make_shared<std::string>("eval");
        auto* cmd = model_cmd->add_subcommand(
            "evaluate", "pooled + per-region metrics, cross-validated or holdout");
        add_common(cmd, c);
        add_tract_opts(cmd, t);
        add_model_opts(cmd, m);
        cmd->add_option("--mode", *mode, "cv|holdout")->check(CLI::IsMember({"cv", "holdout"}));
        cmd->add_option("--featurizer", m->featurizer, "label recorded in reports");
        cmd->add_option("--out-dir", *out_dir, "directory for eval_reports.csv/predictions.csv");
        cmd->callback([c, t, m, mode, out_dir] {
            apply_jobs(*c);
            std::string started = ts::utc_now();
            auto tracts = load_tracts(*c, *t);
            auto built = build_design(*c, *m, tracts);
            auto outcome = ts::eval::evaluate_run(
                built.matrix, to_config(*m, *c),
                *mode == "cv" ? ts::eval::EvalMode::cv : ts::eval::EvalMode::holdout,
                default_featurizer(*m), m->target, built.excluded);
            auto dir = resolve(*c, *out_dir);
            write_eval_artifacts(outcome.reports, outcome.predictions, dir);
            for (const auto& r : outcome.reports)
                info("evaluate", ts::eval::report_csv_row(r));
            stamp_manifest(*c, dir, {resolve(*c, t->tracts)}, {{"mode", *mode}}, started);
        });
    }

    // ---------------- report emit ----------------
    auto* report_cmd = app.add_subcommand("report", "artifact emission");
    report_cmd->require_subcommand(1);
    {
        auto c = std::make_shared<Common>();
        auto t = std::make_shared<TractOpts>();
        auto reports_path = std::make_shared<std::string>();
        auto preds_path = std::make_shared<std::string>();
        auto out_dir = std::make_shared<std::string>("report");
        auto* cmd = report_cmd->add_subcommand(
            "emit", "write scatter.csv, report.csv and choropleth.geojson");
        add_common(cmd, c);
        add_tract_opts(cmd, t);
        cmd->add_option("--reports", *reports_path, "eval_reports.csv")->required();
        cmd->add_option("--predictions", *preds_path, "predictions.csv")->required();
        cmd->add_option("--out-dir", *out_dir, "output directory");
        cmd->callback([c, t, reports_path, preds_path, out_dir] {
            apply_jobs(*c);
            std::string started = ts::utc_now();
            auto tracts = load_tracts(*c, *t);
            auto reports = read_reports_csv(resolve(*c, *reports_path));
            auto preds = read_predictions_csv(resolve(*c, *preds_path));
            auto dir = resolve(*c, *out_dir);
            ts::eval::emit_outputs(reports, preds, tracts, dir);
            info("emit", ts::strfmt("%zu reports, %zu predictions -> %s", reports.size(),
                                    preds.size(), dir.c_str()));
            stamp_manifest(*c, dir,
                           {resolve(*c, t->tracts), resolve(*c, *reports_path),
                            resolve(*c, *preds_path)},
                           {}, started);
        });
    }

    // ---------------- synth generate ----------------
    auto* synth_cmd = app.add_subcommand("synth", "synthetic worlds for desk-scale runs");
    synth_cmd->require_subcommand(1);
    {
        auto c = std::make_shared<Common>();
        auto cfg = std::make_shared<ts::synth::SynthConfig>();
        auto out = std::make_shared<std::string>("world");
        auto* cmd = synth_cmd->add_subcommand(
            "generate", "tracts, tiles, POI fixture and truth manifest with a planted signal");
        add_common(cmd, c);
        cmd->add_option("--n-tracts", cfg->n_tracts, "number of tracts");
        cmd->add_option("--image-px", cfg->image_px, "tile size in pixels");
        cmd->add_option("--zoom", cfg->zoom, "zoom level of the synthetic tiles");
        cmd->add_option("--target-r2", cfg->target_r2, "generative R^2 target");
        cmd->add_option("--noise-sd", cfg->noise_sd, "override the derived noise sd");
        cmd->add_option("--tiles-min", cfg->tiles_min, "min tiles per tract");
        cmd->add_option("--tiles-max", cfg->tiles_max, "max tiles per tract");
        cmd->add_option("--out", *out, "world directory");
        cmd->callback([c, cfg, out] {
            apply_jobs(*c);
            std::string started = ts::utc_now();
            cfg->seed = c->seed;
            auto result = ts::synth::generate_world(*cfg, resolve(*c, *out));
            info("synth", ts::strfmt("%d tracts, %d tiles, %d POIs, noise_sd=%.4f, "
                                     "achieved generative R2=%.4f",
                                     cfg->n_tracts, result.n_tiles, result.n_pois,
                                     result.noise_sd, result.achieved_r2));
            stamp_manifest(*c, resolve(*c, *out), {},
                           {{"n_tracts", std::to_string(cfg->n_tracts)}}, started);
        });
    }

    // ---------------- pipeline run ----------------
    auto* pipeline_cmd = app.add_subcommand("pipeline", "end-to-end orchestration");
    pipeline_cmd->require_subcommand(1);
    {
        auto c = std::make_shared<Common>();
        auto t = std::make_shared<TractOpts>();
        auto ex = std::make_shared<ExtractorOpts>();
        auto m = std::make_shared<ModelOpts>();
        auto cache = std::make_shared<std::string>("tiles");
        auto base_url = std::make_shared<std::string>();
        auto poi_fixture = std::make_shared<std::string>();
        auto poi_radius = std::make_shared<double>(400.0);
        auto poi_mode = std::make_shared<std::string>("counts");
        auto zoom = std::make_shared<int>(18);
        auto tw = std::make_shared<int>(400);
        auto th = std::make_shared<int>(400);
        auto out_dir = std::make_shared<std::string>("run");
        auto* cmd = pipeline_cmd->add_subcommand(
            "run", "tracts -> tiles -> features -> models -> reports in one go");
        add_common(cmd, c);
        add_tract_opts(cmd, t);
        cmd->add_option("--cache", *cache, "tile cache directory");
        cmd->add_option("--base-url", *base_url, "static-map endpoint (absent = offline cache)");
        cmd->add_option("--extractor", ex->extractor, "cnn|baseline");
        cmd->add_option("--weights", ex->weights, "CNW1 weights (cnn extractor)");
        cmd->add_option("--layer", ex->layer, "feature layer name");
        cmd->add_option("--poi-fixture", *poi_fixture, "POI NDJSON fixture; adds the POI models");
        cmd->add_option("--poi-radius", *poi_radius, "POI probe radius in meters");
        cmd->add_option("--poi-mode", *poi_mode, "counts|per-km2")
            ->check(CLI::IsMember({"counts", "per-km2"}));
        cmd->add_option("--zoom", *zoom, "tile zoom level");
        cmd->add_option("--tile-width", *tw, "tile width in pixels");
        cmd->add_option("--tile-height", *th, "tile height in pixels");
        add_model_opts(cmd, m);
        cmd->add_option("--out", *out_dir, "output directory");
        cmd->callback([c, t, ex, m, cache, base_url, poi_fixture, poi_radius, poi_mode, zoom, tw,
                       th, out_dir] {
            apply_jobs(*c);
            std::string started = ts::utc_now();
            auto dir = resolve(*c, *out_dir);
            fs::create_directories(dir);

            auto tracts = load_tracts(*c, *t);
            auto plan = plan_all_tiles(tracts, *zoom, *tw, *th);
            write_plan_csv(plan, dir / "plan.csv");
            info("pipeline", ts::strfmt("stage plan: %zu tiles", plan.size()));

            auto cache_dir = resolve(*c, *cache);
            if (!base_url->empty()) {
                ts::acq::EndpointConfig fetch_cfg;
                fetch_cfg.base_url = *base_url;
                if (const char* key = std::getenv("TRACTSCOPE_API_KEY"))
                    fetch_cfg.api_key = std::string(key);
                fs::create_directories(cache_dir);
                ts::acq::fetch_tiles(plan, fetch_cfg, cache_dir, c->jobs);
                info("pipeline", "stage fetch: cache warm");
            }

            auto store = extract_features(*c, plan, cache_dir, *ex);
            ts::features::write_feature_store(store, dir / "store.fvs");
            info("pipeline", ts::strfmt("stage extract: %zu tracts x %u dims",
                                        store.records.size(), store.dim));

            auto target = m->target == "income" ? ts::features::Target::income
                                                : ts::features::Target::prevalence;
            auto built = ts::features::build_design_matrix(store, tracts, target);
            auto cfg = to_config(*m, *c);

            std::vector<ts::eval::EvalReport> reports;
            auto cv_outcome = ts::eval::evaluate_run(built.matrix, cfg, ts::eval::EvalMode::cv,
                                                     ex->extractor, m->target, built.excluded);
            auto holdout_outcome =
                ts::eval::evaluate_run(built.matrix, cfg, ts::eval::EvalMode::holdout,
                                       ex->extractor, m->target, built.excluded);
            reports.insert(reports.end(), cv_outcome.reports.begin(), cv_outcome.reports.end());
            reports.insert(reports.end(), holdout_outcome.reports.begin(),
                           holdout_outcome.reports.end());
            info("pipeline", ts::strfmt("stage model: pooled cv r2=%.4f holdout pearson=%.4f",
                                        cv_outcome.reports[0].r2,
                                        holdout_outcome.reports[0].pearson));

            if (!poi_fixture->empty()) {
                std::vector<const ts::geo::TractRecord*> sorted;
                for (const auto& tr : tracts) sorted.push_back(&tr);
                std::sort(sorted.begin(), sorted.end(),
                          [](const auto* a, const auto* b) { return a->id < b->id; });
                ts::acq::EndpointConfig poi_cfg;
                poi_cfg.offline = true;
                poi_cfg.base_url = resolve(*c, *poi_fixture).string();
                std::vector<ts::geo::PoiProbe> probes;
                for (const auto* tr : sorted) {
                    auto grid = ts::geo::plan_poi_grid(*tr, *poi_radius);
                    probes.insert(probes.end(), grid.begin(), grid.end());
                }
                std::vector<ts::acq::PoiFetchResult> results(probes.size());
                std::string first_error;
#pragma omp parallel for schedule(dynamic)
                for (size_t i = 0; i < probes.size(); ++i) {
                    try {
                        results[i] = ts::acq::fetch_poi(probes[i], poi_cfg);
                    } catch (const std::exception& e) {
#pragma omp critical(pipeline_poi_error)
                        if (first_error.empty()) first_error = e.what();
                    }
                }
                if (!first_error.empty()) throw std::runtime_error(first_error);
                std::vector<ts::acq::PoiRecord> records;
                for (auto& r : results)
                    records.insert(records.end(), r.records.begin(), r.records.end());
                std::set<std::string> vocab_set;
                for (const auto& r : records) vocab_set.insert(r.category);
                std::vector<std::string> vocab(vocab_set.begin(), vocab_set.end());
                auto poi = ts::features::poi_feature_matrix(
                    records, tracts, vocab,
                    *poi_mode == "per-km2" ? ts::features::PoiMode::per_km2
                                           : ts::features::PoiMode::counts);
                write_poi_matrix_csv(poi.matrix, dir / "poi_matrix.csv");
                auto poi_built = ts::features::build_design_matrix(poi.matrix, tracts, target);
                auto poi_cv = ts::eval::evaluate_run(poi_built.matrix, cfg,
                                                     ts::eval::EvalMode::cv, "poi", m->target,
                                                     poi_built.excluded);
                auto poi_holdout = ts::eval::evaluate_run(poi_built.matrix, cfg,
                                                          ts::eval::EvalMode::holdout, "poi",
                                                          m->target, poi_built.excluded);
                reports.insert(reports.end(), poi_cv.reports.begin(), poi_cv.reports.end());
                reports.insert(reports.end(), poi_holdout.reports.begin(),
                               poi_holdout.reports.end());
                info("pipeline", ts::strfmt("stage poi: cv r2=%.4f", poi_cv.reports[0].r2));
            }

            // scatter/choropleth carry the image-model out-of-fold predictions
            ts::eval::emit_outputs(reports, cv_outcome.predictions, tracts, dir);
            write_eval_artifacts(reports, cv_outcome.predictions, dir);
            info("pipeline", ts::strfmt("stage emit: %s", dir.c_str()));
            stamp_manifest(*c, dir, {resolve(*c, t->tracts)},
                           {{"extractor", ex->extractor}, {"target", m->target}}, started);
        });
    }

    try {
        std::vector<std::string> args = expand_config(argc, argv, app);
        std::reverse(args.begin(), args.end());  // CLI11 vector parse takes reversed args
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    } catch (const ts::InputError& e) {
        log_line("ERROR", "input", e.what());
        std::fprintf(stderr, "usage: run the failing subcommand with --help\n");
        return 1;
    } catch (const std::exception& e) {
        log_line("ERROR", "runtime", e.what());
        return 2;
    }
    return 0;
}
