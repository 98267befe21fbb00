#ifndef SWIPE_SWEEP_HPP
#define SWIPE_SWEEP_HPP

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "config.hpp"
#include "data.hpp"
#include "inference.hpp"
#include "trainer.hpp"

// Ablation sweeps: a cartesian grid of ablation settings times seeds. Each cell
// trains into <root>/<config hash>/ and leaves a "done.json" marker, so an
// interrupted sweep resumes by skipping finished cells.

namespace swipe::sweep {

struct Axis {
    std::string key;
    std::vector<std::string> values;
};

/// "spo=on,off;mea=on,add" -> two axes.
inline std::vector<Axis> parse_grid(const std::string& text)
{
    std::vector<Axis> axes;
    std::stringstream in(text);
    std::string part;
    while (std::getline(in, part, ';')) {
        part = config::detail::trim(part);
        if (part.empty()) {
            continue;
        }
        const auto eq = part.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("grid axis '" + part + "' is not key=v1,v2,...");
        }
        Axis a;
        a.key = config::detail::trim(part.substr(0, eq));
        std::stringstream vals(part.substr(eq + 1));
        std::string v;
        while (std::getline(vals, v, ',')) {
            v = config::detail::trim(v);
            if (!v.empty()) {
                a.values.push_back(v);
            }
        }
        if (a.values.empty()) {
            throw ConfigError("grid axis '" + a.key + "' has no values");
        }
        // reject bad keys/values before any work starts
        for (const auto& value : a.values) {
            trainer::AblationFlags probe;
            trainer::set_ablation(probe, a.key, value);
        }
        axes.push_back(std::move(a));
    }
    return axes;
}

/// Cartesian product as "k=v,k=v" ablation strings, first axis slowest.
inline std::vector<std::string> expand(const std::vector<Axis>& axes)
{
    std::vector<std::string> cells{""};
    for (const auto& a : axes) {
        std::vector<std::string> next;
        for (const auto& prefix : cells) {
            for (const auto& v : a.values) {
                next.push_back(prefix + (prefix.empty() ? "" : ",") + a.key + "=" + v);
            }
        }
        cells = std::move(next);
    }
    return cells;
}

struct CellResult {
    std::string ablation;
    std::uint64_t seed = 0;
    std::string hash;
    double best_val_dice = 0.0;
    double test_dice = 0.0;
    bool skipped = false; // already done before this invocation
};

inline void to_json(nlohmann::json& j, const CellResult& r)
{
    j = nlohmann::json{{"ablation", r.ablation},         {"seed", r.seed},           {"config_hash", r.hash},
                       {"best_val_dice", r.best_val_dice}, {"test_dice", r.test_dice}};
}

inline void from_json(const nlohmann::json& j, CellResult& r)
{
    j.at("ablation").get_to(r.ablation);
    j.at("seed").get_to(r.seed);
    j.at("config_hash").get_to(r.hash);
    j.at("best_val_dice").get_to(r.best_val_dice);
    j.at("test_dice").get_to(r.test_dice);
}

/// Trains one cell (unless already done) and scores it on the test split at
/// native resolution.
inline CellResult run_cell(const config::RunConfig& base, const std::string& ablation, std::uint64_t seed,
                           const std::filesystem::path& root, data::Dataset& dataset, const trainer::Logger& log = {})
{
    config::RunConfig cfg = base;
    cfg.train.ablation = trainer::parse_ablation(ablation, base.train.ablation);
    cfg.train.seed = seed;
    cfg.model.image_height = dataset.manifest.size;
    cfg.model.image_width = dataset.manifest.size;
    const std::string hash = config::config_hash(cfg);
    const auto dir = root / hash;
    cfg.out_dir = dir.string();

    if (std::ifstream done(dir / "done.json"); done) {
        auto r = nlohmann::json::parse(done).get<CellResult>();
        r.skipped = true;
        return r;
    }
    config::write_echo(dir, cfg);
    const auto trained = trainer::train(dataset, cfg.model, cfg.train, dir, log);
    const auto model = std::make_shared<const Model<float>>(checkpoint::load<float>(trained.checkpoint));
    const inference::ModelPredictor<float> predictor(model, trained.checkpoint_id);
    auto spec = cfg.reconstruction;
    spec.target_height = dataset.manifest.size;
    spec.target_width = dataset.manifest.size;
    const auto scores = inference::evaluate(predictor, dataset.load_split("test"), spec);

    CellResult r;
    r.ablation = cfg.train.ablation.to_string();
    r.seed = seed;
    r.hash = hash;
    r.best_val_dice = trained.best_val_dice;
    r.test_dice = inference::mean_dice(scores);
    std::ofstream(dir / "done.json") << nlohmann::json(r).dump(2) << '\n';
    return r;
}

struct Summary {
    std::string ablation;
    int runs = 0;
    double mean = 0.0;
    double stddev = 0.0;
};

inline std::vector<Summary> summarize(const std::vector<CellResult>& results)
{
    std::vector<Summary> out;
    std::map<std::string, std::vector<double>> by;
    std::vector<std::string> order;
    for (const auto& r : results) {
        if (!by.count(r.ablation)) {
            order.push_back(r.ablation);
        }
        by[r.ablation].push_back(r.test_dice);
    }
    for (const auto& key : order) {
        const auto& v = by[key];
        Summary s;
        s.ablation = key;
        s.runs = static_cast<int>(v.size());
        for (double x : v) {
            s.mean += x;
        }
        s.mean /= s.runs;
        for (double x : v) {
            s.stddev += (x - s.mean) * (x - s.mean);
        }
        s.stddev = s.runs > 1 ? std::sqrt(s.stddev / (s.runs - 1)) : 0.0;
        out.push_back(s);
    }
    return out;
}

} // namespace swipe::sweep

#endif
