// swipe: corpus generation, point sampling, training, inference, evaluation
// and ablation sweeps from one binary.
//
// Exit codes: 0 success, 1 internal error, 2 user or configuration error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <swipe/config.hpp>
#include <swipe/data.hpp>
#include <swipe/inference.hpp>
#include <swipe/sweep.hpp>
#include <swipe/trainer.hpp>

namespace fs = std::filesystem;
using namespace swipe;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitUser = 2;

void log_line(const std::string& s)
{
    std::cerr << s << std::endl;
}

/// Options shared by the commands that resolve a RunConfig.
struct ConfigOptions {
    std::string config_file;
    std::vector<std::string> sets;

    void add_to(CLI::App* cmd)
    {
        cmd->add_option("--config", config_file, "key = value config file");
        cmd->add_option("--set", sets, "override one key, e.g. --set train.iterations=500")->take_all();
    }

    config::Resolver resolver() const
    {
        config::Resolver r;
        if (!config_file.empty()) {
            r.load_file(config_file);
        }
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("--set expects key=value, got '" + s + "'");
            }
            r.set_flag(config::detail::trim(s.substr(0, eq)), config::detail::trim(s.substr(eq + 1)));
        }
        return r;
    }
};

bool non_empty_dir(const fs::path& p)
{
    return fs::exists(p) && (!fs::is_directory(p) || !fs::is_empty(p));
}

std::pair<int, int> parse_size(const std::string& text)
{
    try {
        const auto x = text.find('x');
        if (x == std::string::npos) {
            const int n = std::stoi(text);
            return {n, n};
        }
        return {std::stoi(text.substr(0, x)), std::stoi(text.substr(x + 1))};
    } catch (const std::exception&) {
        throw ConfigError("size must be N or HxW, got '" + text + "'");
    }
}

// ---------------------------------------------------------------------------

struct GenerateCmd {
    std::string out = "corpus";
    int n = 200;
    int size = 96;
    int classes = 1;
    double noise = 0.05;
    std::uint64_t seed = 0;
    bool force = false;
    bool no_points = false;

    void add(CLI::App& app)
    {
        auto* cmd = app.add_subcommand("generate", "write a synthetic corpus (images, masks, points, manifest)");
        cmd->add_option("--out", out, "output directory")->capture_default_str();
        cmd->add_option("--n", n, "number of images")->capture_default_str();
        cmd->add_option("--size", size, "image side in pixels")->capture_default_str();
        cmd->add_option("--classes", classes, "foreground classes (1 or 2)")->capture_default_str();
        cmd->add_option("--noise", noise, "additive noise sigma")->capture_default_str();
        cmd->add_option("--seed", seed, "corpus seed")->capture_default_str();
        cmd->add_flag("--force", force, "write into a non-empty directory");
        cmd->add_flag("--no-points", no_points, "skip point pre-sampling");
        cmd->callback([this] { run(); });
    }

    void run() const
    {
        if (non_empty_dir(out) && !force) {
            throw ValidationError("output directory '" + out + "' is not empty (use --force to overwrite)");
        }
        data::CorpusSpec spec;
        spec.n_images = n;
        spec.size = size;
        spec.classes = classes;
        spec.noise = noise;
        spec.seed = seed;
        spec.write_points = !no_points;
        const auto m = data::generate_corpus(out, spec);
        std::ofstream(fs::path(out) / "corpus_spec.json") << nlohmann::json(spec).dump(2) << '\n';
        std::cout << "wrote " << m.images.size() << " images to " << out << " (train " << m.split("train").size()
                  << ", val " << m.split("val").size() << ", test " << m.split("test").size() << ")\n";
    }
};

struct SampleCmd {
    std::string data = "corpus";
    ConfigOptions opts;

    void add(CLI::App& app)
    {
        auto* cmd = app.add_subcommand("sample", "pre-sample supervision points for every image");
        cmd->add_option("--data", data, "corpus directory")->capture_default_str();
        opts.add_to(cmd);
        cmd->callback([this] { run(); });
    }

    void run() const
    {
        const auto cfg = opts.resolver().resolve();
        const fs::path root = data;
        auto m = data::load_manifest(root / "manifest.json");
        fs::create_directories(root / "points");
        std::size_t total = 0;
        for (auto& e : m.images) {
            const auto mask = read_png_gray8(root / e.mask);
            const auto points = data::sample_image_points(mask, m.num_classes, cfg.sampling,
                                                          cfg.sampling.seed ^ m.corpus_seed, e.id);
            e.points = "points/" + data::numbered(e.id, ".txt");
            sampling::write_point_file(root / e.points, points.samples);
            sampling::write_point_sidecar(root / ("points/" + data::numbered(e.id, ".json")), cfg.sampling,
                                          points.report, points.samples.size());
            for (const auto& w : points.report.warnings) {
                log_line("image " + std::to_string(e.id) + ": " + w);
            }
            total += points.samples.size();
        }
        data::save_manifest(root / "manifest.json", m);
        std::cout << "sampled " << total << " points over " << m.images.size() << " images\n";
    }
};

struct TrainCmd {
    std::string data = "corpus";
    std::string out;
    std::string ablate;
    double fraction = -1.0;
    long long seed = -1;
    int iterations = -1;
    bool deterministic = false;
    bool dry_run = false;
    ConfigOptions opts;

    void add(CLI::App& app)
    {
        auto* cmd = app.add_subcommand("train", "train a model on the corpus train split");
        cmd->add_option("--data", data, "corpus directory")->capture_default_str();
        cmd->add_option("--out", out, "run directory (default: paths.out)");
        cmd->add_option("--ablate", ablate, "ablation flags, e.g. spo=off,mea=add");
        cmd->add_option("--annotation-fraction", fraction, "fraction of train images used, in (0, 1]");
        cmd->add_option("--seed", seed, "root seed");
        cmd->add_option("--iterations", iterations, "optimizer steps");
        cmd->add_flag("--deterministic", deterministic, "serialize everything for bitwise reproducibility");
        cmd->add_flag("--dry-run", dry_run, "write the initial checkpoint without updates");
        opts.add_to(cmd);
        cmd->callback([this] { run(); });
    }

    void run() const
    {
        auto resolver = opts.resolver();
        if (!ablate.empty()) {
            resolver.set_flag("train.ablate", ablate);
        }
        if (fraction >= 0.0) {
            resolver.set_flag("train.annotation_fraction", config::detail::num(fraction));
        }
        if (seed >= 0) {
            resolver.set_flag("train.seed", std::to_string(seed));
        }
        if (iterations >= 0) {
            resolver.set_flag("train.iterations", std::to_string(iterations));
        }
        if (deterministic) {
            resolver.set_flag("train.deterministic", "true");
        }
        if (!data.empty()) {
            resolver.set_flag("paths.data", data);
        }
        if (!out.empty()) {
            resolver.set_flag("paths.out", out);
        }
        auto cfg = resolver.resolve();
        cfg.train.dry_run = dry_run;
        auto dataset = data::Dataset::open(fs::path(cfg.data_dir) / "manifest.json");
        cfg.model.image_height = dataset.manifest.size;
        cfg.model.image_width = dataset.manifest.size;
        config::write_echo(cfg.out_dir, cfg);
        if (cfg.train.log_every == 0) {
            cfg.train.log_every = 100;
        }
        const auto r = trainer::train(dataset, cfg.model, cfg.train, cfg.out_dir, log_line);
        std::cout << "checkpoint " << r.checkpoint.string() << " (id " << r.checkpoint_id << ")\n"
                  << "train images " << r.train_ids.size() << " of " << dataset.manifest.split("train").size()
                  << " (annotation fraction " << cfg.train.annotation_fraction << ")\n"
                  << "ablation " << cfg.train.ablation.to_string() << '\n'
                  << "best val dice " << r.best_val_dice << " at step " << r.best_step << '\n';
    }
};

fs::path checkpoint_stem(const std::string& path)
{
    fs::path p = path;
    if (p.extension() == ".json" || p.extension() == ".bin") {
        p.replace_extension();
    }
    if (!fs::exists(checkpoint::json_path(p))) {
        throw ValidationError("checkpoint not found: " + path);
    }
    return p;
}

struct InferCmd {
    std::string checkpoint_path;
    std::string image;
    std::string out;
    std::string out_size;
    std::string mode = "mise";
    std::string truth;
    ConfigOptions opts;

    void add(CLI::App& app)
    {
        auto* cmd = app.add_subcommand("infer", "reconstruct a mask for one image at any output size");
        cmd->add_option("--checkpoint", checkpoint_path, "checkpoint stem or .json/.bin path")->required();
        cmd->add_option("--image", image, "input PNG")->required();
        cmd->add_option("--out", out, "mask PNG path (default: <image>_mask.png)");
        cmd->add_option("--out-size", out_size, "N or HxW (default: input size)");
        cmd->add_option("--mode", mode, "mise or dense")->capture_default_str();
        cmd->add_option("--truth", truth, "ground-truth mask PNG at the output size, for Dice");
        opts.add_to(cmd);
        cmd->callback([this] { run(); });
    }

    void run() const
    {
        auto cfg = opts.resolver().resolve();
        cfg.reconstruction.refinement = inference::refinement_from_string(mode);
        const auto stem = checkpoint_stem(checkpoint_path);
        if (!fs::exists(image)) {
            throw ValidationError("image not found: " + image);
        }
        nlohmann::json meta;
        const auto predictor = inference::load_predictor(stem, &meta);
        data::Sample sample;
        sample.image = to_unit_float(read_png_gray8(image));
        const auto [h, w] = out_size.empty() ? std::pair{sample.image.height, sample.image.width} : parse_size(out_size);
        auto spec = cfg.reconstruction;
        spec.target_height = h;
        spec.target_width = w;
        const auto field = predictor->bind(sample);
        const auto rec = inference::reconstruct(field, spec);
        const fs::path mask_path = out.empty() ? fs::path(image).replace_extension("").string() + "_mask.png" : out;
        write_png_gray8(mask_path, rec.mask);

        nlohmann::json side{{"target_height", h},
                            {"target_width", w},
                            {"threshold", spec.threshold},
                            {"mode", inference::to_string(spec.refinement)},
                            {"checkpoint_id", predictor->id()},
                            {"evaluations", rec.evaluations}};
        if (spec.refinement == inference::Refinement::Mise) {
            const auto dense = inference::decode_grid(field, h, w);
            side["agreement_with_dense"] = inference::agreement(rec.mask, dense.mask);
            side["dense_evaluations"] = dense.evaluations;
        }
        if (!truth.empty()) {
            const auto t = read_png_gray8(truth);
            const auto d = inference::dice_metric(rec.mask, t, predictor->num_classes());
            nlohmann::json per;
            for (const auto& [c, v] : d.per_class) {
                per[std::to_string(c)] = v;
            }
            side["dice"] = {{"per_class", per}, {"foreground_mean", d.foreground_mean}};
        }
        auto side_path = mask_path;
        side_path.replace_extension(".json");
        std::ofstream(side_path) << side.dump(2) << '\n';
        std::cout << "wrote " << mask_path.string() << " (" << h << "x" << w << ")\n";
    }
};

void write_eval_csv(const fs::path& path, const std::vector<inference::ImageScore>& scores, int num_classes)
{
    std::ofstream csv(path);
    csv << "image_id,dice";
    for (int c = 1; c < num_classes; ++c) {
        csv << ",dice_class_" << c;
    }
    csv << ",evaluations\n";
    char buf[64];
    auto fmt = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.6f", v);
        return std::string(buf);
    };
    std::vector<double> class_sum(static_cast<std::size_t>(num_classes), 0.0);
    std::vector<int> class_n(class_sum.size(), 0);
    long evals = 0;
    for (const auto& s : scores) {
        csv << s.id << ',' << fmt(s.dice.foreground_mean);
        for (int c = 1; c < num_classes; ++c) {
            auto it = s.dice.per_class.find(c);
            csv << ',' << (it == s.dice.per_class.end() ? std::string() : fmt(it->second));
            if (it != s.dice.per_class.end()) {
                class_sum[static_cast<std::size_t>(c)] += it->second;
                ++class_n[static_cast<std::size_t>(c)];
            }
        }
        csv << ',' << s.evaluations << '\n';
        evals += s.evaluations;
    }
    csv << "mean," << fmt(inference::mean_dice(scores));
    for (int c = 1; c < num_classes; ++c) {
        const auto k = static_cast<std::size_t>(c);
        csv << ',' << (class_n[k] ? fmt(class_sum[k] / class_n[k]) : std::string());
    }
    csv << ',' << (scores.empty() ? 0 : evals / static_cast<long>(scores.size())) << '\n';
}

struct EvalCmd {
    std::string checkpoint_path;
    std::string data = "corpus";
    std::string split = "test";
    std::string out;
    std::string out_size;
    std::string mode = "mise";
    ConfigOptions opts;

    void add(CLI::App& app)
    {
        auto* cmd = app.add_subcommand("eval", "score a checkpoint on a corpus split");
        cmd->add_option("--checkpoint", checkpoint_path, "checkpoint stem or .json/.bin path")->required();
        cmd->add_option("--data", data, "corpus directory")->capture_default_str();
        cmd->add_option("--split", split, "train, val or test")->capture_default_str();
        cmd->add_option("--out", out, "CSV path (default: eval_<split>.csv next to the checkpoint)");
        cmd->add_option("--out-size", out_size, "N or HxW (default: corpus size)");
        cmd->add_option("--mode", mode, "mise or dense")->capture_default_str();
        opts.add_to(cmd);
        cmd->callback([this] { run(); });
    }

    void run() const
    {
        auto cfg = opts.resolver().resolve();
        cfg.reconstruction.refinement = inference::refinement_from_string(mode);
        const auto stem = checkpoint_stem(checkpoint_path);
        auto dataset = data::Dataset::open(fs::path(data) / "manifest.json");
        const auto predictor = inference::load_predictor(stem);
        const auto [h, w] = out_size.empty() ? std::pair{dataset.manifest.size, dataset.manifest.size}
                                             : parse_size(out_size);
        auto spec = cfg.reconstruction;
        spec.target_height = h;
        spec.target_width = w;
        const auto scores = inference::evaluate(*predictor, dataset.load_split(split), spec);
        const fs::path csv = out.empty() ? stem.parent_path() / ("eval_" + split + ".csv") : fs::path(out);
        write_eval_csv(csv, scores, predictor->num_classes());
        std::printf("%s: %zu images, mean dice %.4f -> %s\n", split.c_str(), scores.size(),
                    inference::mean_dice(scores), csv.string().c_str());
    }
};

struct AblateCmd {
    std::string data = "corpus";
    std::string out = "runs/ablation";
    std::string grid;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    ConfigOptions opts;

    void add(CLI::App& app)
    {
        auto* cmd = app.add_subcommand("ablate", "train and test every cell of an ablation grid");
        cmd->add_option("--data", data, "corpus directory")->capture_default_str();
        cmd->add_option("--out", out, "sweep directory")->capture_default_str();
        cmd->add_option("--grid", grid, "axes, e.g. \"spo=on,off;mea=on,add\"")->required();
        cmd->add_option("--seeds", seeds, "comma-separated seeds")->delimiter(',')->capture_default_str();
        opts.add_to(cmd);
        cmd->callback([this] { run(); });
    }

    void run() const
    {
        const auto base = opts.resolver().resolve();
        const auto cells = sweep::expand(sweep::parse_grid(grid));
        auto dataset = data::Dataset::open(fs::path(data) / "manifest.json");
        fs::create_directories(out);
        std::vector<sweep::CellResult> results;
        for (const auto& cell : cells) {
            for (auto seed : seeds) {
                log_line("cell " + cell + " seed " + std::to_string(seed));
                auto r = sweep::run_cell(base, cell, seed, out, dataset, log_line);
                if (r.skipped) {
                    log_line("  already done (" + r.hash + ")");
                }
                results.push_back(r);
            }
        }
        std::ofstream runs(fs::path(out) / "runs.csv");
        runs << "ablation,seed,config_hash,best_val_dice,test_dice\n";
        for (const auto& r : results) {
            runs << '"' << r.ablation << "\"," << r.seed << ',' << r.hash << ',' << r.best_val_dice << ','
                 << r.test_dice << '\n';
        }
        std::ofstream summary(fs::path(out) / "summary.csv");
        summary << "ablation,runs,mean_test_dice,std_test_dice\n";
        for (const auto& s : sweep::summarize(results)) {
            summary << '"' << s.ablation << "\"," << s.runs << ',' << s.mean << ',' << s.stddev << '\n';
            std::printf("%-60s n=%d mean %.4f sd %.4f\n", s.ablation.c_str(), s.runs, s.mean, s.stddev);
        }
    }
};

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"swipe: patch-level implicit segmentation"};
    app.require_subcommand(1);
    GenerateCmd generate;
    SampleCmd sample;
    TrainCmd train;
    InferCmd infer;
    EvalCmd eval;
    AblateCmd ablate;
    generate.add(app);
    sample.add(app);
    train.add(app);
    infer.add(app);
    eval.add(app);
    ablate.add(app);
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUser;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitUser;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << '\n';
        return kExitUser;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUser;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return kExitInternal;
    }
    return kExitOk;
}
