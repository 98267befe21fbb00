#ifndef SWIPE_CONFIG_HPP
#define SWIPE_CONFIG_HPP

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "inference.hpp"
#include "model.hpp"
#include "sampling.hpp"
#include "trainer.hpp"

// Run configuration: one flat "section.key = value" namespace.
//
//   # comment
//   train.iterations = 5000
//   model.widths = 8,16,24,32,48
//
// Sources in increasing precedence: built-in defaults, config file,
// environment (SWIPE_<SECTION>_<KEY>, e.g. SWIPE_TRAIN_ITERATIONS), flags.

namespace swipe::config {

/// Everything a run needs. Defaults are the desk-scale preset; the library
/// structs themselves default to the full-size architecture.
struct RunConfig {
    ModelConfig model = desk_model();
    trainer::TrainConfig train = desk_train();
    sampling::SamplingConfig sampling{};
    inference::ReconstructionSpec reconstruction{};
    std::string data_dir = "corpus";
    std::string out_dir = "runs/default";

    static ModelConfig desk_model()
    {
        ModelConfig m;
        m.encoder.widths = {8, 16, 24, 32, 48};
        m.encoder.blocks_per_stage = 1;
        m.encoder.embed_dim = 32;
        m.decoder.patch_hidden = {64, 64, 64};
        m.decoder.image_hidden = {64, 32};
        m.patch_size = 16;
        return m;
    }

    static trainer::TrainConfig desk_train()
    {
        trainer::TrainConfig t;
        t.iterations = 5000;
        t.batch_images = 8;
        t.points_per_image = 512;
        return t;
    }
};

namespace detail {

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v)
{
    std::istringstream in(v);
    T out{};
    in >> out;
    if (!in || !(in >> std::ws).eof()) {
        throw ConfigError("'" + key + "': cannot parse '" + v + "' as a number");
    }
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v)
{
    if (v == "true" || v == "on" || v == "1" || v == "yes") {
        return true;
    }
    if (v == "false" || v == "off" || v == "0" || v == "no") {
        return false;
    }
    throw ConfigError("'" + key + "': expected true/false, got '" + v + "'");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v)
{
    std::vector<int> out;
    std::stringstream in(v);
    std::string item;
    while (std::getline(in, item, ',')) {
        out.push_back(parse_number<int>(key, trim(item)));
    }
    if (out.empty()) {
        throw ConfigError("'" + key + "': empty list");
    }
    return out;
}

inline std::string join(const std::vector<int>& v)
{
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        s += (i ? "," : "") + std::to_string(v[i]);
    }
    return s;
}

inline std::string num(double v)
{
    std::ostringstream o;
    o.precision(17);
    o << v;
    return o.str();
}

struct Field {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline const std::map<std::string, Field>& registry()
{
    using R = RunConfig;
    static const std::map<std::string, Field> fields = [] {
        std::map<std::string, Field> f;
        auto int_field = [&](const std::string& key, std::function<int&(R&)> ref) {
            f[key] = {[key, ref](R& c, const std::string& v) { ref(c) = parse_number<int>(key, v); },
                      [ref](const R& c) { return std::to_string(ref(const_cast<R&>(c))); }};
        };
        auto u64_field = [&](const std::string& key, std::function<std::uint64_t&(R&)> ref) {
            f[key] = {[key, ref](R& c, const std::string& v) { ref(c) = parse_number<std::uint64_t>(key, v); },
                      [ref](const R& c) { return std::to_string(ref(const_cast<R&>(c))); }};
        };
        auto real_field = [&](const std::string& key, std::function<double&(R&)> ref) {
            f[key] = {[key, ref](R& c, const std::string& v) { ref(c) = parse_number<double>(key, v); },
                      [ref](const R& c) { return num(ref(const_cast<R&>(c))); }};
        };
        auto bool_field = [&](const std::string& key, std::function<bool&(R&)> ref) {
            f[key] = {[key, ref](R& c, const std::string& v) { ref(c) = parse_bool(key, v); },
                      [ref](const R& c) { return std::string(ref(const_cast<R&>(c)) ? "true" : "false"); }};
        };
        auto list_field = [&](const std::string& key, std::function<std::vector<int>&(R&)> ref) {
            f[key] = {[key, ref](R& c, const std::string& v) { ref(c) = parse_int_list(key, v); },
                      [ref](const R& c) { return join(ref(const_cast<R&>(c))); }};
        };
        auto string_field = [&](const std::string& key, std::function<std::string&(R&)> ref) {
            f[key] = {[ref](R& c, const std::string& v) { ref(c) = v; },
                      [ref](const R& c) { return ref(const_cast<R&>(c)); }};
        };

        f["model.widths"] = {[](R& c, const std::string& v) {
                                 const auto w = parse_int_list("model.widths", v);
                                 if (w.size() != c.model.encoder.widths.size()) {
                                     throw ConfigError("'model.widths' needs exactly 5 stage widths");
                                 }
                                 std::copy(w.begin(), w.end(), c.model.encoder.widths.begin());
                             },
                             [](const R& c) {
                                 return join({c.model.encoder.widths.begin(), c.model.encoder.widths.end()});
                             }};
        int_field("model.blocks_per_stage", [](R& c) -> auto& { return c.model.encoder.blocks_per_stage; });
        int_field("model.embed_dim", [](R& c) -> auto& { return c.model.encoder.embed_dim; });
        bool_field("model.resize_input", [](R& c) -> auto& { return c.model.encoder.resize_input; });
        int_field("model.patch_size", [](R& c) -> auto& { return c.model.patch_size; });
        list_field("model.patch_hidden", [](R& c) -> auto& { return c.model.decoder.patch_hidden; });
        list_field("model.image_hidden", [](R& c) -> auto& { return c.model.decoder.image_hidden; });
        int_field("model.frequency_bands", [](R& c) -> auto& { return c.model.decoder.frequency_bands; });
        bool_field("model.rescale_local", [](R& c) -> auto& { return c.model.decoder.rescale_local; });
        f["model.head"] = {[](R& c, const std::string& v) {
                               if (v != "softmax" && v != "sigmoid") {
                                   throw ConfigError("'model.head': expected softmax or sigmoid, got '" + v + "'");
                               }
                               c.model.decoder.head = v == "softmax" ? decoder::HeadKind::Softmax
                                                                     : decoder::HeadKind::Sigmoid;
                           },
                           [](const R& c) {
                               return std::string(c.model.decoder.head == decoder::HeadKind::Softmax ? "softmax"
                                                                                                     : "sigmoid");
                           }};

        int_field("train.iterations", [](R& c) -> auto& { return c.train.iterations; });
        int_field("train.batch_images", [](R& c) -> auto& { return c.train.batch_images; });
        int_field("train.points_per_image", [](R& c) -> auto& { return c.train.points_per_image; });
        u64_field("train.seed", [](R& c) -> auto& { return c.train.seed; });
        real_field("train.annotation_fraction", [](R& c) -> auto& { return c.train.annotation_fraction; });
        int_field("train.val_every", [](R& c) -> auto& { return c.train.val_every; });
        bool_field("train.augment", [](R& c) -> auto& { return c.train.augment; });
        bool_field("train.deterministic", [](R& c) -> auto& { return c.train.deterministic; });
        int_field("train.log_every", [](R& c) -> auto& { return c.train.log_every; });
        f["train.ablate"] = {[](R& c, const std::string& v) { c.train.ablation = trainer::parse_ablation(v); },
                             [](const R& c) { return c.train.ablation.to_string(); }};

        real_field("optimizer.lr", [](R& c) -> auto& { return c.train.optimizer.lr; });
        real_field("optimizer.lr_min", [](R& c) -> auto& { return c.train.optimizer.lr_min; });
        real_field("optimizer.beta1", [](R& c) -> auto& { return c.train.optimizer.beta1; });
        real_field("optimizer.beta2", [](R& c) -> auto& { return c.train.optimizer.beta2; });
        real_field("optimizer.eps", [](R& c) -> auto& { return c.train.optimizer.eps; });
        real_field("optimizer.weight_decay", [](R& c) -> auto& { return c.train.optimizer.weight_decay; });
        int_field("optimizer.warmup", [](R& c) -> auto& { return c.train.optimizer.warmup; });

        real_field("loss.alpha", [](R& c) -> auto& { return c.train.loss.alpha; });
        real_field("loss.beta", [](R& c) -> auto& { return c.train.loss.beta; });
        real_field("loss.lambda", [](R& c) -> auto& { return c.train.loss.lambda; });

        int_field("sampling.n_background", [](R& c) -> auto& { return c.sampling.n_background; });
        int_field("sampling.n_foreground_per_class", [](R& c) -> auto& { return c.sampling.n_foreground_per_class; });
        real_field("sampling.boundary_fraction", [](R& c) -> auto& { return c.sampling.boundary_fraction; });
        real_field("sampling.boundary_band", [](R& c) -> auto& { return c.sampling.boundary_band; });
        bool_field("sampling.jitter", [](R& c) -> auto& { return c.sampling.jitter; });
        u64_field("sampling.seed", [](R& c) -> auto& { return c.sampling.seed; });

        int_field("inference.initial_stride", [](R& c) -> auto& { return c.reconstruction.initial_stride; });
        real_field("inference.threshold", [](R& c) -> auto& { return c.reconstruction.threshold; });
        real_field("inference.margin", [](R& c) -> auto& { return c.reconstruction.margin; });
        f["inference.mode"] = {
            [](R& c, const std::string& v) { c.reconstruction.refinement = inference::refinement_from_string(v); },
            [](const R& c) { return inference::to_string(c.reconstruction.refinement); }};

        string_field("paths.data", [](R& c) -> auto& { return c.data_dir; });
        string_field("paths.out", [](R& c) -> auto& { return c.out_dir; });
        return f;
    }();
    return fields;
}

} // namespace detail

inline std::vector<std::string> known_keys()
{
    std::vector<std::string> keys;
    for (const auto& [k, v] : detail::registry()) {
        keys.push_back(k);
    }
    return keys;
}

/// Environment variable consulted for a key: SWIPE_ + upper-cased key with '.' -> '_'.
inline std::string env_name(const std::string& key)
{
    std::string name = "SWIPE_";
    for (char ch : key) {
        name += ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    }
    return name;
}

/// Layered key/value overrides, resolved in one pass.
class Resolver {
public:
    /// Parses a config file; unknown keys and malformed lines are errors with line numbers.
    void load_file(const std::filesystem::path& path)
    {
        std::ifstream in(path);
        if (!in) {
            throw ConfigError("cannot read config file " + path.string());
        }
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) {
                line.resize(hash);
            }
            line = detail::trim(line);
            if (line.empty()) {
                continue;
            }
            const auto eq = line.find('=');
            const std::string where = path.string() + ":" + std::to_string(line_no);
            if (eq == std::string::npos) {
                throw ParseError(where + ": expected 'section.key = value', got '" + line + "'");
            }
            const auto key = detail::trim(line.substr(0, eq));
            if (!detail::registry().count(key)) {
                throw ParseError(where + ": unknown key '" + key + "'");
            }
            file_[key] = detail::trim(line.substr(eq + 1));
        }
    }

    void set_flag(const std::string& key, const std::string& value)
    {
        if (!detail::registry().count(key)) {
            throw ConfigError("unknown key '" + key + "'");
        }
        flags_[key] = value;
    }

    /// Applies file, then environment, then flags on top of `base`.
    RunConfig resolve(RunConfig base = {}) const
    {
        for (const auto& [key, field] : detail::registry()) {
            std::string origin;
            const std::string* value = nullptr;
            std::string env_value;
            if (auto it = flags_.find(key); it != flags_.end()) {
                value = &it->second;
                origin = "flag";
            } else if (const char* env = std::getenv(env_name(key).c_str()); env != nullptr) {
                env_value = env;
                value = &env_value;
                origin = "environment " + env_name(key);
            } else if (auto it2 = file_.find(key); it2 != file_.end()) {
                value = &it2->second;
                origin = "config file";
            }
            if (value) {
                try {
                    field.set(base, *value);
                } catch (const ConfigError& e) {
                    throw ConfigError(std::string(e.what()) + " (from " + origin + ")");
                }
            }
        }
        base.model.validate();
        base.train.validate();
        base.sampling.validate();
        base.reconstruction.validate();
        return base;
    }

private:
    std::map<std::string, std::string> file_;
    std::map<std::string, std::string> flags_;
};

/// Resolved configuration in the same format the file loader reads.
inline std::string echo(const RunConfig& c)
{
    std::ostringstream out;
    out << "# resolved configuration\n";
    std::string section;
    for (const auto& [key, field] : detail::registry()) {
        const auto dot = key.find('.');
        if (key.substr(0, dot) != section) {
            section = key.substr(0, dot);
            out << '\n';
        }
        out << key << " = " << field.get(c) << '\n';
    }
    return out.str();
}

/// Content hash of everything that affects a run's result.
inline std::string config_hash(const RunConfig& c)
{
    RunConfig copy = c;
    copy.out_dir.clear();
    copy.train.log_every = 0;
    return checkpoint::content_id(echo(copy));
}

inline void write_echo(const std::filesystem::path& dir, const RunConfig& c)
{
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / "resolved.cfg");
    out << echo(c);
}

} // namespace swipe::config

#endif
