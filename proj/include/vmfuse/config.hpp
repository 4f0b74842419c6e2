#pragma once

// Flat `key = value` run configuration shared by every subcommand.
//
// Keys are grouped by prefix: sim., train., mag., align., eval.; `seed`,
// `n_datasets` and `profile` sit at top level. Unknown keys are rejected.
// A profile (desk or full) supplies defaults before any key is applied, so
// a config echoed into an output header reproduces the run exactly.

#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vmfuse/detail/text_io.hpp"
#include "vmfuse/error.hpp"
#include "vmfuse/evalbench.hpp"
#include "vmfuse/evoalign.hpp"
#include "vmfuse/fusenet.hpp"
#include "vmfuse/magloc.hpp"
#include "vmfuse/simkit.hpp"

namespace vmfuse {

inline constexpr int kRunFormatVersion = 1;

/// Parameters of the synthetic alignment demo.
struct AlignDemoConfig {
    int frames = 2;
    int width = 1024;
    int height = 768;
    double focal = 1600.0;           // pixels; principal point at the image center
    std::size_t correspondences = 20; // per linked pair
    double noise_sd = 0.0;            // meters, on both correspondence endpoints
    double motion_trans = 0.001;      // per-frame camera step bound, meters
    double motion_rot = 0.02;         // per-frame rotation bound, radians
    SceneParams scene;
};

struct RunConfig {
    std::string profile = "desk";
    std::uint64_t seed = 1;
    int n_datasets = 50;
    SimConfig sim;
    Hyperparams hp;
    TrainingConfig train;
    int n_val = 2;
    InversionSettings inv;
    AlignmentWeights align_weights;
    AlignmentSettings align;
    AlignDemoConfig demo;
    std::vector<double> bucket_lengths = default_bucket_lengths();
    RollRule roll = RollRule::hold_initial;

    void validate() const {
        if (n_datasets < 1) throw ConfigError("n_datasets must be >= 1");
        if (n_val < 1) throw ConfigError("train.n_val must be >= 1");
        sim.validate();
        hp.validate();
        train.validate();
        align_weights.validate();
        align.validate();
        demo.scene.validate();
        if (demo.frames < 2 || demo.width < 3 || demo.height < 3 || !(demo.focal > 0.0)) {
            throw ConfigError("align demo needs >= 2 frames of at least 3x3 pixels");
        }
        if (bucket_lengths.empty()) throw ConfigError("eval.bucket_lengths is empty");
        for (double L : bucket_lengths) {
            if (!(L > 0.0)) throw ConfigError("bucket lengths must be positive");
        }
    }
};

inline std::string to_string(RollRule r) {
    switch (r) {
        case RollRule::zero: return "zero";
        case RollRule::hold_initial: return "hold";
        case RollRule::ground_truth: return "gt";
    }
    return "hold";
}

/// Profile defaults. desk: the small network and data recipe that trains in
/// a few minutes on one core. full: hidden 200, dropout 0.25, 200 epochs.
inline RunConfig profile_defaults(const std::string& name) {
    RunConfig c;
    c.profile = name;
    c.sim.duration = 120.0;
    c.sim.motion_profile = MotionProfile::comprehensive_scan;
    c.train.window = 32;
    c.train.burn_in = 16;
    if (name == "desk") {
        c.n_datasets = 50;
        c.hp.hidden_size = 16;
        c.hp.alpha = 0.003;
        c.hp.dropout_rate = 0.0;
        c.train.max_epochs = 50;
        c.train.lr_decay = 0.9;
    } else if (name == "full") {
        c.n_datasets = 50;
        c.hp.hidden_size = 200;
        c.hp.alpha = 0.001;
        c.hp.dropout_rate = 0.25;
        c.train.max_epochs = 200;
        c.train.lr_decay = 1.0;
    } else {
        throw ConfigError("unknown profile '" + name + "' (expected desk or full)");
    }
    return c;
}

namespace detail {

struct ConfigField {
    std::string key;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
};

inline std::vector<double> parse_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(parse_config_double(key, std::string(trim(tok))));
    return out;
}

inline std::vector<ConfigField> config_fields(RunConfig& c) {
    std::vector<ConfigField> f;
    auto dbl = [&f](const std::string& key, double& x) {
        f.push_back({key, [&x] { return format_double(x); }, [&x, key](const std::string& v) {
                         x = parse_config_double(key, v);
                     }});
    };
    auto integer = [&f](const std::string& key, int& x) {
        f.push_back({key, [&x] { return std::to_string(x); }, [&x, key](const std::string& v) {
                         x = static_cast<int>(parse_config_int(key, v));
                     }});
    };
    auto flag = [&f](const std::string& key, bool& x) {
        f.push_back({key, [&x] { return std::string(x ? "1" : "0"); }, [&x, key](const std::string& v) {
                         if (v != "0" && v != "1") throw ConfigError("'" + key + "' must be 0 or 1");
                         x = v == "1";
                     }});
    };
    f.push_back({"seed", [&c] { return std::to_string(c.seed); },
                 [&c](const std::string& v) { c.seed = static_cast<std::uint64_t>(parse_config_int("seed", v)); }});
    integer("n_datasets", c.n_datasets);
    for (const auto& [k, v0] : to_kv(c.sim)) {
        if (k == "seed") continue;  // per-dataset seeds derive from the root seed
        const std::string key = k;
        f.push_back({"sim." + key,
                     [&c, key] {
                         for (const auto& [kk, vv] : to_kv(c.sim)) {
                             if (kk == key) return vv;
                         }
                         return std::string();
                     },
                     [&c, key](const std::string& v) { apply_kv(c.sim, key, v); }});
    }
    dbl("train.alpha", c.hp.alpha);
    dbl("train.beta1", c.hp.beta1);
    dbl("train.beta2", c.hp.beta2);
    dbl("train.epsilon", c.hp.epsilon);
    flag("train.epsilon_inside_sqrt", c.hp.epsilon_inside_sqrt);
    dbl("train.beta_loss", c.hp.beta_loss);
    dbl("train.dropout_rate", c.hp.dropout_rate);
    integer("train.hidden_size", c.hp.hidden_size);
    integer("train.max_epochs", c.train.max_epochs);
    integer("train.window", c.train.window);
    integer("train.burn_in", c.train.burn_in);
    integer("train.warmup_epochs", c.train.warmup_epochs);
    integer("train.patience", c.train.patience);
    dbl("train.lr_decay", c.train.lr_decay);
    dbl("train.clip_norm", c.train.clip_norm);
    integer("train.n_val", c.n_val);
    integer("mag.max_iterations", c.inv.max_iterations);
    dbl("mag.convergence_tol", c.inv.convergence_tol);
    dbl("mag.initial_damping", c.inv.initial_damping);
    integer("mag.restart_count", c.inv.restart_count);
    dbl("mag.search_half_extent", c.inv.search_half_extent);
    dbl("mag.search_depth_min", c.inv.search_depth_min);
    dbl("mag.search_depth_max", c.inv.search_depth_max);
    dbl("mag.outlier_factor", c.inv.outlier_factor);
    dbl("align.w_sparse", c.align_weights.w_sparse);
    dbl("align.w_dense", c.align_weights.w_dense);
    dbl("align.w_photo", c.align_weights.w_photo);
    dbl("align.w_geo", c.align_weights.w_geo);
    integer("align.sparse_iterations", c.align.sparse_iterations);
    integer("align.dense_iterations", c.align.dense_iterations);
    dbl("align.convergence_tol", c.align.convergence_tol);
    dbl("align.initial_damping", c.align.initial_damping);
    integer("align.pixel_stride", c.align.pixel_stride);
    integer("align.pair_skip", c.align.pair_skip);
    integer("align.frames", c.demo.frames);
    integer("align.width", c.demo.width);
    integer("align.height", c.demo.height);
    dbl("align.focal", c.demo.focal);
    f.push_back({"align.correspondences", [&c] { return std::to_string(c.demo.correspondences); },
                 [&c](const std::string& v) {
                     const auto n = parse_config_int("align.correspondences", v);
                     if (n < 3) throw ConfigError("align.correspondences must be >= 3");
                     c.demo.correspondences = static_cast<std::size_t>(n);
                 }});
    dbl("align.noise_sd", c.demo.noise_sd);
    dbl("align.motion_trans", c.demo.motion_trans);
    dbl("align.motion_rot", c.demo.motion_rot);
    dbl("align.scene_distance", c.demo.scene.plane_distance);
    dbl("align.scene_relief", c.demo.scene.relief);
    dbl("align.scene_min_wavelength", c.demo.scene.min_wavelength);
    dbl("align.scene_max_wavelength", c.demo.scene.max_wavelength);
    integer("align.scene_waves", c.demo.scene.waves);
    f.push_back({"eval.bucket_lengths", [&c] { return format_vec(c.bucket_lengths.data(), static_cast<int>(c.bucket_lengths.size())); },
                 [&c](const std::string& v) { c.bucket_lengths = parse_list("eval.bucket_lengths", v); }});
    f.push_back({"eval.roll_rule", [&c] { return to_string(c.roll); },
                 [&c](const std::string& v) { c.roll = roll_rule_from_string(v); }});
    return f;
}

}  // namespace detail

/// Raw `key = value` pairs in file order. `#` starts a comment line.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(std::istream& is) {
    std::vector<std::pair<std::string, std::string>> out;
    detail::LineReader reader(is);
    std::string line;
    std::set<std::string> seen;
    while (reader.next(line)) {
        const auto body = detail::trim(line);
        if (body.empty() || body.front() == '#') continue;
        const auto eq = body.find('=');
        if (eq == std::string_view::npos) throw ParseError(reader.number(), "expected 'key = value'");
        const std::string key(detail::trim(body.substr(0, eq)));
        const std::string value(detail::trim(body.substr(eq + 1)));
        if (key.empty()) throw ParseError(reader.number(), "missing key");
        if (!seen.insert(key).second) throw ParseError(reader.number(), "duplicate key '" + key + "'");
        out.emplace_back(key, value);
    }
    return out;
}

/// Builds the effective config: profile defaults (the override wins over a
/// `profile` key in the file), then every key in order, then validation.
inline RunConfig make_config(const std::vector<std::pair<std::string, std::string>>& kv,
                             const std::string& profile_override = {}) {
    std::string profile = "desk";
    for (const auto& [k, v] : kv) {
        if (k == "profile") profile = v;
    }
    if (!profile_override.empty()) profile = profile_override;
    RunConfig c = profile_defaults(profile);
    auto fields = detail::config_fields(c);
    for (const auto& [k, v] : kv) {
        if (k == "profile") continue;
        bool found = false;
        for (auto& f : fields) {
            if (f.key != k) continue;
            f.set(v);
            found = true;
            break;
        }
        if (!found) throw ConfigError("unknown config key '" + k + "'");
    }
    c.validate();
    return c;
}

inline RunConfig load_config(std::istream& is, const std::string& profile_override = {}) {
    return make_config(parse_config_text(is), profile_override);
}

inline RunConfig load_config_file(const std::string& path, const std::string& profile_override = {}) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    return load_config(is, profile_override);
}

/// Every key with its effective value, profile first.
inline std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& c_in) {
    RunConfig c = c_in;
    std::vector<std::pair<std::string, std::string>> out = {{"profile", c.profile}};
    for (const auto& f : detail::config_fields(c)) out.emplace_back(f.key, f.get());
    return out;
}

inline void write_config(std::ostream& os, const RunConfig& c, const std::string& prefix = {}) {
    for (const auto& [k, v] : config_entries(c)) os << prefix << k << " = " << v << '\n';
}

inline constexpr const char* kEchoPrefix = "# cfg ";

/// Header for every text output: format line, then the config echo. Strip
/// the `# cfg ` prefix from those lines to get a config that reproduces the
/// file.
inline void write_run_header(std::ostream& os, const std::string& command, const RunConfig& c) {
    os << "# vmfuse-run version=" << kRunFormatVersion << " command=" << command << '\n';
    write_config(os, c, kEchoPrefix);
}

/// Recovers the echoed config from an output file's header.
inline RunConfig config_from_header(std::istream& is) {
    std::stringstream cfg;
    std::string line;
    bool any = false;
    while (std::getline(is, line)) {
        if (line.rfind(kEchoPrefix, 0) == 0) {
            cfg << line.substr(std::string(kEchoPrefix).size()) << '\n';
            any = true;
        } else if (any) {
            break;
        }
    }
    if (!any) throw ParseError(0, "no config echo found");
    return load_config(cfg);
}

}  // namespace vmfuse
