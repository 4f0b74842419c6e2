#pragma once

// Seeded simulator: ground-truth capsule trajectories, 8x8 Hall-array
// readings of the capsule's permanent magnet, and an emulated visual
// odometry stream with noise and distance-proportional drift.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vmfuse/detail/rng.hpp"
#include "vmfuse/detail/text_io.hpp"
#include "vmfuse/error.hpp"
#include "vmfuse/geometry.hpp"

namespace vmfuse {

using KvList = std::vector<std::pair<std::string, std::string>>;

enum class MotionProfile { slow_incremental, comprehensive_scan, fast_complex };

inline std::string to_string(MotionProfile p) {
    switch (p) {
        case MotionProfile::slow_incremental: return "slow_incremental";
        case MotionProfile::comprehensive_scan: return "comprehensive_scan";
        case MotionProfile::fast_complex: return "fast_complex";
    }
    return "?";
}

inline MotionProfile motion_profile_from_string(const std::string& s) {
    if (s == "slow_incremental") return MotionProfile::slow_incremental;
    if (s == "comprehensive_scan") return MotionProfile::comprehensive_scan;
    if (s == "fast_complex") return MotionProfile::fast_complex;
    throw ConfigError("unknown motion profile '" + s + "'");
}

inline constexpr double kMu0Over4Pi = 1e-7;

struct DipoleParams {
    double moment_magnitude = 0.03;     // A m^2
    Vec3 moment_axis = Vec3::UnitX();   // body frame, unit norm

    void validate() const {
        if (!(moment_magnitude >= 0.0)) throw ConfigError("moment_magnitude must be >= 0");
        if (std::abs(moment_axis.norm() - 1.0) > 1e-12) throw ConfigError("moment_axis must be unit norm");
    }
};

/// Known actuator field: uniform part plus a constant gradient.
struct ActuatorFieldModel {
    Vec3 uniform = Vec3::Zero();  // tesla
    Mat3 gradient = Mat3::Zero(); // tesla per meter

    Vec3 field(const Vec3& p) const { return uniform + gradient * p; }

    static ActuatorFieldModel zero() { return {}; }

    /// Symmetric, traceless gradient so the field is curl- and divergence-free.
    static ActuatorFieldModel default_model() {
        ActuatorFieldModel a;
        a.uniform = Vec3(1.5e-4, -0.8e-4, 2.0e-3);
        a.gradient << 4e-3, 1e-3, -2e-3,
                      1e-3, 3e-3, 5e-4,
                      -2e-3, 5e-4, -7e-3;
        return a;
    }
};

struct SimConfig {
    double duration = 60.0;
    std::uint64_t seed = 1;
    MotionProfile motion_profile = MotionProfile::comprehensive_scan;
    double workspace_half_extent = 0.1;  // lateral box half-size, meters
    double depth_center = 0.08;          // capsule depth below the array, meters
    double depth_half_extent = 0.012;
    double gt_rate = 50.0;
    double mag_rate = 50.0;
    double vis_rate = 25.0;
    double mag_noise_sd = 5e-7;
    double vis_trans_noise_sd = 0.01e-3;
    double vis_rot_noise_sd = 0.1e-3;
    double vis_drift_rate = 0.02;       // meters per meter traveled
    double vis_rot_drift_rate = 0.1;    // radians per meter traveled
    Vec3 vis_drift_axis = Vec3(0.8, 0.5, -0.33);
    Vec3 vis_rot_drift_axis = Vec3(0.3, -0.4, 0.87);
    double vis_drift_wobble = 0.3;      // relative amplitude of the slow drift variation
    DipoleParams dipole;
    ActuatorFieldModel actuator = ActuatorFieldModel::default_model();

    int rate_ratio() const { return static_cast<int>(std::lround(mag_rate / vis_rate)); }

    void validate() const {
        if (!(duration > 0.0)) throw ConfigError("duration must be > 0");
        if (!(gt_rate > 0.0 && mag_rate > 0.0 && vis_rate > 0.0)) throw ConfigError("rates must be > 0");
        const double ratio = mag_rate / vis_rate;
        if (ratio < 1.0 || std::abs(ratio - std::round(ratio)) > 1e-9) {
            throw ConfigError("mag_rate must be an integer multiple of vis_rate");
        }
        if (!(depth_center - depth_half_extent >= 0.01)) {
            throw ConfigError("workspace must stay at least 10 mm below the sensor array");
        }
        if (mag_noise_sd < 0 || vis_trans_noise_sd < 0 || vis_rot_noise_sd < 0) {
            throw ConfigError("noise levels must be >= 0");
        }
        dipole.validate();
    }
};

namespace detail {

inline std::string format_vec(const double* v, int n) {
    std::string s;
    for (int i = 0; i < n; ++i) {
        if (i) s += ',';
        s += format_double(v[i]);
    }
    return s;
}

inline std::vector<double> parse_vec(const std::string& s, std::size_t n, const std::string& key) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        const auto comma = s.find(',', pos);
        const auto tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        try {
            out.push_back(parse_double(tok, 0));
        } catch (const ParseError&) {
            throw ConfigError("bad numeric list for '" + key + "': " + s);
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (out.size() != n) throw ConfigError("'" + key + "' needs " + std::to_string(n) + " values");
    return out;
}

inline double parse_config_double(const std::string& key, const std::string& v) {
    try {
        return parse_double(v, 0);
    } catch (const ParseError&) {
        throw ConfigError("bad value for '" + key + "': " + v);
    }
}

inline std::int64_t parse_config_int(const std::string& key, const std::string& v) {
    try {
        return parse_int(v, 0);
    } catch (const ParseError&) {
        throw ConfigError("bad integer for '" + key + "': " + v);
    }
}

}  // namespace detail

/// Key/value echo of a SimConfig (keys without section prefix).
inline KvList to_kv(const SimConfig& c) {
    using detail::format_double;
    Eigen::Matrix<double, 3, 3, Eigen::RowMajor> g = c.actuator.gradient;
    return {
        {"duration", format_double(c.duration)},
        {"seed", std::to_string(c.seed)},
        {"motion_profile", to_string(c.motion_profile)},
        {"workspace_half_extent", format_double(c.workspace_half_extent)},
        {"depth_center", format_double(c.depth_center)},
        {"depth_half_extent", format_double(c.depth_half_extent)},
        {"gt_rate", format_double(c.gt_rate)},
        {"mag_rate", format_double(c.mag_rate)},
        {"vis_rate", format_double(c.vis_rate)},
        {"mag_noise_sd", format_double(c.mag_noise_sd)},
        {"vis_trans_noise_sd", format_double(c.vis_trans_noise_sd)},
        {"vis_rot_noise_sd", format_double(c.vis_rot_noise_sd)},
        {"vis_drift_rate", format_double(c.vis_drift_rate)},
        {"vis_rot_drift_rate", format_double(c.vis_rot_drift_rate)},
        {"vis_drift_axis", detail::format_vec(c.vis_drift_axis.data(), 3)},
        {"vis_rot_drift_axis", detail::format_vec(c.vis_rot_drift_axis.data(), 3)},
        {"vis_drift_wobble", format_double(c.vis_drift_wobble)},
        {"moment_magnitude", format_double(c.dipole.moment_magnitude)},
        {"moment_axis", detail::format_vec(c.dipole.moment_axis.data(), 3)},
        {"actuator_uniform", detail::format_vec(c.actuator.uniform.data(), 3)},
        {"actuator_gradient", detail::format_vec(g.data(), 9)},
    };
}

/// Applies one key; returns false when the key is not a SimConfig key.
inline bool apply_kv(SimConfig& c, const std::string& key, const std::string& v) {
    using detail::parse_config_double;
    auto vec3 = [&](Vec3& dst) {
        const auto xs = detail::parse_vec(v, 3, key);
        dst = Vec3(xs[0], xs[1], xs[2]);
    };
    if (key == "duration") c.duration = parse_config_double(key, v);
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(detail::parse_config_int(key, v));
    else if (key == "motion_profile") c.motion_profile = motion_profile_from_string(v);
    else if (key == "workspace_half_extent") c.workspace_half_extent = parse_config_double(key, v);
    else if (key == "depth_center") c.depth_center = parse_config_double(key, v);
    else if (key == "depth_half_extent") c.depth_half_extent = parse_config_double(key, v);
    else if (key == "gt_rate") c.gt_rate = parse_config_double(key, v);
    else if (key == "mag_rate") c.mag_rate = parse_config_double(key, v);
    else if (key == "vis_rate") c.vis_rate = parse_config_double(key, v);
    else if (key == "mag_noise_sd") c.mag_noise_sd = parse_config_double(key, v);
    else if (key == "vis_trans_noise_sd") c.vis_trans_noise_sd = parse_config_double(key, v);
    else if (key == "vis_rot_noise_sd") c.vis_rot_noise_sd = parse_config_double(key, v);
    else if (key == "vis_drift_rate") c.vis_drift_rate = parse_config_double(key, v);
    else if (key == "vis_rot_drift_rate") c.vis_rot_drift_rate = parse_config_double(key, v);
    else if (key == "vis_drift_axis") vec3(c.vis_drift_axis);
    else if (key == "vis_rot_drift_axis") vec3(c.vis_rot_drift_axis);
    else if (key == "vis_drift_wobble") c.vis_drift_wobble = parse_config_double(key, v);
    else if (key == "moment_magnitude") c.dipole.moment_magnitude = parse_config_double(key, v);
    else if (key == "moment_axis") vec3(c.dipole.moment_axis);
    else if (key == "actuator_uniform") vec3(c.actuator.uniform);
    else if (key == "actuator_gradient") {
        const auto xs = detail::parse_vec(v, 9, key);
        for (int r = 0; r < 3; ++r)
            for (int k = 0; k < 3; ++k) c.actuator.gradient(r, k) = xs[r * 3 + k];
    } else {
        return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Sensor array geometry: 8x8 cells, 2 cm pitch, z = 0 plane, centered on the
// origin, each cell measuring B_z. Row index runs along y, column along x.

inline constexpr int kHallGrid = 8;
inline constexpr int kHallCells = kHallGrid * kHallGrid;
inline constexpr double kHallPitch = 0.02;

inline Vec3 hall_sensor_position(int row, int col) {
    const double half = 0.5 * (kHallGrid - 1);
    return {(col - half) * kHallPitch, (row - half) * kHallPitch, 0.0};
}

using HallGrid = std::array<double, kHallCells>;

struct HallArrayReading {
    double timestamp = 0.0;
    HallGrid values{};  // tesla, row-major

    double& at(int row, int col) { return values[row * kHallGrid + col]; }
    double at(int row, int col) const { return values[row * kHallGrid + col]; }

    static std::array<Vec3, kHallCells> sensor_positions() {
        std::array<Vec3, kHallCells> p;
        for (int r = 0; r < kHallGrid; ++r)
            for (int c = 0; c < kHallGrid; ++c) p[r * kHallGrid + c] = hall_sensor_position(r, c);
        return p;
    }

    bool operator==(const HallArrayReading& o) const {
        return timestamp == o.timestamp && values == o.values;
    }
};

/// Frame-to-frame motion reported by visual odometry, expressed in the
/// previous camera frame.
struct VisMeasurement {
    double timestamp = 0.0;
    Pose delta;

    bool operator==(const VisMeasurement& o) const {
        return timestamp == o.timestamp && delta == o.delta;
    }
};

inline constexpr double kDipoleExclusionRadius = 1e-3;

/// Point-dipole field at `query` of a moment vector located at `source`.
inline Vec3 dipole_field_world(const Vec3& source, const Vec3& moment, const Vec3& query) {
    const Vec3 r = query - source;
    const double d = r.norm();
    if (d <= kDipoleExclusionRadius) {
        throw SingularityError("dipole field queried inside the 1 mm exclusion radius");
    }
    const Vec3 rhat = r / d;
    return kMu0Over4Pi * (3.0 * moment.dot(rhat) * rhat - moment) / (d * d * d);
}

inline Vec3 dipole_moment(const Pose& capsule_pose, const DipoleParams& dipole) {
    return dipole.moment_magnitude * (euler_to_matrix(capsule_pose.r) * dipole.moment_axis);
}

inline Vec3 dipole_field(const Pose& capsule_pose, const DipoleParams& dipole, const Vec3& query_point) {
    return dipole_field_world(capsule_pose.t, dipole_moment(capsule_pose, dipole), query_point);
}

inline HallArrayReading sample_hall_array(const Pose& capsule_pose, const DipoleParams& dipole,
                                          const ActuatorFieldModel& actuator, double t,
                                          double noise_sd, Rng& rng) {
    if (capsule_pose.t.z() > -0.01) {
        throw RangeError("capsule must be at least 10 mm below the sensor array");
    }
    HallArrayReading reading;
    reading.timestamp = t;
    const Vec3 m = dipole_moment(capsule_pose, dipole);
    for (int r = 0; r < kHallGrid; ++r) {
        for (int c = 0; c < kHallGrid; ++c) {
            const Vec3 s = hall_sensor_position(r, c);
            const Vec3 b = dipole_field_world(capsule_pose.t, m, s) + actuator.field(s);
            reading.at(r, c) = b.z() + gaussian(rng, noise_sd);
        }
    }
    return reading;
}

// ---------------------------------------------------------------------------
// Trajectory synthesis: every DoF is a seeded sum of three low-frequency
// sinusoids. Frequencies are scaled so that the analytic speed bound stays
// under the profile's cap.

struct ProfileLimits {
    double freq_lo, freq_hi;      // Hz, before speed scaling
    double lateral_fraction;      // of workspace_half_extent
    double max_speed;             // m/s
    double rot_amplitude;         // rad, per Euler component
    double max_rot_rate;          // rad/s
};

inline ProfileLimits profile_limits(MotionProfile p) {
    switch (p) {
        case MotionProfile::slow_incremental: return {0.01, 0.04, 0.5, 0.005, 0.15, 0.02};
        case MotionProfile::comprehensive_scan: return {0.02, 0.08, 0.6, 0.02, 0.3, 0.08};
        case MotionProfile::fast_complex: return {0.05, 0.2, 0.6, 0.04, 0.5, 0.25};
    }
    return {};
}

/// Closed-form trajectory; `generate_trajectory` samples it.
class SinusoidTrajectory {
public:
    static constexpr int kTerms = 3;

    explicit SinusoidTrajectory(const SimConfig& cfg) {
        cfg.validate();
        const ProfileLimits lim = profile_limits(cfg.motion_profile);
        Rng rng(derive_seed(cfg.seed, 1));
        center_ = Vec3(0.0, 0.0, -cfg.depth_center);
        const double lateral = lim.lateral_fraction * cfg.workspace_half_extent;
        const std::array<double, 6> extent = {lateral, lateral, cfg.depth_half_extent,
                                              lim.rot_amplitude, std::min(lim.rot_amplitude, 1.2),
                                              lim.rot_amplitude};
        for (int d = 0; d < 6; ++d) {
            std::array<double, kTerms> w{};
            double wsum = 0.0;
            for (auto& x : w) {
                x = uniform(rng, 0.3, 1.0);
                wsum += x;
            }
            for (int k = 0; k < kTerms; ++k) {
                amp_[d][k] = extent[d] * w[k] / wsum;
                freq_[d][k] = uniform(rng, lim.freq_lo, lim.freq_hi);
                phase_[d][k] = uniform(rng, 0.0, 2.0 * kPi);
            }
        }
        // Scale translation and rotation frequencies to honor the rate caps.
        double sq = 0.0;
        for (int d = 0; d < 3; ++d) {
            double s = 0.0;
            for (int k = 0; k < kTerms; ++k) s += 2.0 * kPi * freq_[d][k] * amp_[d][k];
            sq += s * s;
        }
        const double speed_bound = std::sqrt(sq);
        if (speed_bound > lim.max_speed) {
            const double f = lim.max_speed / speed_bound;
            for (int d = 0; d < 3; ++d)
                for (int k = 0; k < kTerms; ++k) freq_[d][k] *= f;
        }
        for (int d = 3; d < 6; ++d) {
            double s = 0.0;
            for (int k = 0; k < kTerms; ++k) s += 2.0 * kPi * freq_[d][k] * amp_[d][k];
            if (s > lim.max_rot_rate) {
                for (int k = 0; k < kTerms; ++k) freq_[d][k] *= lim.max_rot_rate / s;
            }
        }
    }

    Pose evaluate(double t) const {
        std::array<double, 6> v{};
        for (int d = 0; d < 6; ++d) {
            for (int k = 0; k < kTerms; ++k) {
                v[d] += amp_[d][k] * std::sin(2.0 * kPi * freq_[d][k] * t + phase_[d][k]);
            }
        }
        Pose p;
        p.t = center_ + Vec3(v[0], v[1], v[2]);
        p.r = Vec3(v[3], v[4], v[5]);
        return p;
    }

    Vec3 velocity(double t) const {
        Vec3 v = Vec3::Zero();
        for (int d = 0; d < 3; ++d) {
            for (int k = 0; k < kTerms; ++k) {
                const double w = 2.0 * kPi * freq_[d][k];
                v[d] += amp_[d][k] * w * std::cos(w * t + phase_[d][k]);
            }
        }
        return v;
    }

private:
    Vec3 center_;
    std::array<std::array<double, kTerms>, 6> amp_{}, freq_{}, phase_{};
};

inline std::size_t sample_count(double duration, double rate) {
    return static_cast<std::size_t>(std::llround(std::floor(duration * rate + 1e-9)));
}

inline Trajectory generate_trajectory(const SimConfig& cfg) {
    const SinusoidTrajectory model(cfg);
    const std::size_t n = sample_count(cfg.duration, cfg.gt_rate);
    std::vector<TimedPose> samples;
    samples.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double t = static_cast<double>(k) / cfg.gt_rate;
        samples.push_back({t, model.evaluate(t)});
    }
    return Trajectory(std::move(samples));
}

/// Stream timestamps k / rate that fall inside [start, end].
inline std::vector<double> stream_times(double rate, double start, double end) {
    std::vector<double> out;
    for (std::int64_t k = static_cast<std::int64_t>(std::ceil(start * rate - 1e-9));; ++k) {
        const double t = static_cast<double>(k) / rate;
        if (t > end + 1e-12) break;
        if (t >= start - 1e-12) out.push_back(std::clamp(t, start, end));
    }
    return out;
}

inline std::vector<HallArrayReading> simulate_mag_stream(const Trajectory& gt, const SimConfig& cfg,
                                                         Rng& rng) {
    std::vector<HallArrayReading> out;
    for (double t : stream_times(cfg.mag_rate, gt.start_time(), gt.end_time())) {
        out.push_back(sample_hall_array(pose_at(gt, t), cfg.dipole, cfg.actuator, t, cfg.mag_noise_sd, rng));
    }
    return out;
}

/// Statistical stand-in for visual odometry. The first measurement carries a
/// zero delta (no previous frame); later ones carry the true relative pose
/// plus a drift bias proportional to the distance moved and white noise.
inline std::vector<VisMeasurement> emulate_evo_stream(const Trajectory& gt, const SimConfig& cfg, Rng& rng) {
    const auto times = stream_times(cfg.vis_rate, gt.start_time(), gt.end_time());
    std::vector<VisMeasurement> out;
    out.reserve(times.size());
    if (times.empty()) return out;

    // Slow wobble of the drift direction; drawn up front so the stream is a
    // pure function of the rng state.
    std::array<double, 6> wob_freq{}, wob_phase{};
    for (int k = 0; k < 6; ++k) {
        wob_freq[k] = uniform(rng, 0.005, 0.03);
        wob_phase[k] = uniform(rng, 0.0, 2.0 * kPi);
    }
    auto drift_dir = [&](const Vec3& axis, int offset, double t) {
        Vec3 w;
        for (int k = 0; k < 3; ++k) {
            w[k] = std::sin(2.0 * kPi * wob_freq[offset + k] * t + wob_phase[offset + k]);
        }
        const Vec3 base = axis.norm() > 0 ? Vec3(axis.normalized()) : Vec3(Vec3::Zero());
        const Vec3 d = base + cfg.vis_drift_wobble * w;
        return d.norm() > 0 ? Vec3(d.normalized()) : Vec3(Vec3::Zero());
    };

    out.push_back({times[0], Pose::identity()});
    Pose prev = pose_at(gt, times[0]);
    for (std::size_t k = 1; k < times.size(); ++k) {
        const double t = times[k];
        const Pose cur = pose_at(gt, t);
        Pose delta = relative_pose(prev, cur);
        const double dist = delta.t.norm();
        delta.t += cfg.vis_drift_rate * dist * drift_dir(cfg.vis_drift_axis, 0, t);
        delta.r += cfg.vis_rot_drift_rate * dist * drift_dir(cfg.vis_rot_drift_axis, 3, t);
        for (int i = 0; i < 3; ++i) delta.t[i] += gaussian(rng, cfg.vis_trans_noise_sd);
        for (int i = 0; i < 3; ++i) delta.r[i] += gaussian(rng, cfg.vis_rot_noise_sd);
        delta.r = wrap_angles(delta.r);
        out.push_back({t, delta});
        prev = cur;
    }
    return out;
}

/// Integrates body-frame deltas starting from `initial` at the first
/// measurement's timestamp (the first delta itself is not applied).
inline Trajectory integrate_deltas(const std::vector<VisMeasurement>& vis, const Pose& initial) {
    Trajectory traj;
    if (vis.empty()) return traj;
    Pose cur = initial;
    traj.push_back(vis[0].timestamp, cur);
    for (std::size_t k = 1; k < vis.size(); ++k) {
        cur = compose_pose(cur, vis[k].delta);
        traj.push_back(vis[k].timestamp, cur);
    }
    return traj;
}

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
    SimConfig config;
    Trajectory gt;
    std::vector<HallArrayReading> mag;
    std::vector<VisMeasurement> vis;
};

inline Dataset simulate_dataset(const SimConfig& cfg) {
    cfg.validate();
    Dataset ds;
    ds.config = cfg;
    ds.gt = generate_trajectory(cfg);
    Rng mag_rng(derive_seed(cfg.seed, 2));
    Rng vis_rng(derive_seed(cfg.seed, 3));
    ds.mag = simulate_mag_stream(ds.gt, cfg, mag_rng);
    ds.vis = emulate_evo_stream(ds.gt, cfg, vis_rng);
    return ds;
}

inline constexpr int kDatasetFormatVersion = 1;

inline void write_dataset(std::ostream& os, const Dataset& ds) {
    os << "# vmfuse-dataset version=" << kDatasetFormatVersion;
    for (const auto& [k, v] : to_kv(ds.config)) os << " sim." << k << '=' << v;
    os << '\n';
    for (const auto& s : ds.gt) {
        os << "GT " << detail::format_double(s.time) << ' ';
        write_pose_fields(os, s.pose);
        os << '\n';
    }
    for (const auto& m : ds.mag) {
        os << "MAG " << detail::format_double(m.timestamp);
        for (double v : m.values) os << ' ' << detail::format_double(v);
        os << '\n';
    }
    for (const auto& v : ds.vis) {
        os << "VIS " << detail::format_double(v.timestamp) << ' ';
        write_pose_fields(os, v.delta);
        os << '\n';
    }
}

inline Dataset read_dataset(std::istream& is) {
    detail::LineReader reader(is);
    std::string line;
    Dataset ds;
    bool header = false;
    std::vector<TimedPose> gt;
    while (reader.next(line)) {
        const auto body = detail::trim(line);
        if (body.empty()) continue;
        const auto toks = detail::split_ws(body);
        const std::size_t ln = reader.number();
        if (toks[0] == "#") {
            if (toks.size() >= 2 && toks[1] == "vmfuse-dataset") {
                const auto kv = detail::parse_kv_tokens(toks, 2, ln);
                auto ver = kv.find("version");
                if (ver == kv.end() || ver->second != std::to_string(kDatasetFormatVersion)) {
                    throw VersionError("unsupported dataset version");
                }
                for (const auto& [k, v] : kv) {
                    if (k == "version") continue;
                    if (k.rfind("sim.", 0) != 0) throw ParseError(ln, "unknown header key '" + k + "'");
                    try {
                        if (!apply_kv(ds.config, k.substr(4), v)) {
                            throw ParseError(ln, "unknown header key '" + k + "'");
                        }
                    } catch (const ConfigError& e) {
                        throw ParseError(ln, e.what());
                    }
                }
                header = true;
            }
            continue;
        }
        if (!header) throw ParseError(ln, "missing dataset header");
        if (toks[0] == "GT") {
            if (toks.size() != 8) throw ParseError(ln, "GT record needs 7 fields");
            gt.push_back({detail::parse_double(toks[1], ln), parse_pose_fields(toks, 2, ln)});
        } else if (toks[0] == "MAG") {
            if (toks.size() != 2 + kHallCells) throw ParseError(ln, "MAG record needs 65 fields");
            HallArrayReading r;
            r.timestamp = detail::parse_double(toks[1], ln);
            for (int i = 0; i < kHallCells; ++i) r.values[i] = detail::parse_double(toks[2 + i], ln);
            ds.mag.push_back(r);
        } else if (toks[0] == "VIS") {
            if (toks.size() != 8) throw ParseError(ln, "VIS record needs 7 fields");
            ds.vis.push_back({detail::parse_double(toks[1], ln), parse_pose_fields(toks, 2, ln)});
        } else {
            throw ParseError(ln, "unknown record kind '" + std::string(toks[0]) + "'");
        }
    }
    if (!header) throw ParseError(reader.number(), "missing dataset header");
    try {
        ds.gt = Trajectory(std::move(gt));
    } catch (const RangeError& e) {
        throw ParseError(reader.number(), e.what());
    }
    return ds;
}

inline void write_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream os(path);
    if (!os) throw Error("cannot open '" + path + "' for writing");
    write_dataset(os, ds);
    if (!os) throw Error("write to '" + path + "' failed");
}

inline Dataset read_dataset(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open '" + path + "'");
    return read_dataset(is);
}

}  // namespace vmfuse
