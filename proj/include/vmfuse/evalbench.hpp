#pragma once

// Segment-length error statistics and the two single-modality baselines.
//
// For every start sample and every bucket length L, the segment runs to the
// first sample at which the ground-truth path length reaches L. Translation
// error compares the world-frame displacement over the segment; rotation
// error is the angle of the discrepancy between the relative rotations.
// Neither depends on a global rigid transform of the estimate, and the
// estimate's own absolute orientation does not leak into the translation
// term.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "vmfuse/detail/text_io.hpp"
#include "vmfuse/error.hpp"
#include "vmfuse/fusenet.hpp"
#include "vmfuse/geometry.hpp"
#include "vmfuse/magloc.hpp"
#include "vmfuse/simkit.hpp"

namespace vmfuse {

inline const std::vector<double>& default_bucket_lengths() {
    static const std::vector<double> b = {0.05, 0.1, 0.2, 0.4, 0.8};
    return b;
}

struct BucketError {
    double length = 0.0;
    std::size_t count = 0;
    double trans_sq = 0.0;  // sum of squared translation errors
    double rot_sq = 0.0;

    double trans_rmse() const {
        return count ? std::sqrt(trans_sq / static_cast<double>(count)) : std::numeric_limits<double>::quiet_NaN();
    }
    double rot_rmse() const {
        return count ? std::sqrt(rot_sq / static_cast<double>(count)) : std::numeric_limits<double>::quiet_NaN();
    }
};

/// Accumulates squared errors so that results from several trajectories pool.
struct SegmentErrors {
    std::vector<BucketError> buckets;

    void merge(const SegmentErrors& o) {
        if (buckets.empty()) {
            buckets = o.buckets;
            return;
        }
        check_dims(buckets.size() == o.buckets.size(), "bucket sets differ");
        for (std::size_t i = 0; i < buckets.size(); ++i) {
            if (buckets[i].length != o.buckets[i].length) throw DimensionError("bucket lengths differ");
            buckets[i].count += o.buckets[i].count;
            buckets[i].trans_sq += o.buckets[i].trans_sq;
            buckets[i].rot_sq += o.buckets[i].rot_sq;
        }
    }
};

/// Segment errors of `est` against `gt`, sampled at the estimate's timestamps
/// (which must lie inside the ground-truth span).
inline SegmentErrors rmse_by_length(const Trajectory& est, const Trajectory& gt,
                                    const std::vector<double>& lengths = default_bucket_lengths()) {
    SegmentErrors out;
    for (double L : lengths) {
        if (!(L > 0.0)) throw RangeError("bucket lengths must be positive");
        out.buckets.push_back({L, 0, 0.0, 0.0});
    }
    const std::size_t n = est.size();
    if (n < 2) return out;
    std::vector<RigidTransform> E(n), G(n);
    std::vector<double> path(n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        E[k] = to_transform(est[k].pose);
        G[k] = to_transform(pose_at(gt, est[k].time));
        if (k) path[k] = path[k - 1] + (G[k].t - G[k - 1].t).norm();
    }
    for (auto& b : out.buckets) {
        std::size_t j = 0;
        for (std::size_t i = 0; i < n; ++i) {
            j = std::max(j, i + 1);
            while (j < n && path[j] - path[i] < b.length) ++j;
            if (j >= n) break;
            const Vec3 de = E[j].t - E[i].t;
            const Vec3 dg = G[j].t - G[i].t;
            const Mat3 dRe = E[i].R.transpose() * E[j].R;
            const Mat3 dRg = G[i].R.transpose() * G[j].R;
            const double et = (de - dg).norm();
            const double er = rotation_angle(dRg.transpose() * dRe);
            b.count += 1;
            b.trans_sq += et * et;
            b.rot_sq += er * er;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Baselines

inline Trajectory evo_only_baseline(const std::vector<VisMeasurement>& vis, const Pose& initial) {
    return integrate_deltas(vis, initial);
}

/// Roll is not observable from a dipole; the baseline fills it in.
enum class RollRule { zero, hold_initial, ground_truth };

inline RollRule roll_rule_from_string(const std::string& s) {
    if (s == "zero") return RollRule::zero;
    if (s == "hold") return RollRule::hold_initial;
    if (s == "gt") return RollRule::ground_truth;
    throw ConfigError("unknown roll rule '" + s + "' (expected zero, hold or gt)");
}

/// Dipole axis is body x: yaw = atan2(hy, hx), pitch = atan2(-hz, |hxy|).
inline Pose pose_from_heading(const Vec3& position, const Vec3& heading, double roll) {
    const Vec3 h = heading.normalized();
    return {position, Vec3(roll, std::atan2(-h.z(), std::hypot(h.x(), h.y())), std::atan2(h.y(), h.x()))};
}

inline Trajectory magnetic_only_baseline(const std::vector<MagMeasurement5DoF>& mag, RollRule rule,
                                         const Trajectory* gt = nullptr, double initial_roll = 0.0) {
    if (rule == RollRule::ground_truth && !gt) throw ConfigError("ground-truth roll needs a reference trajectory");
    Trajectory traj;
    for (const auto& m : mag) {
        double roll = 0.0;
        if (rule == RollRule::hold_initial) roll = initial_roll;
        if (rule == RollRule::ground_truth) roll = pose_at(*gt, m.timestamp).r.x();
        traj.push_back(m.timestamp, pose_from_heading(m.position, m.heading, roll));
    }
    return traj;
}

// ---------------------------------------------------------------------------
// Method comparison

struct MethodErrors {
    std::string method;
    SegmentErrors errors;
};

/// Evaluates each trajectory on the shared `times` (all must be covered).
inline std::vector<MethodErrors> compare_methods(const std::vector<std::pair<std::string, Trajectory>>& methods,
                                                 const Trajectory& gt, const std::vector<double>& times,
                                                 const std::vector<double>& lengths = default_bucket_lengths()) {
    std::vector<MethodErrors> out;
    for (const auto& [name, traj] : methods) {
        out.push_back({name, rmse_by_length(resample_trajectory(traj, times), gt, lengths)});
    }
    return out;
}

/// Pools per-trajectory results method by method.
inline std::vector<MethodErrors> aggregate(const std::vector<std::vector<MethodErrors>>& runs) {
    std::vector<MethodErrors> out;
    std::map<std::string, std::size_t> index;
    for (const auto& run : runs) {
        for (const auto& m : run) {
            auto it = index.find(m.method);
            if (it == index.end()) {
                index[m.method] = out.size();
                out.push_back(m);
            } else {
                out[it->second].errors.merge(m.errors);
            }
        }
    }
    return out;
}

/// Report lines `bucket_length method trans_rmse rot_rmse n`.
inline void write_bucket_table(std::ostream& os, const std::vector<MethodErrors>& results) {
    os << "# bucket_length method trans_rmse rot_rmse n\n";
    for (const auto& m : results) {
        for (const auto& b : m.errors.buckets) {
            os << detail::format_double(b.length) << ' ' << m.method << ' ' << detail::format_double(b.trans_rmse())
               << ' ' << detail::format_double(b.rot_rmse()) << ' ' << b.count << '\n';
        }
    }
}

/// Trajectory overlay: the trajectory text format with a trailing method tag.
inline void write_overlay(std::ostream& os, const std::vector<std::pair<std::string, Trajectory>>& methods,
                          const Trajectory& gt) {
    write_trajectory(os, gt, "ground_truth");
    for (const auto& [name, traj] : methods) write_trajectory(os, traj, name);
}

struct DatasetEvaluation {
    std::vector<MethodErrors> errors;
    std::vector<std::pair<std::string, Trajectory>> trajectories;
};

struct Comparison {
    std::vector<MethodErrors> pooled;
    std::vector<DatasetEvaluation> per_dataset;
};

inline const char* const kFusionMethod = "fusion";
inline const char* const kEvoMethod = "evo_only";
inline const char* const kMagneticMethod = "magnetic_only";

/// Runs fusion, EVO-only and magnetic-only on each held-out dataset and
/// pools segment errors across datasets. All methods are scored on the
/// fused timestamps; each trajectory starts from the true pose.
inline Comparison compare_methods(const std::vector<Dataset>& datasets, const Checkpoint& ck,
                                  const InversionSettings& inv,
                                  const std::vector<double>& lengths = default_bucket_lengths(),
                                  RollRule roll = RollRule::hold_initial) {
    if (datasets.empty()) throw DegenerateInputError("no datasets to evaluate");
    Comparison out;
    std::vector<std::vector<MethodErrors>> runs;
    for (const auto& ds : datasets) {
        const auto mag = estimates_of(localize_stream(ds.mag, ds.config.actuator, ds.config.dipole, inv));
        if (ds.vis.empty()) throw DegenerateInputError("dataset has no visual stream");
        const Pose start = pose_at(ds.gt, ds.vis.front().timestamp);
        DatasetEvaluation ev;
        const auto fused = predict_trajectory(ck, mag, ds.vis, start);
        std::vector<double> times;
        for (const auto& s : fused) times.push_back(s.time);
        ev.trajectories = {{kFusionMethod, fused},
                           {kEvoMethod, evo_only_baseline(ds.vis, start)},
                           {kMagneticMethod, magnetic_only_baseline(mag, roll, &ds.gt, start.r.x())}};
        ev.errors = compare_methods(ev.trajectories, ds.gt, times, lengths);
        runs.push_back(ev.errors);
        out.per_dataset.push_back(std::move(ev));
    }
    out.pooled = aggregate(runs);
    return out;
}

}  // namespace vmfuse
