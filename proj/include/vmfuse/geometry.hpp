#pragma once

// Rigid-body pose algebra shared by the simulator, the estimators and the
// evaluation code. Rotations use intrinsic Z-Y-X Euler angles:
//   R = Rz(yaw) * Ry(pitch) * Rx(roll),  r = (roll, pitch, yaw).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <istream>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "vmfuse/detail/text_io.hpp"
#include "vmfuse/error.hpp"

namespace vmfuse {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kPi = std::numbers::pi;

/// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
    double w = std::remainder(a, 2.0 * kPi);
    if (w <= -kPi) w += 2.0 * kPi;
    return w;
}

inline Vec3 wrap_angles(const Vec3& r) {
    return {wrap_angle(r.x()), wrap_angle(r.y()), wrap_angle(r.z())};
}

/// 6-DoF pose: translation in meters, Z-Y-X Euler angles in radians.
struct Pose {
    Vec3 t = Vec3::Zero();
    Vec3 r = Vec3::Zero();

    static Pose identity() { return {}; }

    bool operator==(const Pose& o) const { return t == o.t && r == o.r; }
};

struct RigidTransform {
    Mat3 R = Mat3::Identity();
    Vec3 t = Vec3::Zero();

    static RigidTransform identity() { return {}; }

    Vec3 apply(const Vec3& p) const { return R * p + t; }

    RigidTransform inverse() const {
        RigidTransform inv;
        inv.R = R.transpose();
        inv.t = -(inv.R * t);
        return inv;
    }

    Eigen::Matrix4d homogeneous() const {
        Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
        m.topLeftCorner<3, 3>() = R;
        m.topRightCorner<3, 1>() = t;
        return m;
    }
};

/// compose(a, b): apply b first, then a.
inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
    return {a.R * b.R, a.R * b.t + a.t};
}

inline RigidTransform operator*(const RigidTransform& a, const RigidTransform& b) {
    return compose(a, b);
}

inline Mat3 rot_x(double a) {
    const double c = std::cos(a), s = std::sin(a);
    Mat3 m;
    m << 1, 0, 0, 0, c, -s, 0, s, c;
    return m;
}

inline Mat3 rot_y(double a) {
    const double c = std::cos(a), s = std::sin(a);
    Mat3 m;
    m << c, 0, s, 0, 1, 0, -s, 0, c;
    return m;
}

inline Mat3 rot_z(double a) {
    const double c = std::cos(a), s = std::sin(a);
    Mat3 m;
    m << c, -s, 0, s, c, 0, 0, 0, 1;
    return m;
}

inline Mat3 euler_to_matrix(const Vec3& r) {
    const double cr = std::cos(r.x()), sr = std::sin(r.x());
    const double cp = std::cos(r.y()), sp = std::sin(r.y());
    const double cy = std::cos(r.z()), sy = std::sin(r.z());
    Mat3 m;
    m << cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr,
         sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr,
         -sp,     cp * sr,                cp * cr;
    return m;
}

struct EulerAngles {
    Vec3 r = Vec3::Zero();
    /// Pitch within 1e-3 of +-pi/2; roll was forced to zero.
    bool degenerate = false;
};

inline constexpr double kGimbalMargin = 1e-3;

inline EulerAngles matrix_to_euler(const Mat3& R) {
    EulerAngles out;
    const double sp = std::clamp(-R(2, 0), -1.0, 1.0);
    const double cp = std::hypot(R(0, 0), R(1, 0));
    const double pitch = std::atan2(sp, cp);
    if (std::abs(std::abs(pitch) - kPi / 2.0) < kGimbalMargin) {
        out.degenerate = true;
        out.r = Vec3(0.0, pitch, std::atan2(-R(0, 1), R(1, 1)));
    } else {
        out.r = Vec3(std::atan2(R(2, 1), R(2, 2)), pitch, std::atan2(R(1, 0), R(0, 0)));
    }
    out.r = wrap_angles(out.r);
    return out;
}

inline RigidTransform to_transform(const Pose& p) {
    return {euler_to_matrix(p.r), p.t};
}

inline Pose to_pose(const RigidTransform& T, bool* degenerate = nullptr) {
    const EulerAngles e = matrix_to_euler(T.R);
    if (degenerate) *degenerate = e.degenerate;
    return {T.t, e.r};
}

/// Pose of `b` expressed in the frame of `a`, so that compose_pose(a, result) == b.
inline Pose relative_pose(const Pose& a, const Pose& b, bool* degenerate = nullptr) {
    return to_pose(to_transform(a).inverse() * to_transform(b), degenerate);
}

/// Applies the body-frame motion `delta` on top of `base`.
inline Pose compose_pose(const Pose& base, const Pose& delta, bool* degenerate = nullptr) {
    return to_pose(to_transform(base) * to_transform(delta), degenerate);
}

/// Rotation angle of R in [0, pi].
inline double rotation_angle(const Mat3& R) {
    const Vec3 axis(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
    return std::atan2(0.5 * axis.norm(), 0.5 * (R.trace() - 1.0));
}

struct PoseError {
    double trans = 0.0;  // meters
    double rot = 0.0;    // radians, geodesic
};

inline PoseError pose_error(const Pose& est, const Pose& gt) {
    const Mat3 Re = euler_to_matrix(est.r);
    const Mat3 Rg = euler_to_matrix(gt.r);
    return {(est.t - gt.t).norm(), rotation_angle(Rg.transpose() * Re)};
}

/// Rodrigues' formula for the rotation vector w.
inline Mat3 so3_exp(const Vec3& w) {
    const double theta = w.norm();
    if (theta < 1e-12) {
        Mat3 K;
        K << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
        return Mat3::Identity() + K;
    }
    return Eigen::AngleAxisd(theta, w / theta).toRotationMatrix();
}

inline Mat3 skew(const Vec3& v) {
    Mat3 K;
    K << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    return K;
}

struct TimedPose {
    double time = 0.0;
    Pose pose;

    bool operator==(const TimedPose& o) const { return time == o.time && pose == o.pose; }
};

/// Timestamped pose sequence with strictly increasing times.
class Trajectory {
public:
    Trajectory() = default;

    explicit Trajectory(std::vector<TimedPose> samples) : samples_(std::move(samples)) {
        for (std::size_t i = 1; i < samples_.size(); ++i) {
            if (!(samples_[i].time > samples_[i - 1].time)) {
                throw RangeError("trajectory timestamps must be strictly increasing");
            }
        }
    }

    void push_back(double time, const Pose& pose) {
        if (!samples_.empty() && !(time > samples_.back().time)) {
            throw RangeError("trajectory timestamps must be strictly increasing");
        }
        samples_.push_back({time, pose});
    }

    std::size_t size() const noexcept { return samples_.size(); }
    bool empty() const noexcept { return samples_.empty(); }
    const TimedPose& operator[](std::size_t i) const { return samples_[i]; }
    const TimedPose& front() const { return samples_.front(); }
    const TimedPose& back() const { return samples_.back(); }
    auto begin() const { return samples_.begin(); }
    auto end() const { return samples_.end(); }
    const std::vector<TimedPose>& samples() const noexcept { return samples_; }

    double start_time() const { return samples_.front().time; }
    double end_time() const { return samples_.back().time; }

    bool operator==(const Trajectory& o) const { return samples_ == o.samples_; }

private:
    std::vector<TimedPose> samples_;
};

/// Pose interpolation between two knots: linear translation, per-component
/// shortest-arc Euler angles.
inline Pose interpolate_pose(const Pose& a, const Pose& b, double alpha) {
    Pose p;
    p.t = a.t + alpha * (b.t - a.t);
    for (int k = 0; k < 3; ++k) {
        p.r[k] = wrap_angle(a.r[k] + alpha * wrap_angle(b.r[k] - a.r[k]));
    }
    return p;
}

/// Pose at time `t` (throws RangeError outside the trajectory span).
inline Pose pose_at(const Trajectory& traj, double t) {
    if (traj.empty()) throw RangeError("pose_at on empty trajectory");
    if (t < traj.start_time() || t > traj.end_time()) {
        throw RangeError("timestamp " + detail::format_double(t) + " outside trajectory span");
    }
    const auto& s = traj.samples();
    auto it = std::lower_bound(s.begin(), s.end(), t,
                               [](const TimedPose& tp, double v) { return tp.time < v; });
    if (it->time == t) return it->pose;
    const auto& hi = *it;
    const auto& lo = *(it - 1);
    const double alpha = (t - lo.time) / (hi.time - lo.time);
    return interpolate_pose(lo.pose, hi.pose, alpha);
}

inline Trajectory resample_trajectory(const Trajectory& traj, const std::vector<double>& timestamps) {
    Trajectory out;
    for (double t : timestamps) out.push_back(t, pose_at(traj, t));
    return out;
}

// Text format: one `timestamp tx ty tz roll pitch yaw` record per line,
// '#' lines are comments.

inline void write_pose_fields(std::ostream& os, const Pose& p) {
    os << detail::format_double(p.t.x()) << ' ' << detail::format_double(p.t.y()) << ' '
       << detail::format_double(p.t.z()) << ' ' << detail::format_double(p.r.x()) << ' '
       << detail::format_double(p.r.y()) << ' ' << detail::format_double(p.r.z());
}

inline Pose parse_pose_fields(const std::vector<std::string_view>& toks, std::size_t first,
                              std::size_t line) {
    if (toks.size() < first + 6) throw ParseError(line, "expected 6 pose fields");
    Pose p;
    for (int k = 0; k < 3; ++k) p.t[k] = detail::parse_double(toks[first + k], line);
    for (int k = 0; k < 3; ++k) p.r[k] = detail::parse_double(toks[first + 3 + k], line);
    return p;
}

inline void write_trajectory(std::ostream& os, const Trajectory& traj, const std::string& tag = {}) {
    for (const auto& s : traj) {
        os << detail::format_double(s.time) << ' ';
        write_pose_fields(os, s.pose);
        if (!tag.empty()) os << ' ' << tag;
        os << '\n';
    }
}

inline Trajectory read_trajectory(std::istream& is) {
    detail::LineReader reader(is);
    Trajectory traj;
    std::string line;
    while (reader.next(line)) {
        const auto body = detail::trim(line);
        if (body.empty() || body.front() == '#') continue;
        const auto toks = detail::split_ws(body);
        if (toks.size() != 7 && toks.size() != 8) throw ParseError(reader.number(), "expected 7 fields and an optional tag");
        const double t = detail::parse_double(toks[0], reader.number());
        const Pose p = parse_pose_fields(toks, 1, reader.number());
        try {
            traj.push_back(t, p);
        } catch (const RangeError& e) {
            throw ParseError(reader.number(), e.what());
        }
    }
    return traj;
}

}  // namespace vmfuse
