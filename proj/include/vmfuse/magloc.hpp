#pragma once

// 5-DoF magnetic localization from Hall-array readings: remove the known
// actuator field, then fit a point-dipole model (position + moment
// direction) with Levenberg-Marquardt. The moment's roll about its own axis
// does not change the field, so it is not estimated.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <vector>

#include "vmfuse/detail/text_io.hpp"
#include "vmfuse/error.hpp"
#include "vmfuse/geometry.hpp"
#include "vmfuse/simkit.hpp"

namespace vmfuse {

struct MagMeasurement5DoF {
    double timestamp = 0.0;
    Vec3 position = Vec3::Zero();
    Vec3 heading = Vec3::UnitX();  // world-frame dipole axis, unit norm

    bool operator==(const MagMeasurement5DoF& o) const {
        return timestamp == o.timestamp && position == o.position && heading == o.heading;
    }
};

struct InversionSettings {
    int max_iterations = 50;
    double convergence_tol = 1e-9;   // relative step norm
    double initial_damping = 1e-3;
    int restart_count = 2;
    // Frame-0 grid search box.
    double search_half_extent = 0.06;
    double search_depth_min = 0.03;
    double search_depth_max = 0.12;
    double outlier_factor = 5.0;
};

/// Polar/azimuth chart of a unit vector: (sin t cos p, sin t sin p, cos t).
inline Eigen::Vector2d heading_to_angles(const Vec3& h) {
    const Vec3 u = h.normalized();
    return {std::acos(std::clamp(u.z(), -1.0, 1.0)), std::atan2(u.y(), u.x())};
}

inline Vec3 angles_to_heading(double theta, double phi) {
    return {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
}

inline HallArrayReading subtract_actuator_field(const HallArrayReading& reading,
                                                const ActuatorFieldModel& actuator) {
    HallArrayReading out = reading;
    for (int r = 0; r < kHallGrid; ++r)
        for (int c = 0; c < kHallGrid; ++c)
            out.at(r, c) -= actuator.field(hall_sensor_position(r, c)).z();
    return out;
}

/// Discrete Laplacian over the array: 4-neighbour stencil in the interior,
/// one-sided second differences on edges. Divided by pitch^2.
inline HallGrid directional_second_difference(const HallGrid& g, double pitch = kHallPitch) {
    auto at = [&](int r, int c) { return g[r * kHallGrid + c]; };
    auto second = [](double a, double b, double c) { return a - 2.0 * b + c; };
    HallGrid out{};
    const int n = kHallGrid;
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            const int rc = std::clamp(r, 1, n - 2);
            const int cc = std::clamp(c, 1, n - 2);
            const double drr = second(at(rc - 1, c), at(rc, c), at(rc + 1, c));
            const double dcc = second(at(r, cc - 1), at(r, cc), at(r, cc + 1));
            out[r * n + c] = (drr + dcc) / (pitch * pitch);
        }
    }
    return out;
}

inline HallGrid directional_second_difference(const HallArrayReading& reading, double pitch = kHallPitch) {
    return directional_second_difference(reading.values, pitch);
}

namespace detail {

using MagParams = Eigen::Matrix<double, 5, 1>;
using MagResidual = Eigen::Matrix<double, kHallCells, 1>;
using MagJacobian = Eigen::Matrix<double, kHallCells, 5>;

/// Predicted B_z at every cell and its Jacobian w.r.t. (x, y, z, theta, phi).
inline void dipole_model(const MagParams& p, double magnitude, MagResidual& bz, MagJacobian* J) {
    const Vec3 pos = p.head<3>();
    const double st = std::sin(p[3]), ct = std::cos(p[3]);
    const double sp = std::sin(p[4]), cp = std::cos(p[4]);
    const Vec3 h(st * cp, st * sp, ct);
    const Vec3 dh_dtheta(ct * cp, ct * sp, -st);
    const Vec3 dh_dphi(-st * sp, st * cp, 0.0);
    const Vec3 m = magnitude * h;
    for (int i = 0; i < kHallCells; ++i) {
        const Vec3 s = hall_sensor_position(i / kHallGrid, i % kHallGrid);
        const Vec3 r = s - pos;
        const double d2 = r.squaredNorm();
        const double d = std::sqrt(d2);
        if (d <= kDipoleExclusionRadius) {
            throw SingularityError("dipole model evaluated inside the exclusion radius");
        }
        const double inv3 = 1.0 / (d2 * d);
        const double inv5 = inv3 / d2;
        const double inv7 = inv5 / d2;
        const double a = m.dot(r);
        bz[i] = kMu0Over4Pi * (3.0 * a * r.z() * inv5 - m.z() * inv3);
        if (J) {
            // dBz/dr, then chain through r = s - pos.
            const Vec3 dBdr = kMu0Over4Pi * (3.0 * (m * r.z() + a * Vec3::UnitZ()) * inv5
                                             - 15.0 * a * r.z() * inv7 * r
                                             + 3.0 * m.z() * inv5 * r);
            // dBz/dm is linear in m.
            const Vec3 dBdm = kMu0Over4Pi * (3.0 * r.z() * inv5 * r - inv3 * Vec3::UnitZ());
            J->block<1, 3>(i, 0) = -dBdr.transpose();
            (*J)(i, 3) = magnitude * dBdm.dot(dh_dtheta);
            (*J)(i, 4) = magnitude * dBdm.dot(dh_dphi);
        }
    }
}

inline MagResidual to_vector(const HallGrid& g) {
    MagResidual v;
    for (int i = 0; i < kHallCells; ++i) v[i] = g[i];
    return v;
}

inline MagParams to_params(const MagMeasurement5DoF& m) {
    MagParams p;
    p.head<3>() = m.position;
    p.tail<2>() = heading_to_angles(m.heading);
    return p;
}

}  // namespace detail

/// Sum of squared residuals of the dipole model at `m` against an
/// actuator-free reading.
inline double mag_fit_cost(const HallGrid& dipole_cells, const DipoleParams& dipole,
                           const MagMeasurement5DoF& m) {
    detail::MagResidual bz;
    detail::dipole_model(detail::to_params(m), dipole.moment_magnitude, bz, nullptr);
    return (bz - detail::to_vector(dipole_cells)).squaredNorm();
}

struct MagFit {
    MagMeasurement5DoF estimate;
    double residual_norm = 0.0;   // sqrt of sum of squared cell residuals, tesla
    double initial_residual_norm = 0.0;
    int iterations = 0;
    bool converged = false;
    HallGrid residual{};          // model minus measurement per cell
};

class MagDivergenceError : public Error {
public:
    MagDivergenceError(const std::string& what, MagFit best) : Error(what), best_(std::move(best)) {}
    const MagFit& best() const noexcept { return best_; }

private:
    MagFit best_;
};

namespace detail {

inline MagFit lm_fit(const MagResidual& target, double magnitude, const MagParams& init,
                     const InversionSettings& s) {
    MagParams p = init;
    MagResidual bz;
    MagJacobian J;
    dipole_model(p, magnitude, bz, &J);
    MagResidual res = bz - target;
    double cost = res.squaredNorm();
    MagFit fit;
    fit.initial_residual_norm = std::sqrt(cost);
    double lambda = s.initial_damping;
    int it = 0;
    bool converged = false;
    for (; it < s.max_iterations && !converged; ++it) {
        const Eigen::Matrix<double, 5, 5> H = J.transpose() * J;
        const MagParams g = J.transpose() * res;
        if (g.squaredNorm() == 0.0) {
            converged = true;
            break;
        }
        bool accepted = false;
        for (int tries = 0; tries < 30 && !accepted; ++tries) {
            Eigen::Matrix<double, 5, 5> A = H;
            for (int k = 0; k < 5; ++k) A(k, k) += lambda * std::max(H(k, k), 1e-30);
            const MagParams step = A.ldlt().solve(-g);
            if (!step.allFinite()) {
                lambda *= 10.0;
                continue;
            }
            const MagParams cand = p + step;
            MagResidual bz_c;
            MagJacobian J_c;
            try {
                dipole_model(cand, magnitude, bz_c, &J_c);
            } catch (const SingularityError&) {
                lambda *= 10.0;
                continue;
            }
            const MagResidual res_c = bz_c - target;
            const double cost_c = res_c.squaredNorm();
            if (cost_c < cost) {
                accepted = true;
                const double rel = step.norm() / std::max(p.norm(), 1e-12);
                if (cost - cost_c <= 1e-12 * cost) converged = true;
                p = cand;
                J = J_c;
                res = res_c;
                cost = cost_c;
                lambda = std::max(lambda / 10.0, 1e-12);
                if (rel < s.convergence_tol) converged = true;
            } else {
                lambda *= 10.0;
            }
        }
        // No decrease possible at any damping: the estimate is stationary.
        if (!accepted) converged = true;
    }
    fit.estimate.position = p.head<3>();
    fit.estimate.heading = angles_to_heading(p[3], p[4]).normalized();
    fit.residual_norm = std::sqrt(cost);
    fit.iterations = it;
    fit.converged = converged;
    for (int i = 0; i < kHallCells; ++i) fit.residual[i] = res[i];
    return fit;
}

}  // namespace detail

/// Single-frame inversion. Throws MagDivergenceError (carrying the best
/// estimate) when no restart converges within `max_iterations`.
inline MagFit estimate_pose_5dof(const HallArrayReading& reading, const ActuatorFieldModel& actuator,
                                 const DipoleParams& dipole, const MagMeasurement5DoF& init,
                                 const InversionSettings& settings) {
    const HallArrayReading cells = subtract_actuator_field(reading, actuator);
    const detail::MagResidual target = detail::to_vector(cells.values);
    const double init_residual = std::sqrt(mag_fit_cost(cells.values, dipole, init));
    detail::MagParams start = detail::to_params(init);
    std::optional<MagFit> best;
    for (int attempt = 0; attempt <= settings.restart_count; ++attempt) {
        MagFit fit = detail::lm_fit(target, dipole.moment_magnitude, start, settings);
        fit.estimate.timestamp = reading.timestamp;
        fit.initial_residual_norm = init_residual;
        if (fit.converged) return fit;
        if (!best || fit.residual_norm < best->residual_norm) best = fit;
        start = detail::to_params(best->estimate);
    }
    throw MagDivergenceError("magnetic inversion did not converge", *best);
}

/// Coarse 5x5x3 position grid x 26 headings; returns the lowest-residual candidate.
inline MagMeasurement5DoF grid_search_init(const HallArrayReading& reading, const ActuatorFieldModel& actuator,
                                           const DipoleParams& dipole, const InversionSettings& s) {
    const HallArrayReading cells = subtract_actuator_field(reading, actuator);
    std::vector<Vec3> headings;
    for (int a = -1; a <= 1; ++a)
        for (int b = -1; b <= 1; ++b)
            for (int c = -1; c <= 1; ++c)
                if (a || b || c) headings.push_back(Vec3(a, b, c).normalized());
    MagMeasurement5DoF best;
    best.timestamp = reading.timestamp;
    double best_cost = std::numeric_limits<double>::infinity();
    for (int ix = 0; ix < 5; ++ix) {
        for (int iy = 0; iy < 5; ++iy) {
            for (int iz = 0; iz < 3; ++iz) {
                const Vec3 pos(-s.search_half_extent + ix * s.search_half_extent / 2.0,
                               -s.search_half_extent + iy * s.search_half_extent / 2.0,
                               -(s.search_depth_min + iz * (s.search_depth_max - s.search_depth_min) / 2.0));
                for (const auto& h : headings) {
                    MagMeasurement5DoF cand{reading.timestamp, pos, h};
                    const double cost = mag_fit_cost(cells.values, dipole, cand);
                    if (cost < best_cost) {
                        best_cost = cost;
                        best = cand;
                    }
                }
            }
        }
    }
    return best;
}

struct MagFrameResult {
    MagMeasurement5DoF estimate;
    int iterations = 0;
    double residual_norm = 0.0;
    double diff_residual_norm = 0.0;  // norm of the second-differenced residual grid
    bool converged = false;
    bool outlier = false;
};

inline double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    return *mid;
}

/// Warm-started streaming inversion. Frame 0 starts from the grid search.
/// Diverged frames and frames whose differentiated residual exceeds
/// `outlier_factor` x the running median carry the previous estimate forward.
inline std::vector<MagFrameResult> localize_stream(const std::vector<HallArrayReading>& readings,
                                                   const ActuatorFieldModel& actuator,
                                                   const DipoleParams& dipole,
                                                   const InversionSettings& settings) {
    std::vector<MagFrameResult> out;
    out.reserve(readings.size());
    std::vector<double> diff_norms;
    std::optional<MagMeasurement5DoF> prev;
    for (const auto& reading : readings) {
        const MagMeasurement5DoF init =
            prev ? MagMeasurement5DoF{reading.timestamp, prev->position, prev->heading}
                 : grid_search_init(reading, actuator, dipole, settings);
        MagFrameResult fr;
        MagFit fit;
        try {
            fit = estimate_pose_5dof(reading, actuator, dipole, init, settings);
            fr.converged = true;
        } catch (const MagDivergenceError& e) {
            fit = e.best();
            fr.converged = false;
        }
        fr.iterations = fit.iterations;
        fr.residual_norm = fit.residual_norm;
        const HallGrid dd = directional_second_difference(fit.residual);
        double sq = 0.0;
        for (double v : dd) sq += v * v;
        fr.diff_residual_norm = std::sqrt(sq);
        if (!diff_norms.empty() &&
            fr.diff_residual_norm > settings.outlier_factor * median_of(diff_norms)) {
            fr.outlier = true;
        }
        diff_norms.push_back(fr.diff_residual_norm);

        if ((fr.converged && !fr.outlier) || !prev) {
            fr.estimate = fit.estimate;
        } else {
            fr.estimate = {reading.timestamp, prev->position, prev->heading};
        }
        fr.estimate.timestamp = reading.timestamp;
        prev = fr.estimate;
        out.push_back(fr);
    }
    return out;
}

inline std::vector<MagMeasurement5DoF> estimates_of(const std::vector<MagFrameResult>& frames) {
    std::vector<MagMeasurement5DoF> out;
    out.reserve(frames.size());
    for (const auto& f : frames) out.push_back(f.estimate);
    return out;
}

/// Per-frame diagnostics: `t iterations residual diff_residual converged outlier`.
inline void write_mag_diagnostics(std::ostream& os, const std::vector<MagFrameResult>& frames) {
    os << "# t iterations residual diff_residual converged outlier\n";
    for (const auto& f : frames) {
        os << detail::format_double(f.estimate.timestamp) << ' ' << f.iterations << ' '
           << detail::format_double(f.residual_norm) << ' ' << detail::format_double(f.diff_residual_norm)
           << ' ' << (f.converged ? 1 : 0) << ' ' << (f.outlier ? 1 : 0) << '\n';
    }
}

/// Estimate file: `t x y z hx hy hz` per frame.
inline void write_mag_estimates(std::ostream& os, const std::vector<MagMeasurement5DoF>& est) {
    for (const auto& m : est) {
        os << detail::format_double(m.timestamp);
        for (int k = 0; k < 3; ++k) os << ' ' << detail::format_double(m.position[k]);
        for (int k = 0; k < 3; ++k) os << ' ' << detail::format_double(m.heading[k]);
        os << '\n';
    }
}

}  // namespace vmfuse
