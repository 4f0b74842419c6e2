#pragma once

// Multi-frame RGB-D alignment energy and its two-stage minimization.
//
// Conventions: each frame's transform tau_i maps camera-i coordinates to the
// world (camera-to-world). Camera z looks forward. Frame 0 is the gauge and
// stays fixed. Pose increments are (dt, dphi) with t <- t + dt and
// R <- R * exp(dphi), so rotation Jacobians come from a right-multiplied
// small-angle perturbation.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "vmfuse/detail/rng.hpp"
#include "vmfuse/detail/text_io.hpp"
#include "vmfuse/error.hpp"
#include "vmfuse/geometry.hpp"

namespace vmfuse {

struct Intrinsics {
    double fx = 100.0, fy = 100.0, cx = 32.0, cy = 24.0;

    void validate() const {
        if (!(fx > 0.0 && fy > 0.0) || !std::isfinite(cx) || !std::isfinite(cy)) {
            throw RangeError("focal lengths must be positive");
        }
    }
};

using Vec2 = Eigen::Vector2d;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Row6 = Eigen::Matrix<double, 1, 6>;
using Mat36 = Eigen::Matrix<double, 3, 6>;

inline Vec2 project(const Vec3& p, const Intrinsics& K) {
    if (!(p.z() > 0.0)) throw RangeError("point is behind the camera");
    return {K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy};
}

inline Mat23 project_jacobian(const Vec3& p, const Intrinsics& K) {
    const double iz = 1.0 / p.z();
    Mat23 J;
    J << K.fx * iz, 0.0, -K.fx * p.x() * iz * iz, 0.0, K.fy * iz, -K.fy * p.y() * iz * iz;
    return J;
}

inline Vec3 unproject(const Vec2& px, double depth, const Intrinsics& K) {
    if (!(depth > 0.0) || !std::isfinite(depth)) throw RangeError("invalid depth");
    return {(px.x() - K.cx) / K.fx * depth, (px.y() - K.cy) / K.fy * depth, depth};
}

// ---------------------------------------------------------------------------
// Frames

/// Intensity and depth are indexed (v, u). Depth <= 0 or NaN marks a hole.
struct Frame {
    Eigen::MatrixXd intensity;
    Eigen::MatrixXd depth;
    Intrinsics K;
    std::vector<Vec3> normals;  // row-major (v * width + u); NaN where undefined

    int width() const { return static_cast<int>(intensity.cols()); }
    int height() const { return static_cast<int>(intensity.rows()); }

    bool depth_valid(int u, int v) const {
        const double d = depth(v, u);
        return std::isfinite(d) && d > 0.0;
    }
    const Vec3& normal(int u, int v) const { return normals[static_cast<std::size_t>(v) * width() + u]; }

    /// Normals from central differences of the back-projected depth,
    /// oriented toward the camera.
    void compute_normals() {
        const int W = width(), H = height();
        const double nan = std::numeric_limits<double>::quiet_NaN();
        normals.assign(static_cast<std::size_t>(W) * H, Vec3(nan, nan, nan));
        for (int v = 1; v + 1 < H; ++v) {
            for (int u = 1; u + 1 < W; ++u) {
                if (!depth_valid(u, v) || !depth_valid(u - 1, v) || !depth_valid(u + 1, v) ||
                    !depth_valid(u, v - 1) || !depth_valid(u, v + 1)) {
                    continue;
                }
                auto P = [&](int a, int b) { return unproject(Vec2(a, b), depth(b, a), K); };
                Vec3 n = (P(u + 1, v) - P(u - 1, v)).cross(P(u, v + 1) - P(u, v - 1));
                if (!(n.norm() > 0.0)) continue;
                n.normalize();
                if (n.dot(P(u, v)) > 0.0) n = -n;
                normals[static_cast<std::size_t>(v) * W + u] = n;
            }
        }
    }

    void validate() const {
        K.validate();
        if (intensity.rows() != depth.rows() || intensity.cols() != depth.cols()) {
            throw DimensionError("intensity and depth grids differ in size");
        }
        if (width() < 3 || height() < 3) throw DimensionError("frame must be at least 3x3");
        if (normals.size() != static_cast<std::size_t>(width()) * height()) {
            throw DimensionError("normals not computed");
        }
    }
};

struct BilinearSample {
    double value;
    Vec2 gradient;  // d value / d (u, v)
};

namespace detail {

/// Bilinear lookup; nullopt when any of the four taps is outside the grid or
/// fails `valid`.
template <class Valid>
std::optional<BilinearSample> bilinear(const Eigen::MatrixXd& g, const Vec2& p, Valid valid) {
    if (!std::isfinite(p.x()) || !std::isfinite(p.y())) return std::nullopt;
    const double fu = std::floor(p.x()), fv = std::floor(p.y());
    const int u0 = static_cast<int>(fu), v0 = static_cast<int>(fv);
    if (u0 < 0 || v0 < 0 || u0 + 1 >= g.cols() || v0 + 1 >= g.rows()) return std::nullopt;
    if (!valid(u0, v0) || !valid(u0 + 1, v0) || !valid(u0, v0 + 1) || !valid(u0 + 1, v0 + 1)) return std::nullopt;
    const double a = p.x() - fu, b = p.y() - fv;
    const double i00 = g(v0, u0), i10 = g(v0, u0 + 1), i01 = g(v0 + 1, u0), i11 = g(v0 + 1, u0 + 1);
    BilinearSample s;
    s.value = (1 - a) * (1 - b) * i00 + a * (1 - b) * i10 + (1 - a) * b * i01 + a * b * i11;
    s.gradient = {(1 - b) * (i10 - i00) + b * (i11 - i01), (1 - a) * (i01 - i00) + a * (i11 - i10)};
    return s;
}

}  // namespace detail

inline std::optional<BilinearSample> sample_intensity(const Frame& f, const Vec2& p) {
    return detail::bilinear(f.intensity, p, [](int, int) { return true; });
}

inline std::optional<BilinearSample> sample_depth(const Frame& f, const Vec2& p) {
    return detail::bilinear(f.depth, p, [&f](int u, int v) { return f.depth_valid(u, v); });
}

// ---------------------------------------------------------------------------
// Problem data

struct Correspondence {
    std::size_t i = 0, j = 0;
    Vec3 Pi = Vec3::Zero();  // in camera i
    Vec3 Pj = Vec3::Zero();  // in camera j
};

using CorrespondenceSet = std::vector<Correspondence>;

struct AlignmentState {
    std::vector<RigidTransform> transforms;

    static AlignmentState identity(std::size_t frames) {
        return {std::vector<RigidTransform>(frames, RigidTransform{Mat3::Identity(), Vec3::Zero()})};
    }
};

struct AlignmentWeights {
    double w_sparse = 1.0, w_dense = 1.0, w_photo = 1.0, w_geo = 10.0;

    void validate() const {
        for (double w : {w_sparse, w_dense, w_photo, w_geo}) {
            if (!(w >= 0.0) || !std::isfinite(w)) throw RangeError("alignment weights must be nonnegative");
        }
        if (w_sparse == 0.0 && (w_dense == 0.0 || (w_photo == 0.0 && w_geo == 0.0))) {
            throw RangeError("alignment weights are all zero");
        }
    }
};

struct AlignmentSettings {
    int sparse_iterations = 30;
    int dense_iterations = 50;
    double convergence_tol = 1e-12;  // relative step norm
    double initial_damping = 1e-4;
    int pixel_stride = 1;
    int pair_skip = 2;  // dense pairs link frames up to this many apart

    void validate() const {
        if (sparse_iterations < 1 || dense_iterations < 0) throw RangeError("iteration counts must be positive");
        if (!(convergence_tol > 0.0) || !(initial_damping > 0.0)) throw RangeError("tolerances must be positive");
        if (pixel_stride < 1 || pair_skip < 1) throw RangeError("stride and pair skip must be >= 1");
    }
};

inline std::vector<std::pair<std::size_t, std::size_t>> dense_pairs(std::size_t frames, int skip) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t i = 0; i < frames; ++i) {
        for (std::size_t j = i + 1; j < frames && j <= i + static_cast<std::size_t>(skip); ++j) out.emplace_back(i, j);
    }
    return out;
}

inline RigidTransform apply_increment(const RigidTransform& T, const Eigen::Matrix<double, 6, 1>& d) {
    return {T.R * so3_exp(d.tail<3>()), T.t + d.head<3>()};
}

// ---------------------------------------------------------------------------
// Residual terms with analytic Jacobians (columns: dt then dphi)

struct SparseTerm {
    Vec3 r;
    Mat36 Ji, Jj;
};

inline SparseTerm sparse_term(const RigidTransform& Ti, const RigidTransform& Tj, const Vec3& Pi, const Vec3& Pj) {
    SparseTerm s;
    s.r = (Ti.R * Pi + Ti.t) - (Tj.R * Pj + Tj.t);
    s.Ji << Mat3::Identity(), -Ti.R * skew(Pi);
    s.Jj << -Mat3::Identity(), Tj.R * skew(Pj);
    return s;
}

struct ScalarTerm {
    double r;
    Row6 Ji, Jj;
};

namespace detail {

// Point d (camera i) expressed in camera j, with its derivatives.
struct Reprojection {
    Vec3 q;
    Mat36 dq_i, dq_j;
};

inline Reprojection reproject(const RigidTransform& Ti, const RigidTransform& Tj, const Vec3& d) {
    Reprojection out;
    const Vec3 w = Ti.R * d + Ti.t;
    out.q = Tj.R.transpose() * (w - Tj.t);
    out.dq_i << Tj.R.transpose(), -Tj.R.transpose() * Ti.R * skew(d);
    out.dq_j << -Tj.R.transpose(), skew(out.q);
    return out;
}

}  // namespace detail

/// I_i(k) - I_j(w(tau_j^-1 tau_i d_k)) for pixel k = (u, v) of frame i.
inline std::optional<ScalarTerm> photo_term(const Frame& fi, const Frame& fj, int u, int v, const RigidTransform& Ti,
                                            const RigidTransform& Tj) {
    if (!fi.depth_valid(u, v)) return std::nullopt;
    const Vec3 d = unproject(Vec2(u, v), fi.depth(v, u), fi.K);
    const auto rp = detail::reproject(Ti, Tj, d);
    if (!(rp.q.z() > 0.0)) return std::nullopt;
    const auto s = sample_intensity(fj, project(rp.q, fj.K));
    if (!s) return std::nullopt;
    const Eigen::RowVector3d g = -s->gradient.transpose() * project_jacobian(rp.q, fj.K);
    return ScalarTerm{fi.intensity(v, u) - s->value, g * rp.dq_i, g * rp.dq_j};
}

/// n_k^T (d_k - tau_i^-1 tau_j w^-1(D_j(w(tau_j^-1 tau_i d_k)))).
inline std::optional<ScalarTerm> geo_term(const Frame& fi, const Frame& fj, int u, int v, const RigidTransform& Ti,
                                          const RigidTransform& Tj) {
    if (!fi.depth_valid(u, v)) return std::nullopt;
    const Vec3& n = fi.normal(u, v);
    if (!std::isfinite(n.x())) return std::nullopt;
    const Vec3 d = unproject(Vec2(u, v), fi.depth(v, u), fi.K);
    const auto rp = detail::reproject(Ti, Tj, d);
    if (!(rp.q.z() > 0.0)) return std::nullopt;
    const Vec2 p = project(rp.q, fj.K);
    const auto D = sample_depth(fj, p);
    if (!D) return std::nullopt;
    const Vec3 ray((p.x() - fj.K.cx) / fj.K.fx, (p.y() - fj.K.cy) / fj.K.fy, 1.0);
    const Vec3 m = D->value * ray;
    Mat23 dray_dp = Mat23::Zero();
    dray_dp(0, 0) = 1.0 / fj.K.fx;
    dray_dp(1, 1) = 1.0 / fj.K.fy;
    Eigen::Matrix<double, 3, 2> dm_dp = ray * D->gradient.transpose() + D->value * dray_dp.transpose();
    const Mat3 dm_dq = dm_dp * project_jacobian(rp.q, fj.K);
    const Vec3 w2 = Tj.R * m + Tj.t;
    const Vec3 s = Ti.R.transpose() * (w2 - Ti.t);
    const Mat3 A = Ti.R.transpose() * Tj.R;  // ds/dm
    Mat36 ds_i = A * dm_dq * rp.dq_i;
    ds_i.leftCols<3>() += -Ti.R.transpose();
    ds_i.rightCols<3>() += skew(s);
    Mat36 ds_j = A * dm_dq * rp.dq_j;
    ds_j.leftCols<3>() += Ti.R.transpose();
    ds_j.rightCols<3>() += -A * skew(m);
    return ScalarTerm{n.dot(d - s), -n.transpose() * ds_i, -n.transpose() * ds_j};
}

// ---------------------------------------------------------------------------
// Energies

inline void check_state(const AlignmentState& s, std::size_t frames) {
    if (s.transforms.size() != frames) throw DimensionError("state and frame counts differ");
}

inline void check_correspondences(const CorrespondenceSet& corr, std::size_t frames) {
    for (const auto& c : corr) {
        if (c.i >= frames || c.j >= frames) throw RangeError("correspondence frame index outside window");
        if (!c.Pi.allFinite() || !c.Pj.allFinite()) throw RangeError("correspondence point is not finite");
    }
}

inline double e_sparse(const AlignmentState& s, const CorrespondenceSet& corr) {
    check_correspondences(corr, s.transforms.size());
    double e = 0.0;
    for (const auto& c : corr) {
        const Vec3 r = s.transforms[c.i].apply(c.Pi) - s.transforms[c.j].apply(c.Pj);
        e += r.squaredNorm();
    }
    return e;
}

struct DenseEnergy {
    double energy = 0.0;
    std::size_t valid = 0, tried = 0;
    double validity_ratio() const { return tried ? static_cast<double>(valid) / static_cast<double>(tried) : 0.0; }
};

namespace detail {

template <class Term>
DenseEnergy dense_energy(const AlignmentState& s, const std::vector<Frame>& frames, int stride, int skip, Term term) {
    check_state(s, frames.size());
    DenseEnergy out;
    for (const auto& [i, j] : dense_pairs(frames.size(), skip)) {
        for (int v = 0; v < frames[i].height(); v += stride) {
            for (int u = 0; u < frames[i].width(); u += stride) {
                ++out.tried;
                const auto t = term(frames[i], frames[j], u, v, s.transforms[i], s.transforms[j]);
                if (!t) continue;
                ++out.valid;
                out.energy += t->r * t->r;
            }
        }
    }
    return out;
}

}  // namespace detail

inline DenseEnergy e_photo_detail(const AlignmentState& s, const std::vector<Frame>& frames, int stride = 1,
                                  int skip = 2) {
    return detail::dense_energy(s, frames, stride, skip, photo_term);
}
inline DenseEnergy e_geo_detail(const AlignmentState& s, const std::vector<Frame>& frames, int stride = 1,
                                int skip = 2) {
    return detail::dense_energy(s, frames, stride, skip, geo_term);
}
inline double e_photo(const AlignmentState& s, const std::vector<Frame>& frames, int stride = 1, int skip = 2) {
    return e_photo_detail(s, frames, stride, skip).energy;
}
inline double e_geo(const AlignmentState& s, const std::vector<Frame>& frames, int stride = 1, int skip = 2) {
    return e_geo_detail(s, frames, stride, skip).energy;
}

inline double e_align(const AlignmentState& s, const std::vector<Frame>& frames, const CorrespondenceSet& corr,
                      const AlignmentWeights& w, int stride = 1, int skip = 2) {
    w.validate();
    double dense = 0.0;
    if (w.w_dense != 0.0) {
        if (w.w_photo != 0.0) dense += w.w_photo * e_photo(s, frames, stride, skip);
        if (w.w_geo != 0.0) dense += w.w_geo * e_geo(s, frames, stride, skip);
    }
    return w.w_sparse * e_sparse(s, corr) + w.w_dense * dense;
}

// ---------------------------------------------------------------------------
// Solver

struct TraceEntry {
    int stage;  // 1 sparse Gauss-Newton, 2 damped refinement
    int iteration;
    double energy;  // energy of the stage's objective after the step
    double damping;
    bool accepted;
};

struct AlignmentResult {
    AlignmentState state;
    bool converged = false;
    double stage1_energy = 0.0;  // full e_align at the end of stage 1
    double final_energy = 0.0;
    std::vector<TraceEntry> trace;
};

namespace detail {

struct NormalEquations {
    Eigen::MatrixXd H;
    Eigen::VectorXd g;
    double energy = 0.0;
};

// Frame 0 is fixed; frame k > 0 owns parameters [6(k-1), 6k).
inline void accumulate(NormalEquations& ne, std::size_t i, std::size_t j, double w, const Eigen::MatrixXd& r,
                       const Eigen::MatrixXd& Ji, const Eigen::MatrixXd& Jj) {
    ne.energy += w * r.squaredNorm();
    auto add = [&](std::size_t a, const Eigen::MatrixXd& Ja) {
        if (a == 0) return;
        const Eigen::Index oa = 6 * static_cast<Eigen::Index>(a - 1);
        ne.g.segment<6>(oa) += w * Ja.transpose() * r;
        auto cross = [&](std::size_t b, const Eigen::MatrixXd& Jb) {
            if (b == 0) return;
            const Eigen::Index ob = 6 * static_cast<Eigen::Index>(b - 1);
            ne.H.block<6, 6>(oa, ob) += w * Ja.transpose() * Jb;
        };
        cross(i, Ji);
        cross(j, Jj);
    };
    add(i, Ji);
    add(j, Jj);
}

inline NormalEquations linearize(const AlignmentState& s, const std::vector<Frame>& frames,
                                 const CorrespondenceSet& corr, const AlignmentWeights& w, bool dense,
                                 const AlignmentSettings& cfg) {
    const Eigen::Index n = 6 * static_cast<Eigen::Index>(s.transforms.size() - 1);
    NormalEquations ne{Eigen::MatrixXd::Zero(n, n), Eigen::VectorXd::Zero(n), 0.0};
    const double ws = dense ? w.w_sparse : 1.0;
    if (ws != 0.0) {
        for (const auto& c : corr) {
            const auto t = sparse_term(s.transforms[c.i], s.transforms[c.j], c.Pi, c.Pj);
            accumulate(ne, c.i, c.j, ws, t.r, t.Ji, t.Jj);
        }
    }
    if (!dense || w.w_dense == 0.0) return ne;
    const double wp = w.w_dense * w.w_photo, wg = w.w_dense * w.w_geo;
    for (const auto& [i, j] : dense_pairs(frames.size(), cfg.pair_skip)) {
        for (int v = 0; v < frames[i].height(); v += cfg.pixel_stride) {
            for (int u = 0; u < frames[i].width(); u += cfg.pixel_stride) {
                for (int kind = 0; kind < 2; ++kind) {
                    const double wk = kind ? wg : wp;
                    if (wk == 0.0) continue;
                    const auto t = kind ? geo_term(frames[i], frames[j], u, v, s.transforms[i], s.transforms[j])
                                        : photo_term(frames[i], frames[j], u, v, s.transforms[i], s.transforms[j]);
                    if (!t) continue;
                    accumulate(ne, i, j, wk, Eigen::MatrixXd::Constant(1, 1, t->r), t->Ji, t->Jj);
                }
            }
        }
    }
    return ne;
}

inline AlignmentState step(const AlignmentState& s, const Eigen::VectorXd& dx) {
    AlignmentState out = s;
    for (std::size_t k = 1; k < s.transforms.size(); ++k) {
        out.transforms[k] = apply_increment(s.transforms[k], dx.segment<6>(6 * static_cast<Eigen::Index>(k - 1)));
    }
    return out;
}

inline double state_scale(const AlignmentState& s) {
    double acc = 0.0;
    for (const auto& T : s.transforms) acc += T.t.squaredNorm();
    return std::sqrt(acc) + 1.0;
}

// Every frame must reach frame 0 through pairs holding at least three
// non-collinear correspondences.
inline void check_sparse_observability(const CorrespondenceSet& corr, std::size_t frames) {
    std::vector<std::vector<std::vector<Vec3>>> pts(frames, std::vector<std::vector<Vec3>>(frames));
    for (const auto& c : corr) {
        if (c.i == c.j) continue;
        pts[std::min(c.i, c.j)][std::max(c.i, c.j)].push_back(c.i < c.j ? c.Pi : c.Pj);
    }
    auto rigid = [](const std::vector<Vec3>& p) {
        if (p.size() < 3) return false;
        for (std::size_t a = 1; a < p.size(); ++a) {
            for (std::size_t b = a + 1; b < p.size(); ++b) {
                const Vec3 e1 = p[a] - p[0], e2 = p[b] - p[0];
                if (e1.cross(e2).norm() > 1e-9 * (e1.norm() * e2.norm() + 1e-300)) return true;
            }
        }
        return false;
    };
    std::vector<bool> seen(frames, false);
    std::vector<std::size_t> stack = {0};
    seen[0] = true;
    while (!stack.empty()) {
        const std::size_t a = stack.back();
        stack.pop_back();
        for (std::size_t b = 0; b < frames; ++b) {
            if (seen[b] || !rigid(pts[std::min(a, b)][std::max(a, b)])) continue;
            seen[b] = true;
            stack.push_back(b);
        }
    }
    for (std::size_t k = 0; k < frames; ++k) {
        if (!seen[k]) throw DegenerateInputError("frame " + std::to_string(k) + " lacks 3 non-collinear correspondences");
    }
}

}  // namespace detail

/// Stage 1: Gauss-Newton on e_sparse with step halving. Stage 2: damped
/// Gauss-Newton (Levenberg-Marquardt) on the full e_align. Steps that raise
/// the objective are rejected, so the trace of accepted energies never rises.
inline AlignmentResult minimize_alignment(const std::vector<Frame>& frames, const CorrespondenceSet& corr,
                                          const AlignmentWeights& w, const AlignmentSettings& cfg = {},
                                          std::optional<AlignmentState> initial = std::nullopt) {
    w.validate();
    cfg.validate();
    if (frames.size() < 2) throw DegenerateInputError("alignment needs at least two frames");
    for (const auto& f : frames) f.validate();
    check_correspondences(corr, frames.size());
    detail::check_sparse_observability(corr, frames.size());

    AlignmentResult res;
    res.state = initial ? *initial : AlignmentState::identity(frames.size());
    check_state(res.state, frames.size());
    auto full = [&](const AlignmentState& s) { return e_align(s, frames, corr, w, cfg.pixel_stride, cfg.pair_skip); };

    bool stage1_converged = false;
    double energy = e_sparse(res.state, corr);
    for (int it = 1; it <= cfg.sparse_iterations; ++it) {
        const auto ne = detail::linearize(res.state, frames, corr, w, false, cfg);
        const Eigen::VectorXd dx = ne.H.ldlt().solve(-ne.g);
        if (!dx.allFinite()) throw DegenerateInputError("sparse normal equations are singular");
        double scale = 1.0;
        bool accepted = false;
        for (int h = 0; h < 30 && !accepted; ++h, scale *= 0.5) {
            const auto cand = detail::step(res.state, scale * dx);
            const double e = e_sparse(cand, corr);
            if (e <= energy) {
                res.state = cand;
                energy = e;
                accepted = true;
            }
        }
        res.trace.push_back({1, it, energy, 0.0, accepted});
        if (!accepted || dx.norm() <= cfg.convergence_tol * detail::state_scale(res.state)) {
            stage1_converged = true;
            break;
        }
    }

    res.stage1_energy = full(res.state);
    energy = res.stage1_energy;
    const bool has_dense = w.w_dense != 0.0 && (w.w_photo != 0.0 || w.w_geo != 0.0);
    bool stage2_converged = !has_dense;
    double lambda = cfg.initial_damping;
    for (int it = 1; has_dense && it <= cfg.dense_iterations; ++it) {
        const auto ne = detail::linearize(res.state, frames, corr, w, true, cfg);
        bool accepted = false;
        Eigen::VectorXd dx;
        for (int tries = 0; tries < 12 && !accepted; ++tries) {
            Eigen::MatrixXd A = ne.H;
            A.diagonal() += lambda * ne.H.diagonal().cwiseMax(1e-12);
            dx = A.ldlt().solve(-ne.g);
            if (!dx.allFinite()) {
                lambda *= 10.0;
                continue;
            }
            const auto cand = detail::step(res.state, dx);
            const double e = full(cand);
            if (e <= energy) {
                res.state = cand;
                energy = e;
                accepted = true;
                lambda = std::max(lambda / 10.0, 1e-12);
            } else {
                lambda *= 10.0;
            }
            res.trace.push_back({2, it, accepted ? energy : e, lambda, accepted});
        }
        if (!accepted || dx.norm() <= cfg.convergence_tol * detail::state_scale(res.state)) {
            stage2_converged = true;
            break;
        }
    }
    res.final_energy = energy;
    res.converged = stage1_converged && stage2_converged;
    return res;
}

inline void write_trace(std::ostream& os, const AlignmentResult& r) {
    os << "# stage iteration energy damping accepted\n";
    for (const auto& t : r.trace) {
        os << t.stage << ' ' << t.iteration << ' ' << detail::format_double(t.energy) << ' '
           << detail::format_double(t.damping) << ' ' << (t.accepted ? 1 : 0) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Synthetic scene: a textured height field z = plane_distance + h(x, y)
// seen by cameras looking along +z.

struct SceneParams {
    double plane_distance = 0.3;
    double relief = 0.01;  // height amplitude, meters
    double min_wavelength = 0.08;
    double max_wavelength = 0.25;
    int waves = 4;

    void validate() const {
        if (!(plane_distance > 0.0) || !(relief >= 0.0) || relief >= plane_distance) {
            throw RangeError("scene must sit in front of the camera");
        }
        if (!(min_wavelength > 0.0) || max_wavelength < min_wavelength || waves < 1) {
            throw RangeError("invalid scene texture");
        }
    }
};

struct Wave {
    double amplitude, kx, ky, phase;
    double value(double x, double y) const { return amplitude * std::sin(kx * x + ky * y + phase); }
    Eigen::Vector2d grad(double x, double y) const {
        const double c = amplitude * std::cos(kx * x + ky * y + phase);
        return {c * kx, c * ky};
    }
};

struct Scene {
    SceneParams params;
    std::vector<Wave> height, texture;

    double height_at(double x, double y) const {
        double h = params.plane_distance;
        for (const auto& w : height) h += w.value(x, y);
        return h;
    }
    Eigen::Vector2d height_grad(double x, double y) const {
        Eigen::Vector2d g = Eigen::Vector2d::Zero();
        for (const auto& w : height) g += w.grad(x, y);
        return g;
    }
    /// Stays within [0.05, 0.95] by construction, so no clipping.
    double intensity_at(double x, double y) const {
        double i = 0.5;
        for (const auto& w : texture) i += w.value(x, y);
        return i;
    }
};

inline Scene make_scene(std::uint64_t seed, const SceneParams& p = {}) {
    p.validate();
    Rng rng(derive_seed(seed, 4));
    auto wave = [&](double total_amp) {
        const double lambda = uniform(rng, p.min_wavelength, p.max_wavelength);
        const double dir = uniform(rng, 0.0, 2.0 * kPi);
        const double k = 2.0 * kPi / lambda;
        return Wave{total_amp / p.waves, k * std::cos(dir), k * std::sin(dir), uniform(rng, 0.0, 2.0 * kPi)};
    };
    Scene s{p, {}, {}};
    for (int k = 0; k < p.waves; ++k) s.height.push_back(wave(p.relief));
    for (int k = 0; k < p.waves; ++k) s.texture.push_back(wave(0.45));
    return s;
}

/// Ray casts every pixel against the height field (Newton on the ray
/// parameter). Pixels whose ray does not converge are holes.
inline Frame render_synthetic_scene(const Scene& scene, const RigidTransform& camera, const Intrinsics& K, int width,
                                    int height) {
    K.validate();
    if (width < 3 || height < 3) throw DimensionError("frame must be at least 3x3");
    Frame f;
    f.K = K;
    f.intensity = Eigen::MatrixXd::Zero(height, width);
    f.depth = Eigen::MatrixXd::Constant(height, width, std::numeric_limits<double>::quiet_NaN());
    const Vec3 c = camera.t;
    for (int v = 0; v < height; ++v) {
        for (int u = 0; u < width; ++u) {
            const Vec3 dir = camera.R * Vec3((u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0);
            if (!(dir.z() > 1e-6)) continue;
            double s = (scene.params.plane_distance - c.z()) / dir.z();
            bool ok = false;
            for (int it = 0; it < 60; ++it) {
                const Vec3 p = c + s * dir;
                const double fval = p.z() - scene.height_at(p.x(), p.y());
                const Eigen::Vector2d g = scene.height_grad(p.x(), p.y());
                const double df = dir.z() - g.x() * dir.x() - g.y() * dir.y();
                if (std::abs(df) < 1e-12) break;
                const double ds = fval / df;
                s -= ds;
                if (std::abs(ds) < 1e-15 * (1.0 + std::abs(s))) {
                    ok = true;
                    break;
                }
            }
            if (!ok || !(s > 0.0)) continue;
            const Vec3 p = c + s * dir;
            f.depth(v, u) = s;  // camera-frame ray has unit z, so s is the depth
            f.intensity(v, u) = scene.intensity_at(p.x(), p.y());
        }
    }
    f.compute_normals();
    return f;
}

inline Frame render_synthetic_scene(std::uint64_t seed, const RigidTransform& camera, const Intrinsics& K, int width,
                                    int height, const SceneParams& p = {}) {
    return render_synthetic_scene(make_scene(seed, p), camera, K, width, height);
}

/// Correspondences between every pair in `pairs`: back-project random valid
/// pixels of frame i with its depth, map them through the true transforms,
/// then add isotropic Gaussian noise to both endpoints.
inline CorrespondenceSet synthesize_correspondences(const std::vector<Frame>& frames,
                                                    const std::vector<RigidTransform>& truth,
                                                    const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                                                    std::size_t per_pair, double noise_sd, Rng& rng) {
    if (truth.size() != frames.size()) throw DimensionError("one true transform per frame");
    if (!(noise_sd >= 0.0)) throw RangeError("noise sd must be nonnegative");
    CorrespondenceSet out;
    for (const auto& [i, j] : pairs) {
        const Frame& f = frames.at(i);
        if (j >= frames.size()) throw RangeError("pair index outside window");
        std::size_t made = 0;
        for (std::size_t guard = 0; made < per_pair && guard < 1000 * per_pair; ++guard) {
            const int u = static_cast<int>(uniform(rng, 0.0, f.width() - 1e-9));
            const int v = static_cast<int>(uniform(rng, 0.0, f.height() - 1e-9));
            if (!f.depth_valid(u, v)) continue;
            const Vec3 Pi = unproject(Vec2(u, v), f.depth(v, u), f.K);
            const Vec3 Pj = truth[j].inverse().apply(truth[i].apply(Pi));
            const Vec3 ni(gaussian(rng, noise_sd), gaussian(rng, noise_sd), gaussian(rng, noise_sd));
            const Vec3 nj(gaussian(rng, noise_sd), gaussian(rng, noise_sd), gaussian(rng, noise_sd));
            out.push_back({i, j, Pi + ni, Pj + nj});
            ++made;
        }
        if (made < per_pair) throw DegenerateInputError("frame has too few valid depth pixels");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Binary frame files: "VMFR", u32 version, u32 width, u32 height,
// f64 fx fy cx cy, then width*height f64 intensity and depth, row-major,
// host byte order (little-endian on every supported target).

inline constexpr std::uint32_t kFrameVersion = 1;

inline void write_frame(std::ostream& os, const Frame& f) {
    auto put = [&os](const auto& v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); };
    os.write("VMFR", 4);
    put(kFrameVersion);
    put(static_cast<std::uint32_t>(f.width()));
    put(static_cast<std::uint32_t>(f.height()));
    for (double k : {f.K.fx, f.K.fy, f.K.cx, f.K.cy}) put(k);
    for (const auto* g : {&f.intensity, &f.depth}) {
        for (int v = 0; v < f.height(); ++v) {
            for (int u = 0; u < f.width(); ++u) put((*g)(v, u));
        }
    }
    if (!os) throw Error("failed to write frame");
}

inline Frame read_frame(std::istream& is) {
    auto get = [&is](auto& v) {
        if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw ParseError(0, "truncated frame file");
    };
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "VMFR", 4) != 0) throw ParseError(0, "not a frame file");
    std::uint32_t version = 0, W = 0, H = 0;
    get(version);
    if (version != kFrameVersion) throw VersionError("unsupported frame version " + std::to_string(version));
    get(W);
    get(H);
    if (W < 3 || H < 3 || W > 16384 || H > 16384) throw DimensionError("implausible frame size");
    Frame f;
    get(f.K.fx);
    get(f.K.fy);
    get(f.K.cx);
    get(f.K.cy);
    f.K.validate();
    f.intensity.resize(H, W);
    f.depth.resize(H, W);
    for (auto* g : {&f.intensity, &f.depth}) {
        for (std::uint32_t v = 0; v < H; ++v) {
            for (std::uint32_t u = 0; u < W; ++u) get((*g)(v, u));
        }
    }
    f.compute_normals();
    return f;
}

}  // namespace vmfuse
