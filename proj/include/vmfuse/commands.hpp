#pragma once

// Subcommand pipelines behind the vmfuse tool. Each writes text outputs
// that start with the run header (format version plus config echo).

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vmfuse/config.hpp"

namespace vmfuse {

namespace detail {

inline std::ofstream open_output(const std::filesystem::path& p) {
    if (p.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(p.parent_path(), ec);
    }
    std::ofstream os(p);
    if (!os) throw Error("cannot open '" + p.string() + "' for writing");
    return os;
}

inline void finish(std::ofstream& os, const std::filesystem::path& p) {
    os.flush();
    if (!os) throw Error("failed writing '" + p.string() + "'");
}

inline std::vector<Dataset> read_datasets(const std::vector<std::string>& paths) {
    std::vector<Dataset> out;
    for (const auto& p : paths) out.push_back(read_dataset(p));
    return out;
}

}  // namespace detail

/// Dataset k uses seed `cfg.seed + k` and lands in out_dir/dataset_<seed>.txt.
inline std::vector<std::string> cmd_simulate(const RunConfig& cfg, const std::string& out_dir) {
    std::vector<std::string> files;
    for (int k = 0; k < cfg.n_datasets; ++k) {
        SimConfig sc = cfg.sim;
        sc.seed = cfg.seed + static_cast<std::uint64_t>(k);
        const Dataset ds = simulate_dataset(sc);
        const auto path = std::filesystem::path(out_dir) / ("dataset_" + std::to_string(sc.seed) + ".txt");
        auto os = detail::open_output(path);
        write_run_header(os, "simulate", cfg);
        write_dataset(os, ds);
        detail::finish(os, path);
        files.push_back(path.string());
    }
    return files;
}

struct LocalizeSummary {
    std::size_t frames = 0;
    std::size_t converged = 0;
    double rms_position_error = 0.0;  // against the embedded ground truth
    double max_position_error = 0.0;
    double max_heading_error = 0.0;   // radians
};

inline LocalizeSummary cmd_localize_mag(const RunConfig& cfg, const std::string& dataset_path,
                                        const std::string& out_path) {
    const Dataset ds = read_dataset(dataset_path);
    const auto res = localize_stream(ds.mag, ds.config.actuator, ds.config.dipole, cfg.inv);
    auto os = detail::open_output(out_path);
    write_run_header(os, "localize-mag", cfg);
    os << "# dataset " << dataset_path << "\n# t x y z hx hy hz residual_norm iterations converged\n";
    LocalizeSummary s;
    double sq = 0.0;
    for (const auto& r : res) {
        const auto& e = r.estimate;
        os << detail::format_double(e.timestamp);
        for (int k = 0; k < 3; ++k) os << ' ' << detail::format_double(e.position[k]);
        for (int k = 0; k < 3; ++k) os << ' ' << detail::format_double(e.heading[k]);
        os << ' ' << detail::format_double(r.residual_norm) << ' ' << r.iterations << ' ' << (r.converged ? 1 : 0)
           << '\n';
        ++s.frames;
        if (r.converged) ++s.converged;
        if (!ds.gt.empty()) {
            const Pose g = pose_at(ds.gt, e.timestamp);
            const double pe = (e.position - g.t).norm();
            const Vec3 gh = euler_to_matrix(g.r) * ds.config.dipole.moment_axis.normalized();
            const double he = std::acos(std::clamp(gh.dot(e.heading), -1.0, 1.0));
            sq += pe * pe;
            s.max_position_error = std::max(s.max_position_error, pe);
            s.max_heading_error = std::max(s.max_heading_error, he);
        }
    }
    if (s.frames) s.rms_position_error = std::sqrt(sq / static_cast<double>(s.frames));
    detail::finish(os, out_path);
    return s;
}

/// The last `n_val` datasets validate; the rest train. Writes the checkpoint
/// and `<checkpoint>.log`.
inline TrainResult cmd_train(const RunConfig& cfg, const std::vector<std::string>& dataset_paths,
                             const std::string& out_checkpoint, const EpochHook& on_epoch = {}) {
    if (dataset_paths.size() <= static_cast<std::size_t>(cfg.n_val)) {
        throw ConfigError("train needs more than train.n_val = " + std::to_string(cfg.n_val) + " datasets");
    }
    std::vector<std::vector<FusedSample>> tr, va;
    int ratio = 0;
    for (std::size_t k = 0; k < dataset_paths.size(); ++k) {
        const Dataset ds = read_dataset(dataset_paths[k]);
        if (ratio == 0) ratio = ds.config.rate_ratio();
        if (ds.config.rate_ratio() != ratio) throw ConfigError("datasets disagree on the mag/vis rate ratio");
        auto seq = fused_samples_from_dataset(ds, cfg.inv);
        (k + static_cast<std::size_t>(cfg.n_val) < dataset_paths.size() ? tr : va).push_back(std::move(seq));
    }
    TrainingConfig tc = cfg.train;
    tc.seed = cfg.seed;
    auto result = train(tr, va, cfg.hp, tc, ratio, on_epoch);
    {
        auto os = detail::open_output(out_checkpoint);
        write_run_header(os, "train", cfg);
        write_checkpoint(os, result.best);
        detail::finish(os, out_checkpoint);
    }
    const std::string log_path = out_checkpoint + ".log";
    auto os = detail::open_output(log_path);
    write_run_header(os, "train", cfg);
    os << "# beta_calibration beta=" << detail::format_double(result.beta_calibration.beta)
       << " clamped=" << (result.beta_calibration.clamped ? 1 : 0) << " best_epoch=" << result.best.epoch
       << " stopped_early=" << (result.stopped_early ? 1 : 0) << " diverged=" << (result.diverged ? 1 : 0) << '\n';
    write_training_log(os, result.log);
    detail::finish(os, log_path);
    return result;
}

inline constexpr const char* kProtocolNote =
    "# protocol: every sample starts a segment; the segment ends at the first sample whose ground-truth path "
    "length reaches the bucket length; translation error = |estimated - true world displacement|, rotation "
    "error = angle of the relative-rotation discrepancy; RMSE pooled over all datasets; all methods start from "
    "the true pose and are scored on the fused timestamps";

/// Writes out_dir/report.txt and one out_dir/overlay_<k>.txt per dataset.
inline Comparison cmd_evaluate(const RunConfig& cfg, const std::string& checkpoint_path,
                               const std::vector<std::string>& dataset_paths, const std::string& out_dir) {
    const Checkpoint ck = read_checkpoint(checkpoint_path);
    const auto datasets = detail::read_datasets(dataset_paths);
    const auto cmp = compare_methods(datasets, ck, cfg.inv, cfg.bucket_lengths, cfg.roll);
    const auto dir = std::filesystem::path(out_dir);
    {
        const auto path = dir / "report.txt";
        auto os = detail::open_output(path);
        write_run_header(os, "evaluate", cfg);
        os << "# checkpoint " << checkpoint_path << '\n' << kProtocolNote << '\n';
        write_bucket_table(os, cmp.pooled);
        detail::finish(os, path);
    }
    for (std::size_t k = 0; k < datasets.size(); ++k) {
        const auto path = dir / ("overlay_" + std::to_string(k) + ".txt");
        auto os = detail::open_output(path);
        write_run_header(os, "evaluate", cfg);
        os << "# dataset " << dataset_paths[k] << "\n# t x y z roll pitch yaw method\n";
        write_overlay(os, cmp.per_dataset[k].trajectories, datasets[k].gt);
        detail::finish(os, path);
    }
    return cmp;
}

struct AlignDemoSummary {
    double max_trans_error = 0.0;
    double max_rot_error = 0.0;
    bool converged = false;
    double stage1_energy = 0.0, final_energy = 0.0;
};

/// Renders a window of frames along a seeded random camera path, links
/// consecutive and skip pairs with synthetic correspondences, aligns, and
/// reports recovered against true transforms.
inline AlignDemoSummary cmd_align_demo(const RunConfig& cfg, const std::string& out_path) {
    const auto& d = cfg.demo;
    Rng rng(derive_seed(cfg.seed, 7));
    const Scene scene = make_scene(cfg.seed, d.scene);
    const Intrinsics K{d.focal, d.focal, (d.width - 1) / 2.0, (d.height - 1) / 2.0};
    std::vector<RigidTransform> truth = {RigidTransform::identity()};
    for (int k = 1; k < d.frames; ++k) {
        const Vec3 w(uniform(rng, -d.motion_rot, d.motion_rot), uniform(rng, -d.motion_rot, d.motion_rot),
                     uniform(rng, -d.motion_rot, d.motion_rot));
        const Vec3 t(uniform(rng, -d.motion_trans, d.motion_trans), uniform(rng, -d.motion_trans, d.motion_trans),
                     uniform(rng, -d.motion_trans, d.motion_trans));
        truth.push_back(truth.back() * RigidTransform{so3_exp(w), t});
    }
    std::vector<Frame> frames;
    for (const auto& T : truth) frames.push_back(render_synthetic_scene(scene, T, K, d.width, d.height));
    const auto corr = synthesize_correspondences(frames, truth, dense_pairs(frames.size(), cfg.align.pair_skip),
                                                 d.correspondences, d.noise_sd, rng);
    const auto r = minimize_alignment(frames, corr, cfg.align_weights, cfg.align);

    AlignDemoSummary s{0.0, 0.0, r.converged, r.stage1_energy, r.final_energy};
    auto os = detail::open_output(out_path);
    write_run_header(os, "align-demo", cfg);
    os << "# converged=" << (r.converged ? 1 : 0) << " stage1_energy=" << detail::format_double(r.stage1_energy)
       << " final_energy=" << detail::format_double(r.final_energy) << '\n';
    os << "# frame true(x y z roll pitch yaw) estimate(x y z roll pitch yaw) trans_err rot_err\n";
    for (std::size_t k = 0; k < truth.size(); ++k) {
        const auto& E = r.state.transforms[k];
        const double te = (E.t - truth[k].t).norm();
        const double re = rotation_angle(E.R.transpose() * truth[k].R);
        s.max_trans_error = std::max(s.max_trans_error, te);
        s.max_rot_error = std::max(s.max_rot_error, re);
        os << "FRAME " << k << ' ';
        write_pose_fields(os, to_pose(truth[k]));
        os << ' ';
        write_pose_fields(os, to_pose(E));
        os << ' ' << detail::format_double(te) << ' ' << detail::format_double(re) << '\n';
    }
    for (const auto& t : r.trace) {
        os << "TRACE " << t.stage << ' ' << t.iteration << ' ' << detail::format_double(t.energy) << ' '
           << detail::format_double(t.damping) << ' ' << (t.accepted ? 1 : 0) << '\n';
    }
    detail::finish(os, out_path);
    return s;
}

}  // namespace vmfuse
