#pragma once

// Magneto-visual fusion network. Two input LSTMs (magnetic 5-DoF estimates
// at the fast rate, visual odometry deltas at the slow rate) feed a core
// LSTM whose output is mapped to a 6-DoF relative pose per visual interval.
// The magnetic branch runs `rate_ratio` steps per fused step.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "vmfuse/detail/text_io.hpp"
#include "vmfuse/error.hpp"
#include "vmfuse/geometry.hpp"
#include "vmfuse/magloc.hpp"
#include "vmfuse/neuralcore.hpp"
#include "vmfuse/simkit.hpp"

namespace vmfuse {

inline constexpr int kMagInputSize = 5;
inline constexpr int kVisInputSize = 6;
inline constexpr int kPoseOutputSize = 6;

inline Vector pose_to_vector(const Pose& p) {
    Vector v(6);
    v << p.t, p.r;
    return v;
}

inline Pose vector_to_pose(const Vector& v) {
    check_dims(v.size() == 6, "pose vector must have 6 entries");
    return {v.head<3>(), v.tail<3>()};
}

inline Vector mag_input(const MagMeasurement5DoF& m) {
    Vector v(kMagInputSize);
    const Eigen::Vector2d a = heading_to_angles(m.heading);
    v << m.position, a;
    return v;
}

// ---------------------------------------------------------------------------
// Network

struct FusionNetwork {
    LstmWeights mag_lstm;
    LstmWeights vis_lstm;
    LstmWeights core_lstm;
    Linear head;
    int rate_ratio = 2;

    static FusionNetwork zeros(int hidden, int rate_ratio) {
        if (hidden < 1) throw ConfigError("hidden size must be >= 1");
        if (rate_ratio < 1) throw ConfigError("rate ratio must be >= 1");
        return {LstmWeights::zeros(kMagInputSize, hidden), LstmWeights::zeros(kVisInputSize, hidden),
                LstmWeights::zeros(2 * hidden, hidden), Linear::zeros(hidden, kPoseOutputSize), rate_ratio};
    }

    static FusionNetwork create(int hidden, int rate_ratio, Rng& rng) {
        FusionNetwork n = zeros(hidden, rate_ratio);
        n.mag_lstm = LstmWeights::random(kMagInputSize, hidden, rng);
        n.vis_lstm = LstmWeights::random(kVisInputSize, hidden, rng);
        n.core_lstm = LstmWeights::random(2 * hidden, hidden, rng);
        n.head = Linear::random(hidden, kPoseOutputSize, rng);
        return n;
    }

    int hidden_size() const { return static_cast<int>(core_lstm.hidden_size()); }

    std::vector<ParamView> parameters() {
        std::vector<ParamView> out;
        mag_lstm.append_views("mag.", out);
        vis_lstm.append_views("vis.", out);
        core_lstm.append_views("core.", out);
        head.append_views("head.", out);
        return out;
    }

    void validate() const {
        mag_lstm.validate();
        vis_lstm.validate();
        core_lstm.validate();
        const auto H = core_lstm.hidden_size();
        check_dims(mag_lstm.input_size() == kMagInputSize && vis_lstm.input_size() == kVisInputSize,
                   "input LSTM sizes");
        check_dims(mag_lstm.hidden_size() == H && vis_lstm.hidden_size() == H &&
                       core_lstm.input_size() == 2 * H,
                   "core LSTM must take both hidden states");
        check_dims(head.W.rows() == kPoseOutputSize && head.W.cols() == H && head.b.size() == kPoseOutputSize,
                   "head layer shape");
        if (rate_ratio < 1) throw ConfigError("rate ratio must be >= 1");
    }
};

struct NetState {
    LstmState mag, vis, core;

    static NetState zeros(int hidden) {
        return {LstmState::zeros(hidden), LstmState::zeros(hidden), LstmState::zeros(hidden)};
    }
};

/// One visual interval (prev_timestamp, timestamp] with the magnetic inputs
/// that fall inside it. `target` is empty when no ground truth is known.
struct FusedSample {
    double timestamp = 0.0;
    double prev_timestamp = 0.0;
    std::vector<Vector> mag;
    Vector vis;
    Vector target;
};

struct ForwardPass {
    std::vector<Vector> outputs;
    LstmSequence mag, vis, core;
    std::vector<Vector> in_mask, out_mask, head_in;
    NetState final_state;
};

/// Runs the network over a sequence. Dropout is applied when `rng` is given.
inline ForwardPass forward(const FusionNetwork& net, const std::vector<FusedSample>& seq, const NetState& init,
                           double dropout_rate, Rng* rng) {
    if (seq.empty()) throw DimensionError("fusion forward needs at least one sample");
    const auto r = static_cast<std::size_t>(net.rate_ratio);
    const int H = net.hidden_size();
    std::vector<Vector> mag_xs, vis_xs;
    mag_xs.reserve(seq.size() * r);
    vis_xs.reserve(seq.size());
    for (const auto& s : seq) {
        check_dims(s.mag.size() == r, "fused sample needs rate_ratio magnetic inputs");
        for (const auto& m : s.mag) mag_xs.push_back(m);
        vis_xs.push_back(s.vis);
    }
    ForwardPass f;
    f.mag = lstm_sequence_forward(mag_xs, init.mag, net.mag_lstm);
    f.vis = lstm_sequence_forward(vis_xs, init.vis, net.vis_lstm);
    std::vector<Vector> core_xs(seq.size());
    f.in_mask.resize(seq.size());
    Rng dummy(0);
    Rng& g = rng ? *rng : dummy;
    for (std::size_t t = 0; t < seq.size(); ++t) {
        Vector cat(2 * H);
        cat << f.mag.states[t * r + r - 1].h, f.vis.states[t].h;
        auto d = dropout(cat, dropout_rate, g, rng != nullptr);
        core_xs[t] = std::move(d.y);
        f.in_mask[t] = std::move(d.mask);
    }
    f.core = lstm_sequence_forward(core_xs, init.core, net.core_lstm);
    f.outputs.resize(seq.size());
    f.out_mask.resize(seq.size());
    f.head_in.resize(seq.size());
    for (std::size_t t = 0; t < seq.size(); ++t) {
        auto d = dropout(f.core.states[t].h, dropout_rate, g, rng != nullptr);
        f.head_in[t] = std::move(d.y);
        f.out_mask[t] = std::move(d.mask);
        f.outputs[t] = linear_forward(f.head_in[t], net.head.W, net.head.b);
    }
    f.final_state = {f.mag.states.back(), f.vis.states.back(), f.core.states.back()};
    return f;
}

/// Gradients of sum_t <d_outputs[t], outputs[t]> w.r.t. all weights, in a
/// network-shaped container.
inline FusionNetwork backward(const FusionNetwork& net, const ForwardPass& f, const std::vector<Vector>& d_outputs) {
    check_dims(d_outputs.size() == f.outputs.size(), "one output gradient per step");
    const int H = net.hidden_size();
    const auto r = static_cast<std::size_t>(net.rate_ratio);
    const std::size_t T = f.outputs.size();
    FusionNetwork g = FusionNetwork::zeros(H, net.rate_ratio);
    std::vector<Vector> dh_core(T);
    for (std::size_t t = 0; t < T; ++t) {
        const auto lg = linear_backward(f.head_in[t], net.head.W, d_outputs[t]);
        g.head.W += lg.W;
        g.head.b += lg.b;
        dh_core[t] = lg.x.cwiseProduct(f.out_mask[t]);
    }
    const auto gc = lstm_backward(f.core.caches, dh_core, Vector(), net.core_lstm);
    std::vector<Vector> dh_mag(T * r, Vector::Zero(H)), dh_vis(T);
    for (std::size_t t = 0; t < T; ++t) {
        const Vector dx = gc.inputs[t].cwiseProduct(f.in_mask[t]);
        dh_mag[t * r + r - 1] = dx.head(H);
        dh_vis[t] = dx.tail(H);
    }
    g.core_lstm = gc.weights;
    g.mag_lstm = lstm_backward(f.mag.caches, dh_mag, Vector(), net.mag_lstm).weights;
    g.vis_lstm = lstm_backward(f.vis.caches, dh_vis, Vector(), net.vis_lstm).weights;
    return g;
}

// ---------------------------------------------------------------------------
// Stream alignment

/// Pairs every visual interval after the first measurement with the
/// magnetic estimates whose timestamps fall inside (t_prev, t]. Intervals
/// that do not hold exactly `rate_ratio` magnetic estimates are skipped.
/// With `gt`, the target is the true relative pose across the interval.
inline std::vector<FusedSample> align_streams(const std::vector<MagMeasurement5DoF>& mag,
                                              const std::vector<VisMeasurement>& vis, int rate_ratio,
                                              const Trajectory* gt = nullptr) {
    if (rate_ratio < 1) throw ConfigError("rate ratio must be >= 1");
    if (mag.empty() || vis.size() < 2) throw AlignmentError("streams are empty");
    if (mag.back().timestamp <= vis.front().timestamp || mag.front().timestamp > vis.back().timestamp) {
        throw AlignmentError("magnetic and visual streams do not overlap in time");
    }
    std::vector<FusedSample> out;
    std::size_t j = 0;
    for (std::size_t k = 1; k < vis.size(); ++k) {
        const double t0 = vis[k - 1].timestamp, t1 = vis[k].timestamp;
        while (j < mag.size() && mag[j].timestamp <= t0) ++j;
        std::size_t e = j;
        while (e < mag.size() && mag[e].timestamp <= t1) ++e;
        if (e - j != static_cast<std::size_t>(rate_ratio)) continue;
        FusedSample s;
        s.prev_timestamp = t0;
        s.timestamp = t1;
        for (std::size_t i = j; i < e; ++i) s.mag.push_back(mag_input(mag[i]));
        s.vis = pose_to_vector(vis[k].delta);
        if (gt) s.target = pose_to_vector(relative_pose(pose_at(*gt, t0), pose_at(*gt, t1)));
        out.push_back(std::move(s));
        j = e;
    }
    if (out.empty()) throw AlignmentError("no visual interval holds a complete set of magnetic samples");
    return out;
}

/// Magnetic localization followed by alignment against the dataset's ground truth.
inline std::vector<FusedSample> fused_samples_from_dataset(const Dataset& ds, const InversionSettings& inv,
                                                           bool with_targets = true) {
    const auto mag = estimates_of(localize_stream(ds.mag, ds.config.actuator, ds.config.dipole, inv));
    return align_streams(mag, ds.vis, ds.config.rate_ratio(), with_targets ? &ds.gt : nullptr);
}

// ---------------------------------------------------------------------------
// Normalization (per-component z-score fitted on training data)

struct Normalizer {
    Vector mag_mean = Vector::Zero(kMagInputSize), mag_sd = Vector::Ones(kMagInputSize);
    Vector vis_mean = Vector::Zero(kVisInputSize), vis_sd = Vector::Ones(kVisInputSize);
    Vector tgt_mean = Vector::Zero(kPoseOutputSize), tgt_sd = Vector::Ones(kPoseOutputSize);

    static Normalizer fit(const std::vector<std::vector<FusedSample>>& seqs) {
        Normalizer n;
        auto stats = [](const std::vector<const Vector*>& xs, Eigen::Index dim, Vector& mean, Vector& sd) {
            mean = Vector::Zero(dim);
            sd = Vector::Ones(dim);
            if (xs.empty()) return;
            for (const auto* x : xs) mean += *x;
            mean /= static_cast<double>(xs.size());
            Vector var = Vector::Zero(dim);
            for (const auto* x : xs) var += (*x - mean).cwiseAbs2();
            var /= static_cast<double>(xs.size());
            for (Eigen::Index i = 0; i < dim; ++i) sd[i] = var[i] > 1e-30 ? std::sqrt(var[i]) : 1.0;
        };
        std::vector<const Vector*> mags, viss, tgts;
        for (const auto& seq : seqs) {
            for (const auto& s : seq) {
                for (const auto& m : s.mag) mags.push_back(&m);
                viss.push_back(&s.vis);
                if (s.target.size()) tgts.push_back(&s.target);
            }
        }
        stats(mags, kMagInputSize, n.mag_mean, n.mag_sd);
        stats(viss, kVisInputSize, n.vis_mean, n.vis_sd);
        stats(tgts, kPoseOutputSize, n.tgt_mean, n.tgt_sd);
        return n;
    }

    FusedSample apply(const FusedSample& s) const {
        FusedSample o = s;
        for (auto& m : o.mag) m = (m - mag_mean).cwiseQuotient(mag_sd);
        o.vis = (s.vis - vis_mean).cwiseQuotient(vis_sd);
        if (s.target.size()) o.target = (s.target - tgt_mean).cwiseQuotient(tgt_sd);
        return o;
    }

    std::vector<FusedSample> apply(const std::vector<FusedSample>& seq) const {
        std::vector<FusedSample> out;
        out.reserve(seq.size());
        for (const auto& s : seq) out.push_back(apply(s));
        return out;
    }

    Vector output_to_delta(const Vector& y) const { return y.cwiseProduct(tgt_sd) + tgt_mean; }
};

// ---------------------------------------------------------------------------
// Loss weighting and early stopping

struct BetaCalibration {
    double beta = 1.0;
    double mean_trans_residual = 0.0;
    double mean_rot_residual = 0.0;
    bool clamped = false;
};

inline BetaCalibration beta_from_residuals(double mean_trans, double mean_rot) {
    BetaCalibration b;
    b.mean_trans_residual = mean_trans;
    b.mean_rot_residual = mean_rot;
    const double raw = mean_rot > 0.0 ? mean_trans / mean_rot : std::numeric_limits<double>::infinity();
    b.beta = std::clamp(raw, 1.0, 1000.0);
    b.clamped = !(raw >= 1.0 && raw <= 1000.0);
    return b;
}

/// beta = mean translational / mean rotational residual norm of `net` over
/// normalized validation sequences, clamped to [1, 1000].
inline BetaCalibration calibrate_beta(const FusionNetwork& net, const std::vector<std::vector<FusedSample>>& val) {
    double st = 0.0, sr = 0.0;
    std::size_t n = 0;
    for (const auto& seq : val) {
        if (seq.empty()) continue;
        const auto f = forward(net, seq, NetState::zeros(net.hidden_size()), 0.0, nullptr);
        for (std::size_t t = 0; t < seq.size(); ++t) {
            if (!seq[t].target.size()) continue;
            const Vector d = f.outputs[t] - seq[t].target;
            st += d.head<3>().norm();
            sr += d.tail<3>().norm();
            ++n;
        }
    }
    if (n == 0) throw DegenerateInputError("beta calibration needs validation targets");
    return beta_from_residuals(st / n, sr / n);
}

/// Patience counter that only starts after `warmup` epochs.
class EarlyStopper {
public:
    EarlyStopper(int patience, int warmup) : patience_(patience), warmup_(warmup) {}

    /// Records epoch `epoch` (1-based). Returns true when training should stop.
    bool update(int epoch, double val_loss) {
        if (epoch <= warmup_) return false;
        if (val_loss < best_) {
            best_ = val_loss;
            best_epoch_ = epoch;
            bad_ = 0;
            return false;
        }
        return ++bad_ >= patience_;
    }

    bool improved_at(int epoch) const { return best_epoch_ == epoch; }
    int best_epoch() const { return best_epoch_; }
    double best_loss() const { return best_; }

private:
    int patience_;
    int warmup_;
    int bad_ = 0;
    int best_epoch_ = 0;
    double best_ = std::numeric_limits<double>::infinity();
};

// ---------------------------------------------------------------------------
// Training

struct TrainingConfig {
    int max_epochs = 60;
    int window = 32;        // loss-carrying steps per window
    int burn_in = 16;       // extra leading steps run without loss
    int warmup_epochs = 10; // beta is recalibrated after this many epochs
    int patience = 5;
    double lr_decay = 0.95; // per-epoch multiplier on alpha
    double clip_norm = 0.0; // global gradient norm clip, 0 = off
    std::uint64_t seed = 1;

    void validate() const {
        if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
        if (window < 1 || burn_in < 0) throw ConfigError("window must be >= 1 and burn_in >= 0");
        if (warmup_epochs < 0 || patience < 1) throw ConfigError("warmup_epochs >= 0 and patience >= 1 required");
        if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must be in (0, 1]");
        if (clip_norm < 0.0) throw ConfigError("clip_norm must be >= 0");
    }
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double beta = 1.0;
    double lr = 0.0;
};

struct Checkpoint {
    FusionNetwork net;
    Normalizer norm;
    Hyperparams hp;
    double beta = 1.0;
    int epoch = 0;
};

struct TrainResult {
    Checkpoint best;
    std::vector<EpochLog> log;
    BetaCalibration beta_calibration;
    double initial_train_loss = 0.0;  // untrained network, no dropout
    bool diverged = false;
    bool stopped_early = false;
};

/// Mean per-step pose loss of `net` on normalized sequences (no dropout).
inline double evaluate_loss(const FusionNetwork& net, const std::vector<std::vector<FusedSample>>& seqs,
                            double beta) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& seq : seqs) {
        if (seq.empty()) continue;
        const auto f = forward(net, seq, NetState::zeros(net.hidden_size()), 0.0, nullptr);
        for (std::size_t t = 0; t < seq.size(); ++t) {
            if (!seq[t].target.size()) continue;
            sum += pose_loss(f.outputs[t], seq[t].target, beta).value;
            ++n;
        }
    }
    return n ? sum / n : 0.0;
}

struct Window {
    std::size_t seq = 0;
    std::size_t begin = 0;      // first step fed to the network
    std::size_t loss_from = 0;  // first step that carries loss
    std::size_t end = 0;
};

inline std::vector<Window> make_windows(const std::vector<std::vector<FusedSample>>& seqs, int window, int burn_in) {
    std::vector<Window> out;
    for (std::size_t s = 0; s < seqs.size(); ++s) {
        const std::size_t n = seqs[s].size();
        for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(window)) {
            Window w;
            w.seq = s;
            w.loss_from = b;
            w.begin = b >= static_cast<std::size_t>(burn_in) ? b - static_cast<std::size_t>(burn_in) : 0;
            w.end = std::min(n, b + static_cast<std::size_t>(window));
            out.push_back(w);
        }
    }
    return out;
}

/// Loss and gradient of one window; the loss is the mean over loss steps.
inline double window_loss_and_grad(const FusionNetwork& net, const std::vector<FusedSample>& seq, const Window& w,
                                   double beta, double dropout_rate, Rng* rng, FusionNetwork* grad) {
    const std::vector<FusedSample> part(seq.begin() + static_cast<std::ptrdiff_t>(w.begin),
                                        seq.begin() + static_cast<std::ptrdiff_t>(w.end));
    const auto f = forward(net, part, NetState::zeros(net.hidden_size()), dropout_rate, rng);
    std::vector<Vector> dy(part.size(), Vector::Zero(kPoseOutputSize));
    double loss = 0.0;
    std::size_t n = 0;
    for (std::size_t t = w.loss_from - w.begin; t < part.size(); ++t) {
        if (part[t].target.size()) ++n;
    }
    if (n == 0) return 0.0;
    for (std::size_t t = w.loss_from - w.begin; t < part.size(); ++t) {
        if (!part[t].target.size()) continue;
        const auto l = pose_loss(f.outputs[t], part[t].target, beta);
        loss += l.value / n;
        dy[t] = l.grad / static_cast<double>(n);
    }
    if (grad) *grad = backward(net, f, dy);
    return loss;
}

using EpochHook = std::function<void(const EpochLog&)>;

/// Trains on raw (unnormalized) fused sequences. The normalizer is fitted on
/// the training set. Returns the checkpoint with the lowest validation loss
/// after the warm-up (or the last one if training never leaves warm-up).
inline TrainResult train(const std::vector<std::vector<FusedSample>>& train_raw,
                         const std::vector<std::vector<FusedSample>>& val_raw, const Hyperparams& hp,
                         const TrainingConfig& cfg, int rate_ratio, const EpochHook& on_epoch = {}) {
    hp.validate();
    cfg.validate();
    if (train_raw.empty() || val_raw.empty()) throw DegenerateInputError("training and validation sets must be non-empty");
    const Normalizer norm = Normalizer::fit(train_raw);
    std::vector<std::vector<FusedSample>> train_set, val_set;
    for (const auto& s : train_raw) train_set.push_back(norm.apply(s));
    for (const auto& s : val_raw) val_set.push_back(norm.apply(s));

    Rng rng(derive_seed(cfg.seed, 10));
    FusionNetwork net = FusionNetwork::create(hp.hidden_size, rate_ratio, rng);
    FusionNetwork grad = FusionNetwork::zeros(hp.hidden_size, rate_ratio);
    auto params = net.parameters();
    auto gviews = grad.parameters();
    AdamState adam = AdamState::for_params(params);
    auto windows = make_windows(train_set, cfg.window, cfg.burn_in);

    TrainResult res;
    double beta = hp.beta_loss;
    EarlyStopper stopper(cfg.patience, cfg.warmup_epochs);
    res.best = {net, norm, hp, beta, 0};
    res.initial_train_loss = evaluate_loss(net, train_set, beta);
    Hyperparams step_hp = hp;
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        step_hp.alpha = hp.alpha * std::pow(cfg.lr_decay, epoch - 1);
        std::shuffle(windows.begin(), windows.end(), rng);
        double sum = 0.0;
        for (const auto& w : windows) {
            FusionNetwork g;
            sum += window_loss_and_grad(net, train_set[w.seq], w, beta, hp.dropout_rate, &rng, &g);
            grad = std::move(g);
            gviews = grad.parameters();
            if (cfg.clip_norm > 0.0) {
                double sq = 0.0;
                for (const auto& v : gviews) sq += v.flat().squaredNorm();
                const double nrm = std::sqrt(sq);
                if (nrm > cfg.clip_norm)
                    for (const auto& v : gviews) v.flat() *= cfg.clip_norm / nrm;
            }
            adam_step(params, gviews, adam, step_hp);
        }
        EpochLog log{epoch, sum / static_cast<double>(windows.size()), 0.0, beta, step_hp.alpha};
        if (epoch == cfg.warmup_epochs) {
            res.beta_calibration = calibrate_beta(net, val_set);
            beta = res.beta_calibration.beta;
        }
        log.val_loss = evaluate_loss(net, val_set, beta);
        log.beta = beta;
        if (!std::isfinite(log.train_loss) || !std::isfinite(log.val_loss)) {
            res.diverged = true;
            res.log.push_back(log);
            if (on_epoch) on_epoch(log);
            break;
        }
        res.log.push_back(log);
        if (on_epoch) on_epoch(log);
        const bool stop = stopper.update(epoch, log.val_loss);
        if (epoch <= cfg.warmup_epochs || stopper.improved_at(epoch)) res.best = {net, norm, hp, beta, epoch};
        if (stop) {
            res.stopped_early = true;
            break;
        }
    }
    return res;
}

inline void write_training_log(std::ostream& os, const std::vector<EpochLog>& log) {
    os << "epoch train_loss val_loss beta lr\n";
    for (const auto& e : log) {
        os << e.epoch << ' ' << detail::format_double(e.train_loss) << ' ' << detail::format_double(e.val_loss)
           << ' ' << detail::format_double(e.beta) << ' ' << detail::format_double(e.lr) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Inference

/// Relative-pose predictions for a raw fused sequence (de-normalized).
inline std::vector<Pose> predict_deltas(const Checkpoint& ck, const std::vector<FusedSample>& raw) {
    const auto f = forward(ck.net, ck.norm.apply(raw), NetState::zeros(ck.net.hidden_size()), 0.0, nullptr);
    std::vector<Pose> out;
    out.reserve(raw.size());
    for (const auto& y : f.outputs) out.push_back(vector_to_pose(ck.norm.output_to_delta(y)));
    return out;
}

/// Integrates predicted deltas from `initial`, the pose at the first fused
/// sample's interval start. One output pose per fused sample.
inline Trajectory predict_trajectory(const Checkpoint& ck, const std::vector<MagMeasurement5DoF>& mag,
                                     const std::vector<VisMeasurement>& vis, const Pose& initial) {
    const auto raw = align_streams(mag, vis, ck.net.rate_ratio);
    const auto deltas = predict_deltas(ck, raw);
    Trajectory traj;
    Pose cur = initial;
    for (std::size_t k = 0; k < raw.size(); ++k) {
        cur = compose_pose(cur, deltas[k]);
        traj.push_back(raw[k].timestamp, cur);
    }
    return traj;
}

// ---------------------------------------------------------------------------
// Checkpoint text format

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void write_array(std::ostream& os, const std::string& name, const double* data, Eigen::Index rows,
                        Eigen::Index cols) {
    os << "array " << name << ' ' << rows << ' ' << cols;
    for (Eigen::Index k = 0; k < rows * cols; ++k) os << ' ' << format_double(data[k]);
    os << '\n';
}

inline std::vector<std::pair<std::string, ParamView>> checkpoint_arrays(Checkpoint& ck) {
    std::vector<std::pair<std::string, ParamView>> out;
    for (auto& v : ck.net.parameters()) out.emplace_back(v.name, v);
    auto add = [&](const std::string& n, Vector& v) { out.emplace_back(n, view_of(n, v)); };
    add("norm.mag_mean", ck.norm.mag_mean);
    add("norm.mag_sd", ck.norm.mag_sd);
    add("norm.vis_mean", ck.norm.vis_mean);
    add("norm.vis_sd", ck.norm.vis_sd);
    add("norm.tgt_mean", ck.norm.tgt_mean);
    add("norm.tgt_sd", ck.norm.tgt_sd);
    return out;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck_in) {
    Checkpoint ck = ck_in;
    using detail::format_double;
    os << "vmfuse-checkpoint " << kCheckpointVersion << '\n';
    os << "hidden " << ck.net.hidden_size() << " rate_ratio " << ck.net.rate_ratio << '\n';
    os << "hp alpha=" << format_double(ck.hp.alpha) << " beta1=" << format_double(ck.hp.beta1)
       << " beta2=" << format_double(ck.hp.beta2) << " epsilon=" << format_double(ck.hp.epsilon)
       << " epsilon_inside_sqrt=" << (ck.hp.epsilon_inside_sqrt ? 1 : 0)
       << " beta_loss=" << format_double(ck.hp.beta_loss) << " dropout_rate=" << format_double(ck.hp.dropout_rate)
       << " hidden_size=" << ck.hp.hidden_size << '\n';
    os << "beta " << format_double(ck.beta) << " epoch " << ck.epoch << '\n';
    for (auto& [name, v] : detail::checkpoint_arrays(ck)) detail::write_array(os, name, v.data, v.rows, v.cols);
    os << "end\n";
}

inline Checkpoint read_checkpoint(std::istream& is) {
    detail::LineReader reader(is);
    std::string line;
    auto next = [&]() -> std::vector<std::string_view> {
        while (reader.next(line)) {
            auto t = detail::split_ws(detail::trim(line));
            if (!t.empty() && t[0].front() != '#') return t;
        }
        throw ParseError(reader.number(), "unexpected end of checkpoint");
    };
    auto toks = next();
    if (toks.size() != 2 || toks[0] != "vmfuse-checkpoint") throw ParseError(reader.number(), "not a checkpoint");
    if (detail::parse_int(toks[1], reader.number()) != kCheckpointVersion) {
        throw VersionError("unsupported checkpoint version " + std::string(toks[1]));
    }
    toks = next();
    if (toks.size() != 4 || toks[0] != "hidden" || toks[2] != "rate_ratio") {
        throw ParseError(reader.number(), "expected 'hidden H rate_ratio R'");
    }
    const auto H = detail::parse_int(toks[1], reader.number());
    const auto R = detail::parse_int(toks[3], reader.number());
    if (H < 1 || R < 1) throw ParseError(reader.number(), "hidden and rate_ratio must be >= 1");
    Checkpoint ck{FusionNetwork::zeros(static_cast<int>(H), static_cast<int>(R)), Normalizer{}, Hyperparams{}, 1.0, 0};

    toks = next();
    if (toks.empty() || toks[0] != "hp") throw ParseError(reader.number(), "expected hyperparameter line");
    const auto kv = detail::parse_kv_tokens(toks, 1, reader.number());
    for (const auto& [k, v] : kv) {
        const auto ln = reader.number();
        if (k == "alpha") ck.hp.alpha = detail::parse_double(v, ln);
        else if (k == "beta1") ck.hp.beta1 = detail::parse_double(v, ln);
        else if (k == "beta2") ck.hp.beta2 = detail::parse_double(v, ln);
        else if (k == "epsilon") ck.hp.epsilon = detail::parse_double(v, ln);
        else if (k == "epsilon_inside_sqrt") ck.hp.epsilon_inside_sqrt = detail::parse_int(v, ln) != 0;
        else if (k == "beta_loss") ck.hp.beta_loss = detail::parse_double(v, ln);
        else if (k == "dropout_rate") ck.hp.dropout_rate = detail::parse_double(v, ln);
        else if (k == "hidden_size") ck.hp.hidden_size = static_cast<int>(detail::parse_int(v, ln));
        else throw ParseError(ln, "unknown hyperparameter '" + k + "'");
    }
    toks = next();
    if (toks.size() != 4 || toks[0] != "beta" || toks[2] != "epoch") throw ParseError(reader.number(), "expected 'beta B epoch E'");
    ck.beta = detail::parse_double(toks[1], reader.number());
    ck.epoch = static_cast<int>(detail::parse_int(toks[3], reader.number()));

    auto arrays = detail::checkpoint_arrays(ck);
    std::map<std::string, ParamView> by_name(arrays.begin(), arrays.end());
    std::map<std::string, bool> seen;
    for (;;) {
        toks = next();
        const auto ln = reader.number();
        if (toks.size() == 1 && toks[0] == "end") break;
        if (toks.size() < 4 || toks[0] != "array") throw ParseError(ln, "expected array record");
        const std::string name(toks[1]);
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ParseError(ln, "unknown array '" + name + "'");
        const auto rows = detail::parse_int(toks[2], ln), cols = detail::parse_int(toks[3], ln);
        if (rows != it->second.rows || cols != it->second.cols) {
            throw DimensionError("array '" + name + "' has shape " + std::to_string(rows) + "x" +
                                 std::to_string(cols) + ", expected " + std::to_string(it->second.rows) + "x" +
                                 std::to_string(it->second.cols));
        }
        if (static_cast<std::int64_t>(toks.size()) != 4 + rows * cols) throw ParseError(ln, "array '" + name + "' is truncated");
        for (std::int64_t k = 0; k < rows * cols; ++k) it->second.data[k] = detail::parse_double(toks[4 + k], ln);
        seen[name] = true;
    }
    for (const auto& [name, v] : by_name) {
        if (!seen.count(name)) throw ParseError(reader.number(), "missing array '" + name + "'");
    }
    return ck;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path);
    if (!os) throw Error("cannot open '" + path + "' for writing");
    write_checkpoint(os, ck);
    if (!os) throw Error("write to '" + path + "' failed");
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open '" + path + "'");
    return read_checkpoint(is);
}

}  // namespace vmfuse
