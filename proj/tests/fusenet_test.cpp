#include <gtest/gtest.h>

#include <sstream>

#include "vmfuse/fusenet.hpp"

using namespace vmfuse;

namespace {

Vector rvec(Eigen::Index n, Rng& rng) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = uniform(rng, -1.0, 1.0);
    return v;
}

std::vector<FusedSample> random_sequence(std::size_t T, int rate_ratio, Rng& rng) {
    std::vector<FusedSample> seq;
    for (std::size_t t = 0; t < T; ++t) {
        FusedSample s;
        s.prev_timestamp = 0.04 * t;
        s.timestamp = 0.04 * (t + 1);
        for (int k = 0; k < rate_ratio; ++k) s.mag.push_back(rvec(kMagInputSize, rng));
        s.vis = rvec(kVisInputSize, rng);
        s.target = rvec(kPoseOutputSize, rng);
        seq.push_back(std::move(s));
    }
    return seq;
}

std::vector<Vector> flatten(FusionNetwork& n) {
    std::vector<Vector> out;
    for (const auto& v : n.parameters()) out.push_back(v.flat());
    return out;
}

std::vector<MagMeasurement5DoF> mag_stream(std::size_t n, double rate) {
    std::vector<MagMeasurement5DoF> out;
    for (std::size_t k = 0; k < n; ++k) out.push_back({k / rate, Vec3(0.001 * k, 0.0, -0.07), Vec3::UnitX()});
    return out;
}

std::vector<VisMeasurement> vis_stream(std::size_t n, double rate) {
    std::vector<VisMeasurement> out;
    for (std::size_t k = 0; k < n; ++k) out.push_back({k / rate, {Vec3(0.001, 0.0, 0.0), Vec3::Zero()}});
    return out;
}

}  // namespace

TEST(FusionGradients, FullNetworkMatchesFiniteDifferences) {
    Rng rng(61);
    for (int inst = 0; inst < 20; ++inst) {
        const int H = 2 + inst % 3, R = 1 + inst % 3;
        const std::size_t T = 2 + inst % 4;
        FusionNetwork net = FusionNetwork::create(H, R, rng);
        const auto seq = random_sequence(T, R, rng);
        const double rate = inst % 2 ? 0.3 : 0.0;
        const std::uint64_t mask_seed = 1000 + inst;
        const double beta = uniform(rng, 1.0, 5.0);
        auto loss = [&] {
            Rng mr(mask_seed);
            const auto f = forward(net, seq, NetState::zeros(H), rate, &mr);
            double l = 0.0;
            for (std::size_t t = 0; t < T; ++t) l += pose_loss(f.outputs[t], seq[t].target, beta).value;
            return l;
        };
        Rng mr(mask_seed);
        const auto f = forward(net, seq, NetState::zeros(H), rate, &mr);
        std::vector<Vector> dy;
        for (std::size_t t = 0; t < T; ++t) dy.push_back(pose_loss(f.outputs[t], seq[t].target, beta).grad);
        FusionNetwork g = backward(net, f, dy);
        const auto fd = finite_difference_gradient(loss, net.parameters());
        ASSERT_LT(gradient_relative_error(flatten(g), fd), 1e-5) << inst;
    }
}

TEST(Fusion, ForwardIsDeterministicWithoutDropout) {
    Rng rng(3);
    const FusionNetwork net = FusionNetwork::create(4, 2, rng);
    const auto seq = random_sequence(6, 2, rng);
    const auto a = forward(net, seq, NetState::zeros(4), 0.25, nullptr);
    const auto b = forward(net, seq, NetState::zeros(4), 0.0, nullptr);
    for (std::size_t t = 0; t < seq.size(); ++t) EXPECT_EQ(a.outputs[t], b.outputs[t]);
}

TEST(Fusion, StatePersistsAcrossCalls) {
    Rng rng(4);
    const FusionNetwork net = FusionNetwork::create(3, 2, rng);
    const auto seq = random_sequence(8, 2, rng);
    const auto whole = forward(net, seq, NetState::zeros(3), 0.0, nullptr);
    const std::vector<FusedSample> first(seq.begin(), seq.begin() + 3), rest(seq.begin() + 3, seq.end());
    const auto a = forward(net, first, NetState::zeros(3), 0.0, nullptr);
    const auto b = forward(net, rest, a.final_state, 0.0, nullptr);
    for (std::size_t t = 0; t < rest.size(); ++t) EXPECT_LT((b.outputs[t] - whole.outputs[t + 3]).norm(), 1e-15);
}

TEST(Fusion, RejectsWrongMagCount) {
    Rng rng(5);
    const FusionNetwork net = FusionNetwork::create(3, 2, rng);
    auto seq = random_sequence(2, 2, rng);
    seq[1].mag.pop_back();
    EXPECT_THROW(forward(net, seq, NetState::zeros(3), 0.0, nullptr), DimensionError);
}

TEST(Align, HundredMagFiftyVisGivesFortyNine) {
    const auto fused = align_streams(mag_stream(100, 50.0), vis_stream(50, 25.0), 2);
    ASSERT_EQ(fused.size(), 49u);
    for (const auto& s : fused) {
        EXPECT_EQ(s.mag.size(), 2u);
        EXPECT_EQ(s.vis.size(), kVisInputSize);
        EXPECT_EQ(s.target.size(), 0);
    }
    // The second magnetic input of the first interval is the one at t = 0.04.
    EXPECT_NEAR(fused[0].mag[1][0], 0.002, 1e-15);
}

TEST(Align, SkipsIntervalsWithMissingMagnetic) {
    auto mag = mag_stream(100, 50.0);
    mag.erase(mag.begin() + 10);  // t = 0.2 falls in (0.16, 0.2]
    const auto fused = align_streams(mag, vis_stream(50, 25.0), 2);
    EXPECT_EQ(fused.size(), 48u);
    for (const auto& s : fused) EXPECT_NE(s.timestamp, 0.2);
}

TEST(Align, NonOverlappingStreamsThrow) {
    auto mag = mag_stream(50, 50.0);
    for (auto& m : mag) m.timestamp += 100.0;
    EXPECT_THROW(align_streams(mag, vis_stream(50, 25.0), 2), AlignmentError);
    EXPECT_THROW(align_streams({}, vis_stream(50, 25.0), 2), AlignmentError);
}

TEST(Align, TargetsAreTrueRelativePoses) {
    SimConfig c;
    c.duration = 4.0;
    c.mag_noise_sd = 0.0;
    const auto ds = simulate_dataset(c);
    const auto fused = fused_samples_from_dataset(ds, InversionSettings{});
    EXPECT_EQ(fused.size(), ds.vis.size() - 1);
    for (const auto& s : fused) {
        const Pose expect = relative_pose(pose_at(ds.gt, s.prev_timestamp), pose_at(ds.gt, s.timestamp));
        EXPECT_LT((s.target - pose_to_vector(expect)).norm(), 1e-15);
    }
}

TEST(Normalizer, ZScoresAndInverts) {
    Rng rng(9);
    std::vector<std::vector<FusedSample>> seqs = {random_sequence(50, 2, rng), random_sequence(30, 2, rng)};
    for (auto& seq : seqs)
        for (auto& s : seq) s.target = 3.0 * s.target + Vector::Constant(6, 0.5);
    const auto n = Normalizer::fit(seqs);
    Vector mean = Vector::Zero(6), sq = Vector::Zero(6);
    std::size_t count = 0;
    for (const auto& seq : seqs) {
        for (const auto& s : n.apply(seq)) {
            mean += s.target;
            sq += s.target.cwiseAbs2();
            ++count;
        }
    }
    EXPECT_LT((mean / count).norm(), 1e-12);
    EXPECT_LT((sq / count - Vector::Ones(6)).norm(), 1e-12);
    const auto& s0 = seqs[0][0];
    EXPECT_LT((n.output_to_delta(n.apply(s0).target) - s0.target).norm(), 1e-14);
}

TEST(Beta, DocumentedRatioAndClamp) {
    const auto b = beta_from_residuals(0.5, 0.01);
    EXPECT_DOUBLE_EQ(b.beta, 50.0);
    EXPECT_FALSE(b.clamped);
    const auto lo = beta_from_residuals(0.01, 0.5);
    EXPECT_EQ(lo.beta, 1.0);
    EXPECT_TRUE(lo.clamped);
    const auto hi = beta_from_residuals(5.0, 1e-6);
    EXPECT_EQ(hi.beta, 1000.0);
    EXPECT_TRUE(hi.clamped);
}

TEST(Beta, CalibrationUsesNetworkResiduals) {
    // A zero network outputs 0, so the residuals are the targets themselves.
    FusionNetwork net = FusionNetwork::zeros(3, 2);
    Rng rng(2);
    auto seq = random_sequence(10, 2, rng);
    double st = 0.0, sr = 0.0;
    for (auto& s : seq) {
        s.target << 3, 4, 0, 0.1, 0, 0;
        st += 5.0;
        sr += 0.1;
    }
    const auto b = calibrate_beta(net, {seq});
    EXPECT_NEAR(b.beta, st / sr, 1e-12);
}

TEST(EarlyStop, TriggersAfterPatienceOncePastWarmup) {
    EarlyStopper s(3, 10);
    int stopped = 0;
    for (int epoch = 1; epoch <= 50; ++epoch) {
        if (s.update(epoch, 1.0 + 0.1 * epoch)) {
            stopped = epoch;
            break;
        }
    }
    EXPECT_EQ(stopped, 14);
    EXPECT_EQ(s.best_epoch(), 11);
}

TEST(EarlyStop, ImprovementResetsCounter) {
    EarlyStopper s(2, 0);
    EXPECT_FALSE(s.update(1, 5.0));
    EXPECT_FALSE(s.update(2, 6.0));
    EXPECT_FALSE(s.update(3, 4.0));
    EXPECT_FALSE(s.update(4, 4.5));
    EXPECT_TRUE(s.update(5, 4.5));
    EXPECT_EQ(s.best_epoch(), 3);
}

TEST(Windows, CoverEverySequenceStepOnce) {
    Rng rng(1);
    std::vector<std::vector<FusedSample>> seqs = {random_sequence(70, 2, rng), random_sequence(5, 2, rng)};
    const auto w = make_windows(seqs, 32, 16);
    ASSERT_EQ(w.size(), 4u);
    EXPECT_EQ(w[0].begin, 0u);
    EXPECT_EQ(w[1].begin, 16u);
    EXPECT_EQ(w[1].loss_from, 32u);
    EXPECT_EQ(w[2].end, 70u);
    EXPECT_EQ(w[3].seq, 1u);
    EXPECT_EQ(w[3].end, 5u);
}

TEST(Checkpoint, RoundTripPreservesPredictions) {
    Rng rng(12);
    Checkpoint ck{FusionNetwork::create(4, 2, rng), Normalizer{}, Hyperparams{}, 2.5, 7};
    ck.norm.tgt_sd = Vector::Constant(6, 1.0 / 3.0);
    ck.norm.mag_mean = Vector::Constant(5, 0.1);
    std::stringstream ss;
    write_checkpoint(ss, ck);
    const auto back = read_checkpoint(ss);
    EXPECT_EQ(back.beta, 2.5);
    EXPECT_EQ(back.epoch, 7);
    const auto seq = random_sequence(10, 2, rng);
    const auto a = predict_deltas(ck, seq), b = predict_deltas(back, seq);
    for (std::size_t t = 0; t < seq.size(); ++t) {
        EXPECT_EQ(a[t].t, b[t].t);
        EXPECT_EQ(a[t].r, b[t].r);
    }
    std::stringstream again;
    write_checkpoint(again, back);
    EXPECT_EQ(again.str(), ss.str());
}

TEST(Checkpoint, RejectsVersionShapeAndTruncation) {
    Rng rng(1);
    Checkpoint ck{FusionNetwork::create(3, 2, rng), Normalizer{}, Hyperparams{}, 1.0, 0};
    std::stringstream ss;
    write_checkpoint(ss, ck);
    const std::string text = ss.str();

    std::string v = text;
    v.replace(v.find("vmfuse-checkpoint 1"), 19, "vmfuse-checkpoint 2");
    std::stringstream vs(v);
    EXPECT_THROW(read_checkpoint(vs), VersionError);

    std::string shape = text;
    shape.replace(shape.find("hidden 3"), 8, "hidden 4");
    std::stringstream shs(shape);
    EXPECT_THROW(read_checkpoint(shs), DimensionError);

    std::stringstream cut(text.substr(0, text.size() / 2));
    EXPECT_THROW(read_checkpoint(cut), ParseError);
}

TEST(Predict, TrajectoryHasOnePosePerFusedSample) {
    Rng rng(8);
    Checkpoint ck{FusionNetwork::zeros(3, 2), Normalizer{}, Hyperparams{}, 1.0, 0};
    const auto mag = mag_stream(100, 50.0);
    const auto vis = vis_stream(50, 25.0);
    const auto traj = predict_trajectory(ck, mag, vis, Pose::identity());
    EXPECT_EQ(traj.size(), 49u);
    // A zero network with identity normalization predicts zero deltas.
    for (const auto& s : traj) EXPECT_EQ(s.pose, Pose::identity());
}

TEST(Train, DeterministicAndLossFalls) {
    SimConfig c;
    c.duration = 20.0;
    c.motion_profile = MotionProfile::slow_incremental;
    std::vector<std::vector<FusedSample>> tr, va;
    for (std::uint64_t s = 1; s <= 3; ++s) {
        c.seed = s;
        (s < 3 ? tr : va).push_back(fused_samples_from_dataset(simulate_dataset(c), InversionSettings{}));
    }
    Hyperparams hp;
    hp.hidden_size = 6;
    hp.dropout_rate = 0.0;
    hp.alpha = 0.01;
    TrainingConfig tc;
    tc.max_epochs = 12;
    tc.warmup_epochs = 3;
    const auto a = train(tr, va, hp, tc, 2);
    const auto b = train(tr, va, hp, tc, 2);
    ASSERT_EQ(a.log.size(), b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        EXPECT_EQ(a.log[i].train_loss, b.log[i].train_loss);
        EXPECT_EQ(a.log[i].val_loss, b.log[i].val_loss);
    }
    std::stringstream ca, cb;
    write_checkpoint(ca, a.best);
    write_checkpoint(cb, b.best);
    EXPECT_EQ(ca.str(), cb.str());
    EXPECT_LT(a.log.back().train_loss, 0.5 * a.initial_train_loss);
    // Beta switches to the calibrated value at the end of the warm-up.
    EXPECT_EQ(a.log[1].beta, hp.beta_loss);
    EXPECT_EQ(a.log[2].beta, a.beta_calibration.beta);
}
