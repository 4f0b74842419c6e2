#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "vmfuse/neuralcore.hpp"

using namespace vmfuse;

namespace {

// Plain-loop LSTM used as an independent reference.
struct ScalarLstm {
    int in, hid;
    std::vector<std::vector<double>> w[8];  // ix ih fx fh gx gh ox oh

    explicit ScalarLstm(const LstmWeights& lw) : in(static_cast<int>(lw.input_size())), hid(static_cast<int>(lw.hidden_size())) {
        const Matrix* ms[8] = {&lw.Wix, &lw.Wih, &lw.Wfx, &lw.Wfh, &lw.Wgx, &lw.Wgh, &lw.Wox, &lw.Woh};
        for (int k = 0; k < 8; ++k) {
            w[k].assign(hid, std::vector<double>(ms[k]->cols()));
            for (int r = 0; r < hid; ++r)
                for (int c = 0; c < ms[k]->cols(); ++c) w[k][r][c] = (*ms[k])(r, c);
        }
    }

    void step(const std::vector<double>& x, std::vector<double>& h, std::vector<double>& c) const {
        std::vector<double> nh(hid), nc(hid);
        for (int r = 0; r < hid; ++r) {
            double a[4] = {0, 0, 0, 0};
            for (int g = 0; g < 4; ++g) {
                for (int j = 0; j < in; ++j) a[g] += w[2 * g][r][j] * x[j];
                for (int j = 0; j < hid; ++j) a[g] += w[2 * g + 1][r][j] * h[j];
            }
            const double i = 1.0 / (1.0 + std::exp(-a[0]));
            const double f = 1.0 / (1.0 + std::exp(-a[1]));
            const double gg = std::tanh(a[2]);
            const double o = 1.0 / (1.0 + std::exp(-a[3]));
            nc[r] = f * c[r] + i * gg;
            nh[r] = o * std::tanh(nc[r]);
        }
        h = nh;
        c = nc;
    }
};

Vector random_vector(Eigen::Index n, Rng& rng, double scale = 1.0) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = uniform(rng, -scale, scale);
    return v;
}

LstmWeights random_weights(Eigen::Index in, Eigen::Index hid, Rng& rng) {
    LstmWeights w = LstmWeights::zeros(in, hid);
    for (auto& [name, m] : w.named())
        for (Eigen::Index k = 0; k < m->size(); ++k) m->data()[k] = uniform(rng, -0.8, 0.8);
    return w;
}

std::vector<Vector> grads_of(LstmWeights& w) {
    std::vector<Vector> out;
    for (auto& [name, m] : w.named()) out.push_back(Eigen::Map<Vector>(m->data(), m->size()));
    return out;
}

}  // namespace

TEST(Lstm, ZeroWeightsHandCases) {
    const LstmWeights w = LstmWeights::zeros(3, 2);
    const Vector x = Vector::Constant(3, 0.7);
    auto [s0, k0] = lstm_cell_forward(x, LstmState::zeros(2), w);
    EXPECT_EQ(s0.h, Vector::Zero(2));
    EXPECT_EQ(s0.c, Vector::Zero(2));
    // All gates sit at sigmoid(0) = 0.5 and g = 0, so c = 0.5 c' and h = 0.5 tanh(c).
    auto [s1, k1] = lstm_cell_forward(x, {Vector::Zero(2), Vector::Constant(2, 2.0)}, w);
    EXPECT_NEAR(s1.c[0], 1.0, 1e-15);
    EXPECT_NEAR(s1.h[0], 0.380797, 1e-6);
    EXPECT_NEAR(s1.h[1], 0.5 * std::tanh(1.0), 1e-15);
}

TEST(Lstm, ScalarHandCase) {
    // 1x1 weights: i = f = o = sigmoid(1), g = tanh(1) at x = 1, h' = c' = 0.
    LstmWeights w = LstmWeights::zeros(1, 1);
    w.Wix(0, 0) = w.Wfx(0, 0) = w.Wgx(0, 0) = w.Wox(0, 0) = 1.0;
    auto [s, k] = lstm_cell_forward(Vector::Ones(1), LstmState::zeros(1), w);
    const double sg = 1.0 / (1.0 + std::exp(-1.0));
    EXPECT_NEAR(s.c[0], sg * std::tanh(1.0), 1e-15);
    EXPECT_NEAR(s.h[0], sg * std::tanh(sg * std::tanh(1.0)), 1e-15);
    EXPECT_NEAR(s.h[0], 0.369606, 1e-6);
}

TEST(Lstm, MatchesScalarOracle) {
    Rng rng(31);
    for (int inst = 0; inst < 25; ++inst) {
        const int in = 1 + inst % 5, hid = 1 + (inst * 3) % 7;
        const LstmWeights w = random_weights(in, hid, rng);
        const ScalarLstm ref(w);
        std::vector<Vector> xs;
        for (int t = 0; t < 12; ++t) xs.push_back(random_vector(in, rng, 2.0));
        const LstmState init{random_vector(hid, rng), random_vector(hid, rng)};
        const auto seq = lstm_sequence_forward(xs, init, w);
        std::vector<double> h(init.h.data(), init.h.data() + hid), c(init.c.data(), init.c.data() + hid);
        for (int t = 0; t < 12; ++t) {
            ref.step(std::vector<double>(xs[t].data(), xs[t].data() + in), h, c);
            for (int r = 0; r < hid; ++r) {
                ASSERT_NEAR(seq.states[t].h[r], h[r], 1e-12);
                ASSERT_NEAR(seq.states[t].c[r], c[r], 1e-12);
            }
        }
    }
}

TEST(Lstm, RejectsMismatchedSizes) {
    const LstmWeights w = LstmWeights::zeros(3, 2);
    EXPECT_THROW(lstm_cell_forward(Vector::Zero(4), LstmState::zeros(2), w), DimensionError);
    EXPECT_THROW(lstm_cell_forward(Vector::Zero(3), LstmState::zeros(3), w), DimensionError);
    EXPECT_THROW(lstm_sequence_forward({}, LstmState::zeros(2), w), DimensionError);
}

TEST(Gradients, LstmCellMatchesFiniteDifferences) {
    Rng rng(41);
    for (int inst = 0; inst < 20; ++inst) {
        const int in = 2 + inst % 3, hid = 2 + inst % 4;
        LstmWeights w = random_weights(in, hid, rng);
        const Vector x = random_vector(in, rng);
        const LstmState prev{random_vector(hid, rng), random_vector(hid, rng)};
        const Vector a = random_vector(hid, rng), b = random_vector(hid, rng);
        auto loss = [&] {
            auto [s, k] = lstm_cell_forward(x, prev, w);
            return a.dot(s.h) + b.dot(s.c);
        };
        auto [s, k] = lstm_cell_forward(x, prev, w);
        const auto g = lstm_backward({k}, {a}, b, w);
        std::vector<ParamView> views;
        w.append_views("", views);
        const auto fd = finite_difference_gradient(loss, views);
        LstmWeights gw = g.weights;
        ASSERT_LT(gradient_relative_error(grads_of(gw), fd), 1e-5) << inst;

        // Inputs and initial state through the same oracle.
        Vector xv = x;
        LstmState pv = prev;
        auto loss_in = [&] {
            auto [s2, k2] = lstm_cell_forward(xv, pv, w);
            return a.dot(s2.h) + b.dot(s2.c);
        };
        const auto fdi = finite_difference_gradient(loss_in, {view_of("x", xv), view_of("h", pv.h), view_of("c", pv.c)});
        ASSERT_LT(gradient_relative_error({g.inputs[0], g.init.h, g.init.c}, fdi), 1e-5) << inst;
    }
}

TEST(Gradients, SequenceBpttMatchesFiniteDifferences) {
    Rng rng(43);
    for (int inst = 0; inst < 20; ++inst) {
        const int in = 1 + inst % 4, hid = 2 + inst % 5, T = 3 + inst % 6;
        LstmWeights w = random_weights(in, hid, rng);
        std::vector<Vector> xs, as;
        for (int t = 0; t < T; ++t) {
            xs.push_back(random_vector(in, rng));
            as.push_back(random_vector(hid, rng));
        }
        const LstmState init{random_vector(hid, rng), random_vector(hid, rng)};
        auto loss = [&] {
            const auto seq = lstm_sequence_forward(xs, init, w);
            double l = 0.0;
            for (int t = 0; t < T; ++t) l += as[t].dot(seq.states[t].h);
            return l;
        };
        const auto seq = lstm_sequence_forward(xs, init, w);
        const auto g = lstm_backward(seq.caches, as, Vector(), w);
        std::vector<ParamView> views;
        w.append_views("", views);
        LstmWeights gw = g.weights;
        ASSERT_LT(gradient_relative_error(grads_of(gw), finite_difference_gradient(loss, views)), 1e-5) << inst;

        std::vector<ParamView> xv;
        for (int t = 0; t < T; ++t) xv.push_back(view_of("x", xs[t]));
        ASSERT_LT(gradient_relative_error(g.inputs, finite_difference_gradient(loss, xv)), 1e-5) << inst;
    }
}

TEST(Gradients, LinearMatchesFiniteDifferences) {
    Rng rng(47);
    for (int inst = 0; inst < 20; ++inst) {
        const int in = 1 + inst % 6, out = 1 + inst % 4;
        Linear l = Linear::random(in, out, rng);
        l.b = random_vector(out, rng);
        Vector x = random_vector(in, rng);
        const Vector a = random_vector(out, rng);
        auto loss = [&] { return a.dot(linear_forward(x, l.W, l.b)); };
        const auto g = linear_backward(x, l.W, a);
        const auto fd = finite_difference_gradient(loss, {view_of("W", l.W), view_of("b", l.b), view_of("x", x)});
        const Vector gw = Eigen::Map<const Vector>(g.W.data(), g.W.size());
        ASSERT_LT(gradient_relative_error({gw, g.b, g.x}, fd), 1e-7) << inst;
    }
}

TEST(Gradients, PoseLossMatchesFiniteDifferences) {
    Rng rng(53);
    for (int inst = 0; inst < 20; ++inst) {
        Vector p = random_vector(6, rng);
        const Vector q = random_vector(6, rng);
        const double beta = uniform(rng, 0.5, 20.0);
        auto loss = [&] { return pose_loss(p, q, beta).value; };
        const auto fd = finite_difference_gradient(loss, {view_of("p", p)});
        ASSERT_LT(gradient_relative_error({pose_loss(p, q, beta).grad}, fd), 1e-5) << inst;
    }
}

TEST(PoseLoss, ValuesAndZeroSubgradient) {
    Vector p(6), q = Vector::Zero(6);
    p << 3, 4, 0, 0, 0, 0.5;
    const auto l = pose_loss(p, q, 2.0);
    EXPECT_DOUBLE_EQ(l.value, 5.0 + 2.0 * 0.5);
    EXPECT_NEAR(l.grad[0], 0.6, 1e-15);
    EXPECT_NEAR(l.grad[5], 2.0, 1e-15);
    const auto z = pose_loss(q, q, 3.0);
    EXPECT_EQ(z.value, 0.0);
    EXPECT_EQ(z.grad, Vector::Zero(6));
    EXPECT_THROW(pose_loss(Vector::Zero(5), q, 1.0), DimensionError);
}

TEST(Dropout, InferenceIdentityAndTrainingMask) {
    Rng rng(5);
    const Vector x = Vector::LinSpaced(1000, -1.0, 1.0);
    const auto inf = dropout(x, 0.25, rng, false);
    EXPECT_EQ(inf.y, x);
    const auto tr = dropout(x, 0.25, rng, true);
    int zeros = 0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        ASSERT_TRUE(tr.mask[i] == 0.0 || std::abs(tr.mask[i] - 1.0 / 0.75) < 1e-15);
        ASSERT_EQ(tr.y[i], x[i] * tr.mask[i]);
        zeros += tr.mask[i] == 0.0;
    }
    EXPECT_NEAR(zeros / 1000.0, 0.25, 0.05);
    EXPECT_NEAR(tr.mask.mean(), 1.0, 0.08);
    EXPECT_THROW(dropout(x, 1.0, rng, true), RangeError);
}

TEST(Adam, HandComputedScalarStep) {
    Hyperparams hp;
    for (bool inside : {false, true}) {
        hp.epsilon_inside_sqrt = inside;
        Vector w = Vector::Ones(1), g = Vector::Constant(1, 2.0);
        std::vector<ParamView> p = {view_of("w", w)}, gv = {view_of("g", g)};
        AdamState st = AdamState::for_params(p);
        adam_step(p, gv, st, hp);
        EXPECT_NEAR(w[0], 0.999000, 5e-7);
        EXPECT_EQ(st.t, 1);
    }
}

TEST(Adam, FirstStepMagnitudeIsAlphaAcrossScales) {
    Hyperparams hp;
    for (double scale = 1e-3; scale <= 1e3 * 1.0001; scale *= 10.0) {
        for (double sign : {-1.0, 1.0}) {
            Vector w = Vector::Zero(1), g = Vector::Constant(1, sign * scale);
            std::vector<ParamView> p = {view_of("w", w)}, gv = {view_of("g", g)};
            AdamState st = AdamState::for_params(p);
            adam_step(p, gv, st, hp);
            EXPECT_NEAR(std::abs(w[0]), hp.alpha, 0.01 * hp.alpha) << scale;
            EXPECT_LT(w[0] * sign, 0.0);
        }
    }
}

TEST(Adam, EpsilonInsideSqrtShrinksSmallGradientSteps) {
    Hyperparams hp;
    hp.epsilon_inside_sqrt = true;
    Vector w = Vector::Zero(1), g = Vector::Constant(1, 1e-3);
    std::vector<ParamView> p = {view_of("w", w)}, gv = {view_of("g", g)};
    AdamState st = AdamState::for_params(p);
    adam_step(p, gv, st, hp);
    // v = 1e-9 after one step, so eps = 1e-8 dominates the root.
    const double v = 1e-3 * 1e-6;
    const double k = std::sqrt(1.0 - 0.999) / (1.0 - 0.9);
    EXPECT_NEAR(-w[0], hp.alpha * k * 1e-4 / std::sqrt(v + 1e-8), 1e-15);
    EXPECT_LT(-w[0], 0.35 * hp.alpha);
}

TEST(Adam, MatchesScalarRecurrenceOverManySteps) {
    Hyperparams hp;
    Rng rng(2);
    Vector w = random_vector(4, rng), g(4);
    std::vector<double> rw(w.data(), w.data() + 4), rm(4, 0.0), rv(4, 0.0);
    std::vector<ParamView> p = {view_of("w", w)}, gv = {view_of("g", g)};
    AdamState st = AdamState::for_params(p);
    for (int t = 1; t <= 30; ++t) {
        const Vector fresh = random_vector(4, rng, 3.0);
        g = fresh;  // copy keeps the viewed buffer
        adam_step(p, gv, st, hp);
        const double k = std::sqrt(1.0 - std::pow(0.999, t)) / (1.0 - std::pow(0.9, t));
        for (int i = 0; i < 4; ++i) {
            rm[i] = 0.9 * rm[i] + 0.1 * g[i];
            rv[i] = 0.999 * rv[i] + 0.001 * g[i] * g[i];
            rw[i] -= 0.001 * k * rm[i] / (std::sqrt(rv[i]) + 1e-8);
            ASSERT_NEAR(w[i], rw[i], 1e-14);
        }
    }
}

TEST(Adam, RejectsMismatchedState) {
    Hyperparams hp;
    Vector w = Vector::Zero(2), g = Vector::Zero(3);
    std::vector<ParamView> p = {view_of("w", w)}, gv = {view_of("g", g)};
    AdamState st = AdamState::for_params(p);
    EXPECT_THROW(adam_step(p, gv, st, hp), DimensionError);
}

TEST(FiniteDifference, QuadraticAndRestoresParameters) {
    Vector x(3);
    x << 1.0, -2.0, 0.5;
    const Vector before = x;
    auto f = [&] { return x.squaredNorm() + 3.0 * x[0]; };
    const auto g = finite_difference_gradient(f, {view_of("x", x)});
    EXPECT_EQ(x, before);
    EXPECT_NEAR(g[0][0], 5.0, 1e-8);
    EXPECT_NEAR(g[0][1], -4.0, 1e-8);
    EXPECT_NEAR(g[0][2], 1.0, 1e-8);
}
