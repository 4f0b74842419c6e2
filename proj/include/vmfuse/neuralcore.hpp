#pragma once

// Differentiable building blocks for the fusion network: a bias-free LSTM
// cell, sequence forward and backpropagation through time, a linear layer,
// inverted dropout, the translation/rotation pose loss, Adam and a central
// finite-difference gradient used as the reference in tests.
//
// LSTM update (no bias terms):
//   i = sig(Wix x + Wih h')   f = sig(Wfx x + Wfh h')
//   g = tanh(Wgx x + Wgh h')  o = sig(Wox x + Woh h')
//   c = f*c' + i*g            h = o*tanh(c)

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vmfuse/detail/rng.hpp"
#include "vmfuse/error.hpp"

namespace vmfuse {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Flat view of one parameter array (column-major storage for matrices).
struct ParamView {
    std::string name;
    double* data = nullptr;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;

    Eigen::Index size() const { return rows * cols; }
    Eigen::Map<Vector> flat() const { return {data, size()}; }
};

inline ParamView view_of(const std::string& name, Matrix& m) { return {name, m.data(), m.rows(), m.cols()}; }
inline ParamView view_of(const std::string& name, Vector& v) { return {name, v.data(), v.rows(), 1}; }

inline void check_dims(bool ok, const char* what) {
    if (!ok) throw DimensionError(what);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Vector sigmoid(const Vector& x) {
    return x.unaryExpr([](double v) { return sigmoid(v); });
}

// ---------------------------------------------------------------------------
// LSTM

struct LstmWeights {
    Matrix Wix, Wih, Wfx, Wfh, Wgx, Wgh, Wox, Woh;

    static LstmWeights zeros(Eigen::Index input, Eigen::Index hidden) {
        LstmWeights w;
        for (Matrix* m : {&w.Wix, &w.Wfx, &w.Wgx, &w.Wox}) *m = Matrix::Zero(hidden, input);
        for (Matrix* m : {&w.Wih, &w.Wfh, &w.Wgh, &w.Woh}) *m = Matrix::Zero(hidden, hidden);
        return w;
    }

    /// Uniform in +-1/sqrt(fan_in) per matrix.
    static LstmWeights random(Eigen::Index input, Eigen::Index hidden, Rng& rng) {
        LstmWeights w = zeros(input, hidden);
        for (auto& [name, m] : w.named()) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(m->cols()));
            for (Eigen::Index k = 0; k < m->size(); ++k) m->data()[k] = uniform(rng, -bound, bound);
        }
        return w;
    }

    Eigen::Index input_size() const { return Wix.cols(); }
    Eigen::Index hidden_size() const { return Wix.rows(); }

    std::vector<std::pair<std::string, Matrix*>> named() {
        return {{"Wix", &Wix}, {"Wih", &Wih}, {"Wfx", &Wfx}, {"Wfh", &Wfh},
                {"Wgx", &Wgx}, {"Wgh", &Wgh}, {"Wox", &Wox}, {"Woh", &Woh}};
    }

    void append_views(const std::string& prefix, std::vector<ParamView>& out) {
        for (auto& [name, m] : named()) out.push_back(view_of(prefix + name, *m));
    }

    void validate() const {
        const auto H = hidden_size(), I = input_size();
        for (const Matrix* m : {&Wix, &Wfx, &Wgx, &Wox})
            check_dims(m->rows() == H && m->cols() == I, "LSTM input weights must be hidden x input");
        for (const Matrix* m : {&Wih, &Wfh, &Wgh, &Woh})
            check_dims(m->rows() == H && m->cols() == H, "LSTM recurrent weights must be hidden x hidden");
    }
};

struct LstmState {
    Vector h;
    Vector c;

    static LstmState zeros(Eigen::Index hidden) { return {Vector::Zero(hidden), Vector::Zero(hidden)}; }
};

/// Everything the backward pass needs from one cell application.
struct LstmCellCache {
    Vector x, h_prev, c_prev;
    Vector i, f, g, o, c, tanh_c;
};

inline std::pair<LstmState, LstmCellCache> lstm_cell_forward(const Vector& x, const LstmState& prev,
                                                             const LstmWeights& w) {
    check_dims(x.size() == w.input_size(), "LSTM input size mismatch");
    check_dims(prev.h.size() == w.hidden_size() && prev.c.size() == w.hidden_size(),
               "LSTM state size mismatch");
    LstmCellCache k;
    k.x = x;
    k.h_prev = prev.h;
    k.c_prev = prev.c;
    k.i = sigmoid(w.Wix * x + w.Wih * prev.h);
    k.f = sigmoid(w.Wfx * x + w.Wfh * prev.h);
    k.g = (w.Wgx * x + w.Wgh * prev.h).array().tanh().matrix();
    k.o = sigmoid(w.Wox * x + w.Woh * prev.h);
    k.c = k.f.cwiseProduct(prev.c) + k.i.cwiseProduct(k.g);
    k.tanh_c = k.c.array().tanh().matrix();
    LstmState next{k.o.cwiseProduct(k.tanh_c), k.c};
    return {std::move(next), std::move(k)};
}

struct LstmSequence {
    std::vector<LstmState> states;  // state after each step
    std::vector<LstmCellCache> caches;
};

inline LstmSequence lstm_sequence_forward(const std::vector<Vector>& xs, const LstmState& init,
                                          const LstmWeights& w) {
    if (xs.empty()) throw DimensionError("LSTM sequence must be non-empty");
    LstmSequence seq;
    seq.states.reserve(xs.size());
    seq.caches.reserve(xs.size());
    LstmState cur = init;
    for (const auto& x : xs) {
        auto [next, cache] = lstm_cell_forward(x, cur, w);
        cur = next;
        seq.states.push_back(std::move(next));
        seq.caches.push_back(std::move(cache));
    }
    return seq;
}

struct LstmGradients {
    LstmWeights weights;      // same shapes as the forward weights
    LstmState init;           // d loss / d initial (h, c)
    std::vector<Vector> inputs;
};

/// Reverse-mode gradients through an unrolled sequence. `dh` holds the
/// upstream gradient on every step's h (an empty vector means all zero);
/// `dc_final` is the upstream gradient on the last cell state (may be empty).
inline LstmGradients lstm_backward(const std::vector<LstmCellCache>& caches, const std::vector<Vector>& dh,
                                   const Vector& dc_final, const LstmWeights& w) {
    const auto H = w.hidden_size();
    check_dims(!caches.empty(), "LSTM backward needs a non-empty cache");
    check_dims(dh.empty() || dh.size() == caches.size(), "upstream h gradients must match sequence length");
    check_dims(dc_final.size() == 0 || dc_final.size() == H, "final c gradient size mismatch");
    LstmGradients g;
    g.weights = LstmWeights::zeros(w.input_size(), H);
    g.inputs.resize(caches.size());
    Vector dh_next = Vector::Zero(H);
    Vector dc_next = dc_final.size() ? dc_final : Vector::Zero(H);
    for (std::size_t s = caches.size(); s-- > 0;) {
        const auto& k = caches[s];
        check_dims(k.x.size() == w.input_size() && k.c.size() == H, "cache does not match weights");
        Vector dht = dh_next;
        if (!dh.empty()) {
            check_dims(dh[s].size() == H, "upstream h gradient size mismatch");
            dht += dh[s];
        }
        const Vector d_o = dht.cwiseProduct(k.tanh_c);
        const Vector dc = dc_next + dht.cwiseProduct(k.o).cwiseProduct(
                                        (1.0 - k.tanh_c.array().square()).matrix());
        const Vector d_f = dc.cwiseProduct(k.c_prev);
        const Vector d_i = dc.cwiseProduct(k.g);
        const Vector d_g = dc.cwiseProduct(k.i);
        // Back through the gate nonlinearities.
        const Vector a_i = d_i.cwiseProduct((k.i.array() * (1.0 - k.i.array())).matrix());
        const Vector a_f = d_f.cwiseProduct((k.f.array() * (1.0 - k.f.array())).matrix());
        const Vector a_o = d_o.cwiseProduct((k.o.array() * (1.0 - k.o.array())).matrix());
        const Vector a_g = d_g.cwiseProduct((1.0 - k.g.array().square()).matrix());

        g.weights.Wix.noalias() += a_i * k.x.transpose();
        g.weights.Wfx.noalias() += a_f * k.x.transpose();
        g.weights.Wgx.noalias() += a_g * k.x.transpose();
        g.weights.Wox.noalias() += a_o * k.x.transpose();
        g.weights.Wih.noalias() += a_i * k.h_prev.transpose();
        g.weights.Wfh.noalias() += a_f * k.h_prev.transpose();
        g.weights.Wgh.noalias() += a_g * k.h_prev.transpose();
        g.weights.Woh.noalias() += a_o * k.h_prev.transpose();

        g.inputs[s] = w.Wix.transpose() * a_i + w.Wfx.transpose() * a_f + w.Wgx.transpose() * a_g +
                      w.Wox.transpose() * a_o;
        dh_next = w.Wih.transpose() * a_i + w.Wfh.transpose() * a_f + w.Wgh.transpose() * a_g +
                  w.Woh.transpose() * a_o;
        dc_next = dc.cwiseProduct(k.f);
    }
    g.init = {dh_next, dc_next};
    return g;
}

// ---------------------------------------------------------------------------
// Linear layer

struct Linear {
    Matrix W;
    Vector b;

    static Linear zeros(Eigen::Index in, Eigen::Index out) { return {Matrix::Zero(out, in), Vector::Zero(out)}; }

    static Linear random(Eigen::Index in, Eigen::Index out, Rng& rng) {
        Linear l = zeros(in, out);
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        for (Eigen::Index k = 0; k < l.W.size(); ++k) l.W.data()[k] = uniform(rng, -bound, bound);
        return l;
    }

    void append_views(const std::string& prefix, std::vector<ParamView>& out) {
        out.push_back(view_of(prefix + "W", W));
        out.push_back(view_of(prefix + "b", b));
    }
};

inline Vector linear_forward(const Vector& x, const Matrix& W, const Vector& b) {
    check_dims(W.cols() == x.size() && W.rows() == b.size(), "linear layer size mismatch");
    return W * x + b;
}

struct LinearGradients {
    Matrix W;
    Vector b;
    Vector x;
};

inline LinearGradients linear_backward(const Vector& x, const Matrix& W, const Vector& dy) {
    check_dims(W.cols() == x.size() && W.rows() == dy.size(), "linear layer size mismatch");
    return {dy * x.transpose(), dy, W.transpose() * dy};
}

// ---------------------------------------------------------------------------
// Dropout (inverted): survivors are scaled by 1/(1-rate). `mask` holds the
// per-component multiplier, so the backward pass is dy * mask.

struct DropoutResult {
    Vector y;
    Vector mask;
};

inline DropoutResult dropout(const Vector& x, double rate, Rng& rng, bool training) {
    if (!(rate >= 0.0 && rate < 1.0)) throw RangeError("dropout rate must be in [0, 1)");
    if (!training || rate == 0.0) return {x, Vector::Ones(x.size())};
    std::bernoulli_distribution keep(1.0 - rate);
    Vector mask(x.size());
    const double scale = 1.0 / (1.0 - rate);
    for (Eigen::Index k = 0; k < x.size(); ++k) mask[k] = keep(rng) ? scale : 0.0;
    return {x.cwiseProduct(mask), mask};
}

// ---------------------------------------------------------------------------
// Pose loss: |x_hat - x|_2 + beta |q_hat - q|_2 on (tx, ty, tz, roll, pitch, yaw).
// Norms are not squared; at an exactly-zero residual the zero subgradient
// is returned for that term.

struct LossResult {
    double value = 0.0;
    Vector grad;
};

inline LossResult pose_loss(const Vector& pred, const Vector& target, double beta) {
    check_dims(pred.size() == 6 && target.size() == 6, "pose loss expects 6-vectors");
    const Vector d = pred - target;
    const double nt = d.head<3>().norm();
    const double nr = d.tail<3>().norm();
    LossResult out;
    out.value = nt + beta * nr;
    out.grad = Vector::Zero(6);
    if (nt > 0.0) out.grad.head<3>() = d.head<3>() / nt;
    if (nr > 0.0) out.grad.tail<3>() = beta * d.tail<3>() / nr;
    return out;
}

// ---------------------------------------------------------------------------
// Adam

struct Hyperparams {
    double alpha = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    /// true: W -= a*k*m/sqrt(v + eps); false: W -= a*k*m/(sqrt(v) + eps).
    bool epsilon_inside_sqrt = false;
    double beta_loss = 1.0;
    double dropout_rate = 0.25;
    int hidden_size = 200;

    void validate() const {
        if (!(alpha > 0.0)) throw ConfigError("alpha must be > 0");
        if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0)) {
            throw ConfigError("beta1 and beta2 must lie in (0, 1)");
        }
        if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must be in [0, 1)");
        if (hidden_size < 1) throw ConfigError("hidden_size must be >= 1");
    }
};

struct AdamState {
    std::vector<Vector> m;
    std::vector<Vector> v;
    long t = 0;

    static AdamState for_params(const std::vector<ParamView>& params) {
        AdamState s;
        for (const auto& p : params) {
            s.m.push_back(Vector::Zero(p.size()));
            s.v.push_back(Vector::Zero(p.size()));
        }
        return s;
    }
};

inline void adam_step(const std::vector<ParamView>& params, const std::vector<ParamView>& grads,
                      AdamState& state, const Hyperparams& hp) {
    check_dims(params.size() == grads.size() && params.size() == state.m.size() &&
                   params.size() == state.v.size(),
               "Adam parameter/gradient/state count mismatch");
    state.t += 1;
    const double t = static_cast<double>(state.t);
    const double k = std::sqrt(1.0 - std::pow(hp.beta2, t)) / (1.0 - std::pow(hp.beta1, t));
    for (std::size_t p = 0; p < params.size(); ++p) {
        check_dims(params[p].size() == grads[p].size() && state.m[p].size() == params[p].size(),
                   "Adam shape mismatch");
        auto w = params[p].flat();
        const auto g = grads[p].flat();
        state.m[p] = hp.beta1 * state.m[p] + (1.0 - hp.beta1) * g;
        state.v[p] = hp.beta2 * state.v[p] + (1.0 - hp.beta2) * g.cwiseAbs2();
        if (hp.epsilon_inside_sqrt) {
            w.array() -= hp.alpha * k * state.m[p].array() / (state.v[p].array() + hp.epsilon).sqrt();
        } else {
            w.array() -= hp.alpha * k * state.m[p].array() / (state.v[p].array().sqrt() + hp.epsilon);
        }
    }
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central differences of `loss` w.r.t. every entry of `params`. The
/// parameters are perturbed in place and restored.
inline std::vector<Vector> finite_difference_gradient(const std::function<double()>& loss,
                                                      const std::vector<ParamView>& params,
                                                      double step = 1e-6) {
    std::vector<Vector> out;
    out.reserve(params.size());
    for (const auto& p : params) {
        Vector g(p.size());
        for (Eigen::Index k = 0; k < p.size(); ++k) {
            const double orig = p.data[k];
            p.data[k] = orig + step;
            const double up = loss();
            p.data[k] = orig - step;
            const double down = loss();
            p.data[k] = orig;
            g[k] = (up - down) / (2.0 * step);
        }
        out.push_back(std::move(g));
    }
    return out;
}

/// ||a - b|| / max(||a||, ||b||, floor) over all arrays together.
inline double gradient_relative_error(const std::vector<Vector>& a, const std::vector<Vector>& b,
                                      double floor = 1e-12) {
    check_dims(a.size() == b.size(), "gradient set size mismatch");
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        check_dims(a[i].size() == b[i].size(), "gradient array size mismatch");
        diff += (a[i] - b[i]).squaredNorm();
        na += a[i].squaredNorm();
        nb += b[i].squaredNorm();
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace vmfuse
