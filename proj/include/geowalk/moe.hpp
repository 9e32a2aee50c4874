#pragma once
// Geometry adapter: three geometry-expert feed-forward layers behind a
// temperature-scaled softmax gate, mixed densely per token.
//
//   F_E(x) = W2 s(W1 x + b1) + b2                      (plain FFN)
//   F_S(x) = kappa * normalize(W2 s(W1 x + b1) + b2)   (fixed-norm shell)
//   F_H(x) = exp0(W2 s(log0(W1 (*) x (+) exp0(b1))) + b2)  (Poincare ball)
//   y      = sum_i gate_i(x) * F_i(x)
//
// The ball operations run in the Mobius gyrovector calculus; (*) is the
// Mobius matrix-vector product exp0(W log0(x)) and (+) is Mobius addition.
// kappa and the ball curvature stay sign-correct under unconstrained
// optimization through softplus reparameterization.

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "geowalk/error.hpp"
#include "geowalk/manifold.hpp"
#include "geowalk/metrics.hpp"
#include "geowalk/optim.hpp"
#include "geowalk/rng.hpp"
#include "geowalk/tensor.hpp"

namespace geowalk {

namespace detail {

inline double softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

// softplus^{-1}: the raw value whose softplus equals y > 0.
inline double inv_softplus(double y) {
    if (!(y > 0.0) || !std::isfinite(y))
        throw ValidationError("inv_softplus: need a positive finite value");
    return y + std::log1p(-std::exp(-y));
}

inline Eigen::VectorXd apply_activation(Eigen::VectorXd v, ad::Activation act) {
    switch (act) {
        case ad::Activation::Identity: return v;
        case ad::Activation::Relu: return v.cwiseMax(0.0);
        case ad::Activation::Tanh: return v.array().tanh().matrix();
        case ad::Activation::Gelu:
            return v.unaryExpr([](double x) {
                return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476));
            });
    }
    throw ValidationError("apply_activation: unknown kind");
}

}  // namespace detail

// Rescales x onto a slightly-inside-the-boundary ball so downstream Mobius
// operations see a valid point; generic hidden states are not ball points.
inline Eigen::VectorXd clamp_to_ball(const Eigen::VectorXd& x, double c, double margin = 1e-5) {
    require_ball_curvature(c, "clamp_to_ball");
    const double limit = (1.0 - margin) / std::sqrt(-c);
    const double r = x.norm();
    if (r <= limit) return x;
    return (x * (limit / r)).eval();
}

// ---------------------------------------------------------------------------
// parameters

template <class S>
struct ExpertParams {
    Kind kind = Kind::Euclidean;
    ad::Mat<S> w1;         // hidden x model
    ad::Mat<S> b1;         // 1 x hidden
    ad::Mat<S> w2;         // model x hidden
    ad::Mat<S> b2;         // 1 x model
    ad::Mat<S> kappa_raw;  // 1 x 1, spherical shell radius = softplus(kappa_raw)
    ad::Mat<S> c_raw;      // 1 x 1, ball curvature = -softplus(c_raw)
    ad::Activation activation = ad::Activation::Gelu;

    Eigen::Index model_dim() const { return w2.rows(); }
    Eigen::Index hidden_dim() const { return w1.rows(); }

    double kappa() const {
        return detail::softplus(static_cast<double>(kappa_raw(0, 0)));
    }
    double curvature() const {
        return -detail::softplus(static_cast<double>(c_raw(0, 0)));
    }

    void validate() const {
        if (w1.rows() < 1 || w1.cols() < 1 || w2.rows() < 1 || w2.cols() < 1)
            throw ValidationError("expert: empty weight matrices");
        if (w2.cols() != w1.rows() || w1.cols() != w2.rows())
            throw DimensionError("expert: W1/W2 are not a hidden x model pair");
        if (b1.rows() != 1 || b1.cols() != w1.rows())
            throw DimensionError("expert: b1 must be 1 x hidden");
        if (b2.rows() != 1 || b2.cols() != w2.rows())
            throw DimensionError("expert: b2 must be 1 x model");
        if (!w1.allFinite() || !b1.allFinite() || !w2.allFinite() || !b2.allFinite())
            throw ValidationError("expert: non-finite parameters");
        if (kind == Kind::Spherical &&
            (kappa_raw.rows() != 1 || kappa_raw.cols() != 1 || !kappa_raw.allFinite()))
            throw ValidationError("expert: spherical kind needs a finite 1x1 kappa_raw");
        if (kind == Kind::Hyperbolic &&
            (c_raw.rows() != 1 || c_raw.cols() != 1 || !c_raw.allFinite()))
            throw ValidationError("expert: hyperbolic kind needs a finite 1x1 c_raw");
    }
};

template <class S>
struct GatingParams {
    ad::Mat<S> w_g;  // 3 x model
    double temperature = 0.1;

    void validate() const {
        if (w_g.rows() != 3) throw DimensionError("gate: w_g must have one row per expert");
        if (w_g.cols() < 1) throw DimensionError("gate: empty w_g");
        if (!w_g.allFinite()) throw ValidationError("gate: non-finite w_g");
        if (!(temperature > 0.0) || !std::isfinite(temperature))
            throw ValidationError("gate: temperature must be positive");
    }
};

template <class S>
struct AdapterBlock {
    ExpertParams<S> euclidean;
    ExpertParams<S> spherical;
    ExpertParams<S> hyperbolic;
    GatingParams<S> gate;
    // Ablation baseline: all three slots hold Euclidean experts of the same
    // shape, so the router and parameter count stay while curvature goes away.
    bool flat_control = false;

    Eigen::Index model_dim() const { return euclidean.model_dim(); }

    void validate() const {
        euclidean.validate();
        spherical.validate();
        hyperbolic.validate();
        gate.validate();
        if (flat_control) {
            if (spherical.kind != Kind::Euclidean || hyperbolic.kind != Kind::Euclidean)
                throw ValidationError("adapter: flat control requires Euclidean experts");
        } else if (spherical.kind != Kind::Spherical || hyperbolic.kind != Kind::Hyperbolic) {
            throw ValidationError("adapter: expert kinds do not match their slots");
        }
        if (euclidean.kind != Kind::Euclidean)
            throw ValidationError("adapter: expert kinds do not match their slots");
        if (spherical.model_dim() != model_dim() || hyperbolic.model_dim() != model_dim())
            throw DimensionError("adapter: experts disagree on the model dimension");
        if (gate.w_g.cols() != model_dim())
            throw DimensionError("adapter: gate width does not match the model dimension");
    }
};

template <class S>
ExpertParams<S> make_expert(Rng& rng, Kind kind, int model, int hidden,
                            ad::Activation act = ad::Activation::Gelu) {
    ExpertParams<S> p;
    p.kind = kind;
    p.activation = act;
    const double a1 = std::sqrt(6.0 / static_cast<double>(model + hidden));
    p.w1.resize(hidden, model);
    for (int i = 0; i < hidden; ++i)
        for (int j = 0; j < model; ++j) p.w1(i, j) = static_cast<S>(rng.uniform(-a1, a1));
    p.w2.resize(model, hidden);
    for (int i = 0; i < model; ++i)
        for (int j = 0; j < hidden; ++j) p.w2(i, j) = static_cast<S>(rng.uniform(-a1, a1));
    p.b1 = ad::Mat<S>::Zero(1, hidden);
    p.b2 = ad::Mat<S>::Zero(1, model);
    // kappa = 1 (unit shell) and c = -1 at the start of training
    p.kappa_raw = ad::Mat<S>::Constant(1, 1, static_cast<S>(detail::inv_softplus(1.0)));
    p.c_raw = ad::Mat<S>::Constant(1, 1, static_cast<S>(detail::inv_softplus(1.0)));
    p.validate();
    return p;
}

// Zero gate weights start the router at uniform 1/3 routing.
template <class S>
AdapterBlock<S> make_adapter(Rng& rng, int model, int hidden,
                             ad::Activation act = ad::Activation::Gelu,
                             double temperature = 0.1) {
    AdapterBlock<S> blk;
    blk.euclidean = make_expert<S>(rng, Kind::Euclidean, model, hidden, act);
    blk.spherical = make_expert<S>(rng, Kind::Spherical, model, hidden, act);
    blk.hyperbolic = make_expert<S>(rng, Kind::Hyperbolic, model, hidden, act);
    blk.gate.w_g = ad::Mat<S>::Zero(3, model);
    blk.gate.temperature = temperature;
    blk.validate();
    return blk;
}

// Matched-size ablation control: same router, three Euclidean experts.
template <class S>
AdapterBlock<S> make_flat_adapter(Rng& rng, int model, int hidden,
                                  ad::Activation act = ad::Activation::Gelu,
                                  double temperature = 0.1) {
    AdapterBlock<S> blk;
    blk.flat_control = true;
    blk.euclidean = make_expert<S>(rng, Kind::Euclidean, model, hidden, act);
    blk.spherical = make_expert<S>(rng, Kind::Euclidean, model, hidden, act);
    blk.hyperbolic = make_expert<S>(rng, Kind::Euclidean, model, hidden, act);
    blk.gate.w_g = ad::Mat<S>::Zero(3, model);
    blk.gate.temperature = temperature;
    blk.validate();
    return blk;
}

// ---------------------------------------------------------------------------
// tape forward (batched, rows are tokens)

struct ExpertNodes {
    int w1 = -1, b1 = -1, w2 = -1, b2 = -1;
    int kappa_raw = -1, c_raw = -1;
};

struct AdapterNodes {
    ExpertNodes euclidean, spherical, hyperbolic;
    int w_g = -1;
};

template <class S>
ExpertNodes bind_expert(ad::Tape<S>& tape, const ExpertParams<S>& p) {
    ExpertNodes n;
    n.w1 = tape.leaf(p.w1);
    n.b1 = tape.leaf(p.b1);
    n.w2 = tape.leaf(p.w2);
    n.b2 = tape.leaf(p.b2);
    if (p.kind == Kind::Spherical) n.kappa_raw = tape.leaf(p.kappa_raw);
    if (p.kind == Kind::Hyperbolic) n.c_raw = tape.leaf(p.c_raw);
    return n;
}

template <class S>
AdapterNodes bind_adapter(ad::Tape<S>& tape, const AdapterBlock<S>& blk) {
    AdapterNodes n;
    n.euclidean = bind_expert(tape, blk.euclidean);
    n.spherical = bind_expert(tape, blk.spherical);
    n.hyperbolic = bind_expert(tape, blk.hyperbolic);
    n.w_g = tape.leaf(blk.gate.w_g);
    return n;
}

template <class S>
int expert_forward(ad::Tape<S>& tape, const ExpertParams<S>& p, const ExpertNodes& n, int x) {
    switch (p.kind) {
        case Kind::Euclidean: {
            const int h =
                tape.activation(tape.add(tape.matmul(x, n.w1, false, true), n.b1), p.activation);
            return tape.add(tape.matmul(h, n.w2, false, true), n.b2);
        }
        case Kind::Spherical: {
            const int h =
                tape.activation(tape.add(tape.matmul(x, n.w1, false, true), n.b1), p.activation);
            const int inner = tape.add(tape.matmul(h, n.w2, false, true), n.b2);
            return tape.row_normalize_scale(inner, tape.softplus(n.kappa_raw));
        }
        case Kind::Hyperbolic: {
            const int a = tape.sqrt_pos(tape.softplus(n.c_raw));  // sqrt(|c|)
            // every exp0 / mobius_add result is re-projected: in low precision
            // tanh saturates to 1 and lands points exactly on the boundary,
            // where log0 has no usable precision left
            const int xc = tape.ball_clamp(x, a, 1e-5);
            const int mv = tape.ball_clamp(
                tape.poincare_exp0(
                    tape.matmul(tape.poincare_log0(xc, a), n.w1, false, true), a),
                a, 1e-5);
            const int b1_ball = tape.repeat_rows(
                tape.ball_clamp(tape.poincare_exp0(n.b1, a), a, 1e-5), tape.val(x).rows());
            const int shifted = tape.ball_clamp(tape.mobius_add(mv, b1_ball, a), a, 1e-5);
            const int h = tape.activation(tape.poincare_log0(shifted, a), p.activation);
            const int lin = tape.add(tape.matmul(h, n.w2, false, true), n.b2);
            return tape.ball_clamp(tape.poincare_exp0(lin, a), a, 1e-5);
        }
    }
    throw ValidationError("expert_forward: unknown expert kind");
}

// Row-wise routing weights on the 3-simplex.
template <class S>
int gate_forward(ad::Tape<S>& tape, const GatingParams<S>& g, int w_g, int x) {
    return tape.softmax_rows(tape.scale(tape.matmul(x, w_g, false, true), 1.0 / g.temperature));
}

// Dense mixture y = w_e*F_E + w_s*F_S + w_h*F_H per row; optionally records
// the gate weights (token_index = row) under the given task label.
template <class S>
int adapter_forward(ad::Tape<S>& tape, const AdapterBlock<S>& blk, const AdapterNodes& n, int x,
                    GateTrace* trace = nullptr, const std::string& task = "") {
    const int w = gate_forward(tape, blk.gate, n.w_g, x);
    const int fe = expert_forward(tape, blk.euclidean, n.euclidean, x);
    int fs;
    try {
        fs = expert_forward(tape, blk.spherical, n.spherical, x);
    } catch (const DomainError& e) {
        throw DomainError("adapter_forward (task '" + task + "'): " + e.what());
    }
    const int fh = expert_forward(tape, blk.hyperbolic, n.hyperbolic, x);
    const int y = tape.add(tape.add(tape.mul(fe, tape.slice_cols(w, 0, 1)),
                                    tape.mul(fs, tape.slice_cols(w, 1, 1))),
                           tape.mul(fh, tape.slice_cols(w, 2, 1)));
    if (trace != nullptr) {
        const auto& wv = tape.val(w);
        for (Eigen::Index i = 0; i < wv.rows(); ++i)
            trace->append(task, static_cast<int>(i), static_cast<double>(wv(i, 0)),
                          static_cast<double>(wv(i, 1)), static_cast<double>(wv(i, 2)));
    }
    return y;
}

// Every trainable tensor of the block, named for optimizer state. Biases and
// the softplus-raw curvature scales carry no weight decay.
template <class S>
std::vector<ad::ParamBinding<S>> adapter_bindings(AdapterBlock<S>& blk,
                                                  const std::string& prefix) {
    std::vector<ad::ParamBinding<S>> out;
    auto expert = [&out](ExpertParams<S>& p, const std::string& name) {
        out.push_back({name + ".w1", &p.w1, true});
        out.push_back({name + ".b1", &p.b1, false});
        out.push_back({name + ".w2", &p.w2, true});
        out.push_back({name + ".b2", &p.b2, false});
        if (p.kind == Kind::Spherical) out.push_back({name + ".kappa_raw", &p.kappa_raw, false});
        if (p.kind == Kind::Hyperbolic) out.push_back({name + ".c_raw", &p.c_raw, false});
    };
    expert(blk.euclidean, prefix + ".e");
    expert(blk.spherical, prefix + ".s");
    expert(blk.hyperbolic, prefix + ".h");
    out.push_back({prefix + ".gate", &blk.gate.w_g, true});
    return out;
}

// ---------------------------------------------------------------------------
// value-only single-vector path (doubles); the per-sample reference the
// batched tape forward is tested against

inline Eigen::VectorXd expert_euclidean(const ExpertParams<double>& p, const Eigen::VectorXd& x) {
    p.validate();
    if (p.kind != Kind::Euclidean) throw ValidationError("expert_euclidean: wrong kind");
    if (x.size() != p.model_dim()) throw DimensionError("expert_euclidean: input width");
    const Eigen::VectorXd h =
        detail::apply_activation(p.w1 * x + p.b1.transpose(), p.activation);
    return p.w2 * h + p.b2.transpose();
}

inline Eigen::VectorXd expert_spherical(const ExpertParams<double>& p, const Eigen::VectorXd& x) {
    p.validate();
    if (p.kind != Kind::Spherical) throw ValidationError("expert_spherical: wrong kind");
    if (x.size() != p.model_dim()) throw DimensionError("expert_spherical: input width");
    const Eigen::VectorXd h =
        detail::apply_activation(p.w1 * x + p.b1.transpose(), p.activation);
    const Eigen::VectorXd inner = p.w2 * h + p.b2.transpose();
    const double r = inner.norm();
    if (r < 1e-12)
        throw DomainError("expert_spherical: inner result has no direction to normalize");
    return (inner * (p.kappa() / r)).eval();
}

inline Eigen::VectorXd expert_hyperbolic(const ExpertParams<double>& p, const Eigen::VectorXd& x) {
    p.validate();
    if (p.kind != Kind::Hyperbolic) throw ValidationError("expert_hyperbolic: wrong kind");
    if (x.size() != p.model_dim()) throw DimensionError("expert_hyperbolic: input width");
    const double c = p.curvature();
    // re-projected after every ball-producing step, mirroring the batched path
    const Eigen::VectorXd xc = clamp_to_ball(x, c);
    const Eigen::VectorXd mv = clamp_to_ball(mobius_matvec(p.w1, xc, c), c);
    const Eigen::VectorXd b1_ball = clamp_to_ball(poincare_exp0(p.b1.transpose(), c), c);
    const Eigen::VectorXd shifted = clamp_to_ball(mobius_add(mv, b1_ball, c), c);
    const Eigen::VectorXd h = detail::apply_activation(poincare_log0(shifted, c), p.activation);
    return clamp_to_ball(poincare_exp0(p.w2 * h + p.b2.transpose(), c), c);
}

inline std::array<double, 3> gate(const GatingParams<double>& g, const Eigen::VectorXd& x) {
    g.validate();
    if (x.size() != g.w_g.cols()) throw DimensionError("gate: input width");
    Eigen::Vector3d z = (g.w_g * x) / g.temperature;
    z.array() -= z.maxCoeff();
    const Eigen::Vector3d e = z.array().exp();
    const Eigen::Vector3d w = e / e.sum();
    return {w(0), w(1), w(2)};
}

inline Eigen::VectorXd adapter_forward(const AdapterBlock<double>& blk, const Eigen::VectorXd& x,
                                       GateTrace* trace = nullptr, const std::string& task = "",
                                       int token_index = 0) {
    blk.validate();
    const std::array<double, 3> w = gate(blk.gate, x);
    const Eigen::VectorXd fe = expert_euclidean(blk.euclidean, x);
    Eigen::VectorXd fs;
    try {
        fs = expert_spherical(blk.spherical, x);
    } catch (const DomainError& e) {
        throw DomainError("adapter_forward (task '" + task + "'): " + e.what());
    }
    const Eigen::VectorXd fh = expert_hyperbolic(blk.hyperbolic, x);
    if (trace != nullptr) trace->append(task, token_index, w[0], w[1], w[2]);
    return w[0] * fe + w[1] * fs + w[2] * fh;
}

}  // namespace geowalk
