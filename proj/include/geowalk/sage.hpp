#ifndef GEOWALK_SAGE_HPP
#define GEOWALK_SAGE_HPP

#include <cmath>
#include <string>
#include <vector>

#include "geowalk/graph.hpp"
#include "geowalk/manifold.hpp"
#include "geowalk/metrics.hpp"
#include "geowalk/optim.hpp"
#include "geowalk/rng.hpp"
#include "geowalk/tensor.hpp"

// The geometry prompt: a two-layer graph encoder per manifold.  Each layer
// pulls points into the origin tangent chart, applies a mean-aggregator SAGE
// update there, and pushes the result back out through the exponential map.

namespace geowalk {

template <class S>
struct SageLayerParams {
    ad::Mat<S> w_self;   // out x in
    ad::Mat<S> w_neigh;  // out x in
    ad::Mat<S> bias;     // 1 x out
    ad::Activation activation = ad::Activation::Relu;

    int in_dim() const { return static_cast<int>(w_self.cols()); }
    int out_dim() const { return static_cast<int>(w_self.rows()); }

    void validate() const {
        if (w_self.rows() < 1 || w_self.cols() < 1)
            throw ValidationError("SageLayerParams: empty weight");
        if (w_neigh.rows() != w_self.rows() || w_neigh.cols() != w_self.cols())
            throw DimensionError("SageLayerParams: w_neigh shape differs from w_self");
        if (bias.rows() != 1 || bias.cols() != w_self.rows())
            throw DimensionError("SageLayerParams: bias must be 1 x out");
        if (!w_self.allFinite() || !w_neigh.allFinite() || !bias.allFinite())
            throw ValidationError("SageLayerParams: non-finite entries");
        if (activation == ad::Activation::Gelu)
            throw ValidationError("SageLayerParams: layer activation must be relu, tanh or identity");
    }
};

// Uniform Glorot fill: +/- sqrt(6 / (in + out)), bias zero.
template <class S>
SageLayerParams<S> glorot_sage_layer(Rng& rng, int in, int out, ad::Activation act) {
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    SageLayerParams<S> p;
    p.w_self.resize(out, in);
    p.w_neigh.resize(out, in);
    for (int i = 0; i < out; ++i)
        for (int j = 0; j < in; ++j) p.w_self(i, j) = static_cast<S>(rng.uniform(-a, a));
    for (int i = 0; i < out; ++i)
        for (int j = 0; j < in; ++j) p.w_neigh(i, j) = static_cast<S>(rng.uniform(-a, a));
    p.bias = ad::Mat<S>::Zero(1, out);
    p.activation = act;
    return p;
}

template <class S>
struct GeometryEncoderParams {
    ManifoldSpec spec;
    SageLayerParams<S> layer1;  // flat features -> M
    SageLayerParams<S> layer2;  // M -> M

    void validate() const {
        spec.validate();
        layer1.validate();
        layer2.validate();
        if (layer1.out_dim() != layer2.in_dim())
            throw DimensionError("GeometryEncoderParams: layer1.out != layer2.in");
    }
};

template <class S>
GeometryEncoderParams<S> make_encoder(const ManifoldSpec& spec, Rng& rng, int in = 1024,
                                      int hidden = 512, int out = 256,
                                      ad::Activation act = ad::Activation::Relu) {
    GeometryEncoderParams<S> enc;
    enc.spec = spec;
    enc.layer1 = glorot_sage_layer<S>(rng, in, hidden, act);
    enc.layer2 = glorot_sage_layer<S>(rng, hidden, out, act);
    enc.validate();
    return enc;
}

// Plain (non-tape) neighbor mean, the aggregation oracle target.
template <class S>
ad::Mat<S> sage_aggregate(const ad::Mat<S>& x, const RelationalGraph& graph) {
    if (x.rows() != graph.n)
        throw DimensionError("sage_aggregate: row count " + format_int(x.rows()) +
                             " != graph node count " + format_int(graph.n));
    ad::Mat<S> out(x.rows(), x.cols());
    for (int v = 0; v < graph.n; ++v) {
        const auto& nb = graph.neighbors[static_cast<std::size_t>(v)];
        if (nb.empty()) {
            out.row(v) = x.row(v);
            continue;
        }
        out.row(v).setZero();
        for (const auto& [u, dist] : nb) out.row(v) += x.row(u);
        out.row(v) /= static_cast<S>(nb.size());
    }
    return out;
}

// Tape leaf ids for one layer's parameters.
struct SageLayerNodes {
    int w_self = -1;
    int w_neigh = -1;
    int bias = -1;
};

struct EncoderNodes {
    SageLayerNodes layer1, layer2;
};

template <class S>
SageLayerNodes bind_layer(ad::Tape<S>& tape, const SageLayerParams<S>& p) {
    return SageLayerNodes{tape.leaf(p.w_self), tape.leaf(p.w_neigh), tape.leaf(p.bias)};
}

template <class S>
EncoderNodes bind_encoder(ad::Tape<S>& tape, const GeometryEncoderParams<S>& enc) {
    return EncoderNodes{bind_layer(tape, enc.layer1), bind_layer(tape, enc.layer2)};
}

// Largest curvature-scaled argument √|c|·‖h‖ fed into a curved exponential
// map. cosh/sinh stay comfortably inside float range (cosh(24) ~ 1.3e10) and
// two chained layers keep their gradient products finite; flat charts are
// never clipped.
inline constexpr double kMaxTangentArg = 24.0;

// exp_out( act( U W_selfᵀ + mean_neigh(U) W_neighᵀ + b ) ) with U = log_in(X).
template <class S>
int sage_layer_forward(ad::Tape<S>& tape, int x_points, const SageLayerNodes& nodes,
                       ad::Activation act, const RelationalGraph* graph,
                       const ManifoldSpec& spec_in, const ManifoldSpec& spec_out) {
    const int u = tape.manifold_log0(x_points, spec_in);
    const int agg = tape.sage_mean(u, graph);
    const int lin = tape.add(tape.add(tape.matmul(u, nodes.w_self, false, true),
                                      tape.matmul(agg, nodes.w_neigh, false, true)),
                             nodes.bias);
    int h = tape.activation(lin, act);
    if (spec_out.curved())
        h = tape.row_clip(h, kMaxTangentArg / std::sqrt(std::abs(spec_out.curvature)));
    return tape.manifold_exp0(h, spec_out);
}

// Full two-layer prompt: returns origin-tangent coordinates (n x out), the
// flat rows the adapter stack consumes.
template <class S>
int encode_forward(ad::Tape<S>& tape, const GeometryEncoderParams<S>& enc,
                   const EncoderNodes& nodes, int x, const RelationalGraph* graph) {
    const ManifoldSpec flat = ManifoldSpec::euclidean();
    const int z = sage_layer_forward(tape, x, nodes.layer1, enc.layer1.activation, graph,
                                     flat, enc.spec);
    const int p_raw = sage_layer_forward(tape, z, nodes.layer2, enc.layer2.activation, graph,
                                         enc.spec, enc.spec);
    return tape.manifold_log0(p_raw, enc.spec);
}

// Convenience value-only encode.
template <class S>
ad::Mat<S> encode(const GeometryEncoderParams<S>& enc, const ad::Mat<S>& x,
                  const RelationalGraph& graph) {
    enc.validate();
    if (graph.spec != enc.spec)
        throw ValidationError("encode: graph geometry does not match the encoder");
    ad::Tape<S> tape;
    const EncoderNodes nodes = bind_encoder(tape, enc);
    const int out = encode_forward(tape, enc, nodes, tape.leaf(x), &graph);
    return tape.val(out);
}

// ---- Stage I training -------------------------------------------------------

struct Stage1Config {
    int epochs = 200;
    double lr = 1e-3;
    double weight_decay = 1e-5;
    int step_period = 100;    // epochs between rate halvings
    double step_factor = 0.5;
    double val_fraction = 0.2;
    std::uint64_t seed = 7;

    void validate() const {
        if (epochs < 0) throw ConfigError("stage1: epochs must be >= 0");
        if (!(lr > 0.0)) throw ConfigError("stage1: lr must be positive");
        if (weight_decay < 0.0) throw ConfigError("stage1: weight decay must be >= 0");
        if (step_period < 1) throw ConfigError("stage1: step period must be >= 1");
        if (!(step_factor > 0.0)) throw ConfigError("stage1: step factor must be positive");
        if (val_fraction < 0.0 || val_fraction >= 1.0)
            throw ConfigError("stage1: val fraction must lie in [0, 1)");
    }
};

template <class S>
struct Stage1Result {
    GeometryEncoderParams<S> encoder;
    ad::Mat<S> readout_w;      // 1 x out
    ad::Mat<S> readout_b;      // 1 x 1
    ad::Mat<S> feature_mean;   // 1 x in, column scaler fitted before training
    ad::Mat<S> feature_scale;  // 1 x in, reciprocal spreads
    LossTrace trace;
    std::vector<int> train_rows, val_rows;

    // The encoder was trained on standardized columns; apply the same map.
    ad::Mat<S> standardize(const ad::Mat<S>& x) const {
        if (x.cols() != feature_mean.cols())
            throw DimensionError("standardize: feature width mismatch");
        ad::Mat<S> out = x;
        out.rowwise() -= feature_mean.row(0);
        out.array().rowwise() *= feature_scale.row(0).array();
        return out;
    }
};

// Column scaler: zero mean, unit spread; near-constant columns are left at
// their centered values instead of being blown up.
template <class S>
void fit_feature_scaler(const ad::Mat<S>& x, ad::Mat<S>& mean, ad::Mat<S>& scale) {
    mean.resize(1, x.cols());
    scale.resize(1, x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const double m = x.col(j).template cast<double>().mean();
        const double var =
            (x.col(j).template cast<double>().array() - m).square().mean();
        const double sd = std::sqrt(var);
        mean(0, j) = static_cast<S>(m);
        scale(0, j) = static_cast<S>(sd > 1e-12 ? 1.0 / sd : 1.0);
    }
}

// Deterministic shuffled split; at least one row stays on each side when
// possible.
inline void split_rows(int n, double val_fraction, Rng& rng, std::vector<int>& train,
                       std::vector<int>& val) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    rng.shuffle(idx);
    int n_val = static_cast<int>(std::lround(val_fraction * n));
    if (val_fraction > 0.0 && n >= 2) n_val = std::max(n_val, 1);
    n_val = std::min(n_val, n - 1);
    if (n_val < 0) n_val = 0;
    val.assign(idx.begin(), idx.begin() + n_val);
    train.assign(idx.begin() + n_val, idx.end());
}

// Trains one geometry encoder plus a linear read-out against a scalar target
// with full-graph epochs.
template <class S>
Stage1Result<S> stage1_train(GeometryEncoderParams<S> enc, const RelationalGraph* graph,
                             const ad::Mat<S>& x, const Eigen::VectorXd& target,
                             const Stage1Config& cfg) {
    cfg.validate();
    enc.validate();
    if (graph == nullptr) throw ValidationError("stage1: missing graph");
    if (x.rows() != graph->n || target.size() != graph->n)
        throw DimensionError("stage1: features/targets must cover every graph node");
    if (x.cols() != enc.layer1.in_dim())
        throw DimensionError("stage1: feature width " + format_int(x.cols()) +
                             " != encoder input " + format_int(enc.layer1.in_dim()));

    Stage1Result<S> out;
    Rng rng = Rng(cfg.seed).fork(0x73616765);  // local stream, independent of init
    split_rows(graph->n, cfg.val_fraction, rng, out.train_rows, out.val_rows);

    // standardized feature columns keep tangent norms (and so cosh/sinh
    // magnitudes) in a trainable range
    fit_feature_scaler(x, out.feature_mean, out.feature_scale);

    // read-out head starts at the best constant predictor: zero weights, bias
    // at the training-target mean. The head then only has to learn the
    // residual structure, and a constant target is fit from the first step.
    const int p_dim = enc.layer2.out_dim();
    out.readout_w = ad::Mat<S>::Zero(1, p_dim);
    double tmean = 0.0;
    for (int r : out.train_rows) tmean += target(r);
    if (!out.train_rows.empty()) tmean /= static_cast<double>(out.train_rows.size());
    out.readout_b = ad::Mat<S>::Constant(1, 1, static_cast<S>(tmean));
    out.encoder = std::move(enc);

    ad::Mat<S> target_train(static_cast<Eigen::Index>(out.train_rows.size()), 1);
    for (std::size_t i = 0; i < out.train_rows.size(); ++i)
        target_train(static_cast<Eigen::Index>(i), 0) =
            static_cast<S>(target(out.train_rows[i]));
    ad::Mat<S> target_val(static_cast<Eigen::Index>(out.val_rows.size()), 1);
    for (std::size_t i = 0; i < out.val_rows.size(); ++i)
        target_val(static_cast<Eigen::Index>(i), 0) = static_cast<S>(target(out.val_rows[i]));

    ad::AdamWConfig<S> ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    ad::AdamW<S> opt(ocfg);

    std::vector<ad::ParamBinding<S>> binds = {
        {"l1.w_self", &out.encoder.layer1.w_self, true},
        {"l1.w_neigh", &out.encoder.layer1.w_neigh, true},
        {"l1.bias", &out.encoder.layer1.bias, false},
        {"l2.w_self", &out.encoder.layer2.w_self, true},
        {"l2.w_neigh", &out.encoder.layer2.w_neigh, true},
        {"l2.bias", &out.encoder.layer2.bias, false},
        {"readout.w", &out.readout_w, true},
        {"readout.b", &out.readout_b, false},
    };

    const ad::Mat<S> xs = out.standardize(x);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        opt.set_lr_scale(ad::step_decay(epoch, cfg.step_period, cfg.step_factor));
        ad::Tape<S> tape;
        ad::bind_all(tape, binds);
        const EncoderNodes nodes{
            SageLayerNodes{binds[0].node, binds[1].node, binds[2].node},
            SageLayerNodes{binds[3].node, binds[4].node, binds[5].node}};
        const int prompt = encode_forward(tape, out.encoder, nodes, tape.leaf(xs), graph);
        const int pred = tape.add(tape.matmul(prompt, binds[6].node, false, true),
                                  binds[7].node);
        const int loss =
            tape.mse_mean(tape.gather_rows(pred, out.train_rows), target_train);
        const double train_loss = static_cast<double>(tape.val(loss)(0, 0));
        double val_loss = train_loss;
        if (!out.val_rows.empty()) {
            const int vloss =
                tape.mse_mean(tape.gather_rows(pred, out.val_rows), target_val);
            val_loss = static_cast<double>(tape.val(vloss)(0, 0));
        }
        if (!std::isfinite(train_loss) || !std::isfinite(val_loss))
            throw DivergenceError("stage1: non-finite loss at epoch " + format_int(epoch));
        out.trace.rows.push_back(EpochRow{epoch, train_loss, val_loss});
        tape.backward(loss);
        opt.step(binds, tape);
    }
    return out;
}

}  // namespace geowalk

#endif
