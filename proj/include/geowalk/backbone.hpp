#ifndef GEOWALK_BACKBONE_HPP
#define GEOWALK_BACKBONE_HPP

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "geowalk/error.hpp"
#include "geowalk/metrics.hpp"
#include "geowalk/moe.hpp"
#include "geowalk/num_io.hpp"
#include "geowalk/optim.hpp"
#include "geowalk/rng.hpp"
#include "geowalk/sage.hpp"
#include "geowalk/tensor.hpp"

// Desk-scale host model: a small pre-norm transformer whose FFN is replaced by
// the geometry adapter in every k-th block.  Each sample enters as four tokens
// (the three geometry prompts plus the raw feature row); the prediction heads
// read the last token's hidden state after replay accumulation.

namespace geowalk {

inline constexpr int kModalityCount = 4;
inline constexpr std::array<const char*, kModalityCount> kModalityNames = {
    "prompt_E", "prompt_H", "prompt_S", "feature"};

// ---------------------------------------------------------------------------
// configuration

struct BackboneConfig {
    int layers = 8;
    int model_dim = 128;
    int heads = 4;
    int adapter_period = 4;  // the adapter replaces the FFN in every k-th block
    int vocab = 4;           // class-token count for the categorical head
    int ffn_hidden = 0;      // 0 -> 2 * model_dim
    int adapter_hidden = 0;  // 0 -> model_dim

    int ffn_width() const { return ffn_hidden > 0 ? ffn_hidden : 2 * model_dim; }
    int adapter_width() const { return adapter_hidden > 0 ? adapter_hidden : model_dim; }
    // 1-based block numbering: with period 4 the adapters sit in blocks 4, 8, ...
    bool adapter_at(int block_no) const { return block_no % adapter_period == 0; }

    void validate() const {
        if (layers < 1) throw ConfigError("backbone: layers must be >= 1");
        if (adapter_period < 1) throw ConfigError("backbone: adapter period must be >= 1");
        if (model_dim < 1) throw ConfigError("backbone: model dim must be >= 1");
        if (heads < 1 || model_dim % heads != 0)
            throw ConfigError("backbone: attention heads must divide the model dim");
        if (vocab < 2) throw ConfigError("backbone: vocabulary needs at least two classes");
        if (ffn_hidden < 0 || adapter_hidden < 0)
            throw ConfigError("backbone: hidden widths must be >= 0");
    }
};

struct TrainConfig {
    double lambda = 1.0;  // weight of the regression term in the objective
    double beta = 1.0;    // smooth-L1 transition scale
    double lr = 2e-5;
    double weight_decay = 0.01;
    int warmup_steps = 50;  // linear rate ramp before the full rate applies
    int epochs = 4;
    int batch_size = 32;
    double val_fraction = 0.2;
    std::uint64_t seed = 7;
    bool frozen_attention = true;  // false trains the whole backbone

    void validate() const {
        if (lambda < 0.0) throw ConfigError("train: lambda must be >= 0");
        if (!(beta > 0.0)) throw ConfigError("train: beta must be positive");
        if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
        if (weight_decay < 0.0) throw ConfigError("train: weight decay must be >= 0");
        if (warmup_steps < 0) throw ConfigError("train: warmup steps must be >= 0");
        if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
        if (val_fraction < 0.0 || val_fraction >= 1.0)
            throw ConfigError("train: val fraction must lie in [0, 1)");
    }
};

// ---------------------------------------------------------------------------
// parameters

template <class S>
struct ModalProjection {
    std::array<ad::Mat<S>, kModalityCount> pi;     // model x modality width
    std::array<ad::Mat<S>, kModalityCount> alpha;  // 1 x 1 learnable scaling
};

template <class S>
struct Heads {
    ad::Mat<S> numeric_w;  // 1 x model
    ad::Mat<S> numeric_b;  // 1 x 1
    ad::Mat<S> class_w;    // vocab x model
    ad::Mat<S> class_b;    // 1 x vocab
};

template <class S>
struct BlockParams {
    ad::Mat<S> ln1_g, ln1_b, ln2_g, ln2_b;  // 1 x model
    ad::Mat<S> wq, wk, wv, wo;              // model x model
    bool has_adapter = false;
    ad::Mat<S> ffn_w1, ffn_b1, ffn_w2, ffn_b2;  // plain FFN when no adapter
    AdapterBlock<S> adapter;
};

template <class S>
struct BackboneParams {
    BackboneConfig config;
    std::vector<BlockParams<S>> blocks;
    ModalProjection<S> projection;
    ad::Mat<S> final_ln_g, final_ln_b;  // 1 x model
    Heads<S> heads;

    void validate() const {
        config.validate();
        const int D = config.model_dim;
        if (static_cast<int>(blocks.size()) != config.layers)
            throw DimensionError("backbone: block count differs from config.layers");
        auto check_row = [D](const ad::Mat<S>& m, const char* what) {
            if (m.rows() != 1 || m.cols() != D)
                throw DimensionError(std::string("backbone: ") + what + " must be 1 x model");
        };
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const BlockParams<S>& b = blocks[i];
            check_row(b.ln1_g, "norm gain");
            check_row(b.ln1_b, "norm bias");
            check_row(b.ln2_g, "norm gain");
            check_row(b.ln2_b, "norm bias");
            for (const ad::Mat<S>* w : {&b.wq, &b.wk, &b.wv, &b.wo})
                if (w->rows() != D || w->cols() != D)
                    throw DimensionError("backbone: attention weights must be model x model");
            if (b.has_adapter != config.adapter_at(static_cast<int>(i) + 1))
                throw ValidationError("backbone: adapter placement disagrees with the period");
            if (b.has_adapter) {
                b.adapter.validate();
                if (b.adapter.model_dim() != D)
                    throw DimensionError("backbone: adapter width differs from the model dim");
            } else if (b.ffn_w1.rows() != config.ffn_width() || b.ffn_w1.cols() != D ||
                       b.ffn_w2.rows() != D || b.ffn_w2.cols() != config.ffn_width() ||
                       b.ffn_b1.rows() != 1 || b.ffn_b1.cols() != config.ffn_width() ||
                       b.ffn_b2.rows() != 1 || b.ffn_b2.cols() != D) {
                throw DimensionError("backbone: FFN shapes disagree with the config");
            }
        }
        for (int m = 0; m < kModalityCount; ++m) {
            const auto& pi = projection.pi[static_cast<std::size_t>(m)];
            const auto& al = projection.alpha[static_cast<std::size_t>(m)];
            if (pi.rows() != D || pi.cols() < 1)
                throw DimensionError(std::string("backbone: projection for ") +
                                     kModalityNames[static_cast<std::size_t>(m)] +
                                     " must be model x width");
            if (al.rows() != 1 || al.cols() != 1)
                throw DimensionError("backbone: alpha must be a scalar");
            if (!pi.allFinite() || !al.allFinite())
                throw ValidationError("backbone: non-finite projection");
        }
        check_row(final_ln_g, "final norm gain");
        check_row(final_ln_b, "final norm bias");
        if (heads.numeric_w.rows() != 1 || heads.numeric_w.cols() != D ||
            heads.numeric_b.rows() != 1 || heads.numeric_b.cols() != 1)
            throw DimensionError("backbone: numeric head must map model -> 1");
        if (heads.class_w.rows() != config.vocab || heads.class_w.cols() != D ||
            heads.class_b.rows() != 1 || heads.class_b.cols() != config.vocab)
            throw DimensionError("backbone: class head must map model -> vocab");
        if (!heads.numeric_w.allFinite() || !heads.numeric_b.allFinite() ||
            !heads.class_w.allFinite() || !heads.class_b.allFinite())
            throw ValidationError("backbone: non-finite head");
    }
};

// `flat_experts` builds the matched-size ablation baseline whose adapters hold
// three Euclidean experts instead of one per geometry.
template <class S>
BackboneParams<S> make_backbone(Rng& rng, const BackboneConfig& cfg,
                                const std::array<int, kModalityCount>& modal_dims,
                                bool flat_experts = false) {
    cfg.validate();
    for (const int d : modal_dims)
        if (d < 1) throw ConfigError("backbone: modality widths must be positive");
    auto glorot = [&rng](int r, int c) {
        const double a = std::sqrt(6.0 / static_cast<double>(r + c));
        ad::Mat<S> m(r, c);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) m(i, j) = static_cast<S>(rng.uniform(-a, a));
        return m;
    };
    const int D = cfg.model_dim;
    BackboneParams<S> p;
    p.config = cfg;
    p.blocks.resize(static_cast<std::size_t>(cfg.layers));
    for (int i = 0; i < cfg.layers; ++i) {
        BlockParams<S>& b = p.blocks[static_cast<std::size_t>(i)];
        b.ln1_g = ad::Mat<S>::Ones(1, D);
        b.ln1_b = ad::Mat<S>::Zero(1, D);
        b.wq = glorot(D, D);
        b.wk = glorot(D, D);
        b.wv = glorot(D, D);
        b.wo = glorot(D, D);
        b.ln2_g = ad::Mat<S>::Ones(1, D);
        b.ln2_b = ad::Mat<S>::Zero(1, D);
        if (cfg.adapter_at(i + 1)) {
            b.has_adapter = true;
            // both factories consume identical draw counts, so the baseline
            // differs from the geometric model only in the expert kinds
            b.adapter = flat_experts ? make_flat_adapter<S>(rng, D, cfg.adapter_width())
                                     : make_adapter<S>(rng, D, cfg.adapter_width());
        } else {
            const int w = cfg.ffn_width();
            b.ffn_w1 = glorot(w, D);
            b.ffn_b1 = ad::Mat<S>::Zero(1, w);
            b.ffn_w2 = glorot(D, w);
            b.ffn_b2 = ad::Mat<S>::Zero(1, D);
        }
    }
    for (int m = 0; m < kModalityCount; ++m) {
        p.projection.pi[static_cast<std::size_t>(m)] =
            glorot(D, modal_dims[static_cast<std::size_t>(m)]);
        p.projection.alpha[static_cast<std::size_t>(m)] = ad::Mat<S>::Ones(1, 1);
    }
    p.final_ln_g = ad::Mat<S>::Ones(1, D);
    p.final_ln_b = ad::Mat<S>::Zero(1, D);
    // zero heads: class probabilities start uniform and the numeric output at 0
    p.heads.numeric_w = ad::Mat<S>::Zero(1, D);
    p.heads.numeric_b = ad::Mat<S>::Zero(1, 1);
    p.heads.class_w = ad::Mat<S>::Zero(cfg.vocab, D);
    p.heads.class_b = ad::Mat<S>::Zero(1, cfg.vocab);
    p.validate();
    return p;
}

// ---------------------------------------------------------------------------
// the single enumeration of every tensor

struct BlockNodes {
    int ln1_g = -1, ln1_b = -1, ln2_g = -1, ln2_b = -1;
    int wq = -1, wk = -1, wv = -1, wo = -1;
    int ffn_w1 = -1, ffn_b1 = -1, ffn_w2 = -1, ffn_b2 = -1;
    AdapterNodes adapter;
};

struct BackboneNodes {
    std::vector<BlockNodes> blocks;
    std::array<int, kModalityCount> pi{-1, -1, -1, -1};
    std::array<int, kModalityCount> alpha{-1, -1, -1, -1};
    int final_ln_g = -1, final_ln_b = -1;
    int numeric_w = -1, numeric_b = -1, class_w = -1, class_b = -1;
};

// Walks every tensor in a fixed order, calling f(name, matrix, decay, frozen)
// and storing whatever f returns as that tensor's node id.  Binding, the
// optimizer bookkeeping, frozen hashing and the gradient tests all run through
// this one function, so they can never disagree on order or flags.  `frozen`
// marks the base the second training stage keeps fixed: norms, attention and
// the plain FFNs.
template <class P, class F>
BackboneNodes visit_backbone(P& p, F&& f) {
    BackboneNodes n;
    n.blocks.resize(p.blocks.size());
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        auto& b = p.blocks[i];
        BlockNodes& bn = n.blocks[i];
        const std::string pre = "block" + std::to_string(i + 1);
        bn.ln1_g = f(pre + ".ln1.g", b.ln1_g, false, true);
        bn.ln1_b = f(pre + ".ln1.b", b.ln1_b, false, true);
        bn.wq = f(pre + ".att.wq", b.wq, true, true);
        bn.wk = f(pre + ".att.wk", b.wk, true, true);
        bn.wv = f(pre + ".att.wv", b.wv, true, true);
        bn.wo = f(pre + ".att.wo", b.wo, true, true);
        bn.ln2_g = f(pre + ".ln2.g", b.ln2_g, false, true);
        bn.ln2_b = f(pre + ".ln2.b", b.ln2_b, false, true);
        if (b.has_adapter) {
            auto expert = [&f](auto& ep, ExpertNodes& en, const std::string& name) {
                en.w1 = f(name + ".w1", ep.w1, true, false);
                en.b1 = f(name + ".b1", ep.b1, false, false);
                en.w2 = f(name + ".w2", ep.w2, true, false);
                en.b2 = f(name + ".b2", ep.b2, false, false);
                if (ep.kind == Kind::Spherical)
                    en.kappa_raw = f(name + ".kappa_raw", ep.kappa_raw, false, false);
                if (ep.kind == Kind::Hyperbolic)
                    en.c_raw = f(name + ".c_raw", ep.c_raw, false, false);
            };
            expert(b.adapter.euclidean, bn.adapter.euclidean, pre + ".adapter.e");
            expert(b.adapter.spherical, bn.adapter.spherical, pre + ".adapter.s");
            expert(b.adapter.hyperbolic, bn.adapter.hyperbolic, pre + ".adapter.h");
            bn.adapter.w_g = f(pre + ".adapter.gate", b.adapter.gate.w_g, true, false);
        } else {
            bn.ffn_w1 = f(pre + ".ffn.w1", b.ffn_w1, true, true);
            bn.ffn_b1 = f(pre + ".ffn.b1", b.ffn_b1, false, true);
            bn.ffn_w2 = f(pre + ".ffn.w2", b.ffn_w2, true, true);
            bn.ffn_b2 = f(pre + ".ffn.b2", b.ffn_b2, false, true);
        }
    }
    for (int m = 0; m < kModalityCount; ++m) {
        const std::string pre =
            std::string("proj.") + kModalityNames[static_cast<std::size_t>(m)];
        n.pi[static_cast<std::size_t>(m)] =
            f(pre + ".pi", p.projection.pi[static_cast<std::size_t>(m)], true, false);
        n.alpha[static_cast<std::size_t>(m)] =
            f(pre + ".alpha", p.projection.alpha[static_cast<std::size_t>(m)], false, false);
    }
    n.final_ln_g = f("final_ln.g", p.final_ln_g, false, true);
    n.final_ln_b = f("final_ln.b", p.final_ln_b, false, true);
    n.numeric_w = f("head.numeric.w", p.heads.numeric_w, true, false);
    n.numeric_b = f("head.numeric.b", p.heads.numeric_b, false, false);
    n.class_w = f("head.class.w", p.heads.class_w, true, false);
    n.class_b = f("head.class.b", p.heads.class_b, false, false);
    return n;
}

template <class S>
struct ParamRef {
    std::string name;
    ad::Mat<S>* value = nullptr;
    bool decay = false;
    bool frozen = false;  // part of the base the second stage keeps fixed
};

template <class S>
std::vector<ParamRef<S>> collect_params(BackboneParams<S>& p) {
    std::vector<ParamRef<S>> out;
    visit_backbone(p, [&out](const std::string& name, ad::Mat<S>& m, bool decay, bool frozen) {
        out.push_back(ParamRef<S>{name, &m, decay, frozen});
        return static_cast<int>(out.size()) - 1;
    });
    return out;
}

template <class S>
struct BoundBackbone {
    BackboneNodes nodes;
    std::vector<ad::ParamBinding<S>> trainable;  // ready for the optimizer
};

// Registers every tensor on the tape; the trainable list carries the adapter,
// projection and head bindings, plus the frozen base when asked for.
template <class S>
BoundBackbone<S> bind_backbone(ad::Tape<S>& tape, BackboneParams<S>& p,
                               bool train_frozen_base = false) {
    BoundBackbone<S> out;
    out.nodes = visit_backbone(
        p, [&](const std::string& name, ad::Mat<S>& m, bool decay, bool frozen) {
            const int id = tape.leaf(m);
            if (!frozen || train_frozen_base)
                out.trainable.push_back(ad::ParamBinding<S>{name, &m, decay, id});
            return id;
        });
    return out;
}

// Maps externally created leaf ids (ordered as collect_params) to named slots.
template <class S>
BackboneNodes nodes_from_ids(const BackboneParams<S>& p, const std::vector<int>& ids) {
    std::size_t next = 0;
    BackboneNodes n =
        visit_backbone(p, [&](const std::string&, const ad::Mat<S>&, bool, bool) {
            if (next >= ids.size()) throw DimensionError("nodes_from_ids: too few ids");
            return ids[next++];
        });
    if (next != ids.size()) throw DimensionError("nodes_from_ids: unused ids");
    return n;
}

// Order-sensitive digest of every tensor the second stage must not touch.
template <class S>
std::uint64_t frozen_hash(const BackboneParams<S>& p) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    visit_backbone(p, [&h](const std::string& name, const ad::Mat<S>& m, bool, bool frozen) {
        if (frozen) {
            h = fnv1a(name, h);
            h = fnv1a(std::string_view(reinterpret_cast<const char*>(m.data()),
                                       sizeof(S) * static_cast<std::size_t>(m.size())),
                      h);
        }
        return 0;
    });
    return h;
}

template <class S>
long long trainable_scalar_count(const BackboneParams<S>& p) {
    long long total = 0;
    visit_backbone(p, [&total](const std::string&, const ad::Mat<S>& m, bool, bool frozen) {
        if (!frozen) total += static_cast<long long>(m.size());
        return 0;
    });
    return total;
}

// ---------------------------------------------------------------------------
// forward pass

// Each modality row is L2-normalized in full working precision, projected and
// scaled by its alpha; the four streams are zipped into (samples * 4) token
// rows with the feature token last.
template <class S>
int project_modalities(ad::Tape<S>& tape, const BackboneNodes& nodes,
                       const std::array<int, kModalityCount>& inputs) {
    const int unit = tape.leaf(ad::Mat<S>::Ones(1, 1));
    std::vector<int> tokens(kModalityCount);
    for (int m = 0; m < kModalityCount; ++m) {
        int normalized;
        try {
            normalized = tape.row_normalize_scale(inputs[static_cast<std::size_t>(m)], unit);
        } catch (const DomainError& e) {
            throw DomainError(std::string("project_modalities: modality '") +
                              kModalityNames[static_cast<std::size_t>(m)] + "': " + e.what());
        }
        const int projected =
            tape.matmul(normalized, nodes.pi[static_cast<std::size_t>(m)], false, true);
        tokens[static_cast<std::size_t>(m)] =
            tape.mul(projected, nodes.alpha[static_cast<std::size_t>(m)]);
    }
    return tape.interleave_rows(tokens);
}

// Last-token update h_last + sum_m h_m, accumulated pairwise from the left.
template <class S>
int replay_accumulate(ad::Tape<S>& tape, int last, const std::vector<int>& modality_hiddens) {
    int acc = last;
    for (const int h : modality_hiddens) acc = tape.add(acc, h);
    return acc;
}

template <class S>
ad::Mat<S> replay_accumulate(const ad::Mat<S>& last,
                             const std::vector<ad::Mat<S>>& modality_hiddens) {
    ad::Mat<S> acc = last;
    for (const ad::Mat<S>& h : modality_hiddens) {
        if (h.rows() != acc.rows() || h.cols() != acc.cols())
            throw DimensionError("replay_accumulate: hidden state shapes disagree");
        acc += h;
    }
    return acc;
}

struct ForwardNodes {
    int tokens = -1;        // (n * 4) x model after the block stack and final norm
    int last = -1;          // n x model, replay-adjusted read-out state
    int class_logits = -1;  // n x vocab
    int numeric_pred = -1;  // n x 1
};

template <class S>
ForwardNodes backbone_forward(ad::Tape<S>& tape, const BackboneParams<S>& p,
                              const BackboneNodes& nodes,
                              const std::array<int, kModalityCount>& modal_inputs,
                              GateTrace* trace = nullptr, const std::string& task = "") {
    int x = project_modalities(tape, nodes, modal_inputs);
    const int n = static_cast<int>(tape.val(x).rows()) / kModalityCount;
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        const BlockParams<S>& b = p.blocks[i];
        const BlockNodes& bn = nodes.blocks[i];
        const int norm1 = tape.layer_norm(x, bn.ln1_g, bn.ln1_b);
        const int att = tape.attention(norm1, bn.wq, bn.wk, bn.wv, bn.wo, kModalityCount,
                                       p.config.heads);
        x = tape.add(x, att);
        const int norm2 = tape.layer_norm(x, bn.ln2_g, bn.ln2_b);
        int f;
        if (b.has_adapter) {
            f = adapter_forward(tape, b.adapter, bn.adapter, norm2, trace, task);
        } else {
            const int h = tape.activation(
                tape.add(tape.matmul(norm2, bn.ffn_w1, false, true), bn.ffn_b1),
                ad::Activation::Gelu);
            f = tape.add(tape.matmul(h, bn.ffn_w2, false, true), bn.ffn_b2);
        }
        x = tape.add(x, f);
    }
    ForwardNodes out;
    out.tokens = tape.layer_norm(x, nodes.final_ln_g, nodes.final_ln_b);
    std::vector<int> modality_hiddens(kModalityCount);
    std::vector<int> rows(static_cast<std::size_t>(n));
    for (int m = 0; m < kModalityCount; ++m) {
        for (int i = 0; i < n; ++i)
            rows[static_cast<std::size_t>(i)] = i * kModalityCount + m;
        modality_hiddens[static_cast<std::size_t>(m)] = tape.gather_rows(out.tokens, rows);
    }
    // the feature token is both the read-out position and one of the summed
    // modality states, so its hidden state enters the sum twice
    out.last = replay_accumulate(tape, modality_hiddens[kModalityCount - 1], modality_hiddens);
    out.class_logits =
        tape.add(tape.matmul(out.last, nodes.class_w, false, true), nodes.class_b);
    out.numeric_pred =
        tape.add(tape.matmul(out.last, nodes.numeric_w, false, true), nodes.numeric_b);
    return out;
}

// ---------------------------------------------------------------------------
// objective

inline double smooth_l1(double pred, double target, double beta) {
    if (!(beta > 0.0)) throw ConfigError("smooth_l1: beta must be positive");
    const double e = std::abs(pred - target);
    return e < beta ? 0.5 * e * e / beta : e - 0.5 * beta;
}

// Token cross-entropy plus lambda-weighted smooth-L1 regression; either side
// may be absent (negative node id or empty targets) and then contributes 0.
template <class S>
int combined_loss(ad::Tape<S>& tape, int class_logits, const Eigen::VectorXi& labels,
                  int numeric_pred, const ad::Mat<S>& numeric_target, double lambda,
                  double beta) {
    if (lambda < 0.0) throw ConfigError("combined_loss: lambda must be >= 0");
    const bool has_class = class_logits >= 0 && labels.size() > 0;
    const bool has_numeric = numeric_pred >= 0 && numeric_target.size() > 0;
    if (!has_class && !has_numeric)
        throw ValidationError("combined_loss: batch carries neither task");
    int total = -1;
    if (has_class) total = tape.cross_entropy_mean(class_logits, labels);
    if (has_numeric) {
        const int reg =
            tape.scale(tape.smooth_l1_mean(numeric_pred, numeric_target, beta), lambda);
        total = total >= 0 ? tape.add(total, reg) : reg;
    }
    return total;
}

// ---------------------------------------------------------------------------
// stage II data

template <class S>
struct Stage2Dataset {
    ad::Mat<S> prompt_e, prompt_h, prompt_s;  // n x prompt width, tangent coordinates
    ad::Mat<S> features;                      // n x feature width
    Eigen::VectorXi labels;                   // -1 marks a row without a class target
    Eigen::VectorXd numeric;                  // regression target per row
    std::vector<std::uint8_t> has_numeric;    // empty = every row carries it

    int n() const { return static_cast<int>(features.rows()); }
    bool numeric_present(int row) const {
        return has_numeric.empty() || has_numeric[static_cast<std::size_t>(row)] != 0;
    }
    std::array<int, kModalityCount> modal_dims() const {
        return {static_cast<int>(prompt_e.cols()), static_cast<int>(prompt_h.cols()),
                static_cast<int>(prompt_s.cols()), static_cast<int>(features.cols())};
    }

    void validate(int vocab) const {
        const Eigen::Index rows = features.rows();
        if (rows < 1) throw ValidationError("stage2 data: empty");
        if (prompt_e.rows() != rows || prompt_h.rows() != rows || prompt_s.rows() != rows)
            throw DimensionError("stage2 data: prompt row counts disagree with features");
        if (labels.size() != rows || numeric.size() != rows)
            throw DimensionError("stage2 data: target lengths disagree with features");
        if (!has_numeric.empty() &&
            static_cast<Eigen::Index>(has_numeric.size()) != rows)
            throw DimensionError("stage2 data: numeric mask length disagrees");
        for (Eigen::Index i = 0; i < rows; ++i)
            if (labels(i) < -1 || labels(i) >= vocab)
                throw ValidationError("stage2 data: label " + format_int(labels(i)) +
                                      " outside [-1, " + format_int(vocab) + ")");
    }
};

namespace detail {

template <class S>
ad::Mat<S> gather_matrix(const ad::Mat<S>& src, const std::vector<int>& rows) {
    ad::Mat<S> out(static_cast<Eigen::Index>(rows.size()), src.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= src.rows())
            throw DimensionError("stage2: row index out of range");
        out.row(static_cast<Eigen::Index>(i)) = src.row(rows[i]);
    }
    return out;
}

}  // namespace detail

template <class S>
std::array<int, kModalityCount> leaf_modalities(ad::Tape<S>& tape, const Stage2Dataset<S>& ds,
                                                const std::vector<int>& rows) {
    return {tape.leaf(detail::gather_matrix(ds.prompt_e, rows)),
            tape.leaf(detail::gather_matrix(ds.prompt_h, rows)),
            tape.leaf(detail::gather_matrix(ds.prompt_s, rows)),
            tape.leaf(detail::gather_matrix(ds.features, rows))};
}

struct BatchGraph {
    ForwardNodes forward;
    int ce = -1;    // mean cross-entropy over the rows with a class label
    int reg = -1;   // mean smooth-L1 over the rows with a numeric target
    int loss = -1;  // ce + lambda * reg with absent parts dropped
    int n_class = 0, n_numeric = 0;
};

// Builds the graph for one batch: forward, per-task row selection, objective.
template <class S>
BatchGraph batch_graph(ad::Tape<S>& tape, const BackboneParams<S>& p,
                       const BackboneNodes& nodes, const Stage2Dataset<S>& ds,
                       const std::vector<int>& rows, double lambda, double beta,
                       GateTrace* trace = nullptr, const std::string& task = "") {
    if (rows.empty()) throw ValidationError("stage2: empty batch");
    BatchGraph out;
    out.forward =
        backbone_forward(tape, p, nodes, leaf_modalities(tape, ds, rows), trace, task);
    std::vector<int> class_rows, numeric_rows;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (ds.labels(rows[i]) >= 0) class_rows.push_back(static_cast<int>(i));
        if (ds.numeric_present(rows[i])) numeric_rows.push_back(static_cast<int>(i));
    }
    out.n_class = static_cast<int>(class_rows.size());
    out.n_numeric = static_cast<int>(numeric_rows.size());
    if (!class_rows.empty()) {
        Eigen::VectorXi labels(static_cast<Eigen::Index>(class_rows.size()));
        for (std::size_t i = 0; i < class_rows.size(); ++i)
            labels(static_cast<Eigen::Index>(i)) =
                ds.labels(rows[static_cast<std::size_t>(class_rows[i])]);
        const int logits = class_rows.size() == rows.size()
                               ? out.forward.class_logits
                               : tape.gather_rows(out.forward.class_logits, class_rows);
        out.ce = tape.cross_entropy_mean(logits, labels);
    }
    if (!numeric_rows.empty()) {
        ad::Mat<S> target(static_cast<Eigen::Index>(numeric_rows.size()), 1);
        for (std::size_t i = 0; i < numeric_rows.size(); ++i)
            target(static_cast<Eigen::Index>(i), 0) =
                static_cast<S>(ds.numeric(rows[static_cast<std::size_t>(numeric_rows[i])]));
        const int pred = numeric_rows.size() == rows.size()
                             ? out.forward.numeric_pred
                             : tape.gather_rows(out.forward.numeric_pred, numeric_rows);
        out.reg = tape.smooth_l1_mean(pred, target, beta);
    }
    if (out.ce < 0 && out.reg < 0)
        throw ValidationError("stage2: batch carries neither task");
    if (out.ce >= 0 && out.reg >= 0)
        out.loss = tape.add(out.ce, tape.scale(out.reg, lambda));
    else
        out.loss = out.ce >= 0 ? out.ce : tape.scale(out.reg, lambda);
    return out;
}

// ---------------------------------------------------------------------------
// evaluation

struct EvalResult {
    double r2 = std::numeric_limits<double>::quiet_NaN();
    double f1 = std::numeric_limits<double>::quiet_NaN();
    double loss = std::numeric_limits<double>::quiet_NaN();
    Eigen::VectorXd numeric_preds, numeric_targets;  // rows carrying the numeric task
    std::vector<int> class_preds, class_targets;     // rows carrying a class label
};

// Value-only forward over `rows` in fixed-size chunks; the loss parts
// aggregate in 64-bit with per-task sample weights, so unequal chunk sizes do
// not skew the means.
template <class S>
EvalResult evaluate(const BackboneParams<S>& p, const Stage2Dataset<S>& ds,
                    const std::vector<int>& rows, double lambda, double beta,
                    GateTrace* trace = nullptr, const std::string& task = "eval",
                    int chunk = 256) {
    if (rows.empty()) throw ValidationError("evaluate: no rows");
    if (chunk < 1) throw ConfigError("evaluate: chunk must be >= 1");
    EvalResult out;
    std::vector<double> preds_n, targs_n;
    double ce_sum = 0.0, reg_sum = 0.0;
    long n_class = 0, n_numeric = 0;
    for (std::size_t start = 0; start < rows.size();
         start += static_cast<std::size_t>(chunk)) {
        const std::size_t stop =
            std::min(rows.size(), start + static_cast<std::size_t>(chunk));
        const std::vector<int> part(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                    rows.begin() + static_cast<std::ptrdiff_t>(stop));
        ad::Tape<S> tape;
        const BackboneNodes nodes = visit_backbone(
            p, [&tape](const std::string&, const ad::Mat<S>& m, bool, bool) {
                return tape.leaf(m);
            });
        const BatchGraph bg =
            batch_graph(tape, p, nodes, ds, part, lambda, beta, trace, task);
        if (bg.ce >= 0) {
            ce_sum += static_cast<double>(tape.val(bg.ce)(0, 0)) * bg.n_class;
            n_class += bg.n_class;
        }
        if (bg.reg >= 0) {
            reg_sum += static_cast<double>(tape.val(bg.reg)(0, 0)) * bg.n_numeric;
            n_numeric += bg.n_numeric;
        }
        const auto& logits = tape.val(bg.forward.class_logits);
        const auto& pred = tape.val(bg.forward.numeric_pred);
        for (std::size_t i = 0; i < part.size(); ++i) {
            const int r = part[i];
            if (ds.labels(r) >= 0) {
                Eigen::Index arg = 0;
                logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
                out.class_preds.push_back(static_cast<int>(arg));
                out.class_targets.push_back(ds.labels(r));
            }
            if (ds.numeric_present(r)) {
                preds_n.push_back(static_cast<double>(pred(static_cast<Eigen::Index>(i), 0)));
                targs_n.push_back(ds.numeric(r));
            }
        }
    }
    double loss = 0.0;
    bool any = false;
    if (n_class > 0) {
        loss += ce_sum / static_cast<double>(n_class);
        any = true;
    }
    if (n_numeric > 0) {
        loss += lambda * (reg_sum / static_cast<double>(n_numeric));
        any = true;
    }
    if (any) out.loss = loss;
    if (!preds_n.empty()) {
        out.numeric_preds = Eigen::Map<const Eigen::VectorXd>(
            preds_n.data(), static_cast<Eigen::Index>(preds_n.size()));
        out.numeric_targets = Eigen::Map<const Eigen::VectorXd>(
            targs_n.data(), static_cast<Eigen::Index>(targs_n.size()));
    }
    if (out.numeric_targets.size() >= 2 &&
        out.numeric_targets.maxCoeff() > out.numeric_targets.minCoeff())
        out.r2 = r2_score(out.numeric_preds, out.numeric_targets);
    if (!out.class_preds.empty())
        out.f1 = f1_score(out.class_preds, out.class_targets, p.config.vocab).macro;
    return out;
}

// ---------------------------------------------------------------------------
// stage II training

struct Stage2Result {
    MetricTrace metrics;  // per-step batch loss, per-epoch train/val loss, r2, f1
    std::vector<int> train_rows, val_rows;
    std::uint64_t frozen_hash_before = 0, frozen_hash_after = 0;
    long long steps = 0;
    double final_val_loss = std::numeric_limits<double>::quiet_NaN();
    double final_r2 = std::numeric_limits<double>::quiet_NaN();
    double final_f1 = std::numeric_limits<double>::quiet_NaN();
};

// Mini-batch training of the adapter/projection/head set (or the whole model
// when cfg.frozen_attention is off).  Held-out metrics are written at epoch 0
// (before any update) and after each epoch.
template <class S>
Stage2Result stage2_train(BackboneParams<S>& params, const Stage2Dataset<S>& ds,
                          const TrainConfig& cfg) {
    cfg.validate();
    params.validate();
    ds.validate(params.config.vocab);
    Stage2Result out;
    out.frozen_hash_before = frozen_hash(params);

    Rng rng(cfg.seed);
    split_rows(ds.n(), cfg.val_fraction, rng, out.train_rows, out.val_rows);
    const std::vector<int>& eval_rows = out.val_rows.empty() ? out.train_rows : out.val_rows;

    ad::AdamWConfig<S> ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    ocfg.warmup_steps = cfg.warmup_steps;
    ad::AdamW<S> opt(ocfg);

    auto eval_epoch = [&](int epoch) {
        const EvalResult ev = evaluate(params, ds, eval_rows, cfg.lambda, cfg.beta);
        out.metrics.add(epoch, "regression", "r2", ev.r2);
        out.metrics.add(epoch, "classification", "f1", ev.f1);
        out.metrics.add(epoch, "combined", "val_loss", ev.loss);
        out.final_val_loss = ev.loss;
        out.final_r2 = ev.r2;
        out.final_f1 = ev.f1;
    };
    eval_epoch(0);

    std::vector<int> order = out.train_rows;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const std::vector<int> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(stop));
            ad::Tape<S> tape;
            BoundBackbone<S> bound = bind_backbone(tape, params, !cfg.frozen_attention);
            const BatchGraph bg =
                batch_graph(tape, params, bound.nodes, ds, batch, cfg.lambda, cfg.beta);
            const double batch_loss = static_cast<double>(tape.val(bg.loss)(0, 0));
            if (!std::isfinite(batch_loss))
                throw DivergenceError("stage2: non-finite loss at step " +
                                      format_int(opt.steps_done() + 1));
            tape.backward(bg.loss);
            opt.step(bound.trainable, tape);
            out.metrics.add(static_cast<int>(opt.steps_done()), "train", "batch_loss",
                            batch_loss);
            loss_sum += batch_loss;
            ++batches;
        }
        out.metrics.add(epoch, "combined", "train_loss",
                        loss_sum / static_cast<double>(batches));
        eval_epoch(epoch);
    }
    out.steps = opt.steps_done();
    out.frozen_hash_after = frozen_hash(params);
    if (cfg.frozen_attention && out.frozen_hash_before != out.frozen_hash_after)
        throw ValidationError("stage2: frozen parameters moved during training");
    return out;
}

// Short full-model fit that gives the base its capability before it is frozen.
template <class S>
Stage2Result warm_fit(BackboneParams<S>& params, const Stage2Dataset<S>& ds,
                      const TrainConfig& cfg) {
    if (cfg.frozen_attention)
        throw ConfigError("warm_fit: expects frozen_attention == false");
    return stage2_train(params, ds, cfg);
}

inline TrainConfig warm_defaults() {
    TrainConfig cfg;
    cfg.frozen_attention = false;
    cfg.lr = 1e-3;
    cfg.weight_decay = 0.0;
    cfg.warmup_steps = 20;
    cfg.epochs = 2;
    return cfg;
}

// ---------------------------------------------------------------------------
// insertion-density sweep

struct SweepRun {
    int period = 0;
    bool ok = false;
    std::string error;                // failure text when !ok
    long long trainable_scalars = 0;  // stage II parameter budget at this density
    MetricTrace metrics;
    std::vector<int> val_rows;        // held-out split, identical across periods
};

// Trains one fresh model per adapter period.  Seeds, data and the held-out
// split are shared across runs; a failing run is reported, not fatal.
template <class S>
std::vector<SweepRun> insertion_sweep(BackboneConfig cfg,
                                      const std::array<int, kModalityCount>& modal_dims,
                                      const Stage2Dataset<S>& ds, const TrainConfig& train_cfg,
                                      const std::optional<TrainConfig>& warm_cfg,
                                      const std::vector<int>& periods) {
    if (periods.empty()) throw ConfigError("insertion_sweep: no periods given");
    std::vector<SweepRun> out;
    for (const int k : periods) {
        SweepRun run;
        run.period = k;
        try {
            cfg.adapter_period = k;
            Rng rng(train_cfg.seed);
            BackboneParams<S> params = make_backbone<S>(rng, cfg, modal_dims);
            if (warm_cfg.has_value()) warm_fit(params, ds, *warm_cfg);
            run.trainable_scalars = trainable_scalar_count(params);
            Stage2Result res = stage2_train(params, ds, train_cfg);
            run.metrics = std::move(res.metrics);
            run.val_rows = std::move(res.val_rows);
            run.ok = true;
        } catch (const Error& e) {
            run.error = e.what();
        }
        out.push_back(std::move(run));
    }
    return out;
}

}  // namespace geowalk

#endif
