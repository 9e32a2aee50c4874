#ifndef GEOWALK_TENSOR_HPP
#define GEOWALK_TENSOR_HPP

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "geowalk/error.hpp"
#include "geowalk/graph.hpp"
#include "geowalk/manifold.hpp"
#include "geowalk/num_io.hpp"

// Reverse-mode tape over dense 2-D tensors.  Small by design: every value is
// an Eigen matrix, ops append nodes, backward() replays the tape in reverse.
// The scalar type is a template parameter — training instantiates float,
// gradient-check suites instantiate double — so the same op definitions are
// verified at 64-bit and executed at 32-bit.

namespace geowalk::ad {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;

enum class Activation { Identity, Relu, Tanh, Gelu };

inline const char* activation_name(Activation a) {
    switch (a) {
        case Activation::Identity: return "identity";
        case Activation::Relu: return "relu";
        case Activation::Tanh: return "tanh";
        case Activation::Gelu: return "gelu";
    }
    return "?";
}

inline Activation activation_from_name(const std::string& s) {
    if (s == "identity") return Activation::Identity;
    if (s == "relu") return Activation::Relu;
    if (s == "tanh") return Activation::Tanh;
    if (s == "gelu") return Activation::Gelu;
    throw ValidationError("unknown activation '" + s + "'");
}

// How a right-hand operand lines up against an (r x c) left operand.
enum class Shape { Same, Scalar, Col, Row };

template <class S>
class Tape {
public:
    int leaf(Mat<S> v) { return push(std::move(v), {}); }

    const Mat<S>& val(int id) const { return node(id).value; }
    const Mat<S>& grad(int id) const { return node(id).grad; }
    int size() const { return static_cast<int>(nodes_.size()); }

    // ---- arithmetic with broadcasting ----------------------------------

    int add(int a, int b) {
        const Shape sh = match(a, b, "add");
        Mat<S> out = val(a) + expand(val(b), rows(a), cols(a), sh);
        return push(std::move(out), [this, a, b, sh](const Mat<S>& g) {
            node(a).grad += g;
            node(b).grad += collapse(g, sh);
        });
    }

    int sub(int a, int b) {
        const Shape sh = match(a, b, "sub");
        Mat<S> out = val(a) - expand(val(b), rows(a), cols(a), sh);
        return push(std::move(out), [this, a, b, sh](const Mat<S>& g) {
            node(a).grad += g;
            node(b).grad -= collapse(g, sh);
        });
    }

    int mul(int a, int b) {
        const Shape sh = match(a, b, "mul");
        Mat<S> bx = expand(val(b), rows(a), cols(a), sh);
        Mat<S> out = val(a).cwiseProduct(bx);
        return push(std::move(out), [this, a, b, sh, bx](const Mat<S>& g) {
            node(a).grad += g.cwiseProduct(bx);
            node(b).grad += collapse(g.cwiseProduct(val(a)), sh);
        });
    }

    int div(int a, int b) {
        const Shape sh = match(a, b, "div");
        Mat<S> bx = expand(val(b), rows(a), cols(a), sh);
        Mat<S> out = val(a).cwiseQuotient(bx);
        return push(std::move(out), [this, a, b, sh, bx, out](const Mat<S>& g) {
            node(a).grad += g.cwiseQuotient(bx);
            node(b).grad -= collapse(g.cwiseProduct(out).cwiseQuotient(bx), sh);
        });
    }

    int scale(int a, double k) {
        Mat<S> out = val(a) * static_cast<S>(k);
        return push(std::move(out), [this, a, k](const Mat<S>& g) {
            node(a).grad += g * static_cast<S>(k);
        });
    }

    int add_scalar(int a, double k) {
        Mat<S> out = val(a).array() + static_cast<S>(k);
        return push(std::move(out), [this, a](const Mat<S>& g) { node(a).grad += g; });
    }

    int matmul(int a, int b, bool ta = false, bool tb = false) {
        const Eigen::Index inner_a = ta ? rows(a) : cols(a);
        const Eigen::Index inner_b = tb ? cols(b) : rows(b);
        if (inner_a != inner_b)
            throw DimensionError("matmul: inner dimensions disagree (" +
                                 format_int(inner_a) + " vs " + format_int(inner_b) + ")");
        Mat<S> out;
        if (!ta && !tb) out = val(a) * val(b);
        else if (ta && !tb) out = val(a).transpose() * val(b);
        else if (!ta && tb) out = val(a) * val(b).transpose();
        else out = val(a).transpose() * val(b).transpose();
        return push(std::move(out), [this, a, b, ta, tb](const Mat<S>& g) {
            const Mat<S>& av = val(a);
            const Mat<S>& bv = val(b);
            if (!ta) node(a).grad += tb ? Mat<S>(g * bv) : Mat<S>(g * bv.transpose());
            else node(a).grad += tb ? Mat<S>(bv.transpose() * g.transpose())
                                    : Mat<S>(bv * g.transpose());
            if (!tb) node(b).grad += ta ? Mat<S>(av * g) : Mat<S>(av.transpose() * g);
            else node(b).grad += ta ? Mat<S>(g.transpose() * av.transpose())
                                    : Mat<S>(g.transpose() * av);
        });
    }

    // ---- pointwise nonlinearities --------------------------------------

    int relu(int a) {
        Mat<S> out = val(a).cwiseMax(S(0));
        return push(std::move(out), [this, a](const Mat<S>& g) {
            node(a).grad += (val(a).array() > S(0)).template cast<S>().matrix().cwiseProduct(g);
        });
    }

    int tanh_act(int a) {
        Mat<S> out = val(a).array().tanh();
        return push(std::move(out), [this, a, out](const Mat<S>& g) {
            node(a).grad += ((S(1) - out.array().square()) * g.array()).matrix();
        });
    }

    int gelu(int a) {
        // exact form: x * Phi(x) with the Gaussian CDF
        Mat<S> out = val(a).unaryExpr([](S v) {
            const double x = static_cast<double>(v);
            return static_cast<S>(0.5 * x * (1.0 + std::erf(x * 0.7071067811865476)));
        });
        return push(std::move(out), [this, a](const Mat<S>& g) {
            Mat<S> dv = val(a).unaryExpr([](S v) {
                const double x = static_cast<double>(v);
                const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
                const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
                return static_cast<S>(cdf + x * pdf);
            });
            node(a).grad += dv.cwiseProduct(g);
        });
    }

    int softplus(int a) {
        // log(1+e^x) written to avoid overflow on both tails
        const auto& x = val(a).array();
        Mat<S> out = (x.max(S(0)) + (S(1) + (-x.abs()).exp()).log()).matrix();
        return push(std::move(out), [this, a](const Mat<S>& g) {
            const auto sig = S(1) / (S(1) + (-val(a).array()).exp());
            node(a).grad += (sig * g.array()).matrix();
        });
    }

    int activation(int a, Activation act) {
        switch (act) {
            case Activation::Identity: return a;
            case Activation::Relu: return relu(a);
            case Activation::Tanh: return tanh_act(a);
            case Activation::Gelu: return gelu(a);
        }
        throw ValidationError("activation: unknown kind");
    }

    int square(int a) {
        Mat<S> out = val(a).array().square();
        return push(std::move(out), [this, a](const Mat<S>& g) {
            node(a).grad += (S(2) * val(a).array() * g.array()).matrix();
        });
    }

    // ---- reductions and structure ops -----------------------------------

    int softmax_rows(int a) {
        Mat<S> out = val(a);
        for (Eigen::Index i = 0; i < out.rows(); ++i) {
            Arr<S> row = out.row(i).transpose().array();
            row -= row.maxCoeff();
            row = row.exp();
            out.row(i) = (row / row.sum()).matrix().transpose();
        }
        return push(std::move(out), [this, a, out](const Mat<S>& g) {
            Mat<S> gy = g.cwiseProduct(out);
            Mat<S> rowsum = gy.rowwise().sum();
            node(a).grad += out.cwiseProduct(g - rowsum * Mat<S>::Ones(1, g.cols()));
        });
    }

    int rowdot(int a, int b) {
        if (rows(a) != rows(b) || cols(a) != cols(b))
            throw DimensionError("rowdot: shape mismatch");
        Mat<S> out = val(a).cwiseProduct(val(b)).rowwise().sum();
        return push(std::move(out), [this, a, b](const Mat<S>& g) {
            Mat<S> gcol = g * Mat<S>::Ones(1, cols(a));
            node(a).grad += gcol.cwiseProduct(val(b));
            node(b).grad += gcol.cwiseProduct(val(a));
        });
    }

    int row_norm2(int a) {
        Mat<S> out = val(a).rowwise().squaredNorm();
        return push(std::move(out), [this, a](const Mat<S>& g) {
            Mat<S> gcol = g * Mat<S>::Ones(1, cols(a));
            node(a).grad += S(2) * gcol.cwiseProduct(val(a));
        });
    }

    int sum_all(int a) {
        Mat<S> out(1, 1);
        out(0, 0) = val(a).sum();
        return push(std::move(out), [this, a](const Mat<S>& g) {
            node(a).grad.array() += g(0, 0);
        });
    }

    int mean_all(int a) {
        const double inv = 1.0 / static_cast<double>(rows(a) * cols(a));
        return scale(sum_all(a), inv);
    }

    int slice_cols(int a, int j0, int len) {
        if (j0 < 0 || len < 1 || j0 + len > cols(a))
            throw DimensionError("slice_cols: range outside matrix");
        Mat<S> out = val(a).middleCols(j0, len);
        return push(std::move(out), [this, a, j0, len](const Mat<S>& g) {
            node(a).grad.middleCols(j0, len) += g;
        });
    }

    int concat_cols(const std::vector<int>& parts) {
        if (parts.empty()) throw DimensionError("concat_cols: no operands");
        Eigen::Index total = 0;
        for (int p : parts) {
            if (rows(p) != rows(parts[0]))
                throw DimensionError("concat_cols: row counts disagree");
            total += cols(p);
        }
        Mat<S> out(rows(parts[0]), total);
        Eigen::Index at = 0;
        for (int p : parts) {
            out.middleCols(at, cols(p)) = val(p);
            at += cols(p);
        }
        return push(std::move(out), [this, parts](const Mat<S>& g) {
            Eigen::Index at = 0;
            for (int p : parts) {
                node(p).grad += g.middleCols(at, cols(p));
                at += cols(p);
            }
        });
    }

    int gather_rows(int a, std::vector<int> rows_idx) {
        for (int r : rows_idx)
            if (r < 0 || r >= rows(a)) throw DimensionError("gather_rows: index out of range");
        Mat<S> out(static_cast<Eigen::Index>(rows_idx.size()), cols(a));
        for (std::size_t i = 0; i < rows_idx.size(); ++i)
            out.row(static_cast<Eigen::Index>(i)) = val(a).row(rows_idx[i]);
        return push(std::move(out), [this, a, rows_idx](const Mat<S>& g) {
            for (std::size_t i = 0; i < rows_idx.size(); ++i)
                node(a).grad.row(rows_idx[i]) += g.row(static_cast<Eigen::Index>(i));
        });
    }

    // Zips k same-shaped n x d matrices into one (n*k) x d matrix so that
    // out.row(i*k + j) = parts[j].row(i): the token-major layout the
    // attention op expects when each part carries one token per sample.
    int interleave_rows(const std::vector<int>& parts) {
        if (parts.empty()) throw DimensionError("interleave_rows: no operands");
        const Eigen::Index n = rows(parts[0]), d = cols(parts[0]);
        for (int p : parts)
            if (rows(p) != n || cols(p) != d)
                throw DimensionError("interleave_rows: operand shapes disagree");
        const auto k = static_cast<Eigen::Index>(parts.size());
        Mat<S> out(n * k, d);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < k; ++j)
                out.row(i * k + j) = val(parts[static_cast<std::size_t>(j)]).row(i);
        return push(std::move(out), [this, parts, n, k](const Mat<S>& g) {
            for (Eigen::Index i = 0; i < n; ++i)
                for (Eigen::Index j = 0; j < k; ++j)
                    node(parts[static_cast<std::size_t>(j)]).grad.row(i) += g.row(i * k + j);
        });
    }

    // ---- fused network layers -------------------------------------------

    int layer_norm(int x, int gain, int bias, double eps = 1e-5) {
        if (rows(gain) != 1 || cols(gain) != cols(x) || rows(bias) != 1 ||
            cols(bias) != cols(x))
            throw DimensionError("layer_norm: gain/bias must be 1 x cols(x)");
        const Eigen::Index n = rows(x), d = cols(x);
        auto saved = std::make_shared<std::pair<Mat<S>, Mat<S>>>();  // xhat, inv-std (n x 1)
        Mat<S>& xhat = saved->first;
        Mat<S>& inv = saved->second;
        xhat.resize(n, d);
        inv.resize(n, 1);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto row = val(x).row(i).array();
            const S mu = row.mean();
            const S var = (row - mu).square().mean();
            const S is = S(1) / std::sqrt(var + static_cast<S>(eps));
            inv(i, 0) = is;
            xhat.row(i) = ((row - mu) * is).matrix();
        }
        Mat<S> out = xhat.cwiseProduct(Mat<S>::Ones(n, 1) * val(gain)) +
                     Mat<S>::Ones(n, 1) * val(bias);
        return push(std::move(out), [this, x, gain, bias, saved, d](const Mat<S>& g) {
            const Mat<S>& xh = saved->first;
            const Mat<S>& is = saved->second;
            node(gain).grad += g.cwiseProduct(xh).colwise().sum();
            node(bias).grad += g.colwise().sum();
            Mat<S> dxh = g.cwiseProduct(Mat<S>::Ones(g.rows(), 1) * val(gain));
            Mat<S> m1 = dxh.rowwise().mean();
            Mat<S> m2 = dxh.cwiseProduct(xh).rowwise().mean();
            Mat<S> ones = Mat<S>::Ones(1, d);
            Mat<S> dx = (dxh - m1 * ones - xh.cwiseProduct(m2 * ones))
                            .cwiseProduct(is * ones);
            node(x).grad += dx;
        });
    }

    // Multi-head self-attention over blocks of `tokens` consecutive rows,
    // each block one sample; weights are model_dim x model_dim.
    int attention(int x, int wq, int wk, int wv, int wo, int tokens, int heads) {
        const Eigen::Index d = cols(x);
        if (rows(x) % tokens != 0)
            throw DimensionError("attention: row count not divisible by tokens per sample");
        if (d % heads != 0) throw DimensionError("attention: heads must divide model dim");
        for (int w : {wq, wk, wv, wo})
            if (rows(w) != d || cols(w) != d)
                throw DimensionError("attention: projection weights must be square model dim");
        const Eigen::Index n_samples = rows(x) / tokens;
        const Eigen::Index dh = d / heads;
        const S inv_scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

        struct Saved {
            Mat<S> q, k, v, o;
            std::vector<Mat<S>> att;  // one T x T softmax per (sample, head)
        };
        auto saved = std::make_shared<Saved>();
        saved->q = val(x) * val(wq);
        saved->k = val(x) * val(wk);
        saved->v = val(x) * val(wv);
        saved->o.resize(rows(x), d);
        saved->att.reserve(static_cast<std::size_t>(n_samples * heads));
        for (Eigen::Index s = 0; s < n_samples; ++s) {
            for (Eigen::Index h = 0; h < heads; ++h) {
                const auto qh = saved->q.block(s * tokens, h * dh, tokens, dh);
                const auto kh = saved->k.block(s * tokens, h * dh, tokens, dh);
                const auto vh = saved->v.block(s * tokens, h * dh, tokens, dh);
                Mat<S> scores = qh * kh.transpose() * inv_scale;
                for (Eigen::Index i = 0; i < tokens; ++i) {
                    Arr<S> row = scores.row(i).transpose().array();
                    row -= row.maxCoeff();
                    row = row.exp();
                    scores.row(i) = (row / row.sum()).matrix().transpose();
                }
                saved->o.block(s * tokens, h * dh, tokens, dh) = scores * vh;
                saved->att.push_back(std::move(scores));
            }
        }
        Mat<S> out = saved->o * val(wo);
        return push(std::move(out), [this, x, wq, wk, wv, wo, tokens, heads, saved,
                                     inv_scale](const Mat<S>& g) {
            const Eigen::Index d = cols(x);
            const Eigen::Index dh = d / heads;
            const Eigen::Index n_samples = rows(x) / tokens;
            node(wo).grad += saved->o.transpose() * g;
            Mat<S> go = g * val(wo).transpose();
            Mat<S> gq = Mat<S>::Zero(rows(x), d);
            Mat<S> gk = Mat<S>::Zero(rows(x), d);
            Mat<S> gv = Mat<S>::Zero(rows(x), d);
            for (Eigen::Index s = 0; s < n_samples; ++s) {
                for (Eigen::Index h = 0; h < heads; ++h) {
                    const Mat<S>& att = saved->att[static_cast<std::size_t>(s * heads + h)];
                    const auto qh = saved->q.block(s * tokens, h * dh, tokens, dh);
                    const auto kh = saved->k.block(s * tokens, h * dh, tokens, dh);
                    const auto vh = saved->v.block(s * tokens, h * dh, tokens, dh);
                    const auto goh = go.block(s * tokens, h * dh, tokens, dh);
                    Mat<S> datt = goh * vh.transpose();
                    gv.block(s * tokens, h * dh, tokens, dh) += att.transpose() * goh;
                    Mat<S> gs = att.cwiseProduct(
                        datt - datt.cwiseProduct(att).rowwise().sum() *
                                   Mat<S>::Ones(1, tokens));
                    gs *= inv_scale;
                    gq.block(s * tokens, h * dh, tokens, dh) += gs * kh;
                    gk.block(s * tokens, h * dh, tokens, dh) += gs.transpose() * qh;
                }
            }
            node(wq).grad += val(x).transpose() * gq;
            node(wk).grad += val(x).transpose() * gk;
            node(wv).grad += val(x).transpose() * gv;
            node(x).grad += gq * val(wq).transpose() + gk * val(wk).transpose() +
                            gv * val(wv).transpose();
        });
    }

    // Mean over graph neighbors, rows = nodes.  Nodes with no neighbors pass
    // their own row through.  The graph must outlive the tape.
    int sage_mean(int x, const RelationalGraph* graph) {
        if (graph == nullptr) throw ValidationError("sage_mean: missing graph");
        if (rows(x) != graph->n)
            throw DimensionError("sage_mean: row count " + format_int(rows(x)) +
                                 " != graph node count " + format_int(graph->n));
        Mat<S> out(rows(x), cols(x));
        for (int v = 0; v < graph->n; ++v) {
            const auto& nb = graph->neighbors[static_cast<std::size_t>(v)];
            if (nb.empty()) {
                out.row(v) = val(x).row(v);
                continue;
            }
            out.row(v).setZero();
            for (const auto& [u, dist] : nb) out.row(v) += val(x).row(u);
            out.row(v) /= static_cast<S>(nb.size());
        }
        return push(std::move(out), [this, x, graph](const Mat<S>& g) {
            Mat<S>& gx = node(x).grad;
            for (int v = 0; v < graph->n; ++v) {
                const auto& nb = graph->neighbors[static_cast<std::size_t>(v)];
                if (nb.empty()) {
                    gx.row(v) += g.row(v);
                    continue;
                }
                const S w = S(1) / static_cast<S>(nb.size());
                for (const auto& [u, dist] : nb) gx.row(u) += g.row(v) * w;
            }
        });
    }

    // ---- manifold charts (fixed curvature) ------------------------------
    // Rows are tangent vectors at the origin (exp) or ambient points (log).

    int manifold_exp0(int x, const ManifoldSpec& spec) {
        spec.validate();
        if (!spec.curved()) return x;
        const Eigen::Index n = rows(x), d = cols(x);
        const double rc = std::sqrt(std::abs(spec.curvature));
        const bool hyp = spec.kind == Kind::Hyperbolic;
        auto sval = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
        Mat<S> out(n, d + 1);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double r = val(x).row(i).template cast<double>().norm();
            const double s = rc * r;
            (*sval)[static_cast<std::size_t>(i)] = s;
            if (hyp) {
                out(i, 0) = static_cast<S>(std::cosh(s) / rc);
                out.row(i).tail(d) =
                    val(x).row(i) * static_cast<S>(series::sinhc(s));
            } else {
                out(i, 0) = static_cast<S>(std::cos(s) / rc);
                out.row(i).tail(d) = val(x).row(i) * static_cast<S>(series::sinc(s));
            }
        }
        return push(std::move(out), [this, x, rc, hyp, sval, d](const Mat<S>& g) {
            Mat<S>& gx = node(x).grad;
            const double c_abs = rc * rc;
            for (Eigen::Index i = 0; i < rows(x); ++i) {
                const double s = (*sval)[static_cast<std::size_t>(i)];
                const auto w = val(x).row(i);
                const auto gr = g.row(i).tail(d);
                const double g0 = static_cast<double>(g(i, 0));
                const double gw = static_cast<double>(gr.dot(w));
                if (hyp) {
                    gx.row(i) += gr * static_cast<S>(series::sinhc(s)) +
                                 w * static_cast<S>(g0 * rc * series::sinhc(s) +
                                                    gw * c_abs * series::d_sinhc(s));
                } else {
                    gx.row(i) += gr * static_cast<S>(series::sinc(s)) +
                                 w * static_cast<S>(-g0 * rc * series::sinc(s) +
                                                    gw * c_abs * series::d_sinc(s));
                }
            }
        });
    }

    int manifold_log0(int x, const ManifoldSpec& spec) {
        spec.validate();
        if (!spec.curved()) return x;
        const Eigen::Index n = rows(x), d = cols(x) - 1;
        if (d < 1) throw DimensionError("manifold_log0: ambient dimension too small");
        const double rc = std::sqrt(std::abs(spec.curvature));
        const bool hyp = spec.kind == Kind::Hyperbolic;
        auto sval = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
        Mat<S> out(n, d);
        for (Eigen::Index i = 0; i < n; ++i) {
            // scaled angle via the chord through the origin where the
            // arccosh closed form loses its precision, switching to acosh
            // once the chord difference itself would cancel (far-out rows).
            // The regime test keys on rc*x0 = cosh(s), which never cancels.
            const double x0 = static_cast<double>(val(x)(i, 0));
            const double rest2 = val(x).row(i).tail(d).template cast<double>().squaredNorm();
            double s;
            if (hyp) {
                if (rc * x0 < 2.0) {
                    const double q =
                        std::max(rest2 - (x0 - 1.0 / rc) * (x0 - 1.0 / rc), 0.0);
                    s = 2.0 * std::asinh(0.5 * rc * std::sqrt(q));
                } else {
                    s = std::acosh(rc * x0);
                }
            } else {
                const double chord2 = rest2 + (x0 - 1.0 / rc) * (x0 - 1.0 / rc);
                s = 2.0 * std::asin(std::min(0.5 * rc * std::sqrt(chord2), 1.0));
            }
            (*sval)[static_cast<std::size_t>(i)] = s;
            const double f = hyp ? series::inv_sinhc(s) : series::inv_sinc(s);
            out.row(i) = val(x).row(i).tail(d) * static_cast<S>(f);
        }
        return push(std::move(out), [this, x, rc, hyp, sval, d](const Mat<S>& g) {
            Mat<S>& gx = node(x).grad;
            for (Eigen::Index i = 0; i < rows(x); ++i) {
                const double s = (*sval)[static_cast<std::size_t>(i)];
                const auto xr = val(x).row(i).tail(d);
                const double gdotx = static_cast<double>(g.row(i).dot(xr));
                if (hyp) {
                    gx.row(i).tail(d) += g.row(i) * static_cast<S>(series::inv_sinhc(s));
                    gx(i, 0) += static_cast<S>(gdotx * rc * series::d_inv_sinhc(s) *
                                               series::inv_sinhc(s));
                } else {
                    gx.row(i).tail(d) += g.row(i) * static_cast<S>(series::inv_sinc(s));
                    gx(i, 0) += static_cast<S>(-gdotx * rc * series::d_inv_sinc(s) *
                                               series::inv_sinc(s));
                }
            }
        });
    }

    // ---- Poincare ball ops with learnable curvature scale ----------------
    // `a` is a 1x1 node holding sqrt(|c|) > 0, so curvature gradients flow.

    int poincare_exp0(int x, int a) {
        require_scalar(a, "poincare_exp0");
        const double av = static_cast<double>(val(a)(0, 0));
        const Eigen::Index n = rows(x);
        Mat<S> out(n, cols(x));
        auto rs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
        for (Eigen::Index i = 0; i < n; ++i) {
            const double r = static_cast<double>(val(x).row(i).norm());
            (*rs)[static_cast<std::size_t>(i)] = r;
            out.row(i) = val(x).row(i) * static_cast<S>(series::tanhc(av * r));
        }
        return push(std::move(out), [this, x, a, av, rs](const Mat<S>& g) {
            Mat<S>& gx = node(x).grad;
            double ga = 0.0;
            for (Eigen::Index i = 0; i < rows(x); ++i) {
                const double r = (*rs)[static_cast<std::size_t>(i)];
                const double s = av * r;
                const auto w = val(x).row(i);
                const double gw = static_cast<double>(g.row(i).dot(w));
                gx.row(i) += g.row(i) * static_cast<S>(series::tanhc(s)) +
                             w * static_cast<S>(gw * av * av * series::d_tanhc(s));
                ga += gw * series::d_tanhc(s) * av * r * r;
            }
            node(a).grad(0, 0) += static_cast<S>(ga);
        });
    }

    int poincare_log0(int x, int a) {
        require_scalar(a, "poincare_log0");
        const double av = static_cast<double>(val(a)(0, 0));
        const Eigen::Index n = rows(x);
        Mat<S> out(n, cols(x));
        auto rs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
        for (Eigen::Index i = 0; i < n; ++i) {
            const double r = static_cast<double>(val(x).row(i).norm());
            if (av * r >= 1.0)
                throw DomainError("poincare_log0: row " + format_int(i) +
                                  " is outside the unit-scaled ball");
            (*rs)[static_cast<std::size_t>(i)] = r;
            out.row(i) = val(x).row(i) * static_cast<S>(series::atanhc(av * r));
        }
        return push(std::move(out), [this, x, a, av, rs](const Mat<S>& g) {
            Mat<S>& gx = node(x).grad;
            double ga = 0.0;
            for (Eigen::Index i = 0; i < rows(x); ++i) {
                const double r = (*rs)[static_cast<std::size_t>(i)];
                const double s = av * r;
                const auto y = val(x).row(i);
                const double gy = static_cast<double>(g.row(i).dot(y));
                gx.row(i) += g.row(i) * static_cast<S>(series::atanhc(s)) +
                             y * static_cast<S>(gy * av * av * series::d_atanhc(s));
                ga += gy * series::d_atanhc(s) * av * r * r;
            }
            node(a).grad(0, 0) += static_cast<S>(ga);
        });
    }

    // Radially rescale rows whose scaled norm would leave the ball; margin is
    // the kept distance to the boundary (in scaled units).
    int ball_clamp(int x, int a, double margin = 1e-3) {
        require_scalar(a, "ball_clamp");
        const double av = static_cast<double>(val(a)(0, 0));
        const double limit = (1.0 - margin) / av;
        const Eigen::Index n = rows(x);
        Mat<S> out(n, cols(x));
        auto rs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
        for (Eigen::Index i = 0; i < n; ++i) {
            const double r = static_cast<double>(val(x).row(i).norm());
            (*rs)[static_cast<std::size_t>(i)] = r;
            out.row(i) = r <= limit ? val(x).row(i)
                                    : Mat<S>(val(x).row(i) * static_cast<S>(limit / r));
        }
        return push(std::move(out), [this, x, a, av, limit, rs](const Mat<S>& g) {
            Mat<S>& gx = node(x).grad;
            double ga = 0.0;
            for (Eigen::Index i = 0; i < rows(x); ++i) {
                const double r = (*rs)[static_cast<std::size_t>(i)];
                if (r <= limit) {
                    gx.row(i) += g.row(i);
                    continue;
                }
                const auto xr = val(x).row(i);
                const double gdx = static_cast<double>(g.row(i).dot(xr));
                gx.row(i) += (g.row(i) - xr * static_cast<S>(gdx / (r * r))) *
                             static_cast<S>(limit / r);
                // d(limit)/da = -limit/a
                ga -= gdx / r * limit / av;
            }
            node(a).grad(0, 0) += static_cast<S>(ga);
        });
    }

    // Elementwise square root over strictly positive entries; backs the
    // softplus-parameterized curvature scales (a = sqrt(softplus(raw))).
    int sqrt_pos(int x) {
        if ((val(x).array() <= S(0)).any())
            throw DomainError("sqrt_pos: entries must be strictly positive");
        Mat<S> out = val(x).array().sqrt();
        return push(std::move(out), [this, x, out](const Mat<S>& g) {
            node(x).grad += (g.array() * (S(0.5) / out.array())).matrix();
        });
    }

    // Tiles a single row n times. Backward sums the incoming gradient rows.
    int repeat_rows(int x, Eigen::Index n) {
        if (rows(x) != 1) throw DimensionError("repeat_rows: input must be a single row");
        if (n < 1) throw DimensionError("repeat_rows: need at least one copy");
        Mat<S> out = val(x).replicate(n, 1);
        return push(std::move(out), [this, x](const Mat<S>& g) {
            node(x).grad += g.colwise().sum();
        });
    }

    // out_i = k * x_i / |x_i| with k a 1x1 node; rows with norm below 1e-12
    // have no direction to keep and are rejected.
    int row_normalize_scale(int x, int k) {
        require_scalar(k, "row_normalize_scale");
        const double kv = static_cast<double>(val(k)(0, 0));
        const Eigen::Index n = rows(x);
        auto rs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
        Mat<S> out(n, cols(x));
        for (Eigen::Index i = 0; i < n; ++i) {
            const double r = val(x).row(i).template cast<double>().norm();
            if (r < 1e-12)
                throw DomainError("row_normalize_scale: row " + format_int(i) +
                                  " has no direction to normalize");
            (*rs)[static_cast<std::size_t>(i)] = r;
            out.row(i) = val(x).row(i) * static_cast<S>(kv / r);
        }
        return push(std::move(out), [this, x, k, kv, rs](const Mat<S>& g) {
            Mat<S>& gx = node(x).grad;
            double gk = 0.0;
            for (Eigen::Index i = 0; i < rows(x); ++i) {
                const double r = (*rs)[static_cast<std::size_t>(i)];
                const auto xr = val(x).row(i);
                const double gdotu = static_cast<double>(g.row(i).dot(xr)) / r;
                gx.row(i) += (g.row(i) - xr * static_cast<S>(gdotu / r)) *
                             static_cast<S>(kv / r);
                gk += gdotu;
            }
            node(k).grad(0, 0) += static_cast<S>(gk);
        });
    }

    // Mobius addition u (+) v rowwise on the ball of curvature -a^2, with
    // gradients for both operands and the scale a. Same-shape operands only;
    // broadcast a bias row through repeat_rows first.
    int mobius_add(int u, int v, int a) {
        require_scalar(a, "mobius_add");
        if (rows(u) != rows(v) || cols(u) != cols(v))
            throw DimensionError("mobius_add: shape mismatch");
        const double av = static_cast<double>(val(a)(0, 0));
        const double ck = av * av;  // |c|
        const Eigen::Index n = rows(u);
        auto out_d = std::make_shared<Eigen::MatrixXd>(n, cols(u));
        Mat<S> out(n, cols(u));
        for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::VectorXd ur = val(u).row(i).transpose().template cast<double>();
            const Eigen::VectorXd vr = val(v).row(i).transpose().template cast<double>();
            const double r = ur.dot(vr), p = ur.squaredNorm(), q = vr.squaredNorm();
            const double alpha = 1.0 + 2.0 * ck * r + ck * q;
            const double beta = 1.0 - ck * p;
            const double den = 1.0 + 2.0 * ck * r + ck * ck * p * q;
            out_d->row(i) = ((alpha * ur + beta * vr) / den).transpose();
            out.row(i) = out_d->row(i).template cast<S>();
        }
        return push(std::move(out), [this, u, v, a, av, ck, out_d](const Mat<S>& g) {
            double ga = 0.0;
            for (Eigen::Index i = 0; i < rows(u); ++i) {
                const Eigen::VectorXd ur = val(u).row(i).transpose().template cast<double>();
                const Eigen::VectorXd vr = val(v).row(i).transpose().template cast<double>();
                const Eigen::VectorXd gr = g.row(i).transpose().template cast<double>();
                const Eigen::VectorXd yr = out_d->row(i).transpose();
                const double r = ur.dot(vr), p = ur.squaredNorm(), q = vr.squaredNorm();
                const double alpha = 1.0 + 2.0 * ck * r + ck * q;
                const double beta = 1.0 - ck * p;
                const double den = 1.0 + 2.0 * ck * r + ck * ck * p * q;
                const double gu = gr.dot(ur), gv = gr.dot(vr), gy = gr.dot(yr);
                const Eigen::VectorXd du =
                    (alpha * gr + 2.0 * ck * gu * vr - 2.0 * ck * gv * ur -
                     gy * (2.0 * ck * vr + 2.0 * ck * ck * q * ur)) /
                    den;
                const Eigen::VectorXd dv =
                    (beta * gr + 2.0 * ck * gu * (ur + vr) -
                     gy * (2.0 * ck * ur + 2.0 * ck * ck * p * vr)) /
                    den;
                node(u).grad.row(i) += du.transpose().template cast<S>();
                node(v).grad.row(i) += dv.transpose().template cast<S>();
                // d/d|c|, chained through |c| = a^2
                const double dck = ((2.0 * r + q) * gu - p * gv -
                                    gy * (2.0 * r + 2.0 * ck * p * q)) /
                                   den;
                ga += dck * 2.0 * av;
            }
            node(a).grad(0, 0) += static_cast<S>(ga);
        });
    }

    // Caps every row of x at Euclidean norm `limit`; rows below the cap pass
    // through untouched. Used as a tangent-space guard ahead of exponential
    // maps so cosh/sinh arguments stay inside the working float range.
    int row_clip(int x, double limit) {
        if (!(limit > 0.0)) throw ValidationError("row_clip: limit must be positive");
        const Eigen::Index n = rows(x);
        Mat<S> out(n, cols(x));
        auto rs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
        for (Eigen::Index i = 0; i < n; ++i) {
            const double r = val(x).row(i).template cast<double>().norm();
            (*rs)[static_cast<std::size_t>(i)] = r;
            out.row(i) = r <= limit ? val(x).row(i)
                                    : Mat<S>(val(x).row(i) * static_cast<S>(limit / r));
        }
        return push(std::move(out), [this, x, limit, rs](const Mat<S>& g) {
            Mat<S>& gx = node(x).grad;
            for (Eigen::Index i = 0; i < rows(x); ++i) {
                const double r = (*rs)[static_cast<std::size_t>(i)];
                if (r <= limit) {
                    gx.row(i) += g.row(i);
                    continue;
                }
                const auto xr = val(x).row(i);
                const double gdx = static_cast<double>(g.row(i).dot(xr));
                gx.row(i) += (g.row(i) - xr * static_cast<S>(gdx / (r * r))) *
                             static_cast<S>(limit / r);
            }
        });
    }

    // ---- losses ----------------------------------------------------------

    int cross_entropy_mean(int logits, const Eigen::VectorXi& labels) {
        if (rows(logits) != labels.size())
            throw DimensionError("cross_entropy_mean: batch size mismatch");
        const Eigen::Index n = rows(logits), c = cols(logits);
        auto probs = std::make_shared<Mat<S>>(n, c);
        double total = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (labels(i) < 0 || labels(i) >= c)
                throw ValidationError("cross_entropy_mean: label " + format_int(labels(i)) +
                                      " outside [0, " + format_int(c) + ")");
            Arr<S> row = val(logits).row(i).transpose().array();
            const S mx = row.maxCoeff();
            row -= mx;
            const S lse = std::log(row.exp().sum());
            probs->row(i) = (row - lse).exp().matrix().transpose();
            total += static_cast<double>(lse - row(labels(i)));
        }
        Mat<S> out(1, 1);
        out(0, 0) = static_cast<S>(total / static_cast<double>(n));
        return push(std::move(out), [this, logits, labels, probs](const Mat<S>& g) {
            const S w = g(0, 0) / static_cast<S>(rows(logits));
            Mat<S> d = *probs;
            for (Eigen::Index i = 0; i < d.rows(); ++i) d(i, labels(i)) -= S(1);
            node(logits).grad += d * w;
        });
    }

    int smooth_l1_mean(int pred, const Mat<S>& target, double beta) {
        if (rows(pred) != target.rows() || cols(pred) != target.cols())
            throw DimensionError("smooth_l1_mean: prediction/target shape mismatch");
        if (!(beta > 0.0)) throw ConfigError("smooth_l1_mean: beta must be positive");
        const Eigen::Index count = target.size();
        Mat<S> err = val(pred) - target;
        double total = 0.0;
        for (Eigen::Index i = 0; i < err.rows(); ++i)
            for (Eigen::Index j = 0; j < err.cols(); ++j) {
                const double e = std::abs(static_cast<double>(err(i, j)));
                total += e < beta ? 0.5 * e * e / beta : e - 0.5 * beta;
            }
        Mat<S> out(1, 1);
        out(0, 0) = static_cast<S>(total / static_cast<double>(count));
        return push(std::move(out), [this, pred, err, beta, count](const Mat<S>& g) {
            const S w = g(0, 0) / static_cast<S>(count);
            Mat<S> d = (err / static_cast<S>(beta))
                           .cwiseMax(S(-1))
                           .cwiseMin(S(1));
            node(pred).grad += d * w;
        });
    }

    int mse_mean(int pred, const Mat<S>& target) {
        if (rows(pred) != target.rows() || cols(pred) != target.cols())
            throw DimensionError("mse_mean: prediction/target shape mismatch");
        const Eigen::Index count = target.size();
        Mat<S> err = val(pred) - target;
        Mat<S> out(1, 1);
        out(0, 0) = static_cast<S>(err.squaredNorm() / static_cast<double>(count));
        return push(std::move(out), [this, pred, err, count](const Mat<S>& g) {
            node(pred).grad += err * (S(2) * g(0, 0) / static_cast<S>(count));
        });
    }

    // ---- reverse sweep ----------------------------------------------------

    void backward(int root) {
        if (rows(root) != 1 || cols(root) != 1)
            throw DimensionError("backward: root must be a scalar node");
        for (Node& n : nodes_) n.grad.setZero(n.value.rows(), n.value.cols());
        node(root).grad(0, 0) = S(1);
        for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (n.backward && !n.grad.isZero(S(0))) n.backward(n.grad);
        }
    }

private:
    struct Node {
        Mat<S> value;
        Mat<S> grad;
        std::function<void(const Mat<S>&)> backward;
    };

    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    Eigen::Index rows(int id) const { return node(id).value.rows(); }
    Eigen::Index cols(int id) const { return node(id).value.cols(); }

    void require_scalar(int id, const char* op) const {
        if (rows(id) != 1 || cols(id) != 1)
            throw DimensionError(std::string(op) + ": expected a 1x1 node");
    }

    int push(Mat<S> value, std::function<void(const Mat<S>&)> backward) {
        nodes_.push_back(Node{std::move(value), Mat<S>(), std::move(backward)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    Shape match(int a, int b, const char* op) const {
        if (rows(b) == rows(a) && cols(b) == cols(a)) return Shape::Same;
        if (rows(b) == 1 && cols(b) == 1) return Shape::Scalar;
        if (rows(b) == rows(a) && cols(b) == 1) return Shape::Col;
        if (rows(b) == 1 && cols(b) == cols(a)) return Shape::Row;
        throw DimensionError(std::string(op) + ": cannot broadcast (" + format_int(rows(b)) +
                             "," + format_int(cols(b)) + ") against (" + format_int(rows(a)) +
                             "," + format_int(cols(a)) + ")");
    }

    static Mat<S> expand(const Mat<S>& b, Eigen::Index r, Eigen::Index c, Shape sh) {
        switch (sh) {
            case Shape::Same: return b;
            case Shape::Scalar: return Mat<S>::Constant(r, c, b(0, 0));
            case Shape::Col: return b * Mat<S>::Ones(1, c);
            case Shape::Row: return Mat<S>::Ones(r, 1) * b;
        }
        return b;
    }

    static Mat<S> collapse(const Mat<S>& g, Shape sh) {
        switch (sh) {
            case Shape::Same: return g;
            case Shape::Scalar: {
                Mat<S> out(1, 1);
                out(0, 0) = g.sum();
                return out;
            }
            case Shape::Col: return g.rowwise().sum();
            case Shape::Row: return g.colwise().sum();
        }
        return g;
    }

    std::vector<Node> nodes_;
};

}  // namespace geowalk::ad

#endif
