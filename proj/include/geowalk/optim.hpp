#ifndef GEOWALK_OPTIM_HPP
#define GEOWALK_OPTIM_HPP

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "geowalk/error.hpp"
#include "geowalk/tensor.hpp"

// Parameters live outside the tape (the tape is rebuilt every step), so the
// optimizer works on named bindings: a pointer to the stored matrix plus the
// leaf id it was given on the current tape.

namespace geowalk::ad {

template <class S>
struct ParamBinding {
    std::string name;   // stable across steps; keys the optimizer state
    Mat<S>* value;
    bool decay;         // weight decay applies (off for biases, gains, scalars)
    int node = -1;      // leaf id on the current tape, set by bind()
};

template <class S>
struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int warmup_steps = 0;  // linear ramp from 0 over this many steps
};

template <class S>
class AdamW {
public:
    explicit AdamW(AdamWConfig<S> cfg) : cfg_(cfg) {
        if (!(cfg.lr > 0.0)) throw ConfigError("AdamW: lr must be positive");
        if (cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 || cfg.beta2 >= 1.0)
            throw ConfigError("AdamW: betas must lie in [0, 1)");
        if (cfg.warmup_steps < 0) throw ConfigError("AdamW: warmup_steps must be >= 0");
    }

    // Effective rate for the step about to be taken (1-based).
    double next_lr() const {
        const int t = step_ + 1;
        double lr = cfg_.lr * scale_;
        if (cfg_.warmup_steps > 0 && t <= cfg_.warmup_steps)
            lr *= static_cast<double>(t) / static_cast<double>(cfg_.warmup_steps);
        return lr;
    }

    // Multiplies the base rate; used for step decay between epochs.
    void set_lr_scale(double scale) {
        if (!(scale > 0.0)) throw ConfigError("AdamW: lr scale must be positive");
        scale_ = scale;
    }

    int steps_done() const { return step_; }

    void step(std::vector<ParamBinding<S>>& params, const Tape<S>& tape) {
        const double lr = next_lr();
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, step_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, step_);
        for (ParamBinding<S>& p : params) {
            if (p.node < 0) throw ValidationError("AdamW: parameter '" + p.name +
                                                  "' was not bound to the tape");
            const Mat<S>& g = tape.grad(p.node);
            State& st = state_[p.name];
            if (st.m.size() == 0) {
                st.m.setZero(g.rows(), g.cols());
                st.v.setZero(g.rows(), g.cols());
            }
            st.m = st.m * static_cast<S>(cfg_.beta1) + g * static_cast<S>(1.0 - cfg_.beta1);
            st.v = (st.v.array() * static_cast<S>(cfg_.beta2) +
                    g.array().square() * static_cast<S>(1.0 - cfg_.beta2))
                       .matrix();
            const auto mhat = st.m.array() / static_cast<S>(bc1);
            const auto vhat = st.v.array() / static_cast<S>(bc2);
            p.value->array() -=
                static_cast<S>(lr) * (mhat / (vhat.sqrt() + static_cast<S>(cfg_.eps)));
            if (p.decay && cfg_.weight_decay > 0.0)
                p.value->array() -= static_cast<S>(lr * cfg_.weight_decay) * p.value->array();
        }
    }

private:
    struct State {
        Mat<S> m, v;
    };
    AdamWConfig<S> cfg_;
    double scale_ = 1.0;
    int step_ = 0;
    std::map<std::string, State> state_;
};

// Classic step decay: halve-style schedule keyed on the epoch index.
inline double step_decay(int epoch, int period, double factor) {
    if (period < 1) throw ConfigError("step_decay: period must be >= 1");
    return std::pow(factor, epoch / period);
}

// Registers every leaf in `params` on the tape and returns their ids in order.
template <class S>
void bind_all(Tape<S>& tape, std::vector<ParamBinding<S>>& params) {
    for (ParamBinding<S>& p : params) p.node = tape.leaf(*p.value);
}

}  // namespace geowalk::ad

#endif
